use crate::error::Result;
use crate::geometry::{Homography, Point2};

use super::{bilinear_channel, in_bounds, DisplacementField, ImageBuffer, ValidityMask};

/// One global-plus-local stage of a warp chain.
#[derive(Debug, Clone)]
pub struct WarpStage {
    pub h: Homography,
    pub field: Option<DisplacementField>,
}

impl WarpStage {
    pub fn new(h: Homography, field: Option<DisplacementField>) -> Self {
        Self { h, field }
    }
}

/// Back-projection of a destination pixel into the source frame.
pub(crate) fn back_projection(h: &Homography) -> Result<Homography> {
    let g = h.normalize()?.invert()?;
    Ok(if g.is_normalizable() { g.normalize()? } else { g })
}

pub(crate) fn offset_continuous(field: &DisplacementField, x: f64, y: f64, fine_w: usize, fine_h: usize) -> (f64, f64) {
    let (cx, cy) = if field.width == fine_w && field.height == fine_h {
        (x, y)
    } else {
        (
            (x + 0.5) * field.width as f64 / fine_w as f64 - 0.5,
            (y + 0.5) * field.height as f64 / fine_h as f64 - 0.5,
        )
    };
    let cx = cx.clamp(0.0, (field.width - 1) as f64);
    let cy = cy.clamp(0.0, (field.height - 1) as f64);
    let x0 = if field.width < 2 { 0 } else { (cx.floor() as usize).min(field.width - 2) };
    let y0 = if field.height < 2 { 0 } else { (cy.floor() as usize).min(field.height - 2) };
    let fx = cx - x0 as f64;
    let fy = cy - y0 as f64;
    let x1 = (x0 + 1).min(field.width - 1);
    let y1 = (y0 + 1).min(field.height - 1);
    let w = field.width;
    let lerp = |c: &[f64]| {
        (1.0 - fx) * (1.0 - fy) * c[y0 * w + x0]
            + fx * (1.0 - fy) * c[y0 * w + x1]
            + (1.0 - fx) * fy * c[y1 * w + x0]
            + fx * fy * c[y1 * w + x1]
    };
    (lerp(&field.u), lerp(&field.v))
}

/// Inverse warp through a chain of stages applied in order (stage 0 first).
/// Every intermediate coordinate must stay inside the image for a pixel to be
/// valid; the source is sampled once.
pub fn warp_stages(src: &ImageBuffer, stages: &[WarpStage]) -> Result<(ImageBuffer, ValidityMask)> {
    let (w, h, c) = (src.width, src.height, src.channels);
    let inverses = stages
        .iter()
        .map(|s| back_projection(&s.h))
        .collect::<Result<Vec<_>>>()?;
    let mut out = ImageBuffer::filled(w, h, c, 0.0);
    let mut mask = ValidityMask {
        width: w,
        height: h,
        data: vec![false; w * h],
    };
    for y in 0..h {
        for x in 0..w {
            let mut q = Point2::new(x as f64, y as f64);
            let mut valid = true;
            for (k, (stage, g)) in stages.iter().zip(&inverses).enumerate().rev() {
                let (du, dv) = match &stage.field {
                    Some(f) if k == stages.len() - 1 => f.offset_at(x, y, w, h),
                    Some(f) => offset_continuous(f, q.x, q.y, w, h),
                    None => (0.0, 0.0),
                };
                match g.apply(Point2::new(q.x + du, q.y + dv)) {
                    Ok(s) if in_bounds(w, h, s.x, s.y) => q = s,
                    _ => {
                        valid = false;
                        break;
                    }
                }
            }
            if !valid {
                continue;
            }
            let i = y * w + x;
            mask.data[i] = true;
            for ch in 0..c {
                out.data[i * c + ch] = bilinear_channel(src, ch, q.x, q.y);
            }
        }
    }
    Ok((out, mask))
}

/// Samples `src` at the back-projection of `p + v(p)` for every pixel `p`.
pub fn warp_composite(
    src: &ImageBuffer,
    h: &Homography,
    field: Option<&DisplacementField>,
) -> Result<(ImageBuffer, ValidityMask)> {
    warp_stages(src, &[WarpStage::new(*h, field.cloned())])
}

/// Inverse warp by a homography alone.
pub fn warp_global(src: &ImageBuffer, h: &Homography) -> Result<(ImageBuffer, ValidityMask)> {
    warp_composite(src, h, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::AdmError;
    use proptest::prelude::*;

    fn step_edge(w: usize, h: usize, at: usize) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, |x, _| if x >= at { 1.0 } else { 0.0 })
    }

    fn textured(w: usize, h: usize) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, |x, y| ((x * 37 + y * 91) % 255) as f64 / 255.0)
    }

    #[test]
    fn identity_is_bitwise_identity() {
        let src = textured(17, 13);
        let (out, mask) = warp_global(&src, &Homography::identity()).unwrap();
        assert_eq!(out, src);
        assert_eq!(mask.count(), 17 * 13);
    }

    #[test]
    fn full_shift_leaves_nothing() {
        let src = textured(16, 16);
        let (out, mask) = warp_global(&src, &Homography::translation(16.0, 0.0)).unwrap();
        assert!(out.data.iter().all(|v| *v == 0.0));
        assert_eq!(mask.count(), 0);
    }

    #[test]
    fn unit_translation_moves_edge_right() {
        let src = step_edge(12, 5, 6);
        let (out, mask) = warp_global(&src, &Homography::translation(1.0, 0.0)).unwrap();
        for y in 0..5 {
            assert!(!mask.data[y * 12]);
            for x in 1..12 {
                let expected = if x >= 7 { 1.0 } else { 0.0 };
                assert_eq!(out.get(x, y, 0), expected);
            }
        }
    }

    #[test]
    fn zero_field_matches_global_warp() {
        let src = textured(20, 20);
        let h = Homography::new([1.02, 0.05, 1.3, -0.04, 0.98, -0.7, 1e-4, -2e-4, 1.0]);
        let a = warp_global(&src, &h).unwrap();
        let b = warp_composite(&src, &h, Some(&DisplacementField::zeros(20, 20))).unwrap();
        let c = warp_composite(&src, &h, Some(&DisplacementField::zeros(5, 5))).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn unit_field_on_constant_image() {
        let src = ImageBuffer::filled(10, 10, 1, 0.42);
        let f = DisplacementField::constant(10, 10, 1.0, 0.0);
        let (out, mask) = warp_composite(&src, &Homography::identity(), Some(&f)).unwrap();
        for i in 0..100 {
            if mask.data[i] {
                assert_eq!(out.data[i], 0.42);
            }
        }
        assert_eq!(mask.count(), 90);
    }

    #[test]
    fn unit_field_shifts_stripes() {
        let src = ImageBuffer::from_fn(12, 4, |x, _| if x % 3 == 0 { 1.0 } else { 0.0 });
        let f = DisplacementField::constant(12, 4, 1.0, 0.0);
        let (out, mask) = warp_composite(&src, &Homography::identity(), Some(&f)).unwrap();
        for y in 0..4 {
            for x in 0..11 {
                assert!(mask.data[y * 12 + x]);
                assert_eq!(out.get(x, y, 0), src.get(x + 1, y, 0));
            }
        }
    }

    #[test]
    fn singular_homography_is_rejected() {
        let src = textured(8, 8);
        let h = Homography::new([1.0, 2.0, 0.0, 2.0, 4.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(matches!(warp_global(&src, &h), Err(AdmError::SingularHomography(_))));
    }

    #[test]
    fn two_stage_chain_matches_composed_homography() {
        let src = ImageBuffer::from_fn(24, 24, |x, y| ((x as f64 * 0.3).sin() + (y as f64 * 0.2).cos()) * 0.25 + 0.5);
        let a = Homography::similarity(1.03, 0.04, Point2::new(12.0, 12.0), 0.5, -0.3);
        let b = Homography::translation(-0.7, 0.4);
        let chain = warp_stages(&src, &[WarpStage::new(a, None), WarpStage::new(b, None)]).unwrap();
        let direct = warp_global(&src, &Homography::compose(&b, &a).unwrap()).unwrap();
        for i in 0..24 * 24 {
            if chain.1.data[i] && direct.1.data[i] {
                assert!((chain.0.data[i] - direct.0.data[i]).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn integer_translation_is_array_shift(tx in -5i32..=5, ty in -5i32..=5) {
            let src = textured(16, 12);
            let (out, mask) = warp_global(&src, &Homography::translation(tx as f64, ty as f64)).unwrap();
            for y in 0..12i32 {
                for x in 0..16i32 {
                    let (sx, sy) = (x - tx, y - ty);
                    let inside = (0..16).contains(&sx) && (0..12).contains(&sy);
                    prop_assert_eq!(mask.data[(y * 16 + x) as usize], inside);
                    if inside {
                        prop_assert_eq!(out.get(x as usize, y as usize, 0), src.get(sx as usize, sy as usize, 0));
                    }
                }
            }
        }
    }
}
