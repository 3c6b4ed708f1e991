use crate::error::{AdmError, Result};
use crate::geometry::{apply_with_param_jacobian, Homography, Point2};

use super::ncc::ncc_grad;
use super::structure::structure_map_recorded;
use super::warp::back_projection;
use super::{bilinear_with_grad, in_bounds, ncc, structure_map, DisplacementField, ImageBuffer, ValidityMask};

/// Appearance loss with its gradients.
#[derive(Debug, Clone)]
pub struct AppearanceGrad {
    /// Negative NCC of the structure maps.
    pub loss: f64,
    /// Gradient with respect to the nine raw homography entries.
    pub grad_h: [f64; 9],
    /// Gradient with respect to every cell of the (possibly coarse) field.
    pub grad_field: Option<DisplacementField>,
}

struct PixelRecord {
    value: f64,
    dvalue: (f64, f64),
    jx: [f64; 9],
    jy: [f64; 9],
    ds_du: [f64; 4],
}

fn warp_recorded(
    src: &ImageBuffer,
    g: &Homography,
    field: Option<&DisplacementField>,
) -> (ImageBuffer, ValidityMask, Vec<Option<PixelRecord>>) {
    let (w, h) = (src.width, src.height);
    let mut out = ImageBuffer::filled(w, h, 1, 0.0);
    let mut mask = ValidityMask {
        width: w,
        height: h,
        data: vec![false; w * h],
    };
    let mut recs = Vec::with_capacity(w * h);
    let m = &g.h;
    for y in 0..h {
        for x in 0..w {
            let (du, dv) = field.map_or((0.0, 0.0), |f| f.offset_at(x, y, w, h));
            let u = Point2::new(x as f64 + du, y as f64 + dv);
            let rec = match apply_with_param_jacobian(g, u) {
                Ok((s, jx, jy)) if in_bounds(w, h, s.x, s.y) => {
                    let (value, gx, gy) = bilinear_with_grad(src, s.x, s.y);
                    let d = m[6] * u.x + m[7] * u.y + m[8];
                    let ds_du = [
                        (m[0] - s.x * m[6]) / d,
                        (m[1] - s.x * m[7]) / d,
                        (m[3] - s.y * m[6]) / d,
                        (m[4] - s.y * m[7]) / d,
                    ];
                    let i = y * w + x;
                    out.data[i] = value;
                    mask.data[i] = true;
                    Some(PixelRecord {
                        value,
                        dvalue: (gx, gy),
                        jx,
                        jy,
                        ds_du,
                    })
                }
                _ => None,
            };
            recs.push(rec);
        }
    }
    (out, mask, recs)
}

fn check_shapes(src: &ImageBuffer, dest_struct: &ImageBuffer) -> Result<()> {
    if src.width != dest_struct.width || src.height != dest_struct.height || dest_struct.channels != 1 {
        return Err(AdmError::shape(
            format!("{}x{}x1", src.width, src.height),
            format!("{}x{}x{}", dest_struct.width, dest_struct.height, dest_struct.channels),
        ));
    }
    Ok(())
}

/// Negative NCC between the structure map of the warped source and a
/// precomputed destination structure map, over the warp validity mask.
pub fn appearance_loss(
    src: &ImageBuffer,
    h: &Homography,
    field: Option<&DisplacementField>,
    dest_struct: &ImageBuffer,
) -> Result<f64> {
    check_shapes(src, dest_struct)?;
    let gray = src.to_gray();
    let (warped, mask) = super::warp_composite(&gray, h, field)?;
    Ok(-ncc(&structure_map(&warped), dest_struct, &mask)?)
}

fn mat_mul(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = (0..3).map(|k| a[r * 3 + k] * b[k * 3 + c]).sum();
        }
    }
    out
}

fn transpose(a: &[f64; 9]) -> [f64; 9] {
    [a[0], a[3], a[6], a[1], a[4], a[7], a[2], a[5], a[8]]
}

/// [`appearance_loss`] with analytic gradients through the structure map,
/// the bilinear sampler, the projective map and the matrix inverse.
pub fn appearance_loss_grad(
    src: &ImageBuffer,
    h: &Homography,
    field: Option<&DisplacementField>,
    dest_struct: &ImageBuffer,
) -> Result<AppearanceGrad> {
    check_shapes(src, dest_struct)?;
    let gray = src.to_gray();
    let hn = h.normalize()?;
    let g_raw = hn.invert()?;
    let g = back_projection(h)?;
    let (w, hgt) = (src.width, src.height);
    let (warped, mask, recs) = warp_recorded(&gray, &g, field);
    let (sm, srec) = structure_map_recorded(&warped);
    let (r, dncc) = ncc_grad(&sm, dest_struct, &mask)?;
    let dsm: Vec<f64> = dncc.iter().map(|v| -v).collect();
    let dwarp = super::structure_map_backward(&srec, &dsm);

    let mut grad_g = [0.0; 9];
    let mut grad_field = field.map(|f| DisplacementField::zeros(f.width, f.height));
    for y in 0..hgt {
        for x in 0..w {
            let i = y * w + x;
            let Some(rec) = &recs[i] else { continue };
            let go = dwarp[i];
            if go == 0.0 {
                continue;
            }
            debug_assert!(rec.value.is_finite());
            let (gx, gy) = (go * rec.dvalue.0, go * rec.dvalue.1);
            for k in 0..9 {
                grad_g[k] += gx * rec.jx[k] + gy * rec.jy[k];
            }
            if let (Some(gf), Some(f)) = (grad_field.as_mut(), field) {
                let gu = gx * rec.ds_du[0] + gy * rec.ds_du[2];
                let gv = gx * rec.ds_du[1] + gy * rec.ds_du[3];
                for (j, wgt) in f.upsample_weights(x, y, w, hgt) {
                    gf.u[j] += wgt * gu;
                    gf.v[j] += wgt * gv;
                }
            }
        }
    }
    // g is either g_raw / g_raw[8] or g_raw itself; the loss is invariant
    // to the scale of either matrix.
    let g_scale = if g_raw.is_normalizable() { 1.0 / g_raw.h[8] } else { 1.0 };
    let grad_graw: [f64; 9] = std::array::from_fn(|k| grad_g[k] * g_scale);
    let gt = transpose(&g_raw.h);
    let grad_hn = mat_mul(&mat_mul(&gt, &grad_graw), &gt);
    let grad_h = std::array::from_fn(|k| -grad_hn[k] / h.h[8]);
    Ok(AppearanceGrad {
        loss: -r,
        grad_h,
        grad_field,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::patterns::{render, PatternKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn smooth_image(n: usize) -> ImageBuffer {
        ImageBuffer::from_fn(n, n, |x, y| {
            let (xf, yf) = (x as f64, y as f64);
            0.5 + 0.2 * (0.37 * xf + 0.11 * yf).sin() + 0.2 * (0.23 * yf - 0.07 * xf).cos() * (0.05 * xf).sin()
        })
    }

    #[test]
    fn loss_is_minus_one_at_the_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src = render(PatternKind::Vessels, 48, &mut rng);
        let h = Homography::similarity(1.05, 0.1, Point2::new(24.0, 24.0), 1.5, -1.0);
        let mut field = DisplacementField::zeros(12, 12);
        field.u.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        let (dest, _) = super::super::warp_composite(&src, &h, Some(&field)).unwrap();
        let dsm = structure_map(&dest);
        let loss = appearance_loss(&src, &h, Some(&field), &dsm).unwrap();
        assert!((loss + 1.0).abs() < 1e-12);
        let other = appearance_loss(&src, &Homography::identity(), None, &dsm).unwrap();
        assert!(other > loss + 0.1);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let n = 24;
        let src = smooth_image(n);
        let h_true = Homography::similarity(1.04, 0.06, Point2::new(12.0, 12.0), 0.8, -0.6);
        let (dest, _) = super::super::warp_global(&src, &h_true).unwrap();
        let dsm = structure_map(&dest);
        let h = Homography::new([1.01, 0.02, 0.3, -0.03, 0.99, 0.2, 2e-4, -1e-4, 1.02]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut field = DisplacementField::zeros(6, 6);
        for i in 0..36 {
            field.u[i] = rng.gen_range(-0.4..0.4);
            field.v[i] = rng.gen_range(-0.4..0.4);
        }
        let res = appearance_loss_grad(&src, &h, Some(&field), &dsm).unwrap();
        let base = appearance_loss(&src, &h, Some(&field), &dsm).unwrap();
        assert!((res.loss - base).abs() < 1e-12);

        let scales = [1e-3, 1e-3, 1e-1, 1e-3, 1e-3, 1e-1, 1e-5, 1e-5, 1e-3];
        for k in 0..9 {
            let eps = 1e-4 * scales[k];
            let mut hp = h;
            let mut hm = h;
            hp.h[k] += eps;
            hm.h[k] -= eps;
            let fd = (appearance_loss(&src, &hp, Some(&field), &dsm).unwrap()
                - appearance_loss(&src, &hm, Some(&field), &dsm).unwrap())
                / (2.0 * eps);
            let an = res.grad_h[k];
            assert!(
                (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()) + 1e-6,
                "entry {k}: fd {fd} analytic {an}"
            );
        }
        let gf = res.grad_field.unwrap();
        for i in 0..36 {
            let eps = 1e-5;
            let mut fp = field.clone();
            let mut fm = field.clone();
            fp.v[i] += eps;
            fm.v[i] -= eps;
            let fd = (appearance_loss(&src, &h, Some(&fp), &dsm).unwrap()
                - appearance_loss(&src, &h, Some(&fm), &dsm).unwrap())
                / (2.0 * eps);
            assert!(
                (fd - gf.v[i]).abs() <= 1e-3 * fd.abs().max(gf.v[i].abs()) + 1e-6,
                "cell {i}: fd {fd} analytic {}",
                gf.v[i]
            );
        }
    }
}
