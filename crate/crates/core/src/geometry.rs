//! Plane projective maps and point-set distances between them.
//!
//! A [`Homography`] stores nine raw parameters in row-major order. The
//! diffusion chain works on the raw 9-vector, so nothing here normalizes
//! implicitly: call [`Homography::normalize`] when a canonical
//! representative (`h[8] == 1`) is needed.

use serde::{Deserialize, Serialize};

use crate::error::{AdmError, Result};

/// Minimum absolute value for a projective denominator or for `h[8]`.
pub const PROJECTION_EPS: f64 = 1e-8;
/// Minimum absolute determinant of an invertible homography.
pub const SINGULAR_EPS: f64 = 1e-10;

const MAGIC: &[u8; 4] = b"ADMH";

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// 3x3 projective map, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    pub h: [f64; 9],
}

impl Default for Homography {
    fn default() -> Self {
        Self::identity()
    }
}

impl Homography {
    pub const fn new(h: [f64; 9]) -> Self {
        Self { h }
    }

    pub const fn identity() -> Self {
        Self::new([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
    }

    pub const fn translation(tx: f64, ty: f64) -> Self {
        Self::new([1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0])
    }

    /// Rotation by `angle` radians and isotropic `scale` about `center`,
    /// followed by a translation of `(tx, ty)`.
    pub fn similarity(scale: f64, angle: f64, center: Point2, tx: f64, ty: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let a = scale * c;
        let b = scale * s;
        // x' = R (x - center) + center + t
        let h2 = center.x - a * center.x + b * center.y + tx;
        let h5 = center.y - b * center.x - a * center.y + ty;
        Self::new([a, -b, h2, b, a, h5, 0.0, 0.0, 1.0])
    }

    pub fn is_finite(&self) -> bool {
        self.h.iter().all(|v| v.is_finite())
    }

    pub fn det(&self) -> f64 {
        let h = &self.h;
        h[0] * (h[4] * h[8] - h[5] * h[7]) - h[1] * (h[3] * h[8] - h[5] * h[6])
            + h[2] * (h[3] * h[7] - h[4] * h[6])
    }

    pub fn is_normalizable(&self) -> bool {
        self.h[8].abs() > PROJECTION_EPS && self.is_finite()
    }

    /// Divides every entry by `h[8]`.
    pub fn normalize(&self) -> Result<Self> {
        let d = self.h[8];
        if !(d.abs() > PROJECTION_EPS) || !self.is_finite() {
            return Err(AdmError::DegenerateProjection(d.abs()));
        }
        let mut h = self.h;
        for v in &mut h {
            *v /= d;
        }
        Ok(Self::new(h))
    }

    /// Maps a point, failing when the projective denominator vanishes.
    pub fn apply(&self, p: Point2) -> Result<Point2> {
        let h = &self.h;
        let d = h[6] * p.x + h[7] * p.y + h[8];
        if !(d.abs() > PROJECTION_EPS) {
            return Err(AdmError::DegenerateProjection(d.abs()));
        }
        Ok(Point2::new(
            (h[0] * p.x + h[1] * p.y + h[2]) / d,
            (h[3] * p.x + h[4] * p.y + h[5]) / d,
        ))
    }

    /// Raw matrix product `self * rhs` (no normalization).
    pub fn matmul(&self, rhs: &Homography) -> Homography {
        let a = &self.h;
        let b = &rhs.h;
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] =
                    a[r * 3] * b[c] + a[r * 3 + 1] * b[3 + c] + a[r * 3 + 2] * b[6 + c];
            }
        }
        Homography::new(out)
    }

    /// `compose(a, b)` maps `p` to `a(b(p))`; the result is normalized.
    pub fn compose(a: &Homography, b: &Homography) -> Result<Homography> {
        a.matmul(b).normalize()
    }

    /// Exact inverse via adjugate over determinant.
    pub fn invert(&self) -> Result<Homography> {
        let det = self.det();
        if !(det.abs() > SINGULAR_EPS) || !det.is_finite() {
            return Err(AdmError::SingularHomography(det.abs()));
        }
        let h = &self.h;
        let adj = [
            h[4] * h[8] - h[5] * h[7],
            h[2] * h[7] - h[1] * h[8],
            h[1] * h[5] - h[2] * h[4],
            h[5] * h[6] - h[3] * h[8],
            h[0] * h[8] - h[2] * h[6],
            h[2] * h[3] - h[0] * h[5],
            h[3] * h[7] - h[4] * h[6],
            h[1] * h[6] - h[0] * h[7],
            h[0] * h[4] - h[1] * h[3],
        ];
        let mut inv = [0.0; 9];
        for (o, a) in inv.iter_mut().zip(adj) {
            *o = a / det;
        }
        Ok(Homography::new(inv))
    }

    /// Residual `h - identity` as a 9-vector.
    pub fn residual(&self) -> [f64; 9] {
        let id = Homography::identity().h;
        let mut r = [0.0; 9];
        for i in 0..9 {
            r[i] = self.h[i] - id[i];
        }
        r
    }

    pub fn from_residual(r: &[f64]) -> Homography {
        let mut h = Homography::identity().h;
        for (v, d) in h.iter_mut().zip(r) {
            *v += d;
        }
        Homography::new(h)
    }

    /// `"ADMH"` followed by nine little-endian f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 72);
        out.extend_from_slice(MAGIC);
        for v in self.h {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Homography> {
        if bytes.len() != 76 || &bytes[..4] != MAGIC {
            return Err(AdmError::Format {
                path: "<homography>".into(),
                reason: format!("expected 76 bytes starting with ADMH, got {}", bytes.len()),
            });
        }
        let mut h = [0.0; 9];
        for (i, chunk) in bytes[4..].chunks_exact(8).enumerate() {
            h[i] = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        Ok(Homography::new(h))
    }
}

/// Jacobian of a projective map with respect to its nine raw entries.
///
/// Returns the mapped point together with `d(out.x)/dh` and `d(out.y)/dh`.
pub fn apply_with_param_jacobian(h: &Homography, p: Point2) -> Result<(Point2, [f64; 9], [f64; 9])> {
    let q = h.apply(p)?;
    let m = &h.h;
    let d = m[6] * p.x + m[7] * p.y + m[8];
    let mut jx = [0.0; 9];
    let mut jy = [0.0; 9];
    jx[0] = p.x / d;
    jx[1] = p.y / d;
    jx[2] = 1.0 / d;
    jx[6] = -q.x * p.x / d;
    jx[7] = -q.x * p.y / d;
    jx[8] = -q.x / d;
    jy[3] = p.x / d;
    jy[4] = p.y / d;
    jy[5] = 1.0 / d;
    jy[6] = -q.y * p.x / d;
    jy[7] = -q.y * p.y / d;
    jy[8] = -q.y / d;
    Ok((q, jx, jy))
}

/// Ordered set of pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelGrid {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Point2>,
}

impl PixelGrid {
    /// Every pixel center of a `width x height` image, row-major.
    pub fn full(width: usize, height: usize) -> Self {
        let mut points = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                points.push(Point2::new(x as f64, y as f64));
            }
        }
        Self {
            width,
            height,
            points,
        }
    }

    /// `cols x rows` uniform lattice spanning the interior of the image
    /// with `margin` (fraction of the extent) left on every side.
    pub fn lattice(width: usize, height: usize, cols: usize, rows: usize, margin: f64) -> Self {
        let span = |n: usize, extent: usize, i: usize| -> f64 {
            let lo = margin * (extent as f64 - 1.0);
            let hi = (1.0 - margin) * (extent as f64 - 1.0);
            if n <= 1 {
                0.5 * (lo + hi)
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        };
        let mut points = Vec::with_capacity(cols * rows);
        for r in 0..rows {
            for c in 0..cols {
                points.push(Point2::new(span(cols, width, c), span(rows, height, r)));
            }
        }
        Self {
            width,
            height,
            points,
        }
    }

    /// The 20-point (5 columns by 4 rows, 10% margin) set used by the
    /// homography point-distance losses.
    pub fn loss_points(width: usize, height: usize) -> Self {
        Self::lattice(width, height, 5, 4, 0.1)
    }

    pub fn corners(width: usize, height: usize) -> Self {
        let (w, h) = (width as f64 - 1.0, height as f64 - 1.0);
        Self {
            width,
            height,
            points: vec![
                Point2::new(0.0, 0.0),
                Point2::new(w, 0.0),
                Point2::new(w, h),
                Point2::new(0.0, h),
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn vector_p_norm(dx: f64, dy: f64, p: f64) -> f64 {
    if p == 2.0 {
        dx.hypot(dy)
    } else {
        (dx.abs().powf(p) + dy.abs().powf(p)).powf(1.0 / p)
    }
}

/// Sum over `points` of the p-norm of `a(x) - b(x)`.
pub fn p_norm_distance(a: &Homography, b: &Homography, points: &PixelGrid, p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(AdmError::InvalidParameter(format!("p must be >= 1, got {p}")));
    }
    let mut total = 0.0;
    for &x in &points.points {
        let pa = a.apply(x)?;
        let pb = b.apply(x)?;
        total += vector_p_norm(pa.x - pb.x, pa.y - pb.y, p);
    }
    Ok(total)
}

/// `p_norm_distance(a, b, points, 2)` together with its gradient with respect
/// to the raw entries of `a`. Points where the two maps coincide contribute
/// a zero subgradient.
pub fn p2_distance_grad(a: &Homography, b: &Homography, points: &PixelGrid) -> Result<(f64, [f64; 9])> {
    let mut total = 0.0;
    let mut grad = [0.0; 9];
    for &x in &points.points {
        let (pa, jx, jy) = apply_with_param_jacobian(a, x)?;
        let pb = b.apply(x)?;
        let (dx, dy) = (pa.x - pb.x, pa.y - pb.y);
        let n = dx.hypot(dy);
        total += n;
        if n > 1e-12 {
            let (ux, uy) = (dx / n, dy / n);
            for k in 0..9 {
                grad[k] += ux * jx[k] + uy * jy[k];
            }
        }
    }
    Ok((total, grad))
}

/// Mean distance between the images of the four image corners.
pub fn mean_corner_error(pred: &Homography, gt: &Homography, width: usize, height: usize) -> Result<f64> {
    let corners = PixelGrid::corners(width, height);
    Ok(p_norm_distance(pred, gt, &corners, 2.0)? / 4.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_homography(rng: &mut impl Rng) -> Homography {
        let mut h = Homography::identity().h;
        for (i, v) in h.iter_mut().enumerate() {
            *v += match i {
                2 | 5 => rng.gen_range(-10.0..10.0),
                6 | 7 => rng.gen_range(-1e-3..1e-3),
                8 => 0.0,
                _ => rng.gen_range(-0.3..0.3),
            };
        }
        Homography::new(h)
    }

    // Plain 3x3 matrix product on nested arrays, independent of `matmul`.
    fn oracle_product(a: &Homography, b: &Homography) -> [[f64; 3]; 3] {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                for k in 0..3 {
                    *cell += a.h[i * 3 + k] * b.h[k * 3 + j];
                }
            }
        }
        m
    }

    #[test]
    fn apply_examples() {
        let p = Homography::identity().apply(Point2::new(5.0, 7.0)).unwrap();
        assert_eq!(p, Point2::new(5.0, 7.0));
        let p = Homography::translation(3.0, 4.0).apply(Point2::new(0.0, 0.0)).unwrap();
        assert_eq!(p, Point2::new(3.0, 4.0));
        let h = Homography::new([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.01, 0.0, 1.0]);
        let p = h.apply(Point2::new(10.0, 0.0)).unwrap();
        assert!((p.x - 10.0 / 1.1).abs() < 1e-12);
        assert_eq!(p.y, 0.0);
    }

    #[test]
    fn apply_degenerate_denominator() {
        let h = Homography::new([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, -0.1, 0.0, 1.0]);
        assert!(matches!(
            h.apply(Point2::new(10.0, 3.0)),
            Err(AdmError::DegenerateProjection(_))
        ));
    }

    #[test]
    fn compose_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = random_homography(&mut rng);
        let c = Homography::compose(&Homography::identity(), &h).unwrap();
        assert_eq!(c, h.normalize().unwrap());
        let t = Homography::compose(&Homography::translation(1.0, 0.0), &Homography::translation(0.0, 1.0)).unwrap();
        assert_eq!(t, Homography::translation(1.0, 1.0));

        let a = random_homography(&mut rng);
        let b = random_homography(&mut rng);
        let ab = Homography::compose(&a, &b).unwrap();
        let m = oracle_product(&a, &b);
        for p in PixelGrid::loss_points(64, 64).points {
            let d = m[2][0] * p.x + m[2][1] * p.y + m[2][2];
            let ox = (m[0][0] * p.x + m[0][1] * p.y + m[0][2]) / d;
            let oy = (m[1][0] * p.x + m[1][1] * p.y + m[1][2]) / d;
            let q = ab.apply(p).unwrap();
            assert!((q.x - ox).abs() < 1e-9 && (q.y - oy).abs() < 1e-9);
            let nested = a.apply(b.apply(p).unwrap()).unwrap();
            assert!(q.distance(nested) < 1e-9);
        }
    }

    #[test]
    fn invert_examples() {
        assert_eq!(Homography::identity().invert().unwrap(), Homography::identity());
        assert_eq!(
            Homography::translation(3.0, 4.0).invert().unwrap(),
            Homography::translation(-3.0, -4.0)
        );
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let h = random_homography(&mut rng);
            let c = Homography::compose(&h, &h.invert().unwrap()).unwrap();
            for (v, e) in c.h.iter().zip(Homography::identity().h) {
                assert!((v - e).abs() < 1e-8);
            }
        }
        let singular = Homography::new([1.0, 2.0, 0.0, 2.0, 4.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(matches!(singular.invert(), Err(AdmError::SingularHomography(_))));
    }

    #[test]
    fn p_norm_examples() {
        let pts = PixelGrid::loss_points(64, 48);
        assert_eq!(pts.len(), 20);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = random_homography(&mut rng);
        assert_eq!(p_norm_distance(&h, &h, &pts, 2.0).unwrap(), 0.0);
        let d = p_norm_distance(&Homography::translation(3.0, 4.0), &Homography::identity(), &pts, 2.0).unwrap();
        assert!((d - 100.0).abs() < 1e-12);

        // brute-force: explicit rational evaluation of each point
        let a = random_homography(&mut rng);
        let b = random_homography(&mut rng);
        let mut expected = 0.0;
        for p in &pts.points {
            let eval = |m: &Homography| {
                let w = m.h[6] * p.x + m.h[7] * p.y + m.h[8];
                ((m.h[0] * p.x + m.h[1] * p.y + m.h[2]) / w, (m.h[3] * p.x + m.h[4] * p.y + m.h[5]) / w)
            };
            let (ax, ay) = eval(&a);
            let (bx, by) = eval(&b);
            expected += ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt();
        }
        let got = p_norm_distance(&a, &b, &pts, 2.0).unwrap();
        assert!((got - expected).abs() < 1e-9 * expected.max(1.0));
        assert!(p_norm_distance(&a, &b, &pts, 0.5).is_err());
    }

    #[test]
    fn p2_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = PixelGrid::loss_points(64, 64);
        let a = random_homography(&mut rng);
        let b = random_homography(&mut rng);
        let (v, g) = p2_distance_grad(&a, &b, &pts).unwrap();
        assert!((v - p_norm_distance(&a, &b, &pts, 2.0).unwrap()).abs() < 1e-12);
        for k in 0..9 {
            let step = if k >= 6 { 1e-8 } else { 1e-6 };
            let mut hp = a;
            let mut hm = a;
            hp.h[k] += step;
            hm.h[k] -= step;
            let fd = (p_norm_distance(&hp, &b, &pts, 2.0).unwrap() - p_norm_distance(&hm, &b, &pts, 2.0).unwrap())
                / (2.0 * step);
            assert!((fd - g[k]).abs() <= 1e-5 * fd.abs().max(1.0), "k={k} fd={fd} an={}", g[k]);
        }
    }

    #[test]
    fn serialization_layout() {
        let h = Homography::new([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let bytes = h.to_bytes();
        assert_eq!(&bytes[..4], b"ADMH");
        assert_eq!(&bytes[4..12], &1.0f64.to_le_bytes());
        assert_eq!(Homography::from_bytes(&bytes).unwrap(), h);
        assert!(Homography::from_bytes(&bytes[..20]).is_err());
    }

    #[test]
    fn similarity_fixes_center() {
        let c = Point2::new(31.5, 31.5);
        let h = Homography::similarity(1.7, 0.4, c, 0.0, 0.0);
        assert!(h.apply(c).unwrap().distance(c) < 1e-12);
    }

    proptest! {
        #[test]
        fn apply_invert_round_trip(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_homography(&mut rng);
            let inv = h.invert().unwrap();
            for _ in 0..1000 {
                let p = Point2::new(rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0));
                let back = inv.apply(h.apply(p).unwrap()).unwrap();
                prop_assert!(back.distance(p) < 1e-6);
            }
        }

        #[test]
        fn p_norm_symmetric_and_zero(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_homography(&mut rng);
            let b = random_homography(&mut rng);
            let pts = PixelGrid::loss_points(64, 64);
            let ab = p_norm_distance(&a, &b, &pts, 2.0).unwrap();
            let ba = p_norm_distance(&b, &a, &pts, 2.0).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
            prop_assert_eq!(p_norm_distance(&a, &a, &pts, 3.0).unwrap(), 0.0);
        }

        #[test]
        fn normalize_idempotent(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut h = random_homography(&mut rng);
            h.h[8] = rng.gen_range(0.5..2.0);
            let n1 = h.normalize().unwrap();
            let n2 = n1.normalize().unwrap();
            prop_assert_eq!(n1.h, n2.h);
        }

        #[test]
        fn compose_associative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_homography(&mut rng);
            let b = random_homography(&mut rng);
            let c = random_homography(&mut rng);
            let left = Homography::compose(&Homography::compose(&a, &b).unwrap(), &c).unwrap();
            let right = Homography::compose(&a, &Homography::compose(&b, &c).unwrap()).unwrap();
            for (l, r) in left.h.iter().zip(right.h) {
                prop_assert!((l - r).abs() < 1e-9);
            }
        }
    }
}
