use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AdmError, Result};
use crate::geometry::{Homography, Point2};
use crate::imaging::io::{read_field, read_pnm, write_field, write_pnm};
use crate::imaging::patterns::{pick_kind, render};
use crate::imaging::{degrade, gaussian_blur, warp_composite, Degradation, DisplacementField, ImageBuffer};
use crate::seed::derive_seed;

const MAX_TRIES: usize = 10;
const MIN_OVERLAP: f64 = 0.25;

/// Ranges of the random ground-truth homography.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformRange {
    /// Maximum absolute translation in pixels.
    pub max_translation: f64,
    /// Maximum absolute rotation in degrees.
    pub max_rotation_deg: f64,
    /// Scale is drawn log-uniformly in `[scale_min, scale_max]`.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Maximum absolute projective coefficient, per pixel of offset from
    /// the image center.
    pub max_perspective: f64,
    /// Rotate the base image by a random multiple of 90 degrees first.
    pub rotate_base: bool,
}

impl Default for TransformRange {
    fn default() -> Self {
        Self {
            max_translation: 12.0,
            max_rotation_deg: 30.0,
            scale_min: 0.8,
            scale_max: 1.25,
            max_perspective: 1e-4,
            rotate_base: true,
        }
    }
}

impl TransformRange {
    /// No motion at all.
    pub fn zero() -> Self {
        Self {
            max_translation: 0.0,
            max_rotation_deg: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            max_perspective: 0.0,
            rotate_base: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.max_translation >= 0.0
            && self.max_rotation_deg >= 0.0
            && self.max_perspective >= 0.0
            && self.scale_min > 0.0
            && self.scale_min <= self.scale_max
            && [self.max_translation, self.max_rotation_deg, self.scale_max, self.max_perspective]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(AdmError::InvalidConfig(format!("invalid transform range {self:?}")))
        }
    }
}

/// Everything that controls how a pair is synthesized from a base image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairSpec {
    pub range: TransformRange,
    /// Upper bound on the displacement magnitude in pixels; 0 disables it.
    pub deform_amplitude: f64,
    /// Side of the coarse displacement grid.
    pub deform_grid: usize,
    pub degradation: Degradation,
}

impl Default for PairSpec {
    fn default() -> Self {
        Self {
            range: TransformRange::default(),
            deform_amplitude: 0.0,
            deform_grid: 16,
            degradation: Degradation::None,
        }
    }
}

impl PairSpec {
    pub fn validate(&self) -> Result<()> {
        self.range.validate()?;
        self.degradation.validate()?;
        if !(self.deform_amplitude >= 0.0 && self.deform_amplitude.is_finite()) {
            return Err(AdmError::InvalidConfig("deform_amplitude must be non-negative".into()));
        }
        if self.deform_grid < 2 {
            return Err(AdmError::InvalidConfig("deform_grid must be at least 2".into()));
        }
        Ok(())
    }
}

/// A synthetic source/destination pair with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub id: String,
    pub source: ImageBuffer,
    pub dest: ImageBuffer,
    /// Maps source coordinates to destination coordinates.
    pub h_gt: Homography,
    /// Coarse displacement in destination pixels; all zeros when absent.
    pub v_gt: DisplacementField,
    pub seed: u64,
    pub degradation: Degradation,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.gen();
    lo + (hi - lo) * u
}

fn random_homography(range: &TransformRange, w: usize, h: usize, rng: &mut ChaCha8Rng) -> Homography {
    let scale = uniform(rng, range.scale_min.ln(), range.scale_max.ln()).exp();
    let angle = uniform(rng, -range.max_rotation_deg, range.max_rotation_deg).to_radians();
    let tx = uniform(rng, -range.max_translation, range.max_translation);
    let ty = uniform(rng, -range.max_translation, range.max_translation);
    let px = uniform(rng, -range.max_perspective, range.max_perspective);
    let py = uniform(rng, -range.max_perspective, range.max_perspective);
    let c = Point2::new((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let sim = Homography::similarity(scale, angle, c, tx, ty);
    if px == 0.0 && py == 0.0 {
        return sim;
    }
    // Projective tilt about the center.
    let to_c = Homography::translation(-c.x, -c.y);
    let tilt = Homography::new([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, px, py, 1.0]);
    let back = Homography::translation(c.x, c.y);
    let p = back.matmul(&tilt).matmul(&to_c);
    let m = sim.matmul(&p);
    m.normalize().unwrap_or(sim)
}

/// `n` transforms drawn from `range` for `size`-pixel images.
pub(crate) fn sample_transforms(range: &TransformRange, size: usize, n: usize, seed: u64) -> Vec<Homography> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_homography(range, size, size, &mut rng)).collect()
}

fn random_field(grid: usize, amplitude: f64, rng: &mut ChaCha8Rng) -> DisplacementField {
    let plane = |rng: &mut ChaCha8Rng| {
        let data: Vec<f64> = (0..grid * grid).map(|_| StandardNormal.sample(rng)).collect();
        let img = ImageBuffer::new(grid, grid, 1, data).expect("grid is nonempty");
        gaussian_blur(&img, grid as f64 / 8.0).data
    };
    let u = plane(rng);
    let v = plane(rng);
    let mut field = DisplacementField {
        width: grid,
        height: grid,
        u,
        v,
    };
    let peak = field.max_magnitude();
    let target = amplitude * uniform(rng, 0.5, 1.0);
    if peak > 0.0 {
        field = field.scaled(target / peak);
    }
    field
}

fn is_constant(img: &ImageBuffer) -> bool {
    let first = img.data[0];
    img.data.iter().all(|v| *v == first)
}

/// Samples a ground-truth warp of `base` and renders the destination.
pub fn generate_pair(base: &ImageBuffer, spec: &PairSpec, seed: u64) -> Result<PairSample> {
    spec.validate()?;
    if is_constant(base) {
        return Err(AdmError::InvalidParameter("base image is constant".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = if spec.range.rotate_base {
        base.rotated90(rng.gen_range(0..4))
    } else {
        base.clone()
    };
    let (w, h) = (source.width, source.height);
    for _ in 0..MAX_TRIES {
        let h_gt = random_homography(&spec.range, w, h, &mut rng);
        let v_gt = if spec.deform_amplitude > 0.0 {
            random_field(spec.deform_grid, spec.deform_amplitude, &mut rng)
        } else {
            DisplacementField::zeros(spec.deform_grid, spec.deform_grid)
        };
        let field = (!v_gt.is_zero()).then_some(&v_gt);
        let (dest, mask) = match warp_composite(&source, &h_gt, field) {
            Ok(r) => r,
            Err(AdmError::DegenerateProjection(_) | AdmError::SingularHomography(_)) => continue,
            Err(e) => return Err(e),
        };
        if mask.fraction() < MIN_OVERLAP {
            continue;
        }
        let dest = degrade(&dest, &spec.degradation, derive_seed(seed, 0xDE6))?;
        return Ok(PairSample {
            id: String::new(),
            source,
            dest,
            h_gt,
            v_gt,
            seed,
            degradation: spec.degradation,
        });
    }
    Err(AdmError::InsufficientOverlap { tries: MAX_TRIES })
}

/// Pattern mix of checkerboards, vessel trees and blob fields.
pub const DEFAULT_PATTERN_WEIGHTS: [f64; 3] = [0.25, 0.5, 0.25];

/// `n` pairs on procedural base images; pair `i` uses `derive_seed(seed, i)`.
pub fn generate_suite(n: usize, size: usize, spec: &PairSpec, seed: u64) -> Result<Vec<PairSample>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let pair_seed = derive_seed(seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(pair_seed, 0xBA5E));
            let kind = pick_kind(DEFAULT_PATTERN_WEIGHTS, &mut rng);
            let base = render(kind, size, &mut rng);
            let mut pair = generate_pair(&base, spec, pair_seed)?;
            pair.id = format!("pair_{i:05}");
            Ok(pair)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    id: String,
    source: String,
    dest: String,
    h_gt: [f64; 9],
    v_gt: Option<String>,
    seed: u64,
    degradation: Degradation,
}

/// Contents of `dataset.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub pairs: Vec<String>,
    pub seed: u64,
    pub config_hash: String,
}

/// A loaded dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub pairs: Vec<PairSample>,
    pub seed: u64,
    pub config_hash: String,
}

const INDEX_FILE: &str = "dataset.json";

pub(crate) fn ext(img: &ImageBuffer) -> &'static str {
    if img.channels == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| AdmError::io(path, e))
}

/// Writes images as PGM/PPM with one JSON sidecar per pair and an index.
pub fn write_dataset(dir: &Path, pairs: &[PairSample], seed: u64, config_hash: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| AdmError::io(dir, e))?;
    for p in pairs {
        let src = format!("{}_src.{}", p.id, ext(&p.source));
        let dst = format!("{}_dst.{}", p.id, ext(&p.dest));
        write_pnm(&dir.join(&src), &p.source)?;
        write_pnm(&dir.join(&dst), &p.dest)?;
        let v_gt = if p.v_gt.is_zero() {
            None
        } else {
            let name = format!("{}_v.admt", p.id);
            write_field(&dir.join(&name), &p.v_gt)?;
            Some(name)
        };
        let side = Sidecar {
            id: p.id.clone(),
            source: src,
            dest: dst,
            h_gt: p.h_gt.h,
            v_gt,
            seed: p.seed,
            degradation: p.degradation,
        };
        write_json(&dir.join(format!("{}.json", p.id)), &side)?;
    }
    let index = DatasetIndex {
        pairs: pairs.iter().map(|p| p.id.clone()).collect(),
        seed,
        config_hash: config_hash.to_string(),
    };
    write_json(&dir.join(INDEX_FILE), &index)
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| AdmError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| AdmError::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Reads one pair by its sidecar.
pub fn read_pair(dir: &Path, id: &str, field_grid: usize) -> Result<PairSample> {
    let side: Sidecar = read_json(&dir.join(format!("{id}.json")))?;
    let source = read_pnm(&dir.join(&side.source))?;
    let dest = read_pnm(&dir.join(&side.dest))?;
    let v_gt = match &side.v_gt {
        Some(name) => read_field(&dir.join(name))?,
        None => DisplacementField::zeros(field_grid, field_grid),
    };
    Ok(PairSample {
        id: side.id,
        source,
        dest,
        h_gt: Homography::new(side.h_gt),
        v_gt,
        seed: side.seed,
        degradation: side.degradation,
    })
}

/// Ground truth from a pair sidecar file, without loading its images.
pub(crate) fn read_ground_truth(sidecar: &Path, field_grid: usize) -> Result<(Homography, DisplacementField)> {
    let side: Sidecar = read_json(sidecar)?;
    let dir = sidecar.parent().unwrap_or(Path::new("."));
    let v_gt = match &side.v_gt {
        Some(name) => read_field(&dir.join(name))?,
        None => DisplacementField::zeros(field_grid, field_grid),
    };
    Ok((Homography::new(side.h_gt), v_gt))
}

/// Reads the index of a dataset directory.
pub fn read_index(dir: &Path) -> Result<DatasetIndex> {
    let index_path = dir.join(INDEX_FILE);
    if !index_path.exists() {
        return Err(AdmError::io(&index_path, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset index not found")));
    }
    read_json(&index_path)
}

/// Loads every pair listed in the dataset index.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let index = read_index(dir)?;
    let pairs = index
        .pairs
        .par_iter()
        .map(|id| read_pair(dir, id, 16))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        dir: dir.to_path_buf(),
        pairs,
        seed: index.seed,
        config_hash: index.config_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::warp_global;
    use crate::imaging::patterns::PatternKind;

    fn base() -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        render(PatternKind::Vessels, 64, &mut rng)
    }

    #[test]
    fn zero_ranges_give_identity() {
        let spec = PairSpec {
            range: TransformRange::zero(),
            ..Default::default()
        };
        let b = base();
        let p = generate_pair(&b, &spec, 11).unwrap();
        assert_eq!(p.h_gt, Homography::identity());
        assert_eq!(p.dest, b);
        assert_eq!(p.source, b);
    }

    #[test]
    fn generation_is_reproducible() {
        let spec = PairSpec {
            deform_amplitude: 2.0,
            degradation: Degradation::GaussNoise { sigma: 0.02 },
            ..Default::default()
        };
        let b = base();
        let a = generate_pair(&b, &spec, 99).unwrap();
        let c = generate_pair(&b, &spec, 99).unwrap();
        assert_eq!(a, c);
        assert!(a.v_gt.max_magnitude() <= 2.0 + 1e-12);
        assert!(a.v_gt.max_magnitude() > 0.0);
        let d = generate_pair(&b, &spec, 100).unwrap();
        assert_ne!(a.h_gt, d.h_gt);
    }

    #[test]
    fn corners_stay_within_declared_bound() {
        let spec = PairSpec {
            range: TransformRange {
                max_perspective: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let r = &spec.range;
        let radius = 31.5f64.hypot(31.5);
        let s_max = r.scale_max.max(1.0 / r.scale_min);
        let rot = 2.0 * (r.max_rotation_deg.to_radians() / 2.0).sin();
        let bound = ((s_max - 1.0) + s_max * rot) * radius + r.max_translation * 2f64.sqrt();
        for seed in 0..50 {
            let p = generate_pair(&base(), &spec, seed).unwrap();
            for c in crate::geometry::PixelGrid::corners(64, 64).points {
                let m = p.h_gt.apply(c).unwrap();
                assert!(m.distance(c) <= bound + 1e-9, "seed {seed}: {} > {bound}", m.distance(c));
            }
        }
    }

    #[test]
    fn undegraded_rigid_pairs_match_global_warp() {
        let spec = PairSpec::default();
        let p = generate_pair(&base(), &spec, 5).unwrap();
        let (w, m) = warp_global(&p.source, &p.h_gt).unwrap();
        assert!(m.fraction() >= 0.25);
        for i in 0..w.data.len() {
            if m.data[i] {
                assert!((w.data[i] - p.dest.data[i]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn tiny_overlap_is_rejected() {
        let spec = PairSpec {
            range: TransformRange {
                max_translation: 0.0,
                scale_min: 20.0,
                scale_max: 20.0,
                max_rotation_deg: 0.0,
                max_perspective: 0.0,
                rotate_base: false,
            },
            ..Default::default()
        };
        let flat = ImageBuffer::from_fn(32, 32, |x, _| x as f64 / 32.0);
        let wide = TransformRange {
            max_translation: 200.0,
            ..TransformRange::zero()
        };
        assert!(generate_pair(&flat, &spec, 1).is_ok());
        let spec = PairSpec { range: wide, ..spec };
        let far = (0..20).filter(|s| generate_pair(&flat, &spec, *s).is_err()).count();
        assert!(far > 0);
        let err = (0..20).find_map(|s| generate_pair(&flat, &spec, s).err()).unwrap();
        assert!(matches!(err, AdmError::InsufficientOverlap { tries: 10 }));
    }

    #[test]
    fn constant_base_is_rejected() {
        assert!(generate_pair(&ImageBuffer::filled(16, 16, 1, 0.5), &PairSpec::default(), 0).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let spec = PairSpec {
            deform_amplitude: 1.5,
            ..Default::default()
        };
        let pairs = generate_suite(3, 32, &spec, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &pairs, 7, "abc").unwrap();
        let ds = read_dataset(dir.path()).unwrap();
        assert_eq!(ds.pairs.len(), 3);
        assert_eq!(ds.config_hash, "abc");
        for (a, b) in pairs.iter().zip(&ds.pairs) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.h_gt, b.h_gt);
            assert_eq!(a.source, b.source);
            assert!(a.dest.mean_abs_diff(&b.dest) <= 1.0 / 255.0);
            assert!(a.v_gt.u.iter().zip(&b.v_gt.u).all(|(x, y)| (x - y).abs() < 1e-6));
        }
        assert_eq!(generate_suite(3, 32, &spec, 7).unwrap(), pairs);
    }
}
