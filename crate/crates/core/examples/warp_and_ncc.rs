//! Warps a procedural pattern by a homography plus a smooth displacement
//! field and scores the result with NCC on structure maps.
//!
//! `cargo run --release --example warp_and_ncc`

use adm::geometry::{Homography, Point2};
use adm::imaging::patterns::{render, PatternKind};
use adm::imaging::{ncc, structure_map, warp_composite, DisplacementField};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let src = render(PatternKind::Vessels, 64, &mut rng);
    let h = Homography::similarity(1.0, 10f64.to_radians(), Point2::new(31.5, 31.5), 2.0, 1.0);
    let field = DisplacementField::constant(16, 16, 0.75, -0.5);
    let (warped, mask) = warp_composite(&src, &h, Some(&field))?;
    println!("valid fraction {:.3}", mask.fraction());

    let target = structure_map(&warped);
    let exact = ncc(&structure_map(&warped), &target, &mask)?;
    let (global_only, m2) = warp_composite(&src, &h, None)?;
    let partial = ncc(&structure_map(&global_only), &target, &mask.and(&m2))?;
    let (unwarped, m3) = warp_composite(&src, &Homography::identity(), None)?;
    let none = ncc(&structure_map(&unwarped), &target, &mask.and(&m3))?;
    println!("NCC exact {exact:.4}  homography only {partial:.4}  identity {none:.4}");
    Ok(())
}
