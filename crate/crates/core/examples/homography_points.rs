//! Builds a similarity transform, maps points through it and measures the
//! point distances used by the losses and the corner metric.
//!
//! `cargo run --release --example homography_points`

use adm::geometry::{mean_corner_error, p_norm_distance, Homography, PixelGrid, Point2};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let center = Point2::new(31.5, 31.5);
    let h = Homography::similarity(1.1, 15f64.to_radians(), center, 4.0, -3.0);
    let inv = h.invert()?;
    for p in [Point2::new(0.0, 0.0), Point2::new(63.0, 0.0), center] {
        let q = h.apply(p)?;
        let back = inv.apply(q)?;
        println!("({:6.2}, {:6.2}) -> ({:6.2}, {:6.2}) -> ({:6.2}, {:6.2})", p.x, p.y, q.x, q.y, back.x, back.y);
    }
    let nudged = Homography::compose(&Homography::translation(0.5, 0.0), &h)?;
    let points = PixelGrid::loss_points(64, 64);
    println!("{} loss points", points.len());
    println!("p=2 distance to a 0.5 px shift: {:.4}", p_norm_distance(&nudged, &h, &points, 2.0)?);
    println!("mean corner error: {:.4}", mean_corner_error(&nudged, &h, 64, 64)?);
    Ok(())
}
