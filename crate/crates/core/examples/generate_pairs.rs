//! Generates a small synthetic pair suite, writes it to disk and prints the
//! ground-truth transforms.
//!
//! `cargo run --release --example generate_pairs -- [out_dir] [pairs]`

use std::path::PathBuf;

use adm::geometry::mean_corner_error;
use adm::geometry::Homography;
use adm::training::{generate_suite, read_dataset, write_dataset, PairSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("adm_pairs"));
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(8);
    let spec = PairSpec {
        deform_amplitude: 1.5,
        ..PairSpec::default()
    };
    let pairs = generate_suite(n, 64, &spec, 7)?;
    write_dataset(&dir, &pairs, 7, "example")?;
    for p in &pairs {
        let shift = mean_corner_error(&p.h_gt, &Homography::identity(), 64, 64)?;
        println!(
            "{}  corner shift {:6.2} px  field max {:4.2} px  {}",
            p.id,
            shift,
            p.v_gt.max_magnitude(),
            p.degradation.label()
        );
    }
    let back = read_dataset(&dir)?;
    println!("{} pairs written to {} and read back", back.pairs.len(), dir.display());
    Ok(())
}
