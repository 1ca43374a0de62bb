//! Generates one default phantom, prints per-organ voxel counts and writes
//! the image/label pair to a temporary directory.

use banet::phantom::{generate_phantom, PhantomConfig};
use banet::volume::{write_image, write_labels};

fn main() -> banet::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = PhantomConfig::default().with_seed(seed);
    let (image, labels) = generate_phantom(&cfg)?;

    for organ in 1..=cfg.num_organs as u8 {
        let n = labels.count(organ);
        let mean = image
            .data()
            .iter()
            .zip(labels.labels())
            .filter(|(_, &l)| l == organ)
            .map(|(&v, _)| v as f64)
            .sum::<f64>()
            / n as f64;
        println!("organ {organ}: {n:>6} voxels, mean intensity {mean:+.3}");
    }
    let big = labels.count(1) as f64;
    let small = labels.count(cfg.num_organs as u8) as f64;
    println!("largest / smallest = {:.1}", big / small);

    let dir = std::env::temp_dir().join("banet-phantom-example");
    std::fs::create_dir_all(&dir).map_err(|e| banet::Error::Payload(e.to_string()))?;
    write_image(&dir.join("phantom"), &image)?;
    write_labels(&dir.join("phantom_seg"), &labels)?;
    println!("wrote {}", dir.display());
    Ok(())
}
