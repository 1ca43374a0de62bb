//! Builds the deep-supervision targets for one phantom: the label pyramid,
//! the boundary map at every scale and the scale weights.

use banet::phantom::{generate_phantom, PhantomConfig};
use banet::supervision::{extract_boundary, label_pyramid, omega};

fn main() -> banet::Result<()> {
    let (_, labels) = generate_phantom(&PhantomConfig::default().with_seed(1))?;
    let scales = 4;
    let weights = omega(scales);
    for (s, (y, w)) in label_pyramid(&labels, scales)?.iter().zip(&weights).enumerate() {
        let b = extract_boundary(y);
        let fg = y.labels().iter().filter(|&&l| l != 0).count();
        println!(
            "scale {s}: dims {:?}, weight {w:.4}, foreground {fg:>5}, boundary {:>5}",
            y.dims(),
            b.count(1)
        );
    }

    // middle slice of the full-resolution boundary map
    let b = extract_boundary(&labels);
    let [d, h, w] = b.dims();
    for y in (0..h).step_by(2) {
        let row: String = (0..w).map(|x| if b.get(d / 2, y, x) == 1 { '#' } else { '.' }).collect();
        println!("{row}");
    }
    Ok(())
}
