//! Sliding-window prediction of a volume larger than the network patch,
//! compared against a single whole-volume pass.

use banet::arch::{BaNet, NetworkConfig};
use banet::inference::{sliding_window_predict, window_starts};
use banet::phantom::{generate_phantom, PhantomConfig};
use banet::volume::normalize_zscore;
use banet::{Shape, Tensor};

fn main() -> banet::Result<()> {
    let cfg = NetworkConfig {
        levels: 3,
        base_channels: 4,
        channel_cap: 32,
        num_classes: 4,
        patch_dims: [16, 16, 16],
        boundary_attention: true,
    };
    let net = BaNet::<f32>::build(&cfg, 0)?;
    let pc = PhantomConfig {
        dims: [24, 32, 40],
        ..PhantomConfig::default()
    };
    let (img, _) = generate_phantom(&pc)?;
    let img = normalize_zscore(&img);

    for overlap in [0.0, 0.5] {
        let step = (16.0 * (1.0 - overlap)) as usize;
        let windows: usize = pc.dims.iter().map(|&d| window_starts(d, 16, step).len()).product();
        let t = std::time::Instant::now();
        let p = sliding_window_predict(&net, &img, cfg.patch_dims, overlap)?;
        let counts: Vec<usize> = (0..4).map(|k| p.labels.count(k)).collect();
        println!(
            "overlap {overlap}: {windows} windows, {:.2}s, label counts {counts:?}",
            t.elapsed().as_secs_f64()
        );
    }

    // a window covering the whole volume is one forward pass
    let whole = sliding_window_predict(&net, &img, [32, 32, 40], 0.5)?;
    let [d, h, w] = img.dims();
    let x = Tensor::from_vec(Shape::new(1, 1, d, h, w), img.data().to_vec())?;
    let direct = net.forward_infer(&x)?;
    println!("whole-volume window vs forward pass: max diff {:.1e}", whole.probs.max_abs_diff(&direct));
    Ok(())
}
