//! The boundary gate `(1 + p) ⊙ f`: a zero probability leaves the decoder
//! features untouched and a probability of one doubles them.

use banet::arch::{Attention, BaNet, NetworkConfig};
use banet::gradcheck::random_tensor;
use banet::{Shape, Tape};

fn main() -> banet::Result<()> {
    let cfg = NetworkConfig {
        levels: 3,
        base_channels: 4,
        channel_cap: 32,
        num_classes: 3,
        patch_dims: [16, 16, 16],
        boundary_attention: true,
    };
    let net = BaNet::<f32>::build(&cfg, 0)?;
    let x = random_tensor::<f32>(Shape::new(1, 1, 16, 16, 16), 3);

    let mut tape = Tape::new();
    let (learned, _) = net.forward_train(&mut tape, &x, Attention::Learned)?;
    for s in 0..cfg.scales() {
        let p = tape.value(learned.boundary_probs[s]);
        let mean_pb = p.plane(0, 1).iter().map(|&v| v as f64).sum::<f64>() / p.shape().voxels() as f64;
        println!("scale {s}: mean boundary probability {mean_pb:.4}");
    }

    let run = |a| -> banet::Result<_> {
        let mut t = Tape::new();
        let (o, _) = net.forward_train(&mut t, &x, a)?;
        Ok((0..cfg.scales())
            .map(|s| (t.value(o.upsampled[s]).clone(), t.value(o.enhanced[s]).clone()))
            .collect::<Vec<_>>())
    };
    for (s, ((u0, e0), (u1, e1))) in run(Attention::Fixed(0.0))?.iter().zip(run(Attention::Fixed(1.0))?.iter()).enumerate() {
        let doubled = u1.data().iter().zip(e1.data()).all(|(&u, &e)| e == 2.0 * u);
        println!(
            "scale {s}: p=0 max change {:.1e}, p=1 doubles exactly: {doubled}",
            u0.max_abs_diff(e0)
        );
    }
    Ok(())
}
