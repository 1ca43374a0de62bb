//! Trains a small network on four phantoms and reports the training-set
//! Dice. `cargo run --example train_overfit -- 200` is the full 2000-step
//! run; the default of 20 epochs finishes in about a minute.

use std::time::Instant;

use banet::arch::{BaNet, NetworkConfig};
use banet::inference::{dice_score, sliding_window_predict};
use banet::phantom::{generate_phantom, PhantomConfig};
use banet::train::{train_with_progress, Case, TrainConfig};
use banet::volume::normalize_zscore;

fn main() -> banet::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let cases: Vec<Case> = (0..4)
        .map(|s| {
            let (image, labels) = generate_phantom(&PhantomConfig::default().with_seed(s))?;
            Ok(Case {
                image: normalize_zscore(&image),
                labels,
            })
        })
        .collect::<banet::Result<_>>()?;

    let net_cfg = NetworkConfig {
        levels: 3,
        base_channels: 8,
        channel_cap: 320,
        num_classes: 4,
        patch_dims: [32, 32, 32],
        boundary_attention: true,
    };
    let cfg = TrainConfig {
        max_epochs: epochs,
        ..TrainConfig::default()
    };
    let net = BaNet::build(&net_cfg, cfg.seed)?;
    println!("{} parameters", net.num_params());

    let start = Instant::now();
    let out = train_with_progress(net, &cases, &cfg, |e| {
        if e.epoch % 10 == 0 || e.epoch + 1 == epochs {
            println!("epoch {:>3} loss {:.4} lr {:.2e} ({:.0}s)", e.epoch, e.mean_loss, e.lr, start.elapsed().as_secs_f64());
        }
    })?;

    let net = &out.checkpoint.net;
    let mut total = 0.0;
    for (i, c) in cases.iter().enumerate() {
        let pred = sliding_window_predict(net, &c.image, net_cfg.patch_dims, 0.0)?;
        let r = dice_score(&pred.labels, &c.labels, 4)?;
        println!("case {i}: per-organ Dice {:.3?}", r.per_class);
        total += r.mean;
    }
    println!("mean training Dice {:.4}", total / cases.len() as f64);
    Ok(())
}
