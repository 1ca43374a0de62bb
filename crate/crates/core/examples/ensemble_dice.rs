//! Averages the predictions of two briefly trained networks and scores
//! members and ensemble with Dice against the phantom labels.

use banet::arch::{BaNet, NetworkConfig};
use banet::inference::{dice_score, ensemble, sliding_window_predict};
use banet::phantom::{generate_phantom, PhantomConfig};
use banet::train::{train, Case, TrainConfig};
use banet::volume::normalize_zscore;

fn main() -> banet::Result<()> {
    let pc = PhantomConfig {
        dims: [16, 16, 16],
        radius_ranges: vec![(5.0, 6.0), (2.5, 3.0), (1.5, 2.0)],
        ..PhantomConfig::default()
    };
    let phantom = |s| -> banet::Result<Case> {
        let (image, labels) = generate_phantom(&pc.with_seed(s))?;
        Ok(Case {
            image: normalize_zscore(&image),
            labels,
        })
    };
    let train_set: Vec<Case> = (0..4).map(phantom).collect::<banet::Result<_>>()?;
    let test = phantom(100)?;

    let net_cfg = NetworkConfig {
        levels: 3,
        base_channels: 4,
        channel_cap: 32,
        num_classes: 4,
        patch_dims: [16, 16, 16],
        boundary_attention: true,
    };
    let mut preds = Vec::new();
    for seed in [1, 2] {
        let cfg = TrainConfig {
            max_epochs: 30,
            patch_dims: [16, 16, 16],
            seed,
            ..TrainConfig::default()
        };
        let out = train(BaNet::build(&net_cfg, seed)?, &train_set, &cfg)?;
        let p = sliding_window_predict(&out.checkpoint.net, &test.image, [16, 16, 16], 0.0)?;
        println!("member {seed}: Dice {:.3?}", dice_score(&p.labels, &test.labels, 4)?.per_class);
        preds.push(p);
    }
    let e = ensemble(&preds)?;
    let r = dice_score(&e.labels, &test.labels, 4)?;
    println!("ensemble: Dice {:.3?}, mean {:.3}", r.per_class, r.mean);

    let twice = ensemble(&[preds[0].clone(), preds[0].clone()])?;
    println!("two identical members reproduce one: {}", twice == preds[0]);
    Ok(())
}
