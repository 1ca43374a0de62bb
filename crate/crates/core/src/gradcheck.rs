//! Central finite-difference checks of the tape's analytic gradients.
//!
//! Checks run in `f64`: the same layer code instantiated at double
//! precision, so a 1e-3 step resolves gradients to far better than the
//! 1e-3 relative tolerance. The suite in [`run_suite`] covers every
//! differentiable operation plus the parameters of a whole small network;
//! the `gradcheck` subcommand prints its table.
//!
//! Inside a LeakyReLU network a 1e-3 step often carries some pre-activation
//! across zero, so entries that miss the tolerance are re-measured at 1e-6
//! (then 1e-7) once the forward and backward slopes agree there.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{BaNet, NetworkConfig};
use crate::error::Result;
use crate::nn::{ConvGeometry, INSTANCE_NORM_EPS, LEAKY_RELU_SLOPE};
use crate::supervision::{self, SupervisionTargets};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Shape, Tensor};
use crate::volume::LabelVolume;

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-3;
/// Pass threshold on [`GradReport::max_rel_error`].
pub const FD_TOLERANCE: f64 = 1e-3;

/// Uniform `[-1, 1)` values, deterministic per seed.
pub fn random_tensor<T: Real>(shape: Shape, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel())
        .map(|_| T::of(rng.random_range(-1.0..1.0)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape")
}

#[derive(Clone, Debug)]
pub struct GradReport {
    /// Largest per-input error `max|analytic − numeric| / max(|analytic|∞, |numeric|∞)`.
    pub max_rel_error: f64,
    pub per_input: Vec<f64>,
    /// Number of scalar entries perturbed.
    pub checked: usize,
    /// Entries whose step was shrunk to clear a kink.
    pub refined: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= FD_TOLERANCE
    }
}

fn scale_of(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-8)
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = scale_of(analytic, numeric);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Compares analytic gradients of `f` against central differences for
/// every entry of every input.
///
/// `f` records a scalar function of the given leaves on the tape. It is
/// re-run twice per perturbed entry, so keep inputs small.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let mut work = inputs.to_vec();
    let mid = eval(&work)?;
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut checked = 0;
    let mut refined = 0;
    for i in 0..inputs.len() {
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            *slot = central(&eval, &mut work, i, j, step)?.0;
        }
        let a = analytic[i].data();
        // Refining an entry can shrink the tensor's scale and so tighten the
        // bar for the rest; repeat until no unrefined entry is over it.
        let mut done = vec![false; numeric.len()];
        loop {
            let bar = FD_TOLERANCE * scale_of(a, &numeric);
            let over: Vec<usize> = (0..numeric.len())
                .filter(|&j| !done[j] && (a[j] - numeric[j]).abs() > bar)
                .collect();
            if over.is_empty() {
                break;
            }
            for j in over {
                done[j] = true;
                // A LeakyReLU kink inside [x - step, x + step] biases the
                // central difference. Retry with smaller steps and accept one
                // only once both one-sided slopes agree, which leaves a wrong
                // gradient wrong.
                for h in REFINED_STEPS {
                    let (c, up, down) = central(&eval, &mut work, i, j, h)?;
                    if ((up - mid) / h - (mid - down) / h).abs() <= bar {
                        numeric[j] = c;
                        refined += 1;
                        break;
                    }
                }
            }
        }
        checked += numeric.len();
        per_input.push(rel_error(a, &numeric));
    }
    Ok(GradReport {
        max_rel_error: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
        checked,
        refined,
    })
}

/// Steps tried, in order, for an entry that sits next to a kink.
const REFINED_STEPS: [f64; 2] = [1e-6, 1e-7];

fn central<E>(eval: &E, work: &mut [Tensor<f64>], i: usize, j: usize, h: f64) -> Result<(f64, f64, f64)>
where
    E: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    let orig = work[i].data()[j];
    work[i].data_mut()[j] = orig + h;
    let up = eval(work)?;
    work[i].data_mut()[j] = orig - h;
    let down = eval(work)?;
    work[i].data_mut()[j] = orig;
    Ok(((up - down) / (2.0 * h), up, down))
}

/// One row of the suite table.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradReport,
}

/// Smallest network the suite differentiates end to end.
pub fn suite_network_config() -> NetworkConfig {
    NetworkConfig {
        levels: 3,
        base_channels: 4,
        channel_cap: 320,
        num_classes: 3,
        patch_dims: [8, 8, 4],
        boundary_attention: true,
    }
}

/// Uniform random labels.
fn suite_labels(dims: [usize; 3], k: usize, seed: u64) -> LabelVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    let labels = (0..n).map(|_| rng.random_range(0..k as u8)).collect();
    LabelVolume::new(dims, labels, k, [1.0; 3]).expect("valid labels")
}

/// Multiplies by a fixed random probe and sums, so every output entry
/// carries a distinct weight in the checked scalar.
fn probe_sum(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let probe = t.constant(random_tensor(t.shape(y), seed));
    let prod = t.mul(y, probe)?;
    Ok(t.sum(prod))
}

/// Runs the full finite-difference suite. Deterministic per `seed`.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    let mut push = |name, report| out.push(SuiteEntry { name, report });
    let s = |n, c, d| Shape::new(n, c, d, d, d);
    let seed = seed.wrapping_mul(1000);

    let conv_inputs = || {
        vec![
            random_tensor::<f64>(s(1, 2, 4), seed + 1),
            random_tensor(Shape::new(3, 2, 3, 3, 3), seed + 2),
            random_tensor(s(1, 3, 1), seed + 3),
        ]
    };

    push(
        "conv3d",
        check_gradients(&conv_inputs(), FD_STEP, |t, v| {
            let y = t.conv3d(v[0], v[1], v[2], ConvGeometry::k3(1))?;
            probe_sum(t, y, seed + 4)
        })?,
    );
    push(
        "conv3d_stride2",
        check_gradients(&conv_inputs(), FD_STEP, |t, v| {
            let y = t.conv3d(v[0], v[1], v[2], ConvGeometry::k3(2))?;
            probe_sum(t, y, seed + 5)
        })?,
    );
    push(
        "transposed_conv3d",
        check_gradients(
            &[
                random_tensor(s(1, 3, 2), seed + 6),
                random_tensor(Shape::new(3, 2, 2, 2, 2), seed + 7),
                random_tensor(s(1, 2, 1), seed + 8),
            ],
            FD_STEP,
            |t, v| {
                let y = t.conv_transpose3d(v[0], v[1], v[2])?;
                probe_sum(t, y, seed + 9)
            },
        )?,
    );
    push(
        "instance_norm",
        check_gradients(
            &[
                random_tensor(s(2, 2, 3), seed + 10),
                random_tensor(s(1, 2, 1), seed + 11),
                random_tensor(s(1, 2, 1), seed + 12),
            ],
            FD_STEP,
            |t, v| {
                let y = t.instance_norm(v[0], v[1], v[2], INSTANCE_NORM_EPS)?;
                probe_sum(t, y, seed + 13)
            },
        )?,
    );
    let away_from_kink = random_tensor::<f64>(s(1, 2, 3), seed + 14)
        .map(|v| if v.abs() < 1e-2 { v + v.signum() * 1e-2 } else { v });
    push(
        "leaky_relu",
        check_gradients(&[away_from_kink], FD_STEP, |t, v| {
            let y = t.leaky_relu(v[0], LEAKY_RELU_SLOPE);
            probe_sum(t, y, seed + 15)
        })?,
    );
    push(
        "softmax_channels",
        check_gradients(&[random_tensor(s(1, 3, 2), seed + 16)], FD_STEP, |t, v| {
            let y = t.softmax_channels(v[0])?;
            probe_sum(t, y, seed + 17)
        })?,
    );

    let target = supervision::one_hot::<f64>(&[suite_labels([2, 2, 2], 3, seed + 18)], 3)?;
    push(
        "dice_ce_loss",
        check_gradients(&[random_tensor(s(1, 3, 2), seed + 19)], FD_STEP, |t, v| {
            // the loss expects probabilities
            let p = t.softmax_channels(v[0])?;
            let y = t.constant(target.clone());
            t.dice_ce_loss(p, y)
        })?,
    );
    push(
        "enhance",
        check_gradients(
            &[
                random_tensor(s(1, 3, 2), seed + 20),
                random_tensor::<f64>(s(1, 1, 2), seed + 21).map(|v| 0.5 * (v + 1.0)),
            ],
            FD_STEP,
            |t, v| {
                let y = crate::arch::enhance(t, v[0], v[1])?;
                probe_sum(t, y, seed + 22)
            },
        )?,
    );

    let cfg = suite_network_config();
    let labels = suite_labels(cfg.patch_dims, cfg.num_classes, seed + 23);
    let targets = SupervisionTargets::<f64>::build(&[labels], cfg.levels - 1, cfg.num_classes)?;
    let logits: Vec<Tensor<f64>> = (0..targets.scales())
        .flat_map(|sc| {
            [
                random_tensor(targets.seg[sc].shape(), seed + 24 + sc as u64),
                random_tensor(targets.boundary[sc].shape(), seed + 40 + sc as u64),
            ]
        })
        .collect();
    push(
        "total_loss",
        check_gradients(&logits, FD_STEP, |t, v| {
            let mut seg = Vec::new();
            let mut bnd = Vec::new();
            for pair in v.chunks(2) {
                seg.push(t.softmax_channels(pair[0])?);
                bnd.push(t.softmax_channels(pair[1])?);
            }
            supervision::total_loss(t, &seg, &bnd, &targets)
        })?,
    );

    let net = BaNet::<f64>::build(&cfg, seed + 60)?;
    let input = random_tensor::<f64>(Shape::new(1, 1, cfg.patch_dims[0], cfg.patch_dims[1], cfg.patch_dims[2]), seed + 61);
    let params: Vec<Tensor<f64>> = net.parameters().into_iter().map(|(_, t)| t.clone()).collect();
    push(
        "network_parameters",
        check_gradients(&params, FD_STEP, |t, v| {
            let out = net.forward_train_with(t, v, &input, crate::arch::Attention::Learned)?;
            supervision::total_loss(t, &out.seg_probs, &out.boundary_probs, &targets)
        })?,
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_tensor_is_deterministic() {
        let a = random_tensor::<f32>(Shape::new(1, 2, 3, 3, 3), 5);
        let b = random_tensor::<f32>(Shape::new(1, 2, 3, 3, 3), 5);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (-1.0..1.0).contains(v)));
    }

    #[test]
    fn rel_error_is_scale_free_and_flags_mismatch() {
        assert_eq!(rel_error(&[2.0, 4.0], &[2.0, 4.0]), 0.0);
        assert!((rel_error(&[2.0, 4.0], &[2.0, 4.4]) - 0.4 / 4.4).abs() < 1e-12);
        assert!((rel_error(&[2e-6, 4e-6], &[2e-6, 4.4e-6]) - 0.4 / 4.4).abs() < 1e-9);
    }

    #[test]
    fn kink_inside_the_step_is_refined_away() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 1, 2), vec![2e-4, 0.7]).unwrap();
        let r = check_gradients(&[x], FD_STEP, |t, v| {
            let y = t.leaky_relu(v[0], LEAKY_RELU_SLOPE);
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.refined, 1);
    }

    #[test]
    fn wrong_gradient_still_fails_after_refinement() {
        let x = random_tensor::<f64>(Shape::new(1, 1, 2, 2, 2), 3);
        // detaching half the product drops a term from the analytic gradient
        let r = check_gradients(&[x], FD_STEP, |t, v| {
            let c = t.constant(t.value(v[0]).clone());
            let y = t.mul(v[0], c)?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn composite_function_passes() {
        let x = random_tensor::<f64>(Shape::new(1, 1, 2, 2, 2), 1);
        let r = check_gradients(&[x], FD_STEP, |t, v| {
            let y = t.mul_scalar(v[0], 3.0);
            let y = t.mul(y, v[0])?;
            let y = t.add_scalar(y, 1.0);
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, 8);
    }
}
