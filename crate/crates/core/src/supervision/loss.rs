//! Joint soft-Dice + binary cross-entropy over softmax probabilities.
//!
//! For probabilities `p` and one-hot targets `y` of shape `(N, K, D, H, W)`:
//!
//! * Dice term: mean over foreground channels `c ≥ 1` of
//!   `1 − 2·Σ p·y / (Σ (p + y) + ε)`, sums running over batch and space.
//! * CE term: `−mean[y·ln q + (1 − y)·ln(1 − q)]` over every entry, with
//!   `q = clamp(p, 1e-7, 1 − 1e-7)`.

use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{Real, Tensor};

pub const DICE_EPS: f64 = 1e-5;
pub const PROB_CLAMP: f64 = 1e-7;

struct Parts {
    dice: f64,
    ce: f64,
}

/// Per-channel `(Σ p·y, Σ (p + y))`.
fn channel_sums<T: Real>(p: &Tensor<T>, y: &Tensor<T>) -> Vec<(f64, f64)> {
    let s = p.shape();
    let mut sums = vec![(0.0, 0.0); s.channels()];
    for n in 0..s.batch() {
        for (c, acc) in sums.iter_mut().enumerate() {
            for (&pv, &yv) in p.plane(n, c).iter().zip(y.plane(n, c)) {
                let (pv, yv) = (pv.f64(), yv.f64());
                acc.0 += pv * yv;
                acc.1 += pv + yv;
            }
        }
    }
    sums
}

fn parts<T: Real>(p: &Tensor<T>, y: &Tensor<T>, eps: f64) -> Parts {
    let sums = channel_sums(p, y);
    let fg = &sums[1..];
    let dice = fg
        .iter()
        .map(|&(inter, total)| 1.0 - 2.0 * inter / (total + eps))
        .sum::<f64>()
        / fg.len() as f64;
    let m = p.len() as f64;
    let ce = -p
        .data()
        .iter()
        .zip(y.data())
        .map(|(&pv, &yv)| {
            let q = pv.f64().clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let yv = yv.f64();
            yv * q.ln() + (1.0 - yv) * (1.0 - q).ln()
        })
        .sum::<f64>()
        / m;
    Parts { dice, ce }
}

/// `(dice_term, ce_term)` without recording anything.
pub fn dice_ce_terms<T: Real>(p: &Tensor<T>, y: &Tensor<T>) -> Result<(f64, f64)> {
    check(p, y)?;
    let r = parts(p, y, DICE_EPS);
    Ok((r.dice, r.ce))
}

fn check<T: Real>(p: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
    if p.shape() != y.shape() {
        return Err(Error::shape(format!(
            "dice_ce_loss: prediction {} vs target {}",
            p.shape(),
            y.shape()
        )));
    }
    if p.shape().channels() < 2 {
        return Err(Error::shape("dice_ce_loss needs a background and at least one foreground channel"));
    }
    Ok(())
}

pub(crate) fn dice_ce_backward<T: Real>(p: &Tensor<T>, y: &Tensor<T>, eps: f64, upstream: T) -> Tensor<T> {
    let s = p.shape();
    let sums = channel_sums(p, y);
    let f = (s.channels() - 1) as f64;
    let m = p.len() as f64;
    let g = upstream.f64();
    let mut out = Vec::with_capacity(p.len());
    for n in 0..s.batch() {
        for (c, &(inter, total)) in sums.iter().enumerate() {
            let denom = total + eps;
            for (&pv, &yv) in p.plane(n, c).iter().zip(y.plane(n, c)) {
                let (pv, yv) = (pv.f64(), yv.f64());
                let d_dice = if c == 0 {
                    0.0
                } else {
                    (2.0 * inter - 2.0 * yv * denom) / (denom * denom) / f
                };
                let d_ce = if pv > PROB_CLAMP && pv < 1.0 - PROB_CLAMP {
                    -(yv / pv - (1.0 - yv) / (1.0 - pv)) / m
                } else {
                    0.0
                };
                out.push(T::of(g * (d_dice + d_ce)));
            }
        }
    }
    Tensor::from_vec(s, out).expect("same shape")
}

impl<T: Real> Tape<T> {
    /// Scalar Dice + CE loss of probabilities `p` against one-hot `target`.
    pub fn dice_ce_loss(&mut self, p: Var, target: Var) -> Result<Var> {
        check(self.value(p), self.value(target))?;
        let r = parts(self.value(p), self.value(target), DICE_EPS);
        let value = Tensor::scalar(T::of(r.dice + r.ce));
        let rg = self.any_grad(&[p]);
        Ok(self.push(
            value,
            Op::DiceCe {
                p,
                target,
                eps: DICE_EPS,
            },
            rg,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, random_tensor};
    use crate::tensor::Shape;

    fn half_mask(v: usize) -> Tensor<f64> {
        // channel 0 = background indicator, channel 1 = foreground
        let mut data = Vec::with_capacity(2 * v);
        data.extend((0..v).map(|i| if i < v / 2 { 1.0 } else { 0.0 }));
        data.extend((0..v).map(|i| if i < v / 2 { 0.0 } else { 1.0 }));
        Tensor::from_vec(Shape::new(1, 2, 2, 2, v / 4), data).unwrap()
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let y = half_mask(16);
        let (dice, ce) = dice_ce_terms(&y, &y).unwrap();
        assert!(dice < 1e-4, "{dice}");
        assert!(ce < 1e-5, "{ce}");
    }

    #[test]
    fn uniform_prediction_closed_form() {
        let v = 16;
        let y = half_mask(v);
        let p = Tensor::full(y.shape(), 0.5);
        let (dice, ce) = dice_ce_terms(&p, &y).unwrap();
        // Σpy = 0.5·V/2, Σ(p+y) = 0.5·V + V/2
        let vf = v as f64;
        let expect = 1.0 - (2.0 * 0.5 * vf / 2.0) / (0.5 * vf + vf / 2.0 + DICE_EPS);
        assert!((dice - expect).abs() < 1e-12);
        assert!((dice - 0.5).abs() < 1e-5);
        assert!((ce - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_is_non_negative_on_random_inputs() {
        for seed in 0..20 {
            let logits = random_tensor::<f64>(Shape::new(2, 3, 2, 2, 2), seed);
            let p = crate::nn::activation::softmax_forward(&logits.map(|v| 4.0 * v));
            let y = crate::nn::activation::softmax_forward(&random_tensor::<f64>(p.shape(), seed + 100).map(|v| 50.0 * v))
                .map(|v| v.round());
            let (d, c) = dice_ce_terms(&p, &y).unwrap();
            assert!(d + c >= 0.0);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Tensor::<f64>::zeros(Shape::new(1, 2, 2, 2, 2));
        let b = Tensor::<f64>::zeros(Shape::new(1, 3, 2, 2, 2));
        assert!(dice_ce_terms(&a, &b).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut labels = random_tensor::<f64>(Shape::new(1, 2, 2, 2, 2), 1);
        for i in 0..8 {
            let fg = if labels.data()[i] > 0.0 { 1.0 } else { 0.0 };
            labels.data_mut()[i] = 1.0 - fg;
            labels.data_mut()[8 + i] = fg;
        }
        // probabilities strictly inside (0, 1) and away from the clamp
        let p = random_tensor::<f64>(Shape::new(1, 2, 2, 2, 2), 2).map(|v| 0.5 + 0.4 * v);
        let r = check_gradients(&[p], 1e-3, |t, v| {
            let y = t.constant(labels.clone());
            t.dice_ce_loss(v[0], y)
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-3, "{r:?}");
    }
}
