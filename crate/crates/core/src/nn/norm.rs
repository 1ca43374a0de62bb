use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{Real, Shape, Tensor};

/// Mean and `1/sqrt(var + eps)` of one (sample, channel) slice.
#[derive(Clone, Copy, Debug)]
pub(crate) struct SliceStats {
    mean: f64,
    inv_std: f64,
}

pub(crate) fn instance_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Vec<SliceStats>)> {
    let s = x.shape();
    let pshape = Shape::new(1, s.channels(), 1, 1, 1);
    if gamma.shape() != pshape || beta.shape() != pshape {
        return Err(Error::shape(format!(
            "instance_norm affine params {} / {} for input {s}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if s.voxels() == 0 {
        return Err(Error::shape("instance_norm on an empty slice"));
    }
    let m = s.voxels() as f64;
    let mut out = Vec::with_capacity(s.numel());
    let mut stats = Vec::with_capacity(s.batch() * s.channels());
    for n in 0..s.batch() {
        for c in 0..s.channels() {
            let plane = x.plane(n, c);
            let mean = plane.iter().map(|v| v.f64()).sum::<f64>() / m;
            let var = plane.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / m;
            let inv_std = 1.0 / (var + eps).sqrt();
            let (g, b) = (gamma.data()[c].f64(), beta.data()[c].f64());
            out.extend(plane.iter().map(|v| T::of(g * (v.f64() - mean) * inv_std + b)));
            stats.push(SliceStats { mean, inv_std });
        }
    }
    Ok((Tensor::from_vec(s, out)?, stats))
}

pub(crate) fn instance_norm_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &[SliceStats],
    gy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let m = s.voxels() as f64;
    let mut gx = Vec::with_capacity(s.numel());
    let mut gg = vec![0.0f64; s.channels()];
    let mut gb = vec![0.0f64; s.channels()];
    for n in 0..s.batch() {
        for c in 0..s.channels() {
            let SliceStats { mean, inv_std } = stats[n * s.channels() + c];
            let xp = x.plane(n, c);
            let gp = gy.plane(n, c);
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for (&xv, &gv) in xp.iter().zip(gp) {
                let xhat = (xv.f64() - mean) * inv_std;
                sum_g += gv.f64();
                sum_gx += gv.f64() * xhat;
            }
            gg[c] += sum_gx;
            gb[c] += sum_g;
            let g = gamma.data()[c].f64();
            // dx = γ·inv_std/M · (M·dy − Σdy − x̂·Σ(dy·x̂))
            let k = g * inv_std / m;
            gx.extend(xp.iter().zip(gp).map(|(&xv, &gv)| {
                let xhat = (xv.f64() - mean) * inv_std;
                T::of(k * (m * gv.f64() - sum_g - xhat * sum_gx))
            }));
        }
    }
    let ps = gamma.shape();
    (
        Tensor::from_vec(s, gx).expect("input grad shape"),
        Tensor::from_vec(ps, gg.into_iter().map(T::of).collect()).expect("gamma grad"),
        Tensor::from_vec(ps, gb.into_iter().map(T::of).collect()).expect("beta grad"),
    )
}

impl<T: Real> Tape<T> {
    /// Per-(sample, channel) standardization over the spatial axes followed
    /// by a per-channel affine map. `gamma` and `beta` are `(1, C, 1, 1, 1)`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (value, stats) =
            instance_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                stats,
            },
            rg,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, random_tensor};
    use crate::nn::INSTANCE_NORM_EPS;

    fn affine(c: usize, g: f64, b: f64) -> (Tensor<f64>, Tensor<f64>) {
        (
            Tensor::full(Shape::new(1, c, 1, 1, 1), g),
            Tensor::full(Shape::new(1, c, 1, 1, 1), b),
        )
    }

    #[test]
    fn constant_slice_normalizes_to_zero() {
        let x = Tensor::<f64>::full(Shape::new(1, 2, 3, 3, 3), 4.5);
        let (g, b) = affine(2, 1.0, 0.0);
        let (y, _) = instance_norm_forward(&x, &g, &b, INSTANCE_NORM_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let x = random_tensor::<f64>(Shape::new(2, 2, 2, 3, 2), 1);
        let (g, b) = affine(2, 0.0, 0.75);
        let (y, _) = instance_norm_forward(&x, &g, &b, INSTANCE_NORM_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn output_slices_are_standardized() {
        let x = random_tensor::<f64>(Shape::new(2, 3, 4, 4, 4), 2).map(|v| 5.0 * v + 2.0);
        let (g, b) = affine(3, 1.0, 0.0);
        let (y, _) = instance_norm_forward(&x, &g, &b, INSTANCE_NORM_EPS).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                let p = y.plane(n, c);
                let m = p.iter().sum::<f64>() / p.len() as f64;
                let v = p.iter().map(|x| (x - m).powi(2)).sum::<f64>() / p.len() as f64;
                assert!(m.abs() < 1e-5);
                assert!((v - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn invariant_to_positive_affine_input_maps() {
        let x = random_tensor::<f64>(Shape::new(1, 2, 3, 3, 3), 3);
        let (g, b) = affine(2, 1.3, -0.2);
        let (y0, _) = instance_norm_forward(&x, &g, &b, INSTANCE_NORM_EPS).unwrap();
        let (y1, _) =
            instance_norm_forward(&x.map(|v| 7.0 * v - 3.0), &g, &b, INSTANCE_NORM_EPS).unwrap();
        assert!(y0.max_abs_diff(&y1) <= 1e-4);
    }

    #[test]
    fn rejects_mismatched_affine_params() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 2, 2, 2, 2));
        let (g, b) = affine(3, 1.0, 0.0);
        assert!(instance_norm_forward(&x, &g, &b, INSTANCE_NORM_EPS).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let inputs = [
            random_tensor::<f64>(Shape::new(2, 2, 3, 2, 3), 4),
            random_tensor(Shape::new(1, 2, 1, 1, 1), 5),
            random_tensor(Shape::new(1, 2, 1, 1, 1), 6),
        ];
        let probe = random_tensor::<f64>(Shape::new(2, 2, 3, 2, 3), 7);
        let r = check_gradients(&inputs, 1e-3, |t, v| {
            let y = t.instance_norm(v[0], v[1], v[2], INSTANCE_NORM_EPS)?;
            let p = t.constant(probe.clone());
            let y = t.mul(y, p)?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-3, "{r:?}");
    }
}
