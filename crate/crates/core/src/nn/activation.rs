use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{Real, Tensor};

pub(crate) fn leaky_relu_backward<T: Real>(x: &Tensor<T>, slope: T, gy: &Tensor<T>) -> Tensor<T> {
    // subgradient at 0 takes the positive branch
    let data = x
        .data()
        .iter()
        .zip(gy.data())
        .map(|(&v, &g)| if v >= T::zero() { g } else { g * slope })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

pub(crate) fn softmax_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (c, v) = (s.channels(), s.voxels());
    let mut out = vec![T::zero(); s.numel()];
    let mut buf = vec![0.0f64; c];
    for n in 0..s.batch() {
        let base = n * c * v;
        for i in 0..v {
            let mut max = f64::NEG_INFINITY;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = x.data()[base + k * v + i].f64();
                max = max.max(*b);
            }
            let mut total = 0.0;
            for b in buf.iter_mut() {
                *b = (*b - max).exp();
                total += *b;
            }
            for (k, b) in buf.iter().enumerate() {
                out[base + k * v + i] = T::of(b / total);
            }
        }
    }
    Tensor::from_vec(s, out).expect("same shape")
}

pub(crate) fn softmax_backward<T: Real>(y: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let s = y.shape();
    let (c, v) = (s.channels(), s.voxels());
    let mut out = vec![T::zero(); s.numel()];
    for n in 0..s.batch() {
        let base = n * c * v;
        for i in 0..v {
            let dot: f64 = (0..c)
                .map(|k| y.data()[base + k * v + i].f64() * gy.data()[base + k * v + i].f64())
                .sum();
            for k in 0..c {
                let j = base + k * v + i;
                out[j] = T::of(y.data()[j].f64() * (gy.data()[j].f64() - dot));
            }
        }
    }
    Tensor::from_vec(s, out).expect("same shape")
}

impl<T: Real> Tape<T> {
    /// `x` for `x ≥ 0`, `slope·x` otherwise.
    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let value = self
            .value(x)
            .map(|v| if v >= T::zero() { v } else { v * slope });
        let rg = self.any_grad(&[x]);
        self.push(value, Op::LeakyRelu { x, slope }, rg)
    }

    /// Softmax across channels at every voxel, max-subtracted.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).channels() < 2 {
            return Err(Error::shape(format!(
                "softmax_channels needs at least 2 channels, got {}",
                self.shape(x)
            )));
        }
        let value = softmax_forward(self.value(x));
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Softmax { x }, rg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, random_tensor};
    use crate::nn::LEAKY_RELU_SLOPE;
    use crate::tensor::Shape;

    #[test]
    fn leaky_relu_pointwise_values() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_vec(Shape::new(1, 1, 1, 1, 3), vec![5.0, -2.0, 0.0]).unwrap());
        let y = t.leaky_relu(x, 0.01);
        assert_eq!(t.value(y).data(), &[5.0, -0.02, 0.0]);
        let l = t.sum(y);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 0.01, 1.0]);
    }

    #[test]
    fn leaky_relu_gradient_away_from_kink() {
        // keep every input at least 10 FD steps from the kink
        let x = random_tensor::<f64>(Shape::new(1, 2, 3, 3, 3), 1)
            .map(|v| if v.abs() < 1e-2 { v.signum() * 1e-2 + v } else { v });
        let probe = random_tensor::<f64>(Shape::new(1, 2, 3, 3, 3), 2);
        let r = check_gradients(&[x], 1e-3, |t, v| {
            let y = t.leaky_relu(v[0], LEAKY_RELU_SLOPE);
            let p = t.constant(probe.clone());
            let y = t.mul(y, p)?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-3, "{r:?}");
    }

    #[test]
    fn softmax_uniform_for_equal_logits() {
        let x = Tensor::<f64>::full(Shape::new(1, 3, 2, 1, 1), 0.4);
        let y = softmax_forward(&x);
        assert!(y.data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn softmax_is_shift_invariant_and_normalized() {
        let x = random_tensor::<f64>(Shape::new(2, 4, 2, 3, 2), 3);
        let y0 = softmax_forward(&x);
        let y1 = softmax_forward(&x.map(|v| v + 123.0));
        assert!(y0.max_abs_diff(&y1) < 1e-12);
        let s = y0.shape();
        for n in 0..2 {
            for i in 0..s.voxels() {
                let total: f64 = (0..4).map(|c| y0.plane(n, c)[i]).sum();
                assert!((total - 1.0).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let x = Tensor::<f32>::from_vec(Shape::new(1, 2, 1, 1, 1), vec![1000.0, 0.0]).unwrap();
        let y = softmax_forward(&x);
        // 64-bit reference: exp(-1000) underflows to exactly 0
        let reference = [1.0f64, (-1000.0f64).exp() / (1.0 + (-1000.0f64).exp())];
        assert_eq!(y.data()[0] as f64, reference[0]);
        assert_eq!(y.data()[1] as f64, reference[1]);
        assert!(y.all_finite());
    }

    #[test]
    fn softmax_rejects_single_channel() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2, 2)));
        assert!(t.softmax_channels(x).is_err());
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let x = random_tensor::<f64>(Shape::new(2, 3, 2, 2, 1), 4);
        let probe = random_tensor::<f64>(Shape::new(2, 3, 2, 2, 1), 5);
        let r = check_gradients(&[x], 1e-3, |t, v| {
            let y = t.softmax_channels(v[0])?;
            let p = t.constant(probe.clone());
            let y = t.mul(y, p)?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-3, "{r:?}");
    }
}
