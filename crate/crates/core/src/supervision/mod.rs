//! Deep-supervision targets and the weighted multi-scale loss.
//!
//! Ground truth is downsampled once per supervised decoder scale, and the
//! boundary target at each scale is extracted from the *downsampled* labels,
//! so targets at scale `s` are always consistent with one another.

pub mod loss;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Shape, Tensor};
use crate::volume::LabelVolume;

pub use loss::{dice_ce_terms, DICE_EPS};

/// Labels at scales `0..scales`, scale `s` sampled at every `2^s`-th voxel
/// (even-index nearest neighbour). Scale 0 is the input.
pub fn label_pyramid(y: &LabelVolume, scales: usize) -> Result<Vec<LabelVolume>> {
    if scales == 0 {
        return Err(Error::config("label_pyramid needs at least one scale"));
    }
    let factor = 1usize << (scales - 1);
    if y.dims().iter().any(|d| d % factor != 0) {
        return Err(Error::shape(format!(
            "label dims {:?} not divisible by {factor}",
            y.dims()
        )));
    }
    let mut out = Vec::with_capacity(scales);
    out.push(y.clone());
    for s in 1..scales {
        let step = 1usize << s;
        let dims = y.dims().map(|d| d / step);
        let mut labels = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[0] {
            for yy in 0..dims[1] {
                for x in 0..dims[2] {
                    labels.push(y.get(z * step, yy * step, x * step));
                }
            }
        }
        let spacing = y.spacing().map(|sp| sp * step as f64);
        out.push(LabelVolume::new(dims, labels, y.num_classes(), spacing)?);
    }
    Ok(out)
}

/// Binary surface mask: a voxel is boundary iff it is foreground and at
/// least one face neighbour carries a different label. Neighbours outside
/// the grid count as background.
pub fn extract_boundary(y: &LabelVolume) -> LabelVolume {
    let [d, h, w] = y.dims();
    let mut out = vec![0u8; d * h * w];
    let at = |z: isize, yy: isize, x: isize| -> u8 {
        if z < 0 || yy < 0 || x < 0 || z >= d as isize || yy >= h as isize || x >= w as isize {
            0
        } else {
            y.get(z as usize, yy as usize, x as usize)
        }
    };
    const FACES: [(isize, isize, isize); 6] = [
        (-1, 0, 0),
        (1, 0, 0),
        (0, -1, 0),
        (0, 1, 0),
        (0, 0, -1),
        (0, 0, 1),
    ];
    for z in 0..d {
        for yy in 0..h {
            for x in 0..w {
                let l = y.get(z, yy, x);
                if l == 0 {
                    continue;
                }
                let (zi, yi, xi) = (z as isize, yy as isize, x as isize);
                if FACES.iter().any(|&(dz, dy, dx)| at(zi + dz, yi + dy, xi + dx) != l) {
                    out[(z * h + yy) * w + x] = 1;
                }
            }
        }
    }
    LabelVolume::new(y.dims(), out, 2, y.spacing()).expect("binary mask")
}

/// Stacks one-hot encodings of `ys` into an `(N, K, D, H, W)` tensor.
pub fn one_hot<T: Real>(ys: &[LabelVolume], num_classes: usize) -> Result<Tensor<T>> {
    let first = ys
        .first()
        .ok_or_else(|| Error::shape("one_hot of an empty batch"))?;
    let [d, h, w] = first.dims();
    let v = d * h * w;
    let mut data = vec![T::zero(); ys.len() * num_classes * v];
    for (n, y) in ys.iter().enumerate() {
        if y.dims() != first.dims() {
            return Err(Error::shape(format!(
                "one_hot batch dims {:?} vs {:?}",
                y.dims(),
                first.dims()
            )));
        }
        for (i, &l) in y.labels().iter().enumerate() {
            let l = l as usize;
            if l >= num_classes {
                return Err(Error::LabelOutOfRange {
                    value: l as u8,
                    num_classes,
                });
            }
            data[(n * num_classes + l) * v + i] = T::one();
        }
    }
    Tensor::from_vec(Shape::new(ys.len(), num_classes, d, h, w), data)
}

/// Scale weights `2^{-s}` normalized to sum to one, finest first.
pub fn omega(scales: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..scales).map(|s| 0.5f64.powi(s as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|r| r / total).collect()
}

/// One-hot segmentation and boundary targets for every supervised scale.
#[derive(Clone, Debug)]
pub struct SupervisionTargets<T = f32> {
    pub seg: Vec<Tensor<T>>,
    pub boundary: Vec<Tensor<T>>,
    pub omega: Vec<f64>,
}

impl<T: Real> SupervisionTargets<T> {
    /// Builds targets for a batch of label patches.
    pub fn build(labels: &[LabelVolume], scales: usize, num_classes: usize) -> Result<Self> {
        let pyramids = labels
            .iter()
            .map(|y| label_pyramid(y, scales))
            .collect::<Result<Vec<_>>>()?;
        let mut seg = Vec::with_capacity(scales);
        let mut boundary = Vec::with_capacity(scales);
        for s in 0..scales {
            let level: Vec<LabelVolume> = pyramids.iter().map(|p| p[s].clone()).collect();
            let edges: Vec<LabelVolume> = level.iter().map(extract_boundary).collect();
            seg.push(one_hot(&level, num_classes)?);
            boundary.push(one_hot(&edges, 2)?);
        }
        Ok(SupervisionTargets {
            seg,
            boundary,
            omega: omega(scales),
        })
    }

    pub fn scales(&self) -> usize {
        self.seg.len()
    }

    pub fn cast<U: Real>(&self) -> SupervisionTargets<U> {
        SupervisionTargets {
            seg: self.seg.iter().map(|t| t.cast()).collect(),
            boundary: self.boundary.iter().map(|t| t.cast()).collect(),
            omega: self.omega.clone(),
        }
    }
}

/// `Σ_s ω_s · (L(seg_s) + L(boundary_s))`.
///
/// An empty `boundary_probs` list drops the boundary terms, which is the
/// loss of the no-boundary ablation.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    seg_probs: &[Var],
    boundary_probs: &[Var],
    targets: &SupervisionTargets<T>,
) -> Result<Var> {
    let scales = targets.scales();
    if seg_probs.len() != scales || !(boundary_probs.is_empty() || boundary_probs.len() == scales) {
        return Err(Error::shape(format!(
            "total_loss: {} seg / {} boundary outputs for {scales} scales",
            seg_probs.len(),
            boundary_probs.len()
        )));
    }
    let mut total: Option<Var> = None;
    for s in 0..scales {
        let y = tape.constant(targets.seg[s].clone());
        let mut term = tape.dice_ce_loss(seg_probs[s], y)?;
        if let Some(&b) = boundary_probs.get(s) {
            let yb = tape.constant(targets.boundary[s].clone());
            let lb = tape.dice_ce_loss(b, yb)?;
            term = tape.add(term, lb)?;
        }
        let weighted = tape.mul_scalar(term, T::of(targets.omega[s]));
        total = Some(match total {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
    }
    total.ok_or_else(|| Error::shape("total_loss over zero scales"))
}
