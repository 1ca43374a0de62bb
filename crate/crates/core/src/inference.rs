//! Whole-volume prediction by sliding windows, probability ensembling and
//! Dice evaluation.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::arch::BaNet;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};
use crate::volume::{self, LabelVolume, Modality, Volume};

/// Softmax probabilities `(1, K, D, H, W)` with their argmax labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Tensor<f32>,
    pub labels: LabelVolume,
    pub spacing: [f64; 3],
}

impl Prediction {
    /// Builds the label map as the first maximal class per voxel.
    pub fn from_probs(probs: Tensor<f32>, spacing: [f64; 3]) -> Result<Self> {
        let s = probs.shape();
        if s.batch() != 1 {
            return Err(Error::shape(format!("prediction probabilities {s} must have batch 1")));
        }
        let labels = LabelVolume::new(s.spatial(), argmax(&probs), s.channels(), spacing)?;
        Ok(Prediction { probs, labels, spacing })
    }

    pub fn num_classes(&self) -> usize {
        self.probs.shape().channels()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.probs.shape().spatial()
    }
}

fn argmax(probs: &Tensor<f32>) -> Vec<u8> {
    let k = probs.shape().channels();
    let n = probs.shape().voxels();
    let p = probs.data();
    (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if p[c * n + i] > p[best * n + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Window origins along one axis of length `n`: stride `step`, with the last
/// window flush against the end.
pub fn window_starts(n: usize, window: usize, step: usize) -> Vec<usize> {
    let last = n - window;
    let count = last.div_ceil(step) + 1;
    (0..count).map(|i| (i * step).min(last)).collect()
}

/// Tiles the volume with `patch`-sized windows and averages the softmax
/// outputs of every window covering a voxel.
///
/// Each axis is zero-padded up to a multiple of the network's downsampling
/// factor and at least the patch size; a patch larger than that padded extent
/// shrinks to it, so a volume no bigger than the patch is a single forward
/// pass. Window stride is `round(patch · (1 − overlap))`.
pub fn sliding_window_predict(net: &BaNet<f32>, v: &Volume, patch: [usize; 3], overlap: f64) -> Result<Prediction> {
    if !(0.0..=0.9).contains(&overlap) {
        return Err(Error::config(format!("overlap {overlap} outside [0, 0.9]")));
    }
    let f = net.config.downsampling_factor();
    if patch.iter().any(|&p| p == 0 || p % f != 0) {
        return Err(Error::config(format!("patch {patch:?} must be positive multiples of {f}")));
    }
    let dims = v.dims();
    let mut window = [0; 3];
    let mut padded = [0; 3];
    for a in 0..3 {
        let rounded = dims[a].div_ceil(f) * f;
        window[a] = patch[a].min(rounded);
        padded[a] = rounded.max(window[a]);
    }
    let src = if padded == dims {
        v.data().to_vec()
    } else {
        pad_zero(v.data(), dims, padded)
    };
    let starts: Vec<Vec<usize>> = (0..3)
        .map(|a| {
            let step = ((window[a] as f64 * (1.0 - overlap)).round() as usize).max(1);
            window_starts(padded[a], window[a], step)
        })
        .collect();

    let k = net.config.num_classes;
    let np = padded.iter().product::<usize>();
    let mut acc = vec![0.0f64; k * np];
    let mut hits = vec![0u32; np];
    let wn = window.iter().product::<usize>();
    for &z0 in &starts[0] {
        for &y0 in &starts[1] {
            for &x0 in &starts[2] {
                let crop = volume::crop_grid(&src, padded, [z0, y0, x0], window)?;
                let x = Tensor::from_vec(Shape::new(1, 1, window[0], window[1], window[2]), crop)?;
                let p = net.forward_infer(&x)?;
                for z in 0..window[0] {
                    for y in 0..window[1] {
                        let row = ((z0 + z) * padded[1] + y0 + y) * padded[2] + x0;
                        let wrow = (z * window[1] + y) * window[2];
                        for x in 0..window[2] {
                            hits[row + x] += 1;
                        }
                        for c in 0..k {
                            let dst = &mut acc[c * np + row..c * np + row + window[2]];
                            let from = &p.data()[c * wn + wrow..c * wn + wrow + window[2]];
                            for (d, &s) in dst.iter_mut().zip(from) {
                                *d += s as f64;
                            }
                        }
                    }
                }
            }
        }
    }

    let n = dims.iter().product::<usize>();
    let mut probs = vec![0.0f32; k * n];
    let mut column = vec![0.0f64; k];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let i = (z * padded[1] + y) * padded[2] + x;
                let o = (z * dims[1] + y) * dims[2] + x;
                let h = hits[i] as f64;
                for c in 0..k {
                    column[c] = acc[c * np + i] / h;
                }
                let total: f64 = column.iter().sum();
                for c in 0..k {
                    probs[c * n + o] = (column[c] / total) as f32;
                }
            }
        }
    }
    let probs = Tensor::from_vec(Shape::new(1, k, dims[0], dims[1], dims[2]), probs)?;
    Prediction::from_probs(probs, v.spacing())
}

fn pad_zero(data: &[f32], dims: [usize; 3], padded: [usize; 3]) -> Vec<f32> {
    let mut out = vec![0.0; padded.iter().product()];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            let s = (z * dims[1] + y) * dims[2];
            let d = (z * padded[1] + y) * padded[2];
            out[d..d + dims[2]].copy_from_slice(&data[s..s + dims[2]]);
        }
    }
    out
}

/// Voxelwise mean of member probabilities, labels re-derived from the mean.
/// Members are summed in sorted order, so the result does not depend on the
/// order of `preds`.
pub fn ensemble(preds: &[Prediction]) -> Result<Prediction> {
    let first = preds.first().ok_or_else(|| Error::config("cannot ensemble zero predictions"))?;
    for p in &preds[1..] {
        if p.probs.shape() != first.probs.shape() {
            return Err(Error::shape(format!(
                "ensemble members {} and {}",
                first.probs.shape(),
                p.probs.shape()
            )));
        }
        if p.spacing != first.spacing {
            return Err(Error::shape(format!(
                "ensemble spacings {:?} and {:?}",
                first.spacing, p.spacing
            )));
        }
    }
    let m = preds.len() as f64;
    let mut members = vec![0.0f32; preds.len()];
    let data = (0..first.probs.len())
        .map(|i| {
            for (slot, p) in members.iter_mut().zip(preds) {
                *slot = p.probs.data()[i];
            }
            members.sort_by(f32::total_cmp);
            (members.iter().map(|&v| v as f64).sum::<f64>() / m) as f32
        })
        .collect();
    Prediction::from_probs(Tensor::from_vec(first.probs.shape(), data)?, first.spacing)
}

/// Trilinear resampling of every class channel onto `target` spacing,
/// renormalised per voxel.
pub fn resample_prediction(pred: &Prediction, target: [f64; 3]) -> Result<Prediction> {
    if pred.spacing == target {
        return Ok(pred.clone());
    }
    let k = pred.num_classes();
    let n = pred.probs.shape().voxels();
    let mut channels = Vec::with_capacity(k);
    for c in 0..k {
        let v = Volume::new(pred.dims(), pred.probs.data()[c * n..(c + 1) * n].to_vec(), pred.spacing, Modality::Synth)?;
        channels.push(volume::resample(&v, target)?);
    }
    let dims = channels[0].dims();
    let m = dims.iter().product::<usize>();
    let mut data = vec![0.0f32; k * m];
    for i in 0..m {
        let total: f64 = channels.iter().map(|v| v.data()[i].max(0.0) as f64).sum();
        for c in 0..k {
            let p = channels[c].data()[i].max(0.0) as f64;
            data[c * m + i] = if total > 0.0 { (p / total) as f32 } else { 1.0 / k as f32 };
        }
    }
    Prediction::from_probs(Tensor::from_vec(Shape::new(1, k, dims[0], dims[1], dims[2]), data)?, target)
}

/// Brings members of different resolutions onto one grid, then averages.
pub fn ensemble_on_grid(preds: &[Prediction], target: [f64; 3]) -> Result<Prediction> {
    let common: Vec<Prediction> = preds
        .iter()
        .map(|p| resample_prediction(p, target))
        .collect::<Result<_>>()?;
    ensemble(&common)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiceReport {
    /// Classes `1..K` in order.
    pub per_class: Vec<f64>,
    pub mean: f64,
}

/// `2|P ∩ G| / (|P| + |G|)` per foreground class; 1 when the class is absent
/// from both, 0 when absent from exactly one.
pub fn dice_score(pred: &LabelVolume, gt: &LabelVolume, num_classes: usize) -> Result<DiceReport> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
    }
    if num_classes < 2 {
        return Err(Error::config("Dice needs at least one foreground class"));
    }
    let mut inter = vec![0usize; num_classes];
    let mut np = vec![0usize; num_classes];
    let mut ng = vec![0usize; num_classes];
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        let (p, g) = (p as usize, g as usize);
        if p < num_classes {
            np[p] += 1;
        }
        if g < num_classes {
            ng[g] += 1;
        }
        if p == g && p < num_classes {
            inter[p] += 1;
        }
    }
    let per_class: Vec<f64> = (1..num_classes)
        .map(|c| match (np[c], ng[c]) {
            (0, 0) => 1.0,
            (a, b) => 2.0 * inter[c] as f64 / (a + b) as f64,
        })
        .collect();
    let mean = per_class.iter().sum::<f64>() / per_class.len() as f64;
    Ok(DiceReport { per_class, mean })
}

/// `class,dice` rows followed by a `mean` row.
pub fn write_dice_csv(path: &Path, report: &DiceReport) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "class,dice").expect("write to Vec");
    for (i, d) in report.per_class.iter().enumerate() {
        writeln!(out, "{},{d:.6}", i + 1).expect("write to Vec");
    }
    writeln!(out, "mean,{:.6}", report.mean).expect("write to Vec");
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Middle axial slice as a binary PGM, classes spread over the grey range.
pub fn write_midslice_pgm(path: &Path, labels: &LabelVolume) -> Result<()> {
    let [d, h, w] = labels.dims();
    let top = (labels.num_classes().max(2) - 1) as f64;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let z = d / 2;
    for y in 0..h {
        for x in 0..w {
            out.push((labels.get(z, y, x) as f64 * 255.0 / top).round() as u8);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
