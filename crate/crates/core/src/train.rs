//! SGD with a polynomial learning-rate schedule, patch sampling, the epoch
//! loop and checkpoints.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{Attention, BaNet, NetworkConfig};
use crate::error::{Error, Result};
use crate::supervision::{total_loss, SupervisionTargets};
use crate::tape::Tape;
use crate::tensor::{Real, Shape, Tensor};
use crate::volume::{LabelVolume, Volume};

/// Exponent of the polynomial decay.
pub const POLY_POWER: f64 = 0.9;

/// Random crops tried before falling back to centering on a foreground voxel.
const FG_REJECTION_TRIES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub max_epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub nesterov: bool,
    pub seed: u64,
    pub patch_dims: [usize; 3],
    pub fg_oversample_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.01,
            max_epochs: 200,
            steps_per_epoch: 10,
            batch_size: 2,
            momentum: 0.99,
            nesterov: true,
            seed: 0,
            patch_dims: [32, 32, 32],
            fg_oversample_prob: 1.0 / 3.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr0 = 0 is allowed: a null run is a useful fixed-point check
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::config(format!("lr0 must be >= 0, got {}", self.lr0)));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(0.0..=1.0).contains(&self.fg_oversample_prob) {
            return Err(Error::config("fg_oversample_prob must be in [0, 1]"));
        }
        if self.patch_dims.contains(&0) {
            return Err(Error::config("patch dims must be positive"));
        }
        Ok(())
    }
}

/// `lr0 · (1 − t/T)^0.9` for epoch `t` in `[0, T]`.
pub fn poly_lr(t: usize, cfg: &TrainConfig) -> Result<f64> {
    let big_t = cfg.max_epochs;
    if t > big_t {
        return Err(Error::config(format!("epoch {t} beyond max_epochs {big_t}")));
    }
    Ok(cfg.lr0 * (1.0 - t as f64 / big_t as f64).powf(POLY_POWER))
}

/// Momentum SGD. `v ← μv + g`; the step direction is `v`, or `g + μv` with
/// Nesterov lookahead.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T = f32> {
    pub momentum: f64,
    pub nesterov: bool,
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(net: &BaNet<T>, momentum: f64, nesterov: bool) -> Self {
        let velocity = net
            .parameters()
            .into_iter()
            .map(|(_, p)| Tensor::zeros(p.shape()))
            .collect();
        Sgd {
            momentum,
            nesterov,
            velocity,
        }
    }

    /// `grads` follows [`BaNet::parameters`] order.
    pub fn step(&mut self, net: &mut BaNet<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        let mut params = net.parameters_mut();
        if grads.len() != params.len() || self.velocity.len() != params.len() {
            return Err(Error::shape(format!(
                "{} gradients and {} momentum buffers for {} parameters",
                grads.len(),
                self.velocity.len(),
                params.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| g.is_none()) {
            return Err(Error::MissingGradient(params[i].0.clone()));
        }
        let (mu, lr) = (T::of(self.momentum), T::of(lr));
        for (((_, p), g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let g = g.as_ref().expect("checked above");
            if g.shape() != p.shape() {
                return Err(Error::shape(format!("gradient {} for parameter {}", g.shape(), p.shape())));
            }
            for ((p, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *v = mu * *v + g;
                let d = if self.nesterov { g + mu * *v } else { *v };
                *p = *p - lr * d;
            }
        }
        Ok(())
    }
}

/// One training volume with its labels.
#[derive(Clone, Debug)]
pub struct Case {
    pub image: Volume,
    pub labels: LabelVolume,
}

/// Random co-registered crop of `patch` voxels. With probability
/// `fg_oversample_prob` the crop must contain foreground: a few rejection
/// draws, then a crop centred on a random foreground voxel.
pub fn sample_patch(img: &Volume, y: &LabelVolume, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<(Tensor<f32>, LabelVolume)> {
    let dims = img.dims();
    let patch = cfg.patch_dims;
    if y.dims() != dims {
        return Err(Error::shape(format!("image {dims:?} vs labels {:?}", y.dims())));
    }
    if (0..3).any(|a| patch[a] > dims[a]) {
        return Err(Error::shape(format!("volume {dims:?} smaller than patch {patch:?}")));
    }
    let draw = |rng: &mut dyn rand::RngCore| -> [usize; 3] {
        std::array::from_fn(|a| rng.random_range(0..=dims[a] - patch[a]))
    };
    let force_fg = rng.random::<f64>() < cfg.fg_oversample_prob && y.has_foreground();
    let mut start = draw(rng);
    if force_fg && !window_has_foreground(y, start, patch) {
        let mut found = false;
        for _ in 1..FG_REJECTION_TRIES {
            start = draw(rng);
            if window_has_foreground(y, start, patch) {
                found = true;
                break;
            }
        }
        if !found {
            let fg: Vec<usize> = (0..y.labels().len()).filter(|&i| y.labels()[i] != 0).collect();
            let i = fg[rng.random_range(0..fg.len())];
            let at = [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]];
            start = std::array::from_fn(|a| at[a].saturating_sub(patch[a] / 2).min(dims[a] - patch[a]));
        }
    }
    let image = img.crop(start, patch)?;
    let labels = y.crop(start, patch)?;
    let x = Tensor::from_vec(Shape::new(1, 1, patch[0], patch[1], patch[2]), image.into_data())?;
    Ok((x, labels))
}

fn window_has_foreground(y: &LabelVolume, start: [usize; 3], size: [usize; 3]) -> bool {
    (start[0]..start[0] + size[0]).any(|z| {
        (start[1]..start[1] + size[1]).any(|yy| (start[2]..start[2] + size[2]).any(|x| y.get(z, yy, x) != 0))
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

/// Serialized ChaCha8 stream position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: BaNet<f32>,
    pub optimizer: Sgd<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub train_config: TrainConfig,
    pub rng: RngState,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: [usize; 5],
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    epoch: usize,
    network: NetworkConfig,
    train: TrainConfig,
    rng: RngState,
    parameters: Vec<ParamEntry>,
    /// Element offset of the momentum buffers in the payload.
    momentum_offset: usize,
}

/// `<base>.ckpt.json` and `<base>.ckpt.raw`. A path already ending in one of
/// those suffixes is accepted as the base.
pub fn checkpoint_paths(base: &Path) -> (PathBuf, PathBuf) {
    let s = base.to_string_lossy();
    let stem = s
        .strip_suffix(".ckpt.json")
        .or_else(|| s.strip_suffix(".ckpt.raw"))
        .unwrap_or(&s);
    (PathBuf::from(format!("{stem}.ckpt.json")), PathBuf::from(format!("{stem}.ckpt.raw")))
}

impl Checkpoint {
    /// Parameters then momentum buffers, little-endian f32, manifest order.
    pub fn payload(&self) -> Vec<u8> {
        let params = self.net.parameters();
        let mut out = Vec::with_capacity(8 * self.net.num_params());
        for t in params.iter().map(|(_, t)| *t).chain(&self.optimizer.velocity) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    fn manifest(&self) -> Manifest {
        let mut offset = 0;
        let parameters = self
            .net
            .parameters()
            .into_iter()
            .map(|(name, t)| {
                let e = ParamEntry {
                    name,
                    shape: t.shape().0,
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        Manifest {
            epoch: self.epoch,
            network: self.net.config.clone(),
            train: self.train_config.clone(),
            rng: self.rng.clone(),
            parameters,
            momentum_offset: offset,
        }
    }

    pub fn save(&self, base: &Path) -> Result<()> {
        let (json, raw) = checkpoint_paths(base);
        if let Some(dir) = json.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes");
        fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        fs::write(&raw, self.payload()).map_err(|e| Error::io(&raw, e))
    }

    pub fn load(base: &Path) -> Result<Self> {
        let (json, raw) = checkpoint_paths(base);
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Header {
            path: json.clone(),
            msg: e.to_string(),
        })?;
        let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
        let mut net = BaNet::<f32>::build(&m.network, 0)?;
        let total = net.num_params();
        if m.momentum_offset != total || bytes.len() != 8 * total {
            return Err(Error::PayloadSize {
                expected: 8 * total,
                found: bytes.len(),
            });
        }
        let floats: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut velocity = Vec::new();
        let mut expected_offset = 0;
        let params = net.parameters_mut();
        if params.len() != m.parameters.len() {
            return Err(Error::Payload(format!(
                "manifest lists {} parameters, network has {}",
                m.parameters.len(),
                params.len()
            )));
        }
        for ((name, t), e) in params.into_iter().zip(&m.parameters) {
            if name != e.name || t.shape().0 != e.shape || e.offset != expected_offset {
                return Err(Error::Payload(format!(
                    "manifest entry `{}` {:?}@{} does not match parameter `{name}` {:?}@{expected_offset}",
                    e.name,
                    e.shape,
                    e.offset,
                    t.shape().0
                )));
            }
            let n = t.len();
            t.data_mut().copy_from_slice(&floats[e.offset..e.offset + n]);
            let o = total + e.offset;
            velocity.push(Tensor::from_vec(t.shape(), floats[o..o + n].to_vec())?);
            expected_offset += n;
        }
        Ok(Checkpoint {
            net,
            optimizer: Sgd {
                momentum: m.train.momentum,
                nesterov: m.train.nesterov,
                velocity,
            },
            epoch: m.epoch,
            train_config: m.train,
            rng: m.rng,
        })
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<EpochLoss>,
}

/// One optimisation step on a batch; returns the loss.
pub fn train_step(net: &mut BaNet<f32>, opt: &mut Sgd<f32>, tape: &mut Tape<f32>, x: &Tensor<f32>, labels: &[LabelVolume], lr: f64) -> Result<f64> {
    tape.reset();
    let targets = SupervisionTargets::<f32>::build(labels, net.config.scales(), net.config.num_classes)?;
    let (out, params) = net.forward_train(tape, x, Attention::Learned)?;
    let loss = total_loss(tape, &out.seg_probs, &out.boundary_probs, &targets)?;
    let value = tape.value(loss).item().f64();
    if !value.is_finite() {
        let op = tape.first_non_finite().unwrap_or("total_loss");
        return Err(Error::NonFinite { epoch: 0, step: 0, op });
    }
    tape.backward(loss)?;
    let grads: Vec<Option<Tensor<f32>>> = params.iter().map(|&p| tape.take_grad(p)).collect();
    opt.step(net, &grads, lr)?;
    Ok(value)
}

pub fn train(net: BaNet<f32>, data: &[Case], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(net, data, cfg, |_| {})
}

/// Runs `max_epochs × steps_per_epoch` steps with the learning rate fixed per
/// epoch at `poly_lr(epoch)`. Every random draw comes from one ChaCha8 stream
/// seeded by `cfg.seed`.
pub fn train_with_progress(mut net: BaNet<f32>, data: &[Case], cfg: &TrainConfig, mut progress: impl FnMut(&EpochLoss)) -> Result<TrainOutcome> {
    cfg.validate()?;
    net.config.validate()?;
    if data.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let f = net.config.downsampling_factor();
    if cfg.patch_dims.iter().any(|&d| d % f != 0) {
        return Err(Error::config(format!(
            "patch dims {:?} must be multiples of {f}",
            cfg.patch_dims
        )));
    }
    for (i, c) in data.iter().enumerate() {
        if c.labels.num_classes() > net.config.num_classes {
            return Err(Error::config(format!(
                "case {i} has {} classes, network predicts {}",
                c.labels.num_classes(),
                net.config.num_classes
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(&net, cfg.momentum, cfg.nesterov);
    let mut tape = Tape::new();
    let mut trace = Vec::with_capacity(cfg.max_epochs);
    for epoch in 0..cfg.max_epochs {
        let lr = poly_lr(epoch, cfg)?;
        let mut sum = 0.0;
        for step in 0..cfg.steps_per_epoch {
            let mut xs = Vec::with_capacity(cfg.batch_size);
            let mut ys = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let c = &data[rng.random_range(0..data.len())];
                let (x, y) = sample_patch(&c.image, &c.labels, cfg, &mut rng)?;
                xs.push(x);
                ys.push(relabel(y, net.config.num_classes)?);
            }
            let x = Tensor::stack_batch(&xs)?;
            sum += train_step(&mut net, &mut opt, &mut tape, &x, &ys, lr).map_err(|e| match e {
                Error::NonFinite { op, .. } => Error::NonFinite { epoch, step, op },
                e => e,
            })?;
        }
        let e = EpochLoss {
            epoch,
            mean_loss: sum / cfg.steps_per_epoch.max(1) as f64,
            lr,
        };
        progress(&e);
        trace.push(e);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            net,
            optimizer: opt,
            epoch: cfg.max_epochs,
            train_config: cfg.clone(),
            rng: RngState::capture(&rng),
        },
        trace,
    })
}

fn relabel(y: LabelVolume, num_classes: usize) -> Result<LabelVolume> {
    if y.num_classes() == num_classes {
        return Ok(y);
    }
    LabelVolume::new(y.dims(), y.labels().to_vec(), num_classes, y.spacing())
}

pub fn write_loss_csv(path: &Path, trace: &[EpochLoss]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "epoch,mean_loss,lr").expect("write to Vec");
    for e in trace {
        writeln!(out, "{},{:e},{:e}", e.epoch, e.mean_loss, e.lr).expect("write to Vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomConfig};

    fn tiny_net(seed: u64) -> BaNet<f32> {
        let cfg = NetworkConfig {
            levels: 2,
            base_channels: 2,
            channel_cap: 8,
            num_classes: 3,
            patch_dims: [4, 4, 4],
            boundary_attention: true,
        };
        BaNet::build(&cfg, seed).unwrap()
    }

    fn tiny_data() -> Vec<Case> {
        let pc = PhantomConfig {
            dims: [6, 6, 6],
            num_organs: 2,
            radius_ranges: vec![(2.0, 2.5), (1.0, 1.5)],
            ..Default::default()
        };
        (0..2)
            .map(|s| {
                let (image, labels) = generate_phantom(&pc.with_seed(s)).unwrap();
                Case { image, labels }
            })
            .collect()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            max_epochs: 3,
            steps_per_epoch: 2,
            patch_dims: [4, 4, 4],
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr0: -0.1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { max_epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"max_epochs": 5}"#).unwrap();
        assert_eq!(parsed, TrainConfig { max_epochs: 5, ..Default::default() });
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epochs": 5}"#).is_err());
    }

    #[test]
    fn poly_lr_values() {
        let cfg = TrainConfig {
            max_epochs: 1000,
            ..Default::default()
        };
        assert_eq!(poly_lr(0, &cfg).unwrap(), 0.01);
        assert_eq!(poly_lr(1000, &cfg).unwrap(), 0.0);
        assert!((poly_lr(500, &cfg).unwrap() - 5.358_867_312_681_466e-3).abs() < 1e-12);
        assert!(poly_lr(1001, &cfg).is_err());
        let lrs: Vec<f64> = (0..=1000).map(|t| poly_lr(t, &cfg).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    fn single_param_net() -> (BaNet<f64>, usize) {
        let net = tiny_net(0).cast::<f64>();
        let n = net.parameters().len();
        (net, n)
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let mut net = tiny_net(1);
        let before = net.clone();
        let mut opt = Sgd::new(&net, 0.9, true);
        let grads: Vec<_> = net.parameters().iter().map(|(_, p)| Some(Tensor::full(p.shape(), 3.5f32))).collect();
        opt.step(&mut net, &grads, 0.0).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn vanilla_step_arithmetic() {
        let (mut net, n) = single_param_net();
        for (_, p) in net.parameters_mut() {
            p.data_mut().fill(1.0);
        }
        let mut opt = Sgd::new(&net, 0.0, false);
        let grads: Vec<_> = net.parameters().iter().map(|(_, p)| Some(Tensor::full(p.shape(), 2.0))).collect();
        opt.step(&mut net, &grads, 0.1).unwrap();
        assert_eq!(grads.len(), n);
        for (_, p) in net.parameters() {
            assert!(p.data().iter().all(|&v| (v - 0.8).abs() < 1e-15));
        }
    }

    #[test]
    fn two_momentum_steps_unrolled() {
        for nesterov in [false, true] {
            let (mut net, _) = single_param_net();
            for (_, p) in net.parameters_mut() {
                p.data_mut().fill(1.0);
            }
            let (mu, g, lr) = (0.9, 2.0, 0.1);
            let mut opt = Sgd::new(&net, mu, nesterov);
            let grads: Vec<_> = net.parameters().iter().map(|(_, p)| Some(Tensor::full(p.shape(), g))).collect();
            opt.step(&mut net, &grads, lr).unwrap();
            opt.step(&mut net, &grads, lr).unwrap();
            // v1 = g, v2 = μg + g
            let (v1, v2) = (g, mu * g + g);
            let (d1, d2) = if nesterov { (g + mu * v1, g + mu * v2) } else { (v1, v2) };
            let want = 1.0 - lr * d1 - lr * d2;
            for (_, p) in net.parameters() {
                assert!(p.data().iter().all(|&v| (v - want).abs() < 1e-12), "{nesterov}");
            }
        }
    }

    #[test]
    fn missing_gradient_is_named() {
        let mut net = tiny_net(0);
        let mut opt = Sgd::new(&net, 0.9, true);
        let mut grads: Vec<_> = net.parameters().iter().map(|(_, p)| Some(Tensor::zeros(p.shape()))).collect();
        grads[3] = None;
        let name = net.parameters()[3].0.clone();
        match opt.step(&mut net, &grads, 0.1) {
            Err(Error::MissingGradient(n)) => assert_eq!(n, name),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn whole_volume_patch_is_deterministic() {
        let data = tiny_data();
        let cfg = TrainConfig {
            patch_dims: [6, 6, 6],
            ..tiny_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            let (x, y) = sample_patch(&data[0].image, &data[0].labels, &cfg, &mut rng).unwrap();
            assert_eq!(x.data(), data[0].image.data());
            assert_eq!(y, data[0].labels);
        }
    }

    #[test]
    fn forced_foreground_always_hits_single_voxel() {
        let dims = [12, 12, 12];
        let mut labels = vec![0u8; 12 * 12 * 12];
        labels[(9 * 12 + 2) * 12 + 10] = 1;
        let y = LabelVolume::new(dims, labels, 2, [1.0; 3]).unwrap();
        let img = Volume::new(dims, (0..1728).map(|i| i as f32).collect(), [1.0; 3], crate::volume::Modality::Synth).unwrap();
        let cfg = TrainConfig {
            patch_dims: [4, 4, 4],
            fg_oversample_prob: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let (x, p) = sample_patch(&img, &y, &cfg, &mut rng).unwrap();
            assert_eq!(p.count(1), 1);
            // the image crop is the same window
            let i = p.labels().iter().position(|&l| l == 1).unwrap();
            assert_eq!(x.data()[i], ((9 * 12 + 2) * 12 + 10) as f32);
        }
    }

    #[test]
    fn oversampling_rate_at_least_requested() {
        let dims = [32, 32, 32];
        let mut labels = vec![0u8; 32 * 32 * 32];
        labels[(3 * 32 + 4) * 32 + 5] = 1;
        labels[(28 * 32 + 20) * 32 + 30] = 1;
        let y = LabelVolume::new(dims, labels, 2, [1.0; 3]).unwrap();
        let img = Volume::new(dims, vec![0.0; 32 * 32 * 32], [1.0; 3], crate::volume::Modality::Synth).unwrap();
        let cfg = TrainConfig {
            patch_dims: [8, 8, 8],
            fg_oversample_prob: 0.33,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hits = (0..1000)
            .filter(|_| sample_patch(&img, &y, &cfg, &mut rng).unwrap().1.has_foreground())
            .count();
        assert!(hits >= 330, "{hits}");
    }

    #[test]
    fn patch_larger_than_volume_fails() {
        let data = tiny_data();
        let cfg = TrainConfig {
            patch_dims: [8, 4, 4],
            ..tiny_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_patch(&data[0].image, &data[0].labels, &cfg, &mut rng).is_err());
    }

    #[test]
    fn null_training_is_a_fixed_point() {
        let net = tiny_net(2);
        let cfg = TrainConfig {
            max_epochs: 1,
            steps_per_epoch: 1,
            lr0: 0.0,
            ..tiny_cfg()
        };
        let out = train(net.clone(), &tiny_data(), &cfg).unwrap();
        assert_eq!(out.checkpoint.net, net);
    }

    #[test]
    fn same_seed_same_trace_and_weights() {
        let a = train(tiny_net(3), &tiny_data(), &tiny_cfg()).unwrap();
        let b = train(tiny_net(3), &tiny_data(), &tiny_cfg()).unwrap();
        let bits = |t: &[EpochLoss]| t.iter().map(|e| e.mean_loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.trace), bits(&b.trace));
        assert_eq!(a.checkpoint.payload(), b.checkpoint.payload());
        let c = train(tiny_net(3), &tiny_data(), &TrainConfig { seed: 6, ..tiny_cfg() }).unwrap();
        assert_ne!(bits(&a.trace), bits(&c.trace));
    }

    #[test]
    fn trace_uses_epoch_learning_rates() {
        let cfg = tiny_cfg();
        let out = train(tiny_net(4), &tiny_data(), &cfg).unwrap();
        assert_eq!(out.trace.len(), 3);
        for e in &out.trace {
            assert_eq!(e.lr, poly_lr(e.epoch, &cfg).unwrap());
            assert!(e.mean_loss.is_finite() && e.mean_loss > 0.0);
        }
    }

    #[test]
    fn nan_input_aborts_with_op_name() {
        let mut data = tiny_data();
        let mut net = tiny_net(0);
        let mut opt = Sgd::new(&net, 0.9, true);
        let mut tape = Tape::new();
        let x = Tensor::full(Shape::new(1, 1, 4, 4, 4), f32::NAN);
        let y = data.remove(0).labels.crop([0, 0, 0], [4, 4, 4]).unwrap();
        match train_step(&mut net, &mut opt, &mut tape, &x, &[y], 0.01) {
            Err(Error::NonFinite { op, .. }) => assert_eq!(op, "leaf"),
            other => panic!("{:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let out = train(tiny_net(5), &tiny_data(), &tiny_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("run");
        out.checkpoint.save(&base).unwrap();
        let back = Checkpoint::load(&base.with_extension("ckpt.json")).unwrap();
        assert_eq!(back, out.checkpoint);
        let x = Tensor::from_vec(Shape::new(1, 1, 4, 4, 4), (0..64).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let a = out.checkpoint.net.forward_infer(&x).unwrap();
        let b = back.net.forward_infer(&x).unwrap();
        assert_eq!(a, b);
        let rng = back.rng.restore();
        assert_eq!(RngState::capture(&rng), out.checkpoint.rng);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let out = train(tiny_net(5), &tiny_data(), &TrainConfig { max_epochs: 1, ..tiny_cfg() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("run");
        out.checkpoint.save(&base).unwrap();
        let (_, raw) = checkpoint_paths(&base);
        let mut bytes = fs::read(&raw).unwrap();
        bytes.pop();
        fs::write(&raw, bytes).unwrap();
        assert!(matches!(Checkpoint::load(&base), Err(Error::PayloadSize { .. })));
    }

    #[test]
    fn loss_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        let trace = [
            EpochLoss { epoch: 0, mean_loss: 1.5, lr: 0.01 },
            EpochLoss { epoch: 1, mean_loss: 0.25, lr: 0.005 },
        ];
        write_loss_csv(&p, &trace).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,mean_loss,lr");
        assert_eq!(lines.len(), 3);
        let f: Vec<f64> = lines[2].split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(f, vec![1.0, 0.25, 0.005]);
    }
}
