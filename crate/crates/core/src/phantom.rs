//! Synthetic multi-organ phantoms: axis-aligned ellipsoids of very different
//! sizes on a noisy background with small intensity steps between them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Modality, Volume};

/// Redraws allowed before an organ that ends up with no voxels is an error.
pub const MAX_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub num_organs: usize,
    /// Semi-axis interval `(lo, hi)` in voxels for each organ, drawn per axis.
    pub radius_ranges: Vec<(f64, f64)>,
    pub contrast_gap: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: [32, 32, 32],
            num_organs: 3,
            radius_ranges: vec![(9.0, 11.0), (4.5, 5.5), (2.5, 3.0)],
            contrast_gap: 0.15,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        PhantomConfig { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::config(format!("phantom dims {:?} must be positive", self.dims)));
        }
        if self.num_organs > 255 {
            return Err(Error::config("at most 255 organs fit in u8 labels"));
        }
        if self.radius_ranges.len() != self.num_organs {
            return Err(Error::config(format!(
                "{} radius ranges for {} organs",
                self.radius_ranges.len(),
                self.num_organs
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be finite and >= 0"));
        }
        if !(self.contrast_gap >= 0.0 && self.contrast_gap.is_finite()) {
            return Err(Error::config("contrast_gap must be finite and >= 0"));
        }
        let span = self.dims.iter().map(|&d| (d - 1) as f64 / 2.0).fold(f64::INFINITY, f64::min);
        for (i, &(lo, hi)) in self.radius_ranges.iter().enumerate() {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::config(format!("organ {}: bad radius range ({lo}, {hi})", i + 1)));
            }
            if hi > span {
                return Err(Error::config(format!(
                    "organ {}: radius {hi} does not fit in dims {:?}",
                    i + 1,
                    self.dims
                )));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_organs + 1
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn draw(rng: &mut ChaCha8Rng, dims: [usize; 3], (lo, hi): (f64, f64)) -> Self {
        let mut radii = [0.0; 3];
        let mut center = [0.0; 3];
        for a in 0..3 {
            radii[a] = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let (c0, c1) = (radii[a], (dims[a] - 1) as f64 - radii[a]);
            center[a] = if c1 > c0 { rng.random_range(c0..=c1) } else { (dims[a] - 1) as f64 / 2.0 };
        }
        Ellipsoid { center, radii }
    }

    fn contains(&self, p: [usize; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] as f64 - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

fn paint(dims: [usize; 3], organs: &[Ellipsoid]) -> Vec<u8> {
    let [d, h, w] = dims;
    let mut labels = vec![0u8; d * h * w];
    for (k, e) in organs.iter().enumerate() {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if e.contains([z, y, x]) {
                        labels[(z * h + y) * w + x] = (k + 1) as u8;
                    }
                }
            }
        }
    }
    labels
}

/// Draws the organs (later ones overwrite earlier ones), then the image:
/// `label · contrast_gap` plus Gaussian noise. Deterministic per seed.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<(Volume, LabelVolume)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut labels = None;
    for _ in 0..MAX_ATTEMPTS {
        let organs: Vec<Ellipsoid> = cfg
            .radius_ranges
            .iter()
            .map(|&r| Ellipsoid::draw(&mut rng, cfg.dims, r))
            .collect();
        let l = paint(cfg.dims, &organs);
        let mut seen = vec![false; cfg.num_classes()];
        for &v in &l {
            seen[v as usize] = true;
        }
        if seen[1..].iter().all(|&s| s) {
            labels = Some(l);
            break;
        }
    }
    let labels = labels.ok_or_else(|| Error::RetryExhausted {
        attempts: MAX_ATTEMPTS,
        msg: format!("some organ stayed empty in dims {:?}", cfg.dims),
    })?;

    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::config(e.to_string()))?;
    let data = labels
        .iter()
        .map(|&l| {
            let base = l as f64 * cfg.contrast_gap;
            let n = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (base + n) as f32
        })
        .collect();
    let spacing = [1.0; 3];
    let image = Volume::new(cfg.dims, data, spacing, Modality::Synth)?;
    let labels = LabelVolume::new(cfg.dims, labels, cfg.num_classes(), spacing)?;
    Ok((image, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_organs_is_pure_noise() {
        let cfg = PhantomConfig { num_organs: 0, radius_ranges: vec![], ..Default::default() };
        let (img, lab) = generate_phantom(&cfg).unwrap();
        assert!(!lab.has_foreground());
        let n = img.data().len() as f64;
        let mean = img.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let sd = (img.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((sd - 0.1).abs() < 0.01, "{sd}");
    }

    #[test]
    fn noiseless_image_matches_labels() {
        let cfg = PhantomConfig { noise_sigma: 0.0, contrast_gap: 1.0, seed: 3, ..Default::default() };
        let (img, lab) = generate_phantom(&cfg).unwrap();
        for (&v, &l) in img.data().iter().zip(lab.labels()) {
            assert_eq!(v, l as f32);
        }
    }

    #[test]
    fn size_imbalance() {
        let cfg = PhantomConfig {
            radius_ranges: vec![(10.0, 10.0), (5.0, 5.0), (2.0, 2.0)],
            seed: 11,
            ..Default::default()
        };
        let (_, lab) = generate_phantom(&cfg).unwrap();
        let c: Vec<usize> = (1..=3).map(|k| lab.count(k)).collect();
        assert!(c[0] > c[1] && c[1] > c[2], "{c:?}");
        assert!(c[0] as f64 / c[2] as f64 > 20.0, "{c:?}");
    }

    #[test]
    fn defaults_cover_every_organ_across_seeds() {
        for seed in 0..20 {
            let (_, lab) = generate_phantom(&PhantomConfig::default().with_seed(seed)).unwrap();
            let c: Vec<usize> = (1..=3).map(|k| lab.count(k)).collect();
            assert!(c.iter().all(|&n| n > 0));
            assert!(c[0] as f64 / c[2] as f64 > 20.0, "seed {seed}: {c:?}");
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = PhantomConfig::default().with_seed(42);
        let (a, la) = generate_phantom(&cfg).unwrap();
        let (b, lb) = generate_phantom(&cfg).unwrap();
        assert_eq!(la, lb);
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let (_, lc) = generate_phantom(&cfg.with_seed(43)).unwrap();
        assert_ne!(la, lc);
    }

    #[test]
    fn rejects_bad_configs() {
        let too_big = PhantomConfig { dims: [8, 8, 8], ..Default::default() };
        assert!(matches!(generate_phantom(&too_big), Err(Error::Config(_))));
        let neg = PhantomConfig { noise_sigma: -1.0, ..Default::default() };
        assert!(neg.validate().is_err());
        let count = PhantomConfig { num_organs: 2, ..Default::default() };
        assert!(count.validate().is_err());
    }

    #[test]
    fn unreachable_organ_exhausts_retries() {
        // a 0.01-voxel ellipsoid almost never contains a grid point
        let cfg = PhantomConfig {
            dims: [5, 5, 5],
            num_organs: 2,
            radius_ranges: vec![(0.01, 0.01), (2.0, 2.0)],
            ..Default::default()
        };
        assert!(matches!(generate_phantom(&cfg), Err(Error::RetryExhausted { .. })));
    }
}
