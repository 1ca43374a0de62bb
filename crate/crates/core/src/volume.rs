//! Scalar and label volumes, their on-disk format, and intensity
//! preprocessing.
//!
//! A volume on disk is a pair of files sharing a stem: `<name>.json`
//! describing the grid and `<name>.raw` holding exactly `d·h·w` little-endian
//! elements in z-major, then y, then x order.
//!
//! ```json
//! { "dims": [32, 32, 32], "spacing_mm": [1.0, 1.0, 1.0], "dtype": "f32", "modality": "SYNTH" }
//! ```
//!
//! Label volumes use `"dtype": "u8"` and carry `num_classes`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "CT")]
    Ct,
    #[serde(rename = "MR")]
    Mr,
    #[serde(rename = "SYNTH")]
    Synth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    U8,
}

/// Contents of a `<name>.json` volume header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dtype: DType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<Modality>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    /// Set on probability dumps: `channels` volumes stacked along z.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
}

fn check_grid(dims: [usize; 3], spacing: [f64; 3]) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::shape(format!("volume dims {dims:?} must all be >= 1")));
    }
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::config(format!(
            "spacing {spacing:?} must be strictly positive and finite"
        )));
    }
    Ok(())
}

/// Intensity grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    data: Vec<f32>,
    spacing: [f64; 3],
    modality: Modality,
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f32>, spacing: [f64; 3], modality: Modality) -> Result<Self> {
        check_grid(dims, spacing)?;
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::shape(format!(
                "{} values for dims {dims:?}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Payload("volume contains NaN or infinity".into()));
        }
        Ok(Volume {
            dims,
            data,
            spacing,
            modality,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[(z * self.dims[1] + y) * self.dims[2] + x]
    }

    fn with_data(&self, data: Vec<f32>) -> Self {
        Volume {
            data,
            ..self.clone()
        }
    }
}

/// Integer class grid; 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    dims: [usize; 3],
    labels: Vec<u8>,
    num_classes: usize,
    spacing: [f64; 3],
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], labels: Vec<u8>, num_classes: usize, spacing: [f64; 3]) -> Result<Self> {
        check_grid(dims, spacing)?;
        if num_classes == 0 || num_classes > 256 {
            return Err(Error::config(format!(
                "num_classes {num_classes} outside 1..=256"
            )));
        }
        if labels.len() != dims.iter().product::<usize>() {
            return Err(Error::shape(format!(
                "{} labels for dims {dims:?}",
                labels.len()
            )));
        }
        if let Some(&value) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::LabelOutOfRange { value, num_classes });
        }
        Ok(LabelVolume {
            dims,
            labels,
            num_classes,
            spacing,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.labels[(z * self.dims[1] + y) * self.dims[2] + x]
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    pub fn has_foreground(&self) -> bool {
        self.labels.iter().any(|&l| l != 0)
    }

    /// Sub-block `[start, start + size)` along each axis.
    pub fn crop(&self, start: [usize; 3], size: [usize; 3]) -> Result<Self> {
        let labels = crop_grid(&self.labels, self.dims, start, size)?;
        LabelVolume::new(size, labels, self.num_classes, self.spacing)
    }
}

pub(crate) fn crop_grid<V: Copy>(data: &[V], dims: [usize; 3], start: [usize; 3], size: [usize; 3]) -> Result<Vec<V>> {
    for a in 0..3 {
        if start[a] + size[a] > dims[a] {
            return Err(Error::shape(format!(
                "crop {start:?}+{size:?} exceeds dims {dims:?}"
            )));
        }
    }
    let mut out = Vec::with_capacity(size.iter().product());
    for z in start[0]..start[0] + size[0] {
        for y in start[1]..start[1] + size[1] {
            let row = (z * dims[1] + y) * dims[2];
            out.extend_from_slice(&data[row + start[2]..row + start[2] + size[2]]);
        }
    }
    Ok(out)
}

impl Volume {
    pub fn crop(&self, start: [usize; 3], size: [usize; 3]) -> Result<Self> {
        let data = crop_grid(&self.data, self.dims, start, size)?;
        Volume::new(size, data, self.spacing, self.modality)
    }
}

/// Either kind of volume, as returned by [`read_volume`].
#[derive(Clone, Debug, PartialEq)]
pub enum AnyVolume {
    Image(Volume),
    Labels(LabelVolume),
}

/// `<name>.json` / `<name>.raw` for a path given with or without the
/// `.json` extension.
pub fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = if path.extension().is_some_and(|e| e == "json") {
        path.with_extension("")
    } else {
        path.to_path_buf()
    };
    let mut header = stem.clone().into_os_string();
    header.push(".json");
    let mut raw = stem.into_os_string();
    raw.push(".raw");
    (header.into(), raw.into())
}

pub fn read_header(path: &Path) -> Result<VolumeHeader> {
    let (hpath, _) = volume_paths(path);
    let text = fs::read_to_string(&hpath).map_err(|e| Error::io(&hpath, e))?;
    let header: VolumeHeader = serde_json::from_str(&text).map_err(|e| Error::Header {
        path: hpath.clone(),
        msg: e.to_string(),
    })?;
    Ok(header)
}

/// Reads a volume pair, dispatching on the header's `dtype`.
pub fn read_volume(path: &Path) -> Result<AnyVolume> {
    let (hpath, rpath) = volume_paths(path);
    let header = read_header(path)?;
    let bad = |msg: &str| Error::Header {
        path: hpath.clone(),
        msg: msg.to_string(),
    };
    let payload = fs::read(&rpath).map_err(|e| Error::io(&rpath, e))?;
    let numel: usize = header.dims.iter().product::<usize>() * header.channels.unwrap_or(1);
    let elem = match header.dtype {
        DType::F32 => 4,
        DType::U8 => 1,
    };
    if payload.len() != numel * elem {
        return Err(Error::PayloadSize {
            expected: numel * elem,
            found: payload.len(),
        });
    }
    let mut dims = header.dims;
    dims[0] *= header.channels.unwrap_or(1);
    match header.dtype {
        DType::F32 => {
            let modality = header.modality.ok_or_else(|| bad("f32 volume needs `modality`"))?;
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Ok(AnyVolume::Image(Volume::new(dims, data, header.spacing_mm, modality)?))
        }
        DType::U8 => {
            let k = header
                .num_classes
                .ok_or_else(|| bad("u8 volume needs `num_classes`"))?;
            Ok(AnyVolume::Labels(LabelVolume::new(dims, payload, k, header.spacing_mm)?))
        }
    }
}

pub fn read_image(path: &Path) -> Result<Volume> {
    match read_volume(path)? {
        AnyVolume::Image(v) => Ok(v),
        AnyVolume::Labels(_) => Err(Error::Header {
            path: volume_paths(path).0,
            msg: "expected an f32 image volume, found labels".into(),
        }),
    }
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    match read_volume(path)? {
        AnyVolume::Labels(v) => Ok(v),
        AnyVolume::Image(_) => Err(Error::Header {
            path: volume_paths(path).0,
            msg: "expected a u8 label volume, found an image".into(),
        }),
    }
}

fn write_pair(path: &Path, header: &VolumeHeader, payload: &[u8]) -> Result<()> {
    let (hpath, rpath) = volume_paths(path);
    if let Some(dir) = hpath.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(header).expect("header serializes");
    fs::write(&hpath, text).map_err(|e| Error::io(&hpath, e))?;
    fs::write(&rpath, payload).map_err(|e| Error::io(&rpath, e))
}

pub fn write_image(path: &Path, v: &Volume) -> Result<()> {
    let header = VolumeHeader {
        dims: v.dims,
        spacing_mm: v.spacing,
        dtype: DType::F32,
        modality: Some(v.modality),
        num_classes: None,
        channels: None,
    };
    let payload: Vec<u8> = v.data.iter().flat_map(|x| x.to_le_bytes()).collect();
    write_pair(path, &header, &payload)
}

pub fn write_labels(path: &Path, v: &LabelVolume) -> Result<()> {
    let header = VolumeHeader {
        dims: v.dims,
        spacing_mm: v.spacing,
        dtype: DType::U8,
        modality: None,
        num_classes: Some(v.num_classes),
        channels: None,
    };
    write_pair(path, &header, &v.labels)
}

/// Writes `channels` stacked `(d,h,w)` probability maps.
pub fn write_probabilities(path: &Path, dims: [usize; 3], spacing: [f64; 3], channels: usize, probs: &[f32]) -> Result<()> {
    if probs.len() != channels * dims.iter().product::<usize>() {
        return Err(Error::shape("probability dump length"));
    }
    let header = VolumeHeader {
        dims,
        spacing_mm: spacing,
        dtype: DType::F32,
        modality: Some(Modality::Synth),
        num_classes: None,
        channels: Some(channels),
    };
    let payload: Vec<u8> = probs.iter().flat_map(|x| x.to_le_bytes()).collect();
    write_pair(path, &header, &payload)
}

fn zscore(data: &[f32]) -> Vec<f32> {
    let n = data.len() as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return vec![0.0; data.len()];
    }
    data.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect()
}

/// Clamps CT intensities to `[lo, hi]` then z-scores with the statistics
/// of the clamped volume. A zero-variance result maps to all zeros.
pub fn clip_and_normalize_ct(v: &Volume, lo: f32, hi: f32) -> Result<Volume> {
    if !(lo < hi) {
        return Err(Error::config(format!("clip range [{lo}, {hi}] is empty")));
    }
    if v.modality != Modality::Ct {
        return Err(Error::config(format!(
            "HU clipping applies to CT volumes, got {:?}",
            v.modality
        )));
    }
    let clamped: Vec<f32> = v.data.iter().map(|x| x.clamp(lo, hi)).collect();
    Ok(v.with_data(zscore(&clamped)))
}

/// Per-volume z-score; a constant volume maps to all zeros.
pub fn normalize_zscore(v: &Volume) -> Volume {
    v.with_data(zscore(&v.data))
}

/// Hounsfield window applied to CT before z-scoring.
pub const CT_CLIP_HU: (f32, f32) = (-991.0, 373.0);

/// Modality-dependent preprocessing: HU clipping + z-score for CT,
/// z-score otherwise.
pub fn preprocess(v: &Volume) -> Result<Volume> {
    match v.modality {
        Modality::Ct => clip_and_normalize_ct(v, CT_CLIP_HU.0, CT_CLIP_HU.1),
        Modality::Mr | Modality::Synth => Ok(normalize_zscore(v)),
    }
}

/// Output extent after resampling: `round(n·s/t)` with ties rounded up,
/// floored at 1.
pub fn resampled_dims(dims: [usize; 3], spacing: [f64; 3], target: [f64; 3]) -> [usize; 3] {
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = ((dims[a] as f64 * spacing[a] / target[a] + 0.5).floor() as usize).max(1);
    }
    out
}

/// Continuous input coordinate of output voxel `i` along one axis, with
/// voxel centers aligned (`i = 0` centre sits half an output voxel in).
fn source_coord(i: usize, scale: f64, n_in: usize) -> f64 {
    ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64)
}

/// Resamples onto a grid with the given spacing using trilinear
/// interpolation.
pub fn resample(v: &Volume, target: [f64; 3]) -> Result<Volume> {
    check_grid([1; 3], target)?;
    let out_dims = resampled_dims(v.dims, v.spacing, target);
    let scale: [f64; 3] = std::array::from_fn(|a| target[a] / v.spacing[a]);
    let [d, h, w] = v.dims;
    let mut data = Vec::with_capacity(out_dims.iter().product());
    let lerp_axis = |i: usize, a: usize, n: usize| {
        let c = source_coord(i, scale[a], n);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, c - lo as f64)
    };
    for oz in 0..out_dims[0] {
        let (z0, z1, fz) = lerp_axis(oz, 0, d);
        for oy in 0..out_dims[1] {
            let (y0, y1, fy) = lerp_axis(oy, 1, h);
            for ox in 0..out_dims[2] {
                let (x0, x1, fx) = lerp_axis(ox, 2, w);
                let mut acc = 0.0f64;
                for (zi, wz) in [(z0, 1.0 - fz), (z1, fz)] {
                    for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                        for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                            let weight = wz * wy * wx;
                            if weight != 0.0 {
                                acc += weight * v.get(zi, yi, xi) as f64;
                            }
                        }
                    }
                }
                data.push(acc as f32);
            }
        }
    }
    Volume::new(out_dims, data, target, v.modality)
}

/// Resamples labels with nearest-neighbour lookup, so no new label values
/// can appear.
pub fn resample_labels(v: &LabelVolume, target: [f64; 3]) -> Result<LabelVolume> {
    check_grid([1; 3], target)?;
    let out_dims = resampled_dims(v.dims, v.spacing, target);
    let idx = |a: usize, i: usize| {
        let c = source_coord(i, target[a] / v.spacing[a], v.dims[a]);
        ((c + 0.5).floor() as usize).min(v.dims[a] - 1)
    };
    let mut labels = Vec::with_capacity(out_dims.iter().product());
    for oz in 0..out_dims[0] {
        let z = idx(0, oz);
        for oy in 0..out_dims[1] {
            let y = idx(1, oy);
            for ox in 0..out_dims[2] {
                labels.push(v.get(z, y, idx(2, ox)));
            }
        }
    }
    LabelVolume::new(out_dims, labels, v.num_classes, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..dims.iter().product()).map(|_| rng.random_range(-50.0..80.0)).collect();
        Volume::new(dims, data, [1.5, 0.8, 0.8], Modality::Mr).unwrap()
    }

    #[test]
    fn smallest_file_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tiny");
        fs::write(
            dir.path().join("tiny.json"),
            r#"{"dims":[2,2,2],"spacing_mm":[1,1,1],"dtype":"f32","modality":"SYNTH"}"#,
        )
        .unwrap();
        fs::write(dir.path().join("tiny.raw"), [0u8; 32]).unwrap();
        match read_volume(&p).unwrap() {
            AnyVolume::Image(v) => assert_eq!(v.dims(), [2, 2, 2]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn short_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("v.json"),
            r#"{"dims":[2,2,2],"spacing_mm":[1,1,1],"dtype":"f32","modality":"CT"}"#,
        )
        .unwrap();
        fs::write(dir.path().join("v.raw"), [0u8; 31]).unwrap();
        let err = read_volume(&dir.path().join("v.json")).unwrap_err();
        assert!(err.to_string().contains("payload size mismatch"), "{err}");
    }

    #[test]
    fn missing_file_and_bad_labels() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_volume(&dir.path().join("nope")), Err(Error::Io { .. })));
        fs::write(
            dir.path().join("l.json"),
            r#"{"dims":[1,1,2],"spacing_mm":[1,1,1],"dtype":"u8","num_classes":3}"#,
        )
        .unwrap();
        fs::write(dir.path().join("l.raw"), [1u8, 3]).unwrap();
        assert!(matches!(
            read_volume(&dir.path().join("l")),
            Err(Error::LabelOutOfRange { value: 3, num_classes: 3 })
        ));
    }

    #[test]
    fn rejects_non_finite_payload() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("n.json"),
            r#"{"dims":[1,1,1],"spacing_mm":[1,1,1],"dtype":"f32","modality":"MR"}"#,
        )
        .unwrap();
        fs::write(dir.path().join("n.raw"), f32::NAN.to_le_bytes()).unwrap();
        assert!(read_volume(&dir.path().join("n")).is_err());
    }

    #[test]
    fn payload_is_little_endian_z_major() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::new([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0], [1.0; 3], Modality::Ct).unwrap();
        write_image(&dir.path().join("o"), &v).unwrap();
        let raw = fs::read(dir.path().join("o.raw")).unwrap();
        assert_eq!(&raw[..4], &1.0f32.to_le_bytes());
        assert_eq!(&raw[12..], &4.0f32.to_le_bytes());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn image_round_trip_is_bitwise(seed in any::<u64>(), d in 1usize..5, h in 1usize..5, w in 1usize..5) {
            let dir = tempfile::tempdir().unwrap();
            let v = random_volume([d, h, w], seed);
            write_image(&dir.path().join("v"), &v).unwrap();
            prop_assert_eq!(read_image(&dir.path().join("v.json")).unwrap(), v);
        }

        #[test]
        fn label_round_trip_is_bitwise(seed in any::<u64>(), k in 1usize..6) {
            let dir = tempfile::tempdir().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels = (0..27).map(|_| rng.random_range(0..k as u8)).collect();
            let v = LabelVolume::new([3, 3, 3], labels, k, [2.0, 1.0, 1.0]).unwrap();
            write_labels(&dir.path().join("l"), &v).unwrap();
            prop_assert_eq!(read_labels(&dir.path().join("l")).unwrap(), v);
        }

        #[test]
        fn label_resampling_never_invents_values(seed in any::<u64>(), t in 0.3f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<u8> = (0..64).map(|_| [0u8, 2, 5][rng.random_range(0..3)]).collect();
            let v = LabelVolume::new([4, 4, 4], labels, 6, [1.0; 3]).unwrap();
            let r = resample_labels(&v, [t, 1.0, t * 0.7]).unwrap();
            prop_assert!(r.labels().iter().all(|l| [0u8, 2, 5].contains(l)));
        }

        #[test]
        fn ct_ignores_perturbations_beyond_the_window(seed in any::<u64>(), extra in 1.0f32..5000.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..27).map(|_| rng.random_range(-1500.0..800.0)).collect();
            let v = Volume::new([3, 3, 3], data.clone(), [1.0; 3], Modality::Ct).unwrap();
            let pushed: Vec<f32> = data
                .iter()
                .map(|&x| if x < -991.0 { x - extra } else if x > 373.0 { x + extra } else { x })
                .collect();
            let w = Volume::new([3, 3, 3], pushed, [1.0; 3], Modality::Ct).unwrap();
            prop_assert_eq!(
                clip_and_normalize_ct(&v, -991.0, 373.0).unwrap(),
                clip_and_normalize_ct(&w, -991.0, 373.0).unwrap()
            );
        }
    }

    #[test]
    fn ct_clamps_before_normalizing() {
        let v = Volume::new([1, 1, 3], vec![-2000.0, -991.0, 373.0], [1.0; 3], Modality::Ct).unwrap();
        let out = clip_and_normalize_ct(&v, -991.0, 373.0).unwrap();
        // -2000 clamps to -991, so the first two outputs coincide
        assert_eq!(out.data()[0], out.data()[1]);
    }

    #[test]
    fn ct_two_voxel_window_edges_map_to_unit() {
        let v = Volume::new([1, 1, 2], vec![-991.0, 373.0], [1.0; 3], Modality::Ct).unwrap();
        let out = clip_and_normalize_ct(&v, -991.0, 373.0).unwrap();
        assert_eq!(out.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn constant_volumes_normalize_to_zero() {
        let v = Volume::new([2, 2, 2], vec![100.0; 8], [1.0; 3], Modality::Ct).unwrap();
        assert!(clip_and_normalize_ct(&v, -991.0, 373.0).unwrap().data().iter().all(|&x| x == 0.0));
        assert!(normalize_zscore(&v).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ct_window_rejects_bad_range_and_modality() {
        let v = Volume::new([1, 1, 1], vec![0.0], [1.0; 3], Modality::Ct).unwrap();
        assert!(clip_and_normalize_ct(&v, 5.0, 5.0).is_err());
        let m = Volume::new([1, 1, 1], vec![0.0], [1.0; 3], Modality::Mr).unwrap();
        assert!(clip_and_normalize_ct(&m, -991.0, 373.0).is_err());
    }

    #[test]
    fn zscore_two_point_and_random_statistics() {
        let v = Volume::new([1, 1, 2], vec![0.0, 2.0], [1.0; 3], Modality::Mr).unwrap();
        assert_eq!(normalize_zscore(&v).data(), &[-1.0, 1.0]);

        let r = normalize_zscore(&random_volume([6, 5, 7], 3));
        let n = r.data().len() as f64;
        let mean = r.data().iter().map(|&x| x as f64).sum::<f64>() / n;
        let std = (r.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-5);
        assert!((std - 1.0).abs() < 1e-4);
    }

    #[test]
    fn identity_resample_is_exact() {
        let v = random_volume([4, 3, 5], 4);
        let r = resample(&v, v.spacing()).unwrap();
        assert_eq!(r.dims(), v.dims());
        assert!(r.data().iter().zip(v.data()).all(|(a, b)| (a - b).abs() <= 1e-6));
        let l = LabelVolume::new([2, 2, 1], vec![0, 1, 2, 1], 3, [2.0, 1.0, 1.0]).unwrap();
        assert_eq!(resample_labels(&l, l.spacing()).unwrap(), l);
    }

    #[test]
    fn constant_resamples_to_constant() {
        let v = Volume::new([3, 4, 5], vec![7.25; 60], [1.0, 1.0, 1.0], Modality::Synth).unwrap();
        for t in [[0.4, 0.7, 2.3], [3.0, 3.0, 3.0], [1.0, 0.5, 1.0]] {
            let r = resample(&v, t).unwrap();
            assert!(r.data().iter().all(|&x| (x - 7.25).abs() <= 1e-6));
            assert_eq!(r.spacing(), t);
        }
    }

    #[test]
    fn output_dims_round_half_up_with_floor_of_one() {
        assert_eq!(resampled_dims([5, 3, 1], [1.0; 3], [2.0, 2.0, 4.0]), [3, 2, 1]);
        assert_eq!(resampled_dims([64, 160, 160], [2.0, 0.7, 0.7], [3.3, 1.7, 1.7]), [39, 66, 66]);
    }

    /// Separable oracle: interpolate along x, then y, then z.
    fn separable_trilinear(v: &Volume, target: [f64; 3]) -> Vec<f64> {
        let out = resampled_dims(v.dims(), v.spacing(), target);
        let coord = |i: usize, a: usize| {
            let n = v.dims()[a] as f64;
            let c = (i as f64 + 0.5) * target[a] / v.spacing()[a] - 0.5;
            c.max(0.0).min(n - 1.0)
        };
        let interp1 = |line: &[f64], c: f64| {
            let i0 = c.floor() as usize;
            let i1 = (i0 + 1).min(line.len() - 1);
            line[i0] + (line[i1] - line[i0]) * (c - i0 as f64)
        };
        let [d, h, _] = v.dims();
        // x pass
        let mut stage: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; out[2]]; h]; d];
        for z in 0..d {
            for y in 0..h {
                let line: Vec<f64> = (0..v.dims()[2]).map(|x| v.get(z, y, x) as f64).collect();
                for ox in 0..out[2] {
                    stage[z][y][ox] = interp1(&line, coord(ox, 2));
                }
            }
        }
        let mut res = Vec::new();
        for oz in 0..out[0] {
            for oy in 0..out[1] {
                for ox in 0..out[2] {
                    let col_y: Vec<f64> = (0..d)
                        .map(|z| {
                            let line: Vec<f64> = (0..h).map(|y| stage[z][y][ox]).collect();
                            interp1(&line, coord(oy, 1))
                        })
                        .collect();
                    res.push(interp1(&col_y, coord(oz, 0)));
                }
            }
        }
        res
    }

    #[test]
    fn ramp_downsample_matches_separable_oracle() {
        let v = Volume::new([1, 1, 4], vec![0.0, 1.0, 2.0, 3.0], [1.0; 3], Modality::Synth).unwrap();
        let r = resample(&v, [1.0, 1.0, 2.0]).unwrap();
        let oracle = separable_trilinear(&v, [1.0, 1.0, 2.0]);
        assert_eq!(r.dims(), [1, 1, 2]);
        for (a, b) in r.data().iter().zip(&oracle) {
            assert!((*a as f64 - b).abs() <= 1e-6);
        }
        let v = random_volume([5, 4, 6], 9);
        let t = [2.2, 0.5, 1.3];
        let r = resample(&v, t).unwrap();
        for (a, b) in r.data().iter().zip(&separable_trilinear(&v, t)) {
            assert!((*a as f64 - b).abs() <= 1e-4);
        }
    }
}
