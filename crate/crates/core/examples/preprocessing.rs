//! CT clipping and z-scoring, then resampling an image and its labels to a
//! coarser grid.

use banet::volume::{clip_and_normalize_ct, resample, resample_labels, LabelVolume, Modality, Volume, CT_CLIP_HU};

fn main() -> banet::Result<()> {
    let dims = [12, 24, 24];
    let spacing = [3.3, 1.7, 1.7];
    let mut hu = Vec::new();
    let mut lab = Vec::new();
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let r2 = (z as f64 - 6.0).powi(2) * 4.0 + (y as f64 - 12.0).powi(2) + (x as f64 - 12.0).powi(2);
                let inside = r2 < 64.0;
                hu.push(if inside { 60.0 } else if x < 3 { -2000.0 } else { -100.0 });
                lab.push(inside as u8);
            }
        }
    }
    let ct = Volume::new(dims, hu, spacing, Modality::Ct)?;
    let labels = LabelVolume::new(dims, lab, 2, spacing)?;

    let norm = clip_and_normalize_ct(&ct, CT_CLIP_HU.0, CT_CLIP_HU.1)?;
    let n = norm.data().len() as f64;
    let mean = norm.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let sd = (norm.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    println!("normalised: mean {mean:+.2e}, std {sd:.5}");

    let target = [2.0, 1.2, 1.2];
    let img = resample(&norm, target)?;
    let seg = resample_labels(&labels, target)?;
    println!("{:?} @ {:?} mm -> {:?} @ {:?} mm", dims, spacing, img.dims(), img.spacing());
    println!("organ voxels {} -> {}", labels.count(1), seg.count(1));
    Ok(())
}
