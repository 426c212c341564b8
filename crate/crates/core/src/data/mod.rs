//! Synthetic co-registered RGB-HSI data: scene generation, paired
//! augmentation, background masking, normalization, misalignment shifting,
//! and the on-disk sample format.

pub mod augment;
pub mod io;
pub mod synth;

use ndarray::{Array2, Array3};

use crate::error::{BcafError, Result};

/// One co-registered scene: fine-grid RGB in [0,1], coarse-grid HSI with
/// exact-zero background, fine-grid integer label mask, and the grid ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub rgb: Array3<f32>,
    pub hsi: Array3<f32>,
    pub mask: Array2<u16>,
    pub r: usize,
}

impl SamplePair {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let (hf, wf, c) = self.rgb.dim();
        let (hc, wc, _s) = self.hsi.dim();
        if c != 3 {
            return Err(BcafError::Shape(format!("rgb must have 3 channels, got {c}")));
        }
        if hf != self.r * hc || wf != self.r * wc {
            return Err(BcafError::Shape(format!(
                "grids not related by r={}: rgb {hf}x{wf}, hsi {hc}x{wc}",
                self.r
            )));
        }
        if self.mask.dim() != (hf, wf) {
            return Err(BcafError::Shape("mask must live on the fine grid".into()));
        }
        if let Some(&m) = self.mask.iter().max() {
            if m as usize > num_classes {
                return Err(BcafError::Data(format!(
                    "mask index {m} exceeds class count {num_classes}"
                )));
            }
        }
        Ok(())
    }

    /// Binary foreground mask derived from the HSI itself (non-zero spectrum),
    /// on the coarse grid. Carries no label information.
    pub fn hsi_foreground_mask(&self) -> Array2<u8> {
        let (hc, wc, s) = self.hsi.dim();
        Array2::from_shape_fn((hc, wc), |(i, j)| {
            let nonzero = (0..s).any(|b| self.hsi[[i, j, b]] != 0.0);
            u8::from(nonzero)
        })
    }
}

/// What distinguishes the classes in a synthetic dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassChannel {
    /// Classes share RGB appearance; only spectra separate them.
    SpectralOnly,
    /// Classes share spectra; only RGB appearance separates them.
    SpatialOnly,
    /// Half the classes are spectrally defined, half spatially.
    Both,
}

/// Synthetic dataset specification. All randomness derives from `seed`.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub mode: ClassChannel,
    pub height_c: usize,
    pub width_c: usize,
    pub ratio: usize,
    pub bands: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Object radii in coarse-grid pixels.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Per-band spectral noise sigma.
    pub noise_scale: f64,
    /// Per-pixel multiplicative illumination gain range.
    pub gain_min: f64,
    pub gain_max: f64,
    /// Per-pixel additive baseline offset upper bound.
    pub offset_max: f64,
    /// RGB texture noise sigma.
    pub texture_noise: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 1 {
            return Err(BcafError::Config("need at least one class".into()));
        }
        if self.ratio == 0 || self.bands == 0 || self.height_c == 0 || self.width_c == 0 {
            return Err(BcafError::Config("grid dimensions and bands must be positive".into()));
        }
        if self.objects_max < self.objects_min {
            return Err(BcafError::Config("objects_max < objects_min".into()));
        }
        if self.gain_max < self.gain_min {
            return Err(BcafError::Config("gain_max < gain_min".into()));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        let mut names = vec!["background".to_string()];
        for c in 1..=self.num_classes {
            names.push(format!("class_{c}"));
        }
        names
    }
}

/// The three split collections.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub train: Vec<SamplePair>,
    pub val: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
}

/// Normalization statistics: fixed RGB channel statistics and masked per-band
/// HSI statistics computed over the training split.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub rgb_mean: [f64; 3],
    pub rgb_std: [f64; 3],
    pub hsi_mean: Vec<f64>,
    pub hsi_std: Vec<f64>,
}

impl NormStats {
    pub fn imagenet_rgb() -> ([f64; 3], [f64; 3]) {
        ([0.485, 0.456, 0.406], [0.229, 0.224, 0.225])
    }
}

/// Masked per-band standardization statistics over the training split,
/// excluding exact-zero (background) pixels.
pub fn compute_norm_stats(train: &[SamplePair]) -> Result<NormStats> {
    let bands = train
        .first()
        .map(|s| s.hsi.dim().2)
        .ok_or_else(|| BcafError::Data("empty training split".into()))?;
    let mut sum = vec![0.0f64; bands];
    let mut sumsq = vec![0.0f64; bands];
    let mut count = vec![0u64; bands];
    for s in train {
        let (hc, wc, _) = s.hsi.dim();
        for i in 0..hc {
            for j in 0..wc {
                let nonzero = (0..bands).any(|b| s.hsi[[i, j, b]] != 0.0);
                if !nonzero {
                    continue;
                }
                for b in 0..bands {
                    let v = s.hsi[[i, j, b]] as f64;
                    sum[b] += v;
                    sumsq[b] += v * v;
                    count[b] += 1;
                }
            }
        }
    }
    let mut mean = vec![0.0f64; bands];
    let mut std = vec![0.0f64; bands];
    for b in 0..bands {
        if count[b] == 0 {
            return Err(BcafError::Data(format!(
                "band {b}: no foreground pixels in the training split"
            )));
        }
        mean[b] = sum[b] / count[b] as f64;
        let var = (sumsq[b] / count[b] as f64 - mean[b] * mean[b]).max(0.0);
        std[b] = var.sqrt();
        if std[b] == 0.0 {
            return Err(BcafError::Data(format!("band {b} has zero variance")));
        }
    }
    let (rgb_mean, rgb_std) = NormStats::imagenet_rgb();
    Ok(NormStats {
        rgb_mean,
        rgb_std,
        hsi_mean: mean,
        hsi_std: std,
    })
}

/// Standardize a sample: RGB per channel, HSI per band. The affine transform
/// is applied to every HSI pixel, so background zeros map to -mean/std.
pub fn normalize(s: &SamplePair, stats: &NormStats) -> Result<SamplePair> {
    let (hf, wf, _) = s.rgb.dim();
    let (hc, wc, bands) = s.hsi.dim();
    if stats.hsi_mean.len() != bands {
        return Err(BcafError::Shape(format!(
            "stats cover {} bands, cube has {bands}",
            stats.hsi_mean.len()
        )));
    }
    if let Some(b) = stats.hsi_std.iter().position(|&v| v <= 0.0) {
        return Err(BcafError::Data(format!("band {b} has non-positive std")));
    }
    let mut rgb = s.rgb.clone();
    for i in 0..hf {
        for j in 0..wf {
            for c in 0..3 {
                rgb[[i, j, c]] =
                    ((rgb[[i, j, c]] as f64 - stats.rgb_mean[c]) / stats.rgb_std[c]) as f32;
            }
        }
    }
    let mut hsi = s.hsi.clone();
    for i in 0..hc {
        for j in 0..wc {
            for b in 0..bands {
                hsi[[i, j, b]] =
                    ((hsi[[i, j, b]] as f64 - stats.hsi_mean[b]) / stats.hsi_std[b]) as f32;
            }
        }
    }
    Ok(SamplePair {
        rgb,
        hsi,
        mask: s.mask.clone(),
        r: s.r,
    })
}

/// Translate the HSI cube on its own grid by (dx, dy), zero-filling vacated
/// pixels; RGB and mask are untouched.
pub fn shift_hsi(s: &SamplePair, dx: isize, dy: isize) -> Result<SamplePair> {
    let (hc, wc, bands) = s.hsi.dim();
    if dx.unsigned_abs() >= wc || dy.unsigned_abs() >= hc {
        return Err(BcafError::Data(format!(
            "shift ({dx},{dy}) out of range for {hc}x{wc} HSI grid"
        )));
    }
    let mut hsi = Array3::zeros((hc, wc, bands));
    for y in 0..hc as isize {
        let sy = y - dy;
        if sy < 0 || sy >= hc as isize {
            continue;
        }
        for x in 0..wc as isize {
            let sx = x - dx;
            if sx < 0 || sx >= wc as isize {
                continue;
            }
            for b in 0..bands {
                hsi[[y as usize, x as usize, b]] = s.hsi[[sy as usize, sx as usize, b]];
            }
        }
    }
    Ok(SamplePair {
        rgb: s.rgb.clone(),
        hsi,
        mask: s.mask.clone(),
        r: s.r,
    })
}
