//! Paired train-time augmentation: one geometric transform applied to RGB,
//! HSI and mask on their own grids, HSI background re-zeroing via a
//! transformed binary mask, RGB photometric jitter, and HSI spectral jitter
//! on non-zero elements.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{BcafError, Result};

use super::SamplePair;

/// Augmentation policy: rotation range (degrees), scale range, crop size on
/// the coarse grid, flip probabilities, jitter magnitudes.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct AugmentConfig {
    pub rotate_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Crop size on the coarse grid; the fine crop is r times larger. `None`
    /// keeps the full canvas.
    pub crop_c: Option<(usize, usize)>,
    pub flip_p: f64,
    pub photometric_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub hsi_add: f64,
    pub hsi_mul: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotate_deg: 5.0,
            scale_min: 0.8,
            scale_max: 1.3,
            crop_c: None,
            flip_p: 0.5,
            photometric_p: 0.8,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.03,
            hsi_add: 0.10,
            hsi_mul: 0.10,
        }
    }
}

/// The sampled geometric transform, shared across grids.
#[derive(Clone, Copy, Debug)]
struct GeoTransform {
    angle: f64,
    scale: f64,
    flip_h: bool,
    flip_v: bool,
    /// Crop origin on the coarse grid.
    crop_y: usize,
    crop_x: usize,
}

/// Inverse-map an output pixel center to input coordinates on a grid of the
/// given size (same convention for fine and coarse grids; the crop origin is
/// scaled per grid).
fn inverse_map(
    t: &GeoTransform,
    out_y: f64,
    out_x: f64,
    in_h: f64,
    in_w: f64,
    crop_y: f64,
    crop_x: f64,
) -> (f64, f64) {
    // Crop offset first (output lives inside the rotated/scaled canvas).
    let mut y = out_y + crop_y;
    let mut x = out_x + crop_x;
    // Flips on the canvas.
    if t.flip_h {
        x = in_w - 1.0 - x;
    }
    if t.flip_v {
        y = in_h - 1.0 - y;
    }
    // Rotation and scale about the canvas center.
    let cy = (in_h - 1.0) / 2.0;
    let cx = (in_w - 1.0) / 2.0;
    let (dy, dx) = (y - cy, x - cx);
    let (sin, cos) = (-t.angle).to_radians().sin_cos();
    let sy = (cos * dy - sin * dx) / t.scale + cy;
    let sx = (sin * dy + cos * dx) / t.scale + cx;
    (sy, sx)
}

fn bilinear_at(src: &Array3<f32>, y: f64, x: f64, band: usize) -> f32 {
    let (h, w, _) = src.dim();
    if y < -0.5 || x < -0.5 || y > h as f64 - 0.5 || x > w as f64 - 0.5 {
        return 0.0;
    }
    let yc = y.clamp(0.0, h as f64 - 1.0);
    let xc = x.clamp(0.0, w as f64 - 1.0);
    let y0 = yc.floor() as usize;
    let x0 = xc.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let wy = yc - y0 as f64;
    let wx = xc - x0 as f64;
    let v = src[[y0, x0, band]] as f64 * (1.0 - wy) * (1.0 - wx)
        + src[[y0, x1, band]] as f64 * (1.0 - wy) * wx
        + src[[y1, x0, band]] as f64 * wy * (1.0 - wx)
        + src[[y1, x1, band]] as f64 * wy * wx;
    v as f32
}

fn nearest_u16(src: &Array2<u16>, y: f64, x: f64) -> u16 {
    let (h, w) = src.dim();
    let yi = y.round();
    let xi = x.round();
    if yi < 0.0 || xi < 0.0 || yi >= h as f64 || xi >= w as f64 {
        return 0;
    }
    src[[yi as usize, xi as usize]]
}

fn nearest_u8(src: &Array2<u8>, y: f64, x: f64) -> u8 {
    let (h, w) = src.dim();
    let yi = y.round();
    let xi = x.round();
    if yi < 0.0 || xi < 0.0 || yi >= h as f64 || xi >= w as f64 {
        return 0;
    }
    src[[yi as usize, xi as usize]]
}

/// Multiply the transformed binary foreground mask into the transformed HSI,
/// re-zeroing background that interpolation may have contaminated. Uses no
/// label information.
pub fn background_remask(hsi: &mut Array3<f32>, fg: &Array2<u8>) {
    let (h, w, s) = hsi.dim();
    debug_assert_eq!((h, w), fg.dim());
    for i in 0..h {
        for j in 0..w {
            if fg[[i, j]] == 0 {
                for b in 0..s {
                    hsi[[i, j, b]] = 0.0;
                }
            }
        }
    }
}

fn rgb_to_hsv(r: f64, gr: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(gr).max(b);
    let min = r.min(gr).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((gr - b) / d).rem_euclid(6.0) / 6.0
    } else if max == gr {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - gr) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

fn photometric_jitter(rgb: &mut Array3<f32>, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) {
    let (h, w, _) = rgb.dim();
    let brightness = 1.0 + cfg.brightness * (rng.random::<f64>() * 2.0 - 1.0);
    let contrast = 1.0 + cfg.contrast * (rng.random::<f64>() * 2.0 - 1.0);
    let saturation = 1.0 + cfg.saturation * (rng.random::<f64>() * 2.0 - 1.0);
    let hue = cfg.hue * (rng.random::<f64>() * 2.0 - 1.0);
    // Brightness.
    for v in rgb.iter_mut() {
        *v = ((*v as f64) * brightness).clamp(0.0, 1.0) as f32;
    }
    // Contrast about the mean luminance.
    let mut mean = 0.0f64;
    for i in 0..h {
        for j in 0..w {
            mean += 0.299 * rgb[[i, j, 0]] as f64
                + 0.587 * rgb[[i, j, 1]] as f64
                + 0.114 * rgb[[i, j, 2]] as f64;
        }
    }
    mean /= (h * w) as f64;
    for v in rgb.iter_mut() {
        *v = (((*v as f64) - mean) * contrast + mean).clamp(0.0, 1.0) as f32;
    }
    // Saturation and hue in HSV.
    for i in 0..h {
        for j in 0..w {
            let (hh, ss, vv) = rgb_to_hsv(
                rgb[[i, j, 0]] as f64,
                rgb[[i, j, 1]] as f64,
                rgb[[i, j, 2]] as f64,
            );
            let (r, g, b) = hsv_to_rgb(hh + hue, (ss * saturation).clamp(0.0, 1.0), vv);
            rgb[[i, j, 0]] = r.clamp(0.0, 1.0) as f32;
            rgb[[i, j, 1]] = g.clamp(0.0, 1.0) as f32;
            rgb[[i, j, 2]] = b.clamp(0.0, 1.0) as f32;
        }
    }
}

/// Apply one augmentation draw to a sample: identical geometric transform on
/// all three arrays (bilinear for RGB/HSI, nearest for masks), HSI background
/// re-zeroing from the transformed non-zero mask, RGB photometric jitter with
/// probability `photometric_p`, and per-sample HSI spectral jitter on
/// non-zero elements.
pub fn paired_augment(s: &SamplePair, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<SamplePair> {
    let (hc, wc, bands) = s.hsi.dim();
    let (hf, wf, _) = s.rgb.dim();
    let r = s.r;
    let (crop_hc, crop_wc) = cfg.crop_c.unwrap_or((hc, wc));
    if crop_hc > hc || crop_wc > wc {
        return Err(BcafError::Data(format!(
            "crop {crop_hc}x{crop_wc} larger than coarse grid {hc}x{wc}"
        )));
    }
    let t = GeoTransform {
        angle: cfg.rotate_deg * (rng.random::<f64>() * 2.0 - 1.0),
        scale: cfg.scale_min + rng.random::<f64>() * (cfg.scale_max - cfg.scale_min),
        flip_h: rng.random::<f64>() < cfg.flip_p,
        flip_v: rng.random::<f64>() < cfg.flip_p,
        crop_y: if hc > crop_hc { rng.random_range(0..=hc - crop_hc) } else { 0 },
        crop_x: if wc > crop_wc { rng.random_range(0..=wc - crop_wc) } else { 0 },
    };

    // Binary foreground mask from the untouched HSI, before any transform.
    let fg0 = s.hsi_foreground_mask();

    // Fine grid: RGB bilinear, labels nearest.
    let (out_hf, out_wf) = (crop_hc * r, crop_wc * r);
    let mut rgb = Array3::<f32>::zeros((out_hf, out_wf, 3));
    let mut mask = Array2::<u16>::zeros((out_hf, out_wf));
    let (fy0, fx0) = ((t.crop_y * r) as f64, (t.crop_x * r) as f64);
    for y in 0..out_hf {
        for x in 0..out_wf {
            let (sy, sx) = inverse_map(&t, y as f64, x as f64, hf as f64, wf as f64, fy0, fx0);
            for c in 0..3 {
                rgb[[y, x, c]] = bilinear_at(&s.rgb, sy, sx, c);
            }
            mask[[y, x]] = nearest_u16(&s.mask, sy, sx);
        }
    }

    // Coarse grid: HSI bilinear, foreground mask nearest, then re-zero.
    let mut hsi = Array3::<f32>::zeros((crop_hc, crop_wc, bands));
    let mut fg = Array2::<u8>::zeros((crop_hc, crop_wc));
    let (cy0, cx0) = (t.crop_y as f64, t.crop_x as f64);
    for y in 0..crop_hc {
        for x in 0..crop_wc {
            let (sy, sx) = inverse_map(&t, y as f64, x as f64, hc as f64, wc as f64, cy0, cx0);
            fg[[y, x]] = nearest_u8(&fg0, sy, sx);
            for b in 0..bands {
                hsi[[y, x, b]] = bilinear_at(&s.hsi, sy, sx, b);
            }
        }
    }
    background_remask(&mut hsi, &fg);

    // RGB photometric jitter.
    if rng.random::<f64>() < cfg.photometric_p {
        photometric_jitter(&mut rgb, cfg, rng);
    }

    // HSI spectral jitter: one multiplicative and one additive draw per
    // sample, applied only to non-zero elements (background stays zero).
    if cfg.hsi_add > 0.0 || cfg.hsi_mul > 0.0 {
        let mul = 1.0 + cfg.hsi_mul * (rng.random::<f64>() * 2.0 - 1.0);
        let add = cfg.hsi_add * (rng.random::<f64>() * 2.0 - 1.0);
        for v in hsi.iter_mut() {
            if *v != 0.0 {
                *v = ((*v as f64) * mul + add).max(1e-4) as f32;
            }
        }
    }

    Ok(SamplePair { rgb, hsi, mask, r })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClassChannel, SynthSpec};
    use rand::SeedableRng;

    fn identity_cfg() -> AugmentConfig {
        AugmentConfig {
            rotate_deg: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            crop_c: None,
            flip_p: 0.0,
            photometric_p: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            hsi_add: 0.0,
            hsi_mul: 0.0,
        }
    }

    fn sample() -> SamplePair {
        let spec = SynthSpec {
            num_classes: 3,
            mode: ClassChannel::Both,
            height_c: 16,
            width_c: 16,
            ratio: 2,
            bands: 6,
            objects_min: 2,
            objects_max: 3,
            radius_min: 2.0,
            radius_max: 5.0,
            noise_scale: 0.05,
            gain_min: 0.8,
            gain_max: 1.2,
            offset_max: 0.2,
            texture_noise: 0.05,
            seed: 3,
            n_train: 1,
            n_val: 0,
            n_test: 0,
        };
        crate::data::synth::synthesize_dataset(&spec).unwrap().train.remove(0)
    }

    #[test]
    fn identity_settings_are_the_identity() {
        let s = sample();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let out = paired_augment(&s, &identity_cfg(), &mut rng).unwrap();
        assert_eq!(out.rgb, s.rgb);
        assert_eq!(out.hsi, s.hsi);
        assert_eq!(out.mask, s.mask);
    }

    #[test]
    fn double_horizontal_flip_restores_geometry() {
        let s = sample();
        let mut cfg = identity_cfg();
        cfg.flip_p = 1.0;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let once = paired_augment(&s, &cfg, &mut rng).unwrap();
        let twice = paired_augment(&once, &cfg, &mut rng).unwrap();
        assert_eq!(twice.mask, s.mask);
        assert_eq!(twice.rgb, s.rgb);
        assert_eq!(twice.hsi, s.hsi);
        assert_ne!(once.mask, s.mask, "one flip must change the scene");
    }

    #[test]
    fn background_stays_exactly_zero_after_full_pipeline() {
        let s = sample();
        let cfg = AugmentConfig::default();
        for seed in 0..25u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let out = paired_augment(&s, &cfg, &mut rng).unwrap();
            let fg = out.hsi_foreground_mask();
            let (hc, wc, bands) = out.hsi.dim();
            for i in 0..hc {
                for j in 0..wc {
                    if fg[[i, j]] == 0 {
                        for b in 0..bands {
                            assert_eq!(out.hsi[[i, j, b]], 0.0, "non-zero background at ({i},{j},{b})");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn crop_preserves_grid_ratio_and_rejects_oversize() {
        let s = sample();
        let mut cfg = identity_cfg();
        cfg.crop_c = Some((8, 10));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let out = paired_augment(&s, &cfg, &mut rng).unwrap();
        assert_eq!(out.hsi.dim(), (8, 10, 6));
        assert_eq!(out.rgb.dim(), (16, 20, 3));
        assert_eq!(out.mask.dim(), (16, 20));
        out.validate(3).unwrap();

        cfg.crop_c = Some((32, 8));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        assert!(paired_augment(&s, &cfg, &mut rng).is_err());
    }

    #[test]
    fn rotated_sample_keeps_masked_background_zero_exhaustively() {
        let s = sample();
        let mut cfg = identity_cfg();
        cfg.rotate_deg = 5.0;
        cfg.scale_min = 0.8;
        cfg.scale_max = 1.3;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let out = paired_augment(&s, &cfg, &mut rng).unwrap();
        let fg = out.hsi_foreground_mask();
        let (hc, wc, bands) = out.hsi.dim();
        let mut fg_pixels = 0;
        for i in 0..hc {
            for j in 0..wc {
                if fg[[i, j]] == 0 {
                    for b in 0..bands {
                        assert_eq!(out.hsi[[i, j, b]], 0.0);
                    }
                } else {
                    fg_pixels += 1;
                }
            }
        }
        assert!(fg_pixels > 0, "rotation should keep some foreground");
    }

    #[test]
    fn photometric_jitter_keeps_range() {
        let s = sample();
        let mut cfg = AugmentConfig::default();
        cfg.photometric_p = 1.0;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let out = paired_augment(&s, &cfg, &mut rng).unwrap();
        assert!(out.rgb.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
