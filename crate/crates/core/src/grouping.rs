//! Spectral grouping: how raw hyperspectral bands become K padded groups and
//! how each group is embedded into tokens.

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{BcafError, Result};
use crate::nn::{Init, Scope};

/// Band-grouping arithmetic for an S-band cube split into K slices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SpectralGrouping {
    #[serde(rename = "S")]
    pub s: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "S_pad")]
    pub s_pad: usize,
    #[serde(rename = "R_G")]
    pub r_g: usize,
}

/// Zero-pad the band count to the nearest multiple of K and derive the group
/// size R_G = S_pad / K.
pub fn compute_grouping(s: usize, k: usize) -> Result<SpectralGrouping> {
    if s < 1 || k < 1 {
        return Err(BcafError::Grouping(format!("S and K must be >= 1, got S={s} K={k}")));
    }
    if k > s {
        return Err(BcafError::Grouping(format!(
            "more slices than bands: K={k} > S={s}"
        )));
    }
    let s_pad = s.div_ceil(k) * k;
    let g = SpectralGrouping {
        s,
        k,
        s_pad,
        r_g: s_pad / k,
    };
    debug_assert!(g.k * g.r_g == g.s_pad && g.s_pad - g.s < g.k);
    Ok(g)
}

/// Append zero bands at the high-wavelength end so the band count equals
/// S_pad.
pub fn pad_bands(g: &mut Graph, cube: Var, grouping: SpectralGrouping) -> Result<Var> {
    let shape = g.shape(cube).to_vec();
    if shape.len() != 3 || shape[2] != grouping.s {
        return Err(BcafError::Shape(format!(
            "pad_bands expects HxWx{} cube, got {shape:?}",
            grouping.s
        )));
    }
    if grouping.s_pad == grouping.s {
        return Ok(cube);
    }
    Ok(g.pad_zero(cube, &[(0, 0), (0, 0), (0, grouping.s_pad - grouping.s)]))
}

/// Weight-sharing regime of the grouped patch embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingMode {
    /// One 4x4xR_G -> C kernel applied to every group.
    Shared,
    /// K independent kernels of identical shape.
    Unshared,
    /// One 4x4xS_pad kernel emitting K*C outputs per patch, reshaped into K
    /// slices in group order.
    SingleProjection,
}

/// Grouped patch embedding: each 4x4xR_G cube becomes one token of width C,
/// yielding an (H/4) x (W/4) x K x C lattice.
pub struct GroupedEmbed {
    pub mode: SharingMode,
    pub kernels: Vec<ParamId>,
    pub bias: ParamId,
    pub grouping: SpectralGrouping,
    pub dim: usize,
}

impl GroupedEmbed {
    pub fn new(
        scope: &mut Scope,
        name: &str,
        grouping: SpectralGrouping,
        dim: usize,
        mode: SharingMode,
    ) -> Self {
        let mut s = scope.sub(name);
        let patch = 16 * grouping.r_g;
        let kernels = match mode {
            SharingMode::Shared => vec![s.param("kernel", &[patch, dim], Init::TruncNormal(0.02), true)],
            SharingMode::Unshared => (0..grouping.k)
                .map(|k| s.param(&format!("kernel{k}"), &[patch, dim], Init::TruncNormal(0.02), true))
                .collect(),
            SharingMode::SingleProjection => vec![s.param(
                "kernel",
                &[16 * grouping.s_pad, grouping.k * dim],
                Init::TruncNormal(0.02),
                true,
            )],
        };
        let bias = s.param("bias", &[dim], Init::Zeros, false);
        GroupedEmbed {
            mode,
            kernels,
            bias,
            grouping,
            dim,
        }
    }

    /// Embed a padded cube [H, W, S_pad] into [H/4, W/4, K, C].
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, cube: Var) -> Result<Var> {
        let shape = g.shape(cube).to_vec();
        let (h, w) = (shape[0], shape[1]);
        if shape[2] != self.grouping.s_pad {
            return Err(BcafError::Shape(format!(
                "expected {} padded bands, got {}",
                self.grouping.s_pad, shape[2]
            )));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(BcafError::Shape(format!(
                "spatial dims {h}x{w} not divisible by the 4x4 patch; crop or pad the cube first"
            )));
        }
        let (oh, ow) = (h / 4, w / 4);
        let p = oh * ow;
        let k = self.grouping.k;
        let r_g = self.grouping.r_g;
        let tokens = match self.mode {
            SharingMode::Shared | SharingMode::Unshared => {
                let mut slices = Vec::with_capacity(k);
                for gi in 0..k {
                    let band0 = gi * r_g;
                    let sub = g.slice_ranges(cube, &[(0, h), (0, w), (band0, band0 + r_g)]);
                    let cols = g.unfold(sub, 4, 4, 0); // [P, 16*R_G]
                    let kid = match self.mode {
                        SharingMode::Shared => self.kernels[0],
                        _ => self.kernels[gi],
                    };
                    let kv = g.param(store, kid);
                    let tok = g.matmul(cols, kv); // [P, C]
                    slices.push(g.reshape(tok, &[p, 1, self.dim]));
                }
                g.concat(1, &slices) // [P, K, C]
            }
            SharingMode::SingleProjection => {
                let cols = g.unfold(cube, 4, 4, 0); // [P, 16*S_pad]
                let kv = g.param(store, self.kernels[0]);
                let tok = g.matmul(cols, kv); // [P, K*C]
                g.reshape(tok, &[p, k, self.dim])
            }
        };
        let bias = g.param(store, self.bias);
        let tokens = g.add(tokens, bias);
        Ok(g.reshape(tokens, &[oh, ow, k, self.dim]))
    }
}
