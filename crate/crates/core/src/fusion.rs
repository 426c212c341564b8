//! Per-stage bidirectional localized cross-attention between fine-grid RGB
//! and coarse-grid HSI features, spectral SE pooling, and gated modality
//! fusion producing a single fine-grid 2D map.
//!
//! Attention is computed strictly within each coarse location: the r^2
//! co-registered RGB children of a parent (u, v) exchange information with
//! that parent's K spectral slices and with nothing else.

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{BcafError, Result};
use crate::nn::{Init, LayerNorm, Linear, Mlp, Scope};

/// Cross-attention direction(s) applied at active fusion stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Direction {
    #[serde(rename = "f2c")]
    FineToCoarse,
    #[serde(rename = "c2f")]
    CoarseToFine,
    #[serde(rename = "bidirectional")]
    Bidirectional,
}

/// Which stages fuse and in which direction(s).
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FusionPlan {
    pub stages: Vec<usize>,
    pub direction: Direction,
}

impl FusionPlan {
    pub fn all_bidirectional() -> Self {
        FusionPlan {
            stages: vec![1, 2, 3, 4],
            direction: Direction::Bidirectional,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(BcafError::Config("fusion plan has no active stages".into()));
        }
        if self.stages.iter().any(|&s| !(1..=4).contains(&s)) {
            return Err(BcafError::Config(format!(
                "fusion stages must lie in 1..=4, got {:?}",
                self.stages
            )));
        }
        Ok(())
    }

    pub fn is_active(&self, stage: usize) -> bool {
        self.stages.contains(&stage)
    }
}

/// Rearrange every r x r fine-grid neighborhood into a length-r^2 child
/// vector per coarse location: [H_f, W_f, C] -> [H_c, W_c, r^2 * C].
pub fn pixel_unshuffle(g: &mut Graph, x: Var, r: usize) -> Result<Var> {
    let sh = g.shape(x).to_vec();
    let (h, w, c) = (sh[0], sh[1], sh[2]);
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(BcafError::Shape(format!(
            "pixel_unshuffle: {h}x{w} not divisible by ratio {r}"
        )));
    }
    let y = unshuffle_children(g, x, r)?;
    Ok(g.reshape(y, &[h / r, w / r, r * r * c]))
}

/// As [`pixel_unshuffle`] but keeping children on their own axis:
/// [H_f, W_f, C] -> [H_c, W_c, r^2, C], children in row-major order.
pub fn unshuffle_children(g: &mut Graph, x: Var, r: usize) -> Result<Var> {
    let sh = g.shape(x).to_vec();
    let (h, w, c) = (sh[0], sh[1], sh[2]);
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(BcafError::Shape(format!(
            "pixel_unshuffle: {h}x{w} not divisible by ratio {r}"
        )));
    }
    let y = g.reshape(x, &[h / r, r, w / r, r, c]);
    let y = g.permute(y, &[0, 2, 1, 3, 4]);
    Ok(g.reshape(y, &[h / r, w / r, r * r, c]))
}

/// Inverse of [`pixel_unshuffle`]: [H_c, W_c, r^2 * C] -> [H_c * r, W_c * r, C].
pub fn pixel_shuffle(g: &mut Graph, x: Var, r: usize) -> Result<Var> {
    let sh = g.shape(x).to_vec();
    let (h, w, cc) = (sh[0], sh[1], sh[2]);
    if r == 0 || cc % (r * r) != 0 {
        return Err(BcafError::Shape(format!(
            "pixel_shuffle: channel count {cc} not divisible by r^2 = {}",
            r * r
        )));
    }
    let c = cc / (r * r);
    let y = g.reshape(x, &[h, w, r, r, c]);
    let y = g.permute(y, &[0, 2, 1, 3, 4]);
    Ok(g.reshape(y, &[h * r, w * r, c]))
}

/// Scaled dot-product attention between one parent's children and slices,
/// batched over all parents. `q`: [B, Tq, C]; `kv`: [B, Tk, C].
struct CrossAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    proj: Linear,
    heads: usize,
}

impl CrossAttention {
    fn new(scope: &mut Scope, name: &str, dim: usize, heads: usize) -> Self {
        let mut s = scope.sub(name);
        CrossAttention {
            wq: Linear::new(&mut s, "wq", dim, dim, true),
            wk: Linear::new(&mut s, "wk", dim, dim, true),
            wv: Linear::new(&mut s, "wv", dim, dim, true),
            proj: Linear::new(&mut s, "proj", dim, dim, true),
            heads,
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, q_in: Var, kv_in: Var) -> Var {
        let (b, tq, c) = (g.shape(q_in)[0], g.shape(q_in)[1], g.shape(q_in)[2]);
        let tk = g.shape(kv_in)[1];
        let h = self.heads;
        let d = c / h;
        let split = |g: &mut Graph, x: Var, t: usize| {
            let x = g.reshape(x, &[b, t, h, d]);
            let x = g.permute(x, &[0, 2, 1, 3]);
            g.reshape(x, &[b * h, t, d])
        };
        let q = self.wq.forward(g, store, q_in);
        let k = self.wk.forward(g, store, kv_in);
        let v = self.wv.forward(g, store, kv_in);
        let q = split(g, q, tq);
        let k = split(g, k, tk);
        let v = split(g, v, tk);
        let scores = g.bmm(q, k, false, true);
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = g.softmax_last(scores);
        let out = g.bmm(attn, v, false, false);
        let out = g.reshape(out, &[b, h, tq, d]);
        let out = g.permute(out, &[0, 2, 1, 3]);
        let out = g.reshape(out, &[b, tq, c]);
        self.proj.forward(g, store, out)
    }
}

/// One cross-attention sublayer: pre-norms on both streams, localized
/// attention, residual, then a position-wise FFN sublayer on the query
/// stream.
struct CrossAttnSublayer {
    norm_q: LayerNorm,
    norm_kv: LayerNorm,
    attn: CrossAttention,
    norm_ffn: LayerNorm,
    mlp: Mlp,
}

impl CrossAttnSublayer {
    fn new(scope: &mut Scope, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        let mut s = scope.sub(name);
        CrossAttnSublayer {
            norm_q: LayerNorm::new(&mut s, "norm_q", dim),
            norm_kv: LayerNorm::new(&mut s, "norm_kv", dim),
            attn: CrossAttention::new(&mut s, "attn", dim, heads),
            norm_ffn: LayerNorm::new(&mut s, "norm_ffn", dim),
            mlp: Mlp::new(&mut s, "mlp", dim, dim * mlp_ratio),
        }
    }
}

/// Spectral squeeze-excitation pooling: global average pool over space,
/// per-slice/per-channel sigmoid gates through a bottleneck, weighted sum
/// over the K slices.
pub struct SePool {
    pub f1: Linear,
    pub f2: Linear,
}

impl SePool {
    pub fn new(scope: &mut Scope, name: &str, dim: usize) -> Self {
        let mut s = scope.sub(name);
        let hidden = (dim / 8).max(8);
        SePool {
            f1: Linear::new(&mut s, "f1", dim, hidden, true),
            f2: Linear::new(&mut s, "f2", hidden, dim, true),
        }
    }

    /// [H, W, K, C] -> [H, W, C].
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f_hsi: Var) -> Var {
        let sh = g.shape(f_hsi).to_vec();
        let (h, w, k, c) = (sh[0], sh[1], sh[2], sh[3]);
        let z = g.mean_axes(f_hsi, &[0, 1], false); // [K, C]
        let a = self.f1.forward(g, store, z);
        let a = g.relu(a);
        let a = self.f2.forward(g, store, a);
        let a = g.sigmoid(a); // [K, C], gates in (0, 1)
        let weighted = g.mul(f_hsi, a); // broadcast over H, W
        let out = g.sum_axes(weighted, &[2], false);
        debug_assert_eq!(g.shape(out), &[h, w, c]);
        let _ = (h, w, k);
        out
    }
}

/// Per-stage fusion parameters: the configured cross-attention direction(s),
/// SE pooling, and the gated modality fusion.
pub struct FusionStage {
    pub dim: usize,
    pub heads: usize,
    f2c: Option<CrossAttnSublayer>,
    c2f: Option<CrossAttnSublayer>,
    pub se: SePool,
    pub alpha: ParamId,
    pub norm_rgb: LayerNorm,
    pub norm_hsi: LayerNorm,
    pub norm_out: LayerNorm,
}

impl FusionStage {
    pub fn new(
        scope: &mut Scope,
        name: &str,
        dim: usize,
        heads: usize,
        direction: Direction,
        mlp_ratio: usize,
    ) -> Self {
        let mut s = scope.sub(name);
        let f2c = matches!(direction, Direction::FineToCoarse | Direction::Bidirectional)
            .then(|| CrossAttnSublayer::new(&mut s, "f2c", dim, heads, mlp_ratio));
        let c2f = matches!(direction, Direction::CoarseToFine | Direction::Bidirectional)
            .then(|| CrossAttnSublayer::new(&mut s, "c2f", dim, heads, mlp_ratio));
        let se = SePool::new(&mut s, "se", dim);
        let alpha = s.param("alpha", &[dim], Init::Zeros, false);
        FusionStage {
            dim,
            heads,
            f2c,
            c2f,
            se,
            alpha,
            norm_rgb: LayerNorm::new(&mut s, "norm_rgb", dim),
            norm_hsi: LayerNorm::new(&mut s, "norm_hsi", dim),
            norm_out: LayerNorm::new(&mut s, "norm_out", dim),
        }
    }

    /// RGB children query HSI slices; softmax over the K keys. Returns the
    /// residually updated fine-grid features after the FFN sublayer.
    pub fn cross_attn_fine_to_coarse(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f_rgb: Var,
        f_hsi: Var,
        r: usize,
    ) -> Result<Var> {
        let sub = self.f2c.as_ref().ok_or_else(|| {
            BcafError::Config("fine-to-coarse attention not configured for this stage".into())
        })?;
        let (hf, wf, c) = (g.shape(f_rgb)[0], g.shape(f_rgb)[1], g.shape(f_rgb)[2]);
        let (hc, wc, k) = (g.shape(f_hsi)[0], g.shape(f_hsi)[1], g.shape(f_hsi)[2]);
        check_grids(hf, wf, hc, wc, r)?;
        let b = hc * wc;
        let qn = sub.norm_q.forward(g, store, f_rgb);
        let kn = sub.norm_kv.forward(g, store, f_hsi);
        let children = unshuffle_children(g, qn, r)?; // [Hc, Wc, r^2, C]
        let q = g.reshape(children, &[b, r * r, c]);
        let kv = g.reshape(kn, &[b, k, c]);
        let o = sub.attn.forward(g, store, q, kv); // [B, r^2, C]
        let o = g.reshape(o, &[hc, wc, r * r * c]);
        let o = pixel_shuffle(g, o, r)?; // [Hf, Wf, C]
        let x = g.add(f_rgb, o);
        let n = sub.norm_ffn.forward(g, store, x);
        let m = sub.mlp.forward(g, store, n);
        Ok(g.add(x, m))
    }

    /// HSI slices query the r^2 RGB children; softmax over the r^2 keys.
    /// Returns the residually updated coarse-grid features after the FFN.
    pub fn cross_attn_coarse_to_fine(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f_hsi: Var,
        f_rgb: Var,
        r: usize,
    ) -> Result<Var> {
        let sub = self.c2f.as_ref().ok_or_else(|| {
            BcafError::Config("coarse-to-fine attention not configured for this stage".into())
        })?;
        let (hf, wf, c) = (g.shape(f_rgb)[0], g.shape(f_rgb)[1], g.shape(f_rgb)[2]);
        let (hc, wc, k) = (g.shape(f_hsi)[0], g.shape(f_hsi)[1], g.shape(f_hsi)[2]);
        check_grids(hf, wf, hc, wc, r)?;
        let b = hc * wc;
        let qn = sub.norm_q.forward(g, store, f_hsi);
        let kn = sub.norm_kv.forward(g, store, f_rgb);
        let q = g.reshape(qn, &[b, k, c]);
        let children = unshuffle_children(g, kn, r)?;
        let kv = g.reshape(children, &[b, r * r, c]);
        let o = sub.attn.forward(g, store, q, kv); // [B, K, C]
        let o = g.reshape(o, &[hc, wc, k, c]);
        let x = g.add(f_hsi, o);
        let n = sub.norm_ffn.forward(g, store, x);
        let m = sub.mlp.forward(g, store, n);
        Ok(g.add(x, m))
    }

    /// F_fuse = LN(LN(F_rgb) + sigmoid(alpha) (.) LN(upsample(F_hsi_pooled))).
    pub fn gated_fusion(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f_rgb: Var,
        pooled: Var,
        r: usize,
    ) -> Result<Var> {
        let up = g.nearest_upsample(pooled, r);
        if g.shape(up) != g.shape(f_rgb) {
            return Err(BcafError::Shape(format!(
                "gated fusion: upsampled HSI {:?} vs RGB {:?}",
                g.shape(up),
                g.shape(f_rgb)
            )));
        }
        let nr = self.norm_rgb.forward(g, store, f_rgb);
        let nh = self.norm_hsi.forward(g, store, up);
        let alpha = g.param(store, self.alpha);
        let gate = g.sigmoid(alpha);
        let gated = g.mul(nh, gate);
        let summed = g.add(nr, gated);
        Ok(self.norm_out.forward(g, store, summed))
    }

    /// Full stage: cross-attention in the configured direction(s) reading the
    /// pre-update features of the other modality, then SE pooling, nearest
    /// upsample and gated fusion. Returns (fused 2D map, next RGB features,
    /// next HSI features).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f_rgb: Var,
        f_hsi: Var,
        r: usize,
    ) -> Result<(Var, Var, Var)> {
        let rgb_next = if self.f2c.is_some() {
            self.cross_attn_fine_to_coarse(g, store, f_rgb, f_hsi, r)?
        } else {
            f_rgb
        };
        let hsi_next = if self.c2f.is_some() {
            self.cross_attn_coarse_to_fine(g, store, f_hsi, f_rgb, r)?
        } else {
            f_hsi
        };
        let pooled = self.se.forward(g, store, hsi_next);
        let fused = self.gated_fusion(g, store, rgb_next, pooled, r)?;
        Ok((fused, rgb_next, hsi_next))
    }
}

fn check_grids(hf: usize, wf: usize, hc: usize, wc: usize, r: usize) -> Result<()> {
    if r == 0 || hf != r * hc || wf != r * wc {
        return Err(BcafError::Shape(format!(
            "grids not related by ratio {r}: fine {hf}x{wf}, coarse {hc}x{wc}"
        )));
    }
    Ok(())
}
