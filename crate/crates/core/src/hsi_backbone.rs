//! HSI-adapted four-stage encoder: per-slice spatial window attention,
//! position-wise spectral self-attention over the K slices, spatial-only
//! patch merging, and the pure-2D HSI-1 path when K = 1.

use ndarray::{ArrayD, IxDyn};

use crate::autodiff::{Graph, Mode, ParamId, ParamStore, Var};
use crate::error::{BcafError, Result};
use crate::grouping::{pad_bands, GroupedEmbed, SharingMode, SpectralGrouping};
use crate::nn::{drop_path_keep, residual, Init, LayerNorm, Linear, Mlp, Scope};
use crate::swin::{build_window_mask, effective_window, BackboneConfig, PatchMerging, WindowAttention};

/// Coarse-grid feature lattice at one stage: [H, W, K, C].
#[derive(Debug, Clone, Copy)]
pub struct CoarseFeature {
    pub var: Var,
    pub stage: usize,
    pub k: usize,
}

/// How spectral relations are modeled inside the backbone blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralMixerKind {
    Attention,
    Conv1d { kernel_width: usize },
}

/// Multi-head self-attention along the slice axis at each spatial location.
pub struct SpectralAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl SpectralAttention {
    pub fn new(scope: &mut Scope, name: &str, dim: usize, heads: usize) -> Self {
        let mut s = scope.sub(name);
        SpectralAttention {
            qkv: Linear::new(&mut s, "qkv", dim, 3 * dim, true),
            proj: Linear::new(&mut s, "proj", dim, dim, true),
            heads,
        }
    }

    /// x: [H, W, K, C] -> [H, W, K, C]; every spatial location attends over
    /// its own K slice vectors only.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let sh = g.shape(x).to_vec();
        let (hh, ww, k, c) = (sh[0], sh[1], sh[2], sh[3]);
        if k < 2 {
            return Err(BcafError::Config(
                "spectral attention needs K >= 2; use the HSI-1 path for a single slice".into(),
            ));
        }
        let h = self.heads;
        let d = c / h;
        let b = hh * ww;
        let t = g.reshape(x, &[b, k, c]);
        let qkv = self.qkv.forward(g, store, t); // [B, K, 3C]
        let qkv = g.reshape(qkv, &[b, k, 3, h, d]);
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4]); // [3, B, h, K, d]
        let q = g.slice_ranges(qkv, &[(0, 1), (0, b), (0, h), (0, k), (0, d)]);
        let kk = g.slice_ranges(qkv, &[(1, 2), (0, b), (0, h), (0, k), (0, d)]);
        let v = g.slice_ranges(qkv, &[(2, 3), (0, b), (0, h), (0, k), (0, d)]);
        let q = g.reshape(q, &[b * h, k, d]);
        let kk = g.reshape(kk, &[b * h, k, d]);
        let v = g.reshape(v, &[b * h, k, d]);
        let scores = g.bmm(q, kk, false, true);
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = g.softmax_last(scores);
        let out = g.bmm(attn, v, false, false); // [B*h, K, d]
        let out = g.reshape(out, &[b, h, k, d]);
        let out = g.permute(out, &[0, 2, 1, 3]);
        let out = g.reshape(out, &[b, k, c]);
        let out = self.proj.forward(g, store, out);
        Ok(g.reshape(out, &[hh, ww, k, c]))
    }
}

/// 1D convolution along the slice axis (ablation alternative to spectral
/// attention): fixed local spectral receptive field with zero padding.
pub struct SpectralConv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel_width: usize,
    pub dim: usize,
}

impl SpectralConv1d {
    pub fn new(scope: &mut Scope, name: &str, dim: usize, kernel_width: usize) -> Result<Self> {
        if kernel_width % 2 == 0 {
            return Err(BcafError::Config(format!(
                "spectral conv kernel width must be odd, got {kernel_width}"
            )));
        }
        let mut s = scope.sub(name);
        Ok(SpectralConv1d {
            w: s.param("weight", &[kernel_width * dim, dim], Init::TruncNormal(0.02), true),
            b: s.param("bias", &[dim], Init::Zeros, false),
            kernel_width,
            dim,
        })
    }

    /// x: [H, W, K, C] -> same shape; position (k) mixes slices
    /// [k - kw/2, k + kw/2] with zero padding at the ends.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let sh = g.shape(x).to_vec();
        let (hh, ww, k, c) = (sh[0], sh[1], sh[2], sh[3]);
        let kw = self.kernel_width;
        let half = kw / 2;
        let padded = g.pad_zero(x, &[(0, 0), (0, 0), (half, half), (0, 0)]);
        let mut taps = Vec::with_capacity(kw);
        for t in 0..kw {
            taps.push(g.slice_ranges(padded, &[(0, hh), (0, ww), (t, t + k), (0, c)]));
        }
        let cols = g.concat(3, &taps); // [H, W, K, kw*C]
        let flat = g.reshape(cols, &[hh * ww * k, kw * c]);
        let w = g.param(store, self.w);
        let y = g.matmul(flat, w);
        let b = g.param(store, self.b);
        let y = g.add(y, b);
        Ok(g.reshape(y, &[hh, ww, k, c]))
    }
}

enum Mixer {
    Attention(SpectralAttention),
    Conv1d(SpectralConv1d),
}

struct SpectralSublayers {
    norm1: LayerNorm,
    mixer: Mixer,
    norm2: LayerNorm,
    mlp: Mlp,
}

/// One HSI backbone block: per-slice spatial windowed attention sublayer with
/// its FFN, followed (for K > 1) by a spectral mixing sublayer with its FFN.
/// All sublayers are pre-norm residual with a shared stochastic-depth rate.
pub struct HsiBlock {
    norm1: LayerNorm,
    attn: WindowAttention,
    norm2: LayerNorm,
    mlp: Mlp,
    spectral: Option<SpectralSublayers>,
    shifted: bool,
    droppath: f64,
    window: usize,
    shift: usize,
}

impl HsiBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        scope: &mut Scope,
        name: &str,
        dim: usize,
        heads: usize,
        cfg: &BackboneConfig,
        shifted: bool,
        droppath: f64,
        with_spectral: Option<SpectralMixerKind>,
    ) -> Result<Self> {
        let mut s = scope.sub(name);
        let norm1 = LayerNorm::new(&mut s, "norm1", dim);
        let attn = WindowAttention::new(&mut s, "attn", dim, heads, cfg.window);
        let norm2 = LayerNorm::new(&mut s, "norm2", dim);
        let mlp = Mlp::new(&mut s, "mlp", dim, dim * cfg.mlp_ratio);
        let spectral = match with_spectral {
            None => None,
            Some(kind) => {
                let mut sp = s.sub("spectral");
                let mixer = match kind {
                    SpectralMixerKind::Attention => {
                        Mixer::Attention(SpectralAttention::new(&mut sp, "attn", dim, heads))
                    }
                    SpectralMixerKind::Conv1d { kernel_width } => {
                        Mixer::Conv1d(SpectralConv1d::new(&mut sp, "conv", dim, kernel_width)?)
                    }
                };
                Some(SpectralSublayers {
                    norm1: LayerNorm::new(&mut sp, "norm1", dim),
                    mixer,
                    norm2: LayerNorm::new(&mut sp, "norm2", dim),
                    mlp: Mlp::new(&mut sp, "mlp", dim, dim * cfg.mlp_ratio),
                })
            }
        };
        Ok(HsiBlock {
            norm1,
            attn,
            norm2,
            mlp,
            spectral,
            shifted,
            droppath,
            window: cfg.window,
            shift: cfg.shift,
        })
    }

    /// Spatial window attention applied independently to every slice with
    /// shared weights: slices are folded into the window batch.
    fn per_slice_attn(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let sh = g.shape(x).to_vec();
        let (h, w, k, c) = (sh[0], sh[1], sh[2], sh[3]);
        let (m, shift) = effective_window(h, w, self.window, if self.shifted { self.shift } else { 0 });
        let hp = h.div_ceil(m) * m;
        let wp = w.div_ceil(m) * m;
        let mut y = x;
        if hp != h || wp != w {
            y = g.pad_zero(y, &[(0, hp - h), (0, wp - w), (0, 0), (0, 0)]);
        }
        if shift > 0 {
            y = g.roll2(y, -(shift as isize), -(shift as isize));
        }
        let mask = build_window_mask(h, w, hp, wp, m, shift);
        let tiled = mask.map(|mk| {
            let nw = mk.shape()[0];
            let t = mk.shape()[1];
            let mut out = ArrayD::zeros(IxDyn(&[nw * k, t, t]));
            for wi in 0..nw {
                for sl in 0..k {
                    out.index_axis_mut(ndarray::Axis(0), wi * k + sl)
                        .assign(&mk.index_axis(ndarray::Axis(0), wi));
                }
            }
            out
        });
        let (nh, nw) = (hp / m, wp / m);
        let y = g.reshape(y, &[nh, m, nw, m, k, c]);
        let y = g.permute(y, &[0, 2, 4, 1, 3, 5]); // [nh, nw, K, m, m, C]
        let yw = g.reshape(y, &[nh * nw * k, m * m, c]);
        let ow = self.attn.forward_windows(g, store, yw, m, tiled.as_ref());
        let y = g.reshape(ow, &[nh, nw, k, m, m, c]);
        let y = g.permute(y, &[0, 3, 1, 4, 2, 5]); // [nh, m, nw, m, K, C]
        let mut y = g.reshape(y, &[hp, wp, k, c]);
        if shift > 0 {
            y = g.roll2(y, shift as isize, shift as isize);
        }
        if hp != h || wp != w {
            y = g.slice_ranges(y, &[(0, h), (0, w), (0, k), (0, c)]);
        }
        y
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        // Per-slice spatial attention sublayer.
        let x = match drop_path_keep(self.droppath, mode) {
            None => x,
            Some(scale) => {
                let n = self.norm1.forward(g, store, x);
                let b = self.per_slice_attn(g, store, n);
                residual(g, x, Some(b), Some(scale))
            }
        };
        // Spatial FFN sublayer (position-wise, slice-independent).
        let x = match drop_path_keep(self.droppath, mode) {
            None => x,
            Some(scale) => {
                let n = self.norm2.forward(g, store, x);
                let b = self.mlp.forward(g, store, n);
                residual(g, x, Some(b), Some(scale))
            }
        };
        let Some(sp) = &self.spectral else {
            return Ok(x);
        };
        // Spectral mixing sublayer.
        let x = match drop_path_keep(self.droppath, mode) {
            None => x,
            Some(scale) => {
                let n = sp.norm1.forward(g, store, x);
                let b = match &sp.mixer {
                    Mixer::Attention(a) => a.forward(g, store, n)?,
                    Mixer::Conv1d(cv) => cv.forward(g, store, n)?,
                };
                residual(g, x, Some(b), Some(scale))
            }
        };
        // Spectral FFN sublayer.
        Ok(match drop_path_keep(self.droppath, mode) {
            None => x,
            Some(scale) => {
                let n = sp.norm2.forward(g, store, x);
                let b = sp.mlp.forward(g, store, n);
                residual(g, x, Some(b), Some(scale))
            }
        })
    }
}

/// The HSI encoder. For K > 1 it runs factorized spatial-spectral blocks on
/// an [H, W, K, C] lattice with a learnable absolute spectral positional
/// embedding; for K = 1 it collapses the spectral axis at input (4x4xS -> C)
/// and runs the standard 2D pipeline over a single slice.
pub struct HsiBackbone {
    pub cfg: BackboneConfig,
    pub grouping: SpectralGrouping,
    pub mixer_kind: SpectralMixerKind,
    embed: GroupedEmbed,
    embed_norm: LayerNorm,
    pos_embed: Option<ParamId>,
    stages: Vec<Vec<HsiBlock>>,
    merges: Vec<PatchMerging>,
}

impl HsiBackbone {
    pub fn new(
        scope: &mut Scope,
        name: &str,
        cfg: &BackboneConfig,
        grouping: SpectralGrouping,
        embed_mode: SharingMode,
        mixer_kind: SpectralMixerKind,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut s = scope.sub(name);
        let embed = GroupedEmbed::new(&mut s, "embed", grouping, cfg.dims[0], embed_mode);
        let embed_norm = LayerNorm::new(&mut s, "embed_norm", cfg.dims[0]);
        let pos_embed = (grouping.k > 1).then(|| {
            s.param(
                "spectral_pos_embed",
                &[grouping.k, cfg.dims[0]],
                Init::TruncNormal(0.02),
                false,
            )
        });
        let with_spectral = (grouping.k > 1).then_some(mixer_kind);
        let mut stages = Vec::new();
        let mut flat = 0usize;
        for st in 0..4 {
            let mut blocks = Vec::new();
            for b in 0..cfg.depths[st] {
                blocks.push(HsiBlock::new(
                    &mut s.sub(&format!("stage{st}")),
                    &format!("block{b}"),
                    cfg.dims[st],
                    cfg.heads[st],
                    cfg,
                    b % 2 == 1,
                    cfg.droppath_rate(flat),
                    with_spectral,
                )?);
                flat += 1;
            }
            stages.push(blocks);
        }
        let merges = (0..3)
            .map(|st| PatchMerging::new(&mut s.sub(&format!("stage{st}")), "merge", cfg.dims[st]))
            .collect();
        Ok(HsiBackbone {
            cfg: cfg.clone(),
            grouping,
            mixer_kind,
            embed,
            embed_norm,
            pos_embed,
            stages,
            merges,
        })
    }

    /// Pad bands, embed to the [H/4, W/4, K, C] lattice, add the spectral
    /// positional embedding.
    pub fn embed_tokens(&self, g: &mut Graph, store: &ParamStore, cube: Var) -> Result<Var> {
        let shape = g.shape(cube).to_vec();
        if shape.len() != 3 || shape[2] != self.grouping.s {
            return Err(BcafError::Shape(format!(
                "expected HxWx{} cube, got {shape:?}",
                self.grouping.s
            )));
        }
        let (h, w) = (shape[0], shape[1]);
        if h % 32 != 0 || w % 32 != 0 {
            return Err(BcafError::Shape(format!(
                "input {h}x{w} not divisible by 32; pad to {}x{}",
                h.div_ceil(32) * 32,
                w.div_ceil(32) * 32
            )));
        }
        let padded = pad_bands(g, cube, self.grouping)?;
        let mut x = self.embed.forward(g, store, padded)?; // [H/4, W/4, K, C]
        x = self.embed_norm.forward(g, store, x);
        if let Some(pe) = self.pos_embed {
            let pe = g.param(store, pe);
            x = g.add(x, pe);
        }
        Ok(x)
    }

    /// Run one stage's blocks (0-based).
    pub fn run_stage(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        stage: usize,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let mut x = x;
        for block in &self.stages[stage] {
            x = block.forward(g, store, x, mode)?;
        }
        Ok(x)
    }

    /// Spatial-only downsampling between stages (0-based).
    pub fn merge(&self, g: &mut Graph, store: &ParamStore, stage: usize, x: Var) -> Result<Var> {
        self.merges[stage].forward_slices(g, store, x)
    }

    /// Encode an [H, W, S] cube into four coarse-grid stage features with the
    /// slice count preserved at every stage.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cube: Var,
        mode: Mode,
    ) -> Result<[CoarseFeature; 4]> {
        let mut x = self.embed_tokens(g, store, cube)?;
        let k = self.grouping.k;
        let mut feats = Vec::with_capacity(4);
        for st in 0..4 {
            x = self.run_stage(g, store, st, x, mode)?;
            feats.push(CoarseFeature {
                var: x,
                stage: st + 1,
                k,
            });
            if st < 3 {
                x = self.merge(g, store, st, x)?;
            }
        }
        Ok(feats
            .try_into()
            .map_err(|_| BcafError::Shape("stage count".into()))
            .unwrap())
    }
}
