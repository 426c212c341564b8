//! Shared windowed-attention machinery: window partition/reverse, shift
//! masks, relative position bias, the two-sublayer window block, and spatial
//! patch merging.

use ndarray::{ArrayD, IxDyn};

use crate::autodiff::{Graph, Mode, ParamId, ParamStore, Var};
use crate::error::{BcafError, Result};
use crate::nn::{drop_path_keep, residual, Init, LayerNorm, Linear, Mlp, Scope};

/// Four-stage hierarchical backbone configuration (shared by the RGB and HSI
/// encoders).
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub window: usize,
    pub shift: usize,
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub dims: [usize; 4],
    pub droppath_max: f64,
    pub mlp_ratio: usize,
}

impl BackboneConfig {
    /// The Tiny variant: patch 4, window 7, shift 3, depths (2,2,6,2),
    /// heads (3,6,12,24), dims (96,192,384,768), stochastic depth to 0.3.
    pub fn tiny() -> Self {
        BackboneConfig {
            patch_size: 4,
            window: 7,
            shift: 3,
            depths: [2, 2, 6, 2],
            heads: [3, 6, 12, 24],
            dims: [96, 192, 384, 768],
            droppath_max: 0.3,
            mlp_ratio: 4,
        }
    }

    /// HSI default with the deeper (3,3,9,3) schedule.
    pub fn hsi_default() -> Self {
        BackboneConfig {
            depths: [3, 3, 9, 3],
            ..Self::tiny()
        }
    }

    /// Desk-scale configuration for tests and synthetic experiments.
    pub fn desk(dims0: usize, depths: [usize; 4]) -> Self {
        BackboneConfig {
            patch_size: 4,
            window: 4,
            shift: 2,
            depths,
            heads: [2, 2, 4, 4],
            dims: [dims0, dims0 * 2, dims0 * 4, dims0 * 8],
            droppath_max: 0.0,
            mlp_ratio: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size != 4 {
            return Err(BcafError::Config("patch_size must be 4".into()));
        }
        if self.shift >= self.window {
            return Err(BcafError::Config(format!(
                "shift {} must be smaller than window {}",
                self.shift, self.window
            )));
        }
        for s in 0..4 {
            if self.dims[s] % self.heads[s] != 0 {
                return Err(BcafError::Config(format!(
                    "stage {}: heads {} do not divide dim {}",
                    s, self.heads[s], self.dims[s]
                )));
            }
            if s > 0 && self.dims[s] != 2 * self.dims[s - 1] {
                return Err(BcafError::Config(format!(
                    "stage {}: dims must double per stage ({} vs {})",
                    s,
                    self.dims[s],
                    self.dims[s - 1]
                )));
            }
        }
        Ok(())
    }

    pub fn total_blocks(&self) -> usize {
        self.depths.iter().sum()
    }

    /// Per-block stochastic-depth rate, linear from 0 to `droppath_max` over
    /// the flattened block index.
    pub fn droppath_rate(&self, flat_block: usize) -> f64 {
        let total = self.total_blocks();
        if total <= 1 {
            return 0.0;
        }
        self.droppath_max * flat_block as f64 / (total - 1) as f64
    }
}

/// Effective window size and shift for a feature map: when the whole map fits
/// inside one window, the window shrinks to the map and shifting is disabled.
pub fn effective_window(h: usize, w: usize, window: usize, shift: usize) -> (usize, usize) {
    if h <= window && w <= window {
        (h.max(w), 0)
    } else {
        (window, shift)
    }
}

/// Flattened relative-position index map for an `m_eff` x `m_eff` window into
/// a bias table built for windows up to `m_table`.
pub fn rel_pos_index(m_eff: usize, m_table: usize) -> Vec<usize> {
    let t = m_eff * m_eff;
    let stride = 2 * m_table - 1;
    let mut idx = Vec::with_capacity(t * t);
    for q in 0..t {
        let (qy, qx) = (q / m_eff, q % m_eff);
        for k in 0..t {
            let (ky, kx) = (k / m_eff, k % m_eff);
            let dy = qy as isize - ky as isize + (m_table as isize - 1);
            let dx = qx as isize - kx as isize + (m_table as isize - 1);
            idx.push(dy as usize * stride + dx as usize);
        }
    }
    idx
}

/// Additive attention mask for the (padded, possibly shifted) window grid.
///
/// Combines the standard shifted-window region construction (computed on the
/// unrolled canvas, as the shift regions encode post-roll contiguity) with a
/// pad-token exclusion computed on the rolled canvas (pad tokens travel with
/// the cyclic shift). Entries are 0 or -inf; pad queries may attend pad keys
/// so no softmax row is ever fully masked. Returns `None` when no masking is
/// needed.
pub fn build_window_mask(
    h_real: usize,
    w_real: usize,
    hp: usize,
    wp: usize,
    m: usize,
    shift: usize,
) -> Option<ArrayD<f64>> {
    if shift == 0 && hp == h_real && wp == w_real {
        return None;
    }
    let (nh, nw) = (hp / m, wp / m);
    let t = m * m;

    // Region ids on the unrolled canvas.
    let mut region = vec![0i64; hp * wp];
    if shift > 0 {
        let bands = |len: usize| [(0, len - m), (len - m, len - shift), (len - shift, len)];
        let mut cnt = 0i64;
        for (y0, y1) in bands(hp) {
            for (x0, x1) in bands(wp) {
                for y in y0..y1 {
                    for x in x0..x1 {
                        region[y * wp + x] = cnt;
                    }
                }
                cnt += 1;
            }
        }
    }

    // Pad flags on the rolled canvas: source coordinate of rolled (y, x) is
    // ((y + shift) mod hp, (x + shift) mod wp).
    let mut pad = vec![false; hp * wp];
    for y in 0..hp {
        let sy = (y + shift) % hp;
        for x in 0..wp {
            let sx = (x + shift) % wp;
            pad[y * wp + x] = sy >= h_real || sx >= w_real;
        }
    }

    let mut mask = ArrayD::zeros(IxDyn(&[nh * nw, t, t]));
    for wy in 0..nh {
        for wx in 0..nw {
            let wi = wy * nw + wx;
            for q in 0..t {
                let (qy, qx) = (wy * m + q / m, wx * m + q % m);
                for k in 0..t {
                    let (ky, kx) = (wy * m + k / m, wx * m + k % m);
                    let same_region = region[qy * wp + qx] == region[ky * wp + kx];
                    let (pq, pk) = (pad[qy * wp + qx], pad[ky * wp + kx]);
                    let allowed = if pq { pk } else { !pk && same_region };
                    if !allowed {
                        mask[[wi, q, k]] = f64::NEG_INFINITY;
                    }
                }
            }
        }
    }
    Some(mask)
}

/// Partition an [H, W, C] map (H, W divisible by m) into [nW, m*m, C]
/// windows in row-major window order.
pub fn window_partition(g: &mut Graph, x: Var, m: usize) -> Var {
    let (h, w, c) = (g.shape(x)[0], g.shape(x)[1], g.shape(x)[2]);
    debug_assert!(h % m == 0 && w % m == 0);
    let x = g.reshape(x, &[h / m, m, w / m, m, c]);
    let x = g.permute(x, &[0, 2, 1, 3, 4]);
    g.reshape(x, &[(h / m) * (w / m), m * m, c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse(g: &mut Graph, xw: Var, m: usize, h: usize, w: usize) -> Var {
    let c = g.shape(xw)[2];
    let x = g.reshape(xw, &[h / m, w / m, m, m, c]);
    let x = g.permute(x, &[0, 2, 1, 3, 4]);
    g.reshape(x, &[h, w, c])
}

/// Multi-head window attention with relative position bias.
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub rel_bias: ParamId,
    pub heads: usize,
    pub window: usize,
    pub dim: usize,
}

impl WindowAttention {
    pub fn new(scope: &mut Scope, name: &str, dim: usize, heads: usize, window: usize) -> Self {
        let mut s = scope.sub(name);
        let qkv = Linear::new(&mut s, "qkv", dim, 3 * dim, true);
        let proj = Linear::new(&mut s, "proj", dim, dim, true);
        let table = (2 * window - 1) * (2 * window - 1);
        let rel_bias = s.param("rel_bias", &[table, heads], Init::TruncNormal(0.02), false);
        WindowAttention {
            qkv,
            proj,
            rel_bias,
            heads,
            window,
            dim,
        }
    }

    /// Attention over pre-partitioned windows [nW, T, C] with T = m_eff^2.
    pub fn forward_windows(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        xw: Var,
        m_eff: usize,
        mask: Option<&ArrayD<f64>>,
    ) -> Var {
        let (nw, t, c) = (g.shape(xw)[0], g.shape(xw)[1], g.shape(xw)[2]);
        debug_assert_eq!(t, m_eff * m_eff);
        let h = self.heads;
        let d = c / h;
        let qkv = self.qkv.forward(g, store, xw); // [nW, T, 3C]
        let qkv = g.reshape(qkv, &[nw, t, 3, h, d]);
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4]); // [3, nW, h, T, d]
        let q = g.slice_ranges(qkv, &[(0, 1), (0, nw), (0, h), (0, t), (0, d)]);
        let k = g.slice_ranges(qkv, &[(1, 2), (0, nw), (0, h), (0, t), (0, d)]);
        let v = g.slice_ranges(qkv, &[(2, 3), (0, nw), (0, h), (0, t), (0, d)]);
        let q = g.reshape(q, &[nw * h, t, d]);
        let k = g.reshape(k, &[nw * h, t, d]);
        let v = g.reshape(v, &[nw * h, t, d]);
        let scores = g.bmm(q, k, false, true);
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        let scores = g.reshape(scores, &[nw, h, t, t]);

        // Relative position bias, broadcast over windows.
        let table = g.param(store, self.rel_bias);
        let idx = rel_pos_index(m_eff, self.window);
        let bias = g.index_select0(table, &idx); // [T*T, h]
        let bias = g.reshape(bias, &[t, t, h]);
        let bias = g.permute(bias, &[2, 0, 1]); // [h, T, T]
        let mut scores = g.add(scores, bias);

        if let Some(m) = mask {
            // [nW, 1, T, T] additive mask broadcast over heads.
            let mv = m.to_owned().into_shape_with_order(IxDyn(&[nw, 1, t, t])).unwrap();
            let mc = g.constant(mv);
            scores = g.add(scores, mc);
        }
        let attn = g.softmax_last(scores);
        let attn = g.reshape(attn, &[nw * h, t, t]);
        let out = g.bmm(attn, v, false, false); // [nW*h, T, d]
        let out = g.reshape(out, &[nw, h, t, d]);
        let out = g.permute(out, &[0, 2, 1, 3]);
        let out = g.reshape(out, &[nw, t, c]);
        self.proj.forward(g, store, out)
    }
}

/// One Swin block: windowed (optionally shifted) attention sublayer and FFN
/// sublayer, each pre-norm with residual and stochastic depth.
pub struct WindowBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub shifted: bool,
    pub droppath: f64,
    pub window: usize,
    pub shift: usize,
}

impl WindowBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        scope: &mut Scope,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        shift: usize,
        shifted: bool,
        droppath: f64,
        mlp_ratio: usize,
    ) -> Self {
        let mut s = scope.sub(name);
        WindowBlock {
            norm1: LayerNorm::new(&mut s, "norm1", dim),
            attn: WindowAttention::new(&mut s, "attn", dim, heads, window),
            norm2: LayerNorm::new(&mut s, "norm2", dim),
            mlp: Mlp::new(&mut s, "mlp", dim, dim * mlp_ratio),
            shifted,
            droppath,
            window,
            shift,
        }
    }

    /// Attention branch on an [H, W, C] map: pad, shift, partition, attend,
    /// reverse, unshift, crop.
    fn attn_branch(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let (h, w, c) = (g.shape(x)[0], g.shape(x)[1], g.shape(x)[2]);
        let (m, shift) = effective_window(h, w, self.window, if self.shifted { self.shift } else { 0 });
        let hp = h.div_ceil(m) * m;
        let wp = w.div_ceil(m) * m;
        let mut y = x;
        if hp != h || wp != w {
            y = g.pad_zero(y, &[(0, hp - h), (0, wp - w), (0, 0)]);
        }
        if shift > 0 {
            y = g.roll2(y, -(shift as isize), -(shift as isize));
        }
        let mask = build_window_mask(h, w, hp, wp, m, shift);
        let xw = window_partition(g, y, m);
        let ow = self.attn.forward_windows(g, store, xw, m, mask.as_ref());
        let mut y = window_reverse(g, ow, m, hp, wp);
        if shift > 0 {
            y = g.roll2(y, shift as isize, shift as isize);
        }
        if hp != h || wp != w {
            y = g.slice_ranges(y, &[(0, h), (0, w), (0, c)]);
        }
        y
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Var {
        // Attention sublayer.
        let x = match drop_path_keep(self.droppath, mode) {
            None => x,
            Some(scale) => {
                let n = self.norm1.forward(g, store, x);
                let b = self.attn_branch(g, store, n);
                residual(g, x, Some(b), Some(scale))
            }
        };
        // FFN sublayer.
        match drop_path_keep(self.droppath, mode) {
            None => x,
            Some(scale) => {
                let n = self.norm2.forward(g, store, x);
                let b = self.mlp.forward(g, store, n);
                residual(g, x, Some(b), Some(scale))
            }
        }
    }
}

/// Spatial 2x downsampling: concatenate each 2x2 neighborhood (4C), layer
/// norm, then a bias-free linear projection to 2C.
pub struct PatchMerging {
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerging {
    pub fn new(scope: &mut Scope, name: &str, dim: usize) -> Self {
        let mut s = scope.sub(name);
        PatchMerging {
            norm: LayerNorm::new(&mut s, "norm", 4 * dim),
            reduction: Linear::new(&mut s, "reduction", 4 * dim, 2 * dim, false),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (h, w, c) = (g.shape(x)[0], g.shape(x)[1], g.shape(x)[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(BcafError::Shape(format!(
                "patch merging requires even spatial dims, got {h}x{w}"
            )));
        }
        // Children concatenated in (dy, dx) row-major order.
        let y = g.reshape(x, &[h / 2, 2, w / 2, 2, c]);
        let y = g.permute(y, &[0, 2, 1, 3, 4]);
        let y = g.reshape(y, &[h / 2, w / 2, 4 * c]);
        let y = self.norm.forward(g, store, y);
        Ok(self.reduction.forward(g, store, y))
    }

    /// Spatial-only merging of an [H, W, K, C] lattice: every slice is merged
    /// independently with the same weights; K is unchanged.
    pub fn forward_slices(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let sh = g.shape(x).to_vec();
        let (h, w, k, c) = (sh[0], sh[1], sh[2], sh[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(BcafError::Shape(format!(
                "patch merging requires even spatial dims, got {h}x{w}"
            )));
        }
        let y = g.reshape(x, &[h / 2, 2, w / 2, 2, k, c]);
        let y = g.permute(y, &[0, 2, 4, 1, 3, 5]); // [H/2, W/2, K, 2, 2, C]
        let y = g.reshape(y, &[h / 2, w / 2, k, 4 * c]);
        let y = self.norm.forward(g, store, y);
        Ok(self.reduction.forward(g, store, y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Arr, ParamTag};
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Arr::from_shape_vec(IxDyn(shape), v).unwrap()
    }

    /// Dense multi-head attention oracle with additive bias matrix over a
    /// single token set, written with plain loops.
    fn dense_attention_oracle(
        x: &Arr,              // [T, C]
        wqkv: &Arr,           // [C, 3C]
        bqkv: &Arr,           // [3C]
        wproj: &Arr,          // [C, C]
        bproj: &Arr,          // [C]
        bias: &Arr,           // [h, T, T] additive (rel-pos bias + mask)
        heads: usize,
    ) -> Arr {
        let t = x.shape()[0];
        let c = x.shape()[1];
        let d = c / heads;
        let mut q = vec![0.0; t * c];
        let mut k = vec![0.0; t * c];
        let mut v = vec![0.0; t * c];
        for i in 0..t {
            for j in 0..3 * c {
                let mut acc = bqkv[[j]];
                for l in 0..c {
                    acc += x[[i, l]] * wqkv[[l, j]];
                }
                match j / c {
                    0 => q[i * c + j % c] = acc,
                    1 => k[i * c + j % c] = acc,
                    _ => v[i * c + j % c] = acc,
                }
            }
        }
        let mut ctx = vec![0.0; t * c];
        for hh in 0..heads {
            for i in 0..t {
                let mut scores = vec![0.0; t];
                for j in 0..t {
                    let mut s = 0.0;
                    for l in 0..d {
                        s += q[i * c + hh * d + l] * k[j * c + hh * d + l];
                    }
                    scores[j] = s / (d as f64).sqrt() + bias[[hh, i, j]];
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut e: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
                let sum: f64 = e.iter().sum();
                for w in e.iter_mut() {
                    *w /= sum;
                }
                for l in 0..d {
                    let mut acc = 0.0;
                    for j in 0..t {
                        acc += e[j] * v[j * c + hh * d + l];
                    }
                    ctx[i * c + hh * d + l] = acc;
                }
            }
        }
        let mut out = Arr::zeros(IxDyn(&[t, c]));
        for i in 0..t {
            for j in 0..c {
                let mut acc = bproj[[j]];
                for l in 0..c {
                    acc += ctx[i * c + l] * wproj[[l, j]];
                }
                out[[i, j]] = acc;
            }
        }
        out
    }

    fn bias_with_rel(attn: &WindowAttention, store: &ParamStore, m_eff: usize, mask: Option<&Arr>, wi: usize) -> Arr {
        let t = m_eff * m_eff;
        let idx = rel_pos_index(m_eff, attn.window);
        let table = store.get(attn.rel_bias);
        let mut b = Arr::zeros(IxDyn(&[attn.heads, t, t]));
        for q in 0..t {
            for k in 0..t {
                for h in 0..attn.heads {
                    let mut val = table[[idx[q * t + k], h]];
                    if let Some(m) = mask {
                        val += m[[wi, q, k]];
                    }
                    b[[h, q, k]] = val;
                }
            }
        }
        b
    }

    #[test]
    fn single_window_equals_dense_attention() {
        // A 7x7 non-shifted map is one window: must equal full self-attention
        // over the 49 tokens.
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut scope = Scope::new(&mut store, &mut rng, "t", ParamTag::BackboneRandom);
        let attn = WindowAttention::new(&mut scope, "attn", 6, 2, 7);
        let x0 = randn(&mut rng, &[7, 7, 6]);

        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let xw = window_partition(&mut g, x, 7);
        let y = attn.forward_windows(&mut g, &store, xw, 7, None);
        let yv = g.value(y).clone();

        let flat = x0.view().into_shape_with_order(IxDyn(&[49, 6])).unwrap().to_owned();
        let bias = bias_with_rel(&attn, &store, 7, None, 0);
        let oracle = dense_attention_oracle(
            &flat,
            store.get(attn.qkv.w),
            store.get(attn.qkv.b.unwrap()),
            store.get(attn.proj.w),
            store.get(attn.proj.b.unwrap()),
            &bias,
            2,
        );
        let yv2 = yv.view().into_shape_with_order(IxDyn(&[49, 6])).unwrap().to_owned();
        let max = oracle
            .iter()
            .zip(yv2.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-10, "dense oracle mismatch {max}");
    }

    #[test]
    fn shifted_windows_equal_masked_dense_attention() {
        // 14x14 with window 7 shift 3: every window must equal dense attention
        // over its own tokens with the corresponding additive mask.
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut scope = Scope::new(&mut store, &mut rng, "t", ParamTag::BackboneRandom);
        let attn = WindowAttention::new(&mut scope, "attn", 4, 2, 7);
        let x0 = randn(&mut rng, &[14, 14, 4]);

        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let shifted = g.roll2(x, -3, -3);
        let xw = window_partition(&mut g, shifted, 7);
        let mask = build_window_mask(14, 14, 14, 14, 7, 3).unwrap();
        let y = attn.forward_windows(&mut g, &store, xw, 7, Some(&mask));
        let yv = g.value(y).clone(); // [4, 49, 4]

        // Oracle per window on the same shifted token layout.
        let mut xs = Arr::zeros(IxDyn(&[14, 14, 4]));
        for i in 0..14 {
            for j in 0..14 {
                for c in 0..4 {
                    xs[[i, j, c]] = x0[[(i + 3) % 14, (j + 3) % 14, c]];
                }
            }
        }
        for wy in 0..2 {
            for wx in 0..2 {
                let wi = wy * 2 + wx;
                let mut tokens = Arr::zeros(IxDyn(&[49, 4]));
                for q in 0..49 {
                    let (iy, ix) = (wy * 7 + q / 7, wx * 7 + q % 7);
                    for c in 0..4 {
                        tokens[[q, c]] = xs[[iy, ix, c]];
                    }
                }
                let bias = bias_with_rel(&attn, &store, 7, Some(&mask), wi);
                let oracle = dense_attention_oracle(
                    &tokens,
                    store.get(attn.qkv.w),
                    store.get(attn.qkv.b.unwrap()),
                    store.get(attn.proj.w),
                    store.get(attn.proj.b.unwrap()),
                    &bias,
                    2,
                );
                for q in 0..49 {
                    for c in 0..4 {
                        let diff = (oracle[[q, c]] - yv[[wi, q, c]]).abs();
                        assert!(diff < 1e-10, "window {wi} mismatch {diff}");
                    }
                }
            }
        }
    }

    #[test]
    fn mask_blocks_cross_region_attention() {
        // No attention weight may cross a masked boundary: softmax of -inf is
        // exactly zero.
        let mask = build_window_mask(14, 14, 14, 14, 7, 3).unwrap();
        let mut any_masked = false;
        for wi in 0..4 {
            for q in 0..49 {
                let mut row = vec![0.0f64; 49];
                let mut maxv = f64::NEG_INFINITY;
                for k in 0..49 {
                    row[k] = mask[[wi, q, k]];
                    maxv = maxv.max(row[k]);
                }
                assert!(maxv == 0.0, "every query must keep at least one key");
                let weights: Vec<f64> = row.iter().map(|&m| m.exp()).collect();
                let sum: f64 = weights.iter().sum();
                for (k, &w) in weights.iter().enumerate() {
                    if mask[[wi, q, k]].is_infinite() {
                        any_masked = true;
                        assert!(w / sum < 1e-12);
                    }
                }
            }
        }
        assert!(any_masked);
    }

    #[test]
    fn constant_input_stays_constant_through_block() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut scope = Scope::new(&mut store, &mut rng, "t", ParamTag::BackboneRandom);
        let block = WindowBlock::new(&mut scope, "b", 8, 2, 4, 2, false, 0.0, 2);
        let mut g = Graph::new();
        let x = g.constant(Arr::from_elem(IxDyn(&[8, 8, 8]), 1.37));
        let y = block.forward(&mut g, &store, x, Mode::Eval);
        let yv = g.value(y);
        // Attention over identical tokens averages them; the whole map stays
        // spatially constant.
        let first: Vec<f64> = (0..8).map(|c| yv[[0, 0, c]]).collect();
        for i in 0..8 {
            for j in 0..8 {
                for c in 0..8 {
                    assert!((yv[[i, j, c]] - first[c]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn patch_merging_matches_concat_project_oracle() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut scope = Scope::new(&mut store, &mut rng, "t", ParamTag::BackboneRandom);
        let pm = PatchMerging::new(&mut scope, "merge", 3);
        let x0 = randn(&mut rng, &[2, 2, 3]);
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let y = pm.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 6]);

        // Oracle: concat children (row-major), layer norm, matmul.
        let mut cat = vec![0.0; 12];
        for dy in 0..2 {
            for dx in 0..2 {
                for c in 0..3 {
                    cat[(dy * 2 + dx) * 3 + c] = x0[[dy, dx, c]];
                }
            }
        }
        let mu: f64 = cat.iter().sum::<f64>() / 12.0;
        let var: f64 = cat.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / 12.0;
        let gam = store.get(pm.norm.gamma);
        let bet = store.get(pm.norm.beta);
        let normed: Vec<f64> = cat
            .iter()
            .enumerate()
            .map(|(i, &v)| gam[[i]] * (v - mu) / (var + 1e-5).sqrt() + bet[[i]])
            .collect();
        let w = store.get(pm.reduction.w);
        let yv = g.value(y);
        for o in 0..6 {
            let mut acc = 0.0;
            for i in 0..12 {
                acc += normed[i] * w[[i, o]];
            }
            assert!((acc - yv[[0, 0, o]]).abs() < 1e-10);
        }
    }

    #[test]
    fn patch_merging_rejects_odd_dims() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut scope = Scope::new(&mut store, &mut rng, "t", ParamTag::BackboneRandom);
        let pm = PatchMerging::new(&mut scope, "merge", 2);
        let mut g = Graph::new();
        let x = g.constant(Arr::zeros(IxDyn(&[3, 4, 2])));
        assert!(pm.forward(&mut g, &store, x).is_err());
    }

    #[test]
    fn zero_input_zero_output_patch_merging() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut scope = Scope::new(&mut store, &mut rng, "t", ParamTag::BackboneRandom);
        let pm = PatchMerging::new(&mut scope, "merge", 2);
        let mut g = Graph::new();
        let x = g.constant(Arr::zeros(IxDyn(&[4, 4, 2])));
        let y = pm.forward(&mut g, &store, x).unwrap();
        // Zero input is normalized to beta (zero init) and projected without
        // bias: exactly zero.
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn effective_window_shrinks_for_small_maps() {
        assert_eq!(effective_window(2, 2, 7, 3), (2, 0));
        assert_eq!(effective_window(8, 8, 7, 3), (7, 3));
        assert_eq!(effective_window(7, 7, 7, 3), (7, 0));
    }
}
