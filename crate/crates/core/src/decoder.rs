//! Shared 2D U-Net-like decoder: 1x1 channel adapters, three stride-2
//! transpose-convolution upsampling steps with skip concatenation and
//! Conv-BatchNorm-ReLU refinement, a final 1x1 classifier, and bilinear logit
//! resizing.

use crate::autodiff::{Graph, Mode, ParamStore, Var};
use crate::error::{BcafError, Result};
use crate::nn::{dropout, BatchNorm2d, Conv2d, ConvTranspose2x2, Linear, Scope};

/// Decoder configuration. `num_classes` counts foreground classes N; logits
/// carry N+1 channels (background first).
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct DecoderConfig {
    pub widths: [usize; 3],
    pub dropout: f64,
    pub num_classes: usize,
}

impl DecoderConfig {
    pub fn new(num_classes: usize, dropout: f64) -> Self {
        DecoderConfig {
            widths: [256, 128, 64],
            dropout,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 1 {
            return Err(BcafError::Config("need at least one foreground class".into()));
        }
        if !(self.widths[0] > self.widths[1] && self.widths[1] > self.widths[2]) {
            return Err(BcafError::Config(format!(
                "decoder widths must be strictly decreasing, got {:?}",
                self.widths
            )));
        }
        Ok(())
    }

    /// Per-stage adapter target widths for stages 1..4.
    pub fn stage_widths(&self) -> [usize; 4] {
        [self.widths[2], self.widths[1], self.widths[0], self.widths[0]]
    }
}

struct RefineBlock {
    conv_a: Conv2d,
    bn_a: BatchNorm2d,
    conv_b: Conv2d,
    bn_b: BatchNorm2d,
}

impl RefineBlock {
    fn new(scope: &mut Scope, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let mut s = scope.sub(name);
        RefineBlock {
            conv_a: Conv2d::new(&mut s, "conv_a", in_dim, out_dim, 3, 1, 1),
            bn_a: BatchNorm2d::new(&mut s, "bn_a", out_dim),
            conv_b: Conv2d::new(&mut s, "conv_b", out_dim, out_dim, 3, 1, 1),
            bn_b: BatchNorm2d::new(&mut s, "bn_b", out_dim),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Var {
        let x = self.conv_a.forward(g, store, x);
        let x = self.bn_a.forward(g, store, x, mode);
        let x = g.relu(x);
        let x = self.conv_b.forward(g, store, x);
        let x = self.bn_b.forward(g, store, x, mode);
        g.relu(x)
    }
}

/// The decoder. Stage features (shallow to deep) are channel-aligned, the
/// deepest map is upsampled three times with skip concatenation
/// (upsampled, skip), refined, and classified at 1/4 input resolution.
pub struct Decoder {
    pub cfg: DecoderConfig,
    adapters: Vec<Linear>,
    ups: Vec<ConvTranspose2x2>,
    refines: Vec<RefineBlock>,
    classifier: Linear,
}

impl Decoder {
    /// `in_dims`: backbone channel widths per stage 1..4.
    pub fn new(scope: &mut Scope, name: &str, in_dims: [usize; 4], cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut s = scope.sub(name);
        let stage_w = cfg.stage_widths();
        let adapters = (0..4)
            .map(|i| Linear::new(&mut s, &format!("adapt{}", i + 1), in_dims[i], stage_w[i], true))
            .collect();
        let [d0, d1, d2] = cfg.widths;
        let ups = vec![
            ConvTranspose2x2::new(&mut s, "up1", d0, d0),
            ConvTranspose2x2::new(&mut s, "up2", d0, d1),
            ConvTranspose2x2::new(&mut s, "up3", d1, d2),
        ];
        let refines = vec![
            RefineBlock::new(&mut s, "refine1", 2 * d0, d0),
            RefineBlock::new(&mut s, "refine2", 2 * d1, d1),
            RefineBlock::new(&mut s, "refine3", 2 * d2, d2),
        ];
        let classifier = Linear::new(&mut s, "classifier", d2, cfg.num_classes + 1, true);
        Ok(Decoder {
            cfg: cfg.clone(),
            adapters,
            ups,
            refines,
            classifier,
        })
    }

    /// 1x1 channel alignment of the four 2D stage maps.
    pub fn channel_adapt(&self, g: &mut Graph, store: &ParamStore, stages: &[Var]) -> Result<Vec<Var>> {
        if stages.len() != 4 {
            return Err(BcafError::Shape(format!(
                "decoder expects 4 stage maps, got {}",
                stages.len()
            )));
        }
        Ok(stages
            .iter()
            .enumerate()
            .map(|(i, &x)| self.adapters[i].forward(g, store, x))
            .collect())
    }

    /// Decode aligned maps into logits at the stage-1 (1/4) resolution.
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, aligned: &[Var], mode: Mode) -> Result<Var> {
        if aligned.len() != 4 {
            return Err(BcafError::Shape(format!(
                "decode expects 4 aligned maps, got {}",
                aligned.len()
            )));
        }
        for i in 0..3 {
            let (h, w) = (g.shape(aligned[i])[0], g.shape(aligned[i])[1]);
            let (h2, w2) = (g.shape(aligned[i + 1])[0], g.shape(aligned[i + 1])[1]);
            if h != 2 * h2 || w != 2 * w2 {
                return Err(BcafError::Shape(format!(
                    "stage {} map {h}x{w} is not twice stage {} map {h2}x{w2}",
                    i + 1,
                    i + 2
                )));
            }
        }
        let mut x = aligned[3];
        for step in 0..3 {
            let up = self.ups[step].forward(g, store, x);
            let skip = aligned[2 - step];
            let cat = g.concat(2, &[up, skip]);
            x = self.refines[step].forward(g, store, cat, mode);
            x = dropout(g, x, self.cfg.dropout, mode);
        }
        Ok(self.classifier.forward(g, store, x))
    }

    /// Full pass: adapt then decode.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, stages: &[Var], mode: Mode) -> Result<Var> {
        let aligned = self.channel_adapt(g, store, stages)?;
        self.decode(g, store, &aligned, mode)
    }
}

/// Bilinear logit resize with half-pixel centers; argmax is taken after
/// resizing.
pub fn resize_logits(g: &mut Graph, logits: Var, th: usize, tw: usize) -> Var {
    let (h, w) = (g.shape(logits)[0], g.shape(logits)[1]);
    if h == th && w == tw {
        return logits;
    }
    g.resize_bilinear(logits, th, tw)
}

/// Per-pixel argmax over the class axis of an [H, W, N+1] logit map.
pub fn argmax_classes(logits: &crate::autodiff::Arr) -> ndarray::Array2<usize> {
    let (h, w, c) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    let mut out = ndarray::Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut best = 0usize;
            let mut bv = f64::NEG_INFINITY;
            for k in 0..c {
                let v = logits[[i, j, k]];
                if v > bv {
                    bv = v;
                    best = k;
                }
            }
            out[[i, j]] = best;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_param_grads, Arr, ParamStore, ParamTag};
    use crate::nn::Scope;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Arr::from_shape_vec(IxDyn(shape), v).unwrap()
    }

    fn small_cfg(n: usize) -> DecoderConfig {
        DecoderConfig {
            widths: [16, 12, 8],
            dropout: 0.0,
            num_classes: n,
        }
    }

    fn build(n: usize, seed: u64) -> (ParamStore, Decoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scope = Scope::new(&mut store, &mut rng, "", ParamTag::Head);
        let dec = Decoder::new(&mut scope, "dec", [4, 8, 16, 32], &small_cfg(n)).unwrap();
        (store, dec)
    }

    fn stage_maps(g: &mut Graph, rng: &mut ChaCha8Rng, base: usize) -> Vec<Var> {
        let dims = [4usize, 8, 16, 32];
        (0..4)
            .map(|i| {
                let side = base >> i;
                let x = randn(rng, &[side, side, dims[i]]);
                g.constant(x)
            })
            .collect()
    }

    #[test]
    fn adapters_match_per_pixel_matmul_oracle() {
        let (store, dec) = build(2, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let stages = stage_maps(&mut g, &mut rng, 16);
        let aligned = dec.channel_adapt(&mut g, &store, &stages).unwrap();
        let w = store.get(dec.adapters[0].w);
        let b = store.get(dec.adapters[0].b.unwrap());
        let xin = g.value(stages[0]).clone();
        let got = g.value(aligned[0]);
        for i in 0..16 {
            for j in 0..16 {
                for o in 0..8 {
                    let mut acc = b[[o]];
                    for c in 0..4 {
                        acc += xin[[i, j, c]] * w[[c, o]];
                    }
                    assert!((acc - got[[i, j, o]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn adapters_zero_in_zero_out_and_identity() {
        let (mut store, dec) = build(2, 2);
        // Zero features + zero bias -> zero aligned maps.
        let mut g = Graph::new();
        let stages: Vec<Var> = [4usize, 8, 16, 32]
            .iter()
            .enumerate()
            .map(|(i, &c)| g.constant(Arr::zeros(IxDyn(&[16 >> i, 16 >> i, c]))))
            .collect();
        let aligned = dec.channel_adapt(&mut g, &store, &stages).unwrap();
        for a in &aligned {
            assert!(g.value(*a).iter().all(|&v| v == 0.0));
        }
        // Identity-initialized square adapter passes features through. The
        // stage-4 adapter is 32 -> 16, so build an ad-hoc square one instead.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut scope = Scope::new(&mut store, &mut rng, "x", ParamTag::Head);
        let lin = Linear::new(&mut scope, "sq", 8, 8, true);
        let mut eye = Arr::zeros(IxDyn(&[8, 8]));
        for i in 0..8 {
            eye[[i, i]] = 1.0;
        }
        store.set(lin.w, eye);
        let mut g = Graph::new();
        let x0 = randn(&mut rng, &[4, 4, 8]);
        let x = g.constant(x0.clone());
        let y = lin.forward(&mut g, &store, x);
        assert_eq!(g.value(y), &x0);
    }

    #[test]
    fn wrong_stage_count_is_an_error() {
        let (store, dec) = build(2, 4);
        let mut g = Graph::new();
        let x = g.constant(Arr::zeros(IxDyn(&[4, 4, 4])));
        assert!(dec.channel_adapt(&mut g, &store, &[x]).is_err());
    }

    #[test]
    fn decode_shape_and_class_channels() {
        // Stage maps from a 64x64 input: logits at 16x16 with N+1 channels.
        let (store, dec) = build(1, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::new();
        let stages = stage_maps(&mut g, &mut rng, 16);
        let logits = dec.forward(&mut g, &store, &stages, Mode::Eval).unwrap();
        assert_eq!(g.shape(logits), &[16, 16, 2]);
    }

    #[test]
    fn decode_is_the_composition_of_its_steps() {
        let (store, dec) = build(2, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::new();
        let stages = stage_maps(&mut g, &mut rng, 16);
        let logits = dec.forward(&mut g, &store, &stages, Mode::Eval).unwrap();

        // Step-by-step composition with the same layers.
        let aligned = dec.channel_adapt(&mut g, &store, &stages).unwrap();
        let mut x = aligned[3];
        for step in 0..3 {
            let up = dec.ups[step].forward(&mut g, &store, x);
            let cat = g.concat(2, &[up, aligned[2 - step]]);
            x = dec.refines[step].forward(&mut g, &store, cat, Mode::Eval);
        }
        let manual = dec.classifier.forward(&mut g, &store, x);
        assert_eq!(g.value(logits), g.value(manual));
    }

    #[test]
    fn mismatched_skip_resolution_is_an_error() {
        let (store, dec) = build(2, 9);
        let mut g = Graph::new();
        let bad: Vec<Var> = [4usize, 8, 16, 32]
            .iter()
            .map(|&c| g.constant(Arr::zeros(IxDyn(&[8, 8, c]))))
            .collect();
        let aligned = dec.channel_adapt(&mut g, &store, &bad).unwrap();
        assert!(dec.decode(&mut g, &store, &aligned, Mode::Eval).is_err());
    }

    #[test]
    fn resize_logits_identity_constant_and_hand_oracle() {
        // Identity when the target equals the source.
        let mut g = Graph::new();
        let x0 = randn(&mut ChaCha8Rng::seed_from_u64(10), &[5, 4, 3]);
        let x = g.constant(x0.clone());
        let y = resize_logits(&mut g, x, 5, 4);
        assert_eq!(g.value(y), &x0);

        // Constant map stays constant.
        let mut g = Graph::new();
        let x = g.constant(Arr::from_elem(IxDyn(&[2, 2, 2]), 0.7));
        let y = resize_logits(&mut g, x, 6, 5);
        assert!(g.value(y).iter().all(|&v| (v - 0.7).abs() < 1e-12));

        // 2 -> 4 half-pixel weights: positions map to source coords
        // (-0.25, 0.25, 0.75, 1.25) clamped to [0, 1].
        let mut g = Graph::new();
        let x0 = Arr::from_shape_vec(IxDyn(&[2, 1, 1]), vec![1.0, 3.0]).unwrap();
        let x = g.constant(x0);
        let y = resize_logits(&mut g, x, 4, 1);
        let yv = g.value(y);
        let expect = [1.0, 0.75 * 1.0 + 0.25 * 3.0, 0.25 * 1.0 + 0.75 * 3.0, 3.0];
        for (i, &e) in expect.iter().enumerate() {
            assert!((yv[[i, 0, 0]] - e).abs() < 1e-12, "tap {i}");
        }
    }

    #[test]
    fn resize_argmax_is_class_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = randn(&mut rng, &[3, 3, 4]);
        let perm = [2usize, 0, 3, 1];
        let mut xp = x0.clone();
        for i in 0..3 {
            for j in 0..3 {
                for (dst, &src) in perm.iter().enumerate() {
                    xp[[i, j, dst]] = x0[[i, j, src]];
                }
            }
        }
        let mut g = Graph::new();
        let a = g.constant(x0);
        let b = g.constant(xp);
        let ya = resize_logits(&mut g, a, 7, 5);
        let yb = resize_logits(&mut g, b, 7, 5);
        let pa = argmax_classes(g.value(ya));
        let pb = argmax_classes(g.value(yb));
        for i in 0..7 {
            for j in 0..5 {
                assert_eq!(perm[pb[[i, j]]], pa[[i, j]]);
            }
        }
    }

    #[test]
    fn decoder_gradient_check_tiny() {
        let (mut store, dec) = build(1, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let maps: Vec<Arr> = (0..4)
            .map(|i| randn(&mut rng, &[8 >> i, 8 >> i, [4, 8, 16, 32][i]]))
            .collect();
        let w0 = randn(&mut rng, &[8, 8, 2]);
        // BN parameters only receive gradients through batch statistics, so
        // the check runs in training mode; dropout is zero, keeping the loss
        // deterministic.
        let rng_cell = std::cell::RefCell::new(ChaCha8Rng::seed_from_u64(99));
        let run = |store: &ParamStore| -> f64 {
            let mut g = Graph::new();
            let stages: Vec<Var> = maps.iter().map(|m| g.constant(m.clone())).collect();
            let logits = dec
                .forward(&mut g, store, &stages, Mode::Train { rng: &rng_cell })
                .unwrap();
            let w = g.constant(w0.clone());
            let p = g.mul(logits, w);
            let loss = g.mean_all(p);
            g.scalar_value(loss)
        };
        let mut g = Graph::new();
        let stages: Vec<Var> = maps.iter().map(|m| g.constant(m.clone())).collect();
        let logits = dec
            .forward(&mut g, &store, &stages, Mode::Train { rng: &rng_cell })
            .unwrap();
        let w = g.constant(w0.clone());
        let p = g.mul(logits, w);
        let loss = g.mean_all(p);
        let grads = g.backward(loss);
        let analytic: HashMap<_, _> = grads
            .params()
            .into_iter()
            .map(|(id, a)| (id, a.clone()))
            .collect();
        let pick: Vec<_> = [
            "dec.adapt4.weight",
            "dec.up1.proj.weight",
            "dec.refine2.conv_a.weight",
            "dec.refine3.bn_b.weight",
            "dec.classifier.weight",
        ]
        .iter()
        .map(|n| store.id_by_name(n).unwrap())
        .collect();
        let worst = check_param_grads(&mut store, &pick, run, &analytic, 1e-5, 10);
        assert!(worst < 1e-4, "decoder grad rel err {worst}");
    }

    #[test]
    fn decoder_param_count_depends_only_on_dims_and_classes() {
        let count = |seed: u64| {
            let (store, _) = build(3, seed);
            store.num_params()
        };
        assert_eq!(count(1), count(2));
    }
}
