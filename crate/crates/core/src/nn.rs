//! Neural-network building blocks on top of the autodiff graph: scoped
//! parameter creation, linear/conv layers, normalization, MLP, dropout and
//! stochastic depth.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Arr, BufferId, Graph, Mode, ParamId, ParamStore, ParamTag, Var};

/// Parameter initializer.
#[derive(Clone, Copy)]
pub enum Init {
    /// Truncated normal with the given std, clipped to +-2 std.
    TruncNormal(f64),
    Zeros,
    Ones,
    Const(f64),
}

pub fn init_array(rng: &mut ChaCha8Rng, shape: &[usize], init: Init) -> Arr {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Const(c) => vec![c; n],
        Init::TruncNormal(std) => (0..n)
            .map(|_| loop {
                // Box-Muller; redraw outside +-2 std.
                let u1: f64 = rng.random::<f64>().max(1e-12);
                let u2: f64 = rng.random();
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect(),
    };
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Hierarchical name scope for parameter registration. Every parameter gets a
/// dotted path name, a provenance tag, and a weight-decay flag.
pub struct Scope<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
    tag: ParamTag,
}

impl<'a> Scope<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, prefix: &str, tag: ParamTag) -> Self {
        Scope {
            store,
            rng,
            prefix: prefix.to_string(),
            tag,
        }
    }

    pub fn sub(&mut self, name: &str) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: self.store,
            rng: self.rng,
            prefix,
            tag: self.tag,
        }
    }

    pub fn with_tag(&mut self, tag: ParamTag) -> Scope<'_> {
        Scope {
            store: self.store,
            rng: self.rng,
            prefix: self.prefix.clone(),
            tag,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init, decay: bool) -> ParamId {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let value = init_array(self.rng, shape, init);
        self.store.add(full, value, Some(self.tag), decay)
    }

    pub fn buffer(&mut self, name: &str, value: Arr) -> BufferId {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.add_buffer(full, value)
    }
}

/// Fully connected layer applied over the last axis.
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(scope: &mut Scope, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let mut s = scope.sub(name);
        let w = s.param("weight", &[in_dim, out_dim], Init::TruncNormal(0.02), true);
        let b = bias.then(|| s.param("bias", &[out_dim], Init::Zeros, false));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let shape = g.shape(x).to_vec();
        let d = *shape.last().unwrap();
        assert_eq!(d, self.in_dim, "linear input dim");
        let t: usize = shape[..shape.len() - 1].iter().product();
        let flat = g.reshape(x, &[t, d]);
        let w = g.param(store, self.w);
        let mut y = g.matmul(flat, w);
        if let Some(b) = self.b {
            let b = g.param(store, b);
            y = g.add(y, b);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        g.reshape(y, &out_shape)
    }
}

/// Layer normalization over the last axis.
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(scope: &mut Scope, name: &str, dim: usize) -> Self {
        let mut s = scope.sub(name);
        LayerNorm {
            gamma: s.param("weight", &[dim], Init::Ones, false),
            beta: s.param("bias", &[dim], Init::Zeros, false),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Two-layer feed-forward block with GELU.
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(scope: &mut Scope, name: &str, dim: usize, hidden: usize) -> Self {
        let mut s = scope.sub(name);
        Mlp {
            fc1: Linear::new(&mut s, "fc1", dim, hidden, true),
            fc2: Linear::new(&mut s, "fc2", hidden, dim, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(g, store, x);
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Batch normalization for [H, W, C] maps; statistics are computed per
/// channel over the spatial dims of the current sample, and running
/// statistics (momentum 0.1) are used in evaluation mode.
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub momentum: f64,
    pub eps: f64,
    pub dim: usize,
}

impl BatchNorm2d {
    pub fn new(scope: &mut Scope, name: &str, dim: usize) -> Self {
        let mut s = scope.sub(name);
        let gamma = s.param("weight", &[dim], Init::Ones, false);
        let beta = s.param("bias", &[dim], Init::Zeros, false);
        let running_mean = s.buffer("running_mean", ArrayD::zeros(IxDyn(&[dim])));
        let running_var = s.buffer("running_var", ArrayD::from_elem(IxDyn(&[dim]), 1.0));
        BatchNorm2d {
            gamma,
            beta,
            running_mean,
            running_var,
            momentum: 0.1,
            eps: 1e-5,
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Var {
        assert_eq!(*g.shape(x).last().unwrap(), self.dim);
        if mode.is_train() {
            // Update running statistics from this sample's batch stats.
            {
                let v = g.value(x);
                let c = self.dim;
                let p = v.len() / c;
                let xf = v.as_slice().unwrap();
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for row in xf.chunks_exact(c) {
                    for (m, &val) in mean.iter_mut().zip(row) {
                        *m += val;
                    }
                }
                for m in mean.iter_mut() {
                    *m /= p as f64;
                }
                for row in xf.chunks_exact(c) {
                    for ((s, &val), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (val - m) * (val - m);
                    }
                }
                for s in var.iter_mut() {
                    *s /= p as f64;
                }
                let mut rm = store.buffer_mut(self.running_mean);
                let mut rv = store.buffer_mut(self.running_var);
                for k in 0..c {
                    rm[k] = (1.0 - self.momentum) * rm[k] + self.momentum * mean[k];
                    rv[k] = (1.0 - self.momentum) * rv[k] + self.momentum * var[k];
                }
            }
            let gamma = g.param(store, self.gamma);
            let beta = g.param(store, self.beta);
            g.batch_norm_train(x, gamma, beta, self.eps)
        } else {
            // Frozen statistics: y = x * k + t with per-channel constants.
            let (kv, tv) = {
                let rm = store.buffer(self.running_mean);
                let rv = store.buffer(self.running_var);
                let gv = store.get(self.gamma);
                let bv = store.get(self.beta);
                let mut kv = vec![0.0f64; self.dim];
                let mut tv = vec![0.0f64; self.dim];
                for i in 0..self.dim {
                    kv[i] = gv.as_slice().unwrap()[i] / (rv[i] + self.eps).sqrt();
                    tv[i] = bv.as_slice().unwrap()[i] - rm[i] * kv[i];
                }
                (kv, tv)
            };
            let k = g.constant(ArrayD::from_shape_vec(IxDyn(&[self.dim]), kv).unwrap());
            let t = g.constant(ArrayD::from_shape_vec(IxDyn(&[self.dim]), tv).unwrap());
            let y = g.mul(x, k);
            g.add(y, t)
        }
    }
}

/// k x k convolution on an [H, W, C] map via im2col.
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Conv2d {
    pub fn new(
        scope: &mut Scope,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let mut s = scope.sub(name);
        // Fan-in scaled truncated normal keeps activations at unit order for
        // wide kernels.
        let std = 0.02f64.min((2.0 / (k * k * in_dim) as f64).sqrt());
        let w = s.param("weight", &[k * k * in_dim, out_dim], Init::TruncNormal(std), true);
        let b = Some(s.param("bias", &[out_dim], Init::Zeros, false));
        Conv2d {
            w,
            b,
            k,
            stride,
            pad,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let (h, w) = (g.shape(x)[0], g.shape(x)[1]);
        assert_eq!(g.shape(x)[2], self.in_dim, "conv input dim");
        let oh = (h + 2 * self.pad - self.k) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.k) / self.stride + 1;
        let cols = g.unfold(x, self.k, self.stride, self.pad);
        let wv = g.param(store, self.w);
        let mut y = g.matmul(cols, wv);
        if let Some(b) = self.b {
            let b = g.param(store, b);
            y = g.add(y, b);
        }
        g.reshape(y, &[oh, ow, self.out_dim])
    }
}

/// Transpose convolution with kernel 2 and stride 2 (exact 2x upsampling):
/// a per-pixel linear map to 2x2 sub-blocks followed by depth-to-space.
pub struct ConvTranspose2x2 {
    pub lin: Linear,
    pub out_dim: usize,
}

impl ConvTranspose2x2 {
    pub fn new(scope: &mut Scope, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let mut s = scope.sub(name);
        ConvTranspose2x2 {
            lin: Linear::new(&mut s, "proj", in_dim, 4 * out_dim, true),
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let (h, w) = (g.shape(x)[0], g.shape(x)[1]);
        let y = self.lin.forward(g, store, x); // [H, W, 4*D]
        let y = g.reshape(y, &[h, w, 2, 2, self.out_dim]);
        let y = g.permute(y, &[0, 2, 1, 3, 4]); // [H, 2, W, 2, D]
        g.reshape(y, &[2 * h, 2 * w, self.out_dim])
    }
}

/// Inverted dropout; identity in evaluation mode.
pub fn dropout(g: &mut Graph, x: Var, p: f64, mode: Mode) -> Var {
    match mode {
        Mode::Train { rng } if p > 0.0 => {
            let shape = g.shape(x).to_vec();
            let n: usize = shape.iter().product();
            let mut r = rng.borrow_mut();
            let mask: Vec<f64> = (0..n)
                .map(|_| {
                    if r.random::<f64>() < p {
                        0.0
                    } else {
                        1.0 / (1.0 - p)
                    }
                })
                .collect();
            drop(r);
            let m = g.constant(ArrayD::from_shape_vec(IxDyn(&shape), mask).unwrap());
            g.mul(x, m)
        }
        _ => x,
    }
}

/// Stochastic-depth decision for one residual branch. Returns `None` when the
/// branch is dropped, otherwise the scale to apply to the branch output.
pub fn drop_path_keep(rate: f64, mode: Mode) -> Option<f64> {
    match mode {
        Mode::Train { rng } if rate > 0.0 => {
            let drop = rng.borrow_mut().random::<f64>() < rate;
            if drop {
                None
            } else {
                Some(1.0 / (1.0 - rate))
            }
        }
        _ => Some(1.0),
    }
}

/// Residual add of a branch under stochastic depth.
pub fn residual(g: &mut Graph, x: Var, branch: Option<Var>, scale: Option<f64>) -> Var {
    match (branch, scale) {
        (Some(b), Some(s)) => {
            let b = if s != 1.0 { g.scale(b, s) } else { b };
            g.add(x, b)
        }
        _ => x,
    }
}
