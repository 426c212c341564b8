//! Differentiable operations on [`Graph`].
//!
//! Every op allocates a standard-layout output array and registers a backward
//! closure capturing `Rc` clones of whatever values it needs. Shape
//! violations are programming errors and panic; user-facing validation
//! happens at module boundaries.

use std::rc::Rc;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayViewD, Axis, Ix2, Ix3, IxDyn, Slice};

use super::{Arr, Graph, Var};

/// NumPy-style broadcast shape of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

/// Sum `g` down to `target` shape (inverse of broadcasting).
pub fn reduce_to(g: &Arr, target: &[usize]) -> Arr {
    let mut out = g.to_owned();
    while out.ndim() > target.len() {
        out = out.sum_axis(Axis(0));
    }
    for ax in 0..target.len() {
        if out.shape()[ax] != target[ax] {
            debug_assert_eq!(target[ax], 1);
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

fn contiguous_vec(v: &Arr) -> Vec<f64> {
    match v.as_slice() {
        Some(s) => s.to_vec(),
        None => v.iter().cloned().collect(),
    }
}

fn reshaped(v: &Arr, shape: &[usize]) -> Arr {
    let data = contiguous_vec(v);
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("reshape element count mismatch")
}

fn bview<'a>(v: &'a Arr, shape: &[usize]) -> ArrayViewD<'a, f64> {
    v.broadcast(IxDyn(shape)).expect("broadcast failure")
}

fn mm_raw(a: &Arr, b: &Arr, ta: bool, tb: bool) -> Arr {
    let a2 = a.view().into_dimensionality::<Ix2>().expect("mm lhs not 2-d");
    let b2 = b.view().into_dimensionality::<Ix2>().expect("mm rhs not 2-d");
    let a2 = if ta { a2.reversed_axes() } else { a2 };
    let b2 = if tb { b2.reversed_axes() } else { b2 };
    let (m, k) = (a2.nrows(), a2.ncols());
    let (k2, n) = (b2.nrows(), b2.ncols());
    assert_eq!(k, k2, "mm inner dims {k} vs {k2}");
    let mut out = Array2::<f64>::zeros((m, n));
    general_mat_mul(1.0, &a2, &b2, 0.0, &mut out);
    out.into_dyn()
}

fn bmm_raw(a: &Arr, b: &Arr, ta: bool, tb: bool) -> Arr {
    let a3 = a.view().into_dimensionality::<Ix3>().expect("bmm lhs not 3-d");
    let b3 = b.view().into_dimensionality::<Ix3>().expect("bmm rhs not 3-d");
    assert_eq!(a3.shape()[0], b3.shape()[0], "bmm batch mismatch");
    let bsz = a3.shape()[0];
    let (m, k) = if ta {
        (a3.shape()[2], a3.shape()[1])
    } else {
        (a3.shape()[1], a3.shape()[2])
    };
    let (k2, n) = if tb {
        (b3.shape()[2], b3.shape()[1])
    } else {
        (b3.shape()[1], b3.shape()[2])
    };
    assert_eq!(k, k2, "bmm inner dims {k} vs {k2}");
    let mut out = ndarray::Array3::<f64>::zeros((bsz, m, n));
    for i in 0..bsz {
        let av = a3.index_axis(Axis(0), i);
        let bv = b3.index_axis(Axis(0), i);
        let av = if ta { av.reversed_axes() } else { av };
        let bv = if tb { bv.reversed_axes() } else { bv };
        let mut ov = out.index_axis_mut(Axis(0), i);
        general_mat_mul(1.0, &av, &bv, 0.0, &mut ov);
    }
    out.into_dyn()
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.rc_value(a), self.rc_value(b));
        let shp = broadcast_shape(va.shape(), vb.shape());
        let out = &bview(&va, &shp) + &bview(&vb, &shp);
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                vec![Some(reduce_to(g, &sa)), Some(reduce_to(g, &sb))]
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.rc_value(a), self.rc_value(b));
        let shp = broadcast_shape(va.shape(), vb.shape());
        let out = &bview(&va, &shp) - &bview(&vb, &shp);
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let ng = g.mapv(|v| -v);
                vec![Some(reduce_to(g, &sa)), Some(reduce_to(&ng, &sb))]
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.rc_value(a), self.rc_value(b));
        let shp = broadcast_shape(va.shape(), vb.shape());
        let out = &bview(&va, &shp) * &bview(&vb, &shp);
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let shp = g.shape().to_vec();
                let ga = g * &bview(&vb, &shp);
                let gb = g * &bview(&va, &shp);
                vec![Some(reduce_to(&ga, &sa)), Some(reduce_to(&gb, &sb))]
            })),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.rc_value(a), self.rc_value(b));
        let shp = broadcast_shape(va.shape(), vb.shape());
        let out = &bview(&va, &shp) / &bview(&vb, &shp);
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let shp = g.shape().to_vec();
                let bb = bview(&vb, &shp);
                let ga = g / &bb;
                let gb = -(g * &bview(&va, &shp)) / (&bb * &bb);
                vec![Some(reduce_to(&ga, &sa)), Some(reduce_to(&gb, &sb))]
            })),
        )
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.rc_value(a);
        let out = va.mapv(|x| x * c);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| vec![Some(g.mapv(|x| x * c))])),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let va = self.rc_value(a);
        let out = va.mapv(|x| x + c);
        self.push(out, vec![a], Some(Box::new(move |g| vec![Some(g.clone())])))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.rc_value(a);
        let out = va.mapv(|x| x.max(0.0));
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut dx = g.clone();
                dx.zip_mut_with(&va, |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                });
                vec![Some(dx)]
            })),
        )
    }

    /// GELU, tanh approximation (self-consistent analytic derivative).
    pub fn gelu(&mut self, a: Var) -> Var {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        let va = self.rc_value(a);
        let out = va.mapv(|x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()));
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut dx = g.clone();
                dx.zip_mut_with(&va, |d, &x| {
                    let t = (C * (x + A * x * x * x)).tanh();
                    let du = C * (1.0 + 3.0 * A * x * x);
                    *d *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                });
                vec![Some(dx)]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let va = self.rc_value(a);
        let out = va.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let y = Rc::new(out.clone());
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut dx = g.clone();
                dx.zip_mut_with(&y, |d, &yy| *d *= yy * (1.0 - yy));
                vec![Some(dx)]
            })),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let va = self.rc_value(a);
        let out = reshaped(&va, shape);
        let orig = va.shape().to_vec();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| vec![Some(reshaped(g, &orig))])),
        )
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let va = self.rc_value(a);
        let out = va
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let mut inv = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inv[ax] = i;
        }
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![Some(
                    g.view()
                        .permuted_axes(IxDyn(&inv))
                        .as_standard_layout()
                        .into_owned(),
                )]
            })),
        )
    }

    /// Contiguous sub-range per axis: `ranges[i] = (start, end)`.
    pub fn slice_ranges(&mut self, a: Var, ranges: &[(usize, usize)]) -> Var {
        let va = self.rc_value(a);
        assert_eq!(ranges.len(), va.ndim());
        let out = va
            .slice_each_axis(|ad| {
                let (s, e) = ranges[ad.axis.index()];
                Slice::from(s..e)
            })
            .as_standard_layout()
            .into_owned();
        let orig = va.shape().to_vec();
        let ranges = ranges.to_vec();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut dx = Arr::zeros(IxDyn(&orig));
                dx.slice_each_axis_mut(|ad| {
                    let (s, e) = ranges[ad.axis.index()];
                    Slice::from(s..e)
                })
                .assign(g);
                vec![Some(dx)]
            })),
        )
    }

    /// Zero padding: `pads[i] = (before, after)` per axis.
    pub fn pad_zero(&mut self, a: Var, pads: &[(usize, usize)]) -> Var {
        let va = self.rc_value(a);
        assert_eq!(pads.len(), va.ndim());
        let shape: Vec<usize> = va
            .shape()
            .iter()
            .zip(pads)
            .map(|(&d, &(b, e))| d + b + e)
            .collect();
        let mut out = Arr::zeros(IxDyn(&shape));
        let pads_v = pads.to_vec();
        out.slice_each_axis_mut(|ad| {
            let i = ad.axis.index();
            Slice::from(pads_v[i].0..pads_v[i].0 + va.shape()[i])
        })
        .assign(&va);
        let orig = va.shape().to_vec();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let dx = g
                    .slice_each_axis(|ad| {
                        let i = ad.axis.index();
                        Slice::from(pads_v[i].0..pads_v[i].0 + orig[i])
                    })
                    .as_standard_layout()
                    .into_owned();
                vec![Some(dx)]
            })),
        )
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let values: Vec<Rc<Arr>> = parts.iter().map(|&p| self.rc_value(p)).collect();
        let views: Vec<ArrayViewD<f64>> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views)
            .expect("concat shape mismatch")
            .as_standard_layout()
            .into_owned();
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |g| {
                let mut offs = 0usize;
                sizes
                    .iter()
                    .map(|&sz| {
                        let part = g
                            .slice_axis(Axis(axis), Slice::from(offs..offs + sz))
                            .as_standard_layout()
                            .into_owned();
                        offs += sz;
                        Some(part)
                    })
                    .collect()
            })),
        )
    }

    /// Cyclic shift of the first two axes by (s0, s1): out[i,j] = x[i-s0, j-s1]
    /// with wraparound.
    pub fn roll2(&mut self, a: Var, s0: isize, s1: isize) -> Var {
        fn roll(x: &Arr, s0: isize, s1: isize) -> Arr {
            let h = x.shape()[0];
            let w = x.shape()[1];
            let inner: usize = x.shape()[2..].iter().product();
            let xf = x.as_slice().unwrap();
            let mut out = Arr::zeros(x.raw_dim());
            {
                let of = out.as_slice_mut().unwrap();
                for i in 0..h {
                    let si = (i as isize - s0).rem_euclid(h as isize) as usize;
                    for j in 0..w {
                        let sj = (j as isize - s1).rem_euclid(w as isize) as usize;
                        let dst = (i * w + j) * inner;
                        let src = (si * w + sj) * inner;
                        of[dst..dst + inner].copy_from_slice(&xf[src..src + inner]);
                    }
                }
            }
            out
        }
        let va = self.rc_value(a);
        let out = roll(&va, s0, s1);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| vec![Some(roll(g, -s0, -s1))])),
        )
    }

    /// Select rows along axis 0: out[k] = a[idx[k]].
    pub fn index_select0(&mut self, a: Var, idx: &[usize]) -> Var {
        let va = self.rc_value(a);
        let mut shape = va.shape().to_vec();
        shape[0] = idx.len();
        let mut out = Arr::zeros(IxDyn(&shape));
        for (k, &i) in idx.iter().enumerate() {
            out.index_axis_mut(Axis(0), k).assign(&va.index_axis(Axis(0), i));
        }
        let orig = va.shape().to_vec();
        let idx = idx.to_vec();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut dx = Arr::zeros(IxDyn(&orig));
                for (k, &i) in idx.iter().enumerate() {
                    let mut row = dx.index_axis_mut(Axis(0), i);
                    row += &g.index_axis(Axis(0), k);
                }
                vec![Some(dx)]
            })),
        )
    }

    pub fn sum_axes(&mut self, a: Var, axes: &[usize], keepdims: bool) -> Var {
        let va = self.rc_value(a);
        let mut out = va.as_ref().clone();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        for &ax in sorted.iter().rev() {
            out = out.sum_axis(Axis(ax));
        }
        if keepdims {
            for &ax in sorted.iter() {
                out = out.insert_axis(Axis(ax));
            }
        }
        let orig = va.shape().to_vec();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut gv = g.clone();
                if gv.ndim() != orig.len() {
                    for &ax in sorted.iter() {
                        gv = gv.insert_axis(Axis(ax));
                    }
                }
                let dx = gv.broadcast(IxDyn(&orig)).unwrap().to_owned();
                vec![Some(dx)]
            })),
        )
    }

    pub fn mean_axes(&mut self, a: Var, axes: &[usize], keepdims: bool) -> Var {
        let n: usize = axes.iter().map(|&ax| self.shape(a)[ax]).product();
        let s = self.sum_axes(a, axes, keepdims);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum of all elements, producing a 0-d scalar node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let va = self.rc_value(a);
        let total = va.sum();
        let orig = va.shape().to_vec();
        let out = ArrayD::from_elem(IxDyn(&[]), total);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let gs = *g.iter().next().unwrap();
                vec![Some(ArrayD::from_elem(IxDyn(&orig), gs))]
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// 2-d matrix product with optional transposes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.mm(a, b, false, false)
    }

    pub fn mm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (va, vb) = (self.rc_value(a), self.rc_value(b));
        let out = mm_raw(&va, &vb, ta, tb);
        if self.count_flops {
            let m = out.shape()[0] as u64;
            let n = out.shape()[1] as u64;
            let k = if ta { va.shape()[0] } else { va.shape()[1] } as u64;
            self.flops += 2 * m * n * k;
        }
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let ga = if ta {
                    mm_raw(&vb, g, tb, true)
                } else {
                    mm_raw(g, &vb, false, !tb)
                };
                let gb = if tb {
                    mm_raw(g, &va, true, ta)
                } else {
                    mm_raw(&va, g, !ta, false)
                };
                vec![Some(ga), Some(gb)]
            })),
        )
    }

    /// Batched matrix product over leading batch axis with optional
    /// transposes of the trailing two axes.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (va, vb) = (self.rc_value(a), self.rc_value(b));
        let out = bmm_raw(&va, &vb, ta, tb);
        if self.count_flops {
            let bs = out.shape()[0] as u64;
            let m = out.shape()[1] as u64;
            let n = out.shape()[2] as u64;
            let k = if ta { va.shape()[1] } else { va.shape()[2] } as u64;
            self.flops += 2 * bs * m * n * k;
        }
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let ga = if ta {
                    bmm_raw(&vb, g, tb, true)
                } else {
                    bmm_raw(g, &vb, false, !tb)
                };
                let gb = if tb {
                    bmm_raw(g, &va, true, ta)
                } else {
                    bmm_raw(&va, g, !ta, false)
                };
                vec![Some(ga), Some(gb)]
            })),
        )
    }

    /// Softmax over the last axis. Rows that are entirely -inf are not
    /// supported; masked attention always leaves at least one finite score.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let va = self.rc_value(a);
        let d = *va.shape().last().expect("softmax on 0-d");
        let mut out = va.as_ref().clone();
        {
            let flat = out.as_slice_mut().unwrap();
            for row in flat.chunks_exact_mut(d) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - m).exp();
                    sum += *x;
                }
                for x in row.iter_mut() {
                    *x /= sum;
                }
            }
        }
        let y = Rc::new(out.clone());
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut dx = g.clone();
                let yf = y.as_slice().unwrap();
                let df = dx.as_slice_mut().unwrap();
                for (grow, yrow) in df.chunks_exact_mut(d).zip(yf.chunks_exact(d)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(&gg, &yy)| gg * yy).sum();
                    for (gg, &yy) in grow.iter_mut().zip(yrow) {
                        *gg = yy * (*gg - dot);
                    }
                }
                vec![Some(dx)]
            })),
        )
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let vx = self.rc_value(x);
        let vg = self.rc_value(gamma);
        let vb = self.rc_value(beta);
        let d = *vx.shape().last().expect("layer_norm on 0-d");
        assert_eq!(vg.len(), d);
        assert_eq!(vb.len(), d);
        let rows = vx.len() / d;
        let mut out = vx.as_ref().clone();
        let mut xhat = Arr::zeros(vx.raw_dim());
        let mut inv_std = vec![0.0f64; rows];
        {
            let of = out.as_slice_mut().unwrap();
            let xh = xhat.as_slice_mut().unwrap();
            let gs = vg.as_slice().unwrap();
            let bs = vb.as_slice().unwrap();
            for r in 0..rows {
                let row = &mut of[r * d..(r + 1) * d];
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for (c, v) in row.iter_mut().enumerate() {
                    let xn = (*v - mu) * is;
                    xh[r * d + c] = xn;
                    *v = gs[c] * xn + bs[c];
                }
            }
        }
        let xhat = Rc::new(xhat);
        let gshape = vg.shape().to_vec();
        let bshape = vb.shape().to_vec();
        self.push(
            out,
            vec![x, gamma, beta],
            Some(Box::new(move |g| {
                let gf = g.as_slice().unwrap();
                let xh = xhat.as_slice().unwrap();
                let gs = vg.as_slice().unwrap();
                let mut dx = Arr::zeros(g.raw_dim());
                let mut dgamma = vec![0.0f64; d];
                let mut dbeta = vec![0.0f64; d];
                let dxf = dx.as_slice_mut().unwrap();
                for r in 0..rows {
                    let is = inv_std[r];
                    let grow = &gf[r * d..(r + 1) * d];
                    let xrow = &xh[r * d..(r + 1) * d];
                    let mut mean_gg = 0.0;
                    let mut mean_ggx = 0.0;
                    for c in 0..d {
                        let gg = grow[c] * gs[c];
                        mean_gg += gg;
                        mean_ggx += gg * xrow[c];
                        dgamma[c] += grow[c] * xrow[c];
                        dbeta[c] += grow[c];
                    }
                    mean_gg /= d as f64;
                    mean_ggx /= d as f64;
                    for c in 0..d {
                        let gg = grow[c] * gs[c];
                        dxf[r * d + c] = (gg - mean_gg - xrow[c] * mean_ggx) * is;
                    }
                }
                vec![
                    Some(dx),
                    Some(ArrayD::from_shape_vec(IxDyn(&gshape), dgamma).unwrap()),
                    Some(ArrayD::from_shape_vec(IxDyn(&bshape), dbeta).unwrap()),
                ]
            })),
        )
    }

    /// Batch normalization in training mode over all leading axes, per
    /// channel (last axis), using biased batch variance.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let vx = self.rc_value(x);
        let vg = self.rc_value(gamma);
        let vb = self.rc_value(beta);
        let c = *vx.shape().last().expect("batch_norm on 0-d");
        assert_eq!(vg.len(), c);
        assert_eq!(vb.len(), c);
        let p = vx.len() / c;
        let xf = vx.as_slice().unwrap();
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for row in xf.chunks_exact(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= p as f64;
        }
        for row in xf.chunks_exact(c) {
            for ((vv, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *vv += (v - m) * (v - m);
            }
        }
        for v in var.iter_mut() {
            *v /= p as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = Arr::zeros(vx.raw_dim());
        let mut xhat = Arr::zeros(vx.raw_dim());
        {
            let of = out.as_slice_mut().unwrap();
            let xh = xhat.as_slice_mut().unwrap();
            let gs = vg.as_slice().unwrap();
            let bs = vb.as_slice().unwrap();
            for (r, row) in xf.chunks_exact(c).enumerate() {
                for (k, &v) in row.iter().enumerate() {
                    let xn = (v - mean[k]) * inv_std[k];
                    xh[r * c + k] = xn;
                    of[r * c + k] = gs[k] * xn + bs[k];
                }
            }
        }
        let xhat = Rc::new(xhat);
        let gshape = vg.shape().to_vec();
        self.push(
            out,
            vec![x, gamma, beta],
            Some(Box::new(move |g| {
                let gf = g.as_slice().unwrap();
                let xh = xhat.as_slice().unwrap();
                let gs = vg.as_slice().unwrap();
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for row_i in 0..p {
                    for k in 0..c {
                        let gg = gf[row_i * c + k];
                        sum_g[k] += gg;
                        sum_gx[k] += gg * xh[row_i * c + k];
                    }
                }
                let mut dx = Arr::zeros(g.raw_dim());
                let dxf = dx.as_slice_mut().unwrap();
                for row_i in 0..p {
                    for k in 0..c {
                        let gg = gf[row_i * c + k];
                        dxf[row_i * c + k] = gs[k]
                            * inv_std[k]
                            * (gg - sum_g[k] / p as f64 - xh[row_i * c + k] * sum_gx[k] / p as f64);
                    }
                }
                vec![
                    Some(dx),
                    Some(ArrayD::from_shape_vec(IxDyn(&gshape), sum_gx.clone()).unwrap()),
                    Some(ArrayD::from_shape_vec(IxDyn(&gshape), sum_g.clone()).unwrap()),
                ]
            })),
        )
    }

    /// im2col: extract k x k patches with the given stride and symmetric zero
    /// padding from an [H, W, C] map, yielding [OH*OW, k*k*C].
    pub fn unfold(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let vx = self.rc_value(x);
        let (h, w, c) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "unfold: kernel larger than padded input");
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let xf = vx.as_slice().unwrap();
        let mut out = Arr::zeros(IxDyn(&[oh * ow, k * k * c]));
        {
            let of = out.as_slice_mut().unwrap();
            let row_len = k * k * c;
            for oy in 0..oh {
                for ox in 0..ow {
                    let ro = (oy * ow + ox) * row_len;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = (iy as usize * w + ix as usize) * c;
                            let dst = ro + (ky * k + kx) * c;
                            of[dst..dst + c].copy_from_slice(&xf[src..src + c]);
                        }
                    }
                }
            }
        }
        let in_shape = vx.shape().to_vec();
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g| {
                let gf = g.as_slice().unwrap();
                let mut dx = Arr::zeros(IxDyn(&in_shape));
                let dxf = dx.as_slice_mut().unwrap();
                let row_len = k * k * c;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let ro = (oy * ow + ox) * row_len;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let dst = (iy as usize * w + ix as usize) * c;
                                let src = ro + (ky * k + kx) * c;
                                for ch in 0..c {
                                    dxf[dst + ch] += gf[src + ch];
                                }
                            }
                        }
                    }
                }
                vec![Some(dx)]
            })),
        )
    }

    /// Bilinear resize of an [H, W, C] map with half-pixel centers
    /// (align_corners = false semantics), clamped at borders.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        fn taps(osz: usize, isz: usize) -> Vec<(usize, usize, f64)> {
            (0..osz)
                .map(|o| {
                    let src = (o as f64 + 0.5) * isz as f64 / osz as f64 - 0.5;
                    let src = src.clamp(0.0, (isz - 1) as f64);
                    let i0 = src.floor() as usize;
                    let i1 = (i0 + 1).min(isz - 1);
                    let w1 = src - i0 as f64;
                    (i0, i1, w1)
                })
                .collect()
        }
        let vx = self.rc_value(x);
        let (h, w, c) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let ty = taps(oh, h);
        let tx = taps(ow, w);
        let xf = vx.as_slice().unwrap();
        let mut out = Arr::zeros(IxDyn(&[oh, ow, c]));
        {
            let of = out.as_slice_mut().unwrap();
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let dst = (oy * ow + ox) * c;
                    for ch in 0..c {
                        let v00 = xf[(y0 * w + x0) * c + ch];
                        let v01 = xf[(y0 * w + x1) * c + ch];
                        let v10 = xf[(y1 * w + x0) * c + ch];
                        let v11 = xf[(y1 * w + x1) * c + ch];
                        of[dst + ch] = v00 * (1.0 - wy) * (1.0 - wx)
                            + v01 * (1.0 - wy) * wx
                            + v10 * wy * (1.0 - wx)
                            + v11 * wy * wx;
                    }
                }
            }
        }
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g| {
                let gf = g.as_slice().unwrap();
                let mut dx = Arr::zeros(IxDyn(&[h, w, c]));
                let dxf = dx.as_slice_mut().unwrap();
                for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                        let src = (oy * ow + ox) * c;
                        for ch in 0..c {
                            let gg = gf[src + ch];
                            dxf[(y0 * w + x0) * c + ch] += gg * (1.0 - wy) * (1.0 - wx);
                            dxf[(y0 * w + x1) * c + ch] += gg * (1.0 - wy) * wx;
                            dxf[(y1 * w + x0) * c + ch] += gg * wy * (1.0 - wx);
                            dxf[(y1 * w + x1) * c + ch] += gg * wy * wx;
                        }
                    }
                }
                vec![Some(dx)]
            })),
        )
    }

    /// Nearest-neighbor upsample of [H, W, C] by integer factor r.
    pub fn nearest_upsample(&mut self, x: Var, r: usize) -> Var {
        let vx = self.rc_value(x);
        let (h, w, c) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        if r == 1 {
            return self.add_scalar(x, 0.0);
        }
        let xf = vx.as_slice().unwrap();
        let mut out = Arr::zeros(IxDyn(&[h * r, w * r, c]));
        {
            let of = out.as_slice_mut().unwrap();
            for oy in 0..h * r {
                for ox in 0..w * r {
                    let src = ((oy / r) * w + ox / r) * c;
                    let dst = (oy * w * r + ox) * c;
                    of[dst..dst + c].copy_from_slice(&xf[src..src + c]);
                }
            }
        }
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g| {
                let gf = g.as_slice().unwrap();
                let mut dx = Arr::zeros(IxDyn(&[h, w, c]));
                let dxf = dx.as_slice_mut().unwrap();
                for oy in 0..h * r {
                    for ox in 0..w * r {
                        let dst = ((oy / r) * w + ox / r) * c;
                        let src = (oy * w * r + ox) * c;
                        for ch in 0..c {
                            dxf[dst + ch] += gf[src + ch];
                        }
                    }
                }
                vec![Some(dx)]
            })),
        )
    }

    /// Weighted cross-entropy over logits [P, C] with integer labels,
    /// mean over the P pixels: -(1/P) sum_p w[y_p] * log softmax(z_p)[y_p].
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[f64]) -> Var {
        let vz = self.rc_value(logits);
        let c = vz.shape()[1];
        let p = vz.shape()[0];
        assert_eq!(labels.len(), p);
        assert_eq!(weights.len(), c);
        let zf = vz.as_slice().unwrap();
        let mut probs = Arr::zeros(vz.raw_dim());
        let mut total = 0.0f64;
        {
            let pf = probs.as_slice_mut().unwrap();
            for (r, row) in zf.chunks_exact(c).enumerate() {
                let y = labels[r];
                assert!(y < c, "label {y} out of range for {c} classes");
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (k, &z) in row.iter().enumerate() {
                    let e = (z - m).exp();
                    pf[r * c + k] = e;
                    sum += e;
                }
                for k in 0..c {
                    pf[r * c + k] /= sum;
                }
                let log_p = row[y] - m - sum.ln();
                total -= weights[y] * log_p;
            }
        }
        total /= p as f64;
        let probs = Rc::new(probs);
        let labels = labels.to_vec();
        let weights = weights.to_vec();
        let out = ArrayD::from_elem(IxDyn(&[]), total);
        self.push(
            out,
            vec![logits],
            Some(Box::new(move |g| {
                let gs = *g.iter().next().unwrap();
                let mut dz = probs.as_ref().clone();
                let df = dz.as_slice_mut().unwrap();
                for r in 0..p {
                    let y = labels[r];
                    let wy = weights[y];
                    for k in 0..c {
                        let delta = if k == y { 1.0 } else { 0.0 };
                        df[r * c + k] = gs * wy * (df[r * c + k] - delta) / p as f64;
                    }
                }
                vec![Some(dz)]
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_grad, max_rel_err};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
    }

    /// Check d(sum(w * op(x)))/dx against central differences.
    fn check_unary(shape: &[usize], op: impl Fn(&mut Graph, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = randn(&mut rng, shape);
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let y = op(&mut g, x);
        let w0 = randn(&mut rng, g.shape(y));
        let w = g.constant(w0.clone());
        let prod = g.mul(y, w);
        let loss = g.sum_all(prod);
        let grads = g.backward(loss);
        let analytic = grads.of(x).unwrap().clone();

        let numeric = finite_diff_grad(
            |xv| {
                let mut g = Graph::new();
                let x = g.leaf(xv.clone());
                let y = op(&mut g, x);
                let w = g.constant(w0.clone());
                let prod = g.mul(y, w);
                let loss = g.sum_all(prod);
                g.scalar_value(loss)
            },
            &x0,
            1e-5,
        );
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-6, "unary grad mismatch: {err}");
    }

    fn check_binary(sa: &[usize], sb: &[usize], op: impl Fn(&mut Graph, Var, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a0 = randn(&mut rng, sa);
        let b0 = randn(&mut rng, sb).mapv(|v| v + 3.0); // keep denominators away from zero
        let eval = |av: &Arr, bv: &Arr, which: usize| -> (f64, Option<(Arr, Arr)>) {
            let mut g = Graph::new();
            let a = g.leaf(av.clone());
            let b = g.leaf(bv.clone());
            let y = op(&mut g, a, b);
            let seed_w = randn(&mut ChaCha8Rng::seed_from_u64(3), g.shape(y));
            let w = g.constant(seed_w);
            let prod = g.mul(y, w);
            let loss = g.sum_all(prod);
            if which == 0 {
                let grads = g.backward(loss);
                (
                    g.scalar_value(loss),
                    Some((grads.of(a).unwrap().clone(), grads.of(b).unwrap().clone())),
                )
            } else {
                (g.scalar_value(loss), None)
            }
        };
        let (_, an) = eval(&a0, &b0, 0);
        let (ga, gb) = an.unwrap();
        let na = finite_diff_grad(|av| eval(av, &b0, 1).0, &a0, 1e-5);
        let nb = finite_diff_grad(|bv| eval(&a0, bv, 1).0, &b0, 1e-5);
        assert!(max_rel_err(&ga, &na) < 1e-6, "lhs grad");
        assert!(max_rel_err(&gb, &nb) < 1e-6, "rhs grad");
    }

    #[test]
    fn elementwise_grads() {
        check_binary(&[3, 4], &[3, 4], |g, a, b| g.add(a, b));
        check_binary(&[3, 4], &[4], |g, a, b| g.add(a, b));
        check_binary(&[2, 3, 4], &[3, 1], |g, a, b| g.mul(a, b));
        check_binary(&[3, 4], &[3, 4], |g, a, b| g.sub(a, b));
        check_binary(&[3, 4], &[1, 4], |g, a, b| g.div(a, b));
    }

    #[test]
    fn activation_grads() {
        check_unary(&[4, 5], |g, x| g.gelu(x));
        check_unary(&[4, 5], |g, x| g.sigmoid(x));
        check_unary(&[4, 5], |g, x| {
            let y = g.add_scalar(x, 0.3);
            g.relu(y)
        });
    }

    #[test]
    fn shape_op_grads() {
        check_unary(&[2, 3, 4], |g, x| g.reshape(x, &[6, 4]));
        check_unary(&[2, 3, 4], |g, x| g.permute(x, &[2, 0, 1]));
        check_unary(&[4, 5], |g, x| g.slice_ranges(x, &[(1, 3), (0, 4)]));
        check_unary(&[3, 3], |g, x| g.pad_zero(x, &[(1, 0), (2, 1)]));
        check_unary(&[4, 4, 2], |g, x| g.roll2(x, 1, -2));
        check_unary(&[5, 3], |g, x| g.index_select0(x, &[4, 0, 0, 2]));
        check_unary(&[2, 6], |g, x| {
            let a = g.slice_ranges(x, &[(0, 2), (0, 3)]);
            let b = g.slice_ranges(x, &[(0, 2), (3, 6)]);
            g.concat(1, &[a, b])
        });
    }

    #[test]
    fn reduce_grads() {
        check_unary(&[3, 4, 2], |g, x| g.sum_axes(x, &[1], false));
        check_unary(&[3, 4, 2], |g, x| g.sum_axes(x, &[0, 2], true));
        check_unary(&[3, 4], |g, x| g.mean_axes(x, &[0], false));
    }

    #[test]
    fn matmul_grads() {
        check_binary(&[3, 4], &[4, 5], |g, a, b| g.mm(a, b, false, false));
        check_binary(&[4, 3], &[4, 5], |g, a, b| g.mm(a, b, true, false));
        check_binary(&[3, 4], &[5, 4], |g, a, b| g.mm(a, b, false, true));
        check_binary(&[2, 3, 4], &[2, 4, 5], |g, a, b| g.bmm(a, b, false, false));
        check_binary(&[2, 3, 4], &[2, 5, 4], |g, a, b| g.bmm(a, b, false, true));
        check_binary(&[2, 4, 3], &[2, 4, 5], |g, a, b| g.bmm(a, b, true, false));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = randn(&mut rng, &[6, 7]);
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let y = g.softmax_last(x);
        for row in g.value(y).as_slice().unwrap().chunks_exact(7) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        check_unary(&[6, 7], |g, x| g.softmax_last(x));
    }

    #[test]
    fn norm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = randn(&mut rng, &[5, 8]);
        let g0 = randn(&mut rng, &[8]).mapv(|v| v + 2.0);
        let b0 = randn(&mut rng, &[8]);
        let w0 = randn(&mut rng, &[5, 8]);
        let eval = |xv: &Arr, gv: &Arr, bv: &Arr, want_grads: bool| {
            let mut g = Graph::new();
            let x = g.leaf(xv.clone());
            let ga = g.leaf(gv.clone());
            let be = g.leaf(bv.clone());
            let y = g.layer_norm(x, ga, be, 1e-5);
            let w = g.constant(w0.clone());
            let p = g.mul(y, w);
            let loss = g.sum_all(p);
            if want_grads {
                let gr = g.backward(loss);
                (
                    g.scalar_value(loss),
                    Some((
                        gr.of(x).unwrap().clone(),
                        gr.of(ga).unwrap().clone(),
                        gr.of(be).unwrap().clone(),
                    )),
                )
            } else {
                (g.scalar_value(loss), None)
            }
        };
        let (_, grads) = eval(&x0, &g0, &b0, true);
        let (dx, dg, db) = grads.unwrap();
        let nx = finite_diff_grad(|v| eval(v, &g0, &b0, false).0, &x0, 1e-5);
        let ng = finite_diff_grad(|v| eval(&x0, v, &b0, false).0, &g0, 1e-5);
        let nb = finite_diff_grad(|v| eval(&x0, &g0, v, false).0, &b0, 1e-5);
        assert!(max_rel_err(&dx, &nx) < 1e-6);
        assert!(max_rel_err(&dg, &ng) < 1e-6);
        assert!(max_rel_err(&db, &nb) < 1e-6);
    }

    #[test]
    fn batch_norm_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = randn(&mut rng, &[4, 3, 2]);
        let g0 = randn(&mut rng, &[2]).mapv(|v| v + 2.0);
        let b0 = randn(&mut rng, &[2]);
        let w0 = randn(&mut rng, &[4, 3, 2]);
        let eval = |xv: &Arr, want: bool| {
            let mut g = Graph::new();
            let x = g.leaf(xv.clone());
            let ga = g.leaf(g0.clone());
            let be = g.leaf(b0.clone());
            let y = g.batch_norm_train(x, ga, be, 1e-5);
            let w = g.constant(w0.clone());
            let p = g.mul(y, w);
            let loss = g.sum_all(p);
            if want {
                let gr = g.backward(loss);
                (g.scalar_value(loss), Some(gr.of(x).unwrap().clone()))
            } else {
                (g.scalar_value(loss), None)
            }
        };
        let (_, dx) = eval(&x0, true);
        let nx = finite_diff_grad(|v| eval(v, false).0, &x0, 1e-5);
        assert!(max_rel_err(&dx.unwrap(), &nx) < 1e-6);
    }

    #[test]
    fn unfold_conv_matches_direct_and_grad() {
        // 3x3 conv with padding 1 against a naive quadruple loop.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = randn(&mut rng, &[5, 4, 3]);
        let k0 = randn(&mut rng, &[9 * 3, 2]);
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let cols = g.unfold(x, 3, 1, 1);
        let kk = g.constant(k0.clone());
        let y = g.matmul(cols, kk);
        let yv = g.value(y).clone();
        for oy in 0..5usize {
            for ox in 0..4usize {
                for oc in 0..2usize {
                    let mut acc = 0.0;
                    for ky in 0..3usize {
                        for kx in 0..3usize {
                            let iy = oy as isize + ky as isize - 1;
                            let ix = ox as isize + kx as isize - 1;
                            if iy < 0 || iy >= 5 || ix < 0 || ix >= 4 {
                                continue;
                            }
                            for c in 0..3usize {
                                acc += x0[[iy as usize, ix as usize, c]]
                                    * k0[[(ky * 3 + kx) * 3 + c, oc]];
                            }
                        }
                    }
                    let got = yv[[oy * 4 + ox, oc]];
                    assert!((acc - got).abs() < 1e-12, "conv mismatch at {oy},{ox},{oc}");
                }
            }
        }
        check_unary(&[5, 4, 3], |g, x| g.unfold(x, 3, 1, 1));
        check_unary(&[4, 4, 2], |g, x| g.unfold(x, 2, 2, 0));
    }

    #[test]
    fn resize_and_upsample_grads() {
        check_unary(&[3, 5, 2], |g, x| g.resize_bilinear(x, 7, 4));
        check_unary(&[2, 3, 4], |g, x| g.nearest_upsample(x, 3));
        // Constant map stays constant under bilinear resize.
        let mut g = Graph::new();
        let x = g.constant(ArrayD::from_elem(IxDyn(&[2, 2, 1]), 3.25));
        let y = g.resize_bilinear(x, 5, 7);
        assert!(g.value(y).iter().all(|&v| (v - 3.25).abs() < 1e-15));
    }

    #[test]
    fn cross_entropy_closed_forms() {
        // Uniform prediction over 2 classes with unit weights -> ln 2.
        let mut g = Graph::new();
        let z = g.constant(Arr::zeros(IxDyn(&[6, 2])));
        let l = g.cross_entropy(z, &[0, 1, 0, 1, 1, 0], &[1.0, 1.0]);
        assert!((g.scalar_value(l) - std::f64::consts::LN_2).abs() < 1e-12);

        // Gradient check.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z0 = randn(&mut rng, &[5, 3]);
        let labels = vec![0usize, 2, 1, 2, 0];
        let weights = vec![0.5, 2.0, 1.25];
        let eval = |zv: &Arr, want: bool| {
            let mut g = Graph::new();
            let z = g.leaf(zv.clone());
            let l = g.cross_entropy(z, &labels, &weights);
            if want {
                let gr = g.backward(l);
                (g.scalar_value(l), Some(gr.of(z).unwrap().clone()))
            } else {
                (g.scalar_value(l), None)
            }
        };
        let (_, dz) = eval(&z0, true);
        let nz = finite_diff_grad(|v| eval(v, false).0, &z0, 1e-5);
        assert!(max_rel_err(&dz.unwrap(), &nz) < 1e-6);
    }

    #[test]
    fn flop_counting_matmul() {
        let mut g = Graph::new();
        g.count_flops = true;
        let a = g.constant(Arr::zeros(IxDyn(&[3, 4])));
        let b = g.constant(Arr::zeros(IxDyn(&[4, 5])));
        let _ = g.matmul(a, b);
        assert_eq!(g.flops, 2 * 3 * 4 * 5);
        let a = g.constant(Arr::zeros(IxDyn(&[2, 3, 4])));
        let b = g.constant(Arr::zeros(IxDyn(&[2, 5, 4])));
        let _ = g.bmm(a, b, false, true);
        assert_eq!(g.flops, 2 * 3 * 4 * 5 + 2 * 2 * 3 * 5 * 4);
    }
}
