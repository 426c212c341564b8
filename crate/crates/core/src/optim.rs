//! AdamW with per-group learning rates (head / pretrained backbone / random
//! backbone) and decoupled weight decay that skips normalization and bias
//! parameters.

use ndarray::ArrayD;

use crate::autodiff::{Arr, Gradients, ParamId, ParamStore, ParamTag};
use crate::error::{BcafError, Result};

/// Exhaustive, disjoint partition of the parameters by provenance tag.
#[derive(Debug, Default)]
pub struct ParamGroups {
    pub head: Vec<ParamId>,
    pub pretrained: Vec<ParamId>,
    pub random: Vec<ParamId>,
}

impl ParamGroups {
    pub fn total_params(&self, store: &ParamStore) -> usize {
        self.head
            .iter()
            .chain(&self.pretrained)
            .chain(&self.random)
            .map(|id| store.get(*id).len())
            .sum()
    }
}

/// Partition every parameter by its tag; untagged parameters are an error
/// listing their names.
pub fn build_param_groups(store: &ParamStore) -> Result<ParamGroups> {
    let mut groups = ParamGroups::default();
    let mut untagged = Vec::new();
    for (i, e) in store.entries.iter().enumerate() {
        match e.tag {
            Some(ParamTag::Head) => groups.head.push(ParamId(i)),
            Some(ParamTag::BackbonePretrained) => groups.pretrained.push(ParamId(i)),
            Some(ParamTag::BackboneRandom) => groups.random.push(ParamId(i)),
            None => untagged.push(e.name.clone()),
        }
    }
    if !untagged.is_empty() {
        return Err(BcafError::Config(format!(
            "untagged parameters: {untagged:?}"
        )));
    }
    Ok(groups)
}

/// Gradient accumulator across micro-batches, indexed by parameter.
pub struct GradAccum {
    sums: Vec<Option<Arr>>,
}

impl GradAccum {
    pub fn new(store: &ParamStore) -> Self {
        GradAccum {
            sums: (0..store.entries.len()).map(|_| None).collect(),
        }
    }

    pub fn clear(&mut self) {
        for s in self.sums.iter_mut() {
            *s = None;
        }
    }

    /// Accumulate `scale * grad` for every parameter that received a gradient.
    pub fn add(&mut self, grads: &Gradients, scale: f64) {
        for (id, g) in grads.params() {
            let scaled = g.mapv(|v| v * scale);
            match &mut self.sums[id.0] {
                Some(acc) => *acc += &scaled,
                slot @ None => *slot = Some(scaled),
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Arr> {
        self.sums[id.0].as_ref()
    }

    /// Global L2 norm over all accumulated gradients.
    pub fn global_norm(&self) -> f64 {
        self.sums
            .iter()
            .flatten()
            .map(|g| g.iter().map(|&v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Scale all gradients in place (used for norm clipping).
    pub fn scale_all(&mut self, c: f64) {
        for s in self.sums.iter_mut().flatten() {
            s.mapv_inplace(|v| v * c);
        }
    }
}

/// AdamW with decoupled weight decay. Weight decay applies only to parameters
/// whose `decay` flag is set (matrices and conv kernels; never norms, biases,
/// gates, or positional tables).
pub struct AdamW {
    pub lr_head: f64,
    pub lr_pretrained: f64,
    pub lr_random: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Arr>,
    v: Vec<Arr>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr_head: f64, lr_pretrained: f64, lr_random: f64, weight_decay: f64) -> Self {
        let m = store
            .entries
            .iter()
            .map(|e| ArrayD::zeros(e.value.raw_dim()))
            .collect();
        let v = store
            .entries
            .iter()
            .map(|e| ArrayD::zeros(e.value.raw_dim()))
            .collect();
        AdamW {
            lr_head,
            lr_pretrained,
            lr_random,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    fn group_lr(&self, tag: ParamTag) -> f64 {
        match tag {
            ParamTag::Head => self.lr_head,
            ParamTag::BackbonePretrained => self.lr_pretrained,
            ParamTag::BackboneRandom => self.lr_random,
        }
    }

    /// One optimizer step over accumulated gradients with a schedule
    /// multiplier on every group's learning rate.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradAccum, lr_mult: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..store.entries.len() {
            let Some(g) = grads.get(ParamId(i)) else {
                continue;
            };
            let tag = store.entries[i].tag.expect("optimizer needs tagged params");
            let decay = store.entries[i].decay;
            let lr = self.group_lr(tag) * lr_mult;
            let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(g).for_each(|mm, &gg| {
                *mm = b1 * *mm + (1.0 - b1) * gg;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|vv, &gg| {
                *vv = b2 * *vv + (1.0 - b2) * gg * gg;
            });
            store.update_with(ParamId(i), |p| {
                ndarray::Zip::from(&mut *p).and(&*m).and(&*v).for_each(|pp, &mm, &vv| {
                    let mhat = mm / bc1;
                    let vhat = vv / bc2;
                    let mut delta = lr * mhat / (vhat.sqrt() + eps);
                    if decay {
                        delta += lr * wd * *pp;
                    }
                    *pp -= delta;
                });
            });
        }
    }

    /// Optimizer state as named tensors for checkpointing.
    pub fn state_tensors(&self, store: &ParamStore) -> Vec<(String, Arr)> {
        let mut out = Vec::with_capacity(2 * self.m.len() + 1);
        out.push((
            "optim.t".to_string(),
            ArrayD::from_elem(ndarray::IxDyn(&[1]), self.t as f64),
        ));
        for (i, e) in store.entries.iter().enumerate() {
            out.push((format!("optim.m.{}", e.name), self.m[i].clone()));
            out.push((format!("optim.v.{}", e.name), self.v[i].clone()));
        }
        out
    }

    /// Restore optimizer state saved by [`Self::state_tensors`].
    pub fn load_state(&mut self, store: &ParamStore, tensors: &std::collections::HashMap<String, Arr>) -> Result<()> {
        if let Some(t) = tensors.get("optim.t") {
            self.t = t.iter().next().copied().unwrap_or(0.0) as u64;
        }
        for (i, e) in store.entries.iter().enumerate() {
            if let Some(m) = tensors.get(&format!("optim.m.{}", e.name)) {
                if m.shape() != self.m[i].shape() {
                    return Err(BcafError::Checkpoint(format!(
                        "optimizer state shape mismatch for {}",
                        e.name
                    )));
                }
                self.m[i] = m.clone();
            }
            if let Some(v) = tensors.get(&format!("optim.v.{}", e.name)) {
                self.v[i] = v.clone();
            }
        }
        Ok(())
    }
}
