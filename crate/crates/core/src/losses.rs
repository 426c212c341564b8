//! Class-weighted cross-entropy + Dice composite loss and median-frequency
//! class weighting.

use ndarray::{Array2, ArrayD, IxDyn};

use crate::autodiff::{Graph, Var};
use crate::error::{BcafError, Result};

/// Loss configuration; `class_weights` has N+1 entries (background first).
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub ce_weight: f64,
    pub dice_weight: f64,
    pub dice_eps: f64,
    pub weight_eps: f64,
    pub class_weights: Vec<f64>,
}

impl LossConfig {
    pub fn new(class_weights: Vec<f64>) -> Self {
        LossConfig {
            ce_weight: 0.5,
            dice_weight: 1.5,
            dice_eps: 1.0,
            weight_eps: 1e-6,
            class_weights,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_weights.iter().any(|&w| w <= 0.0) {
            return Err(BcafError::Config("class weights must be positive".into()));
        }
        if self.dice_eps <= 0.0 {
            return Err(BcafError::Config("dice epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// w_n = median{f_k | f_k > 0} / (f_n + eps_w). Zero-frequency classes get a
/// large finite weight.
pub fn median_freq_weights(freqs: &[f64], eps_w: f64) -> Result<Vec<f64>> {
    let mut pos: Vec<f64> = freqs.iter().cloned().filter(|&f| f > 0.0).collect();
    if pos.is_empty() {
        return Err(BcafError::Metric("all class frequencies are zero".into()));
    }
    pos.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if pos.len() % 2 == 1 {
        pos[pos.len() / 2]
    } else {
        0.5 * (pos[pos.len() / 2 - 1] + pos[pos.len() / 2])
    };
    Ok(freqs.iter().map(|&f| median / (f + eps_w)).collect())
}

fn flatten_logits(g: &mut Graph, logits: Var) -> (Var, usize, usize) {
    let sh = g.shape(logits).to_vec();
    let c = *sh.last().unwrap();
    let p: usize = sh[..sh.len() - 1].iter().product();
    (g.reshape(logits, &[p, c]), p, c)
}

fn check_labels(labels: &Array2<usize>, p: usize, c: usize) -> Result<Vec<usize>> {
    if labels.len() != p {
        return Err(BcafError::Shape(format!(
            "labels have {} pixels, logits {p}",
            labels.len()
        )));
    }
    let flat: Vec<usize> = labels.iter().cloned().collect();
    if let Some(&bad) = flat.iter().find(|&&y| y >= c) {
        return Err(BcafError::Data(format!(
            "label index {bad} out of range for {c} classes"
        )));
    }
    Ok(flat)
}

/// Mean over pixels of w_y * (-log softmax(z)_y).
pub fn weighted_ce(g: &mut Graph, logits: Var, labels: &Array2<usize>, weights: &[f64]) -> Result<Var> {
    let (flat, p, c) = flatten_logits(g, logits);
    if weights.len() != c {
        return Err(BcafError::Config(format!(
            "{} weights for {c} classes",
            weights.len()
        )));
    }
    let y = check_labels(labels, p, c)?;
    Ok(g.cross_entropy(flat, &y, weights))
}

/// Dice loss on probabilities, averaged uniformly over all N+1 classes:
/// 1 - mean_n (2 sum(p Y) + eps) / (sum p + sum Y + eps).
pub fn dice_loss(g: &mut Graph, probs: Var, labels: &Array2<usize>, eps: f64) -> Result<Var> {
    let (flat, p, c) = flatten_logits(g, probs);
    let y = check_labels(labels, p, c)?;
    let mut onehot = ArrayD::zeros(IxDyn(&[p, c]));
    let mut ysum = vec![0.0f64; c];
    for (i, &cls) in y.iter().enumerate() {
        onehot[[i, cls]] = 1.0;
        ysum[cls] += 1.0;
    }
    let oh = g.constant(onehot);
    let inter = g.mul(flat, oh);
    let inter = g.sum_axes(inter, &[0], false); // [C]
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, eps);
    let psum = g.sum_axes(flat, &[0], false);
    let ysum = g.constant(ArrayD::from_shape_vec(IxDyn(&[c]), ysum).unwrap());
    let den = g.add(psum, ysum);
    let den = g.add_scalar(den, eps);
    let dice = g.div(num, den);
    let mean = g.mean_all(dice);
    let neg = g.scale(mean, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Composite objective: ce_weight * CE + dice_weight * Dice, with Dice
/// computed on softmax probabilities.
pub fn total_loss(g: &mut Graph, logits: Var, labels: &Array2<usize>, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let ce = weighted_ce(g, logits, labels, &cfg.class_weights)?;
    let (flat, _, _) = flatten_logits(g, logits);
    let probs = g.softmax_last(flat);
    let dice = dice_loss(g, probs, labels, cfg.dice_eps)?;
    let a = g.scale(ce, cfg.ce_weight);
    let b = g.scale(dice, cfg.dice_weight);
    Ok(g.add(a, b))
}
