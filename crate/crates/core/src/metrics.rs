//! IoU/mIoU evaluation over accumulated confusion tallies, and the
//! ground-truth oracle fusion upper bound.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::error::{BcafError, Result};

/// Per-class true-positive / false-positive / false-negative pixel counts,
/// accumulated over an evaluation split. Class 0 is background.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionTally {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub pixels: u64,
}

impl ConfusionTally {
    pub fn new(num_classes: usize) -> Self {
        ConfusionTally {
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
            pixels: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.tp.len()
    }

    /// Accumulate one prediction/label pair on the same grid.
    pub fn update(&mut self, pred: &Array2<usize>, labels: &Array2<usize>) -> Result<()> {
        if pred.dim() != labels.dim() {
            return Err(BcafError::Shape(format!(
                "prediction grid {:?} vs label grid {:?}",
                pred.dim(),
                labels.dim()
            )));
        }
        let c = self.num_classes();
        for (&p, &y) in pred.iter().zip(labels.iter()) {
            if p >= c || y >= c {
                return Err(BcafError::Data(format!(
                    "class index out of range: pred {p}, label {y}, classes {c}"
                )));
            }
            if p == y {
                self.tp[p] += 1;
            } else {
                self.fp[p] += 1;
                self.fn_[y] += 1;
            }
            self.pixels += 1;
        }
        Ok(())
    }

    /// Merge independently accumulated tallies (associative, commutative).
    pub fn merge(&mut self, other: &ConfusionTally) {
        for i in 0..self.num_classes() {
            self.tp[i] += other.tp[i];
            self.fp[i] += other.fp[i];
            self.fn_[i] += other.fn_[i];
        }
        self.pixels += other.pixels;
    }
}

/// Evaluation report: per-class IoU (background excluded), mIoU over defined
/// foreground classes, and pixels counted.
#[derive(Clone, Debug, serde::Serialize)]
pub struct MetricsReport {
    pub per_class_iou: BTreeMap<String, f64>,
    pub miou: f64,
    pub pixels: u64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub undefined_classes: Vec<String>,
}

/// IoU_n = TP_n / (TP_n + FP_n + FN_n) per foreground class; mIoU is their
/// unweighted mean. Classes with a zero denominator are reported as undefined
/// and excluded.
pub fn iou_report(tally: &ConfusionTally, class_names: Option<&[String]>) -> Result<MetricsReport> {
    if tally.pixels == 0 {
        return Err(BcafError::Metric("empty tally".into()));
    }
    let name = |n: usize| -> String {
        match class_names {
            Some(names) if n < names.len() => names[n].clone(),
            _ => format!("class_{n}"),
        }
    };
    let mut per_class = BTreeMap::new();
    let mut undefined = Vec::new();
    let mut sum = 0.0;
    let mut count = 0usize;
    for n in 1..tally.num_classes() {
        let den = tally.tp[n] + tally.fp[n] + tally.fn_[n];
        if den == 0 {
            undefined.push(name(n));
            continue;
        }
        let iou = tally.tp[n] as f64 / den as f64;
        per_class.insert(name(n), iou);
        sum += iou;
        count += 1;
    }
    if count == 0 {
        return Err(BcafError::Metric(
            "no foreground class has a defined IoU".into(),
        ));
    }
    if !undefined.is_empty() {
        eprintln!(
            "warning: classes without ground truth or prediction excluded from mIoU: {undefined:?}"
        );
    }
    Ok(MetricsReport {
        per_class_iou: per_class,
        miou: sum / count as f64,
        pixels: tally.pixels,
        undefined_classes: undefined,
    })
}

/// Per-pixel best-of-modality selection using ground truth: take whichever
/// modality predicts the correct class; if both are wrong (or tie), keep the
/// RGB prediction. Upper-bounds label-free fusion.
pub fn oracle_fusion(
    pred_rgb: &Array2<usize>,
    pred_hsi: &Array2<usize>,
    labels: &Array2<usize>,
    num_classes: usize,
) -> Result<ConfusionTally> {
    if pred_rgb.dim() != labels.dim() || pred_hsi.dim() != labels.dim() {
        return Err(BcafError::Shape(format!(
            "grids differ: rgb {:?}, hsi {:?}, labels {:?}",
            pred_rgb.dim(),
            pred_hsi.dim(),
            labels.dim()
        )));
    }
    let mut tally = ConfusionTally::new(num_classes);
    let choice = Array2::from_shape_fn(labels.dim(), |idx| {
        let (r, h, y) = (pred_rgb[idx], pred_hsi[idx], labels[idx]);
        if r == y {
            r
        } else if h == y {
            h
        } else {
            r
        }
    });
    tally.update(&choice, labels)?;
    Ok(tally)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(vals: &[usize], w: usize) -> Array2<usize> {
        Array2::from_shape_vec((vals.len() / w, w), vals.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_gives_miou_one() {
        let labels = grid(&[0, 1, 1, 2, 2, 0, 1, 2, 0], 3);
        let mut tally = ConfusionTally::new(3);
        tally.update(&labels, &labels).unwrap();
        let rep = iou_report(&tally, None).unwrap();
        assert_eq!(rep.miou, 1.0);
        assert!(rep.per_class_iou.values().all(|&v| v == 1.0));
    }

    #[test]
    fn disjoint_prediction_gives_zero_iou() {
        let labels = grid(&[1, 1, 1, 1], 2);
        let pred = grid(&[2, 2, 2, 2], 2);
        let mut tally = ConfusionTally::new(3);
        tally.update(&pred, &labels).unwrap();
        let rep = iou_report(&tally, None).unwrap();
        assert_eq!(rep.per_class_iou["class_1"], 0.0);
        assert_eq!(rep.per_class_iou["class_2"], 0.0);
        assert_eq!(rep.miou, 0.0);
    }

    #[test]
    fn hand_counted_case_gives_half() {
        // Class 1: TP = 3, FP = 1, FN = 2 -> IoU = 3/6 = 0.5.
        let labels = grid(&[1, 1, 1, 1, 1, 0, 0, 0, 2, 2, 2, 2, 0, 0, 0, 0], 4);
        let pred = grid(&[1, 1, 1, 0, 0, 1, 0, 0, 2, 2, 2, 2, 0, 0, 0, 0], 4);
        let mut tally = ConfusionTally::new(3);
        tally.update(&pred, &labels).unwrap();
        assert_eq!((tally.tp[1], tally.fp[1], tally.fn_[1]), (3, 1, 2));
        let rep = iou_report(&tally, None).unwrap();
        assert_eq!(rep.per_class_iou["class_1"], 0.5);
    }

    #[test]
    fn undefined_classes_are_excluded_with_note() {
        // Class 2 never appears in labels or predictions.
        let labels = grid(&[0, 1, 1, 0], 2);
        let pred = grid(&[0, 1, 0, 0], 2);
        let mut tally = ConfusionTally::new(3);
        tally.update(&pred, &labels).unwrap();
        let rep = iou_report(&tally, None).unwrap();
        assert_eq!(rep.undefined_classes, vec!["class_2".to_string()]);
        assert!(!rep.per_class_iou.contains_key("class_2"));
        assert!((rep.miou - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_tally_is_an_error() {
        let tally = ConfusionTally::new(3);
        assert!(iou_report(&tally, None).is_err());
    }

    #[test]
    fn grid_mismatch_is_an_error() {
        let labels = grid(&[0, 1, 1, 0], 2);
        let pred = grid(&[0, 1], 2);
        let mut tally = ConfusionTally::new(2);
        assert!(tally.update(&pred, &labels).is_err());
    }

    #[test]
    fn merge_is_order_invariant() {
        let labels = grid(&[0, 1, 1, 2], 2);
        let pred = grid(&[0, 1, 2, 2], 2);
        let labels2 = grid(&[2, 2, 1, 0], 2);
        let pred2 = grid(&[2, 1, 1, 0], 2);
        let mut a = ConfusionTally::new(3);
        a.update(&pred, &labels).unwrap();
        a.update(&pred2, &labels2).unwrap();
        let mut b1 = ConfusionTally::new(3);
        b1.update(&pred, &labels).unwrap();
        let mut b2 = ConfusionTally::new(3);
        b2.update(&pred2, &labels2).unwrap();
        let mut ba = b2.clone();
        ba.merge(&b1);
        let mut bb = b1.clone();
        bb.merge(&b2);
        assert_eq!(a, ba);
        assert_eq!(a, bb);
    }

    #[test]
    fn oracle_with_perfect_rgb_is_perfect() {
        let labels = grid(&[0, 1, 2, 1], 2);
        let hsi = grid(&[2, 2, 0, 0], 2);
        let rep = iou_report(&oracle_fusion(&labels, &hsi, &labels, 3).unwrap(), None).unwrap();
        assert_eq!(rep.miou, 1.0);
    }

    #[test]
    fn oracle_falls_back_to_rgb_when_both_wrong() {
        let labels = grid(&[1, 1, 1, 1], 2);
        let rgb = grid(&[0, 2, 0, 2], 2);
        let hsi = grid(&[2, 0, 2, 0], 2);
        let oracle = oracle_fusion(&rgb, &hsi, &labels, 3).unwrap();
        let mut rgb_tally = ConfusionTally::new(3);
        rgb_tally.update(&rgb, &labels).unwrap();
        assert_eq!(oracle, rgb_tally);
    }

    #[test]
    fn oracle_on_complementary_errors_per_pixel_rule() {
        // RGB solves the left column, HSI the right; oracle is exact.
        let labels = grid(&[1, 2, 1, 2, 1, 2, 0, 0, 0], 3);
        let rgb = grid(&[1, 0, 0, 1, 0, 0, 0, 0, 0], 3);
        let hsi = grid(&[0, 2, 1, 0, 2, 2, 0, 0, 0], 3);
        let oracle = oracle_fusion(&rgb, &hsi, &labels, 3).unwrap();
        // Brute-force per-pixel rule.
        let mut expect = ConfusionTally::new(3);
        let mut pick = labels.clone();
        for (idx, y) in labels.indexed_iter() {
            let (r, h) = (rgb[idx], hsi[idx]);
            pick[idx] = if r == *y {
                r
            } else if h == *y {
                h
            } else {
                r
            };
        }
        expect.update(&pick, &labels).unwrap();
        assert_eq!(oracle, expect);
    }

    proptest::proptest! {
        #[test]
        fn oracle_miou_dominates_unimodal(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 4usize;
            let labels = Array2::from_shape_fn((6, 6), |_| rng.random_range(0..n));
            let rgb = Array2::from_shape_fn((6, 6), |_| rng.random_range(0..n));
            let hsi = Array2::from_shape_fn((6, 6), |_| rng.random_range(0..n));
            let score = |pred: &Array2<usize>| -> f64 {
                let mut t = ConfusionTally::new(n);
                t.update(pred, &labels).unwrap();
                iou_report(&t, None).map(|r| r.miou).unwrap_or(0.0)
            };
            let oracle = iou_report(&oracle_fusion(&rgb, &hsi, &labels, n).unwrap(), None)
                .map(|r| r.miou)
                .unwrap_or(0.0);
            proptest::prop_assert!(oracle >= score(&rgb) - 1e-12);
            proptest::prop_assert!(oracle >= score(&hsi) - 1e-12);
        }
    }
}
