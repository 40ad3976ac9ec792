//! Segmentation metrics for sparse ground truth.
//!
//! Unlabeled voxels (code 0 in the ground truth) never count for or
//! against a prediction: TPR and the masked soft-TPR loss only look at
//! labeled voxels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelScheme, LabelVolume};
use crate::par;
use crate::volume::{ensure_compatible, Intent, Volume};

/// Smoothing term of the masked loss.
pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub code: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abbr: Option<String>,
    pub gt_voxels: usize,
    pub tp: usize,
    pub pred_voxels: usize,
    pub tpr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dice: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Counts {
    gt: usize,
    tp: usize,
    pred: usize,
}

fn count_classes(pred: &[f64], gt: &[f64]) -> BTreeMap<u32, Counts> {
    par::ordered_reduce(
        gt.len(),
        BTreeMap::new(),
        |range| {
            let mut m: BTreeMap<u32, Counts> = BTreeMap::new();
            for i in range {
                let (p, g) = (pred[i] as u32, gt[i] as u32);
                if g != 0 {
                    let e = m.entry(g).or_default();
                    e.gt += 1;
                    if p == g {
                        e.tp += 1;
                    }
                }
                if p != 0 {
                    m.entry(p).or_default().pred += 1;
                }
            }
            m
        },
        |mut a, b| {
            for (k, c) in b {
                let e = a.entry(k).or_default();
                e.gt += c.gt;
                e.tp += c.tp;
                e.pred += c.pred;
            }
            a
        },
    )
}

/// TPR (and Dice) for every class present in the ground truth, in code order.
pub fn tpr_per_class(pred: &LabelVolume, gt: &LabelVolume) -> Result<Vec<ClassMetrics>> {
    if pred.scheme != gt.scheme {
        return Err(Error::SchemeMismatch(pred.scheme.clone(), gt.scheme.clone()));
    }
    ensure_compatible(&pred.volume, &gt.volume, "prediction", "ground truth")?;
    let counts = count_classes(pred.volume.data(), gt.volume.data());
    let out: Vec<ClassMetrics> = counts
        .into_iter()
        .filter(|(_, c)| c.gt > 0)
        .map(|(code, c)| ClassMetrics {
            code,
            abbr: None,
            gt_voxels: c.gt,
            tp: c.tp,
            pred_voxels: c.pred,
            tpr: c.tp as f64 / c.gt as f64,
            dice: Some(2.0 * c.tp as f64 / (c.gt + c.pred) as f64),
        })
        .collect();
    if out.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    Ok(out)
}

/// Ground-truth-volume-weighted mean TPR.
pub fn weighted_average(metrics: &[ClassMetrics]) -> Result<f64> {
    let total: usize = metrics.iter().map(|m| m.gt_voxels).sum();
    if total == 0 {
        return Err(Error::Input("no class with ground-truth voxels".into()));
    }
    let num: f64 = metrics.iter().map(|m| m.gt_voxels as f64 * m.tpr).sum();
    Ok(num / total as f64)
}

/// Dice overlap of two binary masks; two empty masks give 1.
pub fn dice(pred_mask: &Volume, gt_mask: &Volume) -> Result<f64> {
    ensure_compatible(pred_mask, gt_mask, "prediction", "ground truth")?;
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred_mask.data().iter().zip(gt_mask.data()) {
        let (p, g) = (p != 0.0, g != 0.0);
        a += p as usize;
        b += g as usize;
        both += (p && g) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// Masked soft-TPR loss on raw channel-major arrays (`classes` channels of
/// `n` voxels each): `1 - mean_c (Σ T P + eps) / (Σ T + eps)`.
///
/// Classes with no labeled voxels contribute `eps / eps = 1`.
pub fn masked_soft_tpr_loss_raw(probs: &[f64], onehot: &[f64], classes: usize, eps: f64) -> Result<f64> {
    if classes == 0 || probs.len() != onehot.len() || probs.len() % classes != 0 {
        return Err(Error::Input(format!(
            "probability ({}) and one-hot ({}) arrays do not split into {classes} channels",
            probs.len(),
            onehot.len()
        )));
    }
    if let Some(p) = probs.iter().find(|&&p| !(-1e-6..=1.0 + 1e-6).contains(&p)) {
        return Err(Error::Input(format!("probability {p} outside [0, 1]")));
    }
    let n = probs.len() / classes;
    let mut total = 0.0;
    for c in 0..classes {
        let (p, t) = (&probs[c * n..(c + 1) * n], &onehot[c * n..(c + 1) * n]);
        let inter = par::ordered_sum(n, |i| t[i] * p[i]);
        let den = par::ordered_sum(n, |i| t[i]);
        total += (inter + eps) / (den + eps);
    }
    Ok(1.0 - total / classes as f64)
}

/// Masked soft-TPR loss of C-channel probability and one-hot volumes.
pub fn masked_soft_tpr_loss(pred_probs: &Volume, gt_onehot: &Volume, eps: f64) -> Result<f64> {
    if pred_probs.channels() != gt_onehot.channels() {
        return Err(Error::Input(format!(
            "{} probability channels vs {} ground-truth channels",
            pred_probs.channels(),
            gt_onehot.channels()
        )));
    }
    ensure_compatible(pred_probs, gt_onehot, "probabilities", "ground truth")?;
    masked_soft_tpr_loss_raw(pred_probs.data(), gt_onehot.data(), pred_probs.channels(), eps)
}

/// One channel per scheme entry (in entry order); unlabeled voxels are
/// zero in every channel. Codes outside the scheme are an error.
pub fn onehot(labels: &LabelVolume, scheme: &LabelScheme) -> Result<Volume> {
    let codes = scheme.codes();
    let index: BTreeMap<u32, usize> = codes.iter().enumerate().map(|(k, &c)| (c, k)).collect();
    let n = labels.volume.n_voxels();
    let mut data = vec![0.0; n * codes.len()];
    for i in 0..n {
        let code = labels.code(i);
        if code == 0 {
            continue;
        }
        let k = *index.get(&code).ok_or_else(|| {
            Error::Validation(format!("label {code} is not in scheme `{}`", scheme.name))
        })?;
        data[k * n + i] = 1.0;
    }
    labels.volume.like_channels(codes.len(), Intent::VectorChannel, data)
}

/// Crisp probabilities (one-hot of a predicted label volume).
pub fn crisp_probs(pred: &LabelVolume, scheme: &LabelScheme) -> Result<Volume> {
    onehot(pred, scheme)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub subject: String,
    pub scheme: String,
    pub classes: Vec<ClassMetrics>,
    pub weighted_average_tpr: f64,
    pub mean_tpr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft_tpr_loss: Option<f64>,
}

/// Per-class metrics plus aggregates for one subject. Class abbreviations
/// come from `scheme`, and codes outside it are rejected.
pub fn evaluate(pred: &LabelVolume, gt: &LabelVolume, scheme: &LabelScheme, subject: &str) -> Result<MetricsReport> {
    for lv in [pred, gt] {
        if let Some(c) = lv.counts().keys().find(|&&c| !scheme.contains(c)) {
            return Err(Error::Validation(format!("label {c} is not in scheme `{}`", scheme.name)));
        }
    }
    let mut classes = tpr_per_class(pred, gt)?;
    for m in &mut classes {
        m.abbr = scheme.entry(m.code).map(|e| e.abbr.clone());
    }
    let weighted_average_tpr = weighted_average(&classes)?;
    let mean_tpr = classes.iter().map(|m| m.tpr).sum::<f64>() / classes.len() as f64;
    Ok(MetricsReport {
        subject: subject.to_string(),
        scheme: scheme.name.clone(),
        classes,
        weighted_average_tpr,
        mean_tpr,
        soft_tpr_loss: None,
    })
}

/// Cross-subject summary under both aggregation orders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub subjects: usize,
    /// Mean over subjects of each subject's volume-weighted TPR.
    pub mean_of_subject_weighted_tpr: f64,
    pub std_of_subject_weighted_tpr: f64,
    /// Counts pooled over subjects, then volume-weighted.
    pub pooled_weighted_tpr: f64,
    /// Per-class TPR from pooled counts.
    pub pooled_classes: Vec<ClassMetrics>,
}

pub fn summarize(reports: &[MetricsReport]) -> Result<CohortSummary> {
    if reports.is_empty() {
        return Err(Error::Input("no subject reports to summarize".into()));
    }
    let avgs: Vec<f64> = reports.iter().map(|r| r.weighted_average_tpr).collect();
    let mean = avgs.iter().sum::<f64>() / avgs.len() as f64;
    let std = if avgs.len() > 1 {
        (avgs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (avgs.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mut pooled: BTreeMap<u32, ClassMetrics> = BTreeMap::new();
    for m in reports.iter().flat_map(|r| &r.classes) {
        let e = pooled.entry(m.code).or_insert_with(|| ClassMetrics {
            code: m.code,
            abbr: m.abbr.clone(),
            gt_voxels: 0,
            tp: 0,
            pred_voxels: 0,
            tpr: 0.0,
            dice: None,
        });
        e.gt_voxels += m.gt_voxels;
        e.tp += m.tp;
        e.pred_voxels += m.pred_voxels;
    }
    let pooled_classes: Vec<ClassMetrics> = pooled
        .into_values()
        .map(|mut m| {
            m.tpr = m.tp as f64 / m.gt_voxels as f64;
            m.dice = Some(2.0 * m.tp as f64 / (m.gt_voxels + m.pred_voxels) as f64);
            m
        })
        .collect();
    Ok(CohortSummary {
        subjects: reports.len(),
        mean_of_subject_weighted_tpr: mean,
        std_of_subject_weighted_tpr: std,
        pooled_weighted_tpr: weighted_average(&pooled_classes)?,
        pooled_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::identity_affine;
    use proptest::prelude::*;

    fn lv(data: Vec<f64>) -> LabelVolume {
        let n = data.len();
        let v = Volume::new([n, 1, 1], 1, [1.0; 3], identity_affine(), Intent::Label, data).unwrap();
        LabelVolume::new(v, "ratnus13").unwrap()
    }

    fn mask(data: Vec<f64>) -> Volume {
        let n = data.len();
        Volume::new([n, 1, 1], 1, [1.0; 3], identity_affine(), Intent::Label, data).unwrap()
    }

    #[test]
    fn tpr_examples() {
        let gt = lv(vec![1.0, 1.0, 2.0, 0.0]);
        for m in tpr_per_class(&gt, &gt).unwrap() {
            assert_eq!(m.tpr, 1.0);
        }
        let gt = lv(vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        let pred = lv(vec![1.0, 1.0, 1.0, 3.0, 1.0, 1.0]);
        let m = tpr_per_class(&pred, &gt).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].tpr, 0.75);
        assert_eq!(m[0].tp, 3);
        assert_eq!(m[0].pred_voxels, 5);
    }

    #[test]
    fn extra_predictions_do_not_lower_tpr() {
        let mut g = vec![0.0; 2000];
        let mut p = vec![4.0; 2000];
        g[10] = 4.0;
        g[11] = 4.0;
        p[5] = 0.0;
        let m = tpr_per_class(&lv(p), &lv(g)).unwrap();
        assert_eq!(m[0].tpr, 1.0);
    }

    #[test]
    fn tpr_errors() {
        assert!(matches!(tpr_per_class(&lv(vec![1.0]), &lv(vec![0.0])), Err(Error::EmptyGroundTruth)));
        let mut other = lv(vec![1.0]);
        other.scheme = "unified7".into();
        assert!(matches!(tpr_per_class(&lv(vec![1.0]), &other), Err(Error::SchemeMismatch(..))));
    }

    #[test]
    fn dice_examples() {
        assert_eq!(dice(&mask(vec![1.0, 0.0, 1.0]), &mask(vec![1.0, 0.0, 1.0])).unwrap(), 1.0);
        assert_eq!(dice(&mask(vec![1.0, 0.0]), &mask(vec![0.0, 1.0])).unwrap(), 0.0);
        let a = mask(vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        let b = mask(vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&mask(vec![0.0; 3]), &mask(vec![0.0; 3])).unwrap(), 1.0);
    }

    fn cm(gt_voxels: usize, tpr: f64) -> ClassMetrics {
        ClassMetrics { code: 1, abbr: None, gt_voxels, tp: 0, pred_voxels: 0, tpr, dice: None }
    }

    #[test]
    fn weighted_average_examples() {
        assert_eq!(weighted_average(&[cm(7, 0.3)]).unwrap(), 0.3);
        assert_eq!(weighted_average(&[cm(10, 1.0), cm(30, 0.5)]).unwrap(), 0.625);
        assert!((weighted_average(&[cm(5, 0.2), cm(5, 0.6)]).unwrap() - 0.4).abs() < 1e-15);
        assert!(weighted_average(&[]).is_err());
    }

    #[test]
    fn loss_hand_case() {
        // 13 classes over 4 voxels; class 1 labeled everywhere, predicted on 3.
        let n = 4;
        let mut t = vec![0.0; 13 * n];
        let mut p = vec![0.0; 13 * n];
        t[..4].iter_mut().for_each(|x| *x = 1.0);
        p[..3].iter_mut().for_each(|x| *x = 1.0);
        let loss = masked_soft_tpr_loss_raw(&p, &t, 13, DEFAULT_EPS).unwrap();
        let expected = 1.0 - ((3.0 + 1e-6) / (4.0 + 1e-6) + 12.0) / 13.0;
        assert!((loss - expected).abs() < 1e-15);
        assert!((loss - 0.019231).abs() < 1e-6);
    }

    #[test]
    fn loss_perfect_and_zero() {
        let t = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        assert!(masked_soft_tpr_loss_raw(&t, &t, 2, DEFAULT_EPS).unwrap().abs() < 1e-15);
        let z = vec![0.0; 6];
        let loss = masked_soft_tpr_loss_raw(&z, &t, 2, DEFAULT_EPS).unwrap();
        let expected = 1.0 - 0.5 * (1e-6 / (1.0 + 1e-6) + 1e-6 / (1.0 + 1e-6));
        assert!((loss - expected).abs() < 1e-15);
    }

    #[test]
    fn loss_rejects_bad_probabilities() {
        assert!(masked_soft_tpr_loss_raw(&[1.1, 0.0], &[1.0, 0.0], 1, DEFAULT_EPS).is_err());
        assert!(masked_soft_tpr_loss_raw(&[0.5, 0.0, 0.1], &[1.0, 0.0], 1, DEFAULT_EPS).is_err());
    }

    #[test]
    fn report_and_summary() {
        let s = LabelScheme::ratnus13();
        let gt = lv(vec![1.0, 1.0, 1.0, 1.0, 13.0, 0.0]);
        let pred = lv(vec![1.0, 1.0, 1.0, 2.0, 13.0, 5.0]);
        let r = evaluate(&pred, &gt, &s, "s1").unwrap();
        assert_eq!(r.classes[0].abbr.as_deref(), Some("AN"));
        assert_eq!(r.classes[1].abbr.as_deref(), Some("CL"));
        assert!((r.weighted_average_tpr - 0.8).abs() < 1e-15);
        let r2 = evaluate(&gt, &gt, &s, "s2").unwrap();
        let sum = summarize(&[r.clone(), r2]).unwrap();
        assert!((sum.mean_of_subject_weighted_tpr - 0.9).abs() < 1e-15);
        assert!((sum.pooled_weighted_tpr - 0.9).abs() < 1e-15);
        let bad = lv(vec![20.0]);
        assert!(evaluate(&bad, &bad, &s, "x").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn crisp_loss_matches_counts(
            gt in proptest::collection::vec(0u32..4, 200),
            pred in proptest::collection::vec(0u32..4, 200),
        ) {
            prop_assume!(gt.iter().any(|&g| g != 0));
            let scheme = crate::labels::load_scheme(
                r#"{"name":"ratnus13","entries":[{"code":1,"abbr":"a","name":"a"},{"code":2,"abbr":"b","name":"b"},{"code":3,"abbr":"c","name":"c"}]}"#,
            ).unwrap();
            let g = lv(gt.iter().map(|&c| c as f64).collect());
            let p = lv(pred.iter().map(|&c| c as f64).collect());
            let loss = masked_soft_tpr_loss(&crisp_probs(&p, &scheme).unwrap(), &onehot(&g, &scheme).unwrap(), DEFAULT_EPS).unwrap();
            let m = tpr_per_class(&p, &g).unwrap();
            let mut acc = 0.0;
            for code in 1..=3u32 {
                acc += match m.iter().find(|x| x.code == code) {
                    Some(x) => (x.tp as f64 + DEFAULT_EPS) / (x.gt_voxels as f64 + DEFAULT_EPS),
                    None => 1.0,
                };
            }
            prop_assert!((loss - (1.0 - acc / 3.0)).abs() < 1e-12);
            let wa = weighted_average(&m).unwrap();
            let lo = m.iter().map(|x| x.tpr).fold(f64::INFINITY, f64::min);
            let hi = m.iter().map(|x| x.tpr).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(wa >= lo - 1e-15 && wa <= hi + 1e-15);
        }

        #[test]
        fn tpr_ignores_unlabeled_voxels(
            gt in proptest::collection::vec(0u32..4, 100),
            pred in proptest::collection::vec(0u32..4, 100),
            noise in proptest::collection::vec(0u32..4, 100),
        ) {
            prop_assume!(gt.iter().any(|&g| g != 0));
            let changed: Vec<f64> = (0..100).map(|i| if gt[i] == 0 { noise[i] } else { pred[i] } as f64).collect();
            let a = tpr_per_class(&lv(pred.iter().map(|&c| c as f64).collect()), &lv(gt.iter().map(|&c| c as f64).collect())).unwrap();
            let b = tpr_per_class(&lv(changed), &lv(gt.iter().map(|&c| c as f64).collect())).unwrap();
            let ta: Vec<f64> = a.iter().map(|m| m.tpr).collect();
            let tb: Vec<f64> = b.iter().map(|m| m.tpr).collect();
            prop_assert_eq!(ta, tb);
        }
    }
}
