//! Per-note → per-patient aggregation and the discrimination/calibration
//! metrics (AUROC, average precision, Brier score).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub patient_id: String,
    pub note_id: String,
    pub probability: f64,
    pub label: u8,
}

/// Per-note predictions. Every probability lies in [0, 1] and all records of
/// one patient share a label.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionSet {
    records: Vec<PredictionRecord>,
}

impl PredictionSet {
    pub fn new(records: Vec<PredictionRecord>) -> Result<Self> {
        let mut labels: BTreeMap<&str, u8> = BTreeMap::new();
        for r in &records {
            if !(0.0..=1.0).contains(&r.probability) {
                return Err(Error::config(
                    "probability",
                    format!("{} for note {} is outside [0, 1]", r.probability, r.note_id),
                ));
            }
            if r.label > 1 {
                return Err(Error::config("label", format!("{} is not 0 or 1", r.label)));
            }
            if let Some(prev) = labels.insert(&r.patient_id, r.label) {
                if prev != r.label {
                    return Err(Error::config(
                        "label",
                        format!("patient {} has mixed labels", r.patient_id),
                    ));
                }
            }
        }
        Ok(PredictionSet { records })
    }

    pub fn records(&self) -> &[PredictionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.probability).collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }
}

/// How per-note probabilities combine into one patient probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AggregationRule {
    Min,
    Mean,
    Max,
    /// `(P_max + P_mean · n/c) / (1 + n/c)`, n = number of notes.
    ScaledMaxMean { c: f64 },
}

impl Default for AggregationRule {
    fn default() -> Self {
        AggregationRule::Min
    }
}

impl AggregationRule {
    pub const ALL_DEFAULT: [AggregationRule; 4] = [
        AggregationRule::Min,
        AggregationRule::Mean,
        AggregationRule::Max,
        AggregationRule::ScaledMaxMean { c: 2.0 },
    ];

    pub fn apply(&self, probs: &[f64]) -> Result<f64> {
        if probs.is_empty() {
            return Err(Error::EmptyPatient("<anonymous>".into()));
        }
        let n = probs.len() as f64;
        let min = probs.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = probs.iter().sum::<f64>() / n;
        Ok(match *self {
            AggregationRule::Min => min,
            AggregationRule::Max => max,
            // Rounding can push a mean of identical values a hair outside
            // the [min, max] envelope.
            AggregationRule::Mean => mean.clamp(min, max),
            AggregationRule::ScaledMaxMean { c } => {
                // Same value as (max + mean·w)/(1 + w), exact when max == mean.
                let w = n / c;
                (max - (max - mean.clamp(min, max)) * (w / (1.0 + w))).clamp(0.0, 1.0)
            }
        })
    }
}

impl fmt::Display for AggregationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AggregationRule::Min => write!(f, "min"),
            AggregationRule::Mean => write!(f, "mean"),
            AggregationRule::Max => write!(f, "max"),
            AggregationRule::ScaledMaxMean { c } => write!(f, "scaled_max_mean:{c}"),
        }
    }
}

impl FromStr for AggregationRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min" => Ok(AggregationRule::Min),
            "mean" => Ok(AggregationRule::Mean),
            "max" => Ok(AggregationRule::Max),
            "scaled_max_mean" => Ok(AggregationRule::ScaledMaxMean { c: 2.0 }),
            other => {
                let c = other
                    .strip_prefix("scaled_max_mean:")
                    .and_then(|c| c.parse::<f64>().ok())
                    .filter(|c| *c > 0.0 && c.is_finite())
                    .ok_or_else(|| {
                        Error::config(
                            "rule",
                            format!("{other:?}; expected min, mean, max or scaled_max_mean[:c]"),
                        )
                    })?;
                Ok(AggregationRule::ScaledMaxMean { c })
            }
        }
    }
}

impl TryFrom<String> for AggregationRule {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AggregationRule> for String {
    fn from(r: AggregationRule) -> String {
        r.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientPrediction {
    pub patient_id: String,
    pub probability: f64,
    pub label: u8,
    pub n_notes: usize,
}

/// One record per patient, ordered by patient id.
pub fn aggregate(set: &PredictionSet, rule: AggregationRule) -> Result<Vec<PatientPrediction>> {
    let mut groups: BTreeMap<&str, (u8, Vec<f64>)> = BTreeMap::new();
    for r in set.records() {
        groups
            .entry(&r.patient_id)
            .or_insert_with(|| (r.label, Vec::new()))
            .1
            .push(r.probability);
    }
    groups
        .into_iter()
        .map(|(id, (label, probs))| {
            let probability = rule.apply(&probs).map_err(|_| Error::EmptyPatient(id.into()))?;
            Ok(PatientPrediction {
                patient_id: id.to_string(),
                probability,
                label,
                n_notes: probs.len(),
            })
        })
        .collect()
}

fn check_lengths(metric: &'static str, scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::UndefinedMetric {
            metric,
            reason: format!("{} scores but {} labels", scores.len(), labels.len()),
        });
    }
    Ok(())
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. O(n log n), exact in integer arithmetic.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths("auroc", scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as u128;
    let n_neg = labels.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric {
            metric: "auroc",
            reason: "needs both classes".into(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the Mann–Whitney U statistic.
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_u += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// Average precision: mean over positives of the precision at each
/// positive's rank. Scores sort descending; ties keep input order.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths("auprc", scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric {
            metric: "auprc",
            reason: "needs at least one positive".into(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / n_pos as f64)
}

/// Mean squared difference between probability and label.
pub fn brier(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths("brier", scores, labels)?;
    if scores.is_empty() {
        return Err(Error::UndefinedMetric {
            metric: "brier",
            reason: "empty input".into(),
        });
    }
    Ok(scores
        .iter()
        .zip(labels)
        .map(|(s, &l)| (s - f64::from(l)).powi(2))
        .sum::<f64>()
        / scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub auroc: f64,
    pub auprc: f64,
    pub brier: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl LevelMetrics {
    pub fn compute(scores: &[f64], labels: &[u8]) -> Result<Self> {
        let n_pos = labels.iter().filter(|&&l| l == 1).count();
        Ok(LevelMetrics {
            auroc: auroc(scores, labels)?,
            auprc: auprc(scores, labels)?,
            brier: brier(scores, labels)?,
            n_pos,
            n_neg: labels.len() - n_pos,
        })
    }

    /// Brier score on the ×100 scale used in the result tables.
    pub fn brier_x100(&self) -> f64 {
        self.brier * 100.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rule: AggregationRule,
    pub note: LevelMetrics,
    pub patient: LevelMetrics,
}

pub fn evaluate(set: &PredictionSet, rule: AggregationRule) -> Result<MetricReport> {
    let note = LevelMetrics::compute(&set.scores(), &set.labels())?;
    let patients = aggregate(set, rule)?;
    let scores: Vec<f64> = patients.iter().map(|p| p.probability).collect();
    let labels: Vec<u8> = patients.iter().map(|p| p.label).collect();
    let patient = LevelMetrics::compute(&scores, &labels)?;
    Ok(MetricReport {
        rule,
        note,
        patient,
    })
}

/// Expected metrics of an uninformative ranker: AUROC ½, AUPRC equal to
/// prevalence. There is no Brier value for a ranker without probabilities.
pub fn analytic_random(n_pos: usize, n_neg: usize) -> (f64, f64) {
    (0.5, n_pos as f64 / (n_pos + n_neg) as f64)
}

/// Metrics of uniformly random scores on a set with the given class counts.
pub fn random_scores_metrics<R: Rng>(n_pos: usize, n_neg: usize, rng: &mut R) -> Result<LevelMetrics> {
    let labels: Vec<u8> = std::iter::repeat_n(1u8, n_pos)
        .chain(std::iter::repeat_n(0u8, n_neg))
        .collect();
    let scores: Vec<f64> = (0..labels.len()).map(|_| rng.random::<f64>()).collect();
    LevelMetrics::compute(&scores, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rec(p: &str, n: &str, prob: f64, label: u8) -> PredictionRecord {
        PredictionRecord {
            patient_id: p.into(),
            note_id: n.into(),
            probability: prob,
            label,
        }
    }

    #[test]
    fn aggregation_examples() {
        let probs = [0.2, 0.7, 0.9];
        assert_eq!(AggregationRule::Min.apply(&probs).unwrap(), 0.2);
        assert_eq!(AggregationRule::Max.apply(&probs).unwrap(), 0.9);
        let smm = AggregationRule::ScaledMaxMean { c: 2.0 }.apply(&probs).unwrap();
        assert!((smm - 0.72).abs() < 1e-12, "{smm}");
        for rule in AggregationRule::ALL_DEFAULT {
            assert_eq!(rule.apply(&[0.42]).unwrap(), 0.42);
        }
        assert!(AggregationRule::Min.apply(&[]).is_err());
    }

    #[test]
    fn rule_parsing() {
        assert_eq!("min".parse::<AggregationRule>().unwrap(), AggregationRule::Min);
        assert_eq!(
            "scaled_max_mean:3".parse::<AggregationRule>().unwrap(),
            AggregationRule::ScaledMaxMean { c: 3.0 }
        );
        assert!("median".parse::<AggregationRule>().is_err());
        assert!("scaled_max_mean:-1".parse::<AggregationRule>().is_err());
        for r in AggregationRule::ALL_DEFAULT {
            assert_eq!(r.to_string().parse::<AggregationRule>().unwrap(), r);
        }
    }

    #[test]
    fn prediction_set_invariants() {
        assert!(PredictionSet::new(vec![rec("a", "1", 1.2, 1)]).is_err());
        assert!(PredictionSet::new(vec![rec("a", "1", 0.2, 1), rec("a", "2", 0.3, 0)]).is_err());
        assert!(PredictionSet::new(vec![rec("a", "1", 0.2, 2)]).is_err());
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert!(matches!(
            auroc(&[0.1, 0.2], &[1, 1]),
            Err(Error::UndefinedMetric { metric: "auroc", .. })
        ));
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        let ap = auprc(&[0.9, 0.8, 0.7], &[1, 0, 1]).unwrap();
        assert_eq!(ap, (1.0 + 2.0 / 3.0) / 2.0);
        assert!(auprc(&[0.5], &[0]).is_err());
        // Ties keep input order: a negative listed first ranks above.
        assert_eq!(auprc(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn brier_examples() {
        assert_eq!(brier(&[1.0, 0.0], &[1, 0]).unwrap(), 0.0);
        assert_eq!(brier(&[0.5; 4], &[1, 0, 0, 1]).unwrap(), 0.25);
        // 0.8 and 0.3 are not representable; the result is the correctly
        // rounded value for the stored inputs, one ulp from 0.065.
        let b = brier(&[0.8, 0.3], &[1, 0]).unwrap();
        assert!((b - 0.065).abs() <= 2.0 * f64::EPSILON * 0.065, "{b}");
        assert!(brier(&[], &[]).is_err());
    }

    #[test]
    fn single_note_patients_make_levels_equal() {
        let set = PredictionSet::new(vec![
            rec("a", "a1", 0.9, 1),
            rec("b", "b1", 0.2, 0),
            rec("c", "c1", 0.6, 1),
            rec("d", "d1", 0.7, 0),
        ])
        .unwrap();
        let r = evaluate(&set, AggregationRule::Min).unwrap();
        assert_eq!(r.note, r.patient);
    }

    #[test]
    fn random_scores_have_auroc_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let m = random_scores_metrics(5000, 5000, &mut rng).unwrap();
        assert!((m.auroc - 0.5).abs() < 0.02, "{}", m.auroc);
    }

    fn brute_auroc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    if si > sj {
                        num += 1.0;
                    } else if si == sj {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    proptest! {
        #[test]
        fn fast_auroc_matches_pair_counting(
            data in prop::collection::vec((0u8..20, 0u8..2), 2..60)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| f64::from(*s) / 20.0).collect();
            let labels: Vec<u8> = data.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let fast = auroc(&scores, &labels).unwrap();
            prop_assert!((fast - brute_auroc(&scores, &labels)).abs() < 1e-12);
        }

        #[test]
        fn flipping_labels_and_scores_keeps_auroc(
            data in prop::collection::vec((0.0f64..1.0, 0u8..2), 2..60)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s).collect();
            let labels: Vec<u8> = data.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let flipped_s: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
            let flipped_l: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
            let a = auroc(&scores, &labels).unwrap();
            let b = auroc(&flipped_s, &flipped_l).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn min_mean_max_are_ordered(probs in prop::collection::vec(0.0f64..=1.0, 1..40)) {
            let min = AggregationRule::Min.apply(&probs).unwrap();
            let mean = AggregationRule::Mean.apply(&probs).unwrap();
            let max = AggregationRule::Max.apply(&probs).unwrap();
            prop_assert!(min <= mean && mean <= max);
            let smm = AggregationRule::ScaledMaxMean { c: 2.0 }.apply(&probs).unwrap();
            prop_assert!((0.0..=1.0).contains(&smm));
        }
    }
}
