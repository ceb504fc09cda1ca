//! Cohort construction: inclusion criteria, note validity windows and the
//! balanced, imbalanced and few-shot datasets built from the cohort.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{default_collection_end, default_collection_start, Corpus, Note, Patient};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortConfig {
    pub min_age_years: i32,
    pub pos_window_min_days: i64,
    pub pos_window_max_days: i64,
    pub neg_window_days: i64,
    pub collection_start: NaiveDate,
    pub collection_end: NaiveDate,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            min_age_years: 40,
            pos_window_min_days: 150,
            pos_window_max_days: 730,
            neg_window_days: 730,
            collection_start: default_collection_start(),
            collection_end: default_collection_end(),
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pos_window_min_days <= 0 {
            return Err(Error::config("pos_window_min_days", "must be positive"));
        }
        if self.pos_window_min_days >= self.pos_window_max_days {
            return Err(Error::config(
                "pos_window_max_days",
                "must exceed pos_window_min_days",
            ));
        }
        if self.neg_window_days <= 0 {
            return Err(Error::config("neg_window_days", "must be positive"));
        }
        if self.collection_start > self.collection_end {
            return Err(Error::config("collection_period", "start is after end"));
        }
        Ok(())
    }

    fn in_period(&self, date: NaiveDate) -> bool {
        date >= self.collection_start && date <= self.collection_end
    }
}

/// Age in years: year of the latest dated note minus birth year.
pub fn patient_age(patient: &Patient) -> Result<i32> {
    patient
        .last_note_date()
        .map(|d| d.year() - patient.birth_year)
        .ok_or_else(|| Error::UndefinedAge {
            patient_id: patient.patient_id.clone(),
        })
}

fn last_note_in_period(patient: &Patient, config: &CohortConfig) -> Option<NaiveDate> {
    patient
        .notes
        .iter()
        .filter_map(|n| n.date)
        .filter(|d| config.in_period(*d))
        .max()
}

/// Whether a note counts as a predictor for its patient.
///
/// Positives: 150 ≤ diagnosis − note ≤ 730 days. Negatives: the note lies at
/// most 730 days before the patient's last note in the collection period.
pub fn is_note_valid(note: &Note, patient: &Patient, config: &CohortConfig) -> bool {
    let Some(date) = note.date else {
        return false;
    };
    if !config.in_period(date) {
        return false;
    }
    match patient.diagnosis_date {
        Some(diag) => {
            let gap = (diag - date).num_days();
            gap >= config.pos_window_min_days && gap <= config.pos_window_max_days
        }
        None => match last_note_in_period(patient, config) {
            Some(last) => (last - date).num_days() <= config.neg_window_days,
            None => false,
        },
    }
}

/// Applies the inclusion criteria. Retained patients keep only valid notes.
pub fn build_cohort(corpus: &Corpus, config: &CohortConfig) -> Result<Vec<Patient>> {
    config.validate()?;
    let mut out = Vec::new();
    for p in &corpus.patients {
        match patient_age(p) {
            Ok(age) if age >= config.min_age_years => {}
            _ => continue,
        }
        let notes: Vec<Note> = p
            .notes
            .iter()
            .filter(|n| is_note_valid(n, p, config))
            .cloned()
            .collect();
        if notes.is_empty() {
            continue;
        }
        out.push(Patient {
            notes,
            ..p.clone()
        });
    }
    Ok(out)
}

/// (positives, negatives) in a patient set.
pub fn label_counts(patients: &[Patient]) -> (usize, usize) {
    let pos = patients.iter().filter(|p| p.is_positive()).count();
    (pos, patients.len() - pos)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train: f64,
    pub valid: f64,
    pub test_1: f64,
    pub test_2: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.40,
            valid: 0.15,
            test_1: 0.05,
            test_2: 0.40,
            seed: 0,
        }
    }
}

impl SplitSpec {
    /// Proportions that reproduce the published per-class split counts
    /// (692 / 259 / 85 / 697 of 1,733) exactly.
    pub fn published_counts(seed: u64) -> Self {
        SplitSpec {
            train: 692.0 / 1733.0,
            valid: 259.0 / 1733.0,
            test_1: 85.0 / 1733.0,
            test_2: 697.0 / 1733.0,
            seed,
        }
    }

    pub fn fractions(&self) -> [f64; 4] {
        [self.train, self.valid, self.test_1, self.test_2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.fractions().iter().any(|f| !(*f >= 0.0) || !f.is_finite()) {
            return Err(Error::config("split", "fractions must be non-negative"));
        }
        let sum: f64 = self.fractions().iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config("split", format!("fractions sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Largest-remainder apportionment of `n` items; ties go to the earlier split.
    pub fn counts(&self, n: usize) -> [usize; 4] {
        let fr = self.fractions();
        let exact: Vec<f64> = fr.iter().map(|f| f * n as f64).collect();
        // Guard against values like 692.0000000001 flooring correctly but
        // 691.9999999999 flooring one short.
        let mut counts: Vec<usize> = exact.iter().map(|x| (x + 1e-9).floor() as usize).collect();
        let mut assigned: usize = counts.iter().sum();
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - counts[a] as f64;
            let rb = exact[b] - counts[b] as f64;
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        let mut i = 0;
        while assigned < n {
            counts[order[i % 4]] += 1;
            assigned += 1;
            i += 1;
        }
        [counts[0], counts[1], counts[2], counts[3]]
    }
}

pub const SPLIT_NAMES: [&str; 4] = ["train", "valid", "test_1", "test_2"];

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub train: Vec<Patient>,
    pub valid: Vec<Patient>,
    pub test_1: Vec<Patient>,
    pub test_2: Vec<Patient>,
    pub seed: u64,
}

impl DatasetBundle {
    pub fn splits(&self) -> [(&'static str, &[Patient]); 4] {
        [
            ("train", &self.train),
            ("valid", &self.valid),
            ("test_1", &self.test_1),
            ("test_2", &self.test_2),
        ]
    }

    pub fn split(&self, name: &str) -> Option<&[Patient]> {
        self.splits()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, s)| s)
    }

    pub fn len(&self) -> usize {
        self.splits().iter().map(|(_, s)| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every patient across the four splits.
    pub fn all_patients(&self) -> impl Iterator<Item = &Patient> {
        self.train
            .iter()
            .chain(&self.valid)
            .chain(&self.test_1)
            .chain(&self.test_2)
    }

    /// Writes `<split>.txt` files (one patient id per line) plus a `seed` file.
    pub fn save_manifest(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, split) in self.splits() {
            let mut text = String::new();
            for p in split {
                text.push_str(&p.patient_id);
                text.push('\n');
            }
            let path = dir.join(format!("{name}.txt"));
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join("seed");
        fs::write(&path, format!("{}\n", self.seed)).map_err(|e| Error::io(&path, e))
    }

    /// Resolves a saved manifest against the cohort it was drawn from.
    pub fn load_manifest(dir: impl AsRef<Path>, cohort: &[Patient]) -> Result<Self> {
        let dir = dir.as_ref();
        let by_id: std::collections::HashMap<&str, &Patient> =
            cohort.iter().map(|p| (p.patient_id.as_str(), p)).collect();
        let mut splits: Vec<Vec<Patient>> = Vec::with_capacity(4);
        for name in SPLIT_NAMES {
            let path = dir.join(format!("{name}.txt"));
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let mut split = Vec::new();
            for id in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
                let p = by_id
                    .get(id)
                    .ok_or_else(|| Error::UnknownPatient(id.to_string()))?;
                split.push((*p).clone());
            }
            splits.push(split);
        }
        let path = dir.join("seed");
        let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let seed = raw.trim().parse().map_err(|_| Error::Parse {
            line: 1,
            message: format!("{}: not an integer seed", path.display()),
        })?;
        let test_2 = splits.pop().unwrap();
        let test_1 = splits.pop().unwrap();
        let valid = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        Ok(DatasetBundle {
            train,
            valid,
            test_1,
            test_2,
            seed,
        })
    }
}

fn sort_by_id(patients: &mut [Patient]) {
    patients.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
}

/// The balanced dataset: every positive plus an equal-size random sample of
/// negatives, split per class.
pub fn build_balanced(cohort: &[Patient], spec: &SplitSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut positives: Vec<&Patient> = cohort.iter().filter(|p| p.is_positive()).collect();
    let mut negatives: Vec<&Patient> = cohort.iter().filter(|p| !p.is_positive()).collect();
    if positives.is_empty() {
        return Err(Error::Infeasible("cohort contains no positive patients".into()));
    }
    if negatives.len() < positives.len() {
        return Err(Error::Infeasible(format!(
            "balanced set needs {} negatives but the cohort has {}",
            positives.len(),
            negatives.len()
        )));
    }
    negatives.shuffle(&mut rng);
    negatives.truncate(positives.len());
    positives.shuffle(&mut rng);

    let counts = spec.counts(positives.len());
    let mut splits: [Vec<Patient>; 4] = Default::default();
    for class in [&positives, &negatives] {
        let mut offset = 0;
        for (split, &c) in splits.iter_mut().zip(counts.iter()) {
            split.extend(class[offset..offset + c].iter().map(|p| (*p).clone()));
            offset += c;
        }
    }
    for s in splits.iter_mut() {
        sort_by_id(s);
    }
    let [train, valid, test_1, test_2] = splits;
    Ok(DatasetBundle {
        train,
        valid,
        test_1,
        test_2,
        seed: spec.seed,
    })
}

/// Test set with positive:negative = 1:`ratio`, built on the bundle's test_2.
///
/// Keeps every test_2 patient and adds negatives drawn uniformly from the
/// cohort patients outside the bundle's train, valid and test_2 splits.
/// The candidate order depends only on the bundle seed, so the set for a
/// smaller ratio is contained in the set for a larger one.
pub fn build_imbalanced_test(
    cohort: &[Patient],
    bundle: &DatasetBundle,
    ratio: usize,
) -> Result<Vec<Patient>> {
    if ratio == 0 {
        return Err(Error::config("ratio", "must be a positive integer"));
    }
    let positives: Vec<&Patient> = bundle.test_2.iter().filter(|p| p.is_positive()).collect();
    let base_negatives: Vec<&Patient> =
        bundle.test_2.iter().filter(|p| !p.is_positive()).collect();
    let wanted = positives.len() * ratio;
    let excluded: HashSet<&str> = bundle
        .train
        .iter()
        .chain(&bundle.valid)
        .chain(&bundle.test_2)
        .map(|p| p.patient_id.as_str())
        .collect();
    let mut candidates: Vec<&Patient> = cohort
        .iter()
        .filter(|p| !p.is_positive() && !excluded.contains(p.patient_id.as_str()))
        .collect();
    let take = wanted.saturating_sub(base_negatives.len());
    if take > candidates.len() {
        return Err(Error::Infeasible(format!(
            "1:{ratio} test set needs {wanted} negatives; {} available outside train/valid (shortfall {})",
            base_negatives.len() + candidates.len(),
            take - candidates.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(bundle.seed ^ 0x1b4a_2c3d_5e6f_7081);
    candidates.shuffle(&mut rng);

    let mut out: Vec<Patient> = positives.into_iter().cloned().collect();
    out.extend(base_negatives.into_iter().take(wanted).cloned());
    out.extend(candidates.into_iter().take(take).cloned());
    sort_by_id(&mut out);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotSet {
    pub k: usize,
    pub train: Vec<Patient>,
    pub valid: Vec<Patient>,
}

pub const DEFAULT_FEWSHOT_K: [usize; 7] = [2, 4, 8, 16, 32, 64, 128];

fn fewshot_sample(split: &[Patient], per_class: usize, rng_seed: u64) -> Option<Vec<Patient>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut pos: Vec<&Patient> = split.iter().filter(|p| p.is_positive()).collect();
    let mut neg: Vec<&Patient> = split.iter().filter(|p| !p.is_positive()).collect();
    if pos.len() < per_class || neg.len() < per_class {
        return None;
    }
    // The permutation is independent of k, so samples are nested prefixes.
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut out: Vec<Patient> = pos[..per_class]
        .iter()
        .chain(&neg[..per_class])
        .map(|p| (*p).clone())
        .collect();
    sort_by_id(&mut out);
    Some(out)
}

/// Few-shot subset with `k` patients in total (k/2 per class) in each of
/// train and valid.
pub fn build_fewshot(bundle: &DatasetBundle, k: usize, seed: u64) -> Result<FewShotSet> {
    if k == 0 || k % 2 != 0 {
        return Err(Error::config("k", format!("{k} is not a positive even number")));
    }
    let per_class = k / 2;
    let train = fewshot_sample(&bundle.train, per_class, seed).ok_or_else(|| {
        Error::config("k", format!("{k} exceeds the train split's per-class size"))
    })?;
    let valid = fewshot_sample(&bundle.valid, per_class, seed.wrapping_add(1)).ok_or_else(|| {
        Error::config("k", format!("{k} exceeds the valid split's per-class size"))
    })?;
    Ok(FewShotSet { k, train, valid })
}
