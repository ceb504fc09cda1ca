//! Patient/note data model and the seeded synthetic corpus generator.
//!
//! The generator stands in for a private primary-care cohort. Positive
//! patients receive a diagnosis date and at least one note inside the
//! 150–730 day predictive window; a configurable fraction of those
//! in-window notes carries one of the signal tokens. Negative patients never
//! see a signal token.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Literal used in corpus files for a missing date.
pub const ABSENT: &str = "ABSENT";

/// Default collection period start.
pub fn default_collection_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2002, 1, 1).unwrap()
}

/// Default collection period end.
pub fn default_collection_end() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 12, 31).unwrap()
}

mod date_or_absent {
    use chrono::NaiveDate;
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(date: &Option<NaiveDate>, s: S) -> Result<S::Ok, S::Error> {
        match date {
            Some(d) => s.serialize_str(&d.format("%Y-%m-%d").to_string()),
            None => s.serialize_str(super::ABSENT),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<NaiveDate>, D::Error> {
        let raw = String::deserialize(d)?;
        if raw == super::ABSENT {
            return Ok(None);
        }
        NaiveDate::parse_from_str(&raw, "%Y-%m-%d")
            .map(Some)
            .map_err(|e| D::Error::custom(format!("bad date {raw:?}: {e}")))
    }
}

/// One free-text note.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Note {
    pub note_id: String,
    #[serde(with = "date_or_absent")]
    pub date: Option<NaiveDate>,
    pub text: String,
}

/// A patient record. The label is positive iff `diagnosis_date` is present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Patient {
    pub patient_id: String,
    pub birth_year: i32,
    #[serde(with = "date_or_absent")]
    pub diagnosis_date: Option<NaiveDate>,
    pub notes: Vec<Note>,
}

impl Patient {
    pub fn is_positive(&self) -> bool {
        self.diagnosis_date.is_some()
    }

    pub fn label(&self) -> u8 {
        u8::from(self.is_positive())
    }

    /// Date of the most recent dated note.
    pub fn last_note_date(&self) -> Option<NaiveDate> {
        self.notes.iter().filter_map(|n| n.date).max()
    }
}

/// An ordered collection of patients.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub patients: Vec<Patient>,
}

impl Corpus {
    pub fn new(patients: Vec<Patient>) -> Self {
        Corpus { patients }
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn n_positive(&self) -> usize {
        self.patients.iter().filter(|p| p.is_positive()).count()
    }

    pub fn n_notes(&self) -> usize {
        self.patients.iter().map(|p| p.notes.len()).sum()
    }

    /// Writes one JSON record per patient per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for p in &self.patients {
            let line = serde_json::to_string(p).expect("patient records always serialize");
            out.write_all(line.as_bytes())
                .and_then(|_| out.write_all(b"\n"))
                .map_err(|e| Error::io("<writer>", e))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut patients = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<reader>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let p: Patient = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            patients.push(p);
        }
        Ok(Corpus { patients })
    }

    /// Canonical serialized form; equal corpora give equal bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    corpus.write_jsonl(&mut w).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Corpus::read_jsonl(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// A truncated log-normal count distribution parameterised by its
/// untruncated mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountDistribution {
    pub mean: f64,
    /// Standard deviation of the underlying normal (log scale).
    pub sigma: f64,
    pub min: usize,
    pub max: usize,
}

impl CountDistribution {
    pub fn new(mean: f64, sigma: f64, min: usize, max: usize) -> Self {
        CountDistribution {
            mean,
            sigma,
            min,
            max,
        }
    }

    fn validate(&self, field: &'static str) -> Result<()> {
        if !(self.mean > 0.0 && self.mean.is_finite()) {
            return Err(Error::config(field, "mean must be positive"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config(field, "sigma must be non-negative"));
        }
        if self.min == 0 {
            return Err(Error::config(field, "min must be at least 1"));
        }
        if self.min > self.max {
            return Err(Error::config(field, "min exceeds max"));
        }
        Ok(())
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        if self.sigma == 0.0 {
            return (self.mean.round() as usize).clamp(self.min, self.max);
        }
        let mu = self.mean.ln() - self.sigma * self.sigma / 2.0;
        let dist = LogNormal::new(mu, self.sigma).expect("validated parameters");
        // Rejection keeps the shape of the tail; fall back to clamping if the
        // bounds are far outside the bulk of the distribution.
        for _ in 0..64 {
            let x = dist.sample(rng).round();
            if x >= self.min as f64 && x <= self.max as f64 {
                return x as usize;
            }
        }
        (dist.sample(rng).round() as usize).clamp(self.min, self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub prevalence: f64,
    pub notes_per_patient: CountDistribution,
    pub tokens_per_note: CountDistribution,
    /// Number of background (non-signal) words.
    pub vocab_size: usize,
    pub zipf_exponent: f64,
    pub signal_tokens: Vec<String>,
    /// Probability that an in-window note of a positive patient carries signal.
    pub signal_rate: f64,
    /// Signal tokens injected into a carrying note.
    pub signal_per_note: usize,
    pub undated_fraction: f64,
    /// Fraction of patients whose age at their last note is below 40.
    pub underage_fraction: f64,
    pub collection_start: NaiveDate,
    pub collection_end: NaiveDate,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_patients: 1000,
            prevalence: 0.5,
            notes_per_patient: CountDistribution::new(30.0, 0.8, 1, 284),
            tokens_per_note: CountDistribution::new(30.0, 0.35, 5, 80),
            vocab_size: 2000,
            zipf_exponent: 1.0,
            signal_tokens: ["hoest", "dyspneu", "hemoptoe", "vermagering", "thoraxpijn"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            signal_rate: 0.5,
            signal_per_note: 3,
            undated_fraction: 0.01,
            underage_fraction: 0.10,
            collection_start: default_collection_start(),
            collection_end: default_collection_end(),
            seed: 0,
        }
    }
}

const SYLLABLES: [&str; 20] = [
    "ba", "de", "ki", "lo", "mu", "na", "pe", "ri", "so", "tu", "va", "we", "zi", "ho", "ja",
    "ge", "fi", "ko", "ne", "ru",
];

/// Deterministic pseudo-word for background vocabulary index `i`.
pub fn background_word(i: usize, width: usize) -> String {
    let mut digits = Vec::with_capacity(width);
    let mut x = i;
    for _ in 0..width {
        digits.push(SYLLABLES[x % SYLLABLES.len()]);
        x /= SYLLABLES.len();
    }
    digits.concat()
}

fn word_width(vocab_size: usize) -> usize {
    let mut width = 2;
    while SYLLABLES.len().pow(width as u32) < vocab_size {
        width += 1;
    }
    width
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::config("n_patients", "must be positive"));
        }
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return Err(Error::config("prevalence", "must lie strictly between 0 and 1"));
        }
        self.notes_per_patient.validate("notes_per_patient")?;
        self.tokens_per_note.validate("tokens_per_note")?;
        if self.vocab_size == 0 {
            return Err(Error::config("vocab_size", "must be positive"));
        }
        if !(self.zipf_exponent > 0.0) {
            return Err(Error::config("zipf_exponent", "must be positive"));
        }
        if self.signal_tokens.is_empty() {
            return Err(Error::config("signal_tokens", "at least one signal token is required"));
        }
        let background = self.background_vocabulary();
        for tok in &self.signal_tokens {
            if tok.is_empty() || !tok.chars().all(|c| c.is_alphanumeric()) {
                return Err(Error::config(
                    "signal_tokens",
                    format!("{tok:?} is not a single lowercase word"),
                ));
            }
            if tok.to_lowercase() != *tok {
                return Err(Error::config("signal_tokens", format!("{tok:?} is not lowercase")));
            }
            if background.binary_search(tok).is_ok() {
                return Err(Error::config(
                    "signal_tokens",
                    format!("{tok:?} collides with a background word"),
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.signal_rate) {
            return Err(Error::config("signal_rate", "must lie in [0, 1]"));
        }
        if self.signal_per_note == 0 || self.signal_per_note > self.tokens_per_note.min {
            return Err(Error::config(
                "signal_per_note",
                "must be between 1 and tokens_per_note.min",
            ));
        }
        if !(0.0..1.0).contains(&self.undated_fraction) {
            return Err(Error::config("undated_fraction", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.underage_fraction) {
            return Err(Error::config("underage_fraction", "must lie in [0, 1]"));
        }
        // Positives need room for a full predictive window inside the period.
        if (self.collection_end - self.collection_start).num_days() < 1000 {
            return Err(Error::config(
                "collection_period",
                "must span at least 1000 days",
            ));
        }
        Ok(())
    }

    /// Sorted background vocabulary.
    fn background_vocabulary(&self) -> Vec<String> {
        let width = word_width(self.vocab_size);
        let mut words: Vec<String> = (0..self.vocab_size)
            .map(|i| background_word(i, width))
            .collect();
        words.sort();
        words
    }

    /// The full vocabulary: background words followed by signal tokens.
    pub fn vocabulary(&self) -> Vec<String> {
        let width = word_width(self.vocab_size);
        (0..self.vocab_size)
            .map(|i| background_word(i, width))
            .chain(self.signal_tokens.iter().cloned())
            .collect()
    }

    pub fn n_positive(&self) -> usize {
        (self.n_patients as f64 * self.prevalence).round() as usize
    }
}

const POS_WINDOW: (i64, i64) = (150, 730);

fn uniform_date<R: Rng>(rng: &mut R, lo: NaiveDate, hi: NaiveDate) -> NaiveDate {
    let span = (hi - lo).num_days().max(0);
    lo + Duration::days(rng.random_range(0..=span))
}

/// Generates a synthetic corpus. Fully determined by `config` (including its seed).
pub fn generate(config: &GeneratorConfig) -> Result<Corpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let width = word_width(config.vocab_size);
    let words: Vec<String> = (0..config.vocab_size)
        .map(|i| background_word(i, width))
        .collect();
    let zipf = Zipf::new(config.vocab_size as f64, config.zipf_exponent)
        .map_err(|e| Error::config("zipf_exponent", e.to_string()))?;

    let n = config.n_patients;
    let n_pos = config.n_positive();
    let mut labels = vec![false; n];
    labels[..n_pos].iter_mut().for_each(|l| *l = true);
    labels.shuffle(&mut rng);

    let digits = n.to_string().len().max(6);
    let start = config.collection_start;
    let end = config.collection_end;

    let mut patients = Vec::with_capacity(n);
    for (idx, &positive) in labels.iter().enumerate() {
        let patient_id = format!("P{idx:0digits$}");
        let n_notes = config.notes_per_patient.sample(&mut rng);

        let (diagnosis_date, mut dates) = if positive {
            let diag = uniform_date(&mut rng, start + Duration::days(POS_WINDOW.1 + 70), end);
            // Anchor note guarantees at least one note in the predictive window.
            let anchor = uniform_date(
                &mut rng,
                diag - Duration::days(POS_WINDOW.1),
                diag - Duration::days(POS_WINDOW.0),
            );
            let lo = std::cmp::max(start, diag - Duration::days(5 * 365));
            let mut dates = vec![anchor];
            for _ in 1..n_notes {
                dates.push(uniform_date(&mut rng, lo, diag));
            }
            (Some(diag), dates)
        } else {
            let last = uniform_date(&mut rng, start + Duration::days(365), end);
            let span = rng.random_range(365..=10 * 365);
            let lo = std::cmp::max(start, last - Duration::days(span));
            let mut dates = vec![last];
            for _ in 1..n_notes {
                dates.push(uniform_date(&mut rng, lo, last));
            }
            (None, dates)
        };

        // The anchor (index 0) always keeps its date.
        let mut dated: Vec<Option<NaiveDate>> = Vec::with_capacity(dates.len());
        for (i, d) in dates.drain(..).enumerate() {
            if i > 0 && rng.random_bool(config.undated_fraction) {
                dated.push(None);
            } else {
                dated.push(Some(d));
            }
        }
        // Dated notes ascending, undated last.
        dated.sort_by_key(|d| (d.is_none(), *d));

        let mut notes = Vec::with_capacity(dated.len());
        for (j, date) in dated.into_iter().enumerate() {
            let n_tokens = config.tokens_per_note.sample(&mut rng);
            let mut tokens: Vec<&str> = (0..n_tokens)
                .map(|_| {
                    let rank = zipf.sample(&mut rng) as usize;
                    words[(rank - 1).min(words.len() - 1)].as_str()
                })
                .collect();
            let in_window = match (diagnosis_date, date) {
                (Some(diag), Some(d)) => {
                    let gap = (diag - d).num_days();
                    (POS_WINDOW.0..=POS_WINDOW.1).contains(&gap)
                }
                _ => false,
            };
            if in_window && rng.random_bool(config.signal_rate) {
                let mut positions: Vec<usize> = (0..tokens.len()).collect();
                positions.shuffle(&mut rng);
                for &pos in positions.iter().take(config.signal_per_note) {
                    tokens[pos] = config
                        .signal_tokens
                        .choose(&mut rng)
                        .expect("validated non-empty")
                        .as_str();
                }
            }
            notes.push(Note {
                note_id: format!("{patient_id}-N{j:03}"),
                date,
                text: tokens.join(" "),
            });
        }

        let last_year = notes
            .iter()
            .filter_map(|n| n.date)
            .max()
            .expect("anchor note is dated")
            .year();
        let age = if rng.random_bool(config.underage_fraction) {
            rng.random_range(25..=39)
        } else {
            rng.random_range(40..=90)
        };
        patients.push(Patient {
            patient_id,
            birth_year: last_year - age,
            diagnosis_date,
            notes,
        });
    }
    Ok(Corpus { patients })
}
