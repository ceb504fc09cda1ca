//! FastText-style static subword embeddings: skip-gram pretraining with
//! negative sampling, then a logistic classifier over averaged note vectors.
//!
//! A token's vector is the mean of its word row (when the word is in the
//! vocabulary) and the rows of its character n-gram buckets, so every token,
//! seen or not, has a vector that does not depend on its context.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EpochRecord, LabeledNote, NoteClassifier, TrainReport};
use crate::error::{Error, Result};
use crate::eval::auroc;
use crate::numcore::{sigmoid, ParameterStore, Tensor};
use crate::text::{build_vocab, char_ngrams, tokenize, Vocabulary, SPECIAL_TOKENS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WemConfig {
    pub d_emb: usize,
    pub n_buckets: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub max_vocab: usize,
    pub window: usize,
    pub negatives: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub classifier_epochs: usize,
    pub classifier_lr: f64,
    /// Stop classifier training after this many epochs without improvement.
    pub patience: Option<usize>,
    /// Whether classifier training also updates the embedding table.
    pub update_embeddings: bool,
    pub seed: u64,
}

impl Default for WemConfig {
    fn default() -> Self {
        WemConfig {
            d_emb: 64,
            n_buckets: 1 << 16,
            n_min: 3,
            n_max: 6,
            max_vocab: 50_000,
            window: 5,
            negatives: 5,
            pretrain_epochs: 5,
            pretrain_lr: 0.05,
            classifier_epochs: 20,
            classifier_lr: 0.5,
            patience: Some(5),
            update_embeddings: true,
            seed: 0,
        }
    }
}

impl WemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 1 {
            return Err(Error::config("window", "must be at least 1"));
        }
        if self.d_emb == 0 {
            return Err(Error::config("d_emb", "must be positive"));
        }
        if self.n_buckets == 0 {
            return Err(Error::config("n_buckets", "must be positive"));
        }
        if self.n_min == 0 || self.n_min > self.n_max {
            return Err(Error::config("n_min", "need 1 <= n_min <= n_max"));
        }
        if self.negatives == 0 {
            return Err(Error::config("negatives", "must be positive"));
        }
        if self.pretrain_epochs == 0 {
            return Err(Error::config("pretrain_epochs", "must be positive"));
        }
        if self.classifier_epochs == 0 {
            return Err(Error::config("classifier_epochs", "must be positive"));
        }
        if !(self.pretrain_lr > 0.0) {
            return Err(Error::config("pretrain_lr", "must be positive"));
        }
        if !(self.classifier_lr > 0.0) {
            return Err(Error::config("classifier_lr", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WemPretrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epochs: usize,
    pub tokens: usize,
}

impl WemPretrainReport {
    pub fn improvement(&self) -> f64 {
        1.0 - self.final_loss / self.initial_loss
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WemModel {
    config: WemConfig,
    vocab: Vocabulary,
    /// (vocab + n_buckets) × d_emb; word rows first, then n-gram buckets.
    input: Vec<f64>,
    /// vocab × d_emb context vectors for skip-gram.
    output: Vec<f64>,
    clf_w: Vec<f64>,
    clf_b: f64,
}

/// Rows averaged into a note vector, with their weights.
struct NoteRows {
    /// (row, weight) pairs; weight already divides by the token's row count.
    rows: Vec<(usize, f64)>,
}

impl WemModel {
    /// Fresh model: input rows U(−1/d, 1/d), zero output and classifier.
    pub fn new(config: WemConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let d = config.d_emb;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let bound = 1.0 / d as f64;
        let n_rows = vocab.len() + config.n_buckets;
        let input = (0..n_rows * d).map(|_| rng.random_range(-bound..bound)).collect();
        Ok(WemModel {
            output: vec![0.0; vocab.len() * d],
            clf_w: vec![0.0; d],
            clf_b: 0.0,
            config,
            vocab,
            input,
        })
    }

    pub fn config(&self) -> &WemConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn bias(&self) -> f64 {
        self.clf_b
    }

    fn d(&self) -> usize {
        self.config.d_emb
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.input[r * self.d()..(r + 1) * self.d()]
    }

    /// Input rows composing `token`: its word row if known, then its n-grams.
    pub fn token_rows(&self, token: &str) -> Vec<usize> {
        let mut rows = Vec::new();
        if let Some(id) = self.vocab.id(token) {
            if id as usize >= SPECIAL_TOKENS.len() {
                rows.push(id as usize);
            }
        }
        let base = self.vocab.len();
        rows.extend(
            char_ngrams(token, self.config.n_min, self.config.n_max, self.config.n_buckets)
                .into_iter()
                .map(|b| base + b),
        );
        rows
    }

    fn mean_rows(&self, rows: &[usize]) -> Vec<f64> {
        let mut v = vec![0.0; self.d()];
        for &r in rows {
            for (a, x) in v.iter_mut().zip(self.row(r)) {
                *a += x;
            }
        }
        let inv = 1.0 / rows.len() as f64;
        v.iter_mut().for_each(|a| *a *= inv);
        v
    }

    /// Context-free vector of one token.
    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        self.mean_rows(&self.token_rows(token))
    }

    fn note_rows(&self, text: &str) -> NoteRows {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let tokens = tokenize(text);
        for t in &tokens {
            *counts.entry(t.clone()).or_default() += 1;
        }
        let n = tokens.len() as f64;
        let mut rows = Vec::new();
        for (tok, c) in counts {
            let tr = self.token_rows(&tok);
            let w = c as f64 / n;
            let per = 1.0 / tr.len() as f64;
            rows.extend(tr.into_iter().map(|r| (r, w * per)));
        }
        NoteRows { rows }
    }

    /// Mean of the note's token vectors; zero for an empty note. Token order
    /// and multiplicity patterns that give the same proportions give the
    /// same vector.
    pub fn note_vector(&self, text: &str) -> Vec<f64> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let tokens = tokenize(text);
        for t in &tokens {
            *counts.entry(t.clone()).or_default() += 1;
        }
        let mut v = vec![0.0; self.d()];
        let n = tokens.len() as f64;
        for (tok, c) in counts {
            let w = c as f64 / n;
            for (a, x) in v.iter_mut().zip(self.token_vector(&tok)) {
                *a += w * x;
            }
        }
        v
    }

    fn logit_of(&self, x: &[f64]) -> f64 {
        self.clf_b + x.iter().zip(&self.clf_w).map(|(a, b)| a * b).sum::<f64>()
    }

    fn meta(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("kind".to_string(), "wem".to_string()),
            (
                "config".to_string(),
                serde_json::to_string(&self.config).expect("config serializes"),
            ),
        ])
    }

    fn to_store(&self) -> ParameterStore {
        let d = self.d();
        let mut s = ParameterStore::new();
        let t = |data: &[f64], rows: usize| Tensor::new(vec![rows, d], data.to_vec()).expect("shape");
        s.add("wem.input", t(&self.input, self.input.len() / d), true);
        s.add("wem.output", t(&self.output, self.vocab.len()), true);
        s.add("wem.clf.w", Tensor::vector(&self.clf_w), true);
        s.add("wem.clf.b", Tensor::vector(&[self.clf_b]), true);
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_store().to_bytes(&self.meta())
    }

    pub fn from_bytes(bytes: &[u8], vocab: Vocabulary) -> Result<Self> {
        let (store, meta) = ParameterStore::from_bytes(bytes)?;
        if meta.get("kind").map(String::as_str) != Some("wem") {
            return Err(Error::Checkpoint("not a word-embedding checkpoint".into()));
        }
        let config: WemConfig = meta
            .get("config")
            .ok_or_else(|| Error::Checkpoint("checkpoint lacks a config".into()))
            .and_then(|c| serde_json::from_str(c).map_err(|e| Error::Checkpoint(format!("bad config: {e}"))))?;
        config.validate()?;
        let get = |n: &str| {
            store
                .id(n)
                .map(|id| store.value(id).data().to_vec())
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {n}")))
        };
        let (input, output, clf_w, clf_b) = (get("wem.input")?, get("wem.output")?, get("wem.clf.w")?, get("wem.clf.b")?);
        let d = config.d_emb;
        if input.len() != (vocab.len() + config.n_buckets) * d || output.len() != vocab.len() * d || clf_w.len() != d || clf_b.len() != 1 {
            return Err(Error::Checkpoint("table sizes do not match config and vocabulary".into()));
        }
        Ok(WemModel {
            config,
            vocab,
            input,
            output,
            clf_w,
            clf_b: clf_b[0],
        })
    }

    /// Path of the vocabulary written next to a checkpoint.
    pub fn vocab_sidecar(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".vocab.tsv");
        PathBuf::from(s)
    }

    /// Writes the tables to `path` and the vocabulary to its sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_store().save(path, &self.meta())?;
        self.vocab.save(Self::vocab_sidecar(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let vocab = Vocabulary::load(Self::vocab_sidecar(path))?;
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, vocab)
    }
}

impl NoteClassifier for WemModel {
    fn predict_note(&self, text: &str) -> f64 {
        let x = self.note_vector(text);
        crate::encoder::clamp_probability(sigmoid(self.logit_of(&x)))
    }
}

/// One skip-gram sample: centre rows, context word, negative words.
struct SgnsSample {
    center: usize,
    context: usize,
    negatives: Vec<usize>,
}

fn sgns_loss(model: &WemModel, rows_of: &[Vec<usize>], s: &SgnsSample) -> f64 {
    let d = model.d();
    let u = model.mean_rows(&rows_of[s.center]);
    let dot = |w: usize| u.iter().zip(&model.output[w * d..(w + 1) * d]).map(|(a, b)| a * b).sum::<f64>();
    let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
    softplus(-dot(s.context)) + s.negatives.iter().map(|&n| softplus(dot(n))).sum::<f64>()
}

/// Skip-gram with negative sampling over every note in `texts`.
///
/// The reported losses are the mean SGNS loss on a fixed sample of up to
/// 2,000 (centre, context, negatives) triples, before and after training.
pub fn pretrain_embeddings<'a, I>(texts: I, config: &WemConfig) -> Result<(WemModel, WemPretrainReport)>
where
    I: IntoIterator<Item = &'a str>,
{
    config.validate()?;
    let docs: Vec<Vec<String>> = texts.into_iter().map(tokenize).collect();
    let vocab = build_vocab(docs.iter().map(|d| d.join(" ")).collect::<Vec<_>>().iter().map(String::as_str), config.max_vocab + SPECIAL_TOKENS.len())?;
    let mut model = WemModel::new(config.clone(), vocab)?;
    let first = SPECIAL_TOKENS.len();
    let v = model.vocab.len();
    if v <= first {
        return Err(Error::config("corpus", "no tokens to pretrain on"));
    }
    let ids: Vec<Vec<usize>> = docs
        .iter()
        .map(|d| d.iter().filter_map(|t| model.vocab.id(t)).map(|i| i as usize).filter(|&i| i >= first).collect())
        .collect();
    let rows_of: Vec<Vec<usize>> = (0..v)
        .map(|i| match model.vocab.token(i as u32) {
            Some(t) if i >= first => model.token_rows(t),
            _ => Vec::new(),
        })
        .collect();
    let mut freq = vec![0f64; v];
    for d in &ids {
        for &i in d {
            freq[i] += 1.0;
        }
    }
    let weights: Vec<f64> = freq.iter().map(|f| f.powf(0.75)).collect();
    let unigram = WeightedIndex::new(&weights).map_err(|e| Error::config("corpus", e.to_string()))?;
    let total_tokens: usize = ids.iter().map(Vec::len).sum();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5347_4e53);
    let eval: Vec<SgnsSample> = {
        let mut eval_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x4556_414c);
        let docs_with_pairs: Vec<&Vec<usize>> = ids.iter().filter(|d| d.len() >= 2).collect();
        if docs_with_pairs.is_empty() {
            return Err(Error::config("corpus", "no note has two in-vocabulary tokens"));
        }
        (0..2000)
            .map(|_| {
                let d = docs_with_pairs[eval_rng.random_range(0..docs_with_pairs.len())];
                let c = eval_rng.random_range(0..d.len());
                let lo = c.saturating_sub(config.window);
                let hi = (c + config.window).min(d.len() - 1);
                let mut o = eval_rng.random_range(lo..hi);
                if o >= c {
                    o += 1;
                }
                SgnsSample {
                    center: d[c],
                    context: d[o],
                    negatives: (0..config.negatives).map(|_| unigram.sample(&mut eval_rng)).collect(),
                }
            })
            .collect()
    };
    let eval_loss = |m: &WemModel| eval.iter().map(|s| sgns_loss(m, &rows_of, s)).sum::<f64>() / eval.len() as f64;
    let initial = eval_loss(&model);

    let d = config.d_emb;
    let total_work = (total_tokens * config.pretrain_epochs).max(1) as f64;
    let mut processed = 0usize;
    let mut order: Vec<usize> = (0..ids.len()).collect();
    let mut u = vec![0.0; d];
    let mut grad_u = vec![0.0; d];
    for _ in 0..config.pretrain_epochs {
        order.shuffle(&mut rng);
        for &di in &order {
            let doc = &ids[di];
            for c in 0..doc.len() {
                let lr = config.pretrain_lr * (1.0 - processed as f64 / total_work).max(1e-4);
                processed += 1;
                let rows = &rows_of[doc[c]];
                let span = rng.random_range(1..=config.window);
                let lo = c.saturating_sub(span);
                let hi = (c + span).min(doc.len() - 1);
                for o in lo..=hi {
                    if o == c {
                        continue;
                    }
                    u.copy_from_slice(&model.mean_rows(rows));
                    grad_u.iter_mut().for_each(|g| *g = 0.0);
                    let update = |w: usize, label: f64, m: &mut WemModel, u: &[f64], gu: &mut [f64]| {
                        let out = &mut m.output[w * d..(w + 1) * d];
                        let dot: f64 = u.iter().zip(out.iter()).map(|(a, b)| a * b).sum();
                        let g = lr * (label - sigmoid(dot));
                        for k in 0..d {
                            gu[k] += g * out[k];
                            out[k] += g * u[k];
                        }
                    };
                    update(doc[o], 1.0, &mut model, &u, &mut grad_u);
                    for _ in 0..config.negatives {
                        let n = unigram.sample(&mut rng);
                        if n == doc[o] {
                            continue;
                        }
                        update(n, 0.0, &mut model, &u, &mut grad_u);
                    }
                    let per = 1.0 / rows.len() as f64;
                    for &r in rows {
                        for (x, g) in model.input[r * d..(r + 1) * d].iter_mut().zip(&grad_u) {
                            *x += per * g;
                        }
                    }
                }
            }
        }
    }
    let final_loss = eval_loss(&model);
    if !final_loss.is_finite() {
        return Err(Error::Divergence {
            step: processed,
            loss: final_loss,
        });
    }
    Ok((
        model,
        WemPretrainReport {
            initial_loss: initial,
            final_loss,
            epochs: config.pretrain_epochs,
            tokens: total_tokens,
        },
    ))
}

fn valid_auroc(model: &WemModel, valid: &[LabeledNote]) -> Option<f64> {
    let scores: Vec<f64> = valid.iter().map(|n| model.predict_note(&n.text)).collect();
    let labels: Vec<u8> = valid.iter().map(|n| n.label).collect();
    auroc(&scores, &labels).ok()
}

/// Logistic classifier over note vectors, trained by per-note SGD with a
/// linearly decaying rate. Keeps the epoch with the best validation AUROC.
pub fn train_classifier(mut model: WemModel, train: &[LabeledNote], valid: &[LabeledNote]) -> Result<(WemModel, TrainReport)> {
    let config = model.config.clone();
    if train.is_empty() {
        return Err(Error::config("train", "training set is empty"));
    }
    let d = config.d_emb;
    let mut cache: HashMap<&str, NoteRows> = HashMap::new();
    for n in train {
        cache.entry(n.text.as_str()).or_insert_with(|| model.note_rows(&n.text));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x434c_4653);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let total = (train.len() * config.classifier_epochs) as f64;
    let mut step = 0usize;
    let mut records = Vec::new();
    let mut best: Option<(f64, usize, WemModel)> = None;
    let mut since_best = 0;
    let trainable_params = d + 1 + if config.update_embeddings { model.input.len() } else { 0 };
    let mut x = vec![0.0; d];
    for epoch in 1..=config.classifier_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for &i in &order {
            let lr = config.classifier_lr * (1.0 - step as f64 / total).max(1e-4);
            step += 1;
            let note = &cache[train[i].text.as_str()];
            x.iter_mut().for_each(|a| *a = 0.0);
            for &(r, w) in &note.rows {
                for (a, v) in x.iter_mut().zip(model.row(r)) {
                    *a += w * v;
                }
            }
            let z = model.logit_of(&x);
            let y = f64::from(train[i].label);
            let loss = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            loss_sum += loss;
            let g = sigmoid(z) - y;
            if config.update_embeddings {
                for &(r, w) in &note.rows {
                    let row = &mut model.input[r * d..(r + 1) * d];
                    for (e, cw) in row.iter_mut().zip(&model.clf_w) {
                        *e -= lr * g * w * cw;
                    }
                }
            }
            for (cw, a) in model.clf_w.iter_mut().zip(&x) {
                *cw -= lr * g * a;
            }
            model.clf_b -= lr * g;
        }
        let score = valid_auroc(&model, valid);
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            valid_auroc: score,
            steps: step,
        });
        let s = score.unwrap_or(f64::NEG_INFINITY);
        match &best {
            Some((b, _, _)) if s <= *b => since_best += 1,
            _ => {
                best = Some((s, epoch, model.clone()));
                since_best = 0;
            }
        }
        if config.patience.is_some_and(|p| since_best >= p) || (s >= 1.0 && config.patience.is_some()) {
            break;
        }
    }
    let (s, best_epoch, best_model) = best.expect("at least one epoch");
    Ok((
        best_model,
        TrainReport {
            epochs: records,
            best_epoch,
            best_valid_auroc: s.is_finite().then_some(s),
            trainable_params,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WemConfig {
        WemConfig {
            d_emb: 16,
            n_buckets: 1 << 10,
            pretrain_epochs: 5,
            ..WemConfig::default()
        }
    }

    /// Four topics of five filler words each. "cough" and "hoest" occur only
    /// in notes of the first topic, each in half of them, so they share
    /// their contexts and frequently share a note.
    fn toy_corpus(seed: u64) -> Vec<String> {
        let topics = [
            ["alpha", "bravo", "charlie", "delta", "echo"],
            ["foxtrot", "golf", "hotel", "india", "juliet"],
            ["kilo", "lima", "mike", "november", "oscar"],
            ["papa", "quebec", "romeo", "sierra", "tango"],
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..400)
            .map(|_| {
                let t = rng.random_range(0..topics.len());
                let mut toks: Vec<&str> = (0..8).map(|_| topics[t][rng.random_range(0..5)]).collect();
                if t == 0 {
                    for word in ["cough", "hoest"] {
                        if rng.random_bool(0.5) {
                            let at = rng.random_range(0..toks.len());
                            toks[at] = word;
                        }
                    }
                }
                toks.join(" ")
            })
            .collect()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn co_occurring_words_end_up_close() {
        let corpus = toy_corpus(0);
        let (m, report) = pretrain_embeddings(corpus.iter().map(String::as_str), &small()).unwrap();
        assert!(report.improvement() >= 0.2, "{report:?}");
        assert!((report.initial_loss - 6.0 * 2f64.ln()).abs() < 1e-12);
        let words: Vec<&str> = m.vocab().words().iter().map(String::as_str).collect();
        let mut pair_sum = 0.0;
        let mut pairs = 0;
        for i in 0..words.len() {
            for j in i + 1..words.len() {
                pair_sum += cosine(&m.token_vector(words[i]), &m.token_vector(words[j]));
                pairs += 1;
            }
        }
        let c = cosine(&m.token_vector("cough"), &m.token_vector("hoest"));
        assert!(c > pair_sum / pairs as f64, "{c} vs {}", pair_sum / pairs as f64);
    }

    #[test]
    fn unseen_word_gets_subword_vector() {
        let corpus = toy_corpus(1);
        let (m, _) = pretrain_embeddings(corpus.iter().map(String::as_str), &small()).unwrap();
        let v = m.token_vector("coughing");
        assert!(v.iter().all(|x| x.is_finite()));
        assert!(v.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn pretraining_is_deterministic() {
        let corpus = toy_corpus(2);
        let a = pretrain_embeddings(corpus.iter().map(String::as_str), &small()).unwrap();
        let b = pretrain_embeddings(corpus.iter().map(String::as_str), &small()).unwrap();
        assert_eq!(a.0.to_bytes(), b.0.to_bytes());
    }

    #[test]
    fn window_zero_rejected() {
        let cfg = WemConfig { window: 0, ..small() };
        assert!(matches!(pretrain_embeddings(["a b"], &cfg), Err(Error::Config { field: "window", .. })));
    }

    fn fresh() -> WemModel {
        let vocab = build_vocab(["hoest koorts moe knie"], 100).unwrap();
        WemModel::new(small(), vocab).unwrap()
    }

    #[test]
    fn zero_classifier_and_empty_notes() {
        let mut m = fresh();
        assert_eq!(m.predict_note("hoest koorts"), 0.5);
        m.clf_b = 0.7;
        assert_eq!(m.predict_note(""), sigmoid(0.7));
        assert_eq!(m.predict_note("  ,, "), sigmoid(0.7));
    }

    #[test]
    fn mean_invariances() {
        let mut m = fresh();
        m.clf_w = (0..16).map(|i| i as f64 * 0.1 - 0.5).collect();
        assert_eq!(m.note_vector("a a a"), m.note_vector("a"));
        assert_eq!(m.note_vector("hoest koorts moe"), m.note_vector("moe hoest koorts"));
        assert_eq!(m.predict_note("hoest knie hoest"), m.predict_note("knie hoest hoest"));
        // Context independence.
        let rows = m.token_rows("hoest");
        assert_eq!(m.token_vector("hoest"), m.mean_rows(&rows));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = fresh();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wem.ckpt");
        m.save(&path).unwrap();
        assert_eq!(WemModel::load(&path).unwrap(), m);
    }

    #[test]
    fn classifier_separates_signal() {
        let corpus = toy_corpus(3);
        let (m, _) = pretrain_embeddings(corpus.iter().map(String::as_str), &small()).unwrap();
        let notes: Vec<LabeledNote> = corpus
            .iter()
            .enumerate()
            .map(|(i, t)| LabeledNote {
                patient_id: format!("p{i}"),
                note_id: format!("n{i}"),
                text: t.clone(),
                label: u8::from(t.contains("cough") || t.contains("hoest")),
            })
            .collect();
        let (train, valid) = notes.split_at(200);
        let (model, report) = train_classifier(m, train, valid).unwrap();
        assert!(report.best_valid_auroc.unwrap() >= 0.95, "{report:?}");
        assert!(valid_auroc(&model, valid).unwrap() >= 0.95);
    }
}
