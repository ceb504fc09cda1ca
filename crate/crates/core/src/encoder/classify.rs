use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::train::{run, TrainReport};
use super::{clamp_probability, Encoder, NoteClassifier, Schedule};
use crate::corpus::Patient;
use crate::error::{Error, Result};
use crate::eval::auroc;
use crate::numcore::{sigmoid, ParamId, ParameterStore, Tape, Tensor, Var};
use crate::text::{encode, Vocabulary, CLS, SPECIAL_TOKENS};

/// A note carrying its patient's label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledNote {
    pub patient_id: String,
    pub note_id: String,
    pub text: String,
    pub label: u8,
}

/// Propagates each patient's label to every one of their notes.
pub fn label_notes(patients: &[Patient]) -> Vec<LabeledNote> {
    patients
        .iter()
        .flat_map(|p| {
            p.notes.iter().map(move |n| LabeledNote {
                patient_id: p.patient_id.clone(),
                note_id: n.note_id.clone(),
                text: n.text.clone(),
                label: p.label(),
            })
        })
        .collect()
}

fn check_vocab(encoder: &Encoder, vocab: &Vocabulary) -> Result<()> {
    if vocab.len() != encoder.config().vocab_size {
        return Err(Error::config(
            "vocab_size",
            format!(
                "vocabulary has {} entries, backbone expects {}",
                vocab.len(),
                encoder.config().vocab_size
            ),
        ));
    }
    Ok(())
}

/// Per-note validation AUROC; `None` when a class is missing.
fn note_auroc(model: &impl NoteClassifier, notes: &[LabeledNote]) -> Option<f64> {
    let scores: Vec<f64> = notes.iter().map(|n| model.predict_note(&n.text)).collect();
    let labels: Vec<u8> = notes.iter().map(|n| n.label).collect();
    auroc(&scores, &labels).ok()
}

fn add_head(store: &mut ParameterStore, d: usize) -> (ParamId, ParamId) {
    (
        store.add("head.w", Tensor::zeros(&[d, 1]), true),
        store.add("head.b", Tensor::zeros(&[1]), true),
    )
}

fn head_logit(tape: &mut Tape, store: &ParameterStore, hidden: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let cls = tape.slice_rows(hidden, 0, 1)?;
    let w = tape.param(store, w);
    let b = tape.param(store, b);
    let z = tape.matmul(cls, w)?;
    tape.add_row(z, b)
}

fn vocab_meta(meta: &BTreeMap<String, String>) -> Result<Vocabulary> {
    let tsv = meta
        .get("vocab")
        .ok_or_else(|| Error::Checkpoint("checkpoint lacks a vocabulary".into()))?;
    Vocabulary::from_tsv(tsv)
}

/// Fully fine-tuned encoder with a linear head on the CLS position.
#[derive(Debug, Clone)]
pub struct FineTunedModel {
    encoder: Encoder,
    vocab: Vocabulary,
    head_w: ParamId,
    head_b: ParamId,
}

impl FineTunedModel {
    /// Wraps a backbone with a zero-initialised head; every parameter trainable.
    pub fn new(mut backbone: Encoder, vocab: Vocabulary) -> Result<Self> {
        check_vocab(&backbone, &vocab)?;
        backbone.set_trainable(true);
        let d = backbone.config().d_model;
        let (head_w, head_b) = match (backbone.store().id("head.w"), backbone.store().id("head.b")) {
            (Some(w), Some(b)) => (w, b),
            _ => add_head(backbone.store_mut(), d),
        };
        Ok(FineTunedModel {
            encoder: backbone,
            vocab,
            head_w,
            head_b,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn trainable_count(&self) -> usize {
        self.encoder.store().trainable_count()
    }

    pub fn total_count(&self) -> usize {
        self.encoder.store().total_count()
    }

    fn logit(&self, tape: &mut Tape, ids: &[u32], rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let bound = self.encoder.bind(tape);
        let hidden = self.encoder.forward_ids(tape, &bound, ids, rng)?;
        head_logit(tape, self.encoder.store(), hidden, self.head_w, self.head_b)
    }

    fn meta(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("kind".to_string(), "finetuned".to_string()),
            (
                "config".to_string(),
                serde_json::to_string(self.encoder.config()).expect("config serializes"),
            ),
            ("vocab".to_string(), self.vocab.to_tsv()),
        ])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.encoder.store().to_bytes(&self.meta())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.encoder.store().save(path, &self.meta())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (store, meta) = ParameterStore::from_bytes(bytes)?;
        Self::from_parts(store, &meta)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (store, meta) = ParameterStore::load(path)?;
        Self::from_parts(store, &meta)
    }

    fn from_parts(store: ParameterStore, meta: &BTreeMap<String, String>) -> Result<Self> {
        if meta.get("kind").map(String::as_str) != Some("finetuned") {
            return Err(Error::Checkpoint("not a fine-tuned model checkpoint".into()));
        }
        let vocab = vocab_meta(meta)?;
        let encoder = Encoder::from_store(store, meta)?;
        let (Some(head_w), Some(head_b)) = (encoder.store().id("head.w"), encoder.store().id("head.b")) else {
            return Err(Error::Checkpoint("missing classification head".into()));
        };
        check_vocab(&encoder, &vocab)?;
        Ok(FineTunedModel {
            encoder,
            vocab,
            head_w,
            head_b,
        })
    }
}

impl NoteClassifier for FineTunedModel {
    fn predict_note(&self, text: &str) -> f64 {
        let note = encode(text, &self.vocab, self.encoder.config().max_len);
        let mut tape = Tape::new();
        let z = self
            .logit(&mut tape, note.active(), None)
            .expect("encoded note fits the encoder");
        clamp_probability(sigmoid(tape.value(z).item()))
    }
}

/// Full fine-tuning with binary cross-entropy; keeps the epoch with the best
/// per-note validation AUROC.
pub fn finetune(
    backbone: Encoder,
    vocab: &Vocabulary,
    train: &[LabeledNote],
    valid: &[LabeledNote],
    schedule: &Schedule,
) -> Result<(FineTunedModel, TrainReport)> {
    let mut model = FineTunedModel::new(backbone, vocab.clone())?;
    let max_len = model.encoder.config().max_len;
    let inputs: Vec<Vec<u32>> = train
        .iter()
        .map(|n| encode(&n.text, vocab, max_len).active().to_vec())
        .collect();
    let report = run(
        &mut model,
        |m| m.encoder.store_mut(),
        train.len(),
        schedule,
        |m, i, tape, rng| {
            let z = m.logit(tape, &inputs[i], Some(rng))?;
            tape.bce_with_logits(z, &[f64::from(train[i].label)])
        },
        |m| note_auroc(m, valid),
    )?;
    Ok((model, report))
}

/// Trainable prompt rows plus a linear head, bound to one backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptAdapter {
    store: ParameterStore,
    prompt: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    backbone_hash: String,
}

impl PromptAdapter {
    /// Prompt rows copied from the embeddings of `p` distinct random
    /// non-special tokens; zero head.
    pub fn new(backbone: &Encoder, p: usize, seed: u64) -> Result<Self> {
        let cfg = backbone.config();
        if p == 0 {
            return Err(Error::config("prompt_len", "must be positive"));
        }
        if p + 1 >= cfg.max_len {
            return Err(Error::config(
                "prompt_len",
                format!("{p} prompts leave no room for text within max_len {}", cfg.max_len),
            ));
        }
        let d = cfg.d_model;
        let n_words = cfg.vocab_size - SPECIAL_TOKENS.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = backbone.token_embeddings();
        let mut rows = Vec::with_capacity(p * d);
        let picks: Vec<usize> = if p <= n_words {
            sample(&mut rng, n_words, p).into_vec()
        } else {
            (0..p).map(|i| i % n_words).collect()
        };
        for w in picks {
            rows.extend_from_slice(emb.row(SPECIAL_TOKENS.len() + w));
        }
        let mut store = ParameterStore::new();
        let prompt = store.add("prompt", Tensor::new(vec![p, d], rows)?, true);
        let head_w = store.add("head.w", Tensor::zeros(&[1, d]), true);
        let head_b = store.add("head.b", Tensor::zeros(&[1]), true);
        Ok(PromptAdapter {
            store,
            prompt,
            head_w,
            head_b,
            backbone_hash: backbone.content_hash(),
        })
    }

    pub fn prompt_len(&self) -> usize {
        self.store.value(self.prompt).shape()[0]
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn backbone_hash(&self) -> &str {
        &self.backbone_hash
    }

    pub fn trainable_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn to_bytes(&self, vocab: &Vocabulary) -> Vec<u8> {
        self.store.to_bytes(&self.meta(vocab))
    }

    pub fn save(&self, path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<()> {
        self.store.save(path, &self.meta(vocab))
    }

    fn meta(&self, vocab: &Vocabulary) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("kind".to_string(), "prompt_adapter".to_string()),
            ("backbone_hash".to_string(), self.backbone_hash.clone()),
            ("vocab".to_string(), vocab.to_tsv()),
        ])
    }

    fn from_parts(store: ParameterStore, meta: &BTreeMap<String, String>, backbone: &Encoder) -> Result<Self> {
        if meta.get("kind").map(String::as_str) != Some("prompt_adapter") {
            return Err(Error::Checkpoint("not a prompt adapter checkpoint".into()));
        }
        let expected = meta
            .get("backbone_hash")
            .ok_or_else(|| Error::Checkpoint("adapter lacks a backbone hash".into()))?
            .clone();
        let found = backbone.content_hash();
        if expected != found {
            return Err(Error::BackboneMismatch { expected, found });
        }
        let get = |n: &str| store.id(n).ok_or_else(|| Error::Checkpoint(format!("missing parameter {n}")));
        let (prompt, head_w, head_b) = (get("prompt")?, get("head.w")?, get("head.b")?);
        let d = backbone.config().d_model;
        if store.value(prompt).dims2().1 != d || store.value(head_w).shape() != [1, d] {
            return Err(Error::Checkpoint("adapter width does not match the backbone".into()));
        }
        Ok(PromptAdapter {
            store,
            prompt,
            head_w,
            head_b,
            backbone_hash: expected,
        })
    }
}

/// Frozen backbone plus a trained prompt adapter.
#[derive(Debug, Clone)]
pub struct SoftPromptModel {
    backbone: Encoder,
    adapter: PromptAdapter,
    vocab: Vocabulary,
}

impl SoftPromptModel {
    pub fn new(backbone: Encoder, adapter: PromptAdapter, vocab: Vocabulary) -> Result<Self> {
        check_vocab(&backbone, &vocab)?;
        if adapter.backbone_hash != backbone.content_hash() {
            return Err(Error::BackboneMismatch {
                expected: adapter.backbone_hash.clone(),
                found: backbone.content_hash(),
            });
        }
        Ok(SoftPromptModel {
            backbone,
            adapter,
            vocab,
        })
    }

    pub fn backbone(&self) -> &Encoder {
        &self.backbone
    }

    pub fn adapter(&self) -> &PromptAdapter {
        &self.adapter
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Writes the adapter only; the backbone is referenced by hash.
    pub fn save_adapter(&self, path: impl AsRef<Path>) -> Result<()> {
        self.adapter.save(path, &self.vocab)
    }

    pub fn adapter_bytes(&self) -> Vec<u8> {
        self.adapter.to_bytes(&self.vocab)
    }

    /// Loads an adapter against `backbone`, refusing a mismatched backbone.
    pub fn load_adapter(backbone: Encoder, path: impl AsRef<Path>) -> Result<Self> {
        let (store, meta) = ParameterStore::load(path)?;
        Self::from_adapter_parts(backbone, store, &meta)
    }

    pub fn from_adapter_bytes(backbone: Encoder, bytes: &[u8]) -> Result<Self> {
        let (store, meta) = ParameterStore::from_bytes(bytes)?;
        Self::from_adapter_parts(backbone, store, &meta)
    }

    fn from_adapter_parts(backbone: Encoder, store: ParameterStore, meta: &BTreeMap<String, String>) -> Result<Self> {
        let adapter = PromptAdapter::from_parts(store, meta, &backbone)?;
        let vocab = vocab_meta(meta)?;
        Self::new(backbone, adapter, vocab)
    }

    /// Text capacity once CLS and the prompt rows are placed.
    pub fn text_capacity(&self) -> usize {
        self.backbone.config().max_len - 1 - self.adapter.prompt_len()
    }

    fn text_ids(&self, text: &str) -> Vec<u32> {
        let note = encode(text, &self.vocab, self.text_capacity() + 1);
        note.text_ids().to_vec()
    }

    /// Sequence fed to the backbone: CLS embedding, prompt rows, text embeddings.
    pub(crate) fn logit(&self, tape: &mut Tape, text_ids: &[u32], rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let bound = self.backbone.bind_frozen(tape);
        let cls = tape.embedding_lookup(bound.tok_emb, &[CLS])?;
        let prompt = tape.param(&self.adapter.store, self.adapter.prompt);
        let mut parts = vec![cls, prompt];
        if !text_ids.is_empty() {
            parts.push(tape.embedding_lookup(bound.tok_emb, text_ids)?);
        }
        let inputs = tape.concat_rows(&parts)?;
        let hidden = self.backbone.forward_embedded(tape, &bound, inputs, rng)?;
        // Positions are pooled with softmax weights given by the head's own
        // per-position scores, then scored by the same head.
        let w = tape.param(&self.adapter.store, self.adapter.head_w);
        let b = tape.param(&self.adapter.store, self.adapter.head_b);
        let scores = tape.matmul_nt(w, hidden)?;
        let weights = tape.softmax(scores);
        let pooled = tape.matmul(weights, hidden)?;
        let z = tape.matmul_nt(pooled, w)?;
        tape.add_row(z, b)
    }

    /// Number of attention positions used for `text`.
    pub fn sequence_len(&self, text: &str) -> usize {
        1 + self.adapter.prompt_len() + self.text_ids(text).len()
    }
}

impl NoteClassifier for SoftPromptModel {
    fn predict_note(&self, text: &str) -> f64 {
        let ids = self.text_ids(text);
        let mut tape = Tape::new();
        let z = self.logit(&mut tape, &ids, None).expect("note fits the encoder");
        clamp_probability(sigmoid(tape.value(z).item()))
    }
}

/// Soft-prompt tuning: trains only `p` prompt rows and the head while the
/// backbone stays frozen.
pub fn soft_prompt_tune(
    backbone: Encoder,
    vocab: &Vocabulary,
    train: &[LabeledNote],
    valid: &[LabeledNote],
    p: usize,
    schedule: &Schedule,
) -> Result<(SoftPromptModel, TrainReport)> {
    let adapter = PromptAdapter::new(&backbone, p, schedule.seed ^ 0x7072_6f6d)?;
    let mut model = SoftPromptModel::new(backbone, adapter, vocab.clone())?;
    let inputs: Vec<Vec<u32>> = train.iter().map(|n| model.text_ids(&n.text)).collect();
    let report = run(
        &mut model,
        |m| &mut m.adapter.store,
        train.len(),
        schedule,
        |m, i, tape, rng| {
            let z = m.logit(tape, &inputs[i], Some(rng))?;
            tape.bce_with_logits(z, &[f64::from(train[i].label)])
        },
        |m| note_auroc(m, valid),
    )?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::text::build_vocab;

    fn notes() -> Vec<LabeledNote> {
        let texts = [
            ("p1", "hoest hoest koorts", 1),
            ("p1", "hoest moe", 1),
            ("p2", "rugpijn moe", 0),
            ("p2", "knie rugpijn", 0),
            ("p3", "hoest koorts", 1),
            ("p4", "knie moe", 0),
        ];
        texts
            .iter()
            .enumerate()
            .map(|(i, (p, t, l))| LabeledNote {
                patient_id: p.to_string(),
                note_id: format!("{p}-{i}"),
                text: t.to_string(),
                label: *l,
            })
            .collect()
    }

    fn setup() -> (Encoder, Vocabulary) {
        let ns = notes();
        let vocab = build_vocab(ns.iter().map(|n| n.text.as_str()), 100).unwrap();
        let enc = Encoder::new(EncoderConfig {
            vocab_size: vocab.len(),
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            ffn_dim: 16,
            max_len: 16,
            dropout: 0.0,
            ..Default::default()
        })
        .unwrap();
        (enc, vocab)
    }

    #[test]
    fn zero_head_predicts_one_half() {
        let (enc, vocab) = setup();
        let ft = FineTunedModel::new(enc.clone(), vocab.clone()).unwrap();
        let adapter = PromptAdapter::new(&enc, 3, 0).unwrap();
        let st = SoftPromptModel::new(enc, adapter, vocab).unwrap();
        for n in notes() {
            assert_eq!(ft.predict_note(&n.text), 0.5);
            assert_eq!(st.predict_note(&n.text), 0.5);
        }
        assert_eq!(ft.predict_note(""), 0.5);
    }

    #[test]
    fn parameter_budgets() {
        let (enc, vocab) = setup();
        let total = enc.parameter_count();
        let ft = FineTunedModel::new(enc.clone(), vocab).unwrap();
        assert_eq!(ft.trainable_count(), ft.total_count());
        assert_eq!(ft.total_count(), total + 8 + 1);
        let adapter = PromptAdapter::new(&enc, 4, 0).unwrap();
        assert_eq!(adapter.trainable_count(), 4 * 8 + 8 + 1);
    }

    #[test]
    fn prompt_length_limits() {
        let (enc, _) = setup();
        assert!(matches!(PromptAdapter::new(&enc, 16, 0), Err(Error::Config { field: "prompt_len", .. })));
        assert!(matches!(PromptAdapter::new(&enc, 15, 0), Err(Error::Config { .. })));
        assert!(PromptAdapter::new(&enc, 14, 0).is_ok());
    }

    #[test]
    fn sequence_respects_capacity() {
        let (enc, vocab) = setup();
        let adapter = PromptAdapter::new(&enc, 5, 0).unwrap();
        let st = SoftPromptModel::new(enc, adapter, vocab).unwrap();
        let long = "hoest ".repeat(100);
        assert_eq!(st.sequence_len(&long), 16);
        assert_eq!(st.sequence_len("hoest moe"), 1 + 5 + 2);
        assert!(st.predict_note(&long).is_finite());
    }

    #[test]
    fn soft_prompt_leaves_backbone_untouched() {
        let (enc, vocab) = setup();
        let before = enc.to_bytes();
        let ns = notes();
        let schedule = Schedule {
            epochs: 5,
            batch_size: 2,
            patience: None,
            ..Schedule::soft_prompt()
        };
        let (model, report) = soft_prompt_tune(enc, &vocab, &ns, &ns, 3, &schedule).unwrap();
        assert_eq!(model.backbone().to_bytes(), before);
        assert_eq!(report.trainable_params, 3 * 8 + 8 + 1);
        assert!(report.epochs.last().unwrap().steps >= 15);
    }

    #[test]
    fn adapter_refuses_other_backbone() {
        let (enc, vocab) = setup();
        let ns = notes();
        let schedule = Schedule {
            epochs: 2,
            ..Schedule::soft_prompt()
        };
        let (model, _) = soft_prompt_tune(enc.clone(), &vocab, &ns, &ns, 2, &schedule).unwrap();
        let bytes = model.adapter_bytes();
        let reloaded = SoftPromptModel::from_adapter_bytes(enc.clone(), &bytes).unwrap();
        for n in &ns {
            assert_eq!(reloaded.predict_note(&n.text), model.predict_note(&n.text));
        }
        let other = Encoder::new(EncoderConfig {
            seed: 1,
            ..enc.config().clone()
        })
        .unwrap();
        assert!(matches!(
            SoftPromptModel::from_adapter_bytes(other, &bytes),
            Err(Error::BackboneMismatch { .. })
        ));
    }

    #[test]
    fn finetune_checkpoint_round_trip() {
        let (enc, vocab) = setup();
        let ns = notes();
        let schedule = Schedule {
            epochs: 3,
            batch_size: 2,
            ..Schedule::finetune()
        };
        let (model, report) = finetune(enc, &vocab, &ns, &ns, &schedule).unwrap();
        assert!(report.best_epoch >= 1);
        let back = FineTunedModel::from_bytes(&model.to_bytes()).unwrap();
        for n in &ns {
            assert_eq!(back.predict_note(&n.text), model.predict_note(&n.text));
        }
        assert!(matches!(
            finetune(back.encoder().clone(), &vocab, &[], &ns, &schedule),
            Err(Error::Config { field: "train", .. })
        ));
    }

    #[test]
    fn prompt_gradient_matches_finite_difference() {
        let (enc, vocab) = setup();
        let mut adapter = PromptAdapter::new(&enc, 3, 0).unwrap();
        // Non-zero head so the prompt receives signal.
        for (i, x) in adapter.store.value_mut(adapter.head_w).data_mut().iter_mut().enumerate() {
            *x = 0.3 - 0.1 * i as f64;
        }
        let mut model = SoftPromptModel::new(enc, adapter, vocab).unwrap();
        let ids = model.text_ids("hoest koorts moe");
        let loss = |m: &SoftPromptModel| {
            let mut tape = Tape::new();
            let z = m.logit(&mut tape, &ids, None).unwrap();
            let l = tape.bce_with_logits(z, &[1.0]).unwrap();
            (tape, l)
        };
        let (mut tape, l) = loss(&model);
        tape.backward(l).unwrap();
        let mut store = model.adapter.store.clone();
        store.zero_grad();
        tape.accumulate_into(&mut store, 1.0);
        let analytic = store.grad(model.adapter.prompt).unwrap().to_vec();
        let h = 1e-5;
        for coord in [0, 5, 13, 23] {
            let mut eval = |delta: f64| {
                model.adapter.store.value_mut(model.adapter.prompt).data_mut()[coord] += delta;
                let (tape, l) = loss(&model);
                let v = tape.value(l).item();
                model.adapter.store.value_mut(model.adapter.prompt).data_mut()[coord] -= delta;
                v
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let rel = (numeric - analytic[coord]).abs() / numeric.abs().max(analytic[coord].abs()).max(1e-8);
            assert!(rel < 1e-3, "coord {coord}: {numeric} vs {}", analytic[coord]);
            assert!(analytic[coord] != 0.0);
        }
    }
}
