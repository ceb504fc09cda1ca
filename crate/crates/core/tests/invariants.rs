//! Cross-module invariants as property tests.

use std::collections::{BTreeSet, HashSet};

use chrono::Duration;
use notewise_core::cohort::{
    build_balanced, build_cohort, build_fewshot, build_imbalanced_test, is_note_valid,
};
use notewise_core::corpus::{generate, CountDistribution, Corpus};
use notewise_core::encoder::{Encoder, LabeledNote, PromptAdapter, SoftPromptModel};
use notewise_core::eval::{aggregate, auprc, auroc, brier, PredictionRecord};
use notewise_core::numcore::{adam_step, AdamConfig, ParameterStore, Tape, Tensor};
use notewise_core::text::{build_vocab, encode, tokenize};
use notewise_core::{
    AggregationRule, CohortConfig, EncoderConfig, GeneratorConfig, NoteClassifier, PredictionSet,
    SplitSpec, WemConfig, WemModel,
};
use proptest::prelude::*;

fn small_generator(n: usize, seed: u64, signal_rate: f64) -> GeneratorConfig {
    GeneratorConfig {
        n_patients: n,
        notes_per_patient: CountDistribution::new(5.0, 0.7, 1, 25),
        tokens_per_note: CountDistribution::new(8.0, 0.3, 5, 16),
        vocab_size: 120,
        signal_rate,
        seed,
        ..GeneratorConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn corpus_generation_invariants(n in 1usize..60, seed in any::<u64>(), rate in 0.0f64..=1.0) {
        let cfg = small_generator(n, seed, rate);
        let corpus = generate(&cfg).unwrap();
        prop_assert_eq!(&corpus, &generate(&cfg).unwrap());
        prop_assert_eq!(corpus.len(), n);
        let signal: HashSet<&str> = cfg.signal_tokens.iter().map(String::as_str).collect();
        for p in &corpus.patients {
            prop_assert!(!p.notes.is_empty() && p.notes.len() <= cfg.notes_per_patient.max);
            if let Some(diag) = p.diagnosis_date {
                let in_window = p.notes.iter().filter_map(|n| n.date).any(|d| {
                    let gap = (diag - d).num_days();
                    (150..=730).contains(&gap)
                });
                prop_assert!(in_window, "positive {} has no note in the window", p.patient_id);
            } else {
                for note in &p.notes {
                    prop_assert!(tokenize(&note.text).iter().all(|t| !signal.contains(t.as_str())));
                }
            }
        }
        let back = Corpus::read_jsonl(corpus.to_bytes().as_slice()).unwrap();
        prop_assert_eq!(back, corpus);
    }

    #[test]
    fn cohort_and_dataset_invariants(seed in any::<u64>(), ratio in 1usize..4, k_exp in 1u32..4) {
        let cfg = GeneratorConfig { prevalence: 0.2, ..small_generator(160, seed, 0.5) };
        let corpus = generate(&cfg).unwrap();
        let cohort_cfg = CohortConfig::default();
        let cohort = build_cohort(&corpus, &cohort_cfg).unwrap();
        for p in &cohort {
            prop_assert!(p.notes.iter().all(|n| is_note_valid(n, p, &cohort_cfg)));
        }
        let spec = SplitSpec { seed, ..SplitSpec::default() };
        let bundle = build_balanced(&cohort, &spec).unwrap();
        prop_assert_eq!(&bundle, &build_balanced(&cohort, &spec).unwrap());

        let mut seen = HashSet::new();
        for (_, split) in bundle.splits() {
            let pos = split.iter().filter(|p| p.is_positive()).count();
            prop_assert!(pos.abs_diff(split.len() - pos) <= 1, "split not stratified");
            for p in split {
                prop_assert!(seen.insert(p.patient_id.clone()), "{} in two splits", p.patient_id);
            }
        }

        let train_valid: HashSet<&str> =
            bundle.train.iter().chain(&bundle.valid).map(|p| p.patient_id.as_str()).collect();
        if let Ok(set) = build_imbalanced_test(&cohort, &bundle, ratio) {
            let pos = set.iter().filter(|p| p.is_positive()).count();
            prop_assert_eq!(set.len() - pos, pos * ratio);
            prop_assert!(set.iter().all(|p| !train_valid.contains(p.patient_id.as_str())));
        }

        let k = 2usize.pow(k_exp);
        if let Ok(fs) = build_fewshot(&bundle, k, seed) {
            let train: HashSet<&str> = bundle.train.iter().map(|p| p.patient_id.as_str()).collect();
            let valid: HashSet<&str> = bundle.valid.iter().map(|p| p.patient_id.as_str()).collect();
            prop_assert!(fs.train.iter().all(|p| train.contains(p.patient_id.as_str())));
            prop_assert!(fs.valid.iter().all(|p| valid.contains(p.patient_id.as_str())));
            if k >= 4 {
                let smaller = build_fewshot(&bundle, k / 2, seed).unwrap();
                let big: BTreeSet<&str> =
                    fs.train.iter().chain(&fs.valid).map(|p| p.patient_id.as_str()).collect();
                prop_assert!(smaller.train.iter().chain(&smaller.valid).all(|p| big.contains(p.patient_id.as_str())));
            }
        }
    }

    #[test]
    fn encode_is_total_and_padded(text in "\\PC{0,80}", max_len in 1usize..40) {
        let vocab = build_vocab(["hoest koorts moe", "pijn op de borst"], 50).unwrap();
        let a = encode(&text, &vocab, max_len);
        prop_assert_eq!(a.ids.len(), max_len);
        prop_assert!(a.len >= 1 && a.len <= max_len);
        prop_assert_eq!(a, encode(&text, &vocab, max_len));
    }

    #[test]
    fn frozen_parameters_survive_optimizer_steps(steps in 1usize..20, lr in 1e-4f64..0.5) {
        let mut store = ParameterStore::new();
        let frozen = store.add("frozen", Tensor::matrix(2, 2, &[0.5, -1.0, 2.0, 0.25]).unwrap(), false);
        let live = store.add("live", Tensor::matrix(2, 2, &[1.0, 1.0, -1.0, 0.5]).unwrap(), true);
        let before = store.value(frozen).clone();
        for _ in 0..steps {
            let mut tape = Tape::new();
            let a = tape.param(&store, frozen);
            let b = tape.param(&store, live);
            let c = tape.matmul(a, b).unwrap();
            let t = tape.tanh(c);
            let l = tape.sum(t);
            tape.backward(l).unwrap();
            tape.accumulate_into(&mut store, 1.0);
            adam_step(&mut store, &AdamConfig::with_lr(lr)).unwrap();
            store.zero_grad();
        }
        prop_assert_eq!(store.value(frozen), &before);
    }

    #[test]
    fn metric_transform_properties(
        data in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..80),
    ) {
        let mut labels: Vec<u8> = data.iter().map(|(_, l)| u8::from(*l)).collect();
        labels[0] = 1;
        labels[1] = 0;
        let scores: Vec<f64> = data.iter().map(|(s, _)| *s).collect();
        let a = auroc(&scores, &labels).unwrap();
        let p = auprc(&scores, &labels).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|s| s * s).collect();
        prop_assert_eq!(auroc(&squashed, &labels).unwrap(), a);
        prop_assert_eq!(auprc(&squashed, &labels).unwrap(), p);
        // Flipping labels and scores leaves AUROC unchanged.
        let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        let mirrored: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
        prop_assert!((auroc(&mirrored, &flipped).unwrap() - a).abs() < 1e-12);
    }

    #[test]
    fn min_mean_max_ordering(groups in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 1..12), 1..40)) {
        let mut records = Vec::new();
        for (i, probs) in groups.iter().enumerate() {
            for (j, &p) in probs.iter().enumerate() {
                records.push(PredictionRecord {
                    patient_id: format!("p{i:03}"),
                    note_id: format!("p{i:03}-{j}"),
                    probability: p,
                    label: (i % 2) as u8,
                });
            }
        }
        let set = PredictionSet::new(records).unwrap();
        let min = aggregate(&set, AggregationRule::Min).unwrap();
        let mean = aggregate(&set, AggregationRule::Mean).unwrap();
        let max = aggregate(&set, AggregationRule::Max).unwrap();
        let smm = aggregate(&set, AggregationRule::ScaledMaxMean { c: 2.0 }).unwrap();
        for i in 0..min.len() {
            prop_assert!(min[i].probability <= mean[i].probability);
            prop_assert!(mean[i].probability <= max[i].probability);
            prop_assert!(mean[i].probability <= smm[i].probability && smm[i].probability <= max[i].probability);
        }
    }
}

fn tiny_backbone(n_layers: usize) -> (Encoder, notewise_core::text::Vocabulary) {
    let vocab = build_vocab(["hoest koorts moe pijn borst dag week"], 50).unwrap();
    let enc = Encoder::new(EncoderConfig {
        vocab_size: vocab.len(),
        d_model: 8,
        n_heads: 2,
        n_layers,
        ffn_dim: 16,
        max_len: 12,
        seed: 1,
        ..EncoderConfig::default()
    })
    .unwrap();
    (enc, vocab)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn soft_prompt_shape_and_budget(n_layers in 1usize..4, p in 1usize..8, words in 0usize..30) {
        let (enc, vocab) = tiny_backbone(n_layers);
        let d = enc.config().d_model;
        let adapter = PromptAdapter::new(&enc, p, 3).unwrap();
        prop_assert_eq!(adapter.trainable_count(), p * d + d + 1);
        let model = SoftPromptModel::new(enc, adapter, vocab).unwrap();
        let text = vec!["hoest"; words].join(" ");
        let len = model.sequence_len(&text);
        prop_assert_eq!(len, 1 + p + words.min(model.text_capacity()));
        prop_assert!(len <= 12);
        let a = model.predict_note(&text);
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert_eq!(a.to_bits(), model.predict_note(&text).to_bits());
    }

    #[test]
    fn wem_context_and_order_independence(
        words in prop::collection::vec("[a-z]{1,9}", 1..12),
        seed in any::<u64>(),
    ) {
        let cfg = WemConfig { d_emb: 8, n_buckets: 512, seed, ..WemConfig::default() };
        let vocab = build_vocab(["hoest koorts moe"], 20).unwrap();
        let model = WemModel::new(cfg, vocab).unwrap();
        for w in &words {
            let v = model.token_vector(w);
            prop_assert_eq!(v.len(), 8);
            prop_assert!(v.iter().all(|x| x.is_finite()));
        }
        let forward = words.join(" ");
        let mut rev = words.clone();
        rev.reverse();
        let backward = rev.join(" ");
        prop_assert_eq!(model.predict_note(&forward).to_bits(), model.predict_note(&backward).to_bits());
        // A token's vector does not depend on its neighbours.
        let alone = model.token_vector(&words[0]);
        let in_context = model.note_vector(&format!("{} {}", words[0], words[0]));
        prop_assert_eq!(alone, in_context);
    }
}

#[test]
fn brier_is_not_rank_invariant() {
    let labels = [1u8, 0, 1, 0];
    let scores = [0.9, 0.4, 0.6, 0.2];
    let squashed: Vec<f64> = scores.iter().map(|s| s * s).collect();
    assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&squashed, &labels).unwrap());
    assert!(brier(&scores, &labels).unwrap() != brier(&squashed, &labels).unwrap());
}

#[test]
fn negative_note_window_anchors_on_last_note() {
    let corpus = generate(&small_generator(40, 4, 0.5)).unwrap();
    let cfg = CohortConfig::default();
    for p in build_cohort(&corpus, &cfg).unwrap().iter().filter(|p| !p.is_positive()) {
        let last = p.notes.iter().filter_map(|n| n.date).max().unwrap();
        assert!(p.notes.iter().all(|n| last - n.date.unwrap() <= Duration::days(730)));
    }
}

#[test]
fn labeled_notes_follow_their_patient() {
    let corpus = generate(&small_generator(30, 8, 1.0)).unwrap();
    let labeled: Vec<LabeledNote> = notewise_core::encoder::label_notes(&corpus.patients);
    assert_eq!(labeled.len(), corpus.n_notes());
    for (note, patient) in labeled.iter().zip(corpus.patients.iter().flat_map(|p| p.notes.iter().map(move |_| p))) {
        assert_eq!(note.label, patient.label());
        assert_eq!(note.patient_id, patient.patient_id);
    }
}
