use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use notewise_core::encoder::{mask_tokens, mlm_loss_and_grads, Encoder, MlmHead};
use notewise_core::text::{build_vocab, SPECIAL_TOKENS};
use notewise_core::{EncoderConfig, NoteClassifier, WemConfig, WemModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 2000;

fn config(max_len: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size: VOCAB,
        max_len,
        ..EncoderConfig::default()
    }
}

fn ids(len: usize) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(len as u64);
    (0..len).map(|_| rng.random_range(SPECIAL_TOKENS.len() as u32..VOCAB as u32)).collect()
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("encoder_forward");
    group.sample_size(20);
    for len in [32usize, 128, 512] {
        let enc = Encoder::new(config(len)).unwrap();
        let input = ids(len);
        group.bench_with_input(BenchmarkId::from_parameter(len), &len, |b, _| {
            b.iter(|| enc.hidden_states(black_box(&input)).unwrap())
        });
    }
    group.finish();
}

fn mlm_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("mlm_forward_backward");
    group.sample_size(20);
    for len in [32usize, 128] {
        let cfg = config(len);
        let enc = Encoder::new(cfg.clone()).unwrap();
        let head = MlmHead::new(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ex = mask_tokens(&ids(len - 1), len, VOCAB, &mut rng).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(len), &len, |b, _| {
            b.iter(|| mlm_loss_and_grads(&enc, &head, black_box(&ex)).unwrap())
        });
    }
    group.finish();
}

fn wem_predict(c: &mut Criterion) {
    let vocab = build_vocab(["hoest koorts moe pijn borst"], 100).unwrap();
    let model = WemModel::new(WemConfig::default(), vocab).unwrap();
    let words = ["hoest", "koorts", "patiënt", "verwijzing", "thoraxfoto", "controle"];
    let note: String = (0..60).map(|i| words[i % words.len()]).collect::<Vec<_>>().join(" ");
    c.bench_function("wem_predict_60_tokens", |b| b.iter(|| model.predict_note(black_box(&note))));
}

criterion_group!(benches, forward, mlm_step, wem_predict);
criterion_main!(benches);
