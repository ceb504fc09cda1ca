use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{normal_tensor, BoundEncoder};
use super::{Encoder, EncoderConfig, Schedule};
use crate::error::{Error, Result};
use crate::numcore::{adam_step, ParamId, ParameterStore, Tape, Tensor, Var};
use crate::text::{CLS, MASK, SPECIAL_TOKENS};

const MASK_RATE: f64 = 0.15;

/// Masked-LM prediction head: dense → GELU → layer norm → tied decoder.
#[derive(Debug, Clone)]
pub struct MlmHead {
    store: ParameterStore,
    dense_w: ParamId,
    dense_b: ParamId,
    ln_g: ParamId,
    ln_b: ParamId,
    bias: ParamId,
}

impl MlmHead {
    pub fn new(config: &EncoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6d6c_6d68);
        let d = config.d_model;
        let mut store = ParameterStore::new();
        let dense_w = store.add("mlm.dense.w", normal_tensor(&mut rng, &[d, d], config.init_std), true);
        let dense_b = store.add("mlm.dense.b", Tensor::zeros(&[d]), true);
        let ln_g = store.add("mlm.ln.gamma", Tensor::full(&[d], 1.0), true);
        let ln_b = store.add("mlm.ln.beta", Tensor::zeros(&[d]), true);
        let bias = store.add("mlm.bias", Tensor::zeros(&[config.vocab_size]), true);
        MlmHead {
            store,
            dense_w,
            dense_b,
            ln_g,
            ln_b,
            bias,
        }
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn nudge(&mut self, name: &str, index: usize, delta: f64) -> Result<()> {
        self.store.nudge(name, index, delta)
    }

    fn logits(
        &self,
        tape: &mut Tape,
        bound: &BoundEncoder,
        hidden: Var,
        positions: &[usize],
        eps: f64,
    ) -> Result<Var> {
        let h = tape.gather_rows(hidden, positions)?;
        let w = tape.param(&self.store, self.dense_w);
        let b = tape.param(&self.store, self.dense_b);
        let h = tape.matmul(h, w)?;
        let h = tape.add_row(h, b)?;
        let h = tape.gelu(h);
        let g = tape.param(&self.store, self.ln_g);
        let beta = tape.param(&self.store, self.ln_b);
        let h = tape.layer_norm(h, g, beta, eps)?;
        let logits = tape.matmul_nt(h, bound.tok_emb)?;
        let bias = tape.param(&self.store, self.bias);
        tape.add_row(logits, bias)
    }
}

/// One masked training example.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedExample {
    pub inputs: Vec<u32>,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Masks 15% of the text positions (at least one): 80% become MASK, 10% a
/// random word, 10% stay unchanged.
pub fn mask_tokens<R: Rng>(text_ids: &[u32], max_len: usize, vocab_size: usize, rng: &mut R) -> Option<MaskedExample> {
    let mut inputs = Vec::with_capacity(text_ids.len() + 1);
    inputs.push(CLS);
    inputs.extend(text_ids.iter().take(max_len - 1));
    if inputs.len() < 2 {
        return None;
    }
    let mut positions: Vec<usize> = (1..inputs.len()).filter(|_| rng.random_bool(MASK_RATE)).collect();
    if positions.is_empty() {
        positions.push(rng.random_range(1..inputs.len()));
    }
    let targets = positions.iter().map(|&p| inputs[p] as usize).collect();
    let first_word = SPECIAL_TOKENS.len() as u32;
    for &p in &positions {
        let roll: f64 = rng.random();
        if roll < 0.8 {
            inputs[p] = MASK;
        } else if roll < 0.9 && (vocab_size as u32) > first_word {
            inputs[p] = rng.random_range(first_word..vocab_size as u32);
        }
    }
    Some(MaskedExample {
        inputs,
        positions,
        targets,
    })
}

fn example_loss(
    encoder: &Encoder,
    head: &MlmHead,
    tape: &mut Tape,
    ex: &MaskedExample,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let bound = encoder.bind(tape);
    let hidden = encoder.forward_ids(tape, &bound, &ex.inputs, rng)?;
    let logits = head.logits(tape, &bound, hidden, &ex.positions, encoder.config().layer_norm_eps)?;
    tape.cross_entropy(logits, &ex.targets)
}

/// Loss of one example with dropout off, and the gradient of every trainable
/// encoder and head parameter keyed by name.
pub fn mlm_loss_and_grads(
    encoder: &Encoder,
    head: &MlmHead,
    ex: &MaskedExample,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let mut tape = Tape::new();
    let l = example_loss(encoder, head, &mut tape, ex, None)?;
    tape.backward(l)?;
    let mut grads = BTreeMap::new();
    for store in [encoder.store(), head.store()] {
        let mut s = store.clone();
        s.zero_grad();
        tape.accumulate_into(&mut s, 1.0);
        for (id, p) in s.iter().filter(|(_, p)| p.trainable) {
            let g = s.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.value().numel()]);
            grads.insert(p.name.clone(), g);
        }
    }
    Ok((tape.value(l).item(), grads))
}

/// Mean masked-token cross-entropy over fixed examples, dropout off.
pub fn mlm_heldout_loss(encoder: &Encoder, head: &MlmHead, examples: &[MaskedExample]) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let mut tape = Tape::new();
        let l = example_loss(encoder, head, &mut tape, ex, None)?;
        total += tape.value(l).item();
    }
    Ok(total / examples.len().max(1) as f64)
}

/// Accuracy of the arg-max prediction at masked positions.
pub fn mlm_accuracy(encoder: &Encoder, head: &MlmHead, examples: &[MaskedExample]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for ex in examples {
        let mut tape = Tape::new();
        let bound = encoder.bind(&mut tape);
        let hidden = encoder.forward_ids(&mut tape, &bound, &ex.inputs, None)?;
        let logits = head.logits(&mut tape, &bound, hidden, &ex.positions, encoder.config().layer_norm_eps)?;
        let v = tape.value(logits);
        for (r, &t) in ex.targets.iter().enumerate() {
            let row = v.row(r);
            let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            hit += usize::from(arg == t);
            total += 1;
        }
    }
    Ok(hit as f64 / total.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_heldout_loss: f64,
    pub final_heldout_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub heldout_notes: usize,
}

impl PretrainReport {
    /// Relative decrease of the held-out loss.
    pub fn improvement(&self) -> f64 {
        1.0 - self.final_heldout_loss / self.initial_heldout_loss
    }
}

/// Masked-LM pretraining from scratch on tokenized notes (text ids, no CLS).
///
/// The last 5% of notes (at least one, at most 256) form a held-out slice
/// with fixed masks, used only to measure the loss before and after.
pub fn pretrain_mlm(
    notes: &[Vec<u32>],
    config: EncoderConfig,
    schedule: &Schedule,
) -> Result<(Encoder, MlmHead, PretrainReport)> {
    schedule.validate()?;
    let mut encoder = Encoder::new(config)?;
    encoder.set_trainable(true);
    let mut head = MlmHead::new(encoder.config());
    let cfg = encoder.config().clone();

    let usable: Vec<&Vec<u32>> = notes.iter().filter(|n| !n.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::config("corpus", "no non-empty notes to pretrain on"));
    }
    let n_heldout = (usable.len() / 20).clamp(1, 256);
    let (train, heldout) = if usable.len() > n_heldout {
        usable.split_at(usable.len() - n_heldout)
    } else {
        (&usable[..], &usable[..])
    };
    let mut fixed_rng = ChaCha8Rng::seed_from_u64(schedule.seed ^ 0x4845_4c44);
    let heldout: Vec<MaskedExample> = heldout
        .iter()
        .filter_map(|ids| mask_tokens(ids, cfg.max_len, cfg.vocab_size, &mut fixed_rng))
        .collect();

    let initial = mlm_heldout_loss(&encoder, &head, &heldout)?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    let mut epoch_losses = Vec::new();
    'outer: for _ in 0..schedule.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut seen) = (0.0, 0usize);
        for batch in order.chunks(schedule.batch_size) {
            if schedule.max_steps.is_some_and(|m| step >= m) {
                break 'outer;
            }
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let Some(ex) = mask_tokens(train[i], cfg.max_len, cfg.vocab_size, &mut rng) else {
                    continue;
                };
                let mut tape = Tape::new();
                let l = example_loss(&encoder, &head, &mut tape, &ex, Some(&mut rng))?;
                let value = tape.value(l).item();
                if !value.is_finite() {
                    return Err(Error::Divergence { step, loss: value });
                }
                total += value;
                seen += 1;
                tape.backward(l)?;
                tape.accumulate_into(encoder.store_mut(), scale);
                tape.accumulate_into(&mut head.store, scale);
            }
            if let Some(c) = schedule.clip_grad_norm {
                clip_joint(encoder.store_mut(), &mut head.store, c);
            }
            adam_step(encoder.store_mut(), &schedule.adam)?;
            adam_step(&mut head.store, &schedule.adam)?;
            encoder.store_mut().zero_grad();
            head.store.zero_grad();
            step += 1;
        }
        epoch_losses.push(if seen > 0 { total / seen as f64 } else { f64::NAN });
    }
    let final_loss = mlm_heldout_loss(&encoder, &head, &heldout)?;
    if !final_loss.is_finite() {
        return Err(Error::Divergence { step, loss: final_loss });
    }
    Ok((
        encoder,
        head,
        PretrainReport {
            initial_heldout_loss: initial,
            final_heldout_loss: final_loss,
            epoch_losses,
            steps: step,
            heldout_notes: heldout.len(),
        },
    ))
}

fn clip_joint(a: &mut ParameterStore, b: &mut ParameterStore, max_norm: f64) {
    let norm = a.grad_norm().hypot(b.grad_norm());
    if norm > max_norm {
        let scale = max_norm / norm;
        // Clipping each store to its share of the joint norm scales both by
        // the same factor.
        a.clip_grad_norm(a.grad_norm() * scale);
        b.clip_grad_norm(b.grad_norm() * scale);
    }
}
