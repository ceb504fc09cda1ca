use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::numcore::{ParamId, ParameterStore, Tape, Tensor, Var};

#[derive(Debug, Clone)]
struct LayerIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Debug, Clone)]
struct EncoderIds {
    tok_emb: ParamId,
    pos_emb: ParamId,
    emb_ln_g: ParamId,
    emb_ln_b: ParamId,
    layers: Vec<LayerIds>,
}

/// Tape handles for every encoder parameter in one forward pass.
pub(crate) struct BoundEncoder {
    pub(crate) tok_emb: Var,
    pos_emb: Var,
    emb_ln: (Var, Var),
    layers: Vec<[Var; 16]>,
}

/// Post-LN transformer encoder with learned absolute positions.
#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    store: ParameterStore,
    ids: EncoderIds,
}

fn ids_from_store(store: &ParameterStore, n_layers: usize) -> Result<EncoderIds> {
    let get = |name: &str| {
        store
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    };
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let p = |s: &str| get(&format!("layer{l}.{s}"));
        layers.push(LayerIds {
            wq: p("attn.wq")?,
            bq: p("attn.bq")?,
            wk: p("attn.wk")?,
            bk: p("attn.bk")?,
            wv: p("attn.wv")?,
            bv: p("attn.bv")?,
            wo: p("attn.wo")?,
            bo: p("attn.bo")?,
            ln1_g: p("ln1.gamma")?,
            ln1_b: p("ln1.beta")?,
            w1: p("ffn.w1")?,
            b1: p("ffn.b1")?,
            w2: p("ffn.w2")?,
            b2: p("ffn.b2")?,
            ln2_g: p("ln2.gamma")?,
            ln2_b: p("ln2.beta")?,
        });
    }
    Ok(EncoderIds {
        tok_emb: get("embed.tokens")?,
        pos_emb: get("embed.positions")?,
        emb_ln_g: get("embed.ln.gamma")?,
        emb_ln_b: get("embed.ln.beta")?,
        layers,
    })
}

pub(crate) fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

impl Encoder {
    /// Randomly initialised encoder (N(0, init_std) weights, zero biases,
    /// unit layer-norm gains).
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, d, f, s) = (config.vocab_size, config.d_model, config.ffn_dim, config.init_std);
        let mut store = ParameterStore::new();
        let mut w = |store: &mut ParameterStore, name: &str, shape: &[usize]| {
            store.add(name, normal_tensor(&mut rng, shape, s), true);
        };
        w(&mut store, "embed.tokens", &[v, d]);
        w(&mut store, "embed.positions", &[config.max_len, d]);
        store.add("embed.ln.gamma", Tensor::full(&[d], 1.0), true);
        store.add("embed.ln.beta", Tensor::zeros(&[d]), true);
        for l in 0..config.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            for (wn, bn) in [("attn.wq", "attn.bq"), ("attn.wk", "attn.bk"), ("attn.wv", "attn.bv"), ("attn.wo", "attn.bo")] {
                w(&mut store, &p(wn), &[d, d]);
                store.add(&p(bn), Tensor::zeros(&[d]), true);
            }
            store.add(&p("ln1.gamma"), Tensor::full(&[d], 1.0), true);
            store.add(&p("ln1.beta"), Tensor::zeros(&[d]), true);
            w(&mut store, &p("ffn.w1"), &[d, f]);
            store.add(&p("ffn.b1"), Tensor::zeros(&[f]), true);
            w(&mut store, &p("ffn.w2"), &[f, d]);
            store.add(&p("ffn.b2"), Tensor::zeros(&[d]), true);
            store.add(&p("ln2.gamma"), Tensor::full(&[d], 1.0), true);
            store.add(&p("ln2.beta"), Tensor::zeros(&[d]), true);
        }
        let ids = ids_from_store(&store, config.n_layers)?;
        Ok(Encoder { config, store, ids })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub(crate) fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    /// Adds `delta` to one element of a named parameter.
    pub fn nudge(&mut self, name: &str, index: usize, delta: f64) -> Result<()> {
        self.store.nudge(name, index, delta)
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.store.set_all_trainable(trainable);
    }

    pub fn parameter_count(&self) -> usize {
        self.store.total_count()
    }

    pub fn token_embeddings(&self) -> &Tensor {
        self.store.value(self.ids.tok_emb)
    }

    /// Hash of the parameter values; what adapters bind to.
    pub fn content_hash(&self) -> String {
        self.store.content_hash()
    }

    fn config_meta(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("kind".to_string(), "encoder".to_string()),
            (
                "config".to_string(),
                serde_json::to_string(&self.config).expect("config serializes"),
            ),
        ])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.store.to_bytes(&self.config_meta())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.store.save(path, &self.config_meta())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (store, meta) = ParameterStore::from_bytes(bytes)?;
        Self::from_store(store, &meta)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (store, meta) = ParameterStore::load(path)?;
        Self::from_store(store, &meta)
    }

    pub(crate) fn from_store(store: ParameterStore, meta: &BTreeMap<String, String>) -> Result<Self> {
        let config: EncoderConfig = meta
            .get("config")
            .ok_or_else(|| Error::Checkpoint("encoder checkpoint lacks a config".into()))
            .and_then(|c| {
                serde_json::from_str(c).map_err(|e| Error::Checkpoint(format!("bad config: {e}")))
            })?;
        config.validate()?;
        let ids = ids_from_store(&store, config.n_layers)?;
        let expect = |id: ParamId, shape: &[usize]| {
            if store.value(id).shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "{} has shape {:?}, expected {shape:?}",
                    store.param(id).name,
                    store.value(id).shape()
                )));
            }
            Ok(())
        };
        expect(ids.tok_emb, &[config.vocab_size, config.d_model])?;
        expect(ids.pos_emb, &[config.max_len, config.d_model])?;
        Ok(Encoder { config, store, ids })
    }

    pub(crate) fn bind(&self, tape: &mut Tape) -> BoundEncoder {
        self.bind_with(tape, Tape::param)
    }

    /// Binds every parameter as a constant; no backbone gradient is computed.
    pub(crate) fn bind_frozen(&self, tape: &mut Tape) -> BoundEncoder {
        self.bind_with(tape, Tape::param_frozen)
    }

    fn bind_with(&self, tape: &mut Tape, param: fn(&mut Tape, &ParameterStore, ParamId) -> Var) -> BoundEncoder {
        let s = &self.store;
        let ids = &self.ids;
        BoundEncoder {
            tok_emb: param(tape, s, ids.tok_emb),
            pos_emb: param(tape, s, ids.pos_emb),
            emb_ln: (param(tape, s, ids.emb_ln_g), param(tape, s, ids.emb_ln_b)),
            layers: ids
                .layers
                .iter()
                .map(|l| {
                    [
                        l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln1_g, l.ln1_b, l.w1,
                        l.b1, l.w2, l.b2, l.ln2_g, l.ln2_b,
                    ]
                    .map(|id| param(tape, s, id))
                })
                .collect(),
        }
    }

    /// Runs the encoder over already-embedded inputs (L×d). Dropout is
    /// applied only when `rng` is given.
    pub(crate) fn forward_embedded(
        &self,
        tape: &mut Tape,
        bound: &BoundEncoder,
        inputs: Var,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let len = tape.value(inputs).dims2().0;
        if len > self.config.max_len {
            return Err(Error::shape(
                "encoder",
                format!("{len} positions exceed max_len {}", self.config.max_len),
            ));
        }
        let eps = self.config.layer_norm_eps;
        let p_drop = self.config.dropout;
        let positions: Vec<usize> = (0..len).collect();
        let pos = tape.gather_rows(bound.pos_emb, &positions)?;
        let x = tape.add(inputs, pos)?;
        let mut x = tape.layer_norm(x, bound.emb_ln.0, bound.emb_ln.1, eps)?;
        if let Some(r) = rng.as_deref_mut() {
            x = tape.dropout(x, p_drop, r);
        }

        let d = self.config.d_model;
        let h = self.config.n_heads;
        let dh = d / h;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for layer in &bound.layers {
            let [wq, bq, wk, bk, wv, bv, wo, bo, ln1_g, ln1_b, w1, b1, w2, b2, ln2_g, ln2_b] =
                *layer;
            let q = tape.matmul(x, wq)?;
            let q = tape.add_row(q, bq)?;
            let k = tape.matmul(x, wk)?;
            let k = tape.add_row(k, bk)?;
            let v = tape.matmul(x, wv)?;
            let v = tape.add_row(v, bv)?;
            let mut heads = Vec::with_capacity(h);
            for head in 0..h {
                let qh = tape.slice_cols(q, head * dh, dh)?;
                let kh = tape.slice_cols(k, head * dh, dh)?;
                let vh = tape.slice_cols(v, head * dh, dh)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, inv_sqrt);
                let att = tape.softmax(scores);
                heads.push(tape.matmul(att, vh)?);
            }
            let ctx = if h == 1 { heads[0] } else { tape.concat_cols(&heads)? };
            let attn = tape.matmul(ctx, wo)?;
            let mut attn = tape.add_row(attn, bo)?;
            if let Some(r) = rng.as_deref_mut() {
                attn = tape.dropout(attn, p_drop, r);
            }
            let res = tape.add(x, attn)?;
            x = tape.layer_norm(res, ln1_g, ln1_b, eps)?;

            let ff = tape.matmul(x, w1)?;
            let ff = tape.add_row(ff, b1)?;
            let ff = tape.gelu(ff);
            let ff = tape.matmul(ff, w2)?;
            let mut ff = tape.add_row(ff, b2)?;
            if let Some(r) = rng.as_deref_mut() {
                ff = tape.dropout(ff, p_drop, r);
            }
            let res = tape.add(x, ff)?;
            x = tape.layer_norm(res, ln2_g, ln2_b, eps)?;
        }
        Ok(x)
    }

    /// Embeds token ids (CLS included by the caller) and runs the encoder.
    pub(crate) fn forward_ids(
        &self,
        tape: &mut Tape,
        bound: &BoundEncoder,
        ids: &[u32],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let emb = tape.embedding_lookup(bound.tok_emb, ids)?;
        self.forward_embedded(tape, bound, emb, rng)
    }

    /// Final hidden states for `ids`, inference mode.
    pub fn hidden_states(&self, ids: &[u32]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let h = self.forward_ids(&mut tape, &bound, ids, None)?;
        Ok(tape.value(h).clone())
    }
}
