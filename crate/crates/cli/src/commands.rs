use std::sync::Mutex;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use notewise_core::cohort::{build_balanced, build_cohort, build_fewshot, build_imbalanced_test};
use notewise_core::corpus::{generate, load_corpus};
use notewise_core::encoder::{
    finetune, label_notes, pretrain_mlm, soft_prompt_tune, Encoder, FineTunedModel, SoftPromptModel,
};
use notewise_core::eval::{analytic_random, evaluate, random_scores_metrics, PredictionRecord};
use notewise_core::text::{build_vocab, encode, Vocabulary, SPECIAL_TOKENS};
use notewise_core::wem::{pretrain_embeddings, train_classifier};
use notewise_core::{
    AggregationRule, Corpus, DatasetBundle, NoteClassifier, Patient, PredictionSet, WemModel,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::provenance::{self, Manifest};

#[derive(Parser, Debug, Clone)]
#[command(name = "notewise", version, about = "Lung-cancer risk from notes: synthetic pipeline runner")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// TOML run configuration; every field has a default.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed, overriding the configuration's.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory, overriding `paths.out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Rerun the command into a scratch directory and require identical bytes.
    #[arg(long, global = true)]
    pub verify: bool,
    /// Run independent sweep cells and predictions on all cores.
    #[arg(long, global = true)]
    pub parallel: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Ft,
    St,
    Wem,
}

impl ModelKind {
    fn name(self) -> &'static str {
        match self {
            ModelKind::Ft => "ft",
            ModelKind::St => "st",
            ModelKind::Wem => "wem",
        }
    }
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Generate the synthetic corpus.
    GenCorpus,
    /// Apply inclusion criteria and draw the balanced splits.
    BuildCohort,
    /// Build the vocabulary, pretrain the encoder (masked LM) and the word embeddings.
    Pretrain,
    /// Train one model on the balanced train split, selecting on valid.
    Train {
        #[arg(value_enum)]
        model: ModelKind,
    },
    /// Per-note and per-patient metrics on test_1.
    Evaluate {
        #[arg(long, value_enum, default_value = "ft")]
        model: ModelKind,
    },
    /// Evaluate a trained model on test_2 and the imbalanced test sets.
    SweepImbalance {
        #[arg(long, value_enum, default_value = "ft")]
        model: ModelKind,
    },
    /// Train every regime on each few-shot set and evaluate on test_1.
    SweepFewshot {
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Join the run's metric files into one summary table.
    Report,
}

impl Command {
    fn label(&self) -> String {
        match self {
            Command::GenCorpus => "gen-corpus".into(),
            Command::BuildCohort => "build-cohort".into(),
            Command::Pretrain => "pretrain".into(),
            Command::Train { model } => format!("train-{}", model.name()),
            Command::Evaluate { model } => format!("evaluate-{}", model.name()),
            Command::SweepImbalance { model } => format!("sweep-imbalance-{}", model.name()),
            Command::SweepFewshot { .. } => "sweep-fewshot".into(),
            Command::Report => "report".into(),
        }
    }
}

const CORPUS: &str = "corpus.jsonl";
const COHORT_DIR: &str = "cohort";
const VOCAB: &str = "vocab.tsv";
const BACKBONE: &str = "checkpoints/backbone.ckpt";
const EMBEDDINGS: &str = "checkpoints/wem_embeddings.ckpt";

fn checkpoint_of(model: ModelKind) -> &'static str {
    match model {
        ModelKind::Ft => "checkpoints/ft.ckpt",
        ModelKind::St => "checkpoints/st.adapter",
        ModelKind::Wem => "checkpoints/wem.ckpt",
    }
}

/// Where a command reads from and writes to, plus what it has written.
pub struct Ctx {
    pub config: RunConfig,
    pub hash: String,
    pub input: PathBuf,
    pub output: PathBuf,
    pub parallel: bool,
    written: Mutex<Vec<String>>,
}

impl Ctx {
    fn new(config: RunConfig, input: PathBuf, output: PathBuf, parallel: bool) -> Self {
        Ctx {
            hash: config.hash(),
            config,
            input,
            output,
            parallel,
            written: Mutex::new(Vec::new()),
        }
    }

    fn seed(&self) -> u64 {
        self.config.seed
    }

    fn input(&self, rel: &str, producer: &'static str) -> Result<PathBuf, CliError> {
        let path = self.input.join(rel);
        if path.exists() {
            Ok(path)
        } else {
            Err(CliError::MissingInput { path, producer })
        }
    }

    /// Output location for `rel`; the file is recorded in the manifest.
    fn out_path(&self, rel: &str) -> Result<PathBuf, CliError> {
        let path = self.output.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        self.written.lock().expect("lock").push(rel.to_string());
        Ok(path)
    }

    fn write(&self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.out_path(rel)?;
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<(), CliError> {
        let mut json = serde_json::to_string_pretty(value).expect("serializable");
        json.push('\n');
        self.write(rel, json.as_bytes())
    }

    fn write_csv<T: Serialize>(&self, rel: &str, rows: &[T]) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Config(e.to_string()))?;
        self.write(rel, &bytes)
    }

    fn load_corpus(&self) -> Result<Corpus, CliError> {
        let path = match &self.config.paths.corpus {
            Some(p) => p.clone(),
            None => self.input(CORPUS, "gen-corpus")?,
        };
        Ok(load_corpus(path)?)
    }

    fn load_cohort(&self) -> Result<(Vec<Patient>, DatasetBundle), CliError> {
        let corpus = self.load_corpus()?;
        let cohort = build_cohort(&corpus, &self.config.cohort)?;
        let dir = self.input(COHORT_DIR, "build-cohort")?;
        let bundle = DatasetBundle::load_manifest(dir, &cohort)?;
        Ok((cohort, bundle))
    }

    fn load_vocab(&self) -> Result<Vocabulary, CliError> {
        Ok(Vocabulary::load(self.input(VOCAB, "pretrain")?)?)
    }

    fn load_backbone(&self) -> Result<Encoder, CliError> {
        Ok(Encoder::load(self.input(BACKBONE, "pretrain")?)?)
    }

    fn load_embeddings(&self) -> Result<WemModel, CliError> {
        Ok(WemModel::load(self.input(EMBEDDINGS, "pretrain")?)?)
    }

    fn load_model(&self, model: ModelKind) -> Result<Box<dyn NoteClassifier + Send + Sync>, CliError> {
        let producer = match model {
            ModelKind::Ft => "train ft",
            ModelKind::St => "train st",
            ModelKind::Wem => "train wem",
        };
        let path = self.input(checkpoint_of(model), producer)?;
        Ok(match model {
            ModelKind::Ft => Box::new(FineTunedModel::load(path)?),
            ModelKind::St => Box::new(SoftPromptModel::load_adapter(self.load_backbone()?, path)?),
            ModelKind::Wem => Box::new(WemModel::load(path)?),
        })
    }
}

/// Parses configuration, runs the command and, with `--verify`, reruns it
/// into a scratch directory and compares every output byte for byte.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    }
    .with_seed(cli.global.seed);
    if let Some(out) = &cli.global.out {
        config.paths.out = out.clone();
    }
    config.validate()?;
    let dir = config.paths.out.clone();
    let ctx = Ctx::new(config.clone(), dir.clone(), dir.clone(), cli.global.parallel);
    execute(&cli.command, &ctx)?;

    if cli.global.verify {
        let scratch = tempfile::tempdir().map_err(|e| CliError::io(std::env::temp_dir(), e))?;
        let rerun = Ctx::new(config, dir.clone(), scratch.path().to_path_buf(), cli.global.parallel);
        execute(&cli.command, &rerun)?;
        let first = provenance::manifest_path(&dir, &cli.command.label());
        let second = provenance::manifest_path(scratch.path(), &cli.command.label());
        let mut drift = Vec::new();
        for rel in rerun.written.lock().expect("lock").iter() {
            if read(&dir.join(rel))? != read(&scratch.path().join(rel))? {
                drift.push(rel.clone());
            }
        }
        if read(&first)? != read(&second)? {
            drift.push(first.display().to_string());
        }
        if !drift.is_empty() {
            return Err(CliError::Verify(format!("outputs differ between runs: {}", drift.join(", "))));
        }
        eprintln!("verified: {} output(s) identical across reruns", rerun.written.lock().expect("lock").len());
    }
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

fn execute(command: &Command, ctx: &Ctx) -> Result<(), CliError> {
    match command {
        Command::GenCorpus => gen_corpus(ctx)?,
        Command::BuildCohort => build_cohort_cmd(ctx)?,
        Command::Pretrain => pretrain(ctx)?,
        Command::Train { model } => train(ctx, *model)?,
        Command::Evaluate { model } => evaluate_cmd(ctx, *model)?,
        Command::SweepImbalance { model } => sweep_imbalance(ctx, *model)?,
        Command::SweepFewshot { replicates } => sweep_fewshot(ctx, replicates.unwrap_or(ctx.config.eval.replicates))?,
        Command::Report => report(ctx)?,
    }
    let mut outputs = BTreeMap::new();
    for rel in ctx.written.lock().expect("lock").iter() {
        outputs.insert(rel.clone(), provenance::file_sha256(&ctx.output.join(rel))?);
    }
    Manifest {
        command: command.label(),
        config_hash: ctx.hash.clone(),
        seed: ctx.seed(),
        outputs,
    }
    .write(&ctx.output)?;
    Ok(())
}

fn gen_corpus(ctx: &Ctx) -> Result<(), CliError> {
    let corpus = generate(&ctx.config.generator)?;
    ctx.write(CORPUS, &corpus.to_bytes())
}

#[derive(Debug, Serialize)]
struct DatasetRow {
    dataset: String,
    split: String,
    n_patients: usize,
    n_pos: usize,
    n_neg: usize,
    notes_mean: String,
    notes_min: usize,
    notes_max: usize,
    config_hash: String,
    seed: u64,
}

fn dataset_row(ctx: &Ctx, dataset: &str, split: &str, patients: &[Patient]) -> DatasetRow {
    let counts: Vec<usize> = patients.iter().map(|p| p.notes.len()).collect();
    let n_pos = patients.iter().filter(|p| p.is_positive()).count();
    let mean = if counts.is_empty() {
        0.0
    } else {
        counts.iter().sum::<usize>() as f64 / counts.len() as f64
    };
    DatasetRow {
        dataset: dataset.into(),
        split: split.into(),
        n_patients: patients.len(),
        n_pos,
        n_neg: patients.len() - n_pos,
        notes_mean: format!("{mean:.1}"),
        notes_min: counts.iter().copied().min().unwrap_or(0),
        notes_max: counts.iter().copied().max().unwrap_or(0),
        config_hash: ctx.hash.clone(),
        seed: ctx.seed(),
    }
}

fn ratio_name(r: usize) -> String {
    format!("1:{r}")
}

fn build_cohort_cmd(ctx: &Ctx) -> Result<(), CliError> {
    let corpus = ctx.load_corpus()?;
    let cohort = build_cohort(&corpus, &ctx.config.cohort)?;
    let bundle = build_balanced(&cohort, &ctx.config.split)?;
    let dir = ctx.out_path(COHORT_DIR)?;
    ctx.written.lock().expect("lock").pop();
    bundle.save_manifest(&dir)?;
    for (name, _) in bundle.splits() {
        ctx.written.lock().expect("lock").push(format!("{COHORT_DIR}/{name}.txt"));
    }
    ctx.written.lock().expect("lock").push(format!("{COHORT_DIR}/seed"));

    let mut rows: Vec<DatasetRow> = bundle
        .splits()
        .iter()
        .map(|(name, split)| dataset_row(ctx, "bal", name, split))
        .collect();
    for &r in &ctx.config.eval.ratios {
        match build_imbalanced_test(&cohort, &bundle, r) {
            Ok(set) => rows.push(dataset_row(ctx, &ratio_name(r), "test_2", &set)),
            Err(notewise_core::Error::Infeasible(msg)) => eprintln!("warning: skipping {}: {msg}", ratio_name(r)),
            Err(e) => return Err(e.into()),
        }
    }
    for &k in &ctx.config.eval.few_shot_k {
        match build_fewshot(&bundle, k, ctx.seed()) {
            Ok(fs) => {
                rows.push(dataset_row(ctx, &format!("fs_{k}"), "train", &fs.train));
                rows.push(dataset_row(ctx, &format!("fs_{k}"), "valid", &fs.valid));
            }
            Err(e) => eprintln!("warning: skipping fs_{k}: {e}"),
        }
    }
    ctx.write_csv("datasets.csv", &rows)
}

fn bundle_texts(bundle: &DatasetBundle) -> Vec<&str> {
    bundle
        .all_patients()
        .flat_map(|p| p.notes.iter().map(|n| n.text.as_str()))
        .collect()
}

#[derive(Serialize)]
struct PretrainOutput<'a> {
    config_hash: &'a str,
    seed: u64,
    vocab_size: usize,
    mlm: notewise_core::encoder::PretrainReport,
    wem: notewise_core::wem::WemPretrainReport,
}

fn pretrain(ctx: &Ctx) -> Result<(), CliError> {
    let (_, bundle) = ctx.load_cohort()?;
    let texts = bundle_texts(&bundle);
    let vocab = build_vocab(texts.iter().copied(), ctx.config.model.max_vocab + SPECIAL_TOKENS.len())?;
    vocab.save(ctx.out_path(VOCAB)?)?;

    let mut enc_cfg = ctx.config.model.encoder.clone();
    enc_cfg.vocab_size = vocab.len();
    let ids: Vec<Vec<u32>> = texts
        .iter()
        .map(|t| encode(t, &vocab, enc_cfg.max_len).text_ids().to_vec())
        .collect();
    let (encoder, _, mlm) = pretrain_mlm(&ids, enc_cfg, &ctx.config.training.pretrain)?;
    encoder.save(ctx.out_path(BACKBONE)?)?;

    let (embeddings, wem) = pretrain_embeddings(texts.iter().copied(), &ctx.config.wem)?;
    let path = ctx.out_path(EMBEDDINGS)?;
    embeddings.save(&path)?;
    ctx.written.lock().expect("lock").push(format!("{EMBEDDINGS}.vocab.tsv"));

    ctx.write_json(
        "pretrain.json",
        &PretrainOutput {
            config_hash: &ctx.hash,
            seed: ctx.seed(),
            vocab_size: vocab.len(),
            mlm,
            wem,
        },
    )
}

#[derive(Serialize)]
struct TrainOutput<'a> {
    config_hash: &'a str,
    seed: u64,
    model: &'a str,
    report: notewise_core::encoder::TrainReport,
}

/// A trained model of any regime.
enum Trained {
    Ft(FineTunedModel),
    St(SoftPromptModel),
    Wem(WemModel),
}

impl Trained {
    fn classifier(&self) -> &(dyn NoteClassifier + Send + Sync) {
        match self {
            Trained::Ft(m) => m,
            Trained::St(m) => m,
            Trained::Wem(m) => m,
        }
    }
}

struct Resources {
    vocab: Option<Vocabulary>,
    backbone: Option<Encoder>,
    embeddings: Option<WemModel>,
}

impl Resources {
    fn load(ctx: &Ctx, models: &[ModelKind]) -> Result<Self, CliError> {
        let needs_plm = models.iter().any(|m| *m != ModelKind::Wem);
        let needs_wem = models.contains(&ModelKind::Wem);
        Ok(Resources {
            vocab: needs_plm.then(|| ctx.load_vocab()).transpose()?,
            backbone: needs_plm.then(|| ctx.load_backbone()).transpose()?,
            embeddings: needs_wem.then(|| ctx.load_embeddings()).transpose()?,
        })
    }
}

fn train_one(
    ctx: &Ctx,
    res: &Resources,
    model: ModelKind,
    train: &[Patient],
    valid: &[Patient],
    seed: u64,
) -> Result<(Trained, notewise_core::encoder::TrainReport), CliError> {
    let train = label_notes(train);
    let valid = label_notes(valid);
    let t = &ctx.config.training;
    Ok(match model {
        ModelKind::Ft => {
            let schedule = notewise_core::Schedule { seed, ..t.finetune.clone() };
            let backbone = res.backbone.clone().expect("backbone loaded");
            let (m, r) = finetune(backbone, res.vocab.as_ref().expect("vocab loaded"), &train, &valid, &schedule)?;
            (Trained::Ft(m), r)
        }
        ModelKind::St => {
            let schedule = notewise_core::Schedule { seed, ..t.soft_prompt.clone() };
            let backbone = res.backbone.clone().expect("backbone loaded");
            let (m, r) = soft_prompt_tune(
                backbone,
                res.vocab.as_ref().expect("vocab loaded"),
                &train,
                &valid,
                ctx.config.model.prompt_len,
                &schedule,
            )?;
            (Trained::St(m), r)
        }
        ModelKind::Wem => {
            let (m, r) = train_classifier(res.embeddings.clone().expect("embeddings loaded"), &train, &valid)?;
            (Trained::Wem(m), r)
        }
    })
}

fn train(ctx: &Ctx, model: ModelKind) -> Result<(), CliError> {
    let (_, bundle) = ctx.load_cohort()?;
    let res = Resources::load(ctx, &[model])?;
    let (trained, report) = train_one(ctx, &res, model, &bundle.train, &bundle.valid, ctx.seed())?;
    let rel = checkpoint_of(model);
    match &trained {
        Trained::Ft(m) => m.save(ctx.out_path(rel)?)?,
        Trained::St(m) => m.save_adapter(ctx.out_path(rel)?)?,
        Trained::Wem(m) => {
            m.save(ctx.out_path(rel)?)?;
            ctx.written.lock().expect("lock").push(format!("{rel}.vocab.tsv"));
        }
    }
    ctx.write_json(
        &format!("train_{}.json", model.name()),
        &TrainOutput {
            config_hash: &ctx.hash,
            seed: ctx.seed(),
            model: model.name(),
            report,
        },
    )
}

/// Per-note predictions for `patients`, in patient then note order.
fn predict(model: &(dyn NoteClassifier + Send + Sync), patients: &[Patient], parallel: bool) -> Result<PredictionSet, CliError> {
    let jobs: Vec<(&Patient, &notewise_core::Note)> =
        patients.iter().flat_map(|p| p.notes.iter().map(move |n| (p, n))).collect();
    let score = |(p, n): &(&Patient, &notewise_core::Note)| PredictionRecord {
        patient_id: p.patient_id.clone(),
        note_id: n.note_id.clone(),
        probability: model.predict_note(&n.text),
        label: p.label(),
    };
    let records: Vec<PredictionRecord> = if parallel {
        jobs.par_iter().map(score).collect()
    } else {
        jobs.iter().map(score).collect()
    };
    Ok(PredictionSet::new(records)?)
}

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

fn f4(x: f64) -> String {
    format!("{x:.4}")
}

#[derive(Debug, Serialize)]
struct MetricRow {
    split: String,
    level: &'static str,
    rule: String,
    auroc: String,
    auprc: String,
    brier_x100: String,
    n_pos: usize,
    n_neg: usize,
    config_hash: String,
    seed: u64,
}

fn metric_rows(ctx: &Ctx, split: &str, set: &PredictionSet, rules: &[AggregationRule]) -> Result<Vec<MetricRow>, CliError> {
    let mut rows = Vec::new();
    for &rule in rules {
        let report = evaluate(set, rule)?;
        for (level, m) in [("note", report.note), ("patient", report.patient)] {
            rows.push(MetricRow {
                split: split.into(),
                level,
                rule: rule.to_string(),
                auroc: f6(m.auroc),
                auprc: f6(m.auprc),
                brier_x100: f4(m.brier_x100()),
                n_pos: m.n_pos,
                n_neg: m.n_neg,
                config_hash: ctx.hash.clone(),
                seed: ctx.seed(),
            });
        }
    }
    Ok(rows)
}

fn evaluate_cmd(ctx: &Ctx, model: ModelKind) -> Result<(), CliError> {
    let (_, bundle) = ctx.load_cohort()?;
    let m = ctx.load_model(model)?;
    let set = predict(m.as_ref(), &bundle.test_1, ctx.parallel)?;
    let rows = metric_rows(ctx, "test_1", &set, &ctx.config.eval.rules)?;
    ctx.write_csv(&format!("metrics_{}.csv", model.name()), &rows)
}

#[derive(Debug, Serialize)]
struct ImbalanceRow {
    dataset: String,
    model: String,
    level: &'static str,
    rule: String,
    auroc: String,
    auprc: String,
    brier_x100: String,
    n_pos: usize,
    n_neg: usize,
    config_hash: String,
    seed: u64,
}

fn sweep_imbalance(ctx: &Ctx, model: ModelKind) -> Result<(), CliError> {
    let (cohort, bundle) = ctx.load_cohort()?;
    let mut datasets: Vec<(String, Vec<Patient>)> = vec![("bal".into(), bundle.test_2.clone())];
    for &r in &ctx.config.eval.ratios {
        datasets.push((ratio_name(r), build_imbalanced_test(&cohort, &bundle, r)?));
    }
    let m = ctx.load_model(model)?;
    // Every set contains test_2, so scoring the union once covers them all.
    let mut union: BTreeMap<&str, &Patient> = BTreeMap::new();
    for (_, set) in &datasets {
        for p in set {
            union.insert(&p.patient_id, p);
        }
    }
    let union: Vec<Patient> = union.into_values().cloned().collect();
    let scored = predict(m.as_ref(), &union, ctx.parallel)?;
    let by_note: HashMap<&str, f64> = scored
        .records()
        .iter()
        .map(|r| (r.note_id.as_str(), r.probability))
        .collect();

    let rule = ctx.config.eval.primary_rule();
    let mut rows = Vec::new();
    let row = |dataset: &str, model: &str, level: &'static str, auroc: f64, auprc: f64, brier: Option<f64>, n_pos, n_neg| ImbalanceRow {
        dataset: dataset.into(),
        model: model.into(),
        level,
        rule: rule.to_string(),
        auroc: f6(auroc),
        auprc: f6(auprc),
        brier_x100: brier.map(|b| f4(100.0 * b)).unwrap_or_default(),
        n_pos,
        n_neg,
        config_hash: ctx.hash.clone(),
        seed: ctx.seed(),
    };
    for (i, (name, set)) in datasets.iter().enumerate() {
        let records: Vec<PredictionRecord> = set
            .iter()
            .flat_map(|p| {
                p.notes.iter().map(|n| PredictionRecord {
                    patient_id: p.patient_id.clone(),
                    note_id: n.note_id.clone(),
                    probability: by_note[n.note_id.as_str()],
                    label: p.label(),
                })
            })
            .collect();
        let report = evaluate(&PredictionSet::new(records)?, rule)?;
        let (n_pos, n_neg) = (report.patient.n_pos, report.patient.n_neg);
        let (a, p) = analytic_random(n_pos, n_neg);
        rows.push(row(name, "random", "patient", a, p, None, n_pos, n_neg));
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed().wrapping_add(i as u64));
        let mc = random_scores_metrics(n_pos, n_neg, &mut rng)?;
        rows.push(row(name, "random_uniform", "patient", mc.auroc, mc.auprc, Some(mc.brier), n_pos, n_neg));
        for (level, lm) in [("note", report.note), ("patient", report.patient)] {
            rows.push(row(name, model.name(), level, lm.auroc, lm.auprc, Some(lm.brier), lm.n_pos, lm.n_neg));
        }
    }
    ctx.write_csv(&format!("imbalance_{}.csv", model.name()), &rows)
}

#[derive(Debug, Serialize)]
struct FewShotRow {
    k: usize,
    model: &'static str,
    regime: &'static str,
    replicate: usize,
    train_pos: usize,
    train_neg: usize,
    valid_pos: usize,
    valid_neg: usize,
    auroc: String,
    auprc: String,
    config_hash: String,
    seed: u64,
}

/// (model family, regime, trainer) for each few-shot cell.
const FEWSHOT_CELLS: [(&str, &str, ModelKind); 3] = [
    ("plm", "ft", ModelKind::Ft),
    ("plm", "st", ModelKind::St),
    ("wem", "ft", ModelKind::Wem),
];

fn sweep_fewshot(ctx: &Ctx, replicates: usize) -> Result<(), CliError> {
    if replicates == 0 {
        return Err(CliError::Config("replicates must be positive".into()));
    }
    let (_, bundle) = ctx.load_cohort()?;
    let res = Resources::load(ctx, &[ModelKind::Ft, ModelKind::Wem])?;
    let rule = ctx.config.eval.primary_rule();
    let mut cells = Vec::new();
    for &k in &ctx.config.eval.few_shot_k {
        for r in 0..replicates {
            for cell in FEWSHOT_CELLS {
                cells.push((k, r, cell));
            }
        }
    }
    let run_cell = |&(k, r, (family, regime, kind)): &(usize, usize, (&'static str, &'static str, ModelKind))| -> Result<FewShotRow, CliError> {
        let seed = ctx.seed().wrapping_add(r as u64);
        let fs = build_fewshot(&bundle, k, seed)?;
        let (trained, _) = train_one(ctx, &res, kind, &fs.train, &fs.valid, seed)?;
        let set = predict(trained.classifier(), &bundle.test_1, false)?;
        let report = evaluate(&set, rule)?;
        let pos = |s: &[Patient]| s.iter().filter(|p| p.is_positive()).count();
        Ok(FewShotRow {
            k,
            model: family,
            regime,
            replicate: r,
            train_pos: pos(&fs.train),
            train_neg: fs.train.len() - pos(&fs.train),
            valid_pos: pos(&fs.valid),
            valid_neg: fs.valid.len() - pos(&fs.valid),
            auroc: f6(report.patient.auroc),
            auprc: f6(report.patient.auprc),
            config_hash: ctx.hash.clone(),
            seed: ctx.seed(),
        })
    };
    let rows: Vec<FewShotRow> = if ctx.parallel {
        cells.par_iter().map(run_cell).collect::<Result<_, _>>()?
    } else {
        cells.iter().map(run_cell).collect::<Result<_, _>>()?
    };
    ctx.write_csv("fewshot.csv", &rows)
}

#[derive(Debug, Serialize)]
struct ReportRow {
    source: String,
    model: String,
    dataset: String,
    level: String,
    rule: String,
    auroc: String,
    auprc: String,
    brier_x100: String,
    n_pos: String,
    n_neg: String,
    config_hash: String,
    seed: u64,
}

fn read_csv(path: &Path) -> Result<Vec<BTreeMap<String, String>>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(CliError::from)).collect()
}

fn report(ctx: &Ctx) -> Result<(), CliError> {
    let manifests = provenance::read_all(&ctx.input)?;
    if manifests.is_empty() {
        return Err(CliError::MissingInput {
            path: ctx.input.join(provenance::MANIFEST_DIR),
            producer: "evaluate",
        });
    }
    for m in &manifests {
        if m.config_hash != ctx.hash || m.seed != ctx.seed() {
            return Err(CliError::Mismatch(format!(
                "{} was produced with config {} (seed {}), this run is {} (seed {})",
                m.command, m.config_hash, m.seed, ctx.hash, ctx.seed()
            )));
        }
    }
    let mut rows = Vec::new();
    let g = |row: &BTreeMap<String, String>, key: &str| row.get(key).cloned().unwrap_or_default();
    let mut sources: Vec<(String, PathBuf)> = Vec::new();
    for m in &manifests {
        for rel in m.outputs.keys() {
            if rel.ends_with(".csv") && rel != "report.csv" && rel != "datasets.csv" {
                sources.push((rel.clone(), ctx.input.join(rel)));
            }
        }
    }
    for (rel, path) in sources {
        let table = read_csv(&path)?;
        for row in &table {
            if g(row, "config_hash") != ctx.hash {
                return Err(CliError::Mismatch(format!("{rel} carries config {}", g(row, "config_hash"))));
            }
        }
        let stem = rel.trim_end_matches(".csv");
        if stem == "fewshot" {
            // Mean over replicates per (k, model, regime).
            let mut groups: BTreeMap<(usize, String, String), (f64, f64, usize)> = BTreeMap::new();
            for row in &table {
                let k: usize = g(row, "k").parse().map_err(|_| CliError::Config(format!("{rel}: bad k")))?;
                let e = groups.entry((k, g(row, "model"), g(row, "regime"))).or_default();
                e.0 += g(row, "auroc").parse::<f64>().unwrap_or(f64::NAN);
                e.1 += g(row, "auprc").parse::<f64>().unwrap_or(f64::NAN);
                e.2 += 1;
            }
            for ((k, model, regime), (a, p, n)) in groups {
                rows.push(ReportRow {
                    source: "fewshot".into(),
                    model: format!("{model}-{regime}"),
                    dataset: format!("fs_{k}"),
                    level: "patient".into(),
                    rule: ctx.config.eval.primary_rule().to_string(),
                    auroc: f6(a / n as f64),
                    auprc: f6(p / n as f64),
                    brier_x100: String::new(),
                    n_pos: String::new(),
                    n_neg: String::new(),
                    config_hash: ctx.hash.clone(),
                    seed: ctx.seed(),
                });
            }
            continue;
        }
        let (source, model) = stem.split_once('_').unwrap_or((stem, ""));
        for row in &table {
            rows.push(ReportRow {
                source: source.into(),
                model: row.get("model").cloned().unwrap_or_else(|| model.to_string()),
                dataset: row.get("dataset").or(row.get("split")).cloned().unwrap_or_default(),
                level: g(row, "level"),
                rule: g(row, "rule"),
                auroc: g(row, "auroc"),
                auprc: g(row, "auprc"),
                brier_x100: g(row, "brier_x100"),
                n_pos: g(row, "n_pos"),
                n_neg: g(row, "n_neg"),
                config_hash: ctx.hash.clone(),
                seed: ctx.seed(),
            });
        }
    }
    ctx.write_csv("report.csv", &rows)
}
