//! Run configuration and the staged pipeline behind the command line.
//!
//! Every stage reads its inputs from and writes its outputs to one run
//! directory, so stages can be re-run individually:
//!
//! | stage      | reads                                  | writes                               |
//! |------------|----------------------------------------|--------------------------------------|
//! | synth      |                                        | `roster.jsonl`, `truth.jsonl`        |
//! | cohort     | roster                                 | `cohort/`                            |
//! | preprocess | roster, `cohort/eligible.json`         | `corpus.jsonl`                       |
//! | vocab      | corpus                                 | `vocab.txt`                          |
//! | pretrain   | corpus, vocab                          | `pretrain/`                          |
//! | finetune   | cohorts, vocab, pretrained checkpoint  | `finetune/<setting>/`                |
//! | evaluate   | cohorts, vocab, fine-tuned models      | `eval/`                              |

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cohort::{
    apply_exclusions, build_cohort, cohort_summary, collect_sections, render_cohort_file, CodeSets,
    LabeledCohort, LateConverterPolicy, Setting,
};
use crate::encoder::{
    load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, EncoderConfig, EncoderParams,
};
use crate::error::{Error, Result};
use crate::eval::{
    best_f1_threshold, bow_features, build_bow_vocab, evaluate, render_comparison, split_dataset,
    train_logreg, ComparisonRow, LogRegConfig, Metrics, SparseVec, SplitPlan,
};
use crate::finetune::{patient_input, predict_all, run_finetune, FinetuneConfig, PatientInput};
use crate::pretrain::{final_checkpoint_path, run_pretraining, PretrainConfig, TokenizedCorpus};
use crate::report::{attention_report, export_attention_report};
use crate::rng;
use crate::synth::{generate_roster, roster_from_jsonl, PatientRecord, SynthConfig};
use crate::tokenizer::{build_vocab, Vocab};

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    /// Setting names: `no-restrict`, `6-month`, `1-year`, `2-year` or `<n>-day`.
    pub settings: Vec<String>,
    pub late_converters: LateConverterPolicy,
    pub codes: CodeSets,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            settings: ["no-restrict", "6-month", "1-year", "2-year"]
                .map(String::from)
                .to_vec(),
            late_converters: LateConverterPolicy::default(),
            codes: CodeSets::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub min_freq: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self { min_freq: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Pick each model's F1 threshold on the validation split instead of
    /// using `finetune.threshold`.
    pub tune_threshold: bool,
    pub bow_min_freq: usize,
    pub bow_max_words: usize,
    pub logreg: LogRegConfig,
    /// Test patients of the first setting that get an attention report.
    pub attention_patients: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tune_threshold: false,
            bow_min_freq: crate::eval::BOW_MIN_FREQ,
            bow_max_words: crate::eval::BOW_MAX_WORDS,
            logreg: LogRegConfig::default(),
            attention_patients: 3,
        }
    }
}

/// Every parameter of a run. `encoder.vocab_size` caps the vocabulary; the
/// model is built with the size actually reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. Module seeds left unset in the file inherit it.
    pub seed: u64,
    pub synth: SynthConfig,
    pub cohort: CohortConfig,
    pub vocab: VocabConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            synth: SynthConfig::default(),
            cohort: CohortConfig::default(),
            vocab: VocabConfig::default(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Record keys of `user` absent from `reference`, and drop them.
fn strip_unknown(
    user: &mut toml::Table,
    reference: &toml::Table,
    prefix: &str,
    out: &mut Vec<String>,
) {
    let keys: Vec<String> = user.keys().cloned().collect();
    for k in keys {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match reference.get(&k) {
            None => {
                out.push(format!("unknown key `{path}`"));
                user.remove(&k);
            }
            Some(toml::Value::Table(r)) => {
                if let Some(toml::Value::Table(u)) = user.get_mut(&k) {
                    strip_unknown(u, r, &path, out);
                }
            }
            Some(_) => {}
        }
    }
}

fn has_key(table: &toml::Table, section: &str, key: &str) -> bool {
    table
        .get(section)
        .and_then(|v| v.as_table())
        .is_some_and(|t| t.contains_key(key))
}

impl RunConfig {
    /// Parse, resolve seeds and validate. Unknown keys and invalid values
    /// are reported together.
    pub fn from_toml_str(text: &str, seed_override: Option<u64>) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| Error::config(format!("config is not valid TOML: {e}")))?;
        let reference =
            toml::Table::try_from(RunConfig::default()).expect("default config serializes");
        let mut errs = Vec::new();
        strip_unknown(&mut table, &reference, "", &mut errs);
        let explicit: Vec<bool> = [
            ("synth", "seed"),
            ("pretrain", "seed"),
            ("finetune", "seed"),
        ]
        .iter()
        .map(|&(s, k)| has_key(&table, s, k))
        .collect();
        let mut cfg: RunConfig = match table.try_into() {
            Ok(c) => c,
            Err(e) => {
                errs.push(e.to_string().trim().to_string());
                return Err(Error::Config(errs));
            }
        };
        if let Some(seed) = seed_override {
            cfg.seed = seed;
        }
        let master = cfg.seed;
        for (i, slot) in [
            &mut cfg.synth.seed,
            &mut cfg.pretrain.seed,
            &mut cfg.finetune.seed,
        ]
        .into_iter()
        .enumerate()
        {
            if seed_override.is_some() || !explicit[i] {
                *slot = master;
            }
        }
        errs.extend(cfg.validation_errors());
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let text = read_text(path)?;
        Self::from_toml_str(&text, seed_override).map_err(|e| match e {
            Error::Config(v) => Error::Config(
                v.into_iter()
                    .map(|m| format!("{}: {m}", path.display()))
                    .collect(),
            ),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn settings(&self) -> Result<Vec<Setting>> {
        self.cohort
            .settings
            .iter()
            .map(|s| {
                Setting::parse(s)
                    .ok_or_else(|| Error::config(format!("cohort.settings: unknown setting `{s}`")))
            })
            .collect()
    }

    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if let Err(Error::Config(v)) = self.synth.validate() {
            errs.extend(v);
        }
        if self.cohort.settings.is_empty() {
            errs.push("cohort.settings must not be empty".into());
        }
        let mut seen = BTreeSet::new();
        for s in &self.cohort.settings {
            match Setting::parse(s) {
                None => errs.push(format!("cohort.settings: unknown setting `{s}`")),
                Some(p) if !seen.insert(p) => {
                    errs.push(format!("cohort.settings: duplicate setting `{s}`"))
                }
                Some(_) => {}
            }
        }
        if self.vocab.min_freq == 0 {
            errs.push("vocab.min_freq must be positive".into());
        }
        errs.extend(self.encoder.validation_errors());
        errs.extend(self.pretrain.validation_errors());
        errs.extend(self.finetune.validation_errors());
        if self.eval.bow_min_freq == 0 {
            errs.push("eval.bow_min_freq must be positive".into());
        }
        if self.eval.bow_max_words == 0 {
            errs.push("eval.bow_max_words must be positive".into());
        }
        if !(self.eval.logreg.l2 >= 0.0 && self.eval.logreg.l2.is_finite()) {
            errs.push(format!(
                "eval.logreg.l2 must be finite and >= 0, got {}",
                self.eval.logreg.l2
            ));
        }
        if !(self.eval.logreg.grad_tol > 0.0) {
            errs.push(format!(
                "eval.logreg.grad_tol must be positive, got {}",
                self.eval.logreg.grad_tol
            ));
        }
        errs
    }

    /// The encoder configuration for a built vocabulary.
    pub fn encoder_for(&self, vocab: &Vocab) -> EncoderConfig {
        EncoderConfig {
            vocab_size: vocab.len(),
            ..self.encoder.clone()
        }
    }
}

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }
    pub fn roster(&self) -> PathBuf {
        self.root.join("roster.jsonl")
    }
    pub fn truth(&self) -> PathBuf {
        self.root.join("truth.jsonl")
    }
    pub fn exclusions(&self) -> PathBuf {
        self.root.join("cohort/exclusions.json")
    }
    pub fn eligible(&self) -> PathBuf {
        self.root.join("cohort/eligible.json")
    }
    pub fn cohort(&self, s: Setting) -> PathBuf {
        self.root.join(format!("cohort/{s}.json"))
    }
    pub fn cohort_labels(&self) -> PathBuf {
        self.root.join("cohort/labels.tsv")
    }
    pub fn cohort_summary(&self) -> PathBuf {
        self.root.join("cohort/summary.json")
    }
    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus.jsonl")
    }
    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.txt")
    }
    pub fn pretrain_dir(&self) -> PathBuf {
        self.root.join("pretrain")
    }
    pub fn pretrained(&self) -> PathBuf {
        final_checkpoint_path(&self.pretrain_dir())
    }
    pub fn split(&self, s: Setting) -> PathBuf {
        self.root.join(format!("finetune/{s}/split.json"))
    }
    pub fn model(&self, s: Setting) -> PathBuf {
        self.root.join(format!("finetune/{s}/model.ckpt"))
    }
    pub fn training_report(&self, s: Setting) -> PathBuf {
        self.root.join(format!("finetune/{s}/report.csv"))
    }
    pub fn metrics(&self, s: Setting) -> PathBuf {
        self.root.join(format!("eval/{s}/metrics.json"))
    }
    pub fn scores(&self, s: Setting) -> PathBuf {
        self.root.join(format!("eval/{s}/scores.csv"))
    }
    pub fn comparison(&self) -> PathBuf {
        self.root.join("eval/comparison.csv")
    }
    pub fn attention(&self, patient_id: &str) -> PathBuf {
        self.root.join(format!("eval/attention/{patient_id}.xhtml"))
    }
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| Error::format(path.display().to_string(), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(path.display().to_string(), e))?;
    s.push('\n');
    write_text(path, &s)
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_text(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::format(format!("{} line {}", path.display(), i + 1), e))
        })
        .collect()
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut s = String::new();
    for it in items {
        s.push_str(
            &serde_json::to_string(it).map_err(|e| Error::format(path.display().to_string(), e))?,
        );
        s.push('\n');
    }
    write_text(path, &s)
}

/// Create the run directory and record the resolved config, refusing to
/// mix runs with different configs in one directory.
pub fn prepare_run(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let text = cfg.to_toml();
    let path = layout.config();
    if path.exists() {
        let existing = read_text(&path)?;
        if existing != text {
            return Err(Error::config(format!(
                "{} was written by a different config; use a fresh output directory",
                path.display()
            )));
        }
        return Ok(());
    }
    write_text(&path, &text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Cohort,
    Preprocess,
    Vocab,
    Pretrain,
    Finetune,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Synth,
        Stage::Cohort,
        Stage::Preprocess,
        Stage::Vocab,
        Stage::Pretrain,
        Stage::Finetune,
        Stage::Evaluate,
    ];
}

pub fn run_stage(stage: Stage, cfg: &RunConfig, layout: &Layout) -> Result<()> {
    prepare_run(cfg, layout)?;
    match stage {
        Stage::Synth => synth_stage(cfg, layout),
        Stage::Cohort => cohort_stage(cfg, layout),
        Stage::Preprocess => preprocess_stage(cfg, layout),
        Stage::Vocab => vocab_stage(cfg, layout),
        Stage::Pretrain => pretrain_stage(cfg, layout),
        Stage::Finetune => finetune_stage(cfg, layout),
        Stage::Evaluate => evaluate_stage(cfg, layout).map(|_| ()),
    }
}

/// All stages in order; returns the comparison rows.
pub fn run_pipeline(cfg: &RunConfig, layout: &Layout) -> Result<Vec<ComparisonRow>> {
    prepare_run(cfg, layout)?;
    for stage in &Stage::ALL[..6] {
        log::info!("stage {stage:?}");
        run_stage(*stage, cfg, layout)?;
    }
    log::info!("stage Evaluate");
    evaluate_stage(cfg, layout)
}

fn synth_stage(cfg: &RunConfig, l: &Layout) -> Result<()> {
    let roster = generate_roster(&cfg.synth)?;
    write_text(&l.roster(), &roster.to_jsonl())?;
    write_jsonl(&l.truth(), &roster.truth)
}

fn load_roster(l: &Layout) -> Result<Vec<PatientRecord>> {
    roster_from_jsonl(&read_text(&l.roster())?)
}

fn cohort_stage(cfg: &RunConfig, l: &Layout) -> Result<()> {
    let patients = load_roster(l)?;
    let codes = &cfg.cohort.codes;
    let (eligible, report) = apply_exclusions(&patients, codes)?;
    write_json(&l.exclusions(), &report)?;
    let ids: Vec<&str> = eligible
        .iter()
        .map(|&i| patients[i].patient_id.as_str())
        .collect();
    write_json(&l.eligible(), &ids)?;
    let mut cohorts = Vec::new();
    let mut summaries = Vec::new();
    for s in cfg.settings()? {
        let c = build_cohort(&patients, &eligible, s, codes, cfg.cohort.late_converters);
        write_json(&l.cohort(s), &c)?;
        summaries.push(cohort_summary(&c, &patients, codes));
        cohorts.push(c);
    }
    write_text(&l.cohort_labels(), &render_cohort_file(&cohorts))?;
    write_json(&l.cohort_summary(), &summaries)
}

/// One note per line, each a JSON array of its sections.
fn preprocess_stage(cfg: &RunConfig, l: &Layout) -> Result<()> {
    let patients = load_roster(l)?;
    let ids: Vec<String> = read_json(&l.eligible())?;
    let by_id: HashMap<&str, &PatientRecord> = patients
        .iter()
        .map(|p| (p.patient_id.as_str(), p))
        .collect();
    let mut notes: Vec<Vec<String>> = Vec::new();
    for id in &ids {
        let p = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::input(format!("eligible patient {id} is not in the roster")))?;
        let mut current = None;
        for s in collect_sections(p, &cfg.cohort.codes) {
            if current != Some(s.note_index) {
                notes.push(Vec::new());
                current = Some(s.note_index);
            }
            notes.last_mut().expect("note started").push(s.text);
        }
    }
    write_jsonl(&l.corpus(), &notes)
}

fn load_corpus(l: &Layout) -> Result<Vec<Vec<String>>> {
    read_jsonl(&l.corpus())
}

fn vocab_stage(cfg: &RunConfig, l: &Layout) -> Result<()> {
    let notes = load_corpus(l)?;
    let sections: Vec<&String> = notes.iter().flatten().collect();
    let vocab = build_vocab(&sections, cfg.encoder.vocab_size, cfg.vocab.min_freq)?;
    write_text(&l.vocab(), &vocab.to_text())
}

fn load_vocab(l: &Layout) -> Result<Vocab> {
    Vocab::from_text(&read_text(&l.vocab())?)
}

fn pretrain_stage(cfg: &RunConfig, l: &Layout) -> Result<()> {
    let notes = load_corpus(l)?;
    let vocab = load_vocab(l)?;
    let corpus = TokenizedCorpus::new(&notes, &vocab);
    let enc = cfg.encoder_for(&vocab);
    run_pretraining(&corpus, &enc, &cfg.pretrain, Some(&l.pretrain_dir()))?;
    Ok(())
}

/// Labeled patients of one setting, in cohort order.
struct SettingData {
    cohort: LabeledCohort,
    patients: Vec<PatientInput>,
    labels: Vec<bool>,
}

fn load_setting(l: &Layout, s: Setting, vocab: &Vocab, max_len: usize) -> Result<SettingData> {
    let cohort: LabeledCohort = read_json(&l.cohort(s))?;
    let patients = cohort
        .labeled()
        .map(|(e, _)| patient_input(e, vocab, max_len))
        .collect::<Result<Vec<_>>>()?;
    let labels = patients.iter().map(|p| p.label).collect();
    Ok(SettingData {
        cohort,
        patients,
        labels,
    })
}

/// Each setting gets its own split stream under the master seed.
pub fn split_seed(seed: u64, s: Setting) -> u64 {
    rng::derive_seed(seed, &format!("split-{s}"))
}

fn finetune_stage(cfg: &RunConfig, l: &Layout) -> Result<()> {
    let vocab = load_vocab(l)?;
    let enc = cfg.encoder_for(&vocab);
    let init = load_checkpoint_for(&l.pretrained(), &enc)?.params;
    for s in cfg.settings()? {
        let data = load_setting(l, s, &vocab, enc.max_len)?;
        let split = split_dataset(&data.labels, split_seed(cfg.seed, s))?;
        log::info!(
            "finetune {s}: {} train, {} validation, {} test patients",
            split.train.len(),
            split.validation.len(),
            split.test.len()
        );
        let out = run_finetune(&data.patients, &split, &init, &cfg.finetune)?;
        write_json(&l.split(s), &split)?;
        write_text(&l.training_report(s), &out.report_csv())?;
        let ck = Checkpoint {
            params: out.params,
            optimizer: None,
            meta: vec![
                ("stage".into(), "finetune".into()),
                ("setting".into(), s.to_string()),
                ("best_epoch".into(), out.best_epoch.to_string()),
            ],
        };
        save_checkpoint(&ck, &l.model(s))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub model: String,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingMetrics {
    pub setting: String,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub test_cases: usize,
    pub best_epoch: Option<usize>,
    pub models: Vec<ModelMetrics>,
}

pub const ADBERT_MODEL: &str = "adbert";
pub const BOW_MODEL: &str = "bow-lr";

fn threshold_for(
    cfg: &RunConfig,
    scores: &[f64],
    labels: &[bool],
    split: &SplitPlan,
) -> Result<f64> {
    if !cfg.eval.tune_threshold {
        return Ok(cfg.finetune.threshold);
    }
    let s: Vec<f64> = split.validation.iter().map(|&i| scores[i]).collect();
    let y: Vec<bool> = split.validation.iter().map(|&i| labels[i]).collect();
    best_f1_threshold(&s, &y)
}

/// BOW+LR scores for all patients, trained on the training split.
pub fn bow_scores(
    cohort: &LabeledCohort,
    labels: &[bool],
    split: &SplitPlan,
    cfg: &EvalConfig,
) -> Result<Vec<f64>> {
    let docs: Vec<Vec<&str>> = cohort
        .labeled()
        .map(|(e, _)| e.sections.iter().map(|s| s.text.as_str()).collect())
        .collect();
    let train_docs: Vec<Vec<&str>> = split.train.iter().map(|&i| docs[i].clone()).collect();
    let vocab = build_bow_vocab(&train_docs, cfg.bow_min_freq, cfg.bow_max_words);
    let feats: Vec<SparseVec> = docs.iter().map(|d| bow_features(d, &vocab)).collect();
    let xs: Vec<SparseVec> = split.train.iter().map(|&i| feats[i].clone()).collect();
    let ys: Vec<bool> = split.train.iter().map(|&i| labels[i]).collect();
    let model = train_logreg(&xs, &ys, &vocab, &cfg.logreg)?;
    Ok(feats.iter().map(|f| model.score(f)).collect())
}

fn evaluate_stage(cfg: &RunConfig, l: &Layout) -> Result<Vec<ComparisonRow>> {
    let vocab = load_vocab(l)?;
    let enc = cfg.encoder_for(&vocab);
    let mut rows = Vec::new();
    for (k, s) in cfg.settings()?.into_iter().enumerate() {
        let data = load_setting(l, s, &vocab, enc.max_len)?;
        let split: SplitPlan = read_json(&l.split(s))?;
        if split.len() != data.patients.len() {
            return Err(Error::input(format!(
                "{} covers {} patients but the {s} cohort has {}",
                l.split(s).display(),
                split.len(),
                data.patients.len()
            )));
        }
        let ck = load_checkpoint_for(&l.model(s), &enc)?;
        let all: Vec<usize> = (0..data.patients.len()).collect();
        let ad = predict_all(&ck.params, &data.patients, &all)?;
        let bow = bow_scores(&data.cohort, &data.labels, &split, &cfg.eval)?;
        let mut models = Vec::new();
        for (name, scores) in [(ADBERT_MODEL, &ad), (BOW_MODEL, &bow)] {
            let t = threshold_for(cfg, scores, &data.labels, &split)?;
            let m = evaluate(scores, &data.labels, &split, t)?;
            rows.push(ComparisonRow {
                model: name.into(),
                setting: s.to_string(),
                metrics: m,
            });
            models.push(ModelMetrics {
                model: name.into(),
                metrics: m,
            });
        }
        let record = SettingMetrics {
            setting: s.to_string(),
            n_train: split.train.len(),
            n_validation: split.validation.len(),
            n_test: split.test.len(),
            test_cases: split.test.iter().filter(|&&i| data.labels[i]).count(),
            best_epoch: ck.meta("best_epoch").and_then(|v| v.parse().ok()),
            models,
        };
        write_json(&l.metrics(s), &record)?;
        write_text(&l.scores(s), &scores_csv(&data.patients, &split, &ad, &bow))?;
        if k == 0 {
            write_attention(cfg, l, &ck.params, &vocab, &data, &split)?;
        }
    }
    write_text(&l.comparison(), &render_comparison(&rows))?;
    Ok(rows)
}

fn scores_csv(patients: &[PatientInput], split: &SplitPlan, ad: &[f64], bow: &[f64]) -> String {
    let mut part = vec![""; patients.len()];
    for (name, idx) in [
        ("train", &split.train),
        ("validation", &split.validation),
        ("test", &split.test),
    ] {
        for &i in idx {
            part[i] = name;
        }
    }
    let mut out = format!("patient_id,label,split,{ADBERT_MODEL},{BOW_MODEL}\n");
    for (i, p) in patients.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            p.patient_id,
            u8::from(p.label),
            part[i],
            ad[i],
            bow[i]
        );
    }
    out
}

fn write_attention(
    cfg: &RunConfig,
    l: &Layout,
    params: &EncoderParams,
    vocab: &Vocab,
    data: &SettingData,
    split: &SplitPlan,
) -> Result<()> {
    let entries: Vec<_> = data.cohort.labeled().map(|(e, _)| e).collect();
    for &i in split.test.iter().take(cfg.eval.attention_patients) {
        let e = entries[i];
        let mut seen = BTreeSet::new();
        let sections: Vec<&str> = e
            .sections
            .iter()
            .map(|s| s.text.as_str())
            .filter(|t| seen.insert(*t))
            .collect();
        let report = attention_report(
            params,
            vocab,
            &e.patient_id,
            &sections,
            params.config.max_len,
        )?;
        export_attention_report(&report, &l.attention(&e.patient_id))?;
    }
    Ok(())
}

/// Load a stored per-setting metrics record.
pub fn load_metrics(l: &Layout, s: Setting) -> Result<SettingMetrics> {
    read_json(&l.metrics(s))
}

/// Load a stored fine-tuned model.
pub fn load_model(l: &Layout, s: Setting) -> Result<Checkpoint> {
    load_checkpoint(&l.model(s))
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::MissingArtifact(_) => 3,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml(), None).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml_str("", None).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_all_reported() {
        let err = RunConfig::from_toml_str("sed = 1\n[pretrain]\nstpes = 3\n[nope]\nx = 1\n", None)
            .unwrap_err();
        let Error::Config(v) = err else {
            panic!("{err}")
        };
        assert_eq!(v.len(), 3, "{v:?}");
        assert!(v.iter().any(|m| m.contains("pretrain.stpes")));
    }

    #[test]
    fn unknown_keys_and_bad_values_together() {
        let err =
            RunConfig::from_toml_str("bogus = 1\n[finetune]\nbatch_size = 1\n", None).unwrap_err();
        let Error::Config(v) = err else {
            panic!("{err}")
        };
        assert_eq!(v.len(), 2, "{v:?}");
        assert_eq!(exit_code(&Error::Config(v)), 2);
    }

    #[test]
    fn seeds_inherit_and_override() {
        let cfg = RunConfig::from_toml_str("seed = 3\n[pretrain]\nseed = 9\n", None).unwrap();
        assert_eq!(
            (cfg.synth.seed, cfg.pretrain.seed, cfg.finetune.seed),
            (3, 9, 3)
        );
        let cfg = RunConfig::from_toml_str("seed = 3\n[pretrain]\nseed = 9\n", Some(5)).unwrap();
        assert_eq!(
            (
                cfg.seed,
                cfg.synth.seed,
                cfg.pretrain.seed,
                cfg.finetune.seed
            ),
            (5, 5, 5, 5)
        );
        // The resolved form reproduces itself.
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml(), None).unwrap(), cfg);
    }

    #[test]
    fn bad_setting_rejected() {
        let err = RunConfig::from_toml_str(
            "[cohort]\nsettings = [\"3-week\", \"no-restrict\", \"no-restrict\"]\n",
            None,
        )
        .unwrap_err();
        let Error::Config(v) = err else {
            panic!("{err}")
        };
        assert_eq!(v.len(), 2, "{v:?}");
    }

    #[test]
    fn missing_artifacts_named() {
        let dir = tempfile::tempdir().unwrap();
        let l = Layout::new(dir.path());
        let cfg = RunConfig::from_toml_str("[synth]\nn_patients = 10\n", None).unwrap();
        let err = run_stage(Stage::Cohort, &cfg, &l).unwrap_err();
        assert_eq!(exit_code(&err), 3);
        assert!(err.to_string().contains("roster.jsonl"));
        assert!(RunConfig::load(&dir.path().join("absent.toml"), None).is_err());
    }

    #[test]
    fn run_directory_refuses_a_different_config() {
        let dir = tempfile::tempdir().unwrap();
        let l = Layout::new(dir.path());
        prepare_run(&RunConfig::default(), &l).unwrap();
        prepare_run(&RunConfig::default(), &l).unwrap();
        let other = RunConfig::from_toml_str("seed = 99\n", None).unwrap();
        assert_eq!(exit_code(&prepare_run(&other, &l).unwrap_err()), 2);
    }
}
