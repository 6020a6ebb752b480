//! End-to-end stages over files: each reads its inputs, does its work and
//! writes a fixed set of outputs into a directory. The command-line tool is
//! a thin layer over these functions.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::awareness::{
    awareness_from_imported, extract_documents, import_traces, read_awareness_csv,
    write_awareness_csv, AwarenessRow, ExtractOptions,
};
use crate::binio::{read_file, write_file};
use crate::classifier::{evaluate, train_classifier, AwarenessClassifier, ClassifierConfig, Evaluation, LabeledVector};
use crate::digest::sha256_hex;
use crate::error::{KamirError, Result};
use crate::fmt::sig9;
use crate::label::{label_field, Label};
use crate::lm::{encode, load_checkpoint, pretrain, save_checkpoint, LmConfig, MiniLmModel, PretrainConfig};
use crate::report::{group_profiles, project_2d, render_report, GroupedVector};
use crate::rng::SeededRng;
use crate::selection::{
    check_stage_compat, export_manifest, ingest_corpus, label_corpus, load_manifest, make_splits,
    Corpus, DocumentFailure, Group, LabelingOutcome,
};
use crate::sft::{
    group_dynamics, read_summary_csv, sft_train, write_dynamics_csv, write_summary_csv, LoraConfig,
    SftConfig, SftExample,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct PretrainStage {
    #[serde(flatten)]
    pub train: PretrainConfig,
    pub seed: u64,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierStage {
    #[serde(flatten)]
    pub train: ClassifierConfig,
    /// Held-out share of each class.
    pub test_fraction: f64,
    pub split_seed: u64,
}

impl Default for ClassifierStage {
    fn default() -> Self {
        ClassifierStage {
            train: ClassifierConfig::default(),
            test_fraction: 0.3,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectStage {
    pub seed: u64,
    pub random_size: Option<usize>,
}

/// Every tunable of every stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub model: LmConfig,
    pub pretrain: PretrainStage,
    pub extract: ExtractOptions,
    pub classifier: ClassifierStage,
    pub select: SelectStage,
    pub lora: LoraConfig,
    pub sft: SftConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.extract.chunk_len == 0 || self.extract.max_output == 0 {
            return Err(KamirError::Config("chunk_len and max_output must be >= 1".into()));
        }
        self.classifier.train.validate()?;
        if !(0.0..1.0).contains(&self.classifier.test_fraction) {
            return Err(KamirError::Config(format!(
                "test_fraction must lie in [0, 1), got {}",
                self.classifier.test_fraction
            )));
        }
        Ok(())
    }
}

pub const MODEL_FILE: &str = "model.bin";
pub const MERGED_MODEL_FILE: &str = "model_merged.bin";
pub const CLASSIFIER_FILE: &str = "classifier.bin";
pub const AWARENESS_FILE: &str = "awareness.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const FAILURES_FILE: &str = "failures.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DYNAMICS_FILE: &str = "dynamics.csv";
pub const SUMMARY_FILE: &str = "dynamics_summary.csv";

/// What a stage produced. Per-document failures do not abort a stage but
/// are reported here.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageReport {
    pub outputs: Vec<PathBuf>,
    pub failures: Vec<DocumentFailure>,
    pub warnings: Vec<String>,
}

impl StageReport {
    fn wrote(&mut self, p: PathBuf) {
        self.outputs.push(p);
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| KamirError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())
}

fn write_failures(dir: &Path, failures: &[DocumentFailure], report: &mut StageReport) -> Result<()> {
    if failures.is_empty() {
        return Ok(());
    }
    let mut s = String::from("doc_id\terror\n");
    for f in failures {
        s.push_str(&format!("{}\t{}\n", f.id, f.message.replace(['\t', '\n'], " ")));
    }
    let p = dir.join(FAILURES_FILE);
    write_text(&p, &s)?;
    report.wrote(p);
    report.failures = failures.to_vec();
    Ok(())
}

/// Trains a fresh model on every document of the corpus.
pub fn pretrain_stage(cfg: &PipelineConfig, corpus: &Path, out: &Path) -> Result<StageReport> {
    cfg.model.validate()?;
    let corpus = ingest_corpus(corpus)?;
    ensure_dir(out)?;
    let mut model = MiniLmModel::new(cfg.model.clone())?;
    let docs: Vec<Vec<u8>> = corpus.documents.iter().map(|d| encode(&d.text)).collect();
    let mut rng = SeededRng::new(cfg.pretrain.seed);
    let losses = pretrain(&mut model, &docs, &cfg.pretrain.train, &mut rng)?;
    let mut report = StageReport::default();
    let p = out.join(MODEL_FILE);
    save_checkpoint(&model, &p)?;
    report.wrote(p);
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i},{}\n", sig9(*l)));
    }
    let p = out.join("pretrain_loss.csv");
    write_text(&p, &s)?;
    report.wrote(p);
    Ok(report)
}

/// Where awareness vectors come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ExtractSource {
    /// Run the model over a JSONL corpus.
    Corpus { model: PathBuf, corpus: PathBuf },
    /// Import externally produced hidden-state traces.
    Traces { traces: PathBuf },
}

/// Writes `awareness.csv`. Rows carry `label` when given, else the
/// corpus's own label (or `unlabeled`).
pub fn extract_stage(
    cfg: &PipelineConfig,
    source: &ExtractSource,
    label: Option<Label>,
    out: &Path,
) -> Result<StageReport> {
    let mut report = StageReport::default();
    let rows = match source {
        ExtractSource::Corpus { model, corpus } => {
            let model = load_checkpoint(model)?;
            cfg.extract.validate_for(&model)?;
            let corpus = ingest_corpus(corpus)?;
            ensure_dir(out)?;
            let docs: Vec<(String, Vec<u8>)> = corpus
                .documents
                .iter()
                .map(|d| (d.id.clone(), encode(&d.text)))
                .collect();
            let mut rows = Vec::new();
            let mut failures = Vec::new();
            for (doc, result) in corpus.documents.iter().zip(extract_documents(&model, &docs, &cfg.extract)) {
                match result {
                    Ok(v) => rows.push(AwarenessRow {
                        doc_id: v.doc_id,
                        label: label.or(doc.label),
                        values: v.values,
                    }),
                    Err(e) if e.is_invariant_violation() => return Err(e),
                    Err(e) => failures.push(DocumentFailure {
                        id: doc.id.clone(),
                        message: e.to_string(),
                    }),
                }
            }
            write_failures(out, &failures, &mut report)?;
            rows
        }
        ExtractSource::Traces { traces } => {
            let traces = import_traces(traces)?;
            ensure_dir(out)?;
            awareness_from_imported(&traces)?
                .into_iter()
                .map(|v| AwarenessRow {
                    doc_id: v.doc_id,
                    label,
                    values: v.values,
                })
                .collect()
        }
    };
    let p = out.join(AWARENESS_FILE);
    write_awareness_csv(&p, &rows)?;
    report.wrote(p);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEvaluation {
    pub n_train: usize,
    pub n_test: usize,
    pub train: Evaluation,
    pub test: Option<Evaluation>,
}

/// Seeded per-class split: `test_fraction` of each class is held out.
pub fn stratified_split(
    data: &[LabeledVector],
    test_fraction: f64,
    seed: u64,
) -> (Vec<LabeledVector>, Vec<LabeledVector>) {
    let mut rng = SeededRng::new(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for label in [Label::Familiar, Label::Unfamiliar] {
        let mut members: Vec<&LabeledVector> = data.iter().filter(|d| d.label == label).collect();
        rng.shuffle(&mut members);
        let n_test = (members.len() as f64 * test_fraction).round() as usize;
        test.extend(members[..n_test].iter().map(|&d| d.clone()));
        train.extend(members[n_test..].iter().map(|&d| d.clone()));
    }
    (train, test)
}

/// Trains on labeled awareness CSVs with a stratified holdout.
pub fn train_clf_stage(cfg: &PipelineConfig, inputs: &[PathBuf], out: &Path) -> Result<(StageReport, ClassifierEvaluation)> {
    cfg.classifier.train.validate()?;
    if inputs.is_empty() {
        return Err(KamirError::invalid("train-clf needs at least one awareness CSV"));
    }
    let mut data = Vec::new();
    for path in inputs {
        for row in read_awareness_csv(path)? {
            let label = row.label.ok_or_else(|| {
                KamirError::invalid(format!(
                    "{}: row {:?} is unlabeled; training needs familiar/unfamiliar labels",
                    path.display(),
                    row.doc_id
                ))
            })?;
            data.push(LabeledVector::new(row.doc_id, row.values, label));
        }
    }
    let (train, test) = stratified_split(&data, cfg.classifier.test_fraction, cfg.classifier.split_seed);
    let (clf, history) = train_classifier(&train, &cfg.classifier.train)?;
    ensure_dir(out)?;
    let mut report = StageReport::default();
    let p = out.join(CLASSIFIER_FILE);
    clf.save(&p)?;
    report.wrote(p);
    let mut s = String::from("epoch,loss\n");
    for (i, l) in history.iter().enumerate() {
        s.push_str(&format!("{},{}\n", i + 1, sig9(*l)));
    }
    let p = out.join("classifier_loss.csv");
    write_text(&p, &s)?;
    report.wrote(p);
    let eval = ClassifierEvaluation {
        n_train: train.len(),
        n_test: test.len(),
        train: evaluate(&clf, &train)?,
        test: if test.is_empty() { None } else { Some(evaluate(&clf, &test)?) },
    };
    let p = out.join("evaluation.json");
    write_text(&p, &(serde_json::to_string_pretty(&eval)? + "\n"))?;
    report.wrote(p);
    Ok((report, eval))
}

fn load_model_and_classifier(model: &Path, clf: &Path) -> Result<(MiniLmModel, AwarenessClassifier)> {
    let model = load_checkpoint(model)?;
    let clf = AwarenessClassifier::load(clf)?;
    check_stage_compat(&model, &clf)?;
    Ok((model, clf))
}

fn write_labeling(out: &Path, outcome: &LabelingOutcome, report: &mut StageReport) -> Result<()> {
    let p = out.join(AWARENESS_FILE);
    write_awareness_csv(&p, &outcome.rows())?;
    report.wrote(p);
    let mut s = String::from("doc_id,label,probability\n");
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for pr in &outcome.predictions {
        w.write_record([pr.id.as_str(), label_field(Some(pr.label)), &sig9(pr.probability)])
            .map_err(crate::awareness::csv_err)?;
    }
    let body = w.into_inner().map_err(|e| KamirError::invalid(format!("csv: {e}")))?;
    s.push_str(&String::from_utf8_lossy(&body));
    let p = out.join(PREDICTIONS_FILE);
    write_text(&p, &s)?;
    report.wrote(p);
    write_failures(out, &outcome.failures, report)
}

fn label_stage(
    cfg: &PipelineConfig,
    model: &Path,
    clf: &Path,
    corpus: &Path,
) -> Result<(Corpus, LabelingOutcome)> {
    let (model, clf) = load_model_and_classifier(model, clf)?;
    cfg.extract.validate_for(&model)?;
    let corpus = ingest_corpus(corpus)?;
    let outcome = label_corpus(&corpus, &model, &clf, &cfg.extract)?;
    Ok((corpus, outcome))
}

/// Labels every document of a corpus.
pub fn classify_stage(cfg: &PipelineConfig, model: &Path, clf: &Path, corpus: &Path, out: &Path) -> Result<StageReport> {
    let (_, outcome) = label_stage(cfg, model, clf, corpus)?;
    ensure_dir(out)?;
    let mut report = StageReport::default();
    write_labeling(out, &outcome, &mut report)?;
    Ok(report)
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(p).map_err(|e| KamirError::io(p, e))
}

/// Labels the corpus and writes the split manifest.
pub fn select_stage(cfg: &PipelineConfig, model: &Path, clf: &Path, corpus_path: &Path, out: &Path) -> Result<StageReport> {
    let (corpus, outcome) = label_stage(cfg, model, clf, corpus_path)?;
    let clf_digest = sha256_hex(&read_file(clf)?);
    let mut manifest = make_splits(
        &corpus.ids(),
        &outcome.predictions,
        &corpus.digest,
        &clf_digest,
        cfg.select.seed,
        cfg.select.random_size,
    )?;
    manifest.corpus_path = Some(absolute(corpus_path)?);
    manifest.classifier_path = Some(absolute(clf)?);
    ensure_dir(out)?;
    let mut report = StageReport::default();
    write_labeling(out, &outcome, &mut report)?;
    let p = out.join(MANIFEST_FILE);
    export_manifest(&manifest, &p)?;
    report.wrote(p);
    Ok(report)
}

fn examples_for(corpus: &Corpus, ids: &[String], max_seq_len: usize) -> Result<Vec<SftExample>> {
    ids.iter()
        .map(|id| {
            let doc = corpus.get(id).ok_or_else(|| {
                KamirError::StaleManifest(format!("document {id:?} is not in the corpus"))
            })?;
            SftExample::from_text(id, &doc.text, max_seq_len)
        })
        .collect()
}

/// Fine-tunes an adapter on one manifest group. Also records, before
/// training, the diagnostics of every non-empty group.
pub fn sft_stage(
    cfg: &PipelineConfig,
    model: &Path,
    manifest: &Path,
    group: Group,
    corpus: Option<&Path>,
    out: &Path,
) -> Result<StageReport> {
    let loaded = load_manifest(manifest)?;
    let m = &loaded.manifest;
    if m.group(group).is_empty() {
        return Err(KamirError::invalid(format!("manifest group {group} is empty")));
    }
    let corpus_path = match (corpus, &m.corpus_path) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => p.clone(),
        (None, None) => {
            return Err(KamirError::Config("no corpus given and the manifest records none".into()))
        }
    };
    let corpus = ingest_corpus(&corpus_path)?;
    if corpus.digest != m.corpus_digest {
        return Err(KamirError::StaleManifest(format!(
            "corpus {} does not match the manifest digest",
            corpus_path.display()
        )));
    }
    let base = load_checkpoint(model)?;
    let max_len = base.config().max_seq_len;
    let mut groups = Vec::new();
    for g in Group::ALL {
        if !m.group(g).is_empty() {
            groups.push((g, examples_for(&corpus, m.group(g), max_len)?));
        }
    }
    let train = groups.iter().find(|(g, _)| *g == group).map(|(_, e)| e.clone()).unwrap_or_default();
    let mut adapted = cfg.lora.attach(base)?;
    let summary = group_dynamics(&adapted, &groups)?;
    let records = sft_train(&mut adapted, &train, &cfg.sft, group)?;
    ensure_dir(out)?;
    let mut report = StageReport {
        warnings: loaded.warnings.clone(),
        ..StageReport::default()
    };
    let p = out.join(SUMMARY_FILE);
    write_summary_csv(&p, &summary)?;
    report.wrote(p);
    let p = out.join(DYNAMICS_FILE);
    write_dynamics_csv(&p, &records)?;
    report.wrote(p);
    let merged = adapted.merge()?;
    let p = out.join(MERGED_MODEL_FILE);
    save_checkpoint(&merged, &p)?;
    report.wrote(p);
    Ok(report)
}

/// Profiles and projection of labeled awareness CSVs, grouped by their
/// label column, plus an optional dynamics summary.
pub fn report_stage(inputs: &[PathBuf], dynamics: Option<&Path>, out: &Path) -> Result<StageReport> {
    if inputs.is_empty() {
        return Err(KamirError::invalid("report needs at least one awareness CSV"));
    }
    let mut vectors = Vec::new();
    for path in inputs {
        for row in read_awareness_csv(path)? {
            vectors.push(GroupedVector {
                doc_id: row.doc_id,
                group: label_field(row.label).to_string(),
                values: row.values,
            });
        }
    }
    let profiles = group_profiles(&vectors)?;
    let projection = if vectors.len() >= 3 { Some(project_2d(&vectors)?) } else { None };
    let summary = dynamics.map(read_summary_csv).transpose()?;
    render_report(out, &profiles, projection.as_ref(), summary.as_deref(), None)?;
    let mut report = StageReport::default();
    let mut files = vec!["profiles.csv", "profiles.svg"];
    if projection.is_some() {
        files.extend(["projection.csv", "projection.svg"]);
    }
    if summary.as_ref().is_some_and(|s| !s.is_empty()) {
        files.push(SUMMARY_FILE);
    }
    files.push("report.md");
    report.outputs = files.into_iter().map(|f| out.join(f)).collect();
    if projection.is_none() {
        report.warnings.push("fewer than 3 vectors; projection skipped".into());
    }
    Ok(report)
}
