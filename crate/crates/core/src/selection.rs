//! Corpus ingestion, batch labeling, and familiar / unfamiliar / random
//! split construction.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::awareness::{extract_documents, AwarenessRow, ExtractOptions};
use crate::binio::{read_file, write_file};
use crate::classifier::AwarenessClassifier;
use crate::digest::sha256_hex;
use crate::error::{KamirError, Result};
use crate::label::Label;
use crate::lm::{encode, MiniLmModel};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDocument {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub documents: Vec<CorpusDocument>,
    /// SHA-256 of the JSONL bytes the corpus was read from.
    pub digest: String,
}

impl Corpus {
    /// Builds a corpus from documents, digesting their JSONL rendering.
    pub fn from_documents(documents: Vec<CorpusDocument>) -> Result<Self> {
        let bytes = to_jsonl(&documents)?;
        parse_corpus(&bytes, Path::new("<memory>"))
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.documents.iter().map(|d| d.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&CorpusDocument> {
        self.documents.iter().find(|d| d.id == id)
    }
}

/// One compact JSON object per line.
pub fn to_jsonl(documents: &[CorpusDocument]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for d in documents {
        serde_json::to_writer(&mut out, d)?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Parses JSONL corpus bytes. Blank lines are skipped; line numbers in
/// errors are 1-based file lines.
pub fn parse_corpus(bytes: &[u8], path: &Path) -> Result<Corpus> {
    let err = |line: usize, message: String| KamirError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let text = std::str::from_utf8(bytes).map_err(|e| {
        let line = bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count() + 1;
        err(line, "invalid UTF-8".into())
    })?;
    let mut documents = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let doc: CorpusDocument =
            serde_json::from_str(line).map_err(|e| err(line_no, e.to_string()))?;
        if doc.text.is_empty() {
            return Err(err(line_no, format!("document {:?} has empty text", doc.id)));
        }
        if let Some(&first) = seen.get(&doc.id) {
            return Err(KamirError::DuplicateId {
                id: doc.id,
                first_line: first,
                second_line: line_no,
            });
        }
        seen.insert(doc.id.clone(), line_no);
        documents.push(doc);
    }
    if documents.is_empty() {
        return Err(err(1, "corpus is empty".into()));
    }
    Ok(Corpus {
        documents,
        digest: sha256_hex(bytes),
    })
}

pub fn ingest_corpus(path: &Path) -> Result<Corpus> {
    parse_corpus(&read_file(path)?, path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub label: Label,
    pub probability: f64,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentFailure {
    pub id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelingOutcome {
    /// Corpus order, failed documents omitted.
    pub predictions: Vec<Prediction>,
    pub failures: Vec<DocumentFailure>,
}

impl LabelingOutcome {
    /// Awareness-CSV rows carrying the predicted labels.
    pub fn rows(&self) -> Vec<AwarenessRow> {
        self.predictions
            .iter()
            .map(|p| AwarenessRow {
                doc_id: p.id.clone(),
                label: Some(p.label),
                values: p.values.clone(),
            })
            .collect()
    }
}

/// Fails unless the classifier reads vectors of the model's length.
pub fn check_stage_compat(model: &MiniLmModel, clf: &AwarenessClassifier) -> Result<()> {
    let k = model.n_layers() - 1;
    if clf.input_dim() != k {
        return Err(KamirError::Shape(format!(
            "classifier expects {}-dimensional vectors but the model has {} layers ({k}-dimensional vectors)",
            clf.input_dim(),
            model.n_layers()
        )));
    }
    Ok(())
}

/// Extracts and classifies every document. Extraction failures are
/// collected per document; the rest of the corpus is still labeled.
pub fn label_corpus(
    corpus: &Corpus,
    model: &MiniLmModel,
    clf: &AwarenessClassifier,
    opts: &ExtractOptions,
) -> Result<LabelingOutcome> {
    if corpus.is_empty() {
        return Err(KamirError::invalid("corpus is empty"));
    }
    check_stage_compat(model, clf)?;
    opts.validate_for(model)?;
    let docs: Vec<(String, Vec<u8>)> = corpus
        .documents
        .iter()
        .map(|d| (d.id.clone(), encode(&d.text)))
        .collect();
    let mut predictions = Vec::new();
    let mut failures = Vec::new();
    for ((id, _), result) in docs.iter().zip(extract_documents(model, &docs, opts)) {
        match result.and_then(|v| clf.classify(&v.values).map(|c| (v, c))) {
            Ok((v, c)) => predictions.push(Prediction {
                id: id.clone(),
                label: c.label,
                probability: c.probability,
                values: v.values,
            }),
            Err(e) if e.is_invariant_violation() => return Err(e),
            Err(e) => failures.push(DocumentFailure {
                id: id.clone(),
                message: e.to_string(),
            }),
        }
    }
    Ok(LabelingOutcome {
        predictions,
        failures,
    })
}

/// Named training split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Familiar,
    Unfamiliar,
    Random,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Familiar, Group::Unfamiliar, Group::Random];

    pub fn name(self) -> &'static str {
        match self {
            Group::Familiar => "familiar",
            Group::Unfamiliar => "unfamiliar",
            Group::Random => "random",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Group {
    type Err = KamirError;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| {
                KamirError::Config(format!(
                    "unknown group {s:?}; expected familiar, unfamiliar or random"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionManifest {
    pub corpus_digest: String,
    pub classifier_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier_path: Option<PathBuf>,
    pub seed: u64,
    pub familiar_ids: Vec<String>,
    pub unfamiliar_ids: Vec<String>,
    pub random_ids: Vec<String>,
    pub probabilities: BTreeMap<String, f64>,
}

impl SelectionManifest {
    pub fn group(&self, group: Group) -> &[String] {
        match group {
            Group::Familiar => &self.familiar_ids,
            Group::Unfamiliar => &self.unfamiliar_ids,
            Group::Random => &self.random_ids,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Partitions predictions by label and draws the random control from
/// `all_ids` (the whole corpus) without replacement. The control defaults
/// to the size of the smaller predicted class.
pub fn make_splits(
    all_ids: &[String],
    predictions: &[Prediction],
    corpus_digest: &str,
    classifier_digest: &str,
    seed: u64,
    random_size: Option<usize>,
) -> Result<SelectionManifest> {
    let pick = |l: Label| -> Vec<String> {
        predictions
            .iter()
            .filter(|p| p.label == l)
            .map(|p| p.id.clone())
            .collect()
    };
    let familiar_ids = pick(Label::Familiar);
    let unfamiliar_ids = pick(Label::Unfamiliar);
    if familiar_ids.is_empty() || unfamiliar_ids.is_empty() {
        return Err(KamirError::invalid(format!(
            "splits need at least one document per predicted class (familiar {}, unfamiliar {})",
            familiar_ids.len(),
            unfamiliar_ids.len()
        )));
    }
    let size = random_size.unwrap_or(familiar_ids.len().min(unfamiliar_ids.len()));
    if size > all_ids.len() {
        return Err(KamirError::Config(format!(
            "random_size {size} exceeds corpus size {}",
            all_ids.len()
        )));
    }
    let mut rng = SeededRng::new(seed);
    let mut picked = rng.sample_without_replacement(all_ids.len(), size);
    picked.sort_unstable();
    let random_ids = picked.into_iter().map(|i| all_ids[i].clone()).collect();
    Ok(SelectionManifest {
        corpus_digest: corpus_digest.to_string(),
        classifier_digest: classifier_digest.to_string(),
        corpus_path: None,
        classifier_path: None,
        seed,
        familiar_ids,
        unfamiliar_ids,
        random_ids,
        probabilities: predictions
            .iter()
            .map(|p| (p.id.clone(), p.probability))
            .collect(),
    })
}

pub fn export_manifest(manifest: &SelectionManifest, path: &Path) -> Result<()> {
    write_file(path, manifest.to_json()?.as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedManifest {
    pub manifest: SelectionManifest,
    pub corpus_verified: bool,
    pub classifier_verified: bool,
    /// Set when a referenced file was missing and its check was skipped.
    pub warnings: Vec<String>,
}

impl LoadedManifest {
    pub fn has_warning(&self) -> bool {
        !self.warnings.is_empty()
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads a manifest and checks the digests of the files it references.
/// Relative paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<LoadedManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| KamirError::io(path, e))?;
    let manifest: SelectionManifest = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut warnings = Vec::new();
    let mut check = |what: &str, p: &Option<PathBuf>, want: &str| -> Result<bool> {
        let Some(p) = p else { return Ok(false) };
        let full = resolve(base, p);
        if !full.exists() {
            warnings.push(format!("{what} {} not found; digest not verified", full.display()));
            return Ok(false);
        }
        let got = sha256_hex(&read_file(&full)?);
        if got != want {
            return Err(KamirError::StaleManifest(format!(
                "{what} {} has digest {got}, manifest records {want}",
                full.display()
            )));
        }
        Ok(true)
    };
    let corpus_verified = check("corpus", &manifest.corpus_path, &manifest.corpus_digest)?;
    let classifier_verified =
        check("classifier", &manifest.classifier_path, &manifest.classifier_digest)?;
    Ok(LoadedManifest {
        manifest,
        corpus_verified,
        classifier_verified,
        warnings,
    })
}
