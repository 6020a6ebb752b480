//! Awareness vectors: how closely each block's hidden state at the final
//! token points in the direction of the last block's.
//!
//! For a trace `H_1 … H_N`, the vector is `[cos(H_1, H_N), …, cos(H_{N-1}, H_N)]`.
//! Documents are cut into fixed-length sub-passages; each sub-passage is
//! run through greedy generation and the document's vector is the mean over
//! its sub-passages.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{put_f32s, put_u32, read_file, to_u32, write_file, ByteReader};
use crate::error::{KamirError, Result};
use crate::fmt::sig9;
use crate::label::{label_field, parse_label_field, Label};
use crate::lm::{generate, HiddenStateTrace, MiniLmModel, PositionKind, TraceAnchor};
use crate::tensor::cosine_similarity;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorSource {
    InternalModel,
    ImportedTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AwarenessVector {
    pub doc_id: String,
    pub values: Vec<f32>,
    pub source: VectorSource,
}

impl AwarenessVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Cosine of every block's state against the last block's.
pub fn awareness_from_trace(trace: &HiddenStateTrace) -> Result<AwarenessVector> {
    let n = trace.n_layers();
    if n < 2 {
        return Err(KamirError::invalid(format!(
            "trace {:?} has {n} layer(s); at least 2 are needed",
            trace.doc_id
        )));
    }
    let anchor = &trace.layer_states[n - 1];
    let values = trace.layer_states[..n - 1]
        .iter()
        .enumerate()
        .map(|(i, h)| {
            cosine_similarity(h, anchor)
                .map(|c| c as f32)
                .map_err(|e| match e {
                    KamirError::DegenerateVector(_) => KamirError::DegenerateVector(format!(
                        "trace {:?}: layer {} or layer {n}",
                        trace.doc_id,
                        i + 1
                    )),
                    other => other,
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AwarenessVector {
        doc_id: trace.doc_id.clone(),
        values,
        source: VectorSource::InternalModel,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubPassage {
    pub parent_doc_id: String,
    pub index: usize,
    pub tokens: Vec<u8>,
}

/// Consecutive `chunk_len`-token pieces; the last one keeps whatever is left.
pub fn chunk_document(doc_id: &str, tokens: &[u8], chunk_len: usize) -> Result<Vec<SubPassage>> {
    if chunk_len == 0 {
        return Err(KamirError::Config("chunk_len must be >= 1".into()));
    }
    if tokens.is_empty() {
        return Err(KamirError::invalid(format!("document {doc_id:?} is empty")));
    }
    Ok(tokens
        .chunks(chunk_len)
        .enumerate()
        .map(|(index, c)| SubPassage {
            parent_doc_id: doc_id.to_string(),
            index,
            tokens: c.to_vec(),
        })
        .collect())
}

/// How sub-passage vectors are combined into a document vector.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanMode {
    #[default]
    Uniform,
    TokenWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractOptions {
    pub chunk_len: usize,
    pub max_output: usize,
    pub anchor: TraceAnchor,
    pub mean: MeanMode,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            chunk_len: 300,
            max_output: 100,
            anchor: TraceAnchor::PreFinalNorm,
            mean: MeanMode::Uniform,
        }
    }
}

impl ExtractOptions {
    pub fn validate_for(&self, model: &MiniLmModel) -> Result<()> {
        if self.chunk_len == 0 {
            return Err(KamirError::Config("chunk_len must be >= 1".into()));
        }
        if self.max_output == 0 {
            return Err(KamirError::Config("max_output must be >= 1".into()));
        }
        let max_seq = model.config().max_seq_len;
        if self.chunk_len >= max_seq {
            return Err(KamirError::Config(format!(
                "chunk_len {} leaves no room to generate within max_seq_len {max_seq}",
                self.chunk_len
            )));
        }
        Ok(())
    }
}

/// Trace of one sub-passage at its final generated token.
pub fn sub_passage_trace(
    model: &MiniLmModel,
    passage: &SubPassage,
    opts: &ExtractOptions,
) -> Result<HiddenStateTrace> {
    let (_, mut trace) = generate(model, &passage.tokens, opts.max_output, opts.anchor)?;
    trace.doc_id = passage.parent_doc_id.clone();
    Ok(trace)
}

/// Elementwise mean of sub-passage vectors, optionally weighted by token count.
pub fn mean_vectors(vectors: &[(Vec<f32>, usize)], mode: MeanMode) -> Result<Vec<f32>> {
    let Some((first, _)) = vectors.first() else {
        return Err(KamirError::invalid("no vectors to average"));
    };
    let k = first.len();
    if vectors.iter().any(|(v, _)| v.len() != k) {
        return Err(KamirError::Shape("vectors to average differ in length".into()));
    }
    let weights: Vec<f64> = match mode {
        MeanMode::Uniform => vec![1.0; vectors.len()],
        MeanMode::TokenWeighted => vectors.iter().map(|(_, n)| *n as f64).collect(),
    };
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(KamirError::invalid("token weights sum to zero"));
    }
    let mut acc = vec![0.0f64; k];
    for ((v, _), w) in vectors.iter().zip(&weights) {
        for (a, &x) in acc.iter_mut().zip(v) {
            *a += w * x as f64;
        }
    }
    Ok(acc
        .into_iter()
        .map(|a| ((a / total) as f32).clamp(-1.0, 1.0))
        .collect())
}

/// Chunk, generate, extract and average.
pub fn document_awareness(
    model: &MiniLmModel,
    doc_id: &str,
    tokens: &[u8],
    opts: &ExtractOptions,
) -> Result<AwarenessVector> {
    opts.validate_for(model)?;
    let passages = chunk_document(doc_id, tokens, opts.chunk_len)?;
    let mut per_passage = Vec::with_capacity(passages.len());
    for p in &passages {
        let v = sub_passage_trace(model, p, opts)
            .and_then(|t| awareness_from_trace(&t))
            .map_err(|e| KamirError::SubPassage {
                index: p.index,
                source: Box::new(e),
            })?;
        per_passage.push((v.values, p.tokens.len()));
    }
    Ok(AwarenessVector {
        doc_id: doc_id.to_string(),
        values: mean_vectors(&per_passage, opts.mean)?,
        source: VectorSource::InternalModel,
    })
}

/// [`document_awareness`] over many documents, in parallel on the current
/// rayon pool. Results keep input order.
pub fn extract_documents(
    model: &MiniLmModel,
    docs: &[(String, Vec<u8>)],
    opts: &ExtractOptions,
) -> Vec<Result<AwarenessVector>> {
    docs.par_iter()
        .map(|(id, tokens)| document_awareness(model, id, tokens, opts))
        .collect()
}

// ---------------------------------------------------------------------------
// KHST trace files
// ---------------------------------------------------------------------------

pub const TRACE_MAGIC: &[u8; 8] = b"KAMIRHS1";

/// Sidecar index path: the trace path with `.idx` appended.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".idx");
    PathBuf::from(s)
}

/// Writes a KHST file plus its sidecar index. All traces must share one
/// shape.
pub fn export_traces(traces: &[HiddenStateTrace], path: &Path) -> Result<()> {
    let (n, d) = match traces.first() {
        Some(t) => (t.n_layers(), t.hidden_dim()),
        None => (0, 0),
    };
    let mut bytes = Vec::with_capacity(20 + traces.len() * n * d * 4);
    bytes.extend_from_slice(TRACE_MAGIC);
    put_u32(&mut bytes, to_u32(traces.len(), "trace_count")?);
    put_u32(&mut bytes, to_u32(n, "n_layers")?);
    put_u32(&mut bytes, to_u32(d, "hidden_dim")?);
    let mut index = String::new();
    for (i, t) in traces.iter().enumerate() {
        if t.n_layers() != n || t.hidden_dim() != d {
            return Err(KamirError::Shape(format!(
                "trace {i} is {}x{}, expected {n}x{d}",
                t.n_layers(),
                t.hidden_dim()
            )));
        }
        if t.doc_id.contains(['\t', '\n', '\r']) {
            return Err(KamirError::invalid(format!(
                "doc_id {:?} cannot be stored in a tab-separated index",
                t.doc_id
            )));
        }
        for h in &t.layer_states {
            put_f32s(&mut bytes, h);
        }
        index.push_str(&format!("{i}\t{}\n", t.doc_id));
    }
    write_file(path, &bytes)?;
    write_file(&sidecar_path(path), index.as_bytes())
}

/// Parses KHST bytes and the sidecar index text.
pub fn traces_from_bytes(bytes: &[u8], index: &str) -> Result<Vec<HiddenStateTrace>> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(TRACE_MAGIC)?;
    let count = r.u32("trace_count")? as usize;
    let n_off = r.offset();
    let n = r.u32("n_layers")? as usize;
    let d_off = r.offset();
    let d = r.u32("hidden_dim")? as usize;
    if n < 2 {
        return Err(KamirError::format(
            n_off,
            format!("n_layers = {n}; awareness needs at least 2 layers"),
        ));
    }
    if d == 0 {
        return Err(KamirError::format(d_off, "hidden_dim = 0"));
    }
    let expected = 20u64 + (count as u64) * (n as u64) * (d as u64) * 4;
    if bytes.len() as u64 != expected {
        return Err(KamirError::format(
            bytes.len().min(expected as usize) as u64,
            format!(
                "header declares {count} traces of {n}x{d} ({expected} bytes) but file has {} bytes",
                bytes.len()
            ),
        ));
    }
    let ids = parse_index(index, count)?;
    let mut traces = Vec::with_capacity(count);
    for doc_id in ids {
        let rec_off = r.offset();
        let mut states = Vec::with_capacity(n);
        for _ in 0..n {
            states.push(r.f32s(d, "layer state")?);
        }
        let trace = HiddenStateTrace {
            doc_id,
            layer_states: states,
            position_kind: PositionKind::FinalGeneratedToken,
        };
        trace
            .validate()
            .map_err(|e| KamirError::format(rec_off, e.to_string()))?;
        traces.push(trace);
    }
    r.finish()?;
    Ok(traces)
}

fn parse_index(index: &str, count: usize) -> Result<Vec<String>> {
    let mut ids = Vec::with_capacity(count);
    for (line_no, line) in index.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (ord, id) = line.split_once('\t').ok_or_else(|| {
            KamirError::invalid(format!("index line {}: expected `ordinal<TAB>doc_id`", line_no + 1))
        })?;
        let ord: usize = ord.trim().parse().map_err(|_| {
            KamirError::invalid(format!("index line {}: bad ordinal {ord:?}", line_no + 1))
        })?;
        if ord != ids.len() {
            return Err(KamirError::invalid(format!(
                "index line {}: ordinal {ord} out of sequence (expected {})",
                line_no + 1,
                ids.len()
            )));
        }
        ids.push(id.to_string());
    }
    if ids.len() != count {
        return Err(KamirError::invalid(format!(
            "index lists {} doc ids but the trace file holds {count} traces",
            ids.len()
        )));
    }
    Ok(ids)
}

/// Reads a KHST file and its sidecar index (`<path>.idx`).
pub fn import_traces(path: &Path) -> Result<Vec<HiddenStateTrace>> {
    import_traces_with_index(path, &sidecar_path(path))
}

pub fn import_traces_with_index(path: &Path, index_path: &Path) -> Result<Vec<HiddenStateTrace>> {
    let bytes = read_file(path)?;
    let index = std::fs::read_to_string(index_path).map_err(|e| KamirError::io(index_path, e))?;
    traces_from_bytes(&bytes, &index)
}

/// Awareness vectors for imported traces, tagged with their source.
pub fn awareness_from_imported(traces: &[HiddenStateTrace]) -> Result<Vec<AwarenessVector>> {
    traces
        .iter()
        .map(|t| {
            awareness_from_trace(t).map(|mut v| {
                v.source = VectorSource::ImportedTrace;
                v
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Awareness CSV
// ---------------------------------------------------------------------------

/// One row of an awareness CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct AwarenessRow {
    pub doc_id: String,
    pub label: Option<Label>,
    pub values: Vec<f32>,
}

/// `doc_id,label,s_1,…,s_K` with values at nine significant digits.
pub fn awareness_csv(rows: &[AwarenessRow]) -> Result<Vec<u8>> {
    let k = rows.first().map_or(0, |r| r.values.len());
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let mut header = vec!["doc_id".to_string(), "label".to_string()];
    header.extend((1..=k).map(|i| format!("s_{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        if r.values.len() != k {
            return Err(KamirError::Shape(format!(
                "row {:?} has {} values, expected {k}",
                r.doc_id,
                r.values.len()
            )));
        }
        let mut rec = vec![r.doc_id.clone(), label_field(r.label).to_string()];
        rec.extend(r.values.iter().map(|&v| sig9(v as f64)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.into_inner()
        .map_err(|e| KamirError::invalid(format!("csv: {e}")))
}

pub fn write_awareness_csv(path: &Path, rows: &[AwarenessRow]) -> Result<()> {
    write_file(path, &awareness_csv(rows)?)
}

pub fn read_awareness_csv(path: &Path) -> Result<Vec<AwarenessRow>> {
    let bytes = read_file(path)?;
    parse_awareness_csv(&bytes, path)
}

pub fn parse_awareness_csv(bytes: &[u8], path: &Path) -> Result<Vec<AwarenessRow>> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(bytes);
    let parse_err = |line: usize, message: String| KamirError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.len() < 3 || &header[0] != "doc_id" || &header[1] != "label" {
        return Err(parse_err(1, "expected header `doc_id,label,s_1,...`".into()));
    }
    for (i, h) in header.iter().skip(2).enumerate() {
        if h != format!("s_{}", i + 1) {
            return Err(parse_err(1, format!("column {} should be s_{}", i + 3, i + 1)));
        }
    }
    let k = header.len() - 2;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.len() != k + 2 {
            return Err(parse_err(line, format!("expected {} fields, got {}", k + 2, rec.len())));
        }
        let label = parse_label_field(&rec[1]).map_err(|e| parse_err(line, e.to_string()))?;
        let values = rec
            .iter()
            .skip(2)
            .map(|s| {
                s.parse::<f32>()
                    .ok()
                    .filter(|v| v.is_finite() && (-1.0..=1.0).contains(v))
                    .ok_or_else(|| parse_err(line, format!("bad similarity value {s:?}")))
            })
            .collect::<Result<Vec<f32>>>()?;
        rows.push(AwarenessRow {
            doc_id: rec[0].to_string(),
            label,
            values,
        });
    }
    Ok(rows)
}

pub(crate) fn csv_err(e: csv::Error) -> KamirError {
    KamirError::invalid(format!("csv: {e}"))
}
