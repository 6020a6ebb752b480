//! `kamir`: awareness extraction, classifier training, split selection and
//! LoRA diagnostics from the command line.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kamir_core::awareness::MeanMode;
use kamir_core::pipeline::{self, ExtractSource, PipelineConfig, StageReport};
use kamir_core::selection::{to_jsonl, Group};
use kamir_core::{synth, KamirError, Label, LoraTarget, TraceAnchor};

#[derive(Parser, Debug)]
#[command(name = "kamir", version, about = "Awareness-vector pipeline over a byte-level mini language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML config with [model], [pretrain], [extract], [classifier],
    /// [select], [lora] and [sft] sections; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for this stage's randomness [default: 0].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: out].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parallel stages [default: all cores]. Results do
    /// not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a fresh mini-LM on a JSONL corpus.
    Pretrain(PretrainArgs),
    /// Compute awareness vectors from a corpus or an imported trace file.
    Extract(ExtractArgs),
    /// Train the familiar/unfamiliar classifier on labeled awareness CSVs.
    TrainClf(TrainClfArgs),
    /// Label every document of a corpus.
    Classify(LabelArgs),
    /// Label a corpus and write familiar / unfamiliar / random splits.
    Select(SelectArgs),
    /// LoRA fine-tuning on one manifest group, with per-group diagnostics.
    Sft(SftArgs),
    /// Profiles, projection and plots from awareness CSVs.
    Report(ReportArgs),
    /// Write the synthetic toy corpora.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// JSONL corpus with `id` and `text` fields.
    #[arg(long)]
    corpus: PathBuf,
    /// Optimizer steps [default: 2000].
    #[arg(long)]
    steps: Option<usize>,
    /// Learning rate [default: 0.002].
    #[arg(long)]
    lr: Option<f32>,
    /// Number of transformer blocks [default: 4].
    #[arg(long)]
    n_layers: Option<usize>,
    /// Hidden width [default: 64].
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Clone)]
struct ExtractOpts {
    /// Tokens per sub-passage [default: 300].
    #[arg(long)]
    chunk_len: Option<usize>,
    /// Generated tokens per sub-passage [default: 100].
    #[arg(long)]
    max_output: Option<usize>,
    /// Reference state: pre_final_norm or post_final_norm [default: pre_final_norm].
    #[arg(long, value_parser = parse_anchor)]
    anchor: Option<TraceAnchor>,
    /// Sub-passage averaging: uniform or token_weighted [default: uniform].
    #[arg(long, value_parser = parse_mean)]
    mean: Option<MeanMode>,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    /// Model checkpoint (required with --corpus).
    #[arg(long, requires = "corpus")]
    model: Option<PathBuf>,
    /// JSONL corpus to run through the model.
    #[arg(long, conflicts_with = "traces", requires = "model")]
    corpus: Option<PathBuf>,
    /// Hidden-state trace file; its index is read from `<path>.idx`.
    #[arg(long, required_unless_present = "corpus")]
    traces: Option<PathBuf>,
    /// Label written for every row: familiar or unfamiliar [default: the corpus label].
    #[arg(long)]
    label: Option<Label>,
    #[command(flatten)]
    opts: ExtractOpts,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct TrainClfArgs {
    /// Labeled awareness CSV; repeatable.
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
    /// Hidden widths, comma separated [default: 64].
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    /// Training epochs [default: 200].
    #[arg(long)]
    epochs: Option<usize>,
    /// Adam learning rate [default: 0.001].
    #[arg(long)]
    lr: Option<f32>,
    /// Minibatch size [default: 32].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Held-out share of each class [default: 0.3].
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Decision threshold on the unfamiliar probability [default: 0.5].
    #[arg(long)]
    threshold: Option<f32>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct LabelArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    opts: ExtractOpts,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[command(flatten)]
    label: LabelArgs,
    /// Size of the random control [default: the smaller predicted class].
    #[arg(long)]
    random_size: Option<usize>,
}

#[derive(Args, Debug)]
struct SftArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Split to train on: familiar, unfamiliar or random.
    #[arg(long)]
    group: Group,
    /// Corpus [default: the path recorded in the manifest].
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Training steps [default: 100].
    #[arg(long)]
    steps: Option<usize>,
    /// Adam learning rate [default: 0.001].
    #[arg(long)]
    lr: Option<f32>,
    /// Documents per step [default: 4].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adapter rank [default: 4].
    #[arg(long)]
    rank: Option<usize>,
    /// Adapter scale numerator [default: 8].
    #[arg(long)]
    alpha: Option<f32>,
    /// Adapted projections, comma separated [default: q_proj,v_proj].
    #[arg(long, value_delimiter = ',')]
    targets: Option<Vec<LoraTarget>>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Awareness CSV; rows are grouped by their label column. Repeatable.
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
    /// Group summary CSV written by `sft`.
    #[arg(long)]
    dynamics: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Pretraining documents (corpus A) [default: 400].
    #[arg(long, default_value_t = 400)]
    n_pretrain: usize,
    /// Held-out documents per class [default: 100].
    #[arg(long, default_value_t = 100)]
    n_heldout: usize,
    /// Question/answer documents per style in the selection corpus [default: 40].
    #[arg(long, default_value_t = 40)]
    n_target: usize,
    /// Minimum document length in bytes [default: 200].
    #[arg(long, default_value_t = 200)]
    min_len: usize,
    /// Maximum of the drawn minimum length [default: 500].
    #[arg(long, default_value_t = 500)]
    max_len: usize,
    #[command(flatten)]
    common: Common,
}

fn parse_anchor(s: &str) -> Result<TraceAnchor, String> {
    match s {
        "pre_final_norm" => Ok(TraceAnchor::PreFinalNorm),
        "post_final_norm" => Ok(TraceAnchor::PostFinalNorm),
        _ => Err(format!("expected pre_final_norm or post_final_norm, got {s:?}")),
    }
}

fn parse_mean(s: &str) -> Result<MeanMode, String> {
    match s {
        "uniform" => Ok(MeanMode::Uniform),
        "token_weighted" => Ok(MeanMode::TokenWeighted),
        _ => Err(format!("expected uniform or token_weighted, got {s:?}")),
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn apply_extract(cfg: &mut PipelineConfig, o: &ExtractOpts) {
    set(&mut cfg.extract.chunk_len, o.chunk_len);
    set(&mut cfg.extract.max_output, o.max_output);
    set(&mut cfg.extract.anchor, o.anchor);
    set(&mut cfg.extract.mean, o.mean);
}

/// Failure classes, mapped onto process exit codes.
enum Failure {
    Usage(String),
    Data(String),
    Invariant(String),
}

impl From<KamirError> for Failure {
    fn from(e: KamirError) -> Self {
        let msg = e.to_string();
        if e.is_invariant_violation() {
            Failure::Invariant(msg)
        } else if matches!(e, KamirError::Config(_)) {
            Failure::Usage(msg)
        } else {
            Failure::Data(msg)
        }
    }
}

fn resolve(common: &Common) -> Result<PipelineConfig, Failure> {
    Ok(config::load(common.config.as_deref())?)
}

fn out_dir(common: &Common) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn finish(cfg: &PipelineConfig, out: &Path, report: StageReport) -> Result<(), Failure> {
    let p = out.join(config::RESOLVED_CONFIG_FILE);
    std::fs::create_dir_all(out).map_err(|e| KamirError::Io { path: out.to_path_buf(), source: e })?;
    std::fs::write(&p, config::render(cfg)?).map_err(|e| KamirError::Io { path: p.clone(), source: e })?;
    for o in &report.outputs {
        println!("wrote {}", o.display());
    }
    println!("wrote {}", p.display());
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if !report.failures.is_empty() {
        for f in &report.failures {
            eprintln!("failed: {}: {}", f.id, f.message);
        }
        return Err(Failure::Data(format!(
            "{} document(s) failed; see {}",
            report.failures.len(),
            out.join(pipeline::FAILURES_FILE).display()
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let common = match &cli.command {
        Command::Pretrain(a) => &a.common,
        Command::Extract(a) => &a.common,
        Command::TrainClf(a) => &a.common,
        Command::Classify(a) => &a.common,
        Command::Select(a) => &a.label.common,
        Command::Sft(a) => &a.common,
        Command::Report(a) => &a.common,
        Command::Synth(a) => &a.common,
    }
    .clone();
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("cannot start {n} threads: {e}")))?;
    }
    let mut cfg = resolve(&common)?;
    let out = out_dir(&common);
    match cli.command {
        Command::Pretrain(a) => {
            set(&mut cfg.pretrain.train.steps, a.steps);
            set(&mut cfg.pretrain.train.lr, a.lr);
            set(&mut cfg.model.n_layers, a.n_layers);
            set(&mut cfg.model.hidden_dim, a.hidden_dim);
            if let Some(s) = common.seed {
                cfg.pretrain.seed = s;
                cfg.model.seed = s;
            }
            cfg.validate()?;
            let r = pipeline::pretrain_stage(&cfg, &a.corpus, &out)?;
            finish(&cfg, &out, r)
        }
        Command::Extract(a) => {
            apply_extract(&mut cfg, &a.opts);
            cfg.validate()?;
            let source = match (a.model, a.corpus, a.traces) {
                (Some(model), Some(corpus), None) => ExtractSource::Corpus { model, corpus },
                (None, None, Some(traces)) => ExtractSource::Traces { traces },
                _ => return Err(Failure::Usage("give either --model and --corpus, or --traces".into())),
            };
            let r = pipeline::extract_stage(&cfg, &source, a.label, &out)?;
            finish(&cfg, &out, r)
        }
        Command::TrainClf(a) => {
            let c = &mut cfg.classifier;
            set(&mut c.train.hidden, a.hidden);
            set(&mut c.train.epochs, a.epochs);
            set(&mut c.train.lr, a.lr);
            set(&mut c.train.batch_size, a.batch_size);
            set(&mut c.train.threshold, a.threshold);
            set(&mut c.test_fraction, a.test_fraction);
            if let Some(s) = common.seed {
                c.train.seed = s;
                c.split_seed = s;
            }
            cfg.validate()?;
            let (r, eval) = pipeline::train_clf_stage(&cfg, &a.inputs, &out)?;
            println!(
                "train accuracy {:.4}, test accuracy {}, test AUC {}",
                eval.train.accuracy,
                eval.test.as_ref().map_or("n/a".into(), |e| format!("{:.4}", e.accuracy)),
                eval.test.as_ref().and_then(|e| e.auc).map_or("n/a".into(), |v| format!("{v:.4}"))
            );
            finish(&cfg, &out, r)
        }
        Command::Classify(a) => {
            apply_extract(&mut cfg, &a.opts);
            cfg.validate()?;
            let r = pipeline::classify_stage(&cfg, &a.model, &a.classifier, &a.corpus, &out)?;
            finish(&cfg, &out, r)
        }
        Command::Select(a) => {
            apply_extract(&mut cfg, &a.label.opts);
            if a.random_size.is_some() {
                cfg.select.random_size = a.random_size;
            }
            set(&mut cfg.select.seed, common.seed);
            cfg.validate()?;
            let l = &a.label;
            let r = pipeline::select_stage(&cfg, &l.model, &l.classifier, &l.corpus, &out)?;
            finish(&cfg, &out, r)
        }
        Command::Sft(a) => {
            set(&mut cfg.sft.steps, a.steps);
            set(&mut cfg.sft.lr, a.lr);
            set(&mut cfg.sft.batch_size, a.batch_size);
            set(&mut cfg.lora.rank, a.rank);
            set(&mut cfg.lora.alpha, a.alpha);
            set(&mut cfg.lora.targets, a.targets);
            if let Some(s) = common.seed {
                cfg.sft.seed = s;
                cfg.lora.seed = s;
            }
            cfg.validate()?;
            let r = pipeline::sft_stage(&cfg, &a.model, &a.manifest, a.group, a.corpus.as_deref(), &out)?;
            finish(&cfg, &out, r)
        }
        Command::Report(a) => {
            cfg.validate()?;
            let r = pipeline::report_stage(&a.inputs, a.dynamics.as_deref(), &out)?;
            finish(&cfg, &out, r)
        }
        Command::Synth(a) => {
            if a.min_len == 0 || a.max_len < a.min_len {
                return Err(Failure::Usage("need 1 <= --min-len <= --max-len".into()));
            }
            let seed = common.seed.unwrap_or(0);
            let range = (a.min_len, a.max_len);
            let mut labeled = synth::corpus_a(a.n_heldout, seed.wrapping_add(2), range);
            labeled.iter_mut().for_each(|d| {
                d.id = format!("held-{}", d.id);
                d.label = Some(Label::Familiar);
            });
            let mut b = synth::corpus_b(a.n_heldout, seed.wrapping_add(3), range);
            b.iter_mut().for_each(|d| d.label = Some(Label::Unfamiliar));
            labeled.extend(b);
            let mut target = synth::qa_documents("qa-a", a.n_target, seed.wrapping_add(4), true);
            target.extend(synth::qa_documents("qa-b", a.n_target, seed.wrapping_add(5), false));
            let files = [
                ("pretrain.jsonl", synth::corpus_a(a.n_pretrain, seed.wrapping_add(1), range)),
                ("labeled.jsonl", labeled),
                ("target.jsonl", target),
            ];
            std::fs::create_dir_all(&out).map_err(|e| KamirError::Io { path: out.clone(), source: e })?;
            let mut report = StageReport::default();
            for (name, docs) in files {
                let p = out.join(name);
                std::fs::write(&p, to_jsonl(&docs)?).map_err(|e| KamirError::Io { path: p.clone(), source: e })?;
                report.outputs.push(p);
            }
            finish(&cfg, &out, report)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Invariant(m)) => {
            eprintln!("internal invariant violated: {m}");
            ExitCode::from(3)
        }
    }
}
