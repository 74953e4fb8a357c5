//! Command-line entry point and the pipeline steps behind each subcommand.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, OUT_DIR_ENV};
use crate::data::{self, Dataset, DatasetStats, Prepared};
use crate::embedding::{default_sizes, ContextVocab};
use crate::error::{LsanError, Result};
use crate::eval::{self, EvalReport};
use crate::metrics::DEFAULT_KS;
use crate::model::{gradient_check, CheckSample, LsanModel, ModelConfig, ParamBreakdown, SeqInput, VariantKind};
use crate::tensor::GradCheckReport;
use crate::train::{self, EpochLog, TrainOutcome};
use crate::twin::count_branch_params;

/// Largest relative gradient error accepted by `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Parser, Debug)]
#[command(name = "lsan", version, about = "Lightweight self-attentive sequential recommender")]
struct Cli {
    /// Run configuration file of `key = value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ingest the interaction log into a prepared dataset.
    PrepareData,
    /// Train a model and keep the best-validation checkpoint.
    Train,
    /// Rank held-out items with a checkpoint and write a metrics report.
    Evaluate {
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Checkpoint directory; defaults to `<out>/checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate every model variant with a shared seed.
    Ablate,
    /// Print the parameter breakdown.
    CountParams,
    /// Write attention heat maps for one user's test input.
    ExportAttention {
        #[arg(long, default_value_t = 0)]
        user: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients on a small model.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Coordinates checked per tensor.
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Val,
    Test,
}

impl SplitArg {
    fn name(self) -> &'static str {
        match self {
            SplitArg::Val => "val",
            SplitArg::Test => "test",
        }
    }
}

/// Runs one command line (without the program name) and returns the exit code.
pub fn dispatch<S: AsRef<str>>(args: &[S]) -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    dispatch_with(args, &mut stdout.lock(), &mut stderr.lock())
}

pub fn dispatch_with<S: AsRef<str>>(args: &[S], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let argv = std::iter::once("lsan").chain(args.iter().map(AsRef::as_ref));
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{text}");
                return 2;
            }
            let _ = write!(out, "{text}");
            return 0;
        }
    };
    match run(cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if matches!(e, LsanError::Config(_)) {
                let _ = writeln!(err, "{}", Cli::command().render_usage());
            }
            1
        }
    }
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<i32> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.resolve(&cli.set, std::env::var(OUT_DIR_ENV).ok())?;
    let w = |out: &mut dyn Write, s: String| {
        out.write_all(s.as_bytes()).map_err(|e| LsanError::io("<stdout>", e))
    };
    match cli.command {
        Command::PrepareData => {
            let stats = prepare_data(&cfg)?;
            w(out, format_stats(&stats))?;
        }
        Command::Train => {
            let dir = cfg.out_dir();
            let outcome = train_run(&cfg, &dir)?;
            w(
                out,
                format!(
                    "best epoch {} with validation nDCG@10 {:.4}; checkpoint in {}\n",
                    outcome.best_epoch,
                    outcome.best_val_ndcg10,
                    dir.join("checkpoint").display()
                ),
            )?;
        }
        Command::Evaluate { split, checkpoint } => {
            let ck = checkpoint.unwrap_or_else(|| cfg.out_dir().join("checkpoint"));
            let report = evaluate_run(&cfg, &ck, split, &cfg.out_dir())?;
            w(out, format_report(&report))?;
        }
        Command::Ablate => {
            let rows = ablate(&cfg, &cfg.out_dir())?;
            w(out, ablation_table(&rows))?;
        }
        Command::CountParams => {
            let b = count_params(&cfg)?;
            w(out, format_breakdown(&b, &cfg))?;
        }
        Command::ExportAttention { user, checkpoint } => {
            let ck = checkpoint.unwrap_or_else(|| cfg.out_dir().join("checkpoint"));
            let files = export_attention_run(&cfg, &ck, user, &cfg.out_dir())?;
            let mut s = String::new();
            for f in files {
                let _ = writeln!(s, "{}", f.display());
            }
            w(out, s)?;
        }
        Command::Gradcheck { eps, samples } => {
            let report = gradcheck_run(&cfg, eps, samples)?;
            let pass = report.max_rel_error() < GRADCHECK_TOLERANCE;
            w(out, format_gradcheck(&report, pass))?;
            return Ok(if pass { 0 } else { 1 });
        }
    }
    Ok(0)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| LsanError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| LsanError::io(path, e))
}

/// Ingests the configured log and writes the dataset directory, its context
/// vocabulary and `stats.json`.
pub fn prepare_data(cfg: &RunConfig) -> Result<DatasetStats> {
    let ingested = data::ingest(&cfg.input_path())?;
    let ds = data::build_sequences(&ingested.interactions)?;
    let vocab = data::build_context_vocab(&ds, cfg.max_len);
    let dir = cfg.dataset_dir();
    ds.save(&dir)?;
    vocab.write_tsv(&dir.join(data::CONTEXTS))?;
    let stats = DatasetStats::of(&ds);
    let json = serde_json::to_string_pretty(&stats).expect("stats serialise") + "\n";
    write_file(&dir.join("stats.json"), json)?;
    info!("prepared {} users and {} items in {}", stats.users, stats.items, dir.display());
    Ok(stats)
}

/// Loads a prepared dataset with the given context vocabulary, or the stored one.
pub fn load_prepared(cfg: &RunConfig, vocab: Option<ContextVocab>) -> Result<(Dataset, ContextVocab, Prepared)> {
    let dir = cfg.dataset_dir();
    let ds = Dataset::load(&dir)?;
    let vocab = match vocab {
        Some(v) => v,
        None => ContextVocab::read_tsv(&dir.join(data::CONTEXTS))?,
    };
    let prepared = data::prepare(&ds, &vocab, cfg.max_len);
    Ok((ds, vocab, prepared))
}

/// Trains on the prepared dataset and writes `checkpoint/`, `train_log.csv`
/// and `config.txt` under `dir`.
pub fn train_run(cfg: &RunConfig, dir: &Path) -> Result<TrainOutcome> {
    let (ds, vocab, prepared) = load_prepared(cfg, None)?;
    let mcfg = cfg.model_config(ds.items.len(), vocab.table_rows())?;
    let mut model = LsanModel::<f32>::new(mcfg, cfg.seed)?;
    let mut log = String::from(EpochLog::CSV_HEADER);
    log.push('\n');
    let outcome = train::train(&mut model, &prepared.train, &prepared.val, &cfg.train_config(), |e| {
        log.push_str(&e.csv_row());
        log.push('\n');
    })?;
    Checkpoint {
        model,
        items: ds.items,
        contexts: vocab,
        provenance: cfg.hash(),
    }
    .save(&dir.join("checkpoint"))?;
    write_file(&dir.join("train_log.csv"), log)?;
    write_file(&dir.join("config.txt"), cfg.to_text())?;
    Ok(outcome)
}

/// Evaluates a checkpoint and writes `metrics_<split>.json` under `dir`.
pub fn evaluate_run(cfg: &RunConfig, checkpoint: &Path, split: SplitArg, dir: &Path) -> Result<EvalReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let (_, _, prepared) = load_prepared(cfg, Some(ck.contexts))?;
    let cases = match split {
        SplitArg::Val => &prepared.val,
        SplitArg::Test => &prepared.test,
    };
    let report = eval::evaluate(&ck.model, cases, split.name(), &DEFAULT_KS)?;
    write_file(&dir.join(format!("metrics_{}.json", split.name())), report.to_json(&cfg.hash()))?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: VariantKind,
    pub report: EvalReport,
}

/// Trains and tests every variant under `dir/ablation/<variant>` and writes `ablation.tsv`.
pub fn ablate(cfg: &RunConfig, dir: &Path) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(VariantKind::ALL.len());
    for variant in VariantKind::ALL {
        let vcfg = RunConfig { variant, ..cfg.clone() };
        let vdir = dir.join("ablation").join(variant.name());
        train_run(&vcfg, &vdir)?;
        let report = evaluate_run(&vcfg, &vdir.join("checkpoint"), SplitArg::Test, &vdir)?;
        rows.push(AblationRow { variant, report });
    }
    write_file(&dir.join("ablation.tsv"), ablation_table(&rows))?;
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant\tparams");
    for k in DEFAULT_KS {
        let _ = write!(s, "\thr@{k}");
    }
    for k in DEFAULT_KS {
        let _ = write!(s, "\tndcg@{k}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{}\t{}", r.variant, r.report.params.total);
        for v in r.report.metrics.hr.iter().chain(&r.report.metrics.ndcg) {
            let _ = write!(s, "\t{v:.4}");
        }
        s.push('\n');
    }
    s
}

/// Item count and context rows from the configuration, else from the prepared dataset.
fn data_shape(cfg: &RunConfig) -> Result<(usize, usize)> {
    if cfg.num_items > 0 {
        return Ok((cfg.num_items, cfg.context_rows.max(1)));
    }
    let dir = cfg.dataset_dir();
    let ds = Dataset::load(&dir).map_err(|e| {
        LsanError::Config(format!("set num_items or prepare a dataset first ({e})"))
    })?;
    let rows = if cfg.context_rows > 0 {
        cfg.context_rows
    } else {
        ContextVocab::read_tsv(&dir.join(data::CONTEXTS))?.table_rows()
    };
    Ok((ds.items.len(), rows))
}

pub fn count_params(cfg: &RunConfig) -> Result<ParamBreakdown> {
    let (items, rows) = data_shape(cfg)?;
    let model = LsanModel::<f32>::new(cfg.model_config(items, rows)?, cfg.seed)?;
    Ok(model.count_parameters())
}

/// Writes heat maps for `user`'s test input under `dir/attention/user<user>`.
pub fn export_attention_run(cfg: &RunConfig, checkpoint: &Path, user: usize, dir: &Path) -> Result<Vec<PathBuf>> {
    let ck = Checkpoint::load(checkpoint)?;
    let (_, _, prepared) = load_prepared(cfg, Some(ck.contexts))?;
    let case = prepared
        .test
        .iter()
        .find(|c| c.user == user)
        .ok_or(LsanError::Index { index: user, limit: prepared.test.len() })?;
    let layers = eval::export_attention(&ck.model, SeqInput::new(&case.items, &case.contexts), cfg.attention_k)?;
    eval::write_heatmaps(&dir.join("attention").join(format!("user{user}")), &layers)
}

/// Sequence length and item count of the gradient check.
const CHECK_LEN: usize = 6;
const CHECK_ITEMS: usize = 20;
const CHECK_CONTEXTS: usize = 6;

/// Gradient check of the configured architecture on a small random batch.
pub fn gradcheck_run(cfg: &RunConfig, eps: f64, samples: usize) -> Result<GradCheckReport> {
    let items = if cfg.num_items > 0 { cfg.num_items } else { CHECK_ITEMS };
    let len = CHECK_LEN.min(cfg.max_len);
    let mcfg = ModelConfig {
        num_items: items,
        context_rows: CHECK_CONTEXTS,
        dim: cfg.dim,
        kernel: cfg.kernel,
        heads: cfg.heads,
        layers: cfg.layers,
        max_len: cfg.max_len,
        sizes: default_sizes(items, cfg.num_bases, cfg.m1)?,
        variant: cfg.variant,
    };
    let mut model = LsanModel::<f64>::new(mcfg, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch: Vec<CheckSample> = [len, len.div_ceil(2)]
        .into_iter()
        .map(|n| {
            (
                (0..n).map(|_| rng.gen_range(0..items)).collect(),
                (0..n).map(|_| rng.gen_range(0..CHECK_CONTEXTS)).collect(),
                rng.gen_range(0..items),
            )
        })
        .collect();
    gradient_check(&mut model, &batch, cfg.lambda, eps, samples, cfg.seed)
}

/// `1234567` as `1,234,567`.
pub fn group_thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

pub fn format_breakdown(b: &ParamBreakdown, cfg: &RunConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "embedding {} ({:.2}% of a full table of {})",
        group_thousands(b.embedding),
        100.0 * b.embedding_ratio(),
        group_thousands(b.full_table)
    );
    for (name, v) in [
        ("context", b.context),
        ("fusion", b.fusion),
        ("position", b.position),
        ("encoder", b.encoder),
        ("ffn", b.ffn),
        ("output", b.output),
        ("total", b.total),
    ] {
        let _ = writeln!(s, "{name} {}", group_thousands(v));
    }
    let c = count_branch_params(cfg.heads, cfg.kernel, cfg.dim);
    let _ = writeln!(
        s,
        "per layer: twin H(LD+3D^2) = {} vs plain attention 6HD^2 = {}",
        group_thousands(c.twin),
        group_thousands(c.plain)
    );
    s
}

fn format_stats(st: &DatasetStats) -> String {
    format!(
        "users {}\nitems {}\ncategories {}\ninteractions {}\navg per user {:.2}\navg per item {:.2}\nsparsity {:.2}%\n",
        group_thousands(st.users),
        group_thousands(st.items),
        st.categories,
        group_thousands(st.interactions),
        st.avg_per_user,
        st.avg_per_item,
        100.0 * st.sparsity
    )
}

fn format_report(r: &EvalReport) -> String {
    let mut s = format!("{} users: {}\n", r.split, r.n_users());
    for (i, k) in r.metrics.ks.iter().enumerate() {
        let _ = writeln!(s, "HR@{k} {:.4}  nDCG@{k} {:.4}", r.metrics.hr[i], r.metrics.ndcg[i]);
    }
    s
}

fn format_gradcheck(r: &GradCheckReport, pass: bool) -> String {
    let mut s = String::new();
    for t in &r.tensors {
        let _ = writeln!(s, "{:<28} checked {:>4}  max rel {:.3e}", t.name, t.checked, t.max_rel_error);
    }
    let _ = writeln!(
        s,
        "max relative error {:.3e}: {}",
        r.max_rel_error(),
        if pass { "ok" } else { "FAILED" }
    );
    s
}
