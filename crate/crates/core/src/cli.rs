//! The `pinet` command line.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or input error,
//! 3 integrity error (corrupt checkpoint), 4 numerical divergence.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::{self, CheckpointError};
use crate::data::{self, CsvSchema, Dataset, Task};
use crate::oracle::{self, OracleError};
use crate::polynet::{count_params, init_params, ModelSpec, NormalizationSpec, PolyChain, PolyModel};
use crate::rng;
use crate::spec_doc::parse_spec;
use crate::train::{self, evaluate, Precision, TrainConfig, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INTEGRITY: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "pinet", version, about = "Polynomial networks with exact expansion oracles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the recursive forward against its expansions and its degree.
    Verify(VerifyArgs),
    /// Print the expanded polynomial as a monomial table.
    Expand(ExpandArgs),
    /// Train a model and write a checkpoint plus a metrics table.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Summarize a checkpoint.
    Info(InfoArgs),
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct ModelSource {
    /// Model spec document.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Checkpoint file.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub model: ModelSource,
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    /// Relative tolerance for route agreement.
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the report as key=value lines to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExpandArgs {
    #[command(flatten)]
    pub model: ModelSource,
    /// Write the table here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Generator {
    /// Noisy XOR blobs; `--n` points per corner.
    Xor,
    /// Target z1*z2 on [-1, 1]^2.
    Product,
    /// Random polynomial target of degree `--degree`.
    Poly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Regression,
    Classification,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false, id = "source")]
pub struct DataSource {
    /// CSV file with a header; the last column is the target.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Built-in generator.
    #[arg(long, value_enum)]
    pub gen: Option<Generator>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[command(flatten)]
    pub source: DataSource,
    /// How to read the CSV target column.
    #[arg(long, value_enum, default_value_t = TaskArg::Regression)]
    pub task: TaskArg,
    /// Generator sample count (per corner for xor).
    #[arg(long)]
    pub n: Option<usize>,
    /// Noise standard deviation for xor.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Total degree for the poly generator.
    #[arg(long, default_value_t = 2)]
    pub degree: usize,
    /// Input dimension for the poly generator; defaults to the model's.
    #[arg(long)]
    pub dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Seeds data generation, the validation split and shuffling; the
    /// spec's own seed drives initialization.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    /// Comma-separated epochs after which the rate decays.
    #[arg(long, value_delimiter = ',')]
    pub milestones: Vec<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub lr_decay: f64,
    /// Hold out this fraction of rows for validation.
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Round parameters to single precision after every step.
    #[arg(long)]
    pub f32: bool,
    /// Checkpoint path; milestone snapshots go to `<out>.epoch<E>`.
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics table path; defaults to `<out>.metrics.csv`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InfoArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

/// Failure carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            msg: msg.into(),
        }
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Self {
            code: if e.is_integrity() { EXIT_INTEGRITY } else { EXIT_USAGE },
            msg: e.to_string(),
        }
    }
}

impl From<data::DataError> for Failure {
    fn from(e: data::DataError) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<OracleError> for Failure {
    fn from(e: OracleError) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<crate::polynet::PolyError> for Failure {
    fn from(e: crate::polynet::PolyError) -> Self {
        Self::usage(e.to_string())
    }
}

type CmdResult = std::result::Result<String, Failure>;

fn read_spec(path: &Path) -> std::result::Result<ModelSpec, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    parse_spec(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

/// Loads the model; unset normalization resolves to none.
fn load_model(src: &ModelSource) -> std::result::Result<(ModelSpec, PolyChain), Failure> {
    match (&src.spec, &src.checkpoint) {
        (Some(p), _) => {
            let mut spec = read_spec(p)?;
            spec.resolve_norm(NormalizationSpec::none());
            let chain = init_params(&spec, spec.seed)?;
            Ok((spec, chain))
        }
        (None, Some(p)) => {
            let ck = checkpoint::load(p)?;
            Ok((ck.spec, ck.chain))
        }
        (None, None) => Err(Failure::usage("one of --spec or --checkpoint is required")),
    }
}

fn strip_norm(chain: PolyChain, notes: &mut String) -> PolyChain {
    if chain.has_norm() {
        notes.push_str("note: normalization removed; the oracles need an exact polynomial\n");
        chain.without_norm()
    } else {
        chain
    }
}

fn write_file(path: &Path, text: &str) -> std::result::Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn cmd_verify(a: &VerifyArgs, err: &mut String) -> CmdResult {
    if a.trials == 0 || !(a.tol > 0.0) {
        return Err(Failure::usage("--trials must be positive and --tol must be > 0"));
    }
    let (_, chain) = load_model(&a.model)?;
    let chain = strip_norm(chain, err);
    let eq = oracle::equivalence_check(&chain, a.trials, a.tol, a.seed)?;

    let d = chain.input_dim();
    let mut probe_rng = rng::substream(a.seed, u64::MAX);
    let z0 = rng::uniform_vec(&mut probe_rng, d, -0.5, 0.5);
    let v = rng::unit_vector(&mut probe_rng, d);
    let nominal = chain.nominal_degree();
    let probe = oracle::degree_check(&chain, &z0, &v, nominal + 2)?;
    let symbolic = match oracle::symbolic_expand(&chain) {
        Ok(p) => Some(p.total_degree()),
        Err(OracleError::BudgetExceeded { .. }) => None,
        Err(e) => return Err(e.into()),
    };
    let expected = symbolic.unwrap_or(nominal);
    let degree_ok = probe.degree() == Some(expected) && expected == nominal;
    let passed = eq.passed && degree_ok;

    let mut out = String::new();
    writeln!(out, "{eq}").unwrap();
    writeln!(out, "degree along a random line: {}", probe.degree().map_or("exceeds probe".into(), |d| d.to_string())).unwrap();
    writeln!(out, "  nominal degree: {nominal}").unwrap();
    writeln!(out, "  symbolic total degree: {}", symbolic.map_or("skipped (over budget)".into(), |d| d.to_string())).unwrap();
    writeln!(out, "  {}", if degree_ok { "PASS" } else { "FAIL" }).unwrap();
    writeln!(out, "verify: {}", if passed { "PASS" } else { "FAIL" }).unwrap();
    if let Some(p) = &a.out {
        let mut kv = eq.to_kv();
        kv.push_str(&probe.to_kv());
        writeln!(kv, "nominal_degree={nominal}").unwrap();
        writeln!(kv, "symbolic_degree={}", symbolic.map_or("skipped".into(), |d| d.to_string())).unwrap();
        writeln!(kv, "verdict={}", if passed { "pass" } else { "fail" }).unwrap();
        write_file(p, &kv)?;
    }
    if passed {
        Ok(out)
    } else {
        Err(Failure { code: EXIT_VERIFY, msg: out })
    }
}

fn cmd_expand(a: &ExpandArgs, err: &mut String) -> CmdResult {
    let (_, chain) = load_model(&a.model)?;
    let chain = strip_norm(chain, err);
    let poly = oracle::symbolic_expand(&chain)?;
    let table = poly.to_table();
    match &a.out {
        Some(p) => {
            write_file(p, &table)?;
            Ok(format!("wrote {} monomials to {}\n", poly.len(), p.display()))
        }
        None => Ok(table),
    }
}

fn load_data(a: &DataArgs, seed: u64, input_dim: usize) -> std::result::Result<Dataset, Failure> {
    if let Some(path) = &a.source.data {
        if !path.exists() {
            return Err(Failure::usage(format!("{}: no such data file", path.display())));
        }
        let task = match a.task {
            TaskArg::Regression => Task::Regression,
            TaskArg::Classification => Task::Classification,
        };
        let schema = CsvSchema::last_column_target(&data::read_header(path)?, task)?;
        return Ok(data::load_csv(path, &schema)?);
    }
    let gen = a.source.gen.ok_or_else(|| Failure::usage("one of --data or --gen is required"))?;
    Ok(match gen {
        Generator::Xor => data::gen_xor(seed, a.n.unwrap_or(1), a.noise)?,
        Generator::Product => data::gen_product(seed, a.n.unwrap_or(256))?,
        Generator::Poly => data::gen_poly_target(seed, a.dim.unwrap_or(input_dim), a.degree, a.n.unwrap_or(256))?,
    })
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_train(a: &TrainArgs) -> CmdResult {
    let mut spec = read_spec(&a.spec)?;
    spec.resolve_norm(NormalizationSpec::tanh());
    let ds = load_data(&a.data, a.seed, spec.input_dim)?;
    let (train_ds, val_ds) = match a.val_fraction {
        Some(f) => {
            let (t, v) = data::split(&ds, f, a.seed)?;
            (t, Some(v))
        }
        None => (ds, None),
    };
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        lr: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        milestones: a.milestones.clone(),
        lr_decay: a.lr_decay,
        seed: a.seed,
        precision: if a.f32 { Precision::F32 } else { Precision::F64 },
    };
    let mut snapshot_err = None;
    let outcome = train::train_from_spec(&spec, &train_ds, val_ds.as_ref(), &cfg, |epoch, chain| {
        let p = sibling(&a.out, &format!(".epoch{epoch}"));
        if let Err(e) = checkpoint::save(&p, chain, spec.seed) {
            snapshot_err.get_or_insert(e);
        }
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(TrainError::Diverged { epoch, step, reason, state }) => {
            let dump = sibling(&a.out, ".diverged");
            let msg = match checkpoint::save(&dump, &state, spec.seed) {
                Ok(()) => format!("training diverged at epoch {epoch}, step {step}: {reason}; last good parameters dumped to {}", dump.display()),
                Err(se) => format!("training diverged at epoch {epoch}, step {step}: {reason}; dumping state failed: {se}"),
            };
            return Err(Failure { code: EXIT_DIVERGED, msg });
        }
        Err(e) => return Err(Failure::usage(e.to_string())),
    };
    if let Some(e) = snapshot_err {
        return Err(e.into());
    }
    checkpoint::save(&a.out, &outcome.chain, spec.seed)?;
    let metrics_path = a.metrics.clone().unwrap_or_else(|| sibling(&a.out, ".metrics.csv"));
    write_file(&metrics_path, &outcome.metrics.to_csv())?;

    let mut out = String::new();
    writeln!(out, "data: {} ({} rows, hash {:016x})", train_ds.provenance.source, train_ds.len(), train_ds.provenance.hash).unwrap();
    writeln!(out, "initial train loss: {:e}", outcome.metrics.initial_train_loss).unwrap();
    if let Some(r) = outcome.metrics.final_row() {
        writeln!(out, "final train loss: {:e}", r.train_loss).unwrap();
        if let Some(acc) = r.train_acc {
            writeln!(out, "final train accuracy: {acc}").unwrap();
        }
        if let Some(l) = r.val_loss {
            writeln!(out, "final validation loss: {l:e}").unwrap();
        }
        if let Some(acc) = r.val_acc {
            writeln!(out, "final validation accuracy: {acc}").unwrap();
        }
    }
    writeln!(out, "checkpoint: {}", a.out.display()).unwrap();
    writeln!(out, "metrics: {}", metrics_path.display()).unwrap();
    Ok(out)
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    let ck = checkpoint::load(&a.checkpoint)?;
    let ds = load_data(&a.data, a.seed, ck.spec.input_dim)?;
    let row = evaluate(&ck.chain, &ds).map_err(|e| Failure::usage(e.to_string()))?;
    let mut out = format!("rows: {}\nloss: {:e}\n", ds.len(), row.loss);
    if let Some(acc) = row.accuracy {
        writeln!(out, "accuracy: {acc}").unwrap();
    }
    Ok(out)
}

/// Text summary of a checkpoint, as printed by `pinet info`.
pub fn summarize(spec: &ModelSpec, chain: &PolyChain) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "input dim: {}\noutput dim: {}\nblocks: {}\ndegree: {}\ninner bias: {}\nseed: {}",
        spec.input_dim,
        spec.output_dim(),
        spec.blocks.len(),
        spec.nominal_degree(),
        if spec.inner_bias { "trainable" } else { "frozen at zero" },
        spec.seed
    )
    .unwrap();
    for (i, b) in spec.blocks.iter().enumerate() {
        write!(out, "block {i}: variant={} order={} d={}", b.variant, b.order, spec.block_input_dim(i)).unwrap();
        if b.variant != crate::polynet::Variant::Simple {
            write!(out, " k={} omega={}", b.rank, b.aux_dim()).unwrap();
        }
        let norm = b.norm.unwrap_or_default();
        writeln!(out, " o={} norm={}", b.output_dim, norm.mode).unwrap();
    }
    writeln!(out, "parameters: {}", count_params(spec)).unwrap();
    for (name, t) in chain.named_tensors() {
        writeln!(out, "  {name} {:?} norm={:.6e}", t.shape(), t.frobenius_norm()).unwrap();
    }
    out
}

fn cmd_info(a: &InfoArgs) -> CmdResult {
    let ck = checkpoint::load(&a.checkpoint)?;
    Ok(summarize(&ck.spec, &ck.chain))
}

/// Runs one command line, writing to `out`/`err`, and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    let mut notes = String::new();
    let result = match &cli.command {
        Command::Verify(a) => cmd_verify(a, &mut notes),
        Command::Expand(a) => cmd_expand(a, &mut notes),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Info(a) => cmd_info(a),
    };
    let _ = err.write_all(notes.as_bytes());
    match result {
        Ok(text) => {
            let _ = out.write_all(text.as_bytes());
            EXIT_OK
        }
        Err(f) if f.code == EXIT_VERIFY => {
            let _ = out.write_all(f.msg.as_bytes());
            EXIT_VERIFY
        }
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.msg);
            f.code
        }
    }
}
