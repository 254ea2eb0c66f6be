use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use difd_core::analysis::{probe_features, FeatureKind};
use difd_core::allocation::save_beta_csv;
use difd_core::corpus::{
    convert_twitter, corpus_stats, generate_synthetic, load_jsonl, load_semeval_xml, write_jsonl, Domain, Instance,
    SyntheticSpec,
};
use difd_core::error::ErrorCategory;
use difd_core::ndgrad::OpKind;
use difd_core::trainer::{full_model_gradcheck, holdout_split, write_atomic, FitData, LoadedModel, RunConfig, Trainer};
use difd_core::{DifdError, Variant};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "difd", version, about = "Cross-domain aspect-level sentiment classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic source/target corpus pair.
    Generate(GenerateArgs),
    /// Convert SemEval XML or Twitter-format files to JSONL.
    Convert(ConvertArgs),
    /// Train one variant and write a run directory.
    Train(TrainArgs),
    /// Score a checkpoint on gold-labelled data.
    Eval(EvalArgs),
    /// Proxy A-distance between source and target features.
    Probe(ProbeArgs),
    /// Export allocation weights as CSV.
    ExportCa(ExportCaArgs),
    /// Finite-difference check of the full model's gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Generator spec (JSON). Defaults to the built-in desk spec.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Semeval,
    Twitter,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Source => Domain::Source,
            DomainArg::Target => Domain::Target,
        }
    }
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    format: Format,
    #[arg(long, value_enum, default_value = "source")]
    domain: DomainArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config (JSON); flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Labelled source training data (JSONL).
    #[arg(long)]
    source: PathBuf,
    /// Source validation data. Without it, 10% of source sentences are held out.
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Unlabelled target data.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Labelled target data, reported per epoch but never used for selection.
    #[arg(long)]
    target_eval: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda_a: Option<f64>,
    #[arg(long)]
    lambda_d: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Pretrained vectors, one `word v1 .. vd` per line.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    embedding_init_scale: Option<f64>,
    /// Use the full-size dimensions (100/64) as the base config.
    #[arg(long)]
    full_dims: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write one prediction per line (JSONL).
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Invariant,
    Specific,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    source_data: PathBuf,
    #[arg(long)]
    target_data: PathBuf,
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the feature matrix (CSV with a `domain` column).
    #[arg(long)]
    features_out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportCaArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    Tiny,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "tiny")]
    scale: Scale,
    #[arg(long, default_value = "difd")]
    variant: Variant,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Corrupt one op's backward rule (negative control).
    #[arg(long, hide = true)]
    corrupt_op: Option<String>,
}

/// Bad flag combinations; exit code 1.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// A check ran and failed; exit code 3.
#[derive(Debug)]
struct CheckFailed(String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    if err.downcast_ref::<CheckFailed>().is_some() {
        return 3;
    }
    match err.chain().find_map(|e| e.downcast_ref::<DifdError>()) {
        Some(e) => match e.category() {
            ErrorCategory::Usage => 1,
            ErrorCategory::Data => 2,
            ErrorCategory::Numeric => 3,
        },
        None => 2,
    }
}

/// Error chain joined by `: `, skipping causes already quoted by the
/// message above them.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
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
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Convert(a) => convert(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Probe(a) => probe(a),
        Command::ExportCa(a) => export_ca(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => SyntheticSpec::load(p)?,
        None => SyntheticSpec::desk(a.seed.unwrap_or(0)),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let corpora = generate_synthetic(&spec)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (name, split) in corpora.splits() {
        write_jsonl(&a.out.join(format!("{name}.jsonl")), split)?;
    }
    let stats = corpus_stats(
        &corpora.splits(),
        &[&corpora.source_train, &corpora.source_test],
        &[&corpora.target_unlabeled, &corpora.target_gold],
    );
    write_json(&a.out.join("stats.json"), &stats)
}

fn convert(a: ConvertArgs) -> Result<()> {
    let domain = Domain::from(a.domain);
    let instances = match a.format {
        Format::Semeval => {
            let (inst, report) = load_semeval_xml(&a.input, domain)?;
            eprintln!("{}", serde_json::to_string(&report)?);
            inst
        }
        Format::Twitter => {
            let text = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
            convert_twitter(&text, domain, &a.input)?
        }
    };
    write_jsonl(&a.out, &instances)?;
    eprintln!("wrote {} instances to {}", instances.len(), a.out.display());
    Ok(())
}

fn resolve_run_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut run = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None if a.full_dims => RunConfig::full(),
        None => RunConfig::desk(),
    };
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = a.$field.clone() {
                run.$field = v;
            }
        )*};
    }
    set!(variant, seed, lr, batch_size, lambda_a, lambda_d, max_epochs, patience, embedding_dim, hidden, embedding_init_scale);
    if a.embeddings.is_some() {
        run.embedding_file = a.embeddings.clone();
    }
    run.paths.source = Some(a.source.clone());
    run.paths.valid = a.valid.clone();
    run.paths.target = a.target.clone();
    run.paths.target_eval = a.target_eval.clone();
    run.validate()?;
    Ok(run)
}

fn train(a: TrainArgs) -> Result<()> {
    let run = resolve_run_config(&a)?;
    let v = run.variant;
    if v == Variant::DifdS && a.target.is_some() {
        return Err(usage("difd-s trains on source data only; drop --target"));
    }
    if v.uses_target() && a.target.is_none() {
        return Err(usage(format!("variant {v} needs --target")));
    }
    let source = load_jsonl(&a.source)?;
    let (train, valid) = match &a.valid {
        Some(p) => (source, load_jsonl(p)?),
        None => holdout_split(&source, 0.1, run.seed)?,
    };
    let target = a.target.as_deref().map(load_jsonl).transpose()?;
    let target_eval = a.target_eval.as_deref().map(load_jsonl).transpose()?;
    let mut trainer = Trainer::from_corpora(run, &train, target.as_deref())?;
    let data = FitData {
        source_train: &train,
        source_valid: &valid,
        target: target.as_deref(),
        target_eval: target_eval.as_deref(),
    };
    let outcome = trainer.fit_to_dir(&data, &a.out)?;
    eprintln!(
        "best epoch {} of {}: validation accuracy {:.4}",
        outcome.best_epoch,
        outcome.history.len(),
        outcome.best_accuracy
    );
    Ok(())
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = LoadedModel::load(&a.ckpt)?;
    if let Some(src) = &model.meta.config.paths.source {
        if same_file(src, &a.data) {
            eprintln!("warning: {} is the training split of this checkpoint", a.data.display());
        }
    }
    let data = load_jsonl(&a.data)?;
    let inf = model.inference();
    let rows = inf.predictions(&data)?;
    let report = inf.evaluate(&data)?;
    write_json(&a.out, &report)?;
    if let Some(p) = &a.predictions {
        let mut text = String::new();
        for r in &rows {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        write_atomic(p, text.as_bytes())?;
    }
    eprintln!("accuracy {:.4}  macro-F1 {:.4}  ({} instances)", report.accuracy, report.macro_f1, report.count);
    Ok(())
}

fn relabel(mut instances: Vec<Instance>, domain: Domain) -> Vec<Instance> {
    for i in &mut instances {
        i.domain = domain;
    }
    instances
}

fn probe(a: ProbeArgs) -> Result<()> {
    let model = LoadedModel::load(&a.ckpt)?;
    let kind = match a.kind {
        KindArg::Invariant => FeatureKind::Invariant,
        KindArg::Specific => FeatureKind::Specific,
    };
    let source = relabel(load_jsonl(&a.source_data)?, Domain::Source);
    let target = relabel(load_jsonl(&a.target_data)?, Domain::Target);
    let inf = model.inference();
    let mut features = inf.features(&source, kind)?;
    features.append(inf.features(&target, kind)?);
    if let Some(p) = &a.features_out {
        features.save_csv(p)?;
    }
    let result = probe_features(&features, a.repeats, a.seed)?;
    match &a.out {
        Some(p) => write_json(p, &result)?,
        None => println!("{}", serde_json::to_string_pretty(&result)?),
    }
    Ok(())
}

fn export_ca(a: ExportCaArgs) -> Result<()> {
    let model = LoadedModel::load(&a.ckpt)?;
    let data = load_jsonl(&a.data)?;
    let records = model.inference().beta(&data)?;
    save_beta_csv(&a.out, &records)?;
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let Scale::Tiny = a.scale;
    let fault = match &a.corrupt_op {
        Some(name) => Some(OpKind::parse(name).ok_or_else(|| usage(format!("unknown op '{name}'")))?),
        None => None,
    };
    if let Some(op) = fault {
        println!("corrupted op: {}", op.name());
    }
    let report = full_model_gradcheck(a.variant, fault, a.tolerance)?;
    let mut groups: BTreeMap<&str, (bool, f64)> = BTreeMap::new();
    for p in &report.params {
        let group = p.name.split('.').next().unwrap_or(&p.name);
        let e = groups.entry(group).or_insert((true, 0.0));
        e.0 &= p.passed;
        e.1 = e.1.max(p.max_rel_error);
    }
    for (group, (passed, err)) in &groups {
        println!("{} {group} max_rel_error={err:.3e}", if *passed { "PASS" } else { "FAIL" });
    }
    for p in report.failures() {
        println!(
            "  {}[{}]: analytic {:.6e} numeric {:.6e}",
            p.name, p.worst_index, p.analytic, p.numeric
        );
    }
    if report.passed {
        println!("gradcheck passed (tolerance {:e})", report.tolerance);
        Ok(())
    } else {
        let culprit = fault.map_or(String::new(), |op| format!(" (corrupted op: {})", op.name()));
        Err(CheckFailed(format!("gradcheck failed{culprit}")).into())
    }
}
