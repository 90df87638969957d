//! Command-line entry point.
//!
//! Every command takes an optional JSON config, applies flag overrides on
//! top, and writes the resulting effective config next to its outputs so a
//! run can be replayed from its artifacts alone.
//!
//! Exit codes: 0 success, 2 config error, 3 I/O error, 4 numeric divergence.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{filter_frontal, generate, prepare, read_manifest, split_by_patient, write_manifest, Sample, SynthConfig};
use crate::error::{Error, Result};
use crate::labels::{LabelState, UncertaintyPolicy, NUM_PATHOLOGIES};
use crate::metrics::{evaluate, render_table, subgroup_report, Comparison, EvalReport, GroupBy};
use crate::model::PresetName;
use crate::report_labeler::{label_report, MentionLexicon};
use crate::train::{fit, load_trained, sweep, OptimizerKind, SweepSpec, TrainConfig};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.json";

#[derive(Debug, Parser)]
#[command(name = "cxr-fusion", version, about = "Image + metadata fusion classifier for 14 chest radiograph findings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (PGM images + JSONL manifest).
    GenData(GenDataArgs),
    /// Extract label states from free-text reports.
    Label(LabelArgs),
    /// Train one model and write its best checkpoint and run log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a dataset.
    Eval(EvalArgs),
    /// Run a grid or random hyperparameter sweep.
    Sweep(SweepArgs),
    /// Compare a baseline and a fusion evaluation report.
    Report(ReportArgs),
}

fn unit_fraction(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("must be in [0, 1], got {v}"))
    }
}

fn non_negative(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be finite and >= 0, got {v}"))
    }
}

fn positive(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be finite and > 0, got {v}"))
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// JSON file with synthetic-data settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_patients: Option<usize>,
    #[arg(long)]
    pub images_per_patient: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long, value_parser = unit_fraction)]
    pub ambiguity_fraction: Option<f64>,
    #[arg(long, value_parser = unit_fraction)]
    pub ambiguous_strength: Option<f64>,
    #[arg(long, value_parser = non_negative)]
    pub noise_sd: Option<f64>,
    #[arg(long, value_parser = unit_fraction)]
    pub not_mentioned_rate: Option<f64>,
    #[arg(long, value_parser = unit_fraction)]
    pub uncertain_rate: Option<f64>,
    #[arg(long, value_parser = unit_fraction)]
    pub lateral_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    /// A directory of `.txt` reports (id = file stem) or a JSONL file of `{id, text}`.
    #[arg(long)]
    pub input: PathBuf,
    /// Output JSONL of `{id, states}`.
    #[arg(long)]
    pub out: PathBuf,
    /// Lexicon JSON; the bundled one when omitted.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
}

/// Training flags shared by `train` and `sweep`.
#[derive(Debug, Args)]
pub struct TrainOverrides {
    /// JSON file with training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<PresetName>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_parser = positive)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub policy: Option<UncertaintyPolicy>,
    /// Comma-separated metadata features, or `none` for the image-only baseline.
    #[arg(long)]
    pub meta_features: Option<String>,
    /// Shorthand for `--meta-features none`.
    #[arg(long, conflicts_with = "meta_features")]
    pub baseline: bool,
    #[arg(long)]
    pub meta_hidden: Option<usize>,
    #[arg(long)]
    pub meta_out: Option<usize>,
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Which split of the checkpoint's own patient split to score.
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    /// Subgroup keys (age, sex, bmi, race, insurance); repeatable.
    #[arg(long = "group-by")]
    pub group_by: Vec<String>,
    #[arg(long, default_value_t = crate::metrics::DEFAULT_MIN_GROUP_SIZE)]
    pub min_group_size: usize,
    /// Score every sample for every pathology, ignoring label masks.
    #[arg(long)]
    pub no_mask: bool,
    /// Row label in the text table.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Sweep spec JSON (strategy and per-dimension value lists).
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Trials run concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub baseline: PathBuf,
    #[arg(long)]
    pub fusion: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Sample { .. } => EXIT_IO,
        Error::Divergence(_) | Error::NumericDomain(_) => EXIT_DIVERGENCE,
        Error::Config(_) | Error::Shape(_) | Error::Mode(_) | Error::Encoding(_) => EXIT_CONFIG,
    }
}

/// Parses `std::env::args`, runs the command and returns the process exit code.
pub fn main_exit() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Label(a) => label(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Report(a) => report(a),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_text(path, &text)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::io(path, "no such file or directory"))
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => { $( if let Some(v) = a.$field { cfg.$field = v; } )* };
    }
    set!(
        n_patients,
        images_per_patient,
        seed,
        image_size,
        ambiguity_fraction,
        ambiguous_strength,
        noise_sd,
        not_mentioned_rate,
        uncertain_rate,
        lateral_fraction
    );
    cfg.validate()?;
    let samples = generate(&cfg)?;
    ensure_dir(&a.out)?;
    write_manifest(&samples, &a.out)?;
    write_json(&a.out.join(EFFECTIVE_CONFIG_FILE), &cfg)?;
    println!(
        "wrote {} samples from {} patients to {}",
        samples.len(),
        cfg.n_patients,
        a.out.display()
    );
    Ok(())
}

#[derive(Deserialize)]
struct ReportLine {
    id: String,
    text: String,
}

#[derive(Serialize)]
struct LabelLine<'a> {
    id: &'a str,
    states: [LabelState; NUM_PATHOLOGIES],
}

fn read_reports(input: &Path) -> Result<Vec<(String, String)>> {
    require(input)?;
    if input.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(input)
            .map_err(|e| Error::io(input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        files.sort();
        files
            .into_iter()
            .map(|p| {
                let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                Ok((id, text))
            })
            .collect()
    } else {
        let text = fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                let r: ReportLine = serde_json::from_str(l).map_err(|e| Error::io(input, format!("line {}: {e}", i + 1)))?;
                Ok((r.id, r.text))
            })
            .collect()
    }
}

fn label(a: LabelArgs) -> Result<()> {
    let lex = match &a.lexicon {
        Some(p) => MentionLexicon::load(p)?,
        None => MentionLexicon::default(),
    };
    let reports = read_reports(&a.input)?;
    let started = Instant::now();
    let mut out = String::new();
    for (id, text) in &reports {
        let line = LabelLine {
            id,
            states: label_report(text, &lex),
        };
        out.push_str(&serde_json::to_string(&line).expect("serializable"));
        out.push('\n');
    }
    let secs = started.elapsed().as_secs_f64();
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_text(&a.out, &out)?;
    println!("labelled {} reports in {:.3}s", reports.len(), secs);
    Ok(())
}

fn resolve_train(o: &TrainOverrides) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &o.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => { $( if let Some(v) = o.$field.clone() { cfg.$field = v; } )* };
    }
    set!(preset, epochs, batch_size, learning_rate, optimizer, seed, policy, meta_hidden, meta_out, split_seed);
    if o.baseline {
        cfg.meta_features = None;
    } else if let Some(f) = &o.meta_features {
        cfg.meta_features = if f.trim().eq_ignore_ascii_case("none") {
            None
        } else {
            let parsed = crate::labels::MetaFeatureConfig::parse_list(f)?;
            Some(parsed.names().into_iter().map(String::from).collect())
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Split {
    train: Vec<Sample>,
    val: Vec<Sample>,
    test: Vec<Sample>,
}

fn load_split(data: &Path, cfg: &TrainConfig) -> Result<Split> {
    require(data)?;
    let mut samples = read_manifest(data)?;
    if cfg.frontal_only {
        samples = filter_frontal(samples);
    }
    let s = split_by_patient(samples, cfg.split, cfg.split_seed)?;
    Ok(Split {
        train: s.train,
        val: s.val,
        test: s.test,
    })
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_train(&a.train)?;
    let split = load_split(&a.data, &cfg)?;
    ensure_dir(&a.out)?;
    write_json(&a.out.join(EFFECTIVE_CONFIG_FILE), &cfg)?;
    let out = fit(&cfg, &split.train, &split.val)?;
    out.save(&a.out.join("checkpoint.json"), &cfg)?;
    write_text(&a.out.join("runlog.csv"), &out.log.to_csv())?;
    println!(
        "{} {}: best epoch {} of {}, val macro AUROC {}",
        cfg.preset,
        if cfg.meta_features.is_some() { "fusion" } else { "baseline" },
        out.best_epoch,
        cfg.epochs,
        out.best_val_auroc.map_or("n/a".into(), |v| format!("{v:.5}"))
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalEcho<'a> {
    data: &'a Path,
    checkpoint: &'a Path,
    split: SplitName,
    group_by: &'a [String],
    min_group_size: usize,
    mask_aware: bool,
}

fn eval(a: EvalArgs) -> Result<()> {
    require(&a.checkpoint)?;
    let trained = load_trained(&a.checkpoint)?;
    let cfg = &trained.info.train_config;
    let split = load_split(&a.data, cfg)?;
    let samples: Vec<Sample> = match a.split {
        SplitName::Train => split.train,
        SplitName::Val => split.val,
        SplitName::Test => split.test,
        SplitName::All => split.train.into_iter().chain(split.val).chain(split.test).collect(),
    };
    let examples = prepare(&samples, cfg.policy, trained.info.meta_features.as_ref())?;
    let mask_aware = !a.no_mask;
    let groups = a
        .group_by
        .iter()
        .map(|k| {
            let mut g = GroupBy::new(k)?;
            g.min_size = a.min_group_size;
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = evaluate(&trained.model, &examples, mask_aware)?;
    let mut sections = Vec::new();
    for g in &groups {
        sections.push(subgroup_report(&trained.model, &examples, g, mask_aware)?);
    }
    report.subgroups = sections.first().cloned();

    ensure_dir(&a.out)?;
    write_json(
        &a.out.join(EFFECTIVE_CONFIG_FILE),
        &EvalEcho {
            data: &a.data,
            checkpoint: &a.checkpoint,
            split: a.split,
            group_by: &a.group_by,
            min_group_size: a.min_group_size,
            mask_aware,
        },
    )?;
    write_json(&a.out.join("eval.json"), &report)?;
    if sections.len() > 1 {
        write_json(&a.out.join("subgroups.json"), &sections)?;
    }
    let name = a.name.clone().unwrap_or_else(|| {
        format!(
            "{} {}",
            cfg.preset,
            if trained.info.meta_features.is_some() { "fusion" } else { "baseline" }
        )
    });
    let mut table = render_table(&[(name.as_str(), &report)]);
    for s in &sections {
        table.push_str(&format!("\nsubgroups by {} (min size {}):\n", s.key, s.min_size));
        for g in &s.groups {
            let v = if g.insufficient {
                "insufficient".to_string()
            } else {
                g.macro_auroc_all.map_or("n/a".into(), |v| format!("{v:.5}"))
            };
            table.push_str(&format!("  {:<16} n={:<6} macro AUROC {v}\n", g.group, g.n_samples));
        }
        table.push_str(&format!(
            "  max gap {}\n",
            s.max_gap.map_or("n/a".into(), |v| format!("{v:.5}"))
        ));
    }
    write_text(&a.out.join("eval.txt"), &table)?;
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct SweepEcho<'a> {
    base: &'a TrainConfig,
    spec: &'a SweepSpec,
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let base = resolve_train(&a.train)?;
    require(&a.spec)?;
    let spec: SweepSpec = read_json(&a.spec)?;
    spec.validate()?;
    let split = load_split(&a.data, &base)?;
    ensure_dir(&a.out)?;
    write_json(&a.out.join(EFFECTIVE_CONFIG_FILE), &SweepEcho { base: &base, spec: &spec })?;
    let outcome = sweep(&spec, &base, &split.train, &split.val, a.jobs)?;
    write_text(&a.out.join("trials.csv"), &outcome.to_csv())?;
    let logs = a.out.join("runlogs");
    ensure_dir(&logs)?;
    for (i, log) in outcome.logs.iter().enumerate() {
        if let Some(log) = log {
            write_text(&logs.join(format!("trial_{i:03}.csv")), &log.to_csv())?;
        }
    }
    match (outcome.winner, &outcome.winner_config) {
        (Some(w), Some(cfg)) => {
            write_json(&a.out.join("winner.json"), cfg)?;
            println!(
                "{} trials; winner trial {} with val macro AUROC {:.5}",
                outcome.rows.len(),
                w,
                outcome.rows[w].best_val_auroc.unwrap_or(f64::NAN)
            );
        }
        _ => println!("{} trials; none succeeded", outcome.rows.len()),
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    require(&a.baseline)?;
    require(&a.fusion)?;
    let base: EvalReport = read_json(&a.baseline)?;
    let fusion: EvalReport = read_json(&a.fusion)?;
    let cmp = Comparison::new(&base, &fusion);
    ensure_dir(&a.out)?;
    let text = cmp.render();
    write_json(&a.out.join("comparison.json"), &cmp)?;
    write_text(&a.out.join("comparison.txt"), &text)?;
    let mut stdout = std::io::stdout().lock();
    let _ = stdout.write_all(text.as_bytes());
    Ok(())
}
