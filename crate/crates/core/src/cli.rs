//! `lungseg` command line: data generation, attribute parsing, training,
//! evaluation and sweeps. Every command writes files and returns an exit
//! code: 0 on success, 1 on runtime failure, 2 on usage or config errors.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use crate::attr_text::{
    parse_batch, read_text_tsv, write_attribute_tsv, write_text_tsv, AttributeParser,
    AttributeTaxonomy, TextRow,
};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{
    ingest_qata, synth_generate, write_gray_png, write_mask_png, ImageTextSample, IngestOptions,
};
use crate::error::Error;
use crate::eval::{self, EvalResult, GridAxis};
use crate::model::SegModel;
use crate::trainer::{split_holdout, FitMode, Trainer};

/// Relative output paths are resolved against this directory when set.
pub const OUT_ENV: &str = "LUNGSEG_OUT";

#[derive(Parser, Debug)]
#[command(
    name = "lungseg",
    version,
    about = "Attribute-guided lung infection segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic dataset: images/, masks/ and texts.tsv.
    GenData(GenDataArgs),
    /// Parse clinical sentences into attribute categories.
    ParseAttrs(ParseAttrsArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Train and score one model per grid cell.
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override applied after the config file (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct ParseAttrsArgs {
    /// `sample_id<TAB>raw_text` file.
    #[arg(long)]
    input: PathBuf,
    /// Output TSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Custom taxonomy table.
    #[arg(long)]
    taxonomy: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    mode: Option<FitMode>,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Score every sample instead of the split the run was evaluated on.
    #[arg(long)]
    all: bool,
    #[arg(long, default_value = "eval")]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// `key=v1,v2,...` (repeatable; cells are the Cartesian product).
    #[arg(long, required = true)]
    grid: Vec<String>,
    /// Dataset directory; a synthetic set of `--n` samples when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    n: usize,
    #[arg(long)]
    mode: Option<FitMode>,
    #[arg(long, default_value = "sweep")]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::ParseAttrs(a) => parse_attrs(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Sweep(a) => sweep(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> i32 {
    let usage = e.chain().any(|c| {
        matches!(c.downcast_ref::<Error>(), Some(Error::Config(_)))
            || c.downcast_ref::<Usage>().is_some()
    });
    if usage {
        2
    } else {
        1
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

fn out_dir(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn resolve_config(args: &ConfigArgs, base: Option<RunConfig>) -> anyhow::Result<RunConfig> {
    let mut cfg = match (&args.config, base) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(b)) => b,
        (None, None) => RunConfig::default(),
    };
    cfg.apply_overrides(args.overrides.iter().map(String::as_str))?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<i32> {
    if a.n == 0 {
        return Err(Usage("--n must be at least 1".into()).into());
    }
    let mut cfg = resolve_config(&a.cfg, None)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let out = out_dir(&a.out);
    let samples = synth_generate(cfg.seed, a.n, &cfg.synth_config())?;
    let (images, masks) = (out.join("images"), out.join("masks"));
    create_dir(&images)?;
    create_dir(&masks)?;
    let mut rows = Vec::with_capacity(samples.len());
    for s in &samples {
        write_gray_png(&images.join(format!("{}.png", s.id)), &s.image)?;
        if let Some(gt) = &s.gt_mask {
            write_mask_png(&masks.join(format!("{}.png", s.id)), gt)?;
        }
        rows.push(TextRow {
            sample_id: s.id.clone(),
            raw_text: s.raw_text.clone(),
        });
    }
    write_text_tsv(BufWriter::new(File::create(out.join("texts.tsv"))?), &rows)?;
    cfg.save(&out.join("config.toml"))?;
    eprintln!("wrote {} samples to {}", samples.len(), out.display());
    Ok(0)
}

fn parse_attrs(a: ParseAttrsArgs) -> anyhow::Result<i32> {
    let taxonomy = match &a.taxonomy {
        Some(p) => AttributeTaxonomy::load(p)?,
        None => AttributeTaxonomy::default(),
    };
    let parser = AttributeParser::new(taxonomy, crate::attr_text::AliasTable::builtin());
    if !a.input.exists() {
        return Err(Error::MissingFile(a.input.clone()).into());
    }
    let rows = read_text_tsv(BufReader::new(File::open(&a.input)?))?;
    let outcome = parse_batch(&parser, &rows);
    match &a.out {
        Some(p) => {
            let p = out_dir(p);
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            write_attribute_tsv(
                BufWriter::new(File::create(&p)?),
                parser.taxonomy(),
                &outcome.parsed,
            )?;
        }
        None => write_attribute_tsv(std::io::stdout().lock(), parser.taxonomy(), &outcome.parsed)?,
    }
    for (id, e) in &outcome.failed {
        eprintln!("unparseable row {id}: {e}");
    }
    Ok(if outcome.failed.is_empty() { 0 } else { 1 })
}

/// Loads a directory laid out like `gen-data` output (ground-truth masks
/// are optional).
pub fn load_dataset(dir: &Path, cfg: &RunConfig) -> crate::Result<Vec<ImageTextSample>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let masks = dir.join("masks");
    let backend = cfg.synth_config().saliency_backend();
    ingest_qata(
        &dir.join("images"),
        &dir.join("texts.tsv"),
        &AttributeParser::default(),
        &backend,
        &IngestOptions {
            height: cfg.height,
            width: cfg.width,
            tau: cfg.tau,
            mask_dir: masks.is_dir().then_some(masks),
        },
    )
}

/// The split a run is scored on: the whole pool for transductive runs, the
/// seeded holdout for inductive ones.
fn train_eval_split(
    data: &[ImageTextSample],
    cfg: &RunConfig,
) -> (Vec<ImageTextSample>, Vec<ImageTextSample>) {
    match cfg.mode {
        FitMode::Transductive => (data.to_vec(), data.to_vec()),
        FitMode::Inductive => split_holdout(data, cfg.holdout, cfg.seed),
    }
}

pub fn write_metrics_tsv(mut w: impl Write, result: &EvalResult) -> crate::Result<()> {
    writeln!(w, "sample_id\tdice\tjaccard")?;
    for s in result.per_sample.iter().flatten() {
        writeln!(w, "{}\t{}\t{}", s.id, s.dice, s.jaccard)?;
    }
    writeln!(w, "mean\t{}\t{}", result.dice, result.jaccard)?;
    Ok(())
}

fn score(model: &SegModel, set: &[ImageTextSample], cfg: &RunConfig) -> crate::Result<EvalResult> {
    eval::evaluate(model, set, cfg.alpha, cfg.use_attribute_text, true)
}

fn train(a: TrainArgs) -> anyhow::Result<i32> {
    let mut cfg = resolve_config(&a.cfg, None)?;
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    let out = out_dir(&a.out);
    create_dir(&out)?;
    cfg.save(&out.join("config.toml"))?;
    let data =
        load_dataset(&a.data, &cfg).with_context(|| format!("loading {}", a.data.display()))?;
    if data.is_empty() {
        return Err(Usage(format!("{} holds no samples", a.data.display())).into());
    }
    let (train_set, eval_set) = train_eval_split(&data, &cfg);
    let model = SegModel::new(cfg.model_config(), &AttributeTaxonomy::default())?;
    let log = BufWriter::new(File::create(out.join("log.jsonl"))?);
    let mut trainer = Trainer::new(model, cfg.train_config())?
        .with_log(Box::new(log))
        .with_checkpoints(&out);
    let history = trainer.fit(&train_set, Some(&eval_set))?;
    let hyper = serde_json::to_value(&cfg)?;
    let last = out.join("last.ckpt");
    checkpoint::save_with(&trainer.model, &AttributeTaxonomy::default(), hyper, &last)?;
    serde_json::to_writer_pretty(File::create(out.join("history.json"))?, &history)?;
    if eval_set.iter().all(|s| s.gt_mask.is_some()) {
        let result = score(&trainer.model, &eval_set, &cfg)?;
        write_metrics_tsv(
            BufWriter::new(File::create(out.join("metrics.tsv"))?),
            &result,
        )?;
        eprintln!(
            "dice {:.4} jaccard {:.4} on {} samples",
            result.dice, result.jaccard, result.n_samples
        );
    }
    eprintln!("checkpoint: {}", last.display());
    Ok(0)
}

fn eval_cmd(a: EvalArgs) -> anyhow::Result<i32> {
    let (model, meta) = checkpoint::load(&a.ckpt)?;
    // Prefer the run's own configuration so the split and threshold match.
    let stored = serde_json::from_value::<RunConfig>(meta.hyperparameters).ok();
    let cfg = resolve_config(&a.cfg, stored)?;
    let data =
        load_dataset(&a.data, &cfg).with_context(|| format!("loading {}", a.data.display()))?;
    let set = if a.all {
        data
    } else {
        train_eval_split(&data, &cfg).1
    };
    let result = score(&model, &set, &cfg)?;
    let out = out_dir(&a.out);
    create_dir(&out)?;
    write_metrics_tsv(
        BufWriter::new(File::create(out.join("metrics.tsv"))?),
        &result,
    )?;
    println!(
        "dice\t{}\njaccard\t{}\nn_samples\t{}",
        result.dice, result.jaccard, result.n_samples
    );
    Ok(0)
}

fn sweep(a: SweepArgs) -> anyhow::Result<i32> {
    let mut cfg = resolve_config(&a.cfg, None)?;
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    let axes = a
        .grid
        .iter()
        .map(|g| g.parse::<GridAxis>())
        .collect::<crate::Result<Vec<_>>>()?;
    // Reject bad keys or values before any training starts.
    for cell in eval::grid_cells(&axes) {
        let mut probe = cfg.clone();
        for (k, v) in &cell {
            probe.set(k, v)?;
        }
    }
    let data = match &a.data {
        Some(d) => load_dataset(d, &cfg).with_context(|| format!("loading {}", d.display()))?,
        None => {
            if a.n == 0 {
                return Err(Usage("--n must be at least 1".into()).into());
            }
            synth_generate(cfg.seed, a.n, &cfg.synth_config())?
        }
    };
    let (train_set, test_set) = train_eval_split(&data, &cfg);
    let out = out_dir(&a.out);
    create_dir(&out)?;
    cfg.save(&out.join("config.toml"))?;
    let rows = eval::ablation_sweep(&cfg, &axes, &train_set, &test_set)?;
    eval::write_results_tsv(
        BufWriter::new(File::create(out.join("results.tsv"))?),
        &rows,
    )?;
    eval::write_results_markdown(BufWriter::new(File::create(out.join("results.md"))?), &rows)?;
    eval::plot_sweep(&out.join("sweep.png"), &rows)?;
    eval::write_results_markdown(std::io::stdout().lock(), &rows)?;
    Ok(0)
}
