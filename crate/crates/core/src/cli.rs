//! Command-line front end. Every file a command writes goes under `--out`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or runtime
//! error, 3 a check that ran but did not pass.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{Config, PRESETS};
use crate::corpus::{
    dataset_stats, diff_counts, load_dataset, sentences_with, write_jsonl, DataFormat, Example, ExpectedCounts,
    LoadOptions, SooRule,
};
use crate::decoder::exhaustive_round_trip;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MatchMode, Scored};
use crate::model::{Model, Stage};
use crate::pdconv::{parse_stack, stack_label};
use crate::synth::{generate, SynthConfig};
use crate::tokenize::{tokenize, Vocab};
use crate::trainer::{train, TrainOptions, BEST_DIR};
use crate::triple::RelSchema;

/// `--data` value that selects the generated corpus.
pub const SYNTHETIC: &str = "synthetic";

#[derive(Debug, Parser)]
#[command(name = "bicon", version, about = "Table-filling relational triple extraction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and keep the checkpoint with the best dev F1.
    Train(TrainArgs),
    /// Score a trained model on a split.
    Eval(EvalArgs),
    /// Write predicted triples for a split as JSON lines.
    Predict(PredictArgs),
    /// Overlap-pattern counts of a split, optionally checked against a reference.
    Stats(StatsArgs),
    /// Encode and decode every small triple placement.
    DecodeCheck(DecodeCheckArgs),
    /// Channel-mean image of one intermediate grid.
    Heatmap(HeatmapArgs),
    /// Seconds per training epoch for several conv stacks.
    Timing(TimingArgs),
    /// Write the generated corpus as JSON lines.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory holding `<split>.jsonl`/`<split>.json`, a single file, or
    /// `synthetic`.
    #[arg(long, default_value = SYNTHETIC)]
    pub data: String,
    /// `canonical` (token spans) or `benchmark` (entity strings).
    #[arg(long, default_value = "canonical")]
    pub format: DataFormat,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// TOML file or preset name (desk, synthetic, nyt, webnlg).
    #[arg(long)]
    pub config: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from the state saved in `--out`.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Model directory, or a training `--out` directory.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Match mode for the pattern-split table.
    #[arg(long, default_value = "partial")]
    pub mode: MatchMode,
    #[arg(long, default_value = "cross-role-or-nested")]
    pub soo_rule: SooRule,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// JSON object with any of sentences, triples, normal, seo, epo, soo.
    #[arg(long)]
    pub expected: Option<PathBuf>,
    #[arg(long, default_value = "cross-role-or-nested")]
    pub soo_rule: SooRule,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeCheckArgs {
    #[arg(long, default_value_t = 6)]
    pub max_n: usize,
    #[arg(long, default_value_t = 2)]
    pub max_triples: usize,
    /// Failures to print.
    #[arg(long, default_value_t = 10)]
    pub show: usize,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// `mso`, `block<k>`, `global` or `tso`.
    #[arg(long, default_value = "tso")]
    pub stage: String,
    /// Sentence to render; otherwise `--index` into `--data`/`--split`.
    #[arg(long)]
    pub text: Option<String>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "dev")]
    pub split: String,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TimingArgs {
    /// Stack labels such as `[C-A_r-R-V]`.
    #[arg(long, num_args = 1.., default_values_t = default_stacks())]
    pub stacks: Vec<String>,
    #[arg(long)]
    pub config: Option<String>,
    #[arg(long, default_value_t = 2)]
    pub epochs: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn default_stacks() -> Vec<String> {
    ["[C-A_r-R-V]", "[V-V-V-V]", "[C-C-C-C]", "[A_r-A_r-A_r-A_r]", "[R-R-R-R]"].map(String::from).to_vec()
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    pub train: usize,
    #[arg(long, default_value_t = 20)]
    pub dev: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// A failure mapped to a process exit code.
#[derive(Debug)]
pub enum CliError {
    Run(Error),
    /// A check completed and reported a mismatch.
    Check(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Run(Error::Config(_)) => 1,
            CliError::Run(_) => 2,
            CliError::Check(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Run(e) => write!(f, "{e}"),
            CliError::Check(m) => f.write_str(m),
        }
    }
}

pub type CliResult = std::result::Result<(), CliError>;

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Stats(a) => cmd_stats(a),
        Command::DecodeCheck(a) => cmd_decode_check(a),
        Command::Heatmap(a) => cmd_heatmap(a),
        Command::Timing(a) => cmd_timing(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

/// Resolves `--config`: an existing file, else a preset name. Without a
/// value the `synthetic` preset applies to generated data and `desk`
/// otherwise.
pub fn resolve_config(arg: Option<&str>, data: &str) -> Result<Config> {
    match arg {
        Some(a) if Path::new(a).is_file() => Config::load(a),
        Some(a) if PRESETS.contains(&a) => Config::preset(a),
        Some(a) => Err(Error::config(format!(
            "--config {a:?} is neither a file nor a preset ({})",
            PRESETS.join(", ")
        ))),
        None if data == SYNTHETIC => Config::preset("synthetic"),
        None => Config::preset("desk"),
    }
}

/// Path of `split` under `data`: the file itself, or `<split>.jsonl` /
/// `<split>.json` inside a directory.
pub fn split_path(data: &Path, split: &str) -> Result<PathBuf> {
    if data.is_file() {
        return Ok(data.to_path_buf());
    }
    ["jsonl", "json"]
        .iter()
        .map(|ext| data.join(format!("{split}.{ext}")))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::data(format!("no {split}.jsonl or {split}.json under {}", data.display())))
}

/// Loads one split, interning relations into `schema`. The synthetic corpus
/// has `train` and `dev` only.
pub fn load_split(data: &DataArgs, split: &str, schema: &mut RelSchema, max_len: Option<usize>) -> Result<Vec<Example>> {
    if data.data == SYNTHETIC {
        let c = generate(&SynthConfig::default());
        for name in c.schema.names() {
            schema.intern(name);
        }
        return match split {
            "train" => Ok(c.train),
            "dev" => Ok(c.dev),
            _ => Err(Error::data(format!("synthetic corpus has train and dev splits, not {split}"))),
        };
    }
    let path = split_path(Path::new(&data.data), split)?;
    let opts = LoadOptions {
        format: data.format,
        max_len,
        split: split.to_string(),
    };
    let (examples, report) = load_dataset(&path, &opts, schema)?;
    log::info!(
        "{}: {} of {} records loaded, {} too long, {} triples unplaced",
        path.display(),
        report.loaded,
        report.records,
        report.too_long,
        report.unmatched_triples
    );
    Ok(examples)
}

/// A model directory, or the `best/` model inside a training output.
pub fn load_model(dir: &Path) -> Result<Model> {
    let best = dir.join(BEST_DIR);
    if best.is_dir() {
        Model::load(best)
    } else {
        Model::load(dir)
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::file(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct TrainSummary {
    epochs_run: usize,
    best_epoch: usize,
    best_dev_f1: f64,
    reached_target: bool,
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let mut cfg = resolve_config(a.config.as_deref(), &a.data.data)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let mut schema = RelSchema::default();
    let tr = load_split(&a.data, "train", &mut schema, Some(cfg.model.max_len))?;
    let dev = load_split(&a.data, "dev", &mut schema, Some(cfg.model.max_len))?;
    if tr.is_empty() {
        return Err(Error::data("training split is empty").into());
    }
    ensure_dir(&a.out)?;
    write_file(&a.out.join("config.toml"), &cfg.to_toml())?;
    let vocab = Vocab::build(tr.iter().map(|e| &e.seq));
    let mut model = Model::new(cfg.model.clone(), vocab, schema, cfg.train.seed)?;
    let opts = TrainOptions {
        out_dir: Some(a.out.clone()),
        resume: a.resume,
        max_epochs_this_run: None,
    };
    let outcome = train(&mut model, &tr, &dev, &cfg.train, &opts)?;
    let summary = TrainSummary {
        epochs_run: outcome.epochs_run(),
        best_epoch: outcome.best_epoch,
        best_dev_f1: outcome.best_dev_f1,
        reached_target: outcome.reached_target,
    };
    let text = to_json(&summary);
    write_file(&a.out.join("summary.json"), &text)?;
    print!("{text}");
    Ok(())
}

fn predictions(model: &Model, examples: &[Example]) -> Result<Vec<Vec<crate::triple::Triple>>> {
    examples.iter().map(|ex| model.predict(&ex.seq)).collect()
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let model = load_model(&a.model)?;
    let mut schema = model.schema.clone();
    let examples = load_split(&a.data, &a.split, &mut schema, Some(model.max_len()))?;
    if schema.len() > model.relations() {
        log::warn!(
            "{} relation(s) in the data are unknown to the model; their triples count as misses",
            schema.len() - model.relations()
        );
    }
    let preds = predictions(&model, &examples)?;
    let items: Vec<Scored> = examples
        .iter()
        .zip(&preds)
        .map(|(ex, p)| Scored { pred: p, gold: &ex.triples })
        .collect();
    let report = evaluate(&items, a.mode, a.soo_rule);
    print!("{}", report.to_text());
    if let Some(out) = &a.out {
        ensure_dir(out)?;
        write_file(&out.join(format!("eval_{}.json", a.split)), &to_json(&report))?;
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> CliResult {
    let model = load_model(&a.model)?;
    let mut schema = model.schema.clone();
    let examples = load_split(&a.data, &a.split, &mut schema, Some(model.max_len()))?;
    let preds = predictions(&model, &examples)?;
    let records: Vec<_> = examples.iter().zip(&preds).map(|(ex, p)| ex.to_record(p, &model.schema)).collect();
    ensure_dir(&a.out)?;
    let path = a.out.join(format!("predictions_{}.jsonl", a.split));
    write_jsonl(&path, &records)?;
    println!("{} predictions written to {}", records.len(), path.display());
    Ok(())
}

fn cmd_stats(a: StatsArgs) -> CliResult {
    let mut schema = RelSchema::default();
    let examples = load_split(&a.data, &a.split, &mut schema, None)?;
    let stats = dataset_stats(&examples, a.soo_rule);
    let text = to_json(&stats);
    print!("{text}");
    if let Some(out) = &a.out {
        ensure_dir(out)?;
        write_file(&out.join(format!("stats_{}.json", a.split)), &text)?;
    }
    let Some(exp) = &a.expected else { return Ok(()) };
    let diffs = diff_counts(&stats, &ExpectedCounts::load(exp)?);
    if diffs.is_empty() {
        println!("matches {}", exp.display());
        return Ok(());
    }
    let mut msg = format!("{} count(s) differ from {}\n", diffs.len(), exp.display());
    for d in &diffs {
        writeln!(msg, "  {d}").unwrap();
        let ids = sentences_with(&examples, d.key, a.soo_rule);
        if !ids.is_empty() {
            let shown: Vec<&str> = ids.iter().take(20).map(String::as_str).collect();
            writeln!(msg, "    {} sentence(s) flagged, first: {}", ids.len(), shown.join(", ")).unwrap();
        }
    }
    Err(CliError::Check(msg))
}

fn cmd_decode_check(a: DecodeCheckArgs) -> CliResult {
    if a.max_n == 0 || a.max_triples == 0 {
        return Err(Error::config("--max-n and --max-triples must be positive").into());
    }
    let r = exhaustive_round_trip(a.max_n, a.max_triples, a.show);
    let scope = format!("all 1..{}-triple placements, N\u{2264}{}", a.max_triples, a.max_n);
    if r.passed() {
        println!("{scope}: pass ({} placements)", r.placements);
        return Ok(());
    }
    let mut msg = format!(
        "{scope}: FAIL, {} of {} placements mismatch\n  {} of the failures share their table with another set; \
         {} distinct tables, so any decoder misses at least {}\n",
        r.failures,
        r.placements,
        r.ambiguous_failures,
        r.distinct_tables,
        r.unavoidable_failures()
    );
    for f in &r.examples {
        writeln!(msg, "  {f}").unwrap();
    }
    Err(CliError::Check(msg))
}

/// Per-cell mean over channels of an `[N, N, C]` grid.
pub fn channel_mean(grid: &Tensor<f32>) -> Result<Vec<f64>> {
    let s = grid.shape();
    if s.len() != 3 || s[0] != s[1] || s[2] == 0 {
        return Err(Error::data(format!("expected an [N, N, C] grid, got {s:?}")));
    }
    Ok(grid.data().chunks(s[2]).map(|c| c.iter().map(|&v| v as f64).sum::<f64>() / s[2] as f64).collect())
}

/// Plain-text graymap (P2) of an `n x n` image, min-max scaled to 0..255.
/// A constant image renders black.
pub fn graymap(values: &[f64], n: usize) -> String {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let mut out = format!("P2\n{n} {n}\n255\n");
    for row in values.chunks(n) {
        let px: Vec<String> = row
            .iter()
            .map(|&v| {
                let g = if range > 0.0 { ((v - lo) / range * 255.0).round() } else { 0.0 };
                (g as u8).to_string()
            })
            .collect();
        out.push_str(&px.join(" "));
        out.push('\n');
    }
    out
}

fn cmd_heatmap(a: HeatmapArgs) -> CliResult {
    let model = load_model(&a.model)?;
    let stage: Stage = a.stage.parse()?;
    let seq = match &a.text {
        Some(t) => tokenize(t),
        None => {
            let mut schema = model.schema.clone();
            let ex = load_split(&a.data, &a.split, &mut schema, Some(model.max_len()))?;
            ex.into_iter()
                .nth(a.index)
                .ok_or_else(|| Error::data(format!("split {} has no sentence {}", a.split, a.index)))?
                .seq
        }
    };
    let n = seq.len();
    let grid = model.stage_grid(&model.ids(&seq), stage)?;
    let values = channel_mean(&grid)?;
    ensure_dir(&a.out)?;
    let base = a.out.join(format!("heatmap_{stage}"));
    write_file(&base.with_extension("pgm"), &graymap(&values, n))?;
    let mut csv = String::new();
    for row in values.chunks(n) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    write_file(&base.with_extension("csv"), &csv)?;
    println!("{n}x{n} {stage} map written to {}.pgm", base.display());
    Ok(())
}

#[derive(Serialize)]
struct TimingRow {
    stack: String,
    parameters: usize,
    seconds_per_epoch: f64,
}

fn cmd_timing(a: TimingArgs) -> CliResult {
    let mut cfg = resolve_config(a.config.as_deref(), SYNTHETIC)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.train.epochs = a.epochs.max(1);
    cfg.train.eval_train = false;
    cfg.train.target_dev_f1 = None;
    let corpus = generate(&SynthConfig::default());
    let vocab = Vocab::build(corpus.train.iter().map(|e| &e.seq));
    let mut rows = Vec::new();
    for label in &a.stacks {
        let kinds = parse_stack(label)?;
        let mut m = cfg.model.clone();
        m.stack = kinds.iter().map(|k| k.name().to_string()).collect();
        let mut model = Model::new(m, vocab.clone(), corpus.schema.clone(), cfg.train.seed)?;
        let t0 = Instant::now();
        train(&mut model, &corpus.train, &[], &cfg.train, &TrainOptions::default())?;
        let row = TimingRow {
            stack: stack_label(&kinds),
            parameters: model.params.num_values(),
            seconds_per_epoch: t0.elapsed().as_secs_f64() / cfg.train.epochs as f64,
        };
        println!("{:<22} {:>8} params {:>9.3} s/epoch", row.stack, row.parameters, row.seconds_per_epoch);
        rows.push(row);
    }
    if let Some(out) = &a.out {
        ensure_dir(out)?;
        write_file(&out.join("timing.json"), &to_json(&rows))?;
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CliResult {
    let c = generate(&SynthConfig {
        train: a.train,
        dev: a.dev,
        seed: a.seed,
    });
    ensure_dir(&a.out)?;
    for (name, split) in [("train", &c.train), ("dev", &c.dev)] {
        let records: Vec<_> = split.iter().map(|ex| ex.to_record(&ex.triples, &c.schema)).collect();
        write_jsonl(a.out.join(format!("{name}.jsonl")), &records)?;
    }
    println!("{} train and {} dev sentences written to {}", c.train.len(), c.dev.len(), a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn graymap_scales_min_to_black_and_max_to_white() {
        let g = graymap(&[0.0, 1.0, 0.5, 1.0], 2);
        assert_eq!(g, "P2\n2 2\n255\n0 255\n128 255\n");
        assert_eq!(graymap(&[3.0; 4], 2), "P2\n2 2\n255\n0 0\n0 0\n");
    }

    #[test]
    fn channel_mean_averages_last_axis() {
        let t = Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 6.0]).unwrap();
        assert_eq!(channel_mean(&t).unwrap(), vec![3.0]);
        assert!(channel_mean(&Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap()).is_err());
    }

    #[test]
    fn config_resolution() {
        assert_eq!(resolve_config(None, SYNTHETIC).unwrap(), Config::preset("synthetic").unwrap());
        assert_eq!(resolve_config(Some("webnlg"), "x").unwrap().train.batch_size, 6);
        assert!(matches!(resolve_config(Some("nope"), "x"), Err(Error::Config(_))));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::from(Error::config("x")).exit_code(), 1);
        assert_eq!(CliError::from(Error::data("x")).exit_code(), 2);
        assert_eq!(CliError::Check("x".into()).exit_code(), 3);
    }
}
