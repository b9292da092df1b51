//! Command-line front end and the experiment drivers behind it.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::{load_model, save_model};
use crate::data::{load_csv, make_windows, synth_generate, write_forecast_csv, SeriesDataset, SplitFractions, WindowBatch, WindowSplits};
use crate::energy::{count_ops, estimate_energy, EnergyReport, E_AC_PJ, E_MAC_PJ};
use crate::error::{Error, Result};
use crate::model::{Ablation, EpochLog, ForecastModel, Metrics, ModelConfig, TrainReport};

#[derive(Debug, Parser)]
#[command(name = "spikestag", version, about = "Spiking graph forecaster: train, evaluate, ablate, count energy")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write a checkpoint plus per-epoch metrics.
    Train(TrainArgs),
    /// Print R² and RSE of a checkpoint on one split.
    Eval(EvalArgs),
    /// Write the forecast for one input window as CSV.
    Predict(PredictArgs),
    /// Train W1..W4 over several seeds and tabulate median R² / RSE.
    Ablate(AblateArgs),
    /// Train one model per Ts value and report the R² spread.
    SweepTs(SweepArgs),
    /// Count operations on one batch and estimate energy against the dense twin.
    Energy(EnergyArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// CSV path, or `synthetic`.
    #[arg(long, default_value = "synthetic")]
    pub data: String,
    /// Length of generated series.
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    /// Generator seed; defaults to the model seed.
    #[arg(long)]
    pub data_seed: Option<u64>,
}

/// Model and training settings. Each flag overrides `--config`; run with
/// `--print-config` to see resolved values.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// File of `key=value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub print_config: bool,
    #[arg(long)]
    pub nodes: Option<String>,
    #[arg(long)]
    pub input_len: Option<String>,
    #[arg(long)]
    pub horizon: Option<String>,
    #[arg(long)]
    pub emb_dim: Option<String>,
    #[arg(long)]
    pub k1: Option<String>,
    #[arg(long)]
    pub k2: Option<String>,
    #[arg(long)]
    pub d1: Option<String>,
    #[arg(long)]
    pub d2: Option<String>,
    #[arg(long)]
    pub h_dim: Option<String>,
    #[arg(long)]
    pub d_k: Option<String>,
    #[arg(long)]
    pub ts: Option<String>,
    #[arg(long)]
    pub beta: Option<String>,
    #[arg(long)]
    pub u_th: Option<String>,
    #[arg(long)]
    pub u_reset: Option<String>,
    #[arg(long)]
    pub alpha: Option<String>,
    /// Self-loop weight, or `auto`.
    #[arg(long)]
    pub lambda: Option<String>,
    #[arg(long)]
    pub self_loop: Option<String>,
    #[arg(long)]
    pub minutes: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub train_stride: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    /// W1, W2, W3 or W4.
    #[arg(long)]
    pub ablation: Option<String>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    fn flags(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("nodes", &self.nodes),
            ("input_len", &self.input_len),
            ("horizon", &self.horizon),
            ("emb_dim", &self.emb_dim),
            ("k1", &self.k1),
            ("k2", &self.k2),
            ("d1", &self.d1),
            ("d2", &self.d2),
            ("h_dim", &self.h_dim),
            ("d_k", &self.d_k),
            ("ts", &self.ts),
            ("beta", &self.beta),
            ("u_th", &self.u_th),
            ("u_reset", &self.u_reset),
            ("alpha", &self.alpha),
            ("lambda", &self.lambda),
            ("self_loop", &self.self_loop),
            ("minutes", &self.minutes),
            ("lr", &self.lr),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("train_stride", &self.train_stride),
            ("seed", &self.seed),
            ("ablation", &self.ablation),
        ]
    }

    /// Defaults, then the file, then flags, then `--set`. Returns the
    /// config and the keys given explicitly.
    pub fn resolve(&self) -> Result<(ModelConfig, Vec<String>)> {
        let mut c = ModelConfig::default();
        let mut explicit = Vec::new();
        let mut note = |k: &str| {
            let k = k.trim().replace('-', "_");
            if !explicit.contains(&k) {
                explicit.push(k);
            }
        };
        if let Some(p) = &self.config {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            c.apply_text(&text)?;
            for line in text.lines() {
                if let Some((k, _)) = line.trim().split_once('=') {
                    if !line.trim().starts_with('#') {
                        note(k);
                    }
                }
            }
        }
        for (k, v) in self.flags() {
            if let Some(v) = v {
                c.set(k, v)?;
                note(k);
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{kv}`")))?;
            c.set(k, v)?;
            note(k);
        }
        Ok((c, explicit))
    }
}

/// Where series come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic { steps: usize, seed: Option<u64> },
    Csv(PathBuf),
}

impl DataSource {
    pub fn from_args(a: &DataArgs) -> Self {
        if a.data == "synthetic" {
            DataSource::Synthetic {
                steps: a.steps,
                seed: a.data_seed,
            }
        } else {
            DataSource::Csv(PathBuf::from(&a.data))
        }
    }

    /// Synthetic data uses `nodes` and, unless pinned, the model seed.
    pub fn load(&self, nodes: usize, model_seed: u64) -> Result<SeriesDataset> {
        match self {
            DataSource::Synthetic { steps, seed } => synth_generate(nodes, *steps, seed.unwrap_or(model_seed)),
            DataSource::Csv(p) => load_csv(p),
        }
    }
}

/// Aligns `nodes` and `minutes` with the data unless set explicitly.
pub fn fit_to_data(config: &mut ModelConfig, explicit: &[String], ds: &SeriesDataset) -> Result<()> {
    if explicit.iter().any(|k| k == "nodes") && config.nodes != ds.nodes() {
        return Err(Error::Config(format!(
            "nodes={} but the data has {} node columns",
            config.nodes,
            ds.nodes()
        )));
    }
    config.nodes = ds.nodes();
    if !explicit.iter().any(|k| k == "minutes") {
        config.minutes = ds.has_minutes();
    }
    config.validate()
}

pub fn splits_for(config: &ModelConfig, ds: &SeriesDataset) -> Result<WindowSplits> {
    make_windows(ds, config.input_len, config.horizon, 1, SplitFractions::default())
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: ForecastModel,
    pub report: TrainReport,
    pub test: Metrics,
}

/// Trains on `ds` and scores the kept parameters on the test split.
pub fn train_run(config: &ModelConfig, ds: &SeriesDataset, on_epoch: impl FnMut(&EpochLog)) -> Result<RunOutcome> {
    let splits = splits_for(config, ds)?;
    let mut model = ForecastModel::new(config.clone())?;
    let report = model.train_with(ds, &splits, on_epoch)?;
    let test = model.evaluate(ds, &splits.test)?;
    Ok(RunOutcome { model, report, test })
}

pub fn metrics_csv(logs: &[EpochLog]) -> String {
    let mut s = String::from("epoch,loss,r2,rse\n");
    for l in logs {
        let _ = writeln!(s, "{},{},{},{}", l.epoch, l.loss, l.r2, l.rse);
    }
    s
}

fn median(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub ablation: Ablation,
    /// One entry per seed, in seed order.
    pub r2: Vec<f64>,
    pub rse: Vec<f64>,
}

impl AblationRow {
    pub fn median_r2(&self) -> f64 {
        median(&self.r2)
    }

    pub fn median_rse(&self) -> f64 {
        median(&self.rse)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, a: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.ablation == a)
    }

    /// Variant with the highest median R².
    pub fn best(&self) -> Option<Ablation> {
        self.rows
            .iter()
            .max_by(|a, b| a.median_r2().total_cmp(&b.median_r2()))
            .map(|r| r.ablation)
    }

    /// Medians over seeds; the best R² row is marked `*`.
    pub fn render(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        let mut s = format!("median over seeds {}\n", seeds.join(","));
        let _ = writeln!(s, "{:<8} {:>10} {:>10}", "Variant", "R2", "RSE");
        let best = self.best();
        for r in &self.rows {
            let name = format!("{}{}", r.ablation, if Some(r.ablation) == best { "*" } else { "" });
            let _ = writeln!(s, "{:<8} {:>10.4} {:>10.4}", name, r.median_r2(), r.median_rse());
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,seed,r2,rse\n");
        for r in &self.rows {
            for (i, seed) in self.seeds.iter().enumerate() {
                let _ = writeln!(s, "{},{},{},{}", r.ablation, seed, r.r2[i], r.rse[i]);
            }
        }
        s
    }
}

/// Trains every variant for every seed; `progress` sees each finished run.
pub fn ablate(
    base: &ModelConfig,
    explicit: &[String],
    source: &DataSource,
    seeds: &[u64],
    mut progress: impl FnMut(Ablation, u64, &Metrics),
) -> Result<AblationTable> {
    let mut rows: Vec<AblationRow> = Ablation::ALL
        .iter()
        .map(|&a| AblationRow {
            ablation: a,
            r2: Vec::new(),
            rse: Vec::new(),
        })
        .collect();
    for &seed in seeds {
        let mut c = ModelConfig { seed, ..base.clone() };
        let ds = source.load(c.nodes, seed)?;
        fit_to_data(&mut c, explicit, &ds)?;
        for row in rows.iter_mut() {
            let cfg = ModelConfig {
                ablation: row.ablation,
                ..c.clone()
            };
            let m = train_run(&cfg, &ds, |_| {})?.test;
            progress(row.ablation, seed, &m);
            row.r2.push(m.r2);
            row.rse.push(m.rse);
        }
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub ts: usize,
    pub r2: f64,
    pub rse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// `max − min` of test R² across rows.
    pub fn spread(&self) -> f64 {
        let r2 = self.rows.iter().map(|r| r.r2);
        r2.clone().fold(f64::NEG_INFINITY, f64::max) - r2.fold(f64::INFINITY, f64::min)
    }

    pub fn render(&self) -> String {
        let mut s = format!("{:<4} {:>10} {:>10}\n", "Ts", "R2", "RSE");
        for r in &self.rows {
            let _ = writeln!(s, "{:<4} {:>10.4} {:>10.4}", r.ts, r.r2, r.rse);
        }
        let _ = writeln!(s, "spread (max-min R2): {:.4}", self.spread());
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("ts,r2,rse\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.ts, r.r2, r.rse);
        }
        s
    }
}

pub fn sweep_ts(
    base: &ModelConfig,
    explicit: &[String],
    source: &DataSource,
    values: &[usize],
    mut progress: impl FnMut(usize, &Metrics),
) -> Result<SweepTable> {
    let mut c = base.clone();
    let ds = source.load(c.nodes, c.seed)?;
    fit_to_data(&mut c, explicit, &ds)?;
    let mut rows = Vec::with_capacity(values.len());
    for &ts in values {
        let m = train_run(&ModelConfig { ts, ..c.clone() }, &ds, |_| {})?.test;
        progress(ts, &m);
        rows.push(SweepRow { ts, r2: m.r2, rse: m.rse });
    }
    Ok(SweepTable { rows })
}

/// Energy of one forward pass over the first `batch` test windows.
pub fn energy_report(model: &ForecastModel, ds: &SeriesDataset, batch: usize, e_mac: f64, e_ac: f64) -> Result<EnergyReport> {
    let stats = model
        .stats
        .as_ref()
        .ok_or_else(|| Error::contract("checkpoint has no normalization statistics"))?;
    let splits = splits_for(&model.config, ds)?;
    let starts: Vec<usize> = splits.test.iter().copied().take(batch.max(1)).collect();
    if starts.is_empty() {
        return Err(Error::contract("no test windows to count on"));
    }
    let b = WindowBatch::gather(ds, stats, &starts, model.config.input_len, model.config.horizon)?;
    estimate_energy(&count_ops(model, &b.inputs, &b.input_times)?, e_mac, e_ac)
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Output directory.
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// First input step; defaults to the last full window.
    #[arg(long)]
    pub start: Option<usize>,
    #[arg(long, default_value = "forecast.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value = "runs/ablate")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "4,8,12,16")]
    pub ts_values: Vec<usize>,
    #[arg(long, default_value = "runs/sweep-ts")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EnergyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Windows in the counted batch.
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = E_MAC_PJ)]
    pub e_mac: f64,
    #[arg(long, default_value_t = E_AC_PJ)]
    pub e_ac: f64,
    #[arg(long, default_value = "runs/energy")]
    pub out: PathBuf,
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

/// Runs one command; text meant for the user goes to `out`.
pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> Result<()> {
    let mut say = |s: String| {
        let _ = out.write_all(s.as_bytes());
        let _ = out.flush();
    };
    match cli.command {
        Command::Train(a) => {
            let (mut c, explicit) = a.cfg.resolve()?;
            if a.cfg.print_config {
                say(c.to_text());
                return Ok(());
            }
            let ds = DataSource::from_args(&a.data).load(c.nodes, c.seed)?;
            fit_to_data(&mut c, &explicit, &ds)?;
            mkdir(&a.out)?;
            write(&a.out.join("config.txt"), &c.to_text())?;
            let run = train_run(&c, &ds, |l| {
                say(format!("epoch {} loss {:.6} val_r2 {:.4} val_rse {:.4}\n", l.epoch, l.loss, l.r2, l.rse))
            })?;
            save_model(a.out.join("model.stag"), &run.model)?;
            write(&a.out.join("metrics.csv"), &metrics_csv(&run.report.epochs))?;
            say(format!(
                "best_epoch: {}\ntest_r2: {:.6}\ntest_rse: {:.6}\ncheckpoint: {}\n",
                run.report.best_epoch,
                run.test.r2,
                run.test.rse,
                a.out.join("model.stag").display()
            ));
        }
        Command::Eval(a) => {
            let model = load_model(&a.checkpoint)?;
            let ds = DataSource::from_args(&a.data).load(model.config.nodes, model.config.seed)?;
            let splits = splits_for(&model.config, &ds)?;
            let starts = match a.split {
                Split::Train => &splits.train,
                Split::Val => &splits.val,
                Split::Test => &splits.test,
            };
            let m = model.evaluate(&ds, starts)?;
            say(format!("r2: {:.6}\nrse: {:.6}\n", m.r2, m.rse));
        }
        Command::Predict(a) => {
            let model = load_model(&a.checkpoint)?;
            let ds = DataSource::from_args(&a.data).load(model.config.nodes, model.config.seed)?;
            let t = model.config.input_len;
            let start = match a.start {
                Some(s) => s,
                None => ds
                    .steps()
                    .checked_sub(t)
                    .ok_or_else(|| Error::contract(format!("data has fewer than {t} steps")))?,
            };
            let (times, values) = model.forecast_from(&ds, start)?;
            write_forecast_csv(&a.out, &ds.nodes, &times, &values)?;
            say(format!("wrote {} rows to {}\n", times.len(), a.out.display()));
        }
        Command::Ablate(a) => {
            let (c, explicit) = a.cfg.resolve()?;
            if a.cfg.print_config {
                say(c.to_text());
                return Ok(());
            }
            let table = ablate(&c, &explicit, &DataSource::from_args(&a.data), &a.seeds, |v, s, m| {
                say(format!("{v} seed {s}: r2 {:.4} rse {:.4}\n", m.r2, m.rse))
            })?;
            mkdir(&a.out)?;
            write(&a.out.join("ablation.csv"), &table.to_csv())?;
            say(table.render());
        }
        Command::SweepTs(a) => {
            let (c, explicit) = a.cfg.resolve()?;
            if a.cfg.print_config {
                say(c.to_text());
                return Ok(());
            }
            let table = sweep_ts(&c, &explicit, &DataSource::from_args(&a.data), &a.ts_values, |ts, m| {
                say(format!("Ts {ts}: r2 {:.4} rse {:.4}\n", m.r2, m.rse))
            })?;
            mkdir(&a.out)?;
            write(&a.out.join("sweep_ts.csv"), &table.to_csv())?;
            say(table.render());
        }
        Command::Energy(a) => {
            let model = load_model(&a.checkpoint)?;
            let ds = DataSource::from_args(&a.data).load(model.config.nodes, model.config.seed)?;
            let r = energy_report(&model, &ds, a.batch, a.e_mac, a.e_ac)?;
            mkdir(&a.out)?;
            r.write(a.out.join("energy.txt"), a.out.join("energy.csv"))?;
            say(r.table());
            say(r.to_text());
        }
    }
    Ok(())
}
