//! Series datasets: CSV ingestion, windowing, normalization, metrics and a
//! synthetic graph-coupled benchmark.

use std::f64::consts::TAU;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Datelike, NaiveDateTime, TimeDelta, TimeZone, Timelike, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Regularly sampled multivariate series, values row-major `(steps, N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesDataset {
    pub timestamps: Vec<DateTime<Utc>>,
    pub values: Vec<f32>,
    pub nodes: Vec<String>,
    pub interval: TimeDelta,
}

impl SeriesDataset {
    pub fn new(timestamps: Vec<DateTime<Utc>>, values: Vec<f32>, nodes: Vec<String>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::contract("dataset needs at least one node"));
        }
        if values.len() != timestamps.len() * nodes.len() {
            return Err(Error::contract(format!(
                "{} values for {} steps x {} nodes",
                values.len(),
                timestamps.len(),
                nodes.len()
            )));
        }
        if timestamps.len() < 2 {
            return Err(Error::Ingestion {
                row: timestamps.len() + 1,
                message: "need at least two rows to fix the sampling interval".into(),
            });
        }
        let interval = timestamps[1] - timestamps[0];
        if interval <= TimeDelta::zero() {
            return Err(Error::Ingestion {
                row: 3,
                message: "timestamps must be strictly increasing".into(),
            });
        }
        for (k, w) in timestamps.windows(2).enumerate() {
            if w[1] - w[0] != interval {
                // Header is line 1, first data row line 2.
                return Err(Error::Ingestion {
                    row: k + 3,
                    message: format!("irregular spacing: {} follows {} (expected step {interval})", w[1], w[0]),
                });
            }
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Ingestion {
                row: i / nodes.len() + 2,
                message: "non-finite value".into(),
            });
        }
        Ok(SeriesDataset {
            timestamps,
            values,
            nodes,
            interval,
        })
    }

    pub fn steps(&self) -> usize {
        self.timestamps.len()
    }

    pub fn nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn values_tensor(&self) -> Tensor {
        Tensor::from_slice(&[self.steps(), self.nodes()], &self.values).expect("shape checked at construction")
    }

    /// Minute-of-hour carries information only for sub-hourly sampling.
    pub fn has_minutes(&self) -> bool {
        self.interval.num_seconds() % 3600 != 0
    }

    pub fn value(&self, step: usize, node: usize) -> f32 {
        self.values[step * self.nodes() + node]
    }
}

/// `(minute-of-hour, hour-of-day, day-of-week)` with Monday = 0.
pub fn time_features(ts: &DateTime<Utc>) -> [usize; 3] {
    [ts.minute() as usize, ts.hour() as usize, ts.weekday().num_days_from_monday() as usize]
}

fn parse_timestamp(cell: &str) -> Option<DateTime<Utc>> {
    let cell = cell.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(cell) {
        return Some(t.with_timezone(&Utc));
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(cell, f).ok())
        .map(|n| Utc.from_utc_datetime(&n))
}

pub fn format_timestamp(ts: &DateTime<Utc>) -> String {
    ts.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

/// Reads `timestamp,<node>...` with a mandatory header. Error rows are file
/// line numbers (header = 1).
pub fn load_csv(path: impl AsRef<Path>) -> Result<SeriesDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file)
}

pub fn read_csv(reader: impl std::io::Read) -> Result<SeriesDataset> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Ingestion {
            row: 1,
            message: e.to_string(),
        })?
        .clone();
    if header.get(0).map(str::trim) != Some("timestamp") || header.len() < 2 {
        return Err(Error::Ingestion {
            row: 1,
            message: "header must be `timestamp` followed by one column per node".into(),
        });
    }
    let nodes: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec.map_err(|e| Error::Ingestion {
            row,
            message: e.to_string(),
        })?;
        if rec.len() != header.len() {
            return Err(Error::Ingestion {
                row,
                message: format!("ragged row: {} fields, header has {}", rec.len(), header.len()),
            });
        }
        let ts = parse_timestamp(&rec[0]).ok_or_else(|| Error::Ingestion {
            row,
            message: format!("bad timestamp `{}`", &rec[0]),
        })?;
        timestamps.push(ts);
        for (c, cell) in rec.iter().enumerate().skip(1) {
            let v: f32 = cell.trim().parse().map_err(|_| Error::Ingestion {
                row,
                message: format!("non-numeric cell `{cell}` in column `{}`", nodes[c - 1]),
            })?;
            values.push(v);
        }
    }
    SeriesDataset::new(timestamps, values, nodes)
}

pub fn write_csv(ds: &SeriesDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let wrap = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut header = vec!["timestamp".to_string()];
    header.extend(ds.nodes.iter().cloned());
    w.write_record(&header).map_err(wrap)?;
    for (t, ts) in ds.timestamps.iter().enumerate() {
        let mut row = vec![format_timestamp(ts)];
        // `{}` on f32 prints the shortest string that parses back exactly.
        row.extend((0..ds.nodes()).map(|n| format!("{}", ds.value(t, n))));
        w.write_record(&row).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Fractions of the series assigned to train / validation / test, in order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

/// Window start indices per split. A window starting at `s` reads inputs
/// `s..s+T` and targets `s+T..s+T+L`; every window lies inside its split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSplits {
    pub input_len: usize,
    pub horizon: usize,
    /// Step ranges `[0, b1)`, `[b1, b2)`, `[b2, steps)`.
    pub bounds: [usize; 3],
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn make_windows(
    ds: &SeriesDataset,
    input_len: usize,
    horizon: usize,
    stride: usize,
    fractions: SplitFractions,
) -> Result<WindowSplits> {
    let steps = ds.steps();
    if input_len == 0 || horizon == 0 || stride == 0 {
        return Err(Error::contract("input length, horizon and stride must be positive"));
    }
    if input_len + horizon > steps {
        return Err(Error::contract(format!(
            "T + L = {} exceeds the {steps} available steps",
            input_len + horizon
        )));
    }
    let f = fractions;
    if f.train <= 0.0 || f.val < 0.0 || f.test < 0.0 || (f.train + f.val + f.test - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("split fractions {f:?} must be non-negative and sum to 1")));
    }
    let b1 = (steps as f64 * f.train).round() as usize;
    let b2 = (steps as f64 * (f.train + f.val)).round() as usize;
    let span = input_len + horizon;
    let starts = |lo: usize, hi: usize| -> Vec<usize> {
        if hi < lo + span {
            return Vec::new();
        }
        (lo..=hi - span).step_by(stride).collect()
    };
    Ok(WindowSplits {
        input_len,
        horizon,
        bounds: [b1, b2, steps],
        train: starts(0, b1),
        val: starts(b1, b2),
        test: starts(b2, steps),
    })
}

/// Per-node statistics fitted on the training range.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormStats {
    /// Fits on steps `0..train_end`. A node with zero spread gets std 1.
    pub fn fit(ds: &SeriesDataset, train_end: usize) -> Result<Self> {
        let n = ds.nodes();
        let rows = train_end.min(ds.steps());
        if rows == 0 {
            return Err(Error::contract("normalization needs at least one training step"));
        }
        let mut mean = Vec::with_capacity(n);
        let mut std = Vec::with_capacity(n);
        for node in 0..n {
            let col = (0..rows).map(|t| ds.value(t, node) as f64);
            let m = col.clone().sum::<f64>() / rows as f64;
            let var = col.map(|v| (v - m) * (v - m)).sum::<f64>() / rows as f64;
            let s = var.sqrt();
            mean.push(m as f32);
            std.push(if s > 1e-12 { s as f32 } else { 1.0 });
        }
        Ok(NormStats { mean, std })
    }

    pub fn nodes(&self) -> usize {
        self.mean.len()
    }

    /// Values are row-major with `nodes()` columns.
    pub fn normalize(&self, values: &[f32]) -> Vec<f32> {
        let n = self.nodes();
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.mean[i % n]) / self.std[i % n])
            .collect()
    }

    pub fn denormalize(&self, values: &[f32]) -> Vec<f32> {
        let n = self.nodes();
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| v * self.std[i % n] + self.mean[i % n])
            .collect()
    }
}

/// Normalized windows ready for the model.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    /// `(B, T, N)` normalized.
    pub inputs: Tensor,
    /// `(B, L, N)` normalized.
    pub targets: Tensor,
    /// Input timestamps, `T` per element.
    pub input_times: Vec<Vec<DateTime<Utc>>>,
    /// Target timestamps, `L` per element.
    pub target_times: Vec<Vec<DateTime<Utc>>>,
    pub stats: NormStats,
}

impl WindowBatch {
    pub fn gather(ds: &SeriesDataset, stats: &NormStats, starts: &[usize], input_len: usize, horizon: usize) -> Result<Self> {
        let n = ds.nodes();
        if stats.nodes() != n {
            return Err(Error::contract(format!("stats for {} nodes, dataset has {n}", stats.nodes())));
        }
        let b = starts.len();
        let mut inputs = Vec::with_capacity(b * input_len * n);
        let mut targets = Vec::with_capacity(b * horizon * n);
        let mut input_times = Vec::with_capacity(b);
        let mut target_times = Vec::with_capacity(b);
        for &s in starts {
            let mid = s + input_len;
            let end = mid + horizon;
            if end > ds.steps() {
                return Err(Error::contract(format!("window at {s} runs past the series end")));
            }
            inputs.extend(stats.normalize(&ds.values[s * n..mid * n]));
            targets.extend(stats.normalize(&ds.values[mid * n..end * n]));
            input_times.push(ds.timestamps[s..mid].to_vec());
            target_times.push(ds.timestamps[mid..end].to_vec());
        }
        Ok(WindowBatch {
            inputs: Tensor::new(&[b, input_len, n], inputs)?,
            targets: Tensor::new(&[b, horizon, n], targets)?,
            input_times,
            target_times,
            stats: stats.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn squared_errors(pred: &[f64], target: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != target.len() {
        return Err(Error::Dimension {
            op: "metric",
            lhs: vec![pred.len()],
            rhs: vec![target.len()],
        });
    }
    if target.is_empty() {
        return Err(Error::UndefinedMetric("no target values"));
    }
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let sse: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    let sst: f64 = target.iter().map(|t| (t - mean) * (t - mean)).sum();
    if sst == 0.0 {
        return Err(Error::UndefinedMetric("target has zero variance"));
    }
    Ok((sse, sst))
}

/// `√Σ(p−y)² / √Σ(y−ȳ)²` over all entries.
pub fn metric_rse(pred: &[f64], target: &[f64]) -> Result<f64> {
    let (sse, sst) = squared_errors(pred, target)?;
    Ok(sse.sqrt() / sst.sqrt())
}

/// `1 − Σ(p−y)² / Σ(y−ȳ)²` over all entries.
pub fn metric_r2(pred: &[f64], target: &[f64]) -> Result<f64> {
    let (sse, sst) = squared_errors(pred, target)?;
    Ok(1.0 - sse / sst)
}

/// Knobs of [`synth_generate_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthOptions {
    pub noise: f64,
    pub coupling: f64,
    pub lag: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            noise: 0.05,
            coupling: 0.3,
            lag: 2,
        }
    }
}

/// Undirected ring `i ~ i±1` plus `N/2` random chords, as sorted neighbor lists.
pub fn synth_coupling_graph(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    let link = |a: usize, b: usize, adj: &mut Vec<Vec<usize>>| {
        if a != b && !adj[a].contains(&b) {
            adj[a].push(b);
            adj[b].push(a);
        }
    };
    for i in 0..n {
        link(i, (i + 1) % n, &mut adj);
    }
    if n > 3 {
        let mut pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|a| (a + 2..n).map(move |b| (a, b)))
            .filter(|&(a, b)| !(a == 0 && b == n - 1))
            .collect();
        pairs.shuffle(rng);
        for &(a, b) in pairs.iter().take(n / 2) {
            link(a, b, &mut adj);
        }
    }
    for l in &mut adj {
        l.sort_unstable();
    }
    adj
}

/// Weekday amplitude multipliers, Monday first.
const DOW_GAIN: [f64; 7] = [1.0, 1.05, 1.1, 1.05, 0.95, 0.7, 0.6];

/// Hourly graph-coupled series from 2024-01-01T00:00Z (a Monday).
pub fn synth_generate(n: usize, steps: usize, seed: u64) -> Result<SeriesDataset> {
    synth_generate_with(n, steps, seed, SynthOptions::default())
}

/// `xᵢ(t) = aᵢ·g(dow)·sin(2πt/24 + φᵢ) + c·mean_{j~i} xⱼ(t−lag) + ε`.
/// Structure (graph, phases, amplitudes) and noise come from separate streams,
/// so the same seed gives the same structure for any noise level.
pub fn synth_generate_with(n: usize, steps: usize, seed: u64, opts: SynthOptions) -> Result<SeriesDataset> {
    if n < 2 {
        return Err(Error::contract("synthetic data needs at least two nodes"));
    }
    if steps < 2 {
        return Err(Error::contract("synthetic data needs at least two steps"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = synth_coupling_graph(n, &mut rng);
    let phase: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..TAU)).collect();
    let amp: Vec<f64> = (0..n).map(|_| rng.random_range(0.6..1.4)).collect();
    let level: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let normal = Normal::new(0.0, opts.noise.max(0.0)).map_err(|e| Error::contract(e.to_string()))?;

    let origin = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).single().expect("fixed date");
    let timestamps: Vec<DateTime<Utc>> = (0..steps).map(|t| origin + TimeDelta::hours(t as i64)).collect();
    let mut x = vec![0.0f64; steps * n];
    for t in 0..steps {
        let gain = DOW_GAIN[(t / 24) % 7];
        for i in 0..n {
            let mut v = level[i] + amp[i] * gain * (TAU * (t % 24) as f64 / 24.0 + phase[i]).sin();
            if t >= opts.lag && opts.coupling != 0.0 {
                let lagged = &x[(t - opts.lag) * n..(t - opts.lag + 1) * n];
                let m = graph[i].iter().map(|&j| lagged[j]).sum::<f64>() / graph[i].len() as f64;
                v += opts.coupling * m;
            }
            if opts.noise > 0.0 {
                v += normal.sample(&mut noise_rng);
            }
            x[t * n + i] = v;
        }
    }
    let nodes = (0..n).map(|i| format!("node{i}")).collect();
    SeriesDataset::new(timestamps, x.into_iter().map(|v| v as f32).collect(), nodes)
}

/// Writes the forecast for one window: `L` rows of `timestamp,<node>...`.
pub fn write_forecast_csv(
    path: impl AsRef<Path>,
    nodes: &[String],
    times: &[DateTime<Utc>],
    values: &[f32],
) -> Result<()> {
    let path = path.as_ref();
    if values.len() != times.len() * nodes.len() {
        return Err(Error::contract("forecast shape does not match timestamps x nodes"));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "timestamp,{}", nodes.join(",")).map_err(io)?;
    for (t, ts) in times.iter().enumerate() {
        let row: Vec<String> = values[t * nodes.len()..(t + 1) * nodes.len()]
            .iter()
            .map(|v| v.to_string())
            .collect();
        writeln!(w, "{},{}", format_timestamp(ts), row.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}
