//! Experiment harness behind the `cmdrnn` binary.
//!
//! Commands take a flat `key = value` manifest naming a dataset (CSV or a
//! synthetic generator config), the model spec and the training settings.
//! Every command writes machine-readable CSVs into an output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::data::{generate_synthetic, make_windows, split, SplitOrder, SyntheticConfig, TrajectoryDataset, WindowedSample};
use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::svg;
use crate::training::{evaluate_rmse, mean_loss, train, EvalMode, Model, ModelSpec, TrainConfig, TrainReport, Variant};

pub const METRICS_HEADER: &str = "variant,K,seed,rmse,final_loss,seconds";
pub const SUMMARY_HEADER: &str = "variant,K,runs,failed,mean_rmse,std_rmse,median_rmse";
pub const FAILED: &str = "FAILED";

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Csv(PathBuf),
    Synthetic(PathBuf, SyntheticConfig),
}

impl DataSource {
    pub fn load(&self) -> Result<TrajectoryDataset> {
        match self {
            DataSource::Csv(p) => TrajectoryDataset::load_csv(p),
            DataSource::Synthetic(_, cfg) => Ok(generate_synthetic(cfg)?.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub spec: ModelSpec,
    pub train: TrainConfig,
    pub source: DataSource,
    pub runs: usize,
    pub train_fraction: f64,
    pub eval_mode: EvalMode,
    pub out_dir: Option<PathBuf>,
    /// Off by default so metrics files are reproducible byte for byte.
    pub record_timing: bool,
    pub variants: Vec<Variant>,
    pub sweep_mixtures: Vec<usize>,
}

const MANIFEST_KEYS: &[&str] = &[
    "dataset",
    "synthetic",
    "variant",
    "conv_filters",
    "kernel_width",
    "conv_stride",
    "pool_window",
    "pool_stride",
    "hidden",
    "memory_length",
    "mixtures",
    "mdn_hidden",
    "epochs",
    "batch_size",
    "learning_rate",
    "rho",
    "epsilon",
    "clip",
    "seed",
    "runs",
    "train_fraction",
    "eval_mode",
    "out_dir",
    "record_timing",
    "variants",
    "sweep_mixtures",
];

fn parse_list<T: std::str::FromStr>(kv: &KvFile, key: &str) -> Result<Option<Vec<T>>>
where
    T::Err: std::fmt::Display,
{
    let Some(raw) = kv.raw(key) else {
        return Ok(None);
    };
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|e| Error::Config(format!("{}: bad entry `{}` in `{key}`: {e}", kv.path().display(), s.trim())))
        })
        .collect::<Result<Vec<T>>>()
        .map(Some)
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(&KvFile::read(path)?)
    }

    /// Relative paths resolve against the manifest's directory.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        kv.reject_unknown(MANIFEST_KEYS)?;
        let base = kv.path().parent().unwrap_or(Path::new("."));
        let resolve = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let must_exist = |p: PathBuf| {
            if p.is_file() {
                Ok(p)
            } else {
                Err(Error::Config(format!("referenced file {} does not exist", p.display())))
            }
        };
        let source = match (kv.raw("dataset"), kv.raw("synthetic")) {
            (Some(d), None) => DataSource::Csv(must_exist(resolve(d))?),
            (None, Some(s)) => {
                let p = must_exist(resolve(s))?;
                let cfg = SyntheticConfig::read(&p)?;
                DataSource::Synthetic(p, cfg)
            }
            _ => {
                return Err(Error::Config(format!(
                    "{}: exactly one of `dataset` or `synthetic` is required",
                    kv.path().display()
                )))
            }
        };

        let mut spec = ModelSpec::default();
        if let Some(v) = kv.raw("variant") {
            spec.variant = v.parse()?;
        }
        kv.set("conv_filters", &mut spec.conv_filters)?;
        kv.set("kernel_width", &mut spec.kernel_width)?;
        kv.set("conv_stride", &mut spec.conv_stride)?;
        kv.set("pool_window", &mut spec.pool_window)?;
        kv.set("pool_stride", &mut spec.pool_stride)?;
        kv.set("hidden", &mut spec.hidden)?;
        kv.set("memory_length", &mut spec.memory_length)?;
        kv.set("mixtures", &mut spec.mixtures)?;
        kv.set("mdn_hidden", &mut spec.mdn_hidden)?;
        spec.validate()?;

        let mut train = TrainConfig::default();
        kv.set("epochs", &mut train.epochs)?;
        kv.set("batch_size", &mut train.batch_size)?;
        kv.set("learning_rate", &mut train.learning_rate)?;
        kv.set("rho", &mut train.rho)?;
        kv.set("epsilon", &mut train.epsilon)?;
        kv.set("clip", &mut train.clip)?;
        train.seed = kv
            .get("seed")?
            .ok_or_else(|| Error::Config(format!("{}: `seed` is required", kv.path().display())))?;
        train.validate()?;

        let mut m = Manifest {
            spec,
            train,
            source,
            runs: 5,
            train_fraction: 0.8,
            eval_mode: EvalMode::Mle,
            out_dir: kv.raw("out_dir").map(resolve),
            record_timing: false,
            variants: Variant::ALL.to_vec(),
            sweep_mixtures: vec![1, 5, 10, 20, 30],
        };
        kv.set("runs", &mut m.runs)?;
        kv.set("train_fraction", &mut m.train_fraction)?;
        if let Some(mode) = kv.raw("eval_mode") {
            m.eval_mode = mode.parse()?;
        }
        kv.set("record_timing", &mut m.record_timing)?;
        if let Some(v) = parse_list(kv, "variants")? {
            m.variants = v;
        }
        if let Some(k) = parse_list(kv, "sweep_mixtures")? {
            m.sweep_mixtures = k;
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.variants.is_empty() || self.sweep_mixtures.is_empty() {
            return Err(Error::Config("variant and mixture lists must not be empty".into()));
        }
        if self.sweep_mixtures.contains(&0) {
            return Err(Error::Config("mixture counts must be at least 1".into()));
        }
        Ok(())
    }

    /// Chronological train/test windows for `memory_length`.
    pub fn windows(&self, memory_length: usize) -> Result<Prepared> {
        let d = self.source.load()?;
        let w = make_windows(&d, memory_length)?;
        let (train, test) = split(&w, self.train_fraction, SplitOrder::Chronological)?;
        Ok(Prepared {
            input_dim: d.dim(),
            train,
            test,
        })
    }
}

pub struct Prepared {
    pub input_dim: usize,
    pub train: Vec<WindowedSample>,
    pub test: Vec<WindowedSample>,
}

/// One line of a metrics CSV. `None` fields are written as `FAILED`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub variant: String,
    pub k: usize,
    pub seed: u64,
    pub rmse: Option<f64>,
    pub final_loss: Option<f64>,
    pub seconds: f64,
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| FAILED.to_string(), |x| x.to_string())
}

impl MetricsRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.variant,
            self.k,
            self.seed,
            opt_cell(self.rmse),
            opt_cell(self.final_loss),
            self.seconds
        )
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.to_csv_row());
        s.push('\n');
    }
    s
}

/// Reads back a file written by [`metrics_csv`].
pub fn parse_metrics_csv(text: &str, path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines().enumerate();
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        _ => return Err(err(1, format!("expected header `{METRICS_HEADER}`"))),
    }
    let num = |i: usize, s: &str| -> Result<Option<f64>> {
        if s == FAILED {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| err(i + 1, format!("bad number `{s}`")))
        }
    };
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let cells: Vec<&str> = l.split(',').collect();
            if cells.len() != 6 {
                return Err(err(i + 1, format!("expected 6 cells, got {}", cells.len())));
            }
            Ok(MetricsRecord {
                variant: cells[0].to_string(),
                k: cells[1].parse().map_err(|_| err(i + 1, format!("bad K `{}`", cells[1])))?,
                seed: cells[2].parse().map_err(|_| err(i + 1, format!("bad seed `{}`", cells[2])))?,
                rmse: num(i, cells[3])?,
                final_loss: num(i, cells[4])?,
                seconds: cells[5].parse().map_err(|_| err(i + 1, format!("bad seconds `{}`", cells[5])))?,
            })
        })
        .collect()
}

/// Mean, sample std and median RMSE over the successful runs of one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub variant: String,
    pub k: usize,
    pub runs: usize,
    pub failed: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub median: Option<f64>,
}

pub fn summarize(variant: &str, k: usize, records: &[&MetricsRecord]) -> Summary {
    let mut ok: Vec<f64> = records.iter().filter_map(|r| r.rmse).collect();
    let n = ok.len();
    let (mean, std, median) = if n == 0 {
        (None, None, None)
    } else {
        let mean = ok.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (ok.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        ok.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            ok[n / 2]
        } else {
            0.5 * (ok[n / 2 - 1] + ok[n / 2])
        };
        (Some(mean), Some(std), Some(median))
    };
    Summary {
        variant: variant.to_string(),
        k,
        runs: records.len(),
        failed: records.len() - n,
        mean,
        std,
        median,
    }
}

pub fn summary_csv(rows: &[Summary]) -> String {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.variant,
            r.k,
            r.runs,
            r.failed,
            opt_cell(r.mean),
            opt_cell(r.std),
            opt_cell(r.median)
        );
    }
    s
}

pub fn loss_trace_csv(report: &TrainReport) -> String {
    let mut s = String::from("epoch,loss\n");
    for (e, l) in report.losses.iter().enumerate() {
        let _ = writeln!(s, "{e},{l}");
    }
    s
}

/// File-name form of a variant, e.g. `cnn-rnn`.
pub fn slug(v: Variant) -> String {
    v.name().to_ascii_lowercase().replace('+', "-")
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Flags shared by the experiment commands; `Some` values override the manifest.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub runs: Option<usize>,
    /// Worker threads for independent runs; 0 picks the machine default.
    pub jobs: usize,
}

impl RunOptions {
    fn out_dir(&self, m: &Manifest) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| m.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"))
    }

    fn base_seed(&self, m: &Manifest) -> u64 {
        self.seed.unwrap_or(m.train.seed)
    }

    fn runs(&self, m: &Manifest) -> usize {
        self.runs.unwrap_or(m.runs)
    }
}

/// A finished (or failed) single run.
pub struct RunResult {
    pub record: MetricsRecord,
    pub outcome: Result<(Model, TrainReport)>,
}

/// Trains one model on `data.train` and scores it on `data.test`. Failures are
/// captured in the record instead of propagated.
pub fn run_one(m: &Manifest, spec: &ModelSpec, seed: u64, data: &Prepared) -> RunResult {
    let start = Instant::now();
    let outcome = (|| {
        let mut model = Model::build(spec, data.input_dim, seed)?;
        let cfg = TrainConfig { seed, ..m.train.clone() };
        let report = train(&mut model, &data.train, &cfg)?;
        Ok((model, report))
    })();
    let rmse = outcome
        .as_ref()
        .ok()
        .map(|(model, _)| evaluate_rmse(model, &data.test, m.eval_mode, seed));
    let (rmse, outcome) = match rmse {
        Some(Err(e)) => (None, Err(e)),
        Some(Ok(r)) => (Some(r), outcome),
        None => (None, outcome),
    };
    let elapsed = start.elapsed().as_secs_f64();
    let record = MetricsRecord {
        variant: spec.variant.name().to_string(),
        k: spec.effective_mixtures(),
        seed,
        rmse,
        final_loss: outcome.as_ref().ok().map(|(_, r)| r.final_loss()),
        seconds: if m.record_timing { elapsed } else { 0.0 },
    };
    match (&outcome, rmse) {
        (Ok(_), Some(r)) => eprintln!("{} K={} seed {seed}: rmse {r:.4} ({elapsed:.1}s)", record.variant, record.k),
        (Err(e), _) => eprintln!("{} K={} seed {seed}: FAILED: {e}", record.variant, record.k),
        _ => {}
    }
    RunResult { record, outcome }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Writes a synthetic dataset CSV. `seed` overrides the config's seed.
pub fn cmd_generate(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<TrajectoryDataset> {
    let mut cfg = match config {
        Some(p) => SyntheticConfig::read(p)?,
        None => SyntheticConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let (d, _) = generate_synthetic(&cfg)?;
    d.save_csv(out)?;
    Ok(d)
}

pub struct TrainOutput {
    pub record: MetricsRecord,
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
    pub report: TrainReport,
}

/// Trains the manifest's variant once. Writes the checkpoint, the loss trace
/// and a one-row `metrics.csv` scored on the test split.
pub fn cmd_train(manifest: &Manifest, opts: &RunOptions) -> Result<TrainOutput> {
    let out = opts.out_dir(manifest);
    let seed = opts.base_seed(manifest);
    let data = manifest.windows(manifest.spec.memory_length)?;
    let res = run_one(manifest, &manifest.spec, seed, &data);
    let (model, report) = res.outcome?;
    let stem = format!("{}-seed{seed}", slug(manifest.spec.variant));
    let checkpoint = out.join(format!("{stem}.ckpt.json"));
    let trace = out.join(format!("{stem}.loss.csv"));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    model.save(&checkpoint)?;
    write_file(&trace, &loss_trace_csv(&report))?;
    write_file(&out.join("metrics.csv"), &metrics_csv(std::slice::from_ref(&res.record)))?;
    Ok(TrainOutput {
        record: res.record,
        checkpoint,
        trace,
        report,
    })
}

/// What `eval` scores a checkpoint on.
pub enum EvalData<'a> {
    /// The test split of a manifest's dataset.
    Manifest(&'a Manifest),
    /// Every window of a CSV file.
    Csv(&'a Path),
}

/// Scores a checkpoint and appends the record to `<out>/eval.csv`.
pub fn cmd_eval(checkpoint: &Path, data: EvalData<'_>, mode: EvalMode, seed: u64, out_dir: &Path) -> Result<MetricsRecord> {
    let start = Instant::now();
    let model = Model::load(checkpoint)?;
    let (samples, dim, timing) = match data {
        EvalData::Manifest(m) => {
            let p = m.windows(model.spec.memory_length)?;
            (p.test, p.input_dim, m.record_timing)
        }
        EvalData::Csv(path) => {
            let d = TrajectoryDataset::load_csv(path)?;
            (make_windows(&d, model.spec.memory_length)?, d.dim(), false)
        }
    };
    if dim != model.input_dim {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects {} access points, dataset has {dim}",
            model.input_dim
        )));
    }
    let rmse = evaluate_rmse(&model, &samples, mode, seed)?;
    let loss = mean_loss(&model, &samples, 256)?;
    let record = MetricsRecord {
        variant: model.spec.variant.name().to_string(),
        k: model.spec.effective_mixtures(),
        seed,
        rmse: Some(rmse),
        final_loss: Some(loss),
        seconds: if timing { start.elapsed().as_secs_f64() } else { 0.0 },
    };
    let path = out_dir.join("eval.csv");
    let mut text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => format!("{METRICS_HEADER}\n"),
        Err(e) => return Err(Error::io(&path, e)),
    };
    text.push_str(&record.to_csv_row());
    text.push('\n');
    write_file(&path, &text)?;
    Ok(record)
}

/// Runs every `(spec, seed)` cell, records sorted by variant, K and seed.
fn run_grid(m: &Manifest, specs: &[ModelSpec], opts: &RunOptions, out: &Path) -> Result<Vec<MetricsRecord>> {
    let base = opts.base_seed(m);
    let runs = opts.runs(m);
    if runs == 0 {
        return Err(Error::Config("runs must be at least 1".into()));
    }
    let mut prepared = Vec::new();
    for len in specs.iter().map(|s| s.memory_length) {
        if !prepared.iter().any(|(l, _)| *l == len) {
            prepared.push((len, m.windows(len)?));
        }
    }
    let cells: Vec<(&ModelSpec, u64)> = specs
        .iter()
        .flat_map(|s| (0..runs as u64).map(move |r| (s, base + r)))
        .collect();
    let results: Vec<(MetricsRecord, Option<TrainReport>)> = pool(opts.jobs)?.install(|| {
        cells
            .par_iter()
            .map(|&(spec, seed)| {
                let data = &prepared.iter().find(|(l, _)| *l == spec.memory_length).expect("prepared").1;
                let r = run_one(m, spec, seed, data);
                (r.record, r.outcome.ok().map(|(_, rep)| rep))
            })
            .collect()
    });
    let mut records = Vec::with_capacity(results.len());
    for (rec, report) in results {
        if let Some(rep) = report {
            let name = format!("{}-K{}-seed{}.csv", rec.variant.to_ascii_lowercase().replace('+', "-"), rec.k, rec.seed);
            write_file(&out.join("traces").join(name), &loss_trace_csv(&rep))?;
        }
        records.push(rec);
    }
    let order = |r: &MetricsRecord| {
        Variant::ALL
            .iter()
            .position(|v| v.name() == r.variant)
            .unwrap_or(usize::MAX)
    };
    records.sort_by(|a, b| (order(a), a.k, a.seed).cmp(&(order(b), b.k, b.seed)));
    Ok(records)
}

fn cell_summaries(records: &[MetricsRecord]) -> Vec<Summary> {
    let mut keys: Vec<(&str, usize)> = Vec::new();
    for r in records {
        if !keys.contains(&(r.variant.as_str(), r.k)) {
            keys.push((r.variant.as_str(), r.k));
        }
    }
    keys.into_iter()
        .map(|(v, k)| {
            let rs: Vec<&MetricsRecord> = records.iter().filter(|r| r.variant == v && r.k == k).collect();
            summarize(v, k, &rs)
        })
        .collect()
}

fn to_points(rows: &[Summary], label: impl Fn(&Summary) -> String) -> Vec<svg::Point> {
    rows.iter()
        .map(|r| svg::Point {
            label: label(r),
            mean: r.mean,
            std: r.std.unwrap_or(0.0),
        })
        .collect()
}

pub struct GridOutput {
    pub records: Vec<MetricsRecord>,
    pub summary: Vec<Summary>,
}

/// Trains every manifest variant `runs` times and writes `compare_runs.csv`,
/// `compare_summary.csv` and `compare.svg`.
pub fn cmd_compare(manifest: &Manifest, opts: &RunOptions) -> Result<GridOutput> {
    let out = opts.out_dir(manifest);
    let specs: Vec<ModelSpec> = manifest
        .variants
        .iter()
        .map(|&variant| ModelSpec {
            variant,
            ..manifest.spec.clone()
        })
        .collect();
    let records = run_grid(manifest, &specs, opts, &out)?;
    let summary = cell_summaries(&records);
    write_file(&out.join("compare_runs.csv"), &metrics_csv(&records))?;
    write_file(&out.join("compare_summary.csv"), &summary_csv(&summary))?;
    let chart = svg::bar_chart(
        "Test RMSE by model (mean ± std)",
        "RMSE (m)",
        &to_points(&summary, |s| s.variant.clone()),
    );
    write_file(&out.join("compare.svg"), &chart)?;
    Ok(GridOutput { records, summary })
}

/// Trains the manifest variant once per mixture count and seed and writes
/// `sweep_runs.csv`, `sweep_summary.csv` and `sweep.svg`.
pub fn cmd_sweep(manifest: &Manifest, mixtures: Option<&[usize]>, opts: &RunOptions) -> Result<GridOutput> {
    let out = opts.out_dir(manifest);
    let ks = mixtures.unwrap_or(&manifest.sweep_mixtures);
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("mixture counts must be a non-empty list of positive integers".into()));
    }
    if !manifest.spec.variant.has_mdn() {
        return Err(Error::Config(format!(
            "variant {} has no mixture head to sweep",
            manifest.spec.variant
        )));
    }
    let specs: Vec<ModelSpec> = ks
        .iter()
        .map(|&mixtures| ModelSpec {
            mixtures,
            ..manifest.spec.clone()
        })
        .collect();
    let records = run_grid(manifest, &specs, opts, &out)?;
    let summary = cell_summaries(&records);
    write_file(&out.join("sweep_runs.csv"), &metrics_csv(&records))?;
    write_file(&out.join("sweep_summary.csv"), &summary_csv(&summary))?;
    let chart = svg::line_chart(
        &format!("{} test RMSE by mixture count (mean ± std)", manifest.spec.variant),
        "mixture count K",
        "RMSE (m)",
        &to_points(&summary, |s| s.k.to_string()),
    );
    write_file(&out.join("sweep.svg"), &chart)?;
    Ok(GridOutput { records, summary })
}
