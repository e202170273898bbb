//! RSSI trajectories: CSV ingestion, normalization, windowing, splitting and
//! a synthetic random-waypoint generator.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::tensor::Tensor;

/// Marks an access point that was not detected in a scan.
pub const SENTINEL: f64 = 100.0;
pub const RSSI_MIN: f64 = -100.0;
pub const RSSI_MAX: f64 = 0.0;

pub fn is_valid_rssi(v: f64) -> bool {
    v == SENTINEL || (RSSI_MIN..=RSSI_MAX).contains(&v)
}

/// Aligned RSSI scans `[T × D]` and positions `[T × 2]`, in time order.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    pub name: String,
    rssi: Tensor,
    coords: Tensor,
}

impl TrajectoryDataset {
    pub fn new(name: impl Into<String>, rssi: Tensor, coords: Tensor) -> Result<Self> {
        if rssi.rank() != 2 || coords.rank() != 2 || coords.shape()[1] != 2 || rssi.shape()[0] != coords.shape()[0] {
            return Err(Error::Shape {
                op: "dataset",
                lhs: rssi.shape().to_vec(),
                rhs: coords.shape().to_vec(),
            });
        }
        if let Some(bad) = rssi.data().iter().find(|&&v| !is_valid_rssi(v)) {
            return Err(Error::Domain {
                op: "dataset",
                detail: format!("RSSI {bad} is neither in [-100, 0] nor the sentinel {SENTINEL}"),
            });
        }
        if !coords.is_finite() {
            return Err(Error::Domain {
                op: "dataset",
                detail: "non-finite coordinate".into(),
            });
        }
        Ok(TrajectoryDataset {
            name: name.into(),
            rssi,
            coords,
        })
    }

    /// Number of scans.
    pub fn len(&self) -> usize {
        self.rssi.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Access points per scan.
    pub fn dim(&self) -> usize {
        self.rssi.shape()[1]
    }

    pub fn rssi(&self) -> &Tensor {
        &self.rssi
    }

    pub fn coords(&self) -> &Tensor {
        &self.coords
    }

    pub fn coord(&self, t: usize) -> [f64; 2] {
        let r = self.coords.row(t);
        [r[0], r[1]]
    }

    /// Fraction of RSSI entries holding the sentinel.
    pub fn sentinel_fraction(&self) -> f64 {
        let n = self.rssi.data().iter().filter(|&&v| v == SENTINEL).count();
        n as f64 / self.rssi.len() as f64
    }

    pub fn to_csv_string(&self) -> String {
        let d = self.dim();
        let mut out = String::new();
        for i in 0..d {
            let _ = write!(out, "rssi_{i},");
        }
        out.push_str("x,y\n");
        for t in 0..self.len() {
            for v in self.rssi.row(t) {
                let _ = write!(out, "{v},");
            }
            let c = self.coord(t);
            let _ = writeln!(out, "{},{}", c[0], c[1]);
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    /// Reads the `rssi_0,…,rssi_{D−1},x,y` format, one scan per row.
    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::read_csv(BufReader::new(file), path, name)
    }

    pub fn read_csv<R: BufRead>(reader: R, path: &Path, name: String) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = reader.lines().enumerate();
        let header = match lines.next() {
            Some((_, l)) => l.map_err(|e| Error::io(path, e))?,
            None => return Err(err(1, "missing header".into())),
        };
        let cols: Vec<&str> = header.trim().split(',').map(str::trim).collect();
        let n = cols.len();
        if n < 3 || cols[n - 2] != "x" || cols[n - 1] != "y" {
            return Err(err(1, "header must end with `x,y`".into()));
        }
        let d = n - 2;
        for (i, c) in cols[..d].iter().enumerate() {
            if *c != format!("rssi_{i}") {
                return Err(err(1, format!("expected column `rssi_{i}`, found `{c}`")));
            }
        }

        let (mut rssi, mut coords) = (Vec::new(), Vec::new());
        for (i, line) in lines {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.trim().split(',').collect();
            if cells.len() != n {
                return Err(err(lineno, format!("expected {n} fields, found {}", cells.len())));
            }
            for (j, cell) in cells.iter().enumerate() {
                let v: f64 = cell
                    .trim()
                    .parse()
                    .map_err(|_| err(lineno, format!("column {}: `{cell}` is not a number", j + 1)))?;
                if j < d {
                    if !is_valid_rssi(v) {
                        return Err(err(
                            lineno,
                            format!("rssi_{j} = {v} is neither in [-100, 0] nor the sentinel 100"),
                        ));
                    }
                    rssi.push(v);
                } else {
                    if !v.is_finite() {
                        return Err(err(lineno, "non-finite coordinate".into()));
                    }
                    coords.push(v);
                }
            }
        }
        let t = coords.len() / 2;
        if t == 0 {
            return Err(Error::Empty("dataset"));
        }
        TrajectoryDataset::new(name, Tensor::new(vec![t, d], rssi)?, Tensor::new(vec![t, 2], coords)?)
    }
}

/// Maps detected RSSI `r` to `(r + 100) / 100` and the sentinel to 0.
pub fn normalize_value(r: f64) -> f64 {
    if r == SENTINEL {
        0.0
    } else {
        (r - RSSI_MIN) / (RSSI_MAX - RSSI_MIN)
    }
}

pub fn normalize_rssi(d: &TrajectoryDataset) -> Tensor {
    d.rssi.map(normalize_value)
}

/// `memory_length` consecutive normalized scans and the position at the
/// following step.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedSample {
    /// `[memory_length × D]`
    pub inputs: Tensor,
    pub target: [f64; 2],
    /// Time index of `target`.
    pub target_index: usize,
}

pub fn make_windows(d: &TrajectoryDataset, memory_length: usize) -> Result<Vec<WindowedSample>> {
    if memory_length == 0 {
        return Err(Error::Config("memory length must be positive".into()));
    }
    if d.len() < memory_length + 1 {
        return Err(Error::BadShape {
            op: "make_windows",
            detail: format!("trajectory of {} scans is too short for windows of {memory_length}", d.len()),
        });
    }
    let norm = normalize_rssi(d);
    let dim = d.dim();
    (memory_length..d.len())
        .map(|t| {
            let start = t - memory_length;
            let inputs = Tensor::new(
                vec![memory_length, dim],
                norm.data()[start * dim..t * dim].to_vec(),
            )?;
            Ok(WindowedSample {
                inputs,
                target: d.coord(t),
                target_index: t,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitOrder {
    /// Earliest samples train, latest test.
    Chronological,
    /// Seeded shuffle before cutting.
    Shuffled(u64),
}

/// Cuts `samples` into `floor(fraction · n)` training and the rest test.
pub fn split<T: Clone>(samples: &[T], train_fraction: f64, order: SplitOrder) -> Result<(Vec<T>, Vec<T>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let n_train = (train_fraction * samples.len() as f64).floor() as usize;
    if n_train == 0 {
        return Err(Error::Empty("training split"));
    }
    if n_train == samples.len() {
        return Err(Error::Empty("test split"));
    }
    let mut items = samples.to_vec();
    if let SplitOrder::Shuffled(seed) = order {
        items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let test = items.split_off(n_train);
    Ok((items, test))
}

// ---------------------------------------------------------------------------
// synthetic trajectories

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub ap_count: usize,
    /// Area extents in meters.
    pub width: f64,
    pub height: f64,
    pub path_loss_exponent: f64,
    /// RSSI at 1 m, dBm.
    pub ref_power: f64,
    /// Per-scan log-normal shadowing, dB.
    pub shadowing_sigma: f64,
    /// Readings below this are reported as undetected.
    pub threshold: f64,
    /// Scans to generate.
    pub steps: usize,
    /// Walker speed range, meters per scan.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Longest pause at a waypoint, in scans.
    pub max_pause: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            ap_count: 64,
            width: 60.0,
            height: 40.0,
            path_loss_exponent: 3.0,
            ref_power: -35.0,
            shadowing_sigma: 4.0,
            threshold: -90.0,
            steps: 1000,
            speed_min: 0.8,
            speed_max: 1.6,
            max_pause: 3,
            seed: 0,
        }
    }
}

const SYNTHETIC_KEYS: &[&str] = &[
    "ap_count",
    "width",
    "height",
    "path_loss_exponent",
    "ref_power",
    "shadowing_sigma",
    "threshold",
    "steps",
    "speed_min",
    "speed_max",
    "max_pause",
    "seed",
];

impl SyntheticConfig {
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        kv.reject_unknown(SYNTHETIC_KEYS)?;
        let mut c = SyntheticConfig::default();
        kv.set("ap_count", &mut c.ap_count)?;
        kv.set("width", &mut c.width)?;
        kv.set("height", &mut c.height)?;
        kv.set("path_loss_exponent", &mut c.path_loss_exponent)?;
        kv.set("ref_power", &mut c.ref_power)?;
        kv.set("shadowing_sigma", &mut c.shadowing_sigma)?;
        kv.set("threshold", &mut c.threshold)?;
        kv.set("steps", &mut c.steps)?;
        kv.set("speed_min", &mut c.speed_min)?;
        kv.set("speed_max", &mut c.speed_max)?;
        kv.set("max_pause", &mut c.max_pause)?;
        kv.set("seed", &mut c.seed)?;
        c.validate()?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(&KvFile::read(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.width > 0.0 && self.height > 0.0) || !self.width.is_finite() || !self.height.is_finite() {
            return bad("area extents must be positive");
        }
        if self.ap_count == 0 {
            return bad("at least one access point is required");
        }
        if !(self.threshold >= RSSI_MIN) {
            return bad("detection threshold must be at least -100");
        }
        if self.shadowing_sigma < 0.0 || !self.shadowing_sigma.is_finite() {
            return bad("shadowing sigma must be non-negative");
        }
        if !(self.speed_min > 0.0 && self.speed_max >= self.speed_min) {
            return bad("speeds must satisfy 0 < speed_min <= speed_max");
        }
        if self.steps == 0 {
            return bad("steps must be positive");
        }
        Ok(())
    }
}

/// Access-point layout plus the propagation law.
#[derive(Clone, Debug)]
pub struct RadioMap {
    pub aps: Vec<[f64; 2]>,
    cfg: SyntheticConfig,
}

impl RadioMap {
    pub fn new(cfg: &SyntheticConfig, aps: Vec<[f64; 2]>) -> Self {
        RadioMap { aps, cfg: cfg.clone() }
    }

    /// Log-distance path loss without noise, distance clamped at 1 m.
    pub fn mean_rssi(&self, pos: [f64; 2], ap: usize) -> f64 {
        let a = self.aps[ap];
        let dist = ((pos[0] - a[0]).powi(2) + (pos[1] - a[1]).powi(2)).sqrt().max(1.0);
        self.cfg.ref_power - 10.0 * self.cfg.path_loss_exponent * dist.log10()
    }

    /// One scan at `pos`, drawing shadowing from `rng`.
    pub fn scan<R: Rng>(&self, pos: [f64; 2], rng: &mut R) -> Vec<f64> {
        let noise = Normal::new(0.0, self.cfg.shadowing_sigma).expect("sigma validated");
        (0..self.aps.len())
            .map(|k| {
                let mut r = self.mean_rssi(pos, k);
                if self.cfg.shadowing_sigma > 0.0 {
                    r += noise.sample(rng);
                }
                if r < self.cfg.threshold {
                    SENTINEL
                } else {
                    r.clamp(RSSI_MIN, RSSI_MAX)
                }
            })
            .collect()
    }
}

/// Seeded random-waypoint walk through a uniformly placed AP field.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(TrajectoryDataset, RadioMap)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let uniform_point = |rng: &mut ChaCha8Rng| [rng.gen_range(0.0..cfg.width), rng.gen_range(0.0..cfg.height)];
    let aps: Vec<[f64; 2]> = (0..cfg.ap_count).map(|_| uniform_point(&mut rng)).collect();
    let map = RadioMap::new(cfg, aps);

    let mut pos = uniform_point(&mut rng);
    let mut waypoint = uniform_point(&mut rng);
    let mut speed = rng.gen_range(cfg.speed_min..=cfg.speed_max);
    let mut pause = 0usize;

    let mut rssi = Vec::with_capacity(cfg.steps * cfg.ap_count);
    let mut coords = Vec::with_capacity(cfg.steps * 2);
    for _ in 0..cfg.steps {
        rssi.extend(map.scan(pos, &mut rng));
        coords.extend_from_slice(&pos);

        if pause > 0 {
            pause -= 1;
            continue;
        }
        let (dx, dy) = (waypoint[0] - pos[0], waypoint[1] - pos[1]);
        let dist = (dx * dx + dy * dy).sqrt();
        if dist <= speed {
            pos = waypoint;
            waypoint = uniform_point(&mut rng);
            speed = rng.gen_range(cfg.speed_min..=cfg.speed_max);
            pause = rng.gen_range(0..=cfg.max_pause);
        } else {
            pos = [pos[0] + dx / dist * speed, pos[1] + dy / dist * speed];
        }
    }
    let d = TrajectoryDataset::new(
        format!("synthetic-{}", cfg.seed),
        Tensor::new(vec![cfg.steps, cfg.ap_count], rssi)?,
        Tensor::new(vec![cfg.steps, 2], coords)?,
    )?;
    Ok((d, map))
}
