//! Scenario construction: supply traces, random-walk demands and box
//! policies assembled into validated [`Scenario`]s.
//!
//! # Randomness
//!
//! All draws come from `ChaCha20Rng::seed_from_u64`, which is portable and
//! fully specified. Node `i` uses the stream seeded with
//! `seed + (i + 1) * 0x9E37_79B9_7F4A_7C15` (wrapping); its `R` coordinates
//! are drawn in order from that stream, so walks are independent across
//! nodes. Standard normals use the inverse CDF of a uniform built from the
//! top 53 bits of a `u64` draw, `u = (bits + 0.5) / 2^53`.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use chrono::{NaiveDateTime, TimeDelta};
use ndarray::Array2;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::engine::RhoMode;
use crate::error::{Error, Result};
use crate::model::{
    DispatchInstance, Matrix, NodeObjective, ObjectiveKind, Scenario, ScenarioMeta, Vector,
};

pub const STREAM_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

const BUNDLED_TRACE: &str = include_str!("../data/synthetic_supply.csv");
pub const BUNDLED_TRACE_NAME: &str = "bundled:synthetic_supply.csv";

/// Normal variates by inverse CDF over a seeded ChaCha20 stream.
#[derive(Clone, Debug)]
pub struct NormalStream {
    rng: ChaCha20Rng,
    normal: Normal,
}

impl NormalStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha20Rng::seed_from_u64(seed),
            normal: Normal::standard(),
        }
    }

    /// Stream for node `index` under a master seed.
    pub fn for_node(seed: u64, index: usize) -> Self {
        Self::new(seed.wrapping_add((index as u64 + 1).wrapping_mul(STREAM_STRIDE)))
    }

    pub fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }

    pub fn standard_normal(&mut self) -> f64 {
        let u = self.uniform();
        self.normal.inverse_cdf(u)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemandWalk {
    pub initial: f64,
    pub std: f64,
    pub clamp_at_zero: bool,
}

impl Default for DemandWalk {
    fn default() -> Self {
        Self {
            initial: 2.0,
            std: 1.0,
            clamp_at_zero: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSupply {
    /// Near-constant baseload.
    pub biofuel: f64,
    pub wind_mean: f64,
    /// Innovation standard deviation of the AR(1) wind component.
    pub wind_std: f64,
    pub wind_persistence: f64,
    /// Peak of the daylight bell.
    pub solar_peak: f64,
    /// Multiplicative cloud noise on the solar component.
    pub cloud_std: f64,
    pub step_minutes: f64,
}

impl Default for SyntheticSupply {
    fn default() -> Self {
        Self {
            biofuel: 4.0,
            wind_mean: 8.0,
            wind_std: 0.35,
            wind_persistence: 0.97,
            solar_peak: 9.0,
            cloud_std: 0.08,
            step_minutes: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SupplySource {
    Csv {
        path: PathBuf,
    },
    Bundled,
    Synthetic(SyntheticSupply),
    /// `mean + amplitude * sin(2 pi k / period + j)` for coordinate `j`.
    Sinusoid {
        mean: f64,
        amplitude: f64,
        period: f64,
    },
    Constant {
        values: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BoxPolicy {
    /// `[0, P(k)]` for every node.
    ZeroToSupply,
    Fixed {
        lower: f64,
        upper: f64,
    },
    /// Long-format CSV `k,node,resource,lower,upper`.
    Csv {
        path: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_nodes: usize,
    /// Defaults to `n_nodes`; metadata only.
    pub n_producers: Option<usize>,
    pub n_resources: usize,
    /// `None` takes the full trace length (288 for generators).
    pub steps: Option<usize>,
    pub supply: SupplySource,
    pub demand: DemandWalk,
    pub boxes: BoxPolicy,
    /// Curvature `a` of every `a (p - d)^2` objective.
    pub curvature: f64,
    pub rho: RhoMode,
    pub seed: u64,
    /// Repeat the first instance for every step (zero drift).
    pub static_instance: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_nodes: 10,
            n_producers: None,
            n_resources: 1,
            steps: None,
            supply: SupplySource::Bundled,
            demand: DemandWalk::default(),
            boxes: BoxPolicy::ZeroToSupply,
            curvature: 1.0,
            rho: RhoMode::Fixed(10.0),
            seed: 42,
            static_instance: false,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if self.n_nodes < 1 {
            return bad("n_nodes", "must be >= 1");
        }
        if self.n_resources < 1 {
            return bad("n_resources", "must be >= 1");
        }
        if matches!(self.steps, Some(k) if k < 2) {
            return bad("steps", "need at least 2 steps for drift statistics");
        }
        if !(self.demand.std >= 0.0) {
            return bad("demand.std", "must be >= 0");
        }
        if !(self.curvature > 0.0) {
            return bad("curvature", "must be > 0");
        }
        if matches!(self.n_producers, Some(m) if m > self.n_nodes) {
            return bad("n_producers", "cannot exceed n_nodes");
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupplyTrace {
    pub timestamps: Vec<String>,
    pub values: Vec<Vector>,
}

impl SupplyTrace {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_resources(&self) -> usize {
        self.values.first().map_or(0, |v| v.len())
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["timestamp".to_string()];
        header.extend((1..=self.n_resources()).map(|j| format!("supply_{j}")));
        out.write_record(&header)?;
        for (ts, v) in self.timestamps.iter().zip(&self.values) {
            let mut row = vec![ts.clone()];
            row.extend(v.iter().map(|x| x.to_string()));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn parse_timestamp(s: &str) -> bool {
    chrono::DateTime::parse_from_rfc3339(s).is_ok()
        || NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S").is_ok()
        || NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S").is_ok()
        || NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M").is_ok()
}

/// Parses `timestamp,supply_1[,supply_2,...]`. Every supply value must be
/// strictly positive.
pub fn parse_supply_csv<R: Read>(reader: R, label: &str) -> Result<SupplyTrace> {
    let err = |line: usize, reason: String| Error::SupplyCsv {
        path: label.into(),
        line,
        reason,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("timestamp") || headers.len() < 2 {
        return Err(err(
            1,
            "header must be `timestamp,supply_1[,supply_2,...]`".into(),
        ));
    }
    for (j, h) in headers.iter().skip(1).enumerate() {
        if h != format!("supply_{}", j + 1) {
            return Err(err(
                1,
                format!("column {} should be supply_{}, found `{h}`", j + 2, j + 1),
            ));
        }
    }
    let r = headers.len() - 1;
    let mut trace = SupplyTrace {
        timestamps: Vec::new(),
        values: Vec::new(),
    };
    for (idx, rec) in rdr.records().enumerate() {
        let line = idx + 2;
        let rec = rec.map_err(|e| err(line, e.to_string()))?;
        if rec.len() != r + 1 {
            return Err(err(
                line,
                format!("expected {} fields, found {}", r + 1, rec.len()),
            ));
        }
        let ts = &rec[0];
        if !parse_timestamp(ts) {
            return Err(err(line, format!("`{ts}` is not an ISO-8601 timestamp")));
        }
        let mut v = Vector::zeros(r);
        for j in 0..r {
            let x: f64 = rec[j + 1].parse().map_err(|_| {
                err(
                    line,
                    format!("supply_{} = `{}` is not a number", j + 1, &rec[j + 1]),
                )
            })?;
            if !(x > 0.0 && x.is_finite()) {
                return Err(err(
                    line,
                    format!(
                        "supply_{} = {x} must be > 0 so that the instance has a strict interior",
                        j + 1
                    ),
                ));
            }
            v[j] = x;
        }
        trace.timestamps.push(ts.to_string());
        trace.values.push(v);
    }
    if trace.is_empty() {
        return Err(err(1, "file has no data rows".into()));
    }
    Ok(trace)
}

pub fn load_supply_csv(path: &Path) -> Result<SupplyTrace> {
    let file = fs::File::open(path)?;
    parse_supply_csv(file, &path.display().to_string())
}

/// The shipped one-day, 5-minute synthetic trace (288 rows).
pub fn bundled_supply() -> SupplyTrace {
    parse_supply_csv(BUNDLED_TRACE.as_bytes(), BUNDLED_TRACE_NAME).expect("bundled trace is valid")
}

fn timestamps(steps: usize, step_minutes: f64) -> Vec<String> {
    let start = NaiveDateTime::parse_from_str("2024-06-01T00:00:00", "%Y-%m-%dT%H:%M:%S")
        .expect("valid epoch");
    (0..steps)
        .map(|k| {
            let dt = TimeDelta::seconds((k as f64 * step_minutes * 60.0).round() as i64);
            (start + dt).format("%Y-%m-%dT%H:%M:%S").to_string()
        })
        .collect()
}

/// Biofuel baseload plus AR(1) wind plus a daylight solar bell with cloud
/// noise; each resource coordinate gets its own stream.
pub fn synthetic_supply(
    spec: &SyntheticSupply,
    steps: usize,
    n_resources: usize,
    seed: u64,
) -> SupplyTrace {
    let mut values = vec![Vector::zeros(n_resources); steps];
    for j in 0..n_resources {
        let mut noise = NormalStream::for_node(seed ^ 0x5u64.wrapping_mul(STREAM_STRIDE), j);
        let mut wind = spec.wind_mean;
        for (k, v) in values.iter_mut().enumerate() {
            let hour = (k as f64 * spec.step_minutes / 60.0) % 24.0;
            let biofuel = spec.biofuel * (1.0 + 0.01 * noise.standard_normal());
            wind = spec.wind_mean
                + spec.wind_persistence * (wind - spec.wind_mean)
                + spec.wind_std * noise.standard_normal();
            wind = wind.max(0.0);
            let daylight = ((hour - 6.0) / 12.0 * std::f64::consts::PI).sin().max(0.0);
            let clouds = (1.0 + spec.cloud_std * noise.standard_normal()).max(0.0);
            let solar = spec.solar_peak * daylight.powf(1.5) * clouds;
            // keep a positive floor so the zero-to-supply boxes stay valid
            v[j] = (biofuel + wind + solar).max(0.1);
        }
    }
    SupplyTrace {
        timestamps: timestamps(steps, spec.step_minutes),
        values,
    }
}

/// `d(k+1) = [d(k) + std * n(k)]_+` per node and resource, `d(0) = initial`.
/// Returns one `N x R` matrix per step.
pub fn gen_demand_walk(
    walk: &DemandWalk,
    n_nodes: usize,
    n_resources: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<Matrix>> {
    if !(walk.std >= 0.0) {
        return Err(Error::Config {
            key: "demand.std".into(),
            reason: "must be >= 0".into(),
        });
    }
    let mut out = vec![Matrix::from_elem((n_nodes, n_resources), walk.initial); steps];
    for i in 0..n_nodes {
        let mut stream = NormalStream::for_node(seed, i);
        for k in 1..steps {
            for j in 0..n_resources {
                let mut next = out[k - 1][[i, j]] + walk.std * stream.standard_normal();
                if walk.clamp_at_zero {
                    next = next.max(0.0);
                }
                out[k][[i, j]] = next;
            }
        }
    }
    Ok(out)
}

fn supply_trace(config: &ScenarioConfig) -> Result<(SupplyTrace, String)> {
    let default_steps = config.steps.unwrap_or(288);
    let r = config.n_resources;
    Ok(match &config.supply {
        SupplySource::Csv { path } => (load_supply_csv(path)?, path.display().to_string()),
        SupplySource::Bundled => (bundled_supply(), BUNDLED_TRACE_NAME.to_string()),
        SupplySource::Synthetic(spec) => (
            synthetic_supply(spec, default_steps, r, config.seed),
            "synthetic".into(),
        ),
        SupplySource::Sinusoid {
            mean,
            amplitude,
            period,
        } => {
            if !(*period > 0.0) {
                return Err(Error::Config {
                    key: "supply.period".into(),
                    reason: "must be > 0".into(),
                });
            }
            let values = (0..default_steps)
                .map(|k| {
                    (0..r)
                        .map(|j| {
                            mean + amplitude
                                * (2.0 * std::f64::consts::PI * k as f64 / period + j as f64).sin()
                        })
                        .collect()
                })
                .collect();
            (
                SupplyTrace {
                    timestamps: timestamps(default_steps, 5.0),
                    values,
                },
                "sinusoid".into(),
            )
        }
        SupplySource::Constant { values } => {
            let v = Vector::from(values.clone());
            (
                SupplyTrace {
                    timestamps: timestamps(default_steps, 5.0),
                    values: vec![v; default_steps],
                },
                "constant".into(),
            )
        }
    })
}

type BoundsFn = Box<dyn Fn(usize, &Vector) -> (Matrix, Matrix)>;

fn box_bounds(config: &ScenarioConfig, steps: usize) -> Result<BoundsFn> {
    let (n, r) = (config.n_nodes, config.n_resources);
    Ok(match &config.boxes {
        BoxPolicy::ZeroToSupply => Box::new(move |_, supply: &Vector| {
            let upper = Array2::from_shape_fn((n, r), |(_, j)| supply[j]);
            (Matrix::zeros((n, r)), upper)
        }),
        BoxPolicy::Fixed { lower, upper } => {
            let (lo, hi) = (*lower, *upper);
            Box::new(move |_, _: &Vector| {
                (Matrix::from_elem((n, r), lo), Matrix::from_elem((n, r), hi))
            })
        }
        BoxPolicy::Csv { path } => {
            let mut lower = vec![Matrix::from_elem((n, r), f64::NAN); steps];
            let mut upper = lower.clone();
            let mut rdr = csv::Reader::from_path(path)?;
            for (idx, rec) in rdr.records().enumerate() {
                let rec = rec?;
                let field = |c: usize| -> Result<f64> {
                    rec.get(c)
                        .and_then(|s| s.trim().parse().ok())
                        .ok_or_else(|| Error::Config {
                            key: "boxes.path".into(),
                            reason: format!("line {}: bad field {}", idx + 2, c + 1),
                        })
                };
                let (k, i, j) = (field(0)? as usize, field(1)? as usize, field(2)? as usize);
                if k < steps && i < n && j < r {
                    lower[k][[i, j]] = field(3)?;
                    upper[k][[i, j]] = field(4)?;
                }
            }
            Box::new(move |k, _: &Vector| (lower[k].clone(), upper[k].clone()))
        }
    })
}

/// Builds and validates every instance. The objective of node `i` at step
/// `k` is `a (p - d_i(k))^2`.
pub fn build_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let (trace, source) = supply_trace(config)?;
    if trace.n_resources() != config.n_resources {
        return Err(Error::Config {
            key: "n_resources".into(),
            reason: format!(
                "supply has {} columns, config says {}",
                trace.n_resources(),
                config.n_resources
            ),
        });
    }
    let steps = config.steps.unwrap_or(trace.len());
    if steps < 2 {
        return Err(Error::Config {
            key: "steps".into(),
            reason: "need at least 2 steps".into(),
        });
    }
    if trace.len() < steps {
        return Err(Error::Config {
            key: "steps".into(),
            reason: format!("supply trace has only {} rows", trace.len()),
        });
    }
    let (n, r) = (config.n_nodes, config.n_resources);
    let producers = config.n_producers.unwrap_or(n);
    let demand = gen_demand_walk(&config.demand, n, r, steps, config.seed)?;
    let bounds = box_bounds(config, steps)?;

    let make = |k: usize| -> Result<DispatchInstance> {
        let objectives = (0..n)
            .map(|i| {
                let kind = if i < producers {
                    ObjectiveKind::ProducerCost
                } else {
                    ObjectiveKind::ConsumerUtility
                };
                NodeObjective::tracking(kind, config.curvature, &demand[k].row(i).to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        let supply = trace.values[k].clone();
        let (lower, upper) = bounds(k, &supply);
        DispatchInstance::new(k, producers, objectives, lower, upper, supply)
    };

    let instances = if config.static_instance {
        let first = make(0)?;
        (0..steps).map(|k| first.with_k(k)).collect()
    } else {
        (0..steps).map(make).collect::<Result<Vec<_>>>()?
    };
    let step_minutes = match &config.supply {
        SupplySource::Synthetic(spec) => spec.step_minutes,
        _ => 5.0,
    };
    Scenario::new(
        ScenarioMeta {
            source,
            seed: config.seed,
            step_minutes,
        },
        instances,
    )
}

/// Hex SHA-256 of the scenario's JSON form.
pub fn scenario_hash(scenario: &Scenario) -> String {
    let json = serde_json::to_vec(scenario).expect("scenario serializes");
    hex::encode(Sha256::digest(&json))
}

pub fn save_scenario(scenario: &Scenario, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(scenario)?)?;
    Ok(())
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    #[test]
    fn noiseless_walk_is_constant() {
        let walk = DemandWalk {
            std: 0.0,
            ..Default::default()
        };
        let d = gen_demand_walk(&walk, 4, 1, 20, 7).unwrap();
        assert!(d.iter().all(|m| m.iter().all(|&x| x == 2.0)));
    }

    #[test]
    fn walk_is_deterministic_and_nonnegative() {
        let walk = DemandWalk::default();
        let a = gen_demand_walk(&walk, 10, 1, 1000, 3).unwrap();
        let b = gen_demand_walk(&walk, 10, 1, 1000, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|m| m.iter().all(|&x| x >= 0.0)));
        assert!(a[0].iter().all(|&x| x == 2.0));
        let c = gen_demand_walk(&walk, 10, 1, 1000, 4).unwrap();
        assert_ne!(a, c);
        assert!(gen_demand_walk(&DemandWalk { std: -1.0, ..walk }, 1, 1, 2, 0).is_err());
    }

    #[test]
    fn normal_stream_moments() {
        let mut s = NormalStream::new(11);
        let xs: Vec<f64> = (0..20000).map(|_| s.standard_normal()).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(
            mean.abs() < 0.03 && (var - 1.0).abs() < 0.05,
            "{mean} {var}"
        );
    }

    #[test]
    fn csv_three_rows() {
        let text = "timestamp,supply_1\n2024-01-01T00:00:00,5\n2024-01-01T00:05:00,6\n2024-01-01T00:10:00,5.5\n";
        let trace = parse_supply_csv(text.as_bytes(), "t").unwrap();
        assert_eq!(trace.len(), 3);
        assert_eq!(trace.values[2][0], 5.5);
    }

    #[test]
    fn csv_rejects_zero_supply() {
        let text = "timestamp,supply_1\n2024-01-01T00:00:00,5\n2024-01-01T00:05:00,0\n";
        match parse_supply_csv(text.as_bytes(), "t") {
            Err(Error::SupplyCsv { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_malformed_and_empty() {
        assert!(parse_supply_csv("timestamp,supply_1\n".as_bytes(), "t").is_err());
        assert!(parse_supply_csv("".as_bytes(), "t").is_err());
        assert!(
            parse_supply_csv("time,supply_1\n2024-01-01T00:00:00,1\n".as_bytes(), "t").is_err()
        );
        assert!(parse_supply_csv("timestamp,supply_1\nyesterday,1\n".as_bytes(), "t").is_err());
        assert!(parse_supply_csv(
            "timestamp,supply_1\n2024-01-01T00:00:00,1;5\n".as_bytes(),
            "t"
        )
        .is_err());
        assert!(parse_supply_csv(
            "timestamp,supply_1\n2024-01-01T00:00:00,1,2\n".as_bytes(),
            "t"
        )
        .is_err());
    }

    #[test]
    fn csv_from_disk() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "timestamp,supply_1,supply_2\n2024-01-01T00:00:00Z,1,2").unwrap();
        let trace = load_supply_csv(f.path()).unwrap();
        assert_eq!(trace.n_resources(), 2);
    }

    #[test]
    fn bundled_trace_has_one_day() {
        let trace = bundled_supply();
        assert_eq!(trace.len(), 288);
        assert_eq!(trace.n_resources(), 1);
    }

    #[test]
    fn bundled_trace_matches_generator() {
        let generated = synthetic_supply(&SyntheticSupply::default(), 288, 1, 2024);
        let mut buf = Vec::new();
        generated.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), BUNDLED_TRACE);
    }

    #[test]
    #[ignore = "rewrites data/synthetic_supply.csv"]
    fn regenerate_bundled_trace() {
        let generated = synthetic_supply(&SyntheticSupply::default(), 288, 1, 2024);
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/synthetic_supply.csv");
        generated
            .write_csv(fs::File::create(path).unwrap())
            .unwrap();
    }

    #[test]
    fn default_config_builds_valid_scenario() {
        let sc = build_scenario(&ScenarioConfig::default()).unwrap();
        assert_eq!(sc.len(), 288);
        for inst in sc.instances() {
            let p = inst.supply()[0];
            assert!(p > 0.0);
            assert!(inst.upper().column(0).iter().all(|&u| u == p));
        }
    }

    #[test]
    fn single_step_rejected() {
        let cfg = ScenarioConfig {
            steps: Some(1),
            ..Default::default()
        };
        assert!(matches!(build_scenario(&cfg), Err(Error::Config { key, .. }) if key == "steps"));
    }

    #[test]
    fn static_mode_repeats_first_instance() {
        let cfg = ScenarioConfig {
            steps: Some(5),
            static_instance: true,
            ..Default::default()
        };
        let sc = build_scenario(&cfg).unwrap();
        for inst in sc.instances() {
            assert_eq!(inst.with_k(0), sc.instances()[0]);
        }
    }

    #[test]
    fn infeasible_instance_names_step() {
        let cfg = ScenarioConfig {
            steps: Some(4),
            boxes: BoxPolicy::Fixed {
                lower: 0.0,
                upper: 0.5,
            },
            supply: SupplySource::Constant { values: vec![6.0] },
            ..Default::default()
        };
        assert!(matches!(
            build_scenario(&cfg),
            Err(Error::InvalidInstance { k: 0, .. })
        ));
    }

    #[test]
    fn scenario_roundtrip_and_hash() {
        let cfg = ScenarioConfig {
            steps: Some(12),
            ..Default::default()
        };
        let a = build_scenario(&cfg).unwrap();
        let b = build_scenario(&cfg).unwrap();
        assert_eq!(scenario_hash(&a), scenario_hash(&b));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        save_scenario(&a, &path).unwrap();
        let back = load_scenario(&path).unwrap();
        assert_eq!(back, a);
        assert_eq!(scenario_hash(&back), scenario_hash(&a));
    }

    #[test]
    fn unknown_config_key_is_named() {
        let err = serde_json::from_str::<ScenarioConfig>(r#"{"n_nodez": 3}"#).unwrap_err();
        assert!(err.to_string().contains("n_nodez"));
    }

    #[test]
    fn csv_box_policy() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "k,node,resource,lower,upper").unwrap();
        for k in 0..2 {
            for i in 0..2 {
                writeln!(f, "{k},{i},0,0,{}", 3 + k).unwrap();
            }
        }
        let cfg = ScenarioConfig {
            n_nodes: 2,
            steps: Some(2),
            supply: SupplySource::Constant { values: vec![4.0] },
            boxes: BoxPolicy::Csv {
                path: f.path().to_path_buf(),
            },
            ..Default::default()
        };
        let sc = build_scenario(&cfg).unwrap();
        assert_eq!(sc.instances()[1].upper()[[1, 0]], 4.0);
    }
}
