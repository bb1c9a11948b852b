//! Tracking-error records against the oracle, tracking-bound checks and
//! report emission (metrics CSV, per-node CSV, SVG overlay plot).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{Algorithm, IterateSnapshot};
use crate::error::{Error, Result};
use crate::model::{curvature_bounds, DispatchInstance, Matrix};
use crate::netsim::Counters;
use crate::oracle::{delta_max, frobenius, tracking_constants, OracleSolution, TrackingConstants};

pub const DEFAULT_BURN_IN: usize = 50;
/// Relative slack on bound comparisons.
pub const BOUND_RTOL: f64 = 1e-6;
/// Absolute floor on bound comparisons, used when the bounds collapse to zero.
pub const BOUND_ATOL: f64 = 1e-6;

/// `||u||_G = sqrt(rho ||p||^2 + ||lambda||^2 / rho)`.
pub fn g_norm(p: &Matrix, lambda: &Matrix, rho: f64) -> f64 {
    let pp: f64 = p.iter().map(|x| x * x).sum();
    let ll: f64 = lambda.iter().map(|x| x * x).sum();
    (rho * pp + ll / rho).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub k: usize,
    pub p_err: f64,
    pub q_err: Option<f64>,
    pub q_err_sq: Option<f64>,
    pub u_err_g: f64,
    /// Balance violation, measured on `q` for the total scheme and on `p`
    /// for the partial scheme. Positive entries are excess consumption.
    pub e: Vec<f64>,
    pub sum_pstar: Vec<f64>,
    pub sum_q: Option<Vec<f64>>,
    pub sum_p: Vec<f64>,
    /// `||p_i - p*_i||` per node.
    pub node_err: Vec<f64>,
    /// Drift of `u*` from the previous step in the G-norm.
    pub u_star_step: f64,
    pub delta_p_run: f64,
    pub delta_lambda_run: f64,
    pub delta_max: f64,
    pub g_run: f64,
    pub c1: f64,
    pub c2: f64,
    pub counters: Counters,
}

/// Oracle multipliers in the layout of the engine's `lambda`.
pub fn lambda_star_for(algorithm: Algorithm, sol: &OracleSolution) -> Matrix {
    match algorithm {
        Algorithm::Total => sol.lambda_star.clone(),
        Algorithm::Partial => {
            let mut m = Matrix::zeros(sol.p_star.dim());
            for mut row in m.rows_mut() {
                row.assign(&sol.nu_star);
            }
            m
        }
    }
}

/// Append-only recorder with running drift maxima.
#[derive(Clone, Debug)]
pub struct Tracker {
    algorithm: Algorithm,
    rho: f64,
    sigma_min: f64,
    lipschitz_max: f64,
    delta_p: f64,
    delta_lambda: f64,
    previous: Option<(Matrix, Matrix)>,
    records: Vec<TrackRecord>,
}

impl Tracker {
    pub fn new(algorithm: Algorithm, rho: f64) -> Self {
        Self {
            algorithm,
            rho,
            sigma_min: f64::INFINITY,
            lipschitz_max: 0.0,
            delta_p: 0.0,
            delta_lambda: 0.0,
            previous: None,
            records: Vec::new(),
        }
    }

    pub fn records(&self) -> &[TrackRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<TrackRecord> {
        self.records
    }

    pub fn record_step(
        &mut self,
        state: &IterateSnapshot,
        instance: &DispatchInstance,
        oracle: &OracleSolution,
        counters: Counters,
    ) -> Result<&TrackRecord> {
        if state.k != oracle.k || instance.k() != oracle.k {
            return Err(Error::RecordMismatch {
                iterate: state.k,
                oracle: oracle.k,
            });
        }
        let rho = self.rho;
        let lambda_star = lambda_star_for(self.algorithm, oracle);
        let (sigma, l) = curvature_bounds(instance);
        self.sigma_min = self.sigma_min.min(sigma);
        self.lipschitz_max = self.lipschitz_max.max(l);
        let u_star_step = match &self.previous {
            Some((p0, l0)) => {
                self.delta_p = self.delta_p.max(frobenius(&(&oracle.p_star - p0)));
                self.delta_lambda = self.delta_lambda.max(frobenius(&(&lambda_star - l0)));
                g_norm(&(&oracle.p_star - p0), &(&lambda_star - l0), rho)
            }
            None => 0.0,
        };
        let delta = delta_max(self.sigma_min, self.lipschitz_max);
        let TrackingConstants { g, c1, c2 } =
            tracking_constants(self.delta_p, self.delta_lambda, rho, delta);

        let dp = &state.p - &oracle.p_star;
        let q_err = state.q.as_ref().map(|q| frobenius(&(q - &oracle.p_star)));
        let col_sums = |m: &Matrix| m.sum_axis(ndarray::Axis(0)).to_vec();
        let record = TrackRecord {
            k: state.k,
            p_err: frobenius(&dp),
            q_err,
            q_err_sq: q_err.map(|x| x * x),
            u_err_g: g_norm(&dp, &(&state.lambda - &lambda_star), rho),
            e: state.violation.to_vec(),
            sum_pstar: col_sums(&oracle.p_star),
            sum_q: state.q.as_ref().map(col_sums),
            sum_p: col_sums(&state.p),
            node_err: dp.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect(),
            u_star_step,
            delta_p_run: self.delta_p,
            delta_lambda_run: self.delta_lambda,
            delta_max: delta,
            g_run: g,
            c1,
            c2,
            counters,
        };
        self.previous = Some((oracle.p_star.clone(), lambda_star));
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub burn_in: usize,
    pub evaluated: usize,
    pub delta_p: f64,
    pub delta_lambda: f64,
    pub delta_max: f64,
    pub g: f64,
    pub c1: f64,
    pub c2: f64,
    pub sup_u_err_g: f64,
    pub sup_q_err: Option<f64>,
    pub sup_q_err_sq: Option<f64>,
    pub pass_c1: bool,
    /// `None` when there is no `q` series.
    pub pass_c2: Option<bool>,
    /// `max_k ||u(k+1) - u*(k+1)||_G - (||u(k) - u*(k)||_G + ||u*(k+1) - u*(k)||_G) / sqrt(1 + delta)`;
    /// positive values mean the one-step recursion was exceeded somewhere.
    pub recursion_residual: f64,
    /// `sup_k |e_j(k)|` per coordinate over the evaluated window.
    pub sup_abs_e: Vec<f64>,
    /// Steps with `e_j > 0` and `e_j < 0` per coordinate.
    pub excess_steps: Vec<usize>,
    pub shortage_steps: Vec<usize>,
    pub pass: bool,
}

pub fn within_bound(value: f64, bound: f64) -> bool {
    value <= (bound * (1.0 + BOUND_RTOL)).max(BOUND_ATOL)
}

/// Compares post-burn-in suprema with `c1` (G-norm error) and `c2`
/// (squared `q` error), built from drift maxima over the whole run.
pub fn check_bounds(records: &[TrackRecord], burn_in: usize) -> Result<BoundReport> {
    if records.len() <= burn_in || records.len() < 2 {
        return Err(Error::InsufficientRecords {
            needed: burn_in.max(1) + 1,
            got: records.len(),
        });
    }
    let last = records.last().expect("nonempty");
    let window = &records[burn_in..];
    let sup = |f: &dyn Fn(&TrackRecord) -> f64| window.iter().map(f).fold(0.0, f64::max);
    let sup_u_err_g = sup(&|r| r.u_err_g);
    let has_q = window.iter().all(|r| r.q_err.is_some());
    let sup_q_err = has_q.then(|| sup(&|r| r.q_err.unwrap_or(0.0)));
    let sup_q_err_sq = has_q.then(|| sup(&|r| r.q_err_sq.unwrap_or(0.0)));
    let contraction = 1.0 / (1.0 + last.delta_max).sqrt();
    let recursion_residual = records
        .windows(2)
        .skip(burn_in.saturating_sub(1))
        .map(|w| w[1].u_err_g - contraction * (w[0].u_err_g + w[1].u_star_step))
        .fold(f64::NEG_INFINITY, f64::max);
    let r = last.e.len();
    let mut sup_abs_e = vec![0.0; r];
    let mut excess_steps = vec![0; r];
    let mut shortage_steps = vec![0; r];
    for rec in window {
        for (j, &e) in rec.e.iter().enumerate() {
            sup_abs_e[j] = f64::max(sup_abs_e[j], e.abs());
            if e > 0.0 {
                excess_steps[j] += 1;
            } else if e < 0.0 {
                shortage_steps[j] += 1;
            }
        }
    }
    let pass_c1 = within_bound(sup_u_err_g, last.c1);
    let pass_c2 = sup_q_err_sq.map(|s| within_bound(s, last.c2));
    Ok(BoundReport {
        burn_in,
        evaluated: window.len(),
        delta_p: last.delta_p_run,
        delta_lambda: last.delta_lambda_run,
        delta_max: last.delta_max,
        g: last.g_run,
        c1: last.c1,
        c2: last.c2,
        sup_u_err_g,
        sup_q_err,
        sup_q_err_sq,
        pass_c1,
        pass_c2,
        recursion_residual,
        sup_abs_e,
        excess_steps,
        shortage_steps,
        pass: pass_c1 && pass_c2.unwrap_or(true),
    })
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// `k,p_err,q_err,q_err_sq,u_err_G,e_1..e_R,sum_pstar_1..R,sum_q_1..R,g_run,c1,c2,reals_up,reals_down,bits`.
pub fn metrics_csv(records: &[TrackRecord]) -> Result<Vec<u8>> {
    let r = records.first().map_or(0, |rec| rec.e.len());
    let mut out = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["k", "p_err", "q_err", "q_err_sq", "u_err_G"]
        .map(String::from)
        .into();
    header.extend((1..=r).map(|j| format!("e_{j}")));
    header.extend((1..=r).map(|j| format!("sum_pstar_{j}")));
    header.extend((1..=r).map(|j| format!("sum_q_{j}")));
    header.extend(["g_run", "c1", "c2", "reals_up", "reals_down", "bits"].map(String::from));
    out.write_record(&header)?;
    for rec in records {
        let mut row = vec![
            rec.k.to_string(),
            rec.p_err.to_string(),
            opt(rec.q_err),
            opt(rec.q_err_sq),
            rec.u_err_g.to_string(),
        ];
        row.extend(rec.e.iter().map(|x| x.to_string()));
        row.extend(rec.sum_pstar.iter().map(|x| x.to_string()));
        match &rec.sum_q {
            Some(s) => row.extend(s.iter().map(|x| x.to_string())),
            None => row.extend(std::iter::repeat_n(String::new(), r)),
        }
        row.extend([
            rec.g_run.to_string(),
            rec.c1.to_string(),
            rec.c2.to_string(),
            rec.counters.reals_up.to_string(),
            rec.counters.reals_down.to_string(),
            rec.counters.bits.to_string(),
        ]);
        out.write_record(&row)?;
    }
    out.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// `k,node,err`.
pub fn node_error_csv(records: &[TrackRecord]) -> Result<Vec<u8>> {
    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record(["k", "node", "err"])?;
    for rec in records {
        for (i, e) in rec.node_err.iter().enumerate() {
            out.write_record([rec.k.to_string(), i.to_string(), e.to_string()])?;
        }
    }
    out.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// `k,e_1..e_R,sign_1..sign_R` with signs in `{-1, 0, 1}`.
pub fn violation_csv(records: &[TrackRecord]) -> Result<Vec<u8>> {
    let r = records.first().map_or(0, |rec| rec.e.len());
    let mut out = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["k".to_string()];
    header.extend((1..=r).map(|j| format!("e_{j}")));
    header.extend((1..=r).map(|j| format!("sign_{j}")));
    out.write_record(&header)?;
    for rec in records {
        let mut row = vec![rec.k.to_string()];
        row.extend(rec.e.iter().map(|x| x.to_string()));
        row.extend(rec.e.iter().map(|&x| {
            let s = if x > 0.0 {
                1
            } else if x < 0.0 {
                -1
            } else {
                0
            };
            s.to_string()
        }));
        out.write_record(&row)?;
    }
    out.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn fmt(x: f64) -> String {
    format!("{x:.2}")
}

/// Standalone SVG overlaying `sum_i p*_i` against `sum_i q_i` (or `sum_i p_i`
/// when there is no `q` series) for every resource coordinate.
pub fn overlay_svg(records: &[TrackRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::InsufficientRecords { needed: 1, got: 0 });
    }
    let (w, h) = (900.0, 480.0);
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 60.0);
    let r = records[0].sum_pstar.len();
    let second: Vec<Vec<f64>> = records
        .iter()
        .map(|rec| rec.sum_q.clone().unwrap_or_else(|| rec.sum_p.clone()))
        .collect();
    let second_label = if records[0].sum_q.is_some() {
        "q(k)ᵀ1"
    } else {
        "p(k)ᵀ1"
    };
    let values = records
        .iter()
        .flat_map(|rec| rec.sum_pstar.iter())
        .chain(second.iter().flatten());
    let (mut lo, mut hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
        (a.min(v), b.max(v))
    });
    if hi - lo < 1e-9 {
        lo -= 1.0;
        hi += 1.0;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let k0 = records[0].k as f64;
    let k1 = (records.last().expect("nonempty").k as f64).max(k0 + 1.0);
    let x = |k: f64| left + (k - k0) / (k1 - k0) * (w - left - right);
    let y = |v: f64| top + (hi - v) / (hi - lo) * (h - top - bottom);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<line x1="{left}" y1="{yb}" x2="{xr}" y2="{yb}" stroke="black"/><line x1="{left}" y1="{top}" x2="{left}" y2="{yb}" stroke="black"/>"#,
        yb = h - bottom,
        xr = w - right
    );
    for t in 0..=5 {
        let kv = k0 + (k1 - k0) * t as f64 / 5.0;
        let vv = lo + (hi - lo) * t as f64 / 5.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text><text x="{}" y="{}" text-anchor="end">{}</text>"#,
            fmt(x(kv)),
            h - bottom + 18.0,
            kv.round(),
            left - 6.0,
            fmt(y(vv) + 4.0),
            fmt(vv)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">time step k</text>"#,
        fmt((left + w - right) / 2.0),
        h - 15.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">aggregate power</text>"#,
        fmt((top + h - bottom) / 2.0),
        fmt((top + h - bottom) / 2.0)
    );
    for j in 0..r {
        let series = [
            (
                records
                    .iter()
                    .map(|rec| rec.sum_pstar[j])
                    .collect::<Vec<_>>(),
                "#1f4eb4",
                "",
            ),
            (
                second.iter().map(|s| s[j]).collect(),
                "#d62728",
                r#" stroke-dasharray="6 4""#,
            ),
        ];
        for (vals, color, dash) in series {
            let points: Vec<String> = records
                .iter()
                .zip(&vals)
                .map(|(rec, &v)| format!("{},{}", fmt(x(rec.k as f64)), fmt(y(v))))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"#,
                points.join(" ")
            );
        }
    }
    let lx = w - right - 150.0;
    let _ = writeln!(
        svg,
        "<line x1=\"{lx}\" y1=\"20\" x2=\"{}\" y2=\"20\" stroke=\"#1f4eb4\" stroke-width=\"1.5\"/><text x=\"{}\" y=\"24\">p*(k)ᵀ1</text>",
        lx + 24.0,
        lx + 30.0
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{lx}\" y1=\"36\" x2=\"{}\" y2=\"36\" stroke=\"#d62728\" stroke-width=\"1.5\" stroke-dasharray=\"6 4\"/><text x=\"{}\" y=\"40\">{second_label}</text>",
        lx + 24.0,
        lx + 30.0
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Files staged in memory and committed together, so a failure leaves no
/// partial output behind.
#[derive(Clone, Debug, Default)]
pub struct ArtifactSet {
    files: Vec<(String, Vec<u8>)>,
}

impl ArtifactSet {
    pub fn add(&mut self, name: &str, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.to_string(), bytes.into()));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.iter().map(|(n, _)| n.as_str())
    }

    /// Writes `name.tmp` files first, then renames them into place.
    pub fn commit(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut staged = Vec::new();
        for (name, bytes) in &self.files {
            let tmp = dir.join(format!(".{name}.tmp"));
            if let Err(e) = fs::write(&tmp, bytes) {
                for (t, _) in &staged {
                    let _ = fs::remove_file(t);
                }
                return Err(e.into());
            }
            staged.push((tmp, dir.join(name)));
        }
        let mut out = Vec::new();
        for (tmp, dest) in staged {
            fs::rename(&tmp, &dest)?;
            out.push(dest);
        }
        Ok(out)
    }
}

/// Metrics CSV, per-node error CSV and overlay plot.
pub fn report_artifacts(records: &[TrackRecord]) -> Result<ArtifactSet> {
    if records.is_empty() {
        return Err(Error::InsufficientRecords { needed: 1, got: 0 });
    }
    let mut set = ArtifactSet::default();
    set.add("metrics.csv", metrics_csv(records)?);
    set.add("node_errors.csv", node_error_csv(records)?);
    set.add("aggregate.svg", overlay_svg(records)?);
    Ok(set)
}

pub fn emit_outputs(records: &[TrackRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    report_artifacts(records)?.commit(dir)
}
