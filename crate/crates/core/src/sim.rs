//! End-to-end tracking run: oracle series, one engine iteration per step,
//! records, bound check and artifacts.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;

use crate::engine::{new_engine, Algorithm, RhoMode};
use crate::error::{Error, Result};
use crate::metrics::{
    check_bounds, report_artifacts, violation_csv, BoundReport, TrackRecord, Tracker,
};
use crate::model::Scenario;
use crate::netsim::Network;
use crate::oracle::{solve_scenario, write_oracle_csv, OracleSolution};
use crate::scenario::scenario_hash;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunOptions {
    pub algorithm: Algorithm,
    pub rho: RhoMode,
    pub burn_in: usize,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub algorithm: Algorithm,
    pub rho: f64,
    pub scenario_hash: String,
    pub records: Vec<TrackRecord>,
    pub oracle: Vec<OracleSolution>,
    pub network: Network,
    /// `None` when the run is too short for the burn-in.
    pub bounds: Option<BoundReport>,
    pub engine_time: Duration,
}

#[derive(Serialize)]
struct Summary<'a> {
    algorithm: Algorithm,
    rho: f64,
    steps: usize,
    scenario_hash: &'a str,
    bounds: &'a Option<BoundReport>,
}

/// Runs `options.algorithm` over the whole scenario. Row `k` of the records
/// holds the iterate after the update for instance `k`; row 0 is the
/// initialization.
pub fn run_tracking(scenario: &Scenario, options: &RunOptions) -> Result<RunOutput> {
    let first = scenario
        .instances()
        .first()
        .ok_or(Error::InsufficientRecords { needed: 1, got: 0 })?;
    let rho = options.rho.resolve(first)?;
    let oracle = solve_scenario(scenario)?;
    let mut engine = new_engine(options.algorithm, first, rho)?;
    let mut net = Network::star(scenario.n_nodes());
    net.begin_step(0);
    let mut tracker = Tracker::new(options.algorithm, rho);
    tracker.record_step(
        &engine.snapshot(),
        first,
        &oracle[0],
        net.step_counters(0).unwrap_or_default(),
    )?;
    let mut engine_time = Duration::ZERO;
    for (inst, sol) in scenario.instances().iter().zip(&oracle).skip(1) {
        let report = engine.step(inst, &mut net)?;
        engine_time += report.wall_time;
        let counters = net.step_counters(inst.k()).unwrap_or_default();
        tracker.record_step(&engine.snapshot(), inst, sol, counters)?;
    }
    let records = tracker.into_records();
    let bounds = match check_bounds(&records, options.burn_in) {
        Ok(b) => Some(b),
        Err(Error::InsufficientRecords { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(RunOutput {
        algorithm: options.algorithm,
        rho,
        scenario_hash: scenario_hash(scenario),
        records,
        oracle,
        network: net,
        bounds,
        engine_time,
    })
}

impl RunOutput {
    /// `true` when the bound check ran and passed.
    pub fn bounds_pass(&self) -> bool {
        self.bounds.as_ref().is_some_and(|b| b.pass)
    }

    /// Writes every artifact of the run into `dir`, all or nothing:
    /// `metrics.csv`, `node_errors.csv`, `aggregate.svg`, `transcript.jsonl`,
    /// `counters.csv`, `oracle.csv`, `bounds.json` and, for the partial
    /// scheme, `violation.csv`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut set = report_artifacts(&self.records)?;
        let mut transcript = Vec::new();
        self.network.write_jsonl(&mut transcript)?;
        set.add("transcript.jsonl", transcript);
        let mut counters = Vec::new();
        self.network.write_counters_csv(&mut counters)?;
        set.add("counters.csv", counters);
        let mut oracle = Vec::new();
        write_oracle_csv(&self.oracle, &mut oracle)?;
        set.add("oracle.csv", oracle);
        if self.algorithm == Algorithm::Partial {
            set.add("violation.csv", violation_csv(&self.records)?);
        }
        let summary = Summary {
            algorithm: self.algorithm,
            rho: self.rho,
            steps: self.records.len(),
            scenario_hash: &self.scenario_hash,
            bounds: &self.bounds,
        };
        let mut json = serde_json::to_vec_pretty(&summary)?;
        json.push(b'\n');
        set.add("bounds.json", json);
        set.commit(dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{build_scenario, ScenarioConfig};

    fn small(steps: usize) -> Scenario {
        build_scenario(&ScenarioConfig {
            steps: Some(steps),
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn total_run_is_feasible_every_step() {
        let sc = small(40);
        let out = run_tracking(
            &sc,
            &RunOptions {
                algorithm: Algorithm::Total,
                rho: RhoMode::Fixed(10.0),
                burn_in: 10,
            },
        )
        .unwrap();
        assert_eq!(out.records.len(), 40);
        for (rec, inst) in out.records.iter().zip(sc.instances()) {
            let p = inst.supply()[0];
            assert!(rec.e[0].abs() <= 1e-9 * p.max(1.0));
        }
        assert!(out.bounds.is_some());
        assert!(out.network.totals().reals_up > 0);
    }

    #[test]
    fn partial_run_writes_violation_series() {
        let sc = small(20);
        let out = run_tracking(
            &sc,
            &RunOptions {
                algorithm: Algorithm::Partial,
                rho: RhoMode::Formula,
                burn_in: 5,
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = out.write_artifacts(dir.path()).unwrap();
        assert_eq!(files.len(), 8);
        assert!(dir.path().join("violation.csv").exists());
    }

    #[test]
    fn short_run_has_no_bound_report() {
        let sc = small(5);
        let out = run_tracking(
            &sc,
            &RunOptions {
                algorithm: Algorithm::Total,
                rho: RhoMode::Fixed(1.0),
                burn_in: 50,
            },
        )
        .unwrap();
        assert!(out.bounds.is_none());
        assert!(!out.bounds_pass());
    }
}
