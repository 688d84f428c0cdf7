//! Outer loops: Monte Carlo runs over the parameter box, multistart runs of
//! the opt-demo, single-level baselines, result files and reports.

mod config;
pub mod verify;

use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::sync::Arc;
use std::time::Instant;

pub use config::{BoxConfig, Dumps, OutputConfig, RunConfig, Scenario};

use crate::error::{Error, Result};
use crate::fom::{write_trajectory_csv, AffineSystem};
use crate::hierarchy::Hierarchy;
use crate::ml::MlLevel;
use crate::opt::{full_only_hierarchy, opt_hierarchy, ObjectiveOracle, SurrogateLevel};
use crate::parabolic::{fom_only_hierarchy, parabolic_hierarchy, STAGE_FOM};
use crate::parameter::{ParameterStream, ParameterVector};
use crate::rb::{RbLevel, ReducedBasis};
use crate::results::{read_rows_from, write_rows_to, ResultRow};
use crate::stats::{summarize, StatsSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// The full adaptive hierarchy.
    Hierarchy,
    /// Only the most accurate level, on the same query stream.
    Baseline,
}

#[derive(Debug)]
pub struct RunOutcome {
    /// Number of parameter columns.
    pub q: usize,
    pub rows: Vec<ResultRow>,
    pub summary: StatsSummary,
    /// QoI continuity constant of the parabolic problem.
    pub qoi_constant: Option<f64>,
    /// Objective evaluations of the opt-demo.
    pub oracle_calls: Option<u64>,
    /// Set when the stream was aborted; `rows` then holds the answered prefix.
    pub error: Option<Error>,
}

/// Process exit code for an error: 2 for bad input, 3 for I/O, 1 otherwise.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Config(_) | Error::Parse(_) | Error::Json(_) | Error::Domain(_) => 2,
        Error::Csv(e) if !e.is_io_error() => 2,
        Error::Io(_) | Error::Csv(_) => 3,
        _ => 1,
    }
}

/// The seeded query stream: parameters for the parabolic scenario, start
/// points for the opt-demo.
pub fn query_parameters(config: &RunConfig) -> Result<Vec<ParameterVector>> {
    Ok(ParameterStream::new(config.domain()?, config.seed).take(config.n_queries))
}

struct Streamed {
    rows: Vec<ResultRow>,
    wall_s: f64,
    error: Option<Error>,
}

/// Answers `params` in order, converting each record to a row right away so
/// that full solutions are not kept around.
fn stream<O, P>(
    hierarchy: &mut Hierarchy<O, P>,
    params: &[ParameterVector],
    stage_offset: usize,
    qoi: impl Fn(&O) -> f64,
    sizes: impl Fn(&[usize]) -> (usize, usize),
) -> Streamed {
    let mut rows = Vec::with_capacity(params.len());
    let start = Instant::now();
    let mut error = None;
    for mu in params {
        match hierarchy.record_request(mu) {
            Ok(record) => {
                let (basis_n, ml_n) = sizes(&record.level_sizes);
                rows.push(ResultRow::from_record(
                    &record,
                    qoi(&record.answer.payload),
                    stage_offset,
                    basis_n,
                    ml_n,
                ));
            }
            Err(e) => {
                error = Some(e);
                break;
            }
        }
    }
    Streamed {
        rows,
        wall_s: start.elapsed().as_secs_f64(),
        error,
    }
}

fn as_config_error(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

fn run_parabolic(config: &RunConfig, mode: Mode, params: &[ParameterVector]) -> Result<RunOutcome> {
    let system = Arc::new(AffineSystem::assemble(&config.fom).map_err(as_config_error)?);
    let domain = config.domain()?;
    let dumps = &config.output.dumps;
    let (mut hierarchy, offset) = match mode {
        Mode::Hierarchy => (
            parabolic_hierarchy(
                Arc::clone(&system),
                domain,
                config.tolerance,
                config.rb,
                config.ml,
                config.adaptation,
            )?,
            0,
        ),
        Mode::Baseline => (fom_only_hierarchy(Arc::clone(&system), domain)?, STAGE_FOM - 1),
    };
    let streamed = stream(&mut hierarchy, params, offset, |o| o.qoi, |s| match mode {
        Mode::Hierarchy => (s[1], s[0]),
        Mode::Baseline => (0, 0),
    });

    if let (Some(path), Some(first)) = (&dumps.trajectory, params.first()) {
        write_trajectory_csv(path, &system.solve(first)?)?;
    }
    if let Some(path) = &dumps.basis {
        match mode {
            Mode::Hierarchy => {
                let rb = hierarchy
                    .level(1)
                    .as_any()
                    .downcast_ref::<RbLevel>()
                    .expect("second parabolic level is the reduced model");
                rb.space().basis.write_csv(path, config.rb.pod_tol)?;
            }
            Mode::Baseline => ReducedBasis::empty(system.n_h).write_csv(path, config.rb.pod_tol)?,
        }
    }
    if let Some(path) = &dumps.training {
        match hierarchy.level(0).as_any().downcast_ref::<MlLevel>() {
            Some(ml) => ml.training_set().write_csv(path)?,
            None => std::fs::write(path, "")?,
        }
    }

    Ok(RunOutcome {
        q: system.n_params(),
        summary: summarize(&streamed.rows, Some(streamed.wall_s)),
        rows: streamed.rows,
        qoi_constant: Some(system.qoi_bound_constant()),
        oracle_calls: None,
        error: streamed.error,
    })
}

fn run_optdemo(config: &RunConfig, mode: Mode, params: &[ParameterVector]) -> Result<RunOutcome> {
    let domain = config.domain()?;
    let oracle = Rc::new(ObjectiveOracle::himmelblau(config.opt.delay_s));
    let (mut hierarchy, offset) = match mode {
        Mode::Hierarchy => (
            opt_hierarchy(Rc::clone(&oracle), domain.clone(), &config.opt, config.adaptation)?,
            0,
        ),
        Mode::Baseline => (full_only_hierarchy(Rc::clone(&oracle), domain.clone(), &config.opt)?, 1),
    };
    let streamed = stream(&mut hierarchy, params, offset, |o| o.value, |s| match mode {
        Mode::Hierarchy => (0, s[0]),
        Mode::Baseline => (0, 0),
    });
    if let Some(path) = &config.output.dumps.training {
        match hierarchy.level(0).as_any().downcast_ref::<SurrogateLevel>() {
            Some(s) => s.training_set().write_csv(path)?,
            None => std::fs::write(path, "")?,
        }
    }
    Ok(RunOutcome {
        q: domain.dim(),
        summary: summarize(&streamed.rows, Some(streamed.wall_s)),
        rows: streamed.rows,
        qoi_constant: None,
        oracle_calls: Some(oracle.calls()),
        error: streamed.error,
    })
}

fn simulate_on(config: &RunConfig, mode: Mode, params: &[ParameterVector]) -> Result<RunOutcome> {
    match config.scenario {
        Scenario::Parabolic => run_parabolic(config, mode, params),
        Scenario::Optdemo => run_optdemo(config, mode, params),
    }
}

/// Runs the configured stream in memory. Only the dumps are written.
pub fn simulate(config: &RunConfig, mode: Mode) -> Result<RunOutcome> {
    config.validate()?;
    simulate_on(config, mode, &query_parameters(config)?)
}

fn write_outputs(config: &RunConfig, outcome: &RunOutcome) -> Result<()> {
    write_rows_to(&config.output.results_path, outcome.q, &outcome.rows)?;
    if let Some(path) = &config.output.summary_path {
        std::fs::write(path, outcome.summary.to_json()?)?;
    }
    Ok(())
}

/// Runs the stream and writes the results file and, if configured, the
/// summary JSON. An aborted stream still writes the answered rows.
pub fn execute(config: &RunConfig, mode: Mode) -> Result<RunOutcome> {
    let outcome = simulate(config, mode)?;
    write_outputs(config, &outcome)?;
    Ok(outcome)
}

/// `results.csv` becomes `results.shard2.csv`.
pub fn shard_path(path: &Path, shard: usize) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.shard{shard}.{}", ext.to_string_lossy()),
        None => format!("{stem}.shard{shard}"),
    };
    path.with_file_name(name)
}

fn shard_config(config: &RunConfig, shard: usize) -> RunConfig {
    let mut c = config.clone();
    let out = &mut c.output;
    out.results_path = shard_path(&out.results_path, shard);
    for p in [
        &mut out.summary_path,
        &mut out.dumps.trajectory,
        &mut out.dumps.basis,
        &mut out.dumps.training,
    ]
    .into_iter()
    .flatten()
    {
        *p = shard_path(p, shard);
    }
    c
}

/// Splits the stream round-robin into `shards` disjoint sub-streams and runs
/// an independent hierarchy on each in its own thread, with its own output
/// files. This is a different experiment from a sequential run: no shard
/// learns from another, and concurrent shards perturb each other's timings.
pub fn execute_sharded(config: &RunConfig, mode: Mode, shards: usize) -> Result<Vec<RunOutcome>> {
    if shards == 0 {
        return Err(Error::config("--shards must be at least 1"));
    }
    config.validate()?;
    let params = query_parameters(config)?;
    let parts: Vec<(RunConfig, Vec<ParameterVector>)> = (0..shards)
        .map(|i| {
            let sub = params.iter().skip(i).step_by(shards).cloned().collect();
            (shard_config(config, i), sub)
        })
        .collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = parts
            .iter()
            .map(|(c, sub)| {
                scope.spawn(move || {
                    let outcome = simulate_on(c, mode, sub)?;
                    write_outputs(c, &outcome)?;
                    Ok(outcome)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("shard thread panicked"))
            .collect()
    })
}

/// Summary of an existing results file.
pub fn report(path: &Path) -> Result<StatsSummary> {
    let (_, rows) = read_rows_from(path)?;
    Ok(summarize(&rows, None))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shard_paths_keep_the_extension() {
        assert_eq!(shard_path(Path::new("out/results.csv"), 2), PathBuf::from("out/results.shard2.csv"));
        assert_eq!(shard_path(Path::new("results"), 0), PathBuf::from("results.shard0"));
    }

    #[test]
    fn exit_codes_follow_the_error_kind() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Parse("x".into())), 2);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), 3);
        assert_eq!(exit_code(&Error::Numerical("x".into())), 1);
    }
}
