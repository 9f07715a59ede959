//! Monte Carlo experiment runner and sweep drivers.
//!
//! A sweep evaluates each scheme on each sweep point over `realizations`
//! channel draws. Seeding is paired: realization `r` uses seed
//! `base_seed + r` for every scheme and every sweep value, so scheme
//! comparisons see identical channels and sweep trends are not washed out
//! by draw noise. Realizations run on a worker pool; results are gathered
//! in deterministic order, so output files are reproducible regardless of
//! scheduling.

use rayon::prelude::*;
use serde::Serialize;

use crate::channel::{sample_paths, Realization};
use crate::config::{GmlConfig, ScenarioConfig, Scheme, SolverSpec, SweepParam, SweepSpec};
use crate::error::{Error, Result};
use crate::gml::{self, FrozenGroups, OptimizationTrace, Solution};
use crate::metrics::SiForm;

/// One (scheme, sweep point, realization) outcome.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RawRecord {
    pub scheme: Scheme,
    pub sweep_param: String,
    pub sweep_value: f64,
    /// Second axis value for threshold-grid sweeps.
    pub sweep_value_u: Option<f64>,
    pub realization: usize,
    pub seed: u64,
    pub lambda_t: f64,
    pub feasible: bool,
    pub runtime_s: f64,
}

/// Aggregate of one (scheme, sweep point): mean over feasible runs,
/// standard error, feasibility rate, mean runtime.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPointResult {
    pub scheme: Scheme,
    pub sweep_param: String,
    pub sweep_value: f64,
    pub sweep_value_u: Option<f64>,
    pub mean_lambda_t: f64,
    pub stderr_lambda_t: f64,
    pub feasibility_rate: f64,
    pub mean_runtime_s: f64,
    pub realizations: usize,
}

/// Geometry actually sampled for one realization, recorded for
/// reproducibility.
#[derive(Clone, Debug, Serialize)]
pub struct RealizationGeometry {
    pub seed: u64,
    pub dl_user_positions: Vec<[f64; 2]>,
    pub ul_user_positions: Vec<[f64; 2]>,
    pub target_position: [f64; 2],
    pub clutter_positions: Vec<[f64; 2]>,
    pub bs_r_position: [f64; 2],
}

impl RealizationGeometry {
    pub fn of_realization(real: &Realization) -> Self {
        RealizationGeometry {
            seed: real.seed,
            dl_user_positions: real.dl_user_positions.clone(),
            ul_user_positions: real.ul_user_positions.clone(),
            target_position: real.target_position,
            clutter_positions: real.clutter_positions.clone(),
            bs_r_position: real.bs_r_position,
        }
    }
}

/// Everything needed to trace a result file back to its inputs.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub version: String,
    pub scenario_hash: String,
    pub penalty_mode: String,
    pub base_seed: u64,
    pub realization_seeds: Vec<u64>,
    pub geometry: Vec<RealizationGeometry>,
}

/// A completed sweep: raw per-realization records, aggregates, and the
/// manifest.
#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub spec: SweepSpec,
    pub raw: Vec<RawRecord>,
    pub aggregate: Vec<SweepPointResult>,
    pub manifest: RunManifest,
}

/// Apply one sweep point to a scenario.
pub fn apply_sweep_value(
    scenario: &ScenarioConfig,
    param: SweepParam,
    value: f64,
    value_u: Option<f64>,
) -> ScenarioConfig {
    let mut cfg = scenario.clone();
    match param {
        SweepParam::PBs => cfg.p_bs = value,
        SweepParam::RhoSi => cfg.rho_si_db = value,
        SweepParam::ThresholdGrid => {
            cfg.r_th_d = value;
            cfg.r_th_u = value_u.expect("threshold grid point needs both axes");
        }
    }
    cfg
}

/// The sweep points of a spec, in deterministic order.
pub fn sweep_points(spec: &SweepSpec) -> Vec<(f64, Option<f64>)> {
    match spec.param {
        SweepParam::ThresholdGrid => spec
            .values
            .iter()
            .flat_map(|&d| spec.values_u.iter().map(move |&u| (d, Some(u))))
            .collect(),
        _ => spec.values.iter().map(|&v| (v, None)).collect(),
    }
}

/// Run the full sweep. A failed realization is recorded and skipped; more
/// than 20% failures at any sweep point abort the sweep.
pub fn run_sweep(
    spec: &SweepSpec,
    scenario: &ScenarioConfig,
    gml_cfg: &GmlConfig,
    solver: &SolverSpec,
) -> Result<ExperimentResult> {
    spec.validate()?;
    scenario.validate()?;
    gml_cfg.validate()?;
    solver.validate()?;

    let points = sweep_points(spec);
    let jobs: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|p| (0..spec.realizations).map(move |r| (p, r)))
        .collect();

    let outcomes: Vec<Result<Vec<RawRecord>>> = jobs
        .par_iter()
        .map(|&(p, r)| {
            let (value, value_u) = points[p];
            let cfg = apply_sweep_value(scenario, spec.param, value, value_u);
            let seed = spec.base_seed + r as u64;
            let real = sample_paths(&cfg, seed)?;
            let mut records = Vec::with_capacity(spec.schemes.len());
            for &scheme in &spec.schemes {
                let t0 = std::time::Instant::now();
                let solution =
                    crate::baselines::solve_scheme(scheme, &cfg, &real, gml_cfg, solver, seed)?;
                records.push(RawRecord {
                    scheme,
                    sweep_param: spec.param.id().to_string(),
                    sweep_value: value,
                    sweep_value_u: value_u,
                    realization: r,
                    seed,
                    lambda_t: solution.lambda_t,
                    feasible: solution.feasible,
                    runtime_s: t0.elapsed().as_secs_f64(),
                });
            }
            Ok(records)
        })
        .collect();

    let mut raw = Vec::new();
    let mut failures_per_point = vec![0usize; points.len()];
    for (&(p, r), outcome) in jobs.iter().zip(outcomes) {
        match outcome {
            Ok(records) => raw.extend(records),
            Err(e) => {
                eprintln!("realization {r} at point {p} failed: {e}");
                failures_per_point[p] += 1;
            }
        }
    }
    for (p, &fails) in failures_per_point.iter().enumerate() {
        if fails * 5 > spec.realizations {
            return Err(Error::Sweep(format!(
                "{fails}/{} realizations failed at sweep point {p}",
                spec.realizations
            )));
        }
    }

    let aggregate = aggregate_records(spec, &points, &raw);

    // Geometry does not depend on the sweep value, so record it once per
    // realization from the base scenario.
    let realization_seeds: Vec<u64> = (0..spec.realizations)
        .map(|r| spec.base_seed + r as u64)
        .collect();
    let geometry = realization_seeds
        .iter()
        .map(|&seed| sample_paths(scenario, seed).map(|real| RealizationGeometry::of_realization(&real)))
        .collect::<Result<Vec<_>>>()?;

    Ok(ExperimentResult {
        spec: spec.clone(),
        raw,
        aggregate,
        manifest: RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            scenario_hash: scenario.content_hash(),
            penalty_mode: gml_cfg.penalty_mode.to_string(),
            base_seed: spec.base_seed,
            realization_seeds,
            geometry,
        },
    })
}

fn aggregate_records(
    spec: &SweepSpec,
    points: &[(f64, Option<f64>)],
    raw: &[RawRecord],
) -> Vec<SweepPointResult> {
    let mut out = Vec::new();
    for &scheme in &spec.schemes {
        for &(value, value_u) in points {
            let records: Vec<&RawRecord> = raw
                .iter()
                .filter(|r| {
                    r.scheme == scheme && r.sweep_value == value && r.sweep_value_u == value_u
                })
                .collect();
            let feasible: Vec<f64> = records
                .iter()
                .filter(|r| r.feasible)
                .map(|r| r.lambda_t)
                .collect();
            let (mean, stderr) = mean_stderr(&feasible);
            let mean_runtime = if records.is_empty() {
                0.0
            } else {
                records.iter().map(|r| r.runtime_s).sum::<f64>() / records.len() as f64
            };
            out.push(SweepPointResult {
                scheme,
                sweep_param: spec.param.id().to_string(),
                sweep_value: value,
                sweep_value_u: value_u,
                mean_lambda_t: mean,
                stderr_lambda_t: stderr,
                feasibility_rate: if records.is_empty() {
                    0.0
                } else {
                    feasible.len() as f64 / records.len() as f64
                },
                mean_runtime_s: mean_runtime,
                realizations: records.len(),
            });
        }
    }
    out
}

/// Sample mean and standard error (`s / sqrt(n)`); `(NaN, NaN)` for an
/// empty sample, `(x, 0)` for a singleton.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    match xs.len() {
        0 => (f64::NAN, f64::NAN),
        1 => (xs[0], 0.0),
        n => {
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (mean, (var / n as f64).sqrt())
        }
    }
}

/// Spearman rank correlation of two equal-length sequences.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    if n < 2 {
        return f64::NAN;
    }
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("no NaN ranks"));
        let mut r = vec![0.0; v.len()];
        for (pos, &i) in idx.iter().enumerate() {
            r[i] = pos as f64;
        }
        r
    };
    let rx = rank(x);
    let ry = rank(y);
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - 6.0 * d2 / (n as f64 * ((n * n - 1) as f64))
}

/// Single run with the per-epoch trace, for convergence plots.
pub fn run_convergence(
    scenario: &ScenarioConfig,
    gml_cfg: &GmlConfig,
    seed: u64,
) -> Result<(Solution, OptimizationTrace)> {
    let real = sample_paths(scenario, seed)?;
    gml::run(
        scenario,
        &real,
        gml_cfg,
        seed,
        FrozenGroups::default(),
        SiForm::Quadratic,
    )
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum OutputFormat {
    Csv,
    Json,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::Config(format!("unknown output format `{other}`"))),
        }
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub const RAW_CSV_HEADER: &str =
    "scheme,sweep_param,sweep_value,sweep_value_u,realization,seed,lambda_t,feasible,runtime_s";
pub const AGGREGATE_CSV_HEADER: &str = "scheme,sweep_param,sweep_value,sweep_value_u,mean_lambda_t,stderr_lambda_t,feasibility_rate,mean_runtime_s,realizations";

pub fn raw_records_to_csv(raw: &[RawRecord]) -> String {
    let mut out = String::from(RAW_CSV_HEADER);
    out.push('\n');
    for r in raw {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.scheme.id(),
            r.sweep_param,
            fmt_f64(r.sweep_value),
            fmt_opt(r.sweep_value_u),
            r.realization,
            r.seed,
            fmt_f64(r.lambda_t),
            u8::from(r.feasible),
            fmt_f64(r.runtime_s),
        ));
    }
    out
}

/// Parse the raw CSV back into records (the inverse of
/// [`raw_records_to_csv`]).
pub fn raw_records_from_csv(text: &str) -> Result<Vec<RawRecord>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Sweep("empty csv".into()))?;
    if header != RAW_CSV_HEADER {
        return Err(Error::Sweep(format!("unexpected csv header `{header}`")));
    }
    let mut out = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::Sweep(format!("line {}: {} fields", ln + 2, f.len())));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|e| Error::Sweep(format!("line {}: {e}", ln + 2)))
        };
        out.push(RawRecord {
            scheme: f[0].parse()?,
            sweep_param: f[1].to_string(),
            sweep_value: parse(f[2])?,
            sweep_value_u: if f[3].is_empty() {
                None
            } else {
                Some(parse(f[3])?)
            },
            realization: f[4]
                .parse()
                .map_err(|e| Error::Sweep(format!("line {}: {e}", ln + 2)))?,
            seed: f[5]
                .parse()
                .map_err(|e| Error::Sweep(format!("line {}: {e}", ln + 2)))?,
            lambda_t: parse(f[6])?,
            feasible: f[7] == "1",
            runtime_s: parse(f[8])?,
        });
    }
    Ok(out)
}

pub fn aggregate_to_csv(aggregate: &[SweepPointResult]) -> String {
    let mut out = String::from(AGGREGATE_CSV_HEADER);
    out.push('\n');
    for a in aggregate {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            a.scheme.id(),
            a.sweep_param,
            fmt_f64(a.sweep_value),
            fmt_opt(a.sweep_value_u),
            fmt_f64(a.mean_lambda_t),
            fmt_f64(a.stderr_lambda_t),
            fmt_f64(a.feasibility_rate),
            fmt_f64(a.mean_runtime_s),
            a.realizations,
        ));
    }
    out
}

fn write_file(path: &std::path::Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Write raw records, aggregates and the manifest under `dir`. Returns the
/// list of files written.
pub fn emit_results(
    result: &ExperimentResult,
    format: OutputFormat,
    dir: &std::path::Path,
) -> Result<Vec<std::path::PathBuf>> {
    let mut written = Vec::new();
    match format {
        OutputFormat::Csv => {
            let raw_path = dir.join("results_raw.csv");
            write_file(&raw_path, &raw_records_to_csv(&result.raw))?;
            written.push(raw_path);
            let agg_path = dir.join("results_aggregate.csv");
            write_file(&agg_path, &aggregate_to_csv(&result.aggregate))?;
            written.push(agg_path);
        }
        OutputFormat::Json => {
            #[derive(Serialize)]
            struct JsonDoc<'a> {
                raw: &'a [RawRecord],
                aggregate: &'a [SweepPointResult],
            }
            let path = dir.join("results.json");
            let doc = serde_json::to_string_pretty(&JsonDoc {
                raw: &result.raw,
                aggregate: &result.aggregate,
            })
            .expect("results serialize");
            write_file(&path, &doc)?;
            written.push(path);
        }
    }
    let manifest_path = dir.join("manifest.json");
    write_file(
        &manifest_path,
        &serde_json::to_string_pretty(&result.manifest).expect("manifest serializes"),
    )?;
    written.push(manifest_path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_scenario() -> ScenarioConfig {
        ScenarioConfig {
            n_t: 2,
            n_rc: 2,
            n_rs: 2,
            d: 1,
            u: 1,
            c: 1,
            l_t: 2,
            l_r: 2,
            ..ScenarioConfig::default()
        }
    }

    fn tiny_gml() -> GmlConfig {
        GmlConfig {
            n_i: 2,
            n_o: 1,
            n_e: 3,
            hidden: 4,
            ..GmlConfig::default()
        }
    }

    fn tiny_sweep() -> SweepSpec {
        SweepSpec {
            param: SweepParam::PBs,
            values: vec![0.5, 1.0],
            values_u: Vec::new(),
            schemes: vec![Scheme::Ma, Scheme::FpaBoth],
            realizations: 2,
            base_seed: 40,
        }
    }

    #[test]
    fn sweep_is_deterministic_and_paired() {
        let scenario = tiny_scenario();
        let a = run_sweep(&tiny_sweep(), &scenario, &tiny_gml(), &SolverSpec::default()).unwrap();
        let b = run_sweep(&tiny_sweep(), &scenario, &tiny_gml(), &SolverSpec::default()).unwrap();
        assert_eq!(a.raw.len(), 2 * 2 * 2);
        for (x, y) in a.raw.iter().zip(&b.raw) {
            assert_eq!(x.lambda_t.to_bits(), y.lambda_t.to_bits());
            assert_eq!(x.seed, y.seed);
        }
        // Paired seeding: every scheme at realization r carries the same
        // seed, and the same seed appears at every sweep value.
        for r in 0..2usize {
            let seeds: Vec<u64> = a
                .raw
                .iter()
                .filter(|rec| rec.realization == r)
                .map(|rec| rec.seed)
                .collect();
            assert!(seeds.iter().all(|&s| s == 40 + r as u64));
        }
    }

    #[test]
    fn paired_channels_identical_across_schemes_and_values() {
        // The channels seen by every scheme at a fixed realization index
        // hash identically, for every sweep value of a power sweep.
        let scenario = tiny_scenario();
        let seed = 40;
        let mut hashes = Vec::new();
        for &p_bs in &[0.5, 1.0] {
            let cfg = apply_sweep_value(&scenario, SweepParam::PBs, p_bs, None);
            let real = sample_paths(&cfg, seed).unwrap();
            let layout = crate::channel::AntennaLayout::fpa_grid(&cfg).unwrap();
            let ch = crate::channel::channels_at(&cfg, &layout, &real).unwrap();
            hashes.push(ch.content_hash());
        }
        assert_eq!(hashes[0], hashes[1]);
    }

    #[test]
    fn aggregates_recompute_from_raw_rows() {
        let scenario = tiny_scenario();
        let result =
            run_sweep(&tiny_sweep(), &scenario, &tiny_gml(), &SolverSpec::default()).unwrap();
        for agg in &result.aggregate {
            let rows: Vec<&RawRecord> = result
                .raw
                .iter()
                .filter(|r| {
                    r.scheme == agg.scheme
                        && r.sweep_value == agg.sweep_value
                        && r.sweep_value_u == agg.sweep_value_u
                })
                .collect();
            assert_eq!(rows.len(), agg.realizations);
            let feasible: Vec<f64> = rows
                .iter()
                .filter(|r| r.feasible)
                .map(|r| r.lambda_t)
                .collect();
            if !feasible.is_empty() {
                let (mean, _) = mean_stderr(&feasible);
                assert!((mean - agg.mean_lambda_t).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_round_trip_and_empty_header() {
        let scenario = tiny_scenario();
        let result =
            run_sweep(&tiny_sweep(), &scenario, &tiny_gml(), &SolverSpec::default()).unwrap();
        let text = raw_records_to_csv(&result.raw);
        let back = raw_records_from_csv(&text).unwrap();
        assert_eq!(result.raw, back);

        let empty = raw_records_to_csv(&[]);
        assert_eq!(empty.trim_end(), RAW_CSV_HEADER);
        assert!(raw_records_from_csv(&empty).unwrap().is_empty());
    }

    #[test]
    fn emit_writes_expected_files() {
        let scenario = tiny_scenario();
        let spec = SweepSpec {
            realizations: 1,
            schemes: vec![Scheme::Ma],
            values: vec![1.0],
            ..tiny_sweep()
        };
        let result = run_sweep(&spec, &scenario, &tiny_gml(), &SolverSpec::default()).unwrap();
        let dir = std::env::temp_dir().join(format!("fdisac_emit_{}", std::process::id()));
        let files = emit_results(&result, OutputFormat::Csv, &dir).unwrap();
        assert!(files.iter().any(|f| f.ends_with("results_raw.csv")));
        assert!(files.iter().any(|f| f.ends_with("manifest.json")));
        for f in &files {
            assert!(f.exists());
        }
        let json_files = emit_results(&result, OutputFormat::Json, &dir).unwrap();
        assert!(json_files.iter().any(|f| f.ends_with("results.json")));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn threshold_grid_points_are_cartesian() {
        let spec = SweepSpec {
            param: SweepParam::ThresholdGrid,
            values: vec![0.2, 0.6],
            values_u: vec![0.3, 0.9],
            ..SweepSpec::default()
        };
        let pts = sweep_points(&spec);
        assert_eq!(pts.len(), 4);
        assert_eq!(pts[0], (0.2, Some(0.3)));
        assert_eq!(pts[3], (0.6, Some(0.9)));
        let cfg = apply_sweep_value(
            &tiny_scenario(),
            SweepParam::ThresholdGrid,
            0.6,
            Some(0.9),
        );
        assert_eq!(cfg.r_th_d, 0.6);
        assert_eq!(cfg.r_th_u, 0.9);
    }

    #[test]
    fn stats_helpers() {
        let (mean, se) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert!((mean - 2.5).abs() < 1e-15);
        let var: f64 = [1.0f64, 2.0, 3.0, 4.0]
            .iter()
            .map(|x| (x - 2.5f64).powi(2))
            .sum::<f64>()
            / 3.0;
        assert!((se - (var / 4.0).sqrt()).abs() < 1e-15);

        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0]) + 1.0).abs() < 1e-15);
        // One adjacent swap among five points: rho = 0.9.
        let rho = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1.0, 2.0, 4.0, 3.0, 5.0]);
        assert!((rho - 0.9).abs() < 1e-15);
    }

    #[test]
    fn convergence_trace_has_one_row_per_epoch() {
        let scenario = tiny_scenario();
        let gml_cfg = tiny_gml();
        let (_, trace) = run_convergence(&scenario, &gml_cfg, 50).unwrap();
        assert_eq!(trace.epochs.len(), gml_cfg.n_e);
        let mut prev = f64::NEG_INFINITY;
        for r in &trace.epochs {
            assert!(r.best_objective >= prev);
            prev = r.best_objective;
        }
    }
}
