//! Experiment dispatch, the assumption gate and report emission.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use crate::config::{ExperimentName, RunConfig};
use crate::dependence::DependenceProfile;
use crate::error::{Error, Result};
use crate::experiments::{
    audit_assumptions, audit_kbar_norm, audit_mn_limits, audit_moment_inequality, reference_density,
    required_assumptions, run_berry_esseen, run_clt, run_l1_rate, Assertion, AssumptionInputs, AssumptionReport,
    AuditParams, BerryEsseenParams, CltParams, L1RateParams, Report,
};
use crate::kde::{make_kernel, Kernel};
use crate::lattice::Region;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "RFKDE_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "rfkde-out";

pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub experiment: ExperimentName,
    pub csv_path: PathBuf,
    pub json_path: PathBuf,
    pub assertions: Vec<Assertion>,
    pub forced: bool,
    pub assumption_failures: Vec<String>,
    pub passed: bool,
}

impl Outcome {
    /// One line per assertion.
    pub fn summary_lines(&self) -> Vec<String> {
        let mut lines: Vec<String> = self
            .assertions
            .iter()
            .map(|a| {
                let tag = match (a.required, a.passed) {
                    (true, true) => "PASS",
                    (true, false) => "FAIL",
                    (false, _) => "INFO",
                };
                format!("{tag} {} {}: {}", self.experiment, a.name, a.detail)
            })
            .collect();
        if self.forced && !self.assumption_failures.is_empty() {
            lines.push(format!(
                "INFO {} forced past failed assumptions {}",
                self.experiment,
                self.assumption_failures.join(", ")
            ));
        }
        lines
    }
}

struct Emitted {
    csv: String,
    report: serde_json::Value,
    assertions: Vec<Assertion>,
}

fn emit<R: Report>(r: &R) -> Result<Emitted> {
    Ok(Emitted {
        csv: r.csv(),
        report: serde_json::to_value(r).map_err(|e| Error::Config(e.to_string()))?,
        assertions: r.assertions(),
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Validates `config`, runs it on a pool of `workers` threads and writes
/// `<experiment>.csv` and `<experiment>.json` to the output directory.
pub fn run(config: &RunConfig) -> Result<Outcome> {
    let mut config = config.clone();
    config.fill_defaults();
    config.validate()?;
    let out = config.out.clone().unwrap_or_else(default_out_dir);
    std::fs::create_dir_all(&out).map_err(|source| Error::Io {
        path: out.clone(),
        source,
    })?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| execute(&config, &out))
}

fn assumption_inputs_sizes(config: &RunConfig, field_d: usize) -> Result<Vec<usize>> {
    Ok(match (&config.sizes, &config.region) {
        (Some(s), _) => s.clone(),
        (None, Some(r)) => vec![r.build(field_d)?.len()],
        (None, None) => Vec::new(),
    })
}

fn execute(config: &RunConfig, out: &Path) -> Result<Outcome> {
    use ExperimentName::*;
    let exp = config.experiment;
    let spec = config.field.to_spec()?;
    let d = spec.dim();
    let seed = config.seed;
    let required = required_assumptions(exp.as_str());

    let density = if matches!(exp, L1Rate | Clt | BerryEsseen | AuditAssumptions) {
        match reference_density(&spec, seed) {
            Ok(f) => Some(f),
            Err(_) if exp == AuditAssumptions => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };

    let mut assumptions: Option<AssumptionReport> = None;
    let mut failures = Vec::new();
    if !required.is_empty() || exp == AuditAssumptions {
        let report = audit_assumptions(&AssumptionInputs {
            spec: &spec,
            kernel_name: &config.kernel,
            rule: config.rule()?,
            sizes: assumption_inputs_sizes(config, d)?,
            density: density.as_ref(),
            c_p: config.audit.c_p,
        });
        failures = report.failures(required);
        if !failures.is_empty() && !config.force {
            let evidence: Vec<String> = failures
                .iter()
                .map(|n| format!("{n} ({})", report.get(n).map(|r| r.evidence.as_str()).unwrap_or("missing")))
                .collect();
            return Err(Error::AssumptionFailed(format!(
                "{exp} requires {}; failed: {} (use --force to override)",
                required.join(", "),
                evidence.join("; ")
            )));
        }
        assumptions = Some(report);
    }

    let kernel = || -> Result<Kernel<f64>> { make_kernel(&config.kernel) };
    let emitted = match exp {
        L1Rate => emit(&run_l1_rate(
            &L1RateParams {
                spec: spec.clone(),
                kernel: kernel()?,
                sizes: config.sizes.clone().unwrap_or_default(),
                rule: config.rule()?,
                replicates: config.replicates(),
                seed,
                range_sds: config.range_sds,
            },
            density.as_ref().expect("density"),
        )?)?,
        Clt => emit(&run_clt(
            &CltParams {
                spec: spec.clone(),
                kernel: kernel()?,
                points: config.evaluation_points()?,
                region: config.region.as_ref().expect("region default").build(d)?,
                rule: config.rule()?,
                replicates: config.replicates(),
                seed,
                centering: config.centering,
            },
            density.as_ref().expect("density"),
        )?)?,
        BerryEsseen => {
            let tau = match config.rule()? {
                crate::kde::BandwidthRule::BerryEsseen { tau } => tau,
                _ => config.tau,
            };
            emit(&run_berry_esseen(
                &BerryEsseenParams {
                    spec: spec.clone(),
                    kernel: kernel()?,
                    x: config.x.unwrap_or(0.0),
                    sizes: config.sizes.clone().unwrap_or_default(),
                    tau,
                    alpha: config.alpha,
                    p: config.p,
                    replicates: config.replicates(),
                    seed,
                },
                density.as_ref().expect("density"),
            )?)?
        }
        AuditMoment | AuditKbar => {
            let radius = spec.dependence_radius();
            let ms = config.audit.ms.clone().unwrap_or_else(|| {
                let mut v = vec![1, 2, radius];
                v.sort_unstable();
                v.dedup();
                v
            });
            let region = match &config.region {
                Some(r) => r.build(d)?,
                None => Region::cube(d, 16)?,
            };
            let params = AuditParams {
                spec: spec.clone(),
                kernel: kernel()?,
                ms,
                bs: config.audit.bs.clone(),
                ps: config.audit.ps.clone(),
                x: config.x.unwrap_or(0.0),
                weights: config.audit.weights.weights(region.len()),
                region,
                replicates: config.replicates(),
                seed,
                options: config.audit.kbar,
            };
            if exp == AuditMoment {
                emit(&audit_moment_inequality(&params)?)?
            } else {
                emit(&audit_kbar_norm(&params)?)?
            }
        }
        AuditMn => {
            let profile = DependenceProfile::for_spec(&spec, config.p, config.audit.c_p)?;
            emit(&audit_mn_limits(
                &profile,
                &config.audit.ks,
                config.audit.weight_exponent,
                config.audit.require_monotone,
            )?)?
        }
        AuditAssumptions => emit(assumptions.as_ref().expect("computed above"))?,
    };

    let passed = emitted.assertions.iter().all(|a| a.passed || !a.required);
    let name = exp.as_str();
    let csv_path = out.join(format!("{name}.csv"));
    let json_path = out.join(format!("{name}.json"));
    write_file(&csv_path, &emitted.csv)?;
    let doc = json!({
        "schema_version": crate::config::SCHEMA_VERSION,
        "experiment": name,
        "config": config,
        "forced": config.force,
        "assumption_failures": failures,
        "assumptions": assumptions,
        "report": emitted.report,
        "assertions": emitted.assertions,
        "passed": passed,
    });
    write_file(&json_path, &to_pretty(&doc)?)?;
    Ok(Outcome {
        experiment: exp,
        csv_path,
        json_path,
        assertions: emitted.assertions,
        forced: config.force,
        assumption_failures: failures,
        passed,
    })
}

fn to_pretty<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| Error::Config(e.to_string()))
}

/// Writes `estimate.csv` for a single sample on `region`, with the `efn` and
/// `f` columns when the marginal density is known exactly.
pub fn run_estimate(
    config: &RunConfig,
    region: &Region,
    grid: &crate::kde::Grid,
) -> Result<PathBuf> {
    let spec = config.field.to_spec()?;
    let kernel = make_kernel::<f64>(&config.kernel)?;
    let b = crate::kde::bandwidth(&config.rule()?, region.len())?;
    let sample = crate::fields::FieldSampler::new(&spec, region)?.sample::<f64>(config.seed, 0)?;
    let mut est = crate::kde::estimate(&sample, &kernel, b, &grid.points())?;
    if let Ok(f) = crate::fields::marginal_density_linear_gaussian::<f64>(&spec) {
        est = est.with_expected(&f, &kernel)?.with_truth(&f);
    }
    let out = config.out.clone().unwrap_or_else(default_out_dir);
    std::fs::create_dir_all(&out).map_err(|source| Error::Io {
        path: out.clone(),
        source,
    })?;
    let path = out.join("estimate.csv");
    let mut buf = Vec::new();
    est.write_csv(&mut buf).expect("writing to memory");
    write_file(&path, std::str::from_utf8(&buf).expect("utf8"))?;
    Ok(path)
}
