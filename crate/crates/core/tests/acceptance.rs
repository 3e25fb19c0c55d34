//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if any
//! criterion fails. Run with `cargo test --test acceptance -- --nocapture`.

use std::process::Command;
use std::time::Instant;

use rfkde::config::{ExperimentName, RunConfig};
use rfkde::dependence::{delta_linear, delta_mc, theta_exponent, theta_closed_form, DependenceProfile};
use rfkde::experiments::{
    audit_kbar_norm, audit_mn_limits, audit_moment_inequality, ks_brute_force, ks_statistic, run_berry_esseen,
    run_clt, run_l1_rate, AuditParams, BerryEsseenParams, Centering, CltParams, L1RateParams, Report,
};
use rfkde::fields::{marginal_density_linear_gaussian, std_normal_cdf, CoefficientMap, FieldSpec};
use rfkde::innovations::InnovationSpec;
use rfkde::kde::{estimate_naive, estimate_values, make_kernel, BandwidthRule, KbarOptions, Kernel};
use rfkde::lattice::{IndexPoint, Region};
use rfkde::rng::CounterRng;
use rfkde::Rational;

const L1_SLOPE_LIMIT: f64 = -2.0 / 9.0 + 0.02;
const CLT_KS_LIMIT: f64 = 0.05;
const CLT_CORR_LIMIT: f64 = 0.1;
const CLT_VAR_TOL: f64 = 0.15;
const CLT_RATE: f64 = 0.1;
const BE_X: f64 = 1.5;
const MDB_LIMIT: f64 = 0.5;
const MN_RATE: f64 = 0.002;
const KDE_REL_TOL: f64 = 1e-12;
const DELTA_SE_MULT: f64 = 3.0;
const KS_TOL: f64 = 1e-3;
const SEED: u64 = 20_240_601;

struct Outcome {
    passed: bool,
    detail: String,
}

type Criterion = fn() -> Outcome;

fn normal() -> InnovationSpec {
    InnovationSpec::standard_normal()
}

fn geometric(d: usize, rate: f64) -> CoefficientMap {
    CoefficientMap::geometric(d, 1.0, rate, 0).unwrap().with_tolerance(1e-6).unwrap()
}

fn kernel(name: &str) -> Kernel<f64> {
    make_kernel(name).unwrap()
}

fn failed_assertions<R: Report>(r: &R) -> Vec<String> {
    r.assertions()
        .into_iter()
        .filter(|a| a.required && !a.passed)
        .map(|a| format!("{}: {}", a.name, a.detail))
        .collect()
}

fn criterion_1() -> Outcome {
    let spec = FieldSpec::linear(geometric(1, 0.5), normal());
    let f = marginal_density_linear_gaussian(&spec).unwrap();
    let r = run_l1_rate(
        &L1RateParams {
            spec,
            kernel: kernel("epanechnikov"),
            sizes: (7..=13).map(|k| 1usize << k).collect(),
            rule: BandwidthRule::PowerLaw { beta: 1.0 / 3.0 },
            replicates: 200,
            seed: SEED,
            range_sds: 8.0,
        },
        &f,
    )
    .unwrap();
    let decreasing = r.rows.windows(2).all(|w| w[1].value < w[0].value);
    Outcome {
        passed: decreasing && r.slope <= L1_SLOPE_LIMIT,
        detail: format!(
            "decreasing={decreasing} slope={:.4} (limit {L1_SLOPE_LIMIT:.4}) kappa={:.3}",
            r.slope, r.kappa
        ),
    }
}

fn criterion_2() -> Outcome {
    let coeffs = geometric(2, CLT_RATE);
    let s = coeffs.square_sum().unwrap();
    let spec = FieldSpec::linear(coeffs.scaled(1.0 / s.sqrt()), normal());
    let f = marginal_density_linear_gaussian(&spec).unwrap();
    let sum5: f64 = spec
        .coefficients()
        .unwrap()
        .power_sum_beyond(None, 5.0, 1.0)
        .unwrap()
        .upper();
    let r = run_clt(
        &CltParams {
            spec,
            kernel: kernel("epanechnikov"),
            points: vec![-1.0, 0.0, 1.0],
            region: Region::cube(2, 64).unwrap(),
            rule: BandwidthRule::PowerLaw { beta: 1.0 / 3.0 },
            replicates: 2000,
            seed: SEED,
            centering: Centering::Expected,
        },
        &f,
    )
    .unwrap();
    let ks_ok = r.points.iter().all(|p| p.ks < CLT_KS_LIMIT);
    let p0 = r.points.iter().find(|p| p.x == 0.0).unwrap();
    let rel = (p0.variance / p0.gamma - 1.0).abs();
    Outcome {
        passed: ks_ok && r.max_offdiag_corr < CLT_CORR_LIMIT && rel <= CLT_VAR_TOL && sum5.is_finite(),
        detail: format!(
            "ks={:?} max|corr|={:.4} var(0)={:.4} vs {:.4} (rel {:.3}) sum|i|^5|a_i|={:.3}",
            r.points.iter().map(|p| (p.ks * 1e4).round() / 1e4).collect::<Vec<_>>(),
            r.max_offdiag_corr,
            p0.variance,
            p0.gamma,
            rel,
            sum5
        ),
    }
}

fn criterion_3() -> Outcome {
    let coeffs = CoefficientMap::stored(
        1,
        vec![([0].into(), 1.0), ([1].into(), 0.5), ([2].into(), 0.25)],
    )
    .unwrap();
    let spec = FieldSpec::linear(coeffs, normal());
    let f = marginal_density_linear_gaussian(&spec).unwrap();
    let r = run_berry_esseen(
        &BerryEsseenParams {
            spec,
            kernel: kernel("epanechnikov"),
            x: BE_X,
            sizes: (8..=14).map(|k| 1usize << k).collect(),
            tau: 3.0,
            alpha: 10.0,
            p: 2.0,
            replicates: 2000,
            seed: SEED,
        },
        &f,
    )
    .unwrap();
    let first = r.rows.first().unwrap().value;
    let last = r.rows.last().unwrap().value;
    let in_range = r.rows.iter().all(|row| (0.0..=1.0).contains(&row.value));
    let bandwidth_ok = r
        .rows
        .iter()
        .all(|row| (row.bandwidth - (row.size as f64).powf(-1.0 / 3.0)).abs() < 1e-12);
    let theta_ok = r.theta_matches_closed_form == Some(true);
    Outcome {
        passed: last < first && in_range && theta_ok && bandwidth_ok,
        detail: format!(
            "D_n smallest={first:.4} largest={last:.4} in_range={in_range} theta={} exact={theta_ok} fitted decay {:.3} (informational)",
            r.theta, -r.fitted_decay
        ),
    }
}

fn criterion_4() -> Outcome {
    let spec = FieldSpec::linear(geometric(1, 0.5), normal());
    let radius = spec.dependence_radius();
    let region = Region::cube(1, 16).unwrap();
    let params = AuditParams {
        spec,
        kernel: kernel("triangular"),
        ms: vec![1, 2, radius],
        bs: vec![0.5, 0.25, 0.1],
        ps: vec![2.0, 4.0],
        x: 0.0,
        weights: vec![1.0; region.len()],
        region,
        replicates: 2000,
        seed: SEED,
        options: KbarOptions::default(),
    };
    let moment = audit_moment_inequality(&params).unwrap();
    let kbar = audit_kbar_norm(&params).unwrap();
    let zero_rows = moment
        .rows
        .iter()
        .chain(&kbar.rows)
        .filter(|r| r.m == radius)
        .all(|r| r.lhs == 0.0 && r.rhs == 0.0 && r.ratio == 0.0);
    let worst = moment.rows.iter().chain(&kbar.rows).map(|r| r.ratio).fold(0.0, f64::max);
    let mut failures = failed_assertions(&moment);
    failures.extend(failed_assertions(&kbar));
    Outcome {
        passed: failures.is_empty()
            && zero_rows
            && moment.rows.len() == 18
            && kbar.rows.len() == 18,
        detail: format!(
            "rows={}+{} worst ratio={worst:.4} zero full-window rows={zero_rows} failures={failures:?}",
            moment.rows.len(),
            kbar.rows.len()
        ),
    }
}

fn criterion_5() -> Outcome {
    let mut details = Vec::new();
    let mut passed = true;
    for d in [1usize, 2] {
        let law = CoefficientMap::geometric(d, 2f64.sqrt(), MN_RATE, 0).unwrap();
        let profile = DependenceProfile::from_law(law, 2.0);
        let ks: Vec<u32> = (4..=20).collect();
        let a = audit_mn_limits(&profile, &ks, None, true).unwrap();
        let first = a.rows.first().unwrap();
        let last = a.rows.last().unwrap();
        let mono = a.rows.windows(2).all(|w| w[1].schedule.m_n >= w[0].schedule.m_n);
        let grows = last.schedule.m_n > first.schedule.m_n;
        let mdb = last.mdb < MDB_LIMIT && last.mdb < first.mdb;
        let tail = a.rows.iter().all(|r| r.schedule.tail_term <= r.sqrt_r);
        passed &= mono && grows && mdb && tail;
        details.push(format!(
            "d={d}: m_n {}..{} nondecreasing={mono} mdb {:.3e}..{:.3e} tail<=sqrt(r)={tail}",
            first.schedule.m_n, last.schedule.m_n, first.mdb, last.mdb
        ));
    }
    Outcome {
        passed,
        detail: details.join("; "),
    }
}

fn criterion_6() -> Outcome {
    // fast path vs naive double loop
    let names = ["triangular", "epanechnikov", "quartic", "gaussian_cutoff(4)"];
    let mut rng = CounterRng::new(SEED);
    let mut worst_kde: f64 = 0.0;
    for c in 0..100 {
        let k = kernel(names[c % names.len()]);
        let n = 1 + (rng.next_unit() * 400.0) as usize;
        let b = 0.02 + rng.next_unit();
        let values: Vec<f64> = (0..n).map(|_| 6.0 * rng.next_unit() - 3.0).collect();
        let points: Vec<f64> = (0..25).map(|_| 8.0 * rng.next_unit() - 4.0).collect();
        let fast = estimate_values(&values, &k, b, &points).unwrap();
        let slow = estimate_naive(&values, &k, b, &points);
        for (a, e) in fast.iter().zip(&slow) {
            let scale = e.abs().max(f64::MIN_POSITIVE);
            if *e == 0.0 {
                worst_kde = worst_kde.max(a.abs());
            } else {
                worst_kde = worst_kde.max((a - e).abs() / scale);
            }
        }
    }
    let kde_ok = worst_kde <= KDE_REL_TOL;

    // delta_mc vs delta_linear
    let coeffs = CoefficientMap::stored(
        1,
        vec![([0].into(), 1.0), ([1].into(), -0.6), ([2].into(), 0.3), ([4].into(), 0.1)],
    )
    .unwrap();
    let spec = FieldSpec::linear(coeffs.clone(), normal());
    let mut delta_ok = 0;
    let mut worst_z: f64 = 0.0;
    let mut pair = 0u64;
    for i in [0i64, 1, 2, 3, 4] {
        for p in [1.0, 2.0, 3.0, 4.0] {
            let idx = IndexPoint::from([i]);
            let exact = delta_linear(&coeffs, &spec.innovation, &idx, p).unwrap();
            let mc = delta_mc(&spec, &idx, p, 10_000, SEED + pair).unwrap();
            pair += 1;
            let err = (mc.estimate - exact).abs();
            let ok = if mc.std_error == 0.0 { err == 0.0 } else { err <= DELTA_SE_MULT * mc.std_error };
            if mc.std_error > 0.0 {
                worst_z = worst_z.max(err / mc.std_error);
            }
            delta_ok += ok as usize;
        }
    }
    let deltas_pass = delta_ok == 20;

    // KS routine vs dense grid
    let mut rng = CounterRng::new(SEED ^ 0xabc);
    let sample: Vec<f64> = (0..500).map(|_| 2.5 * (rng.next_unit() - 0.45)).collect();
    let exact = ks_statistic(&sample, std_normal_cdf).unwrap();
    let brute = ks_brute_force(&sample, std_normal_cdf, 200_000);
    let ks_ok = (exact - brute).abs() <= KS_TOL;

    // theta identity on exact rationals
    let three = Rational::from_integer(3);
    let two = Rational::from_integer(2);
    let theta_ok = (1..=1000).all(|k| {
        let alpha = Rational::new(k + 37, 37);
        theta_exponent(alpha, three, two).unwrap() == theta_closed_form(alpha).unwrap()
    });

    Outcome {
        passed: kde_ok && deltas_pass && ks_ok && theta_ok,
        detail: format!(
            "kde worst rel={worst_kde:.2e} delta_mc {delta_ok}/20 (worst |z|={worst_z:.2}) ks |exact-brute|={:.2e} theta 1000/1000={theta_ok}",
            (exact - brute).abs()
        ),
    }
}

fn run_cli(dir: &std::path::Path, experiment: &str, workers: usize, extra: &[&str]) -> Vec<u8> {
    let status = Command::new(env!("CARGO_BIN_EXE_rfkde"))
        .args(["run", "--experiment", experiment, "--workers", &workers.to_string(), "--out"])
        .arg(dir)
        .args(extra)
        .output()
        .unwrap();
    assert!(status.status.code().is_some(), "terminated by signal");
    std::fs::read(dir.join(format!("{experiment}.csv"))).unwrap()
}

fn criterion_7() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut details = Vec::new();
    let mut passed = true;
    let cases: [(&str, &[&str]); 3] = [
        ("l1-rate", &["--replicates", "50"]),
        ("berry-esseen", &["--replicates", "300"]),
        ("audit-kbar", &["--replicates", "200"]),
    ];
    for (exp, extra) in cases {
        let a = run_cli(&tmp.path().join(format!("{exp}-1")), exp, 1, extra);
        let b = run_cli(&tmp.path().join(format!("{exp}-3")), exp, 3, extra);
        let same = !a.is_empty() && a == b;
        passed &= same;
        details.push(format!("{exp}: {}", if same { "identical" } else { "differs" }));
    }
    // library path, different pool sizes
    let mut c = RunConfig::minimal(ExperimentName::Clt);
    c.replicates = Some(100);
    c.region = Some(rfkde::config::RegionConfig::cube(1, 1024));
    let mut outputs = Vec::new();
    for w in [1, 2] {
        c.workers = Some(w);
        c.out = Some(tmp.path().join(format!("clt-{w}")));
        let o = rfkde::runner::run(&c).unwrap();
        outputs.push(std::fs::read(o.csv_path).unwrap());
    }
    let same = outputs[0] == outputs[1];
    passed &= same;
    details.push(format!("clt (library): {}", if same { "identical" } else { "differs" }));
    Outcome {
        passed,
        detail: details.join(", "),
    }
}

fn main() -> std::process::ExitCode {
    let criteria: [(&str, Criterion); 7] = [
        ("L1 rate", criterion_1),
        ("CLT", criterion_2),
        ("Berry-Esseen decay", criterion_3),
        ("inequality audits", criterion_4),
        ("m_n limits", criterion_5),
        ("oracle equivalence", criterion_6),
        ("determinism", criterion_7),
    ];
    let mut failed = Vec::new();
    for (k, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = check();
        println!(
            "criterion {} ({name}): {} [{:.1}s] {}",
            k + 1,
            if o.passed { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
        if !o.passed {
            failed.push(k + 1);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
        std::process::ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::ExitCode::FAILURE
    }
}
