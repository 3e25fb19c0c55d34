//! Monte Carlo experiments for the L1 rate, the CLT and the Berry-Esseen
//! decay, plus audits of the two norm inequalities, the `m_n` limits and the
//! model assumptions.
//!
//! Replicates run in parallel, keyed by stream id, and are reduced in stream
//! order, so reports do not depend on the worker count.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::dependence::{mn_schedule_weighted, theta_exponent, theta_closed_form, DependenceProfile, TruncationSchedule};
use crate::error::{Error, Result};
use crate::fields::{
    linear_autocovariance, marginal_density_linear_gaussian, pair_density_linear_gaussian, std_normal_cdf,
    BivariateNormal, DensityModel, FieldSampler, FieldSpec,
};
use crate::kde::{
    bandwidth, baseline_density, estimate_values, expected_fn, l1_distance_values, make_kernel, BandwidthRule, Grid,
    KbarOptions, Kernel, SmoothedKernel,
};
use crate::lattice::{sup_ball_points, IndexPoint, Region};
use crate::quadrature::GaussLegendre;
use crate::rng::replicate_stream;
use crate::Rational;

/// One checked claim of a report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    /// Informational assertions are printed but do not fail a run.
    pub required: bool,
    pub detail: String,
}

impl Assertion {
    pub fn required(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            required: true,
            detail: detail.into(),
        }
    }

    pub fn informational(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            required: false,
            detail: detail.into(),
        }
    }
}

/// Common surface of every experiment report.
pub trait Report: Serialize {
    fn csv(&self) -> String;
    fn assertions(&self) -> Vec<Assertion>;

    fn passed(&self) -> bool {
        self.assertions().iter().all(|a| a.passed || !a.required)
    }
}

/// Kolmogorov distance between the empirical CDF of `sample` and `cdf`,
/// evaluated exactly at the jumps.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::invalid("KS statistic of an empty sample"));
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("KS statistic needs finite values"));
    }
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (k, u) in s.iter().enumerate() {
        let f = cdf(*u);
        d = d.max((k as f64 + 1.0) / n - f).max(f - k as f64 / n);
    }
    Ok(d)
}

/// `sup_t |F_hat(t) - F(t)|` over a dense grid of `points` values of `t`.
pub fn ks_brute_force(sample: &[f64], cdf: impl Fn(f64) -> f64, points: usize) -> f64 {
    let lo = sample.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0;
    let hi = sample.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    let n = sample.len() as f64;
    (0..points)
        .map(|k| {
            let t = lo + (hi - lo) * k as f64 / (points - 1) as f64;
            let below = sample.iter().filter(|v| **v <= t).count() as f64;
            (below / n - cdf(t)).abs()
        })
        .fold(0.0, f64::max)
}

/// Least-squares fit of `ln y = intercept + slope ln x`.
pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Runs `f(rep)` for every replicate in parallel and returns results in
/// replicate order.
fn replicate<T: Send>(n: usize, f: impl Fn(u64) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    (0..n as u64).into_par_iter().map(f).collect()
}

/// The cube region with `n` sites in dimension `d`.
pub fn cube_of_size(d: usize, n: usize) -> Result<Region> {
    let side = (n as f64).powf(1.0 / d as f64).round() as usize;
    if side.checked_pow(d as u32) != Some(n) {
        return Err(Error::invalid(format!("{n} is not a perfect {d}-th power")));
    }
    Region::cube(d, side)
}

fn check_replicates(r: usize) -> Result<()> {
    if r == 0 {
        return Err(Error::invalid("replicates must be >= 1"));
    }
    Ok(())
}

fn check_ladder(sizes: &[usize], min_len: usize) -> Result<()> {
    if sizes.len() < min_len {
        return Err(Error::invalid(format!("size ladder needs at least {min_len} sizes")));
    }
    if sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("size ladder must be strictly increasing"));
    }
    Ok(())
}

/// Exact marginal for Gaussian linear fields, a tabulated numeric baseline
/// otherwise.
pub fn reference_density(spec: &FieldSpec, seed: u64) -> Result<DensityModel<f64>> {
    match marginal_density_linear_gaussian(spec) {
        Ok(f) => Ok(f),
        Err(Error::WrongSpecKind(_)) => {
            let d = spec.dim();
            let side = ((1usize << 20) as f64).powf(1.0 / d as f64).floor() as usize;
            let region = Region::cube(d, side)?;
            let kernel = make_kernel::<f64>("epanechnikov")?;
            let pilot_side = (4096f64.powf(1.0 / d as f64).round() as usize).min(side);
            let pilot = FieldSampler::new(spec, &Region::cube(d, pilot_side)?)?.sample::<f64>(seed, u64::MAX - 1)?;
            let mut sorted = pilot.values.clone();
            sorted.sort_by(f64::total_cmp);
            let atom = sorted.chunk_by(|a, b| a == b).map(<[f64]>::len).max().unwrap_or(0);
            if atom * 100 > sorted.len() {
                return Err(Error::Degenerate(format!(
                    "marginal law has an atom: {atom} of {} pilot values coincide",
                    sorted.len()
                )));
            }
            let (lo, hi) = pilot
                .values
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
            let spread = (hi - lo).max(1e-6);
            let b = 0.02 * spread;
            let grid = Grid::new(lo - spread, hi + spread, b / 10.0)?;
            baseline_density(spec, &region, &kernel, b, &grid, seed)
        }
        Err(e) => Err(e),
    }
}

// ---------------------------------------------------------------- L1 rate

#[derive(Clone, Debug)]
pub struct L1RateParams {
    pub spec: FieldSpec,
    pub kernel: Kernel<f64>,
    pub sizes: Vec<usize>,
    pub rule: BandwidthRule,
    pub replicates: usize,
    pub seed: u64,
    /// Integration range `A` in marginal standard deviations.
    pub range_sds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateRow {
    pub size: usize,
    pub bandwidth: f64,
    pub value: f64,
    pub stderr: f64,
    pub bound_shape: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateReport {
    pub rows: Vec<RateRow>,
    pub slope: f64,
    pub intercept: f64,
    pub kappa: f64,
    pub range: f64,
    pub out_of_range_mass: f64,
    pub replicates: usize,
    pub exact_density: bool,
}

/// Slope required of the log-log L1 fit.
pub const L1_SLOPE_LIMIT: f64 = -2.0 / 9.0 + 0.02;

impl Report for RateReport {
    fn csv(&self) -> String {
        let mut s = String::from("size,bandwidth,value,stderr,bound_shape\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.size, r.bandwidth, r.value, r.stderr, r.bound_shape);
        }
        s
    }

    fn assertions(&self) -> Vec<Assertion> {
        let decreasing = self.rows.windows(2).all(|w| w[1].value < w[0].value);
        vec![
            Assertion::required(
                "l1-decreasing",
                decreasing,
                format!("mean L1 by size: {:?}", self.rows.iter().map(|r| r.value).collect::<Vec<_>>()),
            ),
            Assertion::required(
                "l1-slope",
                self.slope <= L1_SLOPE_LIMIT,
                format!("fitted slope {:.4} vs limit {:.4}", self.slope, L1_SLOPE_LIMIT),
            ),
        ]
    }
}

pub fn run_l1_rate(params: &L1RateParams, density: &DensityModel<f64>) -> Result<RateReport> {
    check_replicates(params.replicates)?;
    check_ladder(&params.sizes, 4)?;
    let d = params.spec.dim();
    let a = params.range_sds * density.std_dev();
    let mean = density.mean();
    let centered = translate(density, -mean);
    let mut rows = Vec::with_capacity(params.sizes.len());
    for (row, &n) in params.sizes.iter().enumerate() {
        let b = bandwidth(&params.rule, n)?;
        let region = cube_of_size(d, n)?;
        let sampler = FieldSampler::new(&params.spec, &region)?;
        let count = ((2.0 * a) / (b / 10.0)).ceil() as usize + 1;
        let step = 2.0 * a / (count - 1) as f64;
        let points: Vec<f64> = (0..count).map(|k| -a + k as f64 * step).collect();
        let shifted: Vec<f64> = points.iter().map(|x| x + mean).collect();
        let errors = replicate(params.replicates, |rep| {
            let s = sampler.sample::<f64>(params.seed, replicate_stream(row as u64, rep))?;
            let fnv = estimate_values(&s.values, &params.kernel, b, &shifted)?;
            let l1 = l1_distance_values(&points, &fnv, b, &centered, a)?;
            Ok(l1.distance)
        })?;
        let (value, stderr) = mean_and_se(&errors);
        let nb = n as f64 * b;
        rows.push(RateRow {
            size: n,
            bandwidth: b,
            value,
            stderr,
            bound_shape: (b + 1.0 / nb.sqrt()).powf(2.0 / 3.0),
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.size as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.value).collect();
    let (slope, intercept) = fit_loglog(&xs, &ys);
    let kappa = rows.iter().map(|r| r.value / r.bound_shape).fold(0.0, f64::max);
    Ok(RateReport {
        rows,
        slope,
        intercept,
        kappa,
        range: a,
        out_of_range_mass: density.mass_outside(a + mean.abs()),
        replicates: params.replicates,
        exact_density: density.is_exact(),
    })
}

fn translate(f: &DensityModel<f64>, by: f64) -> DensityModel<f64> {
    match f {
        DensityModel::Normal { mean, std_dev } => DensityModel::Normal {
            mean: mean + by,
            std_dev: *std_dev,
        },
        DensityModel::Tabulated { lo, step, values } => DensityModel::Tabulated {
            lo: lo + by,
            step: *step,
            values: values.clone(),
        },
    }
}

// ---------------------------------------------------------------- CLT

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Centering {
    /// Exact `E f_n(x)`.
    Expected,
    /// `f(x)`, allowed only when `|Lambda| b^3` is small.
    Density,
}

/// Largest `|Lambda| b^3` accepted for `f`-centering.
pub const F_CENTERING_LIMIT: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct CltParams {
    pub spec: FieldSpec,
    pub kernel: Kernel<f64>,
    pub points: Vec<f64>,
    pub region: Region,
    pub rule: BandwidthRule,
    pub replicates: usize,
    pub seed: u64,
    pub centering: Centering,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CltPoint {
    pub x: f64,
    pub gamma: f64,
    pub center: f64,
    pub ks: f64,
    pub variance: f64,
    /// Exact finite-size `Var(sqrt(|Lambda| b) f_n(x))` for Gaussian linear fields.
    pub predicted_variance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CltReport {
    pub size: usize,
    pub bandwidth: f64,
    pub replicates: usize,
    pub points: Vec<CltPoint>,
    pub covariance: Vec<Vec<f64>>,
    pub max_offdiag_corr: f64,
    pub centering: Centering,
}

pub const CLT_KS_LIMIT: f64 = 0.05;
pub const CLT_CORR_LIMIT: f64 = 0.1;
pub const CLT_VAR_TOLERANCE: f64 = 0.15;

impl Report for CltReport {
    fn csv(&self) -> String {
        let mut s = String::from("x,gamma,center,value,variance,predicted_variance\n");
        for p in &self.points {
            let pred = p.predicted_variance.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{},{}", p.x, p.gamma, p.center, p.ks, p.variance, pred);
        }
        s
    }

    fn assertions(&self) -> Vec<Assertion> {
        let mut out: Vec<Assertion> = self
            .points
            .iter()
            .map(|p| {
                Assertion::required(
                    format!("clt-ks x={}", p.x),
                    p.ks < CLT_KS_LIMIT,
                    format!("KS {:.4} < {CLT_KS_LIMIT}", p.ks),
                )
            })
            .collect();
        out.push(Assertion::required(
            "clt-offdiag-corr",
            self.max_offdiag_corr < CLT_CORR_LIMIT,
            format!("max |corr| {:.4} < {CLT_CORR_LIMIT}", self.max_offdiag_corr),
        ));
        if let Some(p) = self.points.iter().find(|p| p.x == 0.0) {
            let rel = (p.variance / p.gamma - 1.0).abs();
            out.push(Assertion::required(
                "clt-variance x=0",
                rel <= CLT_VAR_TOLERANCE,
                format!("variance {:.5} vs gamma {:.5} (rel {:.3})", p.variance, p.gamma, rel),
            ));
        }
        out
    }
}

fn check_distinct(points: &[f64]) -> Result<()> {
    for (k, a) in points.iter().enumerate() {
        if !a.is_finite() {
            return Err(Error::invalid("points must be finite"));
        }
        if points[..k].contains(a) {
            return Err(Error::invalid("distinct points required"));
        }
    }
    Ok(())
}

pub fn run_clt(params: &CltParams, density: &DensityModel<f64>) -> Result<CltReport> {
    check_replicates(params.replicates)?;
    if params.points.len() < 2 {
        return Err(Error::invalid("CLT needs at least two points"));
    }
    check_distinct(&params.points)?;
    let n = params.region.len();
    let b = bandwidth(&params.rule, n)?;
    if params.centering == Centering::Density && n as f64 * b.powi(3) > F_CENTERING_LIMIT {
        return Err(Error::AssumptionFailed(format!(
            "f-centering needs |Lambda| b^3 <= {F_CENTERING_LIMIT}, got {}",
            n as f64 * b.powi(3)
        )));
    }
    let k2 = params.kernel.square_integral();
    let centers: Vec<f64> = params
        .points
        .iter()
        .map(|&x| match params.centering {
            Centering::Expected => expected_fn(density, &params.kernel, b, x),
            Centering::Density => Ok(density.pdf(x)),
        })
        .collect::<Result<_>>()?;
    let sampler = FieldSampler::new(&params.spec, &params.region)?;
    let scale = (n as f64 * b).sqrt();
    let matrix = replicate(params.replicates, |rep| {
        let s = sampler.sample::<f64>(params.seed, replicate_stream(0, rep))?;
        let fnv = estimate_values(&s.values, &params.kernel, b, &params.points)?;
        Ok(fnv.iter().zip(&centers).map(|(f, c)| scale * (f - c)).collect::<Vec<f64>>())
    })?;
    let k = params.points.len();
    let r = matrix.len() as f64;
    let means: Vec<f64> = (0..k).map(|j| matrix.iter().map(|row| row[j]).sum::<f64>() / r).collect();
    let covariance: Vec<Vec<f64>> = (0..k)
        .map(|a| {
            (0..k)
                .map(|c| {
                    matrix.iter().map(|row| (row[a] - means[a]) * (row[c] - means[c])).sum::<f64>() / (r - 1.0).max(1.0)
                })
                .collect()
        })
        .collect();
    let mut max_offdiag_corr: f64 = 0.0;
    for a in 0..k {
        for c in 0..a {
            let denom = (covariance[a][a] * covariance[c][c]).sqrt();
            if denom > 0.0 {
                max_offdiag_corr = max_offdiag_corr.max((covariance[a][c] / denom).abs());
            }
        }
    }
    let gaussian = params.spec.is_gaussian_linear();
    let mut points = Vec::with_capacity(k);
    for (j, &x) in params.points.iter().enumerate() {
        let gamma = density.pdf(x) * k2;
        if !(gamma > 0.0) {
            return Err(Error::Degenerate(format!("gamma vanishes at x = {x}")));
        }
        let column: Vec<f64> = matrix.iter().map(|row| row[j]).collect();
        let sd = gamma.sqrt();
        let ks = ks_statistic(&column, |u| std_normal_cdf(u / sd))?;
        let predicted_variance = if gaussian {
            Some(predicted_scaled_variance(&params.spec, &params.kernel, &params.region, b, x)?)
        } else {
            None
        };
        points.push(CltPoint {
            x,
            gamma,
            center: centers[j],
            ks,
            variance: covariance[j][j],
            predicted_variance,
        });
    }
    Ok(CltReport {
        size: n,
        bandwidth: b,
        replicates: params.replicates,
        points,
        covariance,
        max_offdiag_corr,
        centering: params.centering,
    })
}

fn kernel_panels(kernel: &Kernel<f64>) -> Vec<(f64, f64)> {
    let c = kernel.support();
    let mut cuts: Vec<f64> = kernel.kinks().into_iter().filter(|u| u.abs() < c).collect();
    cuts.push(-c);
    cuts.push(c);
    cuts.push(0.0);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    cuts.windows(2).map(|w| (w[0], w[1])).collect()
}

/// `|Lambda| b Var f_n(x)` from the expansion over lags,
/// `Var(sum K_i) = sum_j |Lambda cap (Lambda - j)| Cov(K_0, K_j)`, with the
/// pair covariances integrated against the exact bivariate normal law.
pub fn predicted_scaled_variance(
    spec: &FieldSpec,
    kernel: &Kernel<f64>,
    region: &Region,
    b: f64,
    x: f64,
) -> Result<f64> {
    let f = marginal_density_linear_gaussian::<f64>(spec)?;
    let coeffs = spec.coefficients().expect("gaussian linear");
    let var_eps = spec.innovation.variance();
    let rule = GaussLegendre::cached(32);
    let panels = kernel_panels(kernel);
    let nodes: Vec<(f64, f64)> = panels
        .iter()
        .flat_map(|&(lo, hi)| {
            let half = 0.5 * (hi - lo);
            let mid = 0.5 * (hi + lo);
            rule.nodes.iter().zip(&rule.weights).map(move |(t, w)| (mid + half * t, w * half))
        })
        .map(|(t, w)| (t, w * kernel.eval_f64(t)))
        .filter(|(_, w)| *w != 0.0)
        .collect();
    let ek: f64 = b * nodes.iter().map(|(t, w)| w * f.pdf(x - b * t)).sum::<f64>();
    let ek2: f64 = b * nodes
        .iter()
        .map(|(t, w)| w * kernel.eval_f64(*t) * f.pdf(x - b * t))
        .sum::<f64>();
    let n = region.len() as f64;
    let mut total = n * (ek2 - ek * ek);
    let variance = var_eps * coeffs.square_sum()?;
    let reach = 2 * coeffs.radius();
    for lag in sup_ball_points(spec.dim(), reach) {
        if lag.is_origin() {
            continue;
        }
        let cov = linear_autocovariance(coeffs, var_eps, &lag);
        if cov.abs() < 1e-14 * variance {
            continue;
        }
        let overlap = region.overlap_fast(&lag)? as f64;
        if overlap == 0.0 {
            continue;
        }
        let pair = BivariateNormal {
            variance,
            covariance: cov,
        };
        let mut c = 0.0;
        for (s, ws) in &nodes {
            let u = x - b * s;
            let fu = f.pdf(u);
            for (t, wt) in &nodes {
                let v = x - b * t;
                c += ws * wt * (pair.pdf(u, v) - fu * f.pdf(v));
            }
        }
        total += overlap * b * b * c;
    }
    Ok(total / (n * b))
}

// ---------------------------------------------------------------- Berry-Esseen

#[derive(Clone, Debug)]
pub struct BerryEsseenParams {
    pub spec: FieldSpec,
    pub kernel: Kernel<f64>,
    pub x: f64,
    pub sizes: Vec<usize>,
    pub tau: f64,
    pub alpha: f64,
    pub p: f64,
    pub replicates: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BerryEsseenRow {
    pub size: usize,
    pub bandwidth: f64,
    pub value: f64,
    pub replicates: usize,
    pub theta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BerryEsseenReport {
    pub x: f64,
    pub rows: Vec<BerryEsseenRow>,
    pub theta: f64,
    /// Exact rational `theta(alpha, 3, 2) == theta_closed_form(alpha)`, when
    /// `tau = 3` and `p = 2`.
    pub theta_matches_closed_form: Option<bool>,
    pub abs_tau_moment: f64,
    pub alpha_tail: f64,
    /// Informational least-squares decay exponent of `D_n` in `|Lambda|`.
    pub fitted_decay: f64,
}

impl Report for BerryEsseenReport {
    fn csv(&self) -> String {
        let mut s = String::from("size,bandwidth,value,replicates,theta\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.size, r.bandwidth, r.value, r.replicates, r.theta);
        }
        s
    }

    fn assertions(&self) -> Vec<Assertion> {
        let first = self.rows.first().map(|r| r.value).unwrap_or(f64::NAN);
        let last = self.rows.last().map(|r| r.value).unwrap_or(f64::NAN);
        let mut out = vec![
            Assertion::required(
                "be-range",
                self.rows.iter().all(|r| (0.0..=1.0).contains(&r.value)),
                "all D_n in [0, 1]",
            ),
            Assertion::required(
                "be-decrease",
                last < first,
                format!("D_n largest size {last:.4} < smallest size {first:.4}"),
            ),
        ];
        if let Some(m) = self.theta_matches_closed_form {
            out.push(Assertion::required("be-theta", m, format!("theta = {}", self.theta)));
        }
        out.push(Assertion::informational(
            "be-decay-fit",
            true,
            format!("fitted exponent {:.4} vs theta {:.4}", -self.fitted_decay, self.theta),
        ));
        out
    }
}

pub fn run_berry_esseen(params: &BerryEsseenParams, density: &DensityModel<f64>) -> Result<BerryEsseenReport> {
    check_replicates(params.replicates)?;
    check_ladder(&params.sizes, 2)?;
    let theta = theta_exponent(params.alpha, params.tau, params.p)?;
    let theta_matches_closed_form = if params.tau == 3.0 && params.p == 2.0 {
        let a = Rational::approximate_float(params.alpha)
            .ok_or_else(|| Error::invalid("alpha is not representable as a ratio"))?;
        let three = Rational::from_integer(3);
        let two = Rational::from_integer(2);
        Some(theta_exponent(a, three, two)? == theta_closed_form(a)?)
    } else {
        None
    };
    let abs_tau_moment = params.kernel.abs_power_integral(params.tau)?;
    let d = params.spec.dim();
    let profile = DependenceProfile::for_spec(&params.spec, params.p, 1.0)?;
    let alpha_tail = profile.tail_sum(None, d as f64 * params.alpha)?.upper();
    if !alpha_tail.is_finite() {
        return Err(Error::UncertifiableTail("alpha-weighted tail is infinite".into()));
    }
    let gamma = density.pdf(params.x) * params.kernel.square_integral();
    if !(gamma > 0.0) {
        return Err(Error::Degenerate(format!("f(x) int K^2 vanishes at x = {}", params.x)));
    }
    let rule = BandwidthRule::BerryEsseen { tau: params.tau };
    let mut rows = Vec::with_capacity(params.sizes.len());
    for (row, &n) in params.sizes.iter().enumerate() {
        let b = bandwidth(&rule, n)?;
        let region = cube_of_size(d, n)?;
        let sampler = FieldSampler::new(&params.spec, &region)?;
        let center = expected_fn(density, &params.kernel, b, params.x)?;
        let scale = (n as f64 * b / gamma).sqrt();
        let u = replicate(params.replicates, |rep| {
            let s = sampler.sample::<f64>(params.seed, replicate_stream(row as u64, rep))?;
            let f = estimate_values(&s.values, &params.kernel, b, &[params.x])?;
            Ok(scale * (f[0] - center))
        })?;
        rows.push(BerryEsseenRow {
            size: n,
            bandwidth: b,
            value: ks_statistic(&u, std_normal_cdf)?,
            replicates: params.replicates,
            theta,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.size as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.value.max(1e-300)).collect();
    let (fitted_decay, _) = fit_loglog(&xs, &ys);
    Ok(BerryEsseenReport {
        x: params.x,
        rows,
        theta,
        theta_matches_closed_form,
        abs_tau_moment,
        alpha_tail,
        fitted_decay,
    })
}

// ---------------------------------------------------------------- inequality audits

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuditKind {
    /// `||sum a_i (K_i - Kbar_i)||_p <= L (8 m^d / b) (p sum a_i^2)^{1/2} sum_{|i|>m} delta_{i,p}`.
    MomentInequality,
    /// `||K_0 - Kbar_0||_p <= L (2p)^{1/2} / b sum_{|j|>m} delta_{j,p}`.
    KbarNorm,
}

#[derive(Clone, Debug)]
pub struct AuditParams {
    pub spec: FieldSpec,
    pub kernel: Kernel<f64>,
    pub ms: Vec<u64>,
    pub bs: Vec<f64>,
    pub ps: Vec<f64>,
    pub x: f64,
    /// Sites and weights `a_i`; ignored by the single-site audit.
    pub region: Region,
    pub weights: Vec<f64>,
    pub replicates: usize,
    pub seed: u64,
    pub options: KbarOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditRow {
    pub config: String,
    pub m: u64,
    pub b: f64,
    pub p: f64,
    pub lhs: f64,
    pub stderr: f64,
    pub rhs: f64,
    pub ratio: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InequalityAudit {
    pub kind: AuditKind,
    pub rows: Vec<AuditRow>,
    pub lipschitz_constant: f64,
}

impl Report for InequalityAudit {
    fn csv(&self) -> String {
        let mut s = String::from("config,m,b,p,lhs,stderr,rhs,ratio,pass\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.config, r.m, r.b, r.p, r.lhs, r.stderr, r.rhs, r.ratio, r.pass
            );
        }
        s
    }

    fn assertions(&self) -> Vec<Assertion> {
        let name = match self.kind {
            AuditKind::MomentInequality => "moment-inequality",
            AuditKind::KbarNorm => "kbar-norm",
        };
        self.rows
            .iter()
            .map(|r| {
                Assertion::required(
                    format!("{name} {}", r.config),
                    r.pass,
                    format!("lhs {:.4e} (se {:.1e}) rhs {:.4e} ratio {:.4}", r.lhs, r.stderr, r.rhs, r.ratio),
                )
            })
            .collect()
    }
}

/// Pass rule shared by both audits: `ratio <= 1 + 3 se / rhs`; a vanishing
/// right side requires a vanishing left side.
pub fn audit_row_passes(lhs: f64, se: f64, rhs: f64) -> (f64, bool) {
    if rhs == 0.0 {
        return (0.0, lhs == 0.0);
    }
    let ratio = lhs / rhs;
    (ratio, ratio <= 1.0 + 3.0 * se / rhs)
}

fn run_audit(kind: AuditKind, params: &AuditParams) -> Result<InequalityAudit> {
    check_replicates(params.replicates)?;
    let coeffs = params
        .spec
        .coefficients()
        .ok_or_else(|| Error::WrongSpecKind("inequality audits need a linear field".into()))?;
    let d = params.spec.dim();
    let (region, weights) = match kind {
        AuditKind::KbarNorm => (Region::from_points(d, [IndexPoint::origin(d)])?, vec![1.0]),
        AuditKind::MomentInequality => {
            if params.weights.len() != params.region.len() {
                return Err(Error::invalid("one weight per region site required"));
            }
            (params.region.clone(), params.weights.clone())
        }
    };
    // the audited field is the simulated one: its coefficients are the
    // truncated map
    let simulated = FieldSpec::linear(coeffs.truncated(), params.spec.innovation);
    let sampler = FieldSampler::new(&simulated, &region)?;
    let lip = params.kernel.lipschitz_constant();
    let sum_sq: f64 = weights.iter().map(|a| a * a).sum();
    let mut rows = Vec::new();
    let mut config = 0u64;
    for &m in &params.ms {
        for &b in &params.bs {
            let smoother = SmoothedKernel::new(&simulated, m, &params.kernel, b, params.options)?;
            for &p in &params.ps {
                let profile = DependenceProfile::for_spec(&simulated, p, 1.0)?;
                let tail = profile.tail_sum(Some(m), 0.0)?.upper();
                let rhs = match kind {
                    AuditKind::MomentInequality => {
                        lip * 8.0 * (m as f64).powi(d as i32) / b * (p * sum_sq).sqrt() * tail
                    }
                    AuditKind::KbarNorm => lip * (2.0 * p).sqrt() / b * tail,
                };
                let stream_base = config;
                let draws = replicate(params.replicates, |rep| {
                    let stream = replicate_stream(stream_base, rep);
                    let (full, inner) = sampler.linear_parts(params.seed, stream, m)?;
                    let mut acc = 0.0;
                    for (k, site) in region.points().iter().enumerate() {
                        let ki = params.kernel.eval_f64((params.x - full[k]) / b);
                        let kb = smoother.value(params.x, inner[k], site, params.seed, stream);
                        acc += weights[k] * (ki - kb);
                    }
                    Ok(acc.abs().powf(p))
                })?;
                let (mean, se_mean) = mean_and_se(&draws);
                let lhs = mean.powf(1.0 / p);
                let stderr = if mean > 0.0 {
                    mean.powf(1.0 / p - 1.0) / p * se_mean
                } else {
                    0.0
                };
                let (ratio, pass) = audit_row_passes(lhs, stderr, rhs);
                rows.push(AuditRow {
                    config: format!("m={m};b={b};p={p}"),
                    m,
                    b,
                    p,
                    lhs,
                    stderr,
                    rhs,
                    ratio,
                    pass,
                });
                config += 1;
            }
        }
    }
    Ok(InequalityAudit {
        kind,
        rows,
        lipschitz_constant: lip,
    })
}

pub fn audit_moment_inequality(params: &AuditParams) -> Result<InequalityAudit> {
    run_audit(AuditKind::MomentInequality, params)
}

pub fn audit_kbar_norm(params: &AuditParams) -> Result<InequalityAudit> {
    run_audit(AuditKind::KbarNorm, params)
}

// ---------------------------------------------------------------- m_n limits

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MnRow {
    pub k: u32,
    pub schedule: TruncationSchedule,
    pub mdb: f64,
    pub sqrt_r: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MnAudit {
    pub d: usize,
    pub weight: f64,
    pub rows: Vec<MnRow>,
    /// Whether monotonicity of `m_n` is a required assertion.
    pub require_monotone: bool,
}

impl Report for MnAudit {
    fn csv(&self) -> String {
        let mut s = String::from("k,bandwidth,v_n,m_n,mdb,tail_term,sqrt_r\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.k, r.schedule.bandwidth, r.schedule.v_n, r.schedule.m_n, r.mdb, r.schedule.tail_term, r.sqrt_r
            );
        }
        s
    }

    fn assertions(&self) -> Vec<Assertion> {
        let (first, last) = (self.rows.first().unwrap(), self.rows.last().unwrap());
        let monotone = self.rows.windows(2).all(|w| w[1].schedule.m_n >= w[0].schedule.m_n);
        let ms: Vec<u64> = self.rows.iter().map(|r| r.schedule.m_n).collect();
        let mono_detail = format!("m_n: {ms:?}");
        vec![
            if self.require_monotone {
                Assertion::required("mn-nondecreasing", monotone, mono_detail)
            } else {
                Assertion::informational("mn-nondecreasing", monotone, mono_detail)
            },
            Assertion::required(
                "mn-grows",
                last.schedule.m_n > first.schedule.m_n,
                format!("final m_n {} > initial {}", last.schedule.m_n, first.schedule.m_n),
            ),
            Assertion::required(
                "mdb-small",
                last.mdb < 0.5 && last.mdb < first.mdb,
                format!("m_n^d b final {:.3e} < min(0.5, initial {:.3e})", last.mdb, first.mdb),
            ),
            Assertion::required(
                "tail-term-bound",
                self.rows.iter().all(|r| r.schedule.tail_term <= r.sqrt_r * (1.0 + 1e-12)),
                "r(m_n)/(m_n^d b)^{3/2} <= sqrt(r(m_n)) on every row",
            ),
        ]
    }
}

/// Evaluates the schedule along `b = 2^{-k}`; `weight` overrides the tail
/// exponent `5d/2`.
pub fn audit_mn_limits(
    profile: &DependenceProfile,
    ks: &[u32],
    weight: Option<f64>,
    require_monotone: bool,
) -> Result<MnAudit> {
    let w = weight.unwrap_or(2.5 * profile.dim() as f64);
    if ks.is_empty() {
        return Err(Error::invalid("audit needs at least one k"));
    }
    let rows = ks
        .iter()
        .map(|&k| {
            let s = mn_schedule_weighted(profile, 0.5f64.powi(k as i32), w)?;
            Ok(MnRow {
                k,
                mdb: s.mdb(),
                sqrt_r: s.tail_at_m.sqrt(),
                schedule: s,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MnAudit {
        d: profile.dim(),
        weight: w,
        rows,
        require_monotone,
    })
}

// ---------------------------------------------------------------- assumptions

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssumptionRow {
    pub name: String,
    pub passed: bool,
    pub evidence: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub rows: Vec<AssumptionRow>,
}

impl AssumptionReport {
    pub fn get(&self, name: &str) -> Option<&AssumptionRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Names among `required` that failed.
    pub fn failures(&self, required: &[&str]) -> Vec<String> {
        required
            .iter()
            .filter(|n| !self.get(n).map(|r| r.passed).unwrap_or(false))
            .map(|n| n.to_string())
            .collect()
    }
}

impl Report for AssumptionReport {
    fn csv(&self) -> String {
        let mut s = String::from("assumption,passed,evidence\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},\"{}\"", r.name, r.passed, r.evidence.replace('"', "'"));
        }
        s
    }

    fn assertions(&self) -> Vec<Assertion> {
        self.rows
            .iter()
            .map(|r| Assertion::required(r.name.clone(), r.passed, r.evidence.clone()))
            .collect()
    }
}

/// Smallest `|Lambda| b` accepted along a ladder for A3.
pub const A3_MIN_EFFECTIVE: f64 = 10.0;

#[derive(Clone, Debug)]
pub struct AssumptionInputs<'a> {
    pub spec: &'a FieldSpec,
    pub kernel_name: &'a str,
    pub rule: BandwidthRule,
    pub sizes: Vec<usize>,
    pub density: Option<&'a DensityModel<f64>>,
    pub c_p: f64,
}

fn row(name: &str, passed: bool, evidence: impl Into<String>) -> AssumptionRow {
    AssumptionRow {
        name: name.into(),
        passed,
        evidence: evidence.into(),
    }
}

pub fn audit_assumptions(inputs: &AssumptionInputs<'_>) -> AssumptionReport {
    let mut rows = Vec::new();
    // A1, B1: the marginal density
    match inputs.density {
        Some(f) => {
            let lip = f.lipschitz_bound();
            rows.push(row(
                "A1",
                lip.is_finite(),
                format!(
                    "{} density, Lipschitz constant {lip:.4e}",
                    if f.is_exact() { "exact normal" } else { "tabulated" }
                ),
            ));
            let positive = f.is_exact();
            rows.push(row(
                "B1",
                positive && f.sup().is_finite(),
                if positive {
                    format!("normal density: positive, continuous, bounded by {:.4e}", f.sup())
                } else {
                    "tabulated density vanishes outside its grid; positivity not certified".into()
                },
            ));
        }
        None => {
            rows.push(row("A1", false, "no marginal density available"));
            rows.push(row("B1", false, "no marginal density available"));
        }
    }
    // A2, B2: the kernel
    match make_kernel::<f64>(inputs.kernel_name) {
        Ok(k) => {
            let m = k.moments();
            let ok = k.lipschitz_constant().is_finite() && (m.mass - 1.0).abs() < 1e-10;
            rows.push(row(
                "A2",
                ok && m.second.is_finite() && m.square.is_finite(),
                format!(
                    "{}: L = {:.4}, int K = {:.12}, int u^2|K| = {:.6}, int K^2 = {:.6}",
                    k.name(),
                    k.lipschitz_constant(),
                    m.mass,
                    m.second,
                    m.square
                ),
            ));
            rows.push(row(
                "B2",
                ok && m.abs_mass.is_finite() && m.square.is_finite(),
                format!("{}: int |K| = {:.6}, int K^2 = {:.6}", k.name(), m.abs_mass, m.square),
            ));
        }
        Err(e) => {
            rows.push(row("A2", false, format!("kernel refused: {e}")));
            rows.push(row("B2", false, format!("kernel refused: {e}")));
        }
    }
    // A3: the bandwidth ladder
    let mut a3 = Ok(Vec::new());
    for &n in &inputs.sizes {
        match bandwidth(&inputs.rule, n) {
            Ok(b) => {
                if let Ok(v) = a3.as_mut() {
                    v.push((n, b));
                }
            }
            Err(e) => {
                a3 = Err(format!("|Lambda| = {n}: {e}"));
                break;
            }
        }
    }
    match a3 {
        Ok(v) if !v.is_empty() => {
            let eff: Vec<f64> = v.iter().map(|(n, b)| *n as f64 * b).collect();
            let increasing = eff.windows(2).all(|w| w[1] > w[0]);
            let b_decreasing = v.windows(2).all(|w| w[1].1 <= w[0].1);
            let min_eff = eff.iter().cloned().fold(f64::INFINITY, f64::min);
            rows.push(row(
                "A3",
                increasing && b_decreasing && min_eff >= A3_MIN_EFFECTIVE,
                format!(
                    "|Lambda| b along ladder {:?}; needs increasing, b nonincreasing, min >= {A3_MIN_EFFECTIVE}",
                    eff.iter().map(|e| (e * 100.0).round() / 100.0).collect::<Vec<_>>()
                ),
            ));
        }
        Ok(_) => rows.push(row("A3", false, "empty size ladder")),
        Err(e) => rows.push(row("A3", false, e)),
    }
    // A4: certified weighted tail
    let d = inputs.spec.dim() as f64;
    match DependenceProfile::for_spec(inputs.spec, 2.0, inputs.c_p).and_then(|p| p.tail_sum(None, 2.5 * d)) {
        Ok(s) => rows.push(row(
            "A4",
            s.upper().is_finite(),
            format!("sum |i|^(5d/2) delta_i = {:.6e} (+ remainder <= {:.1e})", s.value, s.remainder_bound),
        )),
        Err(e) => rows.push(row("A4", false, format!("{e}"))),
    }
    // B3: pair densities on the lag grid
    rows.push(b3_row(inputs.spec));
    AssumptionReport { rows }
}

fn b3_row(spec: &FieldSpec) -> AssumptionRow {
    if !spec.is_gaussian_linear() {
        return row("B3", false, "pair densities are only available for Gaussian linear fields");
    }
    let coeffs = spec.coefficients().expect("linear");
    let var_eps = spec.innovation.variance();
    let reach = (2 * coeffs.radius()).max(1);
    let mut lags: Vec<(f64, IndexPoint)> = sup_ball_points(spec.dim(), reach)
        .into_iter()
        .filter(|l| !l.is_origin())
        .map(|l| (linear_autocovariance(coeffs, var_eps, &l).abs(), l))
        .collect();
    lags.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut kappa: f64 = 0.0;
    for (_, lag) in lags.iter().take(3) {
        match pair_density_linear_gaussian(spec, lag) {
            Ok(p) => kappa = kappa.max(p.sup_product_deviation()),
            Err(e) => return row("B3", false, format!("lag {lag}: {e}")),
        }
    }
    row(
        "B3",
        kappa.is_finite(),
        format!(
            "{} lags with |i| <= {reach} (covariance vanishes beyond); kappa = {kappa:.4e} from the most correlated lags",
            lags.len()
        ),
    )
}

/// Assumptions each experiment relies on.
pub fn required_assumptions(experiment: &str) -> &'static [&'static str] {
    match experiment {
        "l1-rate" => &["A1", "A2", "A3", "A4"],
        "clt" | "berry-esseen" => &["A3", "A4", "B1", "B2", "B3"],
        _ => &[],
    }
}
