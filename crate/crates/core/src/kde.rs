//! The Parzen-Rosenblatt estimator over arbitrary lattice regions, Lipschitz
//! kernels with certified constants, bandwidth rules, the smoothed term
//! `E f_n`, the conditionally smoothed kernel `Kbar` and the L1 distance.

use std::fmt;
use std::io::Write;
use std::marker::PhantomData;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{linear_split, std_normal_cdf, std_normal_pdf, DensityModel, FieldSample, FieldSampler, FieldSpec, LinearSplit};
use crate::innovations::InnovationSpec;
use crate::lattice::{IndexPoint, Region};
use crate::quadrature::{adaptive_integrate, GaussHermite, GaussLegendre};
use crate::rng::{CounterRng, Role};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelKind {
    Triangular,
    Epanechnikov,
    Quartic,
    /// `(phi(u) - phi(c))_+`, normalized.
    GaussianCutoff { cutoff: f64 },
}

impl KernelKind {
    pub fn support(&self) -> f64 {
        match *self {
            KernelKind::GaussianCutoff { cutoff } => cutoff,
            _ => 1.0,
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelKind::Triangular => write!(f, "triangular"),
            KernelKind::Epanechnikov => write!(f, "epanechnikov"),
            KernelKind::Quartic => write!(f, "quartic"),
            KernelKind::GaussianCutoff { cutoff } => write!(f, "gaussian_cutoff({cutoff})"),
        }
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        match t.as_str() {
            "triangular" => return Ok(KernelKind::Triangular),
            "epanechnikov" => return Ok(KernelKind::Epanechnikov),
            "quartic" | "biweight" => return Ok(KernelKind::Quartic),
            "gaussian_cutoff" => return Ok(KernelKind::GaussianCutoff { cutoff: 8.0 }),
            "rectangular" | "uniform" | "box" => {
                return Err(Error::NotLipschitz(format!(
                    "the {t} kernel is discontinuous and has no Lipschitz constant"
                )))
            }
            _ => {}
        }
        if let Some(rest) = t.strip_prefix("gaussian_cutoff") {
            let arg = rest
                .trim_start_matches(['(', ':', '='])
                .trim_end_matches(')');
            let cutoff: f64 = arg
                .parse()
                .map_err(|_| Error::invalid(format!("bad gaussian_cutoff argument in {s:?}")))?;
            if !(cutoff > 0.0 && cutoff.is_finite()) {
                return Err(Error::invalid("gaussian cutoff must be positive"));
            }
            return Ok(KernelKind::GaussianCutoff { cutoff });
        }
        Err(Error::invalid(format!("unknown kernel {s:?}")))
    }
}

/// Integrals of the kernel computed once at construction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KernelMoments {
    /// `int K`.
    pub mass: f64,
    /// `int K^2`.
    pub square: f64,
    /// `int |u| |K|`.
    pub abs_first: f64,
    /// `int u^2 |K|`.
    pub second: f64,
    /// `int |K|`.
    pub abs_mass: f64,
}

/// A compactly supported Lipschitz kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel<T> {
    kind: KernelKind,
    support: f64,
    lipschitz: f64,
    /// Normalizing constant (gaussian cutoff only, 1 otherwise).
    norm: f64,
    floor: f64,
    moments: KernelMoments,
    _scalar: PhantomData<T>,
}

const MOMENT_TOL: f64 = 1e-14;

/// Builds a kernel from its name, e.g. `epanechnikov` or `gaussian_cutoff(8)`.
pub fn make_kernel<T: Real>(name: &str) -> Result<Kernel<T>> {
    Kernel::new(name.parse()?)
}

impl<T: Real> Kernel<T> {
    pub fn new(kind: KernelKind) -> Result<Self> {
        let (norm, floor) = match kind {
            KernelKind::GaussianCutoff { cutoff: c } => {
                let floor = std_normal_pdf(c);
                (2.0 * std_normal_cdf(c) - 1.0 - 2.0 * c * floor, floor)
            }
            _ => (1.0, 0.0),
        };
        let lipschitz = match kind {
            KernelKind::Triangular => 1.0,
            KernelKind::Epanechnikov => 1.5,
            KernelKind::Quartic => 5.0 / (2.0 * 3f64.sqrt()),
            KernelKind::GaussianCutoff { cutoff } => {
                let u = cutoff.min(1.0);
                u * std_normal_pdf(u) / norm
            }
        };
        let mut k = Self {
            kind,
            support: kind.support(),
            lipschitz,
            norm,
            floor,
            moments: KernelMoments {
                mass: 0.0,
                square: 0.0,
                abs_first: 0.0,
                second: 0.0,
                abs_mass: 0.0,
            },
            _scalar: PhantomData,
        };
        let mass = k.integrate(|_, v| v)?;
        k.moments = KernelMoments {
            mass,
            square: k.integrate(|_, v| v * v)?,
            abs_first: k.integrate(|u, v| u.abs() * v.abs())?,
            second: k.integrate(|u, v| u * u * v.abs())?,
            abs_mass: k.integrate(|_, v| v.abs())?,
        };
        if (mass - 1.0).abs() > 1e-10 {
            return Err(Error::invalid(format!("kernel {kind} integrates to {mass}")));
        }
        Ok(k)
    }

    fn integrate(&self, g: impl Fn(f64, f64) -> f64) -> Result<f64> {
        let c = self.support;
        adaptive_integrate(|u| g(u, self.eval_f64(u)), -c, c, &[0.0], MOMENT_TOL, MOMENT_TOL)
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn name(&self) -> String {
        self.kind.to_string()
    }

    /// Half-width `c` of the support `[-c, c]`.
    pub fn support(&self) -> f64 {
        self.support
    }

    pub fn lipschitz_constant(&self) -> f64 {
        self.lipschitz
    }

    pub fn moments(&self) -> &KernelMoments {
        &self.moments
    }

    /// `int K^2`.
    pub fn square_integral(&self) -> f64 {
        self.moments.square
    }

    /// Points in `(-c, c)` where `K` is not differentiable.
    pub fn kinks(&self) -> Vec<f64> {
        match self.kind {
            KernelKind::Triangular => vec![-1.0, 0.0, 1.0],
            _ => vec![-self.support, self.support],
        }
    }

    /// `int |K|^tau`.
    pub fn abs_power_integral(&self, tau: f64) -> Result<f64> {
        if !(tau > 0.0) {
            return Err(Error::invalid("tau must be positive"));
        }
        self.integrate(|_, v| v.abs().powf(tau))
    }

    pub fn eval_f64(&self, u: f64) -> f64 {
        let a = u.abs();
        if !(a < self.support) {
            return 0.0;
        }
        match self.kind {
            KernelKind::Triangular => 1.0 - a,
            KernelKind::Epanechnikov => 0.75 * (1.0 - a * a),
            KernelKind::Quartic => {
                let t = 1.0 - a * a;
                0.9375 * t * t
            }
            KernelKind::GaussianCutoff { .. } => ((std_normal_pdf(a) - self.floor) / self.norm).max(0.0),
        }
    }

    pub fn evaluate(&self, u: T) -> T {
        let a = u.abs();
        if !(a < T::of(self.support)) {
            return T::zero();
        }
        let one = T::one();
        match self.kind {
            KernelKind::Triangular => one - a,
            KernelKind::Epanechnikov => T::of(0.75) * (one - a * a),
            KernelKind::Quartic => {
                let t = one - a * a;
                T::of(0.9375) * t * t
            }
            KernelKind::GaussianCutoff { .. } => {
                let phi = (-(a * a) * T::of(0.5)).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                ((phi - T::of(self.floor)) / T::of(self.norm)).max(T::zero())
            }
        }
    }
}

/// How the bandwidth depends on the region size `|Lambda|`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BandwidthRule {
    /// `b = |Lambda|^{-beta}`.
    PowerLaw { beta: f64 },
    /// `b = |Lambda|^{2/tau - 1}`.
    BerryEsseen { tau: f64 },
    Fixed { b: f64 },
}

fn parse_number(s: &str) -> Result<f64> {
    let s = s.trim();
    if let Some((n, d)) = s.split_once('/') {
        let n: f64 = n.trim().parse().map_err(|_| Error::invalid(format!("bad number {s:?}")))?;
        let d: f64 = d.trim().parse().map_err(|_| Error::invalid(format!("bad number {s:?}")))?;
        return Ok(n / d);
    }
    s.parse().map_err(|_| Error::invalid(format!("bad number {s:?}")))
}

impl FromStr for BandwidthRule {
    type Err = Error;

    /// `beta=<b>`, `berry-esseen tau=<t>` or `fixed=<b>`; fractions like
    /// `1/3` are accepted.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if let Some(v) = t.strip_prefix("beta=") {
            return Ok(BandwidthRule::PowerLaw { beta: parse_number(v)? });
        }
        if let Some(v) = t.strip_prefix("fixed=") {
            return Ok(BandwidthRule::Fixed { b: parse_number(v)? });
        }
        if let Some(rest) = t.strip_prefix("berry-esseen") {
            let rest = rest.trim_start_matches([' ', ':', ',']);
            let v = rest.strip_prefix("tau=").unwrap_or(if rest.is_empty() { "3" } else { rest });
            return Ok(BandwidthRule::BerryEsseen { tau: parse_number(v)? });
        }
        Err(Error::invalid(format!(
            "bandwidth rule must be beta=<b>, berry-esseen tau=<t> or fixed=<b>, got {s:?}"
        )))
    }
}

impl BandwidthRule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BandwidthRule::PowerLaw { beta } if !(beta > 0.0 && beta < 1.0) => {
                Err(Error::BandwidthViolation(format!("beta must lie in (0, 1), got {beta}")))
            }
            BandwidthRule::BerryEsseen { tau } if !(tau > 2.0 && tau <= 3.0) => {
                Err(Error::BandwidthViolation(format!("tau must lie in (2, 3], got {tau}")))
            }
            BandwidthRule::Fixed { b } if !(b > 0.0 && b < 1.0) => {
                Err(Error::BandwidthViolation(format!("fixed bandwidth must lie in (0, 1), got {b}")))
            }
            _ => Ok(()),
        }
    }

    /// The raw schedule value, without the range checks of [`bandwidth`].
    pub fn raw(&self, n: usize) -> f64 {
        let nf = n as f64;
        match *self {
            BandwidthRule::PowerLaw { beta } => nf.powf(-beta),
            BandwidthRule::BerryEsseen { tau } => nf.powf(2.0 / tau - 1.0),
            BandwidthRule::Fixed { b } => b,
        }
    }
}

/// `b` for a region of `n` sites; refuses `b >= 1` and `n b <= 1`.
pub fn bandwidth(rule: &BandwidthRule, n: usize) -> Result<f64> {
    rule.validate()?;
    if n < 2 {
        return Err(Error::invalid("bandwidth needs |Lambda| >= 2"));
    }
    let b = rule.raw(n);
    if !(b > 0.0 && b < 1.0) {
        return Err(Error::BandwidthViolation(format!("b = {b} outside (0, 1) at |Lambda| = {n}")));
    }
    if n as f64 * b <= 1.0 {
        return Err(Error::BandwidthViolation(format!(
            "|Lambda| b = {} <= 1 at |Lambda| = {n}",
            n as f64 * b
        )));
    }
    Ok(b)
}

/// Uniform evaluation grid `lo, lo + step, ..., hi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Grid {
    pub fn new(lo: f64, hi: f64, step: f64) -> Result<Self> {
        if !(hi > lo && step > 0.0 && step.is_finite()) {
            return Err(Error::invalid(format!("grid needs lo < hi and step > 0, got {lo}:{hi}:{step}")));
        }
        Ok(Self { lo, hi, step })
    }

    pub fn len(&self) -> usize {
        ((self.hi - self.lo) / self.step + 1e-9).floor() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.lo + k as f64 * self.step).collect()
    }
}

impl FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::invalid(format!("grid must be lo:hi:step, got {s:?}")));
        }
        Grid::new(parse_number(parts[0])?, parse_number(parts[1])?, parse_number(parts[2])?)
    }
}

/// Where an estimate came from.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EstimateProvenance {
    pub sites: usize,
    pub kernel: String,
    pub bandwidth: f64,
    pub master_seed: Option<u64>,
    pub stream_id: Option<u64>,
}

/// `f_n` on a set of points, optionally with `E f_n` and `f` alongside.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityEstimate<T> {
    pub points: Vec<T>,
    pub values: Vec<T>,
    pub expected: Option<Vec<T>>,
    pub truth: Option<Vec<T>>,
    pub provenance: EstimateProvenance,
}

impl<T: Real> DensityEstimate<T> {
    /// Fills the `E f_n` column.
    pub fn with_expected(mut self, density: &DensityModel<T>, kernel: &Kernel<T>) -> Result<Self> {
        let b = T::of(self.provenance.bandwidth);
        self.expected = Some(
            self.points
                .iter()
                .map(|&x| expected_fn(density, kernel, b, x))
                .collect::<Result<_>>()?,
        );
        Ok(self)
    }

    /// Fills the `f` column.
    pub fn with_truth(mut self, density: &DensityModel<T>) -> Self {
        self.truth = Some(self.points.iter().map(|&x| density.pdf(x)).collect());
        self
    }

    /// CSV with columns `x,fn` and, when present, `efn` and `f`.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        let mut header = String::from("x,fn");
        if self.expected.is_some() {
            header.push_str(",efn");
        }
        if self.truth.is_some() {
            header.push_str(",f");
        }
        writeln!(w, "{header}")?;
        for k in 0..self.points.len() {
            write!(w, "{},{}", self.points[k], self.values[k])?;
            if let Some(e) = &self.expected {
                write!(w, ",{}", e[k])?;
            }
            if let Some(f) = &self.truth {
                write!(w, ",{}", f[k])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn check_bandwidth<T: Real>(b: T) -> Result<()> {
    if !(b > T::zero()) || !b.is_finite() {
        return Err(Error::BandwidthViolation(format!("bandwidth must be positive, got {b}")));
    }
    Ok(())
}

/// Pruned `f_n` at each point from raw values: values are sorted once and
/// each point visits only `|x - X_i| < c b`, summing in sorted order.
pub fn estimate_values<T: Real>(values: &[T], kernel: &Kernel<T>, b: T, points: &[T]) -> Result<Vec<T>> {
    check_bandwidth(b)?;
    if values.is_empty() {
        return Err(Error::invalid("cannot estimate from an empty sample"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let reach = T::of(kernel.support()) * b;
    let scale = T::one() / (T::of(values.len() as f64) * b);
    Ok(points
        .par_iter()
        .map(|&x| {
            let lo = sorted.partition_point(|v| *v <= x - reach);
            let hi = sorted.partition_point(|v| *v < x + reach);
            sorted[lo..hi]
                .iter()
                .fold(T::zero(), |acc, &v| acc + kernel.evaluate((x - v) / b))
                * scale
        })
        .collect())
}

/// `f_n(x) = (|Lambda| b)^{-1} sum_i K((x - X_i) / b)` at each point.
pub fn estimate<T: Real>(
    sample: &FieldSample<T>,
    kernel: &Kernel<T>,
    b: T,
    points: &[T],
) -> Result<DensityEstimate<T>> {
    let values = estimate_values(&sample.values, kernel, b, points)?;
    Ok(DensityEstimate {
        points: points.to_vec(),
        values,
        expected: None,
        truth: None,
        provenance: EstimateProvenance {
            sites: sample.len(),
            kernel: kernel.name(),
            bandwidth: b.as_f64(),
            master_seed: Some(sample.provenance.master_seed),
            stream_id: Some(sample.provenance.stream_id),
        },
    })
}

/// Unpruned double loop in region order.
pub fn estimate_naive<T: Real>(values: &[T], kernel: &Kernel<T>, b: T, points: &[T]) -> Vec<T> {
    let scale = T::one() / (T::of(values.len() as f64) * b);
    points
        .iter()
        .map(|&x| values.iter().fold(T::zero(), |acc, &v| acc + kernel.evaluate((x - v) / b)) * scale)
        .collect()
}

/// `E f_n(x) = int K(t) f(x - b t) dt` by adaptive quadrature split at the
/// kinks of `K` and of `f`.
pub fn expected_fn<T: Real>(density: &DensityModel<T>, kernel: &Kernel<T>, b: T, x: T) -> Result<T> {
    check_bandwidth(b)?;
    let (bf, xf) = (b.as_f64(), x.as_f64());
    let c = kernel.support();
    let mut breaks = kernel.kinks();
    breaks.extend(
        density
            .kinks()
            .into_iter()
            .map(|k| (xf - k.as_f64()) / bf)
            .filter(|t| t.abs() < c),
    );
    let v = adaptive_integrate(
        |t| kernel.eval_f64(t) * density.pdf(T::of(xf - bf * t)).as_f64(),
        -c,
        c,
        &breaks,
        1e-12,
        1e-10,
    )?;
    Ok(T::of(v))
}

/// Numerical options for `Kbar`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KbarOptions {
    /// Gauss-Legendre nodes per panel for Gaussian tails.
    pub nodes: usize,
    /// Use an `n`-point Gauss-Hermite rule instead of panel quadrature.
    pub hermite: Option<usize>,
    /// Inner draws for non-Gaussian tails.
    pub inner_draws: u32,
}

impl Default for KbarOptions {
    fn default() -> Self {
        Self {
            nodes: 16,
            hermite: None,
            inner_draws: 512,
        }
    }
}

/// `Kbar_i(x) = E(K((x - X_i)/b) | window innovations)` for a linear field,
/// evaluated from the window part `S_m(i)`.
#[derive(Clone, Debug)]
pub struct SmoothedKernel {
    kernel: Kernel<f64>,
    b: f64,
    split: LinearSplit,
    tail_sd: f64,
    options: KbarOptions,
    legendre: GaussLegendre,
    hermite: Option<GaussHermite>,
}

impl SmoothedKernel {
    pub fn new(spec: &FieldSpec, m: u64, kernel: &Kernel<f64>, b: f64, options: KbarOptions) -> Result<Self> {
        check_bandwidth(b)?;
        let split = linear_split(spec, m)?;
        if !split.innovation.is_gaussian() && options.inner_draws == 0 {
            return Err(Error::invalid("nested Monte Carlo needs inner_draws >= 1"));
        }
        Ok(Self {
            kernel: kernel.clone(),
            b,
            tail_sd: split.tail_variance.sqrt(),
            split,
            options,
            legendre: GaussLegendre::new(options.nodes.max(2)),
            hermite: options.hermite.map(GaussHermite::new),
        })
    }

    pub fn split(&self) -> &LinearSplit {
        &self.split
    }

    pub fn tail_sd(&self) -> f64 {
        self.tail_sd
    }

    pub fn has_tail(&self) -> bool {
        !self.split.tail.is_empty() && self.split.tail_variance > 0.0
    }

    /// `Kbar_i(x)` given `S_m(i)`. `site`, `seed` and `stream` key the inner
    /// draws of the nested Monte Carlo path.
    pub fn value(&self, x: f64, s_m: f64, site: &IndexPoint, seed: u64, stream: u64) -> f64 {
        let z = x - s_m;
        if !self.has_tail() {
            return self.kernel.eval_f64(z / self.b);
        }
        match self.split.innovation {
            InnovationSpec::Normal { .. } => self.gaussian_smooth(z),
            _ => self.nested_mc(z, site, seed, stream),
        }
    }

    /// `E K((z - T)/b)` for `T ~ N(0, sigma_T^2)`.
    pub fn gaussian_smooth(&self, z: f64) -> f64 {
        let (b, sd) = (self.b, self.tail_sd);
        if let Some(gh) = &self.hermite {
            return gh.normal_expectation(|t| self.kernel.eval_f64((z - t) / b), sd);
        }
        let c = self.kernel.support();
        let lo = (z - c * b).max(-10.0 * sd);
        let hi = (z + c * b).min(10.0 * sd);
        if !(hi > lo) {
            return 0.0;
        }
        let mut cuts: Vec<f64> = vec![lo, hi];
        cuts.extend(
            self.kernel
                .kinks()
                .into_iter()
                .map(|u| z - b * u)
                .filter(|t| *t > lo && *t < hi),
        );
        cuts.sort_by(f64::total_cmp);
        let width = 0.5 * sd.min(b);
        let mut acc = 0.0;
        for w in cuts.windows(2) {
            let panels = ((w[1] - w[0]) / width).ceil().max(1.0) as usize;
            let h = (w[1] - w[0]) / panels as f64;
            for k in 0..panels {
                let a = w[0] + k as f64 * h;
                acc += self.legendre.integrate(
                    |t| self.kernel.eval_f64((z - t) / b) * std_normal_pdf(t / sd) / sd,
                    a,
                    a + h,
                );
            }
        }
        acc
    }

    fn nested_mc(&self, z: f64, site: &IndexPoint, seed: u64, stream: u64) -> f64 {
        let spec = &self.split.innovation;
        let n = self.options.inner_draws;
        let mut acc = 0.0;
        for k in 0..n {
            let t: f64 = self
                .split
                .tail
                .iter()
                .map(|(s, a)| {
                    let q = site.sub(s);
                    let mut rng = CounterRng::for_point(seed, stream, Role::Inner(k), q.coords());
                    a * spec.sample(&mut rng)
                })
                .sum();
            acc += self.kernel.eval_f64((z - t) / self.b);
        }
        acc / n as f64
    }
}

/// `Kbar_i(x)` for site `i` of a sample regenerated from `(seed, stream)` on
/// `region`.
#[allow(clippy::too_many_arguments)]
pub fn kbar(
    spec: &FieldSpec,
    m: u64,
    kernel: &Kernel<f64>,
    b: f64,
    x: f64,
    region: &Region,
    site: &IndexPoint,
    seed: u64,
    stream: u64,
) -> Result<f64> {
    let smoother = SmoothedKernel::new(spec, m, kernel, b, KbarOptions::default())?;
    let pos = region
        .position(site)
        .ok_or_else(|| Error::invalid(format!("site {site} not in region")))?;
    let (_, inner) = FieldSampler::new(spec, region)?.linear_parts(seed, stream, m)?;
    Ok(smoother.value(x, inner[pos], site, seed, stream))
}

/// `fbar_n(x) = (|Lambda| b)^{-1} sum_i Kbar_i(x)` for a linear-field sample.
/// With a zero tail this is `estimate` on the same values.
pub fn estimate_bar(
    sample: &FieldSample<f64>,
    m: u64,
    kernel: &Kernel<f64>,
    b: f64,
    points: &[f64],
    options: KbarOptions,
) -> Result<DensityEstimate<f64>> {
    let spec = &sample.provenance.spec;
    let smoother = SmoothedKernel::new(spec, m, kernel, b, options)?;
    if !smoother.has_tail() {
        let mut est = estimate(sample, kernel, b, points)?;
        est.provenance.kernel = format!("{}|bar(m={m})", kernel.name());
        return Ok(est);
    }
    let (seed, stream) = (sample.provenance.master_seed, sample.provenance.stream_id);
    let (_, inner) = FieldSampler::new(spec, &sample.region)?.linear_parts(seed, stream, m)?;
    let reach = kernel.support() * b + 10.0 * smoother.tail_sd();
    let gaussian = smoother.split().innovation.is_gaussian();
    let scale = 1.0 / (sample.len() as f64 * b);
    let values = points
        .par_iter()
        .map(|&x| {
            sample
                .region
                .points()
                .iter()
                .zip(&inner)
                .filter(|(_, s)| !gaussian || (x - **s).abs() < reach)
                .map(|(p, s)| smoother.value(x, *s, p, seed, stream))
                .sum::<f64>()
                * scale
        })
        .collect();
    Ok(DensityEstimate {
        points: points.to_vec(),
        values,
        expected: None,
        truth: None,
        provenance: EstimateProvenance {
            sites: sample.len(),
            kernel: format!("{}|bar(m={m})", kernel.name()),
            bandwidth: b,
            master_seed: Some(seed),
            stream_id: Some(stream),
        },
    })
}

/// L1 distance on `[-A, A]` and the mass of `f` outside it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct L1Distance {
    pub distance: f64,
    pub out_of_range_mass: f64,
    pub range: f64,
}

/// Trapezoid integral of `|f_n - f|` over the grid points in `[-A, A]`.
/// The grid must be uniform, cover `[-A, A]` and resolve the kernel
/// (`step <= b / 10`).
pub fn l1_distance<T: Real>(est: &DensityEstimate<T>, density: &DensityModel<T>, a: f64) -> Result<L1Distance> {
    let pts: Vec<f64> = est.points.iter().map(|p| p.as_f64()).collect();
    let vals: Vec<f64> = est.values.iter().map(|p| p.as_f64()).collect();
    l1_distance_values(&pts, &vals, est.provenance.bandwidth, density, a)
}

pub fn l1_distance_values<T: Real>(
    points: &[f64],
    values: &[f64],
    b: f64,
    density: &DensityModel<T>,
    a: f64,
) -> Result<L1Distance> {
    if points.len() < 2 || points.len() != values.len() {
        return Err(Error::invalid("L1 distance needs a grid of at least two points"));
    }
    let step = points[1] - points[0];
    if !(step > 0.0) || points.windows(2).any(|w| ((w[1] - w[0]) - step).abs() > 1e-9 * step.max(1.0)) {
        return Err(Error::invalid("L1 distance needs a uniform increasing grid"));
    }
    if step > b / 10.0 * (1.0 + 1e-12) {
        return Err(Error::UnresolvedGrid { step, limit: b / 10.0 });
    }
    let tol = 1e-9 * step;
    if points[0] > -a + tol || *points.last().unwrap() < a - tol {
        return Err(Error::invalid(format!("grid does not cover [-{a}, {a}]")));
    }
    let diffs: Vec<(f64, f64)> = points
        .iter()
        .zip(values)
        .filter(|(x, _)| x.abs() <= a + tol)
        .map(|(x, v)| (*x, (v - density.pdf(T::of(*x)).as_f64()).abs()))
        .collect();
    let distance = diffs.windows(2).map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0)).sum();
    Ok(L1Distance {
        distance,
        out_of_range_mass: density.mass_outside(T::of(a)).as_f64(),
        range: a,
    })
}

/// Numeric reference density for fields without a closed form: a KDE of
/// one large sample on a fine grid, tabulated.
pub fn baseline_density(
    spec: &FieldSpec,
    region: &Region,
    kernel: &Kernel<f64>,
    b: f64,
    grid: &Grid,
    seed: u64,
) -> Result<DensityModel<f64>> {
    let sample: FieldSample<f64> = FieldSampler::new(spec, region)?.sample(seed, u64::MAX)?;
    let points = grid.points();
    let values = estimate_values(&sample.values, kernel, b, &points)?;
    DensityModel::tabulated(grid.lo, grid.step, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{linear_sample, CoefficientMap};

    fn k(name: &str) -> Kernel<f64> {
        make_kernel(name).unwrap()
    }

    #[test]
    fn kernel_constants() {
        assert!((k("epanechnikov").square_integral() - 0.6).abs() < 1e-12);
        assert!((k("triangular").square_integral() - 2.0 / 3.0).abs() < 1e-12);
        assert!((k("quartic").square_integral() - 5.0 / 7.0).abs() < 1e-12);
        let g = k("gaussian_cutoff(8)");
        assert!((g.square_integral() - 1.0 / (2.0 * std::f64::consts::PI.sqrt())).abs() < 1e-8);
        assert!((k("triangular").moments().second - 1.0 / 6.0).abs() < 1e-12);
        assert!((k("epanechnikov").moments().second - 0.2).abs() < 1e-12);
        assert!((k("quartic").moments().second - 1.0 / 7.0).abs() < 1e-12);
        assert!((k("triangular").moments().abs_first - 1.0 / 3.0).abs() < 1e-12);
        // int |K|^3 of the triangular kernel: 2 int_0^1 (1-u)^3
        assert!((k("triangular").abs_power_integral(3.0).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(make_kernel::<f64>("rectangular"), Err(Error::NotLipschitz(_))));
        assert!(make_kernel::<f64>("cosine").is_err());
    }

    #[test]
    fn lipschitz_constants_hold_on_dense_grid() {
        for name in ["triangular", "epanechnikov", "quartic", "gaussian_cutoff(3)", "gaussian_cutoff(0.5)"] {
            let kern = k(name);
            let c = kern.support() * 1.2;
            let n = 20_000;
            let h = 2.0 * c / n as f64;
            let mut worst: f64 = 0.0;
            for j in 0..n {
                let u = -c + j as f64 * h;
                worst = worst.max((kern.eval_f64(u + h) - kern.eval_f64(u)).abs() / h);
            }
            assert!(worst <= kern.lipschitz_constant() * (1.0 + 1e-9), "{name}: {worst}");
            assert!(worst >= 0.99 * kern.lipschitz_constant(), "{name}: constant not tight");
        }
    }

    #[test]
    fn bandwidth_rules() {
        let r: BandwidthRule = "beta=1/3".parse().unwrap();
        assert!((bandwidth(&r, 729).unwrap() - 1.0 / 9.0).abs() < 1e-15);
        assert!((bandwidth(&r, 4096).unwrap() - 0.0625).abs() < 1e-15);
        let be: BandwidthRule = "berry-esseen tau=3".parse().unwrap();
        assert!((bandwidth(&be, 729).unwrap() - 1.0 / 9.0).abs() < 1e-15);
        let tiny: BandwidthRule = "fixed=0.001".parse().unwrap();
        assert!(matches!(bandwidth(&tiny, 128), Err(Error::BandwidthViolation(_))));
        assert!(bandwidth(&"fixed=1.5".parse().unwrap(), 100).is_err());
        assert!(bandwidth(&r, 1).is_err());
    }

    #[test]
    fn grid_parsing() {
        let g: Grid = "-4:4:0.5".parse().unwrap();
        assert_eq!(g.len(), 17);
        assert_eq!(g.points()[16], 4.0);
        assert!("1:2".parse::<Grid>().is_err());
    }

    #[test]
    fn single_site_estimates() {
        let region = Region::cube(1, 1).unwrap();
        let spec = FieldSpec::linear(CoefficientMap::stored(1, vec![]).unwrap(), InnovationSpec::standard_normal());
        let s: FieldSample<f64> = linear_sample(&spec, &region, 1, 1).unwrap();
        let e = estimate(&s, &k("triangular"), 1.0, &[0.0, 2.0]).unwrap();
        assert_eq!(e.values, vec![1.0, 0.0]);
    }

    #[test]
    fn fast_path_matches_naive() {
        let mut rng = CounterRng::new(77);
        for name in ["triangular", "epanechnikov", "quartic", "gaussian_cutoff(4)"] {
            let kern = k(name);
            let vals: Vec<f64> = (0..1000).map(|_| 4.0 * rng.next_unit() - 2.0).collect();
            let pts: Vec<f64> = (0..50).map(|j| -2.5 + 0.1 * j as f64).collect();
            let fast = estimate_values(&vals, &kern, 0.3, &pts).unwrap();
            let slow = estimate_naive(&vals, &kern, 0.3, &pts);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300), "{name}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn expected_fn_gaussian_oracle() {
        let f = DensityModel::normal(0.0, 1.0).unwrap();
        let g = k("gaussian_cutoff(8)");
        let v = expected_fn(&f, &g, 1.0, 0.0).unwrap();
        assert!((v - 1.0 / (4.0 * std::f64::consts::PI).sqrt()).abs() < 1e-6);
        for (b, x) in [(0.3, 0.7), (0.05, -1.2), (0.8, 2.5)] {
            let v = expected_fn(&f, &g, b, x).unwrap();
            let sd = (1.0f64 + b * b).sqrt();
            assert!((v - std_normal_pdf(x / sd) / sd).abs() < 1e-6);
        }
        let e = k("epanechnikov");
        for x in [0.3, 1.1, 2.9] {
            let l = expected_fn(&f, &e, 0.4, -x).unwrap();
            let r = expected_fn(&f, &e, 0.4, x).unwrap();
            assert!((l - r).abs() < 1e-9);
        }
    }

    #[test]
    fn bias_is_linear_in_b() {
        let f = DensityModel::normal(0.0, 1.0).unwrap();
        let e = k("epanechnikov");
        let xs: Vec<f64> = (0..41).map(|j| -4.0 + 0.2 * j as f64).collect();
        let sup_bias = |b: f64| {
            xs.iter()
                .map(|&x| (expected_fn(&f, &e, b, x).unwrap() - f.pdf(x)).abs())
                .fold(0.0, f64::max)
        };
        let ratios: Vec<f64> = [0.4, 0.2, 0.1, 0.05].iter().map(|&b| sup_bias(b) / b).collect();
        let c = ratios[0];
        for r in &ratios {
            assert!(*r <= c * 1.0001, "{ratios:?}");
        }
    }

    #[test]
    fn kbar_cases() {
        let kern = k("gaussian_cutoff(8)");
        let coeffs = CoefficientMap::geometric(1, 1.0, 0.5, 0).unwrap().with_tolerance(1e-6).unwrap();
        let spec = FieldSpec::linear(coeffs.clone(), InnovationSpec::standard_normal());
        let site = IndexPoint::origin(1);
        // full window: Kbar = K exactly
        let full = SmoothedKernel::new(&spec, coeffs.radius(), &kern, 0.5, KbarOptions::default()).unwrap();
        assert_eq!(full.value(0.3, 0.1, &site, 1, 1), kern.eval_f64(0.2 / 0.5));
        // Gaussian smoothing of the Gaussian kernel
        let sm = SmoothedKernel::new(&spec, 1, &kern, 0.5, KbarOptions::default()).unwrap();
        let sd = sm.tail_sd();
        for z in [-0.4, 0.0, 0.25, 1.0] {
            let got = sm.gaussian_smooth(z);
            let s = (0.25 + sd * sd).sqrt();
            let want = 0.5 * std_normal_pdf(z / s) / s;
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
        // doubling nodes changes nothing
        let fine = SmoothedKernel::new(&spec, 1, &kern, 0.5, KbarOptions { nodes: 32, ..Default::default() }).unwrap();
        let tri = k("triangular");
        let a = SmoothedKernel::new(&spec, 1, &tri, 0.3, KbarOptions::default()).unwrap();
        let a2 = SmoothedKernel::new(&spec, 1, &tri, 0.3, KbarOptions { nodes: 32, ..Default::default() }).unwrap();
        for z in [-0.5, 0.0, 0.37] {
            assert!((sm.gaussian_smooth(z) - fine.gaussian_smooth(z)).abs() < 1e-8);
            assert!((a.gaussian_smooth(z) - a2.gaussian_smooth(z)).abs() < 1e-8);
        }
        // bounded and smooth in x
        let mut prev: Option<f64> = None;
        for j in 0..200 {
            let z = -1.0 + 0.01 * j as f64;
            let v = a.gaussian_smooth(z);
            assert!((0.0..=1.0).contains(&v));
            if let Some(p) = prev {
                assert!((v - p).abs() < 0.02);
            }
            prev = Some(v);
        }
        // Gauss-Hermite agrees for the smooth kernel
        let gh = SmoothedKernel::new(&spec, 1, &kern, 0.5, KbarOptions { hermite: Some(64), ..Default::default() }).unwrap();
        assert!((gh.gaussian_smooth(0.2) - sm.gaussian_smooth(0.2)).abs() < 1e-6);
    }

    #[test]
    fn kbar_nested_mc_for_rademacher() {
        let kern = k("triangular");
        let coeffs = CoefficientMap::stored(1, vec![([0].into(), 1.0), ([1].into(), 0.5)]).unwrap();
        let spec = FieldSpec::linear(coeffs, InnovationSpec::Rademacher);
        let sm = SmoothedKernel::new(&spec, 0, &kern, 0.8, KbarOptions::default()).unwrap();
        // tail T = 0.5 eps with eps = +-1: exact mean of two kernel values
        let z = 0.1;
        let exact = 0.5 * (kern.eval_f64((z - 0.5) / 0.8) + kern.eval_f64((z + 0.5) / 0.8));
        let got = sm.value(z, 0.0, &IndexPoint::origin(1), 3, 4);
        assert!((got - exact).abs() < 4.0 * 0.5 / (512f64).sqrt());
    }

    #[test]
    fn estimate_bar_full_window_equals_estimate() {
        let coeffs = CoefficientMap::stored(2, vec![([0, 0].into(), 1.0), ([1, 0].into(), 0.5), ([0, 1].into(), -0.3)]).unwrap();
        let spec = FieldSpec::linear(coeffs, InnovationSpec::standard_normal());
        let region = Region::cube(2, 20).unwrap();
        let s: FieldSample<f64> = linear_sample(&spec, &region, 4, 4).unwrap();
        let kern = k("epanechnikov");
        let pts = [-1.0, 0.0, 0.5];
        let a = estimate(&s, &kern, 0.3, &pts).unwrap();
        let b = estimate_bar(&s, 1, &kern, 0.3, &pts, KbarOptions::default()).unwrap();
        assert_eq!(a.values, b.values);
        let c = estimate_bar(&s, 0, &kern, 0.3, &pts, KbarOptions::default()).unwrap();
        assert!(c.values.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn l1_examples() {
        let f = DensityModel::normal(0.0, 1.0).unwrap();
        let g = Grid::new(-8.0, 8.0, 0.01).unwrap();
        let pts = g.points();
        let exact: Vec<f64> = pts.iter().map(|&x| f.pdf(x)).collect();
        assert_eq!(l1_distance_values(&pts, &exact, 0.5, &f, 8.0).unwrap().distance, 0.0);
        let zero = vec![0.0; pts.len()];
        let d = l1_distance_values(&pts, &zero, 0.5, &f, 8.0).unwrap();
        assert!((d.distance - 1.0).abs() < 1e-4);
        assert!(d.out_of_range_mass < 1e-14);
        let half: Vec<f64> = exact.iter().map(|v| v / 2.0).collect();
        assert!((l1_distance_values(&pts, &half, 0.5, &f, 8.0).unwrap().distance - 0.5).abs() < 1e-4);
        assert!(matches!(
            l1_distance_values(&pts, &zero, 0.05, &f, 8.0),
            Err(Error::UnresolvedGrid { .. })
        ));
    }

    #[test]
    fn nonnegative_kernel_estimates_integrate_to_one() {
        let coeffs = CoefficientMap::geometric(1, 1.0, 0.5, 0).unwrap().with_tolerance(1e-6).unwrap();
        let spec = FieldSpec::linear(coeffs, InnovationSpec::standard_normal());
        let s: FieldSample<f64> = linear_sample(&spec, &Region::cube(1, 2000).unwrap(), 3, 3).unwrap();
        let g = Grid::new(-10.0, 10.0, 0.005).unwrap();
        let e = estimate(&s, &k("quartic"), 0.2, &g.points()).unwrap();
        assert!(e.values.iter().all(|v| *v >= 0.0));
        let mass: f64 = e.values.windows(2).map(|w| 0.5 * (w[0] + w[1]) * g.step).sum();
        assert!((mass - 1.0).abs() < 1e-4);
    }

    #[test]
    fn f32_estimates_track_f64() {
        let vals: Vec<f64> = (0..200).map(|j| ((j * 37) % 101) as f64 / 50.0 - 1.0).collect();
        let v32: Vec<f32> = vals.iter().map(|v| *v as f32).collect();
        let k64 = k("epanechnikov");
        let k32: Kernel<f32> = make_kernel("epanechnikov").unwrap();
        let a = estimate_values(&vals, &k64, 0.25, &[0.0, 0.5]).unwrap();
        let b = estimate_values(&v32, &k32, 0.25f32, &[0.0, 0.5]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - *y as f64).abs() < 1e-5);
        }
    }

    #[test]
    fn csv_columns() {
        let f = DensityModel::normal(0.0, 1.0).unwrap();
        let kern = k("epanechnikov");
        let e = DensityEstimate {
            points: vec![0.0, 1.0],
            values: vec![0.4, 0.2],
            expected: None,
            truth: None,
            provenance: EstimateProvenance {
                sites: 1,
                kernel: kern.name(),
                bandwidth: 0.5,
                master_seed: None,
                stream_id: None,
            },
        }
        .with_expected(&f, &kern)
        .unwrap()
        .with_truth(&f);
        let mut buf = Vec::new();
        e.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x,fn,efn,f\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
