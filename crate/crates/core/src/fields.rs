//! Bernoulli-shift field generators: linear, second-order Volterra and
//! Lipschitz-subordinated fields, with exact Gaussian densities where the
//! model admits them.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::innovations::{draw_patch, InnovationSpec};
use crate::lattice::{shell_count, sup_ball_points, BoxWindow, IndexPoint, Region};
use crate::scalar::Real;

/// Default cap on the number of innovations materialized for one sample.
pub const DEFAULT_WINDOW_BUDGET: usize = 1 << 26;

/// Partial sum of a lattice series with a certified bound on what was left out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeriesSum {
    pub value: f64,
    pub remainder_bound: f64,
}

impl SeriesSum {
    pub fn exact(value: f64) -> Self {
        Self {
            value,
            remainder_bound: 0.0,
        }
    }

    pub fn upper(&self) -> f64 {
        self.value + self.remainder_bound
    }
}

/// How the coefficients `a_s` are specified.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CoefficientLaw {
    /// Explicit coefficients, zero elsewhere.
    Stored(Vec<(IndexPoint, f64)>),
    /// `a_s = scale * rate^|s|`.
    Geometric { scale: f64, rate: f64 },
    /// `a_s = scale * (1 + |s|)^(-exponent)`.
    Polynomial { scale: f64, exponent: f64 },
}

/// Coefficients of a linear field together with the radius at which
/// simulation truncates them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientMap {
    dim: usize,
    law: CoefficientLaw,
    radius: u64,
}

const SERIES_REL_TOL: f64 = 1e-15;
const SERIES_MAX_TERMS: u64 = 2_000_000;

impl CoefficientMap {
    pub fn stored(dim: usize, entries: Vec<(IndexPoint, f64)>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("coefficient dimension must be >= 1"));
        }
        let mut seen = HashMap::new();
        for (s, a) in &entries {
            s.check_dim(dim)?;
            if !a.is_finite() {
                return Err(Error::invalid(format!("coefficient at {s} is not finite")));
            }
            if seen.insert(s.clone(), *a).is_some() {
                return Err(Error::invalid(format!("duplicate coefficient at {s}")));
            }
        }
        let mut entries = entries;
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let radius = entries.iter().map(|(s, _)| s.sup_norm()).max().unwrap_or(0);
        Ok(Self {
            dim,
            law: CoefficientLaw::Stored(entries),
            radius,
        })
    }

    /// Geometric law truncated at an explicit radius.
    pub fn geometric(dim: usize, scale: f64, rate: f64, radius: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("coefficient dimension must be >= 1"));
        }
        if !(0.0..1.0).contains(&rate) || !scale.is_finite() {
            return Err(Error::invalid(format!(
                "geometric law needs 0 <= rate < 1 and finite scale, got rate {rate}, scale {scale}"
            )));
        }
        Ok(Self {
            dim,
            law: CoefficientLaw::Geometric { scale, rate },
            radius,
        })
    }

    /// Polynomial law truncated at an explicit radius; square summability
    /// needs `2 * exponent > dim`.
    pub fn polynomial(dim: usize, scale: f64, exponent: f64, radius: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("coefficient dimension must be >= 1"));
        }
        if 2.0 * exponent <= dim as f64 || !scale.is_finite() {
            return Err(Error::invalid(format!(
                "polynomial law needs 2 * exponent > d for square summability, got exponent {exponent}, d {dim}"
            )));
        }
        Ok(Self {
            dim,
            law: CoefficientLaw::Polynomial { scale, exponent },
            radius,
        })
    }

    /// Picks the smallest truncation radius whose certified L2 tail is below
    /// `tol` times the field standard deviation.
    pub fn with_tolerance(mut self, tol: f64) -> Result<Self> {
        if matches!(self.law, CoefficientLaw::Stored(_)) {
            return Ok(self);
        }
        let total = self.power_sum_beyond(None, 0.0, 2.0)?.upper();
        let target = tol * tol * total;
        let mut r = 0u64;
        loop {
            if self.power_sum_beyond(Some(r), 0.0, 2.0)?.upper() <= target {
                break;
            }
            r += 1;
            if r > 100_000 {
                return Err(Error::invalid("truncation radius exceeds 100000 for requested tolerance"));
            }
        }
        self.radius = r;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn law(&self) -> &CoefficientLaw {
        &self.law
    }

    /// Truncation radius `R`: coefficients with `|s| > R` are not simulated.
    pub fn radius(&self) -> u64 {
        self.radius
    }

    /// Coefficient of the untruncated law.
    pub fn coefficient(&self, s: &IndexPoint) -> f64 {
        match &self.law {
            CoefficientLaw::Stored(e) => e
                .binary_search_by(|(p, _)| p.cmp(s))
                .map(|k| e[k].1)
                .unwrap_or(0.0),
            CoefficientLaw::Geometric { scale, rate } => {
                scale * rate.powi(s.sup_norm() as i32)
            }
            CoefficientLaw::Polynomial { scale, exponent } => {
                scale * (1.0 + s.sup_norm() as f64).powf(-exponent)
            }
        }
    }

    /// Nonzero coefficients with `|s| <= R`, in lexicographic order.
    pub fn support(&self) -> Vec<(IndexPoint, f64)> {
        match &self.law {
            CoefficientLaw::Stored(e) => e.iter().filter(|(_, a)| *a != 0.0).cloned().collect(),
            _ => sup_ball_points(self.dim, self.radius)
                .into_iter()
                .map(|s| {
                    let a = self.coefficient(&s);
                    (s, a)
                })
                .filter(|(_, a)| *a != 0.0)
                .collect(),
        }
    }

    /// The simulated field's coefficients as an explicit map.
    pub fn truncated(&self) -> CoefficientMap {
        CoefficientMap {
            dim: self.dim,
            radius: self.radius,
            law: CoefficientLaw::Stored(self.support()),
        }
    }

    pub fn scaled(&self, factor: f64) -> CoefficientMap {
        let law = match &self.law {
            CoefficientLaw::Stored(e) => {
                CoefficientLaw::Stored(e.iter().map(|(s, a)| (s.clone(), a * factor)).collect())
            }
            CoefficientLaw::Geometric { scale, rate } => CoefficientLaw::Geometric {
                scale: scale * factor,
                rate: *rate,
            },
            CoefficientLaw::Polynomial { scale, exponent } => CoefficientLaw::Polynomial {
                scale: scale * factor,
                exponent: *exponent,
            },
        };
        CoefficientMap {
            dim: self.dim,
            law,
            radius: self.radius,
        }
    }

    /// `sum_{|s| > m} |s|^w |a_s|^q` for the untruncated law (`m = None`
    /// includes the origin). Decay laws are summed shell by shell with a
    /// certified remainder.
    pub fn power_sum_beyond(&self, m: Option<u64>, w: f64, q: f64) -> Result<SeriesSum> {
        let first = m.map(|m| m + 1).unwrap_or(0);
        let weight = |k: u64| if w == 0.0 { 1.0 } else { (k as f64).powf(w) };
        match &self.law {
            CoefficientLaw::Stored(e) => Ok(SeriesSum::exact(
                e.iter()
                    .filter(|(s, _)| s.sup_norm() >= first)
                    .map(|(s, a)| weight(s.sup_norm()) * a.abs().powf(q))
                    .sum(),
            )),
            CoefficientLaw::Geometric { scale, rate } => {
                let c = scale.abs().powf(q);
                let rho = rate.powf(q);
                if c == 0.0 {
                    return Ok(SeriesSum::exact(0.0));
                }
                if rho == 0.0 {
                    // only the origin carries weight
                    let v = if first == 0 { c * weight(0) } else { 0.0 };
                    return Ok(SeriesSum::exact(v));
                }
                let d = self.dim;
                let term = |k: u64| shell_count(d, k) * weight(k) * c * rho.powf(k as f64);
                let ratio = |k: u64| {
                    let k1 = k as f64;
                    let wr = if k == 0 { f64::INFINITY } else { ((k1 + 1.0) / k1).powf(w) };
                    shell_count(d, k + 1) / shell_count(d, k) * wr * rho
                };
                let mut sum = 0.0;
                let mut k = first;
                loop {
                    sum += term(k);
                    let next = k + 1;
                    if next >= 1 {
                        let q_next = ratio(next.max(1));
                        if q_next < 1.0 {
                            let rem = term(next) / (1.0 - q_next);
                            if rem <= SERIES_REL_TOL * sum || rem < 1e-300 {
                                return Ok(SeriesSum {
                                    value: sum,
                                    remainder_bound: rem,
                                });
                            }
                        }
                    }
                    k = next;
                    if k - first > SERIES_MAX_TERMS {
                        return Err(Error::UncertifiableTail(
                            "geometric series did not settle".into(),
                        ));
                    }
                }
            }
            CoefficientLaw::Polynomial { scale, exponent } => {
                let c = scale.abs().powf(q);
                if c == 0.0 {
                    return Ok(SeriesSum::exact(0.0));
                }
                let d = self.dim as f64;
                // N_d(k) <= 2d 3^{d-1} k^{d-1} and (1+k)^{-g} <= k^{-g} for k >= 1
                let decay = exponent * q - (d - 1.0) - w;
                if decay <= 1.0 {
                    return Err(Error::UncertifiableTail(format!(
                        "polynomial tail diverges: exponent {exponent}, q {q}, weight {w}, d {d}"
                    )));
                }
                let cst = 2.0 * d * 3f64.powf(d - 1.0) * c;
                let term = |k: u64| {
                    shell_count(self.dim, k) * weight(k) * c * (1.0 + k as f64).powf(-exponent * q)
                };
                let bound = |k: u64| cst * (k as f64).powf(1.0 - decay) / (decay - 1.0);
                let mut sum = 0.0;
                let mut k = first;
                loop {
                    sum += term(k);
                    if k >= 1 {
                        let rem = bound(k);
                        if rem <= 1e-13 * sum || k - first >= SERIES_MAX_TERMS {
                            return Ok(SeriesSum {
                                value: sum,
                                remainder_bound: rem,
                            });
                        }
                    }
                    k += 1;
                }
            }
        }
    }

    /// Same sum restricted to the simulated coefficients `|s| <= R`.
    pub fn truncated_power_sum_beyond(&self, m: Option<u64>, w: f64, q: f64) -> Result<f64> {
        if let CoefficientLaw::Stored(_) = self.law {
            return Ok(self.power_sum_beyond(m, w, q)?.value);
        }
        if let Some(m) = m {
            if m >= self.radius {
                return Ok(0.0);
            }
        }
        let all = self.power_sum_beyond(m, w, q)?;
        let beyond = self.power_sum_beyond(Some(self.radius), w, q)?;
        Ok((all.value - beyond.value).max(0.0))
    }

    /// `sum_s a_s^2` of the law.
    pub fn square_sum(&self) -> Result<f64> {
        Ok(self.power_sum_beyond(None, 0.0, 2.0)?.value)
    }
}

/// Pair coefficients `a_{s1,s2}` of a second-order Volterra field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMap {
    dim: usize,
    pairs: Vec<(IndexPoint, IndexPoint, f64)>,
}

impl PairMap {
    pub fn new(dim: usize, pairs: Vec<(IndexPoint, IndexPoint, f64)>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("pair map dimension must be >= 1"));
        }
        for (s1, s2, a) in &pairs {
            s1.check_dim(dim)?;
            s2.check_dim(dim)?;
            if s1 == s2 && *a != 0.0 {
                return Err(Error::invalid(format!(
                    "Volterra diagonal must vanish, got a_({s1},{s2}) = {a}"
                )));
            }
        }
        Ok(Self { dim, pairs })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pairs(&self) -> &[(IndexPoint, IndexPoint, f64)] {
        &self.pairs
    }

    pub fn radius(&self) -> u64 {
        self.pairs
            .iter()
            .map(|(a, b, _)| a.sup_norm().max(b.sup_norm()))
            .max()
            .unwrap_or(0)
    }
}

/// Lipschitz transformations `H` used for subordinated fields.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "map", rename_all = "snake_case", deny_unknown_fields)]
pub enum LipschitzMap {
    Identity,
    Tanh,
    /// `x -> scale * |x|`.
    ScaledAbs { scale: f64 },
}

impl LipschitzMap {
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            LipschitzMap::Identity => x,
            LipschitzMap::Tanh => x.tanh(),
            LipschitzMap::ScaledAbs { scale } => scale * x.abs(),
        }
    }

    pub fn lipschitz_constant(&self) -> f64 {
        match *self {
            LipschitzMap::Identity | LipschitzMap::Tanh => 1.0,
            LipschitzMap::ScaledAbs { scale } => scale.abs(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Linear(CoefficientMap),
    Volterra(PairMap),
    Subordinated { inner: Box<FieldKind>, map: LipschitzMap },
}

impl FieldKind {
    fn dim(&self) -> usize {
        match self {
            FieldKind::Linear(c) => c.dim(),
            FieldKind::Volterra(p) => p.dim(),
            FieldKind::Subordinated { inner, .. } => inner.dim(),
        }
    }

    fn radius(&self) -> u64 {
        match self {
            FieldKind::Linear(c) => c.radius(),
            FieldKind::Volterra(p) => p.radius(),
            FieldKind::Subordinated { inner, .. } => inner.radius(),
        }
    }

    fn eval(&self, site: &IndexPoint, eps: &dyn Fn(&IndexPoint) -> f64) -> f64 {
        match self {
            FieldKind::Linear(c) => c
                .support()
                .iter()
                .map(|(s, a)| a * eps(&site.sub(s)))
                .sum(),
            FieldKind::Volterra(p) => p
                .pairs()
                .iter()
                .map(|(s1, s2, a)| a * eps(&site.sub(s1)) * eps(&site.sub(s2)))
                .sum(),
            FieldKind::Subordinated { inner, map } => map.apply(inner.eval(site, eps)),
        }
    }
}

/// A Bernoulli-shift model `X_i = g(eps_{i-s}, s in Z^d)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub innovation: InnovationSpec,
    pub kind: FieldKind,
}

impl FieldSpec {
    pub fn linear(coeffs: CoefficientMap, innovation: InnovationSpec) -> Self {
        Self {
            innovation,
            kind: FieldKind::Linear(coeffs),
        }
    }

    pub fn volterra(pairs: PairMap, innovation: InnovationSpec) -> Self {
        Self {
            innovation,
            kind: FieldKind::Volterra(pairs),
        }
    }

    pub fn subordinated(self, map: LipschitzMap) -> Self {
        Self {
            innovation: self.innovation,
            kind: FieldKind::Subordinated {
                inner: Box::new(self.kind),
                map,
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.kind.dim()
    }

    /// Radius of the innovation window each site depends on.
    pub fn dependence_radius(&self) -> u64 {
        self.kind.radius()
    }

    pub fn validate(&self) -> Result<()> {
        self.innovation.validate()
    }

    pub fn coefficients(&self) -> Option<&CoefficientMap> {
        match &self.kind {
            FieldKind::Linear(c) => Some(c),
            _ => None,
        }
    }

    pub fn is_gaussian_linear(&self) -> bool {
        matches!(self.kind, FieldKind::Linear(_)) && self.innovation.is_gaussian()
    }

    /// Value at `site` given an innovation lookup; the per-site formula every
    /// generator agrees with.
    pub fn eval_site(&self, site: &IndexPoint, eps: &dyn Fn(&IndexPoint) -> f64) -> f64 {
        self.kind.eval(site, eps)
    }
}

/// Identifies how a sample was generated.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Provenance {
    pub spec: FieldSpec,
    pub master_seed: u64,
    pub stream_id: u64,
    pub truncation_radius: u64,
}

/// Field values on a region, in the region's lexicographic order.
#[derive(Clone, Debug)]
pub struct FieldSample<T> {
    pub region: Region,
    pub values: Vec<T>,
    pub provenance: Provenance,
}

impl<T: Real> FieldSample<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Regenerates the sample from its provenance.
    pub fn regenerate(&self) -> Result<FieldSample<T>> {
        FieldSampler::new(&self.provenance.spec, &self.region)?
            .sample(self.provenance.master_seed, self.provenance.stream_id)
    }
}

#[derive(Clone, Debug)]
enum Plan {
    Linear(Vec<(isize, f64)>),
    Volterra(Vec<(isize, isize, f64)>),
}

/// Precomputed generator for one field spec on one region.
///
/// Each site value is a fixed-order sum over the spec's coefficients, so the
/// output does not depend on how sites are scheduled.
#[derive(Clone, Debug)]
pub struct FieldSampler {
    spec: FieldSpec,
    region: Region,
    window: BoxWindow,
    sites: Vec<usize>,
    plan: Plan,
    maps: Vec<LipschitzMap>,
}

impl FieldSampler {
    pub fn new(spec: &FieldSpec, region: &Region) -> Result<Self> {
        Self::with_budget(spec, region, DEFAULT_WINDOW_BUDGET)
    }

    pub fn with_budget(spec: &FieldSpec, region: &Region, budget: usize) -> Result<Self> {
        spec.validate()?;
        if region.dim() != spec.dim() {
            return Err(Error::DimensionMismatch {
                expected: spec.dim(),
                found: region.dim(),
            });
        }
        let bbox = region
            .bounding_box()
            .ok_or_else(|| Error::invalid("cannot sample on an empty region"))?;
        let window = bbox.inflate(spec.dependence_radius());
        let points = window.len();
        if points > budget {
            return Err(Error::WindowTooLarge { points, budget });
        }
        let sites = region
            .points()
            .iter()
            .map(|p| window.linear_index(p).expect("site inside window"))
            .collect();
        let mut maps = Vec::new();
        let mut kind = &spec.kind;
        while let FieldKind::Subordinated { inner, map } = kind {
            maps.push(*map);
            kind = inner;
        }
        maps.reverse();
        let plan = match kind {
            FieldKind::Linear(c) => Plan::Linear(
                c.support()
                    .into_iter()
                    .map(|(s, a)| (-window.linear_offset(&s), a))
                    .collect(),
            ),
            FieldKind::Volterra(p) => Plan::Volterra(
                p.pairs()
                    .iter()
                    .filter(|(_, _, a)| *a != 0.0)
                    .map(|(s1, s2, a)| (-window.linear_offset(s1), -window.linear_offset(s2), *a))
                    .collect(),
            ),
            FieldKind::Subordinated { .. } => unreachable!(),
        };
        Ok(Self {
            spec: spec.clone(),
            region: region.clone(),
            window,
            sites,
            plan,
            maps,
        })
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn window(&self) -> &BoxWindow {
        &self.window
    }

    pub fn spec(&self) -> &FieldSpec {
        &self.spec
    }

    fn innovations<T: Real>(&self, seed: u64, stream: u64) -> Result<Vec<T>> {
        let patch = draw_patch(&self.spec.innovation, &self.window, seed, stream)?;
        Ok(patch.values.into_iter().map(T::of).collect())
    }

    fn provenance(&self, seed: u64, stream: u64) -> Provenance {
        Provenance {
            spec: self.spec.clone(),
            master_seed: seed,
            stream_id: stream,
            truncation_radius: self.spec.dependence_radius(),
        }
    }

    pub fn sample<T: Real>(&self, seed: u64, stream: u64) -> Result<FieldSample<T>> {
        let eps = self.innovations::<T>(seed, stream)?;
        let mut values: Vec<T> = match &self.plan {
            Plan::Linear(terms) => self
                .sites
                .iter()
                .map(|&base| {
                    terms.iter().fold(T::zero(), |acc, &(off, a)| {
                        acc + T::of(a) * eps[(base as isize + off) as usize]
                    })
                })
                .collect(),
            Plan::Volterra(terms) => self
                .sites
                .iter()
                .map(|&base| {
                    terms.iter().fold(T::zero(), |acc, &(o1, o2, a)| {
                        acc + T::of(a)
                            * eps[(base as isize + o1) as usize]
                            * eps[(base as isize + o2) as usize]
                    })
                })
                .collect(),
        };
        for map in &self.maps {
            for v in values.iter_mut() {
                *v = T::of(map.apply(v.as_f64()));
            }
        }
        Ok(FieldSample {
            region: self.region.clone(),
            values,
            provenance: self.provenance(seed, stream),
        })
    }

    /// For linear specs: the field values and the window parts
    /// `S_m(i) = sum_{|s| <= m} a_s eps_{i-s}` from the same innovations.
    pub fn linear_parts(&self, seed: u64, stream: u64, m: u64) -> Result<(Vec<f64>, Vec<f64>)> {
        let coeffs = self
            .spec
            .coefficients()
            .ok_or_else(|| Error::WrongSpecKind("window parts need a linear field".into()))?;
        let eps = self.innovations::<f64>(seed, stream)?;
        let terms: Vec<(isize, f64, bool)> = coeffs
            .support()
            .into_iter()
            .map(|(s, a)| (-self.window.linear_offset(&s), a, s.sup_norm() <= m))
            .collect();
        let mut full = Vec::with_capacity(self.sites.len());
        let mut inner = Vec::with_capacity(self.sites.len());
        for &base in &self.sites {
            let (mut x, mut s) = (0.0, 0.0);
            for &(off, a, keep) in &terms {
                let v = a * eps[(base as isize + off) as usize];
                x += v;
                if keep {
                    s += v;
                }
            }
            full.push(x);
            inner.push(s);
        }
        Ok((full, inner))
    }
}

/// Samples a linear field, `X_i = sum_{|s| <= R} a_s eps_{i-s}`.
pub fn linear_sample<T: Real>(
    spec: &FieldSpec,
    region: &Region,
    seed: u64,
    stream: u64,
) -> Result<FieldSample<T>> {
    if !matches!(spec.kind, FieldKind::Linear(_)) {
        return Err(Error::WrongSpecKind("linear_sample needs a linear field".into()));
    }
    FieldSampler::new(spec, region)?.sample(seed, stream)
}

/// Samples a Volterra field by exact summation over the stored pairs.
pub fn volterra_sample<T: Real>(
    spec: &FieldSpec,
    region: &Region,
    seed: u64,
    stream: u64,
) -> Result<FieldSample<T>> {
    if !matches!(spec.kind, FieldKind::Volterra(_)) {
        return Err(Error::WrongSpecKind("volterra_sample needs a Volterra field".into()));
    }
    FieldSampler::new(spec, region)?.sample(seed, stream)
}

/// Applies `H` pointwise; the provenance records the subordination.
pub fn subordinate<T: Real>(sample: &FieldSample<T>, map: LipschitzMap) -> FieldSample<T> {
    let mut provenance = sample.provenance.clone();
    provenance.spec = provenance.spec.subordinated(map);
    FieldSample {
        region: sample.region.clone(),
        values: sample
            .values
            .iter()
            .map(|v| T::of(map.apply(v.as_f64())))
            .collect(),
        provenance,
    }
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Marginal density `f` of the field.
#[derive(Clone, Debug, PartialEq)]
pub enum DensityModel<T> {
    /// Closed-form normal density.
    Normal { mean: T, std_dev: T },
    /// Numeric reference on a uniform grid, linearly interpolated and zero
    /// outside `[lo, lo + step * (len - 1)]`.
    Tabulated { lo: T, step: T, values: Vec<T> },
}

impl<T: Real> DensityModel<T> {
    pub fn normal(mean: T, std_dev: T) -> Result<Self> {
        if !(std_dev > T::zero()) {
            return Err(Error::Degenerate("normal density needs positive variance".into()));
        }
        Ok(DensityModel::Normal { mean, std_dev })
    }

    /// Tabulated density renormalized to unit trapezoid mass.
    pub fn tabulated(lo: T, step: T, values: Vec<T>) -> Result<Self> {
        if values.len() < 2 || !(step > T::zero()) {
            return Err(Error::invalid("tabulated density needs >= 2 values and positive step"));
        }
        if values.iter().any(|v| *v < T::zero() || !v.is_finite()) {
            return Err(Error::invalid("tabulated density must be finite and nonnegative"));
        }
        let n = values.len();
        let mass = (values.iter().copied().sum::<T>() - (values[0] + values[n - 1]) * T::of(0.5)) * step;
        if !(mass > T::zero()) {
            return Err(Error::Degenerate("tabulated density has zero mass".into()));
        }
        let values = values.into_iter().map(|v| v / mass).collect();
        Ok(DensityModel::Tabulated { lo, step, values })
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, DensityModel::Normal { .. })
    }

    pub fn pdf(&self, x: T) -> T {
        match self {
            DensityModel::Normal { mean, std_dev } => {
                let z = (x - *mean) / *std_dev;
                T::of(std_normal_pdf(z.as_f64())) / *std_dev
            }
            DensityModel::Tabulated { lo, step, values } => {
                let t = (x - *lo) / *step;
                if t < T::zero() {
                    return T::zero();
                }
                let k = t.floor();
                let ki = k.to_usize().unwrap_or(usize::MAX);
                if ki + 1 >= values.len() {
                    return if ki + 1 == values.len() && t == k {
                        values[ki]
                    } else {
                        T::zero()
                    };
                }
                let frac = t - k;
                values[ki] * (T::one() - frac) + values[ki + 1] * frac
            }
        }
    }

    pub fn cdf(&self, x: T) -> T {
        match self {
            DensityModel::Normal { mean, std_dev } => {
                T::of(std_normal_cdf(((x - *mean) / *std_dev).as_f64()))
            }
            DensityModel::Tabulated { lo, step, values } => {
                let mut acc = T::zero();
                let mut left = *lo;
                for w in values.windows(2) {
                    let right = left + *step;
                    if x >= right {
                        acc = acc + (w[0] + w[1]) * T::of(0.5) * *step;
                    } else {
                        if x > left {
                            let fx = self.pdf(x);
                            acc = acc + (w[0] + fx) * T::of(0.5) * (x - left);
                        }
                        return acc;
                    }
                    left = right;
                }
                acc
            }
        }
    }

    /// Standard deviation of the model.
    pub fn std_dev(&self) -> T {
        match self {
            DensityModel::Normal { std_dev, .. } => *std_dev,
            DensityModel::Tabulated { lo, step, values } => {
                let xs = (0..values.len()).map(|k| *lo + *step * T::of(k as f64));
                let mut m0 = T::zero();
                let mut m1 = T::zero();
                let mut m2 = T::zero();
                for (x, f) in xs.zip(values.iter()) {
                    m0 = m0 + *f;
                    m1 = m1 + *f * x;
                    m2 = m2 + *f * x * x;
                }
                let mean = m1 / m0;
                (m2 / m0 - mean * mean).max(T::zero()).sqrt()
            }
        }
    }

    pub fn mean(&self) -> T {
        match self {
            DensityModel::Normal { mean, .. } => *mean,
            DensityModel::Tabulated { lo, step, values } => {
                let mut m0 = T::zero();
                let mut m1 = T::zero();
                for (k, f) in values.iter().enumerate() {
                    m0 = m0 + *f;
                    m1 = m1 + *f * (*lo + *step * T::of(k as f64));
                }
                m1 / m0
            }
        }
    }

    /// Probability mass outside `[-a, a]`.
    pub fn mass_outside(&self, a: T) -> T {
        (T::one() - (self.cdf(a) - self.cdf(-a))).max(T::zero())
    }

    /// A Lipschitz constant of the density (`max |f'|`).
    pub fn lipschitz_bound(&self) -> T {
        match self {
            DensityModel::Normal { std_dev, .. } => {
                // max |phi'| = phi(1) at z = 1
                T::of(std_normal_pdf(1.0)) / (*std_dev * *std_dev)
            }
            DensityModel::Tabulated { step, values, .. } => values
                .windows(2)
                .map(|w| ((w[1] - w[0]) / *step).abs())
                .fold(T::zero(), T::max),
        }
    }

    /// `max f`.
    pub fn sup(&self) -> T {
        match self {
            DensityModel::Normal { std_dev, .. } => T::of(std_normal_pdf(0.0)) / *std_dev,
            DensityModel::Tabulated { values, .. } => values.iter().copied().fold(T::zero(), T::max),
        }
    }

    /// Breakpoints where the density is not smooth.
    pub fn kinks(&self) -> Vec<T> {
        match self {
            DensityModel::Normal { .. } => Vec::new(),
            DensityModel::Tabulated { lo, step, values } => (0..values.len())
                .map(|k| *lo + *step * T::of(k as f64))
                .collect(),
        }
    }
}

fn gaussian_linear_parts(spec: &FieldSpec) -> Result<(&CoefficientMap, f64)> {
    let coeffs = match &spec.kind {
        FieldKind::Linear(c) => c,
        _ => return Err(Error::WrongSpecKind("exact densities need a linear field".into())),
    };
    let sigma = match spec.innovation {
        InnovationSpec::Normal { std_dev } => std_dev,
        _ => {
            return Err(Error::WrongSpecKind(
                "exact densities need Gaussian innovations".into(),
            ))
        }
    };
    Ok((coeffs, sigma))
}

/// Exact `N(0, sigma^2 sum a_s^2)` marginal of a Gaussian linear field.
pub fn marginal_density_linear_gaussian<T: Real>(spec: &FieldSpec) -> Result<DensityModel<T>> {
    let (coeffs, sigma) = gaussian_linear_parts(spec)?;
    let var = sigma * sigma * coeffs.square_sum()?;
    if var <= 0.0 {
        return Err(Error::Degenerate("field has zero variance".into()));
    }
    DensityModel::normal(T::zero(), T::of(var.sqrt()))
}

/// Joint law of `(X_0, X_i)` for a Gaussian linear field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BivariateNormal {
    pub variance: f64,
    pub covariance: f64,
}

impl BivariateNormal {
    pub fn correlation(&self) -> f64 {
        self.covariance / self.variance
    }

    pub fn pdf(&self, x: f64, y: f64) -> f64 {
        let rho = self.correlation();
        let det = self.variance * self.variance * (1.0 - rho * rho);
        let q = (self.variance * (x * x + y * y) - 2.0 * self.covariance * x * y) / det;
        (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
    }

    pub fn marginal_pdf(&self, x: f64) -> f64 {
        let sd = self.variance.sqrt();
        std_normal_pdf(x / sd) / sd
    }

    /// `sup_{x,y} |f_{0,i}(x, y) - f(x) f(y)|`, maximized on a 401x401 grid
    /// over `[-6 sd, 6 sd]^2` and refined around the best node.
    pub fn sup_product_deviation(&self) -> f64 {
        let sd = self.variance.sqrt();
        let dev = |x: f64, y: f64| (self.pdf(x, y) - self.marginal_pdf(x) * self.marginal_pdf(y)).abs();
        let n = 400;
        let h = 12.0 * sd / n as f64;
        let mut best = (0.0, 0.0, dev(0.0, 0.0));
        for a in 0..=n {
            for b in 0..=n {
                let x = -6.0 * sd + a as f64 * h;
                let y = -6.0 * sd + b as f64 * h;
                let v = dev(x, y);
                if v > best.2 {
                    best = (x, y, v);
                }
            }
        }
        let (mut cx, mut cy, mut v) = best;
        let mut step = h;
        for _ in 0..40 {
            let mut moved = false;
            for (dx, dy) in [(step, 0.0), (-step, 0.0), (0.0, step), (0.0, -step)] {
                let w = dev(cx + dx, cy + dy);
                if w > v {
                    cx += dx;
                    cy += dy;
                    v = w;
                    moved = true;
                }
            }
            if !moved {
                step *= 0.5;
            }
        }
        v
    }
}

/// Autocovariance `sigma^2 sum_s a_s a_{s+i}` of the simulated linear field.
pub fn linear_autocovariance(coeffs: &CoefficientMap, innovation_variance: f64, lag: &IndexPoint) -> f64 {
    let support = coeffs.support();
    let map: HashMap<&IndexPoint, f64> = support.iter().map(|(s, a)| (s, *a)).collect();
    innovation_variance
        * support
            .iter()
            .map(|(s, a)| a * map.get(&s.add(lag)).copied().unwrap_or(0.0))
            .sum::<f64>()
}

/// Exact bivariate normal law of `(X_0, X_i)`, `i != 0`.
pub fn pair_density_linear_gaussian(spec: &FieldSpec, lag: &IndexPoint) -> Result<BivariateNormal> {
    let (coeffs, sigma) = gaussian_linear_parts(spec)?;
    lag.check_dim(coeffs.dim())?;
    if lag.is_origin() {
        return Err(Error::invalid("pair density needs a nonzero lag"));
    }
    let variance = sigma * sigma * coeffs.square_sum()?;
    if variance <= 0.0 {
        return Err(Error::Degenerate("field has zero variance".into()));
    }
    let covariance = linear_autocovariance(coeffs, sigma * sigma, lag);
    let out = BivariateNormal {
        variance,
        covariance,
    };
    if 1.0 - out.correlation().abs() < 1e-9 {
        return Err(Error::Degenerate(format!(
            "(X_0, X_{lag}) is perfectly correlated; no joint density"
        )));
    }
    Ok(out)
}

/// Decomposition `X_0 = S_m + T_m` with `S_m` measurable with respect to
/// the window `|s| <= m` and `T_m` independent of it.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSplit {
    pub window_radius: u64,
    pub inner: Vec<(IndexPoint, f64)>,
    pub tail: Vec<(IndexPoint, f64)>,
    pub tail_variance: f64,
    pub innovation: InnovationSpec,
}

/// Splits a linear field at window radius `m`. The tail variance is that of
/// the simulated (radius-`R`) field, via the closed-form law tail for decay
/// laws.
pub fn linear_split(spec: &FieldSpec, m: u64) -> Result<LinearSplit> {
    let coeffs = spec
        .coefficients()
        .ok_or_else(|| Error::WrongSpecKind("linear_split needs a linear field".into()))?;
    let (inner, tail): (Vec<_>, Vec<_>) = coeffs
        .support()
        .into_iter()
        .partition(|(s, _)| s.sup_norm() <= m);
    let tail_variance = if tail.is_empty() {
        0.0
    } else {
        spec.innovation.variance() * coeffs.truncated_power_sum_beyond(Some(m), 0.0, 2.0)?
    };
    Ok(LinearSplit {
        window_radius: m,
        inner,
        tail,
        tail_variance,
        innovation: spec.innovation,
    })
}
