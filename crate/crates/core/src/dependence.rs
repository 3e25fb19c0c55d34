//! Physical dependence measures `delta_{i,p} = ||X_i - X_i*||_p`, their
//! weighted tail sums, the truncation schedule `m_n` and the Berry-Esseen
//! exponent.

use std::collections::BTreeMap;

use num_traits::Num;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::{linear_split, CoefficientMap, FieldKind, FieldSpec, PairMap, SeriesSum};
use crate::innovations::{couple_at_origin, draw_patch, InnovationSpec};
use crate::lattice::{sup_ball_points, BoxWindow, IndexPoint};
use crate::rng::{replicate_stream, CounterRng, Role};

/// `|a_i| ||eps_0 - eps_0'||_p`.
pub fn delta_linear(
    coeffs: &CoefficientMap,
    innovation: &InnovationSpec,
    i: &IndexPoint,
    p: f64,
) -> Result<f64> {
    i.check_dim(coeffs.dim())?;
    let a = coeffs.coefficient(i);
    let dn = innovation.diff_norm(p)?;
    Ok(if a == 0.0 { 0.0 } else { a.abs() * dn })
}

/// Ingredients of the Rosenthal-type bound on `delta_{i,p}` for a Volterra
/// field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VolterraBound {
    pub a: f64,
    pub b: f64,
    pub bound: f64,
}

/// `A_i`, `B_i` and `C_p A_i^{1/2} ||eps||_2 ||eps||_p + C_p B_i^{1/p} ||eps||_p^2`.
pub fn delta_volterra_bound(
    pairs: &PairMap,
    innovation: &InnovationSpec,
    i: &IndexPoint,
    p: f64,
    c_p: f64,
) -> Result<VolterraBound> {
    if p < 2.0 {
        return Err(Error::invalid(format!("Volterra bound needs p >= 2, got {p}")));
    }
    i.check_dim(pairs.dim())?;
    let (mut a_sum, mut b_sum) = (0.0, 0.0);
    for (s1, s2, a) in pairs.pairs() {
        // eps_0 enters X_i through eps_{i - s} with s = i
        for s in [s1, s2] {
            if s == i {
                a_sum += a * a;
                b_sum += a.abs().powf(p);
            }
        }
    }
    let n2 = innovation.p_norm(2.0)?;
    let np = innovation.p_norm(p)?;
    let bound = c_p * a_sum.sqrt() * n2 * np + c_p * b_sum.powf(1.0 / p) * np * np;
    Ok(VolterraBound {
        a: a_sum,
        b: b_sum,
        bound,
    })
}

/// Monte Carlo estimate of `delta_{i,p}` with its delta-method standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub replicates: usize,
}

/// Direct simulation of `||X_i - X_i*||_p`: each replicate draws one patch,
/// couples it at the origin and evaluates both fields at `i`.
pub fn delta_mc(
    spec: &FieldSpec,
    i: &IndexPoint,
    p: f64,
    replicates: usize,
    seed: u64,
) -> Result<McEstimate> {
    if replicates < 100 {
        return Err(Error::invalid("delta_mc needs at least 100 replicates"));
    }
    if p < 1.0 {
        return Err(Error::invalid(format!("p must be >= 1, got {p}")));
    }
    spec.validate()?;
    i.check_dim(spec.dim())?;
    let r = spec.dependence_radius();
    if i.sup_norm() > r {
        return Ok(McEstimate {
            estimate: 0.0,
            std_error: 0.0,
            replicates,
        });
    }
    let window = BoxWindow::new(i.coords().to_vec(), i.coords().to_vec())?.inflate(r);
    let site_stream = crate::rng::mix64(i.coords().iter().fold(0x5eed, |h, c| crate::rng::mix64(h ^ *c as u64)));
    let draws: Vec<f64> = (0..replicates as u64)
        .into_par_iter()
        .map(|rep| -> Result<f64> {
            let patch = draw_patch(&spec.innovation, &window, seed, replicate_stream(site_stream, rep))?;
            let coupled = couple_at_origin(&patch, &spec.innovation)?;
            let x = spec.eval_site(i, &|q| patch.get(q).expect("inside window"));
            let xs = spec.eval_site(i, &|q| coupled.get(q).expect("inside window"));
            Ok((x - xs).abs().powf(p))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let estimate = mean.powf(1.0 / p);
    let std_error = if mean > 0.0 {
        mean.powf(1.0 / p - 1.0) / p * (var / n).sqrt()
    } else {
        0.0
    };
    Ok(McEstimate {
        estimate,
        std_error,
        replicates,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileMode {
    ExactLinear,
    VolterraBound,
    MonteCarlo,
}

#[derive(Clone, Debug, PartialEq)]
enum DeltaSource {
    /// `delta_i = scale * |a_i|`.
    Law { coeffs: CoefficientMap, scale: f64 },
    /// Finitely many bounded values.
    Finite(BTreeMap<IndexPoint, f64>),
    Estimated(BTreeMap<IndexPoint, McEstimate>),
}

/// The map `i -> delta_{i,p}` for one `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct DependenceProfile {
    dim: usize,
    p: f64,
    mode: ProfileMode,
    source: DeltaSource,
}

impl DependenceProfile {
    /// Exact profile of a linear field, or a Lipschitz bound on it for a
    /// subordinated linear field; Volterra fields get the Rosenthal bound
    /// with constant `c_p`.
    pub fn for_spec(spec: &FieldSpec, p: f64, c_p: f64) -> Result<Self> {
        let mut lip = 1.0;
        let mut kind = &spec.kind;
        while let FieldKind::Subordinated { inner, map } = kind {
            lip *= map.lipschitz_constant();
            kind = inner;
        }
        let subordinated = !matches!(spec.kind, FieldKind::Linear(_) | FieldKind::Volterra(_));
        match kind {
            FieldKind::Linear(c) => {
                let dn = spec.innovation.diff_norm(p)?;
                Ok(Self {
                    dim: c.dim(),
                    p,
                    mode: if subordinated {
                        ProfileMode::VolterraBound
                    } else {
                        ProfileMode::ExactLinear
                    },
                    source: DeltaSource::Law {
                        coeffs: c.clone(),
                        scale: dn * lip,
                    },
                })
            }
            FieldKind::Volterra(pairs) => {
                let mut map = BTreeMap::new();
                for i in sup_ball_points(pairs.dim(), pairs.radius()) {
                    let v = delta_volterra_bound(pairs, &spec.innovation, &i, p, c_p)?.bound * lip;
                    if v > 0.0 {
                        map.insert(i, v);
                    }
                }
                Ok(Self {
                    dim: pairs.dim(),
                    p,
                    mode: ProfileMode::VolterraBound,
                    source: DeltaSource::Finite(map),
                })
            }
            FieldKind::Subordinated { .. } => unreachable!(),
        }
    }

    /// A profile given directly by a law, `delta_i = |law(i)|`.
    pub fn from_law(law: CoefficientMap, p: f64) -> Self {
        Self {
            dim: law.dim(),
            p,
            mode: ProfileMode::ExactLinear,
            source: DeltaSource::Law {
                coeffs: law,
                scale: 1.0,
            },
        }
    }

    /// Monte Carlo profile on `|i| <= radius`. Its tails are not certified.
    pub fn monte_carlo(spec: &FieldSpec, p: f64, radius: u64, replicates: usize, seed: u64) -> Result<Self> {
        let mut map = BTreeMap::new();
        for i in sup_ball_points(spec.dim(), radius) {
            map.insert(i.clone(), delta_mc(spec, &i, p, replicates, seed)?);
        }
        Ok(Self {
            dim: spec.dim(),
            p,
            mode: ProfileMode::MonteCarlo,
            source: DeltaSource::Estimated(map),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn mode(&self) -> ProfileMode {
        self.mode
    }

    pub fn delta(&self, i: &IndexPoint) -> Result<f64> {
        i.check_dim(self.dim)?;
        Ok(match &self.source {
            DeltaSource::Law { coeffs, scale } => scale * coeffs.coefficient(i).abs(),
            DeltaSource::Finite(m) => m.get(i).copied().unwrap_or(0.0),
            DeltaSource::Estimated(m) => m.get(i).map(|e| e.estimate).unwrap_or(0.0),
        })
    }

    /// Standard error of `delta(i)`; zero for exact and bounded profiles.
    pub fn std_error(&self, i: &IndexPoint) -> f64 {
        match &self.source {
            DeltaSource::Estimated(m) => m.get(i).map(|e| e.std_error).unwrap_or(0.0),
            _ => 0.0,
        }
    }

    /// `sum_{|i| > m} |i|^w delta_i` (all of `Z^d` for `m = None`).
    pub fn tail_sum(&self, m: Option<u64>, w: f64) -> Result<SeriesSum> {
        if w < 0.0 {
            return Err(Error::invalid(format!("weight exponent must be >= 0, got {w}")));
        }
        match &self.source {
            DeltaSource::Law { coeffs, scale } => {
                let s = coeffs.power_sum_beyond(m, w, 1.0)?;
                Ok(SeriesSum {
                    value: scale * s.value,
                    remainder_bound: scale * s.remainder_bound,
                })
            }
            DeltaSource::Finite(map) => {
                let first = m.map(|m| m + 1).unwrap_or(0);
                Ok(SeriesSum::exact(
                    map.iter()
                        .filter(|(i, _)| i.sup_norm() >= first)
                        .map(|(i, v)| {
                            let k = i.sup_norm() as f64;
                            (if w == 0.0 { 1.0 } else { k.powf(w) }) * v
                        })
                        .sum(),
                ))
            }
            DeltaSource::Estimated(_) => Err(Error::UncertifiableTail(
                "Monte Carlo profiles carry no certified decay".into(),
            )),
        }
    }

    /// `sum_{|i| > m} delta_i^2`.
    pub fn tail_square_sum(&self, m: u64) -> Result<f64> {
        match &self.source {
            DeltaSource::Law { coeffs, scale } => {
                Ok(scale * scale * coeffs.power_sum_beyond(Some(m), 0.0, 2.0)?.value)
            }
            DeltaSource::Finite(map) => Ok(map
                .iter()
                .filter(|(i, _)| i.sup_norm() > m)
                .map(|(_, v)| v * v)
                .sum()),
            DeltaSource::Estimated(_) => Err(Error::UncertifiableTail(
                "Monte Carlo profiles carry no certified decay".into(),
            )),
        }
    }
}

/// `r(m) = sum_{|i| > m} |i|^w delta_i`.
pub fn tail_sum(profile: &DependenceProfile, m: u64, w: f64) -> Result<f64> {
    Ok(profile.tail_sum(Some(m), w)?.value)
}

/// Output of [`mn_schedule`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TruncationSchedule {
    pub d: usize,
    pub bandwidth: f64,
    pub v_n: u64,
    pub m_n: u64,
    pub big_m: u64,
    /// `r(v_n)`.
    pub tail_at_v: f64,
    /// `r(m_n)`.
    pub tail_at_m: f64,
    /// `r(m_n) / (m_n^d b)^{3/2}`.
    pub tail_term: f64,
}

impl TruncationSchedule {
    pub fn mdb(&self) -> f64 {
        (self.m_n as f64).powi(self.d as i32) * self.bandwidth
    }
}

/// Largest integer `k >= 0` with `k^e <= x`, robust to rounding in `powf`.
fn floor_root(x: f64, e: f64) -> u64 {
    if !(x > 0.0) {
        return 0;
    }
    let slack = 1.0 + 1e-12;
    let mut k = x.powf(1.0 / e).floor().max(0.0) as u64;
    while ((k + 1) as f64).powf(e) <= x * slack {
        k += 1;
    }
    while k > 0 && (k as f64).powf(e) > x * slack {
        k -= 1;
    }
    k
}

/// `v_n = [b^{-1/(2d)}]`, `m_n = max{v_n, [(b^{-3} r(v_n))^{1/(3d)}] + 1}`.
pub fn mn_schedule(profile: &DependenceProfile, b: f64) -> Result<TruncationSchedule> {
    mn_schedule_weighted(profile, b, 2.5 * profile.dim() as f64)
}

/// [`mn_schedule`] with the tail weight `|i|^w` in place of `|i|^{5d/2}`.
pub fn mn_schedule_weighted(profile: &DependenceProfile, b: f64, w: f64) -> Result<TruncationSchedule> {
    if !(b > 0.0 && b < 1.0) {
        return Err(Error::BandwidthViolation(format!("schedule needs 0 < b < 1, got {b}")));
    }
    let d = profile.dim();
    let v_n = floor_root(1.0 / b, 2.0 * d as f64).max(1);
    let tail_at_v = profile.tail_sum(Some(v_n), w)?.value;
    let arm = floor_root(tail_at_v / (b * b * b), 3.0 * d as f64) + 1;
    let m_n = v_n.max(arm);
    let tail_at_m = profile.tail_sum(Some(m_n), w)?.value;
    let mdb = (m_n as f64).powi(d as i32) * b;
    Ok(TruncationSchedule {
        d,
        bandwidth: b,
        v_n,
        m_n,
        big_m: 2 * m_n + 1,
        tail_at_v,
        tail_at_m,
        tail_term: tail_at_m / mdb.powf(1.5),
    })
}

/// `v(m) = ||X_0 - E(X_0 | H_m)||_2^2`, with `H_m` generated by the
/// innovations in the window `|s| <= m`. Closed form for linear and Volterra
/// fields; nested Monte Carlo for subordinated ones.
pub fn stability_v(spec: &FieldSpec, m: u64) -> Result<f64> {
    match &spec.kind {
        FieldKind::Linear(_) => Ok(linear_split(spec, m)?.tail_variance),
        FieldKind::Volterra(pairs) => {
            // pairs with an index outside the window have zero conditional
            // mean; distinct unordered pairs are uncorrelated
            let s2 = spec.innovation.variance();
            let mut merged: BTreeMap<(IndexPoint, IndexPoint), f64> = BTreeMap::new();
            for (a, b, c) in pairs.pairs() {
                if a.sup_norm() <= m && b.sup_norm() <= m {
                    continue;
                }
                let key = if a <= b { (a.clone(), b.clone()) } else { (b.clone(), a.clone()) };
                *merged.entry(key).or_insert(0.0) += c;
            }
            Ok(s2 * s2 * merged.values().map(|c| c * c).sum::<f64>())
        }
        FieldKind::Subordinated { .. } => stability_v_mc(spec, m, 2000, 256, 0x57ab),
    }
}

/// Nested Monte Carlo estimate of `v(m)`: outer draws of the window
/// innovations, inner redraws of everything outside it.
pub fn stability_v_mc(spec: &FieldSpec, m: u64, outer: usize, inner: usize, seed: u64) -> Result<f64> {
    let r = spec.dependence_radius();
    let d = spec.dim();
    let origin = IndexPoint::origin(d);
    let window = BoxWindow::centered(d, r);
    let vals: Vec<f64> = (0..outer as u64)
        .into_par_iter()
        .map(|o| -> Result<f64> {
            let base = draw_patch(&spec.innovation, &window, seed, replicate_stream(1, o))?;
            let x0 = spec.eval_site(&origin, &|q| base.get(q).expect("inside window"));
            let mut acc = 0.0;
            for k in 0..inner as u32 {
                let redraw = |q: &IndexPoint| {
                    if q.sup_norm() <= m {
                        base.get(q).expect("inside window")
                    } else {
                        let mut rng = CounterRng::for_point(seed, replicate_stream(2, o), Role::Inner(k), q.coords());
                        spec.innovation.sample(&mut rng)
                    }
                };
                acc += spec.eval_site(&origin, &redraw);
            }
            Ok((x0 - acc / inner as f64).powi(2))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// One row of the stability audit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StabilityRow {
    pub m: u64,
    pub v: f64,
    pub delta_tail_sq: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityAudit {
    pub rows: Vec<StabilityRow>,
    /// Fitted constant: the largest observed ratio.
    pub fitted_c: f64,
    pub bounded: bool,
}

/// Compares `v(m)` with `sum_{|i| > m} delta_{i,2}^2` over `ms` and fits the
/// constant. Rows where both sides vanish are kept with ratio 0.
pub fn stability_audit(spec: &FieldSpec, ms: &[u64], c_p: f64) -> Result<StabilityAudit> {
    let profile = DependenceProfile::for_spec(spec, 2.0, c_p)?;
    let mut rows = Vec::with_capacity(ms.len());
    for &m in ms {
        let v = stability_v(spec, m)?;
        let t = profile.tail_square_sum(m)?;
        let ratio = if t > 0.0 {
            v / t
        } else if v == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        rows.push(StabilityRow {
            m,
            v,
            delta_tail_sq: t,
            ratio,
        });
    }
    let fitted_c = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    Ok(StabilityAudit {
        bounded: fitted_c.is_finite(),
        rows,
        fitted_c,
    })
}

fn small<T: Num + Copy>(k: u32) -> T {
    (0..k).fold(T::zero(), |acc, _| acc + T::one())
}

/// `theta(alpha, tau, p) = (1/2 - 1/tau) (3p(1-tau) + 2p(alpha-1)) / ((tau-1)(p+1) + p(alpha-1))`.
pub fn theta_exponent<T: Num + Copy + PartialOrd>(alpha: T, tau: T, p: T) -> Result<T> {
    let one = T::one();
    let two: T = small(2);
    let three: T = small(3);
    if !(tau > two && tau <= three) {
        return Err(Error::invalid("theta needs 2 < tau <= 3"));
    }
    if !(p >= two) {
        return Err(Error::invalid("theta needs p >= 2"));
    }
    if !(alpha > one) {
        return Err(Error::invalid("theta needs alpha > 1"));
    }
    let lead = one / two - one / tau;
    let num = three * p * (one - tau) + two * p * (alpha - one);
    let den = (tau - one) * (p + one) + p * (alpha - one);
    Ok(lead * num / den)
}

/// `theta(alpha) = (2 alpha - 8) / (3 (4 + 2 alpha))`, the `tau = 3, p = 2` case.
pub fn theta_closed_form<T: Num + Copy + PartialOrd>(alpha: T) -> Result<T> {
    let one = T::one();
    if !(alpha > one) {
        return Err(Error::invalid("theta needs alpha > 1"));
    }
    let two: T = small(2);
    Ok((two * alpha - small(8)) / (small::<T>(3) * (small::<T>(4) + two * alpha)))
}
