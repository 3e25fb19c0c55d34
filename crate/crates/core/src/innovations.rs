//! I.i.d. innovation fields, their independent copies and the coupled field
//! obtained by replacing the innovation at the origin.

use rand::{Rng, RngCore};
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::lattice::{BoxWindow, IndexPoint};
use crate::rng::{CounterRng, Role};

/// Law of the innovations `eps_j`. All members are centered.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "lowercase", deny_unknown_fields)]
pub enum InnovationSpec {
    /// `N(0, std_dev^2)`.
    Normal {
        #[serde(default = "one")]
        std_dev: f64,
    },
    /// Uniform on `[-half_width, half_width]`; the default has unit variance.
    Uniform {
        #[serde(default = "sqrt3")]
        half_width: f64,
    },
    /// `E - 1/rate` with `E ~ Exp(rate)`.
    Exponential {
        #[serde(default = "one")]
        rate: f64,
    },
    /// `+1` or `-1` with probability one half each.
    Rademacher,
}

fn one() -> f64 {
    1.0
}

fn sqrt3() -> f64 {
    3f64.sqrt()
}

impl Default for InnovationSpec {
    fn default() -> Self {
        InnovationSpec::standard_normal()
    }
}

impl InnovationSpec {
    pub fn standard_normal() -> Self {
        InnovationSpec::Normal { std_dev: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            InnovationSpec::Normal { std_dev } => std_dev > 0.0 && std_dev.is_finite(),
            InnovationSpec::Uniform { half_width } => half_width > 0.0 && half_width.is_finite(),
            InnovationSpec::Exponential { rate } => rate > 0.0 && rate.is_finite(),
            InnovationSpec::Rademacher => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("innovation parameters must be positive: {self:?}")))
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            InnovationSpec::Normal { .. } => "normal",
            InnovationSpec::Uniform { .. } => "uniform",
            InnovationSpec::Exponential { .. } => "exponential",
            InnovationSpec::Rademacher => "rademacher",
        }
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self, InnovationSpec::Normal { .. })
    }

    pub fn mean(&self) -> f64 {
        0.0
    }

    pub fn variance(&self) -> f64 {
        match *self {
            InnovationSpec::Normal { std_dev } => std_dev * std_dev,
            InnovationSpec::Uniform { half_width } => half_width * half_width / 3.0,
            InnovationSpec::Exponential { rate } => 1.0 / (rate * rate),
            InnovationSpec::Rademacher => 1.0,
        }
    }

    /// One draw from the law using `rng`.
    pub fn sample(&self, rng: &mut CounterRng) -> f64 {
        match *self {
            InnovationSpec::Normal { std_dev } => {
                let z: f64 = rng.sample(StandardNormal);
                std_dev * z
            }
            InnovationSpec::Uniform { half_width } => half_width * (2.0 * rng.next_unit() - 1.0),
            InnovationSpec::Exponential { rate } => {
                let e: f64 = rng.sample(Exp1);
                (e - 1.0) / rate
            }
            InnovationSpec::Rademacher => {
                if rng.next_u64() >> 63 == 0 {
                    -1.0
                } else {
                    1.0
                }
            }
        }
    }

    /// The innovation at `point` for the given role; a pure function of its
    /// arguments.
    pub fn value_at(&self, seed: u64, stream: u64, role: Role, point: &[i64]) -> f64 {
        self.sample(&mut CounterRng::for_point(seed, stream, role, point))
    }

    fn check_p(p: f64) -> Result<()> {
        if p >= 1.0 && p.is_finite() {
            Ok(())
        } else {
            Err(Error::PNormUnavailable(format!("p must be a finite number >= 1, got {p}")))
        }
    }

    /// `||eps_0||_p`.
    pub fn p_norm(&self, p: f64) -> Result<f64> {
        Self::check_p(p)?;
        let moment = match *self {
            // E|Z|^p = 2^{p/2} Gamma((p+1)/2) / sqrt(pi)
            InnovationSpec::Normal { std_dev } => {
                std_dev.powf(p) * 2f64.powf(p / 2.0) * gamma((p + 1.0) / 2.0)
                    / std::f64::consts::PI.sqrt()
            }
            InnovationSpec::Uniform { half_width } => half_width.powf(p) / (p + 1.0),
            // E|E - 1|^p for E ~ Exp(1): Gamma(p+1, 1) / e + e^{-1} * int_0^1 (1-t)^p e^{t} dt
            InnovationSpec::Exponential { rate } => {
                centered_exponential_abs_moment(p) / rate.powf(p)
            }
            InnovationSpec::Rademacher => 1.0,
        };
        Ok(moment.powf(1.0 / p))
    }

    /// `||eps_0 - eps_0'||_p` for an independent copy `eps_0'`.
    pub fn diff_norm(&self, p: f64) -> Result<f64> {
        Self::check_p(p)?;
        let moment = match *self {
            // eps - eps' ~ N(0, 2 sigma^2)
            InnovationSpec::Normal { std_dev } => {
                let s = std_dev * std::f64::consts::SQRT_2;
                s.powf(p) * 2f64.powf(p / 2.0) * gamma((p + 1.0) / 2.0)
                    / std::f64::consts::PI.sqrt()
            }
            // triangular law on [-2h, 2h]
            InnovationSpec::Uniform { half_width } => {
                (2.0 * half_width).powf(p) * 2.0 / ((p + 1.0) * (p + 2.0))
            }
            // Laplace law with scale 1/rate
            InnovationSpec::Exponential { rate } => gamma(p + 1.0) / rate.powf(p),
            // 0 w.p. 1/2, +-2 w.p. 1/4 each
            InnovationSpec::Rademacher => 2f64.powf(p) / 2.0,
        };
        Ok(moment.powf(1.0 / p))
    }
}

/// `E|E - 1|^p` for a unit exponential, split at 1 into two integrals with
/// closed-form pieces.
fn centered_exponential_abs_moment(p: f64) -> f64 {
    // int_1^inf (t-1)^p e^{-t} dt = e^{-1} Gamma(p+1)
    let upper = (-1f64).exp() * gamma(p + 1.0);
    // int_0^1 (1-t)^p e^{-t} dt, smooth integrand
    let lower = crate::quadrature::gauss_legendre_composite(|t| (1.0 - t).powf(p) * (-t).exp(), 0.0, 1.0, 8, 32);
    upper + lower
}

/// Innovations materialized on a box window.
#[derive(Clone, Debug)]
pub struct InnovationPatch {
    pub window: BoxWindow,
    pub values: Vec<f64>,
    pub master_seed: u64,
    pub stream_id: u64,
}

impl InnovationPatch {
    pub fn get(&self, p: &IndexPoint) -> Option<f64> {
        self.window.linear_index(p).map(|k| self.values[k])
    }
}

/// Draws one value per window point, keyed by `(seed, stream, point)`.
pub fn draw_patch(
    spec: &InnovationSpec,
    window: &BoxWindow,
    master_seed: u64,
    stream_id: u64,
) -> Result<InnovationPatch> {
    spec.validate()?;
    let values = window
        .points()
        .map(|p| spec.value_at(master_seed, stream_id, Role::Primary, p.coords()))
        .collect();
    Ok(InnovationPatch {
        window: window.clone(),
        values,
        master_seed,
        stream_id,
    })
}

/// Replaces `eps_0` by its copy `eps_0'`, drawn from the copy substream of the
/// same `(seed, stream)`.
pub fn couple_at_origin(patch: &InnovationPatch, spec: &InnovationSpec) -> Result<InnovationPatch> {
    let origin = IndexPoint::origin(patch.window.dim());
    let k = patch.window.linear_index(&origin).ok_or(Error::OriginNotInWindow)?;
    let mut out = patch.clone();
    out.values[k] = spec.value_at(patch.master_seed, patch.stream_id, Role::Copy, origin.coords());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::gauss_legendre_composite;

    fn window(d: usize, r: u64) -> BoxWindow {
        BoxWindow::centered(d, r)
    }

    #[test]
    fn rademacher_support() {
        let p = draw_patch(&InnovationSpec::Rademacher, &window(2, 10), 3, 0).unwrap();
        assert!(p.values.iter().all(|&v| v == 1.0 || v == -1.0));
        let pos = p.values.iter().filter(|&&v| v > 0.0).count();
        assert!(pos > 150 && pos < 291, "{pos}");
    }

    #[test]
    fn patches_are_deterministic() {
        let spec = InnovationSpec::standard_normal();
        let a = draw_patch(&spec, &window(2, 5), 11, 4).unwrap();
        let b = draw_patch(&spec, &window(2, 5), 11, 4).unwrap();
        assert_eq!(a.values, b.values);
        let c = draw_patch(&spec, &window(2, 5), 11, 5).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn normal_sample_mean_within_four_sigma() {
        let spec = InnovationSpec::standard_normal();
        let w = BoxWindow::new(vec![0], vec![99_999]).unwrap();
        let p = draw_patch(&spec, &w, 2024, 0).unwrap();
        let n = p.values.len() as f64;
        let mean = p.values.iter().sum::<f64>() / n;
        assert!(mean.abs() < 4.0 / n.sqrt(), "mean {mean}");
        let var = p.values.iter().map(|v| v * v).sum::<f64>() / n;
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn enlarging_the_window_preserves_values() {
        let spec = InnovationSpec::Uniform { half_width: 3f64.sqrt() };
        let small = window(2, 3);
        let large = BoxWindow::new(vec![-5, -4], vec![6, 3]).unwrap();
        let a = draw_patch(&spec, &small, 9, 1).unwrap();
        let b = draw_patch(&spec, &large, 9, 1).unwrap();
        for p in small.points() {
            assert_eq!(a.get(&p), b.get(&p));
        }
    }

    #[test]
    fn coupling_changes_only_the_origin() {
        let spec = InnovationSpec::standard_normal();
        let p = draw_patch(&spec, &window(2, 4), 5, 7).unwrap();
        let q = couple_at_origin(&p, &spec).unwrap();
        let origin = IndexPoint::origin(2);
        let diffs: Vec<IndexPoint> = p
            .window
            .points()
            .filter(|x| p.get(x) != q.get(x))
            .collect();
        assert_eq!(diffs, vec![origin.clone()]);
        let q2 = couple_at_origin(&p, &spec).unwrap();
        assert_eq!(q.get(&origin), q2.get(&origin));
    }

    #[test]
    fn coupling_requires_origin_in_window() {
        let spec = InnovationSpec::standard_normal();
        let w = BoxWindow::new(vec![1, 1], vec![3, 3]).unwrap();
        let p = draw_patch(&spec, &w, 0, 0).unwrap();
        assert!(matches!(couple_at_origin(&p, &spec), Err(Error::OriginNotInWindow)));
    }

    #[test]
    fn coupled_difference_norm_matches_sqrt_two() {
        let spec = InnovationSpec::standard_normal();
        let w = window(1, 0);
        let reps = 10_000;
        let sq: Vec<f64> = (0..reps)
            .map(|r| {
                let p = draw_patch(&spec, &w, 77, r).unwrap();
                let q = couple_at_origin(&p, &spec).unwrap();
                (p.values[0] - q.values[0]).powi(2)
            })
            .collect();
        let mean = sq.iter().sum::<f64>() / reps as f64;
        let sd = (sq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        let se_mean = sd / (reps as f64).sqrt();
        // delta method for the square root
        let est = mean.sqrt();
        let se = se_mean / (2.0 * est);
        assert!((est - 2f64.sqrt()).abs() < 3.0 * se, "{est} +- {se}");
    }

    #[test]
    fn coupled_value_has_the_innovation_law() {
        // two-sample KS between eps_0 and eps_0' over replicates
        let spec = InnovationSpec::Exponential { rate: 1.0 };
        let w = window(1, 0);
        let reps = 4000;
        let mut a = Vec::with_capacity(reps);
        let mut b = Vec::with_capacity(reps);
        for r in 0..reps as u64 {
            let p = draw_patch(&spec, &w, 1, r).unwrap();
            a.push(p.values[0]);
            b.push(couple_at_origin(&p, &spec).unwrap().values[0]);
        }
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (mut i, mut j, mut d) = (0usize, 0usize, 0f64);
        while i < reps && j < reps {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            d = d.max((i as f64 - j as f64).abs() / reps as f64);
        }
        // 1% critical value 1.63 * sqrt(2/n)
        assert!(d < 1.63 * (2.0 / reps as f64).sqrt(), "ks {d}");
    }

    #[test]
    fn analytic_norms() {
        let n = InnovationSpec::standard_normal();
        assert!((n.p_norm(2.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((n.diff_norm(2.0).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        // E|Z|^4 = 3
        assert!((n.p_norm(4.0).unwrap() - 3f64.powf(0.25)).abs() < 1e-12);
        let r = InnovationSpec::Rademacher;
        assert!((r.diff_norm(2.0).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.p_norm(3.0).unwrap(), 1.0);
        let u = InnovationSpec::Uniform { half_width: 3f64.sqrt() };
        assert!((u.p_norm(2.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((u.diff_norm(2.0).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        let e = InnovationSpec::Exponential { rate: 2.0 };
        assert!((e.p_norm(2.0).unwrap() - 0.5).abs() < 1e-12);
        assert!((e.diff_norm(2.0).unwrap() - 2f64.sqrt() * 0.5).abs() < 1e-12);
        assert!(n.p_norm(0.5).is_err());
        assert!(n.diff_norm(f64::INFINITY).is_err());
    }

    /// Density of eps - eps' by one-dimensional convolution quadrature, an
    /// independent route to the closed forms.
    fn diff_moment_by_quadrature(spec: &InnovationSpec, p: f64) -> f64 {
        let (pdf, lo, hi): (Box<dyn Fn(f64) -> f64>, f64, f64) = match *spec {
            InnovationSpec::Normal { std_dev } => (
                Box::new(move |x: f64| {
                    (-0.5 * (x / std_dev).powi(2)).exp() / (std_dev * (2.0 * std::f64::consts::PI).sqrt())
                }),
                -12.0 * std_dev,
                12.0 * std_dev,
            ),
            InnovationSpec::Uniform { half_width } => (
                Box::new(move |x: f64| if x.abs() <= half_width { 0.5 / half_width } else { 0.0 }),
                -half_width,
                half_width,
            ),
            InnovationSpec::Exponential { rate } => (
                Box::new(move |x: f64| {
                    let e = x + 1.0 / rate;
                    if e >= 0.0 { rate * (-rate * e).exp() } else { 0.0 }
                }),
                -1.0 / rate,
                40.0 / rate,
            ),
            InnovationSpec::Rademacher => unreachable!(),
        };
        // E|eps - eps'|^p = int int |x - y|^p f(x) f(y) dx dy, split at the kink x = y
        gauss_legendre_composite(
            |x| {
                let left = gauss_legendre_composite(|y| (x - y).abs().powf(p) * pdf(y), lo, x.max(lo), 16, 16);
                let right = gauss_legendre_composite(|y| (x - y).abs().powf(p) * pdf(y), x.min(hi), hi, 16, 16);
                (left + right) * pdf(x)
            },
            lo,
            hi,
            64,
            16,
        )
    }

    #[test]
    fn diff_norms_match_quadrature() {
        for spec in [
            InnovationSpec::Normal { std_dev: 1.3 },
            InnovationSpec::Uniform { half_width: 0.7 },
            InnovationSpec::Exponential { rate: 1.5 },
        ] {
            for p in [1.0, 2.0, 3.0, 4.0] {
                let q = diff_moment_by_quadrature(&spec, p).powf(1.0 / p);
                let a = spec.diff_norm(p).unwrap();
                assert!((q - a).abs() < 1e-6 * a, "{spec:?} p={p}: {q} vs {a}");
            }
        }
    }
}
