//! Run configuration: a TOML document with nested tables, versioned by
//! `schema_version`. Unknown keys are rejected. See `README.md` for the
//! schema.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::Centering;
use crate::fields::{CoefficientMap, FieldKind, FieldSpec, LipschitzMap, PairMap};
use crate::innovations::InnovationSpec;
use crate::kde::{make_kernel, BandwidthRule, Grid, KbarOptions};
use crate::lattice::{IndexPoint, Region};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentName {
    L1Rate,
    Clt,
    BerryEsseen,
    AuditMoment,
    AuditKbar,
    AuditMn,
    AuditAssumptions,
}

impl ExperimentName {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentName::L1Rate => "l1-rate",
            ExperimentName::Clt => "clt",
            ExperimentName::BerryEsseen => "berry-esseen",
            ExperimentName::AuditMoment => "audit-moment",
            ExperimentName::AuditKbar => "audit-kbar",
            ExperimentName::AuditMn => "audit-mn",
            ExperimentName::AuditAssumptions => "audit-assumptions",
        }
    }
}

impl fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKindName {
    #[default]
    Linear,
    Volterra,
    Subordinated,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawName {
    Stored,
    #[default]
    Geometric,
    Polynomial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoeffEntry {
    pub at: Vec<i64>,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub s1: Vec<i64>,
    pub s2: Vec<i64>,
    pub value: f64,
}

/// Coefficient law of a linear field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoeffConfig {
    #[serde(default)]
    pub law: LawName,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exponent: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub entries: Vec<CoeffEntry>,
    /// Explicit truncation radius; otherwise chosen from `tolerance`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<u64>,
    /// Rescale so that the field has unit variance.
    #[serde(default)]
    pub unit_variance: bool,
}

fn one() -> f64 {
    1.0
}

impl Default for CoeffConfig {
    fn default() -> Self {
        Self {
            law: LawName::Geometric,
            scale: 1.0,
            rate: Some(0.5),
            exponent: None,
            entries: Vec::new(),
            radius: None,
            unit_variance: false,
        }
    }
}

impl FromStr for CoeffConfig {
    type Err = Error;

    /// `geometric:<rate>`, `polynomial:<exponent>` or `iid`.
    fn from_str(s: &str) -> Result<Self> {
        let (law, arg) = s.split_once(':').unwrap_or((s, ""));
        let num = |a: &str| -> Result<f64> {
            a.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad coefficient parameter in {s:?}")))
        };
        match law.trim() {
            "geometric" => Ok(Self {
                rate: Some(num(arg)?),
                ..Self::default()
            }),
            "polynomial" => Ok(Self {
                law: LawName::Polynomial,
                rate: None,
                exponent: Some(num(arg)?),
                ..Self::default()
            }),
            "iid" => Ok(Self {
                law: LawName::Stored,
                rate: None,
                entries: vec![CoeffEntry { at: vec![], value: 1.0 }],
                ..Self::default()
            }),
            _ => Err(Error::Config(format!(
                "coefficients must be geometric:<rate>, polynomial:<exponent> or iid, got {s:?}"
            ))),
        }
    }
}

impl CoeffConfig {
    pub fn build(&self, d: usize, tolerance: f64, innovation_variance: f64) -> Result<CoefficientMap> {
        let map = match self.law {
            LawName::Stored => {
                let entries = self
                    .entries
                    .iter()
                    .map(|e| {
                        let at = if e.at.is_empty() { vec![0; d] } else { e.at.clone() };
                        Ok((IndexPoint::new(at)?, self.scale * e.value))
                    })
                    .collect::<Result<Vec<_>>>()?;
                CoefficientMap::stored(d, entries)?
            }
            LawName::Geometric => {
                let rate = self
                    .rate
                    .ok_or_else(|| Error::Config("geometric coefficients need `rate`".into()))?;
                CoefficientMap::geometric(d, self.scale, rate, self.radius.unwrap_or(0))?
            }
            LawName::Polynomial => {
                let exponent = self
                    .exponent
                    .ok_or_else(|| Error::Config("polynomial coefficients need `exponent`".into()))?;
                CoefficientMap::polynomial(d, self.scale, exponent, self.radius.unwrap_or(0))?
            }
        };
        let map = if self.radius.is_none() {
            map.with_tolerance(tolerance)?
        } else {
            map
        };
        if self.unit_variance {
            let v = innovation_variance * map.square_sum()?;
            if !(v > 0.0) {
                return Err(Error::Degenerate("unit_variance on a zero field".into()));
            }
            Ok(map.scaled(1.0 / v.sqrt()))
        } else {
            Ok(map)
        }
    }
}

/// Field model: kind, coefficients, innovations and the optional map `H`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    #[serde(default)]
    pub kind: FieldKindName,
    /// Kind wrapped by a subordinated field.
    #[serde(default)]
    pub inner: FieldKindName,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default)]
    pub coeffs: CoeffConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pairs: Vec<PairEntry>,
    #[serde(default = "InnovationSpec::standard_normal")]
    pub innovation: InnovationSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<LipschitzMap>,
    /// Truncation tolerance relative to the field standard deviation.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_d() -> usize {
    1
}

fn default_tolerance() -> f64 {
    1e-6
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            kind: FieldKindName::Linear,
            inner: FieldKindName::Linear,
            d: 1,
            coeffs: CoeffConfig::default(),
            pairs: Vec::new(),
            innovation: InnovationSpec::standard_normal(),
            h: None,
            tolerance: 1e-6,
        }
    }
}

impl FieldConfig {
    fn build_kind(&self, kind: FieldKindName) -> Result<FieldKind> {
        match kind {
            FieldKindName::Linear => Ok(FieldKind::Linear(self.coeffs.build(
                self.d,
                self.tolerance,
                self.innovation.variance(),
            )?)),
            FieldKindName::Volterra => {
                if self.pairs.is_empty() {
                    return Err(Error::Config("volterra field needs [[field.pairs]]".into()));
                }
                let pairs = self
                    .pairs
                    .iter()
                    .map(|p| Ok((IndexPoint::new(p.s1.clone())?, IndexPoint::new(p.s2.clone())?, p.value)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(FieldKind::Volterra(PairMap::new(self.d, pairs)?))
            }
            FieldKindName::Subordinated => Err(Error::Config("subordinated fields cannot be nested".into())),
        }
    }

    pub fn to_spec(&self) -> Result<FieldSpec> {
        if self.d == 0 {
            return Err(Error::Config("field dimension d must be >= 1".into()));
        }
        if !(self.tolerance > 0.0 && self.tolerance < 1.0) {
            return Err(Error::Config("field tolerance must lie in (0, 1)".into()));
        }
        self.innovation.validate()?;
        let kind = match self.kind {
            FieldKindName::Subordinated => FieldKind::Subordinated {
                inner: Box::new(self.build_kind(self.inner)?),
                map: self
                    .h
                    .ok_or_else(|| Error::Config("subordinated field needs [field.h]".into()))?,
            },
            k => {
                if self.h.is_some() {
                    return Err(Error::Config("[field.h] is only valid for subordinated fields".into()));
                }
                self.build_kind(k)?
            }
        };
        let spec = FieldSpec {
            innovation: self.innovation,
            kind,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Cube,
    Ball,
    RandomSubset,
}

/// `{kind, d, size | radius, keep_prob, seed}`; a random subset thins the
/// cube of side `size`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    pub kind: RegionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep_prob: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl RegionConfig {
    pub fn cube(d: usize, size: usize) -> Self {
        Self {
            kind: RegionKind::Cube,
            d: Some(d),
            size: Some(size),
            radius: None,
            keep_prob: None,
            seed: 0,
        }
    }

    pub fn build(&self, field_d: usize) -> Result<Region> {
        let d = self.d.unwrap_or(field_d);
        if d != field_d {
            return Err(Error::DimensionMismatch {
                expected: field_d,
                found: d,
            });
        }
        let size = || self.size.ok_or_else(|| Error::Config("region needs `size`".into()));
        match self.kind {
            RegionKind::Cube => Region::cube(d, size()?),
            RegionKind::Ball => Region::ball(
                d,
                self.radius.ok_or_else(|| Error::Config("ball region needs `radius`".into()))?,
            ),
            RegionKind::RandomSubset => Region::random_subset(
                &Region::cube(d, size()?)?,
                self.keep_prob
                    .ok_or_else(|| Error::Config("random_subset region needs `keep_prob`".into()))?,
                self.seed,
            ),
        }
    }
}

/// Weights `a_i` of the moment-inequality audit, over the region's sites in
/// lexicographic order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    #[default]
    Ones,
    Alternating,
    Zeros,
}

impl WeightScheme {
    pub fn weights(&self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|k| match self {
                WeightScheme::Ones => 1.0,
                WeightScheme::Alternating => {
                    if k % 2 == 0 {
                        1.0
                    } else {
                        -1.0
                    }
                }
                WeightScheme::Zeros => 0.0,
            })
            .collect()
    }
}

/// Parameters of the inequality, schedule and assumption audits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    /// Defaults to `[1, 2, R]` with `R` the truncation radius.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ms: Option<Vec<u64>>,
    #[serde(default = "default_bs")]
    pub bs: Vec<f64>,
    #[serde(default = "default_ps")]
    pub ps: Vec<f64>,
    #[serde(default)]
    pub weights: WeightScheme,
    #[serde(default)]
    pub kbar: KbarOptions,
    /// `b = 2^{-k}` for the `m_n` audit.
    #[serde(default = "default_ks")]
    pub ks: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_exponent: Option<f64>,
    #[serde(default)]
    pub require_monotone: bool,
    /// Burkholder constant for Volterra dependence bounds.
    #[serde(default = "one")]
    pub c_p: f64,
}

fn default_bs() -> Vec<f64> {
    vec![0.5, 0.25, 0.1]
}

fn default_ps() -> Vec<f64> {
    vec![2.0, 4.0]
}

fn default_ks() -> Vec<u32> {
    (4..=20).collect()
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            ms: None,
            bs: default_bs(),
            ps: default_ps(),
            weights: WeightScheme::Ones,
            kbar: KbarOptions::default(),
            ks: default_ks(),
            weight_exponent: None,
            require_monotone: false,
            c_p: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub experiment: ExperimentName,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replicates: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub force: bool,
    #[serde(default)]
    pub field: FieldConfig,
    #[serde(default = "default_kernel")]
    pub kernel: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth_rule: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sizes: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<RegionConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<f64>>,
    /// `lo:hi:step`, an alternative to `points`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<f64>,
    #[serde(default = "default_centering")]
    pub centering: Centering,
    /// Half-width of the L1 integration range in marginal standard deviations.
    #[serde(default = "default_range_sds")]
    pub range_sds: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default)]
    pub audit: AuditConfig,
}

fn default_seed() -> u64 {
    20_240_601
}

fn default_kernel() -> String {
    "epanechnikov".into()
}

fn default_centering() -> Centering {
    Centering::Expected
}

fn default_range_sds() -> f64 {
    8.0
}

fn default_tau() -> f64 {
    3.0
}

fn default_alpha() -> f64 {
    10.0
}

fn default_p() -> f64 {
    2.0
}

fn ladder(lo: u32, hi: u32) -> Vec<usize> {
    (lo..=hi).map(|k| 1usize << k).collect()
}

impl RunConfig {
    /// A configuration with every optional value left at its default.
    pub fn minimal(experiment: ExperimentName) -> Self {
        let mut c: RunConfig = toml::from_str(&format!(
            "schema_version = {SCHEMA_VERSION}\nexperiment = \"{experiment}\"\n"
        ))
        .expect("minimal config parses");
        c.fill_defaults();
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if c.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                c.schema_version
            )));
        }
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Fills experiment-specific defaults for values left unset.
    pub fn fill_defaults(&mut self) {
        use ExperimentName::*;
        let exp = self.experiment;
        if self.replicates.is_none() {
            self.replicates = Some(match exp {
                L1Rate => 200,
                Clt | BerryEsseen | AuditMoment | AuditKbar => 2000,
                AuditMn | AuditAssumptions => 1,
            });
        }
        if self.workers.is_none() {
            self.workers = Some(1);
        }
        if self.bandwidth_rule.is_none() {
            self.bandwidth_rule = Some(match exp {
                BerryEsseen => format!("berry-esseen tau={}", self.tau),
                _ => "beta=1/3".into(),
            });
        }
        if self.sizes.is_none() && matches!(exp, L1Rate | BerryEsseen | AuditAssumptions) {
            self.sizes = Some(match exp {
                BerryEsseen => ladder(8, 14),
                _ => ladder(7, 13),
            });
        }
        if self.region.is_none() && matches!(exp, Clt | AuditMoment) {
            let d = self.field.d;
            self.region = Some(match exp {
                Clt if d == 1 => RegionConfig::cube(1, 4096),
                Clt => RegionConfig::cube(d, 64),
                _ => RegionConfig::cube(d, 16),
            });
        }
        if self.points.is_none() && self.grid.is_none() && exp == Clt {
            self.points = Some(vec![-1.0, 0.0, 1.0]);
        }
        if self.x.is_none() && matches!(exp, BerryEsseen | AuditMoment | AuditKbar) {
            self.x = Some(if exp == BerryEsseen { 1.5 } else { 0.0 });
        }
    }

    pub fn replicates(&self) -> usize {
        self.replicates.unwrap_or(1)
    }

    pub fn workers(&self) -> usize {
        self.workers.unwrap_or(1)
    }

    pub fn rule(&self) -> Result<BandwidthRule> {
        let r: BandwidthRule = self.bandwidth_rule.as_deref().unwrap_or("beta=1/3").parse()?;
        r.validate()?;
        Ok(r)
    }

    pub fn evaluation_points(&self) -> Result<Vec<f64>> {
        match (&self.points, &self.grid) {
            (Some(_), Some(_)) => Err(Error::Config("give either `points` or `grid`, not both".into())),
            (Some(p), None) => Ok(p.clone()),
            (None, Some(g)) => Ok(g.parse::<Grid>()?.points()),
            (None, None) => Ok(Vec::new()),
        }
    }

    /// Checks everything that can be checked before computation starts.
    pub fn validate(&self) -> Result<()> {
        use ExperimentName::*;
        let exp = self.experiment;
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported schema_version {}", self.schema_version)));
        }
        if self.replicates == Some(0) {
            return Err(Error::invalid("replicates must be >= 1"));
        }
        if self.workers == Some(0) {
            return Err(Error::invalid("workers must be >= 1"));
        }
        let spec = self.field.to_spec()?;
        if exp != AuditAssumptions {
            make_kernel::<f64>(&self.kernel)?;
        }
        let rule = self.rule()?;
        if let Some(s) = &self.sizes {
            if s.is_empty() || s.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Config("sizes must be nonempty and strictly increasing".into()));
            }
            if matches!(exp, L1Rate) && s.len() < 4 {
                return Err(Error::Config("l1-rate needs at least 4 sizes".into()));
            }
            if matches!(exp, L1Rate | BerryEsseen) {
                for &n in s {
                    crate::experiments::cube_of_size(spec.dim(), n)?;
                    crate::kde::bandwidth(&rule, n)?;
                }
            }
        }
        if let Some(r) = &self.region {
            let region = r.build(spec.dim())?;
            if exp == Clt {
                crate::kde::bandwidth(&rule, region.len())?;
            }
        }
        let points = self.evaluation_points()?;
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::Config("points must be finite".into()));
        }
        if exp == Clt {
            if points.len() < 2 {
                return Err(Error::Config("clt needs at least two points".into()));
            }
            for (k, a) in points.iter().enumerate() {
                if points[..k].contains(a) {
                    return Err(Error::invalid("distinct points required"));
                }
            }
        }
        if let Some(x) = self.x {
            if !x.is_finite() {
                return Err(Error::Config("x must be finite".into()));
            }
        }
        if exp == BerryEsseen && !matches!(rule, BandwidthRule::BerryEsseen { .. }) {
            return Err(Error::Config("berry-esseen uses the rule `berry-esseen tau=<t>`".into()));
        }
        if matches!(exp, AuditMoment | AuditKbar) {
            if spec.coefficients().is_none() {
                return Err(Error::WrongSpecKind("inequality audits need a linear field".into()));
            }
            if self.audit.bs.iter().any(|b| !(*b > 0.0)) || self.audit.ps.iter().any(|p| !(*p >= 1.0)) {
                return Err(Error::Config("audit needs b > 0 and p >= 1".into()));
            }
        }
        if exp == AuditMn && (self.audit.ks.is_empty() || self.audit.ks.iter().any(|&k| k == 0 || k > 60)) {
            return Err(Error::Config("audit.ks must be nonempty with 1 <= k <= 60".into()));
        }
        if !(self.range_sds > 0.0) {
            return Err(Error::Config("range_sds must be positive".into()));
        }
        Ok(())
    }
}
