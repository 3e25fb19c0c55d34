//! Index arithmetic on `Z^d` and finite observation regions.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{CounterRng, Role};

/// A point of `Z^d`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IndexPoint(Vec<i64>);

impl IndexPoint {
    pub fn new(coords: Vec<i64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::invalid("index point needs dimension >= 1"));
        }
        Ok(Self(coords))
    }

    pub fn origin(dim: usize) -> Self {
        Self(vec![0; dim.max(1)])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[i64] {
        &self.0
    }

    /// `|i| = max_k |i_k|`.
    pub fn sup_norm(&self) -> u64 {
        self.0.iter().map(|c| c.unsigned_abs()).max().unwrap_or(0)
    }

    pub fn is_origin(&self) -> bool {
        self.0.iter().all(|&c| c == 0)
    }

    pub fn add(&self, other: &IndexPoint) -> IndexPoint {
        debug_assert_eq!(self.dim(), other.dim());
        IndexPoint(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &IndexPoint) -> IndexPoint {
        debug_assert_eq!(self.dim(), other.dim());
        IndexPoint(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn neg(&self) -> IndexPoint {
        IndexPoint(self.0.iter().map(|a| -a).collect())
    }

    pub(crate) fn check_dim(&self, dim: usize) -> Result<()> {
        if self.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: self.dim(),
            });
        }
        Ok(())
    }
}

impl From<&[i64]> for IndexPoint {
    fn from(c: &[i64]) -> Self {
        assert!(!c.is_empty(), "index point needs dimension >= 1");
        Self(c.to_vec())
    }
}

impl<const N: usize> From<[i64; N]> for IndexPoint {
    fn from(c: [i64; N]) -> Self {
        assert!(N > 0, "index point needs dimension >= 1");
        Self(c.to_vec())
    }
}

impl fmt::Display for IndexPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (k, c) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

/// Lexicographic order: `i < j` iff `i_1 < j_1`, or `i_k < j_k` for some `k`
/// with `i_l = j_l` for all `l < k`.
pub fn lex_compare(i: &IndexPoint, j: &IndexPoint) -> Result<Ordering> {
    j.check_dim(i.dim())?;
    for (a, b) in i.0.iter().zip(&j.0) {
        match a.cmp(b) {
            Ordering::Equal => continue,
            other => return Ok(other),
        }
    }
    Ok(Ordering::Equal)
}

/// All points of `Z^d` with sup-norm at most `radius`, in lexicographic order.
pub fn sup_ball_points(dim: usize, radius: u64) -> Vec<IndexPoint> {
    let r = radius as i64;
    BoxWindow::new(vec![-r; dim], vec![r; dim])
        .expect("valid ball box")
        .points()
        .collect()
}

/// Number of points with sup-norm exactly `k` in `Z^d`.
pub fn shell_count(dim: usize, k: u64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let d = dim as i32;
    let k = k as f64;
    (2.0 * k + 1.0).powi(d) - (2.0 * k - 1.0).powi(d)
}

/// Axis-aligned box `lo..=hi` stored row-major (last coordinate fastest).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxWindow {
    lo: Vec<i64>,
    hi: Vec<i64>,
}

impl BoxWindow {
    pub fn new(lo: Vec<i64>, hi: Vec<i64>) -> Result<Self> {
        if lo.is_empty() {
            return Err(Error::invalid("box needs dimension >= 1"));
        }
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch {
                expected: lo.len(),
                found: hi.len(),
            });
        }
        if lo.iter().zip(&hi).any(|(l, h)| l > h) {
            return Err(Error::invalid("box lower corner exceeds upper corner"));
        }
        Ok(Self { lo, hi })
    }

    /// Sup-norm ball of `radius` around the origin.
    pub fn centered(dim: usize, radius: u64) -> Self {
        let r = radius as i64;
        Self {
            lo: vec![-r; dim],
            hi: vec![r; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[i64] {
        &self.lo
    }

    pub fn hi(&self) -> &[i64] {
        &self.hi
    }

    pub fn extent(&self, k: usize) -> usize {
        (self.hi[k] - self.lo[k] + 1) as usize
    }

    /// Number of points, saturating on overflow.
    pub fn len(&self) -> usize {
        (0..self.dim()).fold(1usize, |acc, k| acc.saturating_mul(self.extent(k)))
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Grows the box by `r` in every direction.
    pub fn inflate(&self, r: u64) -> Self {
        let r = r as i64;
        Self {
            lo: self.lo.iter().map(|l| l - r).collect(),
            hi: self.hi.iter().map(|h| h + r).collect(),
        }
    }

    pub fn contains(&self, p: &IndexPoint) -> bool {
        p.dim() == self.dim()
            && p.0
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(c, (l, h))| l <= c && c <= h)
    }

    pub fn strides(&self) -> Vec<isize> {
        let d = self.dim();
        let mut s = vec![1isize; d];
        for k in (0..d.saturating_sub(1)).rev() {
            s[k] = s[k + 1] * self.extent(k + 1) as isize;
        }
        s
    }

    pub fn linear_index(&self, p: &IndexPoint) -> Option<usize> {
        if !self.contains(p) {
            return None;
        }
        let strides = self.strides();
        let idx = p
            .0
            .iter()
            .zip(&self.lo)
            .zip(&strides)
            .map(|((c, l), s)| (c - l) as isize * s)
            .sum::<isize>();
        Some(idx as usize)
    }

    /// Signed offset in the linear layout corresponding to `shift`.
    pub fn linear_offset(&self, shift: &IndexPoint) -> isize {
        shift
            .0
            .iter()
            .zip(self.strides())
            .map(|(c, s)| *c as isize * s)
            .sum()
    }

    pub fn point_at(&self, mut idx: usize) -> IndexPoint {
        let d = self.dim();
        let mut c = vec![0i64; d];
        for k in (0..d).rev() {
            let e = self.extent(k);
            c[k] = self.lo[k] + (idx % e) as i64;
            idx /= e;
        }
        IndexPoint(c)
    }

    /// Points in row-major order, which is also lexicographic order.
    pub fn points(&self) -> impl Iterator<Item = IndexPoint> + '_ {
        (0..self.len()).map(move |i| self.point_at(i))
    }

    pub fn to_region(&self) -> Region {
        Region::from_sorted_unique(self.dim(), self.points().collect(), Some(self.clone()))
    }
}

#[derive(Debug)]
struct RegionData {
    dim: usize,
    points: Vec<IndexPoint>,
    index: HashMap<IndexPoint, usize>,
    /// Set when the region is exactly a box, enabling closed-form overlaps.
    as_box: Option<BoxWindow>,
}

/// A finite subset of `Z^d`, enumerated in lexicographic order.
///
/// Cloning is cheap; the point set is shared.
#[derive(Clone, Debug)]
pub struct Region {
    data: Arc<RegionData>,
}

impl PartialEq for Region {
    fn eq(&self, other: &Self) -> bool {
        self.data.dim == other.data.dim && self.data.points == other.data.points
    }
}

impl Region {
    fn from_sorted_unique(dim: usize, points: Vec<IndexPoint>, as_box: Option<BoxWindow>) -> Self {
        let index = points
            .iter()
            .enumerate()
            .map(|(k, p)| (p.clone(), k))
            .collect();
        Self {
            data: Arc::new(RegionData {
                dim,
                points,
                index,
                as_box,
            }),
        }
    }

    /// Builds a region from arbitrary points; duplicates are merged.
    pub fn from_points(dim: usize, points: impl IntoIterator<Item = IndexPoint>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("region dimension must be >= 1"));
        }
        let mut pts = Vec::new();
        for p in points {
            p.check_dim(dim)?;
            pts.push(p);
        }
        pts.sort();
        pts.dedup();
        Ok(Self::from_sorted_unique(dim, pts, None))
    }

    /// `{0, ..., side-1}^d`.
    pub fn cube(dim: usize, side: usize) -> Result<Self> {
        if dim < 1 {
            return Err(Error::invalid("cube dimension must be >= 1"));
        }
        if side < 1 {
            return Err(Error::invalid("cube side length must be >= 1"));
        }
        let bx = BoxWindow::new(vec![0; dim], vec![side as i64 - 1; dim])?;
        Ok(bx.to_region())
    }

    /// Sup-norm ball `{i : |i| <= radius}`.
    pub fn ball(dim: usize, radius: u64) -> Result<Self> {
        if dim < 1 {
            return Err(Error::invalid("ball dimension must be >= 1"));
        }
        Ok(BoxWindow::centered(dim, radius).to_region())
    }

    /// Seeded Bernoulli thinning of `base`. An empty result is an error.
    pub fn random_subset(base: &Region, keep_prob: f64, seed: u64) -> Result<Self> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::invalid(format!(
                "keep probability must lie in (0, 1], got {keep_prob}"
            )));
        }
        let pts: Vec<IndexPoint> = base
            .points()
            .iter()
            .filter(|p| {
                keep_prob >= 1.0
                    || CounterRng::for_point(seed, 0, Role::Thinning, p.coords()).next_unit()
                        < keep_prob
            })
            .cloned()
            .collect();
        if pts.is_empty() {
            return Err(Error::invalid("random subset is empty"));
        }
        let as_box = if pts.len() == base.len() {
            base.data.as_box.clone()
        } else {
            None
        };
        Ok(Self::from_sorted_unique(base.dim(), pts, as_box))
    }

    pub fn dim(&self) -> usize {
        self.data.dim
    }

    /// `|Lambda|`.
    pub fn len(&self) -> usize {
        self.data.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.points.is_empty()
    }

    /// Points in lexicographic order `phi(1) < ... < phi(|Lambda|)`.
    pub fn points(&self) -> &[IndexPoint] {
        &self.data.points
    }

    pub fn contains(&self, p: &IndexPoint) -> bool {
        self.data.index.contains_key(p)
    }

    pub fn position(&self, p: &IndexPoint) -> Option<usize> {
        self.data.index.get(p).copied()
    }

    pub fn as_box(&self) -> Option<&BoxWindow> {
        self.data.as_box.as_ref()
    }

    /// Smallest box containing the region.
    pub fn bounding_box(&self) -> Option<BoxWindow> {
        if let Some(b) = &self.data.as_box {
            return Some(b.clone());
        }
        let first = self.data.points.first()?;
        let mut lo = first.0.clone();
        let mut hi = first.0.clone();
        for p in &self.data.points {
            for k in 0..self.dim() {
                lo[k] = lo[k].min(p.0[k]);
                hi[k] = hi[k].max(p.0[k]);
            }
        }
        BoxWindow::new(lo, hi).ok()
    }

    /// `|Lambda ∩ (Lambda - j)|`: number of `i` in the region with `i + j`
    /// also in the region.
    pub fn overlap(&self, shift: &IndexPoint) -> Result<usize> {
        shift.check_dim(self.dim())?;
        Ok(self
            .data
            .points
            .iter()
            .filter(|p| self.data.index.contains_key(&p.add(shift)))
            .count())
    }

    /// Same count as [`Region::overlap`], in closed form for box regions.
    pub fn overlap_fast(&self, shift: &IndexPoint) -> Result<usize> {
        shift.check_dim(self.dim())?;
        match &self.data.as_box {
            Some(b) => Ok((0..self.dim())
                .map(|k| (b.extent(k) as i64 - shift.0[k].abs()).max(0) as usize)
                .product()),
            None => self.overlap(shift),
        }
    }
}
