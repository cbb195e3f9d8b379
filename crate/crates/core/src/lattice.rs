//! Site lattice for the doubled Fourier representation.
//!
//! A site is `k = (l, j, a)` with `l ∈ Z^ν` (frequency/time indices),
//! `j ∈ Z^d` (spatial indices) and `a ∈ {0,1}` selecting the `u⁺`/`u⁻`
//! component. All geometry uses the sup metric: `|i| = max(|l|_∞, |j|_∞)`
//! on the scalar lattice and `|k − k′| = max(|i − i′|, |a − a′|)` on the
//! doubled lattice.
//!
//! Finite site sets carry a canonical ordering — lexicographic on the
//! concatenation `(l, j, a)` — so that every matrix indexed by the same set
//! has a reproducible layout.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::{Error, Result};

/// Lattice dimensions: `nu` frequency directions and `d` spatial directions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub nu: usize,
    pub d: usize,
}

impl Dims {
    pub fn new(nu: usize, d: usize) -> Self {
        Dims { nu, d }
    }

    /// Total scalar lattice dimension `b = ν + d`.
    pub fn b(&self) -> usize {
        self.nu + self.d
    }
}

/// Scalar lattice index `i = (l, j) ∈ Z^ν × Z^d`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MultiIndex {
    pub l: Vec<i64>,
    pub j: Vec<i64>,
}

impl MultiIndex {
    pub fn new(l: Vec<i64>, j: Vec<i64>) -> Self {
        MultiIndex { l, j }
    }

    pub fn zero(dims: Dims) -> Self {
        MultiIndex {
            l: vec![0; dims.nu],
            j: vec![0; dims.d],
        }
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.l.len(), self.j.len())
    }

    /// Sup norm `max(|l|_∞, |j|_∞)`; 0 for the origin.
    pub fn sup_norm(&self) -> i64 {
        self.l
            .iter()
            .chain(self.j.iter())
            .map(|v| v.abs())
            .max()
            .unwrap_or(0)
    }

    /// Smoothed magnitude `⟨i⟩ = max(|i|, 1)` used as the norm weight.
    pub fn angle(&self) -> i64 {
        self.sup_norm().max(1)
    }

    pub fn sub(&self, other: &MultiIndex) -> MultiIndex {
        MultiIndex {
            l: self.l.iter().zip(&other.l).map(|(a, b)| a - b).collect(),
            j: self.j.iter().zip(&other.j).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn add(&self, other: &MultiIndex) -> MultiIndex {
        MultiIndex {
            l: self.l.iter().zip(&other.l).map(|(a, b)| a + b).collect(),
            j: self.j.iter().zip(&other.j).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn neg(&self) -> MultiIndex {
        MultiIndex {
            l: self.l.iter().map(|v| -v).collect(),
            j: self.j.iter().map(|v| -v).collect(),
        }
    }

    /// Sup distance between scalar indices.
    pub fn distance(&self, other: &MultiIndex) -> i64 {
        self.sub(other).sup_norm()
    }

    /// `‖j‖² = Σ j_r²` (Euclidean square of the spatial part only).
    pub fn j_norm_sq(&self) -> i64 {
        self.j.iter().map(|v| v * v).sum()
    }
}

/// Doubled lattice site `k = (i, a)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site {
    pub i: MultiIndex,
    pub a: u8,
}

impl Site {
    pub fn new(i: MultiIndex, a: u8) -> Self {
        debug_assert!(a <= 1);
        Site { i, a }
    }
}

/// Sup distance on the doubled lattice: `max(|i − i′|, |a − a′|)`.
pub fn sup_distance(k: &Site, kp: &Site) -> i64 {
    k.i.distance(&kp.i).max((k.a as i64 - kp.a as i64).abs())
}

/// A finite, canonically ordered set of sites with O(1) membership lookup.
///
/// The ordering is lexicographic on `(l, j, a)`. `spatial` groups the two
/// components of each scalar index so that block-structured scans (the
/// 2×2 blocks of the decay norm) avoid hashing per entry.
#[derive(Clone, Debug)]
pub struct SiteSet {
    dims: Dims,
    sites: Vec<Site>,
    index: HashMap<Site, usize>,
    spatial: Vec<(MultiIndex, [Option<usize>; 2])>,
    spatial_index: HashMap<MultiIndex, usize>,
}

impl SiteSet {
    /// Build from an arbitrary list of sites; sorts canonically and rejects
    /// duplicates or dimension mismatches.
    pub fn from_sites(dims: Dims, mut sites: Vec<Site>) -> Result<Self> {
        for s in &sites {
            if s.i.l.len() != dims.nu || s.i.j.len() != dims.d {
                return Err(Error::DimensionMismatch(format!(
                    "site ({:?},{:?},{}) does not match (ν,d)=({},{})",
                    s.i.l, s.i.j, s.a, dims.nu, dims.d
                )));
            }
            if s.a > 1 {
                return Err(Error::InvalidArgument(format!("component index {} > 1", s.a)));
            }
        }
        sites.sort();
        sites.dedup();
        let mut index = HashMap::with_capacity(sites.len());
        for (pos, s) in sites.iter().enumerate() {
            index.insert(s.clone(), pos);
        }
        let mut spatial: Vec<(MultiIndex, [Option<usize>; 2])> = Vec::new();
        let mut spatial_index = HashMap::new();
        for (pos, s) in sites.iter().enumerate() {
            match spatial_index.get(&s.i) {
                Some(&g) => {
                    let slot: &mut (MultiIndex, [Option<usize>; 2]) = &mut spatial[g];
                    slot.1[s.a as usize] = Some(pos);
                }
                None => {
                    let mut slots = [None, None];
                    slots[s.a as usize] = Some(pos);
                    spatial_index.insert(s.i.clone(), spatial.len());
                    spatial.push((s.i.clone(), slots));
                }
            }
        }
        Ok(SiteSet {
            dims,
            sites,
            index,
            spatial,
            spatial_index,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn site(&self, pos: usize) -> &Site {
        &self.sites[pos]
    }

    pub fn position(&self, site: &Site) -> Option<usize> {
        self.index.get(site).copied()
    }

    pub fn contains(&self, site: &Site) -> bool {
        self.index.contains_key(site)
    }

    /// Scalar-index groups `(i, [pos of a=0, pos of a=1])` in canonical order.
    pub fn spatial_groups(&self) -> &[(MultiIndex, [Option<usize>; 2])] {
        &self.spatial
    }

    pub fn spatial_position(&self, i: &MultiIndex) -> Option<usize> {
        self.spatial_index.get(i).copied()
    }

    /// Subset selected by a predicate (keeps canonical order).
    pub fn filter<F: Fn(&Site) -> bool>(&self, pred: F) -> Result<SiteSet> {
        SiteSet::from_sites(
            self.dims,
            self.sites.iter().filter(|s| pred(s)).cloned().collect(),
        )
    }

    /// Sup-metric diameter: 0 for singletons and the empty set.
    ///
    /// In the sup metric the diameter of a set is the largest per-coordinate
    /// spread (including the component bit), so no pairwise scan is needed.
    pub fn diameter(&self) -> i64 {
        diameter_of(&self.sites)
    }

    /// Translate every site by `l₁` in the frequency directions.
    pub fn shift_time(&self, l1: &[i64]) -> Result<SiteSet> {
        if l1.len() != self.dims.nu {
            return Err(Error::DimensionMismatch(format!(
                "shift has {} components, ν = {}",
                l1.len(),
                self.dims.nu
            )));
        }
        SiteSet::from_sites(
            self.dims,
            self.sites
                .iter()
                .map(|s| {
                    let mut i = s.i.clone();
                    for (lv, sh) in i.l.iter_mut().zip(l1) {
                        *lv += sh;
                    }
                    Site::new(i, s.a)
                })
                .collect(),
        )
    }
}

/// Sup-metric diameter of a slice of sites.
pub fn diameter_of(sites: &[Site]) -> i64 {
    if sites.len() < 2 {
        return 0;
    }
    let b = sites[0].i.dims().b();
    let mut spread: i64 = 0;
    for dim in 0..b {
        let coord = |s: &Site| -> i64 {
            if dim < s.i.l.len() {
                s.i.l[dim]
            } else {
                s.i.j[dim - s.i.l.len()]
            }
        };
        let mn = sites.iter().map(&coord).min().unwrap();
        let mx = sites.iter().map(&coord).max().unwrap();
        spread = spread.max(mx - mn);
    }
    let amin = sites.iter().map(|s| s.a as i64).min().unwrap();
    let amax = sites.iter().map(|s| s.a as i64).max().unwrap();
    spread.max(amax - amin)
}

/// Minimal sup distance between two nonempty site collections.
pub fn set_distance(a: &[Site], b: &[Site]) -> i64 {
    let mut best = i64::MAX;
    for ka in a {
        for kb in b {
            best = best.min(sup_distance(ka, kb));
        }
    }
    best
}

/// All sites within sup distance `n` of `center`, both components: the box
/// `E_{n}(center)` with `2(2n+1)^b` sites in canonical order.
pub fn box_sites(dims: Dims, center: &MultiIndex, n: i64) -> Result<SiteSet> {
    if n < 0 {
        return Err(Error::InvalidArgument(format!("box radius {n} < 0")));
    }
    if center.l.len() != dims.nu || center.j.len() != dims.d {
        return Err(Error::DimensionMismatch(
            "box center does not match lattice dimensions".into(),
        ));
    }
    let b = dims.b();
    let side = (2 * n + 1) as usize;
    let total = 2 * side.pow(b as u32);
    let mut sites = Vec::with_capacity(total);
    let mut offsets = vec![-n; b];
    loop {
        let l: Vec<i64> = (0..dims.nu).map(|r| center.l[r] + offsets[r]).collect();
        let j: Vec<i64> = (0..dims.d)
            .map(|r| center.j[r] + offsets[dims.nu + r])
            .collect();
        let i = MultiIndex::new(l, j);
        sites.push(Site::new(i.clone(), 0));
        sites.push(Site::new(i, 1));
        // Odometer over the b offset coordinates.
        let mut dim = b;
        loop {
            if dim == 0 {
                return SiteSet::from_sites(dims, sites);
            }
            dim -= 1;
            if offsets[dim] < n {
                offsets[dim] += 1;
                for o in offsets.iter_mut().skip(dim + 1) {
                    *o = -n;
                }
                break;
            }
        }
        if offsets.iter().all(|&o| o == -n) {
            // Wrapped around: enumeration complete.
            unreachable!();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mi(l: &[i64], j: &[i64]) -> MultiIndex {
        MultiIndex::new(l.to_vec(), j.to_vec())
    }

    #[test]
    fn sup_distance_mixed_components() {
        let k = Site::new(mi(&[3], &[-2]), 0);
        let kp = Site::new(mi(&[0], &[2]), 0);
        assert_eq!(sup_distance(&k, &kp), 4);
        let kq = Site::new(mi(&[3], &[-2]), 1);
        assert_eq!(sup_distance(&k, &kq), 1);
    }

    #[test]
    fn box_cardinality() {
        // 2(2n+1)^b: b=2, n=1 → 18; b=2, n=2 → 50.
        let dims = Dims::new(1, 1);
        let c = MultiIndex::zero(dims);
        assert_eq!(box_sites(dims, &c, 1).unwrap().len(), 18);
        assert_eq!(box_sites(dims, &c, 2).unwrap().len(), 50);
        // b=3 (ν=1,d=2), n=1 → 2·27 = 54.
        let dims3 = Dims::new(1, 2);
        let c3 = MultiIndex::zero(dims3);
        assert_eq!(box_sites(dims3, &c3, 1).unwrap().len(), 54);
    }

    #[test]
    fn canonical_ordering_is_lexicographic() {
        let dims = Dims::new(1, 1);
        let set = box_sites(dims, &MultiIndex::zero(dims), 1).unwrap();
        let sites = set.sites();
        for w in sites.windows(2) {
            let key = |s: &Site| (s.i.l.clone(), s.i.j.clone(), s.a);
            assert!(key(&w[0]) < key(&w[1]));
        }
        // First site is (-1,-1,0), last is (1,1,1).
        assert_eq!(sites[0], Site::new(mi(&[-1], &[-1]), 0));
        assert_eq!(sites[17], Site::new(mi(&[1], &[1]), 1));
    }

    #[test]
    fn shift_time_preserves_cardinality_and_shifts() {
        let dims = Dims::new(2, 1);
        let c = MultiIndex::zero(dims);
        let set = box_sites(dims, &c, 1).unwrap();
        let shifted = set.shift_time(&[5, -3]).unwrap();
        assert_eq!(shifted.len(), set.len());
        assert!(shifted.contains(&Site::new(mi(&[6, -2], &[1]), 1)));
        assert!(!shifted.contains(&Site::new(mi(&[0, 0], &[0]), 0)));
    }

    #[test]
    fn diameter_and_distance() {
        let dims = Dims::new(1, 1);
        let set = box_sites(dims, &MultiIndex::zero(dims), 2).unwrap();
        assert_eq!(set.diameter(), 4);
        let a = vec![Site::new(mi(&[0], &[0]), 0)];
        let b = vec![Site::new(mi(&[7], &[1]), 0), Site::new(mi(&[9], &[0]), 1)];
        assert_eq!(set_distance(&a, &b), 7);
    }

    #[test]
    fn duplicate_sites_rejected_dedup() {
        let dims = Dims::new(1, 1);
        let s = Site::new(mi(&[0], &[0]), 0);
        let set = SiteSet::from_sites(dims, vec![s.clone(), s.clone()]).unwrap();
        assert_eq!(set.len(), 1);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let dims = Dims::new(2, 1);
        let s = Site::new(mi(&[0], &[0]), 0);
        assert!(SiteSet::from_sites(dims, vec![s]).is_err());
    }
}
