//! Torus geometry with a block decomposition.
//!
//! Sites live on the centered torus ⟦−(L−1)/2, (L−1)/2⟧^d with L = nW.
//! Storage order is row-major over (block coordinates, intra-block
//! coordinates), so the sites of one block form a contiguous index range.

use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::error::{Error, Result};

/// Site on ℤ_L^d. Unused coordinates are zero when d = 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteIndex(pub [i64; 2]);

/// Block on the block torus ℤ_n^d.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockIndex(pub [i64; 2]);

impl SiteIndex {
    pub fn d1(x: i64) -> Self {
        SiteIndex([x, 0])
    }
    pub fn d2(x: i64, y: i64) -> Self {
        SiteIndex([x, y])
    }
}

impl BlockIndex {
    pub fn d1(x: i64) -> Self {
        BlockIndex([x, 0])
    }
    pub fn d2(x: i64, y: i64) -> Self {
        BlockIndex([x, y])
    }
}

/// Periodic distances returned by [`TorusLattice::torus_distance`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Distances {
    /// ‖x−y‖_L
    pub site: i64,
    /// ⟨x−y⟩ = ‖x−y‖_L + W
    pub site_bracket: i64,
    /// ‖[x]−[y]‖_n
    pub block: i64,
    /// ⟨[x]−[y]⟩ = ‖[x]−[y]‖_n + 1
    pub block_bracket: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TorusLattice {
    d: usize,
    w: usize,
    n: usize,
}

/// Representative of `v` modulo `m` in ⟦−(m−1)/2, (m−1)/2⟧ (m odd).
pub fn centered_rep(v: i64, m: i64) -> i64 {
    let h = (m - 1) / 2;
    (v + h).rem_euclid(m) - h
}

impl TorusLattice {
    pub fn new(d: usize, w: usize, n: usize) -> Result<Self> {
        if d != 1 && d != 2 {
            return Err(Error::Input(format!("dimension d={d} not in {{1,2}}")));
        }
        if w == 0 || w.is_multiple_of(2) {
            return Err(Error::Input(format!("block size W={w} must be odd")));
        }
        if n == 0 || n.is_multiple_of(2) {
            return Err(Error::Input(format!("block count n={n} must be odd")));
        }
        Ok(TorusLattice { d, w, n })
    }

    pub fn d(&self) -> usize {
        self.d
    }
    pub fn w(&self) -> usize {
        self.w
    }
    pub fn n(&self) -> usize {
        self.n
    }
    /// Torus side L = nW.
    pub fn l(&self) -> usize {
        self.n * self.w
    }
    /// Number of sites N = L^d.
    pub fn num_sites(&self) -> usize {
        self.l().pow(self.d as u32)
    }
    /// Number of blocks n^d.
    pub fn num_blocks(&self) -> usize {
        self.n.pow(self.d as u32)
    }
    /// Sites per block W^d.
    pub fn block_volume(&self) -> usize {
        self.w.pow(self.d as u32)
    }
    /// W^d as a float.
    pub fn wd(&self) -> f64 {
        self.block_volume() as f64
    }

    fn check_range(&self, c: &[i64; 2], m: usize, what: &str) -> Result<()> {
        let h = ((m - 1) / 2) as i64;
        for (i, &v) in c.iter().enumerate() {
            if i < self.d {
                if v < -h || v > h {
                    return Err(Error::Input(format!(
                        "{what} coordinate {v} outside [{}, {h}]",
                        -h
                    )));
                }
            } else if v != 0 {
                return Err(Error::Input(format!("{what} has nonzero unused coordinate")));
            }
        }
        Ok(())
    }

    /// Normalize arbitrary integer coordinates to the canonical site range.
    pub fn normalize_site(&self, x: [i64; 2]) -> SiteIndex {
        let l = self.l() as i64;
        let mut c = [0; 2];
        for i in 0..self.d {
            c[i] = centered_rep(x[i], l);
        }
        SiteIndex(c)
    }

    pub fn normalize_block(&self, b: [i64; 2]) -> BlockIndex {
        let n = self.n as i64;
        let mut c = [0; 2];
        for i in 0..self.d {
            c[i] = centered_rep(b[i], n);
        }
        BlockIndex(c)
    }

    /// Returns ([x], {x}) with x = W·[x] + {x} and {x} in the central block.
    pub fn block_of(&self, x: SiteIndex) -> Result<(BlockIndex, SiteIndex)> {
        self.check_range(&x.0, self.l(), "site")?;
        let w = self.w as i64;
        let h = (w - 1) / 2;
        let mut b = [0; 2];
        let mut r = [0; 2];
        for i in 0..self.d {
            b[i] = (x.0[i] + h).div_euclid(w);
            r[i] = x.0[i] - w * b[i];
        }
        Ok((BlockIndex(b), SiteIndex(r)))
    }

    pub fn torus_distance(&self, x: SiteIndex, y: SiteIndex) -> Result<Distances> {
        let (bx, _) = self.block_of(x)?;
        let (by, _) = self.block_of(y)?;
        let l = self.l() as i64;
        let site: i64 = (0..self.d).map(|i| centered_rep(x.0[i] - y.0[i], l).abs()).sum();
        let block = self.block_distance(bx, by);
        Ok(Distances {
            site,
            site_bracket: site + self.w as i64,
            block,
            block_bracket: block + 1,
        })
    }

    /// ‖[x]−[y]‖_n for canonical blocks.
    pub fn block_distance(&self, a: BlockIndex, b: BlockIndex) -> i64 {
        let n = self.n as i64;
        (0..self.d).map(|i| centered_rep(a.0[i] - b.0[i], n).abs()).sum()
    }

    /// Linear block index, row-major over coordinates shifted to [0, n).
    pub fn block_linear(&self, b: BlockIndex) -> usize {
        let n = self.n as i64;
        let h = (n - 1) / 2;
        let mut idx = 0usize;
        for i in 0..self.d {
            idx = idx * self.n + (centered_rep(b.0[i], n) + h) as usize;
        }
        idx
    }

    pub fn block_from_linear(&self, mut idx: usize) -> BlockIndex {
        let h = ((self.n - 1) / 2) as i64;
        let mut c = [0; 2];
        for i in (0..self.d).rev() {
            c[i] = (idx % self.n) as i64 - h;
            idx /= self.n;
        }
        BlockIndex(c)
    }

    /// Linear site index: block_linear · W^d + intra-block offset.
    pub fn site_linear(&self, x: SiteIndex) -> Result<usize> {
        let (b, r) = self.block_of(x)?;
        let w = self.w as i64;
        let h = (w - 1) / 2;
        let mut off = 0usize;
        for i in 0..self.d {
            off = off * self.w + (r.0[i] + h) as usize;
        }
        Ok(self.block_linear(b) * self.block_volume() + off)
    }

    pub fn site_from_linear(&self, idx: usize) -> SiteIndex {
        let vol = self.block_volume();
        let b = self.block_from_linear(idx / vol);
        let mut off = idx % vol;
        let h = ((self.w - 1) / 2) as i64;
        let mut r = [0; 2];
        for i in (0..self.d).rev() {
            r[i] = (off % self.w) as i64 - h;
            off /= self.w;
        }
        let w = self.w as i64;
        SiteIndex([w * b.0[0] + r[0], w * b.0[1] + r[1]])
    }

    /// Contiguous linear index range of the sites of block `b` (linear).
    pub fn block_range(&self, b: usize) -> Range<usize> {
        let v = self.block_volume();
        b * v..(b + 1) * v
    }

    /// Linear block of a linear site.
    pub fn block_of_linear(&self, x: usize) -> usize {
        x / self.block_volume()
    }

    /// Linear index of [a] − [b] on the block torus.
    pub fn block_sub(&self, a: usize, b: usize) -> usize {
        let (ba, bb) = (self.block_from_linear(a), self.block_from_linear(b));
        self.block_linear(self.normalize_block([ba.0[0] - bb.0[0], ba.0[1] - bb.0[1]]))
    }

    /// Linear index of [a] + [b] on the block torus.
    pub fn block_add(&self, a: usize, b: usize) -> usize {
        let (ba, bb) = (self.block_from_linear(a), self.block_from_linear(b));
        self.block_linear(self.normalize_block([ba.0[0] + bb.0[0], ba.0[1] + bb.0[1]]))
    }

    /// Block distance between linear block indices.
    pub fn block_distance_linear(&self, a: usize, b: usize) -> i64 {
        self.block_distance(self.block_from_linear(a), self.block_from_linear(b))
    }

    /// Linear index of the origin block [0].
    pub fn origin_block(&self) -> usize {
        self.block_linear(BlockIndex([0, 0]))
    }

    /// Nearest-neighbour offsets in the block torus, one per axis and direction.
    pub fn unit_offsets(&self) -> Vec<[i64; 2]> {
        let mut v = vec![[1, 0], [-1, 0]];
        if self.d == 2 {
            v.push([0, 1]);
            v.push([0, -1]);
        }
        v
    }

    /// Block adjacency matrix Λ_n entries: list of (a, b) with [a] ∼ [b].
    /// Duplicates appear when n = 1 and are kept, matching a periodic sum.
    pub fn block_neighbors(&self, a: usize) -> Vec<usize> {
        let ba = self.block_from_linear(a);
        self.unit_offsets()
            .into_iter()
            .map(|o| self.block_linear(self.normalize_block([ba.0[0] + o[0], ba.0[1] + o[1]])))
            .collect()
    }

    /// Precomputed table `t[a * nb + b] = [a] − [b]`.
    pub fn block_sub_table(&self) -> Vec<usize> {
        let nb = self.num_blocks();
        let mut t = vec![0; nb * nb];
        for a in 0..nb {
            for b in 0..nb {
                t[a * nb + b] = self.block_sub(a, b);
            }
        }
        t
    }

    /// Iterator over all canonical sites in linear order.
    pub fn sites(&self) -> impl Iterator<Item = SiteIndex> + '_ {
        (0..self.num_sites()).map(move |i| self.site_from_linear(i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn block_of_examples() {
        let lat = TorusLattice::new(1, 3, 5).unwrap();
        assert_eq!(
            lat.block_of(SiteIndex::d1(7)).unwrap(),
            (BlockIndex::d1(2), SiteIndex::d1(1))
        );
        assert_eq!(
            lat.block_of(SiteIndex::d1(0)).unwrap(),
            (BlockIndex::d1(0), SiteIndex::d1(0))
        );
        let lat2 = TorusLattice::new(2, 3, 5).unwrap();
        assert_eq!(
            lat2.block_of(SiteIndex::d2(4, -4)).unwrap(),
            (BlockIndex::d2(1, -1), SiteIndex::d2(1, -1))
        );
    }

    #[test]
    fn out_of_range_rejected() {
        let lat = TorusLattice::new(1, 3, 5).unwrap();
        assert!(lat.block_of(SiteIndex::d1(8)).is_err());
        assert!(TorusLattice::new(1, 4, 5).is_err());
        assert!(TorusLattice::new(3, 3, 5).is_err());
    }

    #[test]
    fn distance_examples() {
        let lat = TorusLattice::new(1, 3, 5).unwrap();
        let dd = lat.torus_distance(SiteIndex::d1(7), SiteIndex::d1(-7)).unwrap();
        assert_eq!(dd.site, 1);
        let dd = lat.torus_distance(SiteIndex::d1(2), SiteIndex::d1(2)).unwrap();
        assert_eq!(dd.site_bracket, 3);
        assert_eq!(lat.block_distance(BlockIndex::d1(2), BlockIndex::d1(-2)), 1);
    }

    #[test]
    fn blocks_are_contiguous() {
        let lat = TorusLattice::new(2, 3, 3).unwrap();
        for i in 0..lat.num_sites() {
            let x = lat.site_from_linear(i);
            assert_eq!(lat.site_linear(x).unwrap(), i);
            let (b, _) = lat.block_of(x).unwrap();
            assert!(lat.block_range(lat.block_linear(b)).contains(&i));
        }
    }

    #[test]
    fn metric_exhaustive_small() {
        for (d, w, n) in [(1, 3, 7), (1, 7, 3), (2, 3, 3)] {
            let lat = TorusLattice::new(d, w, n).unwrap();
            let sites: Vec<_> = lat.sites().collect();
            let dist = |a: SiteIndex, b: SiteIndex| lat.torus_distance(a, b).unwrap().site;
            for &x in &sites {
                assert_eq!(dist(x, x), 0);
                for &y in &sites {
                    assert_eq!(dist(x, y), dist(y, x));
                    if x != y {
                        assert!(dist(x, y) > 0);
                    }
                    for &z in sites.iter().step_by(3) {
                        assert!(dist(x, z) <= dist(x, y) + dist(y, z));
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn block_of_reassembles(w in (0usize..4).prop_map(|k| 2 * k + 1),
                                n in (0usize..4).prop_map(|k| 2 * k + 1),
                                d in 1usize..3, seed in any::<u64>()) {
            let lat = TorusLattice::new(d, w, n).unwrap();
            let i = (seed % lat.num_sites() as u64) as usize;
            let x = lat.site_from_linear(i);
            let (b, r) = lat.block_of(x).unwrap();
            let ww = w as i64;
            prop_assert_eq!(x.0, [ww * b.0[0] + r.0[0], ww * b.0[1] + r.0[1]]);
            let h = (ww - 1) / 2;
            prop_assert!(r.0.iter().all(|&c| c.abs() <= h));
        }

        #[test]
        fn block_arith_roundtrip(n in (1usize..5).prop_map(|k| 2 * k + 1), a in 0usize..100, b in 0usize..100) {
            let lat = TorusLattice::new(1, 3, n).unwrap();
            let (a, b) = (a % n, b % n);
            prop_assert_eq!(lat.block_add(lat.block_sub(a, b), b), a);
        }
    }
}
