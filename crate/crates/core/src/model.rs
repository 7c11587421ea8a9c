//! Random block potentials, block Anderson and Wegner orbital Hamiltonians,
//! and their variance profiles.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::TorusLattice;
use crate::rng::{complex_normal, normal};
use crate::{CMat, MaxAbs, C64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "BA")]
    BlockAnderson,
    #[serde(rename = "WO")]
    WegnerOrbital,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::BlockAnderson => write!(f, "BA"),
            ModelKind::WegnerOrbital => write!(f, "WO"),
        }
    }
}

/// Deterministic block interaction (A0, A1, A2) of the block Anderson model.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionBA {
    pub a0: CMat,
    pub a1: CMat,
    /// Used only when d = 2.
    pub a2: Option<CMat>,
}

/// Bounds used when checking an interaction. Violations of the
/// Hilbert–Schmidt and operator-norm conditions are reported as warnings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionBounds {
    pub eps_a: f64,
    /// ‖A0‖²_HS ≤ c_hs_max · W^d
    pub c_hs_max: f64,
    /// ‖A_i‖²_HS ≥ c_hs_min · W^d for i ≥ 1
    pub c_hs_min: f64,
}

impl Default for InteractionBounds {
    fn default() -> Self {
        InteractionBounds { eps_a: 0.1, c_hs_max: 4.0, c_hs_min: 0.25 }
    }
}

fn op_norm(a: &CMat) -> f64 {
    a.clone().svd(false, false).singular_values.max()
}

fn is_hermitian(a: &CMat, tol: f64) -> bool {
    (a - a.adjoint()).max_abs() <= tol
}

impl InteractionBA {
    /// A0 = 0, A1 = A2 = I.
    pub fn standard(lat: &TorusLattice) -> Self {
        let k = lat.block_volume();
        InteractionBA {
            a0: CMat::zeros(k, k),
            a1: CMat::identity(k, k),
            a2: (lat.d() == 2).then(|| CMat::identity(k, k)),
        }
    }

    /// 𝔥_λ = λ + λ·max_i ‖A_i‖.
    pub fn h_lambda(&self, lambda: f64) -> f64 {
        let mut m = op_norm(&self.a0).max(op_norm(&self.a1));
        if let Some(a2) = &self.a2 {
            m = m.max(op_norm(a2));
        }
        lambda + lambda * m
    }

    /// Hard errors for malformed input; soft conditions come back as warnings.
    pub fn validate(
        &self,
        lat: &TorusLattice,
        lambda: f64,
        bounds: &InteractionBounds,
    ) -> Result<Vec<String>> {
        let k = lat.block_volume();
        let shape_ok = |m: &CMat| m.nrows() == k && m.ncols() == k;
        if !shape_ok(&self.a0) || !shape_ok(&self.a1) {
            return Err(Error::Config(format!("interaction blocks must be {k}x{k}")));
        }
        if !is_hermitian(&self.a0, 1e-12) {
            return Err(Error::Config("A0 must be Hermitian".into()));
        }
        if lat.d() == 2 {
            let a2 = self
                .a2
                .as_ref()
                .ok_or_else(|| Error::Config("d = 2 requires A2".into()))?;
            if !shape_ok(a2) {
                return Err(Error::Config(format!("A2 must be {k}x{k}")));
            }
            let herm = is_hermitian(&self.a1, 1e-12) && is_hermitian(a2, 1e-12);
            let psi = psi_ba(lat, self);
            let sym = (&psi - psi.transpose()).max_abs() <= 1e-12;
            if !herm && !sym {
                return Err(Error::Config(
                    "d = 2 requires A1, A2 Hermitian or Psi symmetric".into(),
                ));
            }
        }
        let mut warnings = Vec::new();
        let wd = lat.wd();
        let hs = |m: &CMat| m.norm_squared();
        if hs(&self.a0) > bounds.c_hs_max * wd {
            warnings.push(format!("||A0||_HS^2 = {:.3} exceeds {} W^d", hs(&self.a0), bounds.c_hs_max));
        }
        let mut others = vec![("A1", &self.a1)];
        if lat.d() == 2 {
            others.push(("A2", self.a2.as_ref().unwrap()));
        }
        for (name, a) in others {
            let v = hs(a);
            if v < bounds.c_hs_min * wd || v > bounds.c_hs_max * wd {
                warnings.push(format!("||{name}||_HS^2 = {v:.3} not comparable to W^d = {wd}"));
            }
        }
        let h = self.h_lambda(lambda);
        let cap = (lat.w() as f64).powf(-bounds.eps_a);
        if h > cap {
            warnings.push(format!("h_lambda = {h:.4} exceeds W^-eps_A = {cap:.4}"));
        }
        Ok(warnings)
    }
}

/// Parse a complex matrix file: one row per line, entries "re,im" separated
/// by whitespace. Blank lines and lines starting with '#' are skipped.
pub fn parse_complex_matrix(text: &str) -> Result<CMat> {
    let mut rows: Vec<Vec<C64>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut row = Vec::new();
        for tok in line.split_whitespace() {
            let (re, im) = tok
                .split_once(',')
                .ok_or_else(|| Error::Input(format!("line {}: expected re,im got {tok:?}", ln + 1)))?;
            let p = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Input(format!("line {}: bad number {s:?}", ln + 1)))
            };
            row.push(C64::new(p(re)?, p(im)?));
        }
        rows.push(row);
    }
    let r = rows.len();
    if r == 0 {
        return Err(Error::Input("empty matrix".into()));
    }
    let c = rows[0].len();
    if rows.iter().any(|row| row.len() != c) || r != c {
        return Err(Error::Input(format!("matrix must be square, got {r} rows")));
    }
    Ok(CMat::from_fn(r, c, |i, j| rows[i][j]))
}

pub fn format_complex_matrix(m: &CMat) -> String {
    let mut s = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols())
            .map(|j| format!("{:e},{:e}", m[(i, j)].re, m[(i, j)].im))
            .collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

fn add_block(psi: &mut CMat, lat: &TorusLattice, a: usize, b: usize, blk: &CMat) {
    let (ra, rb) = (lat.block_range(a), lat.block_range(b));
    let mut view = psi.view_mut((ra.start, rb.start), (ra.len(), rb.len()));
    view += blk;
}

/// Ψ for the block Anderson model: A0 on diagonal blocks, A_i towards +e_i,
/// A_i* towards −e_i.
pub fn psi_ba(lat: &TorusLattice, inter: &InteractionBA) -> CMat {
    let n = lat.num_sites();
    let mut psi = CMat::zeros(n, n);
    let a1h = inter.a1.adjoint();
    let a2h = inter.a2.as_ref().map(|a| a.adjoint());
    for a in 0..lat.num_blocks() {
        add_block(&mut psi, lat, a, a, &inter.a0);
        let ba = lat.block_from_linear(a);
        let shift = |o: [i64; 2]| lat.block_linear(lat.normalize_block([ba.0[0] + o[0], ba.0[1] + o[1]]));
        add_block(&mut psi, lat, a, shift([1, 0]), &inter.a1);
        add_block(&mut psi, lat, a, shift([-1, 0]), &a1h);
        if lat.d() == 2 {
            let a2 = inter.a2.as_ref().expect("d = 2 needs A2");
            add_block(&mut psi, lat, a, shift([0, 1]), a2);
            add_block(&mut psi, lat, a, shift([0, -1]), a2h.as_ref().unwrap());
        }
    }
    psi
}

/// Block-diagonal GUE potential with entry variance W^{-d}.
pub fn sample_block_potential<R: rand::Rng + ?Sized>(lat: &TorusLattice, rng: &mut R) -> CMat {
    let n = lat.num_sites();
    let var = 1.0 / lat.wd();
    let mut v = CMat::zeros(n, n);
    for b in 0..lat.num_blocks() {
        let r = lat.block_range(b);
        for i in r.clone() {
            v[(i, i)] = C64::new(normal(rng, var), 0.0);
            for j in i + 1..r.end {
                let z = complex_normal(rng, var);
                v[(i, j)] = z;
                v[(j, i)] = z.conj();
            }
        }
    }
    v
}

/// Hermitian Ψ^WO: independent complex Gaussians of variance W^{-d} on
/// neighbouring blocks.
pub fn sample_psi_wo<R: rand::Rng + ?Sized>(lat: &TorusLattice, rng: &mut R) -> CMat {
    let n = lat.num_sites();
    let var = 1.0 / lat.wd();
    let mut psi = CMat::zeros(n, n);
    for a in 0..lat.num_blocks() {
        let mut nbrs = lat.block_neighbors(a);
        nbrs.sort_unstable();
        nbrs.dedup();
        for b in nbrs.into_iter().filter(|&b| b > a) {
            for i in lat.block_range(a) {
                for j in lat.block_range(b) {
                    let z = complex_normal(rng, var);
                    psi[(i, j)] = z;
                    psi[(j, i)] = z.conj();
                }
            }
        }
    }
    psi
}

/// Record of how a sample was drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub experiment: u32,
    pub index: u32,
}

#[derive(Clone, Debug)]
pub struct HamiltonianSample {
    pub kind: ModelKind,
    pub lattice: TorusLattice,
    pub lambda: f64,
    pub h: CMat,
    pub seed: Option<SeedRecord>,
}

/// Source of the interaction term.
pub enum Interaction<'a, R: rand::Rng + ?Sized> {
    Ba(&'a InteractionBA),
    /// Precomputed Ψ (BA, avoids rebuilding per sample).
    BaPsi(&'a CMat),
    Wo(&'a mut R),
}

/// H = λΨ + V (BA) or H = (1+2dλ²)^{-1/2}(λΨ^WO + V) (WO).
pub fn build_hamiltonian<R: rand::Rng + ?Sized>(
    kind: ModelKind,
    lat: &TorusLattice,
    lambda: f64,
    interaction: Interaction<'_, R>,
    v: CMat,
) -> Result<HamiltonianSample> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("coupling lambda = {lambda} must be >= 0")));
    }
    let n = lat.num_sites();
    if v.nrows() != n || v.ncols() != n {
        return Err(Error::Input("potential has wrong dimension".into()));
    }
    let h = match (kind, interaction) {
        (ModelKind::BlockAnderson, Interaction::Ba(inter)) => {
            inter.validate(lat, lambda, &InteractionBounds::default())?;
            let psi = psi_ba(lat, inter);
            psi * C64::from(lambda) + v
        }
        (ModelKind::BlockAnderson, Interaction::BaPsi(psi)) => psi * C64::from(lambda) + v,
        (ModelKind::WegnerOrbital, Interaction::Wo(rng)) => {
            let psi = sample_psi_wo(lat, rng);
            let norm = (1.0 + 2.0 * lat.d() as f64 * lambda * lambda).sqrt();
            (psi * C64::from(lambda) + v) / C64::from(norm)
        }
        _ => return Err(Error::Config(format!("interaction does not match model {kind}"))),
    };
    Ok(HamiltonianSample { kind, lattice: *lat, lambda, h, seed: None })
}

/// Variance profile S = S^{L→n} ⊗ 𝐄, stored through its block projection.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceMatrix {
    pub lattice: TorusLattice,
    /// n^d × n^d block projection S^{L→n}.
    pub s_ln: DMatrix<f64>,
}

impl VarianceMatrix {
    /// S_xy.
    pub fn entry(&self, x: usize, y: usize) -> f64 {
        let (bx, by) = (self.lattice.block_of_linear(x), self.lattice.block_of_linear(y));
        self.s_ln[(bx, by)] / self.lattice.wd()
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.lattice.num_sites();
        DMatrix::from_fn(n, n, |x, y| self.entry(x, y))
    }

    /// Nonzero entries of S^{L→n} as (a, b, value).
    pub fn block_nonzeros(&self) -> Vec<(usize, usize, f64)> {
        let nb = self.s_ln.nrows();
        let mut v = Vec::new();
        for a in 0..nb {
            for b in 0..nb {
                let s = self.s_ln[(a, b)];
                if s != 0.0 {
                    v.push((a, b, s));
                }
            }
        }
        v
    }
}

/// Block adjacency Λ_n.
pub fn block_adjacency(lat: &TorusLattice) -> DMatrix<f64> {
    let nb = lat.num_blocks();
    let mut m = DMatrix::zeros(nb, nb);
    for a in 0..nb {
        for b in lat.block_neighbors(a) {
            m[(a, b)] += 1.0;
        }
    }
    m
}

pub fn variance_matrices(kind: ModelKind, lat: &TorusLattice, lambda: f64) -> VarianceMatrix {
    let nb = lat.num_blocks();
    let s_ln = match kind {
        ModelKind::BlockAnderson => DMatrix::identity(nb, nb),
        ModelKind::WegnerOrbital => {
            let c = 1.0 / (1.0 + 2.0 * lat.d() as f64 * lambda * lambda);
            (DMatrix::identity(nb, nb) + block_adjacency(lat) * (lambda * lambda)) * c
        }
    };
    VarianceMatrix { lattice: *lat, s_ln }
}
