//! Deterministic approximation: the self-consistent Stieltjes value m, the
//! matrix M, the characteristic flow, M^{(σ,σ')}, Θ-propagators and the
//! site-level diffusion matrices.

use std::sync::Arc;

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::TorusLattice;
use crate::model::{psi_ba, variance_matrices, InteractionBA, ModelKind, VarianceMatrix};
use crate::{CMat, MaxAbs, RMat, Sign, C64};

const I: C64 = C64 { re: 0.0, im: 1.0 };

/// Semicircle Stieltjes transform, branch with Im m > 0.
pub fn m_sc(z: C64) -> Result<C64> {
    if z.im < 0.0 {
        return Err(Error::Domain(format!("Im z = {} < 0", z.im)));
    }
    if z.im == 0.0 && z.re.abs() >= 2.0 {
        return Err(Error::Domain(format!("real z = {} outside (-2, 2)", z.re)));
    }
    let r = (z * z - 4.0).sqrt();
    let a = (-z + r) / 2.0;
    let b = (-z - r) / 2.0;
    Ok(if a.im >= b.im { a } else { b })
}

/// Eigendecomposition of Ψ reused for every resolvent of λΨ.
#[derive(Clone, Debug)]
pub struct SpectralCache {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: CMat,
}

impl SpectralCache {
    pub fn new(psi: &CMat) -> Self {
        let eig = SymmetricEigen::new(psi.clone());
        SpectralCache {
            eigenvalues: eig.eigenvalues.iter().copied().collect(),
            eigenvectors: eig.eigenvectors,
        }
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// N^{-1} Σ_i (λψ_i − w)^{-1} and N^{-1} Σ_i (λψ_i − w)^{-2}.
    fn traces(&self, lambda: f64, w: C64) -> (C64, C64) {
        let mut s1 = C64::new(0.0, 0.0);
        let mut s2 = C64::new(0.0, 0.0);
        for &p in &self.eigenvalues {
            let g = 1.0 / (C64::from(lambda * p) - w);
            s1 += g;
            s2 += g * g;
        }
        let n = self.dim() as f64;
        (s1 / n, s2 / n)
    }

    /// U diag((λψ_i − w)^{-1}) U*.
    pub fn resolvent(&self, lambda: f64, w: C64) -> CMat {
        let u = &self.eigenvectors;
        let mut scaled = u.clone();
        for (j, &p) in self.eigenvalues.iter().enumerate() {
            let g = 1.0 / (C64::from(lambda * p) - w);
            for i in 0..u.nrows() {
                scaled[(i, j)] *= g;
            }
        }
        scaled * u.adjoint()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub damping: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { damping: 0.5, max_iter: 10_000, tol: 1e-12 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveReport {
    pub m: C64,
    pub residual: f64,
    pub iterations: usize,
}

/// Solve m = N^{-1} tr(λΨ − z − t·m)^{-1} with Im m > 0.
///
/// Damped fixed point from m_sc(z); the damping halves whenever an iterate
/// leaves the upper half plane. Real z in (−2, 2) is accepted and gives the
/// boundary value m(E + i0). After the tolerance is met, Newton steps polish
/// the root to machine precision.
pub fn solve_m(z: C64, lambda: f64, psi: &SpectralCache, t: f64, opts: &SolverOptions) -> Result<SolveReport> {
    if z.im < 0.0 || (z.im == 0.0 && z.re.abs() >= 2.0) {
        return Err(Error::Domain(format!("z = {z} not in the upper half plane or the bulk")));
    }
    let f = |m: C64| psi.traces(lambda, z + t * m);
    let mut m = if t > 0.0 {
        m_sc(z / t.sqrt()).map(|u| u / t.sqrt()).unwrap_or(I)
    } else {
        psi.traces(lambda, z).0
    };
    let loose = opts.tol.max(1e-8);
    let mut theta = opts.damping;
    let mut residual = f64::INFINITY;
    let mut it = 0;
    while it < opts.max_iter {
        it += 1;
        let fm = f(m).0;
        residual = (fm - m).norm();
        if residual <= loose {
            break;
        }
        let mut next = m * (1.0 - theta) + fm * theta;
        while next.im <= 0.0 && theta > 1e-12 {
            theta *= 0.5;
            next = m * (1.0 - theta) + fm * theta;
        }
        m = next;
    }
    for _ in 0..8 {
        let (fm, dfm) = f(m);
        let g = fm - m;
        let dg = dfm * t - 1.0;
        let cand = m - g / dg;
        let r_new = (f(cand).0 - cand).norm();
        if cand.im > 0.0 && r_new < residual {
            m = cand;
            residual = r_new;
        } else {
            break;
        }
    }
    if residual > opts.tol {
        return Err(Error::Solver { iterations: it, residual });
    }
    Ok(SolveReport { m, residual, iterations: it })
}

/// M = (λΨ − z − t·m)^{-1} by direct inversion.
pub fn build_m(z: C64, lambda: f64, psi: &CMat, m: C64, t: f64) -> Result<CMat> {
    let n = psi.nrows();
    let a = psi * C64::from(lambda) - CMat::identity(n, n) * (z + t * m);
    a.try_inverse().ok_or_else(|| Error::Numeric("singular matrix in build_m".into()))
}

/// Deterministic model data: kind, lattice, coupling, Ψ spectrum (BA) and S.
#[derive(Clone, Debug)]
pub struct Background {
    pub kind: ModelKind,
    pub lattice: TorusLattice,
    pub lambda: f64,
    pub psi: Option<Arc<CMat>>,
    pub spectral: Option<Arc<SpectralCache>>,
    pub var: Arc<VarianceMatrix>,
    pub opts: SolverOptions,
}

impl Background {
    pub fn block_anderson(lat: &TorusLattice, lambda: f64, inter: &InteractionBA) -> Result<Self> {
        inter.validate(lat, lambda, &Default::default())?;
        let psi = psi_ba(lat, inter);
        let spectral = SpectralCache::new(&psi);
        Ok(Background {
            kind: ModelKind::BlockAnderson,
            lattice: *lat,
            lambda,
            psi: Some(Arc::new(psi)),
            spectral: Some(Arc::new(spectral)),
            var: Arc::new(variance_matrices(ModelKind::BlockAnderson, lat, lambda)),
            opts: SolverOptions::default(),
        })
    }

    pub fn wegner_orbital(lat: &TorusLattice, lambda: f64) -> Self {
        Background {
            kind: ModelKind::WegnerOrbital,
            lattice: *lat,
            lambda,
            psi: None,
            spectral: None,
            var: Arc::new(variance_matrices(ModelKind::WegnerOrbital, lat, lambda)),
            opts: SolverOptions::default(),
        }
    }

    /// Same Ψ with a different coupling.
    pub fn with_lambda(&self, lambda: f64) -> Self {
        let mut b = self.clone();
        b.lambda = lambda;
        b.var = Arc::new(variance_matrices(self.kind, &self.lattice, lambda));
        b
    }

    pub fn solve(&self, z: C64) -> Result<SolveReport> {
        match &self.spectral {
            Some(sp) => solve_m(z, self.lambda, sp, 1.0, &self.opts),
            None => Ok(SolveReport { m: m_sc(z)?, residual: 0.0, iterations: 0 }),
        }
    }

    pub fn m(&self, z: C64) -> Result<C64> {
        Ok(self.solve(z)?.m)
    }

    /// M(z) = (λΨ − z − m)^{-1} via the cached spectrum; m_sc·I for WO.
    pub fn m_matrix(&self, z: C64, m: C64) -> CMat {
        let n = self.lattice.num_sites();
        match &self.spectral {
            Some(sp) => sp.resolvent(self.lambda, z + m),
            None => CMat::identity(n, n) * m,
        }
    }

    /// Flow state at real energy E and time t.
    pub fn flow_state(&self, e: f64, t: f64) -> Result<FlowState> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("flow time t = {t} outside [0,1]")));
        }
        let m = self.m(C64::new(e, 0.0))?;
        if m.im <= 0.0 {
            return Err(Error::Domain(format!("E = {e} outside the bulk (Im m = {})", m.im)));
        }
        let mm = self.m_matrix(C64::new(e, 0.0), m);
        let mm_adj = mm.adjoint();
        Ok(FlowState {
            kind: self.kind,
            lattice: self.lattice,
            lambda: self.lambda,
            e,
            t,
            z_t: C64::new(e, 0.0) + m * (1.0 - t),
            eta_t: (1.0 - t) * m.im,
            m,
            mm: Arc::new(mm),
            mm_adj: Arc::new(mm_adj),
            var: self.var.clone(),
        })
    }
}

/// (E, λ, t, z_t, η_t, m, M) at one point of the flow.
#[derive(Clone, Debug)]
pub struct FlowState {
    pub kind: ModelKind,
    pub lattice: TorusLattice,
    pub lambda: f64,
    pub e: f64,
    pub t: f64,
    pub z_t: C64,
    pub eta_t: f64,
    pub m: C64,
    pub mm: Arc<CMat>,
    pub mm_adj: Arc<CMat>,
    pub var: Arc<VarianceMatrix>,
}

impl FlowState {
    /// Same flow, different time.
    pub fn at(&self, t: f64) -> FlowState {
        let mut f = self.clone();
        f.t = t;
        f.z_t = C64::new(self.e, 0.0) + self.m * (1.0 - t);
        f.eta_t = (1.0 - t) * self.m.im;
        f
    }

    pub fn m_of(&self, s: Sign) -> C64 {
        s.apply(self.m)
    }

    /// M(σ): M for `Plus`, M* for `Minus`.
    pub fn mat(&self, s: Sign) -> &CMat {
        match s {
            Sign::Plus => &self.mm,
            Sign::Minus => &self.mm_adj,
        }
    }

    pub fn s_ln(&self) -> &RMat {
        &self.var.s_ln
    }

    /// Largest |W^{-d} Σ_{x∈[a]} M_xx − m| over blocks.
    pub fn block_average_residual(&self) -> f64 {
        let lat = &self.lattice;
        (0..lat.num_blocks())
            .map(|b| {
                let s: C64 = lat.block_range(b).map(|x| self.mm[(x, x)]).sum();
                (s / lat.wd() - self.m).norm()
            })
            .fold(0.0, f64::max)
    }

    /// |N^{-1} tr M − m|.
    pub fn trace_residual(&self) -> f64 {
        (self.mm.trace() / self.lattice.num_sites() as f64 - self.m).norm()
    }

    /// Residual of M = (λΨ − z_t − t·𝒮(M))^{-1}, measured as ‖(λΨ − z_t − t𝒮(M))M − I‖_max.
    pub fn flow_equation_residual(&self, psi: Option<&CMat>) -> f64 {
        let lat = &self.lattice;
        let n = lat.num_sites();
        let diag: Vec<C64> = (0..n)
            .map(|i| {
                let bi = lat.block_of_linear(i);
                (0..lat.num_blocks())
                    .map(|b| {
                        let s = self.var.s_ln[(bi, b)] / lat.wd();
                        lat.block_range(b).map(|k| self.mm[(k, k)] * s).sum::<C64>()
                    })
                    .sum()
            })
            .collect();
        let mut a = match psi {
            Some(p) => p * C64::from(self.lambda),
            None => CMat::zeros(n, n),
        };
        for i in 0..n {
            a[(i, i)] -= self.z_t + diag[i] * self.t;
        }
        (a * &*self.mm - CMat::identity(n, n)).max_abs()
    }
}

/// Parameters (t0, E0, λ0) mapping z to a flow endpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    pub t0: f64,
    pub e0: f64,
    pub lambda0: f64,
    /// m(z, λ) at the target.
    pub m_z: C64,
}

/// Flow endpoint for a target z in the bulk window |Re z| ≤ 2 − κ, Im z ∈ (0, 1].
///
/// For the Wegner orbital model m does not depend on λ and the coupling is kept.
pub fn flow_params(bg: &Background, z: C64, kappa: f64) -> Result<FlowParams> {
    if !(z.im > 0.0 && z.im <= 1.0) || z.re.abs() > 2.0 - kappa {
        return Err(Error::Domain(format!("z = {z} outside bulk window (kappa = {kappa})")));
    }
    let mz = bg.m(z)?;
    let t0 = mz.im / (mz.im + z.im);
    let e0 = (t0 * z.re - (1.0 - t0) * mz.re) / t0.sqrt();
    let lambda0 = match bg.kind {
        ModelKind::BlockAnderson => t0.sqrt() * bg.lambda,
        ModelKind::WegnerOrbital => bg.lambda,
    };
    Ok(FlowParams { t0, e0, lambda0, m_z: mz })
}

/// Residuals of √t0·m(E0,λ0) = m(z,λ), z_{t0}(E0,λ0) = √t0·z and
/// √t0·M(E0,λ0) = M(z,λ).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowIdentityReport {
    pub params: FlowParams,
    pub m_residual: f64,
    pub z_residual: f64,
    pub matrix_residual: f64,
    /// max over a t-grid of |η_t(E0,λ0) − (1−t) Im m(z,λ)/√t0|
    pub eta_residual: f64,
}

pub fn check_flow_identities(bg: &Background, z: C64, kappa: f64) -> Result<FlowIdentityReport> {
    let p = flow_params(bg, z, kappa)?;
    let bg0 = bg.with_lambda(p.lambda0);
    let f0 = bg0.flow_state(p.e0, p.t0)?;
    let st = p.t0.sqrt();
    let m_residual = (f0.m * st - p.m_z).norm();
    let z_residual = (f0.z_t - z * st).norm();
    let mz = bg.m_matrix(z, p.m_z);
    let matrix_residual = (&*f0.mm * C64::from(st) - mz).max_abs();
    let eta_residual = [0.0, 0.25, 0.5, p.t0]
        .iter()
        .map(|&t| (f0.at(t).eta_t - (1.0 - t) * p.m_z.im / st).abs())
        .fold(0.0, f64::max);
    Ok(FlowIdentityReport { params: p, m_residual, z_residual, matrix_residual, eta_residual })
}

/// Sample H once and compare G(z,λ) with √t0·(H_{t0} − z_{t0})^{-1} under the
/// coupling V_{t0} = √t0·V. Returns the max-entry residual.
pub fn verify_flow_identity<R: rand::Rng + ?Sized>(bg: &Background, z: C64, kappa: f64, rng: &mut R) -> Result<f64> {
    let lat = &bg.lattice;
    let n = lat.num_sites();
    let p = flow_params(bg, z, kappa)?;
    let st = p.t0.sqrt();
    let v = crate::model::sample_block_potential(lat, rng);
    let eye = CMat::identity(n, n);
    let (h, h_t0) = match bg.kind {
        ModelKind::BlockAnderson => {
            let psi = bg.psi.as_ref().expect("BA background carries Psi");
            let h = &**psi * C64::from(bg.lambda) + &v;
            let h_t0 = &**psi * C64::from(p.lambda0) + &v * C64::from(st);
            (h, h_t0)
        }
        ModelKind::WegnerOrbital => {
            let hs = crate::model::build_hamiltonian(
                ModelKind::WegnerOrbital,
                lat,
                bg.lambda,
                crate::model::Interaction::Wo(rng),
                v,
            )?;
            let h_t0 = &hs.h * C64::from(st);
            (hs.h, h_t0)
        }
    };
    let g = (h - &eye * z)
        .try_inverse()
        .ok_or_else(|| Error::Numeric("singular H - z".into()))?;
    let f0 = bg.with_lambda(p.lambda0).flow_state(p.e0, p.t0)?;
    let g_t0 = (h_t0 - &eye * f0.z_t)
        .try_inverse()
        .ok_or_else(|| Error::Numeric("singular flow resolvent".into()))?;
    Ok((g - g_t0 * C64::from(st)).max_abs())
}

/// Scales η_*, ℓ(η), ℓ_t.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleParams {
    pub eta_star: f64,
}

impl ScaleParams {
    pub fn new(lat: &TorusLattice, lambda: f64) -> Self {
        let one_d = if lat.d() == 1 { (lat.w() as f64 * lambda).powi(-2) } else { 0.0 };
        ScaleParams { eta_star: one_d + 1.0 / lat.num_sites() as f64 }
    }

    /// ℓ(η) = min(λη^{-1/2} + 1, n).
    pub fn ell_eta(lat: &TorusLattice, lambda: f64, eta: f64) -> f64 {
        (lambda / eta.sqrt() + 1.0).min(lat.n() as f64)
    }

    /// ℓ_t = min(λ|1−t|^{-1/2} + 1, n).
    pub fn ell_t(lat: &TorusLattice, lambda: f64, t: f64) -> f64 {
        (lambda / (1.0 - t).abs().sqrt() + 1.0).min(lat.n() as f64)
    }
}

/// (m(λ) − m_sc)/λ² and the second-order coefficient m_sc³/(1 − m_sc²)·N^{-1}tr Ψ².
pub fn expandm_slope(bg: &Background, z: C64, lambda: f64) -> Result<(C64, C64)> {
    let msc = m_sc(z)?;
    let m = bg.with_lambda(lambda).m(z)?;
    let psi = bg.psi.as_ref().ok_or_else(|| Error::Input("expansion needs a deterministic Psi".into()))?;
    let tr2 = psi.iter().map(|z| z.norm_sqr()).sum::<f64>() / psi.nrows() as f64;
    let coef = msc.powi(3) / (C64::from(1.0) - msc * msc) * tr2;
    Ok(((m - msc) / (lambda * lambda), coef))
}

/// M^{(σ1,σ2)}_{[x][y]} = W^{-d} Σ_{x'∈[x], y'∈[y]} M(σ1)_{y'x'} M(σ2)_{x'y'}.
pub fn m_sigma_matrix(flow: &FlowState, s1: Sign, s2: Sign) -> CMat {
    let lat = &flow.lattice;
    let nb = lat.num_blocks();
    if flow.kind == ModelKind::WegnerOrbital {
        return CMat::identity(nb, nb) * (flow.m_of(s1) * flow.m_of(s2));
    }
    let hat = m_hat(flow, s1, s2);
    block_sum(lat, &hat) / C64::from(lat.wd())
}

/// M̂^{(σ1,σ2)}_{ab} = M(σ1)_{ba} M(σ2)_{ab}.
pub fn m_hat(flow: &FlowState, s1: Sign, s2: Sign) -> CMat {
    let (a, b) = (flow.mat(s1), flow.mat(s2));
    let n = a.nrows();
    CMat::from_fn(n, n, |i, j| a[(j, i)] * b[(i, j)])
}

/// Σ_{x∈[a], y∈[b]} X_xy.
pub fn block_sum(lat: &TorusLattice, x: &CMat) -> CMat {
    let nb = lat.num_blocks();
    let mut out = CMat::zeros(nb, nb);
    for i in 0..x.nrows() {
        let bi = lat.block_of_linear(i);
        for j in 0..x.ncols() {
            out[(bi, lat.block_of_linear(j))] += x[(i, j)];
        }
    }
    out
}

fn check_gap(lat: &TorusLattice, t: f64) -> Result<()> {
    let limit = 1.0 / lat.num_sites() as f64;
    if 1.0 - t < limit {
        return Err(Error::NearSingular { gap: 1.0 - t, limit });
    }
    Ok(())
}

/// Θ_t^{(σ1,σ2)} = (1 − t·M^{(σ1,σ2)} S^{L→n})^{-1}.
pub fn theta_propagator(flow: &FlowState, t: f64, s1: Sign, s2: Sign) -> Result<CMat> {
    let msig = m_sigma_matrix(flow, s1, s2);
    theta_from_msig(flow, t, &msig)
}

pub fn theta_from_msig(flow: &FlowState, t: f64, msig: &CMat) -> Result<CMat> {
    let lat = &flow.lattice;
    check_gap(lat, t)?;
    let nb = lat.num_blocks();
    let s = flow.s_ln().map(C64::from);
    let a = CMat::identity(nb, nb) - msig * &s * C64::from(t);
    a.try_inverse().ok_or_else(|| Error::Numeric("singular propagator".into()))
}

/// Site-level diffusion matrices (Θ, S+, S−) at a spectral parameter with M and S given.
pub fn diffusion_matrices(m: &CMat, s: &RMat) -> Result<(RMat, CMat, CMat)> {
    let n = m.nrows();
    let m0 = RMat::from_fn(n, n, |i, j| m[(i, j)].norm_sqr());
    let mp = CMat::from_fn(n, n, |i, j| m[(i, j)] * m[(j, i)]);
    let theta = (RMat::identity(n, n) - &m0 * s)
        .try_inverse()
        .ok_or_else(|| Error::Numeric("singular 1 - M0 S".into()))?
        * m0;
    let sc = s.map(C64::from);
    let splus = (CMat::identity(n, n) - &mp * &sc)
        .try_inverse()
        .ok_or_else(|| Error::Numeric("singular 1 - M+ S".into()))?
        * mp;
    let sminus = splus.map(|z| z.conj());
    Ok((theta, splus, sminus))
}

/// Entrywise propagator Θ̂_t = (I − M̂^{(σ1,σ2)} S_t)^{-1} with S_t = tS, and S_tΘ̂_t.
pub fn entrywise_theta(flow: &FlowState, t: f64, s1: Sign, s2: Sign, s_dense: &RMat) -> Result<(CMat, CMat)> {
    check_gap(&flow.lattice, t)?;
    let n = flow.lattice.num_sites();
    let st = s_dense.map(|v| C64::from(v * t));
    let hat = m_hat(flow, s1, s2);
    let th = (CMat::identity(n, n) - hat * &st)
        .try_inverse()
        .ok_or_else(|| Error::Numeric("singular entrywise propagator".into()))?;
    let sth = st * &th;
    Ok((th, sth))
}

/// Im M = (M − M*)/(2i).
pub fn im_part(m: &CMat) -> CMat {
    (m - m.adjoint()) / (I * 2.0)
}
