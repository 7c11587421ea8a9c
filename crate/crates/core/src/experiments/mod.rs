//! Monte Carlo harness: local law, quantum diffusion, delocalization and
//! G-loop versus K-loop comparisons, plus the deterministic check reports.
//!
//! Samples run in parallel on independent streams and are reduced in sample
//! order, so tables do not depend on the worker count.

pub mod suite;

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detapprox::{diffusion_matrices, flow_params, verify_flow_identity, Background, ScaleParams};
use crate::error::{Error, Result};
use crate::lattice::TorusLattice;
use crate::loops::{g_loop, k2_closed, k3_closed, two_loop_matrix, ward_residual_g, HermitianEigen, LoopIndex, ResolventPair};
use crate::model::{build_hamiltonian, sample_block_potential, Interaction, InteractionBA, ModelKind};
use crate::rng::{stream, Rng};
use crate::{signs_from_mask, CMat, Sign, C64};

pub const EXP_LOCAL_LAW: u32 = 1;
pub const EXP_DIFFUSION: u32 = 2;
pub const EXP_DELOC: u32 = 3;
pub const EXP_LOOPS: u32 = 4;
/// Offset of the coupled flow-identity streams inside the loop experiment.
const FLOW_STREAM: u32 = 1 << 24;

fn default_seed() -> u64 {
    1
}
fn default_samples() -> usize {
    20
}
fn default_kappa() -> f64 {
    0.3
}
fn default_energies() -> Vec<f64> {
    vec![0.0]
}
fn default_etas() -> Vec<f64> {
    vec![0.1]
}
fn default_loop_length() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub lambda: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    pub d: usize,
    #[serde(rename = "W")]
    pub w: usize,
    pub n: usize,
}

/// Sampling parameters. Every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Bulk window |E| ≤ 2 − κ.
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_energies")]
    pub energies: Vec<f64>,
    #[serde(default = "default_etas")]
    pub etas: Vec<f64>,
    /// Coupling sweep for `deloc`; empty means the model coupling only.
    #[serde(default)]
    pub lambdas: Vec<f64>,
    /// Block-size sweep for `diffusion`; empty means the lattice W only.
    #[serde(default)]
    pub widths: Vec<usize>,
    #[serde(default = "default_loop_length")]
    pub loop_length: usize,
    /// ε in the guard η ≥ W^ε η_*.
    #[serde(default)]
    pub eta_guard_exponent: f64,
    /// Worker threads; unset means the CLI flag, the environment, or all cores.
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub output: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: default_seed(),
            samples: default_samples(),
            kappa: default_kappa(),
            energies: default_energies(),
            etas: default_etas(),
            lambdas: Vec::new(),
            widths: Vec::new(),
            loop_length: default_loop_length(),
            eta_guard_exponent: 0.0,
            threads: None,
            output: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub lattice: LatticeConfig,
    #[serde(default)]
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn new(kind: ModelKind, d: usize, w: usize, n: usize, lambda: f64) -> Self {
        ExperimentConfig { model: ModelConfig { kind, lambda }, lattice: LatticeConfig { d, w, n }, run: RunConfig::default() }
    }

    pub fn lattice(&self) -> Result<TorusLattice> {
        let l = self.lattice;
        TorusLattice::new(l.d, l.w, l.n).map_err(|e| Error::Config(format!("lattice: {e}")))
    }

    /// Checks every invariant and names the offending key.
    pub fn validate(&self) -> Result<()> {
        let lat = self.lattice()?;
        let lam = self.model.lambda;
        if !(lam.is_finite() && lam >= 0.0) {
            return Err(Error::Config(format!("model.lambda = {lam} must be finite and >= 0")));
        }
        for &l in &self.run.lambdas {
            if !(l.is_finite() && l >= 0.0) {
                return Err(Error::Config(format!("run.lambdas contains {l}")));
            }
        }
        let k = self.run.kappa;
        if !(k > 0.0 && k < 2.0) {
            return Err(Error::Config(format!("run.kappa = {k} leaves an empty bulk window")));
        }
        for &e in &self.run.energies {
            if !(e.abs() <= 2.0 - k) {
                return Err(Error::Config(format!("run.energies: |{e}| > 2 - kappa = {}", 2.0 - k)));
            }
        }
        let floor = 1.0 / lat.num_sites() as f64;
        for &eta in &self.run.etas {
            if !(eta >= floor && eta <= 1.0) {
                return Err(Error::Config(format!("run.etas: {eta} outside [1/N, 1] = [{floor:.3e}, 1]")));
            }
        }
        if self.run.samples == 0 {
            return Err(Error::Config("run.samples must be >= 1".into()));
        }
        if !(2..=3).contains(&self.run.loop_length) {
            return Err(Error::Config(format!("run.loop_length = {} not in 2..=3", self.run.loop_length)));
        }
        for &w in &self.run.widths {
            TorusLattice::new(lat.d(), w, lat.n()).map_err(|e| Error::Config(format!("run.widths: {e}")))?;
        }
        if self.run.threads == Some(0) {
            return Err(Error::Config("run.threads must be >= 1".into()));
        }
        if !self.run.eta_guard_exponent.is_finite() || self.run.eta_guard_exponent < 0.0 {
            return Err(Error::Config("run.eta_guard_exponent must be >= 0".into()));
        }
        Ok(())
    }

    fn z_list(&self) -> Vec<C64> {
        let mut out = Vec::new();
        for &e in &self.run.energies {
            for &eta in &self.run.etas {
                out.push(C64::new(e, eta));
            }
        }
        out
    }
}

/// One statistic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub experiment: String,
    /// `key=value` pairs joined by `;`.
    pub params: String,
    pub statistic: String,
    pub value: f64,
    pub std_err: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub name: String,
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn new(name: &str) -> Self {
        MetricTable { name: name.into(), rows: Vec::new() }
    }

    pub fn push(&mut self, params: &str, statistic: &str, value: f64, std_err: f64, samples: usize) {
        self.rows.push(MetricRow {
            experiment: self.name.clone(),
            params: params.into(),
            statistic: statistic.into(),
            value,
            std_err,
            samples,
        });
    }

    fn push_stats(&mut self, params: &str, statistic: &str, xs: &[f64]) {
        let (m, se) = mean_se(xs);
        self.push(params, statistic, m, se, xs.len());
    }

    /// First row with this statistic whose params contain `params`.
    pub fn find(&self, params: &str, statistic: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.statistic == statistic && r.params.contains(params))
    }

    pub fn value(&self, params: &str, statistic: &str) -> Result<f64> {
        self.find(params, statistic)
            .map(|r| r.value)
            .ok_or_else(|| Error::Input(format!("no row {statistic} [{params}] in {}", self.name)))
    }

    pub fn extend(&mut self, other: MetricTable) {
        self.rows.extend(other.rows);
    }
}

/// Mean and standard error (0 for fewer than two values).
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

fn fmt_params(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
}

fn num(x: f64) -> String {
    format!("{x}")
}

/// Draws H = λΨ + V (BA, fixed Ψ) or the normalized WO Hamiltonian.
#[derive(Clone)]
pub struct Sampler {
    pub kind: ModelKind,
    pub lattice: TorusLattice,
    pub lambda: f64,
    psi: Option<Arc<CMat>>,
}

impl Sampler {
    pub fn new(kind: ModelKind, lattice: TorusLattice, lambda: f64) -> Self {
        let psi = (kind == ModelKind::BlockAnderson)
            .then(|| Arc::new(crate::model::psi_ba(&lattice, &InteractionBA::standard(&lattice))));
        Sampler { kind, lattice, lambda, psi }
    }

    pub fn sample(&self, seed: u64, experiment: u32, index: u32) -> Result<CMat> {
        let mut rng = stream(seed, experiment, index);
        let v = sample_block_potential(&self.lattice, &mut rng);
        let h = match &self.psi {
            Some(psi) => build_hamiltonian::<Rng>(self.kind, &self.lattice, self.lambda, Interaction::BaPsi(psi), v)?,
            None => build_hamiltonian(self.kind, &self.lattice, self.lambda, Interaction::Wo(&mut rng), v)?,
        };
        Ok(h.h)
    }
}

fn background(kind: ModelKind, lat: &TorusLattice, lambda: f64) -> Result<Background> {
    match kind {
        ModelKind::BlockAnderson => Background::block_anderson(lat, lambda, &InteractionBA::standard(lat)),
        ModelKind::WegnerOrbital => Ok(Background::wegner_orbital(lat, lambda)),
    }
}

/// Run `f` for samples 0..count in parallel; results come back in sample order.
// the closure wrapper keeps the parallel iterator Send
#[allow(clippy::redundant_closure)]
fn per_sample<T: Send>(count: usize, f: impl Fn(u32) -> Result<T> + Sync) -> Result<Vec<T>> {
    (0..count as u32).into_par_iter().map(|i| f(i)).collect::<Vec<_>>().into_iter().collect()
}

/// Lower end of the admissible η range, W^ε η_*. A single block has no
/// diffusive scale, so there η_* is 1/N.
pub fn eta_floor(lat: &TorusLattice, lambda: f64, eps: f64) -> f64 {
    let star = if lat.n() == 1 { 1.0 / lat.num_sites() as f64 } else { ScaleParams::new(lat, lambda).eta_star };
    (lat.w() as f64).powf(eps) * star
}

/// (W^d ℓ(η)^d η)^{-1}.
pub fn predicted_scale(lat: &TorusLattice, lambda: f64, eta: f64) -> f64 {
    let ell = ScaleParams::ell_eta(lat, lambda, eta);
    1.0 / (lat.wd() * ell.powi(lat.d() as i32) * eta)
}

/// ‖G − M‖²_max, the block-averaged deviation, and the statistic ratio, per z.
pub fn run_local_law(cfg: &ExperimentConfig) -> Result<MetricTable> {
    cfg.validate()?;
    let lat = cfg.lattice()?;
    let lam = cfg.model.lambda;
    let floor = eta_floor(&lat, lam, cfg.run.eta_guard_exponent);
    for &eta in &cfg.run.etas {
        if eta < floor {
            return Err(Error::Domain(format!("eta = {eta} below the guard W^eps eta_* = {floor:.4}")));
        }
    }
    let bg = background(cfg.model.kind, &lat, lam)?;
    let zs = cfg.z_list();
    let ms: Vec<CMat> = zs.iter().map(|&z| Ok(bg.m_matrix(z, bg.m(z)?))).collect::<Result<_>>()?;
    let sampler = Sampler::new(cfg.model.kind, lat, lam);
    let per: Vec<Vec<(f64, f64)>> = per_sample(cfg.run.samples, |i| {
        let h = sampler.sample(cfg.run.seed, EXP_LOCAL_LAW, i)?;
        let eig = HermitianEigen::new(&h)?;
        Ok(zs
            .iter()
            .zip(&ms)
            .map(|(&z, m)| {
                let g = eig.resolvent(z);
                let d = g - m;
                let max2 = d.iter().map(|v| v.norm_sqr()).fold(0.0, f64::max);
                let avg = (0..lat.num_blocks())
                    .map(|b| (lat.block_range(b).map(|x| d[(x, x)]).sum::<C64>() / lat.wd()).norm())
                    .fold(0.0, f64::max);
                (max2, avg)
            })
            .collect())
    })?;
    let mut t = MetricTable::new("local_law");
    for (k, z) in zs.iter().enumerate() {
        let p = fmt_params(&[("E", num(z.re)), ("eta", num(z.im)), ("lambda", num(lam)), ("N", lat.num_sites().to_string())]);
        let scale = predicted_scale(&lat, lam, z.im);
        let max2: Vec<f64> = per.iter().map(|v| v[k].0).collect();
        let avg: Vec<f64> = per.iter().map(|v| v[k].1).collect();
        let ratio: Vec<f64> = max2.iter().map(|x| x / scale).collect();
        t.push_stats(&p, "max_dev_sq", &max2);
        t.push_stats(&p, "avg_law_dev", &avg);
        t.push(&p, "predicted_scale", scale, 0.0, 0);
        t.push_stats(&p, "ratio", &ratio);
    }
    Ok(t)
}

/// W^{-2d} Σ_{x∈[a],y∈[b]} Θ_xy and the same for S⁺, from site-level propagators at z.
pub fn diffusion_targets(bg: &Background, z: C64) -> Result<(CMat, CMat)> {
    let lat = &bg.lattice;
    let m = bg.m_matrix(z, bg.m(z)?);
    let (theta, splus, _) = diffusion_matrices(&m, &bg.var.dense())?;
    let nb = lat.num_blocks();
    let mut a = CMat::zeros(nb, nb);
    let mut b = CMat::zeros(nb, nb);
    for x in 0..lat.num_sites() {
        let bx = lat.block_of_linear(x);
        for y in 0..lat.num_sites() {
            let by = lat.block_of_linear(y);
            a[(bx, by)] += C64::from(theta[(x, y)]);
            b[(bx, by)] += splus[(x, y)];
        }
    }
    let w2 = C64::from(lat.wd() * lat.wd());
    Ok((a / w2, b / w2))
}

/// The same targets through the flow: t0·K^{(2)}_{t0,(−,+)} and t0·K^{(2)}_{t0,(+,+)}.
pub fn diffusion_targets_flow(bg: &Background, z: C64, kappa: f64) -> Result<(CMat, CMat)> {
    let p = flow_params(bg, z, kappa)?;
    let f0 = bg.with_lambda(p.lambda0).flow_state(p.e0, 0.0)?;
    let a = k2_closed(&f0, p.t0, Sign::Minus, Sign::Plus)? * C64::from(p.t0);
    let b = k2_closed(&f0, p.t0, Sign::Plus, Sign::Plus)? * C64::from(p.t0);
    Ok((a, b))
}

/// Sample means of W^{-2d}Σ|G_xy|² and W^{-2d}ΣG_xyG_yx against their
/// deterministic targets, by block distance.
pub fn run_quantum_diffusion(cfg: &ExperimentConfig) -> Result<MetricTable> {
    cfg.validate()?;
    let base = cfg.lattice()?;
    let widths = if cfg.run.widths.is_empty() { vec![base.w()] } else { cfg.run.widths.clone() };
    let lam = cfg.model.lambda;
    let mut t = MetricTable::new("quantum_diffusion");
    for w in widths {
        let lat = TorusLattice::new(base.d(), w, base.n())?;
        let bg = background(cfg.model.kind, &lat, lam)?;
        let zs = cfg.z_list();
        let mut targets = Vec::new();
        for &z in &zs {
            let site = diffusion_targets(&bg, z)?;
            if lam > 0.0 || cfg.model.kind == ModelKind::WegnerOrbital {
                let flow = diffusion_targets_flow(&bg, z, cfg.run.kappa)?;
                let scale = site.0.iter().map(|v| v.norm()).fold(0.0, f64::max);
                let r = (&site.0 - &flow.0).iter().chain((&site.1 - &flow.1).iter()).map(|v| v.norm()).fold(0.0, f64::max);
                let p = fmt_params(&[("W", w.to_string()), ("E", num(z.re)), ("eta", num(z.im))]);
                t.push(&p, "target_identity_residual", r / scale.max(1e-300), 0.0, 0);
            }
            targets.push(site);
        }
        let nb = lat.num_blocks();
        let o = lat.origin_block();
        let maxd = (0..nb).map(|b| lat.block_distance_linear(o, b)).max().unwrap_or(0);
        let sampler = Sampler::new(cfg.model.kind, lat, lam);
        // per sample, per z, per distance: (abs_sq, gg) averaged over block pairs
        let per: Vec<Vec<Vec<(C64, C64)>>> = per_sample(cfg.run.samples, |i| {
            let h = sampler.sample(cfg.run.seed, EXP_DIFFUSION, i)?;
            let eig = Arc::new(HermitianEigen::new(&h)?);
            zs.iter()
                .map(|&z| {
                    let rp = ResolventPair::from_eigen(&lat, eig.clone(), z)?;
                    let abs2 = two_loop_matrix(&lat, &rp.g_adj, &rp.g);
                    let gg = two_loop_matrix(&lat, &rp.g, &rp.g);
                    Ok(by_distance(&lat, maxd, |a, b| (abs2[(a, b)], gg[(a, b)])))
                })
                .collect()
        })?;
        for (k, z) in zs.iter().enumerate() {
            let tgt = by_distance(&lat, maxd, |a, b| (targets[k].0[(a, b)], targets[k].1[(a, b)]));
            for r in 0..=maxd as usize {
                let p = fmt_params(&[
                    ("W", w.to_string()),
                    ("E", num(z.re)),
                    ("eta", num(z.im)),
                    ("lambda", num(lam)),
                    ("dist", r.to_string()),
                ]);
                let a: Vec<f64> = per.iter().map(|s| s[k][r].0.re).collect();
                let (ma, sa) = mean_se(&a);
                let ta = tgt[r].0.re;
                t.push(&p, "abs_sq_mean", ma, sa, a.len());
                t.push(&p, "abs_sq_target", ta, 0.0, 0);
                if ta.abs() > 0.0 {
                    t.push(&p, "abs_sq_rel_err", (ma - ta).abs() / ta.abs(), sa / ta.abs(), a.len());
                }
                let g: Vec<C64> = per.iter().map(|s| s[k][r].1).collect();
                let mg = g.iter().sum::<C64>() / g.len() as f64;
                let sg = mean_se(&g.iter().map(|v| v.re).collect::<Vec<_>>()).1.hypot(mean_se(&g.iter().map(|v| v.im).collect::<Vec<_>>()).1);
                let tg = tgt[r].1;
                t.push(&p, "gg_abs_dev", (mg - tg).norm(), sg, g.len());
            }
        }
    }
    Ok(t)
}

/// Average of f(a, b) over block pairs, indexed by block distance 0..=maxd.
fn by_distance(lat: &TorusLattice, maxd: i64, f: impl Fn(usize, usize) -> (C64, C64)) -> Vec<(C64, C64)> {
    let nb = lat.num_blocks();
    let mut acc = vec![(C64::new(0.0, 0.0), C64::new(0.0, 0.0), 0usize); maxd as usize + 1];
    for a in 0..nb {
        for b in 0..nb {
            let r = lat.block_distance_linear(a, b) as usize;
            let (x, y) = f(a, b);
            acc[r].0 += x;
            acc[r].1 += y;
            acc[r].2 += 1;
        }
    }
    acc.into_iter().map(|(x, y, c)| (x / c as f64, y / c as f64)).collect()
}

/// ℓ(u): the smallest ℓ such that some L¹-ball of radius ℓ carries at least
/// half the mass of u. Ties go to the smallest radius; the center is not reported.
pub fn localization_length(lat: &TorusLattice, u: &[C64]) -> usize {
    let l = lat.l();
    let total: f64 = u.iter().map(|v| v.norm_sqr()).sum();
    let half = 0.5 * total;
    let coord = |x: usize| -> [usize; 2] {
        let s = lat.site_from_linear(x).0;
        [s[0].rem_euclid(l as i64) as usize, s[1].rem_euclid(l as i64) as usize]
    };
    if lat.d() == 1 {
        let mut p = vec![0.0; l];
        for (x, v) in u.iter().enumerate() {
            p[coord(x)[0]] += v.norm_sqr();
        }
        let mut pre = vec![0.0; 2 * l + 1];
        for i in 0..2 * l {
            pre[i + 1] = pre[i] + p[i % l];
        }
        let best = |r: usize| -> f64 {
            let len = 2 * r + 1;
            if len >= l {
                return total;
            }
            (0..l).map(|s| pre[s + len] - pre[s]).fold(0.0, f64::max)
        };
        let (mut lo, mut hi) = (0, l / 2);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if best(mid) >= half {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        return lo;
    }
    let mut p = vec![0.0; l * l];
    for (x, v) in u.iter().enumerate() {
        let c = coord(x);
        p[c[0] * l + c[1]] += v.norm_sqr();
    }
    let best = |r: usize| -> f64 {
        let r = r as i64;
        let li = l as i64;
        let mut stencil = Vec::new();
        for dx in -r..=r {
            let rest = r - dx.abs();
            for dy in -rest..=rest {
                stencil.push((dx.rem_euclid(li) as usize, dy.rem_euclid(li) as usize));
            }
        }
        stencil.sort_unstable();
        stencil.dedup();
        let mut m = 0.0f64;
        for cx in 0..l {
            for cy in 0..l {
                let s: f64 = stencil.iter().map(|&(dx, dy)| p[((cx + dx) % l) * l + (cy + dy) % l]).sum();
                m = m.max(s);
            }
        }
        m
    };
    let (mut lo, mut hi) = (0, l);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if best(mid) >= half {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo
}

/// Per-eigenvector statistics (ℓ, ‖u‖²_∞, QUE statistic, largest block mass).
fn eigvec_stats(lat: &TorusLattice, u: &[C64]) -> (f64, f64, f64, f64) {
    let ell = localization_length(lat, u) as f64;
    let sup = u.iter().map(|v| v.norm_sqr()).fold(0.0, f64::max);
    let share = lat.wd() / lat.num_sites() as f64;
    let mut que = 0.0f64;
    let mut home = 0.0f64;
    for b in 0..lat.num_blocks() {
        let m: f64 = lat.block_range(b).map(|x| u[x].norm_sqr()).sum();
        que = que.max((m - share).abs());
        home = home.max(m);
    }
    (ell, sup, que, home)
}

/// Bulk eigenvector statistics over a coupling sweep.
pub fn run_delocalization(cfg: &ExperimentConfig) -> Result<MetricTable> {
    cfg.validate()?;
    let lat = cfg.lattice()?;
    let lambdas = if cfg.run.lambdas.is_empty() { vec![cfg.model.lambda] } else { cfg.run.lambdas.clone() };
    let window = 2.0 - cfg.run.kappa;
    let mut t = MetricTable::new("delocalization");
    for (li, &lam) in lambdas.iter().enumerate() {
        let sampler = Sampler::new(cfg.model.kind, lat, lam);
        let per: Vec<Vec<(f64, f64, f64, f64)>> = per_sample(cfg.run.samples, |i| {
            let h = sampler.sample(cfg.run.seed, EXP_DELOC, ((li as u32) << 16) | i)?;
            let eig = HermitianEigen::new(&h)?;
            Ok((0..eig.dim())
                .filter(|&k| eig.values[k].abs() <= window)
                .map(|k| {
                    let u: Vec<C64> = eig.vectors.column(k).iter().copied().collect();
                    eigvec_stats(&lat, &u)
                })
                .collect())
        })?;
        let p = fmt_params(&[("lambda", num(lam)), ("W", lat.w().to_string()), ("n", lat.n().to_string()), ("kappa", num(cfg.run.kappa))]);
        let all: Vec<&(f64, f64, f64, f64)> = per.iter().flatten().collect();
        let count = all.len();
        let col = |f: fn(&(f64, f64, f64, f64)) -> f64| -> (f64, f64) {
            let med = median(&all.iter().map(|s| f(s)).collect::<Vec<_>>());
            let per_med: Vec<f64> =
                per.iter().filter(|v| !v.is_empty()).map(|v| median(&v.iter().map(f).collect::<Vec<_>>())).collect();
            (med, mean_se(&per_med).1)
        };
        let (ell, ell_se) = col(|s| s.0);
        let (sup, sup_se) = col(|s| s.1);
        let (que, que_se) = col(|s| s.2);
        t.push(&p, "median_ell", ell, ell_se, count);
        t.push(&p, "median_sup_sq", sup, sup_se, count);
        t.push(&p, "median_que", que, que_se, count);
        t.push(&p, "max_ell", all.iter().map(|s| s.0).fold(0.0, f64::max), 0.0, count);
        t.push(&p, "min_que", all.iter().map(|s| s.2).fold(f64::INFINITY, f64::min), 0.0, count);
        t.push(&p, "min_home_mass", all.iter().map(|s| s.3).fold(f64::INFINITY, f64::min), 0.0, count);
        t.push(&p, "bulk_count", count as f64, 0.0, cfg.run.samples);
    }
    Ok(t)
}

/// max_y |Σ_x |G_xy|² − Im G_yy / η|.
pub fn resolvent_ward_residual(rp: &ResolventPair) -> f64 {
    let n = rp.g.nrows();
    (0..n)
        .map(|y| {
            let lhs: f64 = (0..n).map(|x| rp.g[(x, y)].norm_sqr()).sum();
            (lhs - rp.g[(y, y)].im / rp.eta()).abs()
        })
        .fold(0.0, f64::max)
}

/// Sampled G-loops at z against K-loops at the flow endpoint t0, with the
/// algebraic identities checked per sample.
pub fn run_loop_comparison(cfg: &ExperimentConfig, n: usize) -> Result<MetricTable> {
    cfg.validate()?;
    if !(2..=3).contains(&n) {
        return Err(Error::Config(format!("loop length {n} not in 2..=3")));
    }
    let lat = cfg.lattice()?;
    let lam = cfg.model.lambda;
    let bg = background(cfg.model.kind, &lat, lam)?;
    let nb = lat.num_blocks();
    let zs = cfg.z_list();
    let o = lat.origin_block();
    let mut t = MetricTable::new("loop_comparison");
    for &z in &zs {
        let fp = flow_params(&bg, z, cfg.run.kappa)?;
        let f0 = bg.with_lambda(fp.lambda0).flow_state(fp.e0, 0.0)?;
        let scale = fp.t0.powf(n as f64 / 2.0);
        // K-loops at t0 mapped to z: t0^{n/2} K_{t0}
        let k: Vec<Vec<C64>> = match n {
            2 => (0..4)
                .map(|mask| {
                    let s = signs_from_mask(mask, 2);
                    let m = k2_closed(&f0, fp.t0, s[0], s[1])?;
                    Ok(m.iter().map(|v| v * scale).collect())
                })
                .collect::<Result<_>>()?,
            _ => {
                let k3 = k3_closed(&f0, fp.t0)?;
                (0..8)
                    .map(|mask| {
                        let s = signs_from_mask(mask, 3);
                        let mut v = Vec::with_capacity(nb.pow(3));
                        for code in 0..nb.pow(3) {
                            let b = [code % nb, code / nb % nb, code / (nb * nb)];
                            v.push(k3.get(&s, &b) * scale);
                        }
                        Ok(v)
                    })
                    .collect::<Result<_>>()?
            }
        };
        let blocks_of = |code: usize| -> Vec<usize> {
            match n {
                2 => vec![code % nb, code / nb],
                _ => vec![code % nb, code / nb % nb, code / (nb * nb)],
            }
        };
        let sampler = Sampler::new(cfg.model.kind, lat, lam);
        let norm = predicted_scale(&lat, lam, z.im).powi(n as i32);
        let dist0: Vec<usize> = (0..nb).map(|a| (0..n as u32).map(|i| a * nb.pow(i)).sum()).collect();
        // σ = (+, −) or (+, −, +)
        let pm = 0b10;
        struct Sample {
            max_dev: f64,
            dist0_dev: f64,
            dist0_val: C64,
            origin: Vec<C64>,
            ward_g: f64,
            ward_res: f64,
            flow: f64,
        }
        let per: Vec<Sample> = per_sample(cfg.run.samples, |i| {
            let h = sampler.sample(cfg.run.seed, EXP_LOOPS, i)?;
            let rp = ResolventPair::new(&lat, &h, z)?;
            let mut max_dev = 0.0f64;
            let mut origin = Vec::new();
            for (mask, kv) in k.iter().enumerate() {
                let s = signs_from_mask(mask, n);
                for (code, kval) in kv.iter().enumerate() {
                    let b = blocks_of(code);
                    let l = g_loop(&rp, &LoopIndex::new(s.clone(), b.clone())?);
                    max_dev = max_dev.max((l - kval).norm());
                    if b[0] == o && mask == pm {
                        origin.push(l);
                    }
                }
            }
            let s = signs_from_mask(pm, n);
            let mut dist0_dev = 0.0;
            let mut dist0_val = C64::new(0.0, 0.0);
            for &code in &dist0 {
                let l = g_loop(&rp, &LoopIndex::new(s.clone(), blocks_of(code))?);
                let kv = k[pm][code];
                dist0_dev += (l - kv).norm() / kv.norm();
                dist0_val += l;
            }
            let mut frng = stream(cfg.run.seed, EXP_LOOPS, FLOW_STREAM + i);
            let flow = verify_flow_identity(&bg, z, cfg.run.kappa, &mut frng)?;
            Ok(Sample {
                max_dev,
                dist0_dev: dist0_dev / nb as f64,
                dist0_val: dist0_val / nb as f64,
                origin,
                ward_g: ward_residual_g(&rp, n)?,
                ward_res: resolvent_ward_residual(&rp),
                flow,
            })
        })?;
        let p = fmt_params(&[
            ("n", n.to_string()),
            ("E", num(z.re)),
            ("eta", num(z.im)),
            ("lambda", num(lam)),
            ("N", lat.num_sites().to_string()),
        ]);
        let count = per.len();
        let maxd: Vec<f64> = per.iter().map(|s| s.max_dev).collect();
        t.push_stats(&p, "max_dev", &maxd);
        t.push_stats(&p, "max_dev_normalized", &maxd.iter().map(|x| x / norm).collect::<Vec<_>>());
        t.push_stats(&p, "dist0_rel_dev", &per.iter().map(|s| s.dist0_dev).collect::<Vec<_>>());
        let k0 = dist0.iter().map(|&c| k[pm][c]).sum::<C64>() / nb as f64;
        let re: Vec<f64> = per.iter().map(|s| s.dist0_val.re).collect();
        let im: Vec<f64> = per.iter().map(|s| s.dist0_val.im).collect();
        let (mr, sr) = mean_se(&re);
        let (mi, si) = mean_se(&im);
        t.push(&p, "dist0_bias_rel", (C64::new(mr, mi) - k0).norm() / k0.norm(), sr.hypot(si) / k0.norm(), count);
        // mean over samples of the loop at the origin, against K, over the origin row
        let mut mean_dev = 0.0f64;
        for j in 0..per[0].origin.len() {
            let mean = per.iter().map(|s| s.origin[j]).sum::<C64>() / count as f64;
            let code_idx = k[pm].iter().enumerate().filter(|(c, _)| blocks_of(*c)[0] == o).nth(j).map(|(_, v)| *v).unwrap();
            mean_dev = mean_dev.max((mean - code_idx).norm());
        }
        t.push(&p, "mean_loop_max_dev", mean_dev, 0.0, count);
        t.push(&p, "ward_g_max", per.iter().map(|s| s.ward_g).fold(0.0, f64::max), 0.0, count);
        t.push(&p, "resolvent_ward_max", per.iter().map(|s| s.ward_res).fold(0.0, f64::max), 0.0, count);
        t.push(&p, "flow_identity_max", per.iter().map(|s| s.flow).fold(0.0, f64::max), 0.0, count);
    }
    Ok(t)
}
