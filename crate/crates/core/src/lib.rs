//! Deterministic approximations, loop calculus and Monte Carlo experiments for
//! random block Schrödinger operators H = λΨ + V on a d-dimensional torus.
//!
//! Module map:
//! - [`lattice`]: torus geometry and block decomposition
//! - [`model`]: block Anderson and Wegner orbital sampling, variance profiles
//! - [`detapprox`]: m, M, the characteristic flow, Θ-propagators
//! - [`loops`]: G-loops, primitive K-loops, Ward identities, kernels
//! - [`treerep`]: tree partitions, M-graphs, cores
//! - [`experiments`]: Monte Carlo harness

// `!(x >= 0.0)` style guards reject NaN on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod detapprox;
pub mod error;
pub mod experiments;
pub mod lattice;
pub mod loops;
pub mod model;
pub mod rng;
pub mod treerep;

pub use detapprox::{Background, FlowState, ScaleParams};
pub use error::{Error, Result};
pub use loops::{LoopIndex, LoopTensor, ResolventPair};
pub use lattice::{BlockIndex, SiteIndex, TorusLattice};
pub use treerep::{MGraph, TreePartition};

pub use model::{HamiltonianSample, InteractionBA, ModelKind, VarianceMatrix};


pub type C64 = num_complex::Complex64;
pub type CMat = nalgebra::DMatrix<C64>;
pub type RMat = nalgebra::DMatrix<f64>;

/// Charge ±: `Plus` selects G (or M), `Minus` selects G* (or M*).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Sign {
    #[serde(rename = "+")]
    Plus,
    #[serde(rename = "-")]
    Minus,
}

impl Sign {
    pub fn flip(self) -> Sign {
        match self {
            Sign::Plus => Sign::Minus,
            Sign::Minus => Sign::Plus,
        }
    }
    pub fn bit(self) -> usize {
        match self {
            Sign::Plus => 0,
            Sign::Minus => 1,
        }
    }
    pub fn from_bit(b: usize) -> Sign {
        if b & 1 == 0 {
            Sign::Plus
        } else {
            Sign::Minus
        }
    }
    /// Apply the charge to a scalar: z for `Plus`, z̄ for `Minus`.
    pub fn apply(self, z: C64) -> C64 {
        match self {
            Sign::Plus => z,
            Sign::Minus => z.conj(),
        }
    }
    pub fn symbol(self) -> char {
        match self {
            Sign::Plus => '+',
            Sign::Minus => '-',
        }
    }
}

/// Parse strings like "+-+-".
pub fn parse_signs(s: &str) -> Result<Vec<Sign>> {
    s.chars()
        .map(|c| match c {
            '+' => Ok(Sign::Plus),
            '-' => Ok(Sign::Minus),
            _ => Err(Error::Input(format!("bad charge {c:?}"))),
        })
        .collect()
}

pub fn format_signs(s: &[Sign]) -> String {
    s.iter().map(|x| x.symbol()).collect()
}

/// Bitmask (bit i set for `Minus` at position i) to charge vector.
pub fn signs_from_mask(mask: usize, len: usize) -> Vec<Sign> {
    (0..len).map(|i| Sign::from_bit(mask >> i)).collect()
}

pub fn mask_from_signs(s: &[Sign]) -> usize {
    s.iter().enumerate().map(|(i, x)| x.bit() << i).sum()
}

/// Largest entry modulus.
pub trait MaxAbs {
    fn max_abs(&self) -> f64;
}

impl MaxAbs for CMat {
    fn max_abs(&self) -> f64 {
        self.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}
