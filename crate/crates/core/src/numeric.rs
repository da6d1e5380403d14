//! Dense numerical kernels shared by the stability constructions.

use std::cmp::Ordering;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Default cap on the dimension accepted by [`spectral_summary`].
pub const DEFAULT_EIGEN_CAP: usize = 2048;

/// Default number of Gauss–Legendre nodes before refinement.
pub const DEFAULT_QUADRATURE_NODES: usize = 32;

/// Entrywise change (relative to the largest entry, floored at 1) below which
/// node doubling stops.
pub const QUADRATURE_TOLERANCE: f64 = 1e-10;

const MAX_QUADRATURE_NODES: usize = 2048;

fn check_square_finite(a: &DMatrix<f64>) -> Result<()> {
    if !a.is_square() {
        return Err(Error::NonSquare { rows: a.nrows(), cols: a.ncols() });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(())
}

/// Matrix exponential by Padé scaling and squaring (backed by nalgebra).
pub fn expm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_square_finite(a)?;
    if a.nrows() == 0 {
        return Ok(a.clone());
    }
    let e = a.exp();
    if e.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(e)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSummary {
    /// Sorted by real part, then imaginary part, both descending.
    pub eigenvalues: Vec<Complex64>,
    pub spectral_radius: f64,
    pub spectral_abscissa: f64,
}

impl SpectralSummary {
    fn from_eigenvalues(mut eigenvalues: Vec<Complex64>) -> Self {
        eigenvalues.sort_by(|x, y| {
            y.re.partial_cmp(&x.re).unwrap_or(Ordering::Equal).then(y.im.partial_cmp(&x.im).unwrap_or(Ordering::Equal))
        });
        let spectral_radius = eigenvalues.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let spectral_abscissa = eigenvalues.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
        SpectralSummary { eigenvalues, spectral_radius, spectral_abscissa }
    }
}

pub fn spectral_summary(a: &DMatrix<f64>) -> Result<SpectralSummary> {
    spectral_summary_with_cap(a, DEFAULT_EIGEN_CAP)
}

/// All eigenvalues via faer's nonsymmetric eigensolver.
pub fn spectral_summary_with_cap(a: &DMatrix<f64>, cap: usize) -> Result<SpectralSummary> {
    check_square_finite(a)?;
    let dim = a.nrows();
    if dim > cap {
        return Err(Error::TooLarge { dim, cap });
    }
    if dim == 0 {
        return Err(Error::Dimension("empty matrix has no spectrum".into()));
    }
    let m = faer::Mat::<f64>::from_fn(dim, dim, |i, j| a[(i, j)]);
    let eigenvalues: Vec<Complex64> =
        m.eigenvalues().map_err(|_| Error::NoConvergence(dim))?.iter().map(|z| Complex64::new(z.re, z.im)).collect();
    if eigenvalues.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NoConvergence(dim));
    }
    Ok(SpectralSummary::from_eigenvalues(eigenvalues))
}

pub fn spectral_radius(a: &DMatrix<f64>) -> Result<f64> {
    Ok(spectral_summary(a)?.spectral_radius)
}

pub fn spectral_abscissa(a: &DMatrix<f64>) -> Result<f64> {
    Ok(spectral_summary(a)?.spectral_abscissa)
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    /// Roots of the degree-`count` Legendre polynomial by Newton iteration.
    pub fn new(count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::Dimension("quadrature needs at least one node".into()));
        }
        let n = count as f64;
        let mut nodes = vec![0.0; count];
        let mut weights = vec![0.0; count];
        for i in 0..count.div_ceil(2) {
            let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n + 0.5)).cos();
            let mut dp;
            loop {
                let (p, q) = legendre(count, z);
                dp = n * (z * p - q) / (z * z - 1.0);
                let dz = p / dp;
                z -= dz;
                if dz.abs() <= 1e-15 {
                    let (p, q) = legendre(count, z);
                    dp = n * (z * p - q) / (z * z - 1.0);
                    break;
                }
            }
            let w = 2.0 / ((1.0 - z * z) * dp * dp);
            nodes[i] = -z;
            nodes[count - 1 - i] = z;
            weights[i] = w;
            weights[count - 1 - i] = w;
        }
        if count % 2 == 1 {
            nodes[count / 2] = 0.0;
        }
        Ok(GaussLegendre { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Applies the rule entrywise to a matrix-valued integrand on `[a, b]`.
    pub fn integrate<F>(&self, mut f: F, a: f64, b: f64) -> Result<DMatrix<f64>>
    where
        F: FnMut(f64) -> Result<DMatrix<f64>>,
    {
        check_interval(a, b)?;
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut acc: Option<DMatrix<f64>> = None;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            let v = f(mid + half * x)? * (w * half);
            acc = Some(match acc {
                Some(s) => s + v,
                None => v,
            });
        }
        Ok(acc.expect("rule has at least one node"))
    }
}

/// `(P_n(z), P_{n-1}(z))` by the three-term recurrence.
fn legendre(n: usize, z: f64) -> (f64, f64) {
    let (mut p, mut q) = (1.0, 0.0);
    for j in 1..=n {
        let jf = j as f64;
        let r = q;
        q = p;
        p = ((2.0 * jf - 1.0) * z * q - (jf - 1.0) * r) / jf;
    }
    (p, q)
}

fn check_interval(a: f64, b: f64) -> Result<()> {
    if !(a.is_finite() && b.is_finite() && a < b) {
        return Err(Error::InvalidInterval { a, b });
    }
    Ok(())
}

/// Fixed-order Gauss–Legendre integral of a matrix-valued function.
pub fn gauss_legendre<F>(f: F, a: f64, b: f64, nodes: usize) -> Result<DMatrix<f64>>
where
    F: FnMut(f64) -> Result<DMatrix<f64>>,
{
    check_interval(a, b)?;
    GaussLegendre::new(nodes)?.integrate(f, a, b)
}

/// Gauss–Legendre with node doubling from [`DEFAULT_QUADRATURE_NODES`] until
/// successive estimates agree to [`QUADRATURE_TOLERANCE`].
pub fn gauss_legendre_adaptive<F>(mut f: F, a: f64, b: f64) -> Result<DMatrix<f64>>
where
    F: FnMut(f64) -> Result<DMatrix<f64>>,
{
    check_interval(a, b)?;
    let mut nodes = DEFAULT_QUADRATURE_NODES;
    let mut prev = GaussLegendre::new(nodes)?.integrate(&mut f, a, b)?;
    while nodes < MAX_QUADRATURE_NODES {
        nodes *= 2;
        let next = GaussLegendre::new(nodes)?.integrate(&mut f, a, b)?;
        let scale = next.amax().max(1.0);
        if (&next - &prev).amax() < QUADRATURE_TOLERANCE * scale {
            return Ok(next);
        }
        prev = next;
    }
    Err(Error::QuadratureDiverged { nodes })
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}
