//! Symmetric m-lifts of vectors and the matrices induced on them.
//!
//! For `x ∈ ℝⁿ` the m-lift `x^[m]` collects every degree-m monomial
//! `sqrt(α!)·x^α`, where `α! = m!/(α₁!⋯αₙ!)` is the multinomial coefficient.
//! The weighting makes the lift an isometry onto its image in the sense that
//! `‖x^[m]‖ = ‖x‖^m`.
//!
//! Coordinates are ordered lexicographically by exponent with the power of
//! the first variable descending, so for `n = 2`:
//!
//! ```text
//! x^[2] = [x₁², √2·x₁x₂, x₂²]
//! x^[3] = [x₁³, √3·x₁²x₂, √3·x₁x₂², x₂³]
//! ```
//!
//! Two matrix lifts are built on top of this basis:
//!
//! * the induced matrix `A^[m]`, the unique matrix with `(Ax)^[m] = A^[m] x^[m]`;
//! * the infinitesimal lift `A_[m]`, the generator of the lifted flow, so that
//!   `(exp(At))^[m] = exp(A_[m] t)`.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Exponent vectors of all degree-m monomials in n variables, in lift order.
#[derive(Debug, Clone)]
pub struct MultiIndexBasis {
    n: usize,
    m: usize,
    indices: Vec<Vec<u32>>,
    position: HashMap<Vec<u32>, usize>,
    /// Exact `m!/(α₁!⋯αₙ!)` per index.
    multinomials: Vec<u128>,
    /// `sqrt` of the multinomials, the lift weights.
    weights: Vec<f64>,
}

impl PartialEq for MultiIndexBasis {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n && self.m == other.m
    }
}

impl MultiIndexBasis {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::Dimension(format!("lift requires n >= 1 and m >= 1, got n = {n}, m = {m}")));
        }
        let indices = exponents(n, m as u32);
        let multinomials = indices.iter().map(|alpha| multinomial(alpha)).collect::<Result<Vec<_>>>()?;
        let weights = multinomials.iter().map(|&c| (c as f64).sqrt()).collect();
        let position = indices.iter().enumerate().map(|(k, alpha)| (alpha.clone(), k)).collect();
        Ok(MultiIndexBasis { n, m, indices, position, multinomials, weights })
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Lift degree.
    pub fn m(&self) -> usize {
        self.m
    }

    /// Lifted dimension `n_m = binomial(n + m - 1, m)`.
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[Vec<u32>] {
        &self.indices
    }

    pub fn position(&self, alpha: &[u32]) -> Option<usize> {
        self.position.get(alpha).copied()
    }

    /// Exact multinomial `α!` of the k-th index.
    pub fn multinomial(&self, k: usize) -> u128 {
        self.multinomials[k]
    }

    pub fn weight(&self, k: usize) -> f64 {
        self.weights[k]
    }

    /// Computes `x^[m]`.
    pub fn lift(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.n {
            return Err(Error::Dimension(format!("vector of length {} lifted in a basis for n = {}", x.len(), self.n)));
        }
        Ok(DVector::from_iterator(
            self.len(),
            self.indices.iter().zip(&self.weights).map(|(alpha, w)| {
                alpha.iter().zip(x.iter()).filter(|(&a, _)| a > 0).fold(*w, |acc, (&a, &xi)| acc * xi.powi(a as i32))
            }),
        ))
    }

    /// Computes the induced matrix `A^[m]`.
    ///
    /// Row α expands `Πᵢ ((Ax)ᵢ)^αᵢ` into monomials. Each factor power is
    /// expanded with exact integer multinomial coefficients and the factors
    /// are then multiplied out over exponent-keyed coefficient maps.
    pub fn induced(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_operator(a)?;
        let n = self.n;
        // Degree-p exponents with their exact multinomials, p = 0..=m.
        let powers: Vec<Vec<(Vec<u32>, f64)>> = (0..=self.m as u32)
            .map(|p| {
                exponents(n, p)
                    .into_iter()
                    .map(|g| {
                        let c = multinomial(&g).expect("sub-degree multinomial fits") as f64;
                        (g, c)
                    })
                    .collect()
            })
            .collect();

        let mut out = DMatrix::zeros(self.len(), self.len());
        for (row, alpha) in self.indices.iter().enumerate() {
            let mut poly: HashMap<Vec<u32>, f64> = HashMap::new();
            poly.insert(vec![0; n], 1.0);
            for (i, &ai) in alpha.iter().enumerate() {
                if ai == 0 {
                    continue;
                }
                // (Σ_k a_ik x_k)^ai = Σ_γ multinomial(γ) Π_k a_ik^γk x^γ
                let factor: Vec<(&Vec<u32>, f64)> = powers[ai as usize]
                    .iter()
                    .map(|(g, c)| {
                        let coef = g
                            .iter()
                            .enumerate()
                            .filter(|(_, &gk)| gk > 0)
                            .fold(*c, |acc, (k, &gk)| acc * a[(i, k)].powi(gk as i32));
                        (g, coef)
                    })
                    .filter(|(_, coef)| *coef != 0.0)
                    .collect();
                let mut next: HashMap<Vec<u32>, f64> = HashMap::with_capacity(poly.len());
                for (e, c) in &poly {
                    for (g, fc) in &factor {
                        let key: Vec<u32> = e.iter().zip(g.iter()).map(|(x, y)| x + y).collect();
                        *next.entry(key).or_insert(0.0) += c * fc;
                    }
                }
                poly = next;
            }
            for (beta, c) in poly {
                let col = self.position[&beta];
                out[(row, col)] = self.weights[row] / self.weights[col] * c;
            }
        }
        Ok(out)
    }

    /// Computes the infinitesimal lift `A_[m]`.
    ///
    /// Entry (α, β) collects `αᵢ·a_ij` over every move `β = α - eᵢ + eⱼ`,
    /// scaled by `sqrt(α!/β!)`.
    pub fn infinitesimal(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_operator(a)?;
        let mut out = DMatrix::zeros(self.len(), self.len());
        let mut beta = vec![0u32; self.n];
        for (row, alpha) in self.indices.iter().enumerate() {
            for i in 0..self.n {
                if alpha[i] == 0 {
                    continue;
                }
                for j in 0..self.n {
                    let aij = a[(i, j)];
                    if aij == 0.0 {
                        continue;
                    }
                    beta.copy_from_slice(alpha);
                    beta[i] -= 1;
                    beta[j] += 1;
                    let col = self.position[&beta];
                    out[(row, col)] += self.weights[row] / self.weights[col] * f64::from(alpha[i]) * aij;
                }
            }
        }
        Ok(out)
    }

    fn check_operator(&self, a: &DMatrix<f64>) -> Result<()> {
        if !a.is_square() {
            return Err(Error::NonSquare { rows: a.nrows(), cols: a.ncols() });
        }
        if a.nrows() != self.n {
            return Err(Error::Dimension(format!("{0}x{0} matrix lifted in a basis for n = {1}", a.nrows(), self.n)));
        }
        Ok(())
    }
}

/// All exponent vectors of length `n` summing to `degree`, first coordinate
/// descending.
fn exponents(n: usize, degree: u32) -> Vec<Vec<u32>> {
    fn fill(prefix: &mut Vec<u32>, n: usize, left: u32, out: &mut Vec<Vec<u32>>) {
        if prefix.len() + 1 == n {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for a in (0..=left).rev() {
            prefix.push(a);
            fill(prefix, n, left - a, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    fill(&mut Vec::with_capacity(n), n, degree, &mut out);
    out
}

/// `(Σα)!/(Πα!)` as a product of binomials, exact in u128.
fn multinomial(alpha: &[u32]) -> Result<u128> {
    let mut total: u128 = 0;
    let mut acc: u128 = 1;
    for &a in alpha {
        for k in 1..=u128::from(a) {
            total += 1;
            // acc * total / k stays integral at every step
            acc = acc.checked_mul(total).ok_or_else(|| Error::Dimension("lift degree too large".into()))? / k;
        }
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LiftKind {
    Induced,
    Infinitesimal,
}

/// A lifted matrix together with the basis that fixes its coordinates.
#[derive(Debug, Clone)]
pub struct LiftedMatrix {
    pub basis: Arc<MultiIndexBasis>,
    pub entries: DMatrix<f64>,
    pub kind: LiftKind,
}

pub fn multi_index_basis(n: usize, m: usize) -> Result<MultiIndexBasis> {
    MultiIndexBasis::new(n, m)
}

pub fn lift_vector(x: &DVector<f64>, m: usize) -> Result<DVector<f64>> {
    MultiIndexBasis::new(x.len(), m)?.lift(x)
}

pub fn induced_matrix(a: &DMatrix<f64>, m: usize) -> Result<LiftedMatrix> {
    let basis = Arc::new(MultiIndexBasis::new(square_dim(a)?, m)?);
    let entries = basis.induced(a)?;
    Ok(LiftedMatrix { basis, entries, kind: LiftKind::Induced })
}

pub fn infinitesimal_lift(a: &DMatrix<f64>, m: usize) -> Result<LiftedMatrix> {
    let basis = Arc::new(MultiIndexBasis::new(square_dim(a)?, m)?);
    let entries = basis.infinitesimal(a)?;
    Ok(LiftedMatrix { basis, entries, kind: LiftKind::Infinitesimal })
}

fn square_dim(a: &DMatrix<f64>) -> Result<usize> {
    if a.is_square() {
        Ok(a.nrows())
    } else {
        Err(Error::NonSquare { rows: a.nrows(), cols: a.ncols() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn basis_orders() {
        let b = MultiIndexBasis::new(2, 2).unwrap();
        assert_eq!(b.indices(), &[vec![2, 0], vec![1, 1], vec![0, 2]]);

        let b = MultiIndexBasis::new(4, 1).unwrap();
        assert_eq!(b.indices(), &[vec![1, 0, 0, 0], vec![0, 1, 0, 0], vec![0, 0, 1, 0], vec![0, 0, 0, 1]]);

        let b = MultiIndexBasis::new(3, 2).unwrap();
        assert_eq!(b.len(), 6);
        assert_eq!(b.indices()[0], vec![2, 0, 0]);
        assert_eq!(b.indices()[5], vec![0, 0, 2]);
        for (k, alpha) in b.indices().iter().enumerate() {
            assert_eq!(b.position(alpha), Some(k));
        }
    }

    #[test]
    fn basis_sizes_are_binomial() {
        fn binom(n: usize, k: usize) -> usize {
            (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
        }
        for n in 1..=5 {
            for m in 1..=5 {
                let b = MultiIndexBasis::new(n, m).unwrap();
                assert_eq!(b.len(), binom(n + m - 1, m), "n={n} m={m}");
                assert!(b.indices().iter().all(|a| a.iter().sum::<u32>() == m as u32));
            }
        }
    }

    #[test]
    fn rejects_zero_dimensions() {
        assert!(matches!(MultiIndexBasis::new(0, 2), Err(Error::Dimension(_))));
        assert!(matches!(MultiIndexBasis::new(2, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn exact_multinomials() {
        let b = MultiIndexBasis::new(3, 4).unwrap();
        let k = b.position(&[2, 1, 1]).unwrap();
        assert_eq!(b.multinomial(k), 12);
        assert_eq!(multinomial(&[10, 10, 10]).unwrap(), 5_550_996_791_340);
    }

    #[test]
    fn cubic_lift_of_plane_vector() {
        let (x1, x2) = (0.7, -1.3);
        let s3 = 3f64.sqrt();
        let got = lift_vector(&dvector![x1, x2], 3).unwrap();
        let want = dvector![x1 * x1 * x1, s3 * x1 * x1 * x2, s3 * x1 * x2 * x2, x2 * x2 * x2];
        assert_relative_eq!(got, want, epsilon = 1e-15);
    }

    #[test]
    fn lift_of_first_unit_vector() {
        let got = lift_vector(&dvector![1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(got[0], 1.0);
        assert!(got.iter().skip(1).all(|&v| v == 0.0));
    }

    #[test]
    fn lift_of_three_four() {
        let got = lift_vector(&dvector![3.0, 4.0], 2).unwrap();
        assert_relative_eq!(got, dvector![9.0, 12.0 * 2f64.sqrt(), 16.0], epsilon = 1e-12);
        assert_relative_eq!(got.norm(), 25.0, epsilon = 1e-12);
    }

    #[test]
    fn lift_dimension_mismatch() {
        let b = MultiIndexBasis::new(3, 2).unwrap();
        assert!(b.lift(&dvector![1.0, 2.0]).is_err());
    }

    #[test]
    fn induced_identity() {
        for m in 1..=4 {
            let l = induced_matrix(&DMatrix::identity(3, 3), m).unwrap();
            assert_eq!(l.entries, DMatrix::identity(l.basis.len(), l.basis.len()));
        }
    }

    #[test]
    fn induced_two_by_two_closed_form() {
        let (a, b, c, d) = (1.5, -0.4, 2.2, 0.3);
        let s2 = 2f64.sqrt();
        let got = induced_matrix(&dmatrix![a, b; c, d], 2).unwrap().entries;
        let want = dmatrix![
            a * a, s2 * a * b, b * b;
            s2 * a * c, a * d + b * c, s2 * b * d;
            c * c, s2 * c * d, d * d
        ];
        assert_relative_eq!(got, want, epsilon = 1e-14);
    }

    #[test]
    fn infinitesimal_two_by_two_closed_form() {
        let (a, b, c, d) = (1.5, -0.4, 2.2, 0.3);
        let s2 = 2f64.sqrt();
        let got = infinitesimal_lift(&dmatrix![a, b; c, d], 2).unwrap().entries;
        let want = dmatrix![
            2.0 * a, s2 * b, 0.0;
            s2 * c, a + d, s2 * b;
            0.0, s2 * c, 2.0 * d
        ];
        assert_relative_eq!(got, want, epsilon = 1e-14);
    }

    #[test]
    fn infinitesimal_of_diagonal() {
        let got = infinitesimal_lift(&dmatrix![-0.5, 0.0; 0.0, 2.0], 2).unwrap();
        assert_eq!(got.kind, LiftKind::Infinitesimal);
        assert_relative_eq!(got.entries, DMatrix::from_diagonal(&dvector![-1.0, 1.5, 4.0]), epsilon = 1e-15);
    }

    #[test]
    fn degree_one_lifts_are_the_matrix() {
        let a = dmatrix![1.0, -2.0, 0.5; 3.0, 0.25, -1.0; 0.0, 4.0, 2.0];
        assert_eq!(induced_matrix(&a, 1).unwrap().entries, a);
        assert_eq!(infinitesimal_lift(&a, 1).unwrap().entries, a);
    }

    #[test]
    fn non_square_rejected() {
        let a = DMatrix::<f64>::zeros(2, 3);
        assert!(matches!(induced_matrix(&a, 2), Err(Error::NonSquare { .. })));
        assert!(matches!(infinitesimal_lift(&a, 2), Err(Error::NonSquare { .. })));
    }
}
