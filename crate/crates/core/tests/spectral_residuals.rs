use nalgebra::{DMatrix, SVD};
use num_complex::Complex64;
use proptest::prelude::*;
use regen_stability::spectral_summary;

fn smallest_singular_value(a: &DMatrix<f64>, lambda: Complex64) -> f64 {
    let n = a.nrows();
    let shifted = DMatrix::from_fn(n, n, |i, j| {
        let v = Complex64::new(a[(i, j)], 0.0);
        if i == j {
            v - lambda
        } else {
            v
        }
    });
    SVD::new(shifted, false, false).singular_values.min()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn every_eigenvalue_makes_the_shift_singular(
        a in (1usize..=12).prop_flat_map(|n| prop::collection::vec(-3.0..3.0f64, n * n).prop_map(move |v| DMatrix::from_vec(n, n, v)))
    ) {
        let summary = spectral_summary(&a).unwrap();
        prop_assert_eq!(summary.eigenvalues.len(), a.nrows());
        let scale = a.norm().max(1.0);
        for z in &summary.eigenvalues {
            prop_assert!(smallest_singular_value(&a, *z) <= 1e-10 * scale);
        }
        let rho = summary.eigenvalues.iter().map(|z| z.norm()).fold(0.0, f64::max);
        prop_assert_eq!(summary.spectral_radius, rho);
        let trace: f64 = summary.eigenvalues.iter().map(|z| z.re).sum();
        prop_assert!((trace - a.trace()).abs() <= 1e-10 * scale * a.nrows() as f64);
    }
}

#[test]
fn block_cyclic_spectrum_resolves() {
    // ±λ-symmetric spectrum from a matrix with zero diagonal blocks
    let upper = DMatrix::from_row_slice(3, 3, &[1.18, 0.25, 0.05, -0.25, 0.95, 0.18, 0.05, -0.18, 0.87]);
    let lower = DMatrix::from_row_slice(3, 3, &[0.5, 0.32, 0.19, 0.0, 0.45, 0.27, 0.0, 0.0, 0.42]);
    let mut a = DMatrix::zeros(6, 6);
    a.view_mut((0, 3), (3, 3)).copy_from(&upper);
    a.view_mut((3, 0), (3, 3)).copy_from(&lower);
    let summary = spectral_summary(&a).unwrap();
    let squared = spectral_summary(&(&upper * &lower)).unwrap();
    assert!((summary.spectral_radius.powi(2) - squared.spectral_radius).abs() < 1e-12);
    for z in &summary.eigenvalues {
        assert!(smallest_singular_value(&a, *z) < 1e-12);
    }
}
