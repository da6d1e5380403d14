use approx::assert_relative_eq;
use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use regen_stability::lift::MultiIndexBasis;
use regen_stability::model::{HoldingDistribution, InfinitesimalGenerator, ModeSet, SemiMarkovKernel};
use regen_stability::montecarlo::{
    empirical_lift_propagation, estimate_moments, propagate_state, sample_switching, uniform_grid, InitialCondition,
    MomentConfig, SamplePath,
};
use regen_stability::stability::{mjls_generator, semimarkov_matrix};
use regen_stability::{expm, load_model, spectral_abscissa, SwitchedSystemModel, SystemClass};

fn example(h: f64) -> SwitchedSystemModel {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../models/economy_periodic.json");
    load_model(path).unwrap().with_h(h).unwrap()
}

fn modes(list: Vec<DMatrix<f64>>) -> ModeSet {
    ModeSet::new((0..list.len()).map(|k| format!("m{k}")).collect(), list).unwrap()
}

fn within_three_se(got: &DVector<f64>, se: &DVector<f64>, want: &DVector<f64>) {
    for k in 0..got.len() {
        let bound = 3.0 * se[k] + 1e-12 * want[k].abs().max(1.0);
        assert!((got[k] - want[k]).abs() <= bound, "entry {k}: {} vs {} ± {bound}", got[k], want[k]);
    }
}

#[test]
fn observed_chain_transitions_follow_the_sampled_generator() {
    let model = example(0.1);
    let SystemClass::PeriodicObservation(periodic) = model.class() else { unreachable!() };
    let steps = 100_000;
    let path = sample_switching(&model, steps as f64 * 0.1, 77).unwrap();
    assert_eq!(path.regenerations.len(), steps + 1);
    let mut counts = DMatrix::<f64>::zeros(3, 3);
    for w in path.regenerations.windows(2) {
        counts[(w[0].1, w[1].1)] += 1.0;
    }
    let oracle = expm(&(periodic.generator().matrix() * 0.1)).unwrap();
    for i in 0..3 {
        let visits = counts.row(i).sum();
        assert!(visits > 1000.0);
        for j in 0..3 {
            let freq = counts[(i, j)] / visits;
            let p = oracle[(i, j)];
            let se = (p * (1.0 - p) / visits).sqrt();
            assert!((freq - p).abs() <= 3.0 * se, "({i},{j}): {freq} vs {p} ± {}", 3.0 * se);
        }
    }
}

#[test]
fn two_segment_propagation_matches_runge_kutta() {
    let a = dmatrix![-0.3, 2.0; -1.0, 0.1];
    let b = dmatrix![0.2, 0.0; 1.5, -0.8];
    let ms = modes(vec![a.clone(), b.clone()]);
    let path = SamplePath { events: vec![(0.0, 0), (1.3, 1)], regenerations: vec![(0.0, 0)], horizon: 2.5, seed: 0 };
    let x0 = dvector![0.7, -0.4];
    let got = propagate_state(&path, &ms, &x0, &[2.5]).unwrap().remove(0);

    let rhs = |m: &DMatrix<f64>, x: &DVector<f64>| m * x;
    let mut x = x0.clone();
    let dt = 1e-3;
    for (m, steps) in [(&a, 1300), (&b, 1200)] {
        for _ in 0..steps {
            let k1 = rhs(m, &x);
            let k2 = rhs(m, &(&x + &k1 * (dt / 2.0)));
            let k3 = rhs(m, &(&x + &k2 * (dt / 2.0)));
            let k4 = rhs(m, &(&x + &k3 * dt));
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        }
    }
    assert!((&got - &x).norm() <= 1e-6 * x.norm());
}

#[test]
fn stable_single_mode_decays_at_the_lifted_rate() {
    let a = dmatrix![-0.5, 1.0; 0.0, -0.8];
    let model =
        SwitchedSystemModel::mjls(modes(vec![a.clone()]), InfinitesimalGenerator::new(dmatrix![0.0]).unwrap(), 2)
            .unwrap();
    let config = MomentConfig {
        m: 2,
        initial: InitialCondition::UnitSphere,
        paths: 50,
        horizon: 10.0,
        grid: uniform_grid(10.0, 0.05).unwrap(),
        seed: 1,
        keep_paths: false,
    };
    let ens = estimate_moments(&model, &config).unwrap();
    let want = 2.0 * spectral_abscissa(&a).unwrap();
    let got = ens.empirical_growth_rate.unwrap();
    assert!((got - want).abs() <= 0.1 * want.abs(), "{got} vs {want}");
}

#[test]
fn single_path_of_a_single_mode_is_the_exponential() {
    let a = dmatrix![-0.2, 0.7; -0.7, -0.2];
    let model =
        SwitchedSystemModel::mjls(modes(vec![a.clone()]), InfinitesimalGenerator::new(dmatrix![0.0]).unwrap(), 2)
            .unwrap();
    let x0 = dvector![1.0, 1.0];
    let config = MomentConfig {
        m: 2,
        initial: InitialCondition::Fixed { x0: x0.clone(), theta0: Some(0) },
        paths: 1,
        horizon: 3.0,
        grid: uniform_grid(3.0, 0.5).unwrap(),
        seed: 0,
        keep_paths: false,
    };
    let ens = estimate_moments(&model, &config).unwrap();
    for (t, v) in ens.time_grid.iter().zip(&ens.moment_mean) {
        let want = (expm(&(&a * *t)).unwrap() * &x0).norm_squared();
        assert_relative_eq!(*v, want, max_relative = 1e-12);
    }
}

#[test]
fn positive_systems_keep_nonnegative_states() {
    let ms = modes(vec![dmatrix![-1.0, 0.5; 0.2, -0.3], dmatrix![0.1, 0.0; 1.0, -2.0]]);
    let q = InfinitesimalGenerator::new(dmatrix![-1.0, 1.0; 3.0, -3.0]).unwrap();
    let model = SwitchedSystemModel::mjls(ms.clone(), q, 3).unwrap();
    let grid = uniform_grid(5.0, 0.05).unwrap();
    for seed in 0..20 {
        let path = sample_switching(&model, 5.0, seed).unwrap();
        for x in propagate_state(&path, &ms, &dvector![0.3, 0.0], &grid).unwrap() {
            assert!(x.iter().all(|v| *v >= -1e-12));
        }
    }
}

#[test]
fn lifted_norm_is_the_powered_norm() {
    let model = example(0.1);
    let grid = uniform_grid(5.0, 0.25).unwrap();
    for m in 1..=4 {
        let basis = MultiIndexBasis::new(3, m).unwrap();
        let path = sample_switching(&model, 5.0, m as u64).unwrap();
        for x in propagate_state(&path, model.modes(), &dvector![0.6, 0.0, -0.8], &grid).unwrap() {
            let lifted = basis.lift(&x).unwrap().norm();
            let powered = x.norm().powi(m as i32);
            assert!((lifted - powered).abs() <= 1e-10 * powered.max(1.0));
        }
    }
}

#[test]
fn moments_are_identical_across_thread_counts() {
    let model = example(0.2);
    let config = MomentConfig {
        m: 2,
        initial: InitialCondition::UnitSphere,
        paths: 64,
        horizon: 4.0,
        grid: uniform_grid(4.0, 0.01).unwrap(),
        seed: 5,
        keep_paths: true,
    };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| estimate_moments(&model, &config).unwrap())
    };
    let one = run(1);
    let many = run(6);
    assert_eq!(one.moment_mean.len(), many.moment_mean.len());
    assert!(one.moment_mean.iter().zip(&many.moment_mean).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(one.per_path_norms, many.per_path_norms);
}

#[test]
fn sampled_example_moments_fall_then_rise_with_the_period() {
    let grid = uniform_grid(10.0, 0.01).unwrap();
    let config = |seed| MomentConfig {
        m: 2,
        initial: InitialCondition::UnitSphere,
        paths: 100,
        horizon: 10.0,
        grid: grid.clone(),
        seed,
        keep_paths: false,
    };
    let stable = estimate_moments(&example(0.1), &config(2)).unwrap();
    let unstable = estimate_moments(&example(0.3), &config(2)).unwrap();
    let last = grid.len() - 1;
    assert!(stable.moment_mean[last] < stable.moment_mean[0]);
    assert!(stable.empirical_growth_rate.unwrap() < 0.0);
    assert!(unstable.moment_mean[last] > unstable.moment_mean[0]);
    assert!(unstable.empirical_growth_rate.unwrap() > 0.0);
}

#[test]
fn one_regeneration_step_matches_the_block_matrix() {
    let ms = modes(vec![dmatrix![-0.4, 1.0; -0.5, -0.2], dmatrix![0.1, 0.3; 0.0, -0.6]]);
    let p = dmatrix![0.3, 0.7; 0.6, 0.4];
    let law = |a: f64, b: f64| HoldingDistribution::DiscreteFinite { atoms: vec![(a, 0.4), (b, 0.6)] };
    let kernel = SemiMarkovKernel::new(
        p,
        vec![((0, 0), law(0.5, 1.0)), ((0, 1), law(1.0, 2.0)), ((1, 0), law(0.3, 0.9)), ((1, 1), law(1.5, 0.2))],
    )
    .unwrap();
    let model = SwitchedSystemModel::semi_markov(ms.clone(), kernel.clone(), vec![0, 1], 2).unwrap();
    let a = semimarkov_matrix(&kernel, &ms, &[0, 1], 2).unwrap().matrix;
    let x0 = dvector![1.0, -0.5];
    let basis = MultiIndexBasis::new(2, 2).unwrap();
    let mut v0 = DVector::zeros(6);
    v0.rows_mut(0, 3).copy_from(&basis.lift(&x0).unwrap());
    let est = empirical_lift_propagation(&model, 2, 0, &x0, 1, None, 20_000, 3).unwrap();
    assert_eq!(est[0].mean, v0);
    within_three_se(&est[1].mean, &est[1].standard_error, &(&a * &v0));
}

#[test]
fn sampled_markov_moments_follow_the_lifted_generator() {
    let ms = modes(vec![dmatrix![-1.0, 0.5; 0.1, -0.3], dmatrix![0.3, -1.0; 1.0, 0.0]]);
    let q = InfinitesimalGenerator::new(dmatrix![-1.5, 1.5; 0.8, -0.8]).unwrap();
    let model = SwitchedSystemModel::mjls(ms.clone(), q.clone(), 2).unwrap();
    let b = mjls_generator(&q, &ms, 2).unwrap();
    let x0 = dvector![0.5, 1.0];
    let basis = MultiIndexBasis::new(2, 2).unwrap();
    let mut v0 = DVector::zeros(6);
    v0.rows_mut(3, 3).copy_from(&basis.lift(&x0).unwrap());
    let h = 0.25;
    let est = empirical_lift_propagation(&model, 2, 1, &x0, 3, Some(h), 20_000, 4).unwrap();
    for (k, e) in est.iter().enumerate() {
        let want = expm(&(&b * (k as f64 * h))).unwrap() * &v0;
        within_three_se(&e.mean, &e.standard_error, &want);
    }
}
