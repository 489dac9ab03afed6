mod common;

use common::free_model;
use nlsq_core::free_field::sample_matrix;
use nlsq_core::particles::*;
use nlsq_core::regularity::*;
use nlsq_core::stats::mean_stderr;

#[test]
fn half_alpha_preset_exponent() {
    let lambda = [1.0, 0.6, 0.25, 0.1];
    let ci = preset_example0(&lambda, 0.5, 1.0).unwrap();
    for (w, l) in ci.term_weights().iter().zip(&lambda) {
        assert!((w - l.powi(3)).abs() < 1e-14 * l.powi(3));
    }
}

#[test]
fn unit_tails_reduce_to_weight_sums() {
    let k = 10;
    let beta: Vec<f64> = (1..=k).map(|i| 4f64.powi(-i)).collect();
    let ci = ConditionInput::new(1.0, beta.clone(), vec![1.0; k as usize], 1.0).unwrap();
    let r = check_condition_1_11(&ci, TailProvider::Unit).unwrap();
    assert!((r.partial_sums[9] - 1.0 / 3.0).abs() < 1e-5);
    let direct: f64 = beta.iter().sum();
    assert!((r.partial_sums[9] - direct).abs() < 1e-15);
}

#[test]
fn free_field_preset_converges_at_k64() {
    let model = free_model(1, 10.0, 128, 64, 1.0);
    let ci = preset_example0(&model.es.lambda, 1.0, 1.0).unwrap();
    let var: Vec<f64> = (0..64).map(|i| model.cov[(i, i)]).collect();
    let r = check_condition_1_11(&ci, TailProvider::Gaussian(&var)).unwrap();
    assert!(r.converged, "increment {}", r.last_decade_increment);
    assert!(r.partial_sums.windows(2).all(|w| w[1] >= w[0]));
    let id = summability_identity(&ci, &model.es.lambda);
    assert!(id.abs_diff <= 1e-12 * id.sum_lambda_squared);
}

#[test]
fn m_scan_reaches_full_fraction() {
    let model = free_model(1, 10.0, 64, 32, 1.0);
    let ci = preset_example0(&model.es.lambda, 1.0, 1.0).unwrap();
    let s = sample_matrix(&model, 10_000, 3);
    let ms = [1.0, 3.0, 10.0, 30.0, 100.0, 300.0, 1000.0];
    let r = check_condition_1_12(&ci, &s, &ms).unwrap();
    assert!(r.scan.windows(2).all(|w| w[1].fraction >= w[0].fraction));
    assert!(r.scan.iter().any(|row| row.fraction >= 0.999));
    let far = check_condition_1_12(&ci, &s, &[1e9]).unwrap();
    assert_eq!(far.scan[0].fraction, 1.0);
}

#[test]
fn upper_face_belongs_to_next_cube() {
    assert_eq!(cube_of(&[0.5]), vec![1]);
    assert_eq!(cube_of(&[-0.5]), vec![0]);
    assert_eq!(cube_of(&[0.49999, 1.5]), vec![0, 2]);
    let conf = Configuration::new(1, 3.0, vec![Particle { y: vec![0.5], m: 2 }]).unwrap();
    assert_eq!(occupation_count(&conf, &[1]), 2);
    assert_eq!(occupation_count(&conf, &[0]), 0);
}

#[test]
fn ruelle_bound_decreases_in_n() {
    let p = RuelleParams { gamma: 0.05, delta: 0.0 };
    let b: Vec<f64> = [5, 10, 20].iter().map(|&n| ruelle_tail_bound(p, n).unwrap()).collect();
    assert!(b[0] > b[1] && b[1] > b[2] && b[2] > 0.0, "{b:?}");
    assert!(ruelle_tail_bound(RuelleParams { gamma: 1.0, delta: 0.0 }, 1).is_err());
}

#[test]
fn poisson_counts_match_intensity() {
    let (rho, w) = (2.0, 1.5);
    let counts: Vec<f64> = (0..10_000)
        .map(|s| sample_poisson_config(1, rho, w, 5, s).unwrap().total_multiplicity() as f64)
        .collect();
    assert!(mean_stderr(&counts).within(rho * 2.0 * w, 5.0));

    let rho = 0.01 / 4.0;
    let n = 10_000;
    let empty = (0..n)
        .filter(|&s| sample_poisson_config(2, rho, 1.0, 6, s).unwrap().points.is_empty())
        .count() as f64
        / n as f64;
    let p = (-0.01f64).exp();
    assert!((empty - p).abs() < 5.0 * (p * (1.0 - p) / n as f64).sqrt());
}

#[test]
fn cell_decay_holds_in_both_dimensions() {
    for d in [1, 2] {
        let r = cell_decay_check(d, 20, 10).unwrap();
        assert!(r.pass, "d = {d}: {:?}", r.ratios);
        assert_eq!(r.ratios.len(), 21);
    }
}

#[test]
fn membership_survives_union_with_empty() {
    let conf = sample_poisson_config(2, 0.5, 3.0, 7, 0).unwrap();
    let both = conf.union(&Configuration::empty(2, 3.0)).unwrap();
    let l = covering_l_max(&conf);
    assert_eq!(u_n_membership(&conf, 4, l).unwrap(), u_n_membership(&both, 4, l).unwrap());
}
