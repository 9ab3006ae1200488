use terrain_diffusion::pipeline::*;

#[test]
fn welch_matches_hand_computation() {
    let a = [1.0, 2.0, 3.0, 4.0];
    let b = [2.0, 4.0, 6.0, 8.0, 10.0];
    // var a = 5/3, var b = 10; se² = 5/12 + 2
    let w = welch_t_test(&a, &b).unwrap();
    let se2: f64 = 5.0 / 12.0 + 2.0;
    assert!((w.t - (2.5 - 6.0) / se2.sqrt()).abs() < 1e-12);
    let df = se2 * se2 / ((5.0f64 / 12.0).powi(2) / 3.0 + 4.0 / 4.0);
    assert!((w.df - df).abs() < 1e-12);
    assert!(w.p_value > 0.01 && w.p_value < 0.1);
    let same = welch_t_test(&a, &a).unwrap();
    assert!((same.p_value - 1.0).abs() < 1e-12);
}
