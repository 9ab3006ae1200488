use terrain_diffusion::raster::*;

#[test]
fn transform_inverse_round_trips() {
    let t = GeoTransform([100.0, 2.0, 0.5, -50.0, -0.25, -3.0]);
    let inv = t.inverse().unwrap();
    let (x, y) = t.apply(3.5, -1.25);
    let (c, r) = inv.apply(x, y);
    assert!((c - 3.5).abs() < 1e-12 && (r + 1.25).abs() < 1e-12);
    assert!(GeoTransform([0.0, 1.0, 2.0, 0.0, 2.0, 4.0]).inverse().is_err());
    let row = t.to_row();
    assert_eq!(GeoTransform::from_row(&row).unwrap(), t);
}
