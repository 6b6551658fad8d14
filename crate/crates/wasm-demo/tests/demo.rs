use stokes_rve_wasm_demo::{centers, corrector_speed, effective};

#[test]
fn centers_come_in_pairs_inside_the_cell() {
    let c = centers(16.0, 0.1, 0.5, 3).unwrap();
    assert_eq!(c.len() % 2, 0);
    assert_eq!(c.len() / 2, (0.1f64 * 256.0 / std::f64::consts::PI).round() as usize);
    assert!(c.iter().all(|x| (0.0..16.0).contains(x)));
    assert_eq!(c, centers(16.0, 0.1, 0.5, 3).unwrap());
}

#[test]
fn corrector_speed_marks_inclusions() {
    let v = corrector_speed(8.0, 0.1, 0.5, 1, 32, 1).unwrap();
    assert_eq!(v.len(), 32 * 32);
    let nan = v.iter().filter(|x| x.is_nan()).count();
    assert!(nan > 0 && nan < 200, "{nan}");
    assert!(v.iter().filter(|x| !x.is_nan()).all(|x| x.is_finite() && *x >= 0.0));
}

#[test]
fn empty_cell_is_identity() {
    let s = effective(8.0, 0.0, 0.5, 0, 16).unwrap();
    let v: serde_json::Value = serde_json::from_str(&s).unwrap();
    let b: Vec<f64> = serde_json::from_value(v["B"].clone()).unwrap();
    assert!((b[0] - 1.0).abs() < 1e-10 && b[1].abs() < 1e-10 && (b[3] - 1.0).abs() < 1e-10);
    assert_eq!(v["inclusions"], 0);
}

#[test]
fn bad_inputs_are_errors() {
    assert!(corrector_speed(8.0, 0.1, 0.5, 1, 4, 0).is_err());
    assert!(corrector_speed(8.0, 0.1, 0.5, 1, 32, 7).is_err());
    assert!(effective(8.0, 0.9, 0.5, 0, 16).is_err());
}
