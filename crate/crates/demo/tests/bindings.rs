use selfcal_demo::{calibrate_json, spectrum_json};

#[test]
fn calibration_view_has_bands_for_every_order() {
    let v: serde_json::Value = serde_json::from_str(&calibrate_json(2, 10, 1500, 1).unwrap()).unwrap();
    let grid = v["grid"].as_array().unwrap().len();
    assert_eq!(v["gains"].as_array().unwrap().len(), 10);
    assert_eq!(v["data"].as_array().unwrap().len(), 10);
    for key in ["bands", "baseline"] {
        let bands = v[key].as_array().unwrap();
        assert_eq!(bands.len(), 3);
        for b in bands {
            assert_eq!(b["median"].as_array().unwrap().len(), grid);
        }
    }
    for t in v["truth"].as_array().unwrap() {
        assert_eq!(t.as_array().unwrap().len(), 10);
    }
}

#[test]
fn spectrum_rows_sum() {
    let rows: Vec<[f64; 4]> = serde_json::from_str(&spectrum_json(0.2, 1.0, 0.1, 10.0, 11)).unwrap();
    assert_eq!(rows.len(), 11);
    assert_eq!(rows[10][0], 10.0);
    assert!(rows.iter().all(|r| r[3] == r[1] + r[2]));
}
