use tema_wasm::{check_summary, reference_summary, Session};

#[test]
fn summaries_round_trip_through_json() {
    let s = reference_summary("make the sleeves longer and add a red belt").unwrap();
    let v: serde_json::Value = serde_json::from_str(&check_summary("make the sleeves longer and add a red belt", &s)).unwrap();
    assert_eq!(v["status"], "Pass");
    let v: serde_json::Value = serde_json::from_str(&check_summary("add a red belt", "Modify the boots.")).unwrap();
    assert_eq!(v["status"], "Both");
    assert!(reference_summary("   ").is_err());
}

#[test]
fn session_trains_and_reports() {
    let mut s = Session::new(12, 3, 3, 1e-3).unwrap();
    let mut last = 0;
    for _ in 0..3 {
        let v: serde_json::Value = serde_json::from_str(&s.step().unwrap()).unwrap();
        let r1 = v["r1"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&r1));
        assert!(v["loss"].as_f64().unwrap().is_finite());
        last = v["epoch"].as_u64().unwrap();
    }
    assert_eq!(last, 3);

    let g = s.gram("make the collar white").unwrap();
    let n = s.channels();
    assert_eq!(g.len(), n * n + 1);
    for i in 0..n {
        assert!((g[i * n + i] - 1.0).abs() < 1e-9);
        for j in 0..n {
            assert!((g[i * n + j] - g[j * n + i]).abs() < 1e-12);
        }
    }
    assert!(g[n * n] >= 0.0);
}

#[test]
fn bad_settings_are_reported() {
    assert!(Session::new(12, 0, 0, 1e-3).is_err());
}
