use vtrigger_web::{filter_centers, filterbank, lr_curve, FusionExplorer};

#[test]
fn lr_curve_reaches_the_peak_at_warmup_end() {
    let c = lr_curve(1e-3, 2.0, 27.0, 7e-4, 0.7, 1e-7, 40.0, 21).unwrap();
    assert_eq!(c.len(), 21);
    assert_eq!(c[1], 1e-3);
    assert_eq!(c[0], 1e-7);
    assert!(c.windows(2).skip(1).all(|w| w[1] <= w[0]));
}

#[test]
fn filterbank_is_row_major_with_one_row_per_filter() {
    let fb = filterbank(16_000, 512, 40, 0.0, 8000.0).unwrap();
    assert_eq!(fb.len(), 40 * 257);
    let centers = filter_centers(16_000, 512, 40, 0.0, 8000.0);
    assert_eq!(centers.len(), 40);
    for (m, &hz) in centers.iter().enumerate() {
        let row = &fb[m * 257..(m + 1) * 257];
        let peak = row
            .iter()
            .cloned()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0;
        assert!(
            (peak as f64 * 16_000.0 / 512.0 - hz).abs() <= 16_000.0 / 512.0,
            "filter {m}"
        );
    }
}

#[test]
fn fusion_rejects_confusable_negatives_better_than_keyword_score() {
    let ex = FusionExplorer::new(3, 500, 2000, 3.0, 3.0, 0.2, 0.0, 10.0).unwrap();
    assert_eq!(ex.det(0.5).unwrap().len() % 2, 0);
    let keyword = ex.frr_at(0.0, 1.0).unwrap();
    let fused = ex.frr_at(0.5, 1.0).unwrap();
    assert!(fused < keyword, "fused {fused} vs keyword {keyword}");
}

#[test]
fn explorer_is_deterministic_per_seed() {
    let a = FusionExplorer::new(9, 50, 80, 2.0, 1.0, 0.3, 0.5, 5.0).unwrap();
    let b = FusionExplorer::new(9, 50, 80, 2.0, 1.0, 0.3, 0.5, 5.0).unwrap();
    assert_eq!(a.det(0.3).unwrap(), b.det(0.3).unwrap());
    assert!((a.negative_hours() - 80.0 * 5.0 / 3600.0).abs() < 1e-15);
}
