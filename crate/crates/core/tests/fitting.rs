use mlbranch_core::diagnostics::{fit_points, fit_rate, StudyRow, StudyTable};
use mlbranch_core::rng::{standard_normal, StreamKey};

#[test]
fn square_root_with_one_percent_noise() {
    for seed in 0..20u64 {
        let xs: Vec<f64> = (0..12).map(|k| (-f64::from(k)).exp2()).collect();
        let ys: Vec<f64> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| x.sqrt() * (1.0 + 0.01 * standard_normal(StreamKey::root(seed, 0, i as u64))))
            .collect();
        let fit = fit_points("statistic", &xs, &ys, None).unwrap();
        assert!((fit.slope - 0.5).abs() <= 0.02, "seed {seed} slope {}", fit.slope);
    }
}

#[test]
fn rows_with_large_errors_do_not_move_the_fit() {
    let mut t = StudyTable::new("t", vec![]);
    for k in 0..8 {
        let x = (-f64::from(k)).exp2();
        // the last two rows are wildly off but flagged as noisy
        let (y, se) = if k >= 6 { (1.0, 0.5) } else { (3.0 * x * x, 0.01 * x * x) };
        t.push(StudyRow { abscissa: x, statistic: y, stderr: se, n: 1, aux: vec![] }).unwrap();
    }
    let fit = fit_rate(&t, "statistic").unwrap();
    assert!((fit.slope - 2.0).abs() < 1e-9);
    assert_eq!(fit.points, 6);
}
