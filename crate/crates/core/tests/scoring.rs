mod common;

use common::{brute_best_f1, brute_point_adjust};
use darts::data::{make_samples, TimeSeriesDataset};
use darts::model::{Calibration, Darts, ModelConfig};
use darts::scoring::export::{capture_graphs, save_scores, save_snapshot, MetricsFile};
use darts::scoring::{
    average_f1, evaluate, fit_calibration, point_adjust, quantile, raw_errors, score, AnomalyReport, Metrics,
    ScoreSet, ThresholdMode,
};
use darts::DartsError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        window: 4,
        history: 8,
        stride: 2,
        d_model: 4,
        head_dim: 4,
        ..Default::default()
    }
}

fn random_labels(rng: &mut ChaCha8Rng, len: usize) -> Vec<bool> {
    // runs of random length so segments of several sizes appear
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let v = rng.gen_bool(0.3);
        let run = rng.gen_range(1..8);
        out.extend(std::iter::repeat(v).take(run));
    }
    out.truncate(len);
    out
}

#[test]
fn point_adjust_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let len = rng.gen_range(1..60);
        let truth = random_labels(&mut rng, len);
        let pred: Vec<bool> = (0..len).map(|_| rng.gen_bool(0.2)).collect();
        assert_eq!(point_adjust(&pred, &truth).unwrap(), brute_point_adjust(&pred, &truth));
    }
}

#[test]
fn point_adjust_without_anomalies_is_identity() {
    let pred = [true, false, true, false];
    assert_eq!(point_adjust(&pred, &[false; 4]).unwrap(), pred.to_vec());
}

#[test]
fn best_f1_matches_exhaustive_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..200 {
        let truth = random_labels(&mut rng, 200);
        // coarse values force ties between scores
        let scores: Vec<f64> = truth
            .iter()
            .map(|&t| (rng.gen::<f64>() * 20.0 + if t { 4.0 } else { 0.0 }).round() / 4.0)
            .collect();
        let r = evaluate(&scores, &truth, ThresholdMode::BestF1).unwrap();
        let (thr, p, rec, f) = brute_best_f1(&scores, &truth);
        assert_eq!(r.threshold, thr, "case {case}");
        assert!((r.metrics.f1 - f).abs() < 1e-12);
        assert!((r.metrics.precision - p).abs() < 1e-12);
        assert!((r.metrics.recall - rec).abs() < 1e-12);
    }
}

#[test]
fn best_f1_dominates_fixed_thresholds() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let truth = random_labels(&mut rng, 300);
    let scores: Vec<f64> = (0..300).map(|_| rng.gen()).collect();
    let best = evaluate(&scores, &truth, ThresholdMode::BestF1).unwrap();
    for _ in 0..50 {
        let fixed = evaluate(&scores, &truth, ThresholdMode::Fixed(rng.gen())).unwrap();
        assert!(best.metrics.f1 >= fixed.metrics.f1);
    }
}

#[test]
fn monotone_transform_keeps_decisions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let truth = random_labels(&mut rng, 300);
    let scores: Vec<f64> = (0..300).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + s).collect();
    let a = evaluate(&scores, &truth, ThresholdMode::BestF1).unwrap();
    let b = evaluate(&warped, &truth, ThresholdMode::BestF1).unwrap();
    assert_eq!(a.decisions, b.decisions);
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn report_invariants_hold() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let truth = random_labels(&mut rng, 100);
    let scores: Vec<f64> = (0..100).map(|_| rng.gen()).collect();
    let r = evaluate(&scores, &truth, ThresholdMode::Fixed(0.6)).unwrap();
    assert!(r.decisions.iter().zip(&scores).all(|(&d, &s)| d == (s >= 0.6)));
    let Metrics { precision: p, recall: rc, f1 } = r.metrics;
    assert!((f1 - 2.0 * p * rc / (p + rc)).abs() < 1e-12);
    let raw_recall = common::prf(&r.decisions, &truth).1;
    assert!(rc >= raw_recall);
}

#[test]
fn all_negative_predictions_have_zero_recall() {
    let truth = [false, true, true, false];
    let r = evaluate(&[0.0; 4], &truth, ThresholdMode::Fixed(0.5)).unwrap();
    assert_eq!((r.metrics.recall, r.metrics.f1), (0.0, 0.0));
}

#[test]
fn averages_reported_f1_values() {
    let report = |f1| AnomalyReport {
        threshold: 0.0,
        decisions: vec![],
        adjusted: vec![],
        metrics: Metrics {
            precision: f1,
            recall: f1,
            f1,
        },
    };
    let avg = average_f1(&[report(0.7110), report(0.8531), report(0.9194)]).unwrap();
    assert!((avg - 0.8278).abs() < 5e-5);
    assert_eq!(average_f1(&[report(0.4)]).unwrap(), 0.4);
    assert!((average_f1(&[report(0.3), report(0.3), report(0.3)]).unwrap() - 0.3).abs() < 1e-15);
    assert!(average_f1(&[]).is_err());
}

#[test]
fn quantiles_interpolate_linearly() {
    let v = [1.0, 2.0, 4.0, 8.0, 16.0];
    assert_eq!(quantile(&v, 0.5), 4.0);
    assert_eq!(quantile(&v, 0.25), 2.0);
    assert_eq!(quantile(&v, 0.9), 8.0 + 0.6 * 8.0);
}

#[test]
fn calibration_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 3;
    let raw: Vec<Option<f64>> = (0..40 * n)
        .map(|i| (i / n >= 5).then(|| rng.gen::<f64>() * (1 + i % n) as f64))
        .collect();
    let cal = fit_calibration(&raw, n).unwrap();
    for c in 0..n {
        let mut v: Vec<f64> = (5..40).map(|t| raw[t * n + c].unwrap()).collect();
        v.sort_by(f64::total_cmp);
        // 35 values: quartiles at sorted positions 8.5, 17, 25.5
        let med = v[17];
        let q1 = 0.5 * (v[8] + v[9]);
        let q3 = 0.5 * (v[25] + v[26]);
        assert!((cal.median[c] - med).abs() < 1e-12);
        assert!((cal.iqr[c] - (q3 - q1)).abs() < 1e-12);
        let r = 0.77;
        assert!(((r - cal.median[c]) / cal.iqr[c] - (r - med) / (q3 - q1)).abs() < 1e-9);
    }
    let flat = vec![Some(2.0); 10];
    assert_eq!(fit_calibration(&flat, 1).unwrap().iqr, vec![1e-3]);
}

#[test]
fn global_score_tracks_a_channel_spike() {
    let mut channel = vec![0.1; 5 * 3];
    let flat = ScoreSet::from_channels(3, 0, channel.clone());
    channel[2 * 3 + 1] += 4.0;
    let spiked = ScoreSet::from_channels(3, 0, channel);
    assert!((spiked.row(2)[1] - flat.row(2)[1] - 4.0).abs() < 1e-12);
    assert!((spiked.global[2] - flat.global[2] - 4.0).abs() < 1e-12);
}

fn zero_output(model: &mut Darts) {
    for name in ["fusion.out.weight", "fusion.out.bias"] {
        let id = model.params().id_of(name).unwrap();
        model.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

#[test]
fn perfect_predictions_have_zero_raw_error() {
    let cfg = tiny_config();
    let mut model = Darts::new(cfg.clone(), 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    zero_output(&mut model);
    let ds = TimeSeriesDataset::from_rows(&vec![vec![0.0; 3]; 30], None).unwrap();
    let samples = make_samples(&ds, cfg.layout()).unwrap();
    let raw = raw_errors(&model, &samples, ds.len(), 4).unwrap();
    assert!(raw.iter().flatten().all(|&e| e == 0.0));
    assert!(raw[..12 * 3].iter().all(Option::is_none));
}

#[test]
fn scoring_requires_calibration() {
    let cfg = tiny_config();
    let model = Darts::new(cfg, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let ds = TimeSeriesDataset::from_rows(&vec![vec![0.0; 3]; 30], None).unwrap();
    assert!(matches!(score(&model, &ds, 1, 4), Err(DartsError::Contract(_))));
}

#[test]
fn dense_scores_cover_every_step_after_warmup() {
    let cfg = tiny_config();
    let mut model = Darts::new(cfg, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    model.metadata.calibration = Some(Calibration {
        median: vec![0.0; 3],
        iqr: vec![1.0; 3],
    });
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let rows: Vec<Vec<f64>> = (0..37).map(|_| (0..3).map(|_| rng.gen()).collect()).collect();
    let ds = TimeSeriesDataset::from_rows(&rows, None).unwrap();
    for stride in [1, 3, 4] {
        let s = score(&model, &ds, stride, 4).unwrap();
        assert_eq!(s.first_scored, 12);
        assert!(s.global[..12].iter().all(|&g| g == 0.0));
        assert!(s.channel[12 * 3..].iter().all(|&c| c > 0.0));
    }
    let dense = score(&model, &ds, 1, 4).unwrap();
    // the final step is covered by the last target only
    let last = &dense.global[36];
    assert_eq!(*last, score(&model, &ds, 4, 4).unwrap().global[36]);
}

#[test]
fn exports_follow_the_documented_layout() {
    let cfg = tiny_config();
    let model = Darts::new(cfg.clone(), 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let rows: Vec<Vec<f64>> = (0..30).map(|_| (0..3).map(|_| rng.gen()).collect()).collect();
    let ds = TimeSeriesDataset::from_rows(&rows, None).unwrap();
    let samples = make_samples(&ds, cfg.layout()).unwrap();
    let snap = capture_graphs(&model, &samples[0]).unwrap();
    assert_eq!(snap.heads.len(), 3);
    assert!(snap.heads.iter().all(|h| h.len() == 6));
    assert_eq!(snap.affinity.as_ref().unwrap().shape(), &[2, 2]);

    let dir = tempfile::tempdir().unwrap();
    let paths = save_snapshot(dir.path(), "s0", &snap).unwrap();
    assert_eq!(paths.len(), 4);
    let head0 = std::fs::read_to_string(&paths[0]).unwrap();
    let mut lines = head0.lines();
    assert!(lines.next().unwrap().starts_with("# darts-graph v1"));
    assert_eq!(lines.next().unwrap(), "source,target,probability,sampled");
    assert_eq!(lines.count(), 6);
    let aff = std::fs::read_to_string(&paths[3]).unwrap();
    assert_eq!(aff.lines().count(), 3);
    assert!(aff.lines().skip(1).all(|l| l.split(',').count() == 2));

    let scores = ScoreSet::from_channels(3, 1, vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0]);
    let names: Vec<String> = ds.channel_names().to_vec();
    let path = dir.path().join("scores.csv");
    save_scores(&path, &scores, &names).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# darts-scores v1"));
    assert_eq!(lines[1], format!("t,{},global", names.join(",")));
    assert_eq!(lines[3].split(',').last().unwrap().parse::<f64>().unwrap(), 3.0);

    let report = evaluate(&[0.1, 0.9], &[false, true], ThresholdMode::BestF1).unwrap();
    let mpath = dir.path().join("metrics.json");
    let mf = MetricsFile::new(&report, "best_f1");
    mf.save(&mpath).unwrap();
    assert_eq!(MetricsFile::load(&mpath).unwrap(), mf);
}
