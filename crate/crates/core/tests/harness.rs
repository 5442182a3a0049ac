use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use vtprune_core::atr::PruneMask;
use vtprune_core::harness::*;
use vtprune_core::{stats, Error};

fn small_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.seed = 11;
    c.oracle.n_visual = 12;
    c.oracle.n_prompt = 2;
    c.oracle.n_caption = 3;
    c.oracle.n_layers = 6;
    c.oracle.n_scenes = 6;
    c.oracle.n_eval_scenes = 3;
    c.oracle.features.d_visual = 8;
    c.oracle.features.d_text = 8;
    c.oracle.features.latent_dim = 8;
    c.dvtie.d_model = 16;
    c.dvtie.d_lowrank = 4;
    c.dvtie.epochs = 2;
    c.dvtie.batch_size = 4;
    c.pruning.k_values = vec![0, 2];
    c.sync();
    c
}

fn dims(n_visual: usize) -> FlopsDims {
    FlopsDims {
        n_layers: 32,
        skip_layers: 2,
        n_visual,
        n_text: 50,
        d_model: 4096,
        ffn_multiplier: 4,
    }
}

#[test]
fn random_pruning_scores_its_ratio() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 300;
    let importance: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    for _ in 0..1000 {
        order.shuffle(&mut rng);
        let mut mask = PruneMask::none(n, 0);
        for &i in &order[..150] {
            mask.bits[i] = true;
        }
        total += pruning_accuracy(&mask, &importance, Some(0.5)).unwrap();
    }
    assert!((total / 1000.0 - 0.5).abs() < 0.05);
}

#[test]
fn accuracy_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 40;
    let importance: Vec<f64> = (0..n).map(|i| ((i * 37) % n) as f64 + 0.5).collect();
    let mut mask = PruneMask::none(n, 0);
    for i in (0..n).step_by(3).take(13) {
        mask.bits[i] = true;
    }
    let base = pruning_accuracy(&mask, &importance, None).unwrap();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let imp2: Vec<f64> = perm.iter().map(|&i| importance[i]).collect();
    let mut mask2 = PruneMask::none(n, 0);
    for (j, &i) in perm.iter().enumerate() {
        mask2.bits[j] = mask.bits[i];
    }
    assert_eq!(pruning_accuracy(&mask2, &imp2, None).unwrap(), base);
}

#[test]
fn perfect_and_inverted_predictions() {
    let importance = [0.4, 0.1, 0.3, 0.2];
    let mut mask = PruneMask::none(4, 0);
    mask.bits[1] = true;
    mask.bits[3] = true;
    assert_eq!(
        pruning_accuracy(&mask, &importance, Some(0.5)).unwrap(),
        1.0
    );
    let mut wrong = PruneMask::none(4, 0);
    wrong.bits[0] = true;
    wrong.bits[2] = true;
    assert_eq!(
        pruning_accuracy(&wrong, &importance, Some(0.5)).unwrap(),
        0.0
    );
    assert!(pruning_accuracy(&wrong, &importance, Some(0.25)).is_err());
}

#[test]
fn flops_closed_form_at_reference_dims() {
    // Per layer 12·n·d² + 2·n²·d; halved over d this is 6·n·d + n².
    // n = 350 unpruned, 30 + 50 = 80 after pruning 270 tokens.
    let full = 6.0 * 350.0 * 4096.0 + 350.0 * 350.0;
    let kept = 6.0 * 80.0 * 4096.0 + 80.0 * 80.0;
    let want = (2.0 * full + 30.0 * kept) / (32.0 * full);
    let got = flops_relative_static(&dims(300), 0.9).unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    assert!((want - 76_622_600.0 / 279_171_200.0).abs() < 1e-15);
    assert_eq!(flops_relative_static(&dims(300), 0.0).unwrap(), 1.0);
}

#[test]
fn flops_non_increasing_in_ratio() {
    let mut prev = f64::INFINITY;
    for i in 0..=100 {
        let f = flops_relative_static(&dims(300), i as f64 / 100.0).unwrap();
        assert!(f <= prev && f > 0.0);
        prev = f;
    }
    assert!(flops_relative(&dims(300), &[300; 29]).is_err());
    assert!(flops_relative(&dims(300), &[301; 30]).is_err());
}

#[test]
fn debias_contrast_depends_on_bias() {
    let run = |beta: f64| {
        let mut c = small_config();
        c.oracle.n_visual = 50;
        c.oracle.n_prompt = 4;
        c.oracle.n_caption = 6;
        c.oracle.n_layers = 8;
        c.oracle.n_scenes = 40;
        c.oracle.bias_strength = beta;
        c.pruning.ratios = vec![0.5];
        c.sync();
        let report = debias_experiment(&c).unwrap();
        assert_eq!(report.rows.len(), 40 * 2);
        let rho = |k: usize| -> Vec<f64> {
            report
                .rows
                .iter()
                .filter(|r| r.k == k)
                .map(|r| r.spearman)
                .collect()
        };
        let (k0, k2) = (rho(0), rho(2));
        (
            stats::mean(&k2) - stats::mean(&k0),
            stats::pooled_standard_error(&k2, &k0),
        )
    };
    let (gain, se) = run(0.8);
    assert!(gain >= 0.05 && gain > 2.0 * se, "{gain} {se}");
    let (gain, se) = run(0.0);
    assert!(gain.abs() < 2.0 * se, "{gain} {se}");
}

#[test]
fn debias_accepts_last_layer_only() {
    let mut c = small_config();
    c.oracle.n_scenes = 2;
    c.pruning.k_values = vec![5];
    let report = debias_experiment(&c).unwrap();
    assert!(report
        .rows
        .iter()
        .all(|r| r.k == 5 && r.spearman.is_finite()));
    c.pruning.k_values = vec![6];
    assert!(matches!(debias_experiment(&c), Err(Error::Config(_))));
}

#[test]
fn end_to_end_rows_and_determinism() {
    let mut c = small_config();
    c.oracle.n_eval_scenes = 1;
    let a = end_to_end_experiment(&c).unwrap();
    assert_eq!(a.rows.len(), 3 * 3);
    for row in &a.rows {
        assert!(row.flops_relative > 0.0 && row.flops_relative <= 1.0);
        assert!((0.0..=1.0).contains(&row.pruning_accuracy));
        assert_eq!((row.k, row.g, row.d_lowrank), (2, 2, 4));
    }
    for mode in ["random", "static"] {
        for r in a.rows.iter().filter(|r| r.mode == mode) {
            assert_eq!(r.ratio_realized, (r.ratio_requested * 12.0).floor() / 12.0);
        }
    }
    let b = end_to_end_experiment(&c).unwrap();
    assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
    let header = String::from_utf8(a.to_csv().unwrap()).unwrap();
    assert_eq!(header.lines().next().unwrap(), CSV_HEADER.join(","));
}

#[test]
fn report_roundtrip_and_aggregates() {
    let c = small_config();
    let report = end_to_end_experiment(&c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/report.csv");
    write_report(&report, &path).unwrap();
    assert!(sidecar_path(&path).exists());
    let back = read_report(&path).unwrap();
    assert_eq!(back.rows, report.rows);
    assert_eq!(back.config, report.config);
    let again = back.recompute_aggregates();
    assert_eq!(again.len(), report.aggregates.len());
    for (x, y) in again.iter().zip(&report.aggregates) {
        assert_eq!(x.key, y.key);
        assert_eq!(x.count, 3);
        for (name, s) in &y.metrics {
            assert!((x.metrics[name].mean - s.mean).abs() < 1e-12);
            assert!((x.metrics[name].sd - s.sd).abs() < 1e-12);
        }
    }
    assert!(write_report(&report, &dir.path().join("r.json")).is_err());
}

#[test]
fn read_report_names_missing_column() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "scene_id,mode\n0,static\n").unwrap();
    match read_report(&path) {
        Err(Error::MissingColumn { column, .. }) => assert_eq!(column, "ratio_requested"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn sweep_emits_one_aggregate_per_setting() {
    let mut c = small_config();
    c.oracle.n_eval_scenes = 1;
    c.pruning.modes = vec![PruneMode::Static];
    c.pruning.ratios = vec![0.5];
    let report = sweep(&c, "lambda", &[json!(0.0), json!(0.3)]).unwrap();
    let lambdas: Vec<f64> = report.aggregates.iter().map(|a| a.key.lambda).collect();
    assert_eq!(lambdas, vec![0.0, 0.3]);
    let report = sweep(&c, "K", &[json!(0), json!(3)]).unwrap();
    let ks: Vec<usize> = report.aggregates.iter().map(|a| a.key.k).collect();
    assert_eq!(ks, vec![0, 3]);
    assert!(sweep(&c, "K", &[]).is_err());
    assert!(matches!(
        sweep(&c, "no.such", &[json!(1)]),
        Err(Error::Override(_))
    ));
}

#[test]
fn overrides_and_validation() {
    let c = small_config();
    let o = c
        .with_overrides(&["dvtie.lambda=0.1", "oracle.n_visual=20", "output=out/x.csv"])
        .unwrap();
    assert_eq!(o.dvtie.lambda, 0.1);
    assert_eq!(o.dvtie.n_visual, 20);
    assert_eq!(o.output.to_str(), Some("out/x.csv"));
    assert!(matches!(
        c.with_overrides(&["oracle.nope=1"]),
        Err(Error::Override(_))
    ));
    assert!(matches!(
        c.with_overrides(&["seed=abc"]),
        Err(Error::Override(_))
    ));
    let bad = c.with_overrides(&["pruning.ratios=[1.5]"]).unwrap();
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let back = ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap();
    assert_eq!(back, c);
}
