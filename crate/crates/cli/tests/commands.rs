use std::fs;
use std::path::{Path, PathBuf};

use hedgelab::risk::MetricsReport;
use hedgelab::HedgeError;
use hedgelab_cli::commands::{self, metrics_name, pnl_samples_name};
use hedgelab_cli::config::ExperimentConfig;
use hedgelab_cli::manifest::RunManifest;
use tempfile::TempDir;

const FIXTURE: &str = concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/../core/tests/fixtures/orderbook_small.csv"
);
const GOLDEN: &str = concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/../core/tests/fixtures/orderbook_small_wap.csv"
);

fn small(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        out: out.to_path_buf(),
        strike: 1.0,
        paths: 60,
        test_paths: 40,
        batch_paths: 20,
        hidden: vec![6, 6],
        epochs: 2,
        test_sigmas: vec![0.1, 0.2],
        ..ExperimentConfig::default()
    }
}

fn read_pnl(path: &Path) -> Vec<f64> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("path_id,pnl"));
    lines
        .enumerate()
        .map(|(i, l)| {
            let (id, v) = l.split_once(',').unwrap();
            assert_eq!(id.parse::<usize>().unwrap(), i);
            v.parse().unwrap()
        })
        .collect()
}

/// Curve CSV without the wall-clock column.
fn curve_without_seconds(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

fn sub(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

#[test]
fn simulate_constant_and_reproducible() {
    let dir = TempDir::new().unwrap();
    let flat = ExperimentConfig {
        train_sigma: 0.0,
        paths: 3,
        ..small(&sub(&dir, "flat"))
    };
    commands::simulate(&flat).unwrap();
    let text = fs::read_to_string(sub(&dir, "flat").join("paths.csv")).unwrap();
    assert!(text.lines().skip(1).all(|l| l.ends_with(",1")), "{text}");

    let a = small(&sub(&dir, "a"));
    let b = small(&sub(&dir, "b"));
    commands::simulate(&a).unwrap();
    commands::simulate(&b).unwrap();
    assert_eq!(
        fs::read(sub(&dir, "a").join("paths.csv")).unwrap(),
        fs::read(sub(&dir, "b").join("paths.csv")).unwrap()
    );
}

#[test]
fn simulate_summary_is_a_martingale_check() {
    let dir = TempDir::new().unwrap();
    let cfg = ExperimentConfig {
        paths: 100_000,
        train_sigma: 0.2,
        ..small(dir.path())
    };
    let m = commands::simulate(&cfg).unwrap();
    let mean = m.summary["mean_terminal_price"].as_f64().unwrap();
    let se = m.summary["terminal_standard_error"].as_f64().unwrap();
    assert!((mean - 1.0).abs() < 4.0 * se, "{mean} +- {se}");
    assert_eq!(RunManifest::load(dir.path()).unwrap(), m);
}

#[test]
fn train_guards_and_smoke_run() {
    let dir = TempDir::new().unwrap();
    let bs = ExperimentConfig {
        mode: "bs_delta".into(),
        ..small(&sub(&dir, "bs"))
    };
    let err = commands::train(&bs, None).unwrap_err().to_string();
    assert!(err.contains("bs_delta requires no training"), "{err}");

    for mode in ["dhlnn", "ntb_plain", "direct_plain"] {
        let out = sub(&dir, mode);
        let cfg = ExperimentConfig {
            mode: mode.into(),
            epochs: 1,
            ..small(&out)
        };
        let m = commands::train(&cfg, None).unwrap();
        assert!(out.join("checkpoint.json").is_file());
        assert_eq!(curve_without_seconds(&out.join("training_curve.csv")).len(), 1);
        let names: Vec<&str> = m.artifacts.iter().map(|a| a.path.as_str()).collect();
        assert_eq!(names, ["checkpoint.json", "training_curve.csv"]);
        assert!(m.artifacts[1].sha256.is_none());
    }
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = TempDir::new().unwrap();
    let full = ExperimentConfig {
        epochs: 4,
        ..small(&sub(&dir, "full"))
    };
    commands::train(&full, None).unwrap();

    let first = ExperimentConfig {
        epochs: 2,
        ..small(&sub(&dir, "first"))
    };
    commands::train(&first, None).unwrap();
    let second = ExperimentConfig {
        epochs: 4,
        ..small(&sub(&dir, "second"))
    };
    commands::train(&second, Some(&sub(&dir, "first").join("checkpoint.json"))).unwrap();

    let full_curve = curve_without_seconds(&sub(&dir, "full").join("training_curve.csv"));
    let tail = curve_without_seconds(&sub(&dir, "second").join("training_curve.csv"));
    assert_eq!(tail, full_curve[2..]);
    assert_eq!(
        fs::read(sub(&dir, "full").join("checkpoint.json")).unwrap(),
        fs::read(sub(&dir, "second").join("checkpoint.json")).unwrap()
    );
}

#[test]
fn evaluate_zero_cost_delta_on_flat_paths() {
    let dir = TempDir::new().unwrap();
    let cfg = ExperimentConfig {
        mode: "bs_delta".into(),
        cost: 0.0,
        strike: 1.2,
        test_sigmas: vec![0.0],
        ..small(dir.path())
    };
    commands::evaluate(&cfg, None).unwrap();
    let pnl = read_pnl(&dir.path().join(pnl_samples_name(0.0)));
    assert_eq!(pnl.len(), 40);
    assert!(pnl.iter().all(|&v| v == 0.0));
}

#[test]
fn evaluate_metrics_match_samples_for_every_sigma() {
    let dir = TempDir::new().unwrap();
    let train_cfg = small(&sub(&dir, "train"));
    commands::train(&train_cfg, None).unwrap();
    let ck = sub(&dir, "train").join("checkpoint.json");

    let eval_out = sub(&dir, "eval");
    let cfg = small(&eval_out);
    let m = commands::evaluate(&cfg, Some(&ck)).unwrap();
    assert_eq!(m.artifacts.len(), 2 * cfg.test_sigmas.len());
    for &sigma in &cfg.test_sigmas {
        let pnl = read_pnl(&eval_out.join(pnl_samples_name(sigma)));
        let stored: MetricsReport =
            serde_json::from_str(&fs::read_to_string(eval_out.join(metrics_name(sigma))).unwrap()).unwrap();
        let again = MetricsReport::compute(&pnl, &cfg.risk()).unwrap();
        for (a, b) in [
            (stored.mean, again.mean),
            (stored.std, again.std),
            (stored.entropic_risk, again.entropic_risk),
            (stored.entropic_loss, again.entropic_loss),
            (stored.var_alpha, again.var_alpha),
            (stored.expected_shortfall, again.expected_shortfall),
        ] {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
        assert_eq!(stored.n, pnl.len());
    }
}

#[test]
fn evaluate_rejects_mismatched_network() {
    let dir = TempDir::new().unwrap();
    commands::train(&small(&sub(&dir, "train")), None).unwrap();
    let ck = sub(&dir, "train").join("checkpoint.json");
    let wider = ExperimentConfig {
        hidden: vec![8, 8],
        ..small(&sub(&dir, "eval"))
    };
    let err = commands::evaluate(&wider, Some(&ck)).unwrap_err();
    assert!(
        matches!(err.downcast_ref::<HedgeError>(), Some(HedgeError::Version(_))),
        "{err}"
    );
    let other_mode = ExperimentConfig {
        mode: "ntb_plain".into(),
        ..small(&sub(&dir, "eval2"))
    };
    let err = commands::evaluate(&other_mode, Some(&ck)).unwrap_err();
    assert!(
        matches!(err.downcast_ref::<HedgeError>(), Some(HedgeError::Version(_))),
        "{err}"
    );
}

#[test]
fn compare_table_structure() {
    let dir = TempDir::new().unwrap();
    let cfg = ExperimentConfig {
        eval_epochs: Some(vec![1, 2]),
        costs: Some(vec![0.002, 0.004]),
        ..small(dir.path())
    };
    commands::compare(&cfg).unwrap();
    let text = fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let cells = 2 * 2 * 2;
    assert_eq!(rows.len(), 4 * cells);
    for cell in rows.chunks(4) {
        let modes: Vec<&str> = cell.iter().map(|r| r[0]).collect();
        assert_eq!(modes, ["dhlnn", "ntb_plain", "direct_plain", "bs_delta"]);
        assert!(cell.iter().all(|r| r[1..4] == cell[0][1..4]));
    }
    let bs: Vec<&Vec<&str>> = rows.iter().filter(|r| r[0] == "bs_delta").collect();
    for pair in bs.chunks(2) {
        assert_eq!(pair[0][1..3], pair[1][1..3]);
        assert_eq!((pair[0][3], pair[1][3]), ("1", "2"));
        assert_eq!(pair[0][4..], pair[1][4..]);
    }
    assert_eq!(fs::read_dir(dir.path().join("curves")).unwrap().count(), 6);
}

#[test]
fn ingest_fixture_and_errors() {
    let dir = TempDir::new().unwrap();
    let cfg = ExperimentConfig {
        steps: 4,
        ..small(&sub(&dir, "ok"))
    };
    let m = commands::ingest(&cfg, Path::new(FIXTURE)).unwrap();
    assert_eq!(
        fs::read_to_string(sub(&dir, "ok").join("wap.csv")).unwrap(),
        fs::read_to_string(GOLDEN).unwrap()
    );
    assert_eq!(m.summary["windows"], 2);
    let paths = fs::read_to_string(sub(&dir, "ok").join("paths.csv")).unwrap();
    let starts: Vec<&str> = paths.lines().filter(|l| l.contains(",0,0,")).collect();
    assert_eq!(starts.len(), 2);
    assert!(starts.iter().all(|l| l.ends_with(",1")));

    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    let err = commands::ingest(&small(&sub(&dir, "e")), &empty).unwrap_err();
    assert!(
        matches!(
            err.downcast_ref::<HedgeError>(),
            Some(HedgeError::Parse { line: 1, .. })
        ),
        "{err:#}"
    );

    let err = commands::ingest(&small(&sub(&dir, "long")), Path::new(FIXTURE)).unwrap_err();
    assert!(matches!(
        err.downcast_ref::<HedgeError>(),
        Some(HedgeError::InsufficientData { needed: 31, got: 10 })
    ));
}

#[test]
fn manifest_hash_follows_inputs() {
    let dir = TempDir::new().unwrap();
    let hash = |cfg: &ExperimentConfig, input: &Path| commands::ingest(cfg, input).unwrap().input_hash;
    let cfg = |name: &str| ExperimentConfig {
        steps: 4,
        ..small(&sub(&dir, name))
    };
    let base = hash(&cfg("a"), Path::new(FIXTURE));
    assert_eq!(base, hash(&cfg("b"), Path::new(FIXTURE)));

    let copy = dir.path().join("copy.csv");
    fs::copy(FIXTURE, &copy).unwrap();
    assert_eq!(base, hash(&cfg("c"), &copy));

    let edited = dir.path().join("edited.csv");
    fs::write(
        &edited,
        fs::read_to_string(FIXTURE).unwrap().replacen("100.", "100.5", 1),
    )
    .unwrap();
    assert_ne!(base, hash(&cfg("d"), &edited));
    let reseeded = ExperimentConfig { seed: 9, ..cfg("e") };
    assert_ne!(base, hash(&reseeded, Path::new(FIXTURE)));
}

/// Desk-scale ordering at strike 1.2: the linearized trainer ends at or
/// below the plain-trained band policy, and both at or below delta hedging.
#[test]
fn desk_run_orders_trainers_against_delta_hedging() {
    let dir = TempDir::new().unwrap();
    let cfg = ExperimentConfig {
        strike: 1.2,
        test_sigmas: vec![0.1],
        epochs: 40,
        modes: ["dhlnn", "ntb_plain", "bs_delta"].map(String::from).to_vec(),
        seed: 1,
        ..ExperimentConfig::default()
    };
    cfg.validate().unwrap();
    let rows = commands::compare_rows(&ExperimentConfig {
        out: dir.path().to_path_buf(),
        ..cfg
    })
    .unwrap()
    .rows;
    let el = |m: &str| rows.iter().find(|r| r.mode.as_str() == m).unwrap().entropic_loss;
    let (d, p, b) = (el("dhlnn"), el("ntb_plain"), el("bs_delta"));
    assert!(d <= p && p <= b, "dhlnn {d}, ntb_plain {p}, bs_delta {b}");
}
