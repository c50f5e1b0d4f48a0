//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails or exceeds its time limit.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use hedgelab::hedging::{anchor_band, clamp_position, evaluate_batch, rollout, CostSpec, PolicyConfig, PolicyMode};
use hedgelab::instruments::{payoff, OptionSpec};
use hedgelab::market_paths::{simulate_gbm, GbmConfig, DAY};
use hedgelab::neural_net::{Activation, HeadActivation, Mlp, MlpSpec, ParamVector};
use hedgelab::orderbook::{build_wap_series, parse_orderbook_file, wap, Level, OrderBookSnapshot};
use hedgelab::risk::{certainty_equivalent, entropic_loss, entropic_risk, expected_shortfall, mean_std};
use hedgelab::trainer::{GradientCache, LinGradVariant};
use hedgelab_cli::commands::compare_rows;
use hedgelab_cli::config::ExperimentConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const FIXTURE: &str = concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/../core/tests/fixtures/orderbook_small.csv"
);
const GOLDEN: &str = concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/../core/tests/fixtures/orderbook_small_wap.csv"
);

type Outcome = Result<String, String>;
/// Name, time limit in seconds, check.
type Criterion = (&'static str, u64, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient correctness", 10, gradient_correctness),
        ("linearized-objective exactness", 10, linearized_exactness),
        ("certainty-equivalent equivalence", 5, certainty_equivalent_matches),
        ("GBM martingale", 30, gbm_martingale),
        ("delta-hedging variance reduction", 30, delta_hedging_variance),
        ("band semantics", 5, band_semantics),
        ("qualitative training ordering", 15 * 60, training_ordering),
        ("risk-metric unit suite", 10, risk_metric_suite),
        ("determinism", 120, determinism),
        ("WAP golden tests", 2, wap_golden),
    ];
    let mut failed = 0;
    for (i, (name, limit, run)) in criteria.into_iter().enumerate() {
        let started = Instant::now();
        let outcome = run();
        let secs = started.elapsed().as_secs_f64();
        let in_time = started.elapsed() <= Duration::from_secs(limit);
        let (ok, detail) = match outcome {
            Ok(d) => (in_time, d),
            Err(d) => (false, d),
        };
        let timing = if in_time {
            format!("{secs:.1}s")
        } else {
            format!("{secs:.1}s exceeds {limit}s limit")
        };
        println!(
            "{} {:>2} {name}: {detail} ({timing})",
            if ok { "PASS" } else { "FAIL" },
            i + 1
        );
        failed += usize::from(!ok);
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}

fn mlp(layers: usize, width: usize, heads: usize, activation: Activation, head: HeadActivation, seed: u64) -> Mlp {
    Mlp::new(MlpSpec {
        input_dim: 3,
        hidden_widths: vec![width; layers],
        output_heads: heads,
        activation,
        head_activation: head,
        freeze_heads: false,
        seed,
    })
    .expect("valid spec")
}

/// Worst `|fd - g| / max(|fd|, |g|, 1e-3)` over parameters and heads.
fn worst_fd_error(net: &Mlp, params: &[f64], x: &[f64]) -> f64 {
    let h = 1e-5;
    let back = net.backward_per_sample(params, x).unwrap();
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for j in 0..p.len() {
        let orig = p[j];
        p[j] = orig + h;
        let up = net.forward(&p, x).unwrap();
        p[j] = orig - h;
        let down = net.forward(&p, x).unwrap();
        p[j] = orig;
        for k in 0..net.heads() {
            let fd = (up.get(k) - down.get(k)) / (2.0 * h);
            let g = back.grads[k][j];
            worst = worst.max((fd - g).abs() / fd.abs().max(g.abs()).max(1e-3));
        }
    }
    worst
}

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for case in 0..50u64 {
        let layers = 1 + (case % 4) as usize;
        let width = [4, 8, 16][(case % 3) as usize];
        let net = mlp(layers, width, 2, Activation::Softplus, HeadActivation::Softplus, case);
        let p = net.init();
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        worst = worst.max(worst_fd_error(&net, &p.values, &x));
    }
    let mut relu_cases = 0;
    let mut seed = 1000;
    while relu_cases < 20 {
        seed += 1;
        let net = mlp(
            1 + (seed % 3) as usize,
            8,
            2,
            Activation::Relu,
            HeadActivation::Abs,
            seed,
        );
        let p = net.init();
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        if net.min_kink_distance(&p.values, &x).unwrap() < 1e-3 {
            continue;
        }
        relu_cases += 1;
        worst = worst.max(worst_fd_error(&net, &p.values, &x));
    }
    check(
        worst < 1e-5,
        format!("worst relative error {worst:.2e} over 50 softplus and {relu_cases} kink-free relu pairs"),
    )
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    if diff == 0.0 {
        return 0.0;
    }
    diff / b.iter().map(|y| y * y).sum::<f64>().sqrt()
}

fn linearized_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut nontrivial = 0;
    for case in 0..20u64 {
        let mode = if case % 2 == 0 {
            PolicyMode::DhlnnBand
        } else {
            PolicyMode::DirectMlp
        };
        let net = if mode.is_band() {
            mlp(2, 6, 2, Activation::Softplus, HeadActivation::Softplus, case)
        } else {
            mlp(2, 6, 1, Activation::Softplus, HeadActivation::Identity, case)
        };
        let batch = simulate_gbm(&GbmConfig {
            n_paths: 2,
            steps: 10,
            maturity_years: 10.0 * DAY,
            sigma: 0.3,
            seed: case,
            ..GbmConfig::default()
        })
        .unwrap();
        let option = OptionSpec::european(1.0, batch.maturity()).unwrap();
        let policy = PolicyConfig::new(mode, option, 0.3);
        let anchor = net.init();
        let cache = GradientCache::build(
            &net,
            &anchor,
            &batch,
            &policy,
            CostSpec::new(0.05).unwrap(),
            true,
            u64::MAX,
        )
        .map_err(|e| e.to_string())?;
        let values: Vec<f64> = anchor
            .values
            .iter()
            .map(|v| v + 0.05 * rng.random_range(-1.0..1.0))
            .collect();
        let w: ParamVector = anchor.with_values(values).unwrap();
        let path = (case / 2 % 2) as usize;
        let g = cache.grad_v_hat(&w, path, LinGradVariant::FullQuadratic).unwrap();
        let mut x = w.clone();
        let fd: Vec<f64> = (0..w.len())
            .map(|j| {
                let orig = x.values[j];
                x.values[j] = orig + h;
                let up = cache.v_hat(&x, path).unwrap();
                x.values[j] = orig - h;
                let down = cache.v_hat(&x, path).unwrap();
                x.values[j] = orig;
                (up - down) / (2.0 * h)
            })
            .collect();
        worst = worst.max(rel_err(&g, &fd));
        nontrivial += usize::from(g.iter().any(|&v| v != 0.0));
    }
    check(
        worst < 1e-8 && nontrivial >= 10,
        format!("worst relative error {worst:.2e} over 20 (cache, w) pairs, {nontrivial} with nonzero gradient"),
    )
}

fn certainty_equivalent_matches() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut theta_err, mut obj_err, mut unit_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..100 {
        let n = rng.random_range(1..80);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lambda: f64 = rng.random_range(0.1..10.0);
        let rho = entropic_risk(&v, lambda).unwrap();
        let ce = certainty_equivalent(&v, lambda).unwrap();
        theta_err = theta_err.max((ce.theta - rho).abs());
        obj_err = obj_err.max((ce.objective - (rho - lambda.ln() / lambda)).abs());
        let unit = certainty_equivalent(&v, 1.0).unwrap();
        unit_err = unit_err.max((unit.objective - entropic_risk(&v, 1.0).unwrap()).abs());
    }
    check(
        theta_err < 1e-8 && obj_err < 1e-8 && unit_err < 1e-8,
        format!(
            "100 sets: |theta* - rho| <= {theta_err:.1e}, objective vs closed form <= {obj_err:.1e}, at lambda = 1 <= {unit_err:.1e}"
        ),
    )
}

fn gbm_martingale() -> Outcome {
    let cfg = GbmConfig {
        sigma: 0.2,
        n_paths: 100_000,
        seed: 404,
        ..GbmConfig::default()
    };
    let batch = simulate_gbm(&cfg).unwrap();
    let terminal: Vec<f64> = batch.paths().map(|p| p[p.len() - 1]).collect();
    let (mean, std) = mean_std(&terminal).unwrap();
    let se = std / (terminal.len() as f64).sqrt();
    let z = (mean - cfg.p0) / se;
    let returns: Vec<f64> = batch
        .paths()
        .flat_map(|p| p.windows(2).map(|w| (w[1] / w[0]).ln()))
        .collect();
    let var = mean_std(&returns).unwrap().1.powi(2);
    let target = cfg.sigma * cfg.sigma * cfg.dt();
    let rel = (var - target).abs() / target;
    check(
        z.abs() < 4.0 && rel < 0.05,
        format!(
            "mean P_T {mean:.5} is {z:.2} SE from P_0, log-return variance off by {:.2}%",
            100.0 * rel
        ),
    )
}

fn delta_hedging_variance() -> Outcome {
    let batch = simulate_gbm(&GbmConfig {
        sigma: 0.2,
        n_paths: 10_000,
        seed: 2024,
        ..GbmConfig::default()
    })
    .unwrap();
    let option = OptionSpec::european(1.0, batch.maturity()).unwrap();
    let policy = PolicyConfig::new(PolicyMode::BsDelta, option, 0.2);
    let hedged: Vec<f64> = evaluate_batch(None, &[], &batch, &policy, CostSpec::default(), true)
        .unwrap()
        .iter()
        .map(|s| s.v)
        .collect();
    let unhedged: Vec<f64> = batch.paths().map(|p| -payoff(&option, p).unwrap()).collect();
    let ratio = mean_std(&hedged).unwrap().1 / mean_std(&unhedged).unwrap().1;
    check(ratio < 0.15, format!("std(PNL) / std(-Z) = {ratio:.4}, threshold 0.15"))
}

fn band_semantics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut violations = 0;
    for _ in 0..100_000 {
        let prev = rng.random_range(-3.0..3.0);
        let anchor = rng.random_range(-1.0..2.0);
        let band = anchor_band(anchor, rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)).unwrap();
        let next = clamp_position(prev, band);
        let contained = band.lower <= next && next <= band.upper;
        let idempotent = clamp_position(next, band) == next;
        let no_trade = !(band.lower <= prev && prev <= band.upper) || next == prev;
        let zero_width = clamp_position(prev, anchor_band(anchor, 0.0, 0.0).unwrap()) == anchor;
        violations += usize::from(!(contained && idempotent && no_trade && zero_width));
    }

    // a band net with all-zero parameters outputs zero widths under `abs`
    let batch = simulate_gbm(&GbmConfig {
        sigma: 0.2,
        n_paths: 200,
        seed: 66,
        ..GbmConfig::default()
    })
    .unwrap();
    let option = OptionSpec::european(1.0, batch.maturity()).unwrap();
    let net = mlp(2, 8, 2, Activation::Relu, HeadActivation::Abs, 6);
    let zeros = net.params_from(vec![0.0; net.param_len()]).unwrap();
    let band_policy = PolicyConfig::new(PolicyMode::DhlnnBand, option, 0.2);
    let delta_policy = PolicyConfig::new(PolicyMode::BsDelta, option, 0.2);
    let mut rollout_mismatch = 0;
    for i in 0..batch.n_paths() {
        let a = rollout(Some(&net), &zeros.values, &batch, i, &band_policy).unwrap();
        let b = rollout(None, &[], &batch, i, &delta_policy).unwrap();
        rollout_mismatch += usize::from(a.deltas != b.deltas);
    }
    check(
        violations == 0 && rollout_mismatch == 0,
        format!(
            "{violations} violations in 100000 clamp cases, {rollout_mismatch} of 200 zero-width rollouts differ from delta hedging"
        ),
    )
}

fn median(mut x: Vec<f64>) -> f64 {
    x.sort_by(f64::total_cmp);
    let n = x.len();
    if n % 2 == 1 {
        x[n / 2]
    } else {
        0.5 * (x[n / 2 - 1] + x[n / 2])
    }
}

fn training_ordering() -> Outcome {
    let mut el = [Vec::new(), Vec::new(), Vec::new()];
    let mut es_wins = 0;
    let modes = ["dhlnn", "direct_plain", "bs_delta"];
    for seed in 1..=5 {
        let cfg = ExperimentConfig {
            strike: 1.2,
            train_sigma: 0.1,
            test_sigmas: vec![0.1],
            cost: 2e-3,
            paths: 1000,
            test_paths: 1000,
            hidden: vec![32, 32],
            epochs: 40,
            modes: modes.map(String::from).to_vec(),
            seed,
            ..ExperimentConfig::default()
        };
        let rows = compare_rows(&cfg).map_err(|e| format!("seed {seed}: {e:#}"))?.rows;
        let get = |m: &str| rows.iter().find(|r| r.mode.as_str() == m).copied().unwrap();
        let (d, p, b) = (get("dhlnn"), get("direct_plain"), get("bs_delta"));
        for (slot, r) in el.iter_mut().zip([d, p, b]) {
            slot.push(r.entropic_loss);
        }
        es_wins +=
            usize::from(d.expected_shortfall <= p.expected_shortfall && d.expected_shortfall <= b.expected_shortfall);
    }
    let [d, p, b] = el.map(median);
    check(
        d <= p && d <= b && es_wins >= 4,
        format!("median Entropic Loss dhlnn {d:.3e}, direct_plain {p:.3e}, bs_delta {b:.3e}; ES ordering holds in {es_wins}/5 seeds"),
    )
}

fn risk_metric_suite() -> Outcome {
    let mut failures = Vec::new();
    let mut expect = |ok: bool, what: &str| {
        if !ok {
            failures.push(what.to_string());
        }
    };
    let ten: Vec<f64> = (1..=10).map(|i| -(i as f64)).collect();
    expect(expected_shortfall(&ten, 0.9).unwrap() == (10.0, 10.0), "ES of -1..-10");
    expect(expected_shortfall(&[0.0; 7], 0.9).unwrap() == (0.0, 0.0), "ES of zeros");
    expect(
        expected_shortfall(&[5.0, 5.0, 5.0, -5.0], 0.5).unwrap() == (-5.0, 0.0),
        "ES at alpha 0.5",
    );
    expect(entropic_risk(&[0.0], 1.0).unwrap() == 0.0, "entropic risk of 0");
    expect(
        (entropic_risk(&[0.0, -1.0], 1.0).unwrap() - ((1.0 + 1f64.exp()) / 2.0).ln()).abs() < 1e-15,
        "entropic risk of {0, -1}",
    );
    expect(
        (entropic_loss(&[0.7; 4], 1.0).unwrap() + 0.7).abs() < 1e-15,
        "entropic loss of a constant",
    );
    expect(
        (entropic_loss(&[1.0, -1.0], 1.0).unwrap() - 1f64.cosh().ln()).abs() < 1e-15,
        "entropic loss of {1, -1}",
    );

    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let (mut cash, mut mono) = (0.0f64, 0usize);
    for _ in 0..1000 {
        let n = rng.random_range(1..60);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let m = rng.random_range(-5.0..5.0);
        let lambda = rng.random_range(0.1..10.0);
        let shifted: Vec<f64> = v.iter().map(|x| x + m).collect();
        let base = entropic_risk(&v, lambda).unwrap();
        cash = cash.max((entropic_risk(&shifted, lambda).unwrap() - (base - m)).abs());
        let better: Vec<f64> = v.iter().map(|x| x + rng.random_range(0.0..1.0)).collect();
        mono += usize::from(entropic_risk(&better, lambda).unwrap() > base + 1e-10);
    }
    expect(cash < 1e-10, "cash invariance");
    expect(mono == 0, "monotonicity");
    check(
        failures.is_empty(),
        if failures.is_empty() {
            format!("7 hand oracles exact, cash invariance within {cash:.1e} and monotonicity over 1000 sets")
        } else {
            format!("failed: {}", failures.join(", "))
        },
    )
}

fn hedge_lab(threads: usize, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_hedge-lab"))
        .args(args)
        .env("HEDGE_LAB_THREADS", threads.to_string())
        .env_remove("RUST_BACKTRACE")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "hedge-lab {}: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

/// File contents with wall-clock fields and the output path removed.
fn comparable(path: &Path) -> Vec<u8> {
    let name = path.file_name().unwrap().to_string_lossy();
    let bytes = fs::read(path).unwrap();
    if name == "manifest.json" {
        let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        let obj = v.as_object_mut().unwrap();
        obj.remove("timings");
        obj["config"].as_object_mut().unwrap().remove("out");
        return v.to_string().into_bytes();
    }
    if name == "training_curve.csv" || path.parent().is_some_and(|p| p.ends_with("curves")) {
        let text = String::from_utf8(bytes).unwrap();
        return text
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0)
            .collect::<Vec<_>>()
            .join("\n")
            .into_bytes();
    }
    bytes
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(files_under(&path));
        } else {
            out.push(path);
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let tmp = TempDir::new().map_err(|e| e.to_string())?;
    let config = tmp.path().join("desk.toml");
    fs::write(
        &config,
        "strike = 1.0\npaths = 200\ntest_paths = 200\nbatch_paths = 50\nhidden = [8, 8]\nepochs = 2\neval_epochs = [1, 2]\ntest_sigmas = [0.1, 0.3]\n",
    )
    .unwrap();
    let ingest_config = tmp.path().join("ingest.toml");
    fs::write(&ingest_config, "steps = 4\n").unwrap();
    let cfg = config.to_str().unwrap();
    let ck = tmp.path().join("reference").join("checkpoint.json");
    hedge_lab(
        2,
        &[
            "train",
            "--config",
            cfg,
            "--out",
            ck.parent().unwrap().to_str().unwrap(),
        ],
    )?;
    let ck = ck.to_str().unwrap();

    let ingest_cfg = ingest_config.to_str().unwrap();
    let commands: [(&str, Vec<&str>, &str); 6] = [
        ("simulate", vec!["simulate"], cfg),
        ("train", vec!["train"], cfg),
        ("evaluate", vec!["evaluate", "--checkpoint", ck], cfg),
        ("evaluate_bs", vec!["evaluate", "--mode", "bs_delta"], cfg),
        ("compare", vec!["compare"], cfg),
        ("ingest", vec!["ingest", "--input", FIXTURE], ingest_cfg),
    ];
    let mut compared = 0;
    for (name, args, config_path) in &commands {
        let mut outputs = Vec::new();
        for (run, threads) in [1, 4, 4].into_iter().enumerate() {
            let out = tmp.path().join(format!("{name}_{run}"));
            let mut full = args.clone();
            let out_str = out.to_str().unwrap().to_string();
            full.extend(["--config", config_path, "--out", &out_str]);
            hedge_lab(threads, &full).map_err(|e| e.replace("\n", " "))?;
            outputs.push(out);
        }
        let reference = files_under(&outputs[0]);
        for other in &outputs[1..] {
            let files = files_under(other);
            if files.len() != reference.len() {
                return Err(format!("{name}: {} vs {} files", reference.len(), files.len()));
            }
            for (a, b) in reference.iter().zip(&files) {
                if comparable(a) != comparable(b) {
                    return Err(format!("{name}: {} differs across runs", a.display()));
                }
                compared += 1;
            }
        }
    }
    check(
        compared > 0,
        format!("6 command runs at 1 and 4 threads, {compared} file comparisons identical"),
    )
}

fn wap_golden() -> Outcome {
    let snaps = parse_orderbook_file(FIXTURE).map_err(|e| e.to_string())?;
    let series = build_wap_series(&snaps, "fixture").unwrap();
    let mut out = Vec::new();
    series.write_csv(&mut out).unwrap();
    let golden = fs::read(GOLDEN).unwrap();
    let single = wap(&OrderBookSnapshot::new(
        0,
        vec![Level::new(99.0, 10.0)],
        vec![Level::new(101.0, 10.0)],
    ))
    .unwrap();
    let multi = wap(&OrderBookSnapshot::new(
        0,
        vec![Level::new(99.0, 10.0), Level::new(98.0, 30.0)],
        vec![Level::new(101.0, 20.0), Level::new(102.0, 20.0)],
    ))
    .unwrap();
    check(
        out == golden && single == 100.0 && multi == 99.875,
        format!(
            "fixture CSV {} golden, single-level {single}, multi-level {multi}",
            if out == golden { "matches" } else { "differs from" }
        ),
    )
}
