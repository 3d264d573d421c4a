//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ganet::adapter::{self, AdapterConfig, AdapterParams};
use ganet::continual::{self, FisherState};
use ganet::fixtures::{self, FixtureSet, SynthConfig};
use ganet::graph::{self, GraphMode, NodeMatrix};
use ganet::rng::SplitMix64;
use ganet::trainer::{self, TaskData, TrainConfig};
use ganet::Tensor2;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    format!("error: {e}")
}

// --- gradient correctness -------------------------------------------------

fn gradient_correctness() -> Outcome {
    let cfg = AdapterConfig {
        gcn_layers: 2,
        gamma: 0.5,
        ..AdapterConfig::new(6, 3, 3)
    };
    let start = Instant::now();
    let report = trainer::gradient_check(&cfg, 3, 1.0, 1e-4).map_err(fail)?;
    let elapsed = start.elapsed();
    check(
        report.max_relative_error < 1e-5 && elapsed < Duration::from_secs(10),
        format!(
            "{} params, max relative error {:.3e} (< 1e-5), {:.2?} (< 10 s)",
            report.params, report.max_relative_error, elapsed
        ),
    )
}

// --- graph oracle ---------------------------------------------------------

fn random_nodes(rng: &mut SplitMix64) -> Tensor2 {
    let m = 1 + rng.below(64);
    let d = 1 + rng.below(32);
    let mut x = Tensor2::zeros(m, d);
    for i in 0..m {
        match rng.below(10) {
            // zero rows and repeated rows exercise the degenerate and tie cases
            0 => {}
            1 if i > 0 => {
                let src = x.row(rng.below(i)).to_vec();
                x.row_mut(i).copy_from_slice(&src);
            }
            _ => x.row_mut(i).iter_mut().for_each(|v| *v = rng.gaussian()),
        }
    }
    x
}

fn oracle_edges(x: &Tensor2, gamma: f64) -> Vec<(usize, usize)> {
    let m = x.rows();
    let norm = |i: usize| {
        let mut s = 0.0;
        for v in x.row(i) {
            s += v * v;
        }
        s.sqrt()
    };
    let mut edges = Vec::new();
    for i in 0..m {
        for j in 0..m {
            if i == j || norm(i) == 0.0 || norm(j) == 0.0 {
                continue;
            }
            let mut dot = 0.0;
            for (a, b) in x.row(i).iter().zip(x.row(j)) {
                dot += a * b;
            }
            let cos = (dot / (norm(i) * norm(j))).clamp(-1.0, 1.0);
            if cos > gamma && i < j {
                edges.push((i, j));
            }
        }
    }
    edges
}

fn graph_oracle() -> Outcome {
    const GAMMAS: [f64; 5] = [-0.5, 0.0, 0.3, 0.7, 0.95];
    let mut rng = SplitMix64::new(2024);
    let mut mismatches = 0;
    let mut monotone_violations = 0;
    for _ in 0..100 {
        let x = random_nodes(&mut rng);
        let nodes = NodeMatrix::new(x.clone()).map_err(fail)?;
        let adjs: Vec<_> = GAMMAS.iter().map(|&g| graph::build_adjacency(&nodes, g)).collect();
        for (adj, &g) in adjs.iter().zip(&GAMMAS) {
            if adj.edges() != oracle_edges(&x, g) {
                mismatches += 1;
            }
        }
        for (i, lo) in adjs.iter().enumerate() {
            for hi in &adjs[i + 1..] {
                if !hi.edges().iter().all(|&(a, b)| lo.contains(a, b)) {
                    monotone_violations += 1;
                }
            }
        }
    }
    check(
        mismatches == 0 && monotone_violations == 0,
        format!("500 graphs, {mismatches} oracle mismatches, {monotone_violations} monotonicity violations"),
    )
}

// --- normalization --------------------------------------------------------

fn normalization() -> Outcome {
    let mut rng = SplitMix64::new(77);
    let mut worst_entry = 0.0f64;
    let mut asymmetric = 0;
    let mut worst_rho = 0.0f64;
    for _ in 0..50 {
        let m = 1 + rng.below(64);
        let p = rng.next_f64();
        let mut edges = Vec::new();
        for i in 0..m {
            for j in i + 1..m {
                if rng.next_f64() < p {
                    edges.push((i, j));
                }
            }
        }
        let adj = graph::SparseAdjacency::from_edges(m, &edges).map_err(fail)?;
        let h = graph::normalize(&adj);
        let mut dense_a = vec![vec![0.0; m]; m];
        for (i, row) in dense_a.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for &(i, j) in &edges {
            dense_a[i][j] = 1.0;
            dense_a[j][i] = 1.0;
        }
        let deg: Vec<f64> = dense_a.iter().map(|r| r.iter().sum()).collect();
        for i in 0..m {
            for j in 0..m {
                let expected = dense_a[i][j] / (deg[i] * deg[j]).sqrt();
                worst_entry = worst_entry.max((h.get(i, j) - expected).abs());
                if h.get(i, j) != h.get(j, i) {
                    asymmetric += 1;
                }
            }
        }
        worst_rho = worst_rho.max(h.spectral_radius_estimate(500));
    }
    check(
        worst_entry <= 1e-12 && asymmetric == 0 && worst_rho <= 1.0 + 1e-9,
        format!(
            "50 graphs, max entry error {worst_entry:.2e} (<= 1e-12), {asymmetric} asymmetric entries, max spectral radius {worst_rho:.12} (<= 1 + 1e-9)"
        ),
    )
}

// --- EWC invariants -------------------------------------------------------

fn task(seed: u64, sigma: f64) -> Result<TaskData, String> {
    let set = fixtures::generate_synthetic(&SynthConfig {
        num_samples: 250,
        noise_sigma: sigma,
        seed,
        ..SynthConfig::default()
    })
    .map_err(fail)?;
    TaskData::split(&set, 0.8, seed).map_err(fail)
}

fn continual_config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        ..TrainConfig::new(AdapterConfig {
            seed,
            ..AdapterConfig::new(16, 16, 4)
        })
    }
}

fn ewc_invariants() -> Outcome {
    let mut rng = SplitMix64::new(5);
    let n = 200;
    let anchor: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
    let diag: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 2.0)).collect();
    let fisher = FisherState::new(diag, anchor.clone(), 0, 1).map_err(fail)?;
    let at_anchor = continual::ewc_penalty(&anchor, &fisher, 1e9).map_err(fail)?;
    let theta: Vec<f64> = anchor.iter().map(|a| a + rng.gaussian()).collect();
    let lambdas = [0.0, 1e-3, 0.5, 1.0, 100.0, 1e4, 1e9];
    let pens: Vec<f64> = lambdas
        .iter()
        .map(|&l| continual::ewc_penalty(&theta, &fisher, l))
        .collect::<ganet::Result<_>>()
        .map_err(fail)?;
    let monotone = pens.windows(2).all(|w| w[0] <= w[1]);

    let a = task(1000, 2.0)?;
    let b = task(1001, 2.0)?;
    let outcome = trainer::continual_protocol(&a, &b, 1e9, &continual_config(0, 20)).map_err(fail)?;
    let drift = outcome
        .model_a
        .params
        .flatten()
        .iter()
        .zip(outcome.model_b.params.flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    check(
        at_anchor == 0.0 && monotone && drift <= 1e-3,
        format!(
            "penalty at anchor {at_anchor}, monotone in lambda: {monotone}, lambda=1e9 max-norm drift {drift:.2e} (<= 1e-3)"
        ),
    )
}

// --- learnability ---------------------------------------------------------

fn learnability() -> Outcome {
    let set = fixtures::generate_synthetic(&SynthConfig {
        num_samples: 250,
        ..SynthConfig::default()
    })
    .map_err(fail)?;
    let data = TaskData::split(&set, 0.8, 0).map_err(fail)?;
    let cfg = TrainConfig {
        epochs: 50,
        ..TrainConfig::new(AdapterConfig::new(16, 16, 4))
    };
    let start = Instant::now();
    let (model, _) = trainer::train(&data.train, &cfg, None).map_err(fail)?;
    let elapsed = start.elapsed();
    let acc = trainer::evaluate(&model, &data.test).map_err(fail)?;
    check(
        data.train.len() == 200
            && data.test.len() == 50
            && acc >= 0.95
            && elapsed < Duration::from_secs(120),
        format!(
            "{}/{} split, test accuracy {acc:.3} (>= 0.95) after 50 epochs in {elapsed:.2?} (< 120 s)",
            data.train.len(),
            data.test.len()
        ),
    )
}

// --- forgetting reduction -------------------------------------------------

fn forgetting_reduction() -> Outcome {
    let mut wins = 0;
    let mut without = Vec::new();
    let mut with = Vec::new();
    for seed in 0..5u64 {
        let a = task(1000 + 2 * seed, 2.0)?;
        let b = task(1001 + 2 * seed, 2.0)?;
        let cfg = continual_config(seed, 20);
        let f0 = trainer::continual_protocol(&a, &b, 0.0, &cfg).map_err(fail)?.report.forgetting;
        let f100 = trainer::continual_protocol(&a, &b, 100.0, &cfg).map_err(fail)?.report.forgetting;
        if f100 < f0 {
            wins += 1;
        }
        without.push(f0);
        with.push(f100);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let reduction = 100.0 * (mean(&without) - mean(&with));
    check(
        wins >= 4 && reduction >= 10.0,
        format!(
            "lambda=100 forgets less in {wins}/5 seeds (>= 4), mean forgetting {:.1} -> {:.1} points, reduction {reduction:.1} (>= 10)",
            100.0 * mean(&without),
            100.0 * mean(&with)
        ),
    )
}

// --- ablations ------------------------------------------------------------

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_ganet")
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(bin()).args(args).output().map_err(fail)?;
    if !out.status.success() {
        return Err(format!(
            "`ganet {}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn gamma_one_matches_mlp(set: &FixtureSet, mode: GraphMode) -> Result<bool, String> {
    let base = AdapterConfig {
        in_dim: AdapterConfig::node_width(mode, set.embed_dim()),
        graph_mode: mode,
        gamma: 1.0,
        ..AdapterConfig::new(set.embed_dim(), 8, set.num_classes())
    };
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::new(base.clone())
    };
    let (with_graph, _) = trainer::train(set, &cfg, None).map_err(fail)?;
    let off = TrainConfig {
        adapter: AdapterConfig {
            use_graph: false,
            ..base.clone()
        },
        ..cfg.clone()
    };
    let (no_graph, _) = trainer::train(set, &off, None).map_err(fail)?;
    let same_params = with_graph.params.flatten() == no_graph.params.flatten();
    let refs: Vec<_> = set.samples().iter().collect();
    let mut same_logits = true;
    let unit = if mode == GraphMode::Token { 1 } else { 16 };
    for chunk in refs.chunks(unit) {
        let fwd = adapter::forward(&with_graph.params, &base, chunk).map_err(fail)?;
        let mlp = adapter::forward_without_graph(&with_graph.params, &base, chunk).map_err(fail)?;
        same_logits &= fwd.logits == mlp;
    }
    Ok(same_params && same_logits)
}

fn ablations() -> Outcome {
    let set = fixtures::generate_synthetic(&SynthConfig {
        num_samples: 48,
        ..SynthConfig::default()
    })
    .map_err(fail)?;
    let token = gamma_one_matches_mlp(&set, GraphMode::Token)?;
    let sample = gamma_one_matches_mlp(&set, GraphMode::Sample)?;

    let dir = tempfile::tempdir().map_err(fail)?;
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    run_cli(&["gen-fixtures", "--out", &p("d.gafx"), "--samples", "40"])?;
    let trained = run_cli(&[
        "train", "--in", &p("d.gafx"), "--out", &p("m.gamd"), "--epochs", "3", "--image-only",
    ])?;
    let evaluated = run_cli(&["eval", "--model", &p("m.gamd"), "--in", &p("d.gafx"), "--image-only"])?;
    let image_only = trained.contains("final_train_acc=") && evaluated.contains("accuracy=");
    let zeroed = set
        .without_text()
        .samples()
        .iter()
        .all(|s| s.text_tokens.data().iter().all(|&v| v == 0.0));
    check(
        token && sample && image_only && zeroed,
        format!(
            "gamma=1 bit-exact to graph-free path: token {token}, sample {sample}; image-only CLI run end-to-end: {image_only}"
        ),
    )
}

// --- parameter accounting -------------------------------------------------

fn parameter_accounting() -> Outcome {
    let mut rng = SplitMix64::new(99);
    let mut mismatches = 0;
    for _ in 0..50 {
        let in_dim = 1 + rng.below(64);
        let residual = rng.below(2) == 0;
        let cfg = AdapterConfig {
            in_dim,
            mid_dim: 1 + rng.below(in_dim),
            out_dim: if residual { in_dim } else { 1 + rng.below(64) },
            gcn_layers: 1 + rng.below(4),
            num_classes: 1 + rng.below(40),
            use_bias: rng.below(2) == 0,
            residual,
            ..AdapterConfig::new(in_dim, 1, 2)
        };
        cfg.validate().map_err(fail)?;
        let enumerated: usize = AdapterParams::zeros(&cfg).blocks().map(<[f64]>::len).sum();
        if adapter::count_trainable(&cfg) != enumerated {
            mismatches += 1;
        }
    }
    let documented = AdapterConfig {
        gcn_layers: 1,
        ..AdapterConfig::new(512, 35, 37)
    };
    let count = adapter::count_trainable(&documented);
    check(
        mismatches == 0 && (50_000..=60_000).contains(&count),
        format!(
            "50 random configs, {mismatches} mismatches; E=512 n_mid=35 L=1 K=37 gives {count} (in [50000, 60000])"
        ),
    )
}

// --- reproducibility ------------------------------------------------------

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(fail)?;
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    run_cli(&["gen-fixtures", "--out", &p("d.gafx"), "--samples", "64", "--seed", "3"])?;
    let train = |out: &str| {
        run_cli(&[
            "train", "--in", &p("d.gafx"), "--out", out, "--epochs", "4", "--seed", "11",
        ])
    };
    train(&p("a.gamd"))?;
    train(&p("b.gamd"))?;
    let read = |path: &str| std::fs::read(Path::new(path)).map_err(fail);
    let (a, b) = (read(&p("a.gamd"))?, read(&p("b.gamd"))?);
    check(a == b, format!("two train runs wrote {} and {} bytes, identical: {}", a.len(), b.len(), a == b))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient correctness", gradient_correctness),
        ("graph oracle equivalence", graph_oracle),
        ("normalization", normalization),
        ("EWC invariants", ewc_invariants),
        ("learnability", learnability),
        ("forgetting reduction", forgetting_reduction),
        ("ablation reductions", ablations),
        ("parameter accounting", parameter_accounting),
        ("reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        match run() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
