use ganet::adapter::{self, AdapterConfig, AdapterParams};
use ganet::continual::{self, EwcConfig};
use ganet::fixtures::{self, FixtureSet, Sample, SynthConfig};
use ganet::graph::GraphMode;
use ganet::trainer::{self, TaskData, TrainConfig, TrainInputs};

fn fixture(samples: usize, seed: u64) -> FixtureSet {
    fixtures::generate_synthetic(&SynthConfig {
        num_samples: samples,
        tokens: 4,
        dim: 8,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        lr0: 1e-2,
        ..TrainConfig::new(AdapterConfig::new(8, 6, 4))
    }
}

#[test]
fn training_is_bit_reproducible_across_thread_counts() {
    let set = fixture(40, 1);
    let (a, ha) = trainer::train(&set, &config(3), None).unwrap();
    let (b, hb) = trainer::train(&set, &config(3), None).unwrap();
    let (c, hc) = trainer::train(&set, &TrainConfig { threads: 4, ..config(3) }, None).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    assert_eq!(a.to_bytes().unwrap(), c.to_bytes().unwrap());
    assert_eq!(ha, hb);
    assert_eq!(ha, hc);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let set = fixture(20, 2);
    let cfg = TrainConfig { lr0: 0.0, ..config(2) };
    let (model, history) = trainer::train(&set, &cfg, None).unwrap();
    assert_eq!(model.params, adapter::init_params(&cfg.adapter).unwrap());
    assert!(history.rows.iter().all(|r| r.lr == 0.0));
}

#[test]
fn single_batch_epoch_logs_the_objective_at_the_start_point() {
    let set = fixture(24, 3);
    let init = adapter::init_params(&config(1).adapter).unwrap();
    let anchor: Vec<f64> = init.flatten().iter().map(|v| v + 0.05).collect();
    let fisher = continual::FisherState::new(vec![0.3; anchor.len()], anchor, 0, 1).unwrap();
    for strict in [false, true] {
        let cfg = TrainConfig {
            batch_size: set.len(),
            ewc: Some(EwcConfig { lambda: 7.0, strict_eq11: strict, ..EwcConfig::default() }),
            ..config(1)
        };
        let (_, history) = trainer::train_with(
            &set,
            &cfg,
            TrainInputs { init: Some(init.clone()), fisher: Some(&fisher), eval: None },
        )
        .unwrap();
        let refs: Vec<&Sample> = set.samples().iter().collect();
        let (objective, ce) = trainer::objective(&init, &cfg, &refs, Some(&fisher)).unwrap();
        let penalty = continual::ewc_penalty(&init.flatten(), &fisher, 7.0).unwrap();
        let weight = if strict { 2.0 } else { 1.0 };
        assert!((objective - (weight * ce + penalty)).abs() <= 1e-12);
        assert!((history.rows[0].train_loss - objective).abs() <= 1e-10);
    }
}

#[test]
fn shuffled_labels_stay_near_chance() {
    let set = fixture(200, 4);
    let data = TaskData::split(&set, 0.75, 0).unwrap();
    let mut rng = ganet::rng::SplitMix64::new(99);
    let mut labels: Vec<usize> = data.train.labels().collect();
    rng.shuffle(&mut labels);
    let permuted: Vec<Sample> = data
        .train
        .samples()
        .iter()
        .zip(labels)
        .map(|(s, label)| Sample { label, ..s.clone() })
        .collect();
    let train = FixtureSet::new(permuted, 4, 8, 4).unwrap();
    let (model, _) = trainer::train(&train, &config(10), None).unwrap();
    let acc = trainer::evaluate(&model, &data.test).unwrap();
    assert!(acc <= 0.45, "accuracy {acc} on shuffled labels");
}

#[test]
fn all_zero_head_predicts_first_class() {
    let set = fixture(12, 5);
    let cfg = config(1).adapter;
    let mut params = adapter::init_params(&cfg).unwrap();
    let flat = params.flatten();
    let head_len = params.head.weight.data().len() + cfg.num_classes;
    let mut zeroed = flat.clone();
    let n = zeroed.len();
    zeroed[n - head_len..].iter_mut().for_each(|v| *v = 0.0);
    params = AdapterParams::from_flat(&cfg, &zeroed).unwrap();
    let predictions = trainer::predict(&params, &cfg, &set, 16).unwrap();
    assert!(predictions.iter().all(|&p| p == 0));
}

#[test]
fn gamma_sweep_writes_one_row_per_threshold() {
    let set = fixture(40, 6);
    let data = TaskData::split(&set, 0.75, 0).unwrap();
    let gammas: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let rows = trainer::sweep_gamma(&data, &gammas, &config(2)).unwrap();
    let csv = trainer::sweep_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "gamma,edges,mean_degree,isolated,test_accuracy");
    assert_eq!(lines.len(), 10);
    assert!(lines[1].starts_with("0.1,"));
    assert!(rows.windows(2).all(|w| w[1].edges <= w[0].edges));
    assert!(trainer::sweep_gamma(&data, &[1.5], &config(1)).is_err());
}

#[test]
fn gamma_one_sweep_row_matches_graph_free_training() {
    let set = fixture(40, 7);
    let data = TaskData::split(&set, 0.75, 0).unwrap();
    let row = &trainer::sweep_gamma(&data, &[1.0], &config(3)).unwrap()[0];
    assert_eq!(row.edges, 0);
    let off = TrainConfig {
        adapter: AdapterConfig { gamma: 1.0, use_graph: false, ..config(3).adapter },
        ..config(3)
    };
    let (model, _) = trainer::train(&data.train, &off, None).unwrap();
    assert_eq!(row.test_accuracy, trainer::evaluate(&model, &data.test).unwrap());
}

#[test]
fn sample_mode_trains_and_evaluates() {
    let set = fixture(48, 8);
    let cfg = TrainConfig {
        adapter: AdapterConfig {
            in_dim: 16,
            graph_mode: GraphMode::Sample,
            ..AdapterConfig::new(16, 8, 4)
        },
        ..config(15)
    };
    let (model, history) = trainer::train(&set, &cfg, None).unwrap();
    assert!(history.rows.last().unwrap().train_loss < history.rows[0].train_loss);
    assert!(trainer::evaluate(&model, &set).unwrap() > 0.5);
}

#[test]
fn continual_report_is_consistent() {
    let a = TaskData::split(&fixture(40, 10), 0.75, 0).unwrap();
    let b = TaskData::split(&fixture(40, 11), 0.75, 0).unwrap();
    let out = trainer::continual_protocol(&a, &b, 0.0, &config(3)).unwrap();
    let r = out.report;
    assert_eq!(r.forgetting, r.acc_a_before - r.acc_a_after);
    assert_eq!(r.lambda, 0.0);
    for acc in [r.acc_a_before, r.acc_a_after, r.acc_b] {
        assert!((0.0..=1.0).contains(&acc));
    }
    assert_eq!(out.fisher.anchor, out.model_a.params.flatten());
}

#[test]
fn mismatched_widths_are_rejected() {
    let set = fixture(8, 9);
    let cfg = TrainConfig {
        adapter: AdapterConfig::new(5, 3, 4),
        ..config(1)
    };
    assert!(matches!(trainer::train(&set, &cfg, None), Err(ganet::Error::Shape(_))));
}

mod accounting {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn closed_form_count_matches_allocated_tensors(
            in_dim in 1usize..40,
            mid in 1usize..40,
            out in 1usize..40,
            layers in 1usize..5,
            classes in 1usize..20,
            use_bias in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let cfg = AdapterConfig {
                mid_dim: mid.min(in_dim),
                out_dim: out,
                gcn_layers: layers,
                use_bias,
                seed,
                ..AdapterConfig::new(in_dim, 1, classes)
            };
            let params = adapter::init_params(&cfg).unwrap();
            prop_assert_eq!(adapter::count_trainable(&cfg), params.flatten().len());
            prop_assert_eq!(AdapterParams::from_flat(&cfg, &params.flatten()).unwrap(), params);
        }
    }
}
