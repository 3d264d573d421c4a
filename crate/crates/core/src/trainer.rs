//! Adam with a per-epoch cosine schedule, evaluation, the two-task
//! forgetting protocol and the similarity-threshold sweep.

use std::fmt::Write as _;

use crate::adapter::{self, AdapterConfig, AdapterParams, ModelArtifact, TrainingMeta};
use crate::continual::{self, EwcConfig, FisherState};
use crate::error::{Error, Result};
use crate::fixtures::{self, FixtureSet, Sample};
use crate::graph::{self, GraphMode};
use crate::rng::SplitMix64;

pub const DEFAULT_EPOCHS: usize = 100;
pub const DEFAULT_BATCH_SIZE: usize = 16;
pub const DEFAULT_LR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Shuffle seed. Parameter initialization uses `adapter.seed`.
    pub seed: u64,
    pub ewc: Option<EwcConfig>,
    pub adapter: AdapterConfig,
    /// Worker threads for per-sample forward/backward within a batch.
    pub threads: usize,
}

impl TrainConfig {
    pub fn new(adapter: AdapterConfig) -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            lr0: DEFAULT_LR,
            lr_min: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            ewc: None,
            adapter,
            threads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 {} must be finite and >= 0", self.lr0)));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr0) {
            return Err(Error::Config(format!(
                "lr_min {} must lie in [0, lr0]",
                self.lr_min
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config("Adam eps must be > 0".into()));
        }
        if let Some(ewc) = &self.ewc {
            ewc.validate()?;
        }
        self.adapter.validate()
    }

    fn ewc_or_default(&self) -> EwcConfig {
        self.ewc.clone().unwrap_or_default()
    }
}

/// `lr_min + ½(lr0 − lr_min)(1 + cos(π t / T))`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if total == 0 || t > total {
        return Err(Error::Config(format!("schedule step {t} outside [0, {total}]")));
    }
    let progress = t as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    hyper: AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "Adam over {} params with {} grads and {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient {i} = {}", grads[i])));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
        *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean of the batch objectives seen this epoch.
    pub train_loss: f64,
    pub lr: f64,
    pub eval_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub rows: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,lr,eval_accuracy\n");
        for r in &self.rows {
            let acc = r.eval_accuracy.map(|a| format_g(a, 10)).unwrap_or_default();
            writeln!(out, "{},{},{},{}", r.epoch, format_g(r.train_loss, 10), format_g(r.lr, 10), acc)
                .unwrap();
        }
        out
    }
}

/// Optional inputs to [`train_with`].
#[derive(Debug, Clone, Default)]
pub struct TrainInputs<'a> {
    /// Start from these parameters instead of a fresh initialization.
    pub init: Option<AdapterParams>,
    /// Anchor and Fisher diagonal for the elastic penalty.
    pub fisher: Option<&'a FisherState>,
    /// Scored after every epoch into [`EpochRecord::eval_accuracy`].
    pub eval: Option<&'a FixtureSet>,
}

pub fn train(
    trainset: &FixtureSet,
    config: &TrainConfig,
    fisher: Option<&FisherState>,
) -> Result<(ModelArtifact, History)> {
    train_with(
        trainset,
        config,
        TrainInputs {
            fisher,
            ..TrainInputs::default()
        },
    )
}

fn check_dataset(set: &FixtureSet, config: &AdapterConfig) -> Result<()> {
    let width = AdapterConfig::node_width(config.graph_mode, set.embed_dim());
    if width != config.in_dim {
        return Err(Error::Shape(format!(
            "{} mode on E={} gives node width {width}, adapter expects {}",
            config.graph_mode.as_str(),
            set.embed_dim(),
            config.in_dim
        )));
    }
    if set.num_classes() != config.num_classes {
        return Err(Error::Shape(format!(
            "dataset has {} classes, adapter head has {}",
            set.num_classes(),
            config.num_classes
        )));
    }
    Ok(())
}

/// Mean cross-entropy over `samples` and its flat gradient.
///
/// Token mode evaluates one graph per sample, spread over `threads`
/// workers; gradients are summed in sample order so the result does not
/// depend on the worker count. Sample mode builds one graph over the batch.
pub fn batch_loss_and_grad(
    params: &AdapterParams,
    config: &AdapterConfig,
    samples: &[&Sample],
    threads: usize,
) -> Result<(f64, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("empty batch".into()));
    }
    if config.graph_mode == GraphMode::Sample {
        let (loss, g) = adapter::loss_and_grad(params, config, samples)?;
        return Ok((loss, g.flatten()));
    }
    let per_sample = |chunk: &[&Sample]| -> Result<Vec<(f64, Vec<f64>)>> {
        chunk
            .iter()
            .map(|s| adapter::loss_and_grad(params, config, &[s]).map(|(l, g)| (l, g.flatten())))
            .collect()
    };
    let threads = threads.clamp(1, samples.len());
    let results: Vec<(f64, Vec<f64>)> = if threads == 1 {
        per_sample(samples)?
    } else {
        let chunk = samples.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .map(|c| s.spawn(move || per_sample(c)))
                .collect();
            let mut all = Vec::with_capacity(samples.len());
            for h in handles {
                all.extend(h.join().expect("gradient worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.len()];
    for (l, g) in &results {
        loss += l;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    let inv = 1.0 / samples.len() as f64;
    grad.iter_mut().for_each(|v| *v *= inv);
    Ok((loss * inv, grad))
}

/// Training objective on `samples`: weighted cross-entropy plus the elastic
/// penalty when `fisher` is given. Returns `(objective, mean cross-entropy)`.
pub fn objective(
    params: &AdapterParams,
    config: &TrainConfig,
    samples: &[&Sample],
    fisher: Option<&FisherState>,
) -> Result<(f64, f64)> {
    let (ce, _) = batch_loss_and_grad(params, &config.adapter, samples, config.threads)?;
    let ewc = config.ewc_or_default();
    let penalty = match fisher {
        Some(f) => continual::ewc_penalty(&params.flatten(), f, ewc.lambda)?,
        None => 0.0,
    };
    Ok((continual::total_loss_with(ce, penalty, ewc.strict_eq11)?, ce))
}

/// Result of [`gradient_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: usize,
    pub max_relative_error: f64,
    /// Smallest |pre-activation| over every ReLU input at the checked point.
    pub relu_margin: f64,
    /// Parameter draws rejected for sitting too close to a ReLU kink.
    pub redraws: usize,
}

/// Smallest distance of any GCN pre-activation to the ReLU kink.
fn relu_margin(params: &AdapterParams, config: &AdapterConfig, samples: &[&Sample]) -> Result<f64> {
    let mut margin = f64::INFINITY;
    for s in samples {
        let fwd = adapter::forward(params, config, &[s])?;
        for layer in &fwd.gcn {
            for z in layer.pre_activation.data() {
                margin = margin.min(z.abs());
            }
        }
    }
    Ok(margin)
}

/// Compare the analytic gradient of cross-entropy plus the elastic penalty
/// with central differences at step `h`, over every trainable parameter.
///
/// One synthetic token-mode sample per class with `tokens` tokens per
/// modality is drawn, along with a positive Fisher diagonal and a perturbed anchor.
/// Biases are nudged off zero, and parameter draws whose ReLU inputs still
/// lie within `10·h` of zero are redrawn from the next derived seed, so the
/// differences never straddle a kink.
pub fn gradient_check(config: &AdapterConfig, tokens: usize, lambda: f64, h: f64) -> Result<GradCheckReport> {
    if config.graph_mode != GraphMode::Token {
        return Err(Error::Config("gradient check runs in token mode".into()));
    }
    config.validate()?;
    let synth = fixtures::SynthConfig {
        num_samples: config.num_classes.max(2),
        num_classes: config.num_classes.max(2),
        tokens,
        dim: config.in_dim,
        seed: config.seed,
        ..fixtures::SynthConfig::default()
    };
    let data = fixtures::generate_synthetic(&synth)?;
    let samples: Vec<&Sample> = data
        .samples()
        .iter()
        .filter(|s| s.label < config.num_classes)
        .collect();
    if samples.is_empty() {
        return Err(Error::EmptyDataset("gradient-check samples".into()));
    }

    const MAX_REDRAWS: usize = 1000;
    let mut cfg = config.clone();
    let mut redraws = 0;
    let (params, margin) = loop {
        let mut params = adapter::init_params(&cfg)?;
        adapter::nudge_biases(&mut params, cfg.seed);
        let margin = relu_margin(&params, &cfg, &samples)?;
        if margin >= 10.0 * h {
            break (params, margin);
        }
        redraws += 1;
        if redraws >= MAX_REDRAWS {
            return Err(Error::Config("no parameter draw clear of ReLU kinks".into()));
        }
        cfg.seed = SplitMix64::derive(config.seed, redraws as u64).next_u64();
    };

    let theta = params.flatten();
    let mut rng = SplitMix64::derive(cfg.seed, 0x6663);
    let fisher_diag: Vec<f64> = theta.iter().map(|_| rng.uniform(0.1, 1.0)).collect();
    let anchor: Vec<f64> = theta.iter().map(|t| t + 0.1 * rng.gaussian()).collect();
    let fisher = FisherState::new(fisher_diag, anchor, 0, samples.len() as u64)?;
    let ewc = EwcConfig { lambda, ..EwcConfig::default() };
    ewc.validate()?;

    let (_, ce_grad) = batch_loss_and_grad(&params, &cfg, &samples, 1)?;
    let pen_grad = continual::ewc_penalty_grad(&theta, &fisher, lambda)?;
    let analytic: Vec<f64> = ce_grad.iter().zip(&pen_grad).map(|(a, b)| a + b).collect();

    let mut failure = None;
    let mut probe = params.clone();
    let loss_fn = |flat: &[f64]| -> f64 {
        let mut eval = || -> Result<f64> {
            probe.assign_flat(flat)?;
            let (ce, _) = batch_loss_and_grad(&probe, &cfg, &samples, 1)?;
            let pen = continual::ewc_penalty(flat, &fisher, lambda)?;
            continual::total_loss(ce, pen)
        };
        eval().unwrap_or_else(|e| {
            failure.get_or_insert(e);
            f64::NAN
        })
    };
    let max_relative_error = crate::nn::finite_diff_check(loss_fn, &theta, &analytic, h)?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(GradCheckReport {
        params: theta.len(),
        max_relative_error,
        relu_margin: margin,
        redraws,
    })
}

pub fn train_with(
    trainset: &FixtureSet,
    config: &TrainConfig,
    inputs: TrainInputs<'_>,
) -> Result<(ModelArtifact, History)> {
    config.validate()?;
    check_dataset(trainset, &config.adapter)?;
    if trainset.is_empty() {
        return Err(Error::EmptyDataset("training set".into()));
    }
    let mut params = match inputs.init {
        Some(p) => {
            if p.len() != adapter::count_trainable(&config.adapter) {
                return Err(Error::Shape("initial parameters do not match config".into()));
            }
            p
        }
        None => adapter::init_params(&config.adapter)?,
    };
    let mut flat = params.flatten();
    if let Some(f) = inputs.fisher {
        if f.len() != flat.len() {
            return Err(Error::Shape(format!(
                "Fisher state over {} parameters, model has {}",
                f.len(),
                flat.len()
            )));
        }
    }
    let ewc = config.ewc_or_default();
    let ce_weight = continual::ce_weight(ewc.strict_eq11);
    let hyper = AdamHyper {
        beta1: config.beta1,
        beta2: config.beta2,
        eps: config.eps,
    };
    let mut adam = AdamState::new(flat.len());
    let mut order: Vec<usize> = (0..trainset.len()).collect();
    let samples = trainset.samples();
    let mut history = History::default();
    let mut lr = config.lr0;

    for epoch in 0..config.epochs {
        lr = cosine_lr(epoch, config.epochs, config.lr0, config.lr_min)?;
        SplitMix64::derive(config.seed, epoch as u64).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
            let (ce, mut grad) = batch_loss_and_grad(&params, &config.adapter, &batch, config.threads)?;
            let mut loss = ce_weight * ce;
            if ce_weight != 1.0 {
                grad.iter_mut().for_each(|g| *g *= ce_weight);
            }
            if let Some(f) = inputs.fisher {
                loss += continual::ewc_penalty(&flat, f, ewc.lambda)?;
                let pg = continual::ewc_penalty_grad(&flat, f, ewc.lambda)?;
                grad.iter_mut().zip(pg).for_each(|(g, p)| *g += p);
            }
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, loss });
            }
            adam_step(&mut flat, &grad, &mut adam, lr, hyper)?;
            params.assign_flat(&flat)?;
            loss_sum += loss * idx.len() as f64;
        }
        let eval_accuracy = match inputs.eval {
            Some(set) => Some(accuracy(&params, &config.adapter, set, config.batch_size)?),
            None => None,
        };
        history.rows.push(EpochRecord {
            epoch,
            train_loss: loss_sum / trainset.len() as f64,
            lr,
            eval_accuracy,
        });
    }

    let artifact = ModelArtifact {
        config: config.adapter.clone(),
        params,
        meta: TrainingMeta {
            epochs_run: u32::try_from(config.epochs).unwrap_or(u32::MAX),
            final_lr: lr,
            seed: config.seed,
        },
    };
    Ok((artifact, history))
}

/// Predicted class per sample. Sample-mode graphs are built over
/// consecutive chunks of `batch_size` samples in dataset order.
pub fn predict(
    params: &AdapterParams,
    config: &AdapterConfig,
    set: &FixtureSet,
    batch_size: usize,
) -> Result<Vec<usize>> {
    check_dataset(set, config)?;
    let refs: Vec<&Sample> = set.samples().iter().collect();
    let unit = match config.graph_mode {
        GraphMode::Token => 1,
        GraphMode::Sample => batch_size.max(1),
    };
    let mut out = Vec::with_capacity(set.len());
    for chunk in refs.chunks(unit) {
        let fwd = adapter::forward(params, config, chunk)?;
        out.extend((0..fwd.logits.rows()).map(|i| adapter::argmax(fwd.logits.row(i))));
    }
    Ok(out)
}

fn accuracy(params: &AdapterParams, config: &AdapterConfig, set: &FixtureSet, batch_size: usize) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptyDataset("evaluation set".into()));
    }
    let predictions = predict(params, config, set, batch_size)?;
    let correct = predictions.iter().zip(set.labels()).filter(|(p, l)| **p == *l).count();
    Ok(correct as f64 / set.len() as f64)
}

/// Fraction of samples whose arg-max logit (lowest index on ties) equals the label.
pub fn evaluate(model: &ModelArtifact, set: &FixtureSet) -> Result<f64> {
    accuracy(&model.params, &model.config, set, DEFAULT_BATCH_SIZE)
}

/// A task's train and held-out halves.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: FixtureSet,
    pub test: FixtureSet,
}

impl TaskData {
    pub fn split(set: &FixtureSet, train_fraction: f64, seed: u64) -> Result<Self> {
        let (train, test) = fixtures::split(set, train_fraction, seed)?;
        Ok(Self { train, test })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForgettingReport {
    pub acc_a_before: f64,
    pub acc_a_after: f64,
    pub acc_b: f64,
    /// `acc_a_before − acc_a_after`.
    pub forgetting: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct ContinualOutcome {
    pub report: ForgettingReport,
    pub model_a: ModelArtifact,
    pub fisher: FisherState,
    pub model_b: ModelArtifact,
}

/// Train on A, score A, estimate the Fisher on A's training half, continue
/// training on B from A's parameters under the penalty, then score A and B.
pub fn continual_protocol(
    task_a: &TaskData,
    task_b: &TaskData,
    lambda: f64,
    config: &TrainConfig,
) -> Result<ContinualOutcome> {
    let a = &task_a.train;
    let b = &task_b.train;
    if (a.tokens_per_modality(), a.embed_dim(), a.num_classes())
        != (b.tokens_per_modality(), b.embed_dim(), b.num_classes())
    {
        return Err(Error::Shape("tasks differ in token count, width or classes".into()));
    }
    let ewc = EwcConfig {
        lambda,
        ..config.ewc_or_default()
    };
    let config = TrainConfig {
        ewc: Some(ewc.clone()),
        ..config.clone()
    };

    let (model_a, _) = train(a, &config, None)?;
    let acc_a_before = evaluate(&model_a, &task_a.test)?;
    let fisher = continual::estimate_fisher(&model_a.params, &model_a.config, a, &ewc, 0)?;

    let config_b = TrainConfig {
        seed: config.seed.wrapping_add(1),
        ..config
    };
    let (model_b, _) = train_with(
        b,
        &config_b,
        TrainInputs {
            init: Some(model_a.params.clone()),
            fisher: Some(&fisher),
            eval: None,
        },
    )?;
    let acc_a_after = evaluate(&model_b, &task_a.test)?;
    let acc_b = evaluate(&model_b, &task_b.test)?;
    Ok(ContinualOutcome {
        report: ForgettingReport {
            acc_a_before,
            acc_a_after,
            acc_b,
            forgetting: acc_a_before - acc_a_after,
            lambda,
        },
        model_a,
        fisher,
        model_b,
    })
}

/// Graph statistics accumulated over every graph the adapter would build for a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetGraphStats {
    pub graphs: usize,
    pub nodes: usize,
    pub edges: usize,
    pub mean_degree: f64,
    pub isolated: usize,
}

pub fn dataset_graph_stats(
    set: &FixtureSet,
    mode: GraphMode,
    gamma: f64,
    batch_size: usize,
) -> Result<DatasetGraphStats> {
    let refs: Vec<&Sample> = set.samples().iter().collect();
    let unit = match mode {
        GraphMode::Token => 1,
        GraphMode::Sample => batch_size.max(1),
    };
    let mut total = DatasetGraphStats {
        graphs: 0,
        nodes: 0,
        edges: 0,
        mean_degree: 0.0,
        isolated: 0,
    };
    for chunk in refs.chunks(unit) {
        let nodes = match mode {
            GraphMode::Token => graph::NodeMatrix::from_tokens(chunk[0])?,
            GraphMode::Sample => graph::NodeMatrix::from_samples(chunk.iter().copied())?,
        };
        let s = graph::graph_stats(&graph::build_adjacency(&nodes, gamma));
        total.graphs += 1;
        total.nodes += s.nodes;
        total.edges += s.edges;
        total.isolated += s.isolated_count;
    }
    if total.nodes > 0 {
        total.mean_degree = 2.0 * total.edges as f64 / total.nodes as f64;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub gamma: f64,
    pub edges: usize,
    pub mean_degree: f64,
    pub isolated: usize,
    pub test_accuracy: f64,
}

/// Train and evaluate once per threshold. Graph statistics describe the training half.
pub fn sweep_gamma(data: &TaskData, gammas: &[f64], config: &TrainConfig) -> Result<Vec<SweepRow>> {
    gammas
        .iter()
        .map(|&gamma| {
            if !(-1.0..=1.0).contains(&gamma) {
                return Err(Error::Config(format!("gamma {gamma} outside [-1, 1]")));
            }
            let cfg = TrainConfig {
                adapter: AdapterConfig {
                    gamma,
                    ..config.adapter.clone()
                },
                ..config.clone()
            };
            let stats =
                dataset_graph_stats(&data.train, cfg.adapter.graph_mode, gamma, cfg.batch_size)?;
            let (model, _) = train(&data.train, &cfg, None)?;
            Ok(SweepRow {
                gamma,
                edges: stats.edges,
                mean_degree: stats.mean_degree,
                isolated: stats.isolated,
                test_accuracy: evaluate(&model, &data.test)?,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("gamma,edges,mean_degree,isolated,test_accuracy\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            format_g(r.gamma, 10),
            r.edges,
            format_g(r.mean_degree, 10),
            r.isolated,
            format_g(r.test_accuracy, 10)
        )
        .unwrap();
    }
    out
}

/// C `printf("%.<precision>g")` formatting.
pub fn format_g(x: f64, precision: usize) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let p = precision.max(1);
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.*e}", p - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if exp < -4 || exp >= p as i32 {
        let mantissa = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (p as i32 - 1 - exp) as usize;
        strip_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
