//! The graph adapter: down-projection, GCN layers over the token graph,
//! up-projection, mean pooling and a linear classifier head.
//!
//! ```text
//! X ──W_down──▶ C⁰ ──[ReLU(Ĥ·Cˡ·Wˡ + bˡ)]×L──▶ Cᴸ ──W_up──▶ U ──pool──▶ p ──head──▶ logits
//! ```
//!
//! `Ĥ` is rebuilt from the raw input features for every forward pass; the
//! adapted activations never feed back into the graph. In token mode a
//! sample's `2N` adapted rows are mean-pooled into one vector; in sample mode
//! every row is already one sample and the head applies row-wise.

use std::path::Path;

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::fixtures::Sample;
use crate::graph::{self, GraphMode, NodeMatrix, NormalizedOperator};
use crate::nn::{self, GcnCache, Tensor2};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterConfig {
    pub in_dim: usize,
    pub mid_dim: usize,
    pub out_dim: usize,
    pub gcn_layers: usize,
    pub num_classes: usize,
    pub gamma: f64,
    pub graph_mode: GraphMode,
    pub use_bias: bool,
    /// Adds the adapter input to the up-projection output; requires `out_dim == in_dim`.
    pub residual: bool,
    /// When false the GCN layers see no edges (`Ĥ = I`): the graph-off ablation.
    pub use_graph: bool,
    pub seed: u64,
}

pub const DEFAULT_GAMMA: f64 = 0.7;

impl AdapterConfig {
    /// Token-mode defaults for embeddings of width `embed_dim`.
    pub fn new(embed_dim: usize, mid_dim: usize, num_classes: usize) -> Self {
        Self {
            in_dim: embed_dim,
            mid_dim,
            out_dim: embed_dim,
            gcn_layers: 1,
            num_classes,
            gamma: DEFAULT_GAMMA,
            graph_mode: GraphMode::Token,
            use_bias: true,
            residual: false,
            use_graph: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.mid_dim == 0 || self.out_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config("adapter dimensions must be >= 1".into()));
        }
        if self.gcn_layers == 0 {
            return Err(Error::Config("need at least one GCN layer".into()));
        }
        if self.mid_dim > self.in_dim {
            return Err(Error::Config(format!(
                "bottleneck width {} exceeds input width {}",
                self.mid_dim, self.in_dim
            )));
        }
        if !self.gamma.is_finite() {
            return Err(Error::Config("gamma must be finite".into()));
        }
        if self.residual && self.out_dim != self.in_dim {
            return Err(Error::Config(format!(
                "residual needs out_dim == in_dim ({} != {})",
                self.out_dim, self.in_dim
            )));
        }
        Ok(())
    }

    /// Node feature width this config expects from a sample with embedding width `embed_dim`.
    pub fn node_width(mode: GraphMode, embed_dim: usize) -> usize {
        match mode {
            GraphMode::Token => embed_dim,
            GraphMode::Sample => 2 * embed_dim,
        }
    }

    /// `(rows, cols)` of each weight, in canonical parameter order.
    fn weight_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = vec![(self.in_dim, self.mid_dim)];
        shapes.extend(std::iter::repeat_n((self.mid_dim, self.mid_dim), self.gcn_layers));
        shapes.push((self.mid_dim, self.out_dim));
        shapes.push((self.out_dim, self.num_classes));
        shapes
    }
}

/// Weight matrix plus optional bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor2,
    pub bias: Option<Vec<f64>>,
}

impl Dense {
    fn zeros(rows: usize, cols: usize, bias: bool) -> Self {
        Self {
            weight: Tensor2::zeros(rows, cols),
            bias: bias.then(|| vec![0.0; cols]),
        }
    }

    fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    fn len(&self) -> usize {
        self.weight.data().len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    fn set_grads(&mut self, weight: Tensor2, bias: Vec<f64>) {
        self.weight = weight;
        if let Some(b) = &mut self.bias {
            *b = bias;
        }
    }
}

/// All trainable state of the adapter. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub down: Dense,
    pub gcn: Vec<Dense>,
    pub up: Dense,
    pub head: Dense,
}

impl AdapterParams {
    pub fn zeros(config: &AdapterConfig) -> Self {
        let mut dense = config
            .weight_shapes()
            .into_iter()
            .map(|(r, c)| Dense::zeros(r, c, config.use_bias));
        let down = dense.next().unwrap();
        let gcn = (0..config.gcn_layers).map(|_| dense.next().unwrap()).collect();
        let up = dense.next().unwrap();
        let head = dense.next().unwrap();
        Self { down, gcn, up, head }
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        std::iter::once(&self.down)
            .chain(&self.gcn)
            .chain([&self.up, &self.head])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        std::iter::once(&mut self.down)
            .chain(&mut self.gcn)
            .chain([&mut self.up, &mut self.head])
    }

    /// Parameter blocks in canonical order: each layer's weight, then its bias.
    pub fn blocks(&self) -> impl Iterator<Item = &[f64]> {
        self.layers()
            .flat_map(|d| std::iter::once(d.weight.data()).chain(d.bias.as_deref()))
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers_mut().flat_map(|d| {
            std::iter::once(d.weight.data_mut()).chain(d.bias.as_deref_mut())
        })
    }

    /// Total scalar count.
    pub fn len(&self) -> usize {
        self.layers().map(Dense::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        self.blocks().for_each(|b| out.extend_from_slice(b));
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.len()
            )));
        }
        let mut offset = 0;
        for block in self.blocks_mut() {
            block.copy_from_slice(&flat[offset..offset + block.len()]);
            offset += block.len();
        }
        Ok(())
    }

    pub fn from_flat(config: &AdapterConfig, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(config);
        p.assign_flat(flat)?;
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn weight_shapes(&self) -> Vec<(usize, usize)> {
        self.layers().map(|d| d.weight.shape()).collect()
    }

    fn matches(&self, config: &AdapterConfig) -> bool {
        self.weight_shapes() == config.weight_shapes()
            && self.layers().all(|d| d.bias.is_some() == config.use_bias)
    }
}

/// Glorot-uniform weights, zero biases, deterministic per `config.seed`.
pub fn init_params(config: &AdapterConfig) -> Result<AdapterParams> {
    config.validate()?;
    let mut params = AdapterParams::zeros(config);
    let mut rng = SplitMix64::derive(config.seed, 0x6164_6170);
    for d in params.layers_mut() {
        let (fan_in, fan_out) = d.weight.shape();
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        d.weight
            .data_mut()
            .iter_mut()
            .for_each(|w| *w = rng.uniform(-bound, bound));
    }
    Ok(params)
}

/// Overwrite every bias with a uniform draw from [-0.5, 0.5].
///
/// With zero biases, a node whose inputs are all clipped by one ReLU sits
/// exactly on the next layer's kink; finite-difference checks use this to
/// move such pre-activations off zero.
pub fn nudge_biases(params: &mut AdapterParams, seed: u64) {
    let mut rng = SplitMix64::derive(seed, 0x6e75_6467);
    for d in params.layers_mut() {
        if let Some(b) = d.bias.as_mut() {
            b.iter_mut().for_each(|v| *v = rng.uniform(-0.5, 0.5));
        }
    }
}

/// Closed-form trainable-parameter count.
pub fn count_trainable(config: &AdapterConfig) -> usize {
    let b = usize::from(config.use_bias);
    let (n_in, n_mid, n_out, k) = (config.in_dim, config.mid_dim, config.out_dim, config.num_classes);
    (n_in * n_mid + b * n_mid)
        + config.gcn_layers * (n_mid * n_mid + b * n_mid)
        + (n_mid * n_out + b * n_out)
        + (n_out * k + b * k)
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct Forward {
    pub mode: GraphMode,
    pub operator: NormalizedOperator,
    pub nodes: Tensor2,
    pub down_out: Tensor2,
    pub gcn: Vec<GcnCache>,
    /// Adapted node rows after the up-projection (and residual, if enabled).
    pub adapted: Tensor2,
    /// Head input: the pooled row in token mode, `adapted` itself in sample mode.
    pub head_in: Tensor2,
    /// One row of logits per classified item.
    pub logits: Tensor2,
    param_shapes: Vec<(usize, usize)>,
    use_bias: bool,
}

fn check_widths(config: &AdapterConfig, samples: &[&Sample]) -> Result<()> {
    for s in samples {
        let width = AdapterConfig::node_width(config.graph_mode, s.image_tokens.cols());
        if width != config.in_dim || s.text_tokens.cols() != s.image_tokens.cols() {
            return Err(Error::Shape(format!(
                "{} mode with embedding width {} gives node width {width}, adapter expects {}",
                config.graph_mode.as_str(),
                s.image_tokens.cols(),
                config.in_dim
            )));
        }
    }
    Ok(())
}

/// Node matrix for `samples`: one sample in token mode, a batch in sample mode.
pub fn build_nodes(config: &AdapterConfig, samples: &[&Sample]) -> Result<NodeMatrix> {
    check_widths(config, samples)?;
    match config.graph_mode {
        GraphMode::Token => match samples {
            [s] => NodeMatrix::from_tokens(s),
            _ => Err(Error::Shape(format!(
                "token mode classifies one sample per graph, got {}",
                samples.len()
            ))),
        },
        GraphMode::Sample => {
            if samples.is_empty() {
                return Err(Error::EmptyDataset("empty batch".into()));
            }
            NodeMatrix::from_samples(samples.iter().copied())
        }
    }
}

/// Forward pass. Token mode takes exactly one sample and yields one logit
/// row; sample mode takes a batch and yields one row per sample.
pub fn forward(params: &AdapterParams, config: &AdapterConfig, samples: &[&Sample]) -> Result<Forward> {
    let nodes = build_nodes(config, samples)?;
    forward_nodes(params, config, nodes, 1)
}

/// Forward pass over an explicit node matrix, building the graph with `workers` threads.
pub fn forward_nodes(
    params: &AdapterParams,
    config: &AdapterConfig,
    nodes: NodeMatrix,
    workers: usize,
) -> Result<Forward> {
    if !params.matches(config) {
        return Err(Error::Shape("parameters do not match adapter config".into()));
    }
    let operator = if config.use_graph {
        graph::normalize(&graph::build_adjacency_with_workers(&nodes, config.gamma, workers))
    } else {
        NormalizedOperator::identity(nodes.len())
    };
    let x = nodes.into_features();
    if x.cols() != config.in_dim {
        return Err(Error::Shape(format!(
            "node width {} but adapter expects {}",
            x.cols(),
            config.in_dim
        )));
    }

    let down_out = nn::linear_forward(&x, &params.down.weight, params.down.bias())?;
    let mut gcn = Vec::with_capacity(params.gcn.len());
    for layer in &params.gcn {
        let input = gcn.last().map_or(&down_out, |c: &GcnCache| &c.output);
        let cache = nn::gcn_layer_forward(&operator, input, &layer.weight, layer.bias())?;
        gcn.push(cache);
    }
    let last = &gcn.last().expect("at least one layer").output;
    let mut adapted = nn::linear_forward(last, &params.up.weight, params.up.bias())?;
    if config.residual {
        adapted.add_assign(&x)?;
    }
    let head_in = match config.graph_mode {
        GraphMode::Token => {
            let pooled = nn::mean_pool_forward(&adapted)?;
            Tensor2::from_vec(1, pooled.len(), pooled)?
        }
        GraphMode::Sample => adapted.clone(),
    };
    let logits = nn::linear_forward(&head_in, &params.head.weight, params.head.bias())?;
    Ok(Forward {
        mode: config.graph_mode,
        operator,
        nodes: x,
        down_out,
        gcn,
        adapted,
        head_in,
        logits,
        param_shapes: params.weight_shapes(),
        use_bias: config.use_bias,
    })
}

/// Parameter gradients for upstream logit gradients `dlogits` (same shape as `fwd.logits`).
pub fn backward(fwd: &Forward, params: &AdapterParams, dlogits: &Tensor2) -> Result<AdapterParams> {
    if fwd.param_shapes != params.weight_shapes()
        || params.layers().any(|d| d.bias.is_some() != fwd.use_bias)
    {
        return Err(Error::StaleCache("parameter shapes changed since forward".into()));
    }
    if dlogits.shape() != fwd.logits.shape() {
        return Err(Error::Shape(format!(
            "logit gradient {:?} for logits {:?}",
            dlogits.shape(),
            fwd.logits.shape()
        )));
    }
    let mut grads = params.clone();

    let head = nn::linear_backward(&fwd.head_in, &params.head.weight, dlogits)?;
    grads.head.set_grads(head.grad_weights, head.grad_bias);

    let d_adapted = match fwd.mode {
        GraphMode::Token => nn::mean_pool_backward(head.grad_input.row(0), fwd.adapted.rows()),
        GraphMode::Sample => head.grad_input,
    };
    let last = &fwd.gcn.last().expect("at least one layer").output;
    let up = nn::linear_backward(last, &params.up.weight, &d_adapted)?;
    grads.up.set_grads(up.grad_weights, up.grad_bias);

    let mut g = up.grad_input;
    for l in (0..params.gcn.len()).rev() {
        let layer = nn::gcn_layer_backward(&fwd.operator, &fwd.gcn[l], &params.gcn[l].weight, &g)?;
        grads.gcn[l].set_grads(layer.grad_weights, layer.grad_bias);
        g = layer.grad_input;
    }

    let down = nn::linear_backward(&fwd.nodes, &params.down.weight, &g)?;
    grads.down.set_grads(down.grad_weights, down.grad_bias);
    Ok(grads)
}

/// Mean cross-entropy over the logit rows of `fwd` and its logit gradient.
pub fn cross_entropy(fwd: &Forward, labels: &[usize]) -> Result<(f64, Tensor2)> {
    if labels.len() != fwd.logits.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} logit rows",
            labels.len(),
            fwd.logits.rows()
        )));
    }
    let inv = 1.0 / labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor2::zeros(fwd.logits.rows(), fwd.logits.cols());
    for (i, &label) in labels.iter().enumerate() {
        let row = fwd.logits.row(i);
        loss += nn::softmax_ce_forward(row, label)?;
        let g = nn::softmax_ce_backward(row, label)?;
        grad.row_mut(i).iter_mut().zip(g).for_each(|(o, v)| *o = v * inv);
    }
    Ok((loss * inv, grad))
}

/// Mean cross-entropy and its parameter gradient for one graph unit
/// (one sample in token mode, a batch in sample mode).
pub fn loss_and_grad(
    params: &AdapterParams,
    config: &AdapterConfig,
    samples: &[&Sample],
) -> Result<(f64, AdapterParams)> {
    let fwd = forward(params, config, samples)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let (loss, dlogits) = cross_entropy(&fwd, &labels)?;
    Ok((loss, backward(&fwd, params, &dlogits)?))
}

/// Logits of the graph-free path: the same layers with `Ĥ` omitted entirely.
/// With no edges this is what [`forward`] computes.
pub fn forward_without_graph(
    params: &AdapterParams,
    config: &AdapterConfig,
    samples: &[&Sample],
) -> Result<Tensor2> {
    let x = build_nodes(config, samples)?.into_features();
    let mut c = nn::linear_forward(&x, &params.down.weight, params.down.bias())?;
    for layer in &params.gcn {
        c = nn::relu(&nn::linear_forward(&c, &layer.weight, layer.bias())?);
    }
    let mut u = nn::linear_forward(&c, &params.up.weight, params.up.bias())?;
    if config.residual {
        u.add_assign(&x)?;
    }
    let head_in = match config.graph_mode {
        GraphMode::Token => {
            let p = nn::mean_pool_forward(&u)?;
            Tensor2::from_vec(1, p.len(), p)?
        }
        GraphMode::Sample => u,
    };
    nn::linear_forward(&head_in, &params.head.weight, params.head.bias())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainingMeta {
    pub epochs_run: u32,
    pub final_lr: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifact {
    pub config: AdapterConfig,
    pub params: AdapterParams,
    pub meta: TrainingMeta,
}

pub const GAMD_MAGIC: [u8; 4] = *b"GAMD";
pub const GAMD_VERSION: u32 = 1;

impl ModelArtifact {
    /// GAMD layout (little-endian):
    ///
    /// ```text
    /// "GAMD" | version u32
    /// in u32 | mid u32 | out u32 | layers u32 | classes u32 | gamma f64
    /// mode u8 (0 token, 1 sample) | use_bias u8 | residual u8 | use_graph u8 | init seed u64
    /// epochs_run u32 | final_lr f64 | train seed u64
    /// param count u64 | params f64 × count (canonical order)
    /// ```
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let c = &self.config;
        let dim = |v: usize| {
            u32::try_from(v).map_err(|_| Error::DimensionOverflow(format!("dimension {v}")))
        };
        let mut w = Writer::new();
        w.bytes(&GAMD_MAGIC);
        w.u32(GAMD_VERSION);
        for v in [c.in_dim, c.mid_dim, c.out_dim, c.gcn_layers, c.num_classes] {
            w.u32(dim(v)?);
        }
        w.f64(c.gamma);
        w.u8(match c.graph_mode {
            GraphMode::Token => 0,
            GraphMode::Sample => 1,
        });
        w.u8(u8::from(c.use_bias));
        w.u8(u8::from(c.residual));
        w.u8(u8::from(c.use_graph));
        w.u64(c.seed);
        w.u32(self.meta.epochs_run);
        w.f64(self.meta.final_lr);
        w.u64(self.meta.seed);
        w.u64(self.params.len() as u64);
        for block in self.params.blocks() {
            block.iter().for_each(|&v| w.f64(v));
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(GAMD_MAGIC)?;
        r.version(GAMD_VERSION)?;
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let gamma = r.f64()?;
        let graph_mode = match r.u8()? {
            0 => GraphMode::Token,
            1 => GraphMode::Sample,
            m => return Err(Error::Config(format!("unknown graph mode byte {m}"))),
        };
        let flag = |v: u8, what: &str| match v {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(Error::Config(format!("{what} flag byte {v}"))),
        };
        let use_bias = flag(r.u8()?, "use_bias")?;
        let residual = flag(r.u8()?, "residual")?;
        let use_graph = flag(r.u8()?, "use_graph")?;
        let seed = r.u64()?;
        let config = AdapterConfig {
            in_dim: dims[0],
            mid_dim: dims[1],
            out_dim: dims[2],
            gcn_layers: dims[3],
            num_classes: dims[4],
            gamma,
            graph_mode,
            use_bias,
            residual,
            use_graph,
            seed,
        };
        let meta = TrainingMeta {
            epochs_run: r.u32()?,
            final_lr: r.f64()?,
            seed: r.u64()?,
        };
        let count = r.u64()?;
        config.validate()?;
        let expected = checked_count(&config)?;
        if count != expected as u64 {
            return Err(Error::Shape(format!(
                "file holds {count} parameters, config implies {expected}"
            )));
        }
        let payload = binio::checked_product(&[expected, 8], "parameter payload")?;
        if r.remaining() < payload {
            return Err(Error::Truncated {
                offset: bytes.len(),
                needed: payload - r.remaining(),
            });
        }
        let flat = (0..expected).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let params = AdapterParams::from_flat(&config, &flat)?;
        Ok(Self { config, params, meta })
    }
}

fn checked_count(config: &AdapterConfig) -> Result<usize> {
    let b = usize::from(config.use_bias);
    let overflow = || Error::DimensionOverflow("parameter count".into());
    let (n_in, n_mid, n_out, k) = (config.in_dim, config.mid_dim, config.out_dim, config.num_classes);
    let layer = |a: usize, c: usize| a.checked_mul(c).and_then(|w| w.checked_add(b * c));
    let parts = [
        layer(n_in, n_mid),
        layer(n_mid, n_mid).and_then(|v| v.checked_mul(config.gcn_layers)),
        layer(n_mid, n_out),
        layer(n_out, k),
    ];
    parts
        .into_iter()
        .try_fold(0usize, |acc, p| p.and_then(|p| acc.checked_add(p)))
        .ok_or_else(overflow)
}

pub fn save_model(artifact: &ModelArtifact, path: &Path) -> Result<()> {
    binio::write_atomic(path, &artifact.to_bytes()?)
}

pub fn load_model(path: &Path) -> Result<ModelArtifact> {
    ModelArtifact::from_bytes(&binio::read_file(path)?)
}
