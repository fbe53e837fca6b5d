//! The assembled network: stream encoders, fusion, shared head, and the
//! multi-task variant, with batched forward/backward plumbing.
//!
//! Layer caches are stacks, so a batch is processed instance by instance
//! through the temporal streams (push B caches) and unwound in reverse
//! during backward. The multi-task shared layer is a single `Dense` object
//! forwarded once per modality; its gradient accumulates across heads.

use super::{
    Batch, ConvChoice, Fusion, Modality, ModelConfig, ModelError, StreamGeom, FC_FUSION_UNITS,
};
use crate::layers::{
    concat, sigmoid, split, Conv1d, ConvKind, ConvSpec, Dense, DpsConv1d, Dropout, GlobalAvgPool,
    GlobalMaxPool, Layer, Padding, Param, Phase, Relu,
};
use crate::objective::{
    regularization_penalty, regularization_value, weighted_masked_bce_from_logits, LabelMatrix,
    RegPolicy, WeightMatrix,
};
use crate::tensor::{Rng, Scalar, Tensor};

/// Copies row `i` of a [B, D] tensor into a fresh [D] tensor.
fn row<T: Scalar>(t: &Tensor<T>, i: usize) -> Tensor<T> {
    let d = t.dim(1);
    let mut out = Tensor::zeros(&[d]);
    out.data_mut().copy_from_slice(&t.data()[i * d..(i + 1) * d]);
    out
}

/// Stacks rank-1 tensors of equal length into a [B, D] tensor.
fn stack_rows<T: Scalar>(rows: &[Tensor<T>]) -> Result<Tensor<T>, ModelError> {
    let b = rows.len();
    if b == 0 {
        return Err(ModelError::Batch("cannot stack an empty row set".into()));
    }
    let d = rows[0].len();
    let mut out = Tensor::zeros(&[b, d]);
    for (i, r) in rows.iter().enumerate() {
        if r.rank() != 1 || r.len() != d {
            return Err(ModelError::Batch(format!(
                "expected flat vectors of length {d}, got shape {:?}",
                r.shape()
            )));
        }
        out.data_mut()[i * d..(i + 1) * d].copy_from_slice(r.data());
    }
    Ok(out)
}

/// Activation capture: records the shape trace of one forward pass and, when
/// a tap name is requested, the per-instance values at that point.
struct Taps<'a, T: Scalar> {
    want: Option<&'a str>,
    hits: Vec<Tensor<T>>,
    trace: Vec<(String, Vec<usize>)>,
}

impl<'a, T: Scalar> Taps<'a, T> {
    fn new(want: Option<&'a str>) -> Self {
        Taps {
            want,
            hits: Vec::new(),
            trace: Vec::new(),
        }
    }

    /// Per-instance activation; `first` keeps the trace to one entry.
    fn note(&mut self, name: &str, t: &Tensor<T>, first: bool) {
        if first {
            self.trace.push((name.to_string(), t.shape().to_vec()));
        }
        if self.want == Some(name) {
            self.hits.push(t.clone());
        }
    }

    /// Batched [B, D] activation, tapped as B separate rows.
    fn note_rows(&mut self, name: &str, t: &Tensor<T>) {
        self.trace.push((name.to_string(), t.shape().to_vec()));
        if self.want == Some(name) {
            for i in 0..t.dim(0) {
                self.hits.push(row(t, i));
            }
        }
    }
}

#[derive(Debug, Clone)]
enum ConvBlock<T: Scalar> {
    Dps(DpsConv1d<T>),
    Std(Conv1d<T>),
}

impl<T: Scalar> ConvBlock<T> {
    fn new(
        name: &str,
        kind: ConvChoice,
        kernel: usize,
        stride: usize,
        in_channels: usize,
        out_filters: usize,
        rng: &mut Rng,
    ) -> Result<Self, ModelError> {
        let spec = ConvSpec {
            kernel,
            stride,
            in_channels,
            out_filters,
            padding: Padding::Same,
            kind: ConvKind::Standard, // constructors override per their kind
        };
        Ok(match kind {
            ConvChoice::Dps => ConvBlock::Dps(DpsConv1d::new(name, spec, rng)?),
            ConvChoice::Standard => ConvBlock::Std(Conv1d::new(name, spec, rng)?),
        })
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        Ok(match self {
            ConvBlock::Dps(l) => l.forward(x)?,
            ConvBlock::Std(l) => l.forward(x)?,
        })
    }

    fn backward(&mut self, up: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        Ok(match self {
            ConvBlock::Dps(l) => l.backward(up)?,
            ConvBlock::Std(l) => l.backward(up)?,
        })
    }

    fn as_layer(&self) -> &dyn Layer<T> {
        match self {
            ConvBlock::Dps(l) => l,
            ConvBlock::Std(l) => l,
        }
    }

    fn as_layer_mut(&mut self) -> &mut dyn Layer<T> {
        match self {
            ConvBlock::Dps(l) => l,
            ConvBlock::Std(l) => l,
        }
    }
}

#[derive(Debug, Clone)]
struct TemporalStream<T: Scalar> {
    modality: Modality,
    conv1: ConvBlock<T>,
    relu1: Relu<T>,
    conv2: ConvBlock<T>,
    relu2: Relu<T>,
}

impl<T: Scalar> TemporalStream<T> {
    fn new(m: Modality, g: StreamGeom, kind: ConvChoice, rng: &mut Rng) -> Result<Self, ModelError> {
        let conv1 = ConvBlock::new(
            &format!("{m}.conv1"),
            kind,
            g.k1,
            g.stride,
            g.input_ch,
            g.f1,
            rng,
        )?;
        let conv2 = ConvBlock::new(&format!("{m}.conv2"), kind, g.k2, g.stride, g.f1, g.f2, rng)?;
        Ok(TemporalStream {
            modality: m,
            conv1,
            relu1: Relu::new(&format!("{m}.relu1")),
            conv2,
            relu2: Relu::new(&format!("{m}.relu2")),
        })
    }

    /// One instance window [L, M] to its [l2, f2] feature map.
    fn forward_map(
        &mut self,
        x: &Tensor<T>,
        taps: &mut Taps<'_, T>,
        first: bool,
    ) -> Result<Tensor<T>, ModelError> {
        let h = self.conv1.forward(x)?;
        let h = self.relu1.forward(&h)?;
        taps.note(&format!("{}.conv1", self.modality), &h, first);
        let h = self.conv2.forward(&h)?;
        let h = self.relu2.forward(&h)?;
        taps.note(&format!("{}.conv2", self.modality), &h, first);
        Ok(h)
    }

    fn backward_map(&mut self, g: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let g = self.relu2.backward(g)?;
        let g = self.conv2.backward(&g)?;
        let g = self.relu1.backward(&g)?;
        Ok(self.conv1.backward(&g)?)
    }

    fn layers_mut(&mut self) -> Vec<&mut dyn Layer<T>> {
        vec![
            self.conv1.as_layer_mut(),
            &mut self.relu1,
            self.conv2.as_layer_mut(),
            &mut self.relu2,
        ]
    }
}

#[derive(Debug, Clone)]
struct VectorStream<T: Scalar> {
    fc: Dense<T>,
    relu: Relu<T>,
}

impl<T: Scalar> VectorStream<T> {
    fn new(width: usize, units: usize, rng: &mut Rng) -> Result<Self, ModelError> {
        Ok(VectorStream {
            fc: Dense::new("ps.fc", width, units, rng)?,
            relu: Relu::new("ps.relu"),
        })
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let h = self.fc.forward(x)?;
        Ok(self.relu.forward(&h)?)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let g = self.relu.backward(g)?;
        Ok(self.fc.backward(&g)?)
    }
}

#[derive(Debug, Clone)]
enum Encoder<T: Scalar> {
    Temporal(TemporalStream<T>),
    Vector(VectorStream<T>),
}

impl<T: Scalar> Encoder<T> {
    fn params(&self) -> Vec<&Param<T>> {
        match self {
            Encoder::Temporal(s) => {
                let mut v = s.conv1.as_layer().params();
                v.extend(s.conv2.as_layer().params());
                v
            }
            Encoder::Vector(s) => s.fc.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Encoder::Temporal(s) => {
                let mut v = s.conv1.as_layer_mut().params_mut();
                v.extend(s.conv2.as_layer_mut().params_mut());
                v
            }
            Encoder::Vector(s) => s.fc.params_mut(),
        }
    }

    fn layers_mut(&mut self) -> Vec<&mut dyn Layer<T>> {
        match self {
            Encoder::Temporal(s) => s.layers_mut(),
            Encoder::Vector(s) => vec![&mut s.fc, &mut s.relu],
        }
    }
}

#[derive(Debug, Clone)]
enum PoolBank<T: Scalar> {
    Max(GlobalMaxPool<T>),
    Avg(GlobalAvgPool<T>),
}

impl<T: Scalar> PoolBank<T> {
    fn new(fusion: Fusion, name: &str) -> Self {
        match fusion {
            Fusion::Gap => PoolBank::Avg(GlobalAvgPool::new(name)),
            _ => PoolBank::Max(GlobalMaxPool::new(name)),
        }
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        Ok(match self {
            PoolBank::Max(p) => p.forward(x)?,
            PoolBank::Avg(p) => p.forward(x)?,
        })
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        Ok(match self {
            PoolBank::Max(p) => p.backward(g)?,
            PoolBank::Avg(p) => p.backward(g)?,
        })
    }

    fn as_layer_mut(&mut self) -> &mut dyn Layer<T> {
        match self {
            PoolBank::Max(p) => p,
            PoolBank::Avg(p) => p,
        }
    }
}

#[derive(Debug, Clone)]
enum FusionStage<T: Scalar> {
    /// gmp / gap: one pool per temporal stream.
    Pool { pools: Vec<PoolBank<T>> },
    /// fc: one FC(128) + relu per temporal stream, fed the flattened map.
    Fc {
        fcs: Vec<Dense<T>>,
        relus: Vec<Relu<T>>,
    },
    /// flattened: raw flattened maps, nothing learned.
    Flattened,
    /// conv: time-axis concat of all temporal maps, one shared standard conv,
    /// relu, then GMP.
    Conv {
        conv: Conv1d<T>,
        relu: Relu<T>,
        pool: GlobalMaxPool<T>,
    },
}

impl<T: Scalar> FusionStage<T> {
    fn build(config: &ModelConfig, rng: &mut Rng) -> Result<Self, ModelError> {
        let temporal = config.temporal_modalities();
        Ok(match config.fusion {
            Fusion::Gmp | Fusion::Gap => FusionStage::Pool {
                pools: temporal
                    .iter()
                    .map(|m| PoolBank::new(config.fusion, &format!("{m}.pool")))
                    .collect(),
            },
            Fusion::Fc => {
                let mut fcs = Vec::new();
                let mut relus = Vec::new();
                for &m in &temporal {
                    let g = config.stream_geom(m).expect("temporal");
                    fcs.push(Dense::new(
                        &format!("fusion.{m}.fc"),
                        g.flat_dim(),
                        FC_FUSION_UNITS,
                        rng,
                    )?);
                    relus.push(Relu::new(&format!("fusion.{m}.relu")));
                }
                FusionStage::Fc { fcs, relus }
            }
            Fusion::Flattened => FusionStage::Flattened,
            Fusion::Conv => {
                let (k, f, stride) = config.conv_fusion();
                let spec = ConvSpec {
                    kernel: k,
                    stride,
                    in_channels: config.vector_units(),
                    out_filters: f,
                    padding: Padding::Same,
                    kind: ConvKind::Standard,
                };
                FusionStage::Conv {
                    conv: Conv1d::new("fusion.conv", spec, rng)?,
                    relu: Relu::new("fusion.relu"),
                    pool: GlobalMaxPool::new("fusion.pool"),
                }
            }
        })
    }

    fn params(&self) -> Vec<&Param<T>> {
        match self {
            FusionStage::Fc { fcs, .. } => fcs.iter().flat_map(|f| f.params()).collect(),
            FusionStage::Conv { conv, .. } => conv.params(),
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            FusionStage::Fc { fcs, .. } => fcs.iter_mut().flat_map(|f| f.params_mut()).collect(),
            FusionStage::Conv { conv, .. } => conv.params_mut(),
            _ => Vec::new(),
        }
    }

    fn layers_mut(&mut self) -> Vec<&mut dyn Layer<T>> {
        match self {
            FusionStage::Pool { pools } => pools.iter_mut().map(|p| p.as_layer_mut()).collect(),
            FusionStage::Fc { fcs, relus } => {
                let mut v: Vec<&mut dyn Layer<T>> = Vec::new();
                for f in fcs {
                    v.push(f);
                }
                for r in relus {
                    v.push(r);
                }
                v
            }
            FusionStage::Flattened => Vec::new(),
            FusionStage::Conv { conv, relu, pool } => vec![conv, relu, pool],
        }
    }
}

#[derive(Debug, Clone)]
struct SharedHead<T: Scalar> {
    fc1: Dense<T>,
    relu1: Relu<T>,
    drop1: Dropout<T>,
    fc2: Dense<T>,
    relu2: Relu<T>,
    drop2: Dropout<T>,
    out: Dense<T>,
}

impl<T: Scalar> SharedHead<T> {
    fn new(
        in_dim: usize,
        units: (usize, usize),
        label_count: usize,
        dropout: f64,
        rng: &mut Rng,
    ) -> Result<Self, ModelError> {
        let (u1, u2) = units;
        Ok(SharedHead {
            fc1: Dense::new("shared.fc1", in_dim, u1, rng)?,
            relu1: Relu::new("shared.relu1"),
            drop1: Dropout::new("shared.drop1", dropout)?,
            fc2: Dense::new("shared.fc2", u1, u2, rng)?,
            relu2: Relu::new("shared.relu2"),
            drop2: Dropout::new("shared.drop2", dropout)?,
            out: Dense::new("shared.out", u2, label_count, rng)?,
        })
    }

    fn forward(
        &mut self,
        x: &Tensor<T>,
        phase: Phase,
        rng: &mut Rng,
        taps: &mut Taps<'_, T>,
    ) -> Result<Tensor<T>, ModelError> {
        let h = self.fc1.forward(x)?;
        let h = self.relu1.forward(&h)?;
        taps.note_rows("shared.fc1", &h);
        let h = self.drop1.forward(&h, phase, rng)?;
        let h = self.fc2.forward(&h)?;
        let h = self.relu2.forward(&h)?;
        taps.note_rows("shared.fc2", &h);
        let h = self.drop2.forward(&h, phase, rng)?;
        let logits = self.out.forward(&h)?;
        taps.note_rows("logits", &logits);
        Ok(logits)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let g = self.out.backward(g)?;
        let g = self.drop2.backward(&g)?;
        let g = self.relu2.backward(&g)?;
        let g = self.fc2.backward(&g)?;
        let g = self.drop1.backward(&g)?;
        let g = self.relu1.backward(&g)?;
        Ok(self.fc1.backward(&g)?)
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.fc1.params();
        v.extend(self.fc2.params());
        v.extend(self.out.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.fc1.params_mut();
        v.extend(self.fc2.params_mut());
        v.extend(self.out.params_mut());
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut dyn Layer<T>> {
        vec![
            &mut self.fc1,
            &mut self.relu1,
            &mut self.drop1,
            &mut self.fc2,
            &mut self.relu2,
            &mut self.drop2,
            &mut self.out,
        ]
    }
}

/// Per-modality tail of the multi-task variant, downstream of the weight
/// shared 1024-unit layer.
#[derive(Debug, Clone)]
struct TaskPath<T: Scalar> {
    relu_shared: Relu<T>,
    drop_shared: Dropout<T>,
    task: Dense<T>,
    relu_task: Relu<T>,
    drop_task: Dropout<T>,
    head: Dense<T>,
}

impl<T: Scalar> TaskPath<T> {
    fn new(
        m: Modality,
        in_dim: usize,
        units: usize,
        label_count: usize,
        dropout: f64,
        rng: &mut Rng,
    ) -> Result<Self, ModelError> {
        Ok(TaskPath {
            relu_shared: Relu::new(&format!("{m}.shared_relu")),
            drop_shared: Dropout::new(&format!("{m}.shared_drop"), dropout)?,
            task: Dense::new(&format!("{m}.task"), in_dim, units, rng)?,
            relu_task: Relu::new(&format!("{m}.task_relu")),
            drop_task: Dropout::new(&format!("{m}.task_drop"), dropout)?,
            head: Dense::new(&format!("{m}.head"), units, label_count, rng)?,
        })
    }

    fn layers_mut(&mut self) -> Vec<&mut dyn Layer<T>> {
        vec![
            &mut self.relu_shared,
            &mut self.drop_shared,
            &mut self.task,
            &mut self.relu_task,
            &mut self.drop_task,
            &mut self.head,
        ]
    }
}

#[derive(Debug, Clone)]
struct MultiHead<T: Scalar> {
    /// One object, forwarded once per modality: the weight-shared layer.
    shared: Dense<T>,
    /// Aligned with the config's modality list.
    paths: Vec<TaskPath<T>>,
}

#[derive(Debug, Clone)]
enum HeadNet<T: Scalar> {
    Single {
        fusion: FusionStage<T>,
        shared: SharedHead<T>,
    },
    Multi {
        pools: Vec<PoolBank<T>>,
        net: MultiHead<T>,
    },
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    seed: u64,
    step: u64,
    encoders: Vec<Encoder<T>>,
    head: HeadNet<T>,
    policy: RegPolicy,
    last_trace: Vec<(String, Vec<usize>)>,
}

impl<T: Scalar> Model<T> {
    /// Builds the configured network with Xavier-initialized parameters.
    /// The same (config, seed) always yields bitwise-identical parameters.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Model<T>, ModelError> {
        let config = config.normalized()?;
        let mut rng = Rng::new(seed);
        let mut encoders = Vec::new();
        for &m in &config.modalities {
            encoders.push(if m.is_temporal() {
                let g = config.stream_geom(m).expect("temporal");
                Encoder::Temporal(TemporalStream::new(m, g, config.conv_kind, &mut rng)?)
            } else {
                Encoder::Vector(VectorStream::new(
                    config.ps_width,
                    config.vector_units(),
                    &mut rng,
                )?)
            });
        }
        let head = if config.multi_task {
            let pools = config
                .temporal_modalities()
                .iter()
                .map(|m| PoolBank::new(config.fusion, &format!("{m}.pool")))
                .collect();
            let shared = Dense::new(
                "shared.fc",
                config.vector_units(),
                config.multi_shared(),
                &mut rng,
            )?;
            let mut paths = Vec::new();
            for &m in &config.modalities {
                paths.push(TaskPath::new(
                    m,
                    config.multi_shared(),
                    config.task_width(m),
                    config.label_count,
                    config.dropout,
                    &mut rng,
                )?);
            }
            HeadNet::Multi {
                pools,
                net: MultiHead { shared, paths },
            }
        } else {
            let fusion = FusionStage::build(&config, &mut rng)?;
            let shared = SharedHead::new(
                config.fused_width(),
                config.shared_widths(),
                config.label_count,
                config.dropout,
                &mut rng,
            )?;
            HeadNet::Single { fusion, shared }
        };
        let policy = RegPolicy::new(config.l1_dense, config.l2_depthwise);
        Ok(Model {
            config,
            seed,
            step: 0,
            encoders,
            head,
            policy,
            last_trace: Vec::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn policy(&self) -> &RegPolicy {
        &self.policy
    }

    /// Shape trace of the most recent forward pass: (tap name, shape) in
    /// execution order. Per-instance stages report single-instance shapes.
    pub fn last_trace(&self) -> &[(String, Vec<usize>)] {
        &self.last_trace
    }

    /// All parameters in the fixed traversal order (encoders in modality
    /// order, fusion stage, then head). Shared parameters appear once.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out: Vec<&Param<T>> = Vec::new();
        for e in &self.encoders {
            out.extend(e.params());
        }
        match &self.head {
            HeadNet::Single { fusion, shared } => {
                out.extend(fusion.params());
                out.extend(shared.params());
            }
            HeadNet::Multi { net, .. } => {
                out.extend(net.shared.params());
                for p in &net.paths {
                    out.extend(p.task.params());
                    out.extend(p.head.params());
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out: Vec<&mut Param<T>> = Vec::new();
        for e in &mut self.encoders {
            out.extend(e.params_mut());
        }
        match &mut self.head {
            HeadNet::Single { fusion, shared } => {
                out.extend(fusion.params_mut());
                out.extend(shared.params_mut());
            }
            HeadNet::Multi { net, .. } => {
                out.extend(net.shared.params_mut());
                for p in &mut net.paths {
                    out.extend(p.task.params_mut());
                    out.extend(p.head.params_mut());
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn all_layers_mut(&mut self) -> Vec<&mut dyn Layer<T>> {
        let mut v: Vec<&mut dyn Layer<T>> = Vec::new();
        for e in &mut self.encoders {
            v.extend(e.layers_mut());
        }
        match &mut self.head {
            HeadNet::Single { fusion, shared } => {
                v.extend(fusion.layers_mut());
                v.extend(shared.layers_mut());
            }
            HeadNet::Multi { pools, net } => {
                for p in pools {
                    v.push(p.as_layer_mut());
                }
                v.push(&mut net.shared);
                for p in &mut net.paths {
                    v.extend(p.layers_mut());
                }
            }
        }
        v
    }

    /// Drops every layer's cached forward intermediates.
    pub fn reset_caches(&mut self) {
        for l in self.all_layers_mut() {
            l.reset_cache();
        }
    }

    /// Single-task forward to logits [B, label_count].
    pub fn forward_logits(
        &mut self,
        batch: &Batch<T>,
        phase: Phase,
        rng: &mut Rng,
    ) -> Result<Tensor<T>, ModelError> {
        let (logits, _) = self.forward_single(batch, phase, rng, None)?;
        Ok(logits)
    }

    /// Single-task forward that also captures the named activation for every
    /// instance in the batch. See `last_trace` for the available names.
    pub fn forward_logits_tapped(
        &mut self,
        batch: &Batch<T>,
        phase: Phase,
        rng: &mut Rng,
        tap: &str,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>), ModelError> {
        let (logits, hits) = self.forward_single(batch, phase, rng, Some(tap))?;
        if hits.is_empty() {
            return Err(ModelError::UnknownTap(tap.to_string()));
        }
        Ok((logits, hits))
    }

    /// Multi-task forward: one logits tensor per modality present in the
    /// batch, in canonical modality order.
    pub fn forward_heads(
        &mut self,
        batch: &Batch<T>,
        phase: Phase,
        rng: &mut Rng,
    ) -> Result<Vec<(Modality, Tensor<T>)>, ModelError> {
        let (heads, _) = self.forward_multi(batch, phase, rng, None)?;
        Ok(heads)
    }

    pub fn forward_heads_tapped(
        &mut self,
        batch: &Batch<T>,
        phase: Phase,
        rng: &mut Rng,
        tap: &str,
    ) -> Result<(Vec<(Modality, Tensor<T>)>, Vec<Tensor<T>>), ModelError> {
        let (heads, hits) = self.forward_multi(batch, phase, rng, Some(tap))?;
        if hits.is_empty() {
            return Err(ModelError::UnknownTap(tap.to_string()));
        }
        Ok((heads, hits))
    }

    /// Probabilities [B, label_count]. Single-task models require the full
    /// configured modality set; multi-task models accept any non-empty
    /// subset and average the available heads.
    pub fn forward(
        &mut self,
        batch: &Batch<T>,
        phase: Phase,
        rng: &mut Rng,
    ) -> Result<Tensor<T>, ModelError> {
        if self.config.multi_task {
            self.predict_missing_with_phase(batch, None, phase, rng)
        } else {
            let logits = self.forward_logits(batch, phase, rng)?;
            Ok(sigmoid(&logits))
        }
    }

    /// Mean of the available heads' probabilities; `weights` (aligned with
    /// the returned head order, i.e. canonical modality order restricted to
    /// the batch) replaces the uniform average with a normalized weighted
    /// one.
    pub fn predict_missing(
        &mut self,
        batch: &Batch<T>,
        weights: Option<&[f64]>,
        rng: &mut Rng,
    ) -> Result<Tensor<T>, ModelError> {
        self.predict_missing_with_phase(batch, weights, Phase::Infer, rng)
    }

    fn predict_missing_with_phase(
        &mut self,
        batch: &Batch<T>,
        weights: Option<&[f64]>,
        phase: Phase,
        rng: &mut Rng,
    ) -> Result<Tensor<T>, ModelError> {
        let heads = {
            let (heads, _) = self.forward_multi(batch, phase, rng, None)?;
            heads
        };
        let w: Vec<f64> = match weights {
            None => vec![1.0; heads.len()],
            Some(w) => {
                if w.len() != heads.len() {
                    return Err(ModelError::Batch(format!(
                        "{} head weights for {} available heads",
                        w.len(),
                        heads.len()
                    )));
                }
                if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(ModelError::Batch(
                        "head weights must be finite and non-negative".into(),
                    ));
                }
                w.to_vec()
            }
        };
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            return Err(ModelError::Batch("head weights sum to zero".into()));
        }
        let mut acc = Tensor::<T>::zeros(heads[0].1.shape());
        for ((_, logits), &wm) in heads.iter().zip(&w) {
            let p = sigmoid(logits);
            let scale = T::from_f64(wm / total);
            for (a, &v) in acc.data_mut().iter_mut().zip(p.data()) {
                *a = *a + v * scale;
            }
        }
        Ok(acc)
    }

    fn forward_single(
        &mut self,
        batch: &Batch<T>,
        phase: Phase,
        rng: &mut Rng,
        want: Option<&str>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>), ModelError> {
        self.reset_caches();
        let Model {
            ref config,
            ref mut encoders,
            ref mut head,
            ..
        } = *self;
        let HeadNet::Single { fusion, shared } = head else {
            return Err(ModelError::Config(
                "multi-task model: use forward_heads / predict_missing".into(),
            ));
        };
        let b = batch.size_for(&config.modalities)?;
        let mut taps = Taps::new(want);

        let mut feats: Vec<Tensor<T>> = Vec::new();
        match fusion {
            FusionStage::Conv { conv, relu, pool } => {
                let mut maps: Vec<Vec<Tensor<T>>> = Vec::new();
                let mut ps_block: Option<Tensor<T>> = None;
                for (enc, &m) in encoders.iter_mut().zip(&config.modalities) {
                    match enc {
                        Encoder::Temporal(s) => {
                            let mut v = Vec::with_capacity(b);
                            for i in 0..b {
                                v.push(s.forward_map(&batch.modality(m)[i], &mut taps, i == 0)?);
                            }
                            maps.push(v);
                        }
                        Encoder::Vector(vs) => {
                            let x = stack_rows(batch.modality(m))?;
                            let f = vs.forward(&x)?;
                            taps.note_rows(&format!("{m}.feat"), &f);
                            ps_block = Some(f);
                        }
                    }
                }
                let mut rows = Vec::with_capacity(b);
                for i in 0..b {
                    let parts: Vec<&Tensor<T>> = maps.iter().map(|v| &v[i]).collect();
                    let cat = concat(&parts, 0)?;
                    taps.note("fusion.concat", &cat, i == 0);
                    let c = conv.forward(&cat)?;
                    let r = relu.forward(&c)?;
                    taps.note("fusion.conv", &r, i == 0);
                    let p = pool.forward(&r)?;
                    taps.note("fusion.feat", &p, i == 0);
                    rows.push(p);
                }
                feats.push(stack_rows(&rows)?);
                if let Some(psb) = ps_block {
                    feats.push(psb);
                }
            }
            _ => {
                let mut ti = 0usize;
                for (enc, &m) in encoders.iter_mut().zip(&config.modalities) {
                    match enc {
                        Encoder::Temporal(s) => {
                            let block = match fusion {
                                FusionStage::Pool { pools } => {
                                    let mut rows = Vec::with_capacity(b);
                                    for i in 0..b {
                                        let map =
                                            s.forward_map(&batch.modality(m)[i], &mut taps, i == 0)?;
                                        rows.push(pools[ti].forward(&map)?);
                                    }
                                    stack_rows(&rows)?
                                }
                                FusionStage::Fc { fcs, relus } => {
                                    let mut rows = Vec::with_capacity(b);
                                    for i in 0..b {
                                        let map =
                                            s.forward_map(&batch.modality(m)[i], &mut taps, i == 0)?;
                                        rows.push(crate::layers::flatten(&map));
                                    }
                                    let flat = stack_rows(&rows)?;
                                    let z = fcs[ti].forward(&flat)?;
                                    relus[ti].forward(&z)?
                                }
                                FusionStage::Flattened => {
                                    let mut rows = Vec::with_capacity(b);
                                    for i in 0..b {
                                        let map =
                                            s.forward_map(&batch.modality(m)[i], &mut taps, i == 0)?;
                                        rows.push(crate::layers::flatten(&map));
                                    }
                                    stack_rows(&rows)?
                                }
                                FusionStage::Conv { .. } => unreachable!(),
                            };
                            taps.note_rows(&format!("{m}.feat"), &block);
                            feats.push(block);
                            ti += 1;
                        }
                        Encoder::Vector(vs) => {
                            let x = stack_rows(batch.modality(m))?;
                            let f = vs.forward(&x)?;
                            taps.note_rows(&format!("{m}.feat"), &f);
                            feats.push(f);
                        }
                    }
                }
            }
        }

        let parts: Vec<&Tensor<T>> = feats.iter().collect();
        let fused = concat(&parts, 1)?;
        taps.note_rows("fused", &fused);
        let logits = shared.forward(&fused, phase, rng, &mut taps)?;
        taps.note_rows("probs", &sigmoid(&logits));
        self.last_trace = std::mem::take(&mut taps.trace);
        Ok((logits, taps.hits))
    }

    /// Single-task backward from d(loss)/d(logits); parameter gradients
    /// accumulate. Must follow its matching train-phase forward.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<(), ModelError> {
        let Model {
            ref config,
            ref mut encoders,
            ref mut head,
            ..
        } = *self;
        let HeadNet::Single { fusion, shared } = head else {
            return Err(ModelError::Config(
                "multi-task model: use backward_heads".into(),
            ));
        };
        let g_fused = shared.backward(grad_logits)?;
        let b = g_fused.dim(0);
        match fusion {
            FusionStage::Conv { conv, relu, pool } => {
                let ps_present = config.modalities.contains(&Modality::Ps);
                let vu = config.vector_units();
                let widths = if ps_present { vec![vu, vu] } else { vec![vu] };
                let blocks = split(&g_fused, 1, &widths)?;
                if ps_present {
                    let pos = config
                        .modalities
                        .iter()
                        .position(|&m| m == Modality::Ps)
                        .expect("ps present");
                    let Encoder::Vector(vs) = &mut encoders[pos] else {
                        unreachable!()
                    };
                    vs.backward(&blocks[1])?;
                }
                let temporal = config.temporal_modalities();
                let segs: Vec<usize> = temporal
                    .iter()
                    .map(|&m| config.stream_geom(m).expect("temporal").l2())
                    .collect();
                for i in (0..b).rev() {
                    let g = row(&blocks[0], i);
                    let g = pool.backward(&g)?;
                    let g = relu.backward(&g)?;
                    let g = conv.backward(&g)?;
                    let parts = split(&g, 0, &segs)?;
                    // Temporal encoders pushed instance i in forward; popping
                    // here in descending i keeps every stack LIFO.
                    let mut ti = temporal.len();
                    for (enc, &m) in encoders.iter_mut().zip(&config.modalities).rev() {
                        if let Encoder::Temporal(s) = enc {
                            let _ = m;
                            ti -= 1;
                            s.backward_map(&parts[ti])?;
                        }
                    }
                }
            }
            _ => {
                let widths: Vec<usize> = config
                    .modalities
                    .iter()
                    .map(|&m| config.feature_width(m))
                    .collect();
                let blocks = split(&g_fused, 1, &widths)?;
                let n_temporal = config.temporal_modalities().len();
                let mut ti = n_temporal;
                for (pos, &m) in config.modalities.iter().enumerate().rev() {
                    let block = &blocks[pos];
                    match &mut encoders[pos] {
                        Encoder::Vector(vs) => {
                            vs.backward(block)?;
                        }
                        Encoder::Temporal(s) => {
                            ti -= 1;
                            match fusion {
                                FusionStage::Pool { pools } => {
                                    for i in (0..b).rev() {
                                        let g = row(block, i);
                                        let g = pools[ti].backward(&g)?;
                                        s.backward_map(&g)?;
                                    }
                                }
                                FusionStage::Fc { fcs, relus } => {
                                    let g = relus[ti].backward(block)?;
                                    let g = fcs[ti].backward(&g)?;
                                    let geom = config.stream_geom(m).expect("temporal");
                                    for i in (0..b).rev() {
                                        let map =
                                            row(&g, i).reshape(&[geom.l2(), geom.f2])?;
                                        s.backward_map(&map)?;
                                    }
                                }
                                FusionStage::Flattened => {
                                    let geom = config.stream_geom(m).expect("temporal");
                                    for i in (0..b).rev() {
                                        let map =
                                            row(block, i).reshape(&[geom.l2(), geom.f2])?;
                                        s.backward_map(&map)?;
                                    }
                                }
                                FusionStage::Conv { .. } => unreachable!(),
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn forward_multi(
        &mut self,
        batch: &Batch<T>,
        phase: Phase,
        rng: &mut Rng,
        want: Option<&str>,
    ) -> Result<(Vec<(Modality, Tensor<T>)>, Vec<Tensor<T>>), ModelError> {
        self.reset_caches();
        let Model {
            ref config,
            ref mut encoders,
            ref mut head,
            ..
        } = *self;
        let HeadNet::Multi { pools, net } = head else {
            return Err(ModelError::Config(
                "single-task model: use forward_logits".into(),
            ));
        };
        let present: Vec<Modality> = config
            .modalities
            .iter()
            .copied()
            .filter(|&m| !batch.modality(m).is_empty())
            .collect();
        if present.is_empty() {
            return Err(ModelError::Batch(
                "no configured modality present in batch".into(),
            ));
        }
        let b = batch.size_for(&present)?;
        let mut taps = Taps::new(want);
        let mut heads = Vec::with_capacity(present.len());
        let mut ti = 0usize;
        for (pos, &m) in config.modalities.iter().enumerate() {
            let is_present = !batch.modality(m).is_empty();
            let feat = match &mut encoders[pos] {
                Encoder::Temporal(s) => {
                    let slot = ti;
                    ti += 1;
                    if !is_present {
                        continue;
                    }
                    let mut rows = Vec::with_capacity(b);
                    for i in 0..b {
                        let map = s.forward_map(&batch.modality(m)[i], &mut taps, i == 0)?;
                        rows.push(pools[slot].forward(&map)?);
                    }
                    stack_rows(&rows)?
                }
                Encoder::Vector(vs) => {
                    if !is_present {
                        continue;
                    }
                    vs.forward(&stack_rows(batch.modality(m))?)?
                }
            };
            taps.note_rows(&format!("{m}.feat"), &feat);
            let h = net.shared.forward(&feat)?;
            let path = &mut net.paths[pos];
            let h = path.relu_shared.forward(&h)?;
            taps.note_rows(&format!("{m}.shared"), &h);
            let h = path.drop_shared.forward(&h, phase, rng)?;
            let t = path.task.forward(&h)?;
            let t = path.relu_task.forward(&t)?;
            taps.note_rows(&format!("{m}.task"), &t);
            let t = path.drop_task.forward(&t, phase, rng)?;
            let logits = path.head.forward(&t)?;
            taps.note_rows(&format!("{m}.logits"), &logits);
            taps.note_rows(&format!("{m}.probs"), &sigmoid(&logits));
            heads.push((m, logits));
        }
        self.last_trace = std::mem::take(&mut taps.trace);
        Ok((heads, taps.hits))
    }

    /// Multi-task backward: `grads` must pair each head returned by the
    /// matching forward with d(loss)/d(logits), in the same order.
    pub fn backward_heads(
        &mut self,
        grads: &[(Modality, Tensor<T>)],
    ) -> Result<(), ModelError> {
        let Model {
            ref config,
            ref mut encoders,
            ref mut head,
            ..
        } = *self;
        let HeadNet::Multi { pools, net } = head else {
            return Err(ModelError::Config(
                "single-task model: use backward".into(),
            ));
        };
        let temporal = config.temporal_modalities();
        for (m, g) in grads.iter().rev() {
            let pos = config
                .modalities
                .iter()
                .position(|x| x == m)
                .ok_or_else(|| ModelError::Batch(format!("modality {m} not in model")))?;
            let path = &mut net.paths[pos];
            let g = path.head.backward(g)?;
            let g = path.drop_task.backward(&g)?;
            let g = path.relu_task.backward(&g)?;
            let g = path.task.backward(&g)?;
            let g = path.drop_shared.backward(&g)?;
            let g = path.relu_shared.backward(&g)?;
            let g = net.shared.backward(&g)?;
            let b = g.dim(0);
            match &mut encoders[pos] {
                Encoder::Vector(vs) => {
                    vs.backward(&g)?;
                }
                Encoder::Temporal(s) => {
                    let ti = temporal
                        .iter()
                        .position(|x| x == m)
                        .expect("temporal modality");
                    for i in (0..b).rev() {
                        let r = row(&g, i);
                        let p = pools[ti].backward(&r)?;
                        s.backward_map(&p)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Sum of the per-head instance-weighted masked losses plus the
    /// regularization penalty. Regularization gradients are added to the
    /// parameter gradients here; pass the returned per-head gradients to
    /// `backward_heads` to complete the backward pass.
    pub fn multitask_loss(
        &mut self,
        heads: &[(Modality, Tensor<T>)],
        labels: &LabelMatrix,
        psi: &WeightMatrix,
    ) -> Result<(f64, Vec<(Modality, Tensor<T>)>), ModelError> {
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(heads.len());
        for (m, logits) in heads {
            let (loss, grad) = weighted_masked_bce_from_logits(logits, labels, psi)?;
            total += loss;
            grads.push((*m, grad));
        }
        total += self.apply_reg();
        Ok((total, grads))
    }

    /// Current regularization penalty, without touching gradients.
    pub fn reg_value(&self) -> f64 {
        regularization_value(&self.params(), &self.policy)
    }

    /// Adds regularization gradients to the parameter gradients and returns
    /// the penalty value.
    pub fn apply_reg(&mut self) -> f64 {
        let policy = self.policy;
        let mut params = self.params_mut();
        regularization_penalty(&mut params, &policy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{dps_conv_param_count, standard_conv_param_count};
    use crate::model::stream_geometry;
    use crate::objective::compute_instance_weights;

    fn tiny_batch<S: Scalar>(config: &ModelConfig, b: usize, seed: u64) -> Batch<S> {
        let mut rng = Rng::new(seed);
        let mut batch = Batch::new();
        for &m in &config.modalities {
            let v = batch.modality_mut(m);
            for _ in 0..b {
                let t = match stream_geometry(m) {
                    Some(g) => {
                        let mut t = Tensor::zeros(&[g.input_len, g.input_ch]);
                        for x in t.data_mut() {
                            *x = S::from_f64(rng.gaussian());
                        }
                        t
                    }
                    None => {
                        let mut t = Tensor::zeros(&[config.ps_width]);
                        for x in t.data_mut() {
                            *x = S::from_f64(if rng.next_f64() < 0.5 { 0.0 } else { 1.0 });
                        }
                        t
                    }
                };
                v.push(t);
            }
        }
        batch
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            ps_width: 8,
            label_count: 7,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn build_is_deterministic() {
        let config = small_config();
        let a: Model<f32> = Model::build(&config, 11).unwrap();
        let b: Model<f32> = Model::build(&config, 11).unwrap();
        let (pa, pb) = (a.params(), b.params());
        assert_eq!(pa.len(), pb.len());
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(x.name, y.name);
            assert!(x.value.bits_eq(&y.value), "param {} differs", x.name);
        }
        let c: Model<f32> = Model::build(&config, 12).unwrap();
        let changed = a
            .params()
            .iter()
            .zip(c.params())
            .any(|(x, y)| !x.value.bits_eq(&y.value));
        assert!(changed, "different seed should change parameters");
    }

    #[test]
    fn default_gmp_shapes_walk_the_contract() {
        let config = small_config();
        let mut m: Model<f64> = Model::build(&config, 3).unwrap();
        let batch = tiny_batch(&config, 2, 1);
        let mut rng = Rng::new(9);
        let logits = m.forward_logits(&batch, Phase::Infer, &mut rng).unwrap();
        assert_eq!(logits.shape(), [2, 7]);
        let trace = m.last_trace().to_vec();
        let find = |name: &str| -> Vec<usize> {
            trace
                .iter()
                .find(|(n, _)| n == name)
                .unwrap_or_else(|| panic!("{name} missing from trace"))
                .1
                .clone()
        };
        assert_eq!(find("acc.conv1"), vec![400, 32]);
        assert_eq!(find("acc.conv2"), vec![200, 64]);
        assert_eq!(find("gyro.conv2"), vec![200, 64]);
        assert_eq!(find("aud.conv1"), vec![210, 32]);
        assert_eq!(find("aud.conv2"), vec![105, 64]);
        assert_eq!(find("acc.feat"), vec![2, 64]);
        assert_eq!(find("ps.feat"), vec![2, 64]);
        assert_eq!(find("fused"), vec![2, 256]);
        assert_eq!(find("shared.fc1"), vec![2, 2048]);
        assert_eq!(find("shared.fc2"), vec![2, 1024]);
        assert_eq!(find("logits"), vec![2, 7]);
    }

    #[test]
    fn probabilities_are_in_open_unit_interval() {
        let config = small_config();
        let mut m: Model<f32> = Model::build(&config, 5).unwrap();
        let batch = tiny_batch(&config, 3, 2);
        let mut rng = Rng::new(0);
        let p = m.forward(&batch, Phase::Infer, &mut rng).unwrap();
        assert_eq!(p.shape(), [3, 7]);
        for &v in p.data() {
            assert!(v > 0.0 && v < 1.0, "probability out of range: {v}");
        }
    }

    #[test]
    fn zero_parameters_give_half_everywhere() {
        let config = small_config();
        let mut m: Model<f64> = Model::build(&config, 5).unwrap();
        for p in m.params_mut() {
            p.value.fill(0.0);
        }
        let batch = tiny_batch(&config, 2, 3);
        let mut rng = Rng::new(0);
        let p = m.forward(&batch, Phase::Infer, &mut rng).unwrap();
        for &v in p.data() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn infer_mode_is_deterministic() {
        let config = small_config();
        let mut m: Model<f32> = Model::build(&config, 5).unwrap();
        let batch = tiny_batch(&config, 2, 3);
        let mut rng = Rng::new(0);
        let a = m.forward(&batch, Phase::Infer, &mut rng).unwrap();
        let b = m.forward(&batch, Phase::Infer, &mut rng).unwrap();
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn missing_modality_is_reported() {
        let config = small_config();
        let mut m: Model<f32> = Model::build(&config, 5).unwrap();
        let mut batch = tiny_batch(&config, 2, 3);
        batch.gyro.clear();
        let mut rng = Rng::new(0);
        let err = m.forward(&batch, Phase::Infer, &mut rng).unwrap_err();
        assert!(matches!(err, ModelError::Batch(_)));
        assert!(err.to_string().contains("gyro"));
    }

    #[test]
    fn ps_only_model_degenerates_to_mlp() {
        let config = ModelConfig {
            modalities: vec![Modality::Ps],
            ps_width: 8,
            label_count: 7,
            ..ModelConfig::default()
        };
        let mut m: Model<f64> = Model::build(&config, 2).unwrap();
        assert_eq!(
            m.param_count(),
            8 * 64 + 64 + 64 * 2048 + 2048 + 2048 * 1024 + 1024 + 1024 * 7 + 7
        );
        let batch = tiny_batch(&config, 2, 3);
        let mut rng = Rng::new(0);
        let p = m.forward(&batch, Phase::Infer, &mut rng).unwrap();
        assert_eq!(p.shape(), [2, 7]);
    }

    #[test]
    fn conv_kind_changes_count_not_shapes() {
        let base = small_config();
        let std_config = ModelConfig {
            conv_kind: ConvChoice::Standard,
            ..base.clone()
        };
        let mut a: Model<f64> = Model::build(&base, 7).unwrap();
        let mut b: Model<f64> = Model::build(&std_config, 7).unwrap();
        assert!(b.param_count() > a.param_count());
        let batch = tiny_batch(&base, 2, 4);
        let mut rng = Rng::new(0);
        a.forward_logits(&batch, Phase::Infer, &mut rng).unwrap();
        let trace_a = a.last_trace().to_vec();
        b.forward_logits(&batch, Phase::Infer, &mut rng).unwrap();
        let trace_b = b.last_trace().to_vec();
        assert_eq!(trace_a, trace_b);

        // The stream-level difference matches the closed forms.
        let acc = stream_geometry(Modality::Acc).unwrap();
        let per_stream_delta = standard_conv_param_count(acc.k1, acc.input_ch, acc.f1)
            + standard_conv_param_count(acc.k2, acc.f1, acc.f2)
            - dps_conv_param_count(acc.k1, acc.input_ch, acc.f1)
            - dps_conv_param_count(acc.k2, acc.f1, acc.f2);
        let aud = stream_geometry(Modality::Aud).unwrap();
        let aud_delta = standard_conv_param_count(aud.k1, aud.input_ch, aud.f1)
            + standard_conv_param_count(aud.k2, aud.f1, aud.f2)
            - dps_conv_param_count(aud.k1, aud.input_ch, aud.f1)
            - dps_conv_param_count(aud.k2, aud.f1, aud.f2);
        assert_eq!(
            b.param_count() - a.param_count(),
            2 * per_stream_delta + aud_delta
        );
    }

    #[test]
    fn gap_equals_gmp_on_time_constant_streams() {
        // Zero windows with zero-initialized biases give exactly
        // time-constant (all-zero) conv maps, where max and average pooling
        // coincide; same-padding border effects otherwise break exact
        // equality for kernels wider than 1.
        let config = ModelConfig {
            modalities: vec![Modality::Acc, Modality::Ps],
            ps_width: 8,
            label_count: 7,
            ..ModelConfig::default()
        };
        let gap_config = ModelConfig {
            fusion: Fusion::Gap,
            ..config.clone()
        };
        let mut gmp: Model<f64> = Model::build(&config, 31).unwrap();
        let mut gap: Model<f64> = Model::build(&gap_config, 31).unwrap();
        // Zero inputs + nonzero conv biases give exactly time-constant maps.
        let mut batch = Batch::new();
        batch.acc.push(Tensor::zeros(&[800, 3]));
        batch.ps.push(Tensor::filled(&[8], 1.0));
        let mut rng = Rng::new(0);
        let a = gmp.forward(&batch, Phase::Infer, &mut rng).unwrap();
        let b = gap.forward(&batch, Phase::Infer, &mut rng).unwrap();
        // Same seed -> same parameters; pooled values agree on constants.
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn every_fusion_mode_runs_and_has_the_declared_width() {
        let mut rng = Rng::new(0);
        for fusion in [
            Fusion::Gmp,
            Fusion::Gap,
            Fusion::Fc,
            Fusion::Flattened,
            Fusion::Conv,
        ] {
            let config = ModelConfig {
                fusion,
                ps_width: 8,
                label_count: 7,
                ..ModelConfig::default()
            };
            let mut m: Model<f32> = Model::build(&config, 9).unwrap();
            let batch = tiny_batch(&config, 2, 5);
            let logits = m.forward_logits(&batch, Phase::Infer, &mut rng).unwrap();
            assert_eq!(logits.shape(), [2, 7]);
            let fused = m
                .last_trace()
                .iter()
                .find(|(n, _)| n == "fused")
                .unwrap()
                .1
                .clone();
            assert_eq!(fused, vec![2, config.fused_width()], "fusion {fusion:?}");
            if fusion == Fusion::Conv {
                let cat = m
                    .last_trace()
                    .iter()
                    .find(|(n, _)| n == "fusion.concat")
                    .unwrap()
                    .1
                    .clone();
                assert_eq!(cat, vec![200 + 200 + 105, 64]);
            }
        }
    }

    #[test]
    fn train_backward_accumulates_gradients_everywhere() {
        let config = ModelConfig {
            ps_width: 8,
            label_count: 7,
            dropout: 0.0, // keep every unit alive so all gradients are nonzero
            ..ModelConfig::default()
        };
        let mut m: Model<f64> = Model::build(&config, 21).unwrap();
        let batch = tiny_batch(&config, 3, 6);
        let labels = {
            let mut l = LabelMatrix::new(3, 7);
            let mut r = Rng::new(77);
            for i in 0..3 {
                for j in 0..7 {
                    l.set(i, j, Some(r.next_f64() < 0.5));
                }
            }
            l
        };
        let psi = compute_instance_weights(&labels).unwrap();
        let mut rng = Rng::new(1);
        m.zero_grads();
        let logits = m.forward_logits(&batch, Phase::Train, &mut rng).unwrap();
        let (loss, grad) = weighted_masked_bce_from_logits(&logits, &labels, &psi).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        m.backward(&grad).unwrap();
        for p in m.params() {
            let nonzero = p.grad.data().iter().any(|&g| g != 0.0);
            assert!(nonzero, "no gradient reached {}", p.name);
        }
    }

    #[test]
    fn multitask_heads_and_sharing() {
        let config = ModelConfig {
            multi_task: true,
            ps_width: 8,
            label_count: 7,
            ..ModelConfig::default()
        };
        let mut m: Model<f64> = Model::build(&config, 13).unwrap();

        // Parameter count: stream encoders + shared 64->1024 + per-modality
        // task/head stacks, shared counted once.
        let acc = stream_geometry(Modality::Acc).unwrap();
        let aud = stream_geometry(Modality::Aud).unwrap();
        let enc = 2 * (dps_conv_param_count(acc.k1, acc.input_ch, acc.f1)
            + dps_conv_param_count(acc.k2, acc.f1, acc.f2))
            + dps_conv_param_count(aud.k1, aud.input_ch, aud.f1)
            + dps_conv_param_count(aud.k2, aud.f1, aud.f2)
            + (8 * 64 + 64);
        let shared = 64 * 1024 + 1024;
        let temporal_tail = 1024 * 128 + 128 + 128 * 7 + 7;
        let ps_tail = 1024 * 64 + 64 + 64 * 7 + 7;
        assert_eq!(
            m.param_count(),
            enc + shared + 3 * temporal_tail + ps_tail
        );

        let batch = tiny_batch(&config, 2, 8);
        let mut rng = Rng::new(2);
        let heads = m.forward_heads(&batch, Phase::Infer, &mut rng).unwrap();
        assert_eq!(heads.len(), 4);
        for (_, logits) in &heads {
            assert_eq!(logits.shape(), [2, 7]);
        }

        // Nudging the shared weight moves every head's output.
        let before: Vec<Tensor<f64>> = heads.iter().map(|(_, l)| l.clone()).collect();
        for p in m.params_mut() {
            if p.name == "shared.fc.w" {
                for v in p.value.data_mut() {
                    *v += 0.05;
                }
            }
        }
        let after = m.forward_heads(&batch, Phase::Infer, &mut rng).unwrap();
        for ((_, a), b) in after.iter().zip(&before) {
            assert!(!a.bits_eq(b), "head unaffected by shared-weight change");
        }
    }

    #[test]
    fn reduced_width_models_train_end_to_end() {
        let config = ModelConfig {
            label_count: 8,
            ps_width: 8,
            filters: Some([8, 16]),
            shared_units: Some([128, 64]),
            ..ModelConfig::default()
        };
        let mut m: Model<f64> = Model::build(&config, 11).unwrap();
        let mut seen = 0;
        for p in m.params() {
            let want: &[usize] = match p.name.as_str() {
                "shared.fc1.w" => &[4 * 16, 128],
                "shared.fc2.w" => &[128, 64],
                "shared.out.w" => &[64, 8],
                "ps.fc.w" => &[8, 16],
                "acc.conv1.pw" => &[3, 8],
                "acc.conv2.pw" => &[8, 16],
                _ => continue,
            };
            assert_eq!(p.value.shape(), want, "{}", p.name);
            seen += 1;
        }
        assert_eq!(seen, 6);
        let batch = tiny_batch(&config, 2, 6);
        let labels = {
            let mut l = LabelMatrix::new(2, 8);
            for i in 0..2 {
                for j in 0..8 {
                    l.set(i, j, Some((i + j) % 2 == 0));
                }
            }
            l
        };
        let psi = WeightMatrix::uniform(&labels);
        let mut rng = Rng::new(1);
        m.zero_grads();
        let logits = m.forward_logits(&batch, Phase::Train, &mut rng).unwrap();
        assert_eq!(logits.shape(), [2, 8]);
        let (loss, grad) = weighted_masked_bce_from_logits(&logits, &labels, &psi).unwrap();
        assert!(loss.is_finite());
        m.backward(&grad).unwrap();
        for p in m.params() {
            assert!(
                p.grad.data().iter().any(|&g| g != 0.0),
                "no gradient reached {}",
                p.name
            );
        }

        let mt = ModelConfig {
            multi_task: true,
            label_count: 8,
            ps_width: 8,
            filters: Some([8, 16]),
            multi_shared_units: Some(32),
            task_units: Some([24, 12]),
            ..ModelConfig::default()
        };
        let mut m: Model<f64> = Model::build(&mt, 12).unwrap();
        let mut seen = 0;
        for p in m.params() {
            let want: &[usize] = match p.name.as_str() {
                "shared.fc.w" => &[16, 32],
                "acc.task.w" => &[32, 24],
                "ps.task.w" => &[32, 12],
                "ps.head.w" => &[12, 8],
                _ => continue,
            };
            assert_eq!(p.value.shape(), want, "{}", p.name);
            seen += 1;
        }
        assert_eq!(seen, 4);
        let batch = tiny_batch(&mt, 2, 7);
        let heads = m.forward_heads(&batch, Phase::Infer, &mut rng).unwrap();
        assert_eq!(heads.len(), 4);
        for (_, logits) in &heads {
            assert_eq!(logits.shape(), [2, 8]);
        }
    }

    #[test]
    fn multitask_loss_is_additive_over_heads() {
        let config = ModelConfig {
            multi_task: true,
            modalities: vec![Modality::Acc, Modality::Gyro],
            label_count: 5,
            l1_dense: 0.0,
            l2_depthwise: 0.0,
            ..ModelConfig::default()
        };
        let mut m: Model<f64> = Model::build(&config, 4).unwrap();
        let batch = tiny_batch(&config, 2, 9);
        let labels = {
            let mut l = LabelMatrix::new(2, 5);
            for i in 0..2 {
                for j in 0..5 {
                    l.set(i, j, Some((i + j) % 2 == 0));
                }
            }
            l
        };
        let psi = WeightMatrix::uniform(&labels);
        let mut rng = Rng::new(3);
        let heads = m.forward_heads(&batch, Phase::Infer, &mut rng).unwrap();
        let (total, grads) = m.multitask_loss(&heads, &labels, &psi).unwrap();
        let mut sum = 0.0;
        for (_, logits) in &heads {
            let (l, _) = weighted_masked_bce_from_logits(logits, &labels, &psi).unwrap();
            sum += l;
        }
        assert!((total - sum).abs() < 1e-12);
        assert_eq!(grads.len(), 2);

        // Identical inputs on both streams with identical labels: the data
        // term is exactly twice the single-head loss of either head only if
        // the heads coincide, which they do not (independent init); additivity
        // above is the contract.
    }

    #[test]
    fn predict_missing_subsets_and_averaging() {
        let config = ModelConfig {
            multi_task: true,
            ps_width: 8,
            label_count: 7,
            ..ModelConfig::default()
        };
        let mut m: Model<f64> = Model::build(&config, 17).unwrap();
        let full = tiny_batch(&config, 2, 10);
        let mut rng = Rng::new(4);

        // All 15 non-empty subsets produce valid probabilities.
        let mods = Modality::ALL;
        for mask in 1u32..16 {
            let mut batch = Batch::new();
            for (bit, &m0) in mods.iter().enumerate() {
                if mask & (1 << bit) != 0 {
                    *batch.modality_mut(m0) = full.modality(m0).to_vec();
                }
            }
            let p = m.predict_missing(&batch, None, &mut rng).unwrap();
            assert_eq!(p.shape(), [2, 7]);
            for &v in p.data() {
                assert!(v > 0.0 && v < 1.0);
            }
        }

        // Singleton equals that head's sigmoid output exactly.
        let mut acc_only = Batch::new();
        acc_only.acc = full.acc.clone();
        let p1 = m.predict_missing(&acc_only, None, &mut rng).unwrap();
        let heads = m.forward_heads(&acc_only, Phase::Infer, &mut rng).unwrap();
        assert_eq!(heads.len(), 1);
        let direct = sigmoid(&heads[0].1);
        for (a, b) in p1.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-15);
        }

        // Two heads -> elementwise mean.
        let mut two = Batch::new();
        two.acc = full.acc.clone();
        two.gyro = full.gyro.clone();
        let p2 = m.predict_missing(&two, None, &mut rng).unwrap();
        let heads = m.forward_heads(&two, Phase::Infer, &mut rng).unwrap();
        let (pa, pb) = (sigmoid(&heads[0].1), sigmoid(&heads[1].1));
        for ((x, a), b) in p2.data().iter().zip(pa.data()).zip(pb.data()) {
            assert!((x - (a + b) / 2.0).abs() < 1e-15);
        }

        // Weighted average with weight 0 on one head equals the other head.
        let pw = m
            .predict_missing(&two, Some(&[1.0, 0.0]), &mut rng)
            .unwrap();
        for (x, a) in pw.data().iter().zip(pa.data()) {
            assert!((x - a).abs() < 1e-15);
        }
        assert!(m.predict_missing(&two, Some(&[0.0, 0.0]), &mut rng).is_err());
        assert!(m.predict_missing(&two, Some(&[1.0]), &mut rng).is_err());
    }

    #[test]
    fn multitask_backward_reaches_shared_and_streams() {
        let config = ModelConfig {
            multi_task: true,
            ps_width: 8,
            label_count: 5,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        let mut m: Model<f64> = Model::build(&config, 23).unwrap();
        let batch = tiny_batch(&config, 2, 11);
        let labels = {
            let mut l = LabelMatrix::new(2, 5);
            for i in 0..2 {
                for j in 0..5 {
                    l.set(i, j, Some((i * 3 + j) % 2 == 1));
                }
            }
            l
        };
        let psi = compute_instance_weights(&labels).unwrap();
        let mut rng = Rng::new(5);
        m.zero_grads();
        let heads = m.forward_heads(&batch, Phase::Train, &mut rng).unwrap();
        let (_, grads) = m.multitask_loss(&heads, &labels, &psi).unwrap();
        m.backward_heads(&grads).unwrap();
        for p in m.params() {
            let nonzero = p.grad.data().iter().any(|&g| g != 0.0);
            assert!(nonzero, "no gradient reached {}", p.name);
        }
    }

    #[test]
    fn tap_unknown_name_errors_and_known_name_hits() {
        let config = small_config();
        let mut m: Model<f32> = Model::build(&config, 5).unwrap();
        let batch = tiny_batch(&config, 2, 3);
        let mut rng = Rng::new(0);
        let err = m
            .forward_logits_tapped(&batch, Phase::Infer, &mut rng, "nope")
            .unwrap_err();
        assert!(matches!(err, ModelError::UnknownTap(_)));
        let (_, hits) = m
            .forward_logits_tapped(&batch, Phase::Infer, &mut rng, "shared.fc2")
            .unwrap();
        assert_eq!(hits.len(), 2);
        assert_eq!(hits[0].shape(), [1024]);
        let (_, maps) = m
            .forward_logits_tapped(&batch, Phase::Infer, &mut rng, "acc.conv2")
            .unwrap();
        assert_eq!(maps.len(), 2);
        assert_eq!(maps[0].shape(), [200, 64]);
    }
}
