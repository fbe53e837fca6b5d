//! Finite-difference gradient checking.
//!
//! A [`GradTarget`] exposes a flat coordinate space (parameters, and for the
//! per-layer probes the input too) plus a deterministic scalar loss. The
//! checker compares analytic gradients against central differences
//! (f(x+h) - f(x-h)) / 2h on sampled coordinates.

use super::{
    concat, split, ConvKind, ConvSpec, Conv1d, Dense, DepthwiseConv1d, Dropout, GlobalAvgPool,
    GlobalMaxPool, Layer, LayerError, Padding, Phase, PointwiseConv1d, Relu, Sigmoid,
    DpsConv1d,
};
use crate::tensor::{Rng, Tensor};
use std::fmt;

/// Outcome of one gradient check run.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub checked: usize,
    pub skipped: usize,
    pub h: f64,
    pub tol: f64,
    pub max_rel_err: f64,
    /// Coordinate with the worst relative error, as "span[offset]".
    pub worst: Option<String>,
    /// Worst relative error seen per sampled span.
    pub per_param: Vec<(String, f64)>,
    pub pass: bool,
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} checked={} skipped={} max_rel_err={:.3e} tol={:.0e}{}",
            if self.pass { "pass" } else { "FAIL" },
            self.checked,
            self.skipped,
            self.max_rel_err,
            self.tol,
            match &self.worst {
                Some(w) => format!(" worst={w}"),
                None => String::new(),
            }
        )
    }
}

/// Anything the finite-difference checker can probe.
pub trait GradTarget {
    /// Named, ordered coordinate spans; the flat coordinate space is their
    /// concatenation.
    fn spans(&self) -> Vec<(String, usize)>;
    fn get_coord(&self, i: usize) -> f64;
    fn set_coord(&mut self, i: usize, v: f64);
    /// Deterministic scalar loss at the current coordinates. Any stochastic
    /// component (dropout) must be replayed identically on every call.
    fn eval_loss(&mut self) -> Result<f64, LayerError>;
    /// Loss gradient for every coordinate, evaluated analytically.
    fn eval_grad(&mut self) -> Result<Vec<f64>, LayerError>;
    /// Coordinates to skip, e.g. inputs sitting exactly on a relu kink.
    fn exclude(&self, i: usize) -> bool {
        let _ = i;
        false
    }
}

/// Checks analytic gradients of `target` against central differences on up to
/// `samples` distinct coordinates. Relative error uses the denominator
/// max(|analytic|, |numeric|, 1e-8).
pub fn check_gradients(
    target: &mut dyn GradTarget,
    rng: &mut Rng,
    h: f64,
    tol: f64,
    samples: usize,
) -> Result<GradReport, LayerError> {
    let spans = target.spans();
    let n: usize = spans.iter().map(|(_, l)| l).sum();
    if n == 0 {
        return Err(LayerError::Spec("gradient check target has no coordinates".into()));
    }
    let analytic = target.eval_grad()?;
    if analytic.len() != n {
        return Err(LayerError::GradCheck(format!(
            "target returned {} gradients for {} coordinates",
            analytic.len(),
            n
        )));
    }
    let k = samples.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.index(n - i);
        order.swap(i, j);
    }

    let locate = |i: usize| -> (usize, usize) {
        let mut off = i;
        for (si, (_, len)) in spans.iter().enumerate() {
            if off < *len {
                return (si, off);
            }
            off -= len;
        }
        unreachable!("coordinate {i} out of range");
    };

    let mut per_param: Vec<(String, f64)> = Vec::new();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut checked = 0usize;
    let mut skipped = 0usize;

    for &c in &order[..k] {
        if target.exclude(c) {
            skipped += 1;
            continue;
        }
        let x0 = target.get_coord(c);
        target.set_coord(c, x0 + h);
        let lp = target.eval_loss()?;
        target.set_coord(c, x0 - h);
        let lm = target.eval_loss()?;
        target.set_coord(c, x0);
        let numeric = (lp - lm) / (2.0 * h);
        let a = analytic[c];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(LayerError::GradCheck(format!(
                "non-finite gradient at coordinate {c}: analytic {a}, numeric {numeric}"
            )));
        }
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        let (si, off) = locate(c);
        let name = &spans[si].0;
        match per_param.iter_mut().find(|(p, _)| p == name) {
            Some((_, m)) => *m = m.max(rel),
            None => per_param.push((name.clone(), rel)),
        }
        if rel > max_rel {
            max_rel = rel;
            worst = Some(format!("{name}[{off}]"));
        }
        checked += 1;
    }

    Ok(GradReport {
        checked,
        skipped,
        h,
        tol,
        max_rel_err: max_rel,
        worst,
        per_param,
        pass: checked > 0 && max_rel < tol,
    })
}

// ---------------------------------------------------------------------------
// Per-layer probes: layer + input + fixed random projection as the loss.
// ---------------------------------------------------------------------------

enum AnyLayer {
    Conv(Conv1d<f64>),
    Depthwise(DepthwiseConv1d<f64>),
    Pointwise(PointwiseConv1d<f64>),
    Dps(DpsConv1d<f64>),
    Dense(Dense<f64>),
    Relu(Relu<f64>),
    Sigmoid(Sigmoid<f64>),
    /// Dropout replays its mask from the stored seed on every evaluation.
    Dropout(Dropout<f64>, u64),
    Gmp(GlobalMaxPool<f64>),
    Gap(GlobalAvgPool<f64>),
    /// Two dense branches over a split input, concatenated back together;
    /// exercises concat/split backward.
    ConcatPair(Box<(Dense<f64>, Dense<f64>)>),
}

impl AnyLayer {
    fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>, LayerError> {
        match self {
            AnyLayer::Conv(l) => l.forward(x),
            AnyLayer::Depthwise(l) => l.forward(x),
            AnyLayer::Pointwise(l) => l.forward(x),
            AnyLayer::Dps(l) => l.forward(x),
            AnyLayer::Dense(l) => l.forward(x),
            AnyLayer::Relu(l) => l.forward(x),
            AnyLayer::Sigmoid(l) => l.forward(x),
            AnyLayer::Dropout(l, seed) => {
                let mut rng = Rng::new(*seed);
                l.forward(x, Phase::Train, &mut rng)
            }
            AnyLayer::Gmp(l) => l.forward(x),
            AnyLayer::Gap(l) => l.forward(x),
            AnyLayer::ConcatPair(pair) => {
                let d = pair.0.in_dim();
                let halves = split(x, 1, &[d, d])?;
                let a = pair.0.forward(&halves[0])?;
                let b = pair.1.forward(&halves[1])?;
                concat(&[&a, &b], 1)
            }
        }
    }

    fn backward(&mut self, up: &Tensor<f64>) -> Result<Tensor<f64>, LayerError> {
        match self {
            AnyLayer::Conv(l) => l.backward(up),
            AnyLayer::Depthwise(l) => l.backward(up),
            AnyLayer::Pointwise(l) => l.backward(up),
            AnyLayer::Dps(l) => l.backward(up),
            AnyLayer::Dense(l) => l.backward(up),
            AnyLayer::Relu(l) => l.backward(up),
            AnyLayer::Sigmoid(l) => l.backward(up),
            AnyLayer::Dropout(l, _) => l.backward(up),
            AnyLayer::Gmp(l) => l.backward(up),
            AnyLayer::Gap(l) => l.backward(up),
            AnyLayer::ConcatPair(pair) => {
                let ua = pair.0.units();
                let ub = pair.1.units();
                let ups = split(up, 1, &[ua, ub])?;
                let da = pair.0.backward(&ups[0])?;
                let db = pair.1.backward(&ups[1])?;
                concat(&[&da, &db], 1)
            }
        }
    }

    fn as_layer_mut(&mut self) -> &mut dyn Layer<f64> {
        match self {
            AnyLayer::Conv(l) => l,
            AnyLayer::Depthwise(l) => l,
            AnyLayer::Pointwise(l) => l,
            AnyLayer::Dps(l) => l,
            AnyLayer::Dense(l) => l,
            AnyLayer::Relu(l) => l,
            AnyLayer::Sigmoid(l) => l,
            AnyLayer::Dropout(l, _) => l,
            AnyLayer::Gmp(l) => l,
            AnyLayer::Gap(l) => l,
            AnyLayer::ConcatPair(pair) => &mut pair.0, // params handled via probe spans
        }
    }

    fn param_shapes(&self) -> Vec<(String, usize)> {
        let collect = |ps: Vec<&super::Param<f64>>| {
            ps.iter()
                .map(|p| (p.name.clone(), p.value.len()))
                .collect::<Vec<_>>()
        };
        match self {
            AnyLayer::Conv(l) => collect(l.params()),
            AnyLayer::Depthwise(l) => collect(l.params()),
            AnyLayer::Pointwise(l) => collect(l.params()),
            AnyLayer::Dps(l) => collect(l.params()),
            AnyLayer::Dense(l) => collect(l.params()),
            AnyLayer::Relu(l) => collect(l.params()),
            AnyLayer::Sigmoid(l) => collect(l.params()),
            AnyLayer::Dropout(l, _) => collect(l.params()),
            AnyLayer::Gmp(l) => collect(l.params()),
            AnyLayer::Gap(l) => collect(l.params()),
            AnyLayer::ConcatPair(pair) => {
                let mut v = collect(pair.0.params());
                v.extend(collect(pair.1.params()));
                v
            }
        }
    }

    fn params_flat_mut(&mut self) -> Vec<&mut super::Param<f64>> {
        match self {
            AnyLayer::ConcatPair(pair) => {
                let mut v = pair.0.params_mut();
                v.extend(pair.1.params_mut());
                v
            }
            other => other.as_layer_mut().params_mut(),
        }
    }

    fn reset(&mut self) {
        if let AnyLayer::ConcatPair(pair) = self {
            pair.0.reset_cache();
            pair.1.reset_cache();
        } else {
            self.as_layer_mut().reset_cache();
        }
    }

    fn zero_grads(&mut self) {
        for p in self.params_flat_mut() {
            p.zero_grad();
        }
    }
}

struct LayerProbe {
    layer: AnyLayer,
    x: Tensor<f64>,
    proj: Tensor<f64>,
    exclude_zero_inputs: bool,
    exclude_near_max_inputs: bool,
}

impl LayerProbe {
    fn new(mut layer: AnyLayer, x: Tensor<f64>, rng: &mut Rng) -> Result<Self, LayerError> {
        let out = layer.forward(&x)?;
        layer.reset();
        let proj_data: Vec<f64> = (0..out.len()).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let proj = Tensor::from_vec(out.shape(), proj_data)?;
        let exclude_zero_inputs = matches!(layer, AnyLayer::Relu(_));
        let exclude_near_max_inputs = matches!(layer, AnyLayer::Gmp(_));
        Ok(LayerProbe {
            layer,
            x,
            proj,
            exclude_zero_inputs,
            exclude_near_max_inputs,
        })
    }

    fn param_len(&self) -> usize {
        self.layer.param_shapes().iter().map(|(_, l)| l).sum()
    }
}

impl GradTarget for LayerProbe {
    fn spans(&self) -> Vec<(String, usize)> {
        let mut v = self.layer.param_shapes();
        v.push(("x".to_string(), self.x.len()));
        v
    }

    fn get_coord(&self, i: usize) -> f64 {
        let mut off = i;
        for (len, slice) in collect_param_values(&self.layer) {
            if off < len {
                return slice[off];
            }
            off -= len;
        }
        self.x.data()[off]
    }

    fn set_coord(&mut self, i: usize, v: f64) {
        let param_len = self.param_len();
        if i < param_len {
            let mut off = i;
            for p in self.layer.params_flat_mut() {
                let len = p.value.len();
                if off < len {
                    p.value.data_mut()[off] = v;
                    return;
                }
                off -= len;
            }
            unreachable!()
        }
        self.x.data_mut()[i - param_len] = v;
    }

    fn eval_loss(&mut self) -> Result<f64, LayerError> {
        self.layer.reset();
        let y = self.layer.forward(&self.x)?;
        self.layer.reset();
        Ok(dot(&y, &self.proj))
    }

    fn eval_grad(&mut self) -> Result<Vec<f64>, LayerError> {
        self.layer.reset();
        self.layer.zero_grads();
        let _ = self.layer.forward(&self.x)?;
        let dx = self.layer.backward(&self.proj)?;
        let mut grads = Vec::with_capacity(self.param_len() + dx.len());
        for (len, slice) in collect_param_grads(&self.layer) {
            debug_assert_eq!(len, slice.len());
            grads.extend_from_slice(slice);
        }
        grads.extend_from_slice(dx.data());
        Ok(grads)
    }

    fn exclude(&self, i: usize) -> bool {
        let param_len = self.param_len();
        if i < param_len {
            return false;
        }
        let off = i - param_len;
        if self.exclude_zero_inputs && self.x.data()[off] == 0.0 {
            return true;
        }
        if self.exclude_near_max_inputs {
            // Skip coordinates close enough to their channel max that a +-h
            // nudge could flip the argmax (but keep the argmax itself).
            let c = self.x.dim(1);
            let (row, ch) = (off / c, off % c);
            let l = self.x.dim(0);
            let mut best = self.x.get2(0, ch);
            let mut best_i = 0usize;
            for r in 1..l {
                let v = self.x.get2(r, ch);
                if v > best {
                    best = v;
                    best_i = r;
                }
            }
            if row != best_i && (best - self.x.get2(row, ch)).abs() < 1e-3 {
                return true;
            }
        }
        false
    }
}

fn collect_param_values(layer: &AnyLayer) -> Vec<(usize, &[f64])> {
    fn collect<'a>(ps: Vec<&'a super::Param<f64>>) -> Vec<(usize, &'a [f64])> {
        ps.into_iter()
            .map(|p| (p.value.len(), p.value.data()))
            .collect()
    }
    match layer {
        AnyLayer::Conv(l) => collect(l.params()),
        AnyLayer::Depthwise(l) => collect(l.params()),
        AnyLayer::Pointwise(l) => collect(l.params()),
        AnyLayer::Dps(l) => collect(l.params()),
        AnyLayer::Dense(l) => collect(l.params()),
        AnyLayer::Relu(l) => collect(l.params()),
        AnyLayer::Sigmoid(l) => collect(l.params()),
        AnyLayer::Dropout(l, _) => collect(l.params()),
        AnyLayer::Gmp(l) => collect(l.params()),
        AnyLayer::Gap(l) => collect(l.params()),
        AnyLayer::ConcatPair(pair) => {
            let mut v = collect(pair.0.params());
            v.extend(collect(pair.1.params()));
            v
        }
    }
}

fn collect_param_grads(layer: &AnyLayer) -> Vec<(usize, &[f64])> {
    fn collect<'a>(ps: Vec<&'a super::Param<f64>>) -> Vec<(usize, &'a [f64])> {
        ps.into_iter()
            .map(|p| (p.grad.len(), p.grad.data()))
            .collect()
    }
    match layer {
        AnyLayer::Conv(l) => collect(l.params()),
        AnyLayer::Depthwise(l) => collect(l.params()),
        AnyLayer::Pointwise(l) => collect(l.params()),
        AnyLayer::Dps(l) => collect(l.params()),
        AnyLayer::Dense(l) => collect(l.params()),
        AnyLayer::Relu(l) => collect(l.params()),
        AnyLayer::Sigmoid(l) => collect(l.params()),
        AnyLayer::Dropout(l, _) => collect(l.params()),
        AnyLayer::Gmp(l) => collect(l.params()),
        AnyLayer::Gap(l) => collect(l.params()),
        AnyLayer::ConcatPair(pair) => {
            let mut v = collect(pair.0.params());
            v.extend(collect(pair.1.params()));
            v
        }
    }
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn random_input(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Builds and checks one probe per layer kind. Returns (name, report) pairs;
/// every report is expected to pass at tol 1e-4 with h = 1e-5.
pub fn layer_suite(seed: u64) -> Result<Vec<(String, GradReport)>, LayerError> {
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    const SAMPLES: usize = 200;

    let spec = |k: usize, s: usize, m: usize, f: usize, padding: Padding| ConvSpec {
        kernel: k,
        stride: s,
        in_channels: m,
        out_filters: f,
        padding,
        kind: ConvKind::Standard,
    };

    let mut out = Vec::new();
    let mut case_idx = 0u64;
    let mut run = |name: &str,
                   layer: AnyLayer,
                   x: Tensor<f64>,
                   out: &mut Vec<(String, GradReport)>|
     -> Result<(), LayerError> {
        case_idx += 1;
        let mut rng = Rng::stream(seed, case_idx);
        let mut probe = LayerProbe::new(layer, x, &mut rng)?;
        let report = check_gradients(&mut probe, &mut rng, H, TOL, SAMPLES)?;
        out.push((name.to_string(), report));
        Ok(())
    };

    let mut build_rng = Rng::stream(seed, 1000);
    let r = &mut build_rng;

    run(
        "conv1d_same_s2",
        AnyLayer::Conv(Conv1d::new("conv", spec(5, 2, 3, 4, Padding::Same), r)?),
        random_input(r, &[17, 3]),
        &mut out,
    )?;
    run(
        "conv1d_valid_s1",
        AnyLayer::Conv(Conv1d::new("conv", spec(4, 1, 2, 3, Padding::Valid), r)?),
        random_input(r, &[12, 2]),
        &mut out,
    )?;
    run(
        "depthwise_conv1d",
        AnyLayer::Depthwise(DepthwiseConv1d::new("dw", spec(5, 2, 3, 3, Padding::Same), r)?),
        random_input(r, &[14, 3]),
        &mut out,
    )?;
    run(
        "pointwise_conv1d",
        AnyLayer::Pointwise(PointwiseConv1d::new("pw", 3, 5, r)?),
        random_input(r, &[9, 3]),
        &mut out,
    )?;
    run(
        "dps_conv1d",
        AnyLayer::Dps(DpsConv1d::new("dps", spec(6, 2, 3, 4, Padding::Same), r)?),
        random_input(r, &[16, 3]),
        &mut out,
    )?;
    run(
        "dense",
        AnyLayer::Dense(Dense::new("fc", 7, 5, r)?),
        random_input(r, &[3, 7]),
        &mut out,
    )?;
    {
        let mut x = random_input(r, &[4, 6]);
        x.data_mut()[0] = 0.0;
        x.data_mut()[7] = 0.0;
        run("relu", AnyLayer::Relu(Relu::new("relu")), x, &mut out)?;
    }
    run(
        "sigmoid",
        AnyLayer::Sigmoid(Sigmoid::new("sig")),
        random_input(r, &[3, 5]),
        &mut out,
    )?;
    run(
        "dropout",
        AnyLayer::Dropout(Dropout::new("drop", 0.3)?, 0xD120_u64 ^ seed),
        random_input(r, &[5, 6]),
        &mut out,
    )?;
    run(
        "global_max_pool",
        AnyLayer::Gmp(GlobalMaxPool::new("gmp")),
        random_input(r, &[9, 4]),
        &mut out,
    )?;
    run(
        "global_avg_pool",
        AnyLayer::Gap(GlobalAvgPool::new("gap")),
        random_input(r, &[9, 4]),
        &mut out,
    )?;
    run(
        "concat_dense_pair",
        AnyLayer::ConcatPair(Box::new((Dense::new("a", 4, 3, r)?, Dense::new("b", 4, 2, r)?))),
        random_input(r, &[3, 8]),
        &mut out,
    )?;

    Ok(out)
}
