//! 1-d convolutions over [L, M] windows: standard, depthwise, pointwise, and
//! the depthwise-separable composition.

use super::{shape_err, ConvKind, ConvSpec, Layer, LayerError, Param, ParamKind};
use crate::tensor::{matmul, xavier_init, xavier_shaped, Rng, Scalar, Tensor};

fn check_input<T: Scalar>(op: &str, x: &Tensor<T>, channels: usize) -> Result<(), LayerError> {
    if x.rank() != 2 {
        return Err(shape_err(op, "rank-2 [L, M] input", format!("{:?}", x.shape())));
    }
    if x.dim(1) != channels {
        return Err(shape_err(
            op,
            format!("{channels} channels"),
            format!("{:?}", x.shape()),
        ));
    }
    Ok(())
}

/// Standard 1-d convolution: out[i,f] = b[f] + sum_{j,m} x[i*s + j - pad, m] * w[j,m,f],
/// reading zero outside the input under same-padding. Accumulation runs in
/// fixed (j, m) ascending order with the bias added last.
pub fn conv1d_forward<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>, LayerError> {
    spec.validate()?;
    check_input("conv1d", x, spec.in_channels)?;
    let (k, m, f) = (spec.kernel, spec.in_channels, spec.out_filters);
    if w.shape() != [k, m, f] {
        return Err(shape_err("conv1d", format!("weights [{k}, {m}, {f}]"), format!("{:?}", w.shape())));
    }
    if b.shape() != [f] {
        return Err(shape_err("conv1d", format!("bias [{f}]"), format!("{:?}", b.shape())));
    }
    let l = x.dim(0);
    let out_l = spec.out_len(l)?;
    let pad = spec.pad_left(l)?;
    let mut out = Tensor::zeros(&[out_l, f]);
    for i in 0..out_l {
        let base = i * spec.stride;
        for j in 0..k {
            let t = base + j;
            if t < pad {
                continue;
            }
            let t = t - pad;
            if t >= l {
                break;
            }
            for mm in 0..m {
                let xv = x.get2(t, mm);
                let wrow = &w.data()[(j * m + mm) * f..(j * m + mm + 1) * f];
                let orow = &mut out.data_mut()[i * f..(i + 1) * f];
                for ff in 0..f {
                    orow[ff] += xv * wrow[ff];
                }
            }
        }
        for ff in 0..f {
            let idx = out.idx2(i, ff);
            out.data_mut()[idx] += b.data()[ff];
        }
    }
    Ok(out)
}

/// Depthwise 1-d convolution: channel m of the output depends only on channel
/// m of the input. No bias (it would be redundant with the pointwise stage).
pub fn depthwise_conv1d_forward<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    w_d: &Tensor<T>,
) -> Result<Tensor<T>, LayerError> {
    spec.validate()?;
    check_input("depthwise_conv1d", x, spec.in_channels)?;
    let (k, m) = (spec.kernel, spec.in_channels);
    if w_d.shape() != [k, m] {
        return Err(shape_err(
            "depthwise_conv1d",
            format!("weights [{k}, {m}]"),
            format!("{:?}", w_d.shape()),
        ));
    }
    let l = x.dim(0);
    let out_l = spec.out_len(l)?;
    let pad = spec.pad_left(l)?;
    let mut out = Tensor::zeros(&[out_l, m]);
    for i in 0..out_l {
        let base = i * spec.stride;
        for j in 0..k {
            let t = base + j;
            if t < pad {
                continue;
            }
            let t = t - pad;
            if t >= l {
                break;
            }
            for mm in 0..m {
                let idx = out.idx2(i, mm);
                out.data_mut()[idx] += x.get2(t, mm) * w_d.get2(j, mm);
            }
        }
    }
    Ok(out)
}

/// Pointwise (1x1) convolution: per-timestep channel projection. Implemented
/// as `matmul(x, w_p)` plus bias so the summation order — and therefore the
/// bit pattern — matches the matmul oracle exactly.
pub fn pointwise_conv1d_forward<T: Scalar>(
    x: &Tensor<T>,
    w_p: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>, LayerError> {
    if x.rank() != 2 || w_p.rank() != 2 || x.dim(1) != w_p.dim(0) {
        return Err(shape_err(
            "pointwise_conv1d",
            "x [L, M] and w_p [M, F]",
            format!("{:?} and {:?}", x.shape(), w_p.shape()),
        ));
    }
    let f = w_p.dim(1);
    if b.shape() != [f] {
        return Err(shape_err("pointwise_conv1d", format!("bias [{f}]"), format!("{:?}", b.shape())));
    }
    let mut out = matmul(x, w_p)?;
    let l = out.dim(0);
    for i in 0..l {
        for ff in 0..f {
            let idx = out.idx2(i, ff);
            out.data_mut()[idx] += b.data()[ff];
        }
    }
    Ok(out)
}

/// Depthwise-separable convolution, literally the two-step composition so the
/// bitwise-equivalence contract holds by construction.
pub fn dps_conv1d_forward<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    w_d: &Tensor<T>,
    w_p: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>, LayerError> {
    let mid = depthwise_conv1d_forward(x, spec, w_d)?;
    pointwise_conv1d_forward(&mid, w_p, b)
}

/// Standard convolution layer with weights [k, M, F] and bias [F].
#[derive(Debug, Clone)]
pub struct Conv1d<T: Scalar> {
    pub name: String,
    pub spec: ConvSpec,
    pub w: Param<T>,
    pub b: Param<T>,
    cache: Vec<Tensor<T>>,
}

impl<T: Scalar> Conv1d<T> {
    pub fn new(name: &str, mut spec: ConvSpec, rng: &mut Rng) -> Result<Self, LayerError> {
        spec.kind = ConvKind::Standard;
        spec.validate()?;
        let (k, m, f) = (spec.kernel, spec.in_channels, spec.out_filters);
        let w = xavier_shaped(&[k, m, f], k * m, f, rng)?;
        Ok(Conv1d {
            name: name.to_string(),
            spec,
            w: Param::new(format!("{name}.w"), ParamKind::ConvKernel, w),
            b: Param::new(format!("{name}.b"), ParamKind::Bias, Tensor::zeros(&[f])),
            cache: Vec::new(),
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
        let out = conv1d_forward(x, &self.spec, &self.w.value, &self.b.value)?;
        self.cache.push(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, up: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
        let x = self
            .cache
            .pop()
            .ok_or_else(|| LayerError::BackwardWithoutForward(self.name.clone()))?;
        let (k, m, f) = (self.spec.kernel, self.spec.in_channels, self.spec.out_filters);
        let l = x.dim(0);
        let out_l = self.spec.out_len(l)?;
        if up.shape() != [out_l, f] {
            return Err(shape_err(
                "conv1d backward",
                format!("upstream [{out_l}, {f}]"),
                format!("{:?}", up.shape()),
            ));
        }
        let pad = self.spec.pad_left(l)?;
        let mut dx = Tensor::zeros(&[l, m]);
        for i in 0..out_l {
            let base = i * self.spec.stride;
            for j in 0..k {
                let t = base + j;
                if t < pad {
                    continue;
                }
                let t = t - pad;
                if t >= l {
                    break;
                }
                for mm in 0..m {
                    let xv = x.get2(t, mm);
                    let mut dxv = T::ZERO;
                    let row = (j * m + mm) * f;
                    for ff in 0..f {
                        let u = up.get2(i, ff);
                        self.w.grad.data_mut()[row + ff] += u * xv;
                        dxv += u * self.w.value.data()[row + ff];
                    }
                    let idx = dx.idx2(t, mm);
                    dx.data_mut()[idx] += dxv;
                }
            }
            for ff in 0..f {
                self.b.grad.data_mut()[ff] += up.get2(i, ff);
            }
        }
        Ok(dx)
    }

    pub fn param_count(&self) -> usize {
        self.w.value.len() + self.b.value.len()
    }
}

impl<T: Scalar> Layer<T> for Conv1d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.w, &self.b]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.w, &mut self.b]
    }
    fn reset_cache(&mut self) {
        self.cache.clear();
    }
}

/// Depthwise convolution layer with per-channel weights [k, M] and no bias.
#[derive(Debug, Clone)]
pub struct DepthwiseConv1d<T: Scalar> {
    pub name: String,
    pub spec: ConvSpec,
    pub w_d: Param<T>,
    cache: Vec<Tensor<T>>,
}

impl<T: Scalar> DepthwiseConv1d<T> {
    pub fn new(name: &str, mut spec: ConvSpec, rng: &mut Rng) -> Result<Self, LayerError> {
        spec.kind = ConvKind::Depthwise;
        spec.out_filters = spec.in_channels;
        spec.validate()?;
        let (k, m) = (spec.kernel, spec.in_channels);
        let w_d = xavier_shaped(&[k, m], k, 1, rng)?;
        Ok(DepthwiseConv1d {
            name: name.to_string(),
            spec,
            w_d: Param::new(format!("{name}.dw"), ParamKind::DepthwiseKernel, w_d),
            cache: Vec::new(),
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
        let out = depthwise_conv1d_forward(x, &self.spec, &self.w_d.value)?;
        self.cache.push(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, up: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
        let x = self
            .cache
            .pop()
            .ok_or_else(|| LayerError::BackwardWithoutForward(self.name.clone()))?;
        let (k, m) = (self.spec.kernel, self.spec.in_channels);
        let l = x.dim(0);
        let out_l = self.spec.out_len(l)?;
        if up.shape() != [out_l, m] {
            return Err(shape_err(
                "depthwise_conv1d backward",
                format!("upstream [{out_l}, {m}]"),
                format!("{:?}", up.shape()),
            ));
        }
        let pad = self.spec.pad_left(l)?;
        let mut dx = Tensor::zeros(&[l, m]);
        for i in 0..out_l {
            let base = i * self.spec.stride;
            for j in 0..k {
                let t = base + j;
                if t < pad {
                    continue;
                }
                let t = t - pad;
                if t >= l {
                    break;
                }
                for mm in 0..m {
                    let u = up.get2(i, mm);
                    let widx = self.w_d.value.idx2(j, mm);
                    self.w_d.grad.data_mut()[widx] += u * x.get2(t, mm);
                    let idx = dx.idx2(t, mm);
                    dx.data_mut()[idx] += u * self.w_d.value.data()[widx];
                }
            }
        }
        Ok(dx)
    }

    pub fn param_count(&self) -> usize {
        self.w_d.value.len()
    }
}

impl<T: Scalar> Layer<T> for DepthwiseConv1d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.w_d]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.w_d]
    }
    fn reset_cache(&mut self) {
        self.cache.clear();
    }
}

/// Pointwise (1x1) projection layer with weights [M, F] and bias [F].
#[derive(Debug, Clone)]
pub struct PointwiseConv1d<T: Scalar> {
    pub name: String,
    pub w_p: Param<T>,
    pub b: Param<T>,
    cache: Vec<Tensor<T>>,
}

impl<T: Scalar> PointwiseConv1d<T> {
    pub fn new(name: &str, in_channels: usize, out_filters: usize, rng: &mut Rng) -> Result<Self, LayerError> {
        let w_p = xavier_init(in_channels, out_filters, rng)?;
        Ok(PointwiseConv1d {
            name: name.to_string(),
            w_p: Param::new(format!("{name}.pw"), ParamKind::PointwiseKernel, w_p),
            b: Param::new(
                format!("{name}.b"),
                ParamKind::Bias,
                Tensor::zeros(&[out_filters]),
            ),
            cache: Vec::new(),
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
        let out = pointwise_conv1d_forward(x, &self.w_p.value, &self.b.value)?;
        self.cache.push(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, up: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
        let x = self
            .cache
            .pop()
            .ok_or_else(|| LayerError::BackwardWithoutForward(self.name.clone()))?;
        let (l, f) = (x.dim(0), self.w_p.value.dim(1));
        if up.shape() != [l, f] {
            return Err(shape_err(
                "pointwise_conv1d backward",
                format!("upstream [{l}, {f}]"),
                format!("{:?}", up.shape()),
            ));
        }
        self.w_p.grad.add_in_place(&matmul(&x.transpose2(), up)?)?;
        for i in 0..l {
            for ff in 0..f {
                self.b.grad.data_mut()[ff] += up.get2(i, ff);
            }
        }
        Ok(matmul(up, &self.w_p.value.transpose2())?)
    }

    pub fn param_count(&self) -> usize {
        self.w_p.value.len() + self.b.value.len()
    }
}

impl<T: Scalar> Layer<T> for PointwiseConv1d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.w_p, &self.b]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.w_p, &mut self.b]
    }
    fn reset_cache(&mut self) {
        self.cache.clear();
    }
}

/// Depthwise-separable convolution layer: the depthwise stage carries the
/// receptive field and stride, the pointwise stage mixes channels.
#[derive(Debug, Clone)]
pub struct DpsConv1d<T: Scalar> {
    pub name: String,
    pub depthwise: DepthwiseConv1d<T>,
    pub pointwise: PointwiseConv1d<T>,
}

impl<T: Scalar> DpsConv1d<T> {
    pub fn new(name: &str, mut spec: ConvSpec, rng: &mut Rng) -> Result<Self, LayerError> {
        let out_filters = spec.out_filters;
        spec.kind = ConvKind::DepthwiseSeparable;
        spec.validate()?;
        let depthwise = DepthwiseConv1d::new(name, spec, rng)?;
        let pointwise = PointwiseConv1d::new(name, spec.in_channels, out_filters, rng)?;
        Ok(DpsConv1d {
            name: name.to_string(),
            depthwise,
            pointwise,
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
        let mid = self.depthwise.forward(x)?;
        self.pointwise.forward(&mid)
    }

    pub fn backward(&mut self, up: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
        let dmid = self.pointwise.backward(up)?;
        self.depthwise.backward(&dmid)
    }

    pub fn param_count(&self) -> usize {
        self.depthwise.param_count() + self.pointwise.param_count()
    }
}

impl<T: Scalar> Layer<T> for DpsConv1d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.depthwise.params();
        v.extend(self.pointwise.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.depthwise.params_mut();
        v.extend(self.pointwise.params_mut());
        v
    }
    fn reset_cache(&mut self) {
        self.depthwise.reset_cache();
        self.pointwise.reset_cache();
    }
}

/// Parameter count of a standard convolution with the same geometry:
/// k * M * F weights plus F biases.
pub fn standard_conv_param_count(k: usize, m: usize, f: usize) -> usize {
    k * m * f + f
}

/// Parameter count of the depthwise-separable equivalent:
/// k * M depthwise + M * F pointwise + F biases.
pub fn dps_conv_param_count(k: usize, m: usize, f: usize) -> usize {
    k * m + m * f + f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Padding;

    fn spec(k: usize, s: usize, m: usize, f: usize, padding: Padding) -> ConvSpec {
        ConvSpec {
            kernel: k,
            stride: s,
            in_channels: m,
            out_filters: f,
            padding,
            kind: ConvKind::Standard,
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::from_vec(&[4, 1], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv1d_forward(&x, &spec(1, 1, 1, 1, Padding::Same), &w, &b).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_valid_stride_two() {
        let x = Tensor::from_vec(&[4, 1], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_vec(&[2, 1, 1], vec![1.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv1d_forward(&x, &spec(2, 2, 1, 1, Padding::Valid), &w, &b).unwrap();
        assert_eq!(y.shape(), &[2, 1]);
        assert_eq!(y.data(), &[3.0, 7.0]);
    }

    #[test]
    fn conv_zero_weights_constant_bias() {
        let x = Tensor::<f64>::filled(&[11, 3], 2.5);
        let w = Tensor::zeros(&[5, 3, 4]);
        let b = Tensor::filled(&[4], 7.0);
        let y = conv1d_forward(&x, &spec(5, 2, 3, 4, Padding::Same), &w, &b).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn depthwise_identity_per_channel() {
        let x = Tensor::from_vec(&[3, 2], vec![1.0f64, 10.0, 2.0, 20.0, 3.0, 30.0]).unwrap();
        let w = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        let y = depthwise_conv1d_forward(&x, &spec(1, 1, 2, 2, Padding::Same), &w).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn depthwise_channel_independence() {
        let mut rng = Rng::new(11);
        let mut x = Tensor::<f64>::zeros(&[12, 3]);
        for i in 0..12 {
            x.set2(i, 0, rng.uniform(-1.0, 1.0));
            x.set2(i, 2, rng.uniform(-1.0, 1.0));
        }
        let w: Tensor<f64> = xavier_shaped(&[4, 3], 4, 1, &mut rng).unwrap();
        let y = depthwise_conv1d_forward(&x, &spec(4, 1, 3, 3, Padding::Same), &w).unwrap();
        for i in 0..y.dim(0) {
            assert_eq!(y.get2(i, 1), 0.0, "zero input channel must stay zero");
        }
    }

    #[test]
    fn depthwise_two_channel_hand_case() {
        let x = Tensor::from_vec(&[3, 2], vec![1.0f64, 10.0, 2.0, 20.0, 3.0, 30.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let y = depthwise_conv1d_forward(&x, &spec(2, 1, 2, 2, Padding::Valid), &w).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert_eq!(y.data(), &[3.0, 0.0, 5.0, 0.0]);
    }

    #[test]
    fn pointwise_identity_projection() {
        let x = Tensor::from_vec(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        let y = pointwise_conv1d_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn pointwise_channel_sum() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = Tensor::filled(&[3, 1], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = pointwise_conv1d_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[6.0, 15.0]);
    }

    #[test]
    fn pointwise_equals_matmul_plus_bias_bitwise() {
        let mut rng = Rng::new(5);
        for _ in 0..100 {
            let l = 1 + rng.index(6);
            let m = 1 + rng.index(5);
            let f = 1 + rng.index(5);
            let draw = |rng: &mut Rng, sh: &[usize]| {
                let n = sh.iter().product();
                Tensor::<f32>::from_vec(
                    sh,
                    (0..n).map(|_| rng.uniform(-2.0, 2.0) as f32).collect(),
                )
                .unwrap()
            };
            let x = draw(&mut rng, &[l, m]);
            let w = draw(&mut rng, &[m, f]);
            let b = draw(&mut rng, &[f]);
            let y = pointwise_conv1d_forward(&x, &w, &b).unwrap();
            let mut oracle = matmul(&x, &w).unwrap();
            for i in 0..l {
                for ff in 0..f {
                    let idx = oracle.idx2(i, ff);
                    oracle.data_mut()[idx] += b.data()[ff];
                }
            }
            assert!(y.bits_eq(&oracle));
        }
    }

    #[test]
    fn dps_equals_two_step_composition_bitwise() {
        let mut rng = Rng::new(17);
        for _ in 0..1000 {
            let k = 1 + rng.index(8);
            let s = 1 + rng.index(3);
            let m = 1 + rng.index(4);
            let f = 1 + rng.index(6);
            let l = k + rng.index(20);
            let padding = if rng.next_f64() < 0.5 { Padding::Same } else { Padding::Valid };
            let sp = spec(k, s, m, f, padding);
            let draw = |rng: &mut Rng, sh: &[usize]| {
                let n = sh.iter().product();
                Tensor::<f32>::from_vec(
                    sh,
                    (0..n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect(),
                )
                .unwrap()
            };
            let x = draw(&mut rng, &[l, m]);
            let w_d = draw(&mut rng, &[k, m]);
            let w_p = draw(&mut rng, &[m, f]);
            let b = draw(&mut rng, &[f]);
            let fused = dps_conv1d_forward(&x, &sp, &w_d, &w_p, &b).unwrap();
            let two_step = pointwise_conv1d_forward(
                &depthwise_conv1d_forward(&x, &sp, &w_d).unwrap(),
                &w_p,
                &b,
            )
            .unwrap();
            assert!(fused.bits_eq(&two_step));
        }
    }

    #[test]
    fn parameter_economy_for_both_conv_configs() {
        assert_eq!(dps_conv_param_count(64, 3, 32), 320);
        assert_eq!(standard_conv_param_count(64, 3, 32), 6176);
        for &(k, m, f) in &[(64usize, 3usize, 32usize), (32, 32, 64), (8, 13, 32), (6, 32, 64)] {
            assert!(dps_conv_param_count(k, m, f) < standard_conv_param_count(k, m, f));
        }
    }

    #[test]
    fn layer_param_counts_match_closed_forms() {
        let mut rng = Rng::new(1);
        let sp = spec(64, 2, 3, 32, Padding::Same);
        let std = Conv1d::<f32>::new("c", sp, &mut rng).unwrap();
        let dps = DpsConv1d::<f32>::new("d", sp, &mut rng).unwrap();
        assert_eq!(std.param_count(), 6176);
        assert_eq!(dps.param_count(), 320);
    }

    #[test]
    fn backward_without_forward_errors() {
        let mut rng = Rng::new(1);
        let mut c = Conv1d::<f64>::new("c", spec(3, 1, 2, 2, Padding::Same), &mut rng).unwrap();
        let up = Tensor::zeros(&[4, 2]);
        assert!(matches!(
            c.backward(&up),
            Err(LayerError::BackwardWithoutForward(_))
        ));
    }

    #[test]
    fn valid_padding_short_input_errors() {
        let x = Tensor::<f64>::zeros(&[3, 1]);
        let w = Tensor::zeros(&[5, 1, 1]);
        let b = Tensor::zeros(&[1]);
        assert!(conv1d_forward(&x, &spec(5, 1, 1, 1, Padding::Valid), &w, &b).is_err());
    }
}
