use ndarray::{Array2, ArrayD, ArrayView2, ArrayView4, Axis, Ix1, Ix2, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ParamSet, Scalar};
use crate::{Error, Result};

/// One convolution block: conv (zero "same" padding of `kernel / 2`) + ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Conv blocks followed by global average pooling and a linear head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub blocks: Vec<ConvSpec>,
}

impl Default for Architecture {
    fn default() -> Self {
        let block = |c| ConvSpec {
            out_channels: c,
            kernel: 3,
            stride: 2,
        };
        Self {
            blocks: vec![block(16), block(32), block(64)],
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 || b.kernel == 0 || b.stride == 0 {
                return Err(Error::Config(format!(
                    "conv block {i} has a zero-sized field: {b:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self, in_channels: usize) -> usize {
        self.blocks.last().map_or(in_channels, |b| b.out_channels)
    }

    pub fn encoder_param_count(&self, in_channels: usize) -> usize {
        let mut c_in = in_channels;
        let mut n = 0;
        for b in &self.blocks {
            n += b.out_channels * c_in * b.kernel * b.kernel + b.out_channels;
            c_in = b.out_channels;
        }
        n
    }

    pub fn param_count(&self, in_channels: usize, classes: usize) -> usize {
        self.encoder_param_count(in_channels) + (self.feature_dim(in_channels) + 1) * classes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Source,
    AuxOpt,
    AuxSar,
    Target,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Source => "source",
            Role::AuxOpt => "aux-opt",
            Role::AuxSar => "aux-sar",
            Role::Target => "target",
        }
    }
}

/// Convolutional feature extractor. Parameters live outside the struct
/// (two tensors per block: weight `(out, k*k*in)` and bias `(out)`), so
/// several encoders can share one [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encoder {
    pub arch: Architecture,
    pub in_channels: usize,
}

struct LayerCache<T> {
    cols: Array2<T>,
    act: Array2<T>,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
}

/// Intermediate activations of one encoder pass, kept for backprop.
pub struct EncoderCache<T> {
    batch: usize,
    layers: Vec<LayerCache<T>>,
    pub features: Array2<T>,
}

impl Encoder {
    pub fn new(arch: Architecture, in_channels: usize) -> Self {
        Self { arch, in_channels }
    }

    pub fn tensor_count(&self) -> usize {
        2 * self.arch.blocks.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim(self.in_channels)
    }

    /// He-uniform weights, zero biases.
    pub fn init_params<T: Scalar, R: Rng>(&self, rng: &mut R) -> Vec<ArrayD<T>> {
        let mut out = Vec::with_capacity(self.tensor_count());
        let mut c_in = self.in_channels;
        for b in &self.arch.blocks {
            let fan_in = c_in * b.kernel * b.kernel;
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = ArrayD::from_shape_simple_fn(IxDyn(&[b.out_channels, fan_in]), || {
                T::from_f64_lossy(rng.random_range(-bound..bound))
            });
            out.push(w);
            out.push(ArrayD::zeros(IxDyn(&[b.out_channels])));
            c_in = b.out_channels;
        }
        out
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &[ArrayD<T>],
        input: ArrayView4<T>,
    ) -> Result<EncoderCache<T>> {
        let (b, c, h, w) = input.dim();
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "encoder expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        if b == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("degenerate input batch {:?}", input.dim())));
        }
        let mut act = to_nhwc(input);
        let (mut h, mut w, mut c_in) = (h, w, c);
        let mut layers = Vec::with_capacity(self.arch.blocks.len());
        for (i, spec) in self.arch.blocks.iter().enumerate() {
            let weight = as2(&params[2 * i]);
            let bias = as1(&params[2 * i + 1]);
            let (cols, ho, wo) = im2col(act.view(), b, h, w, c_in, spec);
            let mut pre = cols.dot(&weight.t());
            pre += &bias;
            pre.mapv_inplace(|x| if x > T::zero() { x } else { T::zero() });
            layers.push(LayerCache {
                cols,
                act: pre,
                in_hw: (h, w),
                out_hw: (ho, wo),
            });
            act = layers.last().unwrap().act.clone();
            h = ho;
            w = wo;
            c_in = spec.out_channels;
        }
        let features = global_avg_pool(act.view(), b, h * w);
        Ok(EncoderCache {
            batch: b,
            layers,
            features,
        })
    }

    /// Accumulates parameter gradients into `grads` (same layout as
    /// `params`) given the gradient w.r.t. the pooled features.
    pub fn backward<T: Scalar>(
        &self,
        params: &[ArrayD<T>],
        cache: &EncoderCache<T>,
        dfeatures: ArrayView2<T>,
        grads: &mut [ArrayD<T>],
    ) {
        let Some(last) = cache.layers.last() else {
            return;
        };
        let b = cache.batch;
        let hw = last.out_hw.0 * last.out_hw.1;
        let inv = T::one() / T::from_usize(hw).unwrap();
        let mut dact = Array2::zeros(last.act.dim());
        for (row, mut drow) in dact.axis_iter_mut(Axis(0)).enumerate() {
            drow.assign(&dfeatures.row(row / hw).mapv(|g| g * inv));
        }
        debug_assert_eq!(dact.nrows(), b * hw);
        for i in (0..cache.layers.len()).rev() {
            let layer = &cache.layers[i];
            let spec = &self.arch.blocks[i];
            dact.zip_mut_with(&layer.act, |g, &a| {
                if a <= T::zero() {
                    *g = T::zero();
                }
            });
            let dw = dact.t().dot(&layer.cols);
            let db = dact.sum_axis(Axis(0));
            {
                let mut gw = grads[2 * i].view_mut().into_dimensionality::<Ix2>().unwrap();
                gw += &dw;
                let mut gb = grads[2 * i + 1].view_mut().into_dimensionality::<Ix1>().unwrap();
                gb += &db;
            }
            if i > 0 {
                let weight = as2(&params[2 * i]);
                let dcols = dact.dot(&weight);
                let c_in = self.arch.blocks[i - 1].out_channels;
                dact = col2im(dcols.view(), b, layer.in_hw, c_in, spec, layer.out_hw);
            }
        }
    }
}

fn as2<T: Scalar>(t: &ArrayD<T>) -> ArrayView2<'_, T> {
    t.view().into_dimensionality::<Ix2>().expect("2-d weight")
}

fn as1<T: Scalar>(t: &ArrayD<T>) -> ndarray::ArrayView1<'_, T> {
    t.view().into_dimensionality::<Ix1>().expect("1-d bias")
}

fn to_nhwc<T: Scalar>(input: ArrayView4<T>) -> Array2<T> {
    let (b, c, h, w) = input.dim();
    let mut out = Array2::zeros((b * h * w, c));
    let dst = out.as_slice_mut().unwrap();
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    dst[((bi * h + y) * w + x) * c + ci] = input[[bi, ci, y, x]];
                }
            }
        }
    }
    out
}

fn out_size(n: usize, spec: &ConvSpec) -> usize {
    let pad = spec.kernel / 2;
    (n + 2 * pad).saturating_sub(spec.kernel) / spec.stride + 1
}

fn im2col<T: Scalar>(
    act: ArrayView2<T>,
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    spec: &ConvSpec,
) -> (Array2<T>, usize, usize) {
    let (k, s, pad) = (spec.kernel, spec.stride, spec.kernel / 2);
    let (ho, wo) = (out_size(h, spec), out_size(w, spec));
    let kkc = k * k * c;
    let mut cols = Array2::zeros((b * ho * wo, kkc));
    let src = act.as_slice().expect("contiguous activations");
    let dst = cols.as_slice_mut().unwrap();
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((bi * ho + oy) * wo + ox) * kkc;
                for ky in 0..k {
                    let Some(iy) = (oy * s + ky).checked_sub(pad).filter(|&v| v < h) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ix) = (ox * s + kx).checked_sub(pad).filter(|&v| v < w) else {
                            continue;
                        };
                        let d = row + (ky * k + kx) * c;
                        let so = ((bi * h + iy) * w + ix) * c;
                        dst[d..d + c].copy_from_slice(&src[so..so + c]);
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

fn col2im<T: Scalar>(
    dcols: ArrayView2<T>,
    b: usize,
    (h, w): (usize, usize),
    c: usize,
    spec: &ConvSpec,
    (ho, wo): (usize, usize),
) -> Array2<T> {
    let (k, s, pad) = (spec.kernel, spec.stride, spec.kernel / 2);
    let kkc = k * k * c;
    let mut out = Array2::zeros((b * h * w, c));
    let src = dcols.as_slice().expect("contiguous gradient");
    let dst = out.as_slice_mut().unwrap();
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((bi * ho + oy) * wo + ox) * kkc;
                for ky in 0..k {
                    let Some(iy) = (oy * s + ky).checked_sub(pad).filter(|&v| v < h) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ix) = (ox * s + kx).checked_sub(pad).filter(|&v| v < w) else {
                            continue;
                        };
                        let so = row + (ky * k + kx) * c;
                        let d = ((bi * h + iy) * w + ix) * c;
                        for j in 0..c {
                            dst[d + j] += src[so + j];
                        }
                    }
                }
            }
        }
    }
    out
}

fn global_avg_pool<T: Scalar>(act: ArrayView2<T>, b: usize, hw: usize) -> Array2<T> {
    let c = act.ncols();
    let inv = T::one() / T::from_usize(hw).unwrap();
    let mut out = Array2::zeros((b, c));
    for (row, a) in act.axis_iter(Axis(0)).enumerate() {
        let mut o = out.row_mut(row / hw);
        o.zip_mut_with(&a, |x, &y| *x += y);
    }
    out.mapv_inplace(|x| x * inv);
    out
}

/// Encoder + linear head producing per-class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T> {
    pub encoder: Encoder,
    pub classes: usize,
    pub role: Role,
    /// Encoder tensors followed by head weight `(M, F)` and head bias `(M)`.
    pub params: ParamSet<T>,
}

/// Forward activations retained for [`Classifier::backward`].
pub struct ForwardCache<T> {
    pub encoder: EncoderCache<T>,
    pub logits: Array2<T>,
}

impl<T: Scalar> Classifier<T> {
    pub fn new<R: Rng>(
        arch: Architecture,
        in_channels: usize,
        classes: usize,
        role: Role,
        rng: &mut R,
    ) -> Result<Self> {
        arch.validate()?;
        if classes == 0 || in_channels == 0 {
            return Err(Error::Config(format!(
                "classifier needs classes >= 1 and in_channels >= 1 (got {classes}, {in_channels})"
            )));
        }
        let encoder = Encoder::new(arch, in_channels);
        let mut tensors = encoder.init_params(rng);
        let (hw, hb) = init_head(encoder.feature_dim(), classes, rng);
        tensors.push(hw);
        tensors.push(hb);
        Ok(Self {
            encoder,
            classes,
            role,
            params: ParamSet::new(tensors),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.encoder.in_channels
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn head_index(&self) -> usize {
        self.encoder.tensor_count()
    }

    pub fn encoder_params(&self) -> &[ArrayD<T>] {
        &self.params.tensors[..self.head_index()]
    }

    pub fn encoder_checksum(&self) -> String {
        ParamSet::new(self.encoder_params().to_vec()).checksum()
    }

    /// Fresh `classes`-way head with fan-in uniform initialization.
    pub fn reset_head<R: Rng>(&mut self, classes: usize, rng: &mut R) {
        let (hw, hb) = init_head(self.encoder.feature_dim(), classes, rng);
        let i = self.head_index();
        self.params.tensors.truncate(i);
        self.params.tensors.push(hw);
        self.params.tensors.push(hb);
        self.classes = classes;
    }

    pub fn zero_head(&mut self) {
        let i = self.head_index();
        self.params.tensors[i].fill(T::zero());
        self.params.tensors[i + 1].fill(T::zero());
    }

    pub fn forward(&self, input: ArrayView4<T>) -> Result<Array2<T>> {
        Ok(self.forward_cached(input)?.logits)
    }

    pub fn forward_cached(&self, input: ArrayView4<T>) -> Result<ForwardCache<T>> {
        let i = self.head_index();
        let encoder = self.encoder.forward(&self.params.tensors[..i], input)?;
        let logits = linear(
            encoder.features.view(),
            &self.params.tensors[i],
            &self.params.tensors[i + 1],
        );
        Ok(ForwardCache { encoder, logits })
    }

    /// Parameter gradients for upstream gradient `dlogits`. With
    /// `head_only`, encoder gradients are left at zero and not computed.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        dlogits: ArrayView2<T>,
        head_only: bool,
    ) -> ParamSet<T> {
        let mut grads = self.params.zeros_like();
        let i = self.head_index();
        let dfeat = linear_backward(
            cache.encoder.features.view(),
            &self.params.tensors[i],
            dlogits,
            &mut grads.tensors[i..],
        );
        if !head_only {
            self.encoder.backward(
                &self.params.tensors[..i],
                &cache.encoder,
                dfeat.view(),
                &mut grads.tensors[..i],
            );
        }
        grads
    }

    pub fn cast<U: Scalar>(&self) -> Classifier<U> {
        Classifier {
            encoder: self.encoder.clone(),
            classes: self.classes,
            role: self.role,
            params: self.params.cast(),
        }
    }
}

pub(crate) fn init_head<T: Scalar, R: Rng>(
    features: usize,
    classes: usize,
    rng: &mut R,
) -> (ArrayD<T>, ArrayD<T>) {
    let bound = 1.0 / (features.max(1) as f64).sqrt();
    let w = ArrayD::from_shape_simple_fn(IxDyn(&[classes, features]), || {
        T::from_f64_lossy(rng.random_range(-bound..bound))
    });
    (w, ArrayD::zeros(IxDyn(&[classes])))
}

pub(crate) fn linear<T: Scalar>(x: ArrayView2<T>, w: &ArrayD<T>, b: &ArrayD<T>) -> Array2<T> {
    let mut out = x.dot(&as2(w).t());
    out += &as1(b);
    out
}

/// Accumulates weight/bias gradients into `grads[0..2]`, returns dL/dx.
pub(crate) fn linear_backward<T: Scalar>(
    x: ArrayView2<T>,
    w: &ArrayD<T>,
    dout: ArrayView2<T>,
    grads: &mut [ArrayD<T>],
) -> Array2<T> {
    let dw = dout.t().dot(&x);
    let db = dout.sum_axis(Axis(0));
    {
        let mut gw = grads[0].view_mut().into_dimensionality::<Ix2>().unwrap();
        gw += &dw;
        let mut gb = grads[1].view_mut().into_dimensionality::<Ix1>().unwrap();
        gb += &db;
    }
    dout.dot(&as2(w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learning::stream_rng;
    use ndarray::Array4;

    fn random_input(b: usize, c: usize, h: usize, w: usize, seed: u64) -> Array4<f64> {
        let mut rng = stream_rng(seed, "input");
        Array4::from_shape_simple_fn((b, c, h, w), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn logits_shape_for_various_sizes() {
        let mut rng = stream_rng(1, "init");
        let model = Classifier::<f64>::new(Architecture::default(), 3, 5, Role::Source, &mut rng)
            .unwrap();
        for (h, w) in [(16, 16), (1, 1), (7, 13), (32, 20)] {
            let z = model.forward(random_input(2, 3, h, w, 3).view()).unwrap();
            assert_eq!(z.dim(), (2, 5));
        }
    }

    #[test]
    fn param_count_matches_architecture() {
        let mut rng = stream_rng(1, "init");
        let arch = Architecture::default();
        let model = Classifier::<f32>::new(arch.clone(), 6, 4, Role::Target, &mut rng).unwrap();
        assert_eq!(model.param_count(), arch.param_count(6, 4));
        // 16*54+16 + 32*144+32 + 64*288+64 + 65*4
        assert_eq!(arch.param_count(6, 4), 880 + 4640 + 18496 + 260);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let mut rng = stream_rng(1, "init");
        let model =
            Classifier::<f64>::new(Architecture::default(), 3, 2, Role::AuxSar, &mut rng).unwrap();
        let err = model.forward(random_input(1, 6, 8, 8, 0).view()).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn zero_head_gives_uniform_softmax() {
        let mut rng = stream_rng(2, "init");
        let mut model =
            Classifier::<f64>::new(Architecture::default(), 3, 4, Role::Source, &mut rng).unwrap();
        model.zero_head();
        let z = model.forward(random_input(3, 3, 16, 16, 4).view()).unwrap();
        for row in z.outer_iter() {
            let p = crate::learning::softmax(&row.to_vec()).unwrap();
            assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn identical_inputs_give_identical_rows() {
        let mut rng = stream_rng(3, "init");
        let model =
            Classifier::<f32>::new(Architecture::default(), 3, 4, Role::Source, &mut rng).unwrap();
        let one = random_input(1, 3, 16, 16, 9).mapv(|x| x as f32);
        let batch = ndarray::concatenate(Axis(0), &[one.view(), one.view(), one.view()]).unwrap();
        let z = model.forward(batch.view()).unwrap();
        assert_eq!(z.row(0), z.row(1));
        assert_eq!(z.row(1), z.row(2));
    }

    #[test]
    fn head_only_backward_leaves_encoder_grads_zero() {
        let mut rng = stream_rng(4, "init");
        let model =
            Classifier::<f64>::new(Architecture::default(), 3, 3, Role::Source, &mut rng).unwrap();
        let x = random_input(2, 3, 8, 8, 1);
        let cache = model.forward_cached(x.view()).unwrap();
        let g = model.backward(&cache, Array2::ones((2, 3)).view(), true);
        let n_enc = model.encoder.tensor_count();
        assert!(g.tensors[..n_enc].iter().all(|t| t.iter().all(|&v| v == 0.0)));
        assert!(g.tensors[n_enc].iter().any(|&v| v != 0.0));
    }
}
