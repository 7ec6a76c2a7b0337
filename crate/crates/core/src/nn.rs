//! Composite layers: convolutions with parameters, instance normalization,
//! AdaIN, residual blocks, the AdaIN-parameter MLP, and resampling blocks.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, ReduceOp, Tape, Tensor, Var};

/// Epsilon inside every normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Negative slope of the leaky ReLU used in discriminators.
pub const LEAKY_SLOPE: f64 = 0.2;

fn he_normal<T: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            he_normal(vec![out_channels, in_channels, kernel, kernel], fan_in, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_channels]))?;
        Ok(Conv2d { weight, bias, stride, pad })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn out_channels<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        // Each output pixel sums roughly in_channels·(kernel/stride)² taps.
        let fan_in = (in_channels * kernel * kernel / (stride * stride)).max(1);
        let weight = store.add(
            format!("{name}.weight"),
            he_normal(vec![in_channels, out_channels, kernel, kernel], fan_in, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_channels]))?;
        Ok(ConvTranspose2d { weight, bias, stride, pad })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv_transpose2d(x, w, b, self.stride, self.pad)
    }
}

/// Fully connected layer, `y = x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), he_normal(vec![inputs, outputs], inputs, rng))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([outputs]))?;
        Ok(Linear { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add(xw, b)
    }

    pub fn widths<T: Scalar>(&self, store: &ParamStore<T>) -> (usize, usize) {
        let s = store.get(self.weight).shape();
        (s[0], s[1])
    }
}

/// Per-sample, per-channel standardization over the spatial axes. No affine.
pub fn instance_norm<T: Scalar>(tape: &mut Tape<T>, x: Var, eps: f64) -> Result<Var> {
    if tape.shape(x).len() != 4 {
        return Err(Error::shape(format!("instance_norm expects NCHW, got {:?}", tape.shape(x))));
    }
    let mean = tape.reduce(x, &[2, 3], ReduceOp::Mean)?;
    let var = tape.reduce(x, &[2, 3], ReduceOp::Var)?;
    let centered = tape.sub(x, mean)?;
    let shifted = tape.affine(var, 1.0, eps)?;
    let std = tape.sqrt(shifted)?;
    tape.div(centered, std)
}

/// Style modulation for one normalization site; both are `[N, C]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdaInParams {
    pub gamma: Var,
    pub beta: Var,
}

/// `gamma ⊙ instance_norm(x) + beta`, broadcast over the spatial axes.
pub fn adain<T: Scalar>(tape: &mut Tape<T>, x: Var, params: &AdaInParams, eps: f64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    for (label, v) in [("gamma", params.gamma), ("beta", params.beta)] {
        let s = tape.shape(v);
        if shape.len() != 4 || s.len() != 2 || s[1] != shape[1] || (s[0] != shape[0] && s[0] != 1) {
            return Err(Error::shape(format!("adain {label} {s:?} does not match input {shape:?}")));
        }
    }
    let normed = instance_norm(tape, x, eps)?;
    let gs = tape.shape(params.gamma)[0];
    let gamma = tape.reshape(params.gamma, &[gs, shape[1], 1, 1])?;
    let beta = tape.reshape(params.beta, &[gs, shape[1], 1, 1])?;
    let scaled = tape.mul(normed, gamma)?;
    tape.add(scaled, beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Instance,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidualBlockSpec {
    pub channels: usize,
    pub kernel: usize,
    pub norm: NormKind,
}

/// `x + norm(conv(relu(norm(conv(x)))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub spec: ResidualBlockSpec,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResidualBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, spec: ResidualBlockSpec, rng: &mut Rng) -> Result<Self> {
        if spec.kernel % 2 == 0 {
            return Err(Error::Config(format!("residual kernel must be odd, got {}", spec.kernel)));
        }
        let (c, k, p) = (spec.channels, spec.kernel, spec.kernel / 2);
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), c, c, k, 1, p, rng)?;
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), c, c, k, 1, p, rng)?;
        Ok(ResidualBlock { spec, conv1, conv2 })
    }

    /// Same convolutions, different normalization (used for weight sharing).
    pub fn sharing(&self, norm: NormKind) -> Self {
        ResidualBlock { spec: ResidualBlockSpec { norm, ..self.spec }, ..self.clone() }
    }

    fn norm<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, style: Option<&AdaInParams>) -> Result<Var> {
        match (self.spec.norm, style) {
            (NormKind::Instance, None) => instance_norm(tape, x, NORM_EPS),
            (NormKind::Adaptive, Some(p)) => adain(tape, x, p, NORM_EPS),
            (NormKind::Adaptive, None) => Err(Error::Config("adaptive residual block needs style parameters".into())),
            (NormKind::Instance, Some(_)) => Err(Error::Config("instance-norm residual block given style parameters".into())),
        }
    }

    /// `style` holds the two AdaIN sites of this block when `norm` is adaptive.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        style: Option<&[AdaInParams]>,
    ) -> Result<Var> {
        let c = tape.shape(x).get(1).copied();
        if c != Some(self.spec.channels) {
            return Err(Error::shape(format!(
                "residual block expects {} channels, input is {:?}",
                self.spec.channels,
                tape.shape(x)
            )));
        }
        let (s1, s2) = match style {
            Some([a, b]) => (Some(a), Some(b)),
            Some(other) => {
                return Err(Error::Config(format!("residual block needs 2 style sites, got {}", other.len())));
            }
            None => (None, None),
        };
        let h = self.conv1.forward(tape, store, x)?;
        let h = self.norm(tape, h, s1)?;
        let h = tape.relu(h)?;
        let h = self.conv2.forward(tape, store, h)?;
        let h = self.norm(tape, h, s2)?;
        tape.add(x, h)
    }
}

/// Layer widths of the AdaIN-parameter MLP, input first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
}

impl MlpSpec {
    /// Hidden layers of width `hidden`, output sized for `site_channels`.
    pub fn for_sites(style_dim: usize, hidden: usize, hidden_layers: usize, site_channels: &[usize]) -> Self {
        let mut widths = vec![style_dim];
        widths.extend(std::iter::repeat(hidden).take(hidden_layers));
        widths.push(2 * site_channels.iter().sum::<usize>());
        MlpSpec { widths }
    }
}

/// Maps a style code to AdaIN `(gamma, beta)` for every adaptive site.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub site_channels: Vec<usize>,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: &MlpSpec,
        site_channels: Vec<usize>,
        rng: &mut Rng,
    ) -> Result<Self> {
        if spec.widths.len() < 2 {
            return Err(Error::Config("mlp needs at least input and output widths".into()));
        }
        let out = *spec.widths.last().unwrap();
        if out != 2 * site_channels.iter().sum::<usize>() {
            return Err(Error::Config(format!(
                "mlp output width {out} != 2 × modulated channels {}",
                site_channels.iter().sum::<usize>()
            )));
        }
        let layers = spec
            .widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.fc{i}"), w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Mlp { layers, site_channels })
    }

    /// Raw output `[N, 2·Σ channels]`: relu between hidden layers, linear head.
    pub fn raw<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        let (din, _) = self.layers[0].widths(store);
        let zs = tape.shape(z).to_vec();
        if zs.len() != 2 || zs[1] != din {
            return Err(Error::shape(format!("mlp expects [N, {din}], got {zs:?}")));
        }
        let mut h = z;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Splits the raw output site by site: `[gamma−1 | beta]` per site, in order.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, z: Var) -> Result<Vec<AdaInParams>> {
        let raw = self.raw(tape, store, z)?;
        let mut offset = 0;
        let mut sites = Vec::with_capacity(self.site_channels.len());
        for &c in &self.site_channels {
            let g = tape.narrow(raw, 1, offset, c)?;
            let gamma = tape.affine(g, 1.0, 1.0)?;
            let beta = tape.narrow(raw, 1, offset + c, c)?;
            sites.push(AdaInParams { gamma, beta });
            offset += 2 * c;
        }
        Ok(sites)
    }
}

/// Stride-2 4×4 convolution, instance norm, ReLU: halves H and W.
#[derive(Debug, Clone, PartialEq)]
pub struct DownsampleBlock {
    pub conv: Conv2d,
}

impl DownsampleBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut Rng) -> Result<Self> {
        Ok(DownsampleBlock { conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, 4, 2, 1, rng)? })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::shape(format!("downsample needs even spatial dims, got {s:?}")));
        }
        let h = self.conv.forward(tape, store, x)?;
        let h = instance_norm(tape, h, NORM_EPS)?;
        tape.relu(h)
    }
}

/// Stride-2 4×4 transposed convolution, instance norm, ReLU: doubles H and W.
#[derive(Debug, Clone, PartialEq)]
pub struct UpsampleBlock {
    pub conv: ConvTranspose2d,
}

impl UpsampleBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut Rng) -> Result<Self> {
        Ok(UpsampleBlock { conv: ConvTranspose2d::new(store, &format!("{name}.deconv"), cin, cout, 4, 2, 1, rng)? })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.conv.forward(tape, store, x)?;
        let h = instance_norm(tape, h, NORM_EPS)?;
        tape.relu(h)
    }
}
