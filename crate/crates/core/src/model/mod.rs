//! The five sub-networks: content encoder, style encoder, AdaIN generator
//! (with its MLP), content discriminator and domain discriminator.
//!
//! The generator's first residual block reuses the convolution parameters of
//! the content encoder's last residual block; only the normalization differs
//! (instance norm in the encoder, AdaIN in the generator).

mod checkpoint;

use crate::error::{Error, Result};
use crate::losses::PROB_EPS;
use crate::nn::{
    instance_norm, Conv2d, DownsampleBlock, Linear, Mlp, MlpSpec, NormKind, ResidualBlock, ResidualBlockSpec,
    UpsampleBlock, LEAKY_SLOPE, NORM_EPS,
};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, ReduceOp, Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, OptimizerBlock, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Number of encoder convolution stages (stem + two downsamplers).
pub const ENCODER_CONV_LAYERS: usize = 3;
/// Residual blocks in the content encoder.
pub const ENCODER_RES_BLOCKS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub content_channels: usize,
    pub style_dim: usize,
    pub gen_res_blocks: usize,
    pub mlp_hidden: usize,
    /// Generator block 0 reuses the encoder's last residual block.
    pub share_weights: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            base_channels: 32,
            content_channels: 128,
            style_dim: 8,
            gen_res_blocks: 4,
            mlp_hidden: 128,
            share_weights: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if s < 16 || !s.is_power_of_two() {
            return Err(Error::Config(format!("image size must be a power of two ≥ 16, got {s}")));
        }
        for (name, v) in [
            ("base_channels", self.base_channels),
            ("content_channels", self.content_channels),
            ("style_dim", self.style_dim),
            ("gen_res_blocks", self.gen_res_blocks),
            ("mlp_hidden", self.mlp_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Channel count of every AdaIN site, in generator order.
    pub fn adain_sites(&self) -> Vec<usize> {
        vec![self.content_channels; 2 * self.gen_res_blocks]
    }
}

/// Spatial content feature map `[N, C_c, H/4, W/4]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContentCode(pub Var);

/// Diagonal Gaussian style posterior, each `[N, d_s]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StyleCode {
    pub mu: Var,
    pub log_var: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContentEncoder {
    pub stem: Conv2d,
    pub down: Vec<DownsampleBlock>,
    pub res: Vec<ResidualBlock>,
}

impl ContentEncoder {
    pub fn conv_layers(&self) -> usize {
        1 + self.down.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleEncoder {
    pub convs: Vec<Conv2d>,
    pub mu: Linear,
    pub log_var: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub mlp: Mlp,
    pub res: Vec<ResidualBlock>,
    pub up: Vec<UpsampleBlock>,
    pub out: Conv2d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub convs: Vec<Conv2d>,
    /// Whether conv `i` is followed by instance norm.
    pub normalized: Vec<bool>,
    pub head: Linear,
}

impl Discriminator {
    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (conv, &norm) in self.convs.iter().zip(&self.normalized) {
            h = conv.forward(tape, store, h)?;
            if norm {
                h = instance_norm(tape, h, NORM_EPS)?;
            }
            h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        }
        let pooled = global_avg_pool(tape, h)?;
        let logit = self.head.forward(tape, store, pooled)?;
        let n = tape.shape(logit)[0];
        let logit = tape.reshape(logit, &[n])?;
        let p = tape.sigmoid(logit)?;
        tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
    }
}

fn global_avg_pool<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let m = tape.reduce(x, &[2, 3], ReduceOp::Mean)?;
    tape.reshape(m, &[s[0], s[1]])
}

fn check_image<T: Scalar>(tape: &Tape<T>, x: Var, multiple: usize, what: &str) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 4 || s[1] != 1 || s[2] % multiple != 0 || s[3] % multiple != 0 {
        return Err(Error::shape(format!(
            "{what} expects [N,1,H,W] with H, W divisible by {multiple}, got {s:?}"
        )));
    }
    Ok(())
}

/// All parameters plus the layer handles that read them.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub content_enc: ContentEncoder,
    pub style_enc: StyleEncoder,
    pub generator: Generator,
    pub content_disc: Discriminator,
    pub domain_disc: Discriminator,
}

pub const CONTENT_ENC: &str = "content_enc";
pub const STYLE_ENC: &str = "style_enc";
pub const GENERATOR: &str = "generator";
pub const MLP: &str = "mlp";
pub const CONTENT_DISC: &str = "content_disc";
pub const DOMAIN_DISC: &str = "domain_disc";

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derive(seed, 0x6d6f_6465_6c);
        let mut p = ParamStore::new();
        let b = config.base_channels;
        let cc = config.content_channels;
        let rng = &mut rng;

        let content_enc = ContentEncoder {
            stem: Conv2d::new(&mut p, &format!("{CONTENT_ENC}.stem"), 1, b, 7, 1, 3, rng)?,
            down: vec![
                DownsampleBlock::new(&mut p, &format!("{CONTENT_ENC}.down0"), b, 2 * b, rng)?,
                DownsampleBlock::new(&mut p, &format!("{CONTENT_ENC}.down1"), 2 * b, cc, rng)?,
            ],
            res: (0..ENCODER_RES_BLOCKS)
                .map(|i| {
                    let spec = ResidualBlockSpec { channels: cc, kernel: 3, norm: NormKind::Instance };
                    ResidualBlock::new(&mut p, &format!("{CONTENT_ENC}.res{i}"), spec, rng)
                })
                .collect::<Result<_>>()?,
        };

        let widths = [b, 2 * b, 4 * b, 4 * b];
        let mut cin = 1;
        let mut convs = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            convs.push(Conv2d::new(&mut p, &format!("{STYLE_ENC}.conv{i}"), cin, w, 4, 2, 1, rng)?);
            cin = w;
        }
        let style_enc = StyleEncoder {
            convs,
            mu: Linear::new(&mut p, &format!("{STYLE_ENC}.mu"), cin, config.style_dim, rng)?,
            log_var: Linear::new(&mut p, &format!("{STYLE_ENC}.log_var"), cin, config.style_dim, rng)?,
        };

        let sites = config.adain_sites();
        let mlp_spec = MlpSpec::for_sites(config.style_dim, config.mlp_hidden, 2, &sites);
        let mlp = Mlp::new(&mut p, MLP, &mlp_spec, sites, rng)?;
        let mut res = Vec::with_capacity(config.gen_res_blocks);
        for i in 0..config.gen_res_blocks {
            if i == 0 && config.share_weights {
                res.push(content_enc.res.last().expect("encoder has residual blocks").sharing(NormKind::Adaptive));
            } else {
                let spec = ResidualBlockSpec { channels: cc, kernel: 3, norm: NormKind::Adaptive };
                res.push(ResidualBlock::new(&mut p, &format!("{GENERATOR}.res{i}"), spec, rng)?);
            }
        }
        let generator = Generator {
            mlp,
            res,
            up: vec![
                UpsampleBlock::new(&mut p, &format!("{GENERATOR}.up0"), cc, 2 * b, rng)?,
                UpsampleBlock::new(&mut p, &format!("{GENERATOR}.up1"), 2 * b, b, rng)?,
            ],
            out: Conv2d::new(&mut p, &format!("{GENERATOR}.out"), b, 1, 7, 1, 3, rng)?,
        };

        let content_disc = Discriminator {
            convs: vec![
                Conv2d::new(&mut p, &format!("{CONTENT_DISC}.conv0"), cc, 2 * b, 3, 2, 1, rng)?,
                Conv2d::new(&mut p, &format!("{CONTENT_DISC}.conv1"), 2 * b, 2 * b, 3, 2, 1, rng)?,
            ],
            normalized: vec![false, false],
            head: Linear::new(&mut p, &format!("{CONTENT_DISC}.head"), 2 * b, 1, rng)?,
        };
        let domain_disc = Discriminator {
            convs: vec![
                Conv2d::new(&mut p, &format!("{DOMAIN_DISC}.conv0"), 1, b, 4, 2, 1, rng)?,
                Conv2d::new(&mut p, &format!("{DOMAIN_DISC}.conv1"), b, 2 * b, 4, 2, 1, rng)?,
                Conv2d::new(&mut p, &format!("{DOMAIN_DISC}.conv2"), 2 * b, 4 * b, 4, 2, 1, rng)?,
            ],
            normalized: vec![false, true, true],
            head: Linear::new(&mut p, &format!("{DOMAIN_DISC}.head"), 4 * b, 1, rng)?,
        };

        Ok(Model { config, params: p, content_enc, style_enc, generator, content_disc, domain_disc })
    }

    /// Image batch `[N,1,H,W]` to content code `[N, C_c, H/4, W/4]`.
    pub fn encode_content(&self, tape: &mut Tape<T>, x: Var) -> Result<ContentCode> {
        check_image(tape, x, 4, "content encoder")?;
        let p = &self.params;
        let enc = &self.content_enc;
        let h = enc.stem.forward(tape, p, x)?;
        let h = instance_norm(tape, h, NORM_EPS)?;
        let mut h = tape.relu(h)?;
        for d in &enc.down {
            h = d.forward(tape, p, h)?;
        }
        for r in &enc.res {
            h = r.forward(tape, p, h, None)?;
        }
        Ok(ContentCode(h))
    }

    pub fn encode_style(&self, tape: &mut Tape<T>, y: Var) -> Result<StyleCode> {
        check_image(tape, y, 16, "style encoder")?;
        let p = &self.params;
        let mut h = y;
        for conv in &self.style_enc.convs {
            h = conv.forward(tape, p, h)?;
            h = tape.relu(h)?;
        }
        let pooled = global_avg_pool(tape, h)?;
        let mu = self.style_enc.mu.forward(tape, p, pooled)?;
        let log_var = self.style_enc.log_var.forward(tape, p, pooled)?;
        Ok(StyleCode { mu, log_var })
    }

    /// Content code plus style vector `[N, d_s]` to an image in `[0, 1]`.
    pub fn generate(&self, tape: &mut Tape<T>, content: ContentCode, z: Var) -> Result<Var> {
        let (cs, zs) = (tape.shape(content.0).to_vec(), tape.shape(z).to_vec());
        if cs.len() != 4 || cs[1] != self.config.content_channels {
            return Err(Error::shape(format!("generator expects content code [N,{},h,w], got {cs:?}", self.config.content_channels)));
        }
        if zs.len() != 2 || zs[0] != cs[0] {
            return Err(Error::shape(format!("style batch {zs:?} does not match content batch {cs:?}")));
        }
        let p = &self.params;
        let g = &self.generator;
        let sites = g.mlp.forward(tape, p, z)?;
        let mut h = content.0;
        for (i, block) in g.res.iter().enumerate() {
            h = block.forward(tape, p, h, Some(&sites[2 * i..2 * i + 2]))?;
        }
        for up in &g.up {
            h = up.forward(tape, p, h)?;
        }
        let h = g.out.forward(tape, p, h)?;
        let h = tape.tanh(h)?;
        tape.affine(h, 0.5, 0.5)
    }

    /// Probability `[N]` that each content code came from a real content image.
    pub fn discriminate_content(&self, tape: &mut Tape<T>, code: ContentCode) -> Result<Var> {
        let s = tape.shape(code.0);
        if s.len() != 4 || s[1] != self.config.content_channels {
            return Err(Error::shape(format!("content discriminator expects [N,{},h,w], got {s:?}", self.config.content_channels)));
        }
        self.content_disc.forward(tape, &self.params, code.0)
    }

    /// Probability `[N]` that each image is a real style-domain image.
    pub fn discriminate_domain(&self, tape: &mut Tape<T>, img: Var) -> Result<Var> {
        check_image(tape, img, 8, "domain discriminator")?;
        self.domain_disc.forward(tape, &self.params, img)
    }

    fn ids_with_prefix<'a>(&'a self, prefixes: &'a [&'a str]) -> impl Iterator<Item = ParamId> + 'a {
        self.params
            .iter()
            .filter(move |(_, p)| prefixes.iter().any(|pre| p.name.starts_with(&format!("{pre}."))))
            .map(|(id, _)| id)
    }

    /// Encoders, generator and MLP (the generator-phase optimizer group).
    pub fn generator_params(&self) -> Vec<ParamId> {
        self.ids_with_prefix(&[CONTENT_ENC, STYLE_ENC, GENERATOR, MLP]).collect()
    }

    pub fn discriminator_params(&self) -> Vec<ParamId> {
        self.ids_with_prefix(&[CONTENT_DISC, DOMAIN_DISC]).collect()
    }

    /// Copy where the generator's first block owns separate (equal-valued)
    /// parameters instead of sharing the encoder's.
    pub fn unshared(&self) -> Result<Model<T>> {
        let mut cfg = self.config;
        cfg.share_weights = false;
        let mut m = Model::<T>::new(cfg, 0)?;
        for (_, param) in self.params.iter() {
            let id = m.params.find(&param.name).expect("same architecture");
            m.params.set(id, param.value.clone())?;
        }
        if self.config.share_weights {
            let src = self.content_enc.res.last().unwrap();
            let dst = m.generator.res[0].clone();
            for (s, d) in [(&src.conv1, &dst.conv1), (&src.conv2, &dst.conv2)] {
                m.params.set(d.weight, self.params.get(s.weight).clone())?;
                m.params.set(d.bias, self.params.get(s.bias).clone())?;
            }
        }
        Ok(m)
    }

    /// Same architecture and values in another scalar type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut params = ParamStore::new();
        for (_, p) in self.params.iter() {
            params.add(p.name.clone(), p.value.cast()).expect("names already unique");
        }
        Model {
            config: self.config,
            params,
            content_enc: self.content_enc.clone(),
            style_enc: self.style_enc.clone(),
            generator: self.generator.clone(),
            content_disc: self.content_disc.clone(),
            domain_disc: self.domain_disc.clone(),
        }
    }
}

/// Reparameterized draw `mu + exp(log_var / 2) ⊙ ε`, `ε ~ N(0, I)`.
pub fn sample_style<T: Scalar>(tape: &mut Tape<T>, code: &StyleCode, rng: &mut Rng) -> Result<Var> {
    let shape = tape.shape(code.mu).to_vec();
    let eps = tape.constant(Tensor::randn(shape, 1.0, rng));
    let half = tape.affine(code.log_var, 0.5, 0.0)?;
    let std = tape.exp(half)?;
    let noise = tape.mul(std, eps)?;
    tape.add(code.mu, noise)
}

/// Standard-normal style vectors `[batch, style_dim]`.
pub fn sample_prior<T: Scalar>(batch: usize, style_dim: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    if batch == 0 || style_dim == 0 {
        return Err(Error::Config("sample_prior needs batch ≥ 1 and style_dim ≥ 1".into()));
    }
    Ok(Tensor::randn([batch, style_dim], 1.0, rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { image_size: 16, base_channels: 4, content_channels: 8, style_dim: 3, gen_res_blocks: 4, mlp_hidden: 8, share_weights: true }
    }

    #[test]
    fn content_code_shape_default_config() {
        let m = Model::<f32>::new(ModelConfig::default(), 1).unwrap();
        let mut tp = Tape::new();
        let x = tp.constant(Tensor::full([1, 1, 64, 64], 1.0));
        let c = m.encode_content(&mut tp, x).unwrap();
        assert_eq!(tp.shape(c.0), &[1, 128, 16, 16]);
        assert_eq!(m.content_enc.conv_layers(), 3);
        assert_eq!(m.content_enc.res.len(), 4);
    }

    #[test]
    fn indivisible_input_rejected() {
        let m = Model::<f32>::new(small(), 1).unwrap();
        let mut tp = Tape::new();
        let x = tp.constant(Tensor::zeros([1, 1, 18, 16]));
        assert!(matches!(m.encode_content(&mut tp, x), Err(Error::Shape(_))));
    }

    #[test]
    fn different_glyphs_give_different_codes() {
        let m = Model::<f64>::new(small(), 2).unwrap();
        let mut rng = Rng::new(3);
        let mut tp = Tape::new();
        let a = tp.constant(Tensor::uniform([1, 1, 16, 16], 0.0, 1.0, &mut rng));
        let b = tp.constant(Tensor::uniform([1, 1, 16, 16], 0.0, 1.0, &mut rng));
        let ca = m.encode_content(&mut tp, a).unwrap();
        let cb = m.encode_content(&mut tp, b).unwrap();
        assert!(tp.value(ca.0).max_abs_diff(tp.value(cb.0)) > 0.0);
    }

    #[test]
    fn style_code_shapes_and_zero_weights() {
        let mut m = Model::<f64>::new(small(), 4).unwrap();
        let mut rng = Rng::new(5);
        let mut tp = Tape::new();
        let y = tp.constant(Tensor::uniform([3, 1, 16, 16], 0.0, 1.0, &mut rng));
        let s = m.encode_style(&mut tp, y).unwrap();
        assert_eq!(tp.shape(s.mu), &[3, 3]);
        assert_eq!(tp.shape(s.log_var), &[3, 3]);

        let ids: Vec<_> = m.params.iter().filter(|(_, p)| p.name.starts_with("style_enc.") && p.name.ends_with(".weight")).map(|(id, _)| id).collect();
        for id in ids {
            let z = Tensor::zeros(m.params.get(id).shape().to_vec());
            m.params.set(id, z).unwrap();
        }
        let bias = Tensor::from_f64([3], &[0.5, -1.0, 2.0]).unwrap();
        m.params.set(m.style_enc.mu.bias, bias.clone()).unwrap();
        let mut tp = Tape::new();
        let y = tp.constant(Tensor::uniform([2, 1, 16, 16], 0.0, 1.0, &mut rng));
        let s = m.encode_style(&mut tp, y).unwrap();
        assert_eq!(tp.value(s.mu).data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn sample_style_limits() {
        let mut tp = Tape::<f32>::new();
        let mu = tp.constant(Tensor::from_f64([1, 3], &[0.3, -1.2, 2.0]).unwrap());
        let lv = tp.constant(Tensor::full([1, 3], -80.0));
        let z = sample_style(&mut tp, &StyleCode { mu, log_var: lv }, &mut Rng::new(1)).unwrap();
        assert_eq!(tp.value(z).data(), tp.value(mu).data());

        let mu = tp.constant(Tensor::zeros([1, 3]));
        let lv = tp.constant(Tensor::zeros([1, 3]));
        let z = sample_style(&mut tp, &StyleCode { mu, log_var: lv }, &mut Rng::new(9)).unwrap();
        let raw: Tensor<f32> = Tensor::randn([1, 3], 1.0, &mut Rng::new(9));
        assert_eq!(tp.value(z).data(), raw.data());
    }

    #[test]
    fn sample_style_monte_carlo() {
        let mut tp = Tape::<f64>::new();
        let mu = tp.constant(Tensor::full([10_000, 1], 1.0));
        let lv = tp.constant(Tensor::zeros([10_000, 1]));
        let z = sample_style(&mut tp, &StyleCode { mu, log_var: lv }, &mut Rng::new(21)).unwrap();
        let d = tp.value(z).data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        assert!((mean - 1.0).abs() < 0.05 && (std - 1.0).abs() < 0.05, "{mean} {std}");
    }

    #[test]
    fn prior_draws() {
        let a: Tensor<f64> = sample_prior(10_000, 1, &mut Rng::new(5)).unwrap();
        let b: Tensor<f64> = sample_prior(10_000, 1, &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[10_000, 1]);
        let d = a.data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64;
        assert!(mean.abs() < 0.05 && (var - 1.0).abs() < 0.05);
        assert!(sample_prior::<f32>(0, 3, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn generator_shape_range_and_style_sensitivity() {
        let cfg = ModelConfig { image_size: 64, ..small() };
        let m = Model::<f32>::new(cfg, 6).unwrap();
        let mut rng = Rng::new(7);
        let mut tp = Tape::new();
        let code = tp.constant(Tensor::randn([2, 8, 16, 16], 1.0, &mut rng));
        let z1 = tp.constant(Tensor::randn([2, 3], 1.0, &mut rng));
        let z2 = tp.constant(Tensor::randn([2, 3], 1.0, &mut rng));
        let g1 = m.generate(&mut tp, ContentCode(code), z1).unwrap();
        let g2 = m.generate(&mut tp, ContentCode(code), z2).unwrap();
        assert_eq!(tp.shape(g1), &[2, 1, 64, 64]);
        assert!(tp.value(g1).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let diff = tp.value(g1).data().iter().zip(tp.value(g2).data()).map(|(a, b)| (a - b).abs()).sum::<f32>();
        assert!(diff > 0.0);
        let zbad = tp.constant(Tensor::zeros([3, 3]));
        assert!(matches!(m.generate(&mut tp, ContentCode(code), zbad), Err(Error::Shape(_))));
    }

    #[test]
    fn discriminators_output_probabilities() {
        let m = Model::<f32>::new(small(), 8).unwrap();
        let mut rng = Rng::new(9);
        let mut tp = Tape::new();
        let code = tp.constant(Tensor::randn([3, 8, 4, 4], 5.0, &mut rng));
        let p = m.discriminate_content(&mut tp, ContentCode(code)).unwrap();
        assert_eq!(tp.shape(p), &[3]);
        assert!(tp.value(p).data().iter().all(|&v| v > 0.0 && v < 1.0));
        let img = Tensor::uniform([2, 1, 16, 16], 0.0, 1.0, &mut rng);
        let a = tp.constant(img.clone());
        let pa = m.discriminate_domain(&mut tp, a).unwrap();
        let b = tp.constant(img);
        let pb = m.discriminate_domain(&mut tp, b).unwrap();
        assert_eq!(tp.shape(pa), &[2]);
        assert_eq!(tp.value(pa), tp.value(pb));
        assert!(tp.value(pa).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn weight_sharing_reuses_parameter_ids() {
        let m = Model::<f32>::new(small(), 10).unwrap();
        let enc_last = m.content_enc.res.last().unwrap();
        let gen_first = &m.generator.res[0];
        assert_eq!(enc_last.conv1, gen_first.conv1);
        assert_eq!(enc_last.conv2, gen_first.conv2);
        assert_eq!(gen_first.spec.norm, NormKind::Adaptive);
        assert!(m.params.find("generator.res0.conv1.weight").is_none());
        let u = m.unshared().unwrap();
        assert!(u.params.find("generator.res0.conv1.weight").is_some());
        assert_ne!(u.generator.res[0].conv1, u.content_enc.res[3].conv1);
    }

    #[test]
    fn parameter_groups_partition_store() {
        let m = Model::<f32>::new(small(), 11).unwrap();
        let g = m.generator_params();
        let d = m.discriminator_params();
        assert_eq!(g.len() + d.len(), m.params.len());
        assert!(g.iter().all(|id| !d.contains(id)));
    }
}
