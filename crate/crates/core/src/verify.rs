//! Finite-difference gradient suite over every differentiable op, layer,
//! sub-network and loss. Primitive ops are checked in both `f32` and `f64`;
//! layers, sub-networks and losses run in `f64`.

use crate::error::Result;
use crate::losses::{content_adv_loss_g, content_disc_loss, domain_disc_loss, domain_gen_loss, kl_loss};
use crate::model::{ContentCode, Model, ModelConfig, StyleCode};
use crate::nn::{
    adain, instance_norm, AdaInParams, Conv2d, ConvTranspose2d, DownsampleBlock, Linear, Mlp, MlpSpec, NormKind, ResidualBlock,
    ResidualBlockSpec, UpsampleBlock, NORM_EPS,
};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{grad_check, grad_check_at, ParamId, ParamStore, ReduceOp, Tape, Tensor, Var};

pub const TOL_F32: f64 = 1e-3;
pub const TOL_F64: f64 = 1e-5;
pub const TOL_COMPOSITE: f64 = 1e-3;

/// Parameter elements sampled per checked parameter tensor.
const PARAM_SAMPLES: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub component: String,
    pub max_error: f64,
    pub threshold: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error < self.threshold
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub image_size: usize,
    pub seed: u64,
    /// Op whose backward rule is corrupted on every analytic tape.
    pub fault: Option<String>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig { image_size: 16, seed: 0, fault: None }
    }
}

/// Sub-network widths used by the suite.
pub fn suite_model_config(image_size: usize) -> ModelConfig {
    ModelConfig { image_size, base_channels: 4, content_channels: 8, style_dim: 4, gen_res_blocks: 4, mlp_hidden: 8, share_weights: true }
}

struct Suite<'a> {
    cfg: &'a SuiteConfig,
    rng: Rng,
    out: Vec<CheckResult>,
}

/// `Σ wᵢ yᵢ` with fixed weights in ±[1, 2), so every output element matters.
fn probe<T: Scalar>(tape: &mut Tape<T>, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<T> = (0..n).map(|i| T::lit((1.0 + (i % 7) as f64 / 7.0) * if i % 3 == 1 { -1.0 } else { 1.0 })).collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

/// Values with magnitude in [0.2, 1.2), away from the relu and clamp kinks.
fn off_kink(shape: &[usize], rng: &mut Rng) -> Vec<f64> {
    let n: usize = shape.iter().product();
    (0..n).map(|_| (0.2 + rng.uniform()) * if rng.uniform() < 0.5 { -1.0 } else { 1.0 }).collect()
}

fn tensor<T: Scalar>(shape: &[usize], values: &[f64]) -> Tensor<T> {
    Tensor::from_f64(shape.to_vec(), values).expect("shape matches values")
}

impl Suite<'_> {
    fn fault<T: Scalar>(&self, tape: &mut Tape<T>) {
        if let Some(op) = &self.cfg.fault {
            tape.inject_fault(op);
        }
    }

    fn push(&mut self, component: impl Into<String>, max_error: f64, threshold: f64) {
        self.out.push(CheckResult { component: component.into(), max_error, threshold });
    }

    /// Max error of `f` w.r.t. each of `inputs` in turn, the others held constant.
    fn multi<T: Scalar>(&self, inputs: &[Vec<f64>], shapes: &[&[usize]], eps: f64, f: &dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>) -> Result<f64> {
        let mut worst = 0.0f64;
        for k in 0..inputs.len() {
            let at = tensor::<T>(shapes[k], &inputs[k]);
            let err = grad_check(
                |tp: &mut Tape<T>, x| {
                    self.fault(tp);
                    let vars: Vec<Var> = (0..inputs.len())
                        .map(|j| if j == k { x } else { tp.constant(tensor(shapes[j], &inputs[j])) })
                        .collect();
                    let y = f(tp, &vars)?;
                    probe(tp, y)
                },
                &at,
                eps,
            )?;
            worst = worst.max(err);
        }
        Ok(worst)
    }

    fn primitives<T: Scalar>(&mut self, tol: f64, eps_smooth: f64, eps_linear: f64) -> Result<()> {
        type Unary<T> = fn(&mut Tape<T>, Var) -> Result<Var>;
        let pos = |rng: &mut Rng, n: usize| (0..n).map(|_| 0.3 + rng.uniform()).collect::<Vec<f64>>();
        let unary: [(&str, Unary<T>, bool); 11] = [
            ("relu", |t, x| t.relu(x), false),
            ("leaky_relu", |t, x| t.leaky_relu(x, 0.2), false),
            ("tanh", |t, x| t.tanh(x), false),
            ("sigmoid", |t, x| t.sigmoid(x), false),
            ("exp", |t, x| t.exp(x), false),
            ("log", |t, x| t.log(x), true),
            ("sqrt", |t, x| t.sqrt(x), true),
            ("square", |t, x| t.square(x), false),
            ("negate", |t, x| t.neg(x), false),
            ("clamp", |t, x| t.clamp(x, -0.6, 0.6), false),
            ("affine", |t, x| t.affine(x, -1.7, 0.3), false),
        ];
        for (name, op, positive) in unary {
            let shape = [2, 3];
            let mut x = if positive { pos(&mut self.rng, 6) } else { off_kink(&shape, &mut self.rng) };
            if name == "clamp" {
                // keep clear of both the bounds and zero
                x = x.iter().map(|v| if (v.abs() - 0.6).abs() < 0.05 { v * 0.5 } else { *v }).collect();
            }
            let e = self.multi::<T>(&[x], &[&shape], eps_smooth, &|t, v| op(t, v[0]))?;
            self.push(format!("{name}/{}", T::NAME), e, tol);
        }

        let a_shape: &[usize] = &[2, 3];
        let b_shape: &[usize] = &[1, 3];
        for (name, eps) in [("add", eps_linear), ("sub", eps_linear), ("mul", eps_smooth), ("div", eps_smooth)] {
            let a = off_kink(a_shape, &mut self.rng);
            let b = if name == "div" { pos(&mut self.rng, 3) } else { off_kink(b_shape, &mut self.rng) };
            let same = if name == "div" { pos(&mut self.rng, 6) } else { off_kink(a_shape, &mut self.rng) };
            let f = |t: &mut Tape<T>, v: &[Var]| match name {
                "add" => t.add(v[0], v[1]),
                "sub" => t.sub(v[0], v[1]),
                "mul" => t.mul(v[0], v[1]),
                _ => t.div(v[0], v[1]),
            };
            let e1 = self.multi::<T>(&[a.clone(), b], &[a_shape, b_shape], eps, &f)?;
            let e2 = self.multi::<T>(&[a, same], &[a_shape, a_shape], eps, &f)?;
            self.push(format!("{name}/{}", T::NAME), e1.max(e2), tol);
        }

        let ins = [off_kink(&[2, 3], &mut self.rng), off_kink(&[3, 4], &mut self.rng)];
        let e = self.multi::<T>(
            &ins,
            &[&[2, 3], &[3, 4]],
            eps_linear,
            &|t, v| t.matmul(v[0], v[1]),
        )?;
        self.push(format!("matmul/{}", T::NAME), e, tol);

        let ins = [off_kink(&[2, 2, 6, 5], &mut self.rng), off_kink(&[3, 2, 3, 3], &mut self.rng), off_kink(&[3], &mut self.rng)];
        let e = self.multi::<T>(
            &ins,
            &[&[2, 2, 6, 5], &[3, 2, 3, 3], &[3]],
            eps_linear,
            &|t, v| t.conv2d(v[0], v[1], v[2], 2, 1),
        )?;
        self.push(format!("conv2d/{}", T::NAME), e, tol);

        let ins = [off_kink(&[2, 2, 3, 4], &mut self.rng), off_kink(&[2, 3, 4, 4], &mut self.rng), off_kink(&[3], &mut self.rng)];
        let e = self.multi::<T>(
            &ins,
            &[&[2, 2, 3, 4], &[2, 3, 4, 4], &[3]],
            eps_linear,
            &|t, v| t.conv_transpose2d(v[0], v[1], v[2], 2, 1),
        )?;
        self.push(format!("conv_transpose2d/{}", T::NAME), e, tol);

        for (name, op, eps) in [("sum", ReduceOp::Sum, eps_linear), ("mean", ReduceOp::Mean, eps_linear), ("var", ReduceOp::Var, eps_smooth)] {
            let x = off_kink(&[2, 3, 4], &mut self.rng);
            let e1 = self.multi::<T>(&[x.clone()], &[&[2, 3, 4]], eps, &|t, v| t.reduce(v[0], &[1, 2], op))?;
            let e2 = self.multi::<T>(&[x], &[&[2, 3, 4]], eps, &|t, v| t.reduce(v[0], &[0], op))?;
            self.push(format!("{name}/{}", T::NAME), e1.max(e2), tol);
        }

        let x = off_kink(&[2, 6], &mut self.rng);
        let e = self.multi::<T>(&[x.clone()], &[&[2, 6]], eps_linear, &|t, v| t.reshape(v[0], &[3, 4]))?;
        self.push(format!("reshape/{}", T::NAME), e, tol);
        let e = self.multi::<T>(&[x], &[&[2, 6]], eps_linear, &|t, v| t.narrow(v[0], 1, 1, 3))?;
        self.push(format!("narrow/{}", T::NAME), e, tol);
        Ok(())
    }

    /// Error of `fwd` w.r.t. a sample of the elements of each listed parameter.
    fn params(&mut self, store: &ParamStore<f64>, ids: &[ParamId], fwd: &dyn Fn(&mut Tape<f64>) -> Result<Var>) -> Result<f64> {
        let mut worst = 0.0f64;
        for &id in ids {
            let at = store.get(id).clone();
            let n = at.numel();
            let idx: Vec<usize> = if n <= PARAM_SAMPLES {
                (0..n).collect()
            } else {
                let mut all: Vec<usize> = (0..n).collect();
                self.rng.shuffle(&mut all);
                all.truncate(PARAM_SAMPLES);
                all
            };
            let err = grad_check_at(
                |tp: &mut Tape<f64>, x| {
                    self.fault(tp);
                    tp.override_param(id, x);
                    let y = fwd(tp)?;
                    probe(tp, y)
                },
                &at,
                EPS_COMPOSITE,
                &idx,
            )?;
            worst = worst.max(err);
        }
        Ok(worst)
    }

    fn input(&self, at: &Tensor<f64>, fwd: &dyn Fn(&mut Tape<f64>, Var) -> Result<Var>) -> Result<f64> {
        grad_check(
            |tp: &mut Tape<f64>, x| {
                self.fault(tp);
                let y = fwd(tp, x)?;
                probe(tp, y)
            },
            at,
            EPS_COMPOSITE,
        )
    }

    fn layers(&mut self) -> Result<()> {
        let mut store = ParamStore::<f64>::new();
        let rng = &mut self.rng.clone();
        let conv = Conv2d::new(&mut store, "conv", 2, 3, 3, 1, 1, rng)?;
        let convt = ConvTranspose2d::new(&mut store, "convt", 3, 2, 4, 2, 1, rng)?;
        let lin = Linear::new(&mut store, "lin", 5, 3, rng)?;
        let res_in = ResidualBlock::new(&mut store, "res_in", ResidualBlockSpec { channels: 3, kernel: 3, norm: NormKind::Instance }, rng)?;
        let res_ada = ResidualBlock::new(&mut store, "res_ada", ResidualBlockSpec { channels: 3, kernel: 3, norm: NormKind::Adaptive }, rng)?;
        let sites = vec![3, 3];
        let mlp = Mlp::new(&mut store, "mlp", &MlpSpec::for_sites(4, 6, 2, &sites), sites, rng)?;
        let down = DownsampleBlock::new(&mut store, "down", 2, 3, rng)?;
        let up = UpsampleBlock::new(&mut store, "up", 3, 2, rng)?;
        randomize_zeros(&mut store, rng)?;
        self.rng = rng.clone();

        let x = Tensor::<f64>::randn([2, 2, 6, 6], 1.0, &mut self.rng);
        let e = self.input(&x, &|t, x| conv.forward(t, &store, x))?.max(self.params(&store, &[conv.weight, conv.bias], &|t| {
            let x = t.constant(x.clone());
            conv.forward(t, &store, x)
        })?);
        self.push("layer/conv2d", e, TOL_COMPOSITE);

        let x3 = Tensor::<f64>::randn([2, 3, 3, 3], 1.0, &mut self.rng);
        let e = self.input(&x3, &|t, x| convt.forward(t, &store, x))?.max(self.params(&store, &[convt.weight, convt.bias], &|t| {
            let x = t.constant(x3.clone());
            convt.forward(t, &store, x)
        })?);
        self.push("layer/conv_transpose2d", e, TOL_COMPOSITE);

        let xl = Tensor::<f64>::randn([4, 5], 1.0, &mut self.rng);
        let e = self.input(&xl, &|t, x| lin.forward(t, &store, x))?.max(self.params(&store, &[lin.weight, lin.bias], &|t| {
            let x = t.constant(xl.clone());
            lin.forward(t, &store, x)
        })?);
        self.push("layer/linear", e, TOL_COMPOSITE);

        let xi = Tensor::<f64>::randn([2, 3, 4, 4], 1.0, &mut self.rng);
        let e = self.input(&xi, &|t, x| instance_norm(t, x, NORM_EPS))?;
        self.push("instance_norm", e, TOL_COMPOSITE);

        let gamma = Tensor::<f64>::randn([2, 3], 1.0, &mut self.rng);
        let beta = Tensor::<f64>::randn([2, 3], 1.0, &mut self.rng);
        let e = self.multi::<f64>(
            &[xi.to_f64_vec(), gamma.to_f64_vec(), beta.to_f64_vec()],
            &[&[2, 3, 4, 4], &[2, 3], &[2, 3]],
            EPS_COMPOSITE,
            &|t, v| adain(t, v[0], &AdaInParams { gamma: v[1], beta: v[2] }, NORM_EPS),
        )?;
        self.push("adain", e, TOL_COMPOSITE);

        // conv biases feeding a normalization have zero true gradient, so only weights are sampled
        let e = self.input(&xi, &|t, x| res_in.forward(t, &store, x, None))?.max(self.params(&store, &[res_in.conv1.weight, res_in.conv2.weight], &|t| {
            let x = t.constant(xi.clone());
            res_in.forward(t, &store, x, None)
        })?);
        self.push("residual_block/instance", e, TOL_COMPOSITE);

        let z = Tensor::<f64>::randn([2, 4], 1.0, &mut self.rng);
        let ada = |t: &mut Tape<f64>, x: Var, z: Var| {
            let style = mlp.forward(t, &store, z)?;
            res_ada.forward(t, &store, x, Some(&style))
        };
        let e_x = self.input(&xi, &|t, x| {
            let zc = t.constant(z.clone());
            ada(t, x, zc)
        })?;
        let e_z = self.input(&z, &|t, zv| {
            let xc = t.constant(xi.clone());
            ada(t, xc, zv)
        })?;
        let e_p = self.params(&store, &[res_ada.conv1.weight, res_ada.conv2.weight], &|t| {
            let (xc, zc) = (t.constant(xi.clone()), t.constant(z.clone()));
            ada(t, xc, zc)
        })?;
        self.push("residual_block/adaptive", e_x.max(e_z).max(e_p), TOL_COMPOSITE);

        let mlp_ids: Vec<ParamId> = mlp.layers.iter().flat_map(|l| [l.weight, l.bias]).collect();
        let e = self.input(&z, &|t, z| mlp.raw(t, &store, z))?.max(self.params(&store, &mlp_ids, &|t| {
            let zc = t.constant(z.clone());
            mlp.raw(t, &store, zc)
        })?);
        let e_gamma = self.input(&z, &|t, z| {
            let sites = mlp.forward(t, &store, z)?;
            let mut acc = t.sum_all(sites[0].gamma)?;
            for s in &sites[1..] {
                let g = t.sum_all(s.gamma)?;
                acc = t.add(acc, g)?;
            }
            Ok(acc)
        })?;
        self.push("mlp", e.max(e_gamma), TOL_COMPOSITE);

        let e = self.input(&x, &|t, x| down.forward(t, &store, x))?.max(self.params(&store, &[down.conv.weight], &|t| {
            let x = t.constant(x.clone());
            down.forward(t, &store, x)
        })?);
        self.push("downsample_block", e, TOL_COMPOSITE);

        let e = self.input(&x3, &|t, x| up.forward(t, &store, x))?.max(self.params(&store, &[up.conv.weight], &|t| {
            let x = t.constant(x3.clone());
            up.forward(t, &store, x)
        })?);
        self.push("upsample_block", e, TOL_COMPOSITE);
        Ok(())
    }

    fn networks(&mut self) -> Result<()> {
        let cfg = suite_model_config(self.cfg.image_size);
        let mut m = Model::<f64>::new(cfg, self.rng.next_u64())?;
        let mut rng = self.rng.clone();
        randomize_zeros(&mut m.params, &mut rng)?;
        self.rng = rng;
        let s = cfg.image_size;
        let img = Tensor::<f64>::uniform([2, 1, s, s], 0.0, 1.0, &mut self.rng);
        let (cc, q) = (cfg.content_channels, s / 4);
        let code = Tensor::<f64>::randn([2, cc, q, q], 1.0, &mut self.rng);
        let z = Tensor::<f64>::randn([2, cfg.style_dim], 1.0, &mut self.rng);
        let st = &m.params;

        let enc = &m.content_enc;
        let ids = [enc.stem.weight, enc.down[0].conv.weight, enc.down[1].conv.weight, enc.res[0].conv1.weight, enc.res[3].conv2.weight];
        let e = self.input(&img, &|t, x| Ok(m.encode_content(t, x)?.0))?.max(self.params(st, &ids, &|t| {
            let x = t.constant(img.clone());
            Ok(m.encode_content(t, x)?.0)
        })?);
        self.push("content_encoder", e, TOL_COMPOSITE);

        let style_out = |t: &mut Tape<f64>, x: Var| -> Result<Var> {
            let c = m.encode_style(t, x)?;
            let a = probe(t, c.mu)?;
            let b = probe(t, c.log_var)?;
            t.add(a, b)
        };
        let se = &m.style_enc;
        let ids = [se.convs[0].weight, se.convs[0].bias, se.convs[3].weight, se.mu.weight, se.mu.bias, se.log_var.weight, se.log_var.bias];
        let e = self.input(&img, &style_out)?.max(self.params(st, &ids, &|t| {
            let x = t.constant(img.clone());
            style_out(t, x)
        })?);
        self.push("style_encoder", e, TOL_COMPOSITE);

        let g = &m.generator;
        let gen = |t: &mut Tape<f64>, c: Var, z: Var| m.generate(t, ContentCode(c), z);
        let e_c = self.input(&code, &|t, c| {
            let zc = t.constant(z.clone());
            gen(t, c, zc)
        })?;
        let e_z = self.input(&z, &|t, zv| {
            let c = t.constant(code.clone());
            gen(t, c, zv)
        })?;
        let last = g.mlp.layers.last().unwrap();
        let ids = [last.weight, last.bias, g.mlp.layers[0].weight, g.res[1].conv1.weight, g.res[3].conv2.weight, g.up[0].conv.weight, g.out.weight, g.out.bias];
        let e_p = self.params(st, &ids, &|t| {
            let (c, zc) = (t.constant(code.clone()), t.constant(z.clone()));
            gen(t, c, zc)
        })?;
        self.push("generator", e_c.max(e_z).max(e_p), TOL_COMPOSITE);

        let cd = &m.content_disc;
        let ids = [cd.convs[0].weight, cd.convs[0].bias, cd.convs[1].weight, cd.head.weight, cd.head.bias];
        let e = self.input(&code, &|t, c| m.discriminate_content(t, ContentCode(c)))?.max(self.params(st, &ids, &|t| {
            let c = t.constant(code.clone());
            m.discriminate_content(t, ContentCode(c))
        })?);
        self.push("content_discriminator", e, TOL_COMPOSITE);

        let dd = &m.domain_disc;
        let ids = [dd.convs[0].weight, dd.convs[0].bias, dd.convs[2].weight, dd.head.weight, dd.head.bias];
        let e = self.input(&img, &|t, x| m.discriminate_domain(t, x))?.max(self.params(st, &ids, &|t| {
            let x = t.constant(img.clone());
            m.discriminate_domain(t, x)
        })?);
        self.push("domain_discriminator", e, TOL_COMPOSITE);
        Ok(())
    }

    fn losses(&mut self) -> Result<()> {
        let probs = |rng: &mut Rng| (0..4).map(|_| rng.uniform_range(0.05, 0.95)).collect::<Vec<f64>>();
        let (p, q) = (probs(&mut self.rng), probs(&mut self.rng));
        let sh: &[usize] = &[4];
        let e = self.multi::<f64>(&[p.clone(), q.clone()], &[sh, sh], EPS_COMPOSITE, &|t, v| content_adv_loss_g(t, v[0], v[1]))?;
        self.push("loss/content_adv", e, TOL_COMPOSITE);
        let e = self.multi::<f64>(&[p.clone(), q.clone()], &[sh, sh], EPS_COMPOSITE, &|t, v| content_disc_loss(t, v[0], v[1]))?;
        self.push("loss/content_disc", e, TOL_COMPOSITE);
        let e = self.multi::<f64>(&[p.clone(), q], &[sh, sh], EPS_COMPOSITE, &|t, v| domain_disc_loss(t, v[0], v[1]))?;
        self.push("loss/domain_disc", e, TOL_COMPOSITE);
        let e = self.multi::<f64>(&[p], &[sh], EPS_COMPOSITE, &|t, v| domain_gen_loss(t, v[0]))?;
        self.push("loss/domain_gen", e, TOL_COMPOSITE);
        let mu = Tensor::<f64>::randn([3, 4], 1.0, &mut self.rng).to_f64_vec();
        let lv = Tensor::<f64>::randn([3, 4], 0.5, &mut self.rng).to_f64_vec();
        let e = self.multi::<f64>(&[mu, lv], &[&[3, 4], &[3, 4]], EPS_COMPOSITE, &|t, v| kl_loss(t, &StyleCode { mu: v[0], log_var: v[1] }))?;
        self.push("loss/kl", e, TOL_COMPOSITE);
        Ok(())
    }
}

const EPS_COMPOSITE: f64 = 1e-6;

/// Gives every all-zero parameter (biases, the MLP output layer) small random
/// values so the checks see non-degenerate gradients.
fn randomize_zeros(store: &mut ParamStore<f64>, rng: &mut Rng) -> Result<()> {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let t = store.get(id);
        if t.data().iter().all(|&v| v == 0.0) {
            let fresh = Tensor::randn(t.shape().to_vec(), 0.1, rng);
            store.set(id, fresh)?;
        }
    }
    Ok(())
}

/// Every check, each component reported once.
pub fn gradcheck_suite(cfg: &SuiteConfig) -> Result<Vec<CheckResult>> {
    let mut s = Suite { cfg, rng: Rng::derive(cfg.seed, 0x6c), out: Vec::new() };
    s.primitives::<f32>(TOL_F32, 1e-2, 1e-1)?;
    s.primitives::<f64>(TOL_F64, 1e-5, 1e-3)?;
    s.layers()?;
    s.networks()?;
    s.losses()?;
    Ok(s.out)
}
