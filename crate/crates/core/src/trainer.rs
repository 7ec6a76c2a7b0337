//! Alternating adversarial training over unpaired X/Y batches.
//!
//! Each step first updates both discriminators on detached copies of the
//! generator's outputs, then updates the encoders, MLP and generator against
//! the freshly updated discriminators.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::glyph::{images_to_tensor, montage, tensor_to_images, Corpus, Domain, GlyphImage};
use crate::losses::{
    content_adv_loss_g, content_disc_loss, domain_disc_loss, domain_gen_loss, kl_loss, total_loss, LossBreakdown, LossWeights,
    LOSS_CSV_HEADER,
};
use crate::model::{load_checkpoint, sample_prior, sample_style, save_checkpoint, Checkpoint, ContentCode, Model, ModelConfig};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor};

pub const HISTORY_LEN: usize = 256;
pub const CONFIG_FILE: &str = "config.tsv";
pub const LOSS_FILE: &str = "losses.csv";
pub const SAMPLES_DIR: &str = "samples";
pub const PROBE_ROWS: usize = 4;
pub const PROBE_COLS: usize = 4;
const MONTAGE_GAP: usize = 2;
const MONTAGE_FILL: f32 = 0.5;

const STREAM_MODEL: u64 = 0x11;
const STREAM_TRAIN: u64 = 0x22;
const STREAM_PROBE: u64 = 0x33;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub epochs: u64,
    /// Total step cap, counted across resumes.
    pub iterations: u64,
    pub batch: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub sample_every: u64,
    pub corpus: PathBuf,
    pub run_dir: PathBuf,
    pub resume: Option<PathBuf>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            epochs: 50,
            iterations: 2000,
            batch: 8,
            seed: 0,
            checkpoint_every: 500,
            sample_every: 500,
            corpus: PathBuf::from("corpus"),
            run_dir: PathBuf::from("run"),
            resume: None,
            model: ModelConfig::default(),
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value.trim().parse().map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.adam.lr)));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) || !(self.adam.eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be > 0".into()));
        }
        if self.batch == 0 || self.iterations == 0 || self.epochs == 0 {
            return Err(Error::Config("batch, iterations and epochs must all be >= 1".into()));
        }
        if self.checkpoint_every == 0 || self.sample_every == 0 {
            return Err(Error::Config("checkpoint and sample intervals must be >= 1".into()));
        }
        self.weights.validate()?;
        self.model.validate()
    }

    /// Assigns one `key = value` setting, using the keys of [`TrainConfig::to_tsv`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lr" => self.adam.lr = parse(key, value)?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.adam.eps = parse(key, value)?,
            "lambda_content" => self.weights.content = parse(key, value)?,
            "lambda_domain" => self.weights.domain = parse(key, value)?,
            "lambda_kl" => self.weights.kl = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "sample_every" => self.sample_every = parse(key, value)?,
            "corpus" => self.corpus = PathBuf::from(value),
            "run_dir" => self.run_dir = PathBuf::from(value),
            "resume" => self.resume = (!value.is_empty()).then(|| PathBuf::from(value)),
            "image_size" => self.model.image_size = parse(key, value)?,
            "base_channels" => self.model.base_channels = parse(key, value)?,
            "content_channels" => self.model.content_channels = parse(key, value)?,
            "style_dim" => self.model.style_dim = parse(key, value)?,
            "gen_res_blocks" => self.model.gen_res_blocks = parse(key, value)?,
            "mlp_hidden" => self.model.mlp_hidden = parse(key, value)?,
            "share_weights" => self.model.share_weights = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown training setting `{key}`"))),
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let m = &self.model;
        let rows: [(&str, String); 23] = [
            ("lr", self.adam.lr.to_string()),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("adam_eps", self.adam.eps.to_string()),
            ("lambda_content", self.weights.content.to_string()),
            ("lambda_domain", self.weights.domain.to_string()),
            ("lambda_kl", self.weights.kl.to_string()),
            ("epochs", self.epochs.to_string()),
            ("iterations", self.iterations.to_string()),
            ("batch", self.batch.to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("sample_every", self.sample_every.to_string()),
            ("corpus", self.corpus.display().to_string()),
            ("run_dir", self.run_dir.display().to_string()),
            ("resume", self.resume.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("image_size", m.image_size.to_string()),
            ("base_channels", m.base_channels.to_string()),
            ("content_channels", m.content_channels.to_string()),
            ("style_dim", m.style_dim.to_string()),
            ("gen_res_blocks", m.gen_res_blocks.to_string()),
            ("mlp_hidden", m.mlp_hidden.to_string()),
            ("share_weights", m.share_weights.to_string()),
        ];
        let mut s = String::new();
        for (k, v) in rows {
            writeln!(s, "{k}\t{v}").unwrap();
        }
        s
    }

    /// Applies every `key<TAB>value` line of `text` on top of `self`.
    /// Blank lines and lines starting with `#` are ignored.
    pub fn apply_tsv(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('\t')
                .ok_or_else(|| Error::Config(format!("line {}: expected key<TAB>value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }
}

/// Everything that evolves during training.
pub struct TrainState<T> {
    pub step: u64,
    pub model: Model<T>,
    pub opt_gen: AdamState<T>,
    pub opt_disc: AdamState<T>,
    pub rng: Rng,
    pub history: VecDeque<LossBreakdown<T>>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let model = Model::<T>::new(config, Rng::derive(seed, STREAM_MODEL).next_u64())?;
        Ok(Self::from_model(model, seed))
    }

    pub fn from_model(model: Model<T>, seed: u64) -> Self {
        let opt_gen = AdamState::new(&model.params, model.generator_params());
        let opt_disc = AdamState::new(&model.params, model.discriminator_params());
        TrainState { step: 0, model, opt_gen, opt_disc, rng: Rng::derive(seed, STREAM_TRAIN), history: VecDeque::new() }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, &[&self.opt_gen, &self.opt_disc], self.step, &self.rng)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = ck.to_model::<T>()?;
        let mut opts = ck.adam_states(&model)?;
        if opts.len() != 2 {
            return Err(Error::Checkpoint(format!("training checkpoint needs 2 optimizer blocks, found {}", opts.len())));
        }
        let opt_disc = opts.pop().unwrap();
        let opt_gen = opts.pop().unwrap();
        Ok(TrainState { step: ck.step, model, opt_gen, opt_disc, rng: ck.rng(), history: VecDeque::new() })
    }

    fn record(&mut self, b: LossBreakdown<T>) {
        if self.history.len() == HISTORY_LEN {
            self.history.pop_front();
        }
        self.history.push_back(b);
    }
}

fn non_finite<T: Scalar>(step: u64, term: &str, v: T) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("step {step}: loss term `{term}` is {v}")))
    }
}

/// Values produced by the shared forward pass that both phases reuse.
struct Forward {
    content: ContentCode,
    regen: ContentCode,
    generated: crate::tensor::Var,
    style: crate::model::StyleCode,
}

fn forward<T: Scalar>(state: &mut TrainState<T>, tape: &mut Tape<T>, x: &Tensor<T>, y: &Tensor<T>) -> Result<Forward> {
    let m = &state.model;
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let content = m.encode_content(tape, xv)?;
    let style = m.encode_style(tape, yv)?;
    let z = sample_style(tape, &style, &mut state.rng)?;
    let generated = m.generate(tape, content, z)?;
    let regen = m.encode_content(tape, generated)?;
    Ok(Forward { content, regen, generated, style })
}

/// Discriminator update on detached codes and images. Returns
/// `(content_disc, domain_disc)`.
pub fn discriminator_step<T: Scalar>(
    state: &mut TrainState<T>,
    codes: (&Tensor<T>, &Tensor<T>),
    images: (&Tensor<T>, &Tensor<T>),
    adam: &AdamConfig,
) -> Result<(T, T)> {
    let m = &state.model;
    let mut tape = Tape::new();
    tape.freeze(m.generator_params());
    let real_c = tape.constant(codes.0.clone());
    let fake_c = tape.constant(codes.1.clone());
    let real_y = tape.constant(images.0.clone());
    let fake_y = tape.constant(images.1.clone());
    let dcr = m.discriminate_content(&mut tape, ContentCode(real_c))?;
    let dcf = m.discriminate_content(&mut tape, ContentCode(fake_c))?;
    let ddr = m.discriminate_domain(&mut tape, real_y)?;
    let ddf = m.discriminate_domain(&mut tape, fake_y)?;
    let lc = content_disc_loss(&mut tape, dcr, dcf)?;
    let ld = domain_disc_loss(&mut tape, ddr, ddf)?;
    let (vc, vd) = (tape.value(lc).item(), tape.value(ld).item());
    non_finite(state.step + 1, "content_disc", vc)?;
    non_finite(state.step + 1, "domain_disc", vd)?;
    let sum = tape.add(lc, ld)?;
    let grads = tape.backward(sum)?;
    if !grads.all_finite() {
        return Err(Error::NonFinite(format!("step {}: discriminator gradient is non-finite", state.step + 1)));
    }
    adam_step(&mut state.model.params, &grads, &mut state.opt_disc, adam)?;
    Ok((vc, vd))
}

/// One full iteration; increments `state.step` on success.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    adam: &AdamConfig,
    weights: &LossWeights,
) -> Result<LossBreakdown<T>> {
    let mut tape = Tape::new();
    let f = forward(state, &mut tape, x, y)?;
    let codes = (tape.value(f.content.0).clone(), tape.value(f.regen.0).clone());
    let fake = tape.value(f.generated).clone();
    let (content_disc, domain_disc) = discriminator_step(state, (&codes.0, &codes.1), (y, &fake), adam)?;
    let mut b = generator_phase(state, tape, f, adam, weights)?;
    b.content_disc = content_disc;
    b.domain_disc = domain_disc;
    state.step += 1;
    state.record(b);
    Ok(b)
}

fn generator_phase<T: Scalar>(
    state: &mut TrainState<T>,
    mut tape: Tape<T>,
    f: Forward,
    adam: &AdamConfig,
    w: &LossWeights,
) -> Result<LossBreakdown<T>> {
    let m = &state.model;
    tape.freeze(m.discriminator_params());
    let dcr = m.discriminate_content(&mut tape, f.content)?;
    let dcf = m.discriminate_content(&mut tape, f.regen)?;
    let ddf = m.discriminate_domain(&mut tape, f.generated)?;
    let content_adv = content_adv_loss_g(&mut tape, dcr, dcf)?;
    let domain_adv = domain_gen_loss(&mut tape, ddf)?;
    let kl = kl_loss(&mut tape, &f.style)?;
    let (vc, vd, vk) = (tape.value(content_adv).item(), tape.value(domain_adv).item(), tape.value(kl).item());
    let step = state.step + 1;
    non_finite(step, "content_adv", vc)?;
    non_finite(step, "domain_adv", vd)?;
    non_finite(step, "kl", vk)?;
    let total = total_loss(vc, vd, vk, w);
    non_finite(step, "total", total)?;

    // content_adv is maximized, so it enters the minimized objective negated
    let a = tape.affine(content_adv, -w.content, 0.0)?;
    let b = tape.affine(domain_adv, w.domain, 0.0)?;
    let c = tape.affine(kl, w.kl, 0.0)?;
    let ab = tape.add(a, b)?;
    let objective = tape.add(ab, c)?;
    let grads = tape.backward(objective)?;
    if !grads.all_finite() {
        return Err(Error::NonFinite(format!("step {step}: generator gradient is non-finite")));
    }
    adam_step(&mut state.model.params, &grads, &mut state.opt_gen, adam)?;
    let zero = T::zero();
    Ok(LossBreakdown { content_adv: vc, domain_adv: vd, kl: vk, total, content_disc: zero, domain_disc: zero })
}

/// Generator-side update alone, with the discriminators left untouched.
pub fn generator_step<T: Scalar>(
    state: &mut TrainState<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    adam: &AdamConfig,
    weights: &LossWeights,
) -> Result<LossBreakdown<T>> {
    let mut tape = Tape::new();
    let f = forward(state, &mut tape, x, y)?;
    generator_phase(state, tape, f, adam, weights)
}

/// Where the style columns of a probe grid come from.
#[derive(Debug, Clone, Copy)]
pub enum StyleSource<'a> {
    /// `count` prior draws from a generator seeded with `seed`.
    Sampled { count: usize, seed: u64 },
    /// The style-encoder mean of each image.
    Reference(&'a [GlyphImage]),
}

/// Generated glyphs indexed `[content][style]`.
pub fn probe_images<T: Scalar>(model: &Model<T>, contents: &[GlyphImage], source: StyleSource<'_>) -> Result<Vec<Vec<GlyphImage>>> {
    if contents.is_empty() {
        return Err(Error::Config("probe needs at least one content glyph".into()));
    }
    let d = model.config.style_dim;
    let styles: Vec<Tensor<T>> = match source {
        StyleSource::Sampled { count: 0, .. } => return Err(Error::Config("sampled mode needs at least one style draw".into())),
        StyleSource::Reference([]) => return Err(Error::Config("reference mode needs at least one style image".into())),
        StyleSource::Sampled { count, seed } => {
            let mut rng = Rng::derive(seed, STREAM_PROBE);
            (0..count).map(|_| sample_prior(1, d, &mut rng)).collect::<Result<_>>()?
        }
        StyleSource::Reference(images) => {
            let mut tape = Tape::new();
            let refs: Vec<&GlyphImage> = images.iter().collect();
            let y = tape.constant(images_to_tensor::<T>(&refs)?);
            let mu = model.encode_style(&mut tape, y)?.mu;
            let all = tape.value(mu).clone();
            all.data().chunks(d).map(|row| Tensor::new([1, d], row.to_vec())).collect::<Result<_>>()?
        }
    };
    let rows = contents.len();
    let refs: Vec<&GlyphImage> = contents.iter().collect();
    let x = images_to_tensor::<T>(&refs)?;
    let mut grid = vec![Vec::with_capacity(styles.len()); rows];
    for z1 in &styles {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let code = model.encode_content(&mut tape, xv)?;
        let tiled: Vec<T> = (0..rows).flat_map(|_| z1.data().iter().copied()).collect();
        let z = tape.constant(Tensor::new([rows, d], tiled)?);
        let g = model.generate(&mut tape, code, z)?;
        for (r, img) in tensor_to_images(tape.value(g))?.into_iter().enumerate() {
            grid[r].push(img);
        }
    }
    Ok(grid)
}

/// Rows are contents, columns are style sources, 2-px separators at 0.5.
pub fn probe_grid<T: Scalar>(model: &Model<T>, contents: &[GlyphImage], source: StyleSource<'_>) -> Result<GlyphImage> {
    probe_montage(&probe_images(model, contents, source)?)
}

/// Lays out a `[content][style]` grid from [`probe_images`].
pub fn probe_montage(grid: &[Vec<GlyphImage>]) -> Result<GlyphImage> {
    let cols = grid.first().map_or(0, Vec::len);
    montage(&grid.iter().flatten().cloned().collect::<Vec<_>>(), cols, MONTAGE_GAP, MONTAGE_FILL)
}

/// Outcome of [`train`].
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps_run: u64,
    pub final_step: u64,
    pub final_checkpoint: PathBuf,
    pub losses_csv: PathBuf,
}

pub fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(format!("ckpt_{step}.bin"))
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Runs `min(iterations, epochs · ceil(|X| / batch))` total steps, writing
/// the run directory as it goes. Training is carried out in `T`; checkpoints
/// store 32-bit values.
pub fn train<T: Scalar>(cfg: &TrainConfig, mut log: impl FnMut(&str)) -> Result<TrainReport> {
    cfg.validate()?;
    let corpus = Corpus::open(&cfg.corpus)?;
    let canvas = corpus.manifest.canvas;
    let mut state = match &cfg.resume {
        Some(path) => {
            let st = TrainState::<T>::from_checkpoint(&load_checkpoint(path)?)?;
            if st.model.config != cfg.model {
                log(&format!("resuming with checkpoint model config {:?}", st.model.config));
            }
            st
        }
        None => TrainState::<T>::new(cfg.model, cfg.seed)?,
    };
    if state.model.config.image_size != canvas {
        return Err(Error::Config(format!("model image size {} does not match corpus canvas {canvas}", state.model.config.image_size)));
    }
    for d in [Domain::X, Domain::Y] {
        if cfg.batch > corpus.len(d) {
            return Err(Error::Config(format!("batch {} exceeds the {} images of domain {}", cfg.batch, corpus.len(d), d.tag())));
        }
    }

    let run = &cfg.run_dir;
    create_dir(run)?;
    create_dir(&run.join(SAMPLES_DIR))?;
    let cfg_path = run.join(CONFIG_FILE);
    std::fs::write(&cfg_path, cfg.to_tsv()).map_err(|e| Error::io(&cfg_path, e))?;
    let csv_path = run.join(LOSS_FILE);
    let appending = cfg.resume.is_some() && csv_path.exists();
    let file = if appending {
        OpenOptions::new().append(true).open(&csv_path)
    } else {
        File::create(&csv_path)
    }
    .map_err(|e| Error::io(&csv_path, e))?;
    let mut csv = BufWriter::new(file);
    let io = |e| Error::io(&csv_path, e);
    if !appending {
        writeln!(csv, "{LOSS_CSV_HEADER}").map_err(io)?;
    }

    let steps_per_epoch = corpus.len(Domain::X).div_ceil(cfg.batch) as u64;
    let max_steps = cfg.iterations.min(cfg.epochs.saturating_mul(steps_per_epoch));
    let probe_contents: Vec<GlyphImage> = (0..PROBE_ROWS.min(corpus.len(Domain::X))).map(|k| corpus.image(Domain::X, k).0.clone()).collect();
    let start = state.step;
    let mut last_saved = None;

    while state.step < max_steps {
        let (xb, _) = corpus.sample_batch(Domain::X, cfg.batch, &mut state.rng)?;
        let (yb, _) = corpus.sample_batch(Domain::Y, cfg.batch, &mut state.rng)?;
        let x = images_to_tensor::<T>(&xb)?;
        let y = images_to_tensor::<T>(&yb)?;
        let b = match train_step(&mut state, &x, &y, &cfg.adam, &cfg.weights) {
            Ok(b) => b,
            Err(e @ Error::NonFinite(_)) => {
                csv.flush().map_err(io)?;
                let path = run.join(format!("ckpt_{}_nonfinite.bin", state.step));
                save_checkpoint(&path, &state.checkpoint())?;
                log(&format!("{e}; emergency checkpoint at {}", path.display()));
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        writeln!(csv, "{}", b.csv_row(state.step)).map_err(io)?;
        if state.step % cfg.checkpoint_every == 0 || state.step == max_steps {
            csv.flush().map_err(io)?;
            save_checkpoint(checkpoint_path(run, state.step), &state.checkpoint())?;
            last_saved = Some(state.step);
            log(&format!("step {} total {} content_disc {} domain_disc {}", state.step, b.total, b.content_disc, b.domain_disc));
        }
        if state.step % cfg.sample_every == 0 {
            let grid = probe_grid(&state.model, &probe_contents, StyleSource::Sampled { count: PROBE_COLS, seed: cfg.seed })?;
            crate::glyph::save_image(&grid, run.join(SAMPLES_DIR).join(format!("step_{}.pgm", state.step)))?;
        }
    }
    csv.flush().map_err(io)?;
    if last_saved != Some(state.step) {
        save_checkpoint(checkpoint_path(run, state.step), &state.checkpoint())?;
    }
    Ok(TrainReport { steps_run: state.step - start, final_step: state.step, final_checkpoint: checkpoint_path(run, state.step), losses_csv: csv_path })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glyph::{build_corpus, CorpusConfig};
    use crate::losses::parse_csv_row;

    fn tiny() -> ModelConfig {
        ModelConfig { image_size: 16, base_channels: 2, content_channels: 4, style_dim: 2, gen_res_blocks: 2, mlp_hidden: 4, share_weights: true }
    }

    fn batch(seed: u64) -> Tensor<f64> {
        Tensor::uniform([2, 1, 16, 16], 0.0, 1.0, &mut Rng::new(seed))
    }

    fn snapshot(m: &Model<f64>, ids: &[crate::tensor::ParamId]) -> Vec<Vec<f64>> {
        ids.iter().map(|&id| m.params.get(id).to_vec()).collect()
    }

    #[test]
    fn step_counter_and_phase_isolation() {
        let mut st = TrainState::<f64>::new(tiny(), 1).unwrap();
        let (g, d) = (st.model.generator_params(), st.model.discriminator_params());
        let (x, y) = (batch(1), batch(2));
        let mut tape = Tape::new();
        let f = forward(&mut st, &mut tape, &x, &y).unwrap();
        let codes = (tape.value(f.content.0).clone(), tape.value(f.regen.0).clone());
        let fake = tape.value(f.generated).clone();
        let (g0, d0) = (snapshot(&st.model, &g), snapshot(&st.model, &d));
        discriminator_step(&mut st, (&codes.0, &codes.1), (&y, &fake), &AdamConfig::default()).unwrap();
        assert_eq!(snapshot(&st.model, &g), g0);
        assert_ne!(snapshot(&st.model, &d), d0);
        let d1 = snapshot(&st.model, &d);
        generator_phase(&mut st, tape, f, &AdamConfig::default(), &LossWeights::default()).unwrap();
        assert_eq!(snapshot(&st.model, &d), d1);
        assert_ne!(snapshot(&st.model, &g), g0);

        for k in 1..=3 {
            train_step(&mut st, &x, &y, &AdamConfig::default(), &LossWeights::default()).unwrap();
            assert_eq!(st.step, k);
        }
        assert_eq!(st.opt_gen.step, 4);
        assert_eq!(st.history.len(), 3);
    }

    #[test]
    fn half_probability_discriminators() {
        let mut st = TrainState::<f64>::new(tiny(), 2).unwrap();
        for disc in [st.model.content_disc.head.clone(), st.model.domain_disc.head.clone()] {
            for id in [disc.weight, disc.bias] {
                let shape = st.model.params.get(id).shape().to_vec();
                st.model.params.set(id, Tensor::zeros(shape)).unwrap();
            }
        }
        let b = generator_step(&mut st, &batch(3), &batch(4), &AdamConfig::default(), &LossWeights::default()).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((b.content_adv + 2.0 * ln2).abs() < 1e-12);
        assert!((b.domain_adv - ln2).abs() < 1e-12);
        assert!((b.total - (-2.0 * ln2 + ln2 + 0.01 * b.kl)).abs() < 1e-12);
        assert!(b.kl >= 0.0);
    }

    #[test]
    fn config_tsv_round_trip() {
        let mut c = TrainConfig { seed: 9, iterations: 33, resume: Some("r/ckpt_5.bin".into()), ..TrainConfig::default() };
        c.adam.lr = 3e-4;
        c.model.share_weights = false;
        let mut back = TrainConfig::default();
        back.apply_tsv(&c.to_tsv()).unwrap();
        assert_eq!(back, c);
        assert!(back.set("bogus", "1").is_err());
        assert!(back.set("batch", "x").is_err());
        assert!(TrainConfig { batch: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { adam: AdamConfig { lr: 0.0, ..AdamConfig::default() }, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn probe_layout_and_reference_determinism() {
        let m = Model::<f64>::new(tiny(), 5).unwrap();
        let contents: Vec<GlyphImage> = (0..3).map(|s| tensor_to_images(&batch(s)).unwrap().remove(0)).collect();
        let grid = probe_grid(&m, &contents, StyleSource::Sampled { count: 4, seed: 1 }).unwrap();
        assert_eq!((grid.height, grid.width), (3 * 16 + 2 * 2, 4 * 16 + 3 * 2));
        let style = contents[0].clone();
        let cells = probe_images(&m, &contents, StyleSource::Reference(&[style.clone(), style])).unwrap();
        for row in &cells {
            assert_eq!(row[0], row[1]);
        }
        assert!(probe_images(&m, &contents, StyleSource::Reference(&[])).is_err());
        assert!(probe_images(&m, &contents, StyleSource::Sampled { count: 0, seed: 0 }).is_err());
    }

    fn corpus(dir: &Path) {
        build_corpus(&CorpusConfig { canvas: 16, skeletons: 4, y_styles: 2, seed: 3 }, dir).unwrap();
    }

    fn run_cfg(corpus: &Path, run: &Path, iterations: u64) -> TrainConfig {
        TrainConfig {
            iterations,
            epochs: 1000,
            batch: 2,
            seed: 11,
            checkpoint_every: 3,
            sample_every: 4,
            corpus: corpus.into(),
            run_dir: run.into(),
            model: tiny(),
            ..TrainConfig::default()
        }
    }

    fn rows(path: &Path) -> Vec<String> {
        std::fs::read_to_string(path).unwrap().lines().skip(1).map(String::from).collect()
    }

    #[test]
    fn run_directory_and_resume() {
        let tmp = tempfile::tempdir().unwrap();
        let c = tmp.path().join("c");
        corpus(&c);
        let a = run_cfg(&c, &tmp.path().join("a"), 5);
        let rep = train::<f32>(&a, |_| {}).unwrap();
        assert_eq!(rep.steps_run, 5);
        let ra = rows(&rep.losses_csv);
        assert_eq!(ra.len(), 5);
        for (i, r) in ra.iter().enumerate() {
            let (step, b) = parse_csv_row::<f32>(r).unwrap();
            assert_eq!(step, i as u64 + 1);
            assert_eq!(b.total, total_loss(b.content_adv, b.domain_adv, b.kl, &LossWeights::default()));
        }
        assert!(checkpoint_path(&a.run_dir, 3).exists());
        assert!(checkpoint_path(&a.run_dir, 5).exists());
        assert!(a.run_dir.join("samples/step_4.pgm").exists());
        assert!(a.run_dir.join(CONFIG_FILE).exists());

        let resumed = TrainConfig { iterations: 8, resume: Some(checkpoint_path(&a.run_dir, 5)), ..a.clone() };
        train::<f32>(&resumed, |_| {}).unwrap();
        let rr = rows(&a.run_dir.join(LOSS_FILE));
        assert_eq!(rr.len(), 8);
        assert!(rr[5].starts_with("6,"));

        let unbroken = run_cfg(&c, &tmp.path().join("b"), 8);
        let rb = rows(&train::<f32>(&unbroken, |_| {}).unwrap().losses_csv);
        assert_eq!(rr, rb);
    }

    #[test]
    fn epochs_cap_and_missing_corpus() {
        let tmp = tempfile::tempdir().unwrap();
        let c = tmp.path().join("c");
        corpus(&c);
        // 4 X images at batch 2 → 2 steps per epoch
        let cfg = TrainConfig { epochs: 2, ..run_cfg(&c, &tmp.path().join("r"), 100) };
        assert_eq!(train::<f32>(&cfg, |_| {}).unwrap().final_step, 4);
        let missing = run_cfg(&tmp.path().join("nope"), &tmp.path().join("r2"), 5);
        assert!(train::<f32>(&missing, |_| {}).is_err());
        assert!(!tmp.path().join("r2").exists());
    }
}
