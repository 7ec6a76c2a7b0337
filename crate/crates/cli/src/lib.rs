//! Argument handling and command drivers behind the `glyphgen` binary.
//!
//! Every command resolves its settings in three layers: built-in defaults,
//! then the `key<TAB>value` file named by `--config`, then explicit flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use glyphgen::glyph::{build_corpus, load_image, save_image, CorpusConfig, CorpusManifest, GlyphImage};
use glyphgen::metrics::{eval_pairs, SsimConfig};
use glyphgen::model::load_checkpoint;
use glyphgen::trainer::{self, probe_images, probe_montage, StyleSource, TrainConfig};
use glyphgen::verify::{gradcheck_suite, SuiteConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const MONTAGE_FILE: &str = "montage.pgm";

#[derive(Parser, Debug)]
#[command(name = "glyphgen", version, about = "Unpaired content/style glyph generation")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, or output file for `eval` and `gradcheck`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Settings file of `key<TAB>value` lines; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the procedural two-domain glyph corpus.
    SynthData(SynthArgs),
    /// Train the model on a corpus.
    Train(TrainArgs),
    /// Render glyphs from a checkpoint with sampled or reference styles.
    Generate(GenerateArgs),
    /// Compare same-named images in two directories with SSIM and PSNR.
    Eval(EvalArgs),
    /// Finite-difference verification of every op, layer, network and loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Default)]
pub struct SynthArgs {
    #[arg(long)]
    pub skeletons: Option<usize>,
    /// Number of target-domain styles.
    #[arg(long)]
    pub styles: Option<usize>,
    /// Canvas side in pixels.
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Total step cap.
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub sample_every: Option<u64>,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Any training setting as `key=value`, e.g. `--set base_channels=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Styles drawn from the prior.
    Sample,
    /// Styles taken from the encoder mean of reference images.
    Reference,
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        <Mode as ValueEnum>::from_str(s, true)
    }
}

#[derive(Args, Debug, Default)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Content glyphs: PGM files or directories of them.
    #[arg(long, num_args = 1..)]
    pub content: Vec<PathBuf>,
    /// Reference style glyphs: PGM files or directories of them.
    #[arg(long, num_args = 1..)]
    pub styles: Vec<PathBuf>,
    /// Number of prior draws in sample mode.
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct EvalArgs {
    #[arg(long)]
    pub a: Option<PathBuf>,
    #[arg(long)]
    pub b: Option<PathBuf>,
    /// File-name pattern with `*` and `?`.
    #[arg(long)]
    pub pattern: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct GradcheckArgs {
    /// Image side of the checked networks.
    #[arg(long)]
    pub size: Option<usize>,
    /// Corrupts one op's backward rule so the harness can be seen to fail.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Failure(_) => EXIT_FAILURE,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failure(m) => f.write_str(m),
        }
    }
}

impl From<glyphgen::Error> for CliError {
    fn from(e: glyphgen::Error) -> Self {
        CliError::Failure(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Values from a `--config` file, consumed key by key.
#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut values = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('\t').ok_or_else(|| usage(format!("config line {}: expected key<TAB>value", n + 1)))?;
            values.insert(k.trim().to_string(), v.to_string());
        }
        Ok(Settings { values })
    }

    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Settings::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
                Settings::parse(&text)
            }
        }
    }

    /// Flag value if given, else the config value for `key`.
    fn pick<V: FromStr>(&mut self, key: &str, flag: Option<V>) -> CliResult<Option<V>> {
        let from_file = self.values.remove(key);
        if flag.is_some() {
            return Ok(flag);
        }
        match from_file {
            None => Ok(None),
            Some(v) => v.trim().parse().map(Some).map_err(|_| usage(format!("bad config value `{v}` for `{key}`"))),
        }
    }

    fn pick_paths(&mut self, key: &str, flag: Vec<PathBuf>) -> Vec<PathBuf> {
        let from_file = self.values.remove(key);
        if !flag.is_empty() {
            return flag;
        }
        from_file.map(|v| v.split(',').map(|s| PathBuf::from(s.trim())).filter(|p| !p.as_os_str().is_empty()).collect()).unwrap_or_default()
    }

    fn finish(self, command: &str) -> CliResult<()> {
        match self.values.keys().next() {
            None => Ok(()),
            Some(k) => Err(usage(format!("unknown config key `{k}` for {command}"))),
        }
    }
}

fn required<V>(v: Option<V>, flag: &str) -> CliResult<V> {
    v.ok_or_else(|| usage(format!("missing required flag --{flag}")))
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run_from<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let mut settings = Settings::load(cli.config.as_deref())?;
    let seed = settings.pick("seed", cli.seed)?;
    let out: Option<PathBuf> = settings.pick("out", cli.out)?;
    match cli.command {
        Command::SynthData(a) => synth_data(a, seed, out, settings),
        Command::Train(a) => train(a, seed, out, settings),
        Command::Generate(a) => generate(a, seed, out, settings),
        Command::Eval(a) => eval(a, out, settings),
        Command::Gradcheck(a) => gradcheck(a, seed, out, settings),
    }
}

fn synth_data(a: SynthArgs, seed: Option<u64>, out: Option<PathBuf>, mut s: Settings) -> CliResult<()> {
    let d = CorpusConfig::default();
    let cfg = CorpusConfig {
        canvas: s.pick("size", a.size)?.unwrap_or(d.canvas),
        skeletons: s.pick("skeletons", a.skeletons)?.unwrap_or(d.skeletons),
        y_styles: s.pick("styles", a.styles)?.unwrap_or(d.y_styles),
        seed: seed.unwrap_or(d.seed),
    };
    s.finish("synth-data")?;
    let out = required(out, "out")?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let manifest = build_corpus(&cfg, &out)?;
    println!(
        "wrote {} images ({} skeletons, {} target styles, {}px) to {}",
        manifest.records.len(),
        cfg.skeletons,
        cfg.y_styles,
        cfg.canvas,
        out.display()
    );
    Ok(())
}

fn train(a: TrainArgs, seed: Option<u64>, out: Option<PathBuf>, s: Settings) -> CliResult<()> {
    let mut cfg = TrainConfig::default();
    let mut size_given = false;
    for (k, v) in &s.values {
        size_given |= k == "image_size";
        cfg.set(k, v).map_err(|e| usage(e.to_string()))?;
    }
    for kv in &a.sets {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        size_given |= k == "image_size";
        cfg.set(k.trim(), v.trim()).map_err(|e| usage(e.to_string()))?;
    }
    let has_corpus = a.corpus.is_some() || s.values.contains_key("corpus");
    let has_out = out.is_some() || s.values.contains_key("run_dir");
    if let Some(v) = seed {
        cfg.seed = v;
    }
    if let Some(v) = out {
        cfg.run_dir = v;
    }
    if let Some(v) = a.corpus {
        cfg.corpus = v;
    }
    if let Some(v) = a.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch {
        cfg.batch = v;
    }
    if let Some(v) = a.lr {
        cfg.adam.lr = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if let Some(v) = a.sample_every {
        cfg.sample_every = v;
    }
    if a.resume.is_some() {
        cfg.resume = a.resume;
    }
    if !has_corpus {
        return Err(usage("missing required flag --corpus"));
    }
    if !has_out {
        return Err(usage("missing required flag --out"));
    }
    if !size_given {
        // Follow the corpus canvas unless a size was asked for.
        if let Ok(m) = CorpusManifest::read(&cfg.corpus) {
            cfg.model.image_size = m.canvas;
        }
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let report = trainer::train::<f32>(&cfg, |line| println!("{line}"))?;
    println!(
        "ran {} steps, now at step {}; checkpoint {}",
        report.steps_run,
        report.final_step,
        report.final_checkpoint.display()
    );
    Ok(())
}

/// Expands directories into their sorted `.pgm` files.
fn image_paths(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| CliError::Failure(format!("{}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "pgm"))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn load_all(paths: &[PathBuf]) -> CliResult<Vec<GlyphImage>> {
    paths.iter().map(|p| load_image(p).map_err(CliError::from)).collect()
}

/// File name of the glyph for content `c` under style `s`.
pub fn glyph_file(c: usize, s: usize) -> String {
    format!("glyph_c{c:03}_s{s:03}.pgm")
}

fn generate(a: GenerateArgs, seed: Option<u64>, out: Option<PathBuf>, mut s: Settings) -> CliResult<()> {
    let ckpt: Option<PathBuf> = s.pick("ckpt", a.ckpt)?;
    let mode = s.pick("mode", a.mode)?.unwrap_or(Mode::Sample);
    let content = s.pick_paths("content", a.content);
    let styles = s.pick_paths("styles", a.styles);
    let samples = s.pick("samples", a.samples)?.unwrap_or(4);
    s.finish("generate")?;
    let ckpt = required(ckpt, "ckpt")?;
    let out = required(out, "out")?;
    if content.is_empty() {
        return Err(usage("missing required flag --content"));
    }
    match mode {
        Mode::Reference if styles.is_empty() => return Err(usage("reference mode needs --styles")),
        Mode::Sample if samples == 0 => return Err(usage("--samples must be positive")),
        _ => {}
    }

    let model = load_checkpoint(&ckpt)?.to_model::<f32>()?;
    let contents = load_all(&image_paths(&content)?)?;
    if contents.is_empty() {
        return Err(CliError::Failure("no content images found".into()));
    }
    let size = model.config.image_size;
    for img in &contents {
        if (img.width, img.height) != (size, size) {
            return Err(CliError::Failure(format!("content image is {}x{}, model expects {size}x{size}", img.width, img.height)));
        }
    }
    let style_images;
    let source = match mode {
        Mode::Sample => StyleSource::Sampled { count: samples, seed: seed.unwrap_or(0) },
        Mode::Reference => {
            style_images = load_all(&image_paths(&styles)?)?;
            StyleSource::Reference(&style_images)
        }
    };
    let grid = probe_images(&model, &contents, source)?;
    std::fs::create_dir_all(&out).map_err(|e| CliError::Failure(format!("{}: {e}", out.display())))?;
    for (c, row) in grid.iter().enumerate() {
        for (k, img) in row.iter().enumerate() {
            save_image(img, out.join(glyph_file(c, k)))?;
        }
    }
    save_image(&probe_montage(&grid)?, out.join(MONTAGE_FILE))?;
    println!("wrote {} glyphs and {} to {}", grid.len() * grid[0].len(), MONTAGE_FILE, out.display());
    Ok(())
}

fn eval(a: EvalArgs, out: Option<PathBuf>, mut s: Settings) -> CliResult<()> {
    let dir_a: Option<PathBuf> = s.pick("a", a.a)?;
    let dir_b: Option<PathBuf> = s.pick("b", a.b)?;
    let pattern = s.pick("pattern", a.pattern)?.unwrap_or_else(|| "*.pgm".to_string());
    s.finish("eval")?;
    let (dir_a, dir_b) = (required(dir_a, "a")?, required(dir_b, "b")?);
    let report = eval_pairs(&dir_a, &dir_b, &pattern, &SsimConfig::default())?;
    match &out {
        Some(p) => report.write_csv(p)?,
        None => print!("{}", report.to_csv()),
    }
    match (report.ssim_summary(), report.psnr_summary()) {
        (Some(ss), Some(ps)) => eprintln!("{} pairs: mean ssim {:.6}, mean psnr {:.3} dB", report.rows.len(), ss.mean, ps.mean),
        _ => eprintln!("no pairs"),
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs, seed: Option<u64>, out: Option<PathBuf>, mut s: Settings) -> CliResult<()> {
    let d = SuiteConfig::default();
    let cfg = SuiteConfig {
        image_size: s.pick("size", a.size)?.unwrap_or(d.image_size),
        seed: seed.unwrap_or(d.seed),
        fault: a.inject_fault,
    };
    s.finish("gradcheck")?;
    let results = gradcheck_suite(&cfg)?;
    let mut text = String::new();
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        text.push_str(&format!("{:<32} {:>12.3e}  < {:.0e}  {verdict}\n", r.component, r.max_error, r.threshold));
    }
    print!("{text}");
    if let Some(p) = &out {
        std::fs::write(p, &text).map_err(|e| CliError::Failure(format!("{}: {e}", p.display())))?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.component.as_str()).collect();
    if failed.is_empty() {
        println!("all {} components passed", results.len());
        Ok(())
    } else {
        Err(CliError::Failure(format!("gradient check failed for {}", failed.join(", "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("glyphgen").chain(args.iter().copied()))
    }

    #[test]
    fn synth_example_parses() {
        let cli = parse(&["synth-data", "--skeletons", "10", "--styles", "4", "--size", "32", "--seed", "7", "--out", "corpus/"]).unwrap();
        assert_eq!(cli.seed, Some(7));
        assert_eq!(cli.out.as_deref(), Some(Path::new("corpus/")));
        match cli.command {
            Command::SynthData(a) => assert_eq!((a.skeletons, a.styles, a.size), (Some(10), Some(4), Some(32))),
            other => panic!("parsed as {other:?}"),
        }
    }

    #[test]
    fn common_flags_go_before_or_after_the_command() {
        let cli = parse(&["--seed", "3", "gradcheck"]).unwrap();
        assert_eq!(cli.seed, Some(3));
        let cli = parse(&["gradcheck", "--seed", "3"]).unwrap();
        assert_eq!(cli.seed, Some(3));
    }

    #[test]
    fn unknown_flags_and_values_are_usage_errors() {
        assert_eq!(parse(&["train", "--bogus", "1"]).unwrap_err().exit_code(), EXIT_USAGE);
        assert_eq!(parse(&["synth-data", "--size", "big"]).unwrap_err().exit_code(), EXIT_USAGE);
        assert_eq!(parse(&["generate", "--mode", "dream"]).unwrap_err().exit_code(), EXIT_USAGE);
        assert_eq!(parse(&[]).unwrap_err().exit_code(), EXIT_USAGE);
        assert_eq!(parse(&["--help"]).unwrap_err().exit_code(), EXIT_OK);
    }

    #[test]
    fn flags_override_config_values() {
        let mut s = Settings::parse("size\t32\nskeletons\t5\n# note\n\n").unwrap();
        assert_eq!(s.pick("size", Some(16usize)).unwrap(), Some(16));
        assert_eq!(s.pick::<usize>("skeletons", None).unwrap(), Some(5));
        assert_eq!(s.pick::<usize>("styles", None).unwrap(), None);
        s.finish("synth-data").unwrap();
    }

    #[test]
    fn config_errors_are_usage_errors() {
        assert!(matches!(Settings::parse("size 32"), Err(CliError::Usage(_))));
        let mut s = Settings::parse("size\tbig").unwrap();
        assert!(matches!(s.pick::<usize>("size", None), Err(CliError::Usage(_))));
        let s = Settings::parse("colour\tred").unwrap();
        let err = s.finish("eval").unwrap_err();
        assert!(err.to_string().contains("colour"));
    }

    #[test]
    fn missing_required_flag_is_named() {
        let cli = parse(&["generate", "--mode", "sample"]).unwrap();
        let err = run(cli).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_USAGE);
        assert!(err.to_string().contains("--ckpt"), "{err}");
    }

    #[test]
    fn mode_parses_from_config_text() {
        assert_eq!("reference".parse::<Mode>().unwrap(), Mode::Reference);
        assert!("other".parse::<Mode>().is_err());
    }
}
