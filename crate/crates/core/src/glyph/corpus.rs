use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::{content_style, load_image, render_glyph, save_image, style_roster, synth_skeleton, GlyphImage, StyleSpec};

pub const MANIFEST_FILE: &str = "manifest.tsv";
const RECORD_HEADER: &str = "path\tskeleton_id\tstyle_id\tdomain";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    X,
    Y,
}

impl Domain {
    pub fn tag(self) -> &'static str {
        match self {
            Domain::X => "X",
            Domain::Y => "Y",
        }
    }

    pub fn parse(s: &str) -> Option<Domain> {
        match s {
            "X" => Some(Domain::X),
            "Y" => Some(Domain::Y),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusConfig {
    pub canvas: usize,
    pub skeletons: usize,
    pub y_styles: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { canvas: 64, skeletons: 10, y_styles: 4, seed: 0 }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.canvas < 16 || !self.canvas.is_power_of_two() {
            return Err(Error::Config(format!("canvas {} must be a power of two >= 16", self.canvas)));
        }
        if self.skeletons == 0 || self.y_styles == 0 {
            return Err(Error::Config("corpus needs at least one skeleton and one target style".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    /// Relative to the corpus root.
    pub path: String,
    pub skeleton_id: u64,
    pub style_id: usize,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub canvas: usize,
    pub skeletons: usize,
    pub seed: u64,
    pub x_styles: Vec<StyleSpec>,
    pub y_styles: Vec<StyleSpec>,
    pub records: Vec<ImageRecord>,
}

fn render_seed(seed: u64, domain: Domain, skeleton: u64, style: usize) -> u64 {
    let d = match domain {
        Domain::X => 0,
        Domain::Y => 1,
    };
    Rng::derive(seed, (d << 62) ^ (skeleton << 20) ^ style as u64).next_u64()
}

impl CorpusManifest {
    pub fn styles(&self, domain: Domain) -> &[StyleSpec] {
        match domain {
            Domain::X => &self.x_styles,
            Domain::Y => &self.y_styles,
        }
    }

    pub fn records_in(&self, domain: Domain) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.domain == domain)
    }

    /// Re-renders the image a record describes from the stored generator state.
    pub fn render(&self, rec: &ImageRecord) -> Result<GlyphImage> {
        let style = self
            .styles(rec.domain)
            .get(rec.style_id)
            .ok_or_else(|| Error::Config(format!("record {} names unknown style {}", rec.path, rec.style_id)))?;
        render_glyph(&synth_skeleton(rec.skeleton_id, self.seed), style, self.canvas, render_seed(self.seed, rec.domain, rec.skeleton_id, rec.style_id))
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("# glyph corpus manifest\n");
        writeln!(s, "# canvas\t{}", self.canvas).unwrap();
        writeln!(s, "# skeletons\t{}", self.skeletons).unwrap();
        writeln!(s, "# seed\t{}", self.seed).unwrap();
        for domain in [Domain::X, Domain::Y] {
            for (i, st) in self.styles(domain).iter().enumerate() {
                writeln!(
                    s,
                    "# style\t{}\t{i}\t{}\t{}\t{}\t{}\t{}",
                    domain.tag(),
                    st.stroke_width,
                    st.slant,
                    st.curvature,
                    st.taper,
                    st.noise_amp
                )
                .unwrap();
            }
        }
        s.push_str(RECORD_HEADER);
        s.push('\n');
        for r in &self.records {
            writeln!(s, "{}\t{}\t{}\t{}", r.path, r.skeleton_id, r.style_id, r.domain.tag()).unwrap();
        }
        s
    }

    /// Inverse of [`CorpusManifest::to_tsv`]; `path` is only used in errors.
    pub fn parse_tsv(text: &str, path: &Path) -> Result<Self> {
        let mut canvas = None;
        let mut skeletons = None;
        let mut seed = None;
        let mut x_styles = Vec::new();
        let mut y_styles = Vec::new();
        let mut records = Vec::new();
        let mut in_records = false;
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let at = offset;
            offset += line.len();
            let line = line.trim_end_matches(['\n', '\r']);
            let fail = |msg: String| Error::Parse { path: path.to_path_buf(), offset: at, msg };
            let num = |s: &str| s.parse::<f64>().map_err(|_| fail(format!("bad number `{s}`")));
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix("# ") {
                let f: Vec<&str> = meta.split('\t').collect();
                let int = |s: &str| s.parse::<u64>().map_err(|_| fail(format!("bad integer `{s}`")));
                match f[0] {
                    "canvas" if f.len() == 2 => canvas = Some(int(f[1])? as usize),
                    "skeletons" if f.len() == 2 => skeletons = Some(int(f[1])? as usize),
                    "seed" if f.len() == 2 => seed = Some(int(f[1])?),
                    "style" if f.len() == 8 => {
                        let domain = Domain::parse(f[1]).ok_or_else(|| fail(format!("unknown domain `{}`", f[1])))?;
                        let list = if domain == Domain::X { &mut x_styles } else { &mut y_styles };
                        if int(f[2])? as usize != list.len() {
                            return Err(fail(format!("style ids for {} out of order", f[1])));
                        }
                        let st = StyleSpec { stroke_width: num(f[3])?, slant: num(f[4])?, curvature: num(f[5])?, taper: num(f[6])?, noise_amp: num(f[7])? };
                        st.validate().map_err(|e| fail(e.to_string()))?;
                        list.push(st);
                    }
                    _ => {}
                }
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            if !in_records {
                if line != RECORD_HEADER {
                    return Err(fail(format!("expected header `{RECORD_HEADER}`")));
                }
                in_records = true;
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(fail(format!("record has {} fields, expected 4", f.len())));
            }
            records.push(ImageRecord {
                path: f[0].to_string(),
                skeleton_id: f[1].parse().map_err(|_| fail(format!("bad skeleton id `{}`", f[1])))?,
                style_id: f[2].parse().map_err(|_| fail(format!("bad style id `{}`", f[2])))?,
                domain: Domain::parse(f[3]).ok_or_else(|| fail(format!("unknown domain `{}`", f[3])))?,
            });
        }
        let missing = |k: &str| Error::Parse { path: path.to_path_buf(), offset, msg: format!("manifest lacks `{k}`") };
        Ok(CorpusManifest {
            canvas: canvas.ok_or_else(|| missing("canvas"))?,
            skeletons: skeletons.ok_or_else(|| missing("skeletons"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            x_styles,
            y_styles,
            records,
        })
    }

    pub fn read(root: impl AsRef<Path>) -> Result<Self> {
        let path = root.as_ref().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse_tsv(&text, &path)
    }
}

/// Renders every skeleton in the content style (domain X) and in every
/// roster style (domain Y), writing images and the manifest under `out`.
pub fn build_corpus(cfg: &CorpusConfig, out: impl AsRef<Path>) -> Result<CorpusManifest> {
    cfg.validate()?;
    let out = out.as_ref();
    let mut manifest = CorpusManifest {
        canvas: cfg.canvas,
        skeletons: cfg.skeletons,
        seed: cfg.seed,
        x_styles: vec![content_style(cfg.canvas)],
        y_styles: style_roster(cfg.y_styles, cfg.canvas, cfg.seed),
        records: Vec::new(),
    };
    for domain in [Domain::X, Domain::Y] {
        let dir = out.join(domain.tag());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for sk in 0..cfg.skeletons as u64 {
            for st in 0..manifest.styles(domain).len() {
                let rec = ImageRecord { path: format!("{}/{sk:04}_{st:02}.pgm", domain.tag()), skeleton_id: sk, style_id: st, domain };
                save_image(&manifest.render(&rec)?, out.join(&rec.path))?;
                manifest.records.push(rec);
            }
        }
    }
    let path = out.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_tsv()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A manifest plus every image it lists, held in memory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: CorpusManifest,
    images: Vec<GlyphImage>,
    x: Vec<usize>,
    y: Vec<usize>,
}

impl Corpus {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest = CorpusManifest::read(&root)?;
        let mut images = Vec::with_capacity(manifest.records.len());
        for rec in &manifest.records {
            let path = root.join(&rec.path);
            let img = load_image(&path)?;
            if (img.width, img.height) != (manifest.canvas, manifest.canvas) {
                return Err(Error::Shape(format!("{} is {}x{}, manifest canvas is {}", path.display(), img.width, img.height, manifest.canvas)));
            }
            images.push(img);
        }
        let idx = |d| manifest.records.iter().enumerate().filter(|(_, r)| r.domain == d).map(|(i, _)| i).collect::<Vec<_>>();
        let (x, y) = (idx(Domain::X), idx(Domain::Y));
        if x.is_empty() || y.is_empty() {
            return Err(Error::Config(format!("corpus at {} needs images in both domains", root.display())));
        }
        Ok(Corpus { root, manifest, images, x, y })
    }

    fn indices(&self, domain: Domain) -> &[usize] {
        match domain {
            Domain::X => &self.x,
            Domain::Y => &self.y,
        }
    }

    pub fn len(&self, domain: Domain) -> usize {
        self.indices(domain).len()
    }

    pub fn image(&self, domain: Domain, k: usize) -> (&GlyphImage, &ImageRecord) {
        let i = self.indices(domain)[k];
        (&self.images[i], &self.manifest.records[i])
    }

    /// `batch` distinct images of one domain, drawn uniformly (partial Fisher-Yates).
    pub fn sample_batch(&self, domain: Domain, batch: usize, rng: &mut Rng) -> Result<(Vec<&GlyphImage>, Vec<&ImageRecord>)> {
        let pool = self.indices(domain);
        if batch == 0 || batch > pool.len() {
            return Err(Error::Config(format!("batch {batch} not in 1..={} for domain {}", pool.len(), domain.tag())));
        }
        let mut order = pool.to_vec();
        for i in 0..batch {
            let j = i + rng.below((order.len() - i) as u64) as usize;
            order.swap(i, j);
        }
        Ok(order[..batch].iter().map(|&i| (&self.images[i], &self.manifest.records[i])).unzip())
    }
}
