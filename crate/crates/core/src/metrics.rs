//! Image similarity: SSIM over valid Gaussian windows, PSNR, and directory
//! pair evaluation with a CSV report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::glyph::{load_image, GlyphImage};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const REPORT_HEADER: &str = "path_a,path_b,ssim,psnr_db";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, dynamic_range: 1.0 }
    }
}

impl SsimConfig {
    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..self.window).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp()).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }

    pub fn constants(&self) -> (f64, f64) {
        ((self.k1 * self.dynamic_range).powi(2), (self.k2 * self.dynamic_range).powi(2))
    }

    fn validate(&self) -> Result<()> {
        if self.window == 0 || !(self.sigma > 0.0) || !(self.k1 > 0.0) || !(self.k2 > 0.0) || !(self.dynamic_range > 0.0) {
            return Err(Error::Config(format!("invalid SSIM configuration {self:?}")));
        }
        Ok(())
    }
}

fn same_dims(a: &GlyphImage, b: &GlyphImage) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Shape(format!("image sizes differ: {}x{} vs {}x{}", a.width, a.height, b.width, b.height)));
    }
    Ok(())
}

/// Valid-mode separable filter of a `w`×`h` plane.
fn filter(src: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&line[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for (i, t) in taps.iter().enumerate() {
            let r = &rows[(y + i) * ow..(y + i + 1) * ow];
            for (o, v) in out[y * ow..(y + 1) * ow].iter_mut().zip(r) {
                *o += t * v;
            }
        }
    }
    out
}

pub(crate) fn ssim_index(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

/// Per-window SSIM map, `(W - k + 1) × (H - k + 1)`, row-major.
pub fn ssim_map(a: &GlyphImage, b: &GlyphImage, cfg: &SsimConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    same_dims(a, b)?;
    let (w, h) = (a.width, a.height);
    if w < cfg.window || h < cfg.window {
        return Err(Error::Shape(format!("{w}x{h} image is smaller than the {0}x{0} SSIM window", cfg.window)));
    }
    let taps = cfg.taps();
    let (c1, c2) = cfg.constants();
    let pa: Vec<f64> = a.pixels.iter().map(|&v| v as f64).collect();
    let pb: Vec<f64> = b.pixels.iter().map(|&v| v as f64).collect();
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter(&pa, w, h, &taps);
    let mu_b = filter(&pb, w, h, &taps);
    let ea2 = filter(&prod(&pa, &pa), w, h, &taps);
    let eb2 = filter(&prod(&pb, &pb), w, h, &taps);
    let eab = filter(&prod(&pa, &pb), w, h, &taps);
    Ok((0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            ssim_index(ma, mb, ea2[i] - ma * ma, eb2[i] - mb * mb, eab[i] - ma * mb, c1, c2)
        })
        .collect())
}

pub fn ssim(a: &GlyphImage, b: &GlyphImage, cfg: &SsimConfig) -> Result<f64> {
    let map = ssim_map(a, b, cfg)?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

pub fn mse(a: &GlyphImage, b: &GlyphImage) -> Result<f64> {
    same_dims(a, b)?;
    Ok(a.pixels.iter().zip(&b.pixels).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.pixels.len() as f64)
}

pub fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (max_value * max_value / mse).log10()).min(PSNR_CAP_DB)
}

pub fn psnr(a: &GlyphImage, b: &GlyphImage, max_value: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, max_value))
}

/// Shell-style match supporting `*` and `?`.
pub fn wildcard_match(pattern: &str, name: &str) -> bool {
    let (p, n): (Vec<char>, Vec<char>) = (pattern.chars().collect(), name.chars().collect());
    let (mut pi, mut ni) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ni < n.len() {
        if pi < p.len() && (p[pi] == '?' || p[pi] == n[ni]) {
            pi += 1;
            ni += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = Some((pi, ni));
            pi += 1;
        } else if let Some((sp, sn)) = star {
            pi = sp + 1;
            ni = sn + 1;
            star = Some((sp, sn + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == '*')
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRow {
    pub path_a: PathBuf,
    pub path_b: PathBuf,
    pub ssim: f64,
    pub psnr_db: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    fn of(values: impl Iterator<Item = f64>) -> Option<Summary> {
        let v: Vec<f64> = values.collect();
        if v.is_empty() {
            return None;
        }
        Some(Summary {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<PairRow>,
    /// File name and the reason it was not compared.
    pub skipped: Vec<(String, String)>,
}

impl EvalReport {
    pub fn no_pairs(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn ssim_summary(&self) -> Option<Summary> {
        Summary::of(self.rows.iter().map(|r| r.ssim))
    }

    pub fn psnr_summary(&self) -> Option<Summary> {
        Summary::of(self.rows.iter().map(|r| r.psnr_db))
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{}", r.path_a.display(), r.path_b.display(), r.ssim, r.psnr_db).unwrap();
        }
        writeln!(s, "# pairs,{}", self.rows.len()).unwrap();
        match (self.ssim_summary(), self.psnr_summary()) {
            (Some(a), Some(b)) => {
                writeln!(s, "# ssim_mean,{}\n# ssim_min,{}\n# ssim_max,{}", a.mean, a.min, a.max).unwrap();
                writeln!(s, "# psnr_mean,{}\n# psnr_min,{}\n# psnr_max,{}", b.mean, b.min, b.max).unwrap();
            }
            _ => s.push_str("# no pairs\n"),
        }
        for (name, why) in &self.skipped {
            writeln!(s, "# skipped,{name},{why}").unwrap();
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn matching_files(dir: &Path, pattern: &str) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if !entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_file() {
            continue;
        }
        if let Some(name) = entry.file_name().to_str() {
            if wildcard_match(pattern, name) {
                names.push(name.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

/// Pairs same-named files of two directories and scores each pair.
/// Unmatched or unreadable files go to the skipped list.
pub fn eval_pairs(dir_a: impl AsRef<Path>, dir_b: impl AsRef<Path>, pattern: &str, cfg: &SsimConfig) -> Result<EvalReport> {
    let (dir_a, dir_b) = (dir_a.as_ref(), dir_b.as_ref());
    let a = matching_files(dir_a, pattern)?;
    let b = matching_files(dir_b, pattern)?;
    let mut report = EvalReport::default();
    for name in &a {
        if b.binary_search(name).is_err() {
            report.skipped.push((name.clone(), format!("missing from {}", dir_b.display())));
            continue;
        }
        let (pa, pb) = (dir_a.join(name), dir_b.join(name));
        let scored = load_image(&pa).and_then(|ia| {
            let ib = load_image(&pb)?;
            Ok((ssim(&ia, &ib, cfg)?, psnr(&ia, &ib, 1.0)?))
        });
        match scored {
            Ok((s, p)) => report.rows.push(PairRow { path_a: pa, path_b: pb, ssim: s, psnr_db: p }),
            Err(e) => report.skipped.push((name.clone(), e.to_string().replace(',', ";"))),
        }
    }
    for name in &b {
        if a.binary_search(name).is_err() {
            report.skipped.push((name.clone(), format!("missing from {}", dir_a.display())));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glyph::save_image;
    use crate::rng::Rng;

    fn random(w: usize, h: usize, seed: u64) -> GlyphImage {
        let mut r = Rng::new(seed);
        GlyphImage::new(w, h, (0..w * h).map(|_| r.uniform() as f32).collect()).unwrap()
    }

    // Explicit 2-D window at each valid position, no separability.
    fn brute_ssim(a: &GlyphImage, b: &GlyphImage, cfg: &SsimConfig) -> f64 {
        let t = cfg.taps();
        let k = cfg.window;
        let (c1, c2) = cfg.constants();
        let mut total = 0.0;
        let mut n = 0;
        for oy in 0..=a.height - k {
            for ox in 0..=a.width - k {
                let (mut ma, mut mb) = (0.0, 0.0);
                for j in 0..k {
                    for i in 0..k {
                        let wgt = t[i] * t[j];
                        ma += wgt * a.get(ox + i, oy + j) as f64;
                        mb += wgt * b.get(ox + i, oy + j) as f64;
                    }
                }
                let (mut va, mut vb, mut cv) = (0.0, 0.0, 0.0);
                for j in 0..k {
                    for i in 0..k {
                        let wgt = t[i] * t[j];
                        let da = a.get(ox + i, oy + j) as f64 - ma;
                        let db = b.get(ox + i, oy + j) as f64 - mb;
                        va += wgt * da * da;
                        vb += wgt * db * db;
                        cv += wgt * da * db;
                    }
                }
                total += ssim_index(ma, mb, va, vb, cv, c1, c2);
                n += 1;
            }
        }
        total / n as f64
    }

    #[test]
    fn window_sums_to_one() {
        let t = SsimConfig::default().taps();
        assert_eq!(t.len(), 11);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((t[5] / t[4] - (1.0 / (2.0 * 2.25f64)).exp()).abs() < 1e-12);
    }

    #[test]
    fn self_similarity_and_symmetry() {
        let cfg = SsimConfig::default();
        let a = random(32, 32, 1);
        let b = random(32, 32, 2);
        assert!((ssim(&a, &a, &cfg).unwrap() - 1.0).abs() < 1e-9);
        assert!((ssim(&a, &b, &cfg).unwrap() - ssim(&b, &a, &cfg).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn separable_matches_brute_force() {
        let cfg = SsimConfig::default();
        for seed in 0..3 {
            let a = random(32, 32, seed);
            let b = random(32, 32, seed + 100);
            let fast = ssim(&a, &b, &cfg).unwrap();
            assert!((fast - brute_ssim(&a, &b, &cfg)).abs() < 1e-6);
        }
    }

    #[test]
    fn inverted_half_image_is_negative() {
        let cfg = SsimConfig::default();
        let x = GlyphImage::new(32, 32, (0..1024).map(|i| if i % 32 < 16 { 0.0 } else { 1.0 }).collect()).unwrap();
        let inv = GlyphImage::new(32, 32, x.pixels.iter().map(|p| 1.0 - p).collect()).unwrap();
        let s = ssim(&x, &inv, &cfg).unwrap();
        assert!(s < 0.0, "{s}");
        assert!((s - brute_ssim(&x, &inv, &cfg)).abs() < 1e-6);
    }

    #[test]
    fn ssim_errors() {
        let cfg = SsimConfig::default();
        assert!(ssim(&random(10, 10, 0), &random(10, 10, 1), &cfg).is_err());
        assert!(ssim(&random(16, 16, 0), &random(16, 12, 1), &cfg).is_err());
    }

    #[test]
    fn psnr_analytic() {
        let zeros = GlyphImage::new(4, 4, vec![0.0; 16]).unwrap();
        let ones = GlyphImage::blank(4, 4);
        assert_eq!(psnr(&zeros, &zeros, 1.0).unwrap(), 99.0);
        assert!(psnr(&zeros, &ones, 1.0).unwrap().abs() < 1e-9);
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-9);
        // constant offset of 0.1 gives MSE 0.01 up to f32 rounding
        let off = GlyphImage::new(4, 4, vec![0.1; 16]).unwrap();
        assert!((psnr(&zeros, &off, 1.0).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(&zeros, &GlyphImage::blank(2, 2), 1.0).is_err());
    }

    #[test]
    fn psnr_falls_with_noise() {
        let base = random(32, 32, 5);
        let mut prev = f64::INFINITY;
        for amp in [0.01, 0.05, 0.2] {
            let mut r = Rng::new(6);
            let noisy = GlyphImage::new(32, 32, base.pixels.iter().map(|&p| (p + amp * r.uniform_range(-1.0, 1.0) as f32).clamp(0.0, 1.0)).collect()).unwrap();
            let v = psnr(&base, &noisy, 1.0).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn wildcard() {
        assert!(wildcard_match("*.pgm", "a_1.pgm"));
        assert!(!wildcard_match("*.pgm", "a_1.pgmx"));
        assert!(wildcard_match("0?_*", "01_xyz"));
        assert!(wildcard_match("*", ""));
        assert!(!wildcard_match("a*b", "ac"));
    }

    #[test]
    fn eval_pairs_report() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for (i, seed) in [(0, 1), (1, 2)] {
            let img = random(16, 16, seed);
            save_image(&img, a.path().join(format!("g{i}.pgm"))).unwrap();
            save_image(&img, b.path().join(format!("g{i}.pgm"))).unwrap();
        }
        save_image(&random(16, 16, 9), a.path().join("only_a.pgm")).unwrap();
        std::fs::write(a.path().join("notes.txt"), "x").unwrap();
        let rep = eval_pairs(a.path(), b.path(), "*.pgm", &SsimConfig::default()).unwrap();
        assert_eq!(rep.rows.len(), 2);
        assert_eq!(rep.skipped.len(), 1);
        assert!((rep.ssim_summary().unwrap().mean - 1.0).abs() < 1e-9);
        assert_eq!(rep.psnr_summary().unwrap().mean, 99.0);
        let csv = rep.to_csv();
        assert!(csv.starts_with(REPORT_HEADER));
        assert!(csv.contains("# skipped,only_a.pgm"));

        let empty = eval_pairs(a.path(), b.path(), "*.none", &SsimConfig::default()).unwrap();
        assert!(empty.no_pairs());
        assert!(empty.to_csv().contains("# no pairs"));
    }
}
