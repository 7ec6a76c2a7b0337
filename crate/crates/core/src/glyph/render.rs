use crate::error::{Error, Result};
use crate::rng::Rng;

use super::{GlyphImage, Skeleton};

/// Rendering parameters for one style. `stroke_width` is in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StyleSpec {
    pub stroke_width: f64,
    pub slant: f64,
    pub curvature: f64,
    pub taper: f64,
    pub noise_amp: f64,
}

impl StyleSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("style {what} out of range in {self:?}")));
        if !(self.stroke_width > 0.0 && self.stroke_width.is_finite()) {
            return bad("stroke_width");
        }
        if !(-0.5..=0.5).contains(&self.slant) {
            return bad("slant");
        }
        if !(0.0..=1.0).contains(&self.curvature) {
            return bad("curvature");
        }
        if !(0.0..=1.0).contains(&self.taper) {
            return bad("taper");
        }
        if !(self.noise_amp >= 0.0 && self.noise_amp.is_finite()) {
            return bad("noise_amp");
        }
        Ok(())
    }
}

pub fn content_style(size: usize) -> StyleSpec {
    StyleSpec { stroke_width: 0.07 * size as f64, slant: 0.0, curvature: 0.0, taper: 0.0, noise_amp: 0.0 }
}

// (width as a fraction of the canvas, slant, curvature, taper)
const PRESETS: [(f64, f64, f64, f64); 4] = [(0.12, 0.3, 0.1, 0.0), (0.04, -0.2, 0.8, 0.3), (0.10, 0.15, 0.4, 0.9), (0.15, 0.0, 0.0, 0.2)];

/// The target-domain styles: four fixed presets, then random draws.
pub fn style_roster(count: usize, size: usize, seed: u64) -> Vec<StyleSpec> {
    let s = size as f64;
    let mut rng = Rng::derive(seed, 0x57_11e5);
    (0..count)
        .map(|i| match PRESETS.get(i) {
            Some(&(w, slant, curvature, taper)) => StyleSpec { stroke_width: w * s, slant, curvature, taper, noise_amp: 0.0 },
            None => StyleSpec {
                stroke_width: rng.uniform_range(0.04, 0.15) * s,
                slant: rng.uniform_range(-0.4, 0.4),
                curvature: rng.uniform(),
                taper: rng.uniform(),
                noise_amp: 0.0,
            },
        })
        .collect()
}

const BEZIER_STEPS: usize = 8;
const NOISE_CELLS: usize = 8;

struct Piece {
    a: (f64, f64),
    b: (f64, f64),
    // arc-length parameter of each end along its stroke, in [0, 1]
    sa: f64,
    sb: f64,
}

fn flatten(points: &[(f64, f64)], curvature: f64) -> Vec<Piece> {
    let mut path = vec![points[0]];
    for (k, w) in points.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        // bulge sides alternate so multi-segment strokes snake instead of spiral
        let side = if k % 2 == 0 { 1.0 } else { -1.0 };
        let ctrl = (0.5 * (a.0 + b.0) - side * 0.25 * curvature * dy, 0.5 * (a.1 + b.1) + side * 0.25 * curvature * dx);
        for i in 1..=BEZIER_STEPS {
            let t = i as f64 / BEZIER_STEPS as f64;
            let u = 1.0 - t;
            path.push((u * u * a.0 + 2.0 * u * t * ctrl.0 + t * t * b.0, u * u * a.1 + 2.0 * u * t * ctrl.1 + t * t * b.1));
        }
    }
    let lens: Vec<f64> = path.windows(2).map(|w| (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1)).collect();
    let total: f64 = lens.iter().sum::<f64>().max(1e-12);
    let mut acc = 0.0;
    path.windows(2)
        .zip(&lens)
        .map(|(w, &l)| {
            let sa = acc / total;
            acc += l;
            Piece { a: w[0], b: w[1], sa, sb: acc / total }
        })
        .collect()
}

/// Smooth lattice noise in [-1, 1], bilinear between random lattice values.
struct ValueNoise {
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut Rng) -> Self {
        let n = NOISE_CELLS + 1;
        ValueNoise { lattice: (0..n * n).map(|_| rng.uniform_range(-1.0, 1.0)).collect() }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let n = NOISE_CELLS + 1;
        let fx = (u.clamp(0.0, 1.0) * NOISE_CELLS as f64).min(NOISE_CELLS as f64 - 1e-9);
        let fy = (v.clamp(0.0, 1.0) * NOISE_CELLS as f64).min(NOISE_CELLS as f64 - 1e-9);
        let (ix, iy) = (fx as usize, fy as usize);
        let (tx, ty) = (fx - ix as f64, fy - iy as f64);
        let l = |x: usize, y: usize| self.lattice[y * n + x];
        let top = l(ix, iy) * (1.0 - tx) + l(ix + 1, iy) * tx;
        let bot = l(ix, iy + 1) * (1.0 - tx) + l(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bot * ty
    }
}

/// Rasterizes a skeleton with the given style on a `size`×`size` canvas.
///
/// Coverage of a pixel is `clamp(0.5 - (d - w/2), 0, 1)` where `d` is the
/// distance from the pixel center to the nearest stroke piece and `w` the
/// tapered width at that point. `seed` only matters when `noise_amp > 0`.
pub fn render_glyph(skeleton: &Skeleton, style: &StyleSpec, size: usize, seed: u64) -> Result<GlyphImage> {
    style.validate()?;
    if size < 16 {
        return Err(Error::Config(format!("canvas size {size} is below the minimum of 16")));
    }
    let s = size as f64;
    let shear = style.slant.tan();
    let mut pieces = Vec::new();
    for stroke in &skeleton.strokes {
        let pts: Vec<(f64, f64)> = stroke.iter().map(|&(x, y)| ((x + (0.5 - y) * shear) * s, y * s)).collect();
        if pts.len() == 1 {
            pieces.push(Piece { a: pts[0], b: pts[0], sa: 0.5, sb: 0.5 });
        } else {
            pieces.extend(flatten(&pts, style.curvature));
        }
    }
    let noise = (style.noise_amp > 0.0).then(|| ValueNoise::new(&mut Rng::derive(seed, 0x0153)));
    let half = 0.5 * style.stroke_width;
    let mut pixels = Vec::with_capacity(size * size);
    for py in 0..size {
        for px in 0..size {
            let p = (px as f64 + 0.5, py as f64 + 0.5);
            let mut best = f64::INFINITY;
            for pc in &pieces {
                let (dx, dy) = (pc.b.0 - pc.a.0, pc.b.1 - pc.a.1);
                let len2 = dx * dx + dy * dy;
                let t = if len2 > 0.0 { (((p.0 - pc.a.0) * dx + (p.1 - pc.a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let d = (p.0 - pc.a.0 - t * dx).hypot(p.1 - pc.a.1 - t * dy);
                let arc = pc.sa + t * (pc.sb - pc.sa);
                let hw = half * (1.0 - style.taper * (1.0 - 4.0 * arc * (1.0 - arc)));
                best = best.min(d - hw);
            }
            if let Some(n) = &noise {
                best += style.noise_amp * n.at(p.0 / s, p.1 / s);
            }
            let coverage = (0.5 - best).clamp(0.0, 1.0);
            pixels.push((1.0 - coverage) as f32);
        }
    }
    GlyphImage::new(size, size, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glyph::synth_skeleton;

    fn diff_fraction(a: &GlyphImage, b: &GlyphImage) -> f64 {
        a.pixels.iter().zip(&b.pixels).filter(|(x, y)| x != y).count() as f64 / a.pixels.len() as f64
    }

    #[test]
    fn noiseless_render_ignores_seed() {
        let sk = synth_skeleton(4, 2);
        let st = style_roster(4, 32, 0)[1];
        assert_eq!(render_glyph(&sk, &st, 32, 1).unwrap(), render_glyph(&sk, &st, 32, 999).unwrap());
    }

    #[test]
    fn noise_depends_on_seed() {
        let sk = synth_skeleton(4, 2);
        let st = StyleSpec { noise_amp: 0.8, ..content_style(32) };
        let a = render_glyph(&sk, &st, 32, 1).unwrap();
        assert_eq!(a, render_glyph(&sk, &st, 32, 1).unwrap());
        assert_ne!(a, render_glyph(&sk, &st, 32, 2).unwrap());
    }

    #[test]
    fn ink_fraction_in_band() {
        for size in [32, 64] {
            let mut styles = style_roster(6, size, 3);
            styles.push(content_style(size));
            for id in 0..30 {
                let sk = synth_skeleton(id, 5);
                for st in &styles {
                    let f = render_glyph(&sk, st, size, 0).unwrap().ink_fraction();
                    assert!(f > 0.01 && f < 0.6, "size {size} id {id} {st:?}: {f}");
                }
            }
        }
    }

    #[test]
    fn slant_changes_pixels() {
        for id in 0..10 {
            let sk = synth_skeleton(id, 0);
            let a = render_glyph(&sk, &content_style(32), 32, 0).unwrap();
            let b = render_glyph(&sk, &StyleSpec { slant: 0.4, ..content_style(32) }, 32, 0).unwrap();
            assert!(diff_fraction(&a, &b) >= 0.01, "id {id}");
        }
    }

    #[test]
    fn validation() {
        let sk = synth_skeleton(0, 0);
        for bad in [
            StyleSpec { stroke_width: 0.0, ..content_style(32) },
            StyleSpec { stroke_width: -1.0, ..content_style(32) },
            StyleSpec { slant: 0.6, ..content_style(32) },
            StyleSpec { taper: 1.1, ..content_style(32) },
            StyleSpec { noise_amp: -0.1, ..content_style(32) },
        ] {
            assert!(render_glyph(&sk, &bad, 32, 0).is_err(), "{bad:?}");
        }
        assert!(render_glyph(&sk, &content_style(8), 8, 0).is_err());
    }

    #[test]
    fn roster_valid_and_stable() {
        let r = style_roster(12, 64, 9);
        assert_eq!(r, style_roster(12, 64, 9));
        assert!(r.iter().all(|s| s.validate().is_ok()));
        assert_eq!(r[0].stroke_width, 0.12 * 64.0);
    }
}
