//! Procedural glyph corpus: stroke skeletons carry content identity, render
//! styles carry appearance. Images are stored as 8-bit binary PGM.

mod corpus;
mod pgm;
mod render;
mod skeleton;

pub use corpus::{build_corpus, Corpus, CorpusConfig, CorpusManifest, Domain, ImageRecord, MANIFEST_FILE};
pub use pgm::{decode_pgm, encode_pgm, load_image, save_image};
pub use render::{content_style, render_glyph, style_roster, StyleSpec};
pub use skeleton::{synth_skeleton, Skeleton, GRID};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Grayscale raster, row-major, 0 = ink and 1 = background.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl GlyphImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::Shape(format!("{width}x{height} image needs {} pixels, got {}", width * height, pixels.len())));
        }
        if let Some(i) = pixels.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Domain { op: "glyph_image", index: i, value: pixels[i] as f64 });
        }
        Ok(GlyphImage { width, height, pixels })
    }

    pub fn blank(width: usize, height: usize) -> Self {
        GlyphImage { width, height, pixels: vec![1.0; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Mean of `1 - pixel`.
    pub fn ink_fraction(&self) -> f64 {
        self.pixels.iter().map(|&p| 1.0 - p as f64).sum::<f64>() / self.pixels.len() as f64
    }

    /// Builds an image from a [0,1]-valued slice, clamping stray values.
    pub fn from_values<T: Scalar>(width: usize, height: usize, values: &[T]) -> Result<Self> {
        let pixels = values.iter().map(|v| v.to_f32().unwrap_or(f32::NAN).clamp(0.0, 1.0)).collect::<Vec<_>>();
        if pixels.iter().any(|p| p.is_nan()) {
            return Err(Error::NonFinite("image values contain NaN".into()));
        }
        GlyphImage::new(width, height, pixels)
    }
}

/// Stacks same-sized images into an `[N, 1, H, W]` tensor.
pub fn images_to_tensor<T: Scalar>(images: &[&GlyphImage]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Shape("cannot stack zero images".into()))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * w * h);
    for img in images {
        if (img.width, img.height) != (w, h) {
            return Err(Error::Shape(format!("mixed image sizes {w}x{h} and {}x{}", img.width, img.height)));
        }
        data.extend(img.pixels.iter().map(|&p| T::lit(p as f64)));
    }
    Tensor::new([images.len(), 1, h, w], data)
}

/// Splits an `[N, 1, H, W]` tensor back into images.
pub fn tensor_to_images<T: Scalar>(t: &Tensor<T>) -> Result<Vec<GlyphImage>> {
    let s = t.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::Shape(format!("expected [N,1,H,W], got {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    t.data().chunks(h * w).map(|c| GlyphImage::from_values(w, h, c)).collect()
}

/// Tiles images into a grid with `gap`-pixel separators of value `fill`.
pub fn montage(images: &[GlyphImage], cols: usize, gap: usize, fill: f32) -> Result<GlyphImage> {
    let first = images.first().ok_or_else(|| Error::Shape("montage of zero images".into()))?;
    let (w, h) = (first.width, first.height);
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let mw = cols * w + (cols - 1) * gap;
    let mh = rows * h + (rows - 1) * gap;
    let mut out = vec![fill; mw * mh];
    for (k, img) in images.iter().enumerate() {
        if (img.width, img.height) != (w, h) {
            return Err(Error::Shape("montage images must share one size".into()));
        }
        let (ox, oy) = ((k % cols) * (w + gap), (k / cols) * (h + gap));
        for y in 0..h {
            out[(oy + y) * mw + ox..(oy + y) * mw + ox + w].copy_from_slice(&img.pixels[y * w..(y + 1) * w]);
        }
    }
    GlyphImage::new(mw, mh, out)
}
