//! Grayscale image files and preprocessing into network input.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageReader};
use rand::Rng;

use crate::error::{Error, Result};
use crate::localize::BBox;
use crate::tensor::Tensor;

/// 8-bit single-channel image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grayscale {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Grayscale {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Image(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Grayscale { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Grayscale { width, height, pixels: vec![value; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }
}

/// Reads a PGM file, or PNG when built with the `png` feature. Color images
/// are converted to luma.
pub fn read_image(path: &Path) -> Result<Grayscale> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .with_guessed_format()
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .decode()
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Grayscale::new(w as usize, h as usize, img.into_raw())
}

/// Writes a binary (P5) PGM.
pub fn write_pgm(path: &Path, pixels: &[u8], width: usize, height: usize) -> Result<()> {
    let err = |e: &dyn std::fmt::Display| Error::Image(format!("{}: {e}", path.display()));
    let file = std::fs::File::create(path).map_err(|e| err(&e))?;
    PnmEncoder::new(std::io::BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(pixels, width as u32, height as u32, ExtendedColorType::L8)
        .map_err(|e| err(&e))
}

/// Bilinear resampling with half-pixel centers and edge replication.
/// Same-size resampling is the identity.
pub fn resize_bilinear(img: &Grayscale, out_w: usize, out_h: usize) -> Vec<f64> {
    let sx = img.width as f64 / out_w as f64;
    let sy = img.height as f64 / out_h as f64;
    let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
    let axis = |o: usize, scale: f64, len: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_w * out_h);
    for oy in 0..out_h {
        let (y0, y1, ty) = axis(oy, sy, img.height);
        for ox in 0..out_w {
            let (x0, x1, tx) = axis(ox, sx, img.width);
            let px = |x, y| img.get(x, y) as f64;
            let top = lerp(px(x0, y0), px(x1, y0), tx);
            let bottom = lerp(px(x0, y1), px(x1, y1), tx);
            out.push(lerp(top, bottom, ty));
        }
    }
    out
}

/// Resize, normalize and crop settings. Pixels are scaled to [0, 1] before
/// the per-channel mean/std normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    pub resize: usize,
    pub crop: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for PreprocessConfig {
    /// 256 → 224 with ImageNet statistics.
    fn default() -> Self {
        PreprocessConfig {
            resize: 256,
            crop: 224,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.resize {
            return Err(Error::Config(format!(
                "crop {} must be in 1..={}",
                self.crop, self.resize
            )));
        }
        if self.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        Ok(())
    }

    pub fn center_offset(&self) -> (usize, usize) {
        let o = (self.resize - self.crop) / 2;
        (o, o)
    }

    pub fn random_offset<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let span = self.resize - self.crop;
        (rng.random_range(0..=span), rng.random_range(0..=span))
    }

    /// Maps a box from an image of `orig = (height, width)` into crop
    /// coordinates at `offset = (x, y)`, clipping to the crop. `None` when
    /// nothing of the box remains.
    pub fn map_box(&self, b: &BBox, orig: (usize, usize), offset: (usize, usize)) -> Option<BBox> {
        let fx = self.resize as f64 / orig.1 as f64;
        let fy = self.resize as f64 / orig.0 as f64;
        let c = self.crop as f64;
        let x0 = (b.x * fx - offset.0 as f64).clamp(0.0, c);
        let y0 = (b.y * fy - offset.1 as f64).clamp(0.0, c);
        let x1 = ((b.x + b.w) * fx - offset.0 as f64).clamp(0.0, c);
        let y1 = ((b.y + b.h) * fy - offset.1 as f64).clamp(0.0, c);
        (x1 > x0 && y1 > y0).then_some(BBox { x: x0, y: y0, w: x1 - x0, h: y1 - y0, ..*b })
    }

    /// Inverse of [`map_box`](Self::map_box) for a box inside the crop.
    pub fn unmap_box(&self, b: &BBox, orig: (usize, usize), offset: (usize, usize)) -> BBox {
        let fx = orig.1 as f64 / self.resize as f64;
        let fy = orig.0 as f64 / self.resize as f64;
        BBox { x: (b.x + offset.0 as f64) * fx, y: (b.y + offset.1 as f64) * fy, w: b.w * fx, h: b.h * fy, ..*b }
    }
}

/// Grayscale image to a `[3, crop, crop]` tensor: bilinear resize to
/// `resize×resize`, scale to [0, 1], replicate into three channels,
/// normalize per channel, then crop at `offset = (x, y)`.
pub fn preprocess(img: &Grayscale, cfg: &PreprocessConfig, offset: (usize, usize)) -> Result<Tensor> {
    cfg.validate()?;
    if img.width == 0 || img.height == 0 {
        return Err(Error::Image("empty image".into()));
    }
    let span = cfg.resize - cfg.crop;
    if offset.0 > span || offset.1 > span {
        return Err(Error::invalid("preprocess", format!("crop offset {offset:?} beyond {span}")));
    }
    let resized = resize_bilinear(img, cfg.resize, cfg.resize);
    let crop = cfg.crop;
    let mut data = Vec::with_capacity(3 * crop * crop);
    for ch in 0..3 {
        for y in 0..crop {
            let row = (y + offset.1) * cfg.resize + offset.0;
            data.extend(
                resized[row..row + crop]
                    .iter()
                    .map(|v| (v / 255.0 - cfg.mean[ch]) / cfg.std[ch]),
            );
        }
    }
    Tensor::new(&[3, crop, crop], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_image_normalizes_to_zero() {
        let img = Grayscale::filled(300, 280, 51);
        let v = 51.0 / 255.0;
        let cfg = PreprocessConfig { mean: [v; 3], std: [1.0; 3], ..Default::default() };
        let t = preprocess(&img, &cfg, cfg.center_offset()).unwrap();
        assert_eq!(t.shape(), &[3, 224, 224]);
        assert!(t.data().iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn crop_offsets() {
        let cfg = PreprocessConfig::default();
        assert_eq!(cfg.center_offset(), (16, 16));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = vec![false; 33 * 33];
        for _ in 0..10_000 {
            let (x, y) = cfg.random_offset(&mut rng);
            seen[y * 33 + x] = true;
        }
        // Every corner and edge of [0,32]² is hit.
        assert!(seen[0] && seen[32] && seen[32 * 33] && seen[33 * 33 - 1]);
        assert!(seen.iter().filter(|&&s| s).count() > 1000);
    }

    #[test]
    fn same_size_resize_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pixels: Vec<u8> = (0..64 * 48).map(|_| rng.random()).collect();
        let img = Grayscale::new(64, 48, pixels.clone()).unwrap();
        let out = resize_bilinear(&img, 64, 48);
        assert!(out.iter().zip(&pixels).all(|(a, &b)| *a == b as f64));
    }

    #[test]
    fn halving_averages_pairs() {
        let img = Grayscale::new(4, 1, vec![0, 100, 200, 250]).unwrap();
        assert_eq!(resize_bilinear(&img, 2, 1), vec![50.0, 225.0]);
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let img = Grayscale::new(3, 2, vec![0, 1, 2, 253, 254, 255]).unwrap();
        write_pgm(&path, &img.pixels, 3, 2).unwrap();
        assert_eq!(&std::fs::read(&path).unwrap()[..2], b"P5");
        assert_eq!(read_image(&path).unwrap(), img);
        assert!(read_image(&dir.path().join("missing.pgm")).is_err());
    }

    #[test]
    fn boxes_follow_resize_and_crop() {
        let cfg = PreprocessConfig::default();
        let b = BBox::new(512., 512., 256., 256., 0);
        let m = cfg.map_box(&b, (1024, 1024), (16, 16)).unwrap();
        assert_eq!((m.x, m.y, m.w, m.h), (112., 112., 64., 64.));
        let outside = BBox::new(0., 0., 40., 40., 0);
        assert!(cfg.map_box(&outside, (1024, 1024), (16, 16)).is_none());
        let back = cfg.unmap_box(&m, (1024, 1024), (16, 16));
        assert_eq!((back.x, back.y, back.w, back.h), (512., 512., 256., 256.));
    }
}
