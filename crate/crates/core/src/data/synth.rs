//! Planted-disc images with known boxes, for runs without real radiographs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::image::Grayscale;
use super::Sample;
use crate::error::{Error, Result};
use crate::localize::BBox;

/// Mixes a base seed with two indices (sample, epoch, ...) into an
/// independent stream seed, so per-sample work can run in any order.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One class: a filled disc whose pixels are offset by `intensity` grey
/// levels from the background.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobSpec {
    pub name: String,
    pub radius_min: usize,
    pub radius_max: usize,
    pub intensity: f64,
    /// Chance that an image contains this class.
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub background: f64,
    pub noise_std: f64,
    pub blobs: Vec<BlobSpec>,
    pub seed: u64,
}

impl SyntheticSpec {
    /// 64×64 images with a bright and a dark disc class.
    pub fn two_discs(seed: u64) -> Self {
        let blob = |name: &str, intensity| BlobSpec {
            name: name.into(),
            radius_min: 10,
            radius_max: 14,
            intensity,
            probability: 0.5,
        };
        SyntheticSpec {
            image_size: 64,
            background: 128.0,
            noise_std: 20.0,
            blobs: vec![blob("Bright_Disc", 70.0), blob("Dark_Disc", -70.0)],
            seed,
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        self.blobs.iter().map(|b| b.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.blobs.is_empty() {
            return Err(Error::Config("synthetic spec needs at least one class".into()));
        }
        for b in &self.blobs {
            if b.radius_min > b.radius_max {
                return Err(Error::Config(format!("{}: radius range is empty", b.name)));
            }
            if 2 * b.radius_max + 1 > self.image_size {
                return Err(Error::Config(format!(
                    "{}: disc of radius {} does not fit a {}-pixel image",
                    b.name, b.radius_max, self.image_size
                )));
            }
            if !(0.0..=1.0).contains(&b.probability) {
                return Err(Error::Config(format!("{}: probability must be in [0,1]", b.name)));
            }
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be nonnegative".into()));
        }
        Ok(())
    }
}

struct Disc {
    cx: usize,
    cy: usize,
    r: usize,
}

impl Disc {
    fn contains(&self, x: usize, y: usize) -> bool {
        let dx = x as i64 - self.cx as i64;
        let dy = y as i64 - self.cy as i64;
        dx * dx + dy * dy <= (self.r * self.r) as i64
    }

    fn overlaps(&self, other: &Disc) -> bool {
        let dx = self.cx as f64 - other.cx as f64;
        let dy = self.cy as f64 - other.cy as f64;
        (dx * dx + dy * dy).sqrt() <= (self.r + other.r + 1) as f64
    }

    /// Tight rectangle of the pixel set: the disc touches its center row and
    /// column at distance exactly `r`.
    fn bbox(&self, class_id: usize) -> BBox {
        let side = (2 * self.r + 1) as f64;
        BBox::new((self.cx - self.r) as f64, (self.cy - self.r) as f64, side, side, class_id)
    }
}

const PLACEMENT_TRIES: usize = 1000;

/// Draws a disc per present class, redrawing the whole layout when a disc
/// cannot be placed clear of the earlier ones.
fn place_discs(spec: &SyntheticSpec, present: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<(usize, Disc)>> {
    let size = spec.image_size;
    'layout: for _ in 0..PLACEMENT_TRIES {
        let mut discs: Vec<(usize, Disc)> = Vec::new();
        for &cls in present {
            let blob = &spec.blobs[cls];
            let r = rng.random_range(blob.radius_min..=blob.radius_max);
            let d = Disc {
                cx: rng.random_range(r..size - r),
                cy: rng.random_range(r..size - r),
                r,
            };
            if discs.iter().any(|(_, o)| d.overlaps(o)) {
                continue 'layout;
            }
            discs.push((cls, d));
        }
        return Ok(discs);
    }
    Err(Error::Config(format!(
        "could not place {} discs without overlap in a {size}-pixel image",
        present.len()
    )))
}

fn sample_one(spec: &SyntheticSpec, index: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, index as u64, 0));
    let size = spec.image_size;
    let labels: Vec<bool> = spec.blobs.iter().map(|b| rng.random_bool(b.probability)).collect();
    let present: Vec<usize> = (0..labels.len()).filter(|&c| labels[c]).collect();
    let discs = place_discs(spec, &present, &mut rng)?;
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let mut v = spec.background + noise.sample(&mut rng);
            for (cls, d) in &discs {
                if d.contains(x, y) {
                    v += spec.blobs[*cls].intensity;
                }
            }
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(Sample {
        image_id: format!("{index:06}_000.pgm"),
        image: Grayscale::new(size, size, pixels)?,
        labels,
        boxes: discs.iter().map(|(cls, d)| d.bbox(*cls)).collect(),
    })
}

/// `n` samples, each drawn from its own seed stream.
pub fn generate_synthetic(spec: &SyntheticSpec, n: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    let results = crate::par::map_range(n, |i| sample_one(spec, i));
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(seed: u64) -> SyntheticSpec {
        SyntheticSpec { noise_std: 0.0, ..SyntheticSpec::two_discs(seed) }
    }

    #[test]
    fn probability_one_and_zero() {
        let mut spec = quiet(3);
        spec.blobs[0].probability = 1.0;
        spec.blobs[1].probability = 0.0;
        for s in generate_synthetic(&spec, 10).unwrap() {
            assert_eq!(s.labels, vec![true, false]);
            assert_eq!(s.boxes.len(), 1);
        }
        spec.blobs[0].probability = 0.0;
        for s in generate_synthetic(&spec, 10).unwrap() {
            assert_eq!(s.labels, vec![false, false]);
            assert!(s.boxes.is_empty());
        }
    }

    #[test]
    fn deterministic() {
        let spec = SyntheticSpec::two_discs(11);
        assert_eq!(generate_synthetic(&spec, 20).unwrap(), generate_synthetic(&spec, 20).unwrap());
        let other = SyntheticSpec::two_discs(12);
        assert_ne!(generate_synthetic(&spec, 20).unwrap(), generate_synthetic(&other, 20).unwrap());
    }

    #[test]
    fn boxes_are_tight() {
        let spec = quiet(5);
        let bg = spec.background as u8;
        for s in generate_synthetic(&spec, 50).unwrap() {
            for b in &s.boxes {
                let mut lo = (usize::MAX, usize::MAX);
                let mut hi = (0, 0);
                let bright = spec.blobs[b.class_id].intensity > 0.0;
                for y in 0..64 {
                    for x in 0..64 {
                        let v = s.image.get(x, y);
                        if (bright && v > bg) || (!bright && v < bg) {
                            lo = (lo.0.min(x), lo.1.min(y));
                            hi = (hi.0.max(x), hi.1.max(y));
                        }
                    }
                }
                assert_eq!((b.x, b.y), (lo.0 as f64, lo.1 as f64));
                assert_eq!((b.w, b.h), ((hi.0 - lo.0 + 1) as f64, (hi.1 - lo.1 + 1) as f64));
            }
        }
    }

    #[test]
    fn oversized_blob_rejected() {
        let mut spec = quiet(0);
        spec.blobs[0].radius_max = 40;
        assert!(generate_synthetic(&spec, 1).is_err());
    }

    #[test]
    fn seeds_differ_per_index() {
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 1, 0));
        assert_ne!(derive_seed(1, 0, 1), derive_seed(1, 1, 0));
        assert_eq!(derive_seed(7, 3, 2), derive_seed(7, 3, 2));
    }
}
