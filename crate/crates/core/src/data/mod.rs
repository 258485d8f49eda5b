//! Datasets: label files, images, preprocessing, splits and the synthetic
//! generator.
//!
//! A dataset directory holds `labels.csv` (`Image Index,Finding Labels`,
//! optionally followed by `Planted Boxes`), an optional `bboxes.csv`, an
//! optional `classes.txt` with one class name per line (the 14 canonical
//! findings otherwise) and the image files under `images/`.

mod image;
mod labels;
mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use self::image::{preprocess, read_image, resize_bilinear, write_pgm, Grayscale, PreprocessConfig};
pub use self::labels::{
    canonical_classes, class_index, format_findings, parse_bbox_csv, parse_findings, parse_label_csv, rescale_boxes,
    write_bbox_csv, write_label_csv, LabelTable, CLASS_NAMES, NO_FINDING,
};
pub use self::synth::{derive_seed, generate_synthetic, BlobSpec, SyntheticSpec};

use crate::error::{Error, Result};
use crate::localize::{BBox, ImageBox};

/// One image with raw pixels; preprocessing happens per use so that train
/// crops can differ between epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image_id: String,
    pub image: Grayscale,
    pub labels: Vec<bool>,
    /// Ground-truth boxes in original image coordinates.
    pub boxes: Vec<BBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
    /// Whether box annotations were available at all.
    pub has_boxes: bool,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            class_names: self.class_names.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            has_boxes: self.has_boxes,
        }
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.image_id.clone()).collect()
    }

    pub fn label_table(&self) -> LabelTable {
        LabelTable {
            class_names: self.class_names.clone(),
            rows: self.samples.iter().map(|s| (s.image_id.clone(), s.labels.clone())).collect(),
        }
    }

    pub fn ground_truth(&self) -> Vec<ImageBox> {
        self.samples
            .iter()
            .flat_map(|s| s.boxes.iter().map(|b| ImageBox { image_id: s.image_id.clone(), bbox: *b }))
            .collect()
    }
}

fn planted_column(boxes: &[BBox], classes: &[String]) -> String {
    boxes
        .iter()
        .map(|b| format!("{} {} {} {} {}", classes[b.class_id], b.x, b.y, b.w, b.h))
        .collect::<Vec<_>>()
        .join("|")
}

/// `n` planted-disc samples as a dataset with boxes.
pub fn synthetic_dataset(spec: &SyntheticSpec, n: usize) -> Result<Dataset> {
    Ok(Dataset { class_names: spec.class_names(), samples: generate_synthetic(spec, n)?, has_boxes: true })
}

/// Writes a dataset directory. The label file carries an extra
/// `Planted Boxes` column (`Class x y w h`, pipe-separated) next to the
/// regular `bboxes.csv`.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::write(dir.join("classes.txt"), data.class_names.join("\n") + "\n")?;
    let mut w = csv::Writer::from_path(dir.join("labels.csv"))?;
    w.write_record(["Image Index", "Finding Labels", "Planted Boxes"])?;
    for s in &data.samples {
        w.write_record([
            s.image_id.as_str(),
            &format_findings(&s.labels, &data.class_names),
            &planted_column(&s.boxes, &data.class_names),
        ])?;
        write_pgm(&dir.join("images").join(&s.image_id), &s.image.pixels, s.image.width, s.image.height)?;
    }
    w.flush()?;
    if data.has_boxes {
        let file = fs::File::create(dir.join("bboxes.csv"))?;
        write_bbox_csv(file, &data.ground_truth(), &data.class_names)?;
    }
    Ok(())
}

/// Reads the class list of a dataset directory.
pub fn dataset_classes(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join("classes.txt");
    if !path.exists() {
        return Ok(canonical_classes());
    }
    let names: Vec<String> = fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if names.is_empty() {
        return Err(Error::Config("classes.txt lists no classes".into()));
    }
    Ok(names)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let class_names = dataset_classes(dir)?;
    let table = parse_label_csv(fs::File::open(dir.join("labels.csv"))?, &class_names)?;
    let bbox_path = dir.join("bboxes.csv");
    let has_boxes = bbox_path.exists();
    let mut boxes: BTreeMap<String, Vec<BBox>> = BTreeMap::new();
    if has_boxes {
        for b in parse_bbox_csv(fs::File::open(bbox_path)?, &class_names)? {
            boxes.entry(b.image_id).or_default().push(b.bbox);
        }
    }
    let samples = crate::par::map_slice(&table.rows, |(id, labels)| -> Result<Sample> {
        Ok(Sample {
            image_id: id.clone(),
            image: read_image(&dir.join("images").join(id))?,
            labels: labels.clone(),
            boxes: boxes.get(id).cloned().unwrap_or_default(),
        })
    });
    Ok(Dataset {
        class_names,
        samples: samples.into_iter().collect::<Result<_>>()?,
        has_boxes,
    })
}

/// Train/validation/test fractions.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
    /// Keep all images of a patient (the id prefix before the first `_`)
    /// in one split.
    pub group_by_patient: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 0.7, val: 0.1, test: 0.2, seed: 0, group_by_patient: true }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn patient_id(image_id: &str) -> &str {
    image_id.split('_').next().unwrap_or(image_id)
}

/// Shuffles groups with the seed and fills train, then validation, with
/// whole groups until each reaches its rounded target size; the rest is test.
/// Without grouping the sizes are exact.
pub fn split(ids: &[String], spec: &SplitSpec) -> Result<Splits> {
    if ids.is_empty() {
        return Err(Error::invalid("split", "no items to split"));
    }
    let fr = [spec.train, spec.val, spec.test];
    if fr.iter().any(|f| !(*f >= 0.0)) || ((fr.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fr:?} must be nonnegative and sum to 1")));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        let key = if spec.group_by_patient { patient_id(id) } else { id.as_str() };
        groups.entry(key).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n = ids.len() as f64;
    let n_train = (n * spec.train).round() as usize;
    let n_val = (n * spec.val).round() as usize;
    let mut out = Splits { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for g in groups {
        let dst = if out.train.len() < n_train {
            &mut out.train
        } else if out.val.len() < n_val {
            &mut out.val
        } else {
            &mut out.test
        };
        dst.extend(g);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{:04}_{:03}.png", i / 3, i % 3)).collect()
    }

    #[test]
    fn split_sizes() {
        let spec = SplitSpec { group_by_patient: false, ..Default::default() };
        let s = split(&ids(100), &spec).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 10, 20));
        assert_eq!(split(&ids(100), &spec).unwrap(), s);
        assert!(split(&[], &spec).is_err());
        let bad = SplitSpec { test: 0.5, ..spec };
        assert!(split(&ids(10), &bad).is_err());
    }

    #[test]
    fn split_keeps_patients_together() {
        let all = ids(99);
        let s = split(&all, &SplitSpec::default()).unwrap();
        let mut owner = BTreeMap::new();
        for (k, part) in [&s.train, &s.val, &s.test].iter().enumerate() {
            for &i in part.iter() {
                let prev = owner.insert(patient_id(&all[i]).to_string(), k);
                assert!(prev.is_none() || prev == Some(k));
            }
        }
        let mut every: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        every.sort_unstable();
        assert_eq!(every, (0..99).collect::<Vec<_>>());
    }

    #[test]
    fn dataset_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec::two_discs(4);
        let data = Dataset {
            class_names: spec.class_names(),
            samples: generate_synthetic(&spec, 6).unwrap(),
            has_boxes: true,
        };
        write_dataset(dir.path(), &data).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, data);
        let labels = fs::read_to_string(dir.path().join("labels.csv")).unwrap();
        assert!(labels.starts_with("Image Index,Finding Labels,Planted Boxes\n"));
    }
}
