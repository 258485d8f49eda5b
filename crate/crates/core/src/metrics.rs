//! Per-class AUROC for multi-label classification.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn counts(labels: &[bool], class: &str) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuroc { class: class.to_string(), positives: pos, negatives: neg });
    }
    Ok((pos, neg))
}

/// Mann-Whitney AUROC with average ranks for ties.
pub fn auroc(scores: &[f64], labels: &[bool], class: &str) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auroc", format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    let (pos, neg) = counts(labels, class)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Direct count over all positive/negative pairs. Quadratic; test use only.
pub fn auroc_bruteforce_oracle(scores: &[f64], labels: &[bool], class: &str) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auroc", format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    let (pos, neg) = counts(labels, class)?;
    let mut total = 0.0;
    for (i, &sp) in scores.iter().enumerate().filter(|(i, _)| labels[*i]) {
        for (_, &sn) in scores.iter().enumerate().filter(|(j, _)| !labels[*j] && *j != i) {
            total += if sp > sn {
                1.0
            } else if sp == sn {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(total / (pos as f64 * neg as f64))
}

/// Per-class AUROC (`None` where undefined) and their macro average over
/// the defined classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationReport {
    pub class_names: Vec<String>,
    pub auroc: Vec<Option<f64>>,
    pub macro_auroc: Option<f64>,
}

pub fn classification_report(scores: &Tensor, labels: &Tensor, class_names: &[String]) -> Result<ClassificationReport> {
    let c = class_names.len();
    if scores.shape() != labels.shape() || scores.ndim() != 2 || scores.shape()[1] != c {
        return Err(Error::shape(
            "classification_report",
            format!("scores {:?}, labels {:?}, {c} classes", scores.shape(), labels.shape()),
        ));
    }
    let n = scores.shape()[0];
    let per_class: Vec<Option<f64>> = crate::par::map_range(c, |cls| {
        let s: Vec<f64> = (0..n).map(|i| scores.data()[i * c + cls]).collect();
        let l: Vec<bool> = (0..n).map(|i| labels.data()[i * c + cls] == 1.0).collect();
        auroc(&s, &l, &class_names[cls]).ok()
    });
    for (name, v) in class_names.iter().zip(&per_class) {
        if v.is_none() {
            log::warn!("AUROC undefined for class {name}: needs both positive and negative samples");
        }
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_auroc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(ClassificationReport { class_names: class_names.to_vec(), auroc: per_class, macro_auroc })
}

impl ClassificationReport {
    fn cell(v: Option<f64>) -> String {
        v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
    }

    /// `class,auroc` rows followed by a `macro` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,auroc\n");
        for (name, v) in self.class_names.iter().zip(&self.auroc) {
            let _ = writeln!(out, "{name},{}", Self::cell(*v));
        }
        let _ = writeln!(out, "macro,{}", Self::cell(self.macro_auroc));
        out
    }

    pub fn to_text(&self) -> String {
        let width = self.class_names.iter().map(String::len).max().unwrap_or(0).max(9);
        let mut out = format!("{:<width$}  AUROC\n", "Pathology");
        for (name, v) in self.class_names.iter().zip(&self.auroc) {
            let _ = writeln!(out, "{name:<width$}  {}", Self::cell(*v));
        }
        let _ = writeln!(out, "{:<width$}  {}", "Average", Self::cell(self.macro_auroc));
        out
    }
}
