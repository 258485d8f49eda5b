//! Heatmaps to bounding boxes, and localization scoring.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::wsl::Heatmap;

/// IoU thresholds of the detection-accuracy table.
pub const IOU_THRESHOLDS: [f64; 7] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];

/// Axis-aligned box in image pixels; `(x, y)` is the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: usize,
    /// Mean normalized heatmap value inside the box; 1 for ground truth.
    pub score: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64, class_id: usize) -> Self {
        BBox { x, y, w, h, class_id, score: 1.0 }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.x.is_finite() && self.y.is_finite()
    }

    pub fn scaled(&self, factor: f64) -> BBox {
        BBox {
            x: self.x * factor,
            y: self.y * factor,
            w: self.w * factor,
            h: self.h * factor,
            ..*self
        }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let ih = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Min-max normalization of one plane; constant planes become zeros.
pub fn normalize_plane(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / range).collect()
}

/// Normalizes every (image, class) plane to [0, 1].
pub fn normalize_heatmap(h: &Heatmap) -> Heatmap {
    let (_, _, hh, ww) = h.dims();
    let mut t = h.tensor().clone();
    for plane in t.data_mut().chunks_mut(hh * ww) {
        let norm = normalize_plane(plane);
        plane.copy_from_slice(&norm);
    }
    Heatmap(t)
}

/// 0.8 for Cardiomegaly, 0.9 for every other class.
pub fn default_thresholds(class_names: &[String]) -> Vec<f64> {
    class_names
        .iter()
        .map(|n| if n.eq_ignore_ascii_case("cardiomegaly") { 0.8 } else { 0.9 })
        .collect()
}

/// 8-connected labeling of a row-major mask. Returns the label of every cell
/// (`None` below threshold) and the number of components, numbered in order
/// of their first cell.
pub fn connected_components(mask: &[bool], h: usize, w: usize) -> (Vec<Option<usize>>, usize) {
    let mut labels = vec![None; h * w];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask[start] || labels[start].is_some() {
            continue;
        }
        labels[start] = Some(count);
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let j = nr as usize * w + nc as usize;
                    if mask[j] && labels[j].is_none() {
                        labels[j] = Some(count);
                        stack.push(j);
                    }
                }
            }
        }
        count += 1;
    }
    (labels, count)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoxOptions {
    /// One threshold per class, each in (0, 1).
    pub thresholds: Vec<f64>,
    /// Components with fewer heatmap cells are dropped.
    pub min_area: usize,
}

impl BoxOptions {
    pub fn new(thresholds: Vec<f64>) -> Self {
        BoxOptions { thresholds, min_area: 0 }
    }
}

/// Boxes for one normalized `h×w` plane. Cells with value ≥ threshold are
/// foreground; every component yields its tight rectangle scaled to an
/// image of `image_size = (height, width)` and clipped to it.
pub fn plane_to_boxes(
    plane: &[f64],
    (h, w): (usize, usize),
    image_size: (usize, usize),
    threshold: f64,
    class_id: usize,
    min_area: usize,
) -> Vec<BBox> {
    let mask: Vec<bool> = plane.iter().map(|&v| v >= threshold).collect();
    let (labels, count) = connected_components(&mask, h, w);
    let mut extent = vec![(usize::MAX, usize::MAX, 0usize, 0usize, 0usize); count];
    for (i, label) in labels.iter().enumerate() {
        if let Some(l) = *label {
            let (r, c) = (i / w, i % w);
            let e = &mut extent[l];
            e.0 = e.0.min(r);
            e.1 = e.1.min(c);
            e.2 = e.2.max(r);
            e.3 = e.3.max(c);
            e.4 += 1;
        }
    }
    let sy = image_size.0 as f64 / h as f64;
    let sx = image_size.1 as f64 / w as f64;
    extent
        .into_iter()
        .filter(|e| e.4 >= min_area.max(1))
        .map(|(r0, c0, r1, c1, _)| {
            let mut sum = 0.0;
            for r in r0..=r1 {
                sum += plane[r * w + c0..=r * w + c1].iter().sum::<f64>();
            }
            let cells = ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
            let x = (c0 as f64 * sx).min(image_size.1 as f64);
            let y = (r0 as f64 * sy).min(image_size.0 as f64);
            let x1 = ((c1 + 1) as f64 * sx).min(image_size.1 as f64);
            let y1 = ((r1 + 1) as f64 * sy).min(image_size.0 as f64);
            BBox { x, y, w: x1 - x, h: y1 - y, class_id, score: sum / cells }
        })
        .collect()
}

/// Boxes for every image of a normalized heatmap `[N, C, h, w]`, one list
/// per image.
pub fn heatmap_to_boxes(h: &Heatmap, image_size: (usize, usize), opts: &BoxOptions) -> Result<Vec<Vec<BBox>>> {
    let (n, c, hh, ww) = h.dims();
    if opts.thresholds.len() != c {
        return Err(Error::shape(
            "heatmap_to_boxes",
            format!("{} thresholds for {c} classes", opts.thresholds.len()),
        ));
    }
    if let Some(t) = opts.thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(Error::invalid("heatmap_to_boxes", format!("threshold {t} outside (0,1)")));
    }
    Ok((0..n)
        .map(|i| {
            (0..c)
                .flat_map(|cls| {
                    plane_to_boxes(h.plane(i, cls), (hh, ww), image_size, opts.thresholds[cls], cls, opts.min_area)
                })
                .collect()
        })
        .collect())
}

/// A box attached to an image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBox {
    pub image_id: String,
    pub bbox: BBox,
}

/// Detection accuracy per class and IoU threshold, plus mean matched IoU.
/// Classes without ground-truth boxes have `None` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationReport {
    pub class_names: Vec<String>,
    pub thresholds: Vec<f64>,
    /// `accuracy[class][t]`.
    pub accuracy: Vec<Option<Vec<f64>>>,
    pub mean_iou: Vec<Option<f64>>,
    pub gt_counts: Vec<usize>,
    /// Matched IoU of every ground-truth box, in input order.
    pub matched: Vec<f64>,
}

fn check_class(b: &ImageBox, classes: usize, class_names: &[String]) -> Result<()> {
    if b.bbox.class_id >= classes {
        return Err(Error::UnknownClass(format!(
            "class id {} (known: {})",
            b.bbox.class_id,
            class_names.join(", ")
        )));
    }
    Ok(())
}

/// Matches each ground-truth box to the best-overlapping prediction of the
/// same image and class.
pub fn score_localization(
    predictions: &[ImageBox],
    ground_truth: &[ImageBox],
    class_names: &[String],
    thresholds: &[f64],
) -> Result<LocalizationReport> {
    let c = class_names.len();
    let mut by_key: HashMap<(&str, usize), Vec<&BBox>> = HashMap::new();
    for p in predictions {
        check_class(p, c, class_names)?;
        by_key.entry((p.image_id.as_str(), p.bbox.class_id)).or_default().push(&p.bbox);
    }
    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); c];
    let mut matched = Vec::with_capacity(ground_truth.len());
    for g in ground_truth {
        check_class(g, c, class_names)?;
        let best = by_key
            .get(&(g.image_id.as_str(), g.bbox.class_id))
            .map(|ps| ps.iter().map(|p| iou(p, &g.bbox)).fold(0.0, f64::max))
            .unwrap_or(0.0);
        per_class[g.bbox.class_id].push(best);
        matched.push(best);
    }
    let accuracy = per_class
        .iter()
        .map(|ious| {
            (!ious.is_empty()).then(|| {
                thresholds
                    .iter()
                    .map(|&t| ious.iter().filter(|&&v| v >= t).count() as f64 / ious.len() as f64)
                    .collect()
            })
        })
        .collect();
    let mean_iou = per_class
        .iter()
        .map(|ious| (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64))
        .collect();
    let report = LocalizationReport {
        class_names: class_names.to_vec(),
        thresholds: thresholds.to_vec(),
        accuracy,
        mean_iou,
        gt_counts: per_class.iter().map(Vec::len).collect(),
        matched,
    };
    debug_assert!(report.is_monotone());
    Ok(report)
}

impl LocalizationReport {
    /// Rows are non-increasing in T when thresholds are sorted ascending.
    pub fn is_monotone(&self) -> bool {
        let sorted = self.thresholds.windows(2).all(|p| p[0] <= p[1]);
        !sorted
            || self
                .accuracy
                .iter()
                .flatten()
                .all(|row| row.windows(2).all(|p| p[0] >= p[1]))
    }

    fn cell(v: Option<f64>) -> String {
        v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
    }

    /// CSV with one row per threshold and a final `mean_iou` row.
    pub fn to_csv(&self) -> String {
        let mut out = format!("metric,{}\n", self.class_names.join(","));
        for (ti, t) in self.thresholds.iter().enumerate() {
            let cells: Vec<String> = self
                .accuracy
                .iter()
                .map(|row| Self::cell(row.as_ref().map(|r| r[ti])))
                .collect();
            let _ = writeln!(out, "T(IoU)={t},{}", cells.join(","));
        }
        let cells: Vec<String> = self.mean_iou.iter().map(|v| Self::cell(*v)).collect();
        let _ = writeln!(out, "mean_iou,{}", cells.join(","));
        out
    }

    pub fn to_text(&self) -> String {
        let width = self.class_names.iter().map(String::len).max().unwrap_or(0).max(8);
        let mut out = format!("{:<10}", "T(IoU)");
        for name in &self.class_names {
            let _ = write!(out, " {name:>width$}");
        }
        out.push('\n');
        let mut row = |label: String, cells: Vec<String>| {
            let _ = write!(out, "{label:<10}");
            for c in cells {
                let _ = write!(out, " {c:>width$}");
            }
            out.push('\n');
        };
        for (ti, t) in self.thresholds.iter().enumerate() {
            row(
                format!("{t}"),
                self.accuracy.iter().map(|r| Self::cell(r.as_ref().map(|r| r[ti]))).collect(),
            );
        }
        row("mean IoU".into(), self.mean_iou.iter().map(|v| Self::cell(*v)).collect());
        out
    }
}

/// Writes `image_id,class_name,x,y,w,h,score` rows.
pub fn write_boxes_csv<W: Write>(out: W, boxes: &[ImageBox], class_names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["image_id", "class_name", "x", "y", "w", "h", "score"])?;
    for b in boxes {
        check_class(b, class_names.len(), class_names)?;
        let r = &b.bbox;
        w.write_record([
            b.image_id.clone(),
            class_names[r.class_id].clone(),
            r.x.to_string(),
            r.y.to_string(),
            r.w.to_string(),
            r.h.to_string(),
            r.score.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the format of [`write_boxes_csv`].
pub fn read_boxes_csv<R: Read>(input: R, class_names: &[String]) -> Result<Vec<ImageBox>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut boxes = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != 7 {
            return Err(Error::Parse { line, detail: format!("expected 7 fields, found {}", rec.len()) });
        }
        let class_id = class_names
            .iter()
            .position(|n| n == &rec[1])
            .ok_or_else(|| Error::UnknownClass(rec[1].to_string()))?;
        let num = |j: usize| -> Result<f64> {
            rec[j].trim().parse().map_err(|_| Error::Parse { line, detail: format!("bad number {:?}", &rec[j]) })
        };
        boxes.push(ImageBox {
            image_id: rec[0].to_string(),
            bbox: BBox { x: num(2)?, y: num(3)?, w: num(4)?, h: num(5)?, class_id, score: num(6)? },
        });
    }
    Ok(boxes)
}

/// Saves a normalized plane as an 8-bit PGM with values `round(255·v)`.
pub fn write_heatmap_pgm(path: &Path, plane: &[f64], (h, w): (usize, usize)) -> Result<()> {
    let bytes: Vec<u8> = plane.iter().map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8).collect();
    crate::data::write_pgm(path, &bytes, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0., 0., 10., 10., 0);
        let b = BBox::new(5., 5., 10., 10., 0);
        assert!((iou(&a, &b) - 25.0 / 175.0).abs() < 1e-15);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(20., 0., 5., 5., 0)), 0.0);
        assert_eq!(iou(&a, &BBox::new(10., 0., 5., 5., 0)), 0.0);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_plane(&[1., 2., 3., 5.]), vec![0., 0.25, 0.5, 1.]);
        assert_eq!(normalize_plane(&[7.; 4]), vec![0.; 4]);
        assert_eq!(normalize_plane(&[0., 0.3, 1.]), vec![0., 0.3, 1.]);
        let h = Heatmap(Tensor::new(&[1, 2, 1, 2], vec![1., 3., 4., 4.]).unwrap());
        assert_eq!(normalize_heatmap(&h).tensor().data(), &[0., 1., 0., 0.]);
    }

    #[test]
    fn components_are_eight_connected() {
        #[rustfmt::skip]
        let mask = [
            true, false, false,
            false, true, false,
            false, false, false,
        ];
        let (_, n) = connected_components(&mask, 3, 3);
        assert_eq!(n, 1);
    }

    #[test]
    fn two_blobs_two_boxes() {
        let mut plane = vec![0.0; 36];
        for (r, c) in [(0, 0), (0, 1), (1, 1)] {
            plane[r * 6 + c] = 1.0;
        }
        for (r, c) in [(3, 4), (4, 4), (4, 5), (5, 5)] {
            plane[r * 6 + c] = 0.95;
        }
        let boxes = plane_to_boxes(&plane, (6, 6), (96, 96), 0.9, 0, 0);
        assert_eq!(boxes.len(), 2);
        assert_eq!((boxes[0].x, boxes[0].y, boxes[0].w, boxes[0].h), (0., 0., 32., 32.));
        assert_eq!((boxes[1].x, boxes[1].y, boxes[1].w, boxes[1].h), (64., 48., 32., 48.));
        assert!(plane_to_boxes(&vec![0.0; 36], (6, 6), (96, 96), 0.9, 0, 0).is_empty());
        assert_eq!(plane_to_boxes(&plane, (6, 6), (96, 96), 0.9, 0, 4).len(), 1);
    }

    #[test]
    fn default_cardiomegaly_threshold() {
        let t = default_thresholds(&names(&["Atelectasis", "Cardiomegaly", "Hernia"]));
        assert_eq!(t, vec![0.9, 0.8, 0.9]);
    }

    #[test]
    fn scoring_examples() {
        let classes = names(&["a", "b"]);
        let gt = vec![ImageBox { image_id: "i".into(), bbox: BBox::new(0., 0., 10., 10., 0) }];
        let r = score_localization(&gt, &gt, &classes, &IOU_THRESHOLDS).unwrap();
        assert_eq!(r.accuracy[0].as_ref().unwrap(), &vec![1.0; 7]);
        assert_eq!(r.mean_iou, vec![Some(1.0), None]);

        let r = score_localization(&[], &gt, &classes, &IOU_THRESHOLDS).unwrap();
        assert_eq!(r.accuracy[0].as_ref().unwrap(), &vec![0.0; 7]);

        // 0.35 = 35/100 with the prediction inside the GT box.
        let pred = vec![ImageBox { image_id: "i".into(), bbox: BBox::new(0., 0., 10., 3.5, 0) }];
        let r = score_localization(&pred, &gt, &classes, &IOU_THRESHOLDS).unwrap();
        assert!((r.matched[0] - 0.35).abs() < 1e-12);
        assert_eq!(r.accuracy[0].as_ref().unwrap(), &vec![1., 1., 1., 0., 0., 0., 0.]);

        let bad = vec![ImageBox { image_id: "i".into(), bbox: BBox::new(0., 0., 1., 1., 5) }];
        assert!(matches!(score_localization(&bad, &gt, &classes, &IOU_THRESHOLDS), Err(Error::UnknownClass(_))));
    }

    #[test]
    fn csv_round_trip() {
        let classes = names(&["a", "b"]);
        let boxes = vec![ImageBox {
            image_id: "img_1".into(),
            bbox: BBox { x: 1.5, y: 2.0, w: 3.0, h: 4.25, class_id: 1, score: 0.875 },
        }];
        let mut buf = Vec::new();
        write_boxes_csv(&mut buf, &boxes, &classes).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("image_id,class_name,x,y,w,h,score\n"));
        assert_eq!(read_boxes_csv(buf.as_slice(), &classes).unwrap(), boxes);
        let bad = b"image_id,class_name,x,y,w,h,score\ni,zzz,0,0,1,1,1\n";
        assert!(read_boxes_csv(&bad[..], &classes).is_err());
    }

    #[test]
    fn report_formats() {
        let classes = names(&["a", "b"]);
        let gt = vec![ImageBox { image_id: "i".into(), bbox: BBox::new(0., 0., 10., 10., 0) }];
        let r = score_localization(&gt, &gt, &classes, &IOU_THRESHOLDS).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("metric,a,b\nT(IoU)=0.1,1.0000,n/a\n"), "{csv}");
        assert!(csv.ends_with("mean_iou,1.0000,n/a\n"));
        assert_eq!(r.to_text().lines().count(), 9);
    }
}
