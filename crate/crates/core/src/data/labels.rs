//! Label and bounding-box CSVs in the ChestX-ray14 layout.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::localize::{BBox, ImageBox};

/// The 14 findings in their canonical order.
pub const CLASS_NAMES: [&str; 14] = [
    "Atelectasis",
    "Cardiomegaly",
    "Effusion",
    "Infiltration",
    "Mass",
    "Nodule",
    "Pneumonia",
    "Pneumothorax",
    "Consolidation",
    "Edema",
    "Emphysema",
    "Fibrosis",
    "Pleural_Thickening",
    "Hernia",
];

pub const NO_FINDING: &str = "No Finding";

pub fn canonical_classes() -> Vec<String> {
    CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

/// Index of `name` in `classes`. Spaces and underscores are interchangeable
/// ("Pleural Thickening" vs "Pleural_Thickening"), and the bbox file's
/// "Infiltrate" spelling maps to "Infiltration".
pub fn class_index(classes: &[String], name: &str) -> Option<usize> {
    let key = |s: &str| s.trim().replace(' ', "_").to_ascii_lowercase();
    let wanted = match key(name).as_str() {
        "infiltrate" => "infiltration".to_string(),
        k => k.to_string(),
    };
    classes.iter().position(|c| key(c) == wanted)
}

/// Multi-hot labels per image, in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelTable {
    pub class_names: Vec<String>,
    pub rows: Vec<(String, Vec<bool>)>,
}

impl LabelTable {
    pub fn new(class_names: Vec<String>) -> Self {
        LabelTable { class_names, rows: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&[bool]> {
        self.rows.iter().find(|r| r.0 == image_id).map(|r| r.1.as_slice())
    }

    pub fn ids(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.0.clone()).collect()
    }
}

/// Pipe-separated findings to a multi-hot vector.
pub fn parse_findings(field: &str, classes: &[String], line: usize) -> Result<Vec<bool>> {
    let mut bits = vec![false; classes.len()];
    let field = field.trim();
    if field.is_empty() {
        return Err(Error::Parse { line, detail: "empty finding labels".into() });
    }
    if field == NO_FINDING {
        return Ok(bits);
    }
    for name in field.split('|') {
        let i = class_index(classes, name).ok_or_else(|| Error::UnknownClass(format!("{name} (line {line})")))?;
        bits[i] = true;
    }
    Ok(bits)
}

pub fn format_findings(bits: &[bool], classes: &[String]) -> String {
    let names: Vec<&str> = classes
        .iter()
        .zip(bits)
        .filter(|(_, &b)| b)
        .map(|(c, _)| c.as_str())
        .collect();
    if names.is_empty() {
        NO_FINDING.to_string()
    } else {
        names.join("|")
    }
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().flexible(true).has_headers(true).from_reader(input)
}

/// Parses `Image Index,Finding Labels,...`; extra columns are ignored.
pub fn parse_label_csv<R: Read>(input: R, classes: &[String]) -> Result<LabelTable> {
    let mut table = LabelTable::new(classes.to_vec());
    for (i, rec) in reader(input).records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        if rec.len() < 2 {
            return Err(Error::Parse { line, detail: format!("expected at least 2 fields, found {}", rec.len()) });
        }
        let id = rec[0].trim();
        if id.is_empty() {
            return Err(Error::Parse { line, detail: "empty image id".into() });
        }
        table.rows.push((id.to_string(), parse_findings(&rec[1], classes, line)?));
    }
    Ok(table)
}

pub fn write_label_csv<W: Write>(out: W, table: &LabelTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["Image Index", "Finding Labels"])?;
    for (id, bits) in &table.rows {
        w.write_record([id.as_str(), &format_findings(bits, &table.class_names)])?;
    }
    w.flush()?;
    Ok(())
}

/// Parses `Image Index,Finding Label,x,y,w,h` by position. Coordinates are
/// kept as written; use [`rescale_boxes`] for other resolutions.
pub fn parse_bbox_csv<R: Read>(input: R, classes: &[String]) -> Result<Vec<ImageBox>> {
    let mut boxes = Vec::new();
    for (i, rec) in reader(input).records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        if rec.len() < 6 {
            return Err(Error::Parse { line, detail: format!("expected 6 fields, found {}", rec.len()) });
        }
        let class_id =
            class_index(classes, &rec[1]).ok_or_else(|| Error::UnknownClass(format!("{} (line {line})", &rec[1])))?;
        let num = |j: usize| -> Result<f64> {
            rec[j].trim().parse::<f64>().map_err(|_| Error::Parse { line, detail: format!("bad number {:?}", &rec[j]) })
        };
        let bbox = BBox::new(num(2)?, num(3)?, num(4)?, num(5)?, class_id);
        if !bbox.is_valid() {
            return Err(Error::Parse { line, detail: format!("box needs positive size, got w={} h={}", bbox.w, bbox.h) });
        }
        boxes.push(ImageBox { image_id: rec[0].trim().to_string(), bbox });
    }
    Ok(boxes)
}

pub fn write_bbox_csv<W: Write>(out: W, boxes: &[ImageBox], classes: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["Image Index", "Finding Label", "x", "y", "w", "h"])?;
    for b in boxes {
        let r = &b.bbox;
        w.write_record([
            b.image_id.clone(),
            classes[r.class_id].clone(),
            r.x.to_string(),
            r.y.to_string(),
            r.w.to_string(),
            r.h.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Scales boxes from a `from`-pixel square to a `to`-pixel square.
pub fn rescale_boxes(boxes: &[ImageBox], from: usize, to: usize) -> Vec<ImageBox> {
    let f = to as f64 / from as f64;
    boxes
        .iter()
        .map(|b| ImageBox { image_id: b.image_id.clone(), bbox: b.bbox.scaled(f) })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "Image Index,Finding Labels,Follow-up #\n";

    #[test]
    fn findings_to_bits() {
        let classes = canonical_classes();
        let csv = format!("{HEADER}a.png,Cardiomegaly|Effusion,0\nb.png,No Finding,0\nc.png,Hernia,1\n");
        let t = parse_label_csv(csv.as_bytes(), &classes).unwrap();
        let a = t.get("a.png").unwrap();
        assert_eq!(a.iter().filter(|&&b| b).count(), 2);
        assert!(a[1] && a[2]);
        assert!(t.get("b.png").unwrap().iter().all(|&b| !b));
        let c = t.get("c.png").unwrap();
        assert!(c[13] && c.iter().filter(|&&b| b).count() == 1);
    }

    #[test]
    fn unknown_and_malformed_rows() {
        let classes = canonical_classes();
        let bad = format!("{HEADER}a.png,Flu,0\n");
        assert!(matches!(parse_label_csv(bad.as_bytes(), &classes), Err(Error::UnknownClass(_))));
        let bad = format!("{HEADER}a.png,Mass,0\nonlyone\n");
        assert!(matches!(parse_label_csv(bad.as_bytes(), &classes), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn label_round_trip() {
        let classes = canonical_classes();
        let csv = format!("{HEADER}a.png,Pleural Thickening|Mass,0\nb.png,No Finding,0\n");
        let t = parse_label_csv(csv.as_bytes(), &classes).unwrap();
        let mut buf = Vec::new();
        write_label_csv(&mut buf, &t).unwrap();
        assert_eq!(parse_label_csv(buf.as_slice(), &classes).unwrap(), t);
    }

    #[test]
    fn bbox_rows() {
        let classes = canonical_classes();
        let csv = "Image Index,Finding Label,Bbox [x,y,w,h],,,\nx.png,Infiltrate,10,20,100,50\n";
        let b = parse_bbox_csv(csv.as_bytes(), &classes).unwrap();
        assert_eq!(b[0].bbox, BBox::new(10., 20., 100., 50., 3));
        assert_eq!(rescale_boxes(&b, 1024, 1024), b);
        let big = vec![ImageBox { image_id: "y".into(), bbox: BBox::new(512., 512., 256., 256., 0) }];
        assert_eq!(rescale_boxes(&big, 1024, 256)[0].bbox, BBox::new(128., 128., 64., 64., 0));
        let zero = "h,c,x,y,w,h\nx.png,Mass,1,1,5,0\n";
        assert!(matches!(parse_bbox_csv(zero.as_bytes(), &classes), Err(Error::Parse { line: 2, .. })));
    }
}
