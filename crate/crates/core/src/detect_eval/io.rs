use std::io::Write;
use std::path::Path;

use serde::Deserialize;

use super::boxes::{BBox, Detection, GroundTruthEntry};
use super::evaluate::EvalReport;
use super::{EvalError, Result};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDetection {
    image_id: String,
    modality: String,
    category: String,
    bbox: [f64; 4],
    score: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGroundTruth {
    image_id: String,
    modality: String,
    category: String,
    bbox: [f64; 4],
}

fn check_box(line: usize, b: [f64; 4]) -> Result<BBox> {
    const FIELDS: [&str; 4] = ["bbox.xmin", "bbox.ymin", "bbox.xmax", "bbox.ymax"];
    for (v, field) in b.iter().zip(FIELDS) {
        if !v.is_finite() {
            return Err(EvalError::Invalid {
                line,
                field,
                message: format!("{v} is not finite"),
            });
        }
    }
    if b[2] < b[0] {
        return Err(EvalError::Invalid {
            line,
            field: "bbox.xmax",
            message: format!("xmax {} < xmin {}", b[2], b[0]),
        });
    }
    if b[3] < b[1] {
        return Err(EvalError::Invalid {
            line,
            field: "bbox.ymax",
            message: format!("ymax {} < ymin {}", b[3], b[1]),
        });
    }
    Ok(BBox {
        xmin: b[0],
        ymin: b[1],
        xmax: b[2],
        ymax: b[3],
    })
}

fn check_name(line: usize, field: &'static str, v: &str) -> Result<()> {
    if v.is_empty() {
        Err(EvalError::Invalid {
            line,
            field,
            message: "must not be empty".into(),
        })
    } else {
        Ok(())
    }
}

/// Parse JSONL records, skipping blank lines. Line numbers are 1-based.
fn parse_lines<R, T>(text: &str, mut convert: impl FnMut(usize, R) -> Result<T>) -> Result<Vec<T>>
where
    R: for<'de> Deserialize<'de>,
{
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: R = serde_json::from_str(raw).map_err(|e| EvalError::Parse {
            line,
            message: e.to_string(),
        })?;
        out.push(convert(line, rec)?);
    }
    Ok(out)
}

pub fn parse_detections(text: &str) -> Result<Vec<Detection>> {
    parse_lines(text, |line, r: RawDetection| {
        check_name(line, "image_id", &r.image_id)?;
        check_name(line, "modality", &r.modality)?;
        check_name(line, "category", &r.category)?;
        let bbox = check_box(line, r.bbox)?;
        if !(r.score.is_finite() && (0.0..=1.0).contains(&r.score)) {
            return Err(EvalError::Invalid {
                line,
                field: "score",
                message: format!("{} outside [0, 1]", r.score),
            });
        }
        Ok(Detection {
            image_id: r.image_id,
            modality: r.modality,
            category: r.category,
            bbox,
            score: r.score,
        })
    })
}

pub fn parse_ground_truth(text: &str) -> Result<Vec<GroundTruthEntry>> {
    parse_lines(text, |line, r: RawGroundTruth| {
        check_name(line, "image_id", &r.image_id)?;
        check_name(line, "modality", &r.modality)?;
        check_name(line, "category", &r.category)?;
        let bbox = check_box(line, r.bbox)?;
        Ok(GroundTruthEntry {
            image_id: r.image_id,
            modality: r.modality,
            category: r.category,
            bbox,
        })
    })
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_detections(path: &Path) -> Result<Vec<Detection>> {
    parse_detections(&read(path)?)
}

pub fn load_ground_truth(path: &Path) -> Result<Vec<GroundTruthEntry>> {
    parse_ground_truth(&read(path)?)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_report_json(report: &EvalReport, path: &Path) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(report).map_err(|e| EvalError::Serialize(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// Per-category rows, then one `*` row per modality and overall, then H-mAP.
/// Values are percent with two decimals.
pub fn write_report_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let ser = |e: csv::Error| EvalError::Serialize(e.to_string());
    w.write_record(["category", "modality", "ap50", "ap"])
        .map_err(ser)?;
    for c in &report.per_category {
        w.write_record([
            c.category.as_str(),
            c.modality.as_str(),
            &pct(c.ap50),
            &pct(c.ap),
        ])
        .map_err(ser)?;
    }
    for (m, v) in &report.per_modality_map {
        w.write_record(["*", m.as_str(), &pct(v.ap50), &pct(v.ap)])
            .map_err(ser)?;
    }
    w.write_record([
        "*",
        "*",
        &pct(report.global_map.ap50),
        &pct(report.global_map.ap),
    ])
    .map_err(ser)?;
    w.write_record(["H-mAP", "*", &pct(report.hmap.ap50), &pct(report.hmap.ap)])
        .map_err(ser)?;
    let mut inner = w
        .into_inner()
        .map_err(|e| EvalError::Serialize(e.to_string()))?;
    inner.flush().map_err(io_err(path))
}
