//! Line-delimited JSON interchange for annotations and predictions.
//!
//! Boxes are pixel corners `[x1, y1, x2, y2]` on disk; floats are written
//! with six decimals, one object per LF-terminated line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::boxes::Corners;
use crate::data::record::{Group, ImageRecord, TripletPrediction};
use crate::data::taxonomy::{taxonomy, BroadType};
use crate::error::{Error, Result};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGroup {
    members: Vec<usize>,
    broad: String,
    atomic: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    image_id: u64,
    width: u32,
    height: u32,
    individuals: Vec<[f64; 4]>,
    groups: Vec<RawGroup>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTriplet {
    ind: [f64; 4],
    grp: [f64; 4],
    atomic: String,
    score: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPredictionLine {
    image_id: u64,
    triplets: Vec<RawTriplet>,
}

fn non_blank_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn located(line: usize, err: Error) -> Error {
    match err {
        Error::Validation { field, message } => Error::Validation {
            field: format!("line {line}: {field}"),
            message,
        },
        other => other,
    }
}

fn check_corners(c: [f64; 4], field: &str) -> Result<Corners> {
    if c.iter().any(|v| !v.is_finite()) || c[2] < c[0] || c[3] < c[1] {
        return Err(Error::validation(field, format!("malformed box {c:?}")));
    }
    Ok(Corners::from_array(c))
}

fn record_from_raw(raw: RawRecord) -> Result<ImageRecord> {
    let tax = taxonomy();
    let (w, h) = (raw.width as f64, raw.height as f64);
    if raw.width == 0 || raw.height == 0 {
        return Err(Error::validation("width/height", "must be positive"));
    }
    let individuals = raw
        .individuals
        .iter()
        .enumerate()
        .map(|(i, &c)| Ok(check_corners(c, &format!("individuals[{i}]"))?.normalized(w, h)))
        .collect::<Result<Vec<_>>>()?;
    let groups = raw
        .groups
        .into_iter()
        .enumerate()
        .map(|(g, rg)| {
            let broad = BroadType::parse(&rg.broad)
                .map_err(|e| located_field(e, &format!("groups[{g}].broad")))?;
            let atomic = tax
                .by_name(&rg.atomic)
                .map_err(|e| located_field(e, &format!("groups[{g}].atomic")))?
                .id;
            let bbox = check_corners(rg.bbox, &format!("groups[{g}].box"))?.normalized(w, h);
            Ok(Group {
                members: rg.members,
                broad,
                atomic,
                bbox,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let record = ImageRecord {
        image_id: raw.image_id,
        width: raw.width,
        height: raw.height,
        individuals,
        groups,
    };
    record.validate()?;
    Ok(record)
}

fn located_field(err: Error, field: &str) -> Error {
    match err {
        Error::Validation { message, .. } => Error::validation(field, message),
        other => other,
    }
}

/// Parses and validates annotation text.
pub fn parse_annotations_str(text: &str) -> Result<Vec<ImageRecord>> {
    non_blank_lines(text)
        .map(|(line, body)| {
            let raw: RawRecord = serde_json::from_str(body).map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
            record_from_raw(raw).map_err(|e| located(line, e))
        })
        .collect()
}

pub fn parse_annotations(path: impl AsRef<Path>) -> Result<Vec<ImageRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    parse_annotations_str(&text)
}

/// Six-decimal float, never printing a negative zero.
pub fn fmt6(v: f64) -> String {
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        "0.000000".to_string()
    } else {
        s
    }
}

fn fmt_box(c: Corners) -> String {
    let parts: Vec<String> = c.to_array().iter().map(|&v| fmt6(v)).collect();
    format!("[{}]", parts.join(","))
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization cannot fail")
}

pub fn write_annotations_string(records: &[ImageRecord]) -> String {
    let tax = taxonomy();
    let mut out = String::new();
    for r in records {
        let (w, h) = r.size();
        let individuals: Vec<String> = r.individuals.iter().map(|b| fmt_box(b.to_pixels(w, h))).collect();
        let groups: Vec<String> = r
            .groups
            .iter()
            .map(|g| {
                let members: Vec<String> = g.members.iter().map(usize::to_string).collect();
                format!(
                    "{{\"members\":[{}],\"broad\":{},\"atomic\":{},\"box\":{}}}",
                    members.join(","),
                    json_str(g.broad.name()),
                    json_str(tax.entries()[g.atomic].name),
                    fmt_box(g.bbox.to_pixels(w, h))
                )
            })
            .collect();
        let _ = writeln!(
            out,
            "{{\"image_id\":{},\"width\":{},\"height\":{},\"individuals\":[{}],\"groups\":[{}]}}",
            r.image_id,
            r.width,
            r.height,
            individuals.join(","),
            groups.join(",")
        );
    }
    out
}

pub fn write_annotations(path: impl AsRef<Path>, records: &[ImageRecord]) -> Result<()> {
    std::fs::write(path, write_annotations_string(records))?;
    Ok(())
}

/// Parses predictions; scores must lie in `[0, 1]`.
pub fn parse_predictions_str(text: &str) -> Result<Vec<TripletPrediction>> {
    let tax = taxonomy();
    let mut out = Vec::new();
    for (line, body) in non_blank_lines(text) {
        let raw: RawPredictionLine = serde_json::from_str(body).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        for (k, t) in raw.triplets.into_iter().enumerate() {
            let field = |name: &str| format!("line {line}: triplets[{k}].{name}");
            let atomic = tax
                .by_name(&t.atomic)
                .map_err(|e| located_field(e, &field("atomic")))?
                .id;
            if !(0.0..=1.0).contains(&t.score) {
                return Err(Error::validation(field("score"), format!("{} not in [0, 1]", t.score)));
            }
            out.push(TripletPrediction {
                image_id: raw.image_id,
                individual: check_corners(t.ind, &field("ind"))?,
                group: check_corners(t.grp, &field("grp"))?,
                atomic,
                confidence: t.score,
            });
        }
    }
    Ok(out)
}

pub fn parse_predictions(path: impl AsRef<Path>) -> Result<Vec<TripletPrediction>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    parse_predictions_str(&text)
}

/// One line per image id, ascending; triplets keep their input order.
pub fn write_predictions_string(preds: &[TripletPrediction]) -> String {
    let tax = taxonomy();
    let mut by_image: BTreeMap<u64, Vec<&TripletPrediction>> = BTreeMap::new();
    for p in preds {
        by_image.entry(p.image_id).or_default().push(p);
    }
    let mut out = String::new();
    for (id, list) in by_image {
        let triplets: Vec<String> = list
            .iter()
            .map(|p| {
                format!(
                    "{{\"ind\":{},\"grp\":{},\"atomic\":{},\"score\":{}}}",
                    fmt_box(p.individual),
                    fmt_box(p.group),
                    json_str(tax.entries()[p.atomic].name),
                    fmt6(p.confidence)
                )
            })
            .collect();
        let _ = writeln!(out, "{{\"image_id\":{id},\"triplets\":[{}]}}", triplets.join(","));
    }
    out
}

pub fn write_predictions(path: impl AsRef<Path>, preds: &[TripletPrediction]) -> Result<()> {
    std::fs::write(path, write_predictions_string(preds))?;
    Ok(())
}

/// Ground truth re-expressed as perfect, score-1 predictions.
pub fn records_as_predictions(records: &[ImageRecord]) -> Vec<TripletPrediction> {
    records
        .iter()
        .flat_map(|r| {
            let (w, h) = r.size();
            r.expand_triplets().into_iter().map(move |t| TripletPrediction {
                image_id: r.image_id,
                individual: t.individual.to_pixels(w, h),
                group: t.group.to_pixels(w, h),
                atomic: t.atomic,
                confidence: 1.0,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = r#"{"image_id":1,"width":100,"height":50,"individuals":[[0,0,10,20],[20,0,30,20]],"groups":[{"members":[0,1],"broad":"gaze","atomic":"mutual-gaze","box":[0,0,30,20]},{"members":[1],"broad":"expression","atomic":"smile","box":[20,0,30,20]}]}"#;

    #[test]
    fn empty_file() {
        assert!(parse_annotations_str("").unwrap().is_empty());
    }

    #[test]
    fn parse_and_write() {
        let recs = parse_annotations_str(LINE).unwrap();
        assert_eq!(recs.len(), 1);
        let text = write_annotations_string(&recs);
        assert!(text.ends_with('\n'));
        assert!(text.contains("\"box\":[0.000000,0.000000,30.000000,20.000000]"));
        assert_eq!(parse_annotations_str(&text).unwrap(), parse_annotations_str(&text).unwrap());
        assert_eq!(write_annotations_string(&parse_annotations_str(&text).unwrap()), text);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = format!("{LINE}\n\n{{\"image_id\": 2,");
        match parse_annotations_str(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_cover_is_validation_error() {
        let bad = LINE.replace("\"box\":[0,0,30,20]", "\"box\":[0,0,31,20]");
        let err = parse_annotations_str(&bad).unwrap_err();
        assert!(matches!(err, Error::Validation { .. }));
        assert!(err.to_string().contains("line 1"), "{err}");
        assert!(err.to_string().contains("groups[0].box"), "{err}");
    }

    #[test]
    fn unknown_class_names_field() {
        let bad = LINE.replace("smile", "smirk");
        let err = parse_annotations_str(&bad).unwrap_err().to_string();
        assert!(err.contains("groups[1].atomic"), "{err}");
    }

    #[test]
    fn predictions_round_trip() {
        let text = "{\"image_id\":4,\"triplets\":[{\"ind\":[1,2,3,4],\"grp\":[1,2,5,6],\"atomic\":\"hug\",\"score\":0.87}]}\n";
        let preds = parse_predictions_str(text).unwrap();
        assert_eq!(preds[0].atomic, 4);
        let out = write_predictions_string(&preds);
        assert_eq!(
            out,
            "{\"image_id\":4,\"triplets\":[{\"ind\":[1.000000,2.000000,3.000000,4.000000],\"grp\":[1.000000,2.000000,5.000000,6.000000],\"atomic\":\"hug\",\"score\":0.870000}]}\n"
        );
        assert_eq!(parse_predictions_str(&out).unwrap(), preds);
        let bad = text.replace("0.87", "1.5");
        assert!(parse_predictions_str(&bad).unwrap_err().to_string().contains("score"));
    }

    #[test]
    fn negative_zero_is_not_printed() {
        assert_eq!(fmt6(-1e-12), "0.000000");
        assert_eq!(fmt6(-0.5), "-0.500000");
    }
}
