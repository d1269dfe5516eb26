//! CSV ingestion and emission for patch tables and annotation tables.
//!
//! Schemas:
//! - patches.csv: `patch_id,width_px,height_px,mpp,split,origin` (origin may
//!   be empty)
//! - annotations.csv: `patch_id,annotator_id,class,x,y`
//!
//! UTF-8, comma-separated, `.` decimal point. Loading collects every
//! offending row as a finding (file + line + reason) instead of stopping at
//! the first problem.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{
    CellAnnotation, Dataset, Finding, FindingCode, PatchMeta, RawClass, Split,
};

const PATCH_HEADER: [&str; 6] = ["patch_id", "width_px", "height_px", "mpp", "split", "origin"];
const ANNOTATION_HEADER: [&str; 5] = ["patch_id", "annotator_id", "class", "x", "y"];

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::csv(path.display().to_string(), e))
}

fn check_header(
    reader: &mut csv::Reader<std::fs::File>,
    expected: &[&str],
    file: &str,
    findings: &mut Vec<Finding>,
) -> Result<bool> {
    let headers = reader
        .headers()
        .map_err(|e| Error::csv(file.to_string(), e))?;
    let got: Vec<String> = headers.iter().map(|h| h.trim().to_string()).collect();
    let mut ok = true;
    for col in expected {
        if !got.iter().any(|g| g == col) {
            findings.push(Finding::in_file(
                FindingCode::MissingColumn,
                file,
                1,
                format!("missing column {col:?} (found {got:?})"),
            ));
            ok = false;
        }
    }
    Ok(ok)
}

fn column_index(headers: &csv::StringRecord, name: &str) -> usize {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .expect("column presence checked before use")
}

fn row_line(record: &csv::StringRecord, fallback: u64) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(fallback)
}

/// Loads and cross-validates a patch table and an annotation table.
///
/// The result does not depend on row order: annotations are stored in
/// canonical sorted order. Any malformed row, unknown class token, duplicate
/// patch id, dangling patch reference, or out-of-bounds coordinate fails the
/// load with a finding naming the file and line.
pub fn load_dataset(patch_path: &Path, annotation_path: &Path) -> Result<Dataset> {
    let mut findings = Vec::new();

    let patch_file = patch_path.display().to_string();
    let mut patches: Vec<PatchMeta> = Vec::new();
    let mut reader = open_reader(patch_path)?;
    if check_header(&mut reader, &PATCH_HEADER, &patch_file, &mut findings)? {
        let headers = reader
            .headers()
            .map_err(|e| Error::csv(patch_file.clone(), e))?
            .clone();
        let idx: Vec<usize> = PATCH_HEADER
            .iter()
            .map(|c| column_index(&headers, c))
            .collect();
        let mut seen: BTreeMap<String, u64> = BTreeMap::new();
        for (i, record) in reader.records().enumerate() {
            let record = match record {
                Ok(r) => r,
                Err(e) => {
                    findings.push(Finding::in_file(
                        FindingCode::MalformedRow,
                        &patch_file,
                        i as u64 + 2,
                        e.to_string(),
                    ));
                    continue;
                }
            };
            let line = row_line(&record, i as u64 + 2);
            if let Some(p) = parse_patch_row(&record, &idx, &patch_file, line, &mut findings) {
                if let Some(first) = seen.get(&p.patch_id) {
                    findings.push(Finding::in_file(
                        FindingCode::DuplicatePatchId,
                        &patch_file,
                        line,
                        format!("patch id {:?} already defined at line {first}", p.patch_id),
                    ));
                } else {
                    seen.insert(p.patch_id.clone(), line);
                    patches.push(p);
                }
            }
        }
    }

    let ann_file = annotation_path.display().to_string();
    let mut annotations: Vec<CellAnnotation> = Vec::new();
    let mut reader = open_reader(annotation_path)?;
    if check_header(&mut reader, &ANNOTATION_HEADER, &ann_file, &mut findings)? {
        let headers = reader
            .headers()
            .map_err(|e| Error::csv(ann_file.clone(), e))?
            .clone();
        let idx: Vec<usize> = ANNOTATION_HEADER
            .iter()
            .map(|c| column_index(&headers, c))
            .collect();
        let by_id: BTreeMap<&str, &PatchMeta> =
            patches.iter().map(|p| (p.patch_id.as_str(), p)).collect();
        for (i, record) in reader.records().enumerate() {
            let record = match record {
                Ok(r) => r,
                Err(e) => {
                    findings.push(Finding::in_file(
                        FindingCode::MalformedRow,
                        &ann_file,
                        i as u64 + 2,
                        e.to_string(),
                    ));
                    continue;
                }
            };
            let line = row_line(&record, i as u64 + 2);
            if let Some(a) = parse_annotation_row(&record, &idx, &ann_file, line, &mut findings) {
                match by_id.get(a.patch_id.as_str()) {
                    None => findings.push(Finding::in_file(
                        FindingCode::UnknownPatch,
                        &ann_file,
                        line,
                        format!("annotation references unknown patch {:?}", a.patch_id),
                    )),
                    Some(p) => {
                        if a.x < 0.0
                            || a.y < 0.0
                            || a.x >= p.width_px as f64
                            || a.y >= p.height_px as f64
                        {
                            findings.push(Finding::in_file(
                                FindingCode::OutOfBounds,
                                &ann_file,
                                line,
                                format!(
                                    "position ({}, {}) outside patch {:?} ({}x{})",
                                    a.x, a.y, a.patch_id, p.width_px, p.height_px
                                ),
                            ));
                        } else {
                            annotations.push(a);
                        }
                    }
                }
            }
        }
    }

    if findings.is_empty() {
        Ok(Dataset::new(patches, annotations))
    } else {
        Err(Error::Load(findings))
    }
}

fn get_field<'r>(
    record: &'r csv::StringRecord,
    idx: usize,
    name: &str,
    file: &str,
    line: u64,
    findings: &mut Vec<Finding>,
) -> Option<&'r str> {
    match record.get(idx) {
        Some(v) => Some(v.trim()),
        None => {
            findings.push(Finding::in_file(
                FindingCode::MalformedRow,
                file,
                line,
                format!("row has no value for column {name:?}"),
            ));
            None
        }
    }
}

fn parse_patch_row(
    record: &csv::StringRecord,
    idx: &[usize],
    file: &str,
    line: u64,
    findings: &mut Vec<Finding>,
) -> Option<PatchMeta> {
    let patch_id = get_field(record, idx[0], "patch_id", file, line, findings)?.to_string();
    let width = parse_number::<u32>(record, idx[1], "width_px", file, line, findings)?;
    let height = parse_number::<u32>(record, idx[2], "height_px", file, line, findings)?;
    let mpp = parse_number::<f64>(record, idx[3], "mpp", file, line, findings)?;
    let split_tok = get_field(record, idx[4], "split", file, line, findings)?;
    let origin_tok = get_field(record, idx[5], "origin", file, line, findings)?;

    let split = match Split::parse_token(split_tok) {
        Some(s) => s,
        None => {
            findings.push(Finding::in_file(
                FindingCode::UnknownSplit,
                file,
                line,
                format!("unknown split token {split_tok:?}"),
            ));
            return None;
        }
    };
    if width == 0 || height == 0 {
        findings.push(Finding::in_file(
            FindingCode::NonpositiveDimension,
            file,
            line,
            format!("patch {patch_id:?} has dimensions {width}x{height}"),
        ));
        return None;
    }
    if !(mpp > 0.0) || !mpp.is_finite() {
        findings.push(Finding::in_file(
            FindingCode::NonpositiveMpp,
            file,
            line,
            format!("patch {patch_id:?} has mpp {mpp}; mpp is required and must be positive"),
        ));
        return None;
    }
    Some(PatchMeta {
        patch_id,
        width_px: width,
        height_px: height,
        mpp,
        split,
        origin: if origin_tok.is_empty() {
            None
        } else {
            Some(origin_tok.to_string())
        },
    })
}

fn parse_annotation_row(
    record: &csv::StringRecord,
    idx: &[usize],
    file: &str,
    line: u64,
    findings: &mut Vec<Finding>,
) -> Option<CellAnnotation> {
    let patch_id = get_field(record, idx[0], "patch_id", file, line, findings)?.to_string();
    let annotator_id = get_field(record, idx[1], "annotator_id", file, line, findings)?.to_string();
    let class_tok = get_field(record, idx[2], "class", file, line, findings)?;
    let x = parse_number::<f64>(record, idx[3], "x", file, line, findings)?;
    let y = parse_number::<f64>(record, idx[4], "y", file, line, findings)?;

    let class = match RawClass::parse_token(class_tok) {
        Some(c) => c,
        None => {
            findings.push(Finding::in_file(
                FindingCode::UnknownClass,
                file,
                line,
                format!("unknown class token {class_tok:?}"),
            ));
            return None;
        }
    };
    if !x.is_finite() || !y.is_finite() {
        findings.push(Finding::in_file(
            FindingCode::NonfiniteCoordinate,
            file,
            line,
            format!("non-finite position ({x}, {y})"),
        ));
        return None;
    }
    Some(CellAnnotation {
        patch_id,
        annotator_id,
        class,
        x,
        y,
    })
}

fn parse_number<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    name: &str,
    file: &str,
    line: u64,
    findings: &mut Vec<Finding>,
) -> Option<T> {
    let raw = get_field(record, idx, name, file, line, findings)?;
    match raw.parse::<T>() {
        Ok(v) => Some(v),
        Err(_) => {
            findings.push(Finding::in_file(
                FindingCode::InvalidNumber,
                file,
                line,
                format!("column {name:?} has non-numeric value {raw:?}"),
            ));
            None
        }
    }
}

/// Loads just a patch table (for commands that need pools or patch metadata
/// without annotations).
pub fn load_patch_table(patch_path: &Path) -> Result<Vec<PatchMeta>> {
    let mut findings = Vec::new();
    let patch_file = patch_path.display().to_string();
    let mut patches: Vec<PatchMeta> = Vec::new();
    let mut reader = open_reader(patch_path)?;
    if check_header(&mut reader, &PATCH_HEADER, &patch_file, &mut findings)? {
        let headers = reader
            .headers()
            .map_err(|e| Error::csv(patch_file.clone(), e))?
            .clone();
        let idx: Vec<usize> = PATCH_HEADER
            .iter()
            .map(|c| column_index(&headers, c))
            .collect();
        let mut seen: BTreeMap<String, u64> = BTreeMap::new();
        for (i, record) in reader.records().enumerate() {
            let record = match record {
                Ok(r) => r,
                Err(e) => {
                    findings.push(Finding::in_file(
                        FindingCode::MalformedRow,
                        &patch_file,
                        i as u64 + 2,
                        e.to_string(),
                    ));
                    continue;
                }
            };
            let line = row_line(&record, i as u64 + 2);
            if let Some(p) = parse_patch_row(&record, &idx, &patch_file, line, &mut findings) {
                if let Some(first) = seen.get(&p.patch_id) {
                    findings.push(Finding::in_file(
                        FindingCode::DuplicatePatchId,
                        &patch_file,
                        line,
                        format!("patch id {:?} already defined at line {first}", p.patch_id),
                    ));
                } else {
                    seen.insert(p.patch_id.clone(), line);
                    patches.push(p);
                }
            }
        }
    }
    if findings.is_empty() {
        patches.sort_by(|a, b| a.patch_id.cmp(&b.patch_id));
        Ok(patches)
    } else {
        Err(Error::Load(findings))
    }
}

/// Writes a dataset back out in canonical order. `load_dataset` of the
/// result reproduces the dataset exactly.
pub fn save_dataset(d: &Dataset, patch_path: &Path, annotation_path: &Path) -> Result<()> {
    save_patch_table(&d.patches, patch_path)?;
    save_annotations(&d.annotations, annotation_path)
}

pub fn save_patch_table(patches: &[PatchMeta], path: &Path) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).map_err(|e| Error::csv(path.display().to_string(), e))?;
    w.write_record(PATCH_HEADER)
        .map_err(|e| Error::csv(path.display().to_string(), e))?;
    for p in patches {
        w.write_record([
            p.patch_id.as_str(),
            &p.width_px.to_string(),
            &p.height_px.to_string(),
            &format_f64(p.mpp),
            p.split.token(),
            p.origin.as_deref().unwrap_or(""),
        ])
        .map_err(|e| Error::csv(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes an annotation table in the `annotations.csv` schema.
pub fn save_annotations(annotations: &[CellAnnotation], path: &Path) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).map_err(|e| Error::csv(path.display().to_string(), e))?;
    w.write_record(ANNOTATION_HEADER)
        .map_err(|e| Error::csv(path.display().to_string(), e))?;
    for a in annotations {
        w.write_record([
            a.patch_id.as_str(),
            a.annotator_id.as_str(),
            a.class.token(),
            &format_f64(a.x),
            &format_f64(a.y),
        ])
        .map_err(|e| Error::csv(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Shortest representation that round-trips the exact f64 value.
pub fn format_f64(v: f64) -> String {
    let mut buf = ryu_format(v);
    if buf.ends_with(".0") {
        buf.truncate(buf.len() - 2);
    }
    buf
}

fn ryu_format(v: f64) -> String {
    // `{}` on f64 uses the shortest round-trip grisu/ryu formatting.
    format!("{v}")
}

/// Writes a serializable value as pretty JSON with a trailing newline.
pub fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut body = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::Config(format!("serialization failed: {e}")))?;
    body.push(b'\n');
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&body))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_dataset, TaskClass};
    use std::fs;

    fn write(path: &Path, body: &str) {
        fs::write(path, body).unwrap();
    }

    #[test]
    fn minimal_dataset_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("patches.csv");
        let a = dir.path().join("annotations.csv");
        write(&p, "patch_id,width_px,height_px,mpp,split,origin\np1,100,100,0.5,control,\n");
        write(&a, "patch_id,annotator_id,class,x,y\np1,ann1,TumorCell,10,10\n");
        let d = load_dataset(&p, &a).unwrap();
        assert_eq!(d.control_patches().count(), 1);
        assert_eq!(d.annotations.len(), 1);
        assert!(validate_dataset(&d).is_empty());
    }

    #[test]
    fn out_of_bounds_row_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("patches.csv");
        let a = dir.path().join("annotations.csv");
        write(&p, "patch_id,width_px,height_px,mpp,split,origin\np1,100,100,0.5,control,\n");
        write(&a, "patch_id,annotator_id,class,x,y\np1,ann1,TumorCell,100,10\n");
        match load_dataset(&p, &a) {
            Err(Error::Load(f)) => {
                assert_eq!(f.len(), 1);
                assert_eq!(f[0].code, FindingCode::OutOfBounds);
                assert_eq!(f[0].row, Some(2));
            }
            other => panic!("expected load failure, got {other:?}"),
        }
    }

    #[test]
    fn lymphoplasma_token_maps_to_lymphocyte_task() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("patches.csv");
        let a = dir.path().join("annotations.csv");
        write(&p, "patch_id,width_px,height_px,mpp,split,origin\np1,100,100,0.5,control,\n");
        write(&a, "patch_id,annotator_id,class,x,y\np1,ann1,Lymphoplasma,10,10\n");
        let d = load_dataset(&p, &a).unwrap();
        assert_eq!(d.annotations[0].task_class(), TaskClass::Lymphocyte);
    }

    #[test]
    fn missing_column_and_unknown_class_are_findings() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("patches.csv");
        let a = dir.path().join("annotations.csv");
        write(&p, "patch_id,width_px,height_px,mpp,split,origin\np1,100,100,0.5,control,\n");
        write(&a, "patch_id,annotator_id,class,x,y\np1,ann1,Weird,10,10\np1,ann1,TumorCell,nope,10\n");
        match load_dataset(&p, &a) {
            Err(Error::Load(f)) => {
                let codes: Vec<FindingCode> = f.iter().map(|x| x.code).collect();
                assert!(codes.contains(&FindingCode::UnknownClass));
                assert!(codes.contains(&FindingCode::InvalidNumber));
            }
            other => panic!("expected load failure, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_patch_id_fails_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("patches.csv");
        let a = dir.path().join("annotations.csv");
        write(
            &p,
            "patch_id,width_px,height_px,mpp,split,origin\np1,100,100,0.5,control,\np1,64,64,0.25,training,Lung\n",
        );
        write(&a, "patch_id,annotator_id,class,x,y\n");
        match load_dataset(&p, &a) {
            Err(Error::Load(f)) => {
                assert_eq!(f[0].code, FindingCode::DuplicatePatchId);
                assert_eq!(f[0].row, Some(3));
            }
            other => panic!("expected load failure, got {other:?}"),
        }
    }

    #[test]
    fn save_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let d = Dataset::new(
            vec![
                PatchMeta {
                    patch_id: "p2".into(),
                    width_px: 1024,
                    height_px: 768,
                    mpp: 0.2425,
                    split: Split::Training,
                    origin: Some("Lung".into()),
                },
                PatchMeta {
                    patch_id: "p1".into(),
                    width_px: 100,
                    height_px: 100,
                    mpp: 0.5,
                    split: Split::Control,
                    origin: None,
                },
            ],
            vec![
                CellAnnotation {
                    patch_id: "p1".into(),
                    annotator_id: "a".into(),
                    class: RawClass::Endothelial,
                    x: 3.000000001,
                    y: 99.25,
                },
                CellAnnotation {
                    patch_id: "p1".into(),
                    annotator_id: "a".into(),
                    class: RawClass::TumorCell,
                    x: 0.1234567890123,
                    y: 0.0,
                },
            ],
        );
        let p = dir.path().join("patches.csv");
        let a = dir.path().join("annotations.csv");
        save_dataset(&d, &p, &a).unwrap();
        let back = load_dataset(&p, &a).unwrap();
        assert_eq!(d, back);
    }
}
