//! Domain types for patches, point annotations, and datasets.
//!
//! Coordinates are stored in pixels. Micrometer thresholds are converted per
//! patch through `mpp` (micrometers per pixel); `mpp` is required, never
//! defaulted, because the conversion decides what counts as a hit.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

/// One of the six classes annotators assign to a cell nucleus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RawClass {
    TumorCell,
    Lymphoplasma,
    Macrophage,
    Fibroblast,
    Endothelial,
    Other,
}

impl RawClass {
    pub const ALL: [RawClass; 6] = [
        RawClass::TumorCell,
        RawClass::Lymphoplasma,
        RawClass::Macrophage,
        RawClass::Fibroblast,
        RawClass::Endothelial,
        RawClass::Other,
    ];

    /// The task-level class: macrophage, fibroblast, and endothelial cells
    /// count as "other" for the tumor/lymphocyte detection task.
    pub fn task(self) -> TaskClass {
        match self {
            RawClass::TumorCell => TaskClass::Tumor,
            RawClass::Lymphoplasma => TaskClass::Lymphocyte,
            RawClass::Macrophage | RawClass::Fibroblast | RawClass::Endothelial | RawClass::Other => {
                TaskClass::Other
            }
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            RawClass::TumorCell => "TumorCell",
            RawClass::Lymphoplasma => "Lymphoplasma",
            RawClass::Macrophage => "Macrophage",
            RawClass::Fibroblast => "Fibroblast",
            RawClass::Endothelial => "Endothelial",
            RawClass::Other => "Other",
        }
    }

    /// Parses a class token, case-insensitively, through a fixed synonym
    /// table. Unknown tokens are rejected, never mapped to `Other`.
    pub fn parse_token(s: &str) -> Option<RawClass> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tumorcell" | "tumor_cell" | "tumor" => Some(RawClass::TumorCell),
            "lymphoplasma" | "lymphocyte" => Some(RawClass::Lymphoplasma),
            "macrophage" => Some(RawClass::Macrophage),
            "fibroblast" => Some(RawClass::Fibroblast),
            "endothelial" | "endothelialcell" | "endothelial_cell" => Some(RawClass::Endothelial),
            "other" | "others" => Some(RawClass::Other),
            _ => None,
        }
    }
}

impl fmt::Display for RawClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// Task-level class used for matching, scoring, and detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskClass {
    Tumor,
    Lymphocyte,
    Other,
}

impl TaskClass {
    pub const ALL: [TaskClass; 3] = [TaskClass::Tumor, TaskClass::Lymphocyte, TaskClass::Other];

    pub fn index(self) -> usize {
        match self {
            TaskClass::Tumor => 0,
            TaskClass::Lymphocyte => 1,
            TaskClass::Other => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<TaskClass> {
        TaskClass::ALL.get(i).copied()
    }

    pub fn token(self) -> &'static str {
        match self {
            TaskClass::Tumor => "Tumor",
            TaskClass::Lymphocyte => "Lymphocyte",
            TaskClass::Other => "Other",
        }
    }

    pub fn parse_token(s: &str) -> Option<TaskClass> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tumor" => Some(TaskClass::Tumor),
            "lymphocyte" => Some(TaskClass::Lymphocyte),
            "other" => Some(TaskClass::Other),
            _ => None,
        }
    }

    /// Canonical raw representative, used when collapsing a dataset.
    pub fn canonical_raw(self) -> RawClass {
        match self {
            TaskClass::Tumor => RawClass::TumorCell,
            TaskClass::Lymphocyte => RawClass::Lymphoplasma,
            TaskClass::Other => RawClass::Other,
        }
    }
}

impl fmt::Display for TaskClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// Which pool a patch belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Control,
    Training,
    Validation,
}

impl Split {
    pub fn token(self) -> &'static str {
        match self {
            Split::Control => "control",
            Split::Training => "training",
            Split::Validation => "validation",
        }
    }

    pub fn parse_token(s: &str) -> Option<Split> {
        match s.trim().to_ascii_lowercase().as_str() {
            "control" => Some(Split::Control),
            "training" => Some(Split::Training),
            "validation" => Some(Split::Validation),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// Metadata for one annotation task: a fixed-size crop of a slide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMeta {
    pub patch_id: String,
    pub width_px: u32,
    pub height_px: u32,
    /// Micrometers per pixel. Links pixel distances to micrometer thresholds.
    pub mpp: f64,
    pub split: Split,
    /// Cancer primary origin, when known (e.g. "Lung").
    pub origin: Option<String>,
}

/// One point annotation: a class assigned to a nucleus position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellAnnotation {
    pub patch_id: String,
    pub annotator_id: String,
    pub class: RawClass,
    /// Pixel coordinates, 0 <= x < width_px and 0 <= y < height_px.
    pub x: f64,
    pub y: f64,
}

impl CellAnnotation {
    pub fn task_class(&self) -> TaskClass {
        self.class.task()
    }

    pub fn position(&self) -> (f64, f64) {
        (self.x, self.y)
    }
}

/// Canonical ordering for annotations; makes every downstream result
/// independent of input row order.
fn annotation_key(a: &CellAnnotation) -> (&str, &str, usize, f64, f64) {
    (
        a.patch_id.as_str(),
        a.annotator_id.as_str(),
        a.class.task().index() * 8 + raw_index(a.class),
        a.x,
        a.y,
    )
}

fn raw_index(c: RawClass) -> usize {
    RawClass::ALL.iter().position(|&r| r == c).unwrap()
}

fn cmp_annotations(a: &CellAnnotation, b: &CellAnnotation) -> std::cmp::Ordering {
    let (ap, aa, ac, ax, ay) = annotation_key(a);
    let (bp, ba, bc, bx, by) = annotation_key(b);
    ap.cmp(bp)
        .then(aa.cmp(ba))
        .then(ac.cmp(&bc))
        .then(ax.total_cmp(&bx))
        .then(ay.total_cmp(&by))
}

/// A collection of patches and annotations, stored in canonical order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// Sorted by patch id. Duplicated ids survive construction so that
    /// validation can report them.
    pub patches: Vec<PatchMeta>,
    /// Sorted by (patch, annotator, class, x, y).
    pub annotations: Vec<CellAnnotation>,
}

impl Dataset {
    pub fn new(mut patches: Vec<PatchMeta>, mut annotations: Vec<CellAnnotation>) -> Dataset {
        patches.sort_by(|a, b| a.patch_id.cmp(&b.patch_id));
        annotations.sort_by(cmp_annotations);
        Dataset {
            patches,
            annotations,
        }
    }

    pub fn patch(&self, patch_id: &str) -> Option<&PatchMeta> {
        self.patches
            .binary_search_by(|p| p.patch_id.as_str().cmp(patch_id))
            .ok()
            .map(|i| &self.patches[i])
    }

    pub fn annotators(&self) -> BTreeSet<&str> {
        self.annotations
            .iter()
            .map(|a| a.annotator_id.as_str())
            .collect()
    }

    pub fn control_patches(&self) -> impl Iterator<Item = &PatchMeta> {
        self.patches.iter().filter(|p| p.split == Split::Control)
    }

    /// Annotations of one annotator grouped by control patch.
    pub fn control_annotations_by_patch(
        &self,
        annotator_id: &str,
    ) -> BTreeMap<&str, Vec<&CellAnnotation>> {
        let mut out: BTreeMap<&str, Vec<&CellAnnotation>> = BTreeMap::new();
        for ann in &self.annotations {
            if ann.annotator_id != annotator_id {
                continue;
            }
            if let Some(p) = self.patch(&ann.patch_id) {
                if p.split == Split::Control {
                    out.entry(ann.patch_id.as_str()).or_default().push(ann);
                }
            }
        }
        out
    }

    /// All annotations on one patch, grouped by annotator.
    pub fn annotations_on_patch(&self, patch_id: &str) -> BTreeMap<&str, Vec<&CellAnnotation>> {
        let mut out: BTreeMap<&str, Vec<&CellAnnotation>> = BTreeMap::new();
        let start = self
            .annotations
            .partition_point(|a| a.patch_id.as_str() < patch_id);
        for ann in &self.annotations[start..] {
            if ann.patch_id != patch_id {
                break;
            }
            out.entry(ann.annotator_id.as_str()).or_default().push(ann);
        }
        out
    }
}

/// Replaces every annotation's raw class by the canonical representative of
/// its task class. Idempotent; annotation count is unchanged.
pub fn collapse_classes(d: Dataset) -> Dataset {
    let annotations = d
        .annotations
        .into_iter()
        .map(|mut a| {
            a.class = a.class.task().canonical_raw();
            a
        })
        .collect();
    Dataset::new(d.patches, annotations)
}

/// Machine-readable reason for a validation or load finding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingCode {
    MissingColumn,
    MalformedRow,
    InvalidNumber,
    UnknownClass,
    UnknownSplit,
    NonpositiveDimension,
    NonpositiveMpp,
    NonfiniteCoordinate,
    DuplicatePatchId,
    UnknownPatch,
    OutOfBounds,
    CoincidentPoints,
}

/// One violated invariant, with file/row context when it came from a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub code: FindingCode,
    pub file: Option<String>,
    pub row: Option<u64>,
    pub message: String,
}

impl Finding {
    pub fn new(code: FindingCode, message: impl Into<String>) -> Finding {
        Finding {
            code,
            file: None,
            row: None,
            message: message.into(),
        }
    }

    pub fn in_file(code: FindingCode, file: &str, row: u64, message: impl Into<String>) -> Finding {
        Finding {
            code,
            file: Some(file.to_string()),
            row: Some(row),
            message: message.into(),
        }
    }
}

/// Every invariant violation found in a dataset. Violations are data, not
/// failures: an empty report means the dataset is well-formed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Checks every dataset invariant. Findings are deterministic and do not
/// depend on the order rows were loaded in.
pub fn validate_dataset(d: &Dataset) -> ValidationReport {
    let mut findings = Vec::new();

    let mut seen: BTreeSet<&str> = BTreeSet::new();
    let mut reported_dup: BTreeSet<&str> = BTreeSet::new();
    for p in &d.patches {
        if !seen.insert(p.patch_id.as_str()) && reported_dup.insert(p.patch_id.as_str()) {
            findings.push(Finding::new(
                FindingCode::DuplicatePatchId,
                format!("patch id {:?} appears more than once", p.patch_id),
            ));
        }
        if p.width_px == 0 || p.height_px == 0 {
            findings.push(Finding::new(
                FindingCode::NonpositiveDimension,
                format!(
                    "patch {:?} has dimensions {}x{}",
                    p.patch_id, p.width_px, p.height_px
                ),
            ));
        }
        if !(p.mpp > 0.0) || !p.mpp.is_finite() {
            findings.push(Finding::new(
                FindingCode::NonpositiveMpp,
                format!("patch {:?} has mpp {}", p.patch_id, p.mpp),
            ));
        }
    }

    for a in &d.annotations {
        match d.patch(&a.patch_id) {
            None => findings.push(Finding::new(
                FindingCode::UnknownPatch,
                format!(
                    "annotation by {:?} at ({}, {}) references unknown patch {:?}",
                    a.annotator_id, a.x, a.y, a.patch_id
                ),
            )),
            Some(p) => {
                if !a.x.is_finite() || !a.y.is_finite() {
                    findings.push(Finding::new(
                        FindingCode::NonfiniteCoordinate,
                        format!(
                            "annotation by {:?} on patch {:?} has non-finite position",
                            a.annotator_id, a.patch_id
                        ),
                    ));
                } else if a.x < 0.0
                    || a.y < 0.0
                    || a.x >= p.width_px as f64
                    || a.y >= p.height_px as f64
                {
                    findings.push(Finding::new(
                        FindingCode::OutOfBounds,
                        format!(
                            "annotation by {:?} at ({}, {}) lies outside patch {:?} ({}x{})",
                            a.annotator_id, a.x, a.y, a.patch_id, p.width_px, p.height_px
                        ),
                    ));
                }
            }
        }
    }

    // Coincident duplicates from one annotator are kept by the matcher (each
    // consumes a slot), so surface them here instead of dropping silently.
    let mut i = 0;
    while i < d.annotations.len() {
        let mut j = i + 1;
        while j < d.annotations.len()
            && cmp_annotations(&d.annotations[i], &d.annotations[j]).is_eq()
        {
            j += 1;
        }
        if j - i > 1 {
            let a = &d.annotations[i];
            findings.push(Finding::new(
                FindingCode::CoincidentPoints,
                format!(
                    "annotator {:?} placed {} identical {} points at ({}, {}) on patch {:?}",
                    a.annotator_id,
                    j - i,
                    a.class,
                    a.x,
                    a.y,
                    a.patch_id
                ),
            ));
        }
        i = j;
    }

    findings.sort_by(|a, b| {
        format!("{:?}", a.code)
            .cmp(&format!("{:?}", b.code))
            .then(a.message.cmp(&b.message))
    });
    ValidationReport { findings }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch(id: &str) -> PatchMeta {
        PatchMeta {
            patch_id: id.to_string(),
            width_px: 100,
            height_px: 100,
            mpp: 0.5,
            split: Split::Control,
            origin: None,
        }
    }

    fn ann(patch_id: &str, annotator: &str, class: RawClass, x: f64, y: f64) -> CellAnnotation {
        CellAnnotation {
            patch_id: patch_id.to_string(),
            annotator_id: annotator.to_string(),
            class,
            x,
            y,
        }
    }

    #[test]
    fn task_mapping_matches_taxonomy() {
        assert_eq!(RawClass::TumorCell.task(), TaskClass::Tumor);
        assert_eq!(RawClass::Lymphoplasma.task(), TaskClass::Lymphocyte);
        for c in [RawClass::Macrophage, RawClass::Fibroblast, RawClass::Endothelial, RawClass::Other] {
            assert_eq!(c.task(), TaskClass::Other);
        }
    }

    #[test]
    fn class_tokens_are_case_insensitive_with_synonyms() {
        assert_eq!(RawClass::parse_token("LYMPHOCYTE"), Some(RawClass::Lymphoplasma));
        assert_eq!(RawClass::parse_token("tumorcell"), Some(RawClass::TumorCell));
        assert_eq!(RawClass::parse_token("granulocyte"), None);
    }

    #[test]
    fn collapse_maps_to_canonical_raw_and_is_idempotent() {
        let d = Dataset::new(
            vec![patch("p1")],
            vec![
                ann("p1", "a", RawClass::TumorCell, 1.0, 1.0),
                ann("p1", "a", RawClass::Fibroblast, 2.0, 2.0),
                ann("p1", "a", RawClass::Endothelial, 3.0, 3.0),
            ],
        );
        let c = collapse_classes(d);
        assert_eq!(c.annotations.len(), 3);
        let classes: Vec<RawClass> = c.annotations.iter().map(|a| a.class).collect();
        assert!(classes.contains(&RawClass::TumorCell));
        assert_eq!(classes.iter().filter(|&&c| c == RawClass::Other).count(), 2);
        let c2 = collapse_classes(c.clone());
        assert_eq!(c, c2);
    }

    #[test]
    fn macrophage_collapses_to_other() {
        let d = Dataset::new(vec![patch("p1")], vec![ann("p1", "a", RawClass::Macrophage, 1.0, 1.0)]);
        let c = collapse_classes(d);
        assert_eq!(c.annotations[0].class, RawClass::Other);
        assert_eq!(c.annotations[0].task_class(), TaskClass::Other);
    }

    #[test]
    fn well_formed_dataset_validates_empty() {
        let d = Dataset::new(
            vec![patch("p1")],
            vec![ann("p1", "a", RawClass::TumorCell, 10.0, 10.0)],
        );
        assert!(validate_dataset(&d).is_empty());
    }

    #[test]
    fn duplicate_patch_id_is_one_finding() {
        let d = Dataset::new(vec![patch("p1"), patch("p1")], vec![]);
        let r = validate_dataset(&d);
        assert_eq!(r.findings.len(), 1);
        assert_eq!(r.findings[0].code, FindingCode::DuplicatePatchId);
    }

    #[test]
    fn dangling_annotation_is_one_finding() {
        let d = Dataset::new(
            vec![patch("p1")],
            vec![ann("ghost", "a", RawClass::TumorCell, 1.0, 1.0)],
        );
        let r = validate_dataset(&d);
        assert_eq!(r.findings.len(), 1);
        assert_eq!(r.findings[0].code, FindingCode::UnknownPatch);
    }

    #[test]
    fn boundary_coordinate_is_out_of_bounds() {
        let d = Dataset::new(
            vec![patch("p1")],
            vec![ann("p1", "a", RawClass::TumorCell, 100.0, 10.0)],
        );
        let r = validate_dataset(&d);
        assert_eq!(r.findings.len(), 1);
        assert_eq!(r.findings[0].code, FindingCode::OutOfBounds);
    }

    #[test]
    fn coincident_points_are_flagged_not_dropped() {
        let d = Dataset::new(
            vec![patch("p1")],
            vec![
                ann("p1", "a", RawClass::TumorCell, 5.0, 5.0),
                ann("p1", "a", RawClass::TumorCell, 5.0, 5.0),
            ],
        );
        assert_eq!(d.annotations.len(), 2);
        let r = validate_dataset(&d);
        assert_eq!(r.findings.len(), 1);
        assert_eq!(r.findings[0].code, FindingCode::CoincidentPoints);
    }

    #[test]
    fn validation_is_order_independent() {
        let anns = vec![
            ann("p1", "b", RawClass::TumorCell, 200.0, 1.0),
            ann("ghost", "a", RawClass::Other, 1.0, 1.0),
            ann("p1", "a", RawClass::Lymphoplasma, 3.0, 3.0),
        ];
        let mut rev = anns.clone();
        rev.reverse();
        let r1 = validate_dataset(&Dataset::new(vec![patch("p1")], anns));
        let r2 = validate_dataset(&Dataset::new(vec![patch("p1")], rev));
        assert_eq!(r1, r2);
        assert_eq!(r1.findings.len(), 2);
    }
}
