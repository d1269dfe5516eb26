//! Detection-geometry post-processing: point-to-disk rasterization, Gaussian
//! smoothing, local-maxima extraction, and hit-criterion evaluation of point
//! detections.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{score_patch, MatchConfig};
use crate::model::{CellAnnotation, Dataset, PatchMeta, TaskClass};

/// A dense scalar field over a patch, row-major, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(width: usize, height: usize) -> Grid {
        Grid {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn from_values(width: usize, height: usize, data: Vec<f64>) -> Result<Grid> {
        if data.len() != width * height {
            return Err(Error::Config(format!(
                "grid payload has {} values, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Grid {
            width,
            height,
            data,
        })
    }
}

/// Per-class likelihood channels for one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodMap {
    pub width: u32,
    pub height: u32,
    pub channels: BTreeMap<TaskClass, Grid>,
}

impl LikelihoodMap {
    pub fn zeros(width: u32, height: u32) -> LikelihoodMap {
        let channels = TaskClass::ALL
            .iter()
            .map(|&c| (c, Grid::zeros(width as usize, height as usize)))
            .collect();
        LikelihoodMap {
            width,
            height,
            channels,
        }
    }
}

/// Rasterizes point annotations into binary disks of `radius_px`.
///
/// A pixel belongs to the channel of its nearest center among the centers
/// within radius; a distance tie goes to the lower class index, mirroring a
/// semantic-segmentation map where each pixel has one label.
pub fn rasterize_points(
    points: &[&CellAnnotation],
    radius_px: u32,
    patch: &PatchMeta,
) -> Result<LikelihoodMap> {
    if radius_px == 0 {
        return Err(Error::Config("radius_px must be positive".into()));
    }
    let mut map = LikelihoodMap::zeros(patch.width_px, patch.height_px);
    let w = patch.width_px as i64;
    let h = patch.height_px as i64;
    let r = radius_px as f64;

    // Winner per pixel: (distance^2, class index). Only pixels within the
    // bounding box of some disk are ever touched.
    let mut best: BTreeMap<(i64, i64), (f64, usize)> = BTreeMap::new();
    for ann in points {
        if ann.patch_id != patch.patch_id {
            return Err(Error::Config(format!(
                "annotation on patch {:?} passed to rasterize for patch {:?}",
                ann.patch_id, patch.patch_id
            )));
        }
        let class_idx = ann.task_class().index();
        let x0 = ((ann.x - r).floor() as i64).max(0);
        let x1 = ((ann.x + r).ceil() as i64).min(w - 1);
        let y0 = ((ann.y - r).floor() as i64).max(0);
        let y1 = ((ann.y + r).ceil() as i64).min(h - 1);
        for py in y0..=y1 {
            for px in x0..=x1 {
                let dx = px as f64 - ann.x;
                let dy = py as f64 - ann.y;
                let d2 = dx * dx + dy * dy;
                if d2 > r * r {
                    continue;
                }
                best.entry((py, px))
                    .and_modify(|(bd, bc)| {
                        if d2 < *bd || (d2 == *bd && class_idx < *bc) {
                            *bd = d2;
                            *bc = class_idx;
                        }
                    })
                    .or_insert((d2, class_idx));
            }
        }
    }
    for ((py, px), (_, class_idx)) in best {
        let class = TaskClass::from_index(class_idx).unwrap();
        map.channels
            .get_mut(&class)
            .unwrap()
            .set(px as usize, py as usize, 1.0);
    }
    Ok(map)
}

/// Sampled Gaussian kernel truncated at ceil(3 sigma) and renormalized to
/// sum 1.
pub fn gaussian_kernel(sigma_px: f64) -> Result<Vec<f64>> {
    if !(sigma_px > 0.0) || !sigma_px.is_finite() {
        return Err(Error::Config(format!(
            "sigma_px must be positive, got {sigma_px}"
        )));
    }
    let radius = (3.0 * sigma_px).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k as f64).powi(2) / (2.0 * sigma_px * sigma_px)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    for v in &mut kernel {
        *v /= sum;
    }
    Ok(kernel)
}

/// Mirror index without repeating the edge sample: -1 -> 1, n -> n-2.
#[inline]
fn reflect(i: i64, n: i64) -> usize {
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
        if n == 1 {
            return 0;
        }
    }
}

fn convolve_1d(line: &[f64], kernel: &[f64], out: &mut [f64]) {
    let n = line.len() as i64;
    let radius = (kernel.len() / 2) as i64;
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (j, &kv) in kernel.iter().enumerate() {
            let src = reflect(i as i64 + j as i64 - radius, n);
            acc += kv * line[src];
        }
        *o = acc;
    }
}

fn gaussian_filter_grid(grid: &Grid, kernel: &[f64]) -> Grid {
    let (w, h) = (grid.width, grid.height);
    let mut tmp = Grid::zeros(w, h);
    let mut row_in = vec![0.0; w];
    let mut row_out = vec![0.0; w];
    for y in 0..h {
        for x in 0..w {
            row_in[x] = grid.get(x, y);
        }
        convolve_1d(&row_in, kernel, &mut row_out);
        for x in 0..w {
            tmp.set(x, y, row_out[x]);
        }
    }
    let mut out = Grid::zeros(w, h);
    let mut col_in = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col_in[y] = tmp.get(x, y);
        }
        convolve_1d(&col_in, kernel, &mut col_out);
        for y in 0..h {
            out.set(x, y, col_out[y]);
        }
    }
    out
}

/// Separable Gaussian smoothing with reflect padding at the borders.
pub fn gaussian_filter(map: &LikelihoodMap, sigma_px: f64) -> Result<LikelihoodMap> {
    let kernel = gaussian_kernel(sigma_px)?;
    let channels = map
        .channels
        .iter()
        .map(|(&c, g)| (c, gaussian_filter_grid(g, &kernel)))
        .collect();
    Ok(LikelihoodMap {
        width: map.width,
        height: map.height,
        channels,
    })
}

/// Extracts local maxima per channel.
///
/// A pixel is a detection iff its value reaches `threshold` and is >= every
/// value within the Euclidean disk of `radius_px`. A connected plateau of
/// equal-valued maxima emits exactly one point, its lexicographically
/// smallest (row, col) pixel. Output is ordered by (class, row, col).
pub fn detect_local_maxima(
    map: &LikelihoodMap,
    radius_px: u32,
    threshold: f64,
    patch_id: &str,
    annotator_id: &str,
) -> Result<Vec<CellAnnotation>> {
    if radius_px == 0 {
        return Err(Error::Config("radius_px must be positive".into()));
    }
    let r = radius_px as i64;
    let mut disk: Vec<(i64, i64)> = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if (dx, dy) != (0, 0) && dx * dx + dy * dy <= r * r {
                disk.push((dy, dx));
            }
        }
    }

    let mut out = Vec::new();
    for (&class, grid) in &map.channels {
        let (w, h) = (grid.width() as i64, grid.height() as i64);
        let mut is_max = vec![false; (w * h) as usize];
        for y in 0..h {
            'pixel: for x in 0..w {
                let v = grid.get(x as usize, y as usize);
                if v < threshold {
                    continue;
                }
                for &(dy, dx) in &disk {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w || ny >= h {
                        continue;
                    }
                    if grid.get(nx as usize, ny as usize) > v {
                        continue 'pixel;
                    }
                }
                is_max[(y * w + x) as usize] = true;
            }
        }

        // Collapse 8-connected equal-valued plateaus to their smallest
        // (row, col) pixel.
        let mut visited = vec![false; (w * h) as usize];
        for y in 0..h {
            for x in 0..w {
                let idx = (y * w + x) as usize;
                if !is_max[idx] || visited[idx] {
                    continue;
                }
                let v = grid.get(x as usize, y as usize);
                let mut stack = vec![(y, x)];
                visited[idx] = true;
                let mut min_pixel = (y, x);
                while let Some((cy, cx)) = stack.pop() {
                    if (cy, cx) < min_pixel {
                        min_pixel = (cy, cx);
                    }
                    for dy in -1..=1i64 {
                        for dx in -1..=1i64 {
                            if (dy, dx) == (0, 0) {
                                continue;
                            }
                            let (ny, nx) = (cy + dy, cx + dx);
                            if nx < 0 || ny < 0 || nx >= w || ny >= h {
                                continue;
                            }
                            let nidx = (ny * w + nx) as usize;
                            if is_max[nidx]
                                && !visited[nidx]
                                && grid.get(nx as usize, ny as usize) == v
                            {
                                visited[nidx] = true;
                                stack.push((ny, nx));
                            }
                        }
                    }
                }
                out.push((class, min_pixel.0, min_pixel.1));
            }
        }
    }
    out.sort_by(|a, b| {
        a.0.index()
            .cmp(&b.0.index())
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    Ok(out
        .into_iter()
        .map(|(class, row, col)| CellAnnotation {
            patch_id: patch_id.to_string(),
            annotator_id: annotator_id.to_string(),
            class: class.canonical_raw(),
            x: col as f64,
            y: row as f64,
        })
        .collect())
}

/// Micro-averaged per-class F1, its mean, and a per-origin breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvalResult {
    pub per_class_f1: BTreeMap<TaskClass, f64>,
    pub mf1: f64,
    pub per_origin: BTreeMap<String, f64>,
}

#[derive(Debug, Default, Clone)]
struct ClassTotals(BTreeMap<TaskClass, (u64, u64, u64)>);

impl ClassTotals {
    fn absorb(&mut self, per_class: BTreeMap<TaskClass, crate::matching::MatchResult>) {
        for (class, r) in per_class {
            let e = self.0.entry(class).or_insert((0, 0, 0));
            e.0 += r.tp;
            e.1 += r.fp;
            e.2 += r.fn_;
        }
    }

    fn f1s(&self) -> BTreeMap<TaskClass, f64> {
        self.0
            .iter()
            .map(|(&c, &(tp, fp, fn_))| {
                let denom = 2 * tp + fp + fn_;
                (c, if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 })
            })
            .collect()
    }

    fn mf1(&self) -> f64 {
        let f1s = self.f1s();
        if f1s.is_empty() {
            0.0
        } else {
            f1s.values().sum::<f64>() / f1s.len() as f64
        }
    }
}

/// Evaluates predicted points against reference points under the hit
/// criterion, micro-averaging per class over patches. Patches are grouped by
/// `origin` for the per-origin means; patches without an origin contribute
/// to the overall score only.
pub fn evaluate_detections(
    pred: &[CellAnnotation],
    truth: &[CellAnnotation],
    patches: &[PatchMeta],
    cfg: &MatchConfig,
) -> Result<DetectionEvalResult> {
    let by_id: BTreeMap<&str, &PatchMeta> =
        patches.iter().map(|p| (p.patch_id.as_str(), p)).collect();
    let mut pred_by_patch: BTreeMap<&str, Vec<&CellAnnotation>> = BTreeMap::new();
    for a in pred {
        if !by_id.contains_key(a.patch_id.as_str()) {
            return Err(Error::UnknownPatch(a.patch_id.clone()));
        }
        pred_by_patch.entry(a.patch_id.as_str()).or_default().push(a);
    }
    let mut truth_by_patch: BTreeMap<&str, Vec<&CellAnnotation>> = BTreeMap::new();
    for a in truth {
        if !by_id.contains_key(a.patch_id.as_str()) {
            return Err(Error::UnknownPatch(a.patch_id.clone()));
        }
        truth_by_patch.entry(a.patch_id.as_str()).or_default().push(a);
    }

    let empty = Vec::new();
    let mut overall = ClassTotals::default();
    let mut by_origin: BTreeMap<String, ClassTotals> = BTreeMap::new();
    for patch in patches {
        let p = pred_by_patch.get(patch.patch_id.as_str()).unwrap_or(&empty);
        let t = truth_by_patch.get(patch.patch_id.as_str()).unwrap_or(&empty);
        if p.is_empty() && t.is_empty() {
            continue;
        }
        let per_class = score_patch(p, t, patch, cfg)?;
        overall.absorb(per_class.clone());
        if let Some(origin) = &patch.origin {
            by_origin.entry(origin.clone()).or_default().absorb(per_class);
        }
    }

    Ok(DetectionEvalResult {
        per_class_f1: overall.f1s(),
        mf1: overall.mf1(),
        per_origin: by_origin.into_iter().map(|(o, t)| (o, t.mf1())).collect(),
    })
}

/// Convenience wrapper taking datasets (e.g. loaded detection/truth tables).
pub fn evaluate_detection_datasets(
    pred: &Dataset,
    truth: &Dataset,
    cfg: &MatchConfig,
) -> Result<DetectionEvalResult> {
    evaluate_detections(&pred.annotations, &truth.annotations, &truth.patches, cfg)
}
