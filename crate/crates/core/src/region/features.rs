use std::collections::BTreeMap;
use std::fs;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BoundingBox, RegionError};

/// Upper bound on regions per image (the detector keeps 36 proposals).
pub const MAX_REGIONS: usize = 36;

/// Boxes and feature vectors of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RegionRecord", into = "RegionRecord")]
pub struct RegionFeatureSet {
    image_ref: String,
    boxes: Vec<BoundingBox>,
    features: Vec<Vec<f32>>,
    global: Option<Vec<f32>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionRecord {
    image_ref: String,
    boxes: Vec<BoundingBox>,
    features: Vec<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    global: Option<Vec<f32>>,
}

impl TryFrom<RegionRecord> for RegionFeatureSet {
    type Error = String;

    fn try_from(r: RegionRecord) -> Result<Self, String> {
        RegionFeatureSet::new(r.image_ref, r.boxes, r.features, r.global)
    }
}

impl From<RegionFeatureSet> for RegionRecord {
    fn from(s: RegionFeatureSet) -> Self {
        RegionRecord {
            image_ref: s.image_ref,
            boxes: s.boxes,
            features: s.features,
            global: s.global,
        }
    }
}

impl RegionFeatureSet {
    pub fn new(
        image_ref: String,
        boxes: Vec<BoundingBox>,
        features: Vec<Vec<f32>>,
        global: Option<Vec<f32>>,
    ) -> Result<Self, String> {
        if boxes.is_empty() {
            return Err(format!("{image_ref}: no regions"));
        }
        if boxes.len() > MAX_REGIONS {
            return Err(format!(
                "{image_ref}: {} regions exceeds the limit of {MAX_REGIONS}",
                boxes.len()
            ));
        }
        if features.len() != boxes.len() {
            return Err(format!(
                "{image_ref}: {} boxes but {} feature vectors",
                boxes.len(),
                features.len()
            ));
        }
        let d_v = features[0].len();
        if d_v == 0 {
            return Err(format!("{image_ref}: empty feature vector"));
        }
        if let Some(bad) = features.iter().position(|f| f.len() != d_v) {
            return Err(format!(
                "{image_ref}: region {bad} has {} features, expected {d_v}",
                features[bad].len()
            ));
        }
        if let Some(g) = &global {
            if g.len() != d_v {
                return Err(format!(
                    "{image_ref}: global vector has {} features, expected {d_v}",
                    g.len()
                ));
            }
        }
        let all_finite = features.iter().flatten().chain(global.iter().flatten()).all(|v| v.is_finite());
        if !all_finite {
            return Err(format!("{image_ref}: non-finite feature value"));
        }
        Ok(RegionFeatureSet {
            image_ref,
            boxes,
            features,
            global,
        })
    }

    pub fn image_ref(&self) -> &str {
        &self.image_ref
    }

    pub fn boxes(&self) -> &[BoundingBox] {
        &self.boxes
    }

    pub fn features(&self) -> &[Vec<f32>] {
        &self.features
    }

    pub fn global(&self) -> Option<&[f32]> {
        self.global.as_deref()
    }

    pub fn n_regions(&self) -> usize {
        self.boxes.len()
    }

    pub fn d_v(&self) -> usize {
        self.features[0].len()
    }
}

fn mean_of<'a>(rows: impl Iterator<Item = &'a Vec<f32>>, d: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; d];
    let mut n = 0usize;
    for r in rows {
        n += 1;
        for (a, v) in acc.iter_mut().zip(r) {
            *a += *v as f64;
        }
    }
    acc.into_iter().map(|a| (a / n.max(1) as f64) as f32).collect()
}

/// The file-provided global vector, or the mean of the region features.
pub fn global_vector(rfs: &RegionFeatureSet) -> Vec<f32> {
    match &rfs.global {
        Some(g) => g.clone(),
        None => mean_of(rfs.features.iter(), rfs.d_v()),
    }
}

fn extent(rfs: &RegionFeatureSet) -> (f32, f32) {
    let w = rfs.boxes.iter().map(|b| b.x2).fold(0.0f32, f32::max);
    let h = rfs.boxes.iter().map(|b| b.y2).fold(0.0f32, f32::max);
    (if w > 0.0 { w } else { 1.0 }, if h > 0.0 { h } else { 1.0 })
}

/// Box coordinates divided by the image extent (the largest x2 and y2).
pub fn normalized_boxes(rfs: &RegionFeatureSet) -> Vec<[f32; 4]> {
    let (w, h) = extent(rfs);
    rfs.boxes
        .iter()
        .map(|b| [b.x1 / w, b.y1 / h, b.x2 / w, b.y2 / h])
        .collect()
}

/// Mean feature per cell of a `grid × grid` partition of the image, assigning
/// each region by its box center. Empty cells are skipped; cells come out in
/// row-major order.
pub fn grid_features(rfs: &RegionFeatureSet, grid: usize) -> Vec<Vec<f32>> {
    let grid = grid.max(1);
    let (w, h) = extent(rfs);
    let mut cells: BTreeMap<usize, Vec<&Vec<f32>>> = BTreeMap::new();
    for (b, f) in rfs.boxes.iter().zip(&rfs.features) {
        let (cx, cy) = b.center();
        let col = ((cx / w * grid as f32) as usize).min(grid - 1);
        let row = ((cy / h * grid as f32) as usize).min(grid - 1);
        cells.entry(row * grid + col).or_default().push(f);
    }
    cells
        .into_values()
        .map(|members| mean_of(members.into_iter(), rfs.d_v()))
        .collect()
}

/// Reads newline-delimited region records keyed by image. Feature width must
/// agree across the whole file; duplicate image keys are rejected.
pub fn read_region_features<R: BufRead>(
    reader: R,
) -> Result<BTreeMap<String, RegionFeatureSet>, RegionError> {
    let mut out = BTreeMap::new();
    let mut d_v: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let err = |message: String| RegionError::Record { line: i + 1, message };
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let set: RegionFeatureSet = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        match d_v {
            None => d_v = Some(set.d_v()),
            Some(d) if d != set.d_v() => {
                return Err(err(format!(
                    "feature width {} differs from {d} used earlier in the file",
                    set.d_v()
                )))
            }
            Some(_) => {}
        }
        let key = set.image_ref.clone();
        if out.insert(key.clone(), set).is_some() {
            return Err(err(format!("duplicate image_ref `{key}`")));
        }
    }
    Ok(out)
}

pub fn load_region_features(
    path: impl AsRef<Path>,
) -> Result<BTreeMap<String, RegionFeatureSet>, RegionError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| RegionError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_region_features(std::io::BufReader::new(file))
}

pub fn region_features_to_string<'a>(sets: impl IntoIterator<Item = &'a RegionFeatureSet>) -> String {
    let mut out = String::new();
    for s in sets {
        out.push_str(&serde_json::to_string(s).expect("region sets always serialize"));
        out.push('\n');
    }
    out
}

pub fn write_region_features<'a>(
    path: impl AsRef<Path>,
    sets: impl IntoIterator<Item = &'a RegionFeatureSet>,
) -> Result<(), RegionError> {
    let path = path.as_ref();
    fs::write(path, region_features_to_string(sets)).map_err(|source| RegionError::Io {
        path: path.to_path_buf(),
        source,
    })
}
