//! Shared domain types, the `PRL1` container and the run configuration.

mod config;
mod container;

pub use config::{load_config, LoadedConfig, PipelineConfig, SolverKind};
pub use container::{read_container, write_container, TensorContainer, TensorEntry};

use nalgebra::DMatrix;

use crate::error::{PearlError, Result};

/// Sentinel for unlabeled pixels in ground-truth maps.
pub const IGNORE_LABEL: u32 = 255;

/// Query/key/value token matrices of one attention head, each `N x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTensors {
    pub q: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

impl HeadTensors {
    pub fn new(q: DMatrix<f64>, k: DMatrix<f64>, v: DMatrix<f64>) -> Result<Self> {
        if q.shape() != k.shape() || q.shape() != v.shape() {
            return Err(PearlError::Dimension(format!(
                "Q {:?}, K {:?} and V {:?} must share one shape",
                q.shape(),
                k.shape(),
                v.shape()
            )));
        }
        if q.nrows() == 0 || q.ncols() == 0 {
            return Err(PearlError::Dimension("empty head tensors".into()));
        }
        Ok(Self { q, k, v })
    }

    pub fn tokens(&self) -> usize {
        self.q.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.q.ncols()
    }
}

/// Unit-norm text prototypes, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeMatrix {
    t: DMatrix<f64>,
    class_names: Vec<String>,
}

impl PrototypeMatrix {
    pub const NORM_TOLERANCE: f64 = 1e-4;

    pub fn new(t: DMatrix<f64>, class_names: Vec<String>) -> Result<Self> {
        if t.nrows() == 0 || t.ncols() == 0 {
            return Err(PearlError::validation("prototypes", "need at least one class"));
        }
        if class_names.len() != t.nrows() {
            return Err(PearlError::validation(
                "prototypes",
                format!("{} names for {} rows", class_names.len(), t.nrows()),
            ));
        }
        for (c, row) in t.row_iter().enumerate() {
            let norm = row.norm();
            if !norm.is_finite() || (norm - 1.0).abs() > Self::NORM_TOLERANCE {
                return Err(PearlError::validation(
                    "prototypes",
                    format!("row {c} has norm {norm}, expected 1"),
                ));
            }
        }
        Ok(Self { t, class_names })
    }

    /// Uses generated names `class0..classC-1`.
    pub fn from_matrix(t: DMatrix<f64>) -> Result<Self> {
        let names = (0..t.nrows()).map(|c| format!("class{c}")).collect();
        Self::new(t, names)
    }

    /// Normalizes each row first; zero rows are rejected.
    pub fn normalized(mut t: DMatrix<f64>) -> Result<Self> {
        for mut row in t.row_iter_mut() {
            let n = row.norm();
            if n == 0.0 {
                return Err(PearlError::validation("prototypes", "zero prototype row"));
            }
            row /= n;
        }
        Self::from_matrix(t)
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let e = c.require("prototypes")?;
        if !e.is_finite() {
            return Err(PearlError::validation("prototypes", "non-finite values"));
        }
        Self::from_matrix(e.to_matrix()?)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.t
    }

    pub fn classes(&self) -> usize {
        self.t.nrows()
    }

    pub fn dim(&self) -> usize {
        self.t.ncols()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Same prototypes with rows reordered so that new row `i` is old row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let t = DMatrix::from_fn(self.t.nrows(), self.t.ncols(), |r, c| self.t[(perm[r], c)]);
        let class_names = perm.iter().map(|&p| self.class_names[p].clone()).collect();
        Self { t, class_names }
    }

    pub fn to_container(&self) -> TensorContainer {
        TensorContainer::from_entries(vec![TensorEntry::from_matrix("prototypes", &self.t)])
            .expect("single entry")
    }
}

/// Per-position class scores, stored position-major: `scores[(h * width + w) * classes + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGrid {
    height: usize,
    width: usize,
    classes: usize,
    scores: Vec<f64>,
}

impl LogitGrid {
    pub fn new(height: usize, width: usize, classes: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != height * width * classes {
            return Err(PearlError::Dimension(format!(
                "{height}x{width}x{classes} logit grid needs {} scores, got {}",
                height * width * classes,
                scores.len()
            )));
        }
        if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
            return Err(PearlError::validation(
                "logits",
                format!("non-finite score at flat index {i}"),
            ));
        }
        Ok(Self {
            height,
            width,
            classes,
            scores,
        })
    }

    pub fn zeros(height: usize, width: usize, classes: usize) -> Self {
        Self {
            height,
            width,
            classes,
            scores: vec![0.0; height * width * classes],
        }
    }

    /// Builds a grid from channel planes laid out `C x H x W`.
    pub fn from_channels(height: usize, width: usize, channels: &[Vec<f64>]) -> Result<Self> {
        let classes = channels.len();
        let n = height * width;
        let mut scores = vec![0.0; n * classes];
        for (c, ch) in channels.iter().enumerate() {
            if ch.len() != n {
                return Err(PearlError::Dimension(format!(
                    "channel {c} has {} values, expected {n}",
                    ch.len()
                )));
            }
            for (i, &v) in ch.iter().enumerate() {
                scores[i * classes + c] = v;
            }
        }
        Self::new(height, width, classes, scores)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn nodes(&self) -> usize {
        self.height * self.width
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn scores_mut(&mut self) -> &mut [f64] {
        &mut self.scores
    }

    pub fn get(&self, h: usize, w: usize, c: usize) -> f64 {
        self.scores[(h * self.width + w) * self.classes + c]
    }

    /// Class vector at flat position `i = h * width + w`.
    pub fn node(&self, i: usize) -> &[f64] {
        &self.scores[i * self.classes..(i + 1) * self.classes]
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        (0..self.nodes()).map(|i| self.scores[i * self.classes + c]).collect()
    }

    /// All channels as `C x (H*W)` planes.
    pub fn channels(&self) -> Vec<Vec<f64>> {
        (0..self.classes).map(|c| self.channel(c)).collect()
    }

    /// Per-position argmax; ties resolve to the lowest class index.
    pub fn argmax(&self) -> LabelMap {
        let labels = (0..self.nodes())
            .map(|i| argmax_lowest(self.node(i)) as u32)
            .collect();
        LabelMap {
            height: self.height,
            width: self.width,
            classes: self.classes,
            labels,
            ignore_value: IGNORE_LABEL,
        }
    }

    /// Same scores with class order permuted: new class `i` is old class `perm[i]`.
    pub fn permute_classes(&self, perm: &[usize]) -> Self {
        let mut scores = vec![0.0; self.scores.len()];
        for i in 0..self.nodes() {
            for (new_c, &old_c) in perm.iter().enumerate() {
                scores[i * self.classes + new_c] = self.scores[i * self.classes + old_c];
            }
        }
        Self { scores, ..self.clone() }
    }

    /// `C x H x W` f32 tensor entry.
    pub fn to_entry_chw(&self, name: &str) -> TensorEntry {
        let mut data = Vec::with_capacity(self.scores.len());
        for c in 0..self.classes {
            data.extend((0..self.nodes()).map(|i| self.scores[i * self.classes + c] as f32));
        }
        TensorEntry {
            name: name.to_string(),
            shape: vec![self.classes, self.height, self.width],
            data,
        }
    }
}

pub(crate) fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (c, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = c;
        }
    }
    best
}

/// Single-channel image with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width || height == 0 || width == 0 {
            return Err(PearlError::Dimension(format!(
                "{height}x{width} image with {} pixels",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(PearlError::validation(
                "image_gray",
                format!("value {v} outside [0, 1]"),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    /// Rec. 601 luma of an interleaved RGB buffer scaled to `[0, 1]`.
    pub fn from_rgb(height: usize, width: usize, rgb: &[f64]) -> Result<Self> {
        if rgb.len() != height * width * 3 {
            return Err(PearlError::Dimension("RGB buffer size".into()));
        }
        let data = rgb
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0))
            .collect();
        Self::new(height, width, data)
    }

    /// Reads `image_gray` (`H x W`) or, failing that, `image_rgb` (`H x W x 3`).
    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        if let Some(e) = c.get("image_gray") {
            return match e.shape.as_slice() {
                &[h, w] if e.is_finite() => Self::new(h, w, e.to_f64()),
                _ => Err(PearlError::Load(format!(
                    "`image_gray` must be a finite H x W tensor, got shape {:?}",
                    e.shape
                ))),
            };
        }
        let e = c.get("image_rgb").ok_or_else(|| {
            PearlError::Load("missing tensor entry `image_gray` (or `image_rgb`)".into())
        })?;
        match e.shape.as_slice() {
            &[h, w, 3] if e.is_finite() => Self::from_rgb(h, w, &e.to_f64()),
            _ => Err(PearlError::Load(format!(
                "`image_rgb` must be H x W x 3, got {:?}",
                e.shape
            ))),
        }
    }

    pub fn get(&self, h: usize, w: usize) -> f64 {
        self.data[h * self.width + w]
    }

    pub fn to_entry(&self, name: &str) -> TensorEntry {
        TensorEntry {
            name: name.to_string(),
            shape: vec![self.height, self.width],
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Per-pixel class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub labels: Vec<u32>,
    pub ignore_value: u32,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, classes: usize, labels: Vec<u32>) -> Result<Self> {
        let map = Self {
            height,
            width,
            classes,
            labels,
            ignore_value: IGNORE_LABEL,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.height * self.width {
            return Err(PearlError::Dimension(format!(
                "{}x{} label map with {} labels",
                self.height,
                self.width,
                self.labels.len()
            )));
        }
        if let Some(l) = self
            .labels
            .iter()
            .find(|&&l| l != self.ignore_value && l as usize >= self.classes)
        {
            return Err(PearlError::validation(
                "labels",
                format!("label {l} outside [0, {})", self.classes),
            ));
        }
        Ok(())
    }

    pub fn get(&self, h: usize, w: usize) -> u32 {
        self.labels[h * self.width + w]
    }

    /// Reads `gt_labels` (f32 integer codes, 255 = ignore).
    pub fn from_container(c: &TensorContainer, name: &str, classes: usize) -> Result<Self> {
        let e = c.require(name)?;
        let &[h, w] = e.shape.as_slice() else {
            return Err(PearlError::Load(format!("`{name}` must be H x W")));
        };
        let labels = e
            .data
            .iter()
            .map(|&v| {
                if v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f32 {
                    Ok(v as u32)
                } else {
                    Err(PearlError::validation(name, format!("{v} is not a label code")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(h, w, classes, labels)
    }

    pub fn to_entry(&self, name: &str) -> TensorEntry {
        TensorEntry {
            name: name.to_string(),
            shape: vec![self.height, self.width],
            data: self.labels.iter().map(|&l| l as f32).collect(),
        }
    }

    /// Applies a class relabeling `old -> map[old]`; ignore pixels stay.
    pub fn relabel(&self, map: &[u32]) -> Self {
        let labels = self
            .labels
            .iter()
            .map(|&l| {
                if l == self.ignore_value {
                    l
                } else {
                    map[l as usize]
                }
            })
            .collect();
        Self {
            labels,
            ..self.clone()
        }
    }
}
