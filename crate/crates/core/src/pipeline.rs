//! Sliding-window inference: per-window alignment and scoring, overlap
//! fusion in the working frame, grid propagation and final labels at the
//! original image resolution.
//!
//! Features containers hold one attention block per window. A single window
//! uses the bare names (`Q.h0`, ...); several windows use a `w{m}.` prefix
//! (`w0.Q.h0`, `w1.Q.h0`, ...). Window `m` is the `m`-th crop of
//! [`plan_windows`] over the working frame unless the container ships a
//! `windows` entry (`M x 4`: top, left, height, width). The working frame is
//! the image resized so its short side is `short_side`, or the `frame` entry
//! (`[height, width]`) when present.

use crate::error::{PearlError, Result, StageExt};
use crate::interchange::{
    GrayImage, LabelMap, LogitGrid, PipelineConfig, PrototypeMatrix, TensorContainer,
};
use crate::par::Exec;
use crate::procrustes::{align_block, AttentionBlock, BlockOutput};
use crate::propagate::{finalize, refine, Refinement};
use crate::resample::{resize_gray, short_side_size, upsample_logits};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Window {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..self.top + self.height).contains(&y) && (self.left..self.left + self.width).contains(&x)
    }
}

/// Crops over an `height x width` frame with uniform overlap weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPlan {
    pub height: usize,
    pub width: usize,
    pub windows: Vec<Window>,
    coverage: Vec<u32>,
}

impl WindowPlan {
    /// Plan from explicit crops; every pixel must be covered.
    pub fn from_windows(height: usize, width: usize, windows: Vec<Window>) -> Result<Self> {
        if windows.is_empty() {
            return Err(PearlError::Planning("no windows".into()));
        }
        let mut coverage = vec![0u32; height * width];
        for (m, w) in windows.iter().enumerate() {
            if w.height == 0 || w.width == 0 || w.top + w.height > height || w.left + w.width > width {
                return Err(PearlError::Planning(format!(
                    "window {m} {w:?} does not fit the {height}x{width} frame"
                )));
            }
            for y in w.top..w.top + w.height {
                coverage[y * width + w.left..y * width + w.left + w.width]
                    .iter_mut()
                    .for_each(|c| *c += 1);
            }
        }
        if let Some(i) = coverage.iter().position(|&c| c == 0) {
            return Err(PearlError::Planning(format!(
                "pixel ({}, {}) is not covered by any window",
                i / width,
                i % width
            )));
        }
        Ok(Self {
            height,
            width,
            windows,
            coverage,
        })
    }

    pub fn coverage(&self, y: usize, x: usize) -> u32 {
        self.coverage[y * self.width + x]
    }

    /// Fusion weight of window `m` at pixel `(y, x)`.
    pub fn weight(&self, m: usize, y: usize, x: usize) -> f64 {
        if self.windows[m].contains(y, x) {
            1.0 / self.coverage(y, x) as f64
        } else {
            0.0
        }
    }
}

/// Sliding grid: `⌈(H − window) / stride⌉ + 1` rows of crops, the last one
/// shifted back to end on the border; likewise for columns. Row-major order.
pub fn plan_windows(height: usize, width: usize, window: usize, stride: usize) -> Result<WindowPlan> {
    if window == 0 || stride == 0 || stride > window {
        return Err(PearlError::Planning(format!(
            "need 0 < stride <= window, got window {window}, stride {stride}"
        )));
    }
    if window > height || window > width {
        return Err(PearlError::Planning(format!(
            "window {window} exceeds the {height}x{width} frame; resize the image so its short side is at least {window}"
        )));
    }
    let starts = |n: usize| -> Vec<usize> {
        let count = (n - window).div_ceil(stride) + 1;
        (0..count).map(|k| (k * stride).min(n - window)).collect()
    };
    let mut windows = Vec::new();
    for &top in &starts(height) {
        for &left in &starts(width) {
            windows.push(Window {
                top,
                left,
                height: window,
                width: window,
            });
        }
    }
    WindowPlan::from_windows(height, width, windows)
}

/// Weighted sum of window-local logits (`window_logits[m]` has the extents of
/// `plan.windows[m]`) into the plan frame.
pub fn fuse(window_logits: &[LogitGrid], plan: &WindowPlan) -> Result<LogitGrid> {
    if window_logits.len() != plan.windows.len() {
        return Err(PearlError::Dimension(format!(
            "{} window fields for {} planned windows",
            window_logits.len(),
            plan.windows.len()
        )));
    }
    let classes = window_logits[0].classes();
    let mut out = vec![0.0; plan.height * plan.width * classes];
    for (m, (z, w)) in window_logits.iter().zip(&plan.windows).enumerate() {
        if (z.height(), z.width(), z.classes()) != (w.height, w.width, classes) {
            return Err(PearlError::Dimension(format!(
                "window {m} field is {}x{}x{}, expected {}x{}x{classes}",
                z.height(),
                z.width(),
                z.classes(),
                w.height,
                w.width
            )));
        }
        for y in 0..w.height {
            for x in 0..w.width {
                let (fy, fx) = (w.top + y, w.left + x);
                let omega = 1.0 / plan.coverage(fy, fx) as f64;
                let dst = &mut out[(fy * plan.width + fx) * classes..][..classes];
                for (d, s) in dst.iter_mut().zip(z.node(y * w.width + x)) {
                    *d += omega * s;
                }
            }
        }
    }
    LogitGrid::new(plan.height, plan.width, classes, out)
}

/// Parsed inputs of one image.
#[derive(Debug, Clone)]
pub struct PipelineInputs {
    pub blocks: Vec<AttentionBlock>,
    /// Crops shipped with the features, if any.
    pub windows: Option<Vec<Window>>,
    /// Working frame shipped with the features, if any.
    pub frame: Option<(usize, usize)>,
    pub prototypes: PrototypeMatrix,
    /// Gray image at original resolution.
    pub gray: GrayImage,
}

fn read_windows(c: &TensorContainer) -> Result<Option<Vec<Window>>> {
    let Some(e) = c.get("windows") else {
        return Ok(None);
    };
    if e.shape.len() != 2 || e.shape[1] != 4 {
        return Err(PearlError::Load(format!("`windows` must be M x 4, got {:?}", e.shape)));
    }
    let as_index = |v: f32| -> Result<usize> {
        if v < 0.0 || v.fract() != 0.0 {
            return Err(PearlError::Load(format!("`windows` holds non-integer value {v}")));
        }
        Ok(v as usize)
    };
    e.data
        .chunks(4)
        .map(|r| {
            Ok(Window {
                top: as_index(r[0])?,
                left: as_index(r[1])?,
                height: as_index(r[2])?,
                width: as_index(r[3])?,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

fn read_frame(c: &TensorContainer) -> Result<Option<(usize, usize)>> {
    let Some(e) = c.get("frame") else {
        return Ok(None);
    };
    match e.data[..] {
        [h, w] if h >= 1.0 && w >= 1.0 && h.fract() == 0.0 && w.fract() == 0.0 => {
            Ok(Some((h as usize, w as usize)))
        }
        _ => Err(PearlError::Load(format!("`frame` must hold two positive integers, got {:?}", e.data))),
    }
}

impl PipelineInputs {
    pub fn from_containers(
        features: &TensorContainer,
        prototypes: &TensorContainer,
        image: &TensorContainer,
    ) -> Result<Self> {
        let blocks = if features.get("w0.Q.h0").is_some() {
            let mut blocks = Vec::new();
            while features.get(&format!("w{}.Q.h0", blocks.len())).is_some() {
                let prefix = format!("w{}.", blocks.len());
                blocks.push(AttentionBlock::from_container(features, &prefix)?);
            }
            blocks
        } else {
            vec![AttentionBlock::from_container(features, "")?]
        };
        let windows = read_windows(features)?;
        if let Some(w) = &windows {
            if w.len() != blocks.len() {
                return Err(PearlError::Load(format!(
                    "`windows` lists {} crops but features hold {} windows",
                    w.len(),
                    blocks.len()
                )));
            }
        }
        Ok(Self {
            blocks,
            windows,
            frame: read_frame(features)?,
            prototypes: PrototypeMatrix::from_container(prototypes)?,
            gray: GrayImage::from_container(image)?,
        })
    }

    /// Working frame size for `config`.
    pub fn frame(&self, config: &PipelineConfig) -> (usize, usize) {
        self.frame
            .unwrap_or_else(|| short_side_size(self.gray.height, self.gray.width, config.short_side))
    }

    pub fn plan(&self, config: &PipelineConfig) -> Result<WindowPlan> {
        let (h, w) = self.frame(config);
        match (&self.windows, self.blocks.len()) {
            (Some(windows), _) => WindowPlan::from_windows(h, w, windows.clone()),
            (None, 1) => WindowPlan::from_windows(
                h,
                w,
                vec![Window {
                    top: 0,
                    left: 0,
                    height: h,
                    width: w,
                }],
            ),
            (None, m) => {
                let plan = plan_windows(h, w, config.window, config.stride)?;
                if plan.windows.len() != m {
                    return Err(PearlError::Planning(format!(
                        "features hold {m} windows but a {h}x{w} frame with window {} and stride {} needs {}",
                        config.window,
                        config.stride,
                        plan.windows.len()
                    )));
                }
                Ok(plan)
            }
        }
    }
}

/// Fused working-frame logits with the per-window diagnostics.
#[derive(Debug, Clone)]
pub struct FusedField {
    pub logits: LogitGrid,
    pub plan: WindowPlan,
    pub windows: Vec<BlockOutput>,
}

pub fn fused_logits(inputs: &PipelineInputs, config: &PipelineConfig, exec: Exec) -> Result<FusedField> {
    let plan = inputs.plan(config).stage("plan_windows")?;
    let windows = exec
        .try_map_range(inputs.blocks.len(), |m| {
            align_block(&inputs.blocks[m], &inputs.prototypes, config, exec).inspect_err(|e| {
                log::error!("window {m}: {e}");
            })
        })
        .stage("align_block")?;
    let upsampled: Vec<LogitGrid> = windows
        .iter()
        .zip(&plan.windows)
        .map(|(out, w)| upsample_logits(&out.logits, w.height, w.width))
        .collect();
    let logits = fuse(&upsampled, &plan).stage("fuse")?;
    Ok(FusedField {
        logits,
        plan,
        windows,
    })
}

/// Gray image resized to the working frame.
pub fn working_gray(inputs: &PipelineInputs, config: &PipelineConfig) -> GrayImage {
    let (h, w) = inputs.frame(config);
    resize_gray(&inputs.gray, h, w)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Keep the upsampled refined field `F`.
    pub keep_field: bool,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// Labels at the original image resolution.
    pub labels: LabelMap,
    pub field: Option<LogitGrid>,
    pub fused: FusedField,
    pub refinement: Refinement,
}

impl PipelineOutput {
    /// `labels` and, when kept, `F` (`C x H x W`).
    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::default();
        c.push(self.labels.to_entry("labels")).expect("fresh container");
        if let Some(f) = &self.field {
            c.push(f.to_entry_chw("F")).expect("distinct names");
        }
        c
    }
}

pub fn run(
    inputs: &PipelineInputs,
    config: &PipelineConfig,
    options: RunOptions,
    exec: Exec,
) -> Result<PipelineOutput> {
    config.validate().stage("config")?;
    let fused = fused_logits(inputs, config, exec)?;
    let gray = working_gray(inputs, config);
    let refinement = refine(&fused.logits, &gray, &inputs.prototypes, config, exec).stage("propagate")?;
    let (labels, field) =
        finalize(refinement.refined(), inputs.gray.height, inputs.gray.width).stage("finalize")?;
    Ok(PipelineOutput {
        labels,
        field: options.keep_field.then_some(field),
        fused,
        refinement,
    })
}
