//! Whole-block alignment: every head is aligned independently, the outputs are
//! concatenated, projected, optionally run through the rest of the block, and
//! scored against the prototypes.

use nalgebra::{DMatrix, DVector};

use super::{aligned_attention, aligned_logits, solve_alignment, token_weights, weighted_center, AlignmentResult};
use crate::error::{PearlError, Result};
use crate::interchange::{HeadTensors, LogitGrid, PipelineConfig, PrototypeMatrix, SolverKind, TensorContainer};
use crate::par::Exec;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: DVector<f64>,
    pub beta: DVector<f64>,
    pub eps: f64,
}

impl LayerNorm {
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        let width = x.ncols() as f64;
        for mut row in out.row_iter_mut() {
            let mean = row.sum() / width;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width;
            let inv = 1.0 / (var + self.eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * self.gamma[j] + self.beta[j];
            }
        }
        out
    }
}

/// Feed-forward sublayer `x + fc2(QuickGELU(fc1(LN(x))))`, row-vector convention.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub norm: LayerNorm,
    pub fc1: DMatrix<f64>,
    pub fc1_bias: DVector<f64>,
    pub fc2: DMatrix<f64>,
    pub fc2_bias: DVector<f64>,
}

fn add_row_bias(mut x: DMatrix<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    for mut row in x.row_iter_mut() {
        row += b.transpose();
    }
    x
}

impl Mlp {
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut h = add_row_bias(self.norm.apply(x) * &self.fc1, &self.fc1_bias);
        h.apply(|v| *v *= 1.0 / (1.0 + (-1.702 * *v).exp()));
        x + add_row_bias(h * &self.fc2, &self.fc2_bias)
    }
}

/// Optional tensors applied after the output projection.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BlockTail {
    /// Block input tokens (`N x D`) for the residual connection.
    pub residual: Option<DMatrix<f64>>,
    pub mlp: Option<Mlp>,
    pub post_norm: Option<LayerNorm>,
    /// Final visual projection (`D x E`).
    pub proj: Option<DMatrix<f64>>,
}

/// Heads of the last attention block for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub heads: Vec<HeadTensors>,
    pub cls_index: Option<usize>,
    pub patch_grid: (usize, usize),
    /// Output projection `W_o` (`D x D`) and bias.
    pub out_proj: Option<(DMatrix<f64>, Option<DVector<f64>>)>,
    pub tail: BlockTail,
}

/// Per-head solve summary.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadReport {
    pub solver: SolverKind,
    pub residual: Option<f64>,
    pub orthogonality_error: f64,
    pub iterations: usize,
    pub degenerate: bool,
    pub fell_back: bool,
}

impl From<&AlignmentResult> for HeadReport {
    fn from(r: &AlignmentResult) -> Self {
        Self {
            solver: r.solver,
            residual: r.residual,
            orthogonality_error: r.orthogonality_error(),
            iterations: r.iterations,
            degenerate: r.degenerate,
            fell_back: r.fell_back,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockOutput {
    /// Patch-grid logits (`H_p x W_p x C`).
    pub logits: LogitGrid,
    pub heads: Vec<HeadReport>,
    /// No `W_o` was available; heads were concatenated without projection.
    pub degraded: bool,
    pub zero_feature_rows: usize,
}

fn vector(c: &TensorContainer, name: &str, len: usize) -> Result<DVector<f64>> {
    let e = c.require(name)?;
    if e.data.len() != len || e.shape.len() != 1 {
        return Err(PearlError::Load(format!(
            "`{name}` must be a vector of length {len}, got shape {:?}",
            e.shape
        )));
    }
    Ok(DVector::from_vec(e.to_f64()))
}

fn matrix(c: &TensorContainer, name: &str) -> Result<DMatrix<f64>> {
    let e = c.require(name)?;
    if !e.is_finite() {
        return Err(PearlError::validation(name, "non-finite values"));
    }
    e.to_matrix()
}

fn layer_norm(c: &TensorContainer, prefix: &str, width: usize) -> Result<Option<LayerNorm>> {
    let w_name = format!("{prefix}.weight");
    if c.get(&w_name).is_none() {
        return Ok(None);
    }
    Ok(Some(LayerNorm {
        gamma: vector(c, &w_name, width)?,
        beta: vector(c, &format!("{prefix}.bias"), width)?,
        eps: 1e-5,
    }))
}

fn is_square(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

impl AttentionBlock {
    /// Loads the block of one window.
    ///
    /// Head tensors are `{prefix}Q.h{j}` etc.; `W_o`, `b_o`, the MLP and the
    /// projection tensors are shared by all windows, while the residual input
    /// `{prefix}X_in` is per window. The patch grid comes from `patch_grid`
    /// when present and is otherwise inferred from a square token count, with
    /// a leading CLS token when `N - 1` is square.
    pub fn from_container(c: &TensorContainer, prefix: &str) -> Result<Self> {
        let mut heads = Vec::new();
        loop {
            let j = heads.len();
            let name = |m: &str| format!("{prefix}{m}.h{j}");
            if c.get(&name("Q")).is_none() {
                break;
            }
            heads.push(HeadTensors::new(
                matrix(c, &name("Q"))?,
                matrix(c, &name("K"))?,
                matrix(c, &name("V"))?,
            )?);
        }
        if heads.is_empty() {
            return Err(PearlError::Load(format!("missing tensor entry `{prefix}Q.h0`")));
        }
        let n = heads[0].tokens();
        let d = heads[0].head_dim();
        if heads.iter().any(|h| h.tokens() != n || h.head_dim() != d) {
            return Err(PearlError::Dimension("heads disagree on N x d".into()));
        }

        let explicit_cls = c.get("cls_index").map(|e| e.data.first().copied().unwrap_or(-1.0));
        let (patch_grid, cls_index) = match c.get("patch_grid") {
            Some(e) if e.data.len() == 2 => {
                let grid = (e.data[0] as usize, e.data[1] as usize);
                let patches = grid.0 * grid.1;
                let cls = if n == patches + 1 {
                    Some(explicit_cls.filter(|&v| v >= 0.0).map_or(0, |v| v as usize))
                } else if n == patches {
                    None
                } else {
                    return Err(PearlError::Dimension(format!(
                        "{n} tokens do not fit patch grid {grid:?}"
                    )));
                };
                (grid, cls)
            }
            Some(e) => {
                return Err(PearlError::Load(format!(
                    "`patch_grid` must hold 2 values, got shape {:?}",
                    e.shape
                )))
            }
            None => {
                if let Some(s) = n.checked_sub(1).and_then(is_square).filter(|&s| s > 0) {
                    ((s, s), Some(0))
                } else if let Some(s) = is_square(n) {
                    ((s, s), None)
                } else {
                    return Err(PearlError::Load(format!(
                        "cannot infer a square patch grid from {n} tokens; ship `patch_grid`"
                    )));
                }
            }
        };
        if let Some(cls) = cls_index {
            if cls >= n {
                return Err(PearlError::Dimension(format!("cls_index {cls} >= {n} tokens")));
            }
        }

        let width = d * heads.len();
        let out_proj = match c.get("W_o") {
            Some(_) => {
                let w = matrix(c, "W_o")?;
                if w.nrows() != width {
                    return Err(PearlError::Dimension(format!(
                        "W_o has {} rows, heads concatenate to {width}",
                        w.nrows()
                    )));
                }
                let b = match c.get("b_o") {
                    Some(_) => Some(vector(c, "b_o", w.ncols())?),
                    None => None,
                };
                Some((w, b))
            }
            None => None,
        };
        let model_width = out_proj.as_ref().map_or(width, |(w, _)| w.ncols());

        let residual = match c.get(&format!("{prefix}X_in")) {
            Some(_) => Some(matrix(c, &format!("{prefix}X_in"))?),
            None => None,
        };
        let mlp = match c.get("mlp.fc1.weight") {
            Some(_) => {
                let fc1 = matrix(c, "mlp.fc1.weight")?;
                let fc2 = matrix(c, "mlp.fc2.weight")?;
                let norm = layer_norm(c, "ln_2", model_width)?
                    .ok_or_else(|| PearlError::Load("MLP shipped without `ln_2.weight`".into()))?;
                Some(Mlp {
                    fc1_bias: vector(c, "mlp.fc1.bias", fc1.ncols())?,
                    fc2_bias: vector(c, "mlp.fc2.bias", fc2.ncols())?,
                    norm,
                    fc1,
                    fc2,
                })
            }
            None => None,
        };
        let post_norm = layer_norm(c, "ln_post", model_width)?;
        let proj = match c.get("proj") {
            Some(_) => Some(matrix(c, "proj")?),
            None => None,
        };

        Ok(Self {
            heads,
            cls_index,
            patch_grid,
            out_proj,
            tail: BlockTail {
                residual,
                mlp,
                post_norm,
                proj,
            },
        })
    }

    pub fn tokens(&self) -> usize {
        self.heads[0].tokens()
    }

    pub fn head_dim(&self) -> usize {
        self.heads[0].head_dim()
    }

    /// Applies projection and tail to concatenated head outputs.
    pub fn finish(&self, concat: DMatrix<f64>, replay_tail: bool) -> Result<DMatrix<f64>> {
        let mut x = match &self.out_proj {
            Some((w, b)) => {
                let x = concat * w;
                match b {
                    Some(b) => add_row_bias(x, b),
                    None => x,
                }
            }
            None => concat,
        };
        if replay_tail {
            if let Some(res) = &self.tail.residual {
                if res.shape() != x.shape() {
                    return Err(PearlError::Dimension(format!(
                        "residual input {:?} vs block output {:?}",
                        res.shape(),
                        x.shape()
                    )));
                }
                x += res;
            }
            if let Some(mlp) = &self.tail.mlp {
                if mlp.fc1.nrows() != x.ncols() {
                    return Err(PearlError::Dimension("mlp.fc1 width".into()));
                }
                x = mlp.apply(&x);
            }
        }
        if let Some(ln) = &self.tail.post_norm {
            if ln.gamma.len() != x.ncols() {
                return Err(PearlError::Dimension("ln_post width".into()));
            }
            x = ln.apply(&x);
        }
        if let Some(p) = &self.tail.proj {
            if p.nrows() != x.ncols() {
                return Err(PearlError::Dimension("proj rows".into()));
            }
            x *= p;
        }
        Ok(x)
    }

    /// Patch rows of `x` in grid order (CLS removed).
    pub fn patch_rows(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self.cls_index {
            Some(cls) => x.clone().remove_row(cls),
            None => x.clone(),
        }
    }
}

/// Aligns every head of `block`, projects, and scores the patch features.
///
/// Heads run under `exec` and are merged in head order. `config.identity_rotation`
/// skips the solve and uses `R = I`.
pub fn align_block(
    block: &AttentionBlock,
    prototypes: &PrototypeMatrix,
    config: &PipelineConfig,
    exec: Exec,
) -> Result<BlockOutput> {
    let d = block.head_dim();
    let per_head = exec.try_map_range(block.heads.len(), |j| {
        let head = &block.heads[j];
        let pi = token_weights(&head.q, block.cls_index, config.zero_cls_weight);
        let cc = weighted_center(&head.q, &head.k, &pi)?;
        let alignment = if config.identity_rotation {
            AlignmentResult::identity(d)
        } else {
            solve_alignment(&cc, config.solver, config.ns_iters)?
        };
        let y = aligned_attention(head, &alignment.rotation, config.use_key_key, &cc)?;
        Ok::<_, PearlError>((y, HeadReport::from(&alignment)))
    })?;

    let n = block.tokens();
    let mut concat = DMatrix::zeros(n, d * block.heads.len());
    let mut heads = Vec::with_capacity(per_head.len());
    for (j, (y, report)) in per_head.into_iter().enumerate() {
        concat.columns_mut(j * d, d).copy_from(&y);
        heads.push(report);
    }
    let degraded = block.out_proj.is_none();
    if degraded {
        log::warn!("no `W_o` in features; scoring unprojected head concatenation");
    }
    let x = block.finish(concat, config.replay_tail)?;
    let patches = block.patch_rows(&x);
    let (logits, zero_feature_rows) =
        aligned_logits(&patches, prototypes, block.patch_grid.0, block.patch_grid.1)?;
    Ok(BlockOutput {
        logits,
        heads,
        degraded,
        zero_feature_rows,
    })
}
