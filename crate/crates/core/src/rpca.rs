//! Three-term robust PCA, `X = L + S + E`, solved by ADMM.
//!
//! The objective is `‖L‖_* + τ‖S‖_1 + λ‖E‖_F²` subject to `X = L + S + E`.
//! Each iteration updates the blocks in a fixed order (low-rank by singular
//! value thresholding, sparse by elementwise shrinkage, dense error in closed
//! form), then the multipliers, then grows the penalty `β ← ρβ`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frames::FrameStack;

#[derive(Debug, Error)]
pub enum RpcaError {
    #[error("singular value decomposition did not converge on a {rows}x{cols} matrix")]
    SvdFailure { rows: usize, cols: usize },
    #[error("ADMM stopped after {iterations} iterations with residual {residual:e}")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid observation matrix: {0}")]
    InvalidInput(String),
    #[error("tile {index}: {source}")]
    Tile {
        index: usize,
        #[source]
        source: Box<RpcaError>,
    },
}

/// Elementwise shrinkage `sign(x)·max(|x| − α, 0)`.
pub fn soft_threshold(m: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
    m.map(|x| shrink(x, alpha))
}

#[inline]
fn shrink(x: f64, alpha: f64) -> f64 {
    let mag = x.abs() - alpha;
    if mag > 0.0 {
        mag.copysign(x)
    } else {
        0.0
    }
}

/// Singular value soft-thresholding `U·diag((σᵢ − τ)₊)·Vᵀ`.
///
/// Tall or wide inputs are first reduced by a thin QR factorization so the
/// SVD runs on the small square factor.
pub fn svt(m: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>, RpcaError> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Ok(m.clone());
    }
    if rows >= 2 * cols {
        let qr = m.clone().qr();
        let q = qr.q();
        let r = qr.r();
        Ok(q * svt_square(&r, tau, rows, cols)?)
    } else if cols >= 2 * rows {
        let qr = m.transpose().qr();
        let q = qr.q();
        let r = qr.r();
        Ok((q * svt_square(&r, tau, rows, cols)?).transpose())
    } else {
        svt_square(m, tau, rows, cols)
    }
}

fn svt_square(
    m: &DMatrix<f64>,
    tau: f64,
    rows: usize,
    cols: usize,
) -> Result<DMatrix<f64>, RpcaError> {
    let svd = m
        .clone()
        .try_svd(true, true, f64::EPSILON, 10_000)
        .ok_or(RpcaError::SvdFailure { rows, cols })?;
    let u = svd.u.as_ref().ok_or(RpcaError::SvdFailure { rows, cols })?;
    let v_t = svd
        .v_t
        .as_ref()
        .ok_or(RpcaError::SvdFailure { rows, cols })?;
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for (i, &sigma) in svd.singular_values.iter().enumerate() {
        let shrunk = sigma - tau;
        if shrunk > 0.0 {
            out += (u.column(i) * shrunk) * v_t.row(i);
        }
    }
    Ok(out)
}

/// Largest singular value, from the eigenvalues of the smaller Gram matrix.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let gram = if m.nrows() >= m.ncols() {
        m.transpose() * m
    } else {
        m * m.transpose()
    };
    gram.symmetric_eigenvalues().max().max(0.0).sqrt()
}

pub fn nuclear_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().singular_values().sum()
}

/// `‖L‖_* + τ‖S‖_1 + λ‖E‖_F²`.
pub fn objective(
    l: &DMatrix<f64>,
    s: &DMatrix<f64>,
    e: &DMatrix<f64>,
    tau: f64,
    lambda: f64,
) -> f64 {
    nuclear_norm(l) + tau * s.iter().map(|x| x.abs()).sum::<f64>() + lambda * e.norm_squared()
}

/// Stacked, vectorized frames: column `k` is frame `k` in row-major order.
#[derive(Debug, Clone)]
pub struct ObservationMatrix {
    pub data: DMatrix<f64>,
    pub frame_height: usize,
    pub frame_width: usize,
    pub frame_timestamps: Vec<f64>,
}

impl ObservationMatrix {
    pub fn new(
        data: DMatrix<f64>,
        frame_height: usize,
        frame_width: usize,
        frame_timestamps: Vec<f64>,
    ) -> Result<Self, RpcaError> {
        if data.nrows() != frame_height * frame_width {
            return Err(RpcaError::InvalidInput(format!(
                "{} rows for a {frame_height}x{frame_width} frame",
                data.nrows()
            )));
        }
        if data.ncols() < 2 {
            return Err(RpcaError::InvalidInput("need at least two frames".into()));
        }
        if frame_timestamps.len() != data.ncols() {
            return Err(RpcaError::InvalidInput(
                "one timestamp per frame required".into(),
            ));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(RpcaError::InvalidInput("non-finite pixel value".into()));
        }
        Ok(Self {
            data,
            frame_height,
            frame_width,
            frame_timestamps,
        })
    }

    pub fn from_stack(stack: &FrameStack) -> Result<Self, RpcaError> {
        let n = stack.height * stack.width;
        let data = DMatrix::from_fn(n, stack.len(), |i, k| stack.frames[k][i]);
        Self::new(data, stack.height, stack.width, stack.timestamps.clone())
    }

    /// Reshape column `k` of an `N×K` matrix back into a `height×width` frame.
    pub fn column_as_frame(
        m: &DMatrix<f64>,
        k: usize,
        height: usize,
        width: usize,
    ) -> DMatrix<f64> {
        DMatrix::from_fn(height, width, |r, c| m[(r * width + c, k)])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RpcaParams {
    /// Sparsity weight τ.
    pub tau: f64,
    /// Dense-error weight λ.
    pub lambda: f64,
    /// Penalty growth factor ρ.
    pub rho: f64,
    /// Initial penalty β₀.
    pub beta0: f64,
    pub max_iters: usize,
    /// Stop when `‖X − L − S − E‖_F / ‖X‖_F` falls to this value.
    pub tol: f64,
}

pub const DEFAULT_RHO: f64 = 1.1;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITERS: usize = 300;
/// Frames per batch: one second of video at 30 Hz.
pub const DEFAULT_BATCH_FRAMES: usize = 30;

impl RpcaParams {
    /// `τ = 1/√max(N, K)`, `λ = 100τ`, `β₀ = 1.25/σ₁(X)`. A zero matrix gets
    /// `β₀ = 1.25`.
    pub fn default_for(x: &DMatrix<f64>) -> Self {
        Self::with_sigma1(x.nrows(), x.ncols(), spectral_norm(x))
    }

    pub fn with_sigma1(rows: usize, cols: usize, sigma1: f64) -> Self {
        let tau = 1.0 / (rows.max(cols).max(1) as f64).sqrt();
        let beta0 = if sigma1 > 0.0 { 1.25 / sigma1 } else { 1.25 };
        Self {
            tau,
            lambda: 100.0 * tau,
            rho: DEFAULT_RHO,
            beta0,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
        }
    }

    pub fn validate(&self) -> Result<(), RpcaError> {
        let ok = self.tau > 0.0
            && self.lambda > 0.0
            && self.rho > 1.0
            && self.beta0 > 0.0
            && self.tol > 0.0
            && self.max_iters > 0
            && [self.tau, self.lambda, self.rho, self.beta0, self.tol]
                .iter()
                .all(|x| x.is_finite());
        if ok {
            Ok(())
        } else {
            Err(RpcaError::InvalidParams(format!("{self:?}")))
        }
    }

    /// Penalty used at iteration `k` (zero-based).
    pub fn beta_at(&self, k: usize) -> f64 {
        self.beta0 * self.rho.powi(k as i32)
    }
}

#[derive(Debug, Clone)]
pub struct RpcaResult {
    pub low_rank: DMatrix<f64>,
    pub sparse: DMatrix<f64>,
    pub error: DMatrix<f64>,
    pub multipliers: DMatrix<f64>,
    pub iterations: usize,
    pub final_residual: f64,
    pub converged: bool,
    /// Penalty that the next iteration would use, `β₀ρ^iterations`.
    pub beta: f64,
    pub beta_history: Vec<f64>,
    pub residual_history: Vec<f64>,
}

impl RpcaResult {
    pub fn into_converged(self) -> Result<Self, RpcaError> {
        if self.converged {
            Ok(self)
        } else {
            Err(RpcaError::NotConverged {
                iterations: self.iterations,
                residual: self.final_residual,
            })
        }
    }
}

/// Low-rank block: `svt(X − E + Y/β − S, 1/β)`.
pub fn low_rank_update(
    x: &DMatrix<f64>,
    s: &DMatrix<f64>,
    e: &DMatrix<f64>,
    y: &DMatrix<f64>,
    beta: f64,
) -> Result<DMatrix<f64>, RpcaError> {
    let target = x - e - s + y / beta;
    svt(&target, 1.0 / beta)
}

/// Sparse block: `Π_{τ/β}(X − E + Y/β − L)`.
pub fn sparse_update(
    x: &DMatrix<f64>,
    l: &DMatrix<f64>,
    e: &DMatrix<f64>,
    y: &DMatrix<f64>,
    beta: f64,
    tau: f64,
) -> DMatrix<f64> {
    let mut target = x - e - l + y / beta;
    let alpha = tau / beta;
    target.apply(|v| *v = shrink(*v, alpha));
    target
}

/// Dense-error block: `(X − L − S + Y/β) / (1 + 2λ/β)`.
pub fn error_update(
    x: &DMatrix<f64>,
    l: &DMatrix<f64>,
    s: &DMatrix<f64>,
    y: &DMatrix<f64>,
    beta: f64,
    lambda: f64,
) -> DMatrix<f64> {
    (x - l - s + y / beta) / (1.0 + 2.0 * lambda / beta)
}

pub fn rpca_admm(x: &ObservationMatrix, params: &RpcaParams) -> Result<RpcaResult, RpcaError> {
    decompose(&x.data, params)
}

/// ADMM on a raw `N×K` matrix. Returns the factors even when the tolerance
/// was not reached; see [`RpcaResult::converged`].
pub fn decompose(x: &DMatrix<f64>, params: &RpcaParams) -> Result<RpcaResult, RpcaError> {
    params.validate()?;
    if x.is_empty() {
        return Err(RpcaError::InvalidInput("empty matrix".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(RpcaError::InvalidInput("non-finite entry".into()));
    }
    let (n, k) = x.shape();
    let x_norm = x.norm();
    let scale = if x_norm > 0.0 { x_norm } else { 1.0 };

    let mut l = DMatrix::zeros(n, k);
    let mut s = DMatrix::zeros(n, k);
    let mut e = DMatrix::zeros(n, k);
    let mut y = DMatrix::zeros(n, k);
    let mut beta_history = Vec::new();
    let mut residual_history = Vec::new();
    let mut converged = false;

    for iter in 0..params.max_iters {
        let beta = params.beta_at(iter);
        beta_history.push(beta);
        l = low_rank_update(x, &s, &e, &y, beta)?;
        s = sparse_update(x, &l, &e, &y, beta, params.tau);
        e = error_update(x, &l, &s, &y, beta, params.lambda);
        let gap = x - &l - &s - &e;
        let residual = gap.norm() / scale;
        y += gap * beta;
        residual_history.push(residual);
        if residual <= params.tol {
            converged = true;
            break;
        }
    }

    let iterations = residual_history.len();
    Ok(RpcaResult {
        low_rank: l,
        sparse: s,
        error: e,
        multipliers: y,
        iterations,
        final_residual: *residual_history.last().unwrap_or(&0.0),
        converged,
        beta: params.beta_at(iterations),
        beta_history,
        residual_history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileRect {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Split `height×width` into a `tile_rows×tile_cols` grid. Tiles are
/// `ceil(height/tile_rows)` tall; the last row and column take what is left.
pub fn tile_grid(
    height: usize,
    width: usize,
    tile_rows: usize,
    tile_cols: usize,
) -> Result<Vec<TileRect>, RpcaError> {
    if tile_rows == 0 || tile_cols == 0 || tile_rows > height || tile_cols > width {
        return Err(RpcaError::InvalidParams(format!(
            "{tile_rows}x{tile_cols} tiling of a {height}x{width} frame"
        )));
    }
    let th = height.div_ceil(tile_rows);
    let tw = width.div_ceil(tile_cols);
    let mut tiles = Vec::with_capacity(tile_rows * tile_cols);
    for tr in 0..tile_rows {
        for tc in 0..tile_cols {
            let row0 = tr * th;
            let col0 = tc * tw;
            if row0 >= height || col0 >= width {
                return Err(RpcaError::InvalidParams(format!(
                    "{tile_rows}x{tile_cols} tiling leaves an empty tile in a {height}x{width} frame"
                )));
            }
            tiles.push(TileRect {
                row0,
                col0,
                rows: th.min(height - row0),
                cols: tw.min(width - col0),
            });
        }
    }
    Ok(tiles)
}

#[derive(Debug, Clone, Copy)]
pub struct TileReport {
    pub rect: TileRect,
    pub iterations: usize,
    pub final_residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct TiledDecomposition {
    /// Sparse component per frame, `height×width` each.
    pub sparse_frames: Vec<DMatrix<f64>>,
    pub tiles: Vec<TileReport>,
}

/// Decompose each tile of the stack independently with the same parameters
/// and reassemble the sparse components. The output does not depend on the
/// order in which tiles are processed.
pub fn rpca_tiled(
    stack: &FrameStack,
    tile_rows: usize,
    tile_cols: usize,
    params: &RpcaParams,
) -> Result<TiledDecomposition, RpcaError> {
    params.validate()?;
    let k = stack.len();
    if k < 2 {
        return Err(RpcaError::InvalidInput("need at least two frames".into()));
    }
    let tiles = tile_grid(stack.height, stack.width, tile_rows, tile_cols)?;

    let run = |(index, rect): (usize, &TileRect)| -> Result<(DMatrix<f64>, TileReport), RpcaError> {
        let x = DMatrix::from_fn(rect.rows * rect.cols, k, |i, f| {
            let (r, c) = (rect.row0 + i / rect.cols, rect.col0 + i % rect.cols);
            stack.frames[f][r * stack.width + c]
        });
        let res = decompose(&x, params).map_err(|e| RpcaError::Tile {
            index,
            source: Box::new(e),
        })?;
        let report = TileReport {
            rect: *rect,
            iterations: res.iterations,
            final_residual: res.final_residual,
            converged: res.converged,
        };
        Ok((res.sparse, report))
    };

    #[cfg(feature = "parallel")]
    let outcomes: Vec<_> = {
        use rayon::prelude::*;
        tiles.par_iter().enumerate().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let outcomes: Vec<_> = tiles.iter().enumerate().map(run).collect();

    let mut sparse_frames = vec![DMatrix::zeros(stack.height, stack.width); k];
    let mut reports = Vec::with_capacity(tiles.len());
    for outcome in outcomes {
        let (sparse, report) = outcome?;
        let rect = report.rect;
        for (f, frame) in sparse_frames.iter_mut().enumerate() {
            for i in 0..rect.rows * rect.cols {
                frame[(rect.row0 + i / rect.cols, rect.col0 + i % rect.cols)] = sparse[(i, f)];
            }
        }
        reports.push(report);
    }
    Ok(TiledDecomposition {
        sparse_frames,
        tiles: reports,
    })
}
