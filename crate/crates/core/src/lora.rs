//! Multi-scale low-rank adapters: h = W0 x + R (L x ⊙ S).
//!
//! S is a fixed per-coordinate scaling of the low-rank bottleneck; each of
//! the `s` scale factors is repeated `r` (bandwidth) times consecutively.
//! With S all-ones this degenerates to a plain low-rank adapter.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::param::{ParamId, ParamStore};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::DenseMatrix;

/// Initialization std for the down-projection L.
pub const L_INIT_STD: f64 = 0.02;

/// Fixed scaling factors, one per group of `bandwidth` consecutive
/// low-rank coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingVector {
    scales: Vec<f64>,
    bandwidth: usize,
}

impl ScalingVector {
    pub fn new(scales: Vec<f64>, bandwidth: usize) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::config("scaling vector must be non-empty"));
        }
        if bandwidth == 0 {
            return Err(Error::config("bandwidth must be at least 1"));
        }
        if scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::config("every scale factor must be positive"));
        }
        Ok(ScalingVector { scales, bandwidth })
    }

    pub fn all_ones(rank: usize) -> Self {
        ScalingVector {
            scales: vec![1.0; rank],
            bandwidth: 1,
        }
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    /// Total low-rank dimension s*r.
    pub fn rank(&self) -> usize {
        self.scales.len() * self.bandwidth
    }

    /// Each scale repeated `bandwidth` times consecutively.
    pub fn expanded(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rank());
        for &s in &self.scales {
            for _ in 0..self.bandwidth {
                out.push(s);
            }
        }
        out
    }

    pub fn is_all_ones(&self) -> bool {
        self.scales.iter().all(|&s| s == 1.0)
    }
}

/// A low-rank adapter attached next to a frozen weight.
/// R is zero-initialized so a fresh adapter contributes exactly nothing.
#[derive(Debug, Clone)]
pub struct MuscleAdapter {
    pub site: String,
    /// Up-projection, d_out x sr, trainable, zero-init.
    pub up: ParamId,
    /// Down-projection, sr x d_in, trainable, small random init.
    pub down: ParamId,
    /// Expanded scaling vector, length sr, fixed for the run.
    pub scaling: Vec<f64>,
    pub d_in: usize,
    pub d_out: usize,
}

/// Create adapter parameters in the store. L (down) gets std-0.02 random
/// entries, R (up) starts at zero.
pub fn init_adapter(
    store: &mut ParamStore,
    site: &str,
    d_in: usize,
    d_out: usize,
    scaling: &ScalingVector,
    rng: &mut RngStream,
) -> Result<MuscleAdapter> {
    let rank = scaling.rank();
    if rank > d_in.min(d_out) / 2 {
        return Err(Error::config(format!(
            "adapter rank {rank} exceeds min({d_in},{d_out})/2 at site {site}"
        )));
    }
    let down = store.register(
        format!("{site}.adapter.down"),
        DenseMatrix::randn(rank, d_in, L_INIT_STD, rng),
        true,
    );
    let up = store.register(
        format!("{site}.adapter.up"),
        DenseMatrix::zeros(d_out, rank),
        true,
    );
    Ok(MuscleAdapter {
        site: site.to_string(),
        up,
        down,
        scaling: scaling.expanded(),
        d_in,
        d_out,
    })
}

impl MuscleAdapter {
    /// Direct (non-graph) evaluation: h = W0 x + R ((L x) ⊙ S) for a column
    /// vector x.
    pub fn forward(
        &self,
        store: &ParamStore,
        w0: &DenseMatrix,
        x: &DenseMatrix,
    ) -> Result<DenseMatrix> {
        let down = &store.get(self.down).value;
        let up = &store.get(self.up).value;
        let base = w0.matmul(x)?;
        let mut lx = down.matmul(x)?;
        for i in 0..lx.rows() {
            let s = self.scaling[i];
            for v in lx.row_mut(i) {
                *v *= s;
            }
        }
        let delta = up.matmul(&lx)?;
        base.add(&delta)
    }

    /// Merge into a single weight: W0 + R (L with row k scaled by S_k).
    pub fn merge(&self, store: &ParamStore, w0: &DenseMatrix) -> Result<DenseMatrix> {
        let down = &store.get(self.down).value;
        let up = &store.get(self.up).value;
        let mut scaled = down.clone();
        for i in 0..scaled.rows() {
            let s = self.scaling[i];
            for v in scaled.row_mut(i) {
                *v *= s;
            }
        }
        let delta = up.matmul(&scaled)?;
        w0.add(&delta)
    }

    /// Graph contribution for row-major activations X (n x d_in):
    /// ((X L^T) ⊙cols S) R^T, to be added to X W0^T.
    pub fn contribution(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
    ) -> Result<NodeId> {
        let down = tape.param(store, self.down)?;
        let up = tape.param(store, self.up)?;
        let down_t = tape.transpose(down)?;
        let proj = tape.matmul(x, down_t)?;
        let scaled = tape.scale_cols(proj, &self.scaling)?;
        let up_t = tape.transpose(up)?;
        tape.matmul(scaled, up_t)
    }
}
