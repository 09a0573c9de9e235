//! Filtering-based frequency decomposition of the model's mapping.
//!
//! A Gaussian kernel over flattened input embeddings acts as a low-pass
//! filter in the frequency domain: convolving outputs with it yields the
//! low-frequency component, and the residual is the high-frequency
//! component. LFR/HFR measure the norm split; re_low/re_high measure
//! per-band distance to the ground-truth mapping.

use crate::error::{Error, Result};
use crate::metrics::one_hot;
use crate::model::{Batch, ClassifierModel};
use crate::poison::TokenSample;
use crate::tensor::DenseMatrix;
use serde::{Deserialize, Serialize};

pub const DEFAULT_DELTA: f64 = 4.0;

/// Denominator floor for relative errors.
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingTag {
    Clean,
    Backdoor,
}

impl std::fmt::Display for MappingTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MappingTag::Clean => write!(f, "clean"),
            MappingTag::Backdoor => write!(f, "backdoor"),
        }
    }
}

/// Inputs to one decomposition: flattened embeddings, logits, and one-hot
/// ground truth for a tagged mapping.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub embeddings: DenseMatrix,
    pub logits: DenseMatrix,
    pub targets: DenseMatrix,
    pub tag: MappingTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencySnapshot {
    pub epoch: usize,
    pub tag: MappingTag,
    pub delta: f64,
    pub lfr: f64,
    pub hfr: f64,
    pub re_low: f64,
    pub re_high: f64,
    pub n: usize,
}

/// G_ij = exp(-||e_i - e_j||^2 / (2 delta)); symmetric with unit diagonal.
pub fn gaussian_kernel(embeddings: &DenseMatrix, delta: f64) -> Result<DenseMatrix> {
    if delta <= 0.0 {
        return Err(Error::config("delta must be positive"));
    }
    let n = embeddings.rows();
    let mut g = DenseMatrix::zeros(n, n);
    for i in 0..n {
        g.set(i, i, 1.0);
        for j in (i + 1)..n {
            let d2 = embeddings.row_sq_dist(i, embeddings, j);
            let v = (-d2 / (2.0 * delta)).exp();
            g.set(i, j, v);
            g.set(j, i, v);
        }
    }
    Ok(g)
}

/// Normalized Gaussian convolution: low_i = (sum_j G_ij m_j) / (sum_j G_ij),
/// high = m - low (exact by construction).
pub fn decompose(m: &DenseMatrix, g: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
    if m.rows() != g.rows() {
        return Err(Error::Dimension {
            op: "decompose",
            lhs_rows: m.rows(),
            lhs_cols: m.cols(),
            rhs_rows: g.rows(),
            rhs_cols: g.cols(),
        });
    }
    let n = m.rows();
    let mut low = DenseMatrix::zeros(n, m.cols());
    for i in 0..n {
        let weights = g.row(i);
        let norm: f64 = weights.iter().sum();
        let row = low.row_mut(i);
        for (j, &w) in weights.iter().enumerate() {
            for (k, r) in row.iter_mut().enumerate() {
                *r += w * m.get(j, k);
            }
        }
        for r in row.iter_mut() {
            *r /= norm;
        }
    }
    let high = m.sub(&low)?;
    Ok((low, high))
}

/// Frobenius-norm fractions of the low and high components. Both are 0 by
/// convention when the full matrix has zero norm.
pub fn freq_ratios(low: &DenseMatrix, high: &DenseMatrix, full: &DenseMatrix) -> (f64, f64) {
    let denom = full.frobenius_norm();
    if denom == 0.0 {
        return (0.0, 0.0);
    }
    (
        low.frobenius_norm() / denom,
        high.frobenius_norm() / denom,
    )
}

/// Per-band Frobenius relative errors between output and ground-truth
/// components, with a small denominator floor.
pub fn relative_errors(
    y_low: &DenseMatrix,
    y_high: &DenseMatrix,
    t_low: &DenseMatrix,
    t_high: &DenseMatrix,
) -> Result<(f64, f64)> {
    let dl = y_low.sub(t_low)?.frobenius_norm();
    let dh = y_high.sub(t_high)?.frobenius_norm();
    Ok((
        dl / t_low.frobenius_norm().max(NORM_FLOOR),
        dh / t_high.frobenius_norm().max(NORM_FLOOR),
    ))
}

/// Evaluate one tagged probe set: kernel, decomposition of logits and
/// targets, frequency ratios, per-band relative errors.
pub fn snapshot_from_set(set: &ProbeSet, epoch: usize, delta: f64) -> Result<FrequencySnapshot> {
    let g = gaussian_kernel(&set.embeddings, delta)?;
    let (y_low, y_high) = decompose(&set.logits, &g)?;
    let (t_low, t_high) = decompose(&set.targets, &g)?;
    let (lfr, hfr) = freq_ratios(&y_low, &y_high, &set.logits);
    let (re_low, re_high) = relative_errors(&y_low, &y_high, &t_low, &t_high)?;
    let snap = FrequencySnapshot {
        epoch,
        tag: set.tag,
        delta,
        lfr,
        hfr,
        re_low,
        re_high,
        n: set.logits.rows(),
    };
    for v in [snap.lfr, snap.hfr, snap.re_low, snap.re_high] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::NonFinite("frequency snapshot"));
        }
    }
    Ok(snap)
}

/// Build a probe set from samples: flattened frozen embeddings, softmax
/// model outputs with gradients discarded, one-hot targets (sample labels
/// for the clean mapping; the labels on backdoor samples already carry the
/// target class).
pub fn build_probe_set(
    model: &ClassifierModel,
    samples: &[TokenSample],
    tag: MappingTag,
) -> Result<ProbeSet> {
    if samples.is_empty() {
        return Err(Error::config("probe sample set is empty"));
    }
    let max_len = model.config.max_len;
    let tokens: Vec<Vec<u32>> = samples.iter().map(|s| s.tokens.clone()).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();

    let mut embeddings = DenseMatrix::zeros(0, 0);
    let mut logits = DenseMatrix::zeros(samples.len(), model.config.num_classes);
    // chunked forward keeps per-tape memory bounded
    let chunk = 32;
    let mut emb_rows: Vec<Vec<f64>> = Vec::with_capacity(samples.len());
    for (ci, (tok_chunk, lab_chunk)) in tokens.chunks(chunk).zip(labels.chunks(chunk)).enumerate()
    {
        let batch = Batch::from_samples(tok_chunk, lab_chunk, max_len)?;
        let e = model.embed(&batch)?;
        for i in 0..e.rows() {
            emb_rows.push(e.row(i).to_vec());
        }
        let l = model.forward(&batch)?;
        for i in 0..l.rows() {
            let row = logits.row_mut(ci * chunk + i);
            row.copy_from_slice(l.row(i));
            // Calibrate the outputs onto the simplex before probing. With a
            // softmax cross-entropy head the common mode of the raw scores
            // receives zero gradient, so the scores stay antisymmetric and
            // their distance to a one-hot target is bounded below (~0.707 at
            // C=2) no matter how well the mapping is fit; the per-band
            // relative errors of Eq. 2 only track convergence if the probed
            // outputs live on the same scale as the targets.
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
    }
    if let Some(first) = emb_rows.first() {
        let cols = first.len();
        embeddings = DenseMatrix::from_fn(emb_rows.len(), cols, |i, j| emb_rows[i][j]);
    }
    let targets = one_hot(&labels, model.config.num_classes)?;
    Ok(ProbeSet {
        embeddings,
        logits,
        targets,
        tag,
    })
}

/// Per-epoch probe over a clean and a backdoor sample set.
pub fn probe(
    model: &ClassifierModel,
    clean_samples: &[TokenSample],
    backdoor_samples: &[TokenSample],
    epoch: usize,
    delta: f64,
) -> Result<(FrequencySnapshot, FrequencySnapshot)> {
    let clean_set = build_probe_set(model, clean_samples, MappingTag::Clean)?;
    let backdoor_set = build_probe_set(model, backdoor_samples, MappingTag::Backdoor)?;
    Ok((
        snapshot_from_set(&clean_set, epoch, delta)?,
        snapshot_from_set(&backdoor_set, epoch, delta)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn kernel_identical_rows_all_ones() {
        let e = DenseMatrix::from_vec(3, 2, vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5]);
        let g = gaussian_kernel(&e, 2.0).unwrap();
        assert!(g.as_slice().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn kernel_hand_value() {
        // scalar rows 0 and 2, delta=2 -> off-diagonal e^{-1}
        let e = DenseMatrix::from_vec(2, 1, vec![0.0, 2.0]);
        let g = gaussian_kernel(&e, 2.0).unwrap();
        assert!((g.get(0, 1) - (-1.0f64).exp()).abs() < 1e-12);
        assert!((g.get(0, 1) - 0.367_879_441).abs() < 1e-6);
    }

    #[test]
    fn kernel_delta_to_zero_kills_off_diagonals() {
        let e = DenseMatrix::from_vec(2, 1, vec![0.0, 1.0]);
        let g = gaussian_kernel(&e, 1e-6).unwrap();
        assert!(g.get(0, 1) < 1e-100);
        assert_eq!(g.get(0, 0), 1.0);
    }

    #[test]
    fn kernel_rejects_nonpositive_delta() {
        let e = DenseMatrix::zeros(2, 2);
        assert!(gaussian_kernel(&e, 0.0).is_err());
        assert!(gaussian_kernel(&e, -1.0).is_err());
    }

    #[test]
    fn decompose_single_point_is_identity() {
        let m = DenseMatrix::from_vec(1, 2, vec![3.0, -1.0]);
        let g = gaussian_kernel(&DenseMatrix::from_vec(1, 1, vec![0.0]), 2.0).unwrap();
        let (low, high) = decompose(&m, &g).unwrap();
        assert_eq!(low, m);
        assert!(high.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn decompose_hand_case_n2() {
        // scalar logits (1, 0), G12 = e^{-1}
        let e = DenseMatrix::from_vec(2, 1, vec![0.0, 2.0]);
        let g = gaussian_kernel(&e, 2.0).unwrap();
        let m = DenseMatrix::from_vec(2, 1, vec![1.0, 0.0]);
        let (low, _high) = decompose(&m, &g).unwrap();
        assert!((low.get(0, 0) - 0.731059).abs() < 1e-6);
        assert!((low.get(1, 0) - 0.268941).abs() < 1e-6);
        // and its frequency ratio: ||(l1, l2)|| / ||(1, 0)|| exactly
        let (lfr, hfr) = freq_ratios(&low, &m.sub(&low).unwrap(), &m);
        let l1 = low.get(0, 0);
        let l2 = low.get(1, 0);
        assert!((lfr - (l1 * l1 + l2 * l2).sqrt()).abs() < 1e-12);
        assert!((lfr - 0.778_958_364).abs() < 1e-6);
        assert!((hfr - 0.380_340_605).abs() < 1e-6);
    }

    #[test]
    fn decompose_uniform_kernel_gives_column_means() {
        let g = DenseMatrix::from_vec(3, 3, vec![1.0; 9]);
        let m = DenseMatrix::from_vec(3, 2, vec![1.0, 0.0, 2.0, 3.0, 3.0, 3.0]);
        let (low, _) = decompose(&m, &g).unwrap();
        for i in 0..3 {
            assert!((low.get(i, 0) - 2.0).abs() < 1e-12);
            assert!((low.get(i, 1) - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reconstruction_is_exact() {
        let mut rng = RngStream::new(14);
        let e = DenseMatrix::randn(10, 4, 1.0, &mut rng);
        let m = DenseMatrix::randn(10, 3, 2.0, &mut rng);
        let g = gaussian_kernel(&e, 4.0).unwrap();
        let (low, high) = decompose(&m, &g).unwrap();
        let rec = low.add(&high).unwrap();
        assert!(rec.max_abs_diff(&m) < 1e-12);
    }

    #[test]
    fn brute_force_oracle_equivalence() {
        // independent double-loop recomputation for N <= 16
        let mut rng = RngStream::new(99);
        for n in [2usize, 5, 16] {
            let e = DenseMatrix::randn(n, 6, 1.0, &mut rng);
            let m = DenseMatrix::randn(n, 2, 1.0, &mut rng);
            let g = gaussian_kernel(&e, 4.0).unwrap();
            let (low, _) = decompose(&m, &g).unwrap();
            for i in 0..n {
                for k in 0..2 {
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for j in 0..n {
                        let mut d2 = 0.0;
                        for c in 0..6 {
                            let d = e.get(i, c) - e.get(j, c);
                            d2 += d * d;
                        }
                        let w = (-d2 / 8.0).exp();
                        num += w * m.get(j, k);
                        den += w;
                    }
                    assert!((low.get(i, k) - num / den).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn low_rows_stay_in_convex_hull() {
        let mut rng = RngStream::new(3);
        let e = DenseMatrix::randn(8, 3, 1.0, &mut rng);
        let m = DenseMatrix::randn(8, 2, 1.0, &mut rng);
        let g = gaussian_kernel(&e, 4.0).unwrap();
        let (low, _) = decompose(&m, &g).unwrap();
        for k in 0..2 {
            let col: Vec<f64> = (0..8).map(|i| m.get(i, k)).collect();
            let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..8 {
                assert!(low.get(i, k) >= min - 1e-12);
                assert!(low.get(i, k) <= max + 1e-12);
            }
        }
    }

    #[test]
    fn ratio_edge_cases() {
        let m = DenseMatrix::from_vec(2, 1, vec![1.0, -1.0]);
        let z = DenseMatrix::zeros(2, 1);
        assert_eq!(freq_ratios(&m, &z, &m), (1.0, 0.0));
        assert_eq!(freq_ratios(&z, &m, &m), (0.0, 1.0));
        assert_eq!(freq_ratios(&z, &z, &z), (0.0, 0.0));
    }

    #[test]
    fn relative_error_edge_cases() {
        let t_low = DenseMatrix::from_vec(2, 1, vec![1.0, 0.5]);
        let t_high = DenseMatrix::from_vec(2, 1, vec![0.2, -0.2]);
        // Y = T -> (0, 0)
        let (rl, rh) = relative_errors(&t_low, &t_high, &t_low, &t_high).unwrap();
        assert_eq!((rl, rh), (0.0, 0.0));
        // Y_low = 2 T_low, Y_high = T_high -> (1, 0)
        let y_low = t_low.scale(2.0);
        let (rl, rh) = relative_errors(&y_low, &t_high, &t_low, &t_high).unwrap();
        assert!((rl - 1.0).abs() < 1e-12);
        assert_eq!(rh, 0.0);
    }

    #[test]
    fn relative_error_matches_direct_recomputation() {
        let mut rng = RngStream::new(8);
        let y_low = DenseMatrix::randn(5, 2, 1.0, &mut rng);
        let y_high = DenseMatrix::randn(5, 2, 1.0, &mut rng);
        let t_low = DenseMatrix::randn(5, 2, 1.0, &mut rng);
        let t_high = DenseMatrix::randn(5, 2, 1.0, &mut rng);
        let (rl, rh) = relative_errors(&y_low, &y_high, &t_low, &t_high).unwrap();
        let direct = |a: &DenseMatrix, b: &DenseMatrix| {
            let mut num = 0.0;
            let mut den = 0.0;
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                num += (x - y) * (x - y);
                den += y * y;
            }
            num.sqrt() / den.sqrt()
        };
        assert!((rl - direct(&y_low, &t_low)).abs() < 1e-12);
        assert!((rh - direct(&y_high, &t_high)).abs() < 1e-12);
    }
}
