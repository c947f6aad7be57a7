//! Bilinear softmax decoder: per-edge logits u_i^T Q_r v_j over rating
//! levels, with each Q_r a learned combination of shared basis matrices,
//! softmaxed into level probabilities and reduced to an expected rating.

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt, row_softmax, DenseMatrix, Rng};

/// Trainable decoder weights: `p` holds the n_b basis matrices (E x E),
/// `a` the R x n_b per-level combination coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub p: Vec<DenseMatrix>,
    pub a: DenseMatrix,
}

impl DecoderParams {
    pub fn init(embed_dim: usize, num_levels: usize, n_b: usize, rng: &mut Rng) -> Result<Self> {
        if n_b == 0 || n_b > num_levels {
            return Err(Error::InvalidConfig(format!(
                "basis count must be in 1..={num_levels}, got {n_b}"
            )));
        }
        let glorot = |rows: usize, cols: usize, rng: &mut Rng| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            DenseMatrix::uniform(rows, cols, -bound, bound, rng)
        };
        Ok(DecoderParams {
            p: (0..n_b).map(|_| glorot(embed_dim, embed_dim, rng)).collect(),
            a: glorot(num_levels, n_b, rng),
        })
    }

    pub fn num_basis(&self) -> usize {
        self.p.len()
    }

    pub fn num_levels(&self) -> usize {
        self.a.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.p.first().map_or(0, DenseMatrix::rows)
    }
}

/// Effective per-level matrices Q_r = sum_s a_rs P_s.
pub fn decoder_weights(params: &DecoderParams) -> Vec<DenseMatrix> {
    let e = params.embed_dim();
    (0..params.num_levels())
        .map(|r| {
            let mut q = DenseMatrix::zeros(e, e);
            for (s, p) in params.p.iter().enumerate() {
                let coeff = params.a.get(r, s);
                for (qv, &pv) in q.values_mut().iter_mut().zip(p.values()) {
                    *qv += coeff * pv;
                }
            }
            q
        })
        .collect()
}

/// Multiply-accumulate counter for decode-cost assertions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DecodeStats {
    pub macs: u64,
}

fn check_edges(u: &DenseMatrix, v: &DenseMatrix, edges: &[(u32, u32)]) -> Result<()> {
    for &(i, j) in edges {
        if i as usize >= u.rows() || j as usize >= v.rows() {
            return Err(Error::shape(
                "rating_logits",
                format!(
                    "edge ({i}, {j}) out of range for {} users, {} items",
                    u.rows(),
                    v.rows()
                ),
            ));
        }
    }
    Ok(())
}

/// Per-edge level logits, one row per requested (user, item) pair.
///
/// Cost scales with the number of requested edges, never with the full
/// rating matrix: small edge lists use gathered per-edge bilinear forms;
/// lists with at least as many edges as items switch to precomputing
/// V Q_r^T once per level. The strategy is chosen once per call.
pub fn rating_logits(
    u: &DenseMatrix,
    v: &DenseMatrix,
    edges: &[(u32, u32)],
    q_list: &[DenseMatrix],
) -> Result<DenseMatrix> {
    rating_logits_counted(u, v, edges, q_list, &mut DecodeStats::default())
}

/// [`rating_logits`] with multiply-accumulate accounting.
pub fn rating_logits_counted(
    u: &DenseMatrix,
    v: &DenseMatrix,
    edges: &[(u32, u32)],
    q_list: &[DenseMatrix],
    stats: &mut DecodeStats,
) -> Result<DenseMatrix> {
    let e_dim = u.cols();
    if v.cols() != e_dim {
        return Err(Error::shape(
            "rating_logits",
            format!("embedding widths differ: {} vs {}", e_dim, v.cols()),
        ));
    }
    for q in q_list {
        if q.rows() != e_dim || q.cols() != e_dim {
            return Err(Error::shape(
                "rating_logits",
                format!("{}x{} level weight vs embed dim {e_dim}", q.rows(), q.cols()),
            ));
        }
    }
    check_edges(u, v, edges)?;

    let num_levels = q_list.len();
    let mut logits = DenseMatrix::zeros(edges.len(), num_levels);
    if edges.len() >= v.rows() {
        for (r, q) in q_list.iter().enumerate() {
            let vq = matmul_nt(v, q)?;
            stats.macs += (v.rows() * e_dim * e_dim) as u64;
            for (row, &(i, j)) in edges.iter().enumerate() {
                let dot: f64 = u
                    .row(i as usize)
                    .iter()
                    .zip(vq.row(j as usize))
                    .map(|(&a, &b)| a * b)
                    .sum();
                logits.set(row, r, dot);
                stats.macs += e_dim as u64;
            }
        }
    } else {
        let mut qv = vec![0.0; e_dim];
        for (row, &(i, j)) in edges.iter().enumerate() {
            let u_row = u.row(i as usize);
            let v_row = v.row(j as usize);
            for (r, q) in q_list.iter().enumerate() {
                for (k, slot) in qv.iter_mut().enumerate() {
                    *slot = q
                        .row(k)
                        .iter()
                        .zip(v_row)
                        .map(|(&a, &b)| a * b)
                        .sum();
                }
                stats.macs += (e_dim * e_dim) as u64;
                let dot: f64 = u_row.iter().zip(&qv).map(|(&a, &b)| a * b).sum();
                logits.set(row, r, dot);
                stats.macs += e_dim as u64;
            }
        }
    }
    Ok(logits)
}

/// Per-edge decoded outcome: the level probability vector and its
/// expectation in rating units.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgePrediction {
    pub probabilities: Vec<f64>,
    pub expected_rating: f64,
}

/// Softmaxes each logit row and reduces it to an expected rating over
/// `level_values`. The expectation is a convex combination, so it always
/// lies within the level value range.
pub fn predict(logits: &DenseMatrix, level_values: &[f64]) -> Result<Vec<EdgePrediction>> {
    if logits.cols() != level_values.len() {
        return Err(Error::shape(
            "predict",
            format!(
                "{} logit columns vs {} level values",
                logits.cols(),
                level_values.len()
            ),
        ));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("logits passed to predict".into()));
    }
    let probs = row_softmax(logits);
    Ok((0..probs.rows())
        .map(|row| {
            let probabilities = probs.row(row).to_vec();
            let expected_rating = probabilities
                .iter()
                .zip(level_values)
                .map(|(&p, &v)| p * v)
                .sum();
            EdgePrediction {
                probabilities,
                expected_rating,
            }
        })
        .collect())
}
