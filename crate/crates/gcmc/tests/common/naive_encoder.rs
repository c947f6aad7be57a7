//! A scalar per-edge reference implementation of the conv layer, plus a
//! random-scenario generator for comparing it against the vectorized one.
//!
//! The reference walks edges one by one: transform the sender's feature
//! vector with the matching per-level weight block, normalize, accumulate
//! into the receiver, activate. No sparse matrices, no matmuls, no shared
//! code paths beyond the parameter container.

use gcmc::data::{identity_features, FeatureKind, FeatureSet, RatingDataset};
use gcmc::encoder::{
    Accumulation, Activation, EncoderConfig, EncoderParams, NodeMask, Normalization,
};
use gcmc::tensor::{DenseMatrix, Rng};

use super::synthetic;

/// W_r rebuilt by direct summation (ordinal sharing inlined).
fn level_weight(params: &EncoderParams, ordinal: bool, r: usize) -> DenseMatrix {
    let mut w = DenseMatrix::zeros(params.t[0].rows(), params.t[0].cols());
    let lowest = if ordinal { 0 } else { r };
    for t in &params.t[lowest..=r] {
        for (slot, &v) in w.values_mut().iter_mut().zip(t.values()) {
            *slot += v;
        }
    }
    w
}

#[allow(clippy::too_many_arguments)]
pub fn naive_side(
    ds: &RatingDataset,
    features: &FeatureSet,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    mask: Option<&NodeMask>,
    receiver_is_user: bool,
    num_levels: usize,
    degrees: (&[u32], &[u32]),
) -> DenseMatrix {
    let (recv_deg, send_deg) = degrees;
    let n_recv = recv_deg.len();
    let sw = cfg.slice_width(num_levels);
    let (x_send, col_offset) = if receiver_is_user {
        (&features.item_features, features.user_features.cols())
    } else {
        (&features.user_features, 0)
    };
    let mut h = DenseMatrix::zeros(n_recv, cfg.hidden_dim);
    for i in 0..n_recv {
        for r in 0..num_levels {
            let w_r = level_weight(params, cfg.ordinal_sharing, r);
            let mut msg = vec![0.0; sw];
            for t in &ds.triples {
                let (recv, send) = if receiver_is_user {
                    (t.user as usize, t.item as usize)
                } else {
                    (t.item as usize, t.user as usize)
                };
                if recv != i || t.level as usize != r {
                    continue;
                }
                let keep = match mask {
                    None => 1.0,
                    Some(m) => {
                        let kept = if receiver_is_user {
                            m.item_keep[send]
                        } else {
                            m.user_keep[send]
                        };
                        if kept {
                            m.scale()
                        } else {
                            0.0
                        }
                    }
                };
                if keep == 0.0 {
                    continue;
                }
                let norm = match cfg.normalization {
                    Normalization::Left => f64::from(recv_deg[i].max(1)),
                    Normalization::Symmetric => {
                        (f64::from(recv_deg[i].max(1)) * f64::from(send_deg[send].max(1))).sqrt()
                    }
                };
                for (k, slot) in msg.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for c in 0..x_send.cols() {
                        dot += w_r.get(k, col_offset + c) * x_send.get(send, c);
                    }
                    *slot += keep * dot / norm;
                }
            }
            let base = match cfg.accumulation {
                Accumulation::Stack => r * sw,
                Accumulation::Sum => 0,
            };
            for (k, &v) in msg.iter().enumerate() {
                h.set(i, base + k, h.get(i, base + k) + v);
            }
        }
        if cfg.conv_activation == Activation::Relu {
            for k in 0..cfg.hidden_dim {
                if h.get(i, k) < 0.0 {
                    h.set(i, k, 0.0);
                }
            }
        }
    }
    h
}

pub struct Scenario {
    pub ds: RatingDataset,
    pub features: FeatureSet,
    pub cfg: EncoderConfig,
    pub params: EncoderParams,
}

/// A random small graph (at most 20 nodes) with either identity or dense
/// conv features and freely drawn structural settings.
pub fn random_scenario(rng: &mut Rng) -> Scenario {
    let num_users = 2 + rng.below(9);
    let num_items = 2 + rng.below((20 - num_users).min(9) - 1);
    let levels = [2, 3, 5][rng.below(3)];
    let ds = synthetic(num_users, num_items, levels, 0.45, rng);
    let dense_conv_features = rng.bernoulli(0.5);
    let features = if dense_conv_features {
        let d_u = 1 + rng.below(3);
        let d_v = 1 + rng.below(3);
        FeatureSet {
            user_features: DenseMatrix::uniform(num_users, d_u, -1.0, 1.0, rng),
            item_features: DenseMatrix::uniform(num_items, d_v, -1.0, 1.0, rng),
            kind: FeatureKind::SideInfo,
        }
    } else {
        identity_features(&ds)
    };
    let accumulation = if rng.bernoulli(0.5) {
        Accumulation::Stack
    } else {
        Accumulation::Sum
    };
    let hidden = match accumulation {
        Accumulation::Stack => levels * (1 + rng.below(3)),
        Accumulation::Sum => 2 + rng.below(5),
    };
    let cfg = EncoderConfig {
        hidden_dim: hidden,
        embed_dim: 3,
        accumulation,
        normalization: if rng.bernoulli(0.5) {
            Normalization::Left
        } else {
            Normalization::Symmetric
        },
        ordinal_sharing: rng.bernoulli(0.5),
        conv_activation: if rng.bernoulli(0.5) {
            Activation::Relu
        } else {
            Activation::Identity
        },
        node_dropout: 0.0,
        unit_dropout: 0.0,
        side_info: false,
        ..EncoderConfig::default()
    };
    let mut params = EncoderParams::init(
        &cfg,
        levels,
        (features.user_features.cols(), features.item_features.cols()),
        None,
        rng,
    )
    .expect("params");
    // Spread weights out so agreement is tested at meaningful magnitudes.
    for t in &mut params.t {
        t.scale(3.0);
    }
    Scenario {
        ds,
        features,
        cfg,
        params,
    }
}

pub fn assert_close(got: &DenseMatrix, want: &DenseMatrix, what: &str) {
    assert_eq!(
        (got.rows(), got.cols()),
        (want.rows(), want.cols()),
        "{what} shape"
    );
    for r in 0..got.rows() {
        for c in 0..got.cols() {
            let d = (got.get(r, c) - want.get(r, c)).abs();
            assert!(
                d < 1e-10,
                "{what}[{r}][{c}]: {} vs {}",
                got.get(r, c),
                want.get(r, c)
            );
        }
    }
}
