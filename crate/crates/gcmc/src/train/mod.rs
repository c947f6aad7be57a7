//! Loss, hand-derived reverse-mode gradients, and the training loop.
//!
//! Backpropagation is written out for this fixed architecture rather than
//! routed through an autodiff engine: the computation graph is small and
//! static, and explicit adjoints keep the finite-difference oracle
//! meaningful. Each `backward` step mirrors `forward` exactly, reusing the
//! saved activations in `ForwardTrace`.

mod adam;
mod ema;
mod minibatch;

pub use adam::{adam_step, AdamState};
pub use ema::{ema_update, EmaParams};
pub use minibatch::{epoch_minibatches, sample_minibatch, Minibatch};

use std::time::Instant;

use crate::data::{
    build_rating_graph, build_side_features, identity_features, FeatureKind, FeatureSet,
    RatingDataset, RatingGraph, SplitSpec,
};
use crate::decoder::DecoderParams;
use crate::encoder::{
    conv_forward, dense_forward, gather_rows, node_dropout_mask, recv_scales, send_scales,
    Accumulation, BatchRows, ConvTrace, DenseTrace, EncoderConfig, EncoderParams, NodeMask,
    SideChannelParams,
};
use crate::error::{Error, Result};
use crate::eval;
use crate::metrics::{BestVal, EpochRecord, FinalSummary, MetricsReport};
use crate::tensor::{
    derive_seed, matmul, matmul_nt, matmul_tn, row_softmax, spmm_transpose_accumulate,
    DenseMatrix, DropoutMask, Rng,
};

/// Probabilities are clamped here before the log in the loss; gradients
/// treat a clamped probability as constant.
pub const PROB_FLOOR: f64 = 1e-12;

const INIT_STREAM: u64 = 0x494e4954;
const DROPOUT_STREAM: u64 = 0x44524f50;
const BATCH_STREAM: u64 = 0x42415443;

/// All trainable tensors of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

impl ModelParams {
    pub fn init(
        encoder_cfg: &EncoderConfig,
        n_basis: usize,
        num_levels: usize,
        feature_dims: (usize, usize),
        side_dims: Option<(usize, usize)>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let encoder = EncoderParams::init(encoder_cfg, num_levels, feature_dims, side_dims, rng)?;
        let decoder = DecoderParams::init(encoder_cfg.embed_dim, num_levels, n_basis, rng)?;
        Ok(ModelParams { encoder, decoder })
    }

    /// All tensors in a fixed order; [`Self::tensor_names`] aligns with it.
    pub fn tensors(&self) -> Vec<&DenseMatrix> {
        let mut out: Vec<&DenseMatrix> = Vec::new();
        out.extend(self.encoder.t.iter());
        out.push(&self.encoder.w_user);
        if let Some(w) = &self.encoder.w_item {
            out.push(w);
        }
        for side in [&self.encoder.side_user, &self.encoder.side_item].into_iter().flatten() {
            out.push(&side.w1);
            out.push(&side.w2);
            out.push(&side.b);
        }
        out.extend(self.decoder.p.iter());
        out.push(&self.decoder.a);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut out: Vec<&mut DenseMatrix> = Vec::new();
        out.extend(self.encoder.t.iter_mut());
        out.push(&mut self.encoder.w_user);
        if let Some(w) = &mut self.encoder.w_item {
            out.push(w);
        }
        for side in [&mut self.encoder.side_user, &mut self.encoder.side_item]
            .into_iter()
            .flatten()
        {
            out.push(&mut side.w1);
            out.push(&mut side.w2);
            out.push(&mut side.b);
        }
        out.extend(self.decoder.p.iter_mut());
        out.push(&mut self.decoder.a);
        out
    }

    /// Stable tensor names, aligned with [`Self::tensors`]; used for
    /// checkpoints and diagnostics.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in 0..self.encoder.t.len() {
            out.push(format!("enc.t.{s}"));
        }
        out.push("enc.w".into());
        if self.encoder.w_item.is_some() {
            out.push("enc.wi".into());
        }
        for (prefix, side) in [("enc.su", &self.encoder.side_user), ("enc.sv", &self.encoder.side_item)] {
            if side.is_some() {
                out.push(format!("{prefix}.w1"));
                out.push(format!("{prefix}.w2"));
                out.push(format!("{prefix}.b"));
            }
        }
        for s in 0..self.decoder.p.len() {
            out.push(format!("dec.p.{s}"));
        }
        out.push("dec.a".into());
        out
    }

    /// Same layout, all values zero. Used for gradients and moments.
    pub fn zeros_like(&self) -> ModelParams {
        let mut copy = self.clone();
        for t in copy.tensors_mut() {
            t.values_mut().fill(0.0);
        }
        copy
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Full training recipe on top of the encoder hyperparameters.
/// `batch_size` 0 means full-batch; `eval_every` 0 disables mid-training
/// validation.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub n_basis: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub ema_decay: f64,
    pub eval_every: usize,
    pub train_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            encoder: EncoderConfig::default(),
            n_basis: 2,
            epochs: 1000,
            batch_size: 0,
            learning_rate: 0.01,
            ema_decay: 0.995,
            eval_every: 10,
            train_seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_levels: usize, train_edges: usize) -> Result<()> {
        self.encoder.validate(num_levels)?;
        if self.n_basis == 0 || self.n_basis > num_levels {
            return Err(Error::InvalidConfig(format!(
                "n_basis must be in 1..={num_levels}, got {}",
                self.n_basis
            )));
        }
        if self.batch_size > train_edges {
            return Err(Error::InvalidConfig(format!(
                "batch_size {} exceeds the {train_edges} training edges",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidConfig(format!(
                "ema_decay must be in [0, 1], got {}",
                self.ema_decay
            )));
        }
        Ok(())
    }
}

/// One training step's edge set, with per-edge row positions into the
/// (possibly restricted) embedding matrices.
#[derive(Clone, Debug)]
pub(crate) struct BatchData {
    pub edge_ids: Vec<usize>,
    pub rows: Option<BatchRows>,
    pub edge_user_row: Vec<usize>,
    pub edge_item_row: Vec<usize>,
    pub targets: Vec<u8>,
}

impl BatchData {
    pub fn full(graph: &RatingGraph) -> BatchData {
        let edge_ids: Vec<usize> = (0..graph.edge_count()).collect();
        BatchData {
            edge_user_row: graph.edges.iter().map(|e| e.user as usize).collect(),
            edge_item_row: graph.edges.iter().map(|e| e.item as usize).collect(),
            targets: graph.edges.iter().map(|e| e.level).collect(),
            edge_ids,
            rows: None,
        }
    }

    pub fn from_minibatch(graph: &RatingGraph, mb: Minibatch) -> BatchData {
        let lookup = |list: &[usize], v: usize| {
            list.binary_search(&v).expect("edge endpoint in induced rows")
        };
        let edge_user_row = mb
            .edge_ids
            .iter()
            .map(|&e| lookup(&mb.rows.users, graph.edges[e].user as usize))
            .collect();
        let edge_item_row = mb
            .edge_ids
            .iter()
            .map(|&e| lookup(&mb.rows.items, graph.edges[e].item as usize))
            .collect();
        let targets = mb.edge_ids.iter().map(|&e| graph.edges[e].level).collect();
        BatchData {
            edge_ids: mb.edge_ids,
            rows: Some(mb.rows),
            edge_user_row,
            edge_item_row,
            targets,
        }
    }
}

/// Dropout draws for one training step. Unit masks are sized to the rows
/// the step computes, so restricted steps need restricted masks.
#[derive(Clone, Debug)]
pub struct Masks {
    pub node: NodeMask,
    pub unit_u: DropoutMask,
    pub unit_v: DropoutMask,
}

impl Masks {
    /// Everything kept: the inference behavior expressed as masks.
    pub fn none(graph: &RatingGraph, hidden_dim: usize, rows: Option<&BatchRows>) -> Masks {
        let rows_u = rows.map_or(graph.num_users, |r| r.users.len());
        let rows_v = rows.map_or(graph.num_items, |r| r.items.len());
        Masks {
            node: NodeMask::new(
                vec![true; graph.num_users],
                vec![true; graph.num_items],
                0.0,
            )
            .expect("zero dropout is valid"),
            unit_u: DropoutMask::all_keep(rows_u, hidden_dim),
            unit_v: DropoutMask::all_keep(rows_v, hidden_dim),
        }
    }
}

/// Draws one step's masks in the fixed stream order: node mask, then the
/// user-side unit mask, then the item-side unit mask.
pub fn sample_masks(
    graph: &RatingGraph,
    cfg: &EncoderConfig,
    rows: Option<&BatchRows>,
    rng: &mut Rng,
) -> Result<Masks> {
    let node = node_dropout_mask(graph, cfg.node_dropout, rng)?;
    let rows_u = rows.map_or(graph.num_users, |r| r.users.len());
    let rows_v = rows.map_or(graph.num_items, |r| r.items.len());
    let unit_u = DropoutMask::sample(rows_u, cfg.hidden_dim, cfg.unit_dropout, rng)?;
    let unit_v = DropoutMask::sample(rows_v, cfg.hidden_dim, cfg.unit_dropout, rng)?;
    Ok(Masks {
        node,
        unit_u,
        unit_v,
    })
}

/// Saved activations of one training forward pass, consumed by `backward`.
#[derive(Clone, Debug)]
pub(crate) struct ForwardTrace {
    pub conv: ConvTrace,
    pub hu_dropped: DenseMatrix,
    pub hv_dropped: DenseMatrix,
    pub dense: DenseTrace,
    /// Per basis s: V P_s^T (row j = P_s v_j).
    pub vp: Vec<DenseMatrix>,
    /// Per basis s: U P_s (row i = u_i^T P_s).
    pub up: Vec<DenseMatrix>,
    /// Per-edge basis activations B[e][s] = u_i^T P_s v_j.
    pub b: DenseMatrix,
    pub logits: DenseMatrix,
    pub probs: DenseMatrix,
    pub loss: f64,
}

/// Masked negative log likelihood: the sum of -log p(true level) over the
/// given edges. Only observed edges enter by construction, since the rows
/// of `probabilities` are decoded observed edges.
pub fn nll_loss(probabilities: &DenseMatrix, target_levels: &[u8]) -> Result<f64> {
    if probabilities.rows() != target_levels.len() {
        return Err(Error::shape(
            "nll_loss",
            format!(
                "{} probability rows vs {} targets",
                probabilities.rows(),
                target_levels.len()
            ),
        ));
    }
    let mut loss = 0.0;
    for (e, &t) in target_levels.iter().enumerate() {
        if t as usize >= probabilities.cols() {
            return Err(Error::shape(
                "nll_loss",
                format!("target level {t} vs {} levels", probabilities.cols()),
            ));
        }
        loss -= probabilities.get(e, t as usize).max(PROB_FLOOR).ln();
    }
    Ok(loss)
}

fn axpy(c: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += c * xi;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub(crate) fn forward(
    graph: &RatingGraph,
    features: &FeatureSet,
    side: Option<&FeatureSet>,
    params: &ModelParams,
    cfg: &EncoderConfig,
    batch: &BatchData,
    masks: &Masks,
) -> Result<ForwardTrace> {
    let conv = conv_forward(
        graph,
        features,
        &params.encoder,
        cfg,
        Some(&masks.node),
        batch.rows.as_ref(),
    )?;
    let hu_dropped = masks.unit_u.apply(&conv.h_u)?;
    let hv_dropped = masks.unit_v.apply(&conv.h_v)?;
    let dense = dense_forward(
        &hu_dropped,
        &hv_dropped,
        side,
        &params.encoder,
        cfg,
        batch.rows.as_ref(),
    )?;

    let n_b = params.decoder.num_basis();
    let mut vp = Vec::with_capacity(n_b);
    let mut up = Vec::with_capacity(n_b);
    for p_s in &params.decoder.p {
        vp.push(matmul_nt(&dense.v, p_s)?);
        up.push(matmul(&dense.u, p_s)?);
    }

    let mut b = DenseMatrix::zeros(batch.edge_ids.len(), n_b);
    for e in 0..batch.edge_ids.len() {
        let u_row = dense.u.row(batch.edge_user_row[e]);
        for (s, vp_s) in vp.iter().enumerate() {
            b.set(e, s, dot(u_row, vp_s.row(batch.edge_item_row[e])));
        }
    }

    let logits = matmul_nt(&b, &params.decoder.a)?;
    let probs = row_softmax(&logits);
    let loss = nll_loss(&probs, &batch.targets)?;
    Ok(ForwardTrace {
        conv,
        hu_dropped,
        hv_dropped,
        dense,
        vp,
        up,
        b,
        logits,
        probs,
        loss,
    })
}

/// Extracts the level-`r` adjoint block of dHpre with receiver scaling
/// folded back in (the adjoint of `accumulate_level`).
fn extract_scaled_slice(
    d_hpre: &DenseMatrix,
    level: usize,
    sw: usize,
    accumulation: Accumulation,
    rows: Option<&[usize]>,
    recv_scale: &[f64],
) -> DenseMatrix {
    let offset = match accumulation {
        Accumulation::Stack => level * sw,
        Accumulation::Sum => 0,
    };
    let mut out = DenseMatrix::zeros(d_hpre.rows(), sw);
    for k in 0..d_hpre.rows() {
        let gi = rows.map_or(k, |rs| rs[k]);
        let s = recv_scale[gi];
        for (o, &v) in out.row_mut(k).iter_mut().zip(&d_hpre.row(k)[offset..offset + sw]) {
            *o = s * v;
        }
    }
    out
}

/// Adjoint of the per-side dense weight application to sender features:
/// dW block = dG^T X (plain transpose for one-hot identity features).
fn sender_weight_grad(
    d_g: &DenseMatrix,
    x: &DenseMatrix,
    kind: FeatureKind,
) -> Result<DenseMatrix> {
    match kind {
        FeatureKind::IdentityOnehot => Ok(d_g.transpose()),
        FeatureKind::SideInfo => matmul_tn(d_g, x),
    }
}

fn side_backward(
    d_pre: &DenseMatrix,
    sp: &SideChannelParams,
    trace: &crate::encoder::SideTrace,
    x_f: &DenseMatrix,
    grads: &mut SideChannelParams,
) -> Result<()> {
    grads.w2.add_assign(&matmul_tn(d_pre, &trace.f)?)?;
    let mut d_pre_f = matmul(d_pre, &sp.w2)?;
    crate::encoder::Activation::Relu.backprop_in_place(&mut d_pre_f, &trace.pre_f);
    grads.w1.add_assign(&matmul_tn(&d_pre_f, x_f)?)?;
    for r in 0..d_pre_f.rows() {
        for (bslot, &v) in grads.b.row_mut(0).iter_mut().zip(d_pre_f.row(r)) {
            *bslot += v;
        }
    }
    Ok(())
}

pub(crate) fn backward(
    trace: &ForwardTrace,
    graph: &RatingGraph,
    features: &FeatureSet,
    side: Option<&FeatureSet>,
    params: &ModelParams,
    cfg: &EncoderConfig,
    batch: &BatchData,
    masks: &Masks,
) -> Result<ModelParams> {
    let ne = batch.edge_ids.len();
    let num_levels = graph.num_levels();
    let n_b = params.decoder.num_basis();
    let rows_u = batch.rows.as_ref().map_or(graph.num_users, |r| r.users.len());
    let rows_v = batch.rows.as_ref().map_or(graph.num_items, |r| r.items.len());
    if trace.logits.rows() != ne
        || trace.logits.cols() != num_levels
        || trace.b.cols() != n_b
        || trace.dense.u.rows() != rows_u
        || trace.dense.v.rows() != rows_v
    {
        return Err(Error::shape(
            "backward",
            "trace does not match the graph/batch it is differentiated against",
        ));
    }

    let mut grads = params.zeros_like();

    // Softmax + NLL adjoint; rows whose true-level probability hit the
    // clamp are flat (the loss reads a constant there).
    let mut d_logit = trace.probs.clone();
    for (e, &t) in batch.targets.iter().enumerate() {
        let p_t = trace.probs.get(e, t as usize);
        if p_t < PROB_FLOOR {
            for r in 0..num_levels {
                d_logit.set(e, r, 0.0);
            }
        } else {
            d_logit.set(e, t as usize, p_t - 1.0);
        }
    }

    grads.decoder.a = matmul_tn(&d_logit, &trace.b)?;
    let d_b = matmul(&d_logit, &params.decoder.a)?;

    let e_dim = cfg.embed_dim;
    let mut d_u = DenseMatrix::zeros(rows_u, e_dim);
    let mut d_v = DenseMatrix::zeros(rows_v, e_dim);
    let mut cu: Vec<DenseMatrix> = (0..n_b)
        .map(|_| DenseMatrix::zeros(rows_u, e_dim))
        .collect();
    for e in 0..ne {
        let iu = batch.edge_user_row[e];
        let iv = batch.edge_item_row[e];
        for s in 0..n_b {
            let c = d_b.get(e, s);
            if c == 0.0 {
                continue;
            }
            axpy(c, trace.vp[s].row(iv), d_u.row_mut(iu));
            axpy(c, trace.up[s].row(iu), d_v.row_mut(iv));
            axpy(c, trace.dense.v.row(iv), cu[s].row_mut(iu));
        }
    }
    for s in 0..n_b {
        grads.decoder.p[s] = matmul_tn(&trace.dense.u, &cu[s])?;
    }

    // Dense layer.
    let mut d_pre_u = d_u;
    cfg.dense_activation.backprop_in_place(&mut d_pre_u, &trace.dense.pre_u);
    let mut d_pre_v = d_v;
    cfg.dense_activation.backprop_in_place(&mut d_pre_v, &trace.dense.pre_v);

    let dw_from_u = matmul_tn(&d_pre_u, &trace.hu_dropped)?;
    let dw_from_v = matmul_tn(&d_pre_v, &trace.hv_dropped)?;
    grads.encoder.w_user = dw_from_u;
    match &mut grads.encoder.w_item {
        Some(wi) => *wi = dw_from_v,
        None => grads.encoder.w_user.add_assign(&dw_from_v)?,
    }

    let d_hu_tilde = matmul(&d_pre_u, &params.encoder.w_user)?;
    let d_hv_tilde = matmul(&d_pre_v, params.encoder.item_dense())?;

    if let Some(fs) = side {
        let (sp_u, sp_v) = match (&params.encoder.side_user, &params.encoder.side_item) {
            (Some(u), Some(v)) => (u, v),
            _ => {
                return Err(Error::InvalidConfig(
                    "side_info is on but side-channel parameters are absent".into(),
                ))
            }
        };
        let (st_u, st_v) = match (&trace.dense.side_u, &trace.dense.side_v) {
            (Some(u), Some(v)) => (u, v),
            _ => return Err(Error::shape("backward", "trace lacks side activations")),
        };
        let x_u = match &batch.rows {
            None => fs.user_features.clone(),
            Some(rw) => gather_rows(&fs.user_features, &rw.users),
        };
        let x_v = match &batch.rows {
            None => fs.item_features.clone(),
            Some(rw) => gather_rows(&fs.item_features, &rw.items),
        };
        side_backward(&d_pre_u, sp_u, st_u, &x_u, grads.encoder.side_user.as_mut().unwrap())?;
        side_backward(&d_pre_v, sp_v, st_v, &x_v, grads.encoder.side_item.as_mut().unwrap())?;
    }

    // Unit dropout and conv activation adjoints.
    let d_hu = masks.unit_u.apply(&d_hu_tilde)?;
    let d_hv = masks.unit_v.apply(&d_hv_tilde)?;
    let mut d_hpre_u = d_hu;
    cfg.conv_activation.backprop_in_place(&mut d_hpre_u, &trace.conv.hpre_u);
    let mut d_hpre_v = d_hv;
    cfg.conv_activation.backprop_in_place(&mut d_hpre_v, &trace.conv.hpre_v);

    // Message passing adjoint, per level.
    let sw = cfg.slice_width(num_levels);
    let d_uf = features.user_features.cols();
    let d_vf = features.item_features.cols();
    let send_u = send_scales(
        &graph.user_degrees,
        Some((masks.node.user_keep.as_slice(), masks.node.scale())),
        cfg.normalization,
    );
    let send_v = send_scales(
        &graph.item_degrees,
        Some((masks.node.item_keep.as_slice(), masks.node.scale())),
        cfg.normalization,
    );
    let recv_u = recv_scales(&graph.user_degrees, cfg.normalization);
    let recv_v = recv_scales(&graph.item_degrees, cfg.normalization);
    let row_users = batch.rows.as_ref().map(|r| r.users.as_slice());
    let row_items = batch.rows.as_ref().map(|r| r.items.as_slice());

    let mut dw_levels: Vec<DenseMatrix> = Vec::with_capacity(num_levels);
    for r in 0..num_levels {
        if graph.adj[r].nnz() == 0 {
            dw_levels.push(DenseMatrix::zeros(sw, d_uf + d_vf));
            continue;
        }
        // User-receiving direction: item senders.
        let dz_u = extract_scaled_slice(&d_hpre_u, r, sw, cfg.accumulation, row_users, &recv_u);
        let mut d_g_v = DenseMatrix::zeros(graph.num_items, sw);
        spmm_transpose_accumulate(&graph.adj[r], &dz_u, row_users, &mut d_g_v)?;
        for (j, &s) in send_v.iter().enumerate() {
            d_g_v.scale_row(j, s);
        }
        let dw_v_block = sender_weight_grad(&d_g_v, &features.item_features, features.kind)?;

        // Item-receiving direction: user senders.
        let dz_v = extract_scaled_slice(&d_hpre_v, r, sw, cfg.accumulation, row_items, &recv_v);
        let mut d_g_u = DenseMatrix::zeros(graph.num_users, sw);
        spmm_transpose_accumulate(&graph.adj_t[r], &dz_v, row_items, &mut d_g_u)?;
        for (j, &s) in send_u.iter().enumerate() {
            d_g_u.scale_row(j, s);
        }
        let dw_u_block = sender_weight_grad(&d_g_u, &features.user_features, features.kind)?;

        let mut dw_r = DenseMatrix::zeros(sw, d_uf + d_vf);
        for k in 0..sw {
            dw_r.row_mut(k)[..d_uf].copy_from_slice(dw_u_block.row(k));
            dw_r.row_mut(k)[d_uf..].copy_from_slice(dw_v_block.row(k));
        }
        dw_levels.push(dw_r);
    }

    if cfg.ordinal_sharing {
        // W_r = sum_{s<=r} T_s, so dT_s = sum_{r>=s} dW_r.
        let mut acc = DenseMatrix::zeros(sw, d_uf + d_vf);
        for r in (0..num_levels).rev() {
            acc.add_assign(&dw_levels[r])?;
            grads.encoder.t[r] = acc.clone();
        }
    } else {
        grads.encoder.t = dw_levels;
    }

    Ok(grads)
}

/// The exact loss and parameter gradients of one training step over
/// `edge_ids` under fixed masks. `restrict_rows` routes the step through
/// the mini-batch row-restricted path (masks must then be sized to the
/// induced rows). This is the computation `train` repeats; it is public
/// so gradients can be checked against finite differences.
pub fn loss_and_gradients(
    graph: &RatingGraph,
    features: &FeatureSet,
    side: Option<&FeatureSet>,
    params: &ModelParams,
    cfg: &EncoderConfig,
    edge_ids: &[usize],
    masks: &Masks,
    restrict_rows: bool,
) -> Result<(f64, ModelParams)> {
    for &e in edge_ids {
        if e >= graph.edge_count() {
            return Err(Error::InvalidConfig(format!(
                "edge index {e} out of range for {} training edges",
                graph.edge_count()
            )));
        }
    }
    let batch = if restrict_rows {
        BatchData::from_minibatch(graph, Minibatch::from_edges(graph, edge_ids)?)
    } else {
        BatchData {
            edge_ids: edge_ids.to_vec(),
            rows: None,
            edge_user_row: edge_ids.iter().map(|&e| graph.edges[e].user as usize).collect(),
            edge_item_row: edge_ids.iter().map(|&e| graph.edges[e].item as usize).collect(),
            targets: edge_ids.iter().map(|&e| graph.edges[e].level).collect(),
        }
    };
    let trace = forward(graph, features, side, params, cfg, &batch, masks)?;
    let grads = backward(&trace, graph, features, side, params, cfg, &batch, masks)?;
    Ok((trace.loss, grads))
}

/// Everything a finished (or aborted) training run hands back.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub ema: EmaParams,
    pub best_ema: Option<BestEma>,
    pub metrics: MetricsReport,
}

/// EMA snapshot at the best validation epoch.
#[derive(Clone, Debug)]
pub struct BestEma {
    pub epoch: usize,
    pub val_rmse: f64,
    pub params: ModelParams,
}

#[derive(Debug)]
pub enum TrainError {
    /// Loss or gradients became non-finite. `last_good` carries the state
    /// from just before the failing update plus all metrics so far.
    Diverged {
        epoch: usize,
        last_good: Box<TrainOutcome>,
    },
    Core(Error),
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainError::Diverged { epoch, .. } => {
                write!(f, "training diverged at epoch {epoch}")
            }
            TrainError::Core(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<Error> for TrainError {
    fn from(e: Error) -> Self {
        TrainError::Core(e)
    }
}

pub type TrainResult<T> = std::result::Result<T, TrainError>;

/// Runs the full training protocol: per epoch, fresh dropout masks, a
/// forward/backward/Adam/EMA step per batch, periodic validation with the
/// EMA parameters, and a final EMA evaluation on validation and test
/// splits. Deterministic given the config seed and splits.
pub fn train(
    config: &TrainConfig,
    dataset: &RatingDataset,
    splits: &SplitSpec,
) -> TrainResult<TrainOutcome> {
    let started = Instant::now();
    let num_levels = dataset.num_levels();
    config.validate(num_levels, splits.train.len())?;
    let graph = build_rating_graph(dataset, &splits.train)?;
    let features = identity_features(dataset);
    let side = if config.encoder.side_info {
        Some(build_side_features(dataset)?)
    } else {
        None
    };
    let side_dims = side
        .as_ref()
        .map(|s| (s.user_features.cols(), s.item_features.cols()));

    let mut init_rng = Rng::new(derive_seed(config.train_seed, INIT_STREAM));
    let mut dropout_rng = Rng::new(derive_seed(config.train_seed, DROPOUT_STREAM));
    let mut batch_rng = Rng::new(derive_seed(config.train_seed, BATCH_STREAM));

    let mut params = ModelParams::init(
        &config.encoder,
        config.n_basis,
        num_levels,
        (features.user_features.cols(), features.item_features.cols()),
        side_dims,
        &mut init_rng,
    )?;
    let mut adam = AdamState::new(&params, config.learning_rate);
    let mut ema = EmaParams::new(&params, config.ema_decay)?;
    let mut best: Option<BestEma> = None;
    let mut records: Vec<EpochRecord> = Vec::with_capacity(config.epochs);

    let outcome = |params: &ModelParams,
                   ema: &EmaParams,
                   best: &Option<BestEma>,
                   records: &[EpochRecord],
                   final_summary: FinalSummary| TrainOutcome {
        params: params.clone(),
        ema: ema.clone(),
        best_ema: best.clone(),
        metrics: MetricsReport {
            epochs: records.to_vec(),
            final_summary,
        },
    };
    let diverged = |epoch: usize,
                    params: &ModelParams,
                    ema: &EmaParams,
                    best: &Option<BestEma>,
                    records: &[EpochRecord],
                    seed: u64,
                    wall: f64| TrainError::Diverged {
        epoch,
        last_good: Box::new(outcome(
            params,
            ema,
            best,
            records,
            FinalSummary {
                seed,
                wall_seconds: wall,
                best_val: best.as_ref().map(|b| BestVal {
                    epoch: b.epoch,
                    val_rmse: b.val_rmse,
                }),
                ..FinalSummary::default()
            },
        )),
    };

    for epoch in 1..=config.epochs {
        let batches: Vec<BatchData> =
            if config.batch_size == 0 || config.batch_size >= graph.edge_count() {
                vec![BatchData::full(&graph)]
            } else {
                epoch_minibatches(&graph, config.batch_size, &mut batch_rng)?
                    .into_iter()
                    .map(|mb| BatchData::from_minibatch(&graph, mb))
                    .collect()
            };

        let mut epoch_loss = 0.0;
        let mut sq_err = 0.0;
        let mut n_pred = 0usize;
        for batch in &batches {
            let masks = sample_masks(&graph, &config.encoder, batch.rows.as_ref(), &mut dropout_rng)?;
            let trace = forward(
                &graph,
                &features,
                side.as_ref(),
                &params,
                &config.encoder,
                batch,
                &masks,
            )?;
            if !trace.loss.is_finite() {
                return Err(diverged(
                    epoch,
                    &params,
                    &ema,
                    &best,
                    &records,
                    config.train_seed,
                    started.elapsed().as_secs_f64(),
                ));
            }
            epoch_loss += trace.loss;
            for (e, &t) in batch.targets.iter().enumerate() {
                let expected: f64 = trace
                    .probs
                    .row(e)
                    .iter()
                    .zip(&dataset.level_values)
                    .map(|(&p, &v)| p * v)
                    .sum();
                let err = expected - dataset.level_values[t as usize];
                sq_err += err * err;
            }
            n_pred += batch.targets.len();

            let grads = backward(
                &trace,
                &graph,
                &features,
                side.as_ref(),
                &params,
                &config.encoder,
                batch,
                &masks,
            )?;
            if let Err(Error::NonFinite(what)) = adam_step(&mut params, &grads, &mut adam) {
                let _ = what;
                return Err(diverged(
                    epoch,
                    &params,
                    &ema,
                    &best,
                    &records,
                    config.train_seed,
                    started.elapsed().as_secs_f64(),
                ));
            }
            ema_update(&mut ema, &params)?;
        }

        if !params.is_finite() {
            return Err(diverged(
                epoch,
                &params,
                &ema,
                &best,
                &records,
                config.train_seed,
                started.elapsed().as_secs_f64(),
            ));
        }

        let mut val_rmse = None;
        if config.eval_every > 0 && epoch % config.eval_every == 0 && !splits.val.is_empty() {
            let v = eval::evaluate_with_features(
                &ema.shadow,
                &config.encoder,
                &graph,
                &splits.val,
                dataset,
                &features,
                side.as_ref(),
            )?;
            val_rmse = Some(v);
            if best.as_ref().is_none_or(|b| v < b.val_rmse) {
                best = Some(BestEma {
                    epoch,
                    val_rmse: v,
                    params: ema.shadow.clone(),
                });
            }
        }
        records.push(EpochRecord {
            epoch,
            train_loss: epoch_loss,
            train_rmse: if n_pred > 0 {
                (sq_err / n_pred as f64).sqrt()
            } else {
                0.0
            },
            val_rmse,
            elapsed_seconds: started.elapsed().as_secs_f64(),
        });
    }

    let final_val = if splits.val.is_empty() {
        None
    } else {
        Some(eval::evaluate_with_features(
            &ema.shadow,
            &config.encoder,
            &graph,
            &splits.val,
            dataset,
            &features,
            side.as_ref(),
        )?)
    };
    let final_test = if splits.test.is_empty() {
        None
    } else {
        Some(eval::evaluate_with_features(
            &ema.shadow,
            &config.encoder,
            &graph,
            &splits.test,
            dataset,
            &features,
            side.as_ref(),
        )?)
    };

    let final_summary = FinalSummary {
        test_rmse: final_test,
        val_rmse: final_val,
        best_val: best.as_ref().map(|b| BestVal {
            epoch: b.epoch,
            val_rmse: b.val_rmse,
        }),
        fingerprint: None,
        seed: config.train_seed,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        params,
        ema,
        best_ema: best,
        metrics: MetricsReport {
            epochs: records,
            final_summary,
        },
    })
}
