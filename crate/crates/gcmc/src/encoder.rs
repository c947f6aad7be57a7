//! Graph convolutional encoder: per-level message passing over the rating
//! graph, level accumulation, and a dense layer with an optional
//! side-information channel. Produces the user/item embeddings U, V.

use crate::data::{FeatureKind, FeatureSet, RatingGraph};
use crate::error::{Error, Result};
use crate::tensor::{matmul_nt, spmm, spmm_rows, DenseMatrix, DropoutMask, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Accumulation {
    /// Concatenate per-level message sums; each level owns a slice of width
    /// `hidden_dim / R`.
    Stack,
    /// Add per-level message sums; every level maps to the full hidden dim.
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    /// Divide each message by the receiver's total degree.
    Left,
    /// Divide by sqrt(receiver degree * sender degree).
    Symmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Accumulation {
    pub fn parse_name(name: &str) -> Result<Self> {
        match name {
            "stack" => Ok(Accumulation::Stack),
            "sum" => Ok(Accumulation::Sum),
            other => Err(Error::InvalidConfig(format!(
                "unknown accumulation '{other}' (expected stack or sum)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Accumulation::Stack => "stack",
            Accumulation::Sum => "sum",
        }
    }
}

impl Normalization {
    pub fn parse_name(name: &str) -> Result<Self> {
        match name {
            "left" => Ok(Normalization::Left),
            "symmetric" => Ok(Normalization::Symmetric),
            other => Err(Error::InvalidConfig(format!(
                "unknown normalization '{other}' (expected left or symmetric)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Normalization::Left => "left",
            Normalization::Symmetric => "symmetric",
        }
    }
}

impl Activation {
    pub fn parse_name(name: &str) -> Result<Self> {
        match name {
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::InvalidConfig(format!(
                "unknown activation '{other}' (expected relu or identity)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn apply_in_place(self, x: &mut DenseMatrix) {
        if self == Activation::Relu {
            for v in x.values_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }

    /// Multiplies `d` elementwise by the activation derivative at `pre`.
    pub(crate) fn backprop_in_place(self, d: &mut DenseMatrix, pre: &DenseMatrix) {
        if self == Activation::Relu {
            for (g, &p) in d.values_mut().iter_mut().zip(pre.values()) {
                if p <= 0.0 {
                    *g = 0.0;
                }
            }
        }
    }
}

/// Encoder hyperparameters. Defaults follow the benchmark recipe:
/// stack accumulation, left normalization, ordinal sharing, 500-unit conv
/// layer with ReLU, 75-dim dense layer without activation, dropout 0.7.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub accumulation: Accumulation,
    pub normalization: Normalization,
    pub ordinal_sharing: bool,
    pub conv_activation: Activation,
    pub dense_activation: Activation,
    pub side_info: bool,
    pub side_hidden_dim: usize,
    pub node_dropout: f64,
    pub unit_dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden_dim: 500,
            embed_dim: 75,
            accumulation: Accumulation::Stack,
            normalization: Normalization::Left,
            ordinal_sharing: true,
            conv_activation: Activation::Relu,
            dense_activation: Activation::Identity,
            side_info: false,
            side_hidden_dim: 10,
            node_dropout: 0.7,
            unit_dropout: 0.7,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, num_levels: usize) -> Result<()> {
        if num_levels == 0 {
            return Err(Error::InvalidConfig("need at least one rating level".into()));
        }
        if self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidConfig("layer dims must be at least 1".into()));
        }
        if self.accumulation == Accumulation::Stack && self.hidden_dim % num_levels != 0 {
            return Err(Error::InvalidConfig(format!(
                "stack accumulation needs hidden_dim divisible by the {num_levels} levels, got {}",
                self.hidden_dim
            )));
        }
        if self.side_info && self.side_hidden_dim == 0 {
            return Err(Error::InvalidConfig(
                "side_hidden_dim must be at least 1 when side_info is on".into(),
            ));
        }
        for (name, p) in [
            ("node_dropout", self.node_dropout),
            ("unit_dropout", self.unit_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be in [0, 1), got {p}"
                )));
            }
        }
        Ok(())
    }

    /// Width of one per-level conv output slice.
    pub fn slice_width(&self, num_levels: usize) -> usize {
        match self.accumulation {
            Accumulation::Stack => self.hidden_dim / num_levels,
            Accumulation::Sum => self.hidden_dim,
        }
    }
}

/// Side-information channel weights for one node side.
#[derive(Clone, Debug, PartialEq)]
pub struct SideChannelParams {
    /// side_hidden_dim x side-feature-dim
    pub w1: DenseMatrix,
    /// embed_dim x side_hidden_dim
    pub w2: DenseMatrix,
    /// 1 x side_hidden_dim bias row
    pub b: DenseMatrix,
}

/// Trainable encoder weights.
///
/// `t[s]` is the level-s conv basis over the concatenated
/// [user-features | item-features] column space; the effective per-level
/// weights come from [`effective_level_weights`]. The dense layer uses one
/// shared matrix unless side info is on, in which case users and items get
/// separate dense and side-channel parameter sets.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub t: Vec<DenseMatrix>,
    pub w_user: DenseMatrix,
    pub w_item: Option<DenseMatrix>,
    pub side_user: Option<SideChannelParams>,
    pub side_item: Option<SideChannelParams>,
}

fn glorot(rows: usize, cols: usize, rng: &mut Rng) -> DenseMatrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    DenseMatrix::uniform(rows, cols, -bound, bound, rng)
}

impl EncoderParams {
    /// Fan-based uniform initialization for the given dimensions.
    /// `feature_dims` are the conv input widths per side; `side_dims` the
    /// side-feature widths, required iff `cfg.side_info`.
    pub fn init(
        cfg: &EncoderConfig,
        num_levels: usize,
        feature_dims: (usize, usize),
        side_dims: Option<(usize, usize)>,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate(num_levels)?;
        if cfg.side_info != side_dims.is_some() {
            return Err(Error::InvalidConfig(
                "side feature dims must be given exactly when side_info is on".into(),
            ));
        }
        let sw = cfg.slice_width(num_levels);
        let d_total = feature_dims.0 + feature_dims.1;
        let t = (0..num_levels).map(|_| glorot(sw, d_total, rng)).collect();
        let w_user = glorot(cfg.embed_dim, cfg.hidden_dim, rng);
        let (w_item, side_user, side_item) = match side_dims {
            None => (None, None, None),
            Some((du, dv)) => {
                let w_item = glorot(cfg.embed_dim, cfg.hidden_dim, rng);
                let mut side = |d| SideChannelParams {
                    w1: glorot(cfg.side_hidden_dim, d, rng),
                    w2: glorot(cfg.embed_dim, cfg.side_hidden_dim, rng),
                    b: DenseMatrix::zeros(1, cfg.side_hidden_dim),
                };
                let su = side(du);
                let sv = side(dv);
                (Some(w_item), Some(su), Some(sv))
            }
        };
        Ok(EncoderParams {
            t,
            w_user,
            w_item,
            side_user,
            side_item,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.t.len()
    }

    /// Dense-layer matrix used for the item side.
    pub fn item_dense(&self) -> &DenseMatrix {
        self.w_item.as_ref().unwrap_or(&self.w_user)
    }
}

/// Per-level conv weights W_r. With ordinal sharing on, W_r is the running
/// sum T_1 + ... + T_r, so higher levels reuse lower-level factors; off,
/// W_r = T_r directly.
pub fn effective_level_weights(params: &EncoderParams, ordinal_sharing: bool) -> Vec<DenseMatrix> {
    if !ordinal_sharing {
        return params.t.clone();
    }
    let mut out: Vec<DenseMatrix> = Vec::with_capacity(params.t.len());
    for t in &params.t {
        let mut next = match out.last() {
            Some(prev) => prev.clone(),
            None => DenseMatrix::zeros(t.rows(), t.cols()),
        };
        next.add_assign(t).expect("level weight shapes match");
        out.push(next);
    }
    out
}

/// Node-dropout outcome: which nodes keep their outgoing messages, and the
/// inverse-keep-probability rescale applied to survivors.
#[derive(Clone, Debug)]
pub struct NodeMask {
    pub user_keep: Vec<bool>,
    pub item_keep: Vec<bool>,
    scale: f64,
}

impl NodeMask {
    pub fn new(user_keep: Vec<bool>, item_keep: Vec<bool>, p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidConfig(format!(
                "node dropout probability must be in [0, 1), got {p}"
            )));
        }
        Ok(NodeMask {
            user_keep,
            item_keep,
            scale: 1.0 / (1.0 - p),
        })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

/// Samples a node-dropout mask: each of the N_u + N_v nodes independently
/// kept with probability 1-p (users drawn first, then items).
pub fn node_dropout_mask(graph: &RatingGraph, p: f64, rng: &mut Rng) -> Result<NodeMask> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidConfig(format!(
            "node dropout probability must be in [0, 1), got {p}"
        )));
    }
    let keep = 1.0 - p;
    let user_keep = (0..graph.num_users).map(|_| rng.bernoulli(keep)).collect();
    let item_keep = (0..graph.num_items).map(|_| rng.bernoulli(keep)).collect();
    NodeMask::new(user_keep, item_keep, p)
}

/// Receiver rows to compute in a restricted forward pass (mini-batching).
/// Indices are dense node ids, sorted and distinct; senders always come
/// from the full graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchRows {
    pub users: Vec<usize>,
    pub items: Vec<usize>,
}

/// Conv-layer forward record: pre- and post-activation hidden states.
/// Rows follow `rows` order when restricted, node order otherwise.
#[derive(Clone, Debug)]
pub(crate) struct ConvTrace {
    pub hpre_u: DenseMatrix,
    pub hpre_v: DenseMatrix,
    pub h_u: DenseMatrix,
    pub h_v: DenseMatrix,
}

/// Per-sender scale: dropout keep/rescale times the sender-side degree
/// factor (symmetric normalization only).
pub(crate) fn send_scales(
    degrees: &[u32],
    mask: Option<(&[bool], f64)>,
    normalization: Normalization,
) -> Vec<f64> {
    degrees
        .iter()
        .enumerate()
        .map(|(j, &d)| {
            let keep = match mask {
                Some((k, s)) => {
                    if k[j] {
                        s
                    } else {
                        0.0
                    }
                }
                None => 1.0,
            };
            match normalization {
                Normalization::Left => keep,
                Normalization::Symmetric => keep / f64::from(d.max(1)).sqrt(),
            }
        })
        .collect()
}

/// Per-receiver scale from the chosen normalization (total degree).
pub(crate) fn recv_scales(degrees: &[u32], normalization: Normalization) -> Vec<f64> {
    degrees
        .iter()
        .map(|&d| {
            let d = f64::from(d.max(1));
            match normalization {
                Normalization::Left => 1.0 / d,
                Normalization::Symmetric => 1.0 / d.sqrt(),
            }
        })
        .collect()
}

/// Sender features transformed by the matching column block of W_r.
/// One-hot identity features short-circuit to a column-block transpose.
fn transformed_features(
    x: &DenseMatrix,
    kind: FeatureKind,
    w_r: &DenseMatrix,
    c0: usize,
    c1: usize,
) -> Result<DenseMatrix> {
    let block = w_r.column_block(c0, c1);
    match kind {
        FeatureKind::IdentityOnehot => {
            if x.rows() != c1 - c0 {
                return Err(Error::shape(
                    "graph_convolve",
                    format!("identity features {}x{} vs weight block width {}", x.rows(), x.cols(), c1 - c0),
                ));
            }
            Ok(block.transpose())
        }
        FeatureKind::SideInfo => matmul_nt(x, &block),
    }
}

fn accumulate_level(
    hpre: &mut DenseMatrix,
    z: &DenseMatrix,
    level: usize,
    sw: usize,
    accumulation: Accumulation,
    rows: Option<&[usize]>,
    recv_scale: &[f64],
) {
    let offset = match accumulation {
        Accumulation::Stack => level * sw,
        Accumulation::Sum => 0,
    };
    for k in 0..z.rows() {
        let gi = rows.map_or(k, |rs| rs[k]);
        let s = recv_scale[gi];
        let dst = &mut hpre.row_mut(k)[offset..offset + sw];
        for (d, &v) in dst.iter_mut().zip(z.row(k)) {
            *d += s * v;
        }
    }
}

pub(crate) fn conv_forward(
    graph: &RatingGraph,
    features: &FeatureSet,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    mask: Option<&NodeMask>,
    rows: Option<&BatchRows>,
) -> Result<ConvTrace> {
    let num_levels = graph.num_levels();
    cfg.validate(num_levels)?;
    let d_u = features.user_features.cols();
    let d_v = features.item_features.cols();
    if features.user_features.rows() != graph.num_users
        || features.item_features.rows() != graph.num_items
    {
        return Err(Error::shape(
            "graph_convolve",
            format!(
                "features {}x{}/{}x{} vs graph {} users, {} items",
                features.user_features.rows(),
                d_u,
                features.item_features.rows(),
                d_v,
                graph.num_users,
                graph.num_items
            ),
        ));
    }
    let sw = cfg.slice_width(num_levels);
    if params.t.len() != num_levels {
        return Err(Error::shape(
            "graph_convolve",
            format!("{} level weights vs {num_levels} levels", params.t.len()),
        ));
    }
    for t in &params.t {
        if t.rows() != sw || t.cols() != d_u + d_v {
            return Err(Error::shape(
                "graph_convolve",
                format!("level weight {}x{} vs expected {sw}x{}", t.rows(), t.cols(), d_u + d_v),
            ));
        }
    }
    if let Some(m) = mask {
        if m.user_keep.len() != graph.num_users || m.item_keep.len() != graph.num_items {
            return Err(Error::shape(
                "graph_convolve",
                "node mask length vs graph size",
            ));
        }
    }

    let send_u = send_scales(
        &graph.user_degrees,
        mask.map(|m| (m.user_keep.as_slice(), m.scale)),
        cfg.normalization,
    );
    let send_v = send_scales(
        &graph.item_degrees,
        mask.map(|m| (m.item_keep.as_slice(), m.scale)),
        cfg.normalization,
    );
    let recv_u = recv_scales(&graph.user_degrees, cfg.normalization);
    let recv_v = recv_scales(&graph.item_degrees, cfg.normalization);

    let n_rows_u = rows.map_or(graph.num_users, |r| r.users.len());
    let n_rows_v = rows.map_or(graph.num_items, |r| r.items.len());
    let mut hpre_u = DenseMatrix::zeros(n_rows_u, cfg.hidden_dim);
    let mut hpre_v = DenseMatrix::zeros(n_rows_v, cfg.hidden_dim);

    let weights = effective_level_weights(params, cfg.ordinal_sharing);
    for (r, w_r) in weights.iter().enumerate() {
        // Items send to users through the item-feature column block.
        let mut g_v = transformed_features(&features.item_features, features.kind, w_r, d_u, d_u + d_v)?;
        for (j, &s) in send_v.iter().enumerate() {
            g_v.scale_row(j, s);
        }
        let z_u = match rows {
            None => spmm(&graph.adj[r], &g_v)?,
            Some(rw) => spmm_rows(&graph.adj[r], &g_v, &rw.users)?,
        };
        accumulate_level(
            &mut hpre_u,
            &z_u,
            r,
            sw,
            cfg.accumulation,
            rows.map(|rw| rw.users.as_slice()),
            &recv_u,
        );

        // Users send to items through the user-feature column block.
        let mut g_u = transformed_features(&features.user_features, features.kind, w_r, 0, d_u)?;
        for (j, &s) in send_u.iter().enumerate() {
            g_u.scale_row(j, s);
        }
        let z_v = match rows {
            None => spmm(&graph.adj_t[r], &g_u)?,
            Some(rw) => spmm_rows(&graph.adj_t[r], &g_u, &rw.items)?,
        };
        accumulate_level(
            &mut hpre_v,
            &z_v,
            r,
            sw,
            cfg.accumulation,
            rows.map(|rw| rw.items.as_slice()),
            &recv_v,
        );
    }

    let mut h_u = hpre_u.clone();
    let mut h_v = hpre_v.clone();
    cfg.conv_activation.apply_in_place(&mut h_u);
    cfg.conv_activation.apply_in_place(&mut h_v);
    Ok(ConvTrace {
        hpre_u,
        hpre_v,
        h_u,
        h_v,
    })
}

/// Conv-layer embeddings for all nodes. `mask` carries node dropout during
/// training; inference passes `None` and uses the unmasked graph.
pub fn graph_convolve(
    graph: &RatingGraph,
    features: &FeatureSet,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    mask: Option<&NodeMask>,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let trace = conv_forward(graph, features, params, cfg, mask, None)?;
    Ok((trace.h_u, trace.h_v))
}

/// Side-channel forward record for one node side.
#[derive(Clone, Debug)]
pub(crate) struct SideTrace {
    pub pre_f: DenseMatrix,
    pub f: DenseMatrix,
}

/// Dense-layer forward record.
#[derive(Clone, Debug)]
pub(crate) struct DenseTrace {
    pub pre_u: DenseMatrix,
    pub pre_v: DenseMatrix,
    pub u: DenseMatrix,
    pub v: DenseMatrix,
    pub side_u: Option<SideTrace>,
    pub side_v: Option<SideTrace>,
}

pub(crate) fn gather_rows(x: &DenseMatrix, rows: &[usize]) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(rows.len(), x.cols());
    for (k, &r) in rows.iter().enumerate() {
        out.row_mut(k).copy_from_slice(x.row(r));
    }
    out
}

/// f = relu(x_f w1^T + b), recorded pre- and post-activation.
fn side_forward(x_f: &DenseMatrix, sp: &SideChannelParams) -> Result<SideTrace> {
    let mut pre_f = matmul_nt(x_f, &sp.w1)?;
    for r in 0..pre_f.rows() {
        for (v, &bias) in pre_f.row_mut(r).iter_mut().zip(sp.b.row(0)) {
            *v += bias;
        }
    }
    let mut f = pre_f.clone();
    Activation::Relu.apply_in_place(&mut f);
    Ok(SideTrace { pre_f, f })
}

pub(crate) fn dense_forward(
    h_u: &DenseMatrix,
    h_v: &DenseMatrix,
    side: Option<&FeatureSet>,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    rows: Option<&BatchRows>,
) -> Result<DenseTrace> {
    if cfg.side_info != side.is_some() {
        return Err(Error::InvalidConfig(
            "side features must be supplied exactly when side_info is on".into(),
        ));
    }

    let mut pre_u = matmul_nt(h_u, &params.w_user)?;
    let mut pre_v = matmul_nt(h_v, params.item_dense())?;

    let (side_u, side_v) = match side {
        None => (None, None),
        Some(fs) => {
            let (sp_u, sp_v) = match (&params.side_user, &params.side_item) {
                (Some(u), Some(v)) => (u, v),
                _ => {
                    return Err(Error::InvalidConfig(
                        "side_info is on but side-channel parameters are absent".into(),
                    ))
                }
            };
            let x_u = match rows {
                None => fs.user_features.clone(),
                Some(rw) => gather_rows(&fs.user_features, &rw.users),
            };
            let x_v = match rows {
                None => fs.item_features.clone(),
                Some(rw) => gather_rows(&fs.item_features, &rw.items),
            };
            let st_u = side_forward(&x_u, sp_u)?;
            let st_v = side_forward(&x_v, sp_v)?;
            pre_u.add_assign(&matmul_nt(&st_u.f, &sp_u.w2)?)?;
            pre_v.add_assign(&matmul_nt(&st_v.f, &sp_v.w2)?)?;
            (Some(st_u), Some(st_v))
        }
    };

    let mut u = pre_u.clone();
    let mut v = pre_v.clone();
    cfg.dense_activation.apply_in_place(&mut u);
    cfg.dense_activation.apply_in_place(&mut v);
    Ok(DenseTrace {
        pre_u,
        pre_v,
        u,
        v,
        side_u,
        side_v,
    })
}

/// Dense layer on top of conv outputs: U = act(H W^T [+ W2 relu(W1 x_f + b)]).
/// `unit_dropout` carries pre-sampled elementwise masks for (H_u, H_v)
/// during training; inference passes `None`.
pub fn dense_embed(
    h_u: &DenseMatrix,
    h_v: &DenseMatrix,
    side: Option<&FeatureSet>,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    unit_dropout: Option<(&DropoutMask, &DropoutMask)>,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let trace = match unit_dropout {
        Some((mu, mv)) => {
            let hu = mu.apply(h_u)?;
            let hv = mv.apply(h_v)?;
            dense_forward(&hu, &hv, side, params, cfg, None)?
        }
        None => dense_forward(h_u, h_v, side, params, cfg, None)?,
    };
    Ok((trace.u, trace.v))
}
