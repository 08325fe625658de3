//! The encoder / pooling / maneuver-head / decoder network.
//!
//! All vehicles of a batch share one encoder LSTM. Each neighbor's final
//! hidden state is joined with its relative pose, passed through an MLP with
//! batch norm, and max-pooled per sample. Variants with maneuver heads
//! condition the decoder on one-hot location and acceleration classes; the
//! anchor variant predicts residuals on top of the class anchor.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::bytes::{Reader, Writer};
use crate::diffnum::{
    chol_len, BatchNormMode, BatchNormParams, LstmWeights, ParamId, ParamStore, RunningStatUpdate, Tape, Tensor, Var,
    LOG_DIAG_CLAMP,
};
use crate::error::{Error, Result};
use crate::ingest::SceneSample;
use crate::maneuvers::{ManeuverLabel, NUM_ACCEL_CLASSES};
use crate::par;
use crate::trajkit::{Pose, PoseSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "2d")]
    V2d,
    #[serde(rename = "3d")]
    V3d,
    #[serde(rename = "3d-m")]
    V3dM,
    #[serde(rename = "3d-a")]
    V3dA,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::V2d, Variant::V3d, Variant::V3dM, Variant::V3dA];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::V2d => "2d",
            Variant::V3d => "3d",
            Variant::V3dM => "3d-m",
            Variant::V3dA => "3d-a",
        }
    }

    pub fn has_heads(self) -> bool {
        matches!(self, Variant::V3dM | Variant::V3dA)
    }

    pub fn uses_anchors(self) -> bool {
        self == Variant::V3dA
    }

    /// Pose components the variant models: 2 for `(x, y)`, 3 with heading.
    pub fn pose_dim(self) -> usize {
        if self == Variant::V2d {
            2
        } else {
            3
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Variant(format!("unknown variant `{s}` (expected 2d, 3d, 3d-m or 3d-a)")))
    }
}

/// How a prediction is formed from the network outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    /// Single decode without maneuver conditioning (2d / 3d).
    Plain,
    /// Decode only the most probable maneuver.
    MapBest,
    /// Probability-weighted sum of all per-maneuver mean trajectories.
    Weighted,
    /// Every per-maneuver component with its probability.
    FullMixture,
}

impl DecodeMode {
    pub fn check(self, variant: Variant) -> Result<()> {
        match (self == DecodeMode::Plain, variant.has_heads()) {
            (true, false) | (false, true) => Ok(()),
            (true, true) => Err(Error::Variant(format!(
                "variant {variant} needs a maneuver mode (map or weighted)"
            ))),
            (false, false) => Err(Error::Variant(format!(
                "mode {self:?} needs maneuver heads; variant {variant} has none"
            ))),
        }
    }

    /// The natural evaluation mode of a variant.
    pub fn default_for(variant: Variant) -> Self {
        if variant.has_heads() {
            DecodeMode::MapBest
        } else {
            DecodeMode::Plain
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub encoder_state: usize,
    pub decoder_state: usize,
    pub dynamics_embedding: usize,
    pub pooling_mlp: usize,
    pub num_sections: usize,
    pub num_accel_classes: usize,
    pub history_steps: usize,
    pub future_steps: usize,
    pub dt: f64,
    pub leaky_slope: f64,
    /// Positions are multiplied by this before entering the network and
    /// predicted position offsets are divided by it.
    pub position_scale: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl ModelConfig {
    pub fn new(variant: Variant) -> Self {
        ModelConfig {
            variant,
            encoder_state: 32,
            decoder_state: 64,
            dynamics_embedding: 16,
            pooling_mlp: 256,
            num_sections: 8,
            num_accel_classes: NUM_ACCEL_CLASSES,
            history_steps: 13,
            future_steps: 25,
            dt: 0.16,
            leaky_slope: 0.1,
            position_scale: 0.1,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn num_anchors(&self) -> usize {
        self.num_sections * self.num_accel_classes
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.encoder_state,
            self.decoder_state,
            self.dynamics_embedding,
            self.pooling_mlp,
            self.num_sections,
            self.history_steps,
            self.future_steps,
        ];
        if sizes.contains(&0) {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.num_accel_classes != NUM_ACCEL_CLASSES {
            return Err(Error::Config(format!(
                "acceleration classes must be {NUM_ACCEL_CLASSES}"
            )));
        }
        if !(self.dt > 0.0 && self.position_scale > 0.0 && self.bn_eps > 0.0) {
            return Err(Error::Config("dt, position_scale and bn_eps must be positive".into()));
        }
        Ok(())
    }

    fn context_len(&self) -> usize {
        let base = self.encoder_state + self.pooling_mlp;
        if self.variant.has_heads() {
            base + self.num_sections + self.num_accel_classes
        } else {
            base
        }
    }

    fn output_len(&self) -> usize {
        let d = self.variant.pose_dim();
        d + chol_len(d)
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    embed_w: ParamId,
    embed_b: ParamId,
    encoder: LstmWeights,
    pool_w: ParamId,
    pool_b: ParamId,
    pool_bn: BatchNormParams,
    heads: Option<[ParamId; 4]>,
    init_w: ParamId,
    init_b: ParamId,
    decoder: LstmWeights,
    out_w: ParamId,
    out_b: ParamId,
}

impl Layout {
    fn build(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Layout> {
        let d = cfg.variant.pose_dim();
        let (e, h, hd, m) = (cfg.dynamics_embedding, cfg.encoder_state, cfg.decoder_state, cfg.pooling_mlp);
        let ctx = cfg.context_len();
        let pool_in = 4 + h;
        let mut u = |s: &mut ParamStore, name: &str, shape: Vec<usize>, fan_in: usize| s.add_uniform(name, shape, fan_in, rng);
        let embed_w = u(store, "encoder/embed/w", vec![e, d], d)?;
        let embed_b = u(store, "encoder/embed/b", vec![e], d)?;
        let encoder = LstmWeights {
            w_ih: u(store, "encoder/lstm/w_ih", vec![4 * h, e], h)?,
            w_hh: u(store, "encoder/lstm/w_hh", vec![4 * h, h], h)?,
            bias: u(store, "encoder/lstm/b", vec![4 * h], h)?,
            hidden: h,
        };
        let pool_w = u(store, "pool/mlp/w", vec![m, pool_in], pool_in)?;
        let pool_b = u(store, "pool/mlp/b", vec![m], pool_in)?;
        let heads = if cfg.variant.has_heads() {
            let fan = h + m;
            Some([
                u(store, "heads/location/w", vec![cfg.num_sections, fan], fan)?,
                u(store, "heads/location/b", vec![cfg.num_sections], fan)?,
                u(store, "heads/acceleration/w", vec![cfg.num_accel_classes, fan], fan)?,
                u(store, "heads/acceleration/b", vec![cfg.num_accel_classes], fan)?,
            ])
        } else {
            None
        };
        let init_w = u(store, "decoder/init/w", vec![hd, ctx], ctx)?;
        let init_b = u(store, "decoder/init/b", vec![hd], ctx)?;
        let decoder = LstmWeights {
            w_ih: u(store, "decoder/lstm/w_ih", vec![4 * hd, ctx], hd)?,
            w_hh: u(store, "decoder/lstm/w_hh", vec![4 * hd, hd], hd)?,
            bias: u(store, "decoder/lstm/b", vec![4 * hd], hd)?,
            hidden: hd,
        };
        let out_w = u(store, "decoder/out/w", vec![cfg.output_len(), hd], hd)?;
        let out_b = u(store, "decoder/out/b", vec![cfg.output_len()], hd)?;
        let pool_bn = BatchNormParams {
            gamma: store.add_constant("pool/bn/gamma", vec![m], 1.0, true)?,
            beta: store.add_constant("pool/bn/beta", vec![m], 0.0, true)?,
            running_mean: store.add_constant("pool/bn/running_mean", vec![m], 0.0, false)?,
            running_var: store.add_constant("pool/bn/running_var", vec![m], 1.0, false)?,
            momentum: cfg.bn_momentum,
            eps: cfg.bn_eps,
        };
        Ok(Layout {
            embed_w,
            embed_b,
            encoder,
            pool_w,
            pool_b,
            pool_bn,
            heads,
            init_w,
            init_b,
            decoder,
            out_w,
            out_b,
        })
    }
}

/// One per-step Gaussian: mean (absolute, ego frame) and Cholesky parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStep {
    pub mean: Vec<f64>,
    pub chol: Vec<f64>,
}

impl GaussianStep {
    pub fn covariance(&self) -> Vec<f64> {
        covariance(&self.chol, self.mean.len())
    }
}

/// Lower-triangular factor `L` (row-major `d×d`) from Cholesky parameters:
/// `d` clamped log-diagonal entries, then the strict lower triangle by rows.
pub fn chol_factor(params: &[f64], d: usize) -> Vec<f64> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        l[i * d + i] = params[i].clamp(-LOG_DIAG_CLAMP, LOG_DIAG_CLAMP).exp();
    }
    let mut k = d;
    for i in 1..d {
        for j in 0..i {
            l[i * d + j] = params[k];
            k += 1;
        }
    }
    l
}

/// `Σ = L·Lᵀ`, row-major `d×d`.
pub fn covariance(params: &[f64], d: usize) -> Vec<f64> {
    let l = chol_factor(params, d);
    let mut s = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            s[i * d + j] = (0..d).map(|k| l[i * d + k] * l[j * d + k]).sum();
        }
    }
    s
}

/// Per-maneuver Gaussian trajectories and their probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct MixturePrediction {
    /// `anchor_probs[k]` for 0-based joint index `k`.
    pub anchor_probs: Vec<f64>,
    /// `components[k][t]`
    pub components: Vec<Vec<GaussianStep>>,
    /// Anchor trajectories the means are offsets from (anchor variant only).
    pub anchors: Option<Vec<PoseSequence>>,
}

impl MixturePrediction {
    /// Residual `μ` of component `k` at step `t` (absolute mean minus anchor).
    pub fn offset(&self, k: usize, t: usize) -> Vec<f64> {
        let m = &self.components[k][t].mean;
        match &self.anchors {
            Some(a) => {
                let p = a[k].poses()[t].as_array();
                m.iter().zip(p).map(|(m, a)| m - a).collect()
            }
            None => m.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Point estimate, ego frame. For 2-d variants headings are zero.
    pub mean: PoseSequence,
    pub loc_probs: Option<Vec<f64>>,
    pub acc_probs: Option<Vec<f64>>,
    /// Most probable maneuver, when the variant has heads.
    pub maneuver: Option<ManeuverLabel>,
    pub mixture: Option<MixturePrediction>,
}

/// Encoder inputs and gather indices for a group of samples.
struct Batch {
    /// Per history step, `[vehicles, pose_dim]`.
    steps: Vec<Tensor>,
    ego_rows: Vec<usize>,
    neighbor_rows: Vec<usize>,
    groups: Vec<(usize, usize)>,
    /// `[neighbors, 4]`: scaled `x, y` and `cos θ, sin θ` at the current time.
    neighbor_feat: Tensor,
}

/// Forward results needed by losses and predictions.
pub struct Encoded {
    pub ego_code: Var,
    pub pooled: Var,
}

/// Trajectory and maneuver losses of one batch.
pub struct BatchLoss {
    /// Mean per-sample loss.
    pub loss: Var,
    /// Per-sample totals, `[B, 1]`.
    pub per_sample: Var,
    /// Per-sample trajectory NLL, `[B, 1]`.
    pub trajectory: Var,
    /// Per-sample squared position error summed over steps (m²), `[B, 1]`.
    pub sq_error: Var,
    /// Per-sample unweighted maneuver cross-entropy, `[B, 1]`.
    pub maneuver: Option<Var>,
}

pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl Model {
    /// Fresh model with uniform `±1/sqrt(fan_in)` weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layout = Layout::build(&config, &mut params, &mut rng)?;
        Ok(Model { config, params, layout })
    }

    /// Model with the given parameter values; names and shapes must match.
    pub fn from_params(config: ModelConfig, params: &ParamStore) -> Result<Model> {
        let mut m = Model::new(config, 0)?;
        m.params.copy_values_from(params)?;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Zeros the decoder's output layer so every residual is zero.
    pub fn zero_decoder_output(&mut self) {
        self.params.value_mut(self.layout.out_w).fill(0.0);
        self.params.value_mut(self.layout.out_b).fill(0.0);
    }

    fn check_anchors<'a>(&self, anchors: Option<&'a AnchorSet>) -> Result<Option<&'a AnchorSet>> {
        if !self.config.variant.uses_anchors() {
            return Ok(None);
        }
        let a = anchors.ok_or_else(|| Error::Variant("variant 3d-a needs an anchor set".into()))?;
        if a.len() != self.config.num_anchors() || a.future_steps() != self.config.future_steps {
            return Err(Error::shape(format!(
                "anchor set has {} anchors of {} steps; model expects {} of {}",
                a.len(),
                a.future_steps(),
                self.config.num_anchors(),
                self.config.future_steps
            )));
        }
        Ok(Some(a))
    }

    fn build_batch(&self, samples: &[&SceneSample]) -> Result<Batch> {
        let cfg = &self.config;
        let d = cfg.variant.pose_dim();
        let s = cfg.position_scale;
        let vehicles: usize = samples.iter().map(|x| 1 + x.neighbor_histories.len()).sum();
        let mut steps = vec![Vec::with_capacity(vehicles * d); cfg.history_steps];
        let mut ego_rows = Vec::with_capacity(samples.len());
        let mut neighbor_rows = Vec::new();
        let mut groups = Vec::with_capacity(samples.len());
        let mut feat = Vec::new();
        let mut row = 0;
        for x in samples {
            let hist = std::iter::once(&x.ego_history).chain(&x.neighbor_histories);
            groups.push((neighbor_rows.len(), x.neighbor_histories.len()));
            ego_rows.push(row);
            for (v, seq) in hist.enumerate() {
                if seq.len() != cfg.history_steps {
                    return Err(Error::shape(format!(
                        "sample {:?}: history of {} steps, model expects {}",
                        x.key(),
                        seq.len(),
                        cfg.history_steps
                    )));
                }
                for (t, p) in seq.poses().iter().enumerate() {
                    steps[t].push(p.x * s);
                    steps[t].push(p.y * s);
                    if d == 3 {
                        steps[t].push(p.theta);
                    }
                }
                if v > 0 {
                    neighbor_rows.push(row);
                    let p = seq.last();
                    feat.extend([p.x * s, p.y * s, p.theta.cos(), p.theta.sin()]);
                }
                row += 1;
            }
        }
        let n = neighbor_rows.len();
        Ok(Batch {
            steps: steps
                .into_iter()
                .map(|v| Tensor::matrix(vehicles, d, v))
                .collect::<Result<_>>()?,
            ego_rows,
            neighbor_rows,
            groups,
            neighbor_feat: Tensor::matrix(n, 4, feat)?,
        })
    }

    /// Final encoder hidden state of every vehicle row.
    fn encode_rows(&self, t: &mut Tape, steps: &[Tensor]) -> Result<Var> {
        let l = &self.layout;
        let rows = steps[0].rows();
        let h_dim = self.config.encoder_state;
        let mut h = t.input(Tensor::zeros(vec![rows, h_dim]));
        let mut c = t.input(Tensor::zeros(vec![rows, h_dim]));
        let ew = t.param(l.embed_w);
        let eb = t.param(l.embed_b);
        let w_ih = t.param(l.encoder.w_ih);
        let w_hh = t.param(l.encoder.w_hh);
        let b = t.param(l.encoder.bias);
        for x in steps {
            let x = t.input(x.clone());
            let e = t.affine(x, ew, Some(eb))?;
            let e = t.leaky_relu(e, self.config.leaky_slope);
            let g = t.affine(e, w_ih, Some(b))?;
            (h, c) = t.lstm_cell_projected(g, h, c, w_hh, h_dim)?;
        }
        Ok(h)
    }

    fn pool_rows(&self, t: &mut Tape, codes: Var, feat: Tensor, groups: &[(usize, usize)], bn: BatchNormMode) -> Result<Var> {
        let l = &self.layout;
        let f = t.input(feat);
        let x = t.concat(&[f, codes])?;
        let w = t.param(l.pool_w);
        let b = t.param(l.pool_b);
        let y = t.affine(x, w, Some(b))?;
        let y = t.batch_norm(y, &l.pool_bn, bn)?;
        let y = t.leaky_relu(y, self.config.leaky_slope);
        t.max_pool_over_set(y, groups)
    }

    fn forward_batch(&self, t: &mut Tape, batch: Batch, bn: BatchNormMode) -> Result<Encoded> {
        let h = self.encode_rows(t, &batch.steps)?;
        let ego_code = t.gather_rows(h, batch.ego_rows)?;
        let codes = t.gather_rows(h, batch.neighbor_rows)?;
        let pooled = self.pool_rows(t, codes, batch.neighbor_feat, &batch.groups, bn)?;
        Ok(Encoded { ego_code, pooled })
    }

    /// Encodes and pools a group of samples on `t`.
    pub fn forward(&self, t: &mut Tape, samples: &[&SceneSample], bn: BatchNormMode) -> Result<Encoded> {
        let batch = self.build_batch(samples)?;
        self.forward_batch(t, batch, bn)
    }

    /// `(location logits, acceleration logits)`.
    fn head_logits(&self, t: &mut Tape, enc: &Encoded) -> Result<(Var, Var)> {
        let [lw, lb, aw, ab] = self
            .layout
            .heads
            .ok_or_else(|| Error::Variant(format!("variant {} has no maneuver heads", self.config.variant)))?;
        let x = t.concat(&[enc.ego_code, enc.pooled])?;
        let (lw, lb, aw, ab) = (t.param(lw), t.param(lb), t.param(aw), t.param(ab));
        Ok((t.affine(x, lw, Some(lb))?, t.affine(x, aw, Some(ab))?))
    }

    /// Unrolls the decoder from `ctx` (`[R, context_len]`). Returns per-step
    /// absolute means `[R, d]` and Cholesky parameters `[R, m]`.
    fn decode_rows(&self, t: &mut Tape, ctx: Var, anchors: Option<&[&PoseSequence]>) -> Result<Vec<(Var, Var)>> {
        let cfg = &self.config;
        let l = &self.layout;
        let d = cfg.variant.pose_dim();
        let rows = t.value(ctx).rows();
        let (iw, ib) = (t.param(l.init_w), t.param(l.init_b));
        let mut h = t.affine(ctx, iw, Some(ib))?;
        let mut c = t.input(Tensor::zeros(vec![rows, cfg.decoder_state]));
        let (w_ih, b, w_hh) = (t.param(l.decoder.w_ih), t.param(l.decoder.bias), t.param(l.decoder.w_hh));
        let xg = t.affine(ctx, w_ih, Some(b))?;
        let (ow, ob) = (t.param(l.out_w), t.param(l.out_b));
        let inv = 1.0 / cfg.position_scale;
        let mut scale = vec![inv, inv];
        if d == 3 {
            scale.push(1.0);
        }
        let mut out = Vec::with_capacity(cfg.future_steps);
        for step in 0..cfg.future_steps {
            (h, c) = t.lstm_cell_projected(xg, h, c, w_hh, cfg.decoder_state)?;
            let raw = t.affine(h, ow, Some(ob))?;
            let mu = t.slice_cols(raw, 0, d)?;
            let mu = t.scale_cols(mu, scale.clone())?;
            let chol = t.slice_cols(raw, d, chol_len(d))?;
            let mean = match anchors {
                Some(a) => {
                    let mut data = Vec::with_capacity(rows * d);
                    for seq in a {
                        data.extend_from_slice(&seq.poses()[step].as_array()[..d]);
                    }
                    let a = t.input(Tensor::matrix(rows, d, data)?);
                    t.add(mu, a)?
                }
                None => mu,
            };
            out.push((mean, chol));
        }
        Ok(out)
    }

    fn onehot_tensor(&self, labels: &[ManeuverLabel]) -> Result<Tensor> {
        let (p, q) = (self.config.num_sections, self.config.num_accel_classes);
        let mut data = Vec::with_capacity(labels.len() * (p + q));
        for l in labels {
            if l.location.get() > p {
                return Err(Error::invalid(format!("label {l} outside {p} sections")));
            }
            data.extend(one_hot(p, l.location.index()));
            data.extend(one_hot(q, l.acceleration.index()));
        }
        Tensor::matrix(labels.len(), p + q, data)
    }

    fn context(&self, t: &mut Tape, enc: &Encoded, labels: Option<&[ManeuverLabel]>) -> Result<Var> {
        match (self.config.variant.has_heads(), labels) {
            (false, _) => t.concat(&[enc.ego_code, enc.pooled]),
            (true, Some(l)) => {
                let oh = t.input(self.onehot_tensor(l)?);
                t.concat(&[enc.ego_code, enc.pooled, oh])
            }
            (true, None) => Err(Error::Variant("maneuver one-hots required".into())),
        }
    }

    /// Teacher-forced training loss for a batch of labeled samples: the
    /// trajectory NLL under the true maneuver plus, for variants with heads,
    /// `maneuver_weight` times the maneuver cross-entropy.
    pub fn batch_loss(
        &self,
        t: &mut Tape,
        samples: &[&SceneSample],
        anchors: Option<&AnchorSet>,
        bn: BatchNormMode,
        maneuver_weight: f64,
    ) -> Result<BatchLoss> {
        if samples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let anchors = self.check_anchors(anchors)?;
        let cfg = &self.config;
        let d = cfg.variant.pose_dim();
        let labels: Option<Vec<ManeuverLabel>> = if cfg.variant.has_heads() {
            Some(
                samples
                    .iter()
                    .map(|s| s.label.ok_or_else(|| Error::Labeling(format!("sample {:?} has no label", s.key()))))
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        for s in samples {
            if s.ego_future.len() != cfg.future_steps {
                return Err(Error::shape(format!(
                    "sample {:?}: future of {} steps, model expects {}",
                    s.key(),
                    s.ego_future.len(),
                    cfg.future_steps
                )));
            }
        }
        let enc = self.forward(t, samples, bn)?;
        let ctx = self.context(t, &enc, labels.as_deref())?;
        let rows_anchor: Option<Vec<&PoseSequence>> = match (anchors, &labels) {
            (Some(a), Some(l)) => Some(l.iter().map(|l| a.lookup(l)).collect()),
            _ => None,
        };
        let steps = self.decode_rows(t, ctx, rows_anchor.as_deref())?;
        let ones = t.input(Tensor::matrix(1, 2, vec![1.0, 1.0])?);
        let mut traj: Option<Var> = None;
        let mut sq: Option<Var> = None;
        for (step, (mean, chol)) in steps.into_iter().enumerate() {
            let mut target = Vec::with_capacity(samples.len() * d);
            for s in samples {
                target.extend_from_slice(&s.ego_future.poses()[step].as_array()[..d]);
            }
            let target = Tensor::matrix(samples.len(), d, target)?;
            let neg_xy: Vec<f64> = target.data().chunks(d).flat_map(|r| [-r[0], -r[1]]).collect();
            let neg_xy = t.input(Tensor::matrix(samples.len(), 2, neg_xy)?);
            let angular = (d == 3).then_some(2);
            let nll = t.gaussian_nll(&target, mean, chol, angular)?;
            let xy = t.slice_cols(mean, 0, 2)?;
            let diff = t.add(xy, neg_xy)?;
            let diff2 = t.mul(diff, diff)?;
            let e = t.affine(diff2, ones, None)?;
            traj = Some(match traj {
                Some(acc) => t.add(acc, nll)?,
                None => nll,
            });
            sq = Some(match sq {
                Some(acc) => t.add(acc, e)?,
                None => e,
            });
        }
        let trajectory = traj.expect("future_steps > 0");
        let sq_error = sq.expect("future_steps > 0");
        let mut per_sample = trajectory;
        let mut maneuver = None;
        if let Some(l) = &labels {
            let (loc, acc) = self.head_logits(t, &enc)?;
            let loc = t.log_softmax(loc);
            let acc = t.log_softmax(acc);
            let lp = t.pick(loc, l.iter().map(|l| l.location.index()).collect())?;
            let ap = t.pick(acc, l.iter().map(|l| l.acceleration.index()).collect())?;
            let ce = t.add(lp, ap)?;
            let ce = t.scale(ce, -1.0);
            maneuver = Some(ce);
            let weighted = t.scale(ce, maneuver_weight);
            per_sample = t.add(per_sample, weighted)?;
        }
        if let Some(i) = t.value(per_sample).data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite loss for sample {:?}", samples[i].key())));
        }
        let total = t.sum(per_sample);
        let loss = t.scale(total, 1.0 / samples.len() as f64);
        Ok(BatchLoss {
            loss,
            per_sample,
            trajectory,
            sq_error,
            maneuver,
        })
    }

    /// Final hidden states of the ego vehicle and each neighbor.
    pub fn encode(&self, sample: &SceneSample) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let batch = self.build_batch(&[sample])?;
        let ego = batch.ego_rows[0];
        let nb = batch.neighbor_rows.clone();
        let mut t = Tape::new(&self.params);
        let h = self.encode_rows(&mut t, &batch.steps)?;
        let v = t.value(h);
        Ok((v.row_slice(ego).to_vec(), nb.iter().map(|&r| v.row_slice(r).to_vec()).collect()))
    }

    /// Pooling vector from neighbor codes and their ego-frame poses
    /// (inference-mode batch norm).
    pub fn pool(&self, neighbor_codes: &[Vec<f64>], neighbor_rel_poses: &[Pose]) -> Result<Vec<f64>> {
        let h = self.config.encoder_state;
        if neighbor_codes.len() != neighbor_rel_poses.len() || neighbor_codes.iter().any(|c| c.len() != h) {
            return Err(Error::shape(format!(
                "pool: {} neighbor codes (width {h}) for {} poses",
                neighbor_codes.len(),
                neighbor_rel_poses.len()
            )));
        }
        let n = neighbor_codes.len();
        let s = self.config.position_scale;
        let feat = neighbor_rel_poses
            .iter()
            .flat_map(|p| [p.x * s, p.y * s, p.theta.cos(), p.theta.sin()])
            .collect();
        let mut t = Tape::new(&self.params);
        let codes = t.input(Tensor::matrix(n, h, neighbor_codes.concat())?);
        let v = self.pool_rows(&mut t, codes, Tensor::matrix(n, 4, feat)?, &[(0, n)], BatchNormMode::Inference)?;
        Ok(t.value(v).data().to_vec())
    }

    fn code_inputs(&self, t: &mut Tape, ego_code: &[f64], pooled: &[f64]) -> Result<Encoded> {
        if ego_code.len() != self.config.encoder_state || pooled.len() != self.config.pooling_mlp {
            return Err(Error::shape(format!(
                "ego code of {} and pooling vector of {} entries",
                ego_code.len(),
                pooled.len()
            )));
        }
        Ok(Encoded {
            ego_code: t.input(Tensor::row(ego_code.to_vec())),
            pooled: t.input(Tensor::row(pooled.to_vec())),
        })
    }

    /// `(location probabilities, acceleration probabilities)`.
    pub fn maneuver_heads(&self, ego_code: &[f64], pooled: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut t = Tape::new(&self.params);
        let enc = self.code_inputs(&mut t, ego_code, pooled)?;
        let (l, a) = self.head_logits(&mut t, &enc)?;
        let l = t.softmax(l);
        let a = t.softmax(a);
        Ok((t.value(l).data().to_vec(), t.value(a).data().to_vec()))
    }

    /// Decodes one trajectory. `maneuver` is required exactly for the
    /// variants with heads; `anchor` exactly for the anchor variant.
    pub fn decode(
        &self,
        ego_code: &[f64],
        pooled: &[f64],
        maneuver: Option<ManeuverLabel>,
        anchor: Option<&PoseSequence>,
    ) -> Result<Vec<GaussianStep>> {
        let v = self.config.variant;
        if maneuver.is_some() != v.has_heads() || anchor.is_some() != v.uses_anchors() {
            return Err(Error::Variant(format!(
                "variant {v} takes {} maneuver and {} anchor",
                if v.has_heads() { "a" } else { "no" },
                if v.uses_anchors() { "an" } else { "no" }
            )));
        }
        if let Some(a) = anchor {
            if a.len() != self.config.future_steps {
                return Err(Error::shape(format!(
                    "anchor of {} steps, model expects {}",
                    a.len(),
                    self.config.future_steps
                )));
            }
        }
        let mut t = Tape::new(&self.params);
        let enc = self.code_inputs(&mut t, ego_code, pooled)?;
        let labels = maneuver.map(|m| vec![m]);
        let ctx = self.context(&mut t, &enc, labels.as_deref())?;
        let anchors = anchor.map(|a| vec![a]);
        let steps = self.decode_rows(&mut t, ctx, anchors.as_deref())?;
        Ok(steps
            .into_iter()
            .map(|(m, c)| GaussianStep {
                mean: t.value(m).data().to_vec(),
                chol: t.value(c).data().to_vec(),
            })
            .collect())
    }

    pub fn predict(&self, sample: &SceneSample, anchors: Option<&AnchorSet>, mode: DecodeMode) -> Result<Prediction> {
        Ok(self.predict_batch(std::slice::from_ref(sample), anchors, mode)?.remove(0))
    }

    /// Predictions for many samples, computed in parallel chunks. Results
    /// do not depend on the chunking.
    pub fn predict_batch(&self, samples: &[SceneSample], anchors: Option<&AnchorSet>, mode: DecodeMode) -> Result<Vec<Prediction>> {
        mode.check(self.config.variant)?;
        let anchors = self.check_anchors(anchors)?;
        let chunk = match mode {
            DecodeMode::Weighted | DecodeMode::FullMixture => 16,
            _ => 64,
        };
        let refs: Vec<&SceneSample> = samples.iter().collect();
        let chunks: Vec<&[&SceneSample]> = refs.chunks(chunk).collect();
        let out = par::map(&chunks, |c| self.predict_chunk(c, anchors, mode));
        let mut all = Vec::with_capacity(samples.len());
        for r in out {
            all.extend(r?);
        }
        Ok(all)
    }

    fn predict_chunk(&self, samples: &[&SceneSample], anchors: Option<&AnchorSet>, mode: DecodeMode) -> Result<Vec<Prediction>> {
        let cfg = &self.config;
        let d = cfg.variant.pose_dim();
        let b = samples.len();
        let mut t = Tape::new(&self.params);
        let enc = self.forward(&mut t, samples, BatchNormMode::Inference)?;
        let to_seq = |means: &[Vec<f64>]| -> Result<PoseSequence> {
            let poses = means
                .iter()
                .map(|m| Pose::new(m[0], m[1], if d == 3 { m[2] } else { 0.0 }))
                .collect();
            PoseSequence::new(poses, cfg.dt)
        };
        let read = |t: &Tape, steps: &[(Var, Var)], row: usize| -> Vec<GaussianStep> {
            steps
                .iter()
                .map(|(m, c)| GaussianStep {
                    mean: t.value(*m).row_slice(row).to_vec(),
                    chol: t.value(*c).row_slice(row).to_vec(),
                })
                .collect()
        };
        if mode == DecodeMode::Plain {
            let ctx = self.context(&mut t, &enc, None)?;
            let steps = self.decode_rows(&mut t, ctx, None)?;
            return (0..b)
                .map(|i| {
                    let g = read(&t, &steps, i);
                    let means: Vec<Vec<f64>> = g.into_iter().map(|g| g.mean).collect();
                    Ok(Prediction {
                        mean: to_seq(&means)?,
                        loc_probs: None,
                        acc_probs: None,
                        maneuver: None,
                        mixture: None,
                    })
                })
                .collect();
        }
        let (p, q) = (cfg.num_sections, cfg.num_accel_classes);
        let k_total = p * q;
        let (lv, av) = self.head_logits(&mut t, &enc)?;
        let lv = t.softmax(lv);
        let av = t.softmax(av);
        let loc: Vec<Vec<f64>> = (0..b).map(|i| t.value(lv).row_slice(i).to_vec()).collect();
        let acc: Vec<Vec<f64>> = (0..b).map(|i| t.value(av).row_slice(i).to_vec()).collect();
        let probs: Vec<Vec<f64>> = (0..b)
            .map(|i| (0..k_total).map(|k| loc[i][k / q] * acc[i][k % q]).collect())
            .collect();
        let best: Vec<ManeuverLabel> = probs
            .iter()
            .map(|pr| ManeuverLabel::from_joint_index(argmax(pr) + 1, p))
            .collect::<Result<_>>()?;
        let base = t.concat(&[enc.ego_code, enc.pooled])?;
        let mut preds = Vec::with_capacity(b);
        if mode == DecodeMode::MapBest {
            let oh = t.input(self.onehot_tensor(&best)?);
            let ctx = t.concat(&[base, oh])?;
            let rows_anchor: Option<Vec<&PoseSequence>> = anchors.map(|a| best.iter().map(|l| a.lookup(l)).collect());
            let steps = self.decode_rows(&mut t, ctx, rows_anchor.as_deref())?;
            for i in 0..b {
                let means: Vec<Vec<f64>> = read(&t, &steps, i).into_iter().map(|g| g.mean).collect();
                preds.push(Prediction {
                    mean: to_seq(&means)?,
                    loc_probs: Some(loc[i].clone()),
                    acc_probs: Some(acc[i].clone()),
                    maneuver: Some(best[i]),
                    mixture: None,
                });
            }
            return Ok(preds);
        }
        let all_labels: Vec<ManeuverLabel> = (1..=k_total)
            .map(|k| ManeuverLabel::from_joint_index(k, p))
            .collect::<Result<_>>()?;
        let rep_rows: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, k_total)).collect();
        let rep_labels: Vec<ManeuverLabel> = (0..b).flat_map(|_| all_labels.iter().copied()).collect();
        let rep = t.gather_rows(base, rep_rows)?;
        let oh = t.input(self.onehot_tensor(&rep_labels)?);
        let ctx = t.concat(&[rep, oh])?;
        let rows_anchor: Option<Vec<&PoseSequence>> = anchors.map(|a| rep_labels.iter().map(|l| a.lookup(l)).collect());
        let steps = self.decode_rows(&mut t, ctx, rows_anchor.as_deref())?;
        for i in 0..b {
            let components: Vec<Vec<GaussianStep>> = (0..k_total).map(|k| read(&t, &steps, i * k_total + k)).collect();
            let mut means = vec![vec![0.0; d]; cfg.future_steps];
            for (k, comp) in components.iter().enumerate() {
                let w = probs[i][k];
                for (m, g) in means.iter_mut().zip(comp) {
                    for (a, v) in m.iter_mut().zip(&g.mean) {
                        *a += w * v;
                    }
                }
            }
            preds.push(Prediction {
                mean: to_seq(&means)?,
                loc_probs: Some(loc[i].clone()),
                acc_probs: Some(acc[i].clone()),
                maneuver: Some(best[i]),
                mixture: Some(MixturePrediction {
                    anchor_probs: probs[i].clone(),
                    components,
                    anchors: anchors.map(|a| a.anchors().to_vec()),
                }),
            });
        }
        Ok(preds)
    }

    /// Sets the batch-norm running statistics to the population statistics
    /// of `samples` under the current weights.
    pub fn recalibrate_batch_norm(&mut self, samples: &[SceneSample], chunk: usize) -> Result<()> {
        let refs: Vec<&SceneSample> = samples.iter().collect();
        let chunks: Vec<&[&SceneSample]> = refs.chunks(chunk.max(1)).collect();
        let parts = par::map(&chunks, |c| -> Result<Vec<RunningStatUpdate>> {
            let mut t = Tape::new(&self.params);
            self.forward(&mut t, c, BatchNormMode::Train)?;
            Ok(t.running_stat_updates().to_vec())
        });
        let mut all = Vec::new();
        for p in parts {
            all.extend(p?);
        }
        RunningStatUpdate::assign_population(&all, &mut self.params);
        Ok(())
    }

    /// Mean per-sample joint NLL over `samples` with inference-mode batch
    /// norm, reduced in a fixed chunk order.
    pub fn mean_loss(&self, samples: &[SceneSample], anchors: Option<&AnchorSet>, chunk: usize) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Evaluation("no samples".into()));
        }
        let refs: Vec<&SceneSample> = samples.iter().collect();
        let chunks: Vec<&[&SceneSample]> = refs.chunks(chunk.max(1)).collect();
        let sums = par::map(&chunks, |c| -> Result<f64> {
            let mut t = Tape::new(&self.params);
            let l = self.batch_loss(&mut t, c, anchors, BatchNormMode::Inference, 1.0)?;
            Ok(t.value(l.per_sample).data().iter().sum())
        });
        let mut total = 0.0;
        for s in sums {
            total += s?;
        }
        Ok(total / samples.len() as f64)
    }

    /// Serializes the model with a JSON `meta` header and the digest of the
    /// anchors it was trained against.
    pub fn checkpoint_bytes(&self, meta: &serde_json::Value, anchors: Option<&AnchorSet>) -> Result<Vec<u8>> {
        let header = serde_json::json!({ "model": self.config, "meta": meta });
        let mut w = Writer::default();
        w.bytes(CKPT_MAGIC);
        w.u32(CKPT_VERSION);
        w.string(&serde_json::to_string(&header)?);
        w.string(&anchors.map(AnchorSet::digest).unwrap_or_default());
        self.params.write(&mut w);
        Ok(w.buf)
    }

    /// Loads a checkpoint. Anchor variants must be given the same anchor set
    /// they were trained with.
    pub fn from_checkpoint_bytes(bytes: &[u8], anchors: Option<&AnchorSet>) -> Result<(Model, serde_json::Value)> {
        let mut r = Reader::new(bytes, "checkpoint");
        if r.take(CKPT_MAGIC.len())? != CKPT_MAGIC {
            return Err(Error::format("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::format(format!("checkpoint version {version}, expected {CKPT_VERSION}")));
        }
        let header: serde_json::Value = serde_json::from_str(&r.string()?)?;
        let digest = r.string()?;
        let params = ParamStore::read(&mut r)?;
        r.finish()?;
        let config: ModelConfig = serde_json::from_value(header["model"].clone())?;
        if config.variant.uses_anchors() {
            let a = anchors.ok_or_else(|| Error::Variant("checkpoint of variant 3d-a needs its anchor set".into()))?;
            if a.digest() != digest {
                return Err(Error::Integrity(format!(
                    "anchor set {} does not match the checkpoint's {digest}",
                    a.digest()
                )));
            }
        }
        let model = Model::from_params(config, &params)?;
        Ok((model, header["meta"].clone()))
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>, meta: &serde_json::Value, anchors: Option<&AnchorSet>) -> Result<()> {
        std::fs::write(path, self.checkpoint_bytes(meta, anchors)?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>, anchors: Option<&AnchorSet>) -> Result<(Model, serde_json::Value)> {
        Model::from_checkpoint_bytes(&std::fs::read(path)?, anchors)
    }
}

const CKPT_MAGIC: &[u8] = b"RPCKPT01";
const CKPT_VERSION: u32 = 1;
