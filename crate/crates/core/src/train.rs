//! The training loop: keyframe sampling, render -> loss -> backward ->
//! Adam update, anchor refinement on a fixed window, the frequency-pyramid
//! activation window, and checkpointing.
//!
//! A full run is a pure function of (config, dataset): keyframe sampling
//! and refinement randomness are derived from (seed, iteration), so equal
//! seeds reproduce runs bitwise and a resumed run replays the remainder of
//! the schedule exactly.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraPose, PinholeCamera};
use crate::datakit::{visible_indices, Dataset};
use crate::decoders::{
    afme_backward, afme_embed, decode_anchor, decode_anchor_backward, decode_positions,
    AppearanceEmbedding, DecoderGradAccum, DecoderParams, GaussianGrads, Mlp, ViewContext,
};
use crate::img::ImageBuf;
use crate::losses::{psnr, ssim, total_loss, FrequencyPyramidConfig, LossWeights};
use crate::render::{
    project, project_backward, rasterize, rasterize_backward, Splat2D, NEAR_PLANE,
};
use crate::scene::{
    Anchor, AnchorSet, AnchorStats, GaussianGradRecord, InitPolicy, PointCloud, RefinementConfig,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("keyframe rule selected {0} of {1} frames; need a non-trivial split")]
    DegenerateSplit(usize, usize),
    #[error("dataset has {0} frames; need at least 2")]
    TooFewFrames(usize),
    #[error("scene error: {0}")]
    Scene(#[from] crate::scene::SceneError),
    #[error("loss error: {0}")]
    Loss(#[from] crate::losses::LossError),
    #[error("render error: {0}")]
    Render(#[from] crate::render::RenderError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint {path}: {msg}")]
    BadCheckpoint { path: PathBuf, msg: String },
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Per-group Adam learning rates. The offsets rate decays exponentially to
/// its final value over the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr_features: f64,
    pub lr_offsets: f64,
    pub lr_offsets_final: f64,
    pub lr_scales: f64,
    pub lr_mlps: f64,
    pub lr_afme: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr_features: 0.0075,
            lr_offsets: 0.01,
            lr_offsets_final: 0.0001,
            lr_scales: 0.007,
            lr_mlps: 0.002,
            lr_afme: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// How training frames are selected out of the dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum KeyframeRule {
    /// Respect the dataset's keyframe flags verbatim.
    Flags,
    /// Every n-th frame trains, the rest are held out.
    EveryNth { n: usize },
    /// A frame becomes a keyframe when the fraction of its visible cloud
    /// points shared with the previous keyframe drops below the threshold.
    Covisibility { min_shared: f64 },
}

impl Default for KeyframeRule {
    fn default() -> Self {
        KeyframeRule::Flags
    }
}

/// Full training configuration with documented defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: u64,
    /// Gaussians per anchor.
    pub k: usize,
    pub feature_dim: usize,
    /// Appearance embedding dimension, zero disables the encoder.
    pub na: usize,
    pub hidden: usize,
    /// Voxel edge for anchor construction, meters.
    pub voxel_size: f64,
    pub weights: LossWeights,
    pub refinement: RefinementConfig,
    pub fpr: FrequencyPyramidConfig,
    pub optimizer: OptimizerConfig,
    pub init: InitPolicy,
    pub keyframe_rule: KeyframeRule,
    pub seed: u64,
    /// Checkpoint cadence in iterations (rounded up to a refinement-window
    /// multiple so stat windows never span a checkpoint); zero means only
    /// the final checkpoint.
    pub checkpoint_every: u64,
    /// Merge keyframe clouds one per epoch instead of all up front.
    pub incremental_merge: bool,
    /// Replace voxelized anchors with uniform-random anchors of equal
    /// count (structure-prior ablation).
    pub random_init: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 30_000,
            k: 10,
            feature_dim: 32,
            na: 32,
            hidden: 32,
            voxel_size: 0.001,
            weights: LossWeights::default(),
            refinement: RefinementConfig::default(),
            fpr: FrequencyPyramidConfig::default(),
            optimizer: OptimizerConfig::default(),
            init: InitPolicy::default(),
            keyframe_rule: KeyframeRule::Flags,
            seed: 0,
            checkpoint_every: 0,
            incremental_merge: false,
            random_init: false,
        }
    }
}

impl TrainConfig {
    /// Defaults sized for the bundled synthetic smoke scene: a coarser
    /// voxel grid for the desk-scale working volume and a frequency window
    /// scaled to the short run.
    pub fn smoke_preset() -> Self {
        Self {
            iterations: 2000,
            voxel_size: 0.05,
            fpr: FrequencyPyramidConfig {
                active_window: (400, 1600),
                ..FrequencyPyramidConfig::default()
            },
            refinement: RefinementConfig {
                epsilon_g: 0.02,
                ..RefinementConfig::default()
            },
            ..Self::default()
        }
    }
}

/// One image/pose/cloud training unit.
#[derive(Debug, Clone)]
pub struct Keyframe {
    pub id: usize,
    pub image: ImageBuf,
    pub pose: CameraPose,
    pub cloud: PointCloud,
}

/// Split the dataset's frame indices into train keyframes and test frames.
pub fn split_train_test(
    dataset: &Dataset,
    rule: &KeyframeRule,
) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
    let n = dataset.frames.len();
    if n < 2 {
        return Err(TrainError::TooFewFrames(n));
    }
    let train: Vec<usize> = match rule {
        KeyframeRule::Flags => dataset
            .frames
            .iter()
            .enumerate()
            .filter(|(_, f)| f.is_keyframe)
            .map(|(i, _)| i)
            .collect(),
        KeyframeRule::EveryNth { n: step } => {
            assert!(*step >= 1, "step must be positive");
            (0..n).filter(|i| i % step == 0).collect()
        }
        KeyframeRule::Covisibility { min_shared } => {
            let mut train = Vec::new();
            let mut last_visible: BTreeSet<usize> = BTreeSet::new();
            for i in 0..n {
                let vis: BTreeSet<usize> =
                    visible_indices(&dataset.cloud, &dataset.frames[i].pose, &dataset.camera)
                        .into_iter()
                        .collect();
                if train.is_empty() {
                    train.push(i);
                    last_visible = vis;
                    continue;
                }
                let shared = vis.intersection(&last_visible).count() as f64;
                let frac = if vis.is_empty() {
                    0.0
                } else {
                    shared / vis.len() as f64
                };
                if frac < *min_shared {
                    train.push(i);
                    last_visible = vis;
                }
            }
            train
        }
    };
    if train.is_empty() || train.len() == n {
        return Err(TrainError::DegenerateSplit(train.len(), n));
    }
    let train_set: BTreeSet<usize> = train.iter().copied().collect();
    let test: Vec<usize> = (0..n).filter(|i| !train_set.contains(i)).collect();
    Ok((train, test))
}

// ---------------------------------------------------------------------
// Optimizer state
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
struct AdamBuf {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamBuf {
    fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, t: u64, cfg: &OptimizerConfig) {
        debug_assert_eq!(params.len(), grads.len());
        debug_assert_eq!(params.len(), self.m.len());
        let b1t = 1.0 - cfg.beta1.powi(t as i32);
        let b2t = 1.0 - cfg.beta2.powi(t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }

    /// Drop the rows of pruned anchors and append zeroed rows for grown
    /// ones, keeping moments aligned with the anchor list.
    fn remodel(&mut self, row_len: usize, removed: &[usize], added: usize) {
        if !removed.is_empty() {
            let removed_set: BTreeSet<usize> = removed.iter().copied().collect();
            let rows = self.m.len() / row_len;
            let mut new_m = Vec::with_capacity((rows - removed.len() + added) * row_len);
            let mut new_v = Vec::with_capacity(new_m.capacity());
            for r in 0..rows {
                if !removed_set.contains(&r) {
                    new_m.extend_from_slice(&self.m[r * row_len..(r + 1) * row_len]);
                    new_v.extend_from_slice(&self.v[r * row_len..(r + 1) * row_len]);
                }
            }
            self.m = new_m;
            self.v = new_v;
        }
        self.m.extend(std::iter::repeat(0.0).take(added * row_len));
        self.v.extend(std::iter::repeat(0.0).take(added * row_len));
    }
}

#[derive(Debug, Clone)]
struct MlpAdam {
    layers: Vec<(AdamBuf, AdamBuf)>,
}

impl MlpAdam {
    fn for_mlp(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| (AdamBuf::zeros(l.w.len()), AdamBuf::zeros(l.b.len())))
                .collect(),
        }
    }

    fn step(
        &mut self,
        mlp: &mut Mlp,
        grads: &crate::decoders::MlpGrads,
        lr: f64,
        t: u64,
        cfg: &OptimizerConfig,
    ) {
        for (i, layer) in mlp.layers.iter_mut().enumerate() {
            self.layers[i]
                .0
                .step(&mut layer.w, &grads.layers[i].0, lr, t, cfg);
            self.layers[i]
                .1
                .step(&mut layer.b, &grads.layers[i].1, lr, t, cfg);
        }
    }
}

#[derive(Debug, Clone)]
struct OptState {
    t: u64,
    features: AdamBuf,
    offsets: AdamBuf,
    scales: AdamBuf,
    opacity: MlpAdam,
    color: MlpAdam,
    rotation: MlpAdam,
    scale: MlpAdam,
    afme: MlpAdam,
}

impl OptState {
    fn new(anchors: &AnchorSet, decoders: &DecoderParams) -> Self {
        let n = anchors.len();
        Self {
            t: 0,
            features: AdamBuf::zeros(n * anchors.feature_dim),
            offsets: AdamBuf::zeros(n * anchors.k * 3),
            scales: AdamBuf::zeros(n * 3),
            opacity: MlpAdam::for_mlp(&decoders.opacity),
            color: MlpAdam::for_mlp(&decoders.color),
            rotation: MlpAdam::for_mlp(&decoders.rotation),
            scale: MlpAdam::for_mlp(&decoders.scale),
            afme: MlpAdam::for_mlp(&decoders.afme),
        }
    }
}

// ---------------------------------------------------------------------
// Training state and the step
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
struct RefineStats {
    anchors: Vec<AnchorStats>,
    slots: Vec<Vec<GaussianGradRecord>>,
}

impl RefineStats {
    fn reset(&mut self, n_anchors: usize, k: usize) {
        self.anchors = vec![AnchorStats::default(); n_anchors];
        self.slots = vec![vec![GaussianGradRecord::default(); k]; n_anchors];
    }
}

/// Everything the loop owns between steps.
pub struct TrainState {
    pub anchors: AnchorSet,
    pub decoders: DecoderParams,
    pub iteration: u64,
    opt: OptState,
    stats: RefineStats,
}

/// Losses logged for one iteration.
#[derive(Debug, Clone, Serialize)]
pub struct LossRecord {
    pub iter: u64,
    pub l1: f64,
    pub ssim: f64,
    pub vol: f64,
    pub hf: f64,
    pub total: f64,
}

/// Anchor visibility gate used both for decoding and for the statistics
/// window: positive depth and projected center within one image size of
/// the bounds.
pub fn anchor_visible(center: &Vector3<f64>, pose: &CameraPose, cam: &PinholeCamera) -> bool {
    let p = pose.transform(center);
    if p.z <= NEAR_PLANE {
        return false;
    }
    let u = cam.fx * p.x / p.z + cam.cx;
    let v = cam.fy * p.y / p.z + cam.cy;
    let mx = cam.width as f64;
    let my = cam.height as f64;
    u >= -mx && u < 2.0 * mx && v >= -my && v < 2.0 * my
}

impl TrainState {
    /// Build the initial state from the merged keyframe clouds (or random
    /// anchors of equal count for the structure ablation).
    pub fn initialize(
        config: &TrainConfig,
        keyframe_clouds: &[&PointCloud],
    ) -> Result<TrainState, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut anchors = AnchorSet::empty(config.k, config.feature_dim, config.voxel_size);
        for cloud in keyframe_clouds {
            anchors.merge_new_keyframe_anchors(cloud, &config.init, &mut rng)?;
        }
        if config.random_init {
            anchors = random_anchor_set(config, keyframe_clouds, anchors.len(), &mut rng)?;
        }
        let decoders = DecoderParams::init(
            config.k,
            config.feature_dim,
            config.na,
            config.hidden,
            &mut rng,
        );
        let opt = OptState::new(&anchors, &decoders);
        let mut stats = RefineStats::default();
        stats.reset(anchors.len(), config.k);
        Ok(TrainState {
            anchors,
            decoders,
            iteration: 0,
            opt,
            stats,
        })
    }

    pub fn gaussian_count(&self) -> usize {
        self.anchors.len() * self.anchors.k
    }
}

/// Uniform-random anchors over the cloud bounding box, equal in count to
/// the voxelized set they replace.
fn random_anchor_set(
    config: &TrainConfig,
    clouds: &[&PointCloud],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<AnchorSet, TrainError> {
    let mut lo = Vector3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut hi = -lo;
    let mut any = false;
    for cloud in clouds {
        for p in &cloud.points {
            lo = lo.inf(p);
            hi = hi.sup(p);
            any = true;
        }
    }
    if !any {
        lo = Vector3::new(-0.5, -0.5, -0.5);
        hi = Vector3::new(0.5, 0.5, 0.5);
    }
    let mut set = AnchorSet::empty(config.k, config.feature_dim, config.voxel_size);
    for _ in 0..count {
        let c = Vector3::new(
            rng.gen_range(lo.x..=hi.x),
            rng.gen_range(lo.y..=hi.y),
            rng.gen_range(lo.z..=hi.z),
        );
        let anchor = Anchor::new(
            c,
            config.k,
            config.feature_dim,
            config.voxel_size,
            &config.init,
            rng,
        );
        set.anchors.push(anchor);
    }
    set.rebuild_occupancy();
    Ok(set)
}

/// One optimization step on a sampled keyframe. Returns the loss record;
/// mutates parameters, optimizer moments, and refinement statistics.
pub fn train_step(
    state: &mut TrainState,
    frame_image: &ImageBuf,
    frame_pose: &CameraPose,
    camera: &PinholeCamera,
    config: &TrainConfig,
) -> Result<LossRecord, TrainError> {
    let iter = state.iteration;
    let cam_center = frame_pose.camera_center();

    // Appearance embedding for this view.
    let (embedding, afme_cache) = if config.na > 0 {
        let (e, c) = afme_embed(frame_pose, &state.decoders.afme);
        (e, Some(c))
    } else {
        (AppearanceEmbedding::default(), None)
    };

    // Decode visible anchors.
    let visible: Vec<usize> = (0..state.anchors.len())
        .filter(|&i| anchor_visible(&state.anchors.anchors[i].center, frame_pose, camera))
        .collect();
    let decoded: Vec<_> = visible
        .iter()
        .map(|&i| {
            let view = ViewContext::new(&state.anchors.anchors[i].center, &cam_center);
            decode_anchor(&state.anchors.anchors[i], &view, &embedding, &state.decoders)
        })
        .collect();

    // Project active Gaussians into splats.
    let mut splats: Vec<Splat2D> = Vec::new();
    let mut splat_src: Vec<(usize, usize)> = Vec::new(); // (visible idx, slot)
    let mut vol_scales: Vec<Vector3<f64>> = Vec::new();
    let mut vol_src: Vec<(usize, usize)> = Vec::new();
    for (vi, dec) in decoded.iter().enumerate() {
        for slot in 0..state.anchors.k {
            if !dec.is_active(slot) {
                continue;
            }
            vol_scales.push(dec.scales[slot]);
            vol_src.push((vi, slot));
            let g = dec.gaussian(slot);
            if let Some(s) = project(&g, frame_pose, camera) {
                splats.push(s);
                splat_src.push((vi, slot));
            }
        }
    }

    let output = rasterize(&splats, camera)?;
    let loss = total_loss(
        &output.image,
        frame_image,
        &vol_scales,
        &config.weights,
        &config.fpr,
        iter,
    )?;

    // Backward through the rasterizer and projection.
    let splat_grads = rasterize_backward(&splats, camera, &output, &loss.d_render);
    let mut upstream: Vec<GaussianGrads> = decoded
        .iter()
        .map(|_| GaussianGrads::zeros(state.anchors.k))
        .collect();
    for (si, grad) in splat_grads.iter().enumerate() {
        let (vi, slot) = splat_src[si];
        let g = decoded[vi].gaussian(slot);
        let (d_pos, d_quat, d_scale) =
            project_backward(&g, frame_pose, camera, &grad.d_center, &grad.d_cov);
        let u = &mut upstream[vi];
        u.d_position[slot] += d_pos;
        u.d_opacity[slot] += grad.d_alpha;
        for c in 0..3 {
            u.d_color[slot][c] += grad.d_color[c];
        }
        for c in 0..4 {
            u.d_quat[slot][c] += d_quat[c];
        }
        u.d_scale[slot] += d_scale;

        // Screen-space positional gradient drives anchor growing.
        let gi = visible[vi];
        state.stats.slots[gi][slot].grad_sum += grad.d_center.norm();
        state.stats.slots[gi][slot].count += 1;
    }
    // Volume-regularizer gradients reach every active Gaussian.
    for (k, (vi, slot)) in vol_src.iter().enumerate() {
        upstream[*vi].d_scale[*slot] += loss.d_scales[k];
    }

    // Decoder backward and per-anchor parameter gradients.
    let mut accum = DecoderGradAccum::zeros(&state.decoders);
    let n_anchors = state.anchors.len();
    let fdim = state.anchors.feature_dim;
    let k = state.anchors.k;
    let mut g_features = vec![0.0; n_anchors * fdim];
    let mut g_offsets = vec![0.0; n_anchors * k * 3];
    let mut g_scales = vec![0.0; n_anchors * 3];
    for (vi, dec) in decoded.iter().enumerate() {
        if upstream[vi].is_zero() {
            continue;
        }
        let gi = visible[vi];
        let grads = decode_anchor_backward(
            &state.anchors.anchors[gi],
            &state.decoders,
            dec,
            &upstream[vi],
            &mut accum,
        );
        g_features[gi * fdim..(gi + 1) * fdim].copy_from_slice(&grads.d_feature);
        for (s, o) in grads.d_offsets.iter().enumerate() {
            let off = (gi * k + s) * 3;
            g_offsets[off] = o.x;
            g_offsets[off + 1] = o.y;
            g_offsets[off + 2] = o.z;
        }
        g_scales[gi * 3] = grads.d_scale.x;
        g_scales[gi * 3 + 1] = grads.d_scale.y;
        g_scales[gi * 3 + 2] = grads.d_scale.z;
    }
    if let Some(cache) = &afme_cache {
        let d_emb = accum.d_embedding.clone();
        afme_backward(&state.decoders, cache, &d_emb, &mut accum);
    }

    // Opacity statistics for pruning: every decoded (observed) anchor
    // accumulates its clamped opacities.
    for (vi, dec) in decoded.iter().enumerate() {
        let gi = visible[vi];
        let st = &mut state.stats.anchors[gi];
        for slot in 0..k {
            st.opacity_accum += dec.opacities[slot].max(0.0);
        }
        st.sample_count += k as u64;
    }
    for (gi, slots) in state.stats.slots.iter().enumerate() {
        state.stats.anchors[gi].grad_accum = slots.iter().map(|r| r.grad_sum).sum();
    }

    // Adam updates on every learnable group.
    state.opt.t += 1;
    let t = state.opt.t;
    let ocfg = &config.optimizer;
    let decay = if config.iterations > 0 && ocfg.lr_offsets > 0.0 {
        (ocfg.lr_offsets_final / ocfg.lr_offsets).powf(iter as f64 / config.iterations as f64)
    } else {
        1.0
    };
    let lr_offsets = ocfg.lr_offsets * decay;

    // Anchor parameter groups live in flat scratch views.
    let mut features: Vec<f64> = Vec::with_capacity(n_anchors * fdim);
    let mut offsets: Vec<f64> = Vec::with_capacity(n_anchors * k * 3);
    let mut scales: Vec<f64> = Vec::with_capacity(n_anchors * 3);
    for a in &state.anchors.anchors {
        features.extend_from_slice(&a.feature);
        for o in &a.offsets {
            offsets.extend_from_slice(&[o.x, o.y, o.z]);
        }
        scales.extend_from_slice(&[a.scale.x, a.scale.y, a.scale.z]);
    }
    state
        .opt
        .features
        .step(&mut features, &g_features, ocfg.lr_features, t, ocfg);
    state
        .opt
        .offsets
        .step(&mut offsets, &g_offsets, lr_offsets, t, ocfg);
    state
        .opt
        .scales
        .step(&mut scales, &g_scales, ocfg.lr_scales, t, ocfg);
    for (i, a) in state.anchors.anchors.iter_mut().enumerate() {
        a.feature.copy_from_slice(&features[i * fdim..(i + 1) * fdim]);
        for (s, o) in a.offsets.iter_mut().enumerate() {
            let off = (i * k + s) * 3;
            *o = Vector3::new(offsets[off], offsets[off + 1], offsets[off + 2]);
        }
        // The per-axis scale must stay positive; Adam can overshoot, so
        // clamp to a tiny floor.
        a.scale = Vector3::new(
            scales[i * 3].max(1e-9),
            scales[i * 3 + 1].max(1e-9),
            scales[i * 3 + 2].max(1e-9),
        );
    }

    state
        .opt
        .opacity
        .step(&mut state.decoders.opacity, &accum.opacity, ocfg.lr_mlps, t, ocfg);
    state
        .opt
        .color
        .step(&mut state.decoders.color, &accum.color, ocfg.lr_mlps, t, ocfg);
    state.opt.rotation.step(
        &mut state.decoders.rotation,
        &accum.rotation,
        ocfg.lr_mlps,
        t,
        ocfg,
    );
    state
        .opt
        .scale
        .step(&mut state.decoders.scale, &accum.scale, ocfg.lr_mlps, t, ocfg);
    if config.na > 0 {
        state
            .opt
            .afme
            .step(&mut state.decoders.afme, &accum.afme, ocfg.lr_afme, t, ocfg);
    }

    state.iteration += 1;
    Ok(LossRecord {
        iter,
        l1: loss.l1,
        ssim: loss.ssim,
        vol: loss.vol,
        hf: loss.hf,
        total: loss.total,
    })
}

/// Grow and prune on a completed stats window, then reset the window and
/// remodel the optimizer moments. Returns (grown, pruned).
pub fn refine(
    state: &mut TrainState,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> (usize, usize) {
    let before = state.anchors.len();
    let positions: Vec<Vec<Vector3<f64>>> =
        state.anchors.anchors.iter().map(decode_positions).collect();
    let grown = state.anchors.grow_anchors(
        &positions,
        &state.stats.slots,
        &config.refinement,
        &config.init,
        rng,
    );
    // Newly grown anchors carry no stats yet; pad so pruning sees them as
    // unobserved (exempt).
    state
        .stats
        .anchors
        .extend(std::iter::repeat(AnchorStats::default()).take(grown));
    let removed = state
        .anchors
        .prune_anchors(&state.stats.anchors, &config.refinement);

    let fdim = state.anchors.feature_dim;
    let k = state.anchors.k;
    state.opt.features.remodel(fdim, &removed, grown);
    state.opt.offsets.remodel(k * 3, &removed, grown);
    state.opt.scales.remodel(3, &removed, grown);
    state.stats.reset(state.anchors.len(), k);
    let pruned = removed.len();
    log::debug!(
        "refine: {before} anchors, +{grown} grown, -{pruned} pruned -> {}",
        state.anchors.len()
    );
    (grown, pruned)
}

/// Deterministic per-epoch sampling order.
fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ (epoch.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn refinement_rng(seed: u64, iter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ iter.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ 0x5851_F42D)
}

/// Render one view of the current state (no gradients).
pub fn render_frame(
    state: &TrainState,
    pose: &CameraPose,
    camera: &PinholeCamera,
) -> Result<ImageBuf, TrainError> {
    let embedding = if state.decoders.na > 0 {
        afme_embed(pose, &state.decoders.afme).0
    } else {
        AppearanceEmbedding::default()
    };
    let cam_center = pose.camera_center();
    let mut splats = Vec::new();
    for anchor in &state.anchors.anchors {
        if !anchor_visible(&anchor.center, pose, camera) {
            continue;
        }
        let view = ViewContext::new(&anchor.center, &cam_center);
        let dec = decode_anchor(anchor, &view, &embedding, &state.decoders);
        for slot in 0..state.anchors.k {
            if dec.is_active(slot) {
                if let Some(s) = project(&dec.gaussian(slot), pose, camera) {
                    splats.push(s);
                }
            }
        }
    }
    Ok(rasterize(&splats, camera)?.image)
}

/// Mean quality over one split, with the per-view values retained.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub frames: Vec<usize>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// End-of-run report, serialized as metrics.json.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: u32,
    pub iterations: u64,
    pub anchors: usize,
    pub gaussians: usize,
    pub train: SplitMetrics,
    pub test: SplitMetrics,
}

pub fn evaluate_split(
    state: &TrainState,
    dataset: &Dataset,
    frames: &[usize],
) -> Result<SplitMetrics, TrainError> {
    let mut psnrs = Vec::with_capacity(frames.len());
    let mut ssims = Vec::with_capacity(frames.len());
    for &fi in frames {
        let frame = &dataset.frames[fi];
        let render = render_frame(state, &frame.pose, &dataset.camera)?;
        psnrs.push(psnr(&render, &frame.image)?);
        ssims.push(ssim(&render, &frame.image)?);
    }
    let n = frames.len().max(1) as f64;
    Ok(SplitMetrics {
        frames: frames.to_vec(),
        mean_psnr: psnrs.iter().sum::<f64>() / n,
        mean_ssim: ssims.iter().sum::<f64>() / n,
        psnr: psnrs,
        ssim: ssims,
    })
}

/// Result of [`run`].
pub struct RunResult {
    pub state: TrainState,
    pub records: Vec<LossRecord>,
    pub metrics: MetricsReport,
}

/// Sink for run artifacts; everything is optional so tests can run fully
/// in memory.
#[derive(Debug, Clone, Default)]
pub struct RunOutputs {
    pub checkpoint_path: Option<PathBuf>,
    pub loss_csv_path: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
}

/// Execute the full loop: initialize from the keyframe clouds (unless
/// resuming), train with refinement every window, write artifacts, and
/// evaluate both splits.
pub fn run(
    config: &TrainConfig,
    dataset: &Dataset,
    outputs: &RunOutputs,
    resume: Option<TrainState>,
) -> Result<RunResult, TrainError> {
    let (train_frames, test_frames) = split_train_test(dataset, &config.keyframe_rule)?;
    let keyframes: Vec<Keyframe> = train_frames
        .iter()
        .map(|&fi| {
            let frame = &dataset.frames[fi];
            let vis = visible_indices(&dataset.cloud, &frame.pose, &dataset.camera);
            Keyframe {
                id: fi,
                image: frame.image.clone(),
                pose: frame.pose,
                cloud: PointCloud::new(vis.iter().map(|&i| dataset.cloud.points[i]).collect()),
            }
        })
        .collect();

    let mut state = match resume {
        Some(s) => s,
        None => {
            let clouds: Vec<&PointCloud> = if config.incremental_merge {
                keyframes.iter().take(1).map(|k| &k.cloud).collect()
            } else {
                keyframes.iter().map(|k| &k.cloud).collect()
            };
            TrainState::initialize(config, &clouds)?
        }
    };

    let n_train = keyframes.len();
    let window = config.refinement.window.max(1);
    let checkpoint_every = if config.checkpoint_every == 0 {
        0
    } else {
        config.checkpoint_every.div_ceil(window) * window
    };

    let mut records = Vec::new();
    let mut merged_epochs: u64 = if config.incremental_merge {
        state.iteration / n_train as u64 + 1
    } else {
        u64::MAX
    };

    while state.iteration < config.iterations {
        let iter = state.iteration;
        let epoch = iter / n_train as u64;
        // Incremental structure growth: one more keyframe cloud merges in
        // at each epoch boundary.
        while config.incremental_merge && merged_epochs <= epoch {
            let next = merged_epochs as usize;
            if next < n_train {
                let mut rng = refinement_rng(config.seed ^ 0xA5A5, merged_epochs);
                let added = state.anchors.merge_new_keyframe_anchors(
                    &keyframes[next].cloud,
                    &config.init,
                    &mut rng,
                )?;
                state
                    .opt
                    .features
                    .remodel(state.anchors.feature_dim, &[], added);
                state.opt.offsets.remodel(state.anchors.k * 3, &[], added);
                state.opt.scales.remodel(3, &[], added);
                state
                    .stats
                    .anchors
                    .extend(std::iter::repeat(AnchorStats::default()).take(added));
                state.stats.slots.extend(
                    std::iter::repeat(vec![GaussianGradRecord::default(); state.anchors.k])
                        .take(added),
                );
            }
            merged_epochs += 1;
        }

        let order = epoch_order(config.seed, epoch, n_train);
        let kf = &keyframes[order[(iter % n_train as u64) as usize]];
        let record = train_step(&mut state, &kf.image, &kf.pose, &dataset.camera, config)?;
        records.push(record);

        // Refinement fires at every window boundary, including a final
        // one, so a checkpoint taken at any boundary resumes exactly.
        if state.iteration % window == 0 {
            let mut rng = refinement_rng(config.seed, state.iteration);
            refine(&mut state, config, &mut rng);
        }
        if checkpoint_every > 0 && state.iteration % checkpoint_every == 0 {
            if let Some(path) = &outputs.checkpoint_path {
                save_checkpoint(
                    &state,
                    &dataset.camera,
                    config,
                    &cadence_checkpoint_path(path, state.iteration),
                )?;
            }
        }
    }

    if let Some(path) = &outputs.checkpoint_path {
        save_checkpoint(&state, &dataset.camera, config, path)?;
    }
    if let Some(path) = &outputs.loss_csv_path {
        write_loss_csv(&records, path)?;
    }

    let metrics = MetricsReport {
        version: 1,
        iterations: state.iteration,
        anchors: state.anchors.len(),
        gaussians: state.gaussian_count(),
        train: evaluate_split(&state, dataset, &train_frames)?,
        test: evaluate_split(&state, dataset, &test_frames)?,
    };
    if let Some(path) = &outputs.metrics_path {
        let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
        fs::write(path, json).map_err(|e| io_err(path, e))?;
    }

    Ok(RunResult {
        state,
        records,
        metrics,
    })
}

/// Cadence snapshots keep history next to the final checkpoint:
/// `name.bin` -> `name_000123.bin`.
pub fn cadence_checkpoint_path(final_path: &Path, iter: u64) -> PathBuf {
    let stem = final_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("checkpoint");
    let ext = final_path
        .extension()
        .and_then(|s| s.to_str())
        .unwrap_or("bin");
    final_path.with_file_name(format!("{stem}_{iter:06}.{ext}"))
}

/// Loss curve as CSV: iter, l1, ssim, vol, hf, total.
pub fn write_loss_csv(records: &[LossRecord], path: &Path) -> Result<(), TrainError> {
    let mut text = String::from("iter,l1,ssim,vol,hf,total\n");
    for r in records {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iter, r.l1, r.ssim, r.vol, r.hf, r.total
        ));
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------------
// Checkpoint format: little-endian; header (magic, version, dims, camera),
// anchors (centers, features, offsets, scales), MLP groups, Adam moments.
// ---------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"SPLTMAP1";
const CHECKPOINT_VERSION: u32 = 1;

fn write_mlp<W: Write>(w: &mut W, mlp: &Mlp) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(mlp.layers.len() as u64)?;
    for layer in &mlp.layers {
        w.write_u64::<LittleEndian>(layer.in_dim as u64)?;
        w.write_u64::<LittleEndian>(layer.out_dim as u64)?;
        for v in &layer.w {
            w.write_f64::<LittleEndian>(*v)?;
        }
        for v in &layer.b {
            w.write_f64::<LittleEndian>(*v)?;
        }
    }
    Ok(())
}

fn read_mlp<R: Read>(r: &mut R) -> std::io::Result<Mlp> {
    let n_layers = r.read_u64::<LittleEndian>()? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let in_dim = r.read_u64::<LittleEndian>()? as usize;
        let out_dim = r.read_u64::<LittleEndian>()? as usize;
        let mut layer = crate::decoders::Linear::zeros(in_dim, out_dim);
        for v in layer.w.iter_mut() {
            *v = r.read_f64::<LittleEndian>()?;
        }
        for v in layer.b.iter_mut() {
            *v = r.read_f64::<LittleEndian>()?;
        }
        layers.push(layer);
    }
    Ok(Mlp::from_layers(layers))
}

fn write_adam<W: Write>(w: &mut W, buf: &AdamBuf) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(buf.m.len() as u64)?;
    for v in buf.m.iter().chain(buf.v.iter()) {
        w.write_f64::<LittleEndian>(*v)?;
    }
    Ok(())
}

fn read_adam<R: Read>(r: &mut R) -> std::io::Result<AdamBuf> {
    let len = r.read_u64::<LittleEndian>()? as usize;
    let mut buf = AdamBuf::zeros(len);
    for v in buf.m.iter_mut() {
        *v = r.read_f64::<LittleEndian>()?;
    }
    for v in buf.v.iter_mut() {
        *v = r.read_f64::<LittleEndian>()?;
    }
    Ok(buf)
}

fn write_mlp_adam<W: Write>(w: &mut W, a: &MlpAdam) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(a.layers.len() as u64)?;
    for (mw, mb) in &a.layers {
        write_adam(w, mw)?;
        write_adam(w, mb)?;
    }
    Ok(())
}

fn read_mlp_adam<R: Read>(r: &mut R) -> std::io::Result<MlpAdam> {
    let n = r.read_u64::<LittleEndian>()? as usize;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let w = read_adam(r)?;
        let b = read_adam(r)?;
        layers.push((w, b));
    }
    Ok(MlpAdam { layers })
}

/// Serialize the full state; camera intrinsics ride along so a checkpoint
/// renders stand-alone.
pub fn save_checkpoint(
    state: &TrainState,
    camera: &PinholeCamera,
    config: &TrainConfig,
    path: &Path,
) -> Result<(), TrainError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u64::<LittleEndian>(state.anchors.len() as u64)?;
        w.write_u64::<LittleEndian>(state.anchors.k as u64)?;
        w.write_u64::<LittleEndian>(state.anchors.feature_dim as u64)?;
        w.write_u64::<LittleEndian>(state.decoders.na as u64)?;
        w.write_u64::<LittleEndian>(state.iteration)?;
        w.write_u64::<LittleEndian>(config.seed)?;
        w.write_f64::<LittleEndian>(state.anchors.voxel_size)?;
        w.write_f64::<LittleEndian>(camera.fx)?;
        w.write_f64::<LittleEndian>(camera.fy)?;
        w.write_f64::<LittleEndian>(camera.cx)?;
        w.write_f64::<LittleEndian>(camera.cy)?;
        w.write_u64::<LittleEndian>(camera.width as u64)?;
        w.write_u64::<LittleEndian>(camera.height as u64)?;
        for a in &state.anchors.anchors {
            for c in 0..3 {
                w.write_f64::<LittleEndian>(a.center[c])?;
            }
            for v in &a.feature {
                w.write_f64::<LittleEndian>(*v)?;
            }
            for c in 0..3 {
                w.write_f64::<LittleEndian>(a.scale[c])?;
            }
            for o in &a.offsets {
                for c in 0..3 {
                    w.write_f64::<LittleEndian>(o[c])?;
                }
            }
        }
        write_mlp(&mut w, &state.decoders.opacity)?;
        write_mlp(&mut w, &state.decoders.color)?;
        write_mlp(&mut w, &state.decoders.rotation)?;
        write_mlp(&mut w, &state.decoders.scale)?;
        write_mlp(&mut w, &state.decoders.afme)?;
        w.write_u64::<LittleEndian>(state.opt.t)?;
        write_adam(&mut w, &state.opt.features)?;
        write_adam(&mut w, &state.opt.offsets)?;
        write_adam(&mut w, &state.opt.scales)?;
        write_mlp_adam(&mut w, &state.opt.opacity)?;
        write_mlp_adam(&mut w, &state.opt.color)?;
        write_mlp_adam(&mut w, &state.opt.rotation)?;
        write_mlp_adam(&mut w, &state.opt.scale)?;
        write_mlp_adam(&mut w, &state.opt.afme)?;
        Ok(())
    })()
    .map_err(|e| io_err(path, e))
}

/// A loaded checkpoint: the state plus the stored camera and seed.
pub struct Checkpoint {
    pub state: TrainState,
    pub camera: PinholeCamera,
    pub seed: u64,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TrainError::BadCheckpoint {
            path: path.to_path_buf(),
            msg: "wrong magic".into(),
        });
    }
    (|| -> std::io::Result<Checkpoint> {
        let version = r.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("unsupported version {version}"),
            ));
        }
        let n_anchors = r.read_u64::<LittleEndian>()? as usize;
        let k = r.read_u64::<LittleEndian>()? as usize;
        let feature_dim = r.read_u64::<LittleEndian>()? as usize;
        let na = r.read_u64::<LittleEndian>()? as usize;
        let iteration = r.read_u64::<LittleEndian>()?;
        let seed = r.read_u64::<LittleEndian>()?;
        let voxel_size = r.read_f64::<LittleEndian>()?;
        let fx = r.read_f64::<LittleEndian>()?;
        let fy = r.read_f64::<LittleEndian>()?;
        let cx = r.read_f64::<LittleEndian>()?;
        let cy = r.read_f64::<LittleEndian>()?;
        let width = r.read_u64::<LittleEndian>()? as usize;
        let height = r.read_u64::<LittleEndian>()? as usize;
        let camera = PinholeCamera::new(fx, fy, cx, cy, width, height);

        let mut anchors = AnchorSet::empty(k, feature_dim, voxel_size);
        for _ in 0..n_anchors {
            let mut center = Vector3::zeros();
            for c in 0..3 {
                center[c] = r.read_f64::<LittleEndian>()?;
            }
            let mut feature = vec![0.0; feature_dim];
            for v in feature.iter_mut() {
                *v = r.read_f64::<LittleEndian>()?;
            }
            let mut scale = Vector3::zeros();
            for c in 0..3 {
                scale[c] = r.read_f64::<LittleEndian>()?;
            }
            let mut offsets = Vec::with_capacity(k);
            for _ in 0..k {
                let mut o = Vector3::zeros();
                for c in 0..3 {
                    o[c] = r.read_f64::<LittleEndian>()?;
                }
                offsets.push(o);
            }
            anchors.anchors.push(Anchor {
                center,
                feature,
                scale,
                offsets,
                active: true,
            });
        }
        anchors.rebuild_occupancy();

        let opacity = read_mlp(&mut r)?;
        let color = read_mlp(&mut r)?;
        let rotation = read_mlp(&mut r)?;
        let scale = read_mlp(&mut r)?;
        let afme = read_mlp(&mut r)?;
        let decoders = DecoderParams {
            opacity,
            color,
            rotation,
            scale,
            afme,
            k,
            feature_dim,
            na,
        };

        let t = r.read_u64::<LittleEndian>()?;
        let features = read_adam(&mut r)?;
        let offsets = read_adam(&mut r)?;
        let scales = read_adam(&mut r)?;
        let opacity_a = read_mlp_adam(&mut r)?;
        let color_a = read_mlp_adam(&mut r)?;
        let rotation_a = read_mlp_adam(&mut r)?;
        let scale_a = read_mlp_adam(&mut r)?;
        let afme_a = read_mlp_adam(&mut r)?;

        let mut stats = RefineStats::default();
        stats.reset(anchors.len(), k);
        Ok(Checkpoint {
            state: TrainState {
                anchors,
                decoders,
                iteration,
                opt: OptState {
                    t,
                    features,
                    offsets,
                    scales,
                    opacity: opacity_a,
                    color: color_a,
                    rotation: rotation_a,
                    scale: scale_a,
                    afme: afme_a,
                },
                stats,
            },
            camera,
            seed,
        })
    })()
    .map_err(|e| match e.kind() {
        std::io::ErrorKind::InvalidData => TrainError::BadCheckpoint {
            path: path.to_path_buf(),
            msg: e.to_string(),
        },
        _ => io_err(path, e),
    })
}
