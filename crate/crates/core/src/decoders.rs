//! Tiny MLP decoders mapping anchor features (plus view geometry and an
//! optional appearance embedding) to per-Gaussian parameters, the
//! pose-conditioned appearance encoder, and analytic backward passes for
//! all of them.
//!
//! The computation graph is fixed, so reverse-mode gradients are written
//! out by hand; every path is checked against central finite differences
//! in the tests.

use nalgebra::Vector3;
use rand::Rng;

use crate::camera::CameraPose;
use crate::math::matrix_to_quat;
use crate::scene::Anchor;

/// Fallback viewing direction when the camera sits exactly on an anchor.
pub const DEGENERATE_VIEW_DIR: Vector3<f64> = Vector3::new(0.0, 0.0, 1.0);

/// One dense layer, weights row-major `[out][in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            w: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    /// Kaiming-style uniform init scaled by fan-in; biases zero.
    pub fn kaiming<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = (6.0 / in_dim as f64).sqrt();
        Self {
            w: (0..in_dim * out_dim)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
            b: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(x.len(), self.in_dim);
        out.clear();
        out.reserve(self.out_dim);
        for o in 0..self.out_dim {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.b[o];
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            out.push(acc);
        }
    }
}

/// Feed-forward MLP with ReLU between layers and no activation after the
/// last one (heads apply their own output activations). A single-layer
/// instance is a plain linear map.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Per-call forward cache: the input and every post-ReLU hidden activation.
#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    input: Vec<f64>,
    hidden: Vec<Vec<f64>>,
}

/// Accumulated parameter gradients, same shapes as the MLP.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Mlp {
    /// `input -> hidden (ReLU) -> output`.
    pub fn two_layer<R: Rng>(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            layers: vec![
                Linear::kaiming(in_dim, hidden, rng),
                Linear::kaiming(hidden, out_dim, rng),
            ],
        }
    }

    pub fn single_layer(in_dim: usize, out_dim: usize) -> Self {
        Self {
            layers: vec![Linear::zeros(in_dim, out_dim)],
        }
    }

    pub fn from_layers(layers: Vec<Linear>) -> Self {
        assert!(!layers.is_empty());
        for pair in layers.windows(2) {
            assert_eq!(pair[0].out_dim, pair[1].in_dim, "layer dims must chain");
        }
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn grads(&self) -> MlpGrads {
        MlpGrads {
            layers: self
                .layers
                .iter()
                .map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()]))
                .collect(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, MlpCache) {
        assert_eq!(x.len(), self.input_dim(), "mlp input dim mismatch");
        let mut cache = MlpCache {
            input: x.to_vec(),
            hidden: Vec::with_capacity(self.layers.len() - 1),
        };
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.forward(&cur, &mut next);
            if i + 1 < self.layers.len() {
                for v in next.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                cache.hidden.push(next.clone());
            }
            std::mem::swap(&mut cur, &mut next);
        }
        (cur, cache)
    }

    /// Accumulates parameter gradients into `grads` and returns dL/dinput.
    /// Panics if the cache does not match this MLP (usage error).
    pub fn backward(&self, cache: &MlpCache, d_out: &[f64], grads: &mut MlpGrads) -> Vec<f64> {
        assert_eq!(cache.input.len(), self.input_dim(), "stale forward cache");
        assert_eq!(cache.hidden.len(), self.layers.len() - 1, "stale forward cache");
        assert_eq!(d_out.len(), self.output_dim());
        let mut d_cur = d_out.to_vec();
        for idx in (0..self.layers.len()).rev() {
            let layer = &self.layers[idx];
            let x: &[f64] = if idx == 0 {
                &cache.input
            } else {
                &cache.hidden[idx - 1]
            };
            let (dw, db) = &mut grads.layers[idx];
            let mut d_in = vec![0.0; layer.in_dim];
            for o in 0..layer.out_dim {
                let g = d_cur[o];
                if g == 0.0 {
                    continue;
                }
                db[o] += g;
                let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                let drow = &mut dw[o * layer.in_dim..(o + 1) * layer.in_dim];
                for i in 0..layer.in_dim {
                    drow[i] += g * x[i];
                    d_in[i] += g * row[i];
                }
            }
            if idx > 0 {
                // ReLU backward: the cached activation is post-ReLU, so a
                // zero marks a clamped unit.
                for (d, h) in d_in.iter_mut().zip(&cache.hidden[idx - 1]) {
                    if *h == 0.0 {
                        *d = 0.0;
                    }
                }
            }
            d_cur = d_in;
        }
        d_cur
    }
}

/// View geometry of one anchor relative to a camera: distance and the unit
/// direction from camera center to anchor center.
#[derive(Debug, Clone, Copy)]
pub struct ViewContext {
    pub distance: f64,
    pub direction: Vector3<f64>,
}

impl ViewContext {
    pub fn new(anchor_center: &Vector3<f64>, camera_center: &Vector3<f64>) -> Self {
        let diff = anchor_center - camera_center;
        let distance = diff.norm();
        let direction = if distance > 0.0 {
            diff / distance
        } else {
            DEGENERATE_VIEW_DIR
        };
        Self {
            distance,
            direction,
        }
    }
}

/// Pose-conditioned appearance embedding.
#[derive(Debug, Clone, Default)]
pub struct AppearanceEmbedding {
    pub values: Vec<f64>,
}

/// A decoded renderable Gaussian.
#[derive(Debug, Clone)]
pub struct GaussianPrimitive {
    pub position: Vector3<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
    pub rotation: [f64; 4],
    pub scale: Vector3<f64>,
}

/// The four per-Gaussian decoders plus the appearance encoder.
#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub opacity: Mlp,
    pub color: Mlp,
    pub rotation: Mlp,
    pub scale: Mlp,
    pub afme: Mlp,
    pub k: usize,
    pub feature_dim: usize,
    /// Appearance embedding dimension; zero disables the appearance input.
    pub na: usize,
}

/// Pose encoding fed to the appearance encoder: canonical (w >= 0) unit
/// quaternion of R followed by t.
pub fn pose_encoding(pose: &CameraPose) -> [f64; 7] {
    let q = matrix_to_quat(&pose.rotation);
    [
        q[0],
        q[1],
        q[2],
        q[3],
        pose.translation.x,
        pose.translation.y,
        pose.translation.z,
    ]
}

/// Encode a pose into an appearance embedding. Deterministic in the pose
/// and the encoder parameters.
pub fn afme_embed(pose: &CameraPose, afme: &Mlp) -> (AppearanceEmbedding, MlpCache) {
    debug_assert!(pose.is_valid(1e-9));
    let enc = pose_encoding(pose);
    let (values, cache) = afme.forward(&enc);
    (AppearanceEmbedding { values }, cache)
}

impl DecoderParams {
    pub const GEO_EXTRA: usize = 4; // distance (1) + direction (3)

    pub fn init<R: Rng>(k: usize, feature_dim: usize, na: usize, hidden: usize, rng: &mut R) -> Self {
        let geo_in = feature_dim + Self::GEO_EXTRA;
        Self {
            opacity: Mlp::two_layer(geo_in, hidden, k, rng),
            color: Mlp::two_layer(geo_in + na, hidden, 3 * k, rng),
            rotation: Mlp::two_layer(geo_in, hidden, 4 * k, rng),
            scale: Mlp::two_layer(geo_in, hidden, 3 * k, rng),
            // Zero-initialized single linear layer: embeddings start at
            // zero and the encoder is pulled in by the color decoder's
            // gradient.
            afme: Mlp::single_layer(7, na),
            k,
            feature_dim,
            na,
        }
    }

    fn geo_input(&self, anchor: &Anchor, view: &ViewContext) -> Vec<f64> {
        assert_eq!(anchor.feature.len(), self.feature_dim, "feature dim mismatch");
        let mut x = Vec::with_capacity(self.feature_dim + Self::GEO_EXTRA);
        x.extend_from_slice(&anchor.feature);
        x.push(view.distance);
        x.push(view.direction.x);
        x.push(view.direction.y);
        x.push(view.direction.z);
        x
    }

    fn color_input(&self, anchor: &Anchor, view: &ViewContext, embedding: &AppearanceEmbedding) -> Vec<f64> {
        assert_eq!(embedding.values.len(), self.na, "embedding dim mismatch");
        let mut x = self.geo_input(anchor, view);
        x.extend_from_slice(&embedding.values);
        x
    }
}

/// Gaussian positions: anchor center plus offsets scaled componentwise by
/// the per-axis anchor scale.
pub fn decode_positions(anchor: &Anchor) -> Vec<Vector3<f64>> {
    anchor
        .offsets
        .iter()
        .map(|o| anchor.center + o.component_mul(&anchor.scale))
        .collect()
}

/// Raw opacity decode: tanh of the head output. Values <= 0 mark the slot
/// inactive; values in (0, 1) pass through as the opacity.
pub fn decode_opacity(
    anchor: &Anchor,
    view: &ViewContext,
    params: &DecoderParams,
) -> (Vec<f64>, MlpCache) {
    let (y, cache) = params.opacity.forward(&params.geo_input(anchor, view));
    (y.iter().map(|v| v.tanh()).collect(), cache)
}

/// Sigmoid-activated colors in (0, 1), 3 per Gaussian.
pub fn decode_color(
    anchor: &Anchor,
    view: &ViewContext,
    embedding: &AppearanceEmbedding,
    params: &DecoderParams,
) -> (Vec<[f64; 3]>, MlpCache) {
    let (y, cache) = params
        .color
        .forward(&params.color_input(anchor, view, embedding));
    let colors = y
        .chunks_exact(3)
        .map(|c| [sigmoid(c[0]), sigmoid(c[1]), sigmoid(c[2])])
        .collect();
    (colors, cache)
}

/// Unit quaternions via normalization of 4-blocks; an exactly zero block
/// falls back to the identity rotation.
pub fn decode_rotation(
    anchor: &Anchor,
    view: &ViewContext,
    params: &DecoderParams,
) -> (Vec<[f64; 4]>, MlpCache) {
    let (y, cache) = params.rotation.forward(&params.geo_input(anchor, view));
    let quats = y
        .chunks_exact(4)
        .map(|q| {
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if n == 0.0 {
                [1.0, 0.0, 0.0, 0.0]
            } else {
                [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
            }
        })
        .collect();
    (quats, cache)
}

/// Per-axis scales: sigmoid of the head output times the anchor scale,
/// componentwise in (0, l_v).
pub fn decode_scale(
    anchor: &Anchor,
    view: &ViewContext,
    params: &DecoderParams,
) -> (Vec<Vector3<f64>>, MlpCache) {
    let (y, cache) = params.scale.forward(&params.geo_input(anchor, view));
    let scales = y
        .chunks_exact(3)
        .map(|s| {
            Vector3::new(
                sigmoid(s[0]) * anchor.scale.x,
                sigmoid(s[1]) * anchor.scale.y,
                sigmoid(s[2]) * anchor.scale.z,
            )
        })
        .collect();
    (scales, cache)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// All per-Gaussian parameters of one anchor plus the forward caches
/// needed for the backward pass.
#[derive(Debug, Clone)]
pub struct DecodedAnchor {
    pub positions: Vec<Vector3<f64>>,
    /// tanh outputs; a slot is active iff its value is > 0.
    pub opacities: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub quats: Vec<[f64; 4]>,
    pub scales: Vec<Vector3<f64>>,
    opacity_cache: MlpCache,
    color_cache: MlpCache,
    rotation_cache: MlpCache,
    scale_cache: MlpCache,
}

impl DecodedAnchor {
    #[inline]
    pub fn is_active(&self, slot: usize) -> bool {
        self.opacities[slot] > 0.0
    }

    pub fn gaussian(&self, slot: usize) -> GaussianPrimitive {
        GaussianPrimitive {
            position: self.positions[slot],
            opacity: self.opacities[slot].max(0.0),
            color: self.colors[slot],
            rotation: self.quats[slot],
            scale: self.scales[slot],
        }
    }
}

pub fn decode_anchor(
    anchor: &Anchor,
    view: &ViewContext,
    embedding: &AppearanceEmbedding,
    params: &DecoderParams,
) -> DecodedAnchor {
    let positions = decode_positions(anchor);
    let (opacities, opacity_cache) = decode_opacity(anchor, view, params);
    let (colors, color_cache) = decode_color(anchor, view, embedding, params);
    let (quats, rotation_cache) = decode_rotation(anchor, view, params);
    let (scales, scale_cache) = decode_scale(anchor, view, params);
    DecodedAnchor {
        positions,
        opacities,
        colors,
        quats,
        scales,
        opacity_cache,
        color_cache,
        rotation_cache,
        scale_cache,
    }
}

/// Upstream gradients w.r.t. one anchor's decoded Gaussians. Slots that
/// never reached the renderer simply stay zero.
#[derive(Debug, Clone)]
pub struct GaussianGrads {
    pub d_position: Vec<Vector3<f64>>,
    pub d_opacity: Vec<f64>,
    pub d_color: Vec<[f64; 3]>,
    /// Gradient w.r.t. the unit quaternion.
    pub d_quat: Vec<[f64; 4]>,
    pub d_scale: Vec<Vector3<f64>>,
}

impl GaussianGrads {
    pub fn zeros(k: usize) -> Self {
        Self {
            d_position: vec![Vector3::zeros(); k],
            d_opacity: vec![0.0; k],
            d_color: vec![[0.0; 3]; k],
            d_quat: vec![[0.0; 4]; k],
            d_scale: vec![Vector3::zeros(); k],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.d_position.iter().all(|v| v.norm_squared() == 0.0)
            && self.d_opacity.iter().all(|v| *v == 0.0)
            && self.d_color.iter().flatten().all(|v| *v == 0.0)
            && self.d_quat.iter().flatten().all(|v| *v == 0.0)
            && self.d_scale.iter().all(|v| v.norm_squared() == 0.0)
    }
}

/// Gradients w.r.t. one anchor's learnable parameters.
#[derive(Debug, Clone)]
pub struct AnchorParamGrads {
    pub d_feature: Vec<f64>,
    pub d_offsets: Vec<Vector3<f64>>,
    pub d_scale: Vector3<f64>,
}

/// Accumulator for the shared decoder parameters and the per-view
/// appearance embedding.
#[derive(Debug, Clone)]
pub struct DecoderGradAccum {
    pub opacity: MlpGrads,
    pub color: MlpGrads,
    pub rotation: MlpGrads,
    pub scale: MlpGrads,
    pub afme: MlpGrads,
    pub d_embedding: Vec<f64>,
}

impl DecoderGradAccum {
    pub fn zeros(params: &DecoderParams) -> Self {
        Self {
            opacity: params.opacity.grads(),
            color: params.color.grads(),
            rotation: params.rotation.grads(),
            scale: params.scale.grads(),
            afme: params.afme.grads(),
            d_embedding: vec![0.0; params.na],
        }
    }

    pub fn add(&mut self, other: &DecoderGradAccum) {
        fn add_mlp(a: &mut MlpGrads, b: &MlpGrads) {
            for ((aw, ab), (bw, bb)) in a.layers.iter_mut().zip(&b.layers) {
                for (x, y) in aw.iter_mut().zip(bw) {
                    *x += y;
                }
                for (x, y) in ab.iter_mut().zip(bb) {
                    *x += y;
                }
            }
        }
        add_mlp(&mut self.opacity, &other.opacity);
        add_mlp(&mut self.color, &other.color);
        add_mlp(&mut self.rotation, &other.rotation);
        add_mlp(&mut self.scale, &other.scale);
        add_mlp(&mut self.afme, &other.afme);
        for (x, y) in self.d_embedding.iter_mut().zip(&other.d_embedding) {
            *x += y;
        }
    }
}

/// Reverse-mode pass through all four decoders of one anchor. Accumulates
/// shared-parameter gradients into `accum` (including dL/d embedding) and
/// returns the anchor's own parameter gradients.
pub fn decode_anchor_backward(
    anchor: &Anchor,
    params: &DecoderParams,
    decoded: &DecodedAnchor,
    upstream: &GaussianGrads,
    accum: &mut DecoderGradAccum,
) -> AnchorParamGrads {
    let k = params.k;
    assert_eq!(decoded.positions.len(), k, "decode cache k mismatch");
    let geo_dim = params.feature_dim + DecoderParams::GEO_EXTRA;

    let mut grads = AnchorParamGrads {
        d_feature: vec![0.0; params.feature_dim],
        d_offsets: vec![Vector3::zeros(); k],
        d_scale: Vector3::zeros(),
    };

    // Positions: mu_i = center + O_i .* l_v.
    for i in 0..k {
        let g = upstream.d_position[i];
        grads.d_offsets[i] += g.component_mul(&anchor.scale);
        grads.d_scale += g.component_mul(&anchor.offsets[i]);
    }

    // Opacity head: alpha = tanh(y), inactive slots carry no gradient.
    let mut d_y = vec![0.0; k];
    let mut any = false;
    for i in 0..k {
        let g = upstream.d_opacity[i];
        if g != 0.0 && decoded.opacities[i] > 0.0 {
            let t = decoded.opacities[i];
            d_y[i] = g * (1.0 - t * t);
            any = true;
        }
    }
    if any {
        let d_in = params
            .opacity
            .backward(&decoded.opacity_cache, &d_y, &mut accum.opacity);
        for (f, d) in grads.d_feature.iter_mut().zip(&d_in) {
            *f += d;
        }
    }

    // Color head: c = sigmoid(y).
    let mut d_y = vec![0.0; 3 * k];
    let mut any = false;
    for i in 0..k {
        for c in 0..3 {
            let g = upstream.d_color[i][c];
            if g != 0.0 {
                let s = decoded.colors[i][c];
                d_y[3 * i + c] = g * s * (1.0 - s);
                any = true;
            }
        }
    }
    if any {
        let d_in = params
            .color
            .backward(&decoded.color_cache, &d_y, &mut accum.color);
        for (f, d) in grads.d_feature.iter_mut().zip(&d_in) {
            *f += d;
        }
        for (e, d) in accum.d_embedding.iter_mut().zip(&d_in[geo_dim..]) {
            *e += d;
        }
    }

    // Rotation head: q = r / |r|; the normalization Jacobian is
    // (I - q q^T)/|r|, singular at zero where the identity fallback
    // carries zero gradient.
    let mut d_y = vec![0.0; 4 * k];
    let mut any = false;
    for i in 0..k {
        let g = &upstream.d_quat[i];
        if g.iter().all(|v| *v == 0.0) {
            continue;
        }
        let raw_start = 4 * i;
        // Recompute |r| from the cached head output.
        let raw = rotation_head_output(params, decoded, raw_start);
        let n = (raw[0] * raw[0] + raw[1] * raw[1] + raw[2] * raw[2] + raw[3] * raw[3]).sqrt();
        if n == 0.0 {
            continue;
        }
        let q = decoded.quats[i];
        let dot = q[0] * g[0] + q[1] * g[1] + q[2] * g[2] + q[3] * g[3];
        for c in 0..4 {
            d_y[raw_start + c] = (g[c] - q[c] * dot) / n;
        }
        any = true;
    }
    if any {
        let d_in = params
            .rotation
            .backward(&decoded.rotation_cache, &d_y, &mut accum.rotation);
        for (f, d) in grads.d_feature.iter_mut().zip(&d_in) {
            *f += d;
        }
    }

    // Scale head: s = sigmoid(y) .* l_v.
    let mut d_y = vec![0.0; 3 * k];
    let mut any = false;
    for i in 0..k {
        let g = upstream.d_scale[i];
        if g.norm_squared() == 0.0 {
            continue;
        }
        let s = decoded.scales[i];
        for c in 0..3 {
            let sig = s[c] / anchor.scale[c];
            d_y[3 * i + c] = g[c] * sig * (1.0 - sig) * anchor.scale[c];
            grads.d_scale[c] += g[c] * sig;
        }
        any = true;
    }
    if any {
        let d_in = params
            .scale
            .backward(&decoded.scale_cache, &d_y, &mut accum.scale);
        for (f, d) in grads.d_feature.iter_mut().zip(&d_in) {
            *f += d;
        }
    }

    grads
}

/// Raw rotation head output block for one slot, reconstructed by running
/// the cached last hidden layer through the output weights.
fn rotation_head_output(params: &DecoderParams, decoded: &DecodedAnchor, start: usize) -> [f64; 4] {
    let mlp = &params.rotation;
    let last = mlp.layers.last().unwrap();
    let x: &[f64] = if mlp.layers.len() == 1 {
        &decoded.rotation_cache.input
    } else {
        decoded.rotation_cache.hidden.last().unwrap()
    };
    let mut out = [0.0; 4];
    for (c, o) in out.iter_mut().enumerate() {
        let row = &last.w[(start + c) * last.in_dim..(start + c + 1) * last.in_dim];
        let mut acc = last.b[start + c];
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        *o = acc;
    }
    out
}

/// Backward through the appearance encoder given the accumulated
/// embedding gradient. Returns dL/d(pose encoding).
pub fn afme_backward(
    params: &DecoderParams,
    cache: &MlpCache,
    d_embedding: &[f64],
    accum: &mut DecoderGradAccum,
) -> [f64; 7] {
    let d_in = params.afme.backward(cache, d_embedding, &mut accum.afme);
    let mut out = [0.0; 7];
    out.copy_from_slice(&d_in);
    out
}
