//! Anchor-based scene representation: voxelization of point clouds into
//! fixed anchor centers, anchor storage, and the growing/pruning refinement
//! rules driven by accumulated render statistics.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{lattice_center, lattice_key};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("point cloud contains a non-finite coordinate at index {0}")]
    NonFinitePoint(usize),
    #[error("voxel size must be positive, got {0}")]
    BadVoxelSize(f64),
}

/// World-frame point cloud, meters.
#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn validate(&self) -> Result<(), SceneError> {
        for (i, p) in self.points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(SceneError::NonFinitePoint(i));
            }
        }
        Ok(())
    }
}

/// Voxel grid resolution used for anchor construction.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VoxelGridConfig {
    /// Voxel edge length, meters.
    pub epsilon: f64,
}

impl VoxelGridConfig {
    pub fn new(epsilon: f64) -> Result<Self, SceneError> {
        if !(epsilon > 0.0) {
            return Err(SceneError::BadVoxelSize(epsilon));
        }
        Ok(Self { epsilon })
    }
}

/// Quantize a point cloud to deduplicated voxel centers.
///
/// Each output center equals `round(p / eps) * eps` for some input point,
/// rounding halves away from zero. Dedup goes through integer lattice keys,
/// never through float comparison. Output order is the first-seen order of
/// the input, which keeps incremental merging deterministic.
pub fn voxelize(cloud: &PointCloud, cfg: VoxelGridConfig) -> Result<Vec<Vector3<f64>>, SceneError> {
    if !(cfg.epsilon > 0.0) {
        return Err(SceneError::BadVoxelSize(cfg.epsilon));
    }
    cloud.validate()?;
    let mut seen: HashSet<[i64; 3]> = HashSet::with_capacity(cloud.len());
    let mut centers = Vec::new();
    for p in &cloud.points {
        let key = lattice_key(p, cfg.epsilon);
        if seen.insert(key) {
            centers.push(lattice_center(key, cfg.epsilon));
        }
    }
    Ok(centers)
}

/// Initialization ranges for fresh anchors. Offsets are in voxel units
/// (multiplied by the per-axis scale at decode time); the per-axis scale
/// starts at the voxel size so initial Gaussians stay inside their voxel
/// neighborhood.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InitPolicy {
    pub feature_amp: f64,
    pub offset_amp: f64,
    /// Per-axis initial scale. `None` means "use the voxel size".
    pub scale_init: Option<f64>,
}

impl Default for InitPolicy {
    fn default() -> Self {
        Self {
            feature_amp: 0.01,
            offset_amp: 0.5,
            scale_init: None,
        }
    }
}

/// Voxel-centered carrier of a context feature, per-axis scale, and k
/// learnable offsets. The center is never touched by the optimizer.
#[derive(Debug, Clone)]
pub struct Anchor {
    pub center: Vector3<f64>,
    pub feature: Vec<f64>,
    /// Per-axis scale, componentwise positive.
    pub scale: Vector3<f64>,
    /// k rows of unitless offsets.
    pub offsets: Vec<Vector3<f64>>,
    pub active: bool,
}

impl Anchor {
    pub fn new<R: Rng>(
        center: Vector3<f64>,
        k: usize,
        feature_dim: usize,
        voxel_size: f64,
        init: &InitPolicy,
        rng: &mut R,
    ) -> Self {
        let feature = (0..feature_dim)
            .map(|_| rng.gen_range(-init.feature_amp..=init.feature_amp))
            .collect();
        let offsets = (0..k)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-init.offset_amp..=init.offset_amp),
                    rng.gen_range(-init.offset_amp..=init.offset_amp),
                    rng.gen_range(-init.offset_amp..=init.offset_amp),
                )
            })
            .collect();
        let s = init.scale_init.unwrap_or(voxel_size);
        Anchor {
            center,
            feature,
            scale: Vector3::new(s, s, s),
            offsets,
            active: true,
        }
    }
}

/// Per-anchor render statistics accumulated over a refinement window.
#[derive(Debug, Clone, Default)]
pub struct AnchorStats {
    /// Sum of screen-space positional gradient norms of child Gaussians.
    pub grad_accum: f64,
    /// Sum of decoded (clamped) opacities.
    pub opacity_accum: f64,
    /// Number of opacity samples; zero means the anchor was never observed.
    pub sample_count: u64,
}

/// Per-Gaussian gradient record used by anchor growing: window sums of the
/// 2D projected-position gradient norm for one anchor/offset slot.
#[derive(Debug, Clone, Copy, Default)]
pub struct GaussianGradRecord {
    pub grad_sum: f64,
    pub count: u64,
}

/// Growing/pruning parameters. Grow voxels shrink and thresholds rise with
/// each quantization level: eps_g / 4^(m-1) and tau_g * 2^(m-1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefinementConfig {
    /// Base grow-voxel size, meters.
    pub epsilon_g: f64,
    /// Base mean-gradient threshold.
    pub tau_g: f64,
    /// Number of quantization levels.
    pub levels: usize,
    /// Window length in iterations between refinement events.
    pub window: u64,
    /// Anchors with mean decoded opacity below this are removed.
    pub prune_opacity: f64,
    /// Independent keep probability for each grow candidate.
    pub candidate_keep_prob: f64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            epsilon_g: 0.001,
            tau_g: 0.0002,
            levels: 3,
            window: 100,
            prune_opacity: 0.005,
            candidate_keep_prob: 0.5,
        }
    }
}

/// The anchor set plus the scene-lattice occupancy map used for
/// incremental merging. Single-writer; hand out `&` snapshots for
/// rendering.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub anchors: Vec<Anchor>,
    pub k: usize,
    pub feature_dim: usize,
    pub voxel_size: f64,
    occupied: HashSet<[i64; 3]>,
}

impl AnchorSet {
    pub fn empty(k: usize, feature_dim: usize, voxel_size: f64) -> Self {
        assert!(k >= 1, "k must be at least 1");
        Self {
            anchors: Vec::new(),
            k,
            feature_dim,
            voxel_size,
            occupied: HashSet::new(),
        }
    }

    /// One anchor per center, initialized per policy.
    pub fn init_anchors<R: Rng>(
        centers: &[Vector3<f64>],
        k: usize,
        feature_dim: usize,
        voxel_size: f64,
        init: &InitPolicy,
        rng: &mut R,
    ) -> Self {
        let mut set = Self::empty(k, feature_dim, voxel_size);
        for c in centers {
            set.push_anchor(Anchor::new(*c, k, feature_dim, voxel_size, init, rng));
        }
        set
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    fn push_anchor(&mut self, anchor: Anchor) {
        self.occupied
            .insert(lattice_key(&anchor.center, self.voxel_size));
        self.anchors.push(anchor);
    }

    /// Recompute the scene-lattice occupancy from the anchor list, for
    /// callers that installed anchors directly (checkpoint restore).
    pub fn rebuild_occupancy(&mut self) {
        self.occupied = self
            .anchors
            .iter()
            .map(|a| lattice_key(&a.center, self.voxel_size))
            .collect();
    }

    /// Incremental voxelization: anchors are added only at voxel centers
    /// not already occupied; existing anchors are untouched. Returns the
    /// number of anchors added.
    pub fn merge_new_keyframe_anchors<R: Rng>(
        &mut self,
        cloud: &PointCloud,
        init: &InitPolicy,
        rng: &mut R,
    ) -> Result<usize, SceneError> {
        let centers = voxelize(cloud, VoxelGridConfig::new(self.voxel_size)?)?;
        let mut added = 0;
        for c in centers {
            let key = lattice_key(&c, self.voxel_size);
            if !self.occupied.contains(&key) {
                self.push_anchor(Anchor::new(
                    c,
                    self.k,
                    self.feature_dim,
                    self.voxel_size,
                    init,
                    rng,
                ));
                added += 1;
            }
        }
        Ok(added)
    }

    /// Multi-resolution anchor growing over one completed stats window.
    ///
    /// For each level m: Gaussians are quantized into voxels of size
    /// eps_g/4^(m-1); a voxel whose mean child-Gaussian screen-space
    /// gradient exceeds tau_g*2^(m-1) becomes a candidate. Candidates that
    /// collide with a voxel already holding an anchor (at that level's
    /// lattice) are discarded; the rest survive an independent keep-prob
    /// coin flip. Returns the number of anchors grown.
    ///
    /// `gaussian_positions[a]` are the current decoded child positions of
    /// anchor `a`; `records[a]` are the matching window gradient sums.
    pub fn grow_anchors<R: Rng>(
        &mut self,
        gaussian_positions: &[Vec<Vector3<f64>>],
        records: &[Vec<GaussianGradRecord>],
        cfg: &RefinementConfig,
        init: &InitPolicy,
        rng: &mut R,
    ) -> usize {
        assert_eq!(gaussian_positions.len(), self.anchors.len());
        assert_eq!(records.len(), self.anchors.len());
        let mut grown = 0;
        for level in 0..cfg.levels {
            let eps_m = cfg.epsilon_g / 4f64.powi(level as i32);
            let tau_m = cfg.tau_g * 2f64.powi(level as i32);

            // Occupancy at this level's lattice, including anchors grown at
            // coarser levels this same event.
            let occupied_m: HashSet<[i64; 3]> = self
                .anchors
                .iter()
                .map(|a| lattice_key(&a.center, eps_m))
                .collect();

            // Mean gradient per voxel: average the per-slot window means of
            // every Gaussian that falls in the voxel. BTreeMap keeps the
            // candidate ordering (and thus RNG consumption) deterministic.
            let mut voxel_acc: BTreeMap<[i64; 3], (f64, u64)> = BTreeMap::new();
            for (positions, recs) in gaussian_positions.iter().zip(records) {
                for (p, rec) in positions.iter().zip(recs) {
                    if rec.count == 0 {
                        continue;
                    }
                    let key = lattice_key(p, eps_m);
                    let entry = voxel_acc.entry(key).or_insert((0.0, 0));
                    entry.0 += rec.grad_sum / rec.count as f64;
                    entry.1 += 1;
                }
            }

            for (key, (mean_sum, n)) in voxel_acc {
                let mean_grad = mean_sum / n as f64;
                if mean_grad <= tau_m || occupied_m.contains(&key) {
                    continue;
                }
                if cfg.candidate_keep_prob < 1.0
                    && rng.gen_range(0.0..1.0) >= cfg.candidate_keep_prob
                {
                    continue;
                }
                let mut policy = *init;
                policy.scale_init = Some(eps_m);
                self.push_anchor(Anchor::new(
                    lattice_center(key, eps_m),
                    self.k,
                    self.feature_dim,
                    self.voxel_size,
                    &policy,
                    rng,
                ));
                grown += 1;
            }
        }
        grown
    }

    /// Removes anchors whose mean decoded opacity over the window fell
    /// below the prune threshold. Anchors never observed in the window
    /// (sample_count == 0) are exempt: pruning requires evidence. Returns
    /// the indices removed, ascending.
    pub fn prune_anchors(&mut self, stats: &[AnchorStats], cfg: &RefinementConfig) -> Vec<usize> {
        assert_eq!(stats.len(), self.anchors.len());
        let doomed: Vec<usize> = stats
            .iter()
            .enumerate()
            .filter(|(_, s)| {
                s.sample_count > 0
                    && s.opacity_accum / (s.sample_count as f64) < cfg.prune_opacity
            })
            .map(|(i, _)| i)
            .collect();
        if doomed.is_empty() {
            return doomed;
        }
        let doomed_set: BTreeSet<usize> = doomed.iter().copied().collect();
        let mut idx = 0;
        self.anchors.retain(|_| {
            let keep = !doomed_set.contains(&idx);
            idx += 1;
            keep
        });
        self.occupied = self
            .anchors
            .iter()
            .map(|a| lattice_key(&a.center, self.voxel_size))
            .collect();
        doomed
    }
}
