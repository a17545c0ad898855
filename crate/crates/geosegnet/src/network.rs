//! Five-stage encoder-decoder over point columns.
//!
//! Each encoder stage runs two geometry modules with different receptive
//! fields (K1 and K2 nearest neighbors, each widened by eigen-space
//! neighbors) and sums them.  Stages subsample by farthest-point
//! sampling; the decoder walks back up with nearest-neighbor
//! interpolation and skip concatenation.  Every stage gets a linear
//! prediction head; the full-resolution feature also passes through a
//! two-layer classifier for the final logits.

use crate::autodiff::{Dense, Graph, Mode, ParamStore, RBlock, StatUpdate, Value};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::geomfeat::{
    bounding_sphere, color_features, eigenspace_knn, gcfr_features, local_covariance_eigenvalues,
    local_density, EigenFeatures,
};
use crate::pointcloud::LabeledCloud;
use crate::spatial::{farthest_point_sample, NeighborTable, SpatialIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub const STAGES: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub class_count: usize,
    /// Per-stage subsampling divisors; stage point count is the ceiling
    /// of the previous count over the divisor.
    pub ratios: [usize; STAGES],
    pub widths: [usize; STAGES],
    pub k1: usize,
    pub k2: usize,
    /// Neighbor count of the eigen-space grouping appended to each
    /// receptive field.
    pub eigen_k: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub seed: u64,
    /// Ablation switches.  Disabling a feature block zeroes (or drops)
    /// its channels without changing any parameter shape, so sweeps stay
    /// comparable.
    pub use_eigen: bool,
    pub use_gcfr: bool,
    pub use_colors: bool,
    pub use_positions: bool,
    pub use_density: bool,
    pub use_residual: bool,
}

impl NetworkConfig {
    pub fn new(class_count: usize) -> NetworkConfig {
        NetworkConfig {
            class_count,
            ratios: [1, 4, 4, 4, 4],
            widths: [32, 64, 128, 256, 512],
            k1: 16,
            k2: 32,
            eigen_k: 16,
            lambda1: 0.1,
            lambda2: 0.2,
            tau: 1.0,
            seed: 0,
            use_eigen: true,
            use_gcfr: true,
            use_colors: true,
            use_positions: true,
            use_density: true,
            use_residual: true,
        }
    }

    /// Total subsampling factor from the input to the deepest stage.
    pub fn ratio_product(&self) -> usize {
        self.ratios.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::Config(format!(
                "class_count must be at least 2, got {}",
                self.class_count
            )));
        }
        if self.ratios[0] != 1 {
            return Err(Error::Config(format!(
                "the first stage ratio must be 1 (full resolution), got {}",
                self.ratios[0]
            )));
        }
        if self.ratios.iter().any(|&r| r == 0) {
            return Err(Error::Config("stage ratios must be positive".into()));
        }
        for (n, &w) in self.widths.iter().enumerate() {
            if w < 2 || w % 2 != 0 {
                return Err(Error::Config(format!(
                    "stage {n} width {w} must be even and at least 2"
                )));
            }
        }
        if self.k1 == 0 {
            return Err(Error::Config("k1 must be positive".into()));
        }
        if self.k2 <= self.k1 {
            return Err(Error::Config(format!(
                "k2 ({}) must exceed k1 ({})",
                self.k2, self.k1
            )));
        }
        if self.eigen_k == 0 {
            return Err(Error::Config("eigen_k must be positive".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative, got lambda1={} lambda2={}",
                self.lambda1, self.lambda2
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }

    /// Stage point counts for an input of `n` points.
    pub fn stage_counts(&self, n: usize) -> [usize; STAGES] {
        let mut counts = [0; STAGES];
        let mut prev = n;
        for (stage, &r) in self.ratios.iter().enumerate() {
            prev = prev.div_ceil(r);
            counts[stage] = prev;
        }
        counts
    }
}

/// Geometry of one encoder stage, shared by the forward pass and the
/// supervision/boundary machinery.
#[derive(Debug, Clone)]
pub struct StageState {
    pub stage: usize,
    /// Indices into the original cloud.
    pub cloud_indices: Vec<usize>,
    /// Row of each point in the previous stage (identity at stage 0).
    pub parent_rows: Vec<u32>,
    pub positions: Vec<Vec3>,
    pub k1_table: NeighborTable,
    pub k2_table: NeighborTable,
    pub eigen_table: NeighborTable,
    pub eigen: EigenFeatures,
    /// Per-point class distribution propagated from the ground truth;
    /// filled by the supervision builder.
    pub label_distribution: Option<Vec<f64>>,
}

impl StageState {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Everything one forward pass produces.
pub struct NetworkOutput {
    /// Per-stage logits at stage resolution.
    pub stage_logits: Vec<Value>,
    /// Full-resolution logits, one row per input point.
    pub final_logits: Value,
    /// Pre-head decoder features per stage (contrastive-loss inputs).
    pub stage_features: Vec<Value>,
    /// Encoder features per stage (the summed dual-receptive-field
    /// outputs), exposed for diagnostics.
    pub encoder_features: Vec<Value>,
}

struct Branch {
    pre1: RBlock,
    pre2: RBlock,
    score: Dense,
    pos: RBlock,
}

impl Branch {
    fn new(prefix: &str, cfg: &NetworkConfig, h_channels: usize, width: usize) -> Branch {
        let u = width / 2;
        let block = |name: &str, i, o| {
            if cfg.use_residual {
                RBlock::new(name, i, o)
            } else {
                RBlock::plain(name, i, o)
            }
        };
        Branch {
            pre1: block(&format!("{prefix}.pre1"), 3 + h_channels, u),
            pre2: block(&format!("{prefix}.pre2"), u + 13, u),
            score: Dense::linear(&format!("{prefix}.score"), u, u),
            pos: block(&format!("{prefix}.pos"), u, width),
        }
    }

    fn register(&self, store: &mut ParamStore, rng: &mut ChaCha12Rng) -> Result<()> {
        self.pre1.register(store, rng)?;
        self.pre2.register(store, rng)?;
        self.score.register(store, rng)?;
        self.pos.register(store, rng)
    }
}

struct StageLayers {
    rf1: Branch,
    rf2: Branch,
}

pub struct Network {
    cfg: NetworkConfig,
    stage_layers: Vec<StageLayers>,
    decoders: Vec<Dense>,
    heads: Vec<Dense>,
    final1: Dense,
    final2: Dense,
}

impl Network {
    pub fn new(cfg: NetworkConfig) -> Result<Network> {
        cfg.validate()?;
        let mut stage_layers = Vec::with_capacity(STAGES);
        for n in 0..STAGES {
            let h_channels = if n == 0 { 3 } else { cfg.widths[n - 1] };
            stage_layers.push(StageLayers {
                rf1: Branch::new(&format!("enc{n}.rf1"), &cfg, h_channels, cfg.widths[n]),
                rf2: Branch::new(&format!("enc{n}.rf2"), &cfg, h_channels, cfg.widths[n]),
            });
        }
        let decoders = (0..STAGES - 1)
            .map(|n| {
                Dense::new(
                    &format!("dec{n}"),
                    cfg.widths[n + 1] + cfg.widths[n],
                    cfg.widths[n],
                    true,
                    true,
                )
            })
            .collect();
        let heads = (0..STAGES)
            .map(|n| Dense::classifier(&format!("head{n}"), cfg.widths[n], cfg.class_count))
            .collect();
        let final1 = Dense::new("final.fc1", cfg.widths[0], cfg.widths[0] / 2, true, true);
        let final2 = Dense::classifier("final.fc2", cfg.widths[0] / 2, cfg.class_count);
        Ok(Network {
            cfg,
            stage_layers,
            decoders,
            heads,
            final1,
            final2,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    /// Fresh parameters, deterministic in the config seed.
    pub fn init_params(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(self.cfg.seed);
        for sl in &self.stage_layers {
            sl.rf1.register(&mut store, &mut rng)?;
            sl.rf2.register(&mut store, &mut rng)?;
        }
        for d in &self.decoders {
            d.register(&mut store, &mut rng)?;
        }
        for h in &self.heads {
            h.register(&mut store, &mut rng)?;
        }
        self.final1.register(&mut store, &mut rng)?;
        self.final2.register(&mut store, &mut rng)?;
        Ok(store)
    }

    /// Builds the stage geometry: farthest-point-sampled point sets,
    /// neighbor tables for both receptive fields, eigen features and the
    /// eigen-space grouping table.
    pub fn encode(&self, cloud: &LabeledCloud) -> Result<Vec<StageState>> {
        let n = cloud.len();
        let need = self.cfg.ratio_product();
        if n < need {
            return Err(Error::InvalidArgument(format!(
                "{n} points cannot reach the deepest stage; need at least {need}"
            )));
        }
        let mut stages: Vec<StageState> = Vec::with_capacity(STAGES);
        for stage in 0..STAGES {
            let (parent_rows, cloud_indices, positions): (Vec<u32>, Vec<usize>, Vec<Vec3>) =
                if stage == 0 {
                    (
                        (0..n as u32).collect(),
                        (0..n).collect(),
                        cloud.positions.clone(),
                    )
                } else {
                    let prev = &stages[stage - 1];
                    let m = prev.len().div_ceil(self.cfg.ratios[stage]);
                    let rows = farthest_point_sample(
                        &prev.positions,
                        m,
                        self.cfg.seed.wrapping_add(stage as u64),
                    )?;
                    let cloud_indices = rows.iter().map(|&r| prev.cloud_indices[r]).collect();
                    let positions = rows.iter().map(|&r| prev.positions[r]).collect();
                    (rows.iter().map(|&r| r as u32).collect(), cloud_indices, positions)
                };
            let len = positions.len();
            let index = SpatialIndex::build(&positions)?;
            let k1_table = index.knn(&positions, self.cfg.k1.min(len))?;
            let k2_table = index.knn(&positions, self.cfg.k2.min(len))?;
            let eigen = local_covariance_eigenvalues(&positions, &k1_table)?;
            let eigen_table = eigenspace_knn(&eigen, self.cfg.eigen_k.min(len))?;
            stages.push(StageState {
                stage,
                cloud_indices,
                parent_rows,
                positions,
                k1_table,
                k2_table,
                eigen_table,
                eigen,
                label_distribution: None,
            });
        }
        Ok(stages)
    }

    /// Runs the network over prebuilt stages.
    pub fn forward(
        &self,
        g: &Graph,
        store: &ParamStore,
        cloud: &LabeledCloud,
        stages: &[StageState],
        mode: Mode,
        stats: &mut Vec<StatUpdate>,
    ) -> Result<NetworkOutput> {
        if stages.len() != STAGES {
            return Err(Error::InvalidArgument(format!(
                "expected {STAGES} stages, got {}",
                stages.len()
            )));
        }
        let (_, global_radius) = bounding_sphere(&cloud.positions)?;

        let mut encoder_features: Vec<Value> = Vec::with_capacity(STAGES);
        for (n, stage) in stages.iter().enumerate() {
            let colors: Vec<Vec3> = stage
                .cloud_indices
                .iter()
                .map(|&i| cloud.colors[i])
                .collect();
            let h_point = if n == 0 {
                None
            } else {
                let picked = g.gather_rows(encoder_features[n - 1], &stage.parent_rows, 1)?;
                Some(g.reshape(picked, vec![stage.len(), self.cfg.widths[n - 1]])?)
            };
            let layers = &self.stage_layers[n];
            let f1 = self.branch_forward(
                g, store, &layers.rf1, stage, &stage.k1_table, h_point, &colors, global_radius,
                mode, stats,
            )?;
            let f2 = self.branch_forward(
                g, store, &layers.rf2, stage, &stage.k2_table, h_point, &colors, global_radius,
                mode, stats,
            )?;
            encoder_features.push(g.add(f1, f2)?);
        }

        let mut stage_features = vec![encoder_features[STAGES - 1]; STAGES];
        for n in (0..STAGES - 1).rev() {
            let up = nn_interpolate_up(
                g,
                stage_features[n + 1],
                &stages[n + 1].positions,
                &stages[n].positions,
            )?;
            let cat = g.concat(1, &[up, encoder_features[n]])?;
            stage_features[n] = self.decoders[n].apply(g, store, cat, mode, stats)?;
        }

        let mut stage_logits = Vec::with_capacity(STAGES);
        for n in 0..STAGES {
            stage_logits.push(self.heads[n].apply(g, store, stage_features[n], mode, stats)?);
        }
        let mid = self.final1.apply(g, store, stage_features[0], mode, stats)?;
        let final_logits = self.final2.apply(g, store, mid, mode, stats)?;

        Ok(NetworkOutput {
            stage_logits,
            final_logits,
            stage_features,
            encoder_features,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn branch_forward(
        &self,
        g: &Graph,
        store: &ParamStore,
        branch: &Branch,
        stage: &StageState,
        euclid_table: &NeighborTable,
        h_point: Option<Value>,
        colors: &[Vec3],
        global_radius: f64,
        mode: Mode,
        stats: &mut Vec<StatUpdate>,
    ) -> Result<Value> {
        let cfg = &self.cfg;
        let len = stage.len();
        let combined = if cfg.use_eigen {
            euclid_table.concat(&stage.eigen_table)?
        } else {
            euclid_table.clone()
        };
        let kk = combined.k();

        let gcfr_leaf = if cfg.use_gcfr {
            let gcfr = gcfr_features(&stage.positions, &combined)?;
            let mut data = vec![0.0; len * kk * 3];
            for t in 0..len * kk {
                data[t * 3] = gcfr.dis[t];
                data[t * 3 + 1] = gcfr.phi_rel[t];
                data[t * 3 + 2] = gcfr.theta_rel[t];
            }
            g.leaf(vec![len, kk, 3], data)?
        } else {
            g.leaf(vec![len, kk, 3], vec![0.0; len * kk * 3])?
        };

        let grouped_h = match h_point {
            Some(prev) => g.gather_rows(prev, combined.indices(), kk)?,
            None => {
                let mut data = vec![0.0; len * kk * 3];
                if cfg.use_eigen {
                    for i in 0..len {
                        for (j, &nb) in combined.row(i).iter().enumerate() {
                            let lam = stage.eigen.lambdas[nb as usize];
                            let t = (i * kk + j) * 3;
                            data[t] = lam[0];
                            data[t + 1] = lam[1];
                            data[t + 2] = lam[2];
                        }
                    }
                }
                g.leaf(vec![len, kk, 3], data)?
            }
        };

        let f_g = g.concat(2, &[gcfr_leaf, grouped_h])?;
        let x = branch.pre1.apply(g, store, f_g, mode, stats)?;

        let mut pos_data = vec![0.0; len * kk * 3];
        if cfg.use_positions {
            for i in 0..len {
                for j in 0..kk {
                    let t = (i * kk + j) * 3;
                    pos_data[t] = stage.positions[i][0];
                    pos_data[t + 1] = stage.positions[i][1];
                    pos_data[t + 2] = stage.positions[i][2];
                }
            }
        }
        let pos_leaf = g.leaf(vec![len, kk, 3], pos_data)?;

        let mut density_data = vec![0.0; len * kk];
        if cfg.use_density {
            let density = local_density(euclid_table, global_radius)?;
            for i in 0..len {
                for j in 0..kk {
                    density_data[i * kk + j] = density.ratio[i];
                }
            }
        }
        let density_leaf = g.leaf(vec![len, kk, 1], density_data)?;

        let color_leaf = if cfg.use_colors {
            let cf = color_features(colors, &combined)?;
            g.leaf(vec![len, kk, 9], cf.combined)?
        } else {
            g.leaf(vec![len, kk, 9], vec![0.0; len * kk * 9])?
        };

        let cat = g.concat(2, &[x, pos_leaf, density_leaf, color_leaf])?;
        let x = branch.pre2.apply(g, store, cat, mode, stats)?;
        let pooled = attentive_pool(g, store, x, &branch.score, mode, stats)?;
        branch.pos.apply(g, store, pooled, mode, stats)
    }
}

/// Scores every neighbor with a shared linear layer, softmax-normalizes
/// the scores over the neighbor axis per channel, and sums.  Weights form
/// a convex combination, so identical neighbors pool to themselves.
pub fn attentive_pool(
    g: &Graph,
    store: &ParamStore,
    neighbor_feats: Value,
    score: &Dense,
    mode: Mode,
    stats: &mut Vec<StatUpdate>,
) -> Result<Value> {
    let shape = g.shape(neighbor_feats);
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "attentive_pool",
            lhs: shape,
            rhs: vec![0, 0, 0],
        });
    }
    let scores = score.apply(g, store, neighbor_feats, mode, stats)?;
    let weights = g.softmax(scores, 1)?;
    g.reduce_sum(g.mul(weights, neighbor_feats)?, 1)
}

/// Upsamples coarse per-point features to the fine point set: each fine
/// point mixes its 3 nearest coarse features with weights 1/(d + 1e-8),
/// normalized.  A fine point coinciding with a coarse point copies that
/// feature exactly.
pub fn nn_interpolate_up(
    g: &Graph,
    coarse_feats: Value,
    coarse_positions: &[Vec3],
    fine_positions: &[Vec3],
) -> Result<Value> {
    let shape = g.shape(coarse_feats);
    if shape.len() != 2 || shape[0] != coarse_positions.len() {
        return Err(Error::ShapeMismatch {
            op: "nn_interpolate_up",
            lhs: shape,
            rhs: vec![coarse_positions.len()],
        });
    }
    let c = shape[1];
    let k = 3.min(coarse_positions.len());
    let index = SpatialIndex::build(coarse_positions)?;
    let table = index.knn(fine_positions, k)?;
    let n = fine_positions.len();

    let gathered = g.gather_rows(coarse_feats, table.indices(), k)?;
    let mut weight_data = vec![0.0; n * k * c];
    let mut w = vec![0.0; k];
    for i in 0..n {
        let ds = table.row_distances(i);
        if ds[0] == 0.0 {
            w.iter_mut().for_each(|v| *v = 0.0);
            w[0] = 1.0;
        } else {
            let mut sum = 0.0;
            for j in 0..k {
                w[j] = 1.0 / (ds[j] + 1e-8);
                sum += w[j];
            }
            w.iter_mut().for_each(|v| *v /= sum);
        }
        for j in 0..k {
            for ch in 0..c {
                weight_data[(i * k + j) * c + ch] = w[j];
            }
        }
    }
    let weights = g.leaf(vec![n, k, c], weight_data)?;
    g.reduce_sum(g.mul(gathered, weights)?, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> NetworkConfig {
        let mut cfg = NetworkConfig::new(3);
        cfg.ratios = [1, 2, 2, 2, 2];
        cfg.widths = [8, 8, 8, 8, 8];
        cfg.k1 = 4;
        cfg.k2 = 6;
        cfg.eigen_k = 4;
        cfg.seed = 7;
        cfg
    }

    fn random_cloud(n: usize, classes: usize, seed: u64) -> LabeledCloud {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let positions = (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(0.0..1.0),
                ]
            })
            .collect();
        let colors = (0..n)
            .map(|_| {
                [
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                ]
            })
            .collect();
        let labels = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        LabeledCloud::new(positions, colors, labels, classes).unwrap()
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let mut cfg = NetworkConfig::new(3);
        assert!(cfg.validate().is_ok());
        cfg.k2 = cfg.k1;
        assert!(cfg.validate().is_err());
        cfg = NetworkConfig::new(3);
        cfg.ratios[0] = 2;
        assert!(cfg.validate().is_err());
        cfg = NetworkConfig::new(3);
        cfg.widths[2] = 7;
        assert!(cfg.validate().is_err());
        cfg = NetworkConfig::new(1);
        assert!(cfg.validate().is_err());
        cfg = NetworkConfig::new(3);
        cfg.lambda2 = -0.1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stage_counts_follow_ceiling_schedule() {
        let cfg = NetworkConfig::new(2);
        assert_eq!(cfg.stage_counts(4096), [4096, 1024, 256, 64, 16]);
        assert_eq!(cfg.stage_counts(257), [257, 65, 17, 5, 2]);
    }

    #[test]
    fn encode_errors_below_minimum_points() {
        let net = Network::new(tiny_config()).unwrap();
        let cloud = random_cloud(15, 3, 1);
        assert!(net.encode(&cloud).is_err());
        let cloud = random_cloud(16, 3, 1);
        assert!(net.encode(&cloud).is_ok());
    }

    #[test]
    fn stages_are_nested_subsets() {
        let net = Network::new(tiny_config()).unwrap();
        let cloud = random_cloud(64, 3, 2);
        let stages = net.encode(&cloud).unwrap();
        assert_eq!(stages.len(), STAGES);
        assert_eq!(stages[0].len(), 64);
        for n in 1..STAGES {
            let parent: std::collections::BTreeSet<usize> =
                stages[n - 1].cloud_indices.iter().copied().collect();
            assert!(stages[n].len() < stages[n - 1].len());
            for (&ci, &pr) in stages[n].cloud_indices.iter().zip(&stages[n].parent_rows) {
                assert!(parent.contains(&ci));
                assert_eq!(stages[n - 1].cloud_indices[pr as usize], ci);
            }
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let net = Network::new(tiny_config()).unwrap();
        let cloud = random_cloud(48, 3, 3);
        let a = net.encode(&cloud).unwrap();
        let b = net.encode(&cloud).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.cloud_indices, y.cloud_indices);
            assert_eq!(x.k1_table.indices(), y.k1_table.indices());
        }
    }

    #[test]
    fn forward_output_shapes_match_contract() {
        let net = Network::new(tiny_config()).unwrap();
        let cloud = random_cloud(40, 3, 4);
        let stages = net.encode(&cloud).unwrap();
        let store = net.init_params().unwrap();
        let g = Graph::new();
        let mut stats = Vec::new();
        let out = net
            .forward(&g, &store, &cloud, &stages, Mode::Train, &mut stats)
            .unwrap();
        assert_eq!(g.shape(out.final_logits), vec![40, 3]);
        for (n, &logits) in out.stage_logits.iter().enumerate() {
            assert_eq!(g.shape(logits), vec![stages[n].len(), 3]);
            assert!(g.data(logits).iter().all(|v| v.is_finite()));
        }
        for (n, &feat) in out.stage_features.iter().enumerate() {
            assert_eq!(g.shape(feat), vec![stages[n].len(), 8]);
        }
    }

    #[test]
    fn dual_branches_sum_exactly() {
        let net = Network::new(tiny_config()).unwrap();
        let cloud = random_cloud(32, 3, 5);
        let stages = net.encode(&cloud).unwrap();
        let store = net.init_params().unwrap();

        let run = |s: &ParamStore| {
            let g = Graph::new();
            let mut stats = Vec::new();
            let out = net.forward(&g, s, &cloud, &stages, Mode::Eval, &mut stats).unwrap();
            out.encoder_features.iter().map(|&f| g.data(f)).collect::<Vec<_>>()
        };
        let full = run(&store);
        let mut only1 = store.clone();
        only1.zero_prefix("enc0.rf2.");
        let mut only2 = store.clone();
        only2.zero_prefix("enc0.rf1.");
        let a = run(&only1);
        let b = run(&only2);
        // Deeper stages see different inputs after ablation, so only
        // stage 0 decomposes exactly.
        for ((f, x), y) in full[0].iter().zip(&a[0]).zip(&b[0]) {
            assert!((f - (x + y)).abs() < 1e-9, "{f} vs {} + {}", x, y);
        }
    }

    #[test]
    fn attentive_pool_is_convex_and_exact_on_singletons() {
        let g = Graph::new();
        let mut store = ParamStore::new();
        let score = Dense::linear("pool.score", 2, 2);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        score.register(&mut store, &mut rng).unwrap();
        let mut stats = Vec::new();

        // K = 1: pooling returns the lone neighbor.
        let single = g.leaf(vec![2, 1, 2], vec![0.3, -0.8, 1.5, 0.2]).unwrap();
        let out = attentive_pool(&g, &store, single, &score, Mode::Eval, &mut stats).unwrap();
        assert_eq!(g.data(out), vec![0.3, -0.8, 1.5, 0.2]);

        // Identical neighbors: pooling returns the shared feature.
        let same = g
            .leaf(vec![1, 3, 2], vec![0.4, 0.7, 0.4, 0.7, 0.4, 0.7])
            .unwrap();
        let out = attentive_pool(&g, &store, same, &score, Mode::Eval, &mut stats).unwrap();
        let data = g.data(out);
        assert!((data[0] - 0.4).abs() < 1e-12);
        assert!((data[1] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn interpolation_copies_and_averages() {
        let g = Graph::new();
        let coarse_pos = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [50.0, 50.0, 50.0]];
        // The third feature row is the mean of the first two, so a query
        // equidistant from those two must reproduce that mean exactly no
        // matter how the third neighbor is weighted.
        let feats = g
            .leaf(vec![3, 2], vec![1.0, 10.0, 3.0, 30.0, 2.0, 20.0])
            .unwrap();

        // Fine set equal to the coarse set: exact copy.
        let copied = nn_interpolate_up(&g, feats, &coarse_pos, &coarse_pos).unwrap();
        assert_eq!(g.data(copied), g.data(feats));

        let mid = vec![[0.5, 0.0, 0.0]];
        let out = nn_interpolate_up(&g, feats, &coarse_pos, &mid).unwrap();
        let data = g.data(out);
        assert!((data[0] - 2.0).abs() < 1e-12, "{}", data[0]);
        assert!((data[1] - 20.0).abs() < 1e-12, "{}", data[1]);

        // Constant features stay constant anywhere.
        let const_feats = g.leaf(vec![3, 1], vec![4.2, 4.2, 4.2]).unwrap();
        let probe = vec![[0.3, 0.1, 0.0], [10.0, -3.0, 2.0]];
        let out = nn_interpolate_up(&g, const_feats, &coarse_pos, &probe).unwrap();
        for v in g.data(out) {
            assert!((v - 4.2).abs() < 1e-12);
        }
    }
}
