//! Per-point feature extraction.
//!
//! A sample-group-pool encoder (two set-abstraction levels by default)
//! followed by a matching inverse-distance decoder turns an N-point cloud
//! into an N x D feature matrix. The geometric part of every stage (FPS
//! centers, ball-query groups, interpolation weights) depends only on the
//! point positions, so it is planned once per frame and reused across
//! training steps; only the tape ops rerun.

use rand::Rng;
use thiserror::Error;

use crate::points::{
    ball_query, farthest_point_sample, knn, lexicographic_seed_index, PointError,
};
use crate::tensor::blocks::{Activation, Mlp};
use crate::tensor::{FeatureMatrix, NodeId, ParamSet, Tape, TensorError};
use crate::types::PointCloud;

/// Input width of the raw per-point feature rows (x, y, z, reflectance).
pub const RAW_POINT_WIDTH: usize = 4;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("invalid backbone config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Point(#[from] PointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One encoder stage: FPS to input_count / sample_divisor centers, group
/// within radius, shared MLP, max-pool.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AbstractionLevel {
    pub sample_divisor: usize,
    pub radius: f64,
    pub max_group: usize,
    pub mlp_widths: Vec<usize>,
}

impl Default for AbstractionLevel {
    fn default() -> Self {
        AbstractionLevel { sample_divisor: 4, radius: 0.4, max_group: 32, mlp_widths: vec![32, 32] }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Output feature width D.
    pub feature_dim: usize,
    pub levels: Vec<AbstractionLevel>,
    /// Decoder MLP widths, one list per propagation stage (coarse to fine).
    pub propagation_widths: Vec<Vec<usize>>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            feature_dim: 32,
            levels: vec![
                AbstractionLevel {
                    sample_divisor: 4,
                    radius: 0.4,
                    max_group: 32,
                    mlp_widths: vec![32, 32],
                },
                AbstractionLevel {
                    sample_divisor: 4,
                    radius: 0.8,
                    max_group: 32,
                    mlp_widths: vec![64, 64],
                },
            ],
            propagation_widths: vec![vec![64], vec![32]],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), BackboneError> {
        if self.feature_dim == 0 {
            return Err(BackboneError::InvalidConfig("feature_dim must be positive".into()));
        }
        if self.levels.is_empty() {
            return Err(BackboneError::InvalidConfig("at least one abstraction level".into()));
        }
        for pair in self.levels.windows(2) {
            if pair[1].radius <= pair[0].radius {
                return Err(BackboneError::InvalidConfig(
                    "level radii must be strictly increasing".into(),
                ));
            }
        }
        for level in &self.levels {
            if level.sample_divisor == 0 || level.max_group == 0 || level.mlp_widths.is_empty() {
                return Err(BackboneError::InvalidConfig(
                    "levels need nonzero divisor, group size and at least one width".into(),
                ));
            }
            if !(level.radius.is_finite() && level.radius > 0.0) {
                return Err(BackboneError::InvalidConfig("radius must be positive".into()));
            }
        }
        if self.propagation_widths.len() != self.levels.len() {
            return Err(BackboneError::InvalidConfig(
                "one propagation width list per abstraction level".into(),
            ));
        }
        if self.propagation_widths.iter().any(|w| w.is_empty()) {
            return Err(BackboneError::InvalidConfig(
                "propagation width lists must be nonempty".into(),
            ));
        }
        Ok(())
    }
}

/// Frozen geometry of one set-abstraction stage.
#[derive(Debug, Clone)]
pub struct SaPlan {
    pub center_indices: Vec<usize>,
    pub center_positions: Vec<[f64; 3]>,
    /// Flattened member row indices into the stage input, grouped by center.
    pub group_rows: Vec<usize>,
    /// Segment id (center index) per flattened member row.
    pub group_segments: Vec<usize>,
    /// Member position minus center position, one row per flattened member.
    pub rel_positions: FeatureMatrix,
}

pub fn plan_set_abstraction(
    positions: &[[f64; 3]],
    sample_count: usize,
    radius: f64,
    max_group: usize,
) -> Result<SaPlan, PointError> {
    let seed = lexicographic_seed_index(positions)?;
    let center_indices = farthest_point_sample(positions, sample_count, seed)?;
    let neighbors = ball_query(positions, &center_indices, radius, max_group)?;
    let mut group_rows = Vec::new();
    let mut group_segments = Vec::new();
    let mut rel = Vec::new();
    for (segment, (&center, list)) in
        center_indices.iter().zip(&neighbors.per_center).enumerate()
    {
        let c = positions[center];
        for n in list {
            let p = positions[n.index];
            group_rows.push(n.index);
            group_segments.push(segment);
            rel.extend_from_slice(&[p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
        }
    }
    let rel_positions = FeatureMatrix::from_flat(group_rows.len(), 3, rel);
    let center_positions = center_indices.iter().map(|&i| positions[i]).collect();
    Ok(SaPlan { center_indices, center_positions, group_rows, group_segments, rel_positions })
}

/// Runs the pooled shared-MLP stage of a planned abstraction on the tape.
pub fn apply_set_abstraction(
    tape: &mut Tape,
    params: &ParamSet,
    plan: &SaPlan,
    features: NodeId,
    mlp: &Mlp,
) -> NodeId {
    let gathered = tape.gather_rows(features, plan.group_rows.clone());
    let rel = tape.constant(plan.rel_positions.clone());
    let combined = tape.concat_cols(&[rel, gathered]);
    let transformed = mlp.apply(tape, params, combined);
    tape.segment_max(transformed, &plan.group_segments, plan.center_positions.len())
}

/// Plan + apply in one call, for callers without a reuse loop.
pub fn set_abstraction(
    tape: &mut Tape,
    params: &ParamSet,
    features: NodeId,
    positions: &[[f64; 3]],
    sample_count: usize,
    radius: f64,
    max_group: usize,
    mlp: &Mlp,
) -> Result<(Vec<[f64; 3]>, NodeId), PointError> {
    let plan = plan_set_abstraction(positions, sample_count, radius, max_group)?;
    let node = apply_set_abstraction(tape, params, &plan, features, mlp);
    Ok((plan.center_positions, node))
}

/// Interpolation weights carrying coarse features onto fine positions:
/// 3 nearest coarse points, weights proportional to 1/(d+1e-8), normalized.
#[derive(Debug, Clone)]
pub struct InterpolationPlan {
    pub weights: Vec<Vec<(usize, f64)>>,
}

const INTERP_NEIGHBORS: usize = 3;
const INTERP_EPS: f64 = 1e-8;

pub fn plan_interpolation(
    coarse_positions: &[[f64; 3]],
    fine_positions: &[[f64; 3]],
) -> Result<InterpolationPlan, PointError> {
    if coarse_positions.is_empty() {
        return Err(PointError::EmptyCloud);
    }
    let weights = fine_positions
        .iter()
        .map(|&p| {
            let neighbors = knn(coarse_positions, p, INTERP_NEIGHBORS);
            let raw: Vec<f64> = neighbors.iter().map(|n| 1.0 / (n.distance + INTERP_EPS)).collect();
            let total: f64 = raw.iter().sum();
            neighbors
                .iter()
                .zip(raw)
                .map(|(n, w)| (n.index, w / total))
                .collect()
        })
        .collect();
    Ok(InterpolationPlan { weights })
}

pub fn interpolate_features(
    tape: &mut Tape,
    plan: &InterpolationPlan,
    coarse_features: NodeId,
) -> NodeId {
    tape.row_combine(coarse_features, plan.weights.clone())
}

/// Interpolation followed by an optional pointwise MLP.
pub fn feature_propagation(
    tape: &mut Tape,
    params: &ParamSet,
    coarse_positions: &[[f64; 3]],
    coarse_features: NodeId,
    fine_positions: &[[f64; 3]],
    mlp: Option<&Mlp>,
) -> Result<NodeId, PointError> {
    let plan = plan_interpolation(coarse_positions, fine_positions)?;
    let interpolated = interpolate_features(tape, &plan, coarse_features);
    Ok(match mlp {
        Some(m) => m.apply(tape, params, interpolated),
        None => interpolated,
    })
}

/// Parameter handles for the full encoder/decoder stack.
#[derive(Debug, Clone)]
pub struct Backbone {
    sa_mlps: Vec<Mlp>,
    fp_mlps: Vec<Mlp>,
    head: Mlp,
    feature_dim: usize,
}

/// Frozen per-frame geometry for the full stack.
#[derive(Debug, Clone)]
pub struct BackbonePlan {
    pub point_count: usize,
    sa_plans: Vec<SaPlan>,
    /// Decoder interpolations, coarsest stage first.
    interp_plans: Vec<InterpolationPlan>,
}

impl Backbone {
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        cfg: &BackboneConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, BackboneError> {
        cfg.validate()?;
        let mut sa_mlps = Vec::new();
        let mut stage_widths = vec![RAW_POINT_WIDTH];
        for (i, level) in cfg.levels.iter().enumerate() {
            let mut dims = vec![stage_widths.last().unwrap() + 3];
            dims.extend_from_slice(&level.mlp_widths);
            sa_mlps.push(Mlp::init(params, &format!("{name}.sa{i}"), &dims, Activation::Relu, rng)?);
            stage_widths.push(*level.mlp_widths.last().unwrap());
        }
        let mut fp_mlps = Vec::new();
        let mut carry_width = *stage_widths.last().unwrap();
        for (i, widths) in cfg.propagation_widths.iter().enumerate() {
            // propagation i lands on the output of stage levels-1-i (the raw
            // points for the last one) and concatenates that stage's features
            let skip_width = stage_widths[stage_widths.len() - 2 - i];
            let mut dims = vec![carry_width + skip_width];
            dims.extend_from_slice(widths);
            fp_mlps.push(Mlp::init(params, &format!("{name}.fp{i}"), &dims, Activation::Relu, rng)?);
            carry_width = *widths.last().unwrap();
        }
        let head =
            Mlp::init(params, &format!("{name}.head"), &[carry_width, cfg.feature_dim], Activation::Relu, rng)?;
        Ok(Backbone { sa_mlps, fp_mlps, head, feature_dim: cfg.feature_dim })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn plan(cfg: &BackboneConfig, positions: &[[f64; 3]]) -> Result<BackbonePlan, BackboneError> {
        cfg.validate()?;
        if positions.is_empty() {
            return Err(BackboneError::Point(PointError::EmptyCloud));
        }
        let mut sa_plans: Vec<SaPlan> = Vec::new();
        let mut current: Vec<[f64; 3]> = positions.to_vec();
        for level in &cfg.levels {
            let count = (current.len() / level.sample_divisor).max(1);
            let plan = plan_set_abstraction(&current, count, level.radius, level.max_group)?;
            current = plan.center_positions.clone();
            sa_plans.push(plan);
        }
        let mut interp_plans = Vec::new();
        for i in (0..sa_plans.len()).rev() {
            let coarse = &sa_plans[i].center_positions;
            let fine: &[[f64; 3]] =
                if i == 0 { positions } else { &sa_plans[i - 1].center_positions };
            interp_plans.push(plan_interpolation(coarse, fine)?);
        }
        Ok(BackbonePlan { point_count: positions.len(), sa_plans, interp_plans })
    }

    /// Forward pass over a planned frame; `raw_features` is the N x 4 input.
    pub fn apply(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        plan: &BackbonePlan,
        raw_features: NodeId,
    ) -> NodeId {
        let mut stage_features = vec![raw_features];
        for (sa, mlp) in plan.sa_plans.iter().zip(&self.sa_mlps) {
            let input = *stage_features.last().unwrap();
            stage_features.push(apply_set_abstraction(tape, params, sa, input, mlp));
        }
        let mut carry = *stage_features.last().unwrap();
        for (i, (interp, mlp)) in plan.interp_plans.iter().zip(&self.fp_mlps).enumerate() {
            let skip = stage_features[stage_features.len() - 2 - i];
            let interpolated = interpolate_features(tape, interp, carry);
            let combined = tape.concat_cols(&[interpolated, skip]);
            carry = mlp.apply(tape, params, combined);
        }
        self.head.apply(tape, params, carry)
    }
}

/// The N x 4 raw feature rows of a cloud.
pub fn raw_point_features(cloud: &PointCloud) -> FeatureMatrix {
    let data = cloud.points.iter().flat_map(|p| [p.x, p.y, p.z, p.r]).collect();
    FeatureMatrix::from_flat(cloud.len(), RAW_POINT_WIDTH, data)
}

/// Convenience single-frame forward pass producing the N x D feature matrix.
pub fn extract_point_features(
    cloud: &PointCloud,
    params: &ParamSet,
    backbone: &Backbone,
    cfg: &BackboneConfig,
) -> Result<FeatureMatrix, BackboneError> {
    let positions = cloud.positions();
    let plan = Backbone::plan(cfg, &positions)?;
    let mut tape = Tape::new();
    let raw = tape.constant(raw_point_features(cloud));
    let node = backbone.apply(&mut tape, params, &plan, raw);
    Ok(tape.value(node).clone())
}
