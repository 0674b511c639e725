//! Interaction-aware instance segmentation head.
//!
//! Per-point backbone features pass through a person-confidence branch;
//! high-confidence person features form a token set refined by
//! self-attention, and every point re-weights those guided tokens by
//! similarity to produce interaction-aware features. Two heads regress
//! semantics and center offsets, offset-shifted points are clustered into
//! proposals, and a light refinement head scores each proposal. Training
//! minimizes the sum of five terms: semantic cross-entropy, masked offset
//! L1, proposal classification, proposal mask BCE, and mask-score L2.

use rand::Rng;
use thiserror::Error;

use crate::backbone::{Backbone, BackboneConfig, BackboneError, BackbonePlan, raw_point_features};
use crate::points::{point_set_iou, radius_cluster, PointError};
use crate::tensor::blocks::{Activation, AttentionBlock, Ffn, LayerNorm, Mlp};
use crate::tensor::{
    sgd_step, FeatureMatrix, Gradients, NodeId, ParamSet, Tape, TensorError,
};
use crate::types::{
    Box7, PointCloud, PredictedInstance, SceneFrame, SemanticTaxonomy,
};
use crate::io::annot::FramePredictions;

/// Overlap needed for a proposal to count as matched to a ground-truth
/// instance in the refinement losses.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Error)]
pub enum SegError {
    #[error("invalid segmentation config: {0}")]
    InvalidConfig(String),
    #[error("frame carries no usable ground truth")]
    MissingGroundTruth,
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Point(#[from] PointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HhoiConfig {
    /// Person-confidence threshold for token sampling.
    pub confidence_threshold: f64,
    /// Number of person tokens M fed to the attention block.
    pub token_count: usize,
    /// Per-point feature width D; must equal the backbone output width.
    pub feature_dim: usize,
    /// Semantic class count C, including the ignore class.
    pub class_count: usize,
    /// Clustering radius for offset-shifted points, meters.
    pub grouping_radius: f64,
    /// Semantic score needed for a point to join a class's grouping pass.
    pub grouping_score_threshold: f64,
    /// Minimum cluster size for a proposal.
    pub min_cluster_points: usize,
}

impl Default for HhoiConfig {
    fn default() -> Self {
        HhoiConfig {
            confidence_threshold: 0.8,
            token_count: 256,
            feature_dim: 32,
            class_count: SemanticTaxonomy::default_scene().class_count(),
            grouping_radius: 0.3,
            grouping_score_threshold: 0.2,
            min_cluster_points: 5,
        }
    }
}

impl HhoiConfig {
    pub fn validate(&self) -> Result<(), SegError> {
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold < 1.0) {
            return Err(SegError::InvalidConfig(
                "confidence_threshold must lie strictly between 0 and 1".into(),
            ));
        }
        if self.token_count == 0 {
            return Err(SegError::InvalidConfig("token_count must be at least 1".into()));
        }
        if self.feature_dim == 0 || self.class_count < 2 {
            return Err(SegError::InvalidConfig(
                "feature_dim must be positive and class_count at least 2".into(),
            ));
        }
        if !(self.grouping_radius.is_finite() && self.grouping_radius > 0.0) {
            return Err(SegError::InvalidConfig("grouping_radius must be positive".into()));
        }
        if self.min_cluster_points == 0 {
            return Err(SegError::InvalidConfig("min_cluster_points must be at least 1".into()));
        }
        Ok(())
    }
}

/// Parameter handles for every branch of the head.
#[derive(Debug, Clone)]
pub struct SegHead {
    confidence: Mlp,
    attention: AttentionBlock,
    ffn: Ffn,
    norm: LayerNorm,
    semantic: Mlp,
    offset: Mlp,
    refine_class: Mlp,
    refine_mask: Mlp,
    refine_iou: Mlp,
}

impl SegHead {
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        cfg: &HhoiConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, SegError> {
        cfg.validate()?;
        let d = cfg.feature_dim;
        let c = cfg.class_count;
        Ok(SegHead {
            confidence: Mlp::init(params, &format!("{name}.confidence"), &[d, d, c], Activation::Relu, rng)?,
            attention: AttentionBlock::init(params, &format!("{name}.attn"), d, d, d, rng)?,
            ffn: Ffn::init(params, &format!("{name}.ffn"), d, rng)?,
            norm: LayerNorm::init(params, &format!("{name}.norm"), d)?,
            semantic: Mlp::init(params, &format!("{name}.semantic"), &[d, d, c], Activation::Relu, rng)?,
            offset: Mlp::init(params, &format!("{name}.offset"), &[d, d, 3], Activation::Relu, rng)?,
            refine_class: Mlp::init(params, &format!("{name}.refine_class"), &[d, d, c], Activation::Relu, rng)?,
            refine_mask: Mlp::init(params, &format!("{name}.refine_mask"), &[d, d, 1], Activation::Relu, rng)?,
            refine_iou: Mlp::init(params, &format!("{name}.refine_iou"), &[d, d, 1], Activation::Relu, rng)?,
        })
    }

    /// Per-point class confidence from raw backbone features: softmax(MLP).
    /// Returns (logits, scores).
    pub fn person_confidence(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        point_features: NodeId,
    ) -> (NodeId, NodeId) {
        let logits = self.confidence.apply(tape, params, point_features);
        let scores = tape.softmax_rows(logits);
        (logits, scores)
    }

    /// Self-attention over the sampled person tokens followed by a
    /// feed-forward residual and layer norm.
    pub fn human_guided_feature(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        person_tokens: NodeId,
    ) -> NodeId {
        let attended = self.attention.apply(tape, params, person_tokens, person_tokens);
        let lifted = self.ffn.apply(tape, params, attended);
        let summed = tape.add(attended, lifted);
        self.norm.apply(tape, params, summed)
    }

    /// Semantic and offset heads over interaction-weighted features.
    pub fn predict_semantic_offset(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        weighted: NodeId,
    ) -> SemanticOffset {
        let semantic_logits = self.semantic.apply(tape, params, weighted);
        let semantic_scores = tape.softmax_rows(semantic_logits);
        let offsets = self.offset.apply(tape, params, weighted);
        SemanticOffset { semantic_logits, semantic_scores, offsets }
    }

    /// Pools each proposal's weighted features and scores it: class
    /// distribution, per-point mask, and a predicted mask quality.
    pub fn refine_proposals(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        seeds: &[ProposalSeed],
        weighted: NodeId,
    ) -> Vec<RefinedProposal> {
        seeds
            .iter()
            .map(|seed| {
                let gathered = tape.gather_rows(weighted, seed.point_indices.clone());
                let segments = vec![0usize; seed.point_indices.len()];
                let pooled = tape.segment_max(gathered, &segments, 1);
                let class_logits = self.refine_class.apply(tape, params, pooled);
                let class_scores = tape.softmax_rows(class_logits);
                let mask_logits = self.refine_mask.apply(tape, params, gathered);
                let mask_scores = tape.sigmoid(mask_logits);
                let iou_logit = self.refine_iou.apply(tape, params, pooled);
                let iou_score = tape.sigmoid(iou_logit);
                RefinedProposal {
                    seed: seed.clone(),
                    class_logits,
                    class_scores,
                    mask_logits,
                    mask_scores,
                    iou_logit,
                    iou_score,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SemanticOffset {
    pub semantic_logits: NodeId,
    pub semantic_scores: NodeId,
    pub offsets: NodeId,
}

/// Outcome of person-token sampling: always exactly M indices.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSelection {
    pub indices: Vec<usize>,
    /// True when no point cleared the confidence threshold and sampling
    /// fell back to the top-M person scores.
    pub fallback: bool,
}

/// Picks the token set from person-confidence scores. Above-threshold
/// candidates win; overflow keeps the most confident M, shortfall pads by
/// repeating the most confident candidate. With zero candidates the top M
/// by person score are taken regardless of the threshold. Ties always
/// break toward the lower point index.
pub fn sample_person_tokens(
    scores: &FeatureMatrix,
    person_class: usize,
    cfg: &HhoiConfig,
) -> TokenSelection {
    assert!(scores.rows() > 0, "token sampling needs at least one point");
    assert!(person_class < scores.cols(), "person class out of range");
    let m = cfg.token_count;
    let confidence = |i: usize| scores.get(i, person_class);
    let by_confidence_desc = |a: &usize, b: &usize| {
        confidence(*b).total_cmp(&confidence(*a)).then(a.cmp(b))
    };

    let mut candidates: Vec<usize> =
        (0..scores.rows()).filter(|&i| confidence(i) > cfg.confidence_threshold).collect();
    let fallback = candidates.is_empty();
    if fallback {
        candidates = (0..scores.rows()).collect();
    }
    candidates.sort_by(by_confidence_desc);
    candidates.truncate(m);
    while candidates.len() < m {
        candidates.push(candidates[0]);
    }
    TokenSelection { indices: candidates, fallback }
}

/// Similarity re-weighting: every point forms a softmax distribution over
/// the guided person tokens and adds the blended token to its own feature.
/// Returns (weighted features, the N x M weight matrix).
pub fn object_weighting(
    tape: &mut Tape,
    point_features: NodeId,
    guided_tokens: NodeId,
) -> (NodeId, NodeId) {
    let tokens_t = tape.transpose(guided_tokens);
    let similarity = tape.matmul(point_features, tokens_t);
    let weights = tape.softmax_rows(similarity);
    let blended = tape.matmul(weights, guided_tokens);
    let weighted = tape.add(point_features, blended);
    (weighted, weights)
}

/// One clustered instance candidate, before refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSeed {
    pub class: usize,
    /// Ascending indices into the frame's points.
    pub point_indices: Vec<usize>,
}

/// Shift-then-cluster proposal generation. Every thing class gets its own
/// pass over the points scoring above the soft threshold; proposals from
/// different classes may overlap.
pub fn group_instances(
    positions: &[[f64; 3]],
    semantic_scores: &FeatureMatrix,
    offsets: &FeatureMatrix,
    taxonomy: &SemanticTaxonomy,
    cfg: &HhoiConfig,
) -> Vec<ProposalSeed> {
    assert_eq!(semantic_scores.rows(), positions.len(), "one score row per point");
    assert_eq!(offsets.rows(), positions.len(), "one offset row per point");
    let mut seeds = Vec::new();
    for class in taxonomy.thing_classes() {
        if class >= semantic_scores.cols() {
            continue;
        }
        let members: Vec<usize> = (0..positions.len())
            .filter(|&i| semantic_scores.get(i, class) > cfg.grouping_score_threshold)
            .collect();
        if members.len() < cfg.min_cluster_points {
            continue;
        }
        let shifted: Vec<[f64; 3]> = members
            .iter()
            .map(|&i| {
                [
                    positions[i][0] + offsets.get(i, 0),
                    positions[i][1] + offsets.get(i, 1),
                    positions[i][2] + offsets.get(i, 2),
                ]
            })
            .collect();
        let clusters = radius_cluster(&shifted, cfg.grouping_radius, cfg.min_cluster_points);
        for cluster in clusters.members() {
            seeds.push(ProposalSeed {
                class,
                point_indices: cluster.into_iter().map(|local| members[local]).collect(),
            });
        }
    }
    seeds
}

/// A proposal with its refinement nodes still on the tape.
#[derive(Debug, Clone)]
pub struct RefinedProposal {
    pub seed: ProposalSeed,
    pub class_logits: NodeId,
    pub class_scores: NodeId,
    pub mask_logits: NodeId,
    pub mask_scores: NodeId,
    pub iou_logit: NodeId,
    pub iou_score: NodeId,
}

/// Ground truth of one frame in loss-ready form.
#[derive(Debug, Clone)]
pub struct FrameGroundTruth {
    pub labels: Vec<usize>,
    pub instance_classes: Vec<usize>,
    pub instance_indices: Vec<Vec<usize>>,
    pub centroids: Vec<[f64; 3]>,
    /// Owning instance per point, if any.
    pub owner: Vec<Option<usize>>,
}

impl FrameGroundTruth {
    pub fn from_frame(frame: &SceneFrame) -> Result<Self, SegError> {
        if frame.point_labels.len() != frame.cloud.len() {
            return Err(SegError::MissingGroundTruth);
        }
        let mut owner = vec![None; frame.cloud.len()];
        let mut instance_classes = Vec::new();
        let mut instance_indices = Vec::new();
        let mut centroids = Vec::new();
        for (k, inst) in frame.instances.iter().enumerate() {
            if inst.point_indices.is_empty() {
                return Err(SegError::MissingGroundTruth);
            }
            let mut c = [0.0; 3];
            for &i in &inst.point_indices {
                if i >= frame.cloud.len() {
                    return Err(SegError::MissingGroundTruth);
                }
                owner[i] = Some(k);
                let p = frame.cloud.points[i].pos();
                c[0] += p[0];
                c[1] += p[1];
                c[2] += p[2];
            }
            let n = inst.point_indices.len() as f64;
            centroids.push([c[0] / n, c[1] / n, c[2] / n]);
            instance_classes.push(inst.class);
            instance_indices.push(inst.point_indices.clone());
        }
        Ok(FrameGroundTruth {
            labels: frame.point_labels.clone(),
            instance_classes,
            instance_indices,
            centroids,
            owner,
        })
    }
}

/// Matches each proposal to its highest-overlap ground-truth instance;
/// `None` below the positive threshold. Ties go to the lower instance.
pub fn match_proposals(
    seeds: &[ProposalSeed],
    gt: &FrameGroundTruth,
) -> Vec<Option<usize>> {
    seeds
        .iter()
        .map(|seed| {
            let mut best: Option<(usize, f64)> = None;
            for (k, indices) in gt.instance_indices.iter().enumerate() {
                let iou = point_set_iou(&seed.point_indices, indices);
                if best.map_or(true, |(_, b)| iou > b) {
                    best = Some((k, iou));
                }
            }
            match best {
                Some((k, iou)) if iou >= MATCH_IOU => Some(k),
                _ => None,
            }
        })
        .collect()
}

/// The five loss terms as tape nodes, plus their sum.
#[derive(Debug, Clone, Copy)]
pub struct SegLossNodes {
    pub semantic: NodeId,
    pub offset: NodeId,
    pub classification: NodeId,
    pub mask: NodeId,
    pub mask_score: NodeId,
    pub total: NodeId,
}

/// Per-term loss values at one step.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LossBreakdown {
    pub semantic: f64,
    pub offset: f64,
    pub classification: f64,
    pub mask: f64,
    pub mask_score: f64,
    pub confidence: f64,
    pub total: f64,
}

impl SegLossNodes {
    pub fn breakdown(&self, tape: &Tape, confidence: f64, total: f64) -> LossBreakdown {
        LossBreakdown {
            semantic: tape.value(self.semantic).get(0, 0),
            offset: tape.value(self.offset).get(0, 0),
            classification: tape.value(self.classification).get(0, 0),
            mask: tape.value(self.mask).get(0, 0),
            mask_score: tape.value(self.mask_score).get(0, 0),
            confidence,
            total,
        }
    }
}

/// Mean weighted cross-entropy over labeled points; weight per point comes
/// from its class. A zero total weight yields a zero node.
pub fn weighted_semantic_ce(
    tape: &mut Tape,
    logits: NodeId,
    labels: &[usize],
    class_weights: &[f64],
) -> NodeId {
    let weights: Vec<f64> = labels
        .iter()
        .map(|&l| class_weights.get(l).copied().unwrap_or(0.0))
        .collect();
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return tape.constant(FeatureMatrix::zeros(1, 1));
    }
    let sum = tape.cross_entropy_sum(logits, labels.to_vec(), weights);
    tape.scale(sum, 1.0 / total)
}

/// Builds the five-term segmentation loss on the tape.
///
/// Semantic: class-weighted cross-entropy over the points. Offset: L1 to
/// the owning instance centroid, over instance points only. Classification:
/// cross-entropy over proposals, unmatched proposals targeting the ignore
/// class. Mask: BCE over matched proposals' points against membership in
/// the matched instance. Mask score: squared error of the predicted mask
/// quality against the realized overlap of the thresholded mask.
pub fn segmentation_loss(
    tape: &mut Tape,
    semantic_logits: NodeId,
    offsets: NodeId,
    proposals: &[RefinedProposal],
    positions: &[[f64; 3]],
    gt: &FrameGroundTruth,
    class_weights: &[f64],
) -> Result<SegLossNodes, SegError> {
    let n = positions.len();
    if gt.labels.len() != n || gt.owner.len() != n {
        return Err(SegError::MissingGroundTruth);
    }

    let semantic = weighted_semantic_ce(tape, semantic_logits, &gt.labels, class_weights);

    let mut offset_targets = FeatureMatrix::zeros(n, 3);
    let mut offset_row_weights = vec![0.0; n];
    let mut owned = 0usize;
    for i in 0..n {
        if let Some(k) = gt.owner[i] {
            owned += 1;
            offset_row_weights[i] = 1.0;
            for axis in 0..3 {
                offset_targets.set(i, axis, gt.centroids[k][axis] - positions[i][axis]);
            }
        }
    }
    let offset = if owned == 0 {
        tape.constant(FeatureMatrix::zeros(1, 1))
    } else {
        let sum = tape.l1_sum(offsets, offset_targets, offset_row_weights);
        tape.scale(sum, 1.0 / owned as f64)
    };

    let matches = match_proposals(
        &proposals.iter().map(|p| p.seed.clone()).collect::<Vec<_>>(),
        gt,
    );

    let classification = if proposals.is_empty() {
        tape.constant(FeatureMatrix::zeros(1, 1))
    } else {
        let logit_nodes: Vec<NodeId> = proposals.iter().map(|p| p.class_logits).collect();
        let stacked = tape.concat_rows(&logit_nodes);
        let targets: Vec<usize> = matches
            .iter()
            .map(|m| m.map_or(0, |k| gt.instance_classes[k]))
            .collect();
        let weights = vec![1.0; proposals.len()];
        let sum = tape.cross_entropy_sum(stacked, targets, weights);
        tape.scale(sum, 1.0 / proposals.len() as f64)
    };

    let mut mask_terms = Vec::new();
    let mut mask_point_total = 0usize;
    let mut score_terms = Vec::new();
    let mut matched_count = 0usize;
    for (proposal, matched) in proposals.iter().zip(&matches) {
        let Some(k) = *matched else { continue };
        matched_count += 1;
        let member_count = proposal.seed.point_indices.len();
        mask_point_total += member_count;
        let gt_indices = &gt.instance_indices[k];
        let target_col: Vec<f64> = proposal
            .seed
            .point_indices
            .iter()
            .map(|i| if gt_indices.contains(i) { 1.0 } else { 0.0 })
            .collect();
        let target = FeatureMatrix::from_flat(member_count, 1, target_col);
        let ones = FeatureMatrix::filled(member_count, 1, 1.0);
        mask_terms.push(tape.bce_sum(proposal.mask_logits, target, ones));

        // realized overlap of the thresholded mask, a plain number by the
        // time it reaches the loss: quality supervision does not flow back
        // through the binarization
        let mask_values = tape.value(proposal.mask_scores);
        let kept: Vec<usize> = proposal
            .seed
            .point_indices
            .iter()
            .enumerate()
            .filter(|&(row, _)| mask_values.get(row, 0) > 0.5)
            .map(|(_, &i)| i)
            .collect();
        let achieved = point_set_iou(&kept, gt_indices);
        let target = FeatureMatrix::from_flat(1, 1, vec![achieved]);
        let one = FeatureMatrix::filled(1, 1, 1.0);
        score_terms.push(tape.mse_sum(proposal.iou_score, target, one));
    }
    let mask = if mask_terms.is_empty() {
        tape.constant(FeatureMatrix::zeros(1, 1))
    } else {
        let sum = tape.add_n(&mask_terms);
        tape.scale(sum, 1.0 / mask_point_total as f64)
    };
    let mask_score = if score_terms.is_empty() {
        tape.constant(FeatureMatrix::zeros(1, 1))
    } else {
        let sum = tape.add_n(&score_terms);
        tape.scale(sum, 1.0 / matched_count as f64)
    };

    let total = tape.add_n(&[semantic, offset, classification, mask, mask_score]);
    Ok(SegLossNodes { semantic, offset, classification, mask, mask_score, total })
}

/// Inverse-frequency semantic class weights from training labels,
/// normalized to mean 1 over the classes present. The ignore class and
/// absent classes get weight 0.
pub fn inverse_frequency_weights(frames: &[SceneFrame], class_count: usize) -> Vec<f64> {
    let mut counts = vec![0usize; class_count];
    for frame in frames {
        for &l in &frame.point_labels {
            if l > 0 && l < class_count {
                counts[l] += 1;
            }
        }
    }
    let mut weights = vec![0.0; class_count];
    let present: Vec<usize> = (1..class_count).filter(|&c| counts[c] > 0).collect();
    if present.is_empty() {
        return weights;
    }
    let inv_mean: f64 =
        present.iter().map(|&c| 1.0 / counts[c] as f64).sum::<f64>() / present.len() as f64;
    for &c in &present {
        weights[c] = (1.0 / counts[c] as f64) / inv_mean;
    }
    weights
}

/// The full model: backbone plus head, sharing one parameter set.
#[derive(Debug, Clone)]
pub struct SegModel {
    pub backbone: Backbone,
    pub head: SegHead,
}

pub fn init_seg_model(
    params: &mut ParamSet,
    backbone_cfg: &BackboneConfig,
    hhoi_cfg: &HhoiConfig,
    rng: &mut impl Rng,
) -> Result<SegModel, SegError> {
    hhoi_cfg.validate()?;
    if backbone_cfg.feature_dim != hhoi_cfg.feature_dim {
        return Err(SegError::InvalidConfig(format!(
            "backbone feature_dim {} must match head feature_dim {}",
            backbone_cfg.feature_dim, hhoi_cfg.feature_dim
        )));
    }
    let backbone = Backbone::init(params, "backbone", backbone_cfg, rng)?;
    let head = SegHead::init(params, "seg", hhoi_cfg, rng)?;
    Ok(SegModel { backbone, head })
}

/// All tape nodes of one forward pass up to the semantic/offset heads.
#[derive(Debug, Clone)]
pub struct SegForward {
    pub point_features: NodeId,
    pub confidence_logits: NodeId,
    pub confidence_scores: NodeId,
    pub tokens: TokenSelection,
    pub guided_tokens: NodeId,
    pub weighted: NodeId,
    pub token_weights: NodeId,
    pub semantic_logits: NodeId,
    pub semantic_scores: NodeId,
    pub offsets: NodeId,
}

pub fn seg_forward(
    tape: &mut Tape,
    params: &ParamSet,
    model: &SegModel,
    plan: &BackbonePlan,
    raw_features: &FeatureMatrix,
    person_class: usize,
    cfg: &HhoiConfig,
) -> SegForward {
    let raw = tape.constant(raw_features.clone());
    let point_features = model.backbone.apply(tape, params, plan, raw);
    let (confidence_logits, confidence_scores) =
        model.head.person_confidence(tape, params, point_features);
    let tokens = sample_person_tokens(tape.value(confidence_scores), person_class, cfg);
    let sampled = tape.gather_rows(point_features, tokens.indices.clone());
    let guided_tokens = model.head.human_guided_feature(tape, params, sampled);
    let (weighted, token_weights) = object_weighting(tape, point_features, guided_tokens);
    let SemanticOffset { semantic_logits, semantic_scores, offsets } =
        model.head.predict_semantic_offset(tape, params, weighted);
    SegForward {
        point_features,
        confidence_logits,
        confidence_scores,
        tokens,
        guided_tokens,
        weighted,
        token_weights,
        semantic_logits,
        semantic_scores,
        offsets,
    }
}

/// Per-frame state that survives across training steps: geometry plans and
/// ground truth never change, only parameters do.
#[derive(Debug, Clone)]
pub struct PlannedFrame {
    pub plan: BackbonePlan,
    pub raw: FeatureMatrix,
    pub positions: Vec<[f64; 3]>,
    pub gt: FrameGroundTruth,
}

pub fn plan_frames(
    frames: &[SceneFrame],
    backbone_cfg: &BackboneConfig,
) -> Result<Vec<PlannedFrame>, SegError> {
    frames
        .iter()
        .map(|frame| {
            let positions = frame.cloud.positions();
            let plan = Backbone::plan(backbone_cfg, &positions)?;
            Ok(PlannedFrame {
                plan,
                raw: raw_point_features(&frame.cloud),
                positions,
                gt: FrameGroundTruth::from_frame(frame)?,
            })
        })
        .collect()
}

/// Full-batch gradient descent over a fixed frame set. Returns one loss
/// breakdown per step (averaged over frames), evaluated before that step's
/// update.
pub fn train_segmentation(
    frames: &[SceneFrame],
    params: &mut ParamSet,
    model: &SegModel,
    backbone_cfg: &BackboneConfig,
    hhoi_cfg: &HhoiConfig,
    taxonomy: &SemanticTaxonomy,
    steps: usize,
    learning_rate: f64,
) -> Result<Vec<LossBreakdown>, SegError> {
    if frames.is_empty() {
        return Err(SegError::MissingGroundTruth);
    }
    let planned = plan_frames(frames, backbone_cfg)?;
    let class_weights = inverse_frequency_weights(frames, hhoi_cfg.class_count);
    let person_class = taxonomy.person_class();
    let frame_scale = 1.0 / planned.len() as f64;
    let mut grads = Gradients::zeros_like(params);
    let mut log = Vec::with_capacity(steps);

    for _ in 0..steps {
        let mut step_loss = LossBreakdown {
            semantic: 0.0,
            offset: 0.0,
            classification: 0.0,
            mask: 0.0,
            mask_score: 0.0,
            confidence: 0.0,
            total: 0.0,
        };
        for pf in &planned {
            let mut tape = Tape::new();
            let fwd = seg_forward(&mut tape, params, model, &pf.plan, &pf.raw, person_class, hhoi_cfg);
            let seeds = group_instances(
                &pf.positions,
                tape.value(fwd.semantic_scores),
                tape.value(fwd.offsets),
                taxonomy,
                hhoi_cfg,
            );
            let refined = model.head.refine_proposals(&mut tape, params, &seeds, fwd.weighted);
            let loss = segmentation_loss(
                &mut tape,
                fwd.semantic_logits,
                fwd.offsets,
                &refined,
                &pf.positions,
                &pf.gt,
                &class_weights,
            )?;
            // the confidence branch only routes token picks forward, so it
            // gets the same semantic supervision as an auxiliary term
            let confidence_ce =
                weighted_semantic_ce(&mut tape, fwd.confidence_logits, &pf.gt.labels, &class_weights);
            let frame_total = tape.add(loss.total, confidence_ce);
            let scaled = tape.scale(frame_total, frame_scale);
            tape.backward(scaled, &mut grads);

            let confidence_value = tape.value(confidence_ce).get(0, 0) * frame_scale;
            let total_value = tape.value(frame_total).get(0, 0) * frame_scale;
            let b = loss.breakdown(&tape, confidence_value, total_value);
            step_loss.semantic += b.semantic * frame_scale;
            step_loss.offset += b.offset * frame_scale;
            step_loss.classification += b.classification * frame_scale;
            step_loss.mask += b.mask * frame_scale;
            step_loss.mask_score += b.mask_score * frame_scale;
            step_loss.confidence += confidence_value;
            step_loss.total += total_value;
        }
        sgd_step(params, &mut grads, learning_rate)?;
        log.push(step_loss);
    }
    Ok(log)
}

/// One final instance after mask thresholding.
#[derive(Debug, Clone, PartialEq)]
pub struct SegInstance {
    pub class: usize,
    /// Points of the raw proposal.
    pub proposal_indices: Vec<usize>,
    /// Points surviving the 0.5 mask threshold.
    pub point_indices: Vec<usize>,
    pub class_scores: Vec<f64>,
    pub mask: Vec<f64>,
    pub mask_score: f64,
    /// Class score times mask score.
    pub confidence: f64,
}

/// Full inference output for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationOutput {
    pub semantic_scores: FeatureMatrix,
    pub offsets: FeatureMatrix,
    /// Argmax class per point.
    pub point_classes: Vec<usize>,
    pub instances: Vec<SegInstance>,
    pub token_fallback: bool,
}

pub fn segment_frame(
    cloud: &PointCloud,
    params: &ParamSet,
    model: &SegModel,
    backbone_cfg: &BackboneConfig,
    hhoi_cfg: &HhoiConfig,
    taxonomy: &SemanticTaxonomy,
) -> Result<SegmentationOutput, SegError> {
    let positions = cloud.positions();
    let plan = Backbone::plan(backbone_cfg, &positions)?;
    let raw = raw_point_features(cloud);
    let mut tape = Tape::new();
    let fwd = seg_forward(&mut tape, params, model, &plan, &raw, taxonomy.person_class(), hhoi_cfg);
    let semantic_scores = tape.value(fwd.semantic_scores).clone();
    let offsets = tape.value(fwd.offsets).clone();
    let seeds = group_instances(&positions, &semantic_scores, &offsets, taxonomy, hhoi_cfg);
    let refined = model.head.refine_proposals(&mut tape, params, &seeds, fwd.weighted);

    let point_classes = (0..semantic_scores.rows())
        .map(|i| argmax_row(semantic_scores.row(i)))
        .collect();

    let mut instances = Vec::new();
    for proposal in &refined {
        let class_scores = tape.value(proposal.class_scores).row(0).to_vec();
        let class = argmax_row(&class_scores);
        if !taxonomy.is_thing(class) {
            continue;
        }
        let mask_matrix = tape.value(proposal.mask_scores);
        let mask: Vec<f64> = (0..mask_matrix.rows()).map(|r| mask_matrix.get(r, 0)).collect();
        let point_indices: Vec<usize> = proposal
            .seed
            .point_indices
            .iter()
            .zip(&mask)
            .filter(|&(_, &m)| m > 0.5)
            .map(|(&i, _)| i)
            .collect();
        if point_indices.is_empty() {
            continue;
        }
        let mask_score = tape.value(proposal.iou_score).get(0, 0);
        let confidence = class_scores[class] * mask_score;
        instances.push(SegInstance {
            class,
            proposal_indices: proposal.seed.point_indices.clone(),
            point_indices,
            class_scores,
            mask,
            mask_score,
            confidence,
        });
    }

    Ok(SegmentationOutput {
        semantic_scores,
        offsets,
        point_classes,
        instances,
        token_fallback: fwd.tokens.fallback,
    })
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Axis-aligned box around a subset of points; degenerate extents are
/// floored so downstream validation keeps working.
fn bounding_box(positions: &[[f64; 3]], indices: &[usize]) -> Box7 {
    const MIN_EXTENT: f64 = 1e-3;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in indices {
        for axis in 0..3 {
            lo[axis] = lo[axis].min(positions[i][axis]);
            hi[axis] = hi[axis].max(positions[i][axis]);
        }
    }
    let center = [
        (lo[0] + hi[0]) / 2.0,
        (lo[1] + hi[1]) / 2.0,
        (lo[2] + hi[2]) / 2.0,
    ];
    let size = [
        (hi[1] - lo[1]).max(MIN_EXTENT),
        (hi[0] - lo[0]).max(MIN_EXTENT),
        (hi[2] - lo[2]).max(MIN_EXTENT),
    ];
    Box7::new(center, size, 0.0)
}

/// Converts an inference output into the prediction-file form.
pub fn output_to_predictions(
    frame_id: u64,
    cloud: &PointCloud,
    output: &SegmentationOutput,
) -> FramePredictions {
    let positions = cloud.positions();
    let instances = output
        .instances
        .iter()
        .map(|inst| PredictedInstance {
            class: inst.class,
            point_indices: inst.point_indices.clone(),
            bbox: bounding_box(&positions, &inst.point_indices),
            action: None,
            confidence: inst.confidence,
        })
        .collect();
    FramePredictions {
        frame_id,
        point_count: cloud.len(),
        point_labels: output.point_classes.clone(),
        instances,
    }
}
