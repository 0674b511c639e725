//! Evaluation metrics: semantic mean IoU, instance-mask average precision,
//! center-distance detection AP, action mAP/mRecall/mPrecision, and
//! per-class action accuracy.
//!
//! Matching is greedy by descending confidence with ties broken by input
//! order; each ground truth matches at most once. Classes absent from both
//! predictions and ground truth are excluded from every mean.

use thiserror::Error;

use crate::points::point_set_iou;
use crate::types::{
    ActionTaxonomy, Box7, InstanceAnnotation, PredictedInstance, SemanticTaxonomy,
};

/// Center-distance thresholds used for detection and action matching,
/// meters.
pub const DETECTION_THRESHOLDS: [f64; 3] = [0.25, 0.5, 1.0];

/// Point-set IoU thresholds for instance-mask AP.
pub const INSTANCE_IOU_THRESHOLDS: [f64; 2] = [0.5, 0.25];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction/ground-truth length mismatch: {expected} vs {found}")]
    LengthMismatch { expected: usize, found: usize },
}

/// Precision-recall integration scheme for AP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApIntegration {
    /// 101-point interpolated precision, the modern mask-AP convention.
    Interp101,
    /// 41-point interpolated precision.
    Interp41,
    /// Raw step area under the precision-recall curve.
    RawAuc,
}

impl Default for ApIntegration {
    fn default() -> Self {
        ApIntegration::Interp101
    }
}

fn class_label(name: Option<&str>, class: usize) -> String {
    name.map(str::to_string).unwrap_or_else(|| format!("class{class}"))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ClassMetric {
    pub class: usize,
    pub name: String,
    pub value: f64,
    /// Counts at the all-predictions operating point, summed over the
    /// report's threshold set.
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MetricReport {
    pub metric: String,
    /// Matching thresholds used; empty for threshold-free metrics.
    pub thresholds: Vec<f64>,
    /// Evaluated classes only, ascending by class id.
    pub per_class: Vec<ClassMetric>,
    /// Mean of the per-class values; 0 when nothing was evaluated.
    pub average: f64,
}

impl MetricReport {
    fn from_classes(metric: &str, thresholds: &[f64], per_class: Vec<ClassMetric>) -> Self {
        let average = if per_class.is_empty() {
            0.0
        } else {
            per_class.iter().map(|c| c.value).sum::<f64>() / per_class.len() as f64
        };
        MetricReport {
            metric: metric.to_string(),
            thresholds: thresholds.to_vec(),
            per_class,
            average,
        }
    }

    /// Aligned plain-text table: one row per class plus the average.
    pub fn render_table(&self) -> String {
        let name_width = self
            .per_class
            .iter()
            .map(|c| c.name.len())
            .chain(["class".len(), "average".len()])
            .max()
            .unwrap_or(7);
        let mut out = String::new();
        out.push_str(&format!("metric: {}", self.metric));
        if !self.thresholds.is_empty() {
            let list: Vec<String> = self.thresholds.iter().map(|t| format!("{t}")).collect();
            out.push_str(&format!("  thresholds: {}", list.join(", ")));
        }
        out.push('\n');
        out.push_str(&format!(
            "{:<name_width$}  {:>8}  {:>6}  {:>6}  {:>6}\n",
            "class", "value", "TP", "FP", "FN"
        ));
        for c in &self.per_class {
            out.push_str(&format!(
                "{:<name_width$}  {:>8.4}  {:>6}  {:>6}  {:>6}\n",
                c.name, c.value, c.true_positives, c.false_positives, c.false_negatives
            ));
        }
        out.push_str(&format!("{:<name_width$}  {:>8.4}\n", "average", self.average));
        out
    }
}

/// Per-class semantic IoU over point labels. Points whose ground truth is
/// the ignore class are skipped; classes absent from both label sets are
/// excluded from the mean.
pub fn semantic_miou(
    pred: &[usize],
    gt: &[usize],
    taxonomy: &SemanticTaxonomy,
) -> Result<MetricReport, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch { expected: gt.len(), found: pred.len() });
    }
    let count = taxonomy.class_count();
    let mut confusion = vec![0usize; count * count];
    for (&p, &g) in pred.iter().zip(gt) {
        assert!(p < count && g < count, "labels must fit the taxonomy");
        if taxonomy.is_ignore(g) {
            continue;
        }
        confusion[g * count + p] += 1;
    }
    let mut per_class = Vec::new();
    for c in 1..count {
        let tp = confusion[c * count + c];
        let fp: usize = (0..count).filter(|&g| g != c).map(|g| confusion[g * count + c]).sum();
        let missed: usize = (0..count).filter(|&p| p != c).map(|p| confusion[c * count + p]).sum();
        if tp + fp + missed == 0 {
            continue;
        }
        per_class.push(ClassMetric {
            class: c,
            name: class_label(taxonomy.name(c), c),
            value: tp as f64 / (tp + fp + missed) as f64,
            true_positives: tp,
            false_positives: fp,
            false_negatives: missed,
        });
    }
    Ok(MetricReport::from_classes("semantic_miou", &[], per_class))
}

/// (recall, precision) after each rank of a TP/FP flag sequence.
fn pr_curve(flags: &[bool], gt_total: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    flags
        .iter()
        .enumerate()
        .map(|(i, &hit)| {
            if hit {
                tp += 1;
            }
            (tp as f64 / gt_total as f64, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

fn interpolated_ap(curve: &[(f64, f64)], points: usize) -> f64 {
    let mut total = 0.0;
    for t in 0..points {
        let level = t as f64 / (points - 1) as f64;
        let best = curve
            .iter()
            .filter(|&&(r, _)| r >= level)
            .map(|&(_, p)| p)
            .fold(0.0, f64::max);
        total += best;
    }
    total / points as f64
}

/// Average precision from ranked TP/FP flags.
pub fn ap_from_flags(flags: &[bool], gt_total: usize, integration: ApIntegration) -> f64 {
    if gt_total == 0 {
        return 0.0;
    }
    let curve = pr_curve(flags, gt_total);
    match integration {
        ApIntegration::Interp101 => interpolated_ap(&curve, 101),
        ApIntegration::Interp41 => interpolated_ap(&curve, 41),
        ApIntegration::RawAuc => {
            let mut ap = 0.0;
            let mut previous = 0.0;
            for &(recall, precision) in &curve {
                if recall > previous {
                    ap += (recall - previous) * precision;
                    previous = recall;
                }
            }
            ap
        }
    }
}

/// Sorts (frame, index) prediction keys by confidence descending, ties by
/// frame then input index.
fn rank_by_confidence(entries: &mut Vec<(usize, usize, f64)>) {
    entries.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
}

/// Greedy one-to-one matching in rank order. `quality(frame, pred, gt)`
/// returns Some(score) when the pair is eligible at the current threshold;
/// the highest score wins, ties to the lower gt ordinal.
fn greedy_tp_flags(
    ranked: &[(usize, usize, f64)],
    gt_counts: &[usize],
    quality: impl Fn(usize, usize, usize) -> Option<f64>,
) -> Vec<bool> {
    let mut matched: Vec<Vec<bool>> = gt_counts.iter().map(|&n| vec![false; n]).collect();
    ranked
        .iter()
        .map(|&(frame, pred, _)| {
            let mut best: Option<(usize, f64)> = None;
            for gt in 0..gt_counts[frame] {
                if matched[frame][gt] {
                    continue;
                }
                if let Some(score) = quality(frame, pred, gt) {
                    if best.map_or(true, |(_, b)| score > b) {
                        best = Some((gt, score));
                    }
                }
            }
            match best {
                Some((gt, _)) => {
                    matched[frame][gt] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// One frame of instance-segmentation evaluation material.
#[derive(Debug, Clone)]
pub struct InstanceEvalFrame {
    pub predictions: Vec<PredictedInstance>,
    pub truths: Vec<InstanceAnnotation>,
}

/// Instance-mask AP at one point-set IoU threshold, over thing classes.
pub fn instance_ap(
    frames: &[InstanceEvalFrame],
    iou_threshold: f64,
    integration: ApIntegration,
    taxonomy: &SemanticTaxonomy,
) -> MetricReport {
    let mut per_class = Vec::new();
    for class in taxonomy.thing_classes() {
        // class-filtered views, stable input order
        let gt_lists: Vec<Vec<&InstanceAnnotation>> = frames
            .iter()
            .map(|f| f.truths.iter().filter(|t| t.class == class).collect())
            .collect();
        let mut ranked: Vec<(usize, usize, f64)> = Vec::new();
        let pred_lists: Vec<Vec<&PredictedInstance>> = frames
            .iter()
            .enumerate()
            .map(|(fi, f)| {
                let list: Vec<&PredictedInstance> =
                    f.predictions.iter().filter(|p| p.class == class).collect();
                for (pi, p) in list.iter().enumerate() {
                    ranked.push((fi, pi, p.confidence));
                }
                list
            })
            .collect();
        let gt_total: usize = gt_lists.iter().map(|l| l.len()).sum();
        if gt_total == 0 && ranked.is_empty() {
            continue;
        }
        rank_by_confidence(&mut ranked);
        let gt_counts: Vec<usize> = gt_lists.iter().map(|l| l.len()).collect();
        let flags = greedy_tp_flags(&ranked, &gt_counts, |frame, pred, gt| {
            let iou = point_set_iou(
                &pred_lists[frame][pred].point_indices,
                &gt_lists[frame][gt].point_indices,
            );
            (iou >= iou_threshold).then_some(iou)
        });
        let tp = flags.iter().filter(|&&f| f).count();
        per_class.push(ClassMetric {
            class,
            name: class_label(taxonomy.name(class), class),
            value: ap_from_flags(&flags, gt_total, integration),
            true_positives: tp,
            false_positives: flags.len() - tp,
            false_negatives: gt_total - tp,
        });
    }
    MetricReport::from_classes("instance_ap", &[iou_threshold], per_class)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionPrediction {
    pub class: usize,
    pub bbox: Box7,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionTruth {
    pub class: usize,
    pub bbox: Box7,
}

#[derive(Debug, Clone, Default)]
pub struct DetectionEvalFrame {
    pub predictions: Vec<DetectionPrediction>,
    pub truths: Vec<DetectionTruth>,
}

/// Classes that appear on either side of a detection set, ascending.
fn detection_classes(frames: &[DetectionEvalFrame]) -> Vec<usize> {
    let mut classes: Vec<usize> = frames
        .iter()
        .flat_map(|f| {
            f.predictions
                .iter()
                .map(|p| p.class)
                .chain(f.truths.iter().map(|t| t.class))
        })
        .collect();
    classes.sort_unstable();
    classes.dedup();
    classes
}

/// AP/TP/FP/FN for one class of one detection set at one threshold.
fn detection_class_slice(
    frames: &[DetectionEvalFrame],
    class: usize,
    threshold: f64,
    integration: ApIntegration,
) -> (f64, usize, usize, usize) {
    let gt_lists: Vec<Vec<&DetectionTruth>> = frames
        .iter()
        .map(|f| f.truths.iter().filter(|t| t.class == class).collect())
        .collect();
    let mut ranked: Vec<(usize, usize, f64)> = Vec::new();
    let pred_lists: Vec<Vec<&DetectionPrediction>> = frames
        .iter()
        .enumerate()
        .map(|(fi, f)| {
            let list: Vec<&DetectionPrediction> =
                f.predictions.iter().filter(|p| p.class == class).collect();
            for (pi, p) in list.iter().enumerate() {
                ranked.push((fi, pi, p.confidence));
            }
            list
        })
        .collect();
    rank_by_confidence(&mut ranked);
    let gt_counts: Vec<usize> = gt_lists.iter().map(|l| l.len()).collect();
    let gt_total: usize = gt_counts.iter().sum();
    let flags = greedy_tp_flags(&ranked, &gt_counts, |frame, pred, gt| {
        let d = pred_lists[frame][pred].bbox.center_distance(&gt_lists[frame][gt].bbox);
        // nearer is better
        (d <= threshold).then_some(-d)
    });
    let tp = flags.iter().filter(|&&f| f).count();
    (ap_from_flags(&flags, gt_total, integration), tp, flags.len() - tp, gt_total - tp)
}

/// Center-distance detection AP. Per-class value is the mean AP over the
/// thresholds; the report average means over classes.
pub fn detection_ap(
    frames: &[DetectionEvalFrame],
    thresholds: &[f64],
    integration: ApIntegration,
    taxonomy: &SemanticTaxonomy,
) -> MetricReport {
    assert!(!thresholds.is_empty(), "at least one distance threshold");
    let mut per_class = Vec::new();
    for class in detection_classes(frames) {
        let mut ap_sum = 0.0;
        let (mut tp, mut fp, mut missed) = (0, 0, 0);
        for &threshold in thresholds {
            let (ap, t, f, m) = detection_class_slice(frames, class, threshold, integration);
            ap_sum += ap;
            tp += t;
            fp += f;
            missed += m;
        }
        per_class.push(ClassMetric {
            class,
            name: class_label(taxonomy.name(class), class),
            value: ap_sum / thresholds.len() as f64,
            true_positives: tp,
            false_positives: fp,
            false_negatives: missed,
        });
    }
    MetricReport::from_classes("detection_ap", thresholds, per_class)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionEvalPrediction {
    pub bbox: Box7,
    pub action: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionEvalTruth {
    pub bbox: Box7,
    pub action: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ActionEvalFrame {
    pub predictions: Vec<ActionEvalPrediction>,
    pub truths: Vec<ActionEvalTruth>,
}

/// Action report: AP averaged over classes and distance thresholds, plus
/// recall/precision at the all-predictions operating point averaged the
/// same way.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ActionReport {
    pub ap: MetricReport,
    pub mean_recall: f64,
    pub mean_precision: f64,
}

/// A prediction counts as true positive iff it matches a ground truth
/// within the center-distance threshold AND the action classes agree.
pub fn action_map(
    frames: &[ActionEvalFrame],
    thresholds: &[f64],
    integration: ApIntegration,
    actions: &ActionTaxonomy,
) -> ActionReport {
    assert!(!thresholds.is_empty(), "at least one distance threshold");
    let mut per_class = Vec::new();
    let mut recall_sum = 0.0;
    let mut precision_sum = 0.0;
    let mut slice_count = 0usize;
    for class in 0..actions.class_count() {
        let gt_lists: Vec<Vec<&ActionEvalTruth>> = frames
            .iter()
            .map(|f| f.truths.iter().filter(|t| t.action == class).collect())
            .collect();
        let mut entries: Vec<(usize, usize, f64)> = Vec::new();
        let pred_lists: Vec<Vec<&ActionEvalPrediction>> = frames
            .iter()
            .enumerate()
            .map(|(fi, f)| {
                let list: Vec<&ActionEvalPrediction> =
                    f.predictions.iter().filter(|p| p.action == class).collect();
                for (pi, p) in list.iter().enumerate() {
                    entries.push((fi, pi, p.confidence));
                }
                list
            })
            .collect();
        let gt_counts: Vec<usize> = gt_lists.iter().map(|l| l.len()).collect();
        let gt_total: usize = gt_counts.iter().sum();
        if gt_total == 0 && entries.is_empty() {
            continue;
        }
        rank_by_confidence(&mut entries);
        let mut ap_sum = 0.0;
        let (mut tp_sum, mut fp_sum, mut fn_sum) = (0, 0, 0);
        for &threshold in thresholds {
            let flags = greedy_tp_flags(&entries, &gt_counts, |frame, pred, gt| {
                let d =
                    pred_lists[frame][pred].bbox.center_distance(&gt_lists[frame][gt].bbox);
                (d <= threshold).then_some(-d)
            });
            let tp = flags.iter().filter(|&&f| f).count();
            ap_sum += ap_from_flags(&flags, gt_total, integration);
            tp_sum += tp;
            fp_sum += flags.len() - tp;
            fn_sum += gt_total - tp;
            recall_sum += if gt_total > 0 { tp as f64 / gt_total as f64 } else { 0.0 };
            precision_sum +=
                if !flags.is_empty() { tp as f64 / flags.len() as f64 } else { 0.0 };
            slice_count += 1;
        }
        per_class.push(ClassMetric {
            class,
            name: class_label(actions.name(class), class),
            value: ap_sum / thresholds.len() as f64,
            true_positives: tp_sum,
            false_positives: fp_sum,
            false_negatives: fn_sum,
        });
    }
    let ap = MetricReport::from_classes("action_map", thresholds, per_class);
    let (mean_recall, mean_precision) = if slice_count == 0 {
        (0.0, 0.0)
    } else {
        (recall_sum / slice_count as f64, precision_sum / slice_count as f64)
    };
    ActionReport { ap, mean_recall, mean_precision }
}

/// Per-class accuracy over paired action labels; classes absent from the
/// ground truth are excluded from the mean.
pub fn action_accuracy(
    pred: &[usize],
    gt: &[usize],
    actions: &ActionTaxonomy,
) -> Result<MetricReport, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch { expected: gt.len(), found: pred.len() });
    }
    let count = actions.class_count();
    let mut totals = vec![0usize; count];
    let mut correct = vec![0usize; count];
    let mut claimed_wrong = vec![0usize; count];
    for (&p, &g) in pred.iter().zip(gt) {
        assert!(p < count && g < count, "labels must fit the taxonomy");
        totals[g] += 1;
        if p == g {
            correct[g] += 1;
        } else {
            claimed_wrong[p] += 1;
        }
    }
    let per_class = (0..count)
        .filter(|&c| totals[c] > 0)
        .map(|c| ClassMetric {
            class: c,
            name: class_label(actions.name(c), c),
            value: correct[c] as f64 / totals[c] as f64,
            true_positives: correct[c],
            false_positives: claimed_wrong[c],
            false_negatives: totals[c] - correct[c],
        })
        .collect();
    Ok(MetricReport::from_classes("action_accuracy", &[], per_class))
}
