//! Subcommand implementations. Every command echoes its effective config
//! into the run directory first, then writes only deterministic artifacts:
//! rerunning with the same config and seed reproduces each output file
//! byte for byte.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use hcp_core::action::{
    action_accuracy, action_pipeline, init_action_net, plan_action_frames, train_action,
    ActionError,
};
use hcp_core::gradcheck::{all_passed, run_standard_suite};
use hcp_core::io::annot::{write_predictions, FramePredictions};
use hcp_core::io::checkpoint::{load_checkpoint, write_checkpoint};
use hcp_core::io::report::{to_json_string, write_json};
use hcp_core::metrics::{
    action_map, detection_ap, instance_ap, semantic_miou, ActionEvalFrame, ActionEvalPrediction,
    ActionEvalTruth, DetectionEvalFrame, DetectionPrediction, DetectionTruth, InstanceEvalFrame,
};
use hcp_core::seg::{
    init_seg_model, output_to_predictions, segment_frame, train_segmentation, SegError,
};
use hcp_core::synth::{aggregate_instance_counts, generate_split, SynthConfig, SynthError};
use hcp_core::tensor::ParamSet;
use hcp_core::types::{ActionTaxonomy, Box7, PredictedInstance, SceneFrame};

use crate::config::{write_effective_config, RunConfig};
use crate::data::{frame_basename, load_eval_pairs, load_frames, parallel_map, write_frame_set};
use crate::CliError;

fn config_or_pipeline_seg(err: SegError) -> CliError {
    match err {
        SegError::InvalidConfig(msg) => CliError::Config(msg),
        other => CliError::Pipeline(other.to_string()),
    }
}

fn config_or_pipeline_action(err: ActionError) -> CliError {
    match err {
        ActionError::InvalidConfig(msg) => CliError::Config(msg),
        other => CliError::Pipeline(other.to_string()),
    }
}

fn write_report_files(
    run_dir: &Path,
    json_value: &impl serde::Serialize,
    text: &str,
) -> Result<(), CliError> {
    write_json(&run_dir.join("report.json"), json_value)
        .map_err(|e| CliError::Pipeline(format!("writing report.json: {e}")))?;
    fs::write(run_dir.join("report.txt"), text)
        .map_err(|e| CliError::Pipeline(format!("writing report.txt: {e}")))?;
    Ok(())
}

/// Generates the train/test split and writes it under the run directory.
pub fn cmd_synth(mut cfg: RunConfig, run_dir: &Path) -> Result<(), CliError> {
    // The run seed is the split's master seed; reflect that in the echo.
    cfg.synth = SynthConfig {
        seed: cfg.seed,
        ..cfg.synth
    };
    write_effective_config(run_dir, &cfg)?;
    let taxonomy = cfg.taxonomy.build()?;
    let split = generate_split(&cfg.synth, &taxonomy, cfg.frames).map_err(|e| match e {
        SynthError::InvalidConfig(msg) => CliError::Config(msg),
        overlap => CliError::Config(overlap.to_string()),
    })?;
    write_frame_set(&run_dir.join("train"), &split.train)?;
    write_frame_set(&run_dir.join("test"), &split.test)?;

    let manifests: Vec<_> = split
        .train
        .iter()
        .chain(&split.test)
        .map(|(_, m)| m.clone())
        .collect();
    let total_points: usize = manifests.iter().map(|m| m.total_points).sum();
    let summary = json!({
        "train_frames": split.train.len(),
        "test_frames": split.test.len(),
        "total_points": total_points,
        "instance_counts": aggregate_instance_counts(&manifests),
    });
    write_json(&run_dir.join("summary.json"), &summary)
        .map_err(|e| CliError::Pipeline(format!("writing summary.json: {e}")))?;
    println!(
        "wrote {} train + {} test frames ({} points) under {}",
        split.train.len(),
        split.test.len(),
        total_points,
        run_dir.display()
    );
    Ok(())
}

/// Full-batch segmentation training with periodic checkpoints and a
/// per-step loss log.
pub fn cmd_train_seg(cfg: RunConfig, data: &Path, run_dir: &Path) -> Result<(), CliError> {
    write_effective_config(run_dir, &cfg)?;
    let taxonomy = cfg.taxonomy.build()?;
    let frames = load_frames(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::new();
    let model = init_seg_model(&mut params, &cfg.backbone, &cfg.hhoi, &mut rng)
        .map_err(config_or_pipeline_seg)?;

    let chunk_size = if cfg.train.checkpoint_every == 0 {
        cfg.train.steps.max(1)
    } else {
        cfg.train.checkpoint_every
    };
    let mut losses = Vec::with_capacity(cfg.train.steps);
    let mut done = 0;
    while done < cfg.train.steps {
        let chunk = chunk_size.min(cfg.train.steps - done);
        let chunk_losses = train_segmentation(
            &frames,
            &mut params,
            &model,
            &cfg.backbone,
            &cfg.hhoi,
            &taxonomy,
            chunk,
            cfg.train.learning_rate,
        )
        .map_err(config_or_pipeline_seg)?;
        losses.extend(chunk_losses);
        done += chunk;
        if done < cfg.train.steps {
            let path = run_dir.join(format!("checkpoint_step_{done}.hcpc"));
            write_checkpoint(&path, &params)
                .map_err(|e| CliError::Pipeline(format!("writing {}: {e}", path.display())))?;
        }
    }
    let log: String = losses
        .iter()
        .map(|l| to_json_string(l).map(|s| s + "\n"))
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Pipeline(format!("serializing loss log: {e}")))?;
    fs::write(run_dir.join("losses.jsonl"), log)
        .map_err(|e| CliError::Pipeline(format!("writing losses.jsonl: {e}")))?;
    write_checkpoint(&run_dir.join("checkpoint.hcpc"), &params)
        .map_err(|e| CliError::Pipeline(format!("writing checkpoint: {e}")))?;

    let first = losses.first().map(|l| l.total).unwrap_or(0.0);
    let last = losses.last().map(|l| l.total).unwrap_or(0.0);
    let summary = json!({
        "frames": frames.len(),
        "steps": losses.len(),
        "first_loss": first,
        "final_loss": last,
    });
    write_json(&run_dir.join("summary.json"), &summary)
        .map_err(|e| CliError::Pipeline(format!("writing summary.json: {e}")))?;
    println!(
        "trained {} steps on {} frames: total loss {first:.4} -> {last:.4}",
        losses.len(),
        frames.len()
    );
    Ok(())
}

/// Action-recognition training over annotated person boxes.
pub fn cmd_train_action(cfg: RunConfig, data: &Path, run_dir: &Path) -> Result<(), CliError> {
    write_effective_config(run_dir, &cfg)?;
    let frames = load_frames(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::new();
    let net = init_action_net(&mut params, &cfg.action, &mut rng)
        .map_err(config_or_pipeline_action)?;
    let planned = plan_action_frames(&frames, &cfg.action).map_err(config_or_pipeline_action)?;

    let chunk_size = if cfg.train.checkpoint_every == 0 {
        cfg.train.steps.max(1)
    } else {
        cfg.train.checkpoint_every
    };
    let mut losses = Vec::with_capacity(cfg.train.steps);
    let mut done = 0;
    while done < cfg.train.steps {
        let chunk = chunk_size.min(cfg.train.steps - done);
        let chunk_losses = train_action(
            &planned,
            &mut params,
            &net,
            &cfg.action,
            chunk,
            cfg.train.learning_rate,
        )
        .map_err(config_or_pipeline_action)?;
        losses.extend(chunk_losses);
        done += chunk;
        if done < cfg.train.steps {
            let path = run_dir.join(format!("checkpoint_step_{done}.hcpc"));
            write_checkpoint(&path, &params)
                .map_err(|e| CliError::Pipeline(format!("writing {}: {e}", path.display())))?;
        }
    }
    let log: String = losses.iter().map(|l| format!("{{\"loss\":{l}}}\n")).collect();
    fs::write(run_dir.join("losses.jsonl"), log)
        .map_err(|e| CliError::Pipeline(format!("writing losses.jsonl: {e}")))?;
    write_checkpoint(&run_dir.join("checkpoint.hcpc"), &params)
        .map_err(|e| CliError::Pipeline(format!("writing checkpoint: {e}")))?;

    let accuracy =
        action_accuracy(&frames, &params, &net, &cfg.action).map_err(config_or_pipeline_action)?;
    let summary = json!({
        "frames": frames.len(),
        "steps": losses.len(),
        "first_loss": losses.first().copied().unwrap_or(0.0),
        "final_loss": losses.last().copied().unwrap_or(0.0),
        "train_accuracy": accuracy,
    });
    write_json(&run_dir.join("summary.json"), &summary)
        .map_err(|e| CliError::Pipeline(format!("writing summary.json: {e}")))?;
    println!(
        "trained {} steps on {} frames: train accuracy {accuracy:.3}",
        losses.len(),
        frames.len()
    );
    Ok(())
}

/// Instance segmentation inference over a frame directory.
pub fn cmd_segment(
    cfg: RunConfig,
    data: &Path,
    checkpoint: &Path,
    run_dir: &Path,
) -> Result<(), CliError> {
    write_effective_config(run_dir, &cfg)?;
    let taxonomy = cfg.taxonomy.build()?;
    let frames = load_frames(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::new();
    let model = init_seg_model(&mut params, &cfg.backbone, &cfg.hhoi, &mut rng)
        .map_err(config_or_pipeline_seg)?;
    load_checkpoint(checkpoint, &mut params)
        .map_err(|e| CliError::MissingInput(format!("{}: {e}", checkpoint.display())))?;

    let outputs = parallel_map(frames, cfg.jobs, |frame| {
        segment_frame(
            &frame.cloud,
            &params,
            &model,
            &cfg.backbone,
            &cfg.hhoi,
            &taxonomy,
        )
        .map(|output| output_to_predictions(frame.frame_id, &frame.cloud, &output))
    });
    let predictions_dir = run_dir.join("predictions");
    fs::create_dir_all(&predictions_dir)
        .map_err(|e| CliError::Pipeline(format!("creating {}: {e}", predictions_dir.display())))?;
    let mut instance_total = 0usize;
    let mut frame_total = 0usize;
    for output in outputs {
        let predictions = output.map_err(config_or_pipeline_seg)?;
        instance_total += predictions.instances.len();
        frame_total += 1;
        let path = predictions_dir.join(format!("{}.hcpp", frame_basename(predictions.frame_id)));
        write_predictions(&path, &predictions)
            .map_err(|e| CliError::Pipeline(format!("writing {}: {e}", path.display())))?;
    }
    let summary = json!({ "frames": frame_total, "instances": instance_total });
    write_json(&run_dir.join("summary.json"), &summary)
        .map_err(|e| CliError::Pipeline(format!("writing summary.json: {e}")))?;
    println!(
        "segmented {frame_total} frames into {instance_total} instances under {}",
        predictions_dir.display()
    );
    Ok(())
}

/// Action classification over each frame's annotated person boxes.
pub fn cmd_recognize(
    cfg: RunConfig,
    data: &Path,
    checkpoint: &Path,
    run_dir: &Path,
) -> Result<(), CliError> {
    write_effective_config(run_dir, &cfg)?;
    let taxonomy = cfg.taxonomy.build()?;
    let frames = load_frames(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::new();
    let net = init_action_net(&mut params, &cfg.action, &mut rng)
        .map_err(config_or_pipeline_action)?;
    load_checkpoint(checkpoint, &mut params)
        .map_err(|e| CliError::MissingInput(format!("{}: {e}", checkpoint.display())))?;

    let person_class = taxonomy.person_class();
    let outputs = parallel_map(frames, cfg.jobs, |frame| {
        let boxes: Vec<Box7> = frame
            .instances
            .iter()
            .filter(|inst| inst.class == person_class)
            .map(|inst| inst.bbox.clone())
            .collect();
        action_pipeline(&frame.cloud, &boxes, &params, &net, &cfg.action).map(|predictions| {
            let instances: Vec<PredictedInstance> = predictions
                .iter()
                .map(|p| PredictedInstance {
                    class: person_class,
                    point_indices: Vec::new(),
                    bbox: p.bbox.clone(),
                    action: Some(p.action),
                    confidence: p.scores[p.action],
                })
                .collect();
            FramePredictions {
                frame_id: frame.frame_id,
                point_count: frame.cloud.len(),
                point_labels: vec![0; frame.cloud.len()],
                instances,
            }
        })
    });
    let predictions_dir = run_dir.join("predictions");
    fs::create_dir_all(&predictions_dir)
        .map_err(|e| CliError::Pipeline(format!("creating {}: {e}", predictions_dir.display())))?;
    let mut person_total = 0usize;
    let mut frame_total = 0usize;
    for output in outputs {
        let predictions = output.map_err(config_or_pipeline_action)?;
        person_total += predictions.instances.len();
        frame_total += 1;
        let path = predictions_dir.join(format!("{}.hcpp", frame_basename(predictions.frame_id)));
        write_predictions(&path, &predictions)
            .map_err(|e| CliError::Pipeline(format!("writing {}: {e}", path.display())))?;
    }
    let summary = json!({ "frames": frame_total, "persons": person_total });
    write_json(&run_dir.join("summary.json"), &summary)
        .map_err(|e| CliError::Pipeline(format!("writing summary.json: {e}")))?;
    println!(
        "recognized actions for {person_total} persons across {frame_total} frames under {}",
        predictions_dir.display()
    );
    Ok(())
}

/// Semantic mIoU plus instance AP at the configured IoU thresholds.
pub fn cmd_eval_seg(
    cfg: RunConfig,
    predictions: &Path,
    data: &Path,
    run_dir: &Path,
) -> Result<(), CliError> {
    write_effective_config(run_dir, &cfg)?;
    let taxonomy = cfg.taxonomy.build()?;
    let pairs = load_eval_pairs(predictions, data)?;

    let mut pred_labels = Vec::new();
    let mut gt_labels = Vec::new();
    for (pred, gt) in &pairs {
        pred_labels.extend_from_slice(&pred.point_labels);
        gt_labels.extend_from_slice(&gt.point_labels);
    }
    let semantic = semantic_miou(&pred_labels, &gt_labels, &taxonomy)
        .map_err(|e| CliError::MissingInput(e.to_string()))?;

    let eval_frames: Vec<InstanceEvalFrame> = pairs
        .iter()
        .map(|(pred, gt)| InstanceEvalFrame {
            predictions: pred.instances.clone(),
            truths: gt.instances.clone(),
        })
        .collect();
    let mut instance_reports = Vec::new();
    let mut text = semantic.render_table();
    for &threshold in &cfg.eval.instance_iou_thresholds {
        let report = instance_ap(&eval_frames, threshold, cfg.eval.integration, &taxonomy);
        text.push('\n');
        text.push_str(&report.render_table());
        instance_reports.push(json!({ "iou_threshold": threshold, "report": report }));
    }
    let report = json!({ "semantic": semantic, "instance": instance_reports });
    write_report_files(run_dir, &report, &text)?;
    print!("{text}");
    Ok(())
}

/// Center-distance detection AP over predicted instance boxes.
pub fn cmd_eval_det(
    cfg: RunConfig,
    predictions: &Path,
    data: &Path,
    run_dir: &Path,
) -> Result<(), CliError> {
    write_effective_config(run_dir, &cfg)?;
    let taxonomy = cfg.taxonomy.build()?;
    let pairs = load_eval_pairs(predictions, data)?;
    let eval_frames: Vec<DetectionEvalFrame> = pairs
        .iter()
        .map(|(pred, gt)| DetectionEvalFrame {
            predictions: pred
                .instances
                .iter()
                .map(|inst| DetectionPrediction {
                    class: inst.class,
                    bbox: inst.bbox.clone(),
                    confidence: inst.confidence,
                })
                .collect(),
            truths: gt
                .instances
                .iter()
                .map(|inst| DetectionTruth {
                    class: inst.class,
                    bbox: inst.bbox.clone(),
                })
                .collect(),
        })
        .collect();
    let report = detection_ap(
        &eval_frames,
        &cfg.eval.detection_thresholds,
        cfg.eval.integration,
        &taxonomy,
    );
    let text = report.render_table();
    write_report_files(run_dir, &json!({ "detection": report }), &text)?;
    print!("{text}");
    Ok(())
}

/// Action mAP, mRecall, and mPrecision over predicted person boxes.
pub fn cmd_eval_action(
    cfg: RunConfig,
    predictions: &Path,
    data: &Path,
    run_dir: &Path,
) -> Result<(), CliError> {
    write_effective_config(run_dir, &cfg)?;
    let pairs = load_eval_pairs(predictions, data)?;
    let actions = ActionTaxonomy::default();
    let eval_frames: Vec<ActionEvalFrame> = pairs
        .iter()
        .map(|(pred, gt)| ActionEvalFrame {
            predictions: pred
                .instances
                .iter()
                .filter_map(|inst| {
                    inst.action.map(|action| ActionEvalPrediction {
                        bbox: inst.bbox.clone(),
                        action,
                        confidence: inst.confidence,
                    })
                })
                .collect(),
            truths: gt
                .instances
                .iter()
                .filter_map(|inst| {
                    inst.action.map(|action| ActionEvalTruth {
                        bbox: inst.bbox.clone(),
                        action,
                    })
                })
                .collect(),
        })
        .collect();
    let report = action_map(
        &eval_frames,
        &cfg.eval.detection_thresholds,
        cfg.eval.integration,
        &actions,
    );
    let mut text = report.ap.render_table();
    text.push_str(&format!(
        "mean recall: {:.4}\nmean precision: {:.4}\n",
        report.mean_recall, report.mean_precision
    ));
    write_report_files(run_dir, &report, &text)?;
    print!("{text}");
    Ok(())
}

/// Finite-difference checks for every registered block; nonzero exit on
/// any failure.
pub fn cmd_gradcheck(cfg: RunConfig, run_dir: &Path) -> Result<(), CliError> {
    write_effective_config(run_dir, &cfg)?;
    let seeds = [cfg.seed, cfg.seed + 1, cfg.seed + 2];
    let reports = run_standard_suite(&seeds);
    for report in &reports {
        println!("{}", report.render_line());
    }
    write_json(&run_dir.join("gradcheck.json"), &reports)
        .map_err(|e| CliError::Pipeline(format!("writing gradcheck.json: {e}")))?;
    if all_passed(&reports) {
        println!("all {} checks passed", reports.len());
        Ok(())
    } else {
        Err(CliError::Gradcheck)
    }
}
