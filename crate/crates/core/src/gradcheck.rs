//! Central finite-difference verification for every differentiable block.
//!
//! Each registered check builds a small randomized instance of one block,
//! runs the tape backward for analytic gradients, then re-evaluates the
//! forward pass twice per parameter cell to form the numeric estimate.
//! Tolerances widen with block depth: simple smooth ops sit at 1e-6,
//! single attention/pooling stages at 1e-5, multi-stage composites at 1e-4
//! (ReLU kinks and pooling argmax switches inflate the numeric error but
//! stay well under those bounds on the registered instance sizes).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::action::{classify_action, enfi, hpfe, init_action_net, ActionConfig, EnfiNet};
use crate::backbone::{apply_set_abstraction, feature_propagation, plan_set_abstraction};
use crate::seg::{object_weighting, weighted_semantic_ce, HhoiConfig, ProposalSeed, SegHead};
use crate::tensor::blocks::{Activation, AttentionBlock, Ffn, LayerNorm, Linear, Mlp};
use crate::tensor::{FeatureMatrix, Gradients, NodeId, ParamSet, Tape};
use crate::types::PointCloud;

/// Central-difference step size.
pub const FD_STEP: f64 = 1e-5;

/// |analytic - numeric| / max(1, |analytic|, |numeric|).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

type Forward = Box<dyn Fn(&ParamSet, &mut Tape) -> NodeId>;

/// One registered block: a builder that materializes parameters and a
/// re-runnable forward pass for a seed, plus the pass/fail tolerance.
pub struct BlockCheck {
    pub name: &'static str,
    pub tolerance: f64,
    setup: fn(u64) -> (ParamSet, Forward),
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct CheckReport {
    pub block: String,
    pub seed: u64,
    pub cells: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// "param_name[flat_index]" of the worst cell.
    pub worst_cell: String,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= self.tolerance
    }

    pub fn render_line(&self) -> String {
        format!(
            "{:<22} seed {:>2}  cells {:>5}  max rel {:>10.3e}  tol {:>7.0e}  {}",
            self.block,
            self.seed,
            self.cells,
            self.max_rel_err,
            self.tolerance,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

/// Checks every scalar cell of every parameter in the block against a
/// central difference of the rebuilt forward pass.
pub fn run_check(check: &BlockCheck, seed: u64) -> CheckReport {
    let (mut params, forward) = (check.setup)(seed);
    let mut tape = Tape::new();
    let root = forward(&params, &mut tape);
    let mut grads = Gradients::zeros_like(&params);
    tape.backward(root, &mut grads);

    let mut max_rel_err = 0.0f64;
    let mut worst_cell = String::from("-");
    let mut cells = 0usize;
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let analytic = grads.get(id).clone();
        for e in 0..params.get(id).data().len() {
            let orig = params.get(id).data()[e];
            let mut eval = |value: f64| {
                params.get_mut(id).data_mut()[e] = value;
                let mut t = Tape::new();
                let r = forward(&params, &mut t);
                t.value(r).get(0, 0)
            };
            let plus = eval(orig + FD_STEP);
            let minus = eval(orig - FD_STEP);
            params.get_mut(id).data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let rel = relative_error(analytic.data()[e], numeric);
            cells += 1;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst_cell = format!("{}[{e}]", params.name(id));
            }
        }
    }
    CheckReport {
        block: check.name.to_string(),
        seed,
        cells,
        max_rel_err,
        tolerance: check.tolerance,
        worst_cell,
    }
}

/// Runs every registered block over every seed.
pub fn run_standard_suite(seeds: &[u64]) -> Vec<CheckReport> {
    let checks = standard_checks();
    let mut reports = Vec::with_capacity(checks.len() * seeds.len());
    for check in &checks {
        for &seed in seeds {
            reports.push(run_check(check, seed));
        }
    }
    reports
}

pub fn all_passed(reports: &[CheckReport]) -> bool {
    !reports.is_empty() && reports.iter().all(CheckReport::passed)
}

fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt))
}

fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> FeatureMatrix {
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-scale..scale))
        .collect();
    FeatureMatrix::from_flat(rows, cols, data)
}

fn random_positions(n: usize, spread: f64, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| {
            [
                rng.gen_range(-spread..spread),
                rng.gen_range(-spread..spread),
                rng.gen_range(-spread..spread),
            ]
        })
        .collect()
}

fn random_cloud(n: usize, spread: f64, rng: &mut ChaCha8Rng) -> PointCloud {
    let raw: Vec<[f64; 4]> = random_positions(n, spread, rng)
        .into_iter()
        .map(|p| [p[0], p[1], p[2], rng.gen_range(0.0..1.0)])
        .collect();
    PointCloud::from_raw(&raw)
}

fn setup_linear(seed: u64) -> (ParamSet, Forward) {
    let mut rng = rng_for(seed, 1);
    let mut params = ParamSet::new();
    let layer = Linear::init(&mut params, "linear", 3, 2, &mut rng).unwrap();
    let input = random_matrix(4, 3, 1.0, &mut rng);
    let probe = random_matrix(4, 2, 1.0, &mut rng);
    let forward: Forward = Box::new(move |ps, tape| {
        let x = tape.constant(input.clone());
        let y = layer.apply(tape, ps, x);
        tape.dot_const(y, probe.clone())
    });
    (params, forward)
}

fn setup_mlp(seed: u64) -> (ParamSet, Forward) {
    let mut rng = rng_for(seed, 2);
    let mut params = ParamSet::new();
    let mlp = Mlp::init(&mut params, "mlp", &[4, 8, 3], Activation::Relu, &mut rng).unwrap();
    let input = random_matrix(5, 4, 1.0, &mut rng);
    let probe = random_matrix(5, 3, 1.0, &mut rng);
    let forward: Forward = Box::new(move |ps, tape| {
        let x = tape.constant(input.clone());
        let y = mlp.apply(tape, ps, x);
        tape.dot_const(y, probe.clone())
    });
    (params, forward)
}

fn setup_softmax(seed: u64) -> (ParamSet, Forward) {
    let mut rng = rng_for(seed, 3);
    let mut params = ParamSet::new();
    let logits = params
        .add("logits", random_matrix(3, 5, 1.5, &mut rng))
        .unwrap();
    let probe = random_matrix(3, 5, 1.0, &mut rng);
    let forward: Forward = Box::new(move |ps, tape| {
        let x = tape.param(ps, logits);
        let y = tape.softmax_rows(x);
        tape.dot_const(y, probe.clone())
    });
    (params, forward)
}

fn setup_layer_norm(seed: u64) -> (ParamSet, Forward) {
    let mut rng = rng_for(seed, 4);
    let mut params = ParamSet::new();
    let norm = LayerNorm::init(&mut params, "norm", 6).unwrap();
    let input = params
        .add("input", random_matrix(4, 6, 1.0, &mut rng))
        .unwrap();
    let probe = random_matrix(4, 6, 1.0, &mut rng);
    let forward: Forward = Box::new(move |ps, tape| {
        let x = tape.param(ps, input);
        let y = norm.apply(tape, ps, x);
        tape.dot_const(y, probe.clone())
    });
    (params, forward)
}

fn setup_ffn(seed: u64) -> (ParamSet, Forward) {
    let mut rng = rng_for(seed, 5);
    let mut params = ParamSet::new();
    let ffn = Ffn::init(&mut params, "ffn", 4, &mut rng).unwrap();
    let input = random_matrix(3, 4, 1.0, &mut rng);
    let probe = random_matrix(3, 4, 1.0, &mut rng);
    let forward: Forward = Box::new(move |ps, tape| {
        let x = tape.constant(input.clone());
        let y = ffn.apply(tape, ps, x);
        tape.dot_const(y, probe.clone())
    });
    (params, forward)
}

fn setup_attention(seed: u64) -> (ParamSet, Forward) {
    let mut rng = rng_for(seed, 6);
    let mut params = ParamSet::new();
    let block = AttentionBlock::init(&mut params, "attn", 4, 6, 5, &mut rng).unwrap();
    let query = random_matrix(3, 4, 1.0, &mut rng);
    let kv = random_matrix(7, 6, 1.0, &mut rng);
    let probe = random_matrix(3, 5, 1.0, &mut rng);
    let forward: Forward = Box::new(move |ps, tape| {
        let q = tape.constant(query.clone());
        let k = tape.constant(kv.clone());
        let y = block.apply(tape, ps, q, k);
        tape.dot_const(y, probe.clone())
    });
    (params, forward)
}

fn setup_attention_key_bias(seed: u64) -> (ParamSet, Forward) {
    let mut rng = rng_for(seed, 7);
    let mut params = ParamSet::new();
    let block = AttentionBlock::init(&mut params, "attn", 4, 6, 5, &mut rng).unwrap();
    let encode = Linear::init(&mut params, "dist", 1, 5, &mut rng).unwrap();
    let query = random_matrix(2, 4, 1.0, &mut rng);
    let kv = random_matrix(6, 6, 1.0, &mut rng);
    let distances =
        FeatureMatrix::from_flat(6, 1, (0..6).map(|i| 0.4 + 0.3 * i as f64).collect());
    let probe = random_matrix(2, 5, 1.0, &mut rng);
    let forward: Forward = Box::new(move |ps, tape| {
        let q = tape.constant(query.clone());
        let k = tape.constant(kv.clone());
        let d = tape.constant(distances.clone());
        let bias = encode.apply(tape, ps, d);
        let y = block.apply_with_key_bias(tape, ps, q, k, bias);
        tape.dot_const(y, probe.clone())
    });
    (params, forward)
}

fn setup_cross_entropy(seed: u64) -> (ParamSet, Forward) {
    let mut rng = rng_for(seed, 8);
    let mut params = ParamSet::new();
    let logits = params
        .add("logits", random_matrix(5, 4, 1.5, &mut rng))
        .unwrap();
    let targets = vec![0usize, 3, 1, 2, 0];
    let weights = vec![1.0, 0.5, 2.0, 1.0, 0.0];
    let forward: Forward = Box::new(move |ps, tape| {
        let x = tape.param(ps, logits);
        let sum = tape.cross_entropy_sum(x, targets.clone(), weights.clone());
        tape.scale(sum, 1.0 / 4.5)
    });
    (params, forward)
}

fn setup_weighted_semantic_ce(seed: u64) -> (ParamSet, Forward) {
    let mut rng = rng_for(seed, 9);
    let mut params = ParamSet::new();
    let logits = params
        .add("logits", random_matrix(6, 4, 1.5, &mut rng))
        .unwrap();
    let labels = vec![0usize, 1, 2, 3, 1, 2];
    let class_weights = vec![0.0, 1.0, 2.0, 0.5];
    let forward: Forward = Box::new(move |ps, tape| {
        let x = tape.param(ps, logits);
        weighted_semantic_ce(tape, x, &labels, &class_weights)
    });
    (params, forward)
}

fn setup_l1(seed: u64) -> (ParamSet, Forward) {
    let mut rng = rng_for(seed, 10);
    let mut params = ParamSet::new();
    let init = random_matrix(6, 3, 1.0, &mut rng);
    // Targets are pushed at least 0.3 away from the initial prediction so
    // the +-1e-5 probes never cross the absolute-value kink.
    let mut target = init.clone();
    for v in target.data_mut() {
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        *v += sign * (0.3 + 0.4 * rng.gen::<f64>());
    }
    let pred = params.add("pred", init).unwrap();
    let row_weights = vec![1.0, 0.5, 0.0, 2.0, 1.0, 0.25];
    let forward: Forward = Box::new(move |ps, tape| {
        let x = tape.param(ps, pred);
        let sum = tape.l1_sum(x, target.clone(), row_weights.clone());
        tape.scale(sum, 1.0 / 6.0)
    });
    (params, forward)
}

fn setup_bce(seed: u64) -> (ParamSet, Forward) {
    let mut rng = rng_for(seed, 11);
    let mut params = ParamSet::new();
    let logits = params
        .add("logits", random_matrix(4, 3, 1.5, &mut rng))
        .unwrap();
    let target = FeatureMatrix::from_flat(
        4,
        3,
        (0..12).map(|_| f64::from(rng.gen::<bool>())).collect(),
    );
    let weights = FeatureMatrix::from_flat(
        4,
        3,
        (0..12)
            .map(|i| if i % 5 == 0 { 0.0 } else { 1.0 })
            .collect(),
    );
    let forward: Forward = Box::new(move |ps, tape| {
        let x = tape.param(ps, logits);
        let sum = tape.bce_sum(x, target.clone(), weights.clone());
        tape.scale(sum, 1.0 / 12.0)
    });
    (params, forward)
}

fn setup_mse(seed: u64) -> (ParamSet, Forward) {
    let mut rng = rng_for(seed, 12);
    let mut params = ParamSet::new();
    let pred = params
        .add("pred", random_matrix(4, 3, 1.0, &mut rng))
        .unwrap();
    let target = random_matrix(4, 3, 1.0, &mut rng);
    let weights = FeatureMatrix::from_flat(
        4,
        3,
        (0..12).map(|_| rng.gen_range(0.0..2.0)).collect(),
    );
    let forward: Forward = Box::new(move |ps, tape| {
        let x = tape.param(ps, pred);
        let sum = tape.mse_sum(x, target.clone(), weights.clone());
        tape.scale(sum, 1.0 / 12.0)
    });
    (params, forward)
}

fn setup_set_abstraction(seed: u64) -> (ParamSet, Forward) {
    let mut rng = rng_for(seed, 13);
    let mut params = ParamSet::new();
    let positions = random_positions(20, 1.0, &mut rng);
    let plan = plan_set_abstraction(&positions, 8, 0.6, 6).unwrap();
    let mlp = Mlp::init(&mut params, "sa", &[7, 6], Activation::Relu, &mut rng).unwrap();
    let features = params
        .add("features", random_matrix(20, 4, 1.0, &mut rng))
        .unwrap();
    let probe = random_matrix(8, 6, 1.0, &mut rng);
    let forward: Forward = Box::new(move |ps, tape| {
        let x = tape.param(ps, features);
        let y = apply_set_abstraction(tape, ps, &plan, x, &mlp);
        tape.dot_const(y, probe.clone())
    });
    (params, forward)
}

fn setup_feature_propagation(seed: u64) -> (ParamSet, Forward) {
    let mut rng = rng_for(seed, 14);
    let mut params = ParamSet::new();
    let coarse = random_positions(6, 1.0, &mut rng);
    let fine = random_positions(14, 1.0, &mut rng);
    let mlp = Mlp::init(&mut params, "fp", &[5, 4], Activation::Relu, &mut rng).unwrap();
    let features = params
        .add("features", random_matrix(6, 5, 1.0, &mut rng))
        .unwrap();
    let probe = random_matrix(14, 4, 1.0, &mut rng);
    let forward: Forward = Box::new(move |ps, tape| {
        let x = tape.param(ps, features);
        let y = feature_propagation(tape, ps, &coarse, x, &fine, Some(&mlp)).unwrap();
        tape.dot_const(y, probe.clone())
    });
    (params, forward)
}

fn setup_hhoi_head(seed: u64) -> (ParamSet, Forward) {
    let mut rng = rng_for(seed, 15);
    let mut params = ParamSet::new();
    let cfg = HhoiConfig {
        feature_dim: 6,
        class_count: 4,
        token_count: 5,
        ..HhoiConfig::default()
    };
    let head = SegHead::init(&mut params, "head", &cfg, &mut rng).unwrap();
    let features = random_matrix(12, 6, 1.0, &mut rng);
    let token_indices = vec![0usize, 3, 5, 7, 9];
    let seeds = vec![
        ProposalSeed {
            class: 1,
            point_indices: vec![0, 1, 2, 3],
        },
        ProposalSeed {
            class: 2,
            point_indices: vec![5, 6, 7],
        },
    ];
    let probe_conf = random_matrix(12, 4, 1.0, &mut rng);
    let probe_sem = random_matrix(12, 4, 1.0, &mut rng);
    let probe_off = random_matrix(12, 3, 1.0, &mut rng);
    let proposal_probes: Vec<(FeatureMatrix, FeatureMatrix)> = seeds
        .iter()
        .map(|s| {
            (
                random_matrix(1, 4, 1.0, &mut rng),
                random_matrix(s.point_indices.len(), 1, 1.0, &mut rng),
            )
        })
        .collect();
    let forward: Forward = Box::new(move |ps, tape| {
        let f_p = tape.constant(features.clone());
        let (conf_logits, _) = head.person_confidence(tape, ps, f_p);
        let tokens = tape.gather_rows(f_p, token_indices.clone());
        let guided = head.human_guided_feature(tape, ps, tokens);
        let (weighted, _) = object_weighting(tape, f_p, guided);
        let so = head.predict_semantic_offset(tape, ps, weighted);
        let refined = head.refine_proposals(tape, ps, &seeds, weighted);
        let mut terms = vec![
            tape.dot_const(conf_logits, probe_conf.clone()),
            tape.dot_const(so.semantic_logits, probe_sem.clone()),
            tape.dot_const(so.offsets, probe_off.clone()),
        ];
        for (r, (pc, pm)) in refined.iter().zip(&proposal_probes) {
            terms.push(tape.dot_const(r.class_logits, pc.clone()));
            terms.push(tape.dot_const(r.mask_logits, pm.clone()));
            terms.push(tape.dot_const(r.iou_logit, FeatureMatrix::filled(1, 1, 0.7)));
        }
        tape.add_n(&terms)
    });
    (params, forward)
}

fn tiny_action_config() -> ActionConfig {
    ActionConfig {
        sample_count: 16,
        branch_count: 2,
        serial_steps: 1,
        base_width: 2,
        class_count: 3,
        neighbor_count: 2,
        max_group: 8,
        attention_dim: 4,
        ..ActionConfig::default()
    }
}

fn setup_hpfe(seed: u64) -> (ParamSet, Forward) {
    let mut rng = rng_for(seed, 16);
    let mut params = ParamSet::new();
    let cfg = tiny_action_config();
    let net = crate::action::HpfeNet::init(&mut params, "hpfe", &cfg, &mut rng).unwrap();
    let crop = random_cloud(cfg.sample_count, 0.15, &mut rng);
    let probe_tokens = random_matrix(cfg.token_count(), cfg.token_width(), 1.0, &mut rng);
    let probe_pooled = random_matrix(1, cfg.token_width(), 1.0, &mut rng);
    let forward: Forward = Box::new(move |ps, tape| {
        let out = hpfe(tape, ps, &net, &crop, &cfg).unwrap();
        let a = tape.dot_const(out.tokens, probe_tokens.clone());
        let b = tape.dot_const(out.pooled, probe_pooled.clone());
        tape.add(a, b)
    });
    (params, forward)
}

fn setup_enfi(seed: u64) -> (ParamSet, Forward) {
    let mut rng = rng_for(seed, 17);
    let mut params = ParamSet::new();
    let net = EnfiNet::init(&mut params, "enfi", 10, 5, &mut rng).unwrap();
    let ego = params.add("ego", random_matrix(4, 10, 1.0, &mut rng)).unwrap();
    let neighbors = params
        .add("neighbors", random_matrix(2, 10, 1.0, &mut rng))
        .unwrap();
    let distances = vec![0.7, 1.3];
    let probe = random_matrix(1, 10, 1.0, &mut rng);
    let forward: Forward = Box::new(move |ps, tape| {
        let tokens = tape.param(ps, ego);
        let stack = tape.param(ps, neighbors);
        let fused = enfi(tape, ps, &net, tokens, Some(stack), &distances);
        tape.dot_const(fused, probe.clone())
    });
    (params, forward)
}

fn setup_action_classifier(seed: u64) -> (ParamSet, Forward) {
    let mut rng = rng_for(seed, 18);
    let mut params = ParamSet::new();
    let classifier =
        Mlp::init(&mut params, "clf", &[6, 5, 4], Activation::Relu, &mut rng).unwrap();
    let fused = params
        .add("fused", random_matrix(2, 6, 1.0, &mut rng))
        .unwrap();
    let forward: Forward = Box::new(move |ps, tape| {
        let x = tape.param(ps, fused);
        let (logits, _) = classify_action(tape, ps, &classifier, x);
        let sum = tape.cross_entropy_sum(logits, vec![2, 0], vec![1.0, 1.0]);
        tape.scale(sum, 0.5)
    });
    (params, forward)
}

fn setup_action_head(seed: u64) -> (ParamSet, Forward) {
    let mut rng = rng_for(seed, 19);
    let mut params = ParamSet::new();
    let cfg = tiny_action_config();
    let net = init_action_net(&mut params, &cfg, &mut rng).unwrap();
    let ego_crop = random_cloud(cfg.sample_count, 0.15, &mut rng);
    let neighbor_crops = vec![
        random_cloud(cfg.sample_count, 0.15, &mut rng),
        random_cloud(cfg.sample_count, 0.15, &mut rng),
    ];
    let distances = vec![0.8, 1.1];
    let forward: Forward = Box::new(move |ps, tape| {
        let ego_out = hpfe(tape, ps, &net.hpfe, &ego_crop, &cfg).unwrap();
        let pooled: Vec<NodeId> = neighbor_crops
            .iter()
            .map(|crop| hpfe(tape, ps, &net.hpfe, crop, &cfg).unwrap().pooled)
            .collect();
        let stack = tape.concat_rows(&pooled);
        let fused = enfi(tape, ps, &net.enfi, ego_out.tokens, Some(stack), &distances);
        let (logits, _) = classify_action(tape, ps, &net.classifier, fused);
        tape.cross_entropy_sum(logits, vec![1], vec![1.0])
    });
    (params, forward)
}

/// The full registry, ordered roughly by depth.
pub fn standard_checks() -> Vec<BlockCheck> {
    vec![
        BlockCheck { name: "linear", tolerance: 1e-6, setup: setup_linear },
        BlockCheck { name: "mlp_relu", tolerance: 1e-5, setup: setup_mlp },
        BlockCheck { name: "softmax", tolerance: 1e-6, setup: setup_softmax },
        BlockCheck { name: "layer_norm", tolerance: 1e-4, setup: setup_layer_norm },
        BlockCheck { name: "ffn", tolerance: 1e-5, setup: setup_ffn },
        BlockCheck { name: "attention", tolerance: 1e-5, setup: setup_attention },
        BlockCheck { name: "attention_key_bias", tolerance: 1e-5, setup: setup_attention_key_bias },
        BlockCheck { name: "cross_entropy", tolerance: 1e-6, setup: setup_cross_entropy },
        BlockCheck { name: "weighted_semantic_ce", tolerance: 1e-6, setup: setup_weighted_semantic_ce },
        BlockCheck { name: "l1_offset", tolerance: 1e-6, setup: setup_l1 },
        BlockCheck { name: "mask_bce", tolerance: 1e-6, setup: setup_bce },
        BlockCheck { name: "mask_score_mse", tolerance: 1e-6, setup: setup_mse },
        BlockCheck { name: "set_abstraction", tolerance: 1e-5, setup: setup_set_abstraction },
        BlockCheck { name: "feature_propagation", tolerance: 1e-5, setup: setup_feature_propagation },
        BlockCheck { name: "hhoi_head", tolerance: 1e-4, setup: setup_hhoi_head },
        BlockCheck { name: "hpfe", tolerance: 1e-4, setup: setup_hpfe },
        BlockCheck { name: "enfi", tolerance: 1e-4, setup: setup_enfi },
        BlockCheck { name: "action_classifier", tolerance: 1e-5, setup: setup_action_classifier },
        BlockCheck { name: "action_head", tolerance: 1e-4, setup: setup_action_head },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_normalizes_small_magnitudes() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 2e-9) - 1e-9).abs() < 1e-24);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(-4.0, -5.0) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn standard_suite_passes_on_three_seeds() {
        let reports = run_standard_suite(&[0, 1, 2]);
        assert_eq!(reports.len(), standard_checks().len() * 3);
        for report in &reports {
            assert!(
                report.passed(),
                "{} (worst cell {})",
                report.render_line(),
                report.worst_cell
            );
        }
        assert!(all_passed(&reports));
    }

    #[test]
    fn report_flags_a_broken_gradient() {
        fn kinked(_: u64) -> (ParamSet, Forward) {
            let mut params = ParamSet::new();
            // ReLU evaluated exactly at its kink: the centered difference
            // sees slope 1/2 while the analytic rule picks a one-sided value.
            let p = params
                .add("p", FeatureMatrix::from_flat(1, 1, vec![0.0]))
                .unwrap();
            let forward: Forward = Box::new(move |ps, tape| {
                let x = tape.param(ps, p);
                let y = tape.relu(x);
                tape.dot_const(y, FeatureMatrix::filled(1, 1, 1.0))
            });
            (params, forward)
        }
        let check = BlockCheck {
            name: "kinked",
            tolerance: 1e-6,
            setup: kinked,
        };
        let report = run_check(&check, 0);
        assert!(!report.passed());
        assert_eq!(report.worst_cell, "p[0]");
    }
}
