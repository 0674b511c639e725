//! Deterministic synthetic scene generator.
//!
//! Scenes are desk-scale stand-ins for captured indoor sweeps: a ground
//! plane, a handful of persons built from three-ellipsoid bodies whose
//! proportions depend on the action they perform, and optional interacted
//! objects parked next to their person. Everything is driven by a single
//! `ChaCha8` stream seeded from the config, so a (config, seed) pair maps
//! to exactly one frame, bit for bit.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{
    ActionTaxonomy, Box7, InstanceAnnotation, Point, PointCloud, SceneFrame, SemanticTaxonomy,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error("seed {seed} appears in both the train and test splits")]
    SeedOverlap { seed: u64 },
}

/// Everything needed to reproduce one scene or one split.
///
/// Object spawn probabilities and action weights are keyed by taxonomy
/// name so configs stay readable; they are resolved to indices against the
/// taxonomies at generation time and unknown names are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    /// Inclusive person count range; the exact count is drawn per frame.
    pub person_count_min: usize,
    pub person_count_max: usize,
    /// Per-person chance of spawning one nearby object of the named class.
    /// Probabilities must sum to at most 1; the remainder means no object.
    pub object_probabilities: BTreeMap<String, f64>,
    /// Mixture weights over action names; zero-weight actions never occur.
    pub action_weights: BTreeMap<String, f64>,
    /// Half-extent of the square scene footprint, meters.
    pub extent: f64,
    /// Ground points per square-meter cell at 1 m range (inverse-square falloff).
    pub ground_density: f64,
    /// Surface points per square meter of body area at 1 m range.
    pub person_density: f64,
    /// Fraction of the full circle shadowed by the occlusion sector, [0, 1).
    pub dropout: f64,
    /// Instances are never generated or occluded below this point count.
    pub min_instance_points: usize,
    /// Interaction layout: Hum-Inter persons come in close pairs (0.5-0.8 m)
    /// while everyone else keeps at least 2.5 m of clearance, so neighbor
    /// distance alone separates the interacting class.
    pub interaction_mode: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let mut object_probabilities = BTreeMap::new();
        object_probabilities.insert("box".to_string(), 0.3);
        object_probabilities.insert("cart".to_string(), 0.2);
        let action_weights = crate::types::ACTION_NAMES
            .iter()
            .map(|name| (name.to_string(), 1.0))
            .collect();
        SynthConfig {
            seed: 0,
            person_count_min: 2,
            person_count_max: 4,
            object_probabilities,
            action_weights,
            extent: 12.0,
            ground_density: 12.0,
            person_density: 600.0,
            dropout: 0.1,
            min_instance_points: 24,
            interaction_mode: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.person_count_min > self.person_count_max {
            return Err(SynthError::InvalidConfig(format!(
                "person count range [{}, {}] is empty",
                self.person_count_min, self.person_count_max
            )));
        }
        if self.person_count_max > 64 {
            return Err(SynthError::InvalidConfig(
                "person_count_max above 64 is not a desk-scale scene".to_string(),
            ));
        }
        if !self.extent.is_finite() || self.extent < 2.0 {
            return Err(SynthError::InvalidConfig(
                "extent must be finite and at least 2 m".to_string(),
            ));
        }
        for (name, density) in [
            ("ground_density", self.ground_density),
            ("person_density", self.person_density),
        ] {
            if !density.is_finite() || density < 0.0 {
                return Err(SynthError::InvalidConfig(format!(
                    "{name} must be finite and non-negative"
                )));
            }
        }
        if !self.dropout.is_finite() || !(0.0..1.0).contains(&self.dropout) {
            return Err(SynthError::InvalidConfig(
                "dropout must lie in [0, 1)".to_string(),
            ));
        }
        if self.min_instance_points == 0 {
            return Err(SynthError::InvalidConfig(
                "min_instance_points must be positive".to_string(),
            ));
        }
        let mut probability_sum = 0.0;
        for (name, p) in &self.object_probabilities {
            if !p.is_finite() || *p < 0.0 {
                return Err(SynthError::InvalidConfig(format!(
                    "object probability for '{name}' must be finite and non-negative"
                )));
            }
            probability_sum += p;
        }
        if probability_sum > 1.0 + 1e-12 {
            return Err(SynthError::InvalidConfig(format!(
                "object probabilities sum to {probability_sum}, above 1"
            )));
        }
        if self.action_weights.is_empty() {
            return Err(SynthError::InvalidConfig(
                "action_weights must name at least one action".to_string(),
            ));
        }
        let mut weight_sum = 0.0;
        for (name, w) in &self.action_weights {
            if !w.is_finite() || *w < 0.0 {
                return Err(SynthError::InvalidConfig(format!(
                    "action weight for '{name}' must be finite and non-negative"
                )));
            }
            weight_sum += w;
        }
        if weight_sum <= 0.0 {
            return Err(SynthError::InvalidConfig(
                "action weights must not all be zero".to_string(),
            ));
        }
        Ok(())
    }
}

/// One body part of the three-ellipsoid person model, in the person's local
/// frame (x forward, z up, meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct BodyPart {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

const fn part(center: [f64; 3], radii: [f64; 3]) -> BodyPart {
    BodyPart { center, radii }
}

/// Legs, torso, head for each action. Proportions are the discriminative
/// signal: Sit is short and wide, Standing tall and narrow, Bend-Over folds
/// the torso forward. Hum-Inter deliberately reuses the Standing silhouette
/// so only neighbor context can separate the two.
pub(crate) fn action_body(action: usize) -> [BodyPart; 3] {
    let standing = [
        part([0.0, 0.0, 0.45], [0.18, 0.18, 0.45]),
        part([0.0, 0.0, 1.12], [0.21, 0.18, 0.34]),
        part([0.0, 0.0, 1.62], [0.12, 0.12, 0.12]),
    ];
    match action {
        0 => [
            // Lift: arms overhead stretch the torso and raise the head.
            part([0.0, 0.0, 0.45], [0.17, 0.17, 0.45]),
            part([0.0, 0.0, 1.25], [0.19, 0.16, 0.38]),
            part([0.0, 0.0, 1.88], [0.11, 0.11, 0.14]),
        ],
        1 => [
            // Carry: load bulges the torso forward.
            part([0.0, 0.0, 0.45], [0.17, 0.17, 0.45]),
            part([0.16, 0.0, 1.10], [0.28, 0.22, 0.32]),
            part([0.10, 0.0, 1.58], [0.11, 0.11, 0.11]),
        ],
        2 => [
            // Move: stride widens the leg envelope.
            part([0.0, 0.0, 0.45], [0.30, 0.17, 0.45]),
            part([0.05, 0.0, 1.12], [0.20, 0.17, 0.34]),
            part([0.08, 0.0, 1.60], [0.11, 0.11, 0.11]),
        ],
        3 => [
            // Pull_Push: whole body leans into the load.
            part([0.0, 0.0, 0.42], [0.24, 0.17, 0.42]),
            part([0.24, 0.0, 1.00], [0.24, 0.18, 0.30]),
            part([0.38, 0.0, 1.42], [0.11, 0.11, 0.11]),
        ],
        4 => [
            // Sit: short and wide, thighs fold forward.
            part([0.10, 0.0, 0.26], [0.27, 0.26, 0.24]),
            part([-0.06, 0.0, 0.72], [0.23, 0.21, 0.30]),
            part([-0.06, 0.0, 1.10], [0.11, 0.11, 0.11]),
        ],
        5 => [
            // Scooter-BalanceBike: narrow crouch over the deck.
            part([0.0, 0.0, 0.50], [0.16, 0.14, 0.40]),
            part([0.06, 0.0, 1.08], [0.18, 0.15, 0.30]),
            part([0.10, 0.0, 1.50], [0.11, 0.11, 0.11]),
        ],
        6 => standing,
        7 => [
            // Fitness: wide squat, compressed height.
            part([0.0, 0.0, 0.34], [0.33, 0.24, 0.32]),
            part([0.0, 0.0, 0.88], [0.33, 0.22, 0.28]),
            part([0.0, 0.0, 1.30], [0.11, 0.11, 0.11]),
        ],
        8 => [
            // Entertain: arms out broaden the torso on both axes.
            part([0.0, 0.0, 0.44], [0.18, 0.18, 0.44]),
            part([0.0, 0.0, 1.12], [0.30, 0.26, 0.33]),
            part([0.0, 0.0, 1.62], [0.11, 0.11, 0.11]),
        ],
        9 => [
            // Sports: lunging stance, long leg envelope.
            part([0.06, 0.0, 0.40], [0.36, 0.20, 0.38]),
            part([0.10, 0.0, 1.00], [0.24, 0.18, 0.32]),
            part([0.16, 0.0, 1.46], [0.11, 0.11, 0.11]),
        ],
        10 => [
            // Bend-Over: torso folded horizontal, head at waist height.
            part([0.0, 0.0, 0.42], [0.18, 0.18, 0.42]),
            part([0.28, 0.0, 0.92], [0.36, 0.20, 0.18]),
            part([0.60, 0.0, 0.90], [0.11, 0.11, 0.11]),
        ],
        _ => standing,
    }
}

/// Object footprint as an axis-aligned box in its local frame:
/// (length, width, height) and center height above ground.
fn object_shape(name: &str) -> ([f64; 3], f64) {
    match name {
        "table" => ([1.2, 0.8, 0.7], 0.35),
        "box" => ([0.45, 0.45, 0.45], 0.225),
        "cart" => ([0.9, 0.5, 0.85], 0.425),
        "scooter" => ([1.1, 0.25, 0.6], 0.3),
        "chair" => ([0.5, 0.5, 0.9], 0.45),
        "backpack" => ([0.35, 0.25, 0.5], 0.55),
        _ => ([0.5, 0.5, 0.5], 0.25),
    }
}

/// Per-instance record in the scene manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestInstance {
    pub class: String,
    pub action: Option<String>,
    pub point_count: usize,
    pub center: [f64; 3],
    /// Horizontal distance of the instance centroid from the sensor origin.
    pub range: f64,
}

/// Sidecar summary of one generated frame, suitable for aggregation across
/// a split without re-reading the frames themselves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneManifest {
    pub frame_id: u64,
    pub seed: u64,
    pub person_count: usize,
    pub object_count: usize,
    pub ground_points: usize,
    pub total_points: usize,
    pub instances: Vec<ManifestInstance>,
}

pub struct SynthSplit {
    pub train: Vec<(SceneFrame, SceneManifest)>,
    pub test: Vec<(SceneFrame, SceneManifest)>,
}

const NORMAL_SEPARATION: f64 = 1.5;
const ISOLATED_SEPARATION: f64 = 2.5;
const PAIR_DISTANCE: (f64, f64) = (0.5, 0.8);
const OBJECT_CLEARANCE: f64 = 0.8;
const MIN_BOX_EXTENT: f64 = 0.05;
const PERSON_REFLECTANCE: (f64, f64) = (0.35, 0.85);
const OBJECT_REFLECTANCE: (f64, f64) = (0.25, 0.75);
const GROUND_REFLECTANCE: (f64, f64) = (0.05, 0.35);

struct ResolvedMixtures {
    /// (class index, spawn probability), ordered by class name.
    objects: Vec<(usize, f64)>,
    /// (action index, weight), ordered by action name.
    actions: Vec<(usize, f64)>,
    action_weight_total: f64,
    hum_inter: Option<usize>,
    standing: Option<usize>,
}

fn resolve_mixtures(
    cfg: &SynthConfig,
    taxonomy: &SemanticTaxonomy,
    actions: &ActionTaxonomy,
) -> Result<ResolvedMixtures, SynthError> {
    let mut objects = Vec::new();
    for (name, p) in &cfg.object_probabilities {
        let class = taxonomy.index_of(name).ok_or_else(|| {
            SynthError::InvalidConfig(format!("unknown object class '{name}' in taxonomy"))
        })?;
        if !taxonomy.is_thing(class) || class == taxonomy.person_class() {
            return Err(SynthError::InvalidConfig(format!(
                "object class '{name}' must be a non-person thing class"
            )));
        }
        if *p > 0.0 {
            objects.push((class, *p));
        }
    }
    let mut action_mix = Vec::new();
    let mut total = 0.0;
    for (name, w) in &cfg.action_weights {
        let action = actions.index_of(name).ok_or_else(|| {
            SynthError::InvalidConfig(format!("unknown action '{name}' in action taxonomy"))
        })?;
        if *w > 0.0 {
            action_mix.push((action, *w));
            total += w;
        }
    }
    if action_mix.is_empty() {
        return Err(SynthError::InvalidConfig(
            "action weights must not all be zero".to_string(),
        ));
    }
    Ok(ResolvedMixtures {
        objects,
        actions: action_mix,
        action_weight_total: total,
        hum_inter: actions.index_of("Hum-Inter"),
        standing: actions.index_of("Standing"),
    })
}

fn planar_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Rejection-samples a position keeping `separation` meters from everything
/// already placed. Exhausting the attempt budget accepts the final draw, so
/// generation always terminates; overcrowded configs degrade gracefully.
fn place_with_separation(
    rng: &mut ChaCha8Rng,
    extent: f64,
    existing: &[[f64; 2]],
    separation: f64,
) -> [f64; 2] {
    let span = (extent - 1.2).max(0.5);
    let mut candidate = [0.0, 0.0];
    for _ in 0..200 {
        candidate = [rng.gen_range(-span..=span), rng.gen_range(-span..=span)];
        if existing
            .iter()
            .all(|p| planar_distance(*p, candidate) >= separation)
        {
            return candidate;
        }
    }
    candidate
}

fn draw_action(rng: &mut ChaCha8Rng, mixtures: &ResolvedMixtures) -> usize {
    let mut u = rng.gen::<f64>() * mixtures.action_weight_total;
    for (action, w) in &mixtures.actions {
        if u < *w {
            return *action;
        }
        u -= w;
    }
    mixtures.actions.last().map(|(a, _)| *a).unwrap_or(0)
}

fn ellipsoid_area(radii: &[f64; 3]) -> f64 {
    let [a, b, c] = *radii;
    4.0 * PI * (a * b + b * c + c * a) / 3.0
}

/// Points-per-surface budget with inverse-square range falloff, floored so
/// nearby instances never vanish.
fn falloff(range: f64) -> f64 {
    (range * range).max(1.0)
}

fn sample_ellipsoid_surface(
    rng: &mut ChaCha8Rng,
    body: &BodyPart,
    count: usize,
    heading: f64,
    origin: [f64; 2],
    reflectance: (f64, f64),
    out: &mut Vec<Point>,
) {
    let (sin_h, cos_h) = heading.sin_cos();
    for _ in 0..count {
        let cos_t = 2.0 * rng.gen::<f64>() - 1.0;
        let sin_t = (1.0 - cos_t * cos_t).sqrt();
        let phi = TAU * rng.gen::<f64>();
        let dir = [sin_t * phi.cos(), sin_t * phi.sin(), cos_t];
        let local = [
            body.center[0] + body.radii[0] * dir[0],
            body.center[1] + body.radii[1] * dir[1],
            body.center[2] + body.radii[2] * dir[2],
        ];
        let x = cos_h * local[0] - sin_h * local[1] + origin[0];
        let y = sin_h * local[0] + cos_h * local[1] + origin[1];
        let r = rng.gen_range(reflectance.0..reflectance.1);
        out.push(Point::new(x, y, local[2], r));
    }
}

/// Uniform sample over the six faces of an axis-aligned box of the given
/// size, rotated by `heading` and centered at (`origin`, `center_z`).
fn sample_box_surface(
    rng: &mut ChaCha8Rng,
    size: [f64; 3],
    center_z: f64,
    count: usize,
    heading: f64,
    origin: [f64; 2],
    reflectance: (f64, f64),
    out: &mut Vec<Point>,
) {
    let [l, w, h] = size;
    let face_areas = [l * w, l * w, w * h, w * h, l * h, l * h];
    let total: f64 = face_areas.iter().sum();
    let (sin_h, cos_h) = heading.sin_cos();
    for _ in 0..count {
        let mut pick = rng.gen::<f64>() * total;
        let mut face = 5;
        for (i, a) in face_areas.iter().enumerate() {
            if pick < *a {
                face = i;
                break;
            }
            pick -= a;
        }
        let u = rng.gen::<f64>() - 0.5;
        let v = rng.gen::<f64>() - 0.5;
        let local = match face {
            0 => [u * l, v * w, h / 2.0],
            1 => [u * l, v * w, -h / 2.0],
            2 => [l / 2.0, u * w, v * h],
            3 => [-l / 2.0, u * w, v * h],
            4 => [u * l, w / 2.0, v * h],
            _ => [u * l, -w / 2.0, v * h],
        };
        let x = cos_h * local[0] - sin_h * local[1] + origin[0];
        let y = sin_h * local[0] + cos_h * local[1] + origin[1];
        let r = rng.gen_range(reflectance.0..reflectance.1);
        out.push(Point::new(x, y, center_z + local[2], r));
    }
}

struct PendingInstance {
    class: usize,
    action: Option<usize>,
    point_indices: Vec<usize>,
    anchor: [f64; 2],
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

fn tight_box(points: &[Point], indices: &[usize]) -> Box7 {
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for &i in indices {
        let p = points[i].pos();
        for axis in 0..3 {
            min[axis] = min[axis].min(p[axis]);
            max[axis] = max[axis].max(p[axis]);
        }
    }
    let center = [
        quantize((min[0] + max[0]) / 2.0),
        quantize((min[1] + max[1]) / 2.0),
        quantize((min[2] + max[2]) / 2.0),
    ];
    let size = [
        quantize((max[1] - min[1]).max(MIN_BOX_EXTENT)),
        quantize((max[0] - min[0]).max(MIN_BOX_EXTENT)),
        quantize((max[2] - min[2]).max(MIN_BOX_EXTENT)),
    ];
    Box7::new(center, [size[1], size[0], size[2]], 0.0)
}

/// Generates one labeled frame plus its manifest. The same `(cfg, taxonomy)`
/// pair always yields the same bytes; frames satisfy every structural frame
/// invariant (checked in tests via `validate_frame`).
pub fn generate_scene(
    cfg: &SynthConfig,
    taxonomy: &SemanticTaxonomy,
) -> Result<(SceneFrame, SceneManifest), SynthError> {
    cfg.validate()?;
    let action_taxonomy = ActionTaxonomy::default();
    let mixtures = resolve_mixtures(cfg, taxonomy, &action_taxonomy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Person layout: draw the count, then place each person with the mode's
    // separation rule. Interaction mode pairs every Hum-Inter person with a
    // partner inside arm's reach and isolates everyone else.
    let person_count = rng.gen_range(cfg.person_count_min..=cfg.person_count_max);
    let separation = if cfg.interaction_mode {
        ISOLATED_SEPARATION
    } else {
        NORMAL_SEPARATION
    };
    struct PersonSpec {
        position: [f64; 2],
        heading: f64,
        action: usize,
    }
    let mut persons: Vec<PersonSpec> = Vec::new();
    let mut anchors: Vec<[f64; 2]> = Vec::new();
    while persons.len() < person_count {
        let mut action = draw_action(&mut rng, &mixtures);
        let is_pairable = cfg.interaction_mode && Some(action) == mixtures.hum_inter;
        if is_pairable && persons.len() + 2 <= person_count {
            let anchor = place_with_separation(&mut rng, cfg.extent, &anchors, separation);
            let bearing = rng.gen_range(-PI..PI);
            let gap = rng.gen_range(PAIR_DISTANCE.0..PAIR_DISTANCE.1);
            let partner = [
                anchor[0] + gap * bearing.cos(),
                anchor[1] + gap * bearing.sin(),
            ];
            for position in [anchor, partner] {
                persons.push(PersonSpec {
                    position,
                    heading: rng.gen_range(-PI..PI),
                    action,
                });
                anchors.push(position);
            }
            continue;
        }
        if is_pairable {
            // No room left for a pair; fall back to the visually identical
            // solo pose so the count range stays exact.
            action = mixtures.standing.unwrap_or(action);
        }
        let position = place_with_separation(&mut rng, cfg.extent, &anchors, separation);
        persons.push(PersonSpec {
            position,
            heading: rng.gen_range(-PI..PI),
            action,
        });
        anchors.push(position);
    }

    let mut points: Vec<Point> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut pending: Vec<PendingInstance> = Vec::new();
    let person_class = taxonomy.person_class();

    for spec in &persons {
        let body = action_body(spec.action);
        let range = planar_distance(spec.position, [0.0, 0.0]);
        let mut counts: Vec<usize> = body
            .iter()
            .map(|part| {
                let budget = cfg.person_density * ellipsoid_area(&part.radii) / falloff(range);
                (budget.round() as usize).max(4)
            })
            .collect();
        let total: usize = counts.iter().sum();
        if total < cfg.min_instance_points {
            counts[1] += cfg.min_instance_points - total;
        }
        let start = points.len();
        for (part, count) in body.iter().zip(&counts) {
            sample_ellipsoid_surface(
                &mut rng,
                part,
                *count,
                spec.heading,
                spec.position,
                PERSON_REFLECTANCE,
                &mut points,
            );
        }
        let point_indices: Vec<usize> = (start..points.len()).collect();
        labels.resize(points.len(), person_class);
        pending.push(PendingInstance {
            class: person_class,
            action: Some(spec.action),
            point_indices,
            anchor: spec.position,
        });

        // Interacted object: one cumulative draw against the spawn table.
        let mut u = rng.gen::<f64>();
        let mut spawned = None;
        for (class, p) in &mixtures.objects {
            if u < *p {
                spawned = Some(*class);
                break;
            }
            u -= p;
        }
        let Some(class) = spawned else { continue };
        let name = taxonomy.name(class).unwrap_or_default().to_string();
        let (size, center_z) = object_shape(&name);
        // Keep clearance from every instance anchor so offset-shifted
        // centroids stay separable; skip the object if the spot is crowded.
        let mut placed = None;
        for _ in 0..30 {
            let bearing = rng.gen_range(-PI..PI);
            let gap = rng.gen_range(0.55..0.95);
            let candidate = [
                spec.position[0] + gap * bearing.cos(),
                spec.position[1] + gap * bearing.sin(),
            ];
            let clear = pending
                .iter()
                .all(|inst| planar_distance(inst.anchor, candidate) >= OBJECT_CLEARANCE)
                && anchors
                    .iter()
                    .filter(|a| planar_distance(**a, spec.position) > 1e-9)
                    .all(|a| planar_distance(*a, candidate) >= OBJECT_CLEARANCE);
            if clear {
                placed = Some(candidate);
                break;
            }
        }
        let Some(center) = placed else { continue };
        let heading = rng.gen_range(-PI..PI);
        let area = 2.0 * (size[0] * size[1] + size[1] * size[2] + size[0] * size[2]);
        let range = planar_distance(center, [0.0, 0.0]);
        let count = ((cfg.person_density * area / falloff(range)).round() as usize)
            .max(cfg.min_instance_points);
        let start = points.len();
        sample_box_surface(
            &mut rng,
            size,
            center_z,
            count,
            heading,
            center,
            OBJECT_REFLECTANCE,
            &mut points,
        );
        let point_indices: Vec<usize> = (start..points.len()).collect();
        labels.resize(points.len(), class);
        pending.push(PendingInstance {
            class,
            action: None,
            point_indices,
            anchor: center,
        });
    }

    // Ground plane: one square-meter cell grid with inverse-square density.
    let ground_class = (0..taxonomy.class_count()).find(|c| taxonomy.is_stuff(*c));
    let ground_start = points.len();
    if cfg.ground_density > 0.0 {
        let cells = cfg.extent.ceil() as i64;
        for ix in -cells..cells {
            for iy in -cells..cells {
                let cx = ix as f64 + 0.5;
                let cy = iy as f64 + 0.5;
                let expected = cfg.ground_density / falloff((cx * cx + cy * cy).sqrt());
                let mut n = expected.floor() as usize;
                if rng.gen::<f64>() < expected.fract() {
                    n += 1;
                }
                for _ in 0..n {
                    let x = ix as f64 + rng.gen::<f64>();
                    let y = iy as f64 + rng.gen::<f64>();
                    let z = rng.gen_range(-0.02..0.02);
                    let r = rng.gen_range(GROUND_REFLECTANCE.0..GROUND_REFLECTANCE.1);
                    points.push(Point::new(x, y, z, r));
                }
            }
        }
    }
    labels.resize(points.len(), ground_class.unwrap_or(0));

    // Occlusion: one angular shadow sector. Ground points inside it vanish;
    // an instance sheds its in-sector points only if enough remain.
    let mut keep = vec![true; points.len()];
    if cfg.dropout > 0.0 {
        let width = cfg.dropout * TAU;
        let sector_start = rng.gen_range(-PI..PI);
        let in_sector =
            |p: &Point| (p.y.atan2(p.x) - sector_start).rem_euclid(TAU) < width;
        for inst in &pending {
            let inside: Vec<usize> = inst
                .point_indices
                .iter()
                .copied()
                .filter(|&i| in_sector(&points[i]))
                .collect();
            if inst.point_indices.len() - inside.len() >= cfg.min_instance_points {
                for i in inside {
                    keep[i] = false;
                }
            }
        }
        for i in ground_start..points.len() {
            if in_sector(&points[i]) {
                keep[i] = false;
            }
        }
    }

    // Compact: rebuild the cloud with survivors, remap instance indices, and
    // quantize through f32 so serialized frames reproduce bit-exactly.
    let mut remap = vec![usize::MAX; points.len()];
    let mut final_points = Vec::new();
    let mut final_labels = Vec::new();
    for (i, p) in points.iter().enumerate() {
        if keep[i] {
            remap[i] = final_points.len();
            final_points.push(Point::new(
                quantize(p.x),
                quantize(p.y),
                quantize(p.z),
                quantize(p.r),
            ));
            final_labels.push(labels[i]);
        }
    }

    let mut instances = Vec::new();
    let mut manifest_instances = Vec::new();
    let mut object_count = 0;
    for (id, inst) in pending.iter().enumerate() {
        let point_indices: Vec<usize> = inst
            .point_indices
            .iter()
            .filter(|&&i| keep[i])
            .map(|&i| remap[i])
            .collect();
        debug_assert!(!point_indices.is_empty());
        let bbox = tight_box(&final_points, &point_indices);
        if inst.action.is_none() {
            object_count += 1;
        }
        let mut centroid = [0.0; 3];
        for &i in &point_indices {
            let p = final_points[i].pos();
            for axis in 0..3 {
                centroid[axis] += p[axis];
            }
        }
        for axis in &mut centroid {
            *axis /= point_indices.len() as f64;
        }
        manifest_instances.push(ManifestInstance {
            class: taxonomy
                .name(inst.class)
                .map(str::to_string)
                .unwrap_or_else(|| format!("class{}", inst.class)),
            action: inst
                .action
                .and_then(|a| action_taxonomy.name(a))
                .map(str::to_string),
            point_count: point_indices.len(),
            center: centroid,
            range: (centroid[0] * centroid[0] + centroid[1] * centroid[1]).sqrt(),
        });
        instances.push(InstanceAnnotation {
            id: id as u32,
            class: inst.class,
            point_indices,
            bbox,
            action: inst.action,
            track_id: None,
        });
    }

    let ground_points = final_points.len()
        - instances
            .iter()
            .map(|i| i.point_indices.len())
            .sum::<usize>();
    let manifest = SceneManifest {
        frame_id: cfg.seed,
        seed: cfg.seed,
        person_count: persons.len(),
        object_count,
        ground_points,
        total_points: final_points.len(),
        instances: manifest_instances,
    };
    let frame = SceneFrame {
        frame_id: cfg.seed,
        cloud: PointCloud::new(final_points),
        instances,
        point_labels: final_labels,
    };
    Ok((frame, manifest))
}

/// Fails if any seed appears in both splits. Splits generated by
/// `generate_split` are disjoint by construction; this guards hand-rolled
/// seed lists.
pub fn ensure_disjoint_seeds(train: &[u64], test: &[u64]) -> Result<(), SynthError> {
    let train_set: HashSet<u64> = train.iter().copied().collect();
    for seed in test {
        if train_set.contains(seed) {
            return Err(SynthError::SeedOverlap { seed: *seed });
        }
    }
    Ok(())
}

/// Generates an 80/20 train/test split of `frame_count` frames with
/// consecutive, provably disjoint per-frame seeds starting at `cfg.seed`.
pub fn generate_split(
    cfg: &SynthConfig,
    taxonomy: &SemanticTaxonomy,
    frame_count: usize,
) -> Result<SynthSplit, SynthError> {
    if frame_count < 2 {
        return Err(SynthError::InvalidConfig(
            "a split needs at least 2 frames".to_string(),
        ));
    }
    let train_count = ((frame_count * 4) / 5).clamp(1, frame_count - 1);
    let train_seeds: Vec<u64> = (0..train_count).map(|i| cfg.seed + i as u64).collect();
    let test_seeds: Vec<u64> = (train_count..frame_count)
        .map(|i| cfg.seed + i as u64)
        .collect();
    ensure_disjoint_seeds(&train_seeds, &test_seeds)?;
    let build = |seeds: &[u64]| -> Result<Vec<(SceneFrame, SceneManifest)>, SynthError> {
        seeds
            .iter()
            .map(|&seed| {
                let frame_cfg = SynthConfig {
                    seed,
                    ..cfg.clone()
                };
                generate_scene(&frame_cfg, taxonomy)
            })
            .collect()
    };
    Ok(SynthSplit {
        train: build(&train_seeds)?,
        test: build(&test_seeds)?,
    })
}

/// Instance totals per class name, summed over manifests.
pub fn aggregate_instance_counts(manifests: &[SceneManifest]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for manifest in manifests {
        for inst in &manifest.instances {
            *counts.entry(inst.class.clone()).or_insert(0) += 1;
        }
    }
    counts
}
