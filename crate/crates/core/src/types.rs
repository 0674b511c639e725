//! Domain types, label taxonomies, and frame validation shared by all
//! pipelines.
//!
//! Everything here is immutable after construction and safe to share across
//! threads. Validation never fails: [`validate_frame`] reports violations as
//! data so callers can decide what to do with a bad frame.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;

/// One LiDAR return: position in meters plus reflectance in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, r: f64) -> Self {
        Point { x, y, z, r: r.clamp(0.0, 1.0) }
    }

    pub fn pos(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// An unordered set of LiDAR points. Reflectance is clamped to [0, 1] on
/// ingest; coordinates are kept as given so validation can flag non-finite
/// input.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        PointCloud { points }
    }

    /// Builds a cloud from raw (x, y, z, reflectance) tuples, clamping
    /// reflectance.
    pub fn from_raw(raw: &[[f64; 4]]) -> Self {
        PointCloud {
            points: raw.iter().map(|p| Point::new(p[0], p[1], p[2], p[3])).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(|p| p.pos()).collect()
    }
}

/// Normalizes an angle into [-pi, pi).
pub fn normalize_yaw(yaw: f64) -> f64 {
    let mut a = (yaw + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can land exactly on +pi for inputs like -pi - eps.
    if a >= PI {
        a -= 2.0 * PI;
    }
    a
}

/// A 7-DoF bounding box in sensor coordinates: center (m), size (m), yaw
/// (radians in [-pi, pi), rotation about +z).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box7 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Extent along the box's local y axis.
    pub w: f64,
    /// Extent along the box's local x (heading) axis.
    pub l: f64,
    /// Vertical extent.
    pub h: f64,
    pub yaw: f64,
}

impl Box7 {
    /// Builds a box, normalizing yaw into [-pi, pi). Size positivity is a
    /// validation concern, not a construction failure.
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Self {
        Box7 {
            x: center[0],
            y: center[1],
            z: center[2],
            w: size[0],
            l: size[1],
            h: size[2],
            yaw: normalize_yaw(yaw),
        }
    }

    pub fn center(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn center_distance(&self, other: &Box7) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

/// Ordered semantic classes. Index 0 is always "unlabeled" (the ignore
/// label); "stuff" classes receive per-point labels but never instances.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticTaxonomy {
    names: Vec<String>,
    person: usize,
    stuff: Vec<usize>,
}

/// Problems found while building a taxonomy.
#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum TaxonomyError {
    #[error("class names must be unique: `{0}` appears twice")]
    DuplicateName(String),
    #[error("person class `{0}` not present")]
    MissingPerson(String),
    #[error("stuff class `{0}` not present")]
    MissingStuff(String),
    #[error("index 0 must be the unlabeled/ignore class")]
    MissingIgnore,
}

impl SemanticTaxonomy {
    /// `names[0]` must be the unlabeled/ignore class; `person` and every
    /// stuff class must appear among the names.
    pub fn new(names: &[&str], person: &str, stuff: &[&str]) -> Result<Self, TaxonomyError> {
        if names.is_empty() {
            return Err(TaxonomyError::MissingIgnore);
        }
        let mut seen = HashMap::new();
        for (i, n) in names.iter().enumerate() {
            if seen.insert(n.to_string(), i).is_some() {
                return Err(TaxonomyError::DuplicateName(n.to_string()));
            }
        }
        let person_idx = *seen
            .get(person)
            .ok_or_else(|| TaxonomyError::MissingPerson(person.to_string()))?;
        let mut stuff_idx = Vec::new();
        for s in stuff {
            let idx = *seen
                .get(*s)
                .ok_or_else(|| TaxonomyError::MissingStuff(s.to_string()))?;
            stuff_idx.push(idx);
        }
        Ok(SemanticTaxonomy {
            names: names.iter().map(|s| s.to_string()).collect(),
            person: person_idx,
            stuff: stuff_idx,
        })
    }

    /// The daily-life-scene taxonomy used by default: 19 thing classes plus
    /// ground, with index 0 reserved for unlabeled points.
    pub fn default_scene() -> Self {
        SemanticTaxonomy::new(
            &[
                "unlabeled",
                "person",
                "motorbike",
                "table",
                "box",
                "cart",
                "seesaw",
                "basketball",
                "fitness_equipment",
                "cabinet",
                "baby",
                "blackboard",
                "staircase",
                "slide",
                "scooter",
                "computer",
                "backpack",
                "object_in_hand",
                "chair",
                "spring_car",
                "ground",
            ],
            "person",
            &["ground"],
        )
        .expect("default taxonomy is well-formed")
    }

    /// Total class count C, including the ignore class at index 0.
    pub fn class_count(&self) -> usize {
        self.names.len()
    }

    pub fn person_class(&self) -> usize {
        self.person
    }

    pub fn name(&self, class: usize) -> Option<&str> {
        self.names.get(class).map(|s| s.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn is_stuff(&self, class: usize) -> bool {
        self.stuff.contains(&class)
    }

    pub fn is_ignore(&self, class: usize) -> bool {
        class == 0
    }

    /// Instance-bearing classes: everything except ignore and stuff.
    pub fn is_thing(&self, class: usize) -> bool {
        class != 0 && class < self.names.len() && !self.is_stuff(class)
    }

    pub fn thing_classes(&self) -> Vec<usize> {
        (0..self.names.len()).filter(|&c| self.is_thing(c)).collect()
    }
}

/// The 12 merged action categories.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionTaxonomy {
    names: Vec<String>,
}

pub const ACTION_NAMES: [&str; 12] = [
    "Lift",
    "Carry",
    "Move",
    "Pull_Push",
    "Sit",
    "Scooter-BalanceBike",
    "Hum-Inter",
    "Fitness",
    "Entertain",
    "Sports",
    "Bend-Over",
    "Standing",
];

impl Default for ActionTaxonomy {
    fn default() -> Self {
        ActionTaxonomy {
            names: ACTION_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl ActionTaxonomy {
    pub fn class_count(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, action: usize) -> Option<&str> {
        self.names.get(action).map(|s| s.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// One annotated object: its points, class, box, and (for persons) action.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceAnnotation {
    pub id: u32,
    pub class: usize,
    /// Indices into the frame's point cloud.
    pub point_indices: Vec<usize>,
    pub bbox: Box7,
    /// Present iff `class` is the person class.
    pub action: Option<usize>,
    pub track_id: Option<u32>,
}

/// One predicted object: like [`InstanceAnnotation`] but with a confidence
/// and no track id.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedInstance {
    pub class: usize,
    pub point_indices: Vec<usize>,
    pub bbox: Box7,
    /// Present for person predictions run through action recognition.
    pub action: Option<usize>,
    pub confidence: f64,
}

/// One labeled LiDAR frame: points, instances, and per-point semantic labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFrame {
    pub frame_id: u64,
    pub cloud: PointCloud,
    pub instances: Vec<InstanceAnnotation>,
    /// Per-point semantic class, length = point count. 0 = unlabeled.
    pub point_labels: Vec<usize>,
}

/// A single invariant violation found in a frame. Violations are data, not
/// failures: a frame with violations is still a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Which field broke (e.g. "point.x", "instance.action").
    pub field: String,
    /// Offending point or instance index, when one exists.
    pub index: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            Some(i) => write!(f, "{}[{}]: {}", self.field, i, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

fn violation(field: &str, index: Option<usize>, message: String) -> Violation {
    Violation { field: field.to_string(), index, message }
}

/// Checks every frame invariant and returns one entry per violation.
/// An empty list means the frame is fully consistent.
pub fn validate_frame(frame: &SceneFrame, taxonomy: &SemanticTaxonomy) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = frame.cloud.len();

    for (i, p) in frame.cloud.points.iter().enumerate() {
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            out.push(violation("point.position", Some(i), "non-finite coordinate".into()));
        }
        if !p.r.is_finite() || p.r < 0.0 || p.r > 1.0 {
            out.push(violation("point.reflectance", Some(i), format!("{} outside [0,1]", p.r)));
        }
    }

    if frame.point_labels.len() != n {
        out.push(violation(
            "point_labels",
            None,
            format!("length {} != point count {}", frame.point_labels.len(), n),
        ));
    }
    for (i, &c) in frame.point_labels.iter().enumerate() {
        if c >= taxonomy.class_count() {
            out.push(violation("point_labels", Some(i), format!("class {} out of range", c)));
        }
    }

    // owner[i] = which instance (by list position) claims point i
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for (k, inst) in frame.instances.iter().enumerate() {
        if inst.class >= taxonomy.class_count() {
            out.push(violation("instance.class", Some(k), format!("class {} out of range", inst.class)));
        } else if !taxonomy.is_thing(inst.class) {
            out.push(violation(
                "instance.class",
                Some(k),
                format!("class `{}` cannot carry instances", taxonomy.name(inst.class).unwrap_or("?")),
            ));
        }
        let is_person = inst.class == taxonomy.person_class();
        match (&inst.action, is_person) {
            (None, true) => {
                out.push(violation("instance.action", Some(k), "person instance missing action".into()))
            }
            (Some(_), false) => out.push(violation(
                "instance.action",
                Some(k),
                "non-person instance carries an action label".into(),
            )),
            (Some(a), true) => {
                if *a >= 12 {
                    out.push(violation("instance.action", Some(k), format!("action {} out of range", a)));
                }
            }
            (None, false) => {}
        }
        if !(inst.bbox.w > 0.0 && inst.bbox.l > 0.0 && inst.bbox.h > 0.0) {
            out.push(violation("instance.bbox", Some(k), "non-positive box size".into()));
        }
        if !(-PI..PI).contains(&inst.bbox.yaw) {
            out.push(violation("instance.bbox.yaw", Some(k), format!("{} outside [-pi, pi)", inst.bbox.yaw)));
        }

        let mut seen_in_inst = std::collections::HashSet::new();
        for &pi in &inst.point_indices {
            if pi >= n {
                out.push(violation("instance.point_indices", Some(k), format!("point {} out of range", pi)));
                continue;
            }
            if !seen_in_inst.insert(pi) {
                out.push(violation(
                    "instance.point_indices",
                    Some(k),
                    format!("point {} listed twice", pi),
                ));
                continue;
            }
            match owner[pi] {
                Some(prev) => out.push(violation(
                    "instance.point_indices",
                    Some(pi),
                    format!("point {} belongs to instances {} and {}", pi, prev, k),
                )),
                None => owner[pi] = Some(k),
            }
        }
    }

    // Label consistency: member points carry the owning instance's class;
    // free points are ground/unlabeled.
    for i in 0..n.min(frame.point_labels.len()) {
        let label = frame.point_labels[i];
        match owner[i] {
            Some(k) => {
                let expect = frame.instances[k].class;
                if label != expect {
                    out.push(violation(
                        "point_labels",
                        Some(i),
                        format!("label {} disagrees with owning instance class {}", label, expect),
                    ));
                }
            }
            None => {
                if !(taxonomy.is_ignore(label) || taxonomy.is_stuff(label)) {
                    out.push(violation(
                        "point_labels",
                        Some(i),
                        format!("free point labeled thing class {}", label),
                    ));
                }
            }
        }
    }

    out
}

/// Per-class point counts for one frame. Counts always sum to the point
/// count, with out-of-range labels bucketed as unlabeled.
pub fn semantic_label_histogram(frame: &SceneFrame, taxonomy: &SemanticTaxonomy) -> Vec<usize> {
    let mut counts = vec![0usize; taxonomy.class_count()];
    for &c in &frame.point_labels {
        if c < counts.len() {
            counts[c] += 1;
        } else {
            counts[0] += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_frame() -> (SceneFrame, SemanticTaxonomy) {
        let tax = SemanticTaxonomy::default_scene();
        let person = tax.person_class();
        let ground = tax.index_of("ground").unwrap();
        let cloud = PointCloud::from_raw(&[
            [0.0, 0.0, 0.0, 0.5],
            [0.1, 0.0, 0.0, 0.5],
            [0.0, 0.1, 1.0, 0.5],
            [0.0, 0.1, 1.5, 0.5],
            [5.0, 5.0, 0.0, 0.2],
            [6.0, 5.0, 0.0, 0.2],
        ]);
        let inst = InstanceAnnotation {
            id: 0,
            class: person,
            point_indices: vec![2, 3],
            bbox: Box7::new([0.0, 0.1, 1.25], [0.5, 0.5, 1.5], 0.0),
            action: Some(11),
            track_id: Some(1),
        };
        let labels = vec![ground, ground, person, person, ground, 0];
        let frame = SceneFrame { frame_id: 7, cloud, instances: vec![inst], point_labels: labels };
        (frame, tax)
    }

    #[test]
    fn valid_frame_has_no_violations() {
        let (frame, tax) = small_frame();
        assert_eq!(validate_frame(&frame, &tax), Vec::new());
    }

    #[test]
    fn shared_point_is_reported_with_its_index() {
        let (mut frame, tax) = small_frame();
        let mut second = frame.instances[0].clone();
        second.id = 1;
        second.point_indices = vec![3];
        frame.instances.push(second);
        let violations = validate_frame(&frame, &tax);
        assert!(
            violations.iter().any(|v| v.field == "instance.point_indices" && v.index == Some(3)),
            "expected a disjointness violation naming point 3, got {violations:?}"
        );
    }

    #[test]
    fn action_on_non_person_is_reported() {
        let (mut frame, tax) = small_frame();
        let box_class = tax.index_of("box").unwrap();
        frame.instances[0].class = box_class;
        // keep labels consistent so only the action rule fires
        frame.point_labels[2] = box_class;
        frame.point_labels[3] = box_class;
        let violations = validate_frame(&frame, &tax);
        assert_eq!(violations.len(), 1, "{violations:?}");
        assert_eq!(violations[0].field, "instance.action");
        assert_eq!(violations[0].index, Some(0));
    }

    #[test]
    fn person_missing_action_is_reported() {
        let (mut frame, tax) = small_frame();
        frame.instances[0].action = None;
        let violations = validate_frame(&frame, &tax);
        assert!(violations.iter().any(|v| v.field == "instance.action"));
    }

    #[test]
    fn histogram_sums_to_point_count() {
        let (frame, tax) = small_frame();
        let hist = semantic_label_histogram(&frame, &tax);
        assert_eq!(hist.iter().sum::<usize>(), frame.cloud.len());
        assert_eq!(hist[tax.index_of("ground").unwrap()], 3);
        assert_eq!(hist[tax.person_class()], 2);
        assert_eq!(hist[0], 1);
    }

    #[test]
    fn histogram_of_empty_frame_is_all_zeros() {
        let tax = SemanticTaxonomy::default_scene();
        let frame = SceneFrame {
            frame_id: 0,
            cloud: PointCloud::default(),
            instances: vec![],
            point_labels: vec![],
        };
        let hist = semantic_label_histogram(&frame, &tax);
        assert!(hist.iter().all(|&c| c == 0));
    }

    #[test]
    fn yaw_is_normalized_into_half_open_interval() {
        assert!((normalize_yaw(PI) - -PI).abs() < 1e-12);
        assert!((normalize_yaw(3.0 * PI) - -PI).abs() < 1e-12);
        assert!((normalize_yaw(-PI) - -PI).abs() < 1e-12);
        assert!((normalize_yaw(0.5) - 0.5).abs() < 1e-12);
        for k in -5..5 {
            let y = normalize_yaw(0.3 + 2.0 * PI * k as f64);
            assert!((y - 0.3).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicate_taxonomy_names_are_rejected() {
        let err = SemanticTaxonomy::new(&["unlabeled", "a", "a"], "a", &[]).unwrap_err();
        assert_eq!(err, TaxonomyError::DuplicateName("a".into()));
    }

    #[test]
    fn action_taxonomy_has_twelve_unique_names() {
        let tax = ActionTaxonomy::default();
        assert_eq!(tax.class_count(), 12);
        let mut names: Vec<_> = (0..12).map(|i| tax.name(i).unwrap()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), 12);
    }
}
