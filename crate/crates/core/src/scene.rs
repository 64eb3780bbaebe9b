//! Per-object point sets, physics and anchors at one time index.

use serde::{Deserialize, Serialize};

use crate::geometry::{apply_rigid, farthest_point_sample_with, GeometryError, RigidTransform, TieBreak, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Physics {
    pub mass: f64,
    pub friction: f64,
    pub restitution: f64,
}

impl Physics {
    pub fn as_array(&self) -> [f64; 3] {
        [self.mass, self.friction, self.restitution]
    }
}

/// Static description of one object plus its current vertex positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectState {
    /// Full-resolution reference geometry (first frame), never modified.
    pub reference: Vec<Vec3>,
    /// Current positions of every reference vertex.
    pub vertices: Vec<Vec3>,
    pub physics: Physics,
    /// `false` marks a padding slot.
    pub valid: bool,
    /// Indices of the reference vertices visible to the model.
    pub observed: Vec<usize>,
    /// Anchor vertex indices (into `reference`), a subset of `observed`.
    pub anchors: Vec<usize>,
    /// Farthest-point order of the observed vertices, as positions in
    /// `observed`; prefixes give the pooling levels.
    pub pyramid: Vec<usize>,
}

impl ObjectState {
    /// A fully observed object at its reference pose.
    pub fn new(reference: Vec<Vec3>, physics: Physics, anchors: usize) -> Result<Self, GeometryError> {
        let observed: Vec<usize> = (0..reference.len()).collect();
        Self::with_observed(reference.clone(), reference, physics, observed, anchors)
    }

    pub fn with_observed(
        reference: Vec<Vec3>,
        vertices: Vec<Vec3>,
        physics: Physics,
        observed: Vec<usize>,
        anchors: usize,
    ) -> Result<Self, GeometryError> {
        Self::with_observed_tie(reference, vertices, physics, observed, anchors, TieBreak::Lexicographic)
    }

    /// As [`ObjectState::with_observed`] with an explicit FPS tie rule.
    pub fn with_observed_tie(
        reference: Vec<Vec3>,
        vertices: Vec<Vec3>,
        physics: Physics,
        observed: Vec<usize>,
        anchors: usize,
        tie: TieBreak,
    ) -> Result<Self, GeometryError> {
        let pts: Vec<Vec3> = observed.iter().map(|&i| reference[i]).collect();
        let pyramid = farthest_point_sample_with(&pts, pts.len(), tie)?;
        let anchors = pyramid[..anchors.min(pts.len())].iter().map(|&k| observed[k]).collect();
        Ok(Self {
            reference,
            vertices,
            physics,
            valid: true,
            observed,
            anchors,
            pyramid,
        })
    }

    /// A padding slot: a single vertex at the origin, never attended to.
    pub fn padding() -> Self {
        Self {
            reference: vec![[0.0; 3]],
            vertices: vec![[0.0; 3]],
            physics: Physics {
                mass: 0.0,
                friction: 0.0,
                restitution: 0.0,
            },
            valid: false,
            observed: vec![0],
            anchors: vec![],
            pyramid: vec![0],
        }
    }

    pub fn observed_vertices(&self) -> Vec<Vec3> {
        self.observed.iter().map(|&i| self.vertices[i]).collect()
    }

    pub fn observed_reference(&self) -> Vec<Vec3> {
        self.observed.iter().map(|&i| self.reference[i]).collect()
    }

    pub fn anchor_positions(&self) -> Vec<Vec3> {
        self.anchors.iter().map(|&i| self.vertices[i]).collect()
    }

    pub fn reference_anchors(&self) -> Vec<Vec3> {
        self.anchors.iter().map(|&i| self.reference[i]).collect()
    }

    /// Same object moved to `transform · reference`.
    pub fn posed(&self, transform: &RigidTransform) -> Self {
        Self {
            vertices: apply_rigid(transform, &self.reference),
            ..self.clone()
        }
    }
}

/// All objects of a scene at one time index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneState {
    pub objects: Vec<ObjectState>,
}

impl SceneState {
    pub fn new(objects: Vec<ObjectState>) -> Self {
        Self { objects }
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.objects.iter().filter(|o| o.valid).count()
    }

    /// Same objects posed by one transform each.
    pub fn posed(&self, transforms: &[RigidTransform]) -> Self {
        Self {
            objects: self
                .objects
                .iter()
                .zip(transforms)
                .map(|(o, tf)| if o.valid { o.posed(tf) } else { o.clone() })
                .collect(),
        }
    }

    /// Objects reordered so that slot `i` holds object `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            objects: perm.iter().map(|&i| self.objects[i].clone()).collect(),
        }
    }
}
