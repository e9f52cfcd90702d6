//! Canonical data types: splat clouds, skeletons, pose sequences and rigid
//! transforms, with validation and a synthetic fixture generator.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::error::{Error, Result};
use crate::math::{axis_angle, identity_quat, normalize, quat, quat_norm, Mat3, Quat, Vec3};

pub const UNIT_TOLERANCE: f64 = 1e-6;

/// First invariant found broken by [`validate`](GaussianCloud::validate).
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Violation {
    #[error("{what} is empty")]
    Empty { what: &'static str },
    #[error("{field} has length {found}, expected {expected}")]
    LengthMismatch {
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{field}[{index}] is not finite")]
    NonFinite { field: &'static str, index: usize },
    #[error("{field}[{index}] has norm {norm}, expected unit quaternion")]
    NonUnitQuaternion {
        field: &'static str,
        index: usize,
        norm: f64,
    },
    #[error("scale[{index}][{axis}] = {value} is not positive")]
    NonPositiveScale { index: usize, axis: usize, value: f64 },
    #[error("opacity[{index}] = {value} outside [0, 1]")]
    OpacityOutOfRange { index: usize, value: f64 },
    #[error("color[{index}][{channel}] = {value} outside [0, 1]")]
    ColorOutOfRange {
        index: usize,
        channel: usize,
        value: f64,
    },
    #[error("joint {joint} has parent {parent} outside the skeleton")]
    ParentOutOfRange { joint: usize, parent: usize },
    #[error("parent links contain a cycle through joints {nodes:?}")]
    Cycle { nodes: Vec<usize> },
    #[error("skeleton has no root")]
    NoRoot,
    #[error("skeleton has several roots {roots:?}")]
    MultipleRoots { roots: Vec<usize> },
    #[error("inverse bind of joint {joint} is off by {error}")]
    InverseBindMismatch { joint: usize, error: f64 },
    #[error("transform {index} is not a proper rigid motion")]
    NotRigid { index: usize },
    #[error("pose sequence covers {found} joints, skeleton has {expected}")]
    JointCountMismatch { expected: usize, found: usize },
}

pub type Validation = std::result::Result<(), Violation>;

/// Rotation plus translation, acting as `x -> rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn translation(t: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn is_rigid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
        orth <= tol && (r.determinant() - 1.0).abs() <= tol
    }

    /// Largest absolute entry of the difference of the 3x4 blocks.
    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        let dr = (self.rotation - other.rotation).abs().max();
        let dt = (self.translation - other.translation).abs().max();
        dr.max(dt)
    }
}

/// `N` splats in struct-of-arrays layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub positions: Vec<Vec3>,
    pub rotations: Vec<Quat>,
    pub scales: Vec<Vec3>,
    pub opacities: Vec<f64>,
    /// Flat RGB.
    pub colors: Vec<Vec3>,
}

impl GaussianCloud {
    pub fn new(
        positions: Vec<Vec3>,
        rotations: Vec<Quat>,
        scales: Vec<Vec3>,
        opacities: Vec<f64>,
        colors: Vec<Vec3>,
    ) -> Result<Self> {
        let cloud = Self {
            positions,
            rotations,
            scales,
            opacities,
            colors,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Uniform samples inside a ball, with random orientations and small
    /// isotropic scales. Values are exactly representable as `f32`.
    pub fn random_in_sphere(n: usize, radius: f64, seed: u64) -> Result<Self> {
        if radius <= 0.0 {
            return Err(Error::NonPositive { what: "radius", value: radius });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut positions = Vec::with_capacity(n);
        while positions.len() < n {
            let p = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if p.norm_squared() <= 1.0 {
                positions.push(f32_exact_vec(p * radius));
            }
        }
        let rotations = (0..n)
            .map(|_| {
                let q = random_unit_quat(&mut rng);
                quat(f32_exact(q.w), f32_exact(q.i), f32_exact(q.j), f32_exact(q.k))
            })
            .collect();
        let s = f32_exact(radius * 0.01);
        let scales = vec![Vec3::new(s, s, s); n];
        let opacities = (0..n).map(|_| f32_exact(rng.gen_range(0.1..1.0))).collect();
        let colors = (0..n).map(|_| f32_exact_vec(Vec3::new(rng.gen(), rng.gen(), rng.gen()))).collect();
        Self::new(positions, rotations, scales, opacities, colors)
    }

    pub fn validate(&self) -> Validation {
        let n = self.positions.len();
        if n == 0 {
            return Err(Violation::Empty { what: "cloud" });
        }
        let lengths = [
            ("rotations", self.rotations.len()),
            ("scales", self.scales.len()),
            ("opacities", self.opacities.len()),
            ("colors", self.colors.len()),
        ];
        for (field, found) in lengths {
            if found != n {
                return Err(Violation::LengthMismatch { field, expected: n, found });
            }
        }
        for i in 0..n {
            if !self.positions[i].iter().all(|v| v.is_finite()) {
                return Err(Violation::NonFinite { field: "positions", index: i });
            }
            let norm = quat_norm(&self.rotations[i]);
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Violation::NonUnitQuaternion {
                    field: "rotations",
                    index: i,
                    norm,
                });
            }
            for axis in 0..3 {
                let value = self.scales[i][axis];
                if !(value > 0.0) || !value.is_finite() {
                    return Err(Violation::NonPositiveScale { index: i, axis, value });
                }
            }
            let value = self.opacities[i];
            if !(0.0..=1.0).contains(&value) {
                return Err(Violation::OpacityOutOfRange { index: i, value });
            }
            for channel in 0..3 {
                let value = self.colors[i][channel];
                if !(0.0..=1.0).contains(&value) {
                    return Err(Violation::ColorOutOfRange { index: i, channel, value });
                }
            }
        }
        Ok(())
    }

    /// Axis-aligned bounds of the positions.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in &self.positions {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }
}

/// Rooted joint tree in rest pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    pub joints: Vec<Vec3>,
    /// `None` marks the root.
    pub parents: Vec<Option<usize>>,
    /// Inverse of each joint's rest-pose world transform.
    pub inverse_bind: Vec<RigidTransform>,
    /// Optional external joint names, preserved from imports.
    pub identifiers: Option<Vec<String>>,
}

impl Skeleton {
    /// Builds a skeleton with rest-pose inverse binds `T(-J_b)`.
    pub fn new(joints: Vec<Vec3>, parents: Vec<Option<usize>>) -> Result<Self> {
        let inverse_bind = joints.iter().map(|j| RigidTransform::translation(-j)).collect();
        let skeleton = Self {
            joints,
            parents,
            inverse_bind,
            identifiers: None,
        };
        skeleton.validate()?;
        Ok(skeleton)
    }

    pub fn with_identifiers(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.joints.len() {
            return Err(Violation::LengthMismatch {
                field: "identifiers",
                expected: self.joints.len(),
                found: ids.len(),
            }
            .into());
        }
        self.identifiers = Some(ids);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn root(&self) -> usize {
        self.parents
            .iter()
            .position(Option::is_none)
            .expect("validated skeleton has a root")
    }

    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.joints.len()];
        for (j, p) in self.parents.iter().enumerate() {
            if let Some(p) = p {
                out[*p].push(j);
            }
        }
        out
    }

    /// Breadth-first order from the root; parents precede children.
    pub fn topological_order(&self) -> Vec<usize> {
        let children = self.children();
        let mut order = Vec::with_capacity(self.joints.len());
        order.push(self.root());
        let mut head = 0;
        while head < order.len() {
            let j = order[head];
            order.extend(&children[j]);
            head += 1;
        }
        order
    }

    /// Undirected edges `(min, max)`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<_> = self
            .parents
            .iter()
            .enumerate()
            .filter_map(|(j, p)| p.map(|p| (p.min(j), p.max(j))))
            .collect();
        e.sort_unstable();
        e
    }

    pub fn joint_name(&self, b: usize) -> String {
        match &self.identifiers {
            Some(ids) => ids[b].clone(),
            None => format!("joint{b}"),
        }
    }

    pub fn validate(&self) -> Validation {
        let b = self.joints.len();
        if b == 0 {
            return Err(Violation::Empty { what: "skeleton" });
        }
        if self.parents.len() != b {
            return Err(Violation::LengthMismatch {
                field: "parents",
                expected: b,
                found: self.parents.len(),
            });
        }
        if self.inverse_bind.len() != b {
            return Err(Violation::LengthMismatch {
                field: "inverse_bind",
                expected: b,
                found: self.inverse_bind.len(),
            });
        }
        for (i, j) in self.joints.iter().enumerate() {
            if !j.iter().all(|v| v.is_finite()) {
                return Err(Violation::NonFinite { field: "joints", index: i });
            }
        }
        check_parent_links(&self.parents)?;
        for (joint, (inv, j)) in self.inverse_bind.iter().zip(&self.joints).enumerate() {
            if !inv.is_rigid(UNIT_TOLERANCE) {
                return Err(Violation::NotRigid { index: joint });
            }
            // Rest world transform has identity rotation at the joint.
            let composed = RigidTransform::translation(*j).compose(inv);
            let error = composed.max_abs_diff(&RigidTransform::identity());
            if error > UNIT_TOLERANCE {
                return Err(Violation::InverseBindMismatch { joint, error });
            }
        }
        Ok(())
    }
}

/// Checks that parent links form a single rooted tree.
pub fn check_parent_links(parents: &[Option<usize>]) -> Validation {
    let b = parents.len();
    for (joint, p) in parents.iter().enumerate() {
        if let Some(p) = *p {
            if p >= b {
                return Err(Violation::ParentOutOfRange { joint, parent: p });
            }
        }
    }
    // 0 = unvisited, 1 = on current walk, 2 = known to reach a root.
    let mut state = vec![0u8; b];
    for start in 0..b {
        let mut path = Vec::new();
        let mut cur = start;
        loop {
            match state[cur] {
                2 => break,
                1 => {
                    let at = path.iter().position(|&n| n == cur).unwrap();
                    let mut nodes = path[at..].to_vec();
                    nodes.sort_unstable();
                    return Err(Violation::Cycle { nodes });
                }
                _ => {}
            }
            state[cur] = 1;
            path.push(cur);
            match parents[cur] {
                Some(p) => cur = p,
                None => break,
            }
        }
        for n in path {
            state[n] = 2;
        }
    }
    let roots: Vec<usize> = (0..b).filter(|&j| parents[j].is_none()).collect();
    match roots.len() {
        0 => Err(Violation::NoRoot),
        1 => Ok(()),
        _ => Err(Violation::MultipleRoots { roots }),
    }
}

/// Local joint rotations for `frames` frames, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    theta: Vec<Quat>,
    pub root_translation: Vec<Vec3>,
    frames: usize,
    joints: usize,
}

impl PoseSequence {
    pub fn identity(frames: usize, joints: usize) -> Self {
        Self {
            theta: vec![identity_quat(); frames * joints],
            root_translation: vec![Vec3::zeros(); frames],
            frames,
            joints,
        }
    }

    pub fn from_parts(
        frames: usize,
        joints: usize,
        theta: Vec<Quat>,
        root_translation: Vec<Vec3>,
    ) -> Result<Self> {
        let poses = Self::from_parts_unchecked(frames, joints, theta, root_translation)?;
        poses.validate()?;
        Ok(poses)
    }

    /// Length checks only; quaternions may be off the unit sphere (used for
    /// gradient probing and decoding).
    pub fn from_parts_unchecked(
        frames: usize,
        joints: usize,
        theta: Vec<Quat>,
        root_translation: Vec<Vec3>,
    ) -> Result<Self> {
        if theta.len() != frames * joints {
            return Err(Error::DimensionMismatch {
                context: "pose theta",
                expected: frames * joints,
                found: theta.len(),
            });
        }
        if root_translation.len() != frames {
            return Err(Error::DimensionMismatch {
                context: "pose root translation",
                expected: frames,
                found: root_translation.len(),
            });
        }
        Ok(Self {
            theta,
            root_translation,
            frames,
            joints,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frames
    }

    pub fn joint_count(&self) -> usize {
        self.joints
    }

    pub fn get(&self, t: usize, b: usize) -> &Quat {
        &self.theta[t * self.joints + b]
    }

    pub fn set(&mut self, t: usize, b: usize, q: Quat) {
        self.theta[t * self.joints + b] = q;
    }

    pub fn frame(&self, t: usize) -> &[Quat] {
        &self.theta[t * self.joints..(t + 1) * self.joints]
    }

    pub fn theta(&self) -> &[Quat] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [Quat] {
        &mut self.theta
    }

    pub fn renormalize(&mut self) {
        for q in &mut self.theta {
            *q = normalize(q);
        }
    }

    pub fn validate(&self) -> Validation {
        if self.frames == 0 {
            return Err(Violation::Empty { what: "pose sequence" });
        }
        for (index, q) in self.theta.iter().enumerate() {
            let norm = quat_norm(q);
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Violation::NonUnitQuaternion { field: "theta", index, norm });
            }
        }
        for (index, t) in self.root_translation.iter().enumerate() {
            if !t.iter().all(|v| v.is_finite()) {
                return Err(Violation::NonFinite { field: "root_translation", index });
            }
        }
        Ok(())
    }

    pub fn validate_for(&self, skeleton: &Skeleton) -> Validation {
        if self.joints != skeleton.len() {
            return Err(Violation::JointCountMismatch {
                expected: skeleton.len(),
                found: self.joints,
            });
        }
        self.validate()
    }
}

pub fn random_unit_quat<R: Rng>(rng: &mut R) -> Quat {
    loop {
        let q = quat(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = quat_norm(&q);
        if n > 0.1 && n <= 1.0 {
            return q / n;
        }
    }
}

/// Articulated fixture shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Template {
    /// `k` unit bones along +x; `k + 1` joints.
    Chain(usize),
    /// Root at the origin with `k` two-bone arms in the xy-plane.
    Star(usize),
    /// A static mount bone and a swinging bone hanging along -y.
    Pendulum,
}

impl FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownTemplate(s.to_string());
        if s == "pendulum" {
            return Ok(Template::Pendulum);
        }
        let (kind, k) = s.split_once('-').ok_or_else(unknown)?;
        let k: usize = k.parse().map_err(|_| unknown())?;
        if k == 0 {
            return Err(Error::NonPositive { what: "template size", value: 0.0 });
        }
        match kind {
            "chain" => Ok(Template::Chain(k)),
            "star" => Ok(Template::Star(k)),
            _ => Err(unknown()),
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Template::Chain(k) => write!(f, "chain-{k}"),
            Template::Star(k) => write!(f, "star-{k}"),
            Template::Pendulum => write!(f, "pendulum"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Motion {
    Identity,
    /// Every interior joint swings about +z by `amplitude * sin(2πt/T)`.
    Swing { amplitude: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub template: Template,
    pub bone_length: f64,
    pub splats_per_bone: usize,
    pub frames: usize,
    pub motion: Motion,
    /// Splats are scattered within this fraction of the bone length
    /// around each bone axis.
    pub radius_fraction: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(template: Template, frames: usize, motion: Motion) -> Self {
        Self {
            template,
            bone_length: 1.0,
            splats_per_bone: 100,
            frames,
            motion,
            radius_fraction: 0.1,
            seed: 0,
        }
    }

    /// The default pendulum clip: 32 frames, 30 degree swing.
    pub fn pendulum(frames: usize) -> Self {
        Self::new(Template::Pendulum, frames, Motion::Swing { amplitude: 30f64.to_radians() })
    }

    pub fn splats_per_bone(mut self, n: usize) -> Self {
        self.splats_per_bone = n;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn rest_joints(&self) -> (Vec<Vec3>, Vec<Option<usize>>) {
        let l = self.bone_length;
        match self.template {
            Template::Chain(k) => {
                let joints = (0..=k).map(|i| Vec3::new(i as f64 * l, 0.0, 0.0)).collect();
                let parents = (0..=k).map(|i| i.checked_sub(1)).collect();
                (joints, parents)
            }
            Template::Star(k) => {
                let mut joints = vec![Vec3::zeros()];
                let mut parents = vec![None];
                for a in 0..k {
                    let phi = 2.0 * PI * a as f64 / k as f64;
                    let dir = Vec3::new(phi.cos(), phi.sin(), 0.0);
                    joints.push(dir * l);
                    parents.push(Some(0));
                    joints.push(dir * 2.0 * l);
                    parents.push(Some(joints.len() - 2));
                }
                (joints, parents)
            }
            Template::Pendulum => (
                vec![Vec3::zeros(), Vec3::new(0.0, -l, 0.0), Vec3::new(0.0, -2.0 * l, 0.0)],
                vec![None, Some(0), Some(1)],
            ),
        }
    }

    /// Every generated splat lies within this distance of the origin.
    pub fn bounding_radius(&self) -> f64 {
        let (joints, _) = self.rest_joints();
        let reach = joints.iter().map(|j| j.norm()).fold(0.0, f64::max);
        reach + self.radius_fraction * self.bone_length + 1e-5
    }

    fn validate(&self) -> Result<()> {
        if !(self.bone_length > 0.0) {
            return Err(Error::NonPositive { what: "bone length", value: self.bone_length });
        }
        if self.splats_per_bone == 0 {
            return Err(Error::NonPositive { what: "splats per bone", value: 0.0 });
        }
        if self.frames == 0 {
            return Err(Error::NonPositive { what: "frame count", value: 0.0 });
        }
        if !(self.radius_fraction >= 0.0) {
            return Err(Error::NonPositive { what: "radius fraction", value: self.radius_fraction });
        }
        Ok(())
    }
}

/// Rounds through `f32` so the value survives the on-disk cloud format.
fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

fn f32_exact_vec(v: Vec3) -> Vec3 {
    v.map(f32_exact)
}

/// Builds a consistent `(cloud, skeleton, poses)` fixture. Cloud values are
/// exactly representable as `f32`.
pub fn make_synthetic_scene(spec: &SyntheticSpec) -> Result<(GaussianCloud, Skeleton, PoseSequence)> {
    spec.validate()?;
    let (joints, parents) = spec.rest_joints();
    let skeleton = Skeleton::new(joints.clone(), parents.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let radius = spec.radius_fraction * spec.bone_length;
    let scale = 0.05 * spec.bone_length;
    let bones: Vec<(usize, usize)> = parents
        .iter()
        .enumerate()
        .filter_map(|(j, p)| p.map(|p| (p, j)))
        .collect();
    let n = bones.len() * spec.splats_per_bone;
    let mut positions = Vec::with_capacity(n);
    let mut rotations = Vec::with_capacity(n);
    let mut scales = Vec::with_capacity(n);
    let mut opacities = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    for (bi, &(a, b)) in bones.iter().enumerate() {
        let (ja, jb) = (joints[a], joints[b]);
        let axis = (jb - ja).normalize();
        let helper = if axis.z.abs() < 0.9 { Vec3::z() } else { Vec3::x() };
        let u = axis.cross(&helper).normalize();
        let v = axis.cross(&u);
        let hue = bi as f64 / bones.len().max(1) as f64;
        for _ in 0..spec.splats_per_bone {
            let s: f64 = rng.gen();
            let r = radius * rng.gen::<f64>().sqrt();
            let phi = rng.gen_range(0.0..2.0 * PI);
            let p = ja + (jb - ja) * s + (u * phi.cos() + v * phi.sin()) * r;
            positions.push(f32_exact_vec(p));
            let q = random_unit_quat(&mut rng);
            rotations.push(quat(f32_exact(q.w), f32_exact(q.i), f32_exact(q.j), f32_exact(q.k)));
            let sc = scale * rng.gen_range(0.6..1.4);
            scales.push(f32_exact_vec(Vec3::new(sc, sc * rng.gen_range(0.5..1.0), sc)));
            opacities.push(f32_exact(rng.gen_range(0.5..1.0)));
            colors.push(f32_exact_vec(Vec3::new(
                0.2 + 0.6 * hue,
                rng.gen_range(0.2..0.8),
                0.8 - 0.6 * hue,
            )));
        }
    }
    let cloud = GaussianCloud::new(positions, rotations, scales, opacities, colors)?;

    let b = joints.len();
    let mut poses = PoseSequence::identity(spec.frames, b);
    if let Motion::Swing { amplitude } = spec.motion {
        let children = skeleton.children();
        let interior: Vec<usize> = (0..b)
            .filter(|&j| parents[j].is_some() && !children[j].is_empty())
            .collect();
        for t in 0..spec.frames {
            let angle = swing_angle(amplitude, t, spec.frames);
            for &j in &interior {
                poses.set(t, j, axis_angle(Vec3::z(), angle));
            }
        }
    }
    Ok((cloud, skeleton, poses))
}

/// Generator angle of a swinging joint at frame `t` of `frames`.
pub fn swing_angle(amplitude: f64, t: usize, frames: usize) -> f64 {
    amplitude * (2.0 * PI * t as f64 / frames as f64).sin()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain2_identity() -> SyntheticSpec {
        SyntheticSpec::new(Template::Chain(2), 1, Motion::Identity)
    }

    #[test]
    fn chain2_identity_fixture() {
        let (cloud, skeleton, poses) = make_synthetic_scene(&chain2_identity()).unwrap();
        assert_eq!(cloud.len(), 200);
        assert_eq!(skeleton.len(), 3);
        assert_eq!(poses.frame_count(), 1);
        assert!(poses.theta().iter().all(|q| *q == identity_quat()));
        assert!(poses.root_translation.iter().all(|t| *t == Vec3::zeros()));
    }

    #[test]
    fn pendulum_has_requested_frames() {
        let (_, skeleton, poses) = make_synthetic_scene(&SyntheticSpec::pendulum(32)).unwrap();
        assert_eq!(poses.frame_count(), 32);
        assert_eq!(skeleton.len(), 3);
        poses.validate_for(&skeleton).unwrap();
    }

    /// Axis-angle to quaternion written independently of `math::axis_angle`.
    fn reference_z_quat(deg: f64) -> [f64; 4] {
        let half = deg.to_radians() / 2.0;
        [half.cos(), 0.0, 0.0, half.sin()]
    }

    #[test]
    fn chain2_swing_matches_axis_angle() {
        let frames = 12;
        let spec = SyntheticSpec::new(Template::Chain(2), frames, Motion::Swing { amplitude: 45f64.to_radians() });
        let (_, _, poses) = make_synthetic_scene(&spec).unwrap();
        for t in 0..frames {
            let deg = 45.0 * (2.0 * PI * t as f64 / frames as f64).sin();
            let expect = reference_z_quat(deg);
            let q = poses.get(t, 1);
            let got = [q.w, q.i, q.j, q.k];
            for c in 0..4 {
                assert!((got[c] - expect[c]).abs() < 1e-12, "frame {t}");
            }
            assert_eq!(*poses.get(t, 0), identity_quat());
            assert_eq!(*poses.get(t, 2), identity_quat());
        }
    }

    #[test]
    fn cloud_within_bounding_radius() {
        for template in [Template::Chain(3), Template::Star(4), Template::Pendulum] {
            let spec = SyntheticSpec::new(template, 4, Motion::Identity);
            let (cloud, _, _) = make_synthetic_scene(&spec).unwrap();
            let r = spec.bounding_radius();
            assert!(cloud.positions.iter().all(|p| p.norm() <= r), "{template}");
        }
    }

    #[test]
    fn template_parsing() {
        assert_eq!("chain-3".parse::<Template>().unwrap(), Template::Chain(3));
        assert_eq!("star-5".parse::<Template>().unwrap(), Template::Star(5));
        assert_eq!("pendulum".parse::<Template>().unwrap(), Template::Pendulum);
        assert!(matches!("tree-2".parse::<Template>(), Err(Error::UnknownTemplate(_))));
        assert!("chain-x".parse::<Template>().is_err());
        assert!("chain-0".parse::<Template>().is_err());
    }

    #[test]
    fn rejects_non_positive_dimensions() {
        let mut spec = chain2_identity();
        spec.bone_length = 0.0;
        assert!(matches!(make_synthetic_scene(&spec), Err(Error::NonPositive { .. })));
        let spec = chain2_identity().splats_per_bone(0);
        assert!(make_synthetic_scene(&spec).is_err());
        let mut spec = chain2_identity();
        spec.frames = 0;
        assert!(make_synthetic_scene(&spec).is_err());
    }

    #[test]
    fn sphere_cloud_is_valid() {
        let cloud = GaussianCloud::random_in_sphere(10_000, 2.0, 7).unwrap();
        assert_eq!(cloud.len(), 10_000);
        assert_eq!(cloud.validate(), Ok(()));
        assert!(cloud.positions.iter().all(|p| p.norm() <= 2.0));
    }

    #[test]
    fn zero_norm_quaternion_is_reported() {
        let mut cloud = GaussianCloud::random_in_sphere(10, 1.0, 1).unwrap();
        cloud.rotations[6] = quat(0.0, 0.0, 0.0, 0.0);
        assert!(matches!(
            cloud.validate(),
            Err(Violation::NonUnitQuaternion { index: 6, .. })
        ));
    }

    #[test]
    fn two_cycle_is_reported_with_both_nodes() {
        let parents = vec![None, Some(2), Some(1), Some(0)];
        assert_eq!(check_parent_links(&parents), Err(Violation::Cycle { nodes: vec![1, 2] }));
        let joints = vec![Vec3::zeros(); 4];
        assert!(Skeleton::new(joints, parents).is_err());
    }

    #[test]
    fn forests_and_rootless_skeletons_rejected() {
        assert_eq!(
            check_parent_links(&[None, Some(0), None]),
            Err(Violation::MultipleRoots { roots: vec![0, 2] })
        );
        assert_eq!(
            check_parent_links(&[Some(0)]),
            Err(Violation::Cycle { nodes: vec![0] })
        );
        assert_eq!(
            check_parent_links(&[None, Some(7)]),
            Err(Violation::ParentOutOfRange { joint: 1, parent: 7 })
        );
    }

    #[test]
    fn other_cloud_violations() {
        let base = GaussianCloud::random_in_sphere(4, 1.0, 3).unwrap();
        let mut c = base.clone();
        c.scales[2].y = 0.0;
        assert!(matches!(c.validate(), Err(Violation::NonPositiveScale { index: 2, axis: 1, .. })));
        let mut c = base.clone();
        c.opacities[1] = 1.5;
        assert!(matches!(c.validate(), Err(Violation::OpacityOutOfRange { index: 1, .. })));
        let mut c = base.clone();
        c.colors.pop();
        assert!(matches!(c.validate(), Err(Violation::LengthMismatch { field: "colors", .. })));
    }

    #[test]
    fn inverse_bind_mismatch_detected() {
        let mut s = Skeleton::new(vec![Vec3::zeros(), Vec3::x()], vec![None, Some(0)]).unwrap();
        s.inverse_bind[1] = RigidTransform::identity();
        assert!(matches!(s.validate(), Err(Violation::InverseBindMismatch { joint: 1, .. })));
    }

    #[test]
    fn topological_order_puts_parents_first() {
        let s = Skeleton::new(vec![Vec3::zeros(); 5], vec![Some(3), Some(0), Some(3), None, Some(2)]).unwrap();
        let order = s.topological_order();
        assert_eq!(order[0], 3);
        let pos: Vec<usize> = (0..5).map(|j| order.iter().position(|&o| o == j).unwrap()).collect();
        for (j, p) in s.parents.iter().enumerate() {
            if let Some(p) = p {
                assert!(pos[*p] < pos[j]);
            }
        }
    }
}
