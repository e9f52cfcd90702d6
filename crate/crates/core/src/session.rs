//! Editing session: working poses, pose edits and undo.
//!
//! Edits act on raw poses. Renders pass through the scene's smoothing
//! window, so an edit at frame `t` also invalidates frames within the window
//! of the edited range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hexplane::HexplaneField;
use crate::io::{export_bvh, SceneDocument, Settings};
use crate::math::{quat_from_array, quat_norm, quat_to_array, slerp, Quat, Vec3};
use crate::pipeline::Scene;
use crate::render::{render, CameraSpec, RenderedFrame};
use crate::scene::{PoseSequence, UNIT_TOLERANCE};
use crate::skinning::DEFAULT_K;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BlendMode {
    /// Every frame in the range receives the new rotation.
    #[default]
    Replace,
    /// Slerp weight ramps 0 at the range ends to 1 at the edited frame.
    LinearFalloff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Propagation {
    pub start: usize,
    pub end: usize,
    #[serde(default)]
    pub mode: BlendMode,
}

/// Sets the local rotation of joint `joint` at frame `frame`, optionally
/// blending it over a frame range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditCommand {
    pub frame: usize,
    pub joint: usize,
    /// Unit quaternion, wxyz.
    #[serde(with = "wxyz")]
    pub rotation: Quat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub propagate: Option<Propagation>,
}

mod wxyz {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(q: &Quat, s: S) -> std::result::Result<S::Ok, S::Error> {
        quat_to_array(q).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Quat, D::Error> {
        Ok(quat_from_array(<[f64; 4]>::deserialize(d)?))
    }
}

fn out_of_range(what: &'static str, value: usize, max: usize) -> Error {
    Error::OutOfRange {
        what,
        value: value as i64,
        min: 0,
        max: max as i64,
    }
}

impl EditCommand {
    pub fn new(frame: usize, joint: usize, rotation: Quat) -> Self {
        Self {
            frame,
            joint,
            rotation,
            propagate: None,
        }
    }

    pub fn over(mut self, start: usize, end: usize, mode: BlendMode) -> Self {
        self.propagate = Some(Propagation { start, end, mode });
        self
    }

    pub fn validate(&self, frames: usize, joints: usize) -> Result<()> {
        if self.frame >= frames {
            return Err(out_of_range("frame", self.frame, frames.saturating_sub(1)));
        }
        if self.joint >= joints {
            return Err(out_of_range("joint", self.joint, joints.saturating_sub(1)));
        }
        let n = quat_norm(&self.rotation);
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Invalid(crate::scene::Violation::NonUnitQuaternion {
                field: "edit rotation",
                index: 0,
                norm: n,
            }));
        }
        if let Some(p) = &self.propagate {
            if p.end >= frames {
                return Err(out_of_range("range end", p.end, frames - 1));
            }
            if !(p.start <= self.frame && self.frame <= p.end) {
                return Err(out_of_range("range start", p.start, self.frame));
            }
        }
        Ok(())
    }

    /// Frames whose raw rotation this edit may change, inclusive.
    pub fn span(&self) -> (usize, usize) {
        self.propagate.map_or((self.frame, self.frame), |p| (p.start, p.end))
    }

    /// Blend weight at frame `s` within the span.
    pub fn weight(&self, s: usize) -> f64 {
        match self.propagate {
            None => 1.0,
            Some(Propagation {
                mode: BlendMode::Replace,
                ..
            }) => 1.0,
            Some(Propagation {
                start,
                end,
                mode: BlendMode::LinearFalloff,
            }) => {
                let t = self.frame;
                if s == t {
                    1.0
                } else if s < t {
                    (s - start) as f64 / (t - start) as f64
                } else {
                    (end - s) as f64 / (end - t) as f64
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct AppliedEdit {
    command: EditCommand,
    /// Raw rotations the edit overwrote, by frame.
    previous: Vec<(usize, Quat)>,
}

/// Scene summary counts and topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub splat_count: usize,
    pub joint_count: usize,
    pub frame_count: usize,
    pub parents: Vec<Option<usize>>,
    pub identifiers: Option<Vec<String>>,
    pub rest_joints: Vec<[f64; 3]>,
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    pub smoothing_window: usize,
    pub has_field: bool,
    pub undo_depth: usize,
    pub dirty: bool,
}

/// A loaded document plus a working copy of its poses.
#[derive(Debug, Clone)]
pub struct SessionState {
    document: SceneDocument,
    scene: Scene,
    field: Option<HexplaneField>,
    loaded_poses: PoseSequence,
    working: PoseSequence,
    undo: Vec<AppliedEdit>,
    /// Undo depth matching the last saved or loaded state, if still reachable.
    clean_depth: Option<usize>,
}

impl SessionState {
    /// Needs a cloud and skeleton. Missing poses start as the identity over
    /// the field's frame count, else the targets', else one frame.
    pub fn new(document: SceneDocument) -> Result<Self> {
        document.validate()?;
        let cloud = document.cloud.clone().ok_or(Error::MissingComponent("a cloud section"))?;
        let skeleton = document.skeleton.clone().ok_or(Error::MissingComponent("a skeleton section"))?;
        let settings = document.settings.unwrap_or(Settings {
            skin_k: DEFAULT_K as u32,
            smoothing_window: 1,
        });
        let frames = match (&document.field, &document.targets) {
            (Some(f), _) => f.frame_count(),
            (None, Some(t)) if !t.frames.is_empty() => t.frames.len(),
            _ => 1,
        };
        let poses = document
            .poses
            .clone()
            .unwrap_or_else(|| PoseSequence::identity(frames, skeleton.len()));
        let field = document.field.clone();
        if let Some(f) = &field {
            if f.frame_count() != poses.frame_count() {
                return Err(Error::DimensionMismatch {
                    context: "field frame count",
                    expected: poses.frame_count(),
                    found: f.frame_count(),
                });
            }
        }
        let scene = Scene::new(cloud, skeleton, settings.skin_k as usize, settings.smoothing_window as usize)?;
        Ok(Self {
            document,
            scene,
            field,
            loaded_poses: poses.clone(),
            working: poses,
            undo: Vec::new(),
            clean_depth: Some(0),
        })
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn field(&self) -> Option<&HexplaneField> {
        self.field.as_ref()
    }

    pub fn poses(&self) -> &PoseSequence {
        &self.working
    }

    pub fn loaded_poses(&self) -> &PoseSequence {
        &self.loaded_poses
    }

    pub fn undo_depth(&self) -> usize {
        self.undo.len()
    }

    pub fn is_dirty(&self) -> bool {
        self.clean_depth != Some(self.undo.len())
    }

    pub fn history(&self) -> Vec<EditCommand> {
        self.undo.iter().map(|e| e.command).collect()
    }

    pub fn frame_count(&self) -> usize {
        self.working.frame_count()
    }

    /// Frames whose render an edit over raw frames `[lo, hi]` can change.
    fn invalidated(&self, (lo, hi): (usize, usize)) -> Vec<usize> {
        let w = self.scene.smoothing_window;
        (lo.saturating_sub(w)..=(hi + w).min(self.frame_count() - 1)).collect()
    }

    fn apply_to(poses: &mut PoseSequence, cmd: &EditCommand) -> Vec<(usize, Quat)> {
        let (lo, hi) = cmd.span();
        let mut previous = Vec::with_capacity(hi - lo + 1);
        for s in lo..=hi {
            let old = *poses.get(s, cmd.joint);
            previous.push((s, old));
            let w = cmd.weight(s);
            let q = if w == 1.0 {
                cmd.rotation
            } else if w == 0.0 {
                old
            } else {
                slerp(&old, &cmd.rotation, w)
            };
            poses.set(s, cmd.joint, q);
        }
        previous
    }

    /// Applies `cmd` and returns the frames whose render may have changed.
    pub fn apply_edit(&mut self, cmd: EditCommand) -> Result<Vec<usize>> {
        cmd.validate(self.frame_count(), self.working.joint_count())?;
        let previous = Self::apply_to(&mut self.working, &cmd);
        if self.clean_depth.is_some_and(|d| d > self.undo.len()) {
            self.clean_depth = None;
        }
        self.undo.push(AppliedEdit { command: cmd, previous });
        Ok(self.invalidated(cmd.span()))
    }

    /// Reverts the latest edit; `None` when there is nothing to undo.
    pub fn undo(&mut self) -> Option<Vec<usize>> {
        let e = self.undo.pop()?;
        for &(s, q) in &e.previous {
            self.working.set(s, e.command.joint, q);
        }
        Some(self.invalidated(e.command.span()))
    }

    /// Re-applies the undo stack to the loaded poses.
    pub fn replay(&self) -> PoseSequence {
        let mut p = self.loaded_poses.clone();
        for e in &self.undo {
            Self::apply_to(&mut p, &e.command);
        }
        p
    }

    fn check_frame(&self, t: usize) -> Result<()> {
        if t >= self.frame_count() {
            return Err(out_of_range("frame", t, self.frame_count() - 1));
        }
        Ok(())
    }

    pub fn render_frame(&self, t: usize, camera: &CameraSpec) -> Result<RenderedFrame> {
        self.check_frame(t)?;
        camera.validate()?;
        render(&self.scene.observed_cloud(&self.working, self.field.as_ref(), t)?, camera)
    }

    pub fn posed_joints(&self, t: usize) -> Result<Vec<Vec3>> {
        self.scene.posed_joints(&self.working, t)
    }

    /// Pixel coordinates of the posed joints; `None` behind the near plane.
    pub fn joint_projection(&self, t: usize, camera: &CameraSpec) -> Result<Vec<Option<[f64; 2]>>> {
        let proj = camera.projection()?;
        Ok(self
            .posed_joints(t)?
            .iter()
            .map(|p| proj.project(p).map(|v| [v.x, v.y]))
            .collect())
    }

    pub fn summary(&self) -> SceneSummary {
        let (lo, hi) = self.scene.cloud.bounds();
        let sk = &self.scene.skeleton;
        SceneSummary {
            splat_count: self.scene.cloud.len(),
            joint_count: sk.len(),
            frame_count: self.frame_count(),
            parents: sk.parents.clone(),
            identifiers: sk.identifiers.clone(),
            rest_joints: sk.joints.iter().map(|&j| j.into()).collect(),
            bounds_min: lo.into(),
            bounds_max: hi.into(),
            smoothing_window: self.scene.smoothing_window,
            has_field: self.field.is_some(),
            undo_depth: self.undo.len(),
            dirty: self.is_dirty(),
        }
    }

    /// The loaded document with the working poses in place.
    pub fn document(&self) -> SceneDocument {
        let mut d = self.document.clone();
        d.poses = Some(self.working.clone());
        d
    }

    /// Flags the state as differing from what is on disk, e.g. after the
    /// poses were replaced by a fit.
    pub fn mark_modified(&mut self) {
        self.clean_depth = None;
    }

    pub fn mark_saved(&mut self) {
        self.clean_depth = Some(self.undo.len());
    }

    /// BVH of the effective (smoothed) working poses.
    pub fn export_bvh(&self, fps: f64) -> Result<String> {
        if !(fps > 0.0) {
            return Err(Error::NonPositive { what: "fps", value: fps });
        }
        export_bvh(&self.scene.skeleton, &self.scene.smoothed(&self.working), 1.0 / fps)
    }
}
