//! Canonical cloud to observed cloud: smoothing, FK, LBS, refinement.

use crate::error::{Error, Result};
use crate::hexplane::HexplaneField;
use crate::kinematics::{forward_kinematics, smooth_poses};
use crate::render::{render, CameraSpec, RenderedFrame};
use crate::scene::{GaussianCloud, PoseSequence, Skeleton};
use crate::skinning::{bind, lbs_deform, SkinBinding};

/// Everything that stays fixed while poses are edited or fitted.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cloud: GaussianCloud,
    pub skeleton: Skeleton,
    pub binding: SkinBinding,
    /// Half-window of the pose smoothing applied before skinning.
    pub smoothing_window: usize,
}

impl Scene {
    /// Binds `cloud` to `skeleton` with `k` clamped to the joint count.
    pub fn new(cloud: GaussianCloud, skeleton: Skeleton, k: usize, smoothing_window: usize) -> Result<Self> {
        let binding = bind(&cloud, &skeleton, k.min(skeleton.len()))?;
        Ok(Self {
            cloud,
            skeleton,
            binding,
            smoothing_window,
        })
    }

    pub fn check_poses(&self, poses: &PoseSequence) -> Result<()> {
        poses.validate_for(&self.skeleton)?;
        Ok(())
    }

    fn check_field(&self, poses: &PoseSequence, field: Option<&HexplaneField>) -> Result<()> {
        if let Some(f) = field {
            if f.frame_count() != poses.frame_count() {
                return Err(Error::DimensionMismatch {
                    context: "field frame count",
                    expected: poses.frame_count(),
                    found: f.frame_count(),
                });
            }
        }
        Ok(())
    }

    fn check_frame(poses: &PoseSequence, t: usize) -> Result<()> {
        if t >= poses.frame_count() {
            return Err(Error::OutOfRange {
                what: "frame",
                value: t as i64,
                min: 0,
                max: poses.frame_count() as i64 - 1,
            });
        }
        Ok(())
    }

    /// Effective poses fed to skinning.
    pub fn smoothed(&self, poses: &PoseSequence) -> PoseSequence {
        smooth_poses(poses, self.smoothing_window)
    }

    /// Rigidly deformed cloud at frame `t` of already smoothed poses.
    pub fn rigid_cloud(&self, smoothed: &PoseSequence, t: usize) -> Result<GaussianCloud> {
        Self::check_frame(smoothed, t)?;
        let fk = forward_kinematics(&self.skeleton, smoothed.frame(t), &smoothed.root_translation[t])?;
        lbs_deform(&self.cloud, &self.binding, &fk)
    }

    fn observed_from_smoothed(
        &self,
        smoothed: &PoseSequence,
        field: Option<&HexplaneField>,
        t: usize,
    ) -> Result<GaussianCloud> {
        let rigid = self.rigid_cloud(smoothed, t)?;
        match field {
            Some(f) => Ok(f.refine(&rigid, t as f64)?.0),
            None => Ok(rigid),
        }
    }

    /// Observed cloud at frame `t` for raw poses `poses`.
    pub fn observed_cloud(&self, poses: &PoseSequence, field: Option<&HexplaneField>, t: usize) -> Result<GaussianCloud> {
        self.check_poses(poses)?;
        self.check_field(poses, field)?;
        self.observed_from_smoothed(&self.smoothed(poses), field, t)
    }

    pub fn observed_sequence(
        &self,
        poses: &PoseSequence,
        field: Option<&HexplaneField>,
        frames: &[usize],
    ) -> Result<Vec<GaussianCloud>> {
        self.check_poses(poses)?;
        self.check_field(poses, field)?;
        let smoothed = self.smoothed(poses);
        frames.iter().map(|&t| self.observed_from_smoothed(&smoothed, field, t)).collect()
    }

    /// Posed joint positions at frame `t`, after smoothing.
    pub fn posed_joints(&self, poses: &PoseSequence, t: usize) -> Result<Vec<crate::math::Vec3>> {
        self.check_poses(poses)?;
        Self::check_frame(poses, t)?;
        let s = self.smoothed(poses);
        Ok(forward_kinematics(&self.skeleton, s.frame(t), &s.root_translation[t])?.posed_joints)
    }
}

/// Renders the observed cloud of each requested frame.
pub fn render_sequence(
    scene: &Scene,
    poses: &PoseSequence,
    field: Option<&HexplaneField>,
    camera: &CameraSpec,
    frames: &[usize],
) -> Result<Vec<RenderedFrame>> {
    camera.validate()?;
    scene
        .observed_sequence(poses, field, frames)?
        .iter()
        .map(|c| render(c, camera))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hexplane::FieldConfig;
    use crate::math::Vec3;
    use crate::scene::{make_synthetic_scene, Motion, SyntheticSpec, Template};

    fn pendulum_scene(frames: usize) -> (Scene, PoseSequence) {
        let spec = SyntheticSpec::pendulum(frames).splats_per_bone(60);
        let (cloud, skel, poses) = make_synthetic_scene(&spec).unwrap();
        (Scene::new(cloud, skel, 4, 1).unwrap(), poses)
    }

    #[test]
    fn identity_motion_frames_are_identical() {
        let spec = SyntheticSpec::new(Template::Star(2), 5, Motion::Identity).splats_per_bone(30);
        let (cloud, skel, poses) = make_synthetic_scene(&spec).unwrap();
        let scene = Scene::new(cloud.clone(), skel, 4, 1).unwrap();
        let cam = CameraSpec::orbit_degrees(Vec3::zeros(), 5.0, 30.0, 10.0, 24, 24).unwrap();
        let frames = render_sequence(&scene, &poses, None, &cam, &[0, 1, 2, 3, 4]).unwrap();
        let still = render(&cloud, &cam).unwrap();
        for f in &frames {
            assert_eq!(f, &frames[0]);
            assert!(f.squared_difference(&still) < 1e-20);
        }
    }

    #[test]
    fn pendulum_motion_is_visible() {
        let (scene, poses) = pendulum_scene(16);
        let cam = CameraSpec::orbit_degrees(Vec3::new(0.0, -1.0, 0.0), 5.0, 0.0, 0.0, 32, 32).unwrap();
        let f = render_sequence(&scene, &poses, None, &cam, &[0, 4]).unwrap();
        assert!(f[0].squared_difference(&f[1]) > 0.0);
    }

    #[test]
    fn zero_field_matches_rigid_path() {
        let (scene, poses) = pendulum_scene(8);
        let field = HexplaneField::for_cloud(&FieldConfig::default(), &scene.cloud, 8, 0.5).unwrap();
        for t in [0, 3, 7] {
            let a = scene.observed_cloud(&poses, Some(&field), t).unwrap();
            let b = scene.observed_cloud(&poses, None, t).unwrap();
            assert_eq!(a.positions, b.positions);
            assert_eq!(a.scales, b.scales);
        }
        let short = HexplaneField::for_cloud(&FieldConfig::default(), &scene.cloud, 4, 0.5).unwrap();
        assert!(scene.observed_cloud(&poses, Some(&short), 0).is_err());
        assert!(scene.observed_cloud(&poses, None, 8).is_err());
    }
}
