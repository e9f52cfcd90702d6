//! Skeleton-driven animation of 3D Gaussian splat clouds.
//!
//! The pipeline deforms a canonical cloud by linear blend skinning over a
//! kinematic tree, optionally refines the result with a factorized 4D
//! feature field, renders it with a software splatter and fits poses and
//! field parameters to per-frame targets by gradient descent.

pub mod error;
pub mod hexplane;
pub mod io;
pub mod kinematics;
pub mod math;
pub mod optimize;
pub mod pipeline;
pub mod render;
pub mod scene;
pub mod session;
pub mod skeletonize;
pub mod skinning;

pub use error::{Error, Result};
pub use hexplane::{DecoderWeights, FieldConfig, GaussianDeltas, HexplaneField};
pub use kinematics::{forward_kinematics, smooth_poses, JointWorldTransforms};
pub use math::{Quat, Vec3};
pub use io::{SceneDocument, Settings};
pub use optimize::{FitConfig, FitReport, Objective, Stage, TermKind};
pub use pipeline::{render_sequence, Scene};
pub use render::{render, CameraSpec, RenderedFrame};
pub use scene::{
    make_synthetic_scene, GaussianCloud, Motion, PoseSequence, RigidTransform, Skeleton, SyntheticSpec,
    Template, Violation,
};
pub use session::{BlendMode, EditCommand, SessionState};
pub use skeletonize::{build_tree, sample_candidates, CandidateSet};
pub use skinning::{bind, lbs_deform, SkinBinding};
