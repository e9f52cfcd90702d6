//! Staged gradient-descent fitting.
//!
//! Stage R fits poses and root translations with the cloud, skeleton and
//! binding frozen. Stage N freezes the poses and fits the refinement field,
//! optionally together with the canonical cloud attributes.
//!
//! All gradients are analytic. [`FitProblem`] flattens the free parameters
//! of a stage into one vector so gradients can be checked against central
//! finite differences coordinate by coordinate.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::ControlFlow;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hexplane::{FieldConfig, HexplaneField};
use crate::kinematics::{forward_kinematics, forward_kinematics_vjp, smooth_poses, smooth_poses_vjp};
use crate::math::{normalize, Quat, Vec3};
use crate::pipeline::Scene;
use crate::render::{render, render_vjp, CameraSpec, RenderedFrame, SplatGrad};
use crate::scene::{GaussianCloud, PoseSequence};
use crate::skinning::{lbs_deform_cached, lbs_vjp, lbs_vjp_canonical};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Stage {
    /// Rigid: poses and root translations.
    #[default]
    #[serde(rename = "R", alias = "r", alias = "rigid")]
    R,
    /// Non-rigid: refinement field, optionally cloud attributes.
    #[serde(rename = "N", alias = "n", alias = "refine")]
    N,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    Rec,
    Mask,
    Reg,
    Chamfer,
    PoseSmooth,
}

impl TermKind {
    pub const ALL: [TermKind; 5] = [TermKind::Rec, TermKind::Mask, TermKind::Reg, TermKind::Chamfer, TermKind::PoseSmooth];

    pub fn name(self) -> &'static str {
        match self {
            TermKind::Rec => "rec",
            TermKind::Mask => "mask",
            TermKind::Reg => "reg",
            TermKind::Chamfer => "chamfer",
            TermKind::PoseSmooth => "pose_smooth",
        }
    }
}

impl fmt::Display for TermKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A user-supplied per-frame loss on the observed cloud.
pub trait CustomTerm: Send + Sync {
    fn name(&self) -> &str;
    /// Value at frame `t` and its gradient with respect to the observed
    /// cloud attributes.
    fn evaluate(&self, t: usize, observed: &GaussianCloud) -> Result<(f64, SplatGrad)>;
}

#[derive(Clone)]
pub struct Objective {
    terms: Vec<(TermKind, f64)>,
    custom: Vec<(f64, Arc<dyn CustomTerm>)>,
}

impl fmt::Debug for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Objective")
            .field("terms", &self.terms)
            .field("custom", &self.custom.iter().map(|(w, c)| (c.name().to_string(), *w)).collect::<Vec<_>>())
            .finish()
    }
}

impl Objective {
    /// Needs at least one of rec or chamfer, and nonnegative weights.
    pub fn new(terms: Vec<(TermKind, f64)>) -> Result<Self> {
        for &(k, w) in &terms {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::NegativeWeight {
                    term: k.name().into(),
                    weight: w,
                });
            }
        }
        if !terms.iter().any(|(k, _)| matches!(k, TermKind::Rec | TermKind::Chamfer)) {
            return Err(Error::NoDataTerm);
        }
        let mut terms = terms;
        terms.sort_by_key(|t| t.0);
        terms.dedup_by_key(|t| t.0);
        Ok(Self { terms, custom: Vec::new() })
    }

    /// Terms with positive weight from a weight table.
    pub fn from_weights(w: &LossWeights) -> Result<Self> {
        let terms = TermKind::ALL
            .iter()
            .map(|&k| (k, w.get(k)))
            .filter(|&(_, v)| v != 0.0)
            .collect();
        Self::new(terms)
    }

    pub fn with_custom(mut self, weight: f64, term: Arc<dyn CustomTerm>) -> Result<Self> {
        if !(weight >= 0.0) {
            return Err(Error::NegativeWeight {
                term: term.name().into(),
                weight,
            });
        }
        self.custom.push((weight, term));
        Ok(self)
    }

    pub fn weight(&self, k: TermKind) -> Option<f64> {
        self.terms.iter().find(|t| t.0 == k).map(|t| t.1)
    }

    pub fn terms(&self) -> &[(TermKind, f64)] {
        &self.terms
    }

    fn needs_images(&self) -> bool {
        self.weight(TermKind::Rec).is_some() || self.weight(TermKind::Mask).is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub rec: f64,
    pub mask: f64,
    pub reg: f64,
    pub chamfer: f64,
    pub pose_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec: 2e4,
            mask: 1e3,
            reg: 1.0,
            chamfer: 0.0,
            pose_smooth: 0.0,
        }
    }
}

impl LossWeights {
    pub fn get(&self, k: TermKind) -> f64 {
        match k {
            TermKind::Rec => self.rec,
            TermKind::Mask => self.mask,
            TermKind::Reg => self.reg,
            TermKind::Chamfer => self.chamfer,
            TermKind::PoseSmooth => self.pose_smooth,
        }
    }
}

/// A reference image and its camera.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetView {
    pub camera: CameraSpec,
    pub image: RenderedFrame,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameTarget {
    pub points: Option<Vec<Vec3>>,
    pub views: Vec<TargetView>,
}

/// Per-frame fitting targets, one entry per pose frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Targets {
    pub frames: Vec<FrameTarget>,
}

impl Targets {
    /// Targets produced by a known configuration: observed splat centers
    /// and/or renders from `cameras`.
    pub fn synthesize(
        scene: &Scene,
        poses: &PoseSequence,
        field: Option<&HexplaneField>,
        cameras: &[CameraSpec],
        with_points: bool,
    ) -> Result<Self> {
        let all: Vec<usize> = (0..poses.frame_count()).collect();
        let clouds = scene.observed_sequence(poses, field, &all)?;
        let frames = clouds
            .iter()
            .map(|c| {
                let views = cameras
                    .iter()
                    .map(|cam| {
                        Ok(TargetView {
                            camera: cam.clone(),
                            image: render(c, cam)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(FrameTarget {
                    points: with_points.then(|| c.positions.clone()),
                    views,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { frames })
    }

    fn check(&self, objective: &Objective, frames: usize) -> Result<()> {
        if self.frames.len() != frames {
            return Err(Error::DimensionMismatch {
                context: "target frames",
                expected: frames,
                found: self.frames.len(),
            });
        }
        for (t, f) in self.frames.iter().enumerate() {
            if objective.weight(TermKind::Chamfer).is_some() && f.points.as_ref().map_or(true, |p| p.is_empty()) {
                return Err(Error::MissingTarget {
                    term: "chamfer".into(),
                    frame: t,
                });
            }
            if objective.needs_images() && f.views.is_empty() {
                let term = if objective.weight(TermKind::Rec).is_some() { "rec" } else { "mask" };
                return Err(Error::MissingTarget { term: term.into(), frame: t });
            }
            for v in &f.views {
                if v.image.width != v.camera.width || v.image.height != v.camera.height {
                    return Err(Error::DimensionMismatch {
                        context: "target image size",
                        expected: v.camera.width * v.camera.height,
                        found: v.image.width * v.image.height,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Raw (unweighted) term values and the weighted total.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
}

impl LossBreakdown {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.get(name).copied()
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "total={}", self.total)?;
        for (k, v) in &self.terms {
            write!(f, " {k}={v}")?;
        }
        Ok(())
    }
}

/// Symmetric mean nearest-neighbor squared distance, and its gradient
/// with respect to `points`.
pub fn chamfer(points: &[Vec3], target: &[Vec3]) -> (f64, Vec<Vec3>) {
    let mut grad = vec![Vec3::zeros(); points.len()];
    if points.is_empty() || target.is_empty() {
        return (0.0, grad);
    }
    let nearest = |p: &Vec3, set: &[Vec3]| {
        let mut best = (f64::INFINITY, 0);
        for (j, q) in set.iter().enumerate() {
            let d = (p - q).norm_squared();
            if d < best.0 {
                best = (d, j);
            }
        }
        best
    };
    let (np, nt) = (points.len() as f64, target.len() as f64);
    let mut forward = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (d, j) = nearest(p, target);
        forward += d;
        grad[i] += (p - target[j]) * (2.0 / np);
    }
    let mut backward = 0.0;
    for q in target {
        let (d, i) = nearest(q, points);
        backward += d;
        grad[i] += (points[i] - q) * (2.0 / nt);
    }
    (forward / np + backward / nt, grad)
}

/// Mean over consecutive frame pairs of the summed squared differences of
/// raw quaternion components.
pub fn pose_smoothness(poses: &PoseSequence) -> (f64, Vec<Quat>) {
    let (t_count, b) = (poses.frame_count(), poses.joint_count());
    let mut grad = vec![Quat::new(0.0, 0.0, 0.0, 0.0); t_count * b];
    if t_count < 2 {
        return (0.0, grad);
    }
    let pairs = (t_count - 1) as f64;
    let mut total = 0.0;
    for t in 0..t_count - 1 {
        for j in 0..b {
            let d = poses.get(t + 1, j) - poses.get(t, j);
            total += d.norm_squared();
            grad[(t + 1) * b + j] += d * (2.0 / pairs);
            grad[t * b + j] -= d * (2.0 / pairs);
        }
    }
    (total / pairs, grad)
}

/// Which parameter groups need gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GradNeeds {
    pub poses: bool,
    pub field: bool,
    pub cloud: bool,
}

/// Gradients for every parameter group; unused groups stay empty.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub theta: Vec<Quat>,
    pub root_translation: Vec<Vec3>,
    pub field: Vec<f64>,
    pub cloud: Option<SplatGrad>,
}

struct FrameResult {
    terms: BTreeMap<String, f64>,
    theta: Vec<Quat>,
    translation: Vec3,
    field: Vec<f64>,
    cloud: Option<SplatGrad>,
}

fn frame_pass(
    scene: &Scene,
    smoothed: &PoseSequence,
    field: Option<&HexplaneField>,
    targets: &Targets,
    objective: &Objective,
    t: usize,
    needs: Option<GradNeeds>,
) -> Result<FrameResult> {
    let frames = smoothed.frame_count() as f64;
    let fk = forward_kinematics(&scene.skeleton, smoothed.frame(t), &smoothed.root_translation[t])?;
    let (rigid, cache) = lbs_deform_cached(&scene.cloud, &scene.binding, &fk)?;
    let (observed, traces) = match field {
        Some(f) => {
            let (o, tr) = f.refine(&rigid, t as f64)?;
            (o, Some(tr))
        }
        None => (rigid.clone(), None),
    };
    let n = observed.len();
    let mut terms = BTreeMap::new();
    let mut g_obs = needs.map(|_| SplatGrad::zeros(n));
    let target = &targets.frames[t];

    if let Some(w) = objective.weight(TermKind::Chamfer) {
        let (v, g) = chamfer(&observed.positions, target.points.as_deref().unwrap_or(&[]));
        terms.insert("chamfer".into(), v);
        if let Some(go) = g_obs.as_mut() {
            let s = w / frames;
            for (a, b) in go.position.iter_mut().zip(&g) {
                *a += b * s;
            }
        }
    }
    let wr = objective.weight(TermKind::Rec);
    let wm = objective.weight(TermKind::Mask);
    if wr.is_some() || wm.is_some() {
        let views = target.views.len() as f64;
        let (mut rec, mut mask) = (0.0, 0.0);
        for v in &target.views {
            let img = render(&observed, &v.camera)?;
            let px = (img.width * img.height) as f64;
            let d_rgb: Vec<f64> = img.rgb.iter().zip(&v.image.rgb).map(|(a, b)| a - b).collect();
            let d_a: Vec<f64> = img.alpha.iter().zip(&v.image.alpha).map(|(a, b)| a - b).collect();
            rec += d_rgb.iter().map(|d| d * d).sum::<f64>() / (3.0 * px) / views;
            mask += d_a.iter().map(|d| d * d).sum::<f64>() / px / views;
            if let Some(go) = g_obs.as_mut() {
                let sr = wr.unwrap_or(0.0) * 2.0 / (3.0 * px * views * frames);
                let sm = wm.unwrap_or(0.0) * 2.0 / (px * views * frames);
                let g_rgb: Vec<f64> = d_rgb.iter().map(|d| d * sr).collect();
                let g_a: Vec<f64> = d_a.iter().map(|d| d * sm).collect();
                let g = render_vjp(&observed, &v.camera, &g_rgb, &g_a)?;
                add_splat_grad(go, &g, 1.0);
            }
        }
        if wr.is_some() {
            terms.insert("rec".into(), rec);
        }
        if wm.is_some() {
            terms.insert("mask".into(), mask);
        }
    }
    for (w, c) in &objective.custom {
        let (v, g) = c.evaluate(t, &observed)?;
        *terms.entry(c.name().to_string()).or_insert(0.0) += v;
        if let Some(go) = g_obs.as_mut() {
            add_splat_grad(go, &g, *w / frames);
        }
    }

    let mut out = FrameResult {
        terms,
        theta: Vec::new(),
        translation: Vec3::zeros(),
        field: Vec::new(),
        cloud: None,
    };
    let (Some(needs), Some(go)) = (needs, g_obs) else {
        return Ok(out);
    };
    // Observed -> rigid.
    let (g_pos, g_rot, g_scale) = match (field, traces) {
        (Some(f), Some(traces)) => {
            let mut gf = vec![0.0; if needs.field { f.parameter_count() } else { 0 }];
            let mut scratch = Vec::new();
            let buf = if needs.field {
                &mut gf
            } else {
                scratch.resize(f.parameter_count(), 0.0);
                &mut scratch
            };
            let r = f.refine_vjp(&rigid, &traces, &go.position, &go.rotation, &go.scale, buf);
            out.field = gf;
            (
                r.iter().map(|g| g.position).collect::<Vec<_>>(),
                r.iter().map(|g| g.rotation).collect::<Vec<_>>(),
                r.iter().map(|g| g.scale).collect::<Vec<_>>(),
            )
        }
        _ => (go.position.clone(), go.rotation.clone(), go.scale.clone()),
    };
    if needs.poses {
        let gt = lbs_vjp(&scene.cloud, &scene.binding, &cache, scene.skeleton.len(), &g_pos, Some(&g_rot));
        let (gq, gtr) = forward_kinematics_vjp(&scene.skeleton, smoothed.frame(t), &fk, &gt);
        out.theta = gq;
        out.translation = gtr;
    }
    if needs.cloud {
        let (cp, cq) = lbs_vjp_canonical(&cache, &g_pos, &g_rot);
        out.cloud = Some(SplatGrad {
            position: cp,
            rotation: cq,
            scale: g_scale,
            opacity: go.opacity,
            color: go.color,
        });
    }
    Ok(out)
}

fn add_splat_grad(acc: &mut SplatGrad, g: &SplatGrad, s: f64) {
    for i in 0..acc.position.len() {
        acc.position[i] += g.position[i] * s;
        acc.rotation[i] += g.rotation[i] * s;
        acc.scale[i] += g.scale[i] * s;
        acc.opacity[i] += g.opacity[i] * s;
        acc.color[i] += g.color[i] * s;
    }
}

/// Weighted loss and, when `needs` is given, its gradients. Poses may be
/// off the unit sphere; they are normalized inside the forward pass.
pub fn evaluate(
    scene: &Scene,
    poses: &PoseSequence,
    field: Option<&HexplaneField>,
    targets: &Targets,
    objective: &Objective,
    needs: Option<GradNeeds>,
) -> Result<(LossBreakdown, Gradients)> {
    let frames = poses.frame_count();
    if poses.joint_count() != scene.skeleton.len() {
        return Err(Error::DimensionMismatch {
            context: "pose joints",
            expected: scene.skeleton.len(),
            found: poses.joint_count(),
        });
    }
    if frames == 0 {
        return Err(Error::NonPositive {
            what: "pose frame count",
            value: 0.0,
        });
    }
    targets.check(objective, frames)?;
    let smoothed = smooth_poses(poses, scene.smoothing_window);
    let results: Vec<FrameResult> = (0..frames)
        .into_par_iter()
        .map(|t| frame_pass(scene, &smoothed, field, targets, objective, t, needs))
        .collect::<Result<Vec<_>>>()?;

    let mut raw: BTreeMap<String, f64> = BTreeMap::new();
    for r in &results {
        for (k, v) in &r.terms {
            *raw.entry(k.clone()).or_insert(0.0) += v / frames as f64;
        }
    }
    let mut grads = Gradients::default();
    if let Some(w) = objective.weight(TermKind::Reg) {
        let v = match field {
            Some(f) => {
                if needs.map_or(false, |n| n.field) {
                    grads.field = vec![0.0; f.parameter_count()];
                    f.tv_vjp(w, &mut grads.field)
                } else {
                    f.tv_regularizer()
                }
            }
            None => 0.0,
        };
        raw.insert("reg".into(), v);
    }
    let mut pose_smooth_grad = None;
    if let Some(w) = objective.weight(TermKind::PoseSmooth) {
        let (v, g) = pose_smoothness(poses);
        raw.insert("pose_smooth".into(), v);
        pose_smooth_grad = Some((w, g));
    }
    let mut total = 0.0;
    for (k, w) in &objective.terms {
        total += w * raw.get(k.name()).copied().unwrap_or(0.0);
    }
    for (w, c) in &objective.custom {
        total += w * raw.get(c.name()).copied().unwrap_or(0.0);
    }
    let breakdown = LossBreakdown { total, terms: raw };

    let Some(needs) = needs else {
        return Ok((breakdown, grads));
    };
    if needs.poses {
        let b = poses.joint_count();
        let mut g_bar = vec![Quat::new(0.0, 0.0, 0.0, 0.0); frames * b];
        let mut g_tbar = vec![Vec3::zeros(); frames];
        for (t, r) in results.iter().enumerate() {
            g_bar[t * b..(t + 1) * b].copy_from_slice(&r.theta);
            g_tbar[t] = r.translation;
        }
        let (mut gq, gt) = smooth_poses_vjp(poses, scene.smoothing_window, &g_bar, &g_tbar);
        if let Some((w, g)) = pose_smooth_grad {
            for (a, b) in gq.iter_mut().zip(&g) {
                *a += b * w;
            }
        }
        grads.theta = gq;
        grads.root_translation = gt;
    }
    if needs.field {
        if let Some(f) = field {
            if grads.field.is_empty() {
                grads.field = vec![0.0; f.parameter_count()];
            }
            for r in &results {
                for (a, b) in grads.field.iter_mut().zip(&r.field) {
                    *a += b;
                }
            }
        }
    }
    if needs.cloud {
        let mut acc = SplatGrad::zeros(scene.cloud.len());
        for r in &results {
            if let Some(g) = &r.cloud {
                add_splat_grad(&mut acc, g, 1.0);
            }
        }
        grads.cloud = Some(acc);
    }
    Ok((breakdown, grads))
}

/// Loss only.
pub fn evaluate_loss(
    scene: &Scene,
    poses: &PoseSequence,
    field: Option<&HexplaneField>,
    targets: &Targets,
    objective: &Objective,
) -> Result<LossBreakdown> {
    evaluate(scene, poses, field, targets, objective, None).map(|r| r.0)
}

/// The free parameters of one stage as a flat vector.
///
/// Stage R: quaternion components (w, x, y, z) frame-major, then root
/// translations. Stage N: field parameters, then, if the cloud is
/// unfrozen, canonical positions, rotations, scales, opacities, colors.
#[derive(Debug, Clone)]
pub struct FitProblem {
    pub scene: Scene,
    pub targets: Targets,
    pub objective: Objective,
    pub stage: Stage,
    pub poses: PoseSequence,
    pub field: Option<HexplaneField>,
    pub unfreeze_cloud: bool,
}

const MIN_SCALE: f64 = 1e-6;

impl FitProblem {
    pub fn new(
        scene: Scene,
        targets: Targets,
        objective: Objective,
        stage: Stage,
        poses: PoseSequence,
        field: Option<HexplaneField>,
    ) -> Result<Self> {
        if stage == Stage::N && field.is_none() {
            return Err(Error::MissingComponent("a hexplane field"));
        }
        scene.check_poses(&poses)?;
        targets.check(&objective, poses.frame_count())?;
        Ok(Self {
            scene,
            targets,
            objective,
            stage,
            poses,
            field,
            unfreeze_cloud: false,
        })
    }

    fn needs(&self) -> GradNeeds {
        match self.stage {
            Stage::R => GradNeeds {
                poses: true,
                ..GradNeeds::default()
            },
            Stage::N => GradNeeds {
                field: true,
                cloud: self.unfreeze_cloud,
                ..GradNeeds::default()
            },
        }
    }

    pub fn param_len(&self) -> usize {
        match self.stage {
            Stage::R => self.poses.theta().len() * 4 + self.poses.frame_count() * 3,
            Stage::N => {
                let f = self.field.as_ref().map_or(0, |f| f.parameter_count());
                f + if self.unfreeze_cloud { 14 * self.scene.cloud.len() } else { 0 }
            }
        }
    }

    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_len());
        match self.stage {
            Stage::R => {
                for q in self.poses.theta() {
                    v.extend([q.w, q.i, q.j, q.k]);
                }
                for t in &self.poses.root_translation {
                    v.extend(t.iter());
                }
            }
            Stage::N => {
                if let Some(f) = &self.field {
                    v.extend(f.params());
                }
                if self.unfreeze_cloud {
                    let c = &self.scene.cloud;
                    c.positions.iter().for_each(|p| v.extend(p.iter()));
                    c.rotations.iter().for_each(|q| v.extend([q.w, q.i, q.j, q.k]));
                    c.scales.iter().for_each(|s| v.extend(s.iter()));
                    v.extend(&c.opacities);
                    c.colors.iter().for_each(|s| v.extend(s.iter()));
                }
            }
        }
        v
    }

    /// Writes parameters without projecting them back onto constraints.
    pub fn set_params(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.param_len() {
            return Err(Error::DimensionMismatch {
                context: "fit parameters",
                expected: self.param_len(),
                found: v.len(),
            });
        }
        let mut it = v.iter().copied();
        let mut next = || it.next().unwrap();
        match self.stage {
            Stage::R => {
                for q in self.poses.theta_mut() {
                    *q = Quat::new(next(), next(), next(), next());
                }
                for t in &mut self.poses.root_translation {
                    *t = Vec3::new(next(), next(), next());
                }
            }
            Stage::N => {
                if let Some(f) = &mut self.field {
                    let n = f.parameter_count();
                    f.set_params(&v[..n])?;
                    for _ in 0..n {
                        next();
                    }
                }
                if self.unfreeze_cloud {
                    let c = &mut self.scene.cloud;
                    c.positions.iter_mut().for_each(|p| *p = Vec3::new(next(), next(), next()));
                    c.rotations.iter_mut().for_each(|q| *q = Quat::new(next(), next(), next(), next()));
                    c.scales.iter_mut().for_each(|s| *s = Vec3::new(next(), next(), next()));
                    c.opacities.iter_mut().for_each(|o| *o = next());
                    c.colors.iter_mut().for_each(|s| *s = Vec3::new(next(), next(), next()));
                }
            }
        }
        Ok(())
    }

    /// Pulls parameters back onto their constraint sets.
    pub fn project(&mut self) {
        self.poses.renormalize();
        if self.unfreeze_cloud {
            let c = &mut self.scene.cloud;
            c.rotations.iter_mut().for_each(|q| *q = normalize(q));
            c.scales.iter_mut().for_each(|s| *s = s.map(|v| v.max(MIN_SCALE)));
            c.opacities.iter_mut().for_each(|o| *o = o.clamp(0.0, 1.0));
            c.colors.iter_mut().for_each(|s| *s = s.map(|v| v.clamp(0.0, 1.0)));
        }
    }

    pub fn loss(&self) -> Result<LossBreakdown> {
        evaluate_loss(&self.scene, &self.poses, self.field.as_ref(), &self.targets, &self.objective)
    }

    pub fn gradient(&self) -> Result<(LossBreakdown, Vec<f64>)> {
        let needs = self.needs();
        let (b, g) = evaluate(&self.scene, &self.poses, self.field.as_ref(), &self.targets, &self.objective, Some(needs))?;
        let mut v = Vec::with_capacity(self.param_len());
        match self.stage {
            Stage::R => {
                for q in &g.theta {
                    v.extend([q.w, q.i, q.j, q.k]);
                }
                for t in &g.root_translation {
                    v.extend(t.iter());
                }
            }
            Stage::N => {
                v.extend(&g.field);
                if let Some(c) = &g.cloud {
                    c.position.iter().for_each(|p| v.extend(p.iter()));
                    c.rotation.iter().for_each(|q| v.extend([q.w, q.i, q.j, q.k]));
                    c.scale.iter().for_each(|s| v.extend(s.iter()));
                    v.extend(&c.opacity);
                    c.color.iter().for_each(|s| v.extend(s.iter()));
                }
            }
        }
        Ok((b, v))
    }
}

/// One coordinate of a finite-difference check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdSample {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares the analytic gradient with central differences of step `h`
/// on the given coordinates. Parameters are restored afterwards.
pub fn finite_difference_check(problem: &mut FitProblem, coords: &[usize], h: f64, floor: f64) -> Result<Vec<FdSample>> {
    let (_, g) = problem.gradient()?;
    let base = problem.params();
    let mut out = Vec::with_capacity(coords.len());
    for &k in coords {
        let mut p = base.clone();
        p[k] = base[k] + h;
        problem.set_params(&p)?;
        let lp = problem.loss()?.total;
        p[k] = base[k] - h;
        problem.set_params(&p)?;
        let lm = problem.loss()?.total;
        let numeric = (lp - lm) / (2.0 * h);
        out.push(FdSample {
            index: k,
            analytic: g[k],
            numeric,
            relative_error: relative_error(g[k], numeric, floor),
        });
    }
    problem.set_params(&base)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecayShape {
    #[default]
    Exponential,
    Linear,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub start: f64,
    pub end: f64,
    #[serde(default)]
    pub shape: DecayShape,
}

impl Schedule {
    pub fn exponential(start: f64, end: f64) -> Self {
        Self {
            start,
            end,
            shape: DecayShape::Exponential,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start > 0.0 && self.end > 0.0) {
            return Err(Error::Config(format!(
                "learning rates must be positive (start {}, end {})",
                self.start, self.end
            )));
        }
        if self.start < self.end {
            return Err(Error::Config(format!(
                "learning rate start {} is below end {}",
                self.start, self.end
            )));
        }
        Ok(())
    }

    /// Rate at step `s` of `steps`; the last step uses `end`.
    pub fn rate(&self, s: usize, steps: usize) -> f64 {
        let f = if steps <= 1 { 0.0 } else { s as f64 / (steps - 1) as f64 };
        match self.shape {
            DecayShape::Exponential => self.start * (self.end / self.start).powf(f),
            DecayShape::Linear => self.start + (self.end - self.start) * f,
            DecayShape::Constant => self.start,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub stage: Stage,
    /// Defaults to 2500 (stage R) or 7000 (stage N).
    pub steps: Option<usize>,
    /// Defaults to 5e-5 -> 5e-6 (stage R) or 1.6e-4 -> 1.6e-6 (stage N).
    pub schedule: Option<Schedule>,
    pub smoothing_window: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub unfreeze_cloud: bool,
    pub field: FieldConfig,
    /// Relative padding of the field box around the cloud.
    pub field_margin: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            stage: Stage::R,
            steps: None,
            schedule: None,
            smoothing_window: 1,
            weights: LossWeights::default(),
            seed: 0,
            unfreeze_cloud: false,
            field: FieldConfig::default(),
            field_margin: 0.25,
        }
    }
}

impl FitConfig {
    pub fn stage_n() -> Self {
        Self {
            stage: Stage::N,
            ..Self::default()
        }
    }

    pub fn effective_steps(&self) -> usize {
        self.steps.unwrap_or(match self.stage {
            Stage::R => 2500,
            Stage::N => 7000,
        })
    }

    pub fn effective_schedule(&self) -> Schedule {
        self.schedule.unwrap_or(match self.stage {
            Stage::R => Schedule::exponential(5e-5, 5e-6),
            Stage::N => Schedule::exponential(1.6e-4, 1.6e-6),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.effective_steps() < 1 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        self.effective_schedule().validate()?;
        Objective::from_weights(&self.weights)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub terms: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentCount {
    pub name: String,
    pub scalars: usize,
}

/// Scalar counts per component; bytes assume 4-byte floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ParameterCounts {
    pub components: Vec<ComponentCount>,
}

pub const BYTES_PER_SCALAR: usize = 4;

impl ParameterCounts {
    pub fn total_scalars(&self) -> usize {
        self.components.iter().map(|c| c.scalars).sum()
    }

    pub fn total_bytes(&self) -> usize {
        self.total_scalars() * BYTES_PER_SCALAR
    }

    pub fn mib(&self) -> f64 {
        self.total_bytes() as f64 / (1024.0 * 1024.0)
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.components.iter().find(|c| c.name == name).map(|c| c.scalars)
    }

    fn push(&mut self, name: &str, scalars: usize) {
        self.components.push(ComponentCount {
            name: name.into(),
            scalars,
        });
    }

    pub fn merged(mut self, other: ParameterCounts) -> Self {
        self.components.extend(other.components);
        self
    }
}

/// Rigid-stage storage for `frames` x `joints` poses.
pub fn count_rigid(frames: usize, joints: usize) -> ParameterCounts {
    let mut c = ParameterCounts::default();
    c.push("pose_rotations", frames * joints * 4);
    c.push("root_translation", frames * 3);
    c
}

pub fn count_poses(poses: &PoseSequence) -> ParameterCounts {
    count_rigid(poses.frame_count(), poses.joint_count())
}

pub fn count_field(field: &HexplaneField) -> ParameterCounts {
    let mut c = ParameterCounts::default();
    c.push("hexplane_planes", field.plane_param_len());
    c.push("hexplane_decoder", field.decoder.param_len());
    c
}

/// Field counts from a configuration without allocating the field.
pub fn count_field_config(config: &FieldConfig, frames: usize) -> Result<ParameterCounts> {
    if config.feature_width == 0 {
        return Err(Error::NonPositive {
            what: "feature_width",
            value: 0.0,
        });
    }
    if config.spatial_resolution == 0 || config.hidden_width == 0 || frames == 0 {
        return Err(Error::NonPositive {
            what: "field dimensions",
            value: 0.0,
        });
    }
    let total = config.parameter_count(frames);
    let rs = config.spatial_resolution;
    let rt = config.temporal_resolution.unwrap_or(frames);
    let planes = 3 * rs * rs * config.feature_width + 3 * rs * rt * config.feature_width;
    let mut c = ParameterCounts::default();
    c.push("hexplane_planes", planes);
    c.push("hexplane_decoder", total - planes);
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub stage: Stage,
    pub records: Vec<StepRecord>,
    pub parameter_counts: ParameterCounts,
    pub wall_clock_seconds: f64,
    pub final_loss: LossBreakdown,
}

impl FitReport {
    pub fn loss_trace(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// One JSON object per step.
    pub fn write_jsonl(&self, mut w: impl std::io::Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(|e| Error::Config(e.to_string()))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "stage": self.stage,
            "steps": self.records.len(),
            "initial_loss": self.records.first().map(|r| r.loss),
            "final_loss": self.final_loss.total,
            "final_terms": self.final_loss.terms,
            "parameter_counts": self.parameter_counts.components,
            "total_scalars": self.parameter_counts.total_scalars(),
            "total_bytes": self.parameter_counts.total_bytes(),
            "mib": self.parameter_counts.mib(),
            "wall_clock_seconds": self.wall_clock_seconds,
        })
    }
}

/// Starting point of a fit. Missing poses start at identity with zero root
/// translation; a missing field in stage N is freshly initialized.
#[derive(Debug, Clone, Default)]
pub struct FitInit {
    pub poses: Option<PoseSequence>,
    pub field: Option<HexplaneField>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub poses: PoseSequence,
    pub field: Option<HexplaneField>,
    pub cloud: GaussianCloud,
    pub report: FitReport,
}

pub fn fit(scene: &Scene, targets: &Targets, config: &FitConfig, init: FitInit) -> Result<FitOutcome> {
    fit_with_progress(scene, targets, config, init, |_| ControlFlow::Continue(()))
}

/// Like [`fit`], calling `progress` after every step; `Break` stops early.
pub fn fit_with_progress(
    scene: &Scene,
    targets: &Targets,
    config: &FitConfig,
    init: FitInit,
    mut progress: impl FnMut(&StepRecord) -> ControlFlow<()>,
) -> Result<FitOutcome> {
    config.validate()?;
    let started = Instant::now();
    let frames = targets.frames.len();
    let objective = Objective::from_weights(&config.weights)?;
    let mut scene = scene.clone();
    scene.smoothing_window = config.smoothing_window;
    let poses = init
        .poses
        .unwrap_or_else(|| PoseSequence::identity(frames, scene.skeleton.len()));
    let field = match (config.stage, init.field) {
        (_, Some(f)) => Some(f),
        (Stage::N, None) => {
            let mut fc = config.field.clone();
            fc.seed = fc.seed.wrapping_add(config.seed);
            // The field box must cover the rigidly deformed cloud at every frame.
            let all: Vec<usize> = (0..poses.frame_count()).collect();
            let clouds = scene.observed_sequence(&poses, None, &all)?;
            let mut acc = clouds[0].clone();
            for c in &clouds[1..] {
                acc.positions.extend(&c.positions);
            }
            let bounds_cloud = GaussianCloud {
                rotations: vec![crate::math::identity_quat(); acc.positions.len()],
                scales: vec![Vec3::repeat(1.0); acc.positions.len()],
                opacities: vec![1.0; acc.positions.len()],
                colors: vec![Vec3::zeros(); acc.positions.len()],
                positions: acc.positions,
            };
            Some(HexplaneField::for_cloud(&fc, &bounds_cloud, poses.frame_count(), config.field_margin)?)
        }
        (Stage::R, None) => None,
    };
    let mut problem = FitProblem::new(scene, targets.clone(), objective, config.stage, poses, field)?;
    problem.unfreeze_cloud = config.unfreeze_cloud && config.stage == Stage::N;
    let steps = config.effective_steps();
    let schedule = config.effective_schedule();
    let mut records = Vec::with_capacity(steps);
    let mut params = problem.params();
    for s in 0..steps {
        let lr = schedule.rate(s, steps);
        let (b, g) = problem.gradient()?;
        if !b.total.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: s,
                breakdown: b.to_string(),
            });
        }
        for (p, gv) in params.iter_mut().zip(&g) {
            *p -= lr * gv;
        }
        problem.set_params(&params)?;
        problem.project();
        params = problem.params();
        let rec = StepRecord {
            step: s,
            lr,
            loss: b.total,
            terms: b.terms,
        };
        let flow = progress(&rec);
        records.push(rec);
        if flow.is_break() {
            break;
        }
    }
    let final_loss = problem.loss()?;
    if !final_loss.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: records.len(),
            breakdown: final_loss.to_string(),
        });
    }
    let mut counts = match config.stage {
        Stage::R => count_poses(&problem.poses),
        Stage::N => problem.field.as_ref().map(count_field).unwrap_or_default(),
    };
    if problem.unfreeze_cloud {
        counts.push("cloud_attributes", 14 * problem.scene.cloud.len());
    }
    let report = FitReport {
        stage: config.stage,
        records,
        parameter_counts: counts,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        final_loss,
    };
    Ok(FitOutcome {
        poses: problem.poses,
        field: problem.field,
        cloud: problem.scene.cloud,
        report,
    })
}
