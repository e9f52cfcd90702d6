//! Inverse-distance KNN skin binding and linear blend skinning.

use crate::error::{Error, Result};
use crate::kinematics::{JointWorldTransforms, TransformGrad};
use crate::math::{body_increment_vjp, matrix_to_quat, normalize, normalize_vjp, polar, polar_rotation_vjp, Mat3, Quat, Vec3};
use crate::scene::{GaussianCloud, Skeleton};

pub const DEFAULT_K: usize = 4;

/// Distances below this snap the splat fully onto that joint.
pub const COINCIDENT_DISTANCE: f64 = 1e-9;

/// Per-splat joint influences, `k` per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinBinding {
    pub k: usize,
    /// `N * k` joint indices, nearest first.
    pub joint_indices: Vec<usize>,
    /// `N * k` weights; each row sums to one.
    pub weights: Vec<f64>,
}

impl SkinBinding {
    pub fn len(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.weights.len() / self.k
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = i * self.k..(i + 1) * self.k;
        self.joint_indices[r.clone()].iter().copied().zip(self.weights[r].iter().copied())
    }
}

/// Inverse-distance weights over the exact `k` nearest joints of each
/// splat. Ties in distance go to the lower joint index.
pub fn bind(cloud: &GaussianCloud, skeleton: &Skeleton, k: usize) -> Result<SkinBinding> {
    let b = skeleton.len();
    if k < 1 || k > b {
        return Err(Error::OutOfRange {
            what: "skinning k",
            value: k as i64,
            min: 1,
            max: b as i64,
        });
    }
    let n = cloud.len();
    let mut joint_indices = Vec::with_capacity(n * k);
    let mut weights = Vec::with_capacity(n * k);
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(b);
    for p in &cloud.positions {
        dist.clear();
        dist.extend(skeleton.joints.iter().enumerate().map(|(j, q)| ((p - q).norm(), j)));
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let nearest = &dist[..k];
        joint_indices.extend(nearest.iter().map(|&(_, j)| j));
        if nearest[0].0 < COINCIDENT_DISTANCE {
            weights.push(1.0);
            weights.extend(std::iter::repeat(0.0).take(k - 1));
        } else {
            let total: f64 = nearest.iter().map(|&(d, _)| 1.0 / d).sum();
            weights.extend(nearest.iter().map(|&(d, _)| (1.0 / d) / total));
        }
    }
    Ok(SkinBinding {
        k,
        joint_indices,
        weights,
    })
}

/// Intermediate values of one skinning pass, kept for the adjoint.
#[derive(Debug, Clone)]
pub struct LbsCache {
    pub linear: Vec<Mat3>,
    pub polar_r: Vec<Mat3>,
    pub polar_s: Vec<Mat3>,
    pub rotation_quat: Vec<Quat>,
    /// `rotation_quat[i] * q_c[i]` before normalization.
    pub composed: Vec<Quat>,
}

fn check_dims(cloud: &GaussianCloud, binding: &SkinBinding, frame: &JointWorldTransforms) -> Result<()> {
    if binding.len() != cloud.len() {
        return Err(Error::DimensionMismatch {
            context: "binding rows",
            expected: cloud.len(),
            found: binding.len(),
        });
    }
    if let Some(&j) = binding.joint_indices.iter().max() {
        if j >= frame.transforms.len() {
            return Err(Error::DimensionMismatch {
                context: "binding joint index",
                expected: frame.transforms.len(),
                found: j + 1,
            });
        }
    }
    Ok(())
}

/// Deforms the canonical cloud. Positions move by the weight-blended
/// transform; rotations compose with the nearest rotation (polar factor) of
/// the blended linear block. Scales, opacities and colors pass through.
pub fn lbs_deform(cloud: &GaussianCloud, binding: &SkinBinding, frame: &JointWorldTransforms) -> Result<GaussianCloud> {
    lbs_deform_cached(cloud, binding, frame).map(|(c, _)| c)
}

pub fn lbs_deform_cached(
    cloud: &GaussianCloud,
    binding: &SkinBinding,
    frame: &JointWorldTransforms,
) -> Result<(GaussianCloud, LbsCache)> {
    check_dims(cloud, binding, frame)?;
    let n = cloud.len();
    let mut positions = Vec::with_capacity(n);
    let mut rotations = Vec::with_capacity(n);
    let mut cache = LbsCache {
        linear: Vec::with_capacity(n),
        polar_r: Vec::with_capacity(n),
        polar_s: Vec::with_capacity(n),
        rotation_quat: Vec::with_capacity(n),
        composed: Vec::with_capacity(n),
    };
    for i in 0..n {
        let mut a = Mat3::zeros();
        let mut t = Vec3::zeros();
        for (j, w) in binding.row(i) {
            let m = &frame.transforms[j];
            a += m.rotation * w;
            t += m.translation * w;
        }
        positions.push(a * cloud.positions[i] + t);
        let (r, s) = polar(&a);
        let qr = matrix_to_quat(&r);
        let composed = qr * cloud.rotations[i];
        rotations.push(normalize(&composed));
        cache.linear.push(a);
        cache.polar_r.push(r);
        cache.polar_s.push(s);
        cache.rotation_quat.push(qr);
        cache.composed.push(composed);
    }
    let out = GaussianCloud {
        positions,
        rotations,
        scales: cloud.scales.clone(),
        opacities: cloud.opacities.clone(),
        colors: cloud.colors.clone(),
    };
    Ok((out, cache))
}

/// Pulls gradients on deformed positions and rotations back to the
/// per-joint skinning transforms.
pub fn lbs_vjp(
    cloud: &GaussianCloud,
    binding: &SkinBinding,
    cache: &LbsCache,
    joint_count: usize,
    grad_positions: &[Vec3],
    grad_rotations: Option<&[Quat]>,
) -> Vec<TransformGrad> {
    let mut out = vec![TransformGrad::zero(); joint_count];
    for i in 0..cloud.len() {
        let gp = grad_positions[i];
        let mut ga = gp * cloud.positions[i].transpose();
        if let Some(gr) = grad_rotations {
            let g = gr[i];
            if g.norm_squared() > 0.0 {
                let g_composed = normalize_vjp(&cache.composed[i], &g);
                let g_qr = g_composed * cloud.rotations[i].conjugate();
                let g_omega = body_increment_vjp(&cache.rotation_quat[i], &g_qr);
                ga += polar_rotation_vjp(&cache.polar_r[i], &cache.polar_s[i], &g_omega);
            }
        }
        for (j, w) in binding.row(i) {
            out[j].linear += ga * w;
            out[j].translation += gp * w;
        }
    }
    out
}

/// Gradients on the canonical positions and rotations.
pub fn lbs_vjp_canonical(
    cache: &LbsCache,
    grad_positions: &[Vec3],
    grad_rotations: &[Quat],
) -> (Vec<Vec3>, Vec<Quat>) {
    let gp = cache.linear.iter().zip(grad_positions).map(|(a, g)| a.transpose() * g).collect();
    let gq = (0..cache.linear.len())
        .map(|i| {
            let g = normalize_vjp(&cache.composed[i], &grad_rotations[i]);
            cache.rotation_quat[i].conjugate() * g
        })
        .collect();
    (gp, gq)
}
