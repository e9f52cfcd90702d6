//! Forward kinematics over the joint tree and sliding-window pose smoothing.
//!
//! Joint `b` rotates by its local quaternion about its own rest position;
//! world transforms compose from root to leaf and the root additionally
//! carries the frame's global translation. The transform applied to
//! canonical points is `world ∘ inverse_bind`, so the rest pose maps every
//! point onto itself.

use crate::error::{Error, Result};
use crate::math::{normalize, normalize_vjp, quat_dot, quat_norm, quat_to_matrix, quat_to_matrix_vjp, Mat3, Quat, Vec3};
use crate::scene::{PoseSequence, RigidTransform, Skeleton};

/// Per-joint transforms at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct JointWorldTransforms {
    /// Skinning transforms, `world[b] ∘ inverse_bind[b]`.
    pub transforms: Vec<RigidTransform>,
    /// Posed joint frames.
    pub world: Vec<RigidTransform>,
    pub posed_joints: Vec<Vec3>,
}

/// Gradient of a scalar with respect to the 3x4 block of a transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformGrad {
    pub linear: Mat3,
    pub translation: Vec3,
}

impl TransformGrad {
    pub fn zero() -> Self {
        Self {
            linear: Mat3::zeros(),
            translation: Vec3::zeros(),
        }
    }
}

pub fn forward_kinematics(
    skeleton: &Skeleton,
    frame_pose: &[Quat],
    root_translation: &Vec3,
) -> Result<JointWorldTransforms> {
    let b = skeleton.len();
    if frame_pose.len() != b {
        return Err(Error::DimensionMismatch {
            context: "frame pose joints",
            expected: b,
            found: frame_pose.len(),
        });
    }
    let mut world = vec![RigidTransform::identity(); b];
    for j in skeleton.topological_order() {
        let r = quat_to_matrix(&frame_pose[j]);
        world[j] = match skeleton.parents[j] {
            None => RigidTransform::new(r, skeleton.joints[j] + root_translation),
            Some(p) => {
                let local = RigidTransform::new(r, skeleton.joints[j] - skeleton.joints[p]);
                world[p].compose(&local)
            }
        };
    }
    let transforms = world
        .iter()
        .zip(&skeleton.inverse_bind)
        .map(|(w, inv)| w.compose(inv))
        .collect();
    let posed_joints = world.iter().map(|w| w.translation).collect();
    Ok(JointWorldTransforms {
        transforms,
        world,
        posed_joints,
    })
}

/// Pulls gradients on the skinning transforms back to the frame's local
/// quaternions and root translation.
pub fn forward_kinematics_vjp(
    skeleton: &Skeleton,
    frame_pose: &[Quat],
    fk: &JointWorldTransforms,
    grad_transforms: &[TransformGrad],
) -> (Vec<Quat>, Vec3) {
    let b = skeleton.len();
    let mut g: Vec<TransformGrad> = grad_transforms
        .iter()
        .zip(&skeleton.inverse_bind)
        .map(|(gs, inv)| TransformGrad {
            linear: gs.linear * inv.rotation.transpose() + gs.translation * inv.translation.transpose(),
            translation: gs.translation,
        })
        .collect();
    let mut grad_q = vec![Quat::new(0.0, 0.0, 0.0, 0.0); b];
    let mut grad_t = Vec3::zeros();
    for &j in skeleton.topological_order().iter().rev() {
        let gj = g[j];
        let grad_r = match skeleton.parents[j] {
            None => {
                grad_t += gj.translation;
                gj.linear
            }
            Some(p) => {
                let offset = skeleton.joints[j] - skeleton.joints[p];
                let r = quat_to_matrix(&frame_pose[j]);
                let ap = fk.world[p].rotation;
                g[p].linear += gj.linear * r.transpose() + gj.translation * offset.transpose();
                g[p].translation += gj.translation;
                ap.transpose() * gj.linear
            }
        };
        grad_q[j] = quat_to_matrix_vjp(&frame_pose[j], &grad_r);
    }
    (grad_q, grad_t)
}

/// Window averages whose norm falls below this fall back to the center.
pub const DEGENERATE_AVERAGE: f64 = 1e-8;

fn window(t: usize, w: usize, frames: usize) -> std::ops::RangeInclusive<usize> {
    t.saturating_sub(w)..=(t + w).min(frames - 1)
}

fn sign_to(center: &Quat, q: &Quat) -> f64 {
    if quat_dot(center, q) < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Averages each joint's quaternion over a `2w + 1` window truncated at the
/// clip ends, after flipping members into the center's hemisphere, then
/// renormalizes. Root translations are averaged over the same window.
/// Returns the smoothed sequence and the number of degenerate windows that
/// fell back to the center quaternion.
pub fn smooth_poses_counted(poses: &PoseSequence, w: usize) -> (PoseSequence, usize) {
    if w == 0 {
        return (poses.clone(), 0);
    }
    let (frames, joints) = (poses.frame_count(), poses.joint_count());
    let mut theta = Vec::with_capacity(frames * joints);
    let mut trans = Vec::with_capacity(frames);
    let mut fallbacks = 0;
    for t in 0..frames {
        let span = window(t, w, frames);
        let n = span.clone().count() as f64;
        for b in 0..joints {
            let center = poses.get(t, b);
            let mut acc = Quat::new(0.0, 0.0, 0.0, 0.0);
            for i in span.clone() {
                let q = poses.get(i, b);
                acc += q * sign_to(center, q);
            }
            let avg = acc / n;
            if quat_norm(&avg) < DEGENERATE_AVERAGE {
                fallbacks += 1;
                theta.push(*center);
            } else {
                theta.push(normalize(&avg));
            }
        }
        let sum = span.map(|i| poses.root_translation[i]).fold(Vec3::zeros(), |a, v| a + v);
        trans.push(sum / n);
    }
    let out = PoseSequence::from_parts_unchecked(frames, joints, theta, trans)
        .expect("smoothing preserves dimensions");
    (out, fallbacks)
}

pub fn smooth_poses(poses: &PoseSequence, w: usize) -> PoseSequence {
    smooth_poses_counted(poses, w).0
}

/// Adjoint of [`smooth_poses`]. Gradients are laid out frame-major like
/// `PoseSequence::theta`.
pub fn smooth_poses_vjp(
    poses: &PoseSequence,
    w: usize,
    grad_theta: &[Quat],
    grad_translation: &[Vec3],
) -> (Vec<Quat>, Vec<Vec3>) {
    if w == 0 {
        return (grad_theta.to_vec(), grad_translation.to_vec());
    }
    let (frames, joints) = (poses.frame_count(), poses.joint_count());
    let mut gq = vec![Quat::new(0.0, 0.0, 0.0, 0.0); frames * joints];
    let mut gt = vec![Vec3::zeros(); frames];
    for t in 0..frames {
        let span = window(t, w, frames);
        let n = span.clone().count() as f64;
        for b in 0..joints {
            let center = poses.get(t, b);
            let mut acc = Quat::new(0.0, 0.0, 0.0, 0.0);
            for i in span.clone() {
                let q = poses.get(i, b);
                acc += q * sign_to(center, q);
            }
            let avg = acc / n;
            let g = grad_theta[t * joints + b];
            if quat_norm(&avg) < DEGENERATE_AVERAGE {
                gq[t * joints + b] += g;
                continue;
            }
            let g_avg = normalize_vjp(&avg, &g) / n;
            for i in span.clone() {
                let s = sign_to(center, poses.get(i, b));
                gq[i * joints + b] += g_avg * s;
            }
        }
        for i in span {
            gt[i] += grad_translation[t] / n;
        }
    }
    (gq, gt)
}

/// Sum over frames, joints and quaternion components of squared temporal
/// second differences, after hemisphere-aligning each joint's track.
pub fn second_difference_energy(poses: &PoseSequence) -> f64 {
    let (frames, joints) = (poses.frame_count(), poses.joint_count());
    let mut energy = 0.0;
    for b in 0..joints {
        let mut track: Vec<Quat> = Vec::with_capacity(frames);
        for t in 0..frames {
            let q = *poses.get(t, b);
            let q = match track.last() {
                Some(prev) if quat_dot(prev, &q) < 0.0 => -q,
                _ => q,
            };
            track.push(q);
        }
        for t in 1..frames.saturating_sub(1) {
            let d = track[t + 1] - track[t] * 2.0 + track[t - 1];
            energy += d.norm_squared();
        }
    }
    energy
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{axis_angle, identity_quat, quat};
    use crate::scene::random_unit_quat;
    use nalgebra::Matrix4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chain(points: &[[f64; 3]]) -> Skeleton {
        let joints = points.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect();
        let parents = (0..points.len()).map(|i| i.checked_sub(1)).collect();
        Skeleton::new(joints, parents).unwrap()
    }

    fn random_tree(rng: &mut ChaCha8Rng, b: usize) -> Skeleton {
        let joints = (0..b)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let parents = (0..b).map(|j| if j == 0 { None } else { Some(rng.gen_range(0..j)) }).collect();
        Skeleton::new(joints, parents).unwrap()
    }

    fn to_h(t: &RigidTransform) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&t.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t.translation);
        m
    }

    /// Re-derives each joint's skinning matrix from its own ancestor chain
    /// with homogeneous 4x4 products.
    fn brute_force_skinning(s: &Skeleton, pose: &[Quat], t: &Vec3) -> Vec<Matrix4<f64>> {
        (0..s.len())
            .map(|b| {
                let mut chain = vec![b];
                while let Some(p) = s.parents[*chain.last().unwrap()] {
                    chain.push(p);
                }
                chain.reverse();
                let mut m = Matrix4::new_translation(t);
                for &j in &chain {
                    let about = Matrix4::new_translation(&s.joints[j])
                        * to_h(&RigidTransform::new(quat_to_matrix(&pose[j]), Vec3::zeros()))
                        * Matrix4::new_translation(&-s.joints[j]);
                    m *= about;
                }
                m
            })
            .collect()
    }

    #[test]
    fn identity_pose_is_identity() {
        let s = chain(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 2.0, 0.0]]);
        let fk = forward_kinematics(&s, &vec![identity_quat(); 3], &Vec3::zeros()).unwrap();
        for (t, j) in fk.transforms.iter().zip(&s.joints) {
            assert!(t.max_abs_diff(&RigidTransform::identity()) < 1e-15);
            let _ = j;
        }
        assert_eq!(fk.posed_joints, s.joints);
    }

    #[test]
    fn root_quarter_turn_moves_child() {
        let s = chain(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let q = axis_angle(Vec3::z(), std::f64::consts::FRAC_PI_2);
        let fk = forward_kinematics(&s, &[q, identity_quat()], &Vec3::zeros()).unwrap();
        // Rz(90°) * (1, 0, 0) by hand.
        assert!((fk.posed_joints[1] - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn two_quarter_turns_on_three_joint_chain() {
        let s = chain(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let q = axis_angle(Vec3::z(), std::f64::consts::FRAC_PI_2);
        let fk = forward_kinematics(&s, &[q, q, identity_quat()], &Vec3::zeros()).unwrap();
        assert!((fk.posed_joints[2] - Vec3::new(-1.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn joint_count_mismatch() {
        let s = chain(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert!(forward_kinematics(&s, &[identity_quat()], &Vec3::zeros()).is_err());
    }

    #[test]
    fn matches_brute_force_chain_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let b = rng.gen_range(1..=10);
            let s = random_tree(&mut rng, b);
            let pose: Vec<Quat> = (0..b).map(|_| random_unit_quat(&mut rng)).collect();
            let t = Vec3::new(rng.gen(), rng.gen(), rng.gen());
            let fk = forward_kinematics(&s, &pose, &t).unwrap();
            let oracle = brute_force_skinning(&s, &pose, &t);
            for j in 0..b {
                assert!((to_h(&fk.transforms[j]) - oracle[j]).abs().max() < 1e-12);
                let p = fk.transforms[j].apply(&s.joints[j]);
                assert!((p - fk.posed_joints[j]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn equivariant_under_root_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_tree(&mut rng, 7);
        let pose: Vec<Quat> = (0..7).map(|_| random_unit_quat(&mut rng)).collect();
        let base = forward_kinematics(&s, &pose, &Vec3::zeros()).unwrap();
        let r = random_unit_quat(&mut rng);
        let mut rotated = pose.clone();
        let root = s.root();
        rotated[root] = r * pose[root];
        let out = forward_kinematics(&s, &rotated, &Vec3::zeros()).unwrap();
        let rm = quat_to_matrix(&r);
        let c = s.joints[root];
        for j in 0..7 {
            let expect = rm * (base.posed_joints[j] - c) + c;
            assert!((out.posed_joints[j] - expect).norm() < 1e-5);
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = random_tree(&mut rng, 6);
        let pose: Vec<Quat> = (0..6).map(|_| random_unit_quat(&mut rng)).collect();
        let t = Vec3::new(0.1, -0.2, 0.3);
        let weights: Vec<TransformGrad> = (0..6)
            .map(|_| TransformGrad {
                linear: Mat3::from_fn(|_, _| rng.gen_range(-1.0..1.0)),
                translation: Vec3::new(rng.gen(), rng.gen(), rng.gen()),
            })
            .collect();
        let loss = |pose: &[Quat], t: &Vec3| {
            let fk = forward_kinematics(&s, pose, t).unwrap();
            fk.transforms
                .iter()
                .zip(&weights)
                .map(|(x, g)| x.rotation.dot(&g.linear) + x.translation.dot(&g.translation))
                .sum::<f64>()
        };
        let fk = forward_kinematics(&s, &pose, &t).unwrap();
        let (gq, gt) = forward_kinematics_vjp(&s, &pose, &fk, &weights);
        let h = 1e-6;
        for j in 0..6 {
            for c in 0..4 {
                let mut p = pose.clone();
                p[j].coords[c] += h;
                let fp = loss(&p, &t);
                p[j].coords[c] -= 2.0 * h;
                let fm = loss(&p, &t);
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - gq[j].coords[c]).abs() < 1e-6, "joint {j} comp {c}");
            }
        }
        for c in 0..3 {
            let mut tp = t;
            tp[c] += h;
            let mut tm = t;
            tm[c] -= h;
            let fd = (loss(&pose, &tp) - loss(&pose, &tm)) / (2.0 * h);
            assert!((fd - gt[c]).abs() < 1e-6);
        }
    }

    fn sequence(frames: usize, joints: usize, mut f: impl FnMut(usize, usize) -> Quat) -> PoseSequence {
        let theta = (0..frames * joints).map(|i| f(i / joints, i % joints)).collect();
        let trans = (0..frames).map(|t| Vec3::new(t as f64, 0.5, -(t as f64))).collect();
        PoseSequence::from_parts(frames, joints, theta, trans).unwrap()
    }

    #[test]
    fn constant_sequence_is_fixed() {
        let q = axis_angle(Vec3::new(1.0, 2.0, 3.0), 0.7);
        let p = sequence(9, 2, |_, _| q);
        for w in 0..4 {
            let s = smooth_poses(&p, w);
            for (a, b) in s.theta().iter().zip(p.theta()) {
                assert!((a - b).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_window_is_bitwise_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = sequence(5, 3, |_, _| random_unit_quat(&mut ChaCha8Rng::seed_from_u64(rng.gen())));
        assert_eq!(smooth_poses(&p, 0), p);
    }

    #[test]
    fn sign_flip_is_neutralized() {
        let q = axis_angle(Vec3::new(0.3, -1.0, 0.2), 1.1);
        let p = sequence(3, 1, |t, _| if t == 1 { -q } else { q });
        let s = smooth_poses(&p, 1);
        // Reference: align to the first element, average, normalize.
        let members = [q, -q, q];
        let first = members[0];
        let sum = members
            .iter()
            .map(|m| if quat_dot(m, &first) < 0.0 { -m } else { *m })
            .fold(quat(0.0, 0.0, 0.0, 0.0), |a, m| a + m);
        let reference = sum / quat_norm(&sum);
        assert!((quat_dot(s.get(1, 0), &reference).abs() - 1.0).abs() < 1e-12);
        assert!((quat_dot(s.get(1, 0), &q).abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clamped_window_at_ends() {
        let p = sequence(4, 1, |t, _| axis_angle(Vec3::z(), 0.1 * t as f64));
        let s = smooth_poses(&p, 1);
        // Frame 0 averages frames 0 and 1 only.
        let expect = normalize(&((p.get(0, 0) + p.get(1, 0)) / 2.0));
        assert!((s.get(0, 0) - expect).norm() < 1e-15);
        assert!((s.root_translation[0] - Vec3::new(0.5, 0.5, -0.5)).norm() < 1e-15);
    }

    #[test]
    fn translation_smoothing_is_linear() {
        let p = sequence(6, 1, |_, _| identity_quat());
        let mut scaled = p.clone();
        for t in &mut scaled.root_translation {
            *t *= -2.5;
        }
        let a = smooth_poses(&p, 2);
        let b = smooth_poses(&scaled, 2);
        for (x, y) in a.root_translation.iter().zip(&b.root_translation) {
            assert!((x * -2.5 - y).norm() < 1e-12);
        }
    }

    #[test]
    fn smoothed_quaternions_are_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let qs: Vec<Quat> = (0..40).map(|_| random_unit_quat(&mut rng)).collect();
        let p = sequence(20, 2, |t, b| qs[t * 2 + b]);
        let s = smooth_poses(&p, 2);
        assert!(s.theta().iter().all(|q| (quat_norm(q) - 1.0).abs() < 1e-6));
    }

    #[test]
    fn degenerate_window_falls_back_to_center() {
        // With a unit center the aligned average has norm >= 1/n, so only a
        // vanishing center can cancel out.
        let a = axis_angle(Vec3::x(), 0.4);
        let zero = quat(0.0, 0.0, 0.0, 0.0);
        let p = PoseSequence::from_parts_unchecked(3, 1, vec![a, zero, -a], vec![Vec3::zeros(); 3]).unwrap();
        let (s, fallbacks) = smooth_poses_counted(&p, 1);
        assert_eq!(fallbacks, 1);
        assert_eq!(*s.get(1, 0), zero);
    }

    #[test]
    fn smoothing_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let qs: Vec<Quat> = (0..12).map(|_| random_unit_quat(&mut rng)).collect();
        let p = sequence(6, 2, |t, b| qs[t * 2 + b]);
        let gq: Vec<Quat> = (0..12).map(|_| random_unit_quat(&mut rng)).collect();
        let gt: Vec<Vec3> = (0..6).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let loss = |p: &PoseSequence| {
            let s = smooth_poses(p, 1);
            let a: f64 = s.theta().iter().zip(&gq).map(|(x, g)| quat_dot(x, g)).sum();
            let b: f64 = s.root_translation.iter().zip(&gt).map(|(x, g)| x.dot(g)).sum();
            a + b
        };
        let (aq, at) = smooth_poses_vjp(&p, 1, &gq, &gt);
        let h = 1e-6;
        for i in 0..12 {
            for c in 0..4 {
                let mut pp = p.clone();
                pp.theta_mut()[i].coords[c] += h;
                let mut pm = p.clone();
                pm.theta_mut()[i].coords[c] -= h;
                let fd = (loss(&pp) - loss(&pm)) / (2.0 * h);
                assert!((fd - aq[i].coords[c]).abs() < 1e-6);
            }
        }
        for t in 0..6 {
            let mut pp = p.clone();
            pp.root_translation[t].x += h;
            let mut pm = p.clone();
            pm.root_translation[t].x -= h;
            let fd = (loss(&pp) - loss(&pm)) / (2.0 * h);
            assert!((fd - at[t].x).abs() < 1e-6);
        }
    }
}
