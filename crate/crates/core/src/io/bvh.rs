//! BVH motion export.
//!
//! Joint rotations are the local pose quaternions converted to intrinsic
//! Z-X-Y Euler angles in degrees, matching the channel order. When the X
//! angle is within 1e-4 rad of ±90°, the Y channel is written as zero and the
//! Z channel absorbs the free rotation. Root position channels carry the root
//! translation; root OFFSET is the rest position of the root joint.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::math::{matrix_to_euler_zxy, quat_to_matrix};
use crate::scene::{PoseSequence, Skeleton};

/// Decimal places of every number in the output.
pub const BVH_PRECISION: usize = 6;

fn sanitize(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' })
        .collect();
    if s.is_empty() {
        "_".into()
    } else {
        s
    }
}

fn num(v: f64) -> String {
    // Avoid printing "-0.000000".
    let s = format!("{:.*}", BVH_PRECISION, v);
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        s.trim_start_matches('-').to_string()
    } else {
        s
    }
}

fn triple(v: [f64; 3]) -> String {
    format!("{} {} {}", num(v[0]), num(v[1]), num(v[2]))
}

/// Renders `poses` on `skeleton` as BVH text.
pub fn export_bvh(skeleton: &Skeleton, poses: &PoseSequence, frame_time: f64) -> Result<String> {
    skeleton.validate()?;
    poses.validate_for(skeleton)?;
    if !(frame_time > 0.0 && frame_time.is_finite()) {
        return Err(Error::NonPositive {
            what: "frame time",
            value: frame_time,
        });
    }
    let children = skeleton.children();
    let root = skeleton.root();
    let mut out = String::from("HIERARCHY\n");
    // Joints in the order their channels appear in MOTION rows.
    let mut order = Vec::with_capacity(skeleton.len());
    write_joint(skeleton, &children, root, 0, &mut out, &mut order);
    let _ = writeln!(out, "MOTION");
    let _ = writeln!(out, "Frames: {}", poses.frame_count());
    // Shortest round-trip form, so the file reproduces the frame time exactly.
    let _ = writeln!(out, "Frame Time: {frame_time}");
    for t in 0..poses.frame_count() {
        let mut row: Vec<String> = Vec::with_capacity(3 + 3 * order.len());
        let tr = poses.root_translation[t];
        row.extend([num(tr.x), num(tr.y), num(tr.z)]);
        for &b in &order {
            let (z, x, y) = matrix_to_euler_zxy(&quat_to_matrix(poses.get(t, b)));
            row.extend([num(z.to_degrees()), num(x.to_degrees()), num(y.to_degrees())]);
        }
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    Ok(out)
}

fn write_joint(
    skel: &Skeleton,
    children: &[Vec<usize>],
    b: usize,
    depth: usize,
    out: &mut String,
    order: &mut Vec<usize>,
) {
    let pad = "\t".repeat(depth);
    order.push(b);
    let offset = match skel.parents[b] {
        Some(p) => skel.joints[b] - skel.joints[p],
        None => skel.joints[b],
    };
    let kind = if depth == 0 { "ROOT" } else { "JOINT" };
    let _ = writeln!(out, "{pad}{kind} {}", sanitize(&skel.joint_name(b)));
    let _ = writeln!(out, "{pad}{{");
    let _ = writeln!(out, "{pad}\tOFFSET {}", triple([offset.x, offset.y, offset.z]));
    if depth == 0 {
        let _ = writeln!(out, "{pad}\tCHANNELS 6 Xposition Yposition Zposition Zrotation Xrotation Yrotation");
    } else {
        let _ = writeln!(out, "{pad}\tCHANNELS 3 Zrotation Xrotation Yrotation");
    }
    if children[b].is_empty() {
        let _ = writeln!(out, "{pad}\tEnd Site");
        let _ = writeln!(out, "{pad}\t{{");
        let _ = writeln!(out, "{pad}\t\tOFFSET {}", triple([0.0; 3]));
        let _ = writeln!(out, "{pad}\t}}");
    }
    for &c in &children[b] {
        write_joint(skel, children, c, depth + 1, out, order);
    }
    let _ = writeln!(out, "{pad}}}");
}
