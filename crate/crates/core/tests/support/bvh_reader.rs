//! Minimal BVH reader used to check exported files.

#![allow(dead_code)]

#[derive(Debug, Clone)]
pub struct BvhJoint {
    pub name: String,
    pub parent: Option<usize>,
    pub offset: [f64; 3],
    pub channels: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Bvh {
    pub joints: Vec<BvhJoint>,
    pub frame_time: f64,
    pub frames: Vec<Vec<f64>>,
}

fn three(tok: &mut std::slice::Iter<&str>) -> [f64; 3] {
    let mut v = [0.0; 3];
    for x in &mut v {
        *x = tok.next().unwrap().parse().unwrap();
    }
    v
}

pub fn parse(text: &str) -> Bvh {
    let (hier, motion) = text.split_once("MOTION").expect("MOTION block");
    let tokens: Vec<&str> = hier.split_whitespace().collect();
    assert_eq!(tokens[0], "HIERARCHY");
    let mut it = tokens[1..].iter();
    let mut joints: Vec<BvhJoint> = Vec::new();
    // Stack entries: Some(joint) for joint blocks, None for End Site blocks.
    let mut stack: Vec<Option<usize>> = Vec::new();
    let mut pending_end = false;
    while let Some(&t) = it.next() {
        match t {
            "ROOT" | "JOINT" => {
                let name = it.next().unwrap().to_string();
                let parent = stack.iter().rev().find_map(|s| *s);
                joints.push(BvhJoint {
                    name,
                    parent,
                    offset: [0.0; 3],
                    channels: Vec::new(),
                });
            }
            "End" => {
                assert_eq!(*it.next().unwrap(), "Site");
                pending_end = true;
            }
            "{" => {
                if pending_end {
                    stack.push(None);
                    pending_end = false;
                } else {
                    stack.push(Some(joints.len() - 1));
                }
            }
            "}" => {
                stack.pop();
            }
            "OFFSET" => {
                let o = three(&mut it);
                if let Some(Some(j)) = stack.last() {
                    joints[*j].offset = o;
                }
            }
            "CHANNELS" => {
                let n: usize = it.next().unwrap().parse().unwrap();
                let j = joints.len() - 1;
                joints[j].channels = (0..n).map(|_| it.next().unwrap().to_string()).collect();
            }
            other => panic!("unexpected token {other}"),
        }
    }
    assert!(stack.is_empty());
    let mut lines = motion.lines().filter(|l| !l.trim().is_empty());
    let count: usize = lines.next().unwrap().strip_prefix("Frames:").unwrap().trim().parse().unwrap();
    let frame_time: f64 = lines.next().unwrap().strip_prefix("Frame Time:").unwrap().trim().parse().unwrap();
    let frames: Vec<Vec<f64>> = lines
        .map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(frames.len(), count);
    let width: usize = joints.iter().map(|j| j.channels.len()).sum();
    assert!(frames.iter().all(|f| f.len() == width));
    Bvh {
        joints,
        frame_time,
        frames,
    }
}

/// Quaternion (w, x, y, z) of intrinsic rotations applied in the listed
/// channel order, angles in degrees.
pub fn channels_to_quat(channels: &[String], degrees: &[f64]) -> [f64; 4] {
    let mut q = [1.0, 0.0, 0.0, 0.0];
    for (c, &d) in channels.iter().zip(degrees) {
        let h = d.to_radians() / 2.0;
        let (s, w) = (h.sin(), h.cos());
        let r = match c.as_str() {
            "Xrotation" => [w, s, 0.0, 0.0],
            "Yrotation" => [w, 0.0, s, 0.0],
            "Zrotation" => [w, 0.0, 0.0, s],
            other => panic!("not a rotation channel: {other}"),
        };
        q = hamilton(q, r);
    }
    q
}

fn hamilton(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// Angle in degrees between two unit quaternions.
pub fn angle_deg(a: [f64; 4], b: [f64; 4]) -> f64 {
    let d: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    2.0 * d.abs().min(1.0).acos().to_degrees()
}
