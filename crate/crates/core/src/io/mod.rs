//! Scene container, BVH export and skeleton import.
//!
//! Container layout, all little-endian:
//!
//! ```text
//! magic      8 bytes  "SPLATRIG"
//! version    u32      1
//! sections   u32      count
//! table      count x { tag [u8; 4], offset u64, length u64 }
//! payloads   at the offsets given in the table
//! ```
//!
//! Section tags: `CLOU` cloud, `SKEL` skeleton, `POSE` poses, `HEXF` field
//! checkpoint, `SETT` settings, `TRGT` fit targets. Unknown tags are
//! skipped. Cloud values are stored as f32; everything else as f64. The
//! field-by-field layout is documented in `docs/FORMAT.md`.

mod bvh;
mod skeleton_json;

pub use bvh::{export_bvh, BVH_PRECISION};
pub use skeleton_json::{import_skeleton, skeleton_to_json};

use crate::error::{Error, Result};
use crate::hexplane::{DecoderWeights, HexplaneField, Layer, Plane, RotationDeltaMode};
use crate::math::{Quat, Vec3};
use crate::optimize::{FrameTarget, TargetView, Targets};
use crate::render::{CameraSpec, RenderedFrame};
use crate::scene::{GaussianCloud, PoseSequence, Skeleton};

pub const MAGIC: &[u8; 8] = b"SPLATRIG";
pub const VERSION: u32 = 1;

const HEADER_LEN: usize = 16;
const ENTRY_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic at offset 0")]
    BadMagic,
    #[error("unsupported format version {found} at offset {offset} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32, offset: usize },
    #[error("truncated payload at offset {offset}: need {needed} bytes, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("count mismatch in {context} at offset {offset}: expected {expected}, found {found}")]
    CountMismatch {
        context: &'static str,
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("invalid {context} at offset {offset}: {reason}")]
    Invalid {
        context: &'static str,
        offset: usize,
        reason: String,
    },
    #[error("section {tag} appears twice")]
    DuplicateSection { tag: String },
    #[error("malformed skeleton document: {0}")]
    Document(String),
    #[error("skeleton document describes a forest with components {components:?}")]
    Forest { components: Vec<Vec<String>> },
    #[error("skeleton document has a cycle through {nodes:?}")]
    Cycle { nodes: Vec<String> },
}

/// Fitting and skinning settings stored alongside a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Settings {
    pub skin_k: u32,
    pub smoothing_window: u32,
}

/// Every artifact a container may hold; each part is optional.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneDocument {
    pub cloud: Option<GaussianCloud>,
    pub skeleton: Option<Skeleton>,
    pub poses: Option<PoseSequence>,
    pub field: Option<HexplaneField>,
    pub settings: Option<Settings>,
    pub targets: Option<Targets>,
}

impl SceneDocument {
    pub fn validate(&self) -> Result<()> {
        if let Some(c) = &self.cloud {
            c.validate()?;
        }
        if let Some(s) = &self.skeleton {
            s.validate()?;
        }
        if let Some(p) = &self.poses {
            match &self.skeleton {
                Some(s) => p.validate_for(s)?,
                None => p.validate()?,
            }
        }
        if let Some(f) = &self.field {
            f.validate()?;
        }
        Ok(())
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend(v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.buf.extend(v.to_le_bytes());
    }
    fn f32(&mut self, v: f64) {
        self.buf.extend((v as f32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend(v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|&x| self.f64(x));
    }
    fn vec3(&mut self, v: &Vec3) {
        v.iter().for_each(|&x| self.f64(x));
    }
    fn quat(&mut self, q: &Quat) {
        [q.w, q.i, q.j, q.k].iter().for_each(|&x| self.f64(x));
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    end: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        if self.end - self.pos < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
                available: self.end - self.pos,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> std::result::Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> std::result::Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn i32(&mut self) -> std::result::Result<i32, FormatError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> std::result::Result<f64, FormatError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }
    fn f64(&mut self) -> std::result::Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, FormatError> {
        self.ensure(n, 8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn vec3(&mut self) -> std::result::Result<Vec3, FormatError> {
        Ok(Vec3::new(self.f64()?, self.f64()?, self.f64()?))
    }
    fn vec3_f32(&mut self) -> std::result::Result<Vec3, FormatError> {
        Ok(Vec3::new(self.f32()?, self.f32()?, self.f32()?))
    }
    fn quat(&mut self) -> std::result::Result<Quat, FormatError> {
        Ok(Quat::new(self.f64()?, self.f64()?, self.f64()?, self.f64()?))
    }
    fn str(&mut self) -> std::result::Result<String, FormatError> {
        let at = self.pos;
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|e| FormatError::Invalid {
            context: "identifier",
            offset: at,
            reason: e.to_string(),
        })
    }
    /// Fails early when `count` items of `size` bytes cannot fit.
    fn ensure(&self, count: usize, size: usize) -> std::result::Result<(), FormatError> {
        let needed = count.checked_mul(size).unwrap_or(usize::MAX);
        if needed > self.end - self.pos {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed,
                available: self.end - self.pos,
            });
        }
        Ok(())
    }
    fn finish(&self, context: &'static str) -> std::result::Result<(), FormatError> {
        if self.pos != self.end {
            return Err(FormatError::CountMismatch {
                context,
                offset: self.pos,
                expected: self.pos,
                found: self.end,
            });
        }
        Ok(())
    }
}

fn encode_cloud(w: &mut Writer, c: &GaussianCloud) {
    w.u64(c.len() as u64);
    c.positions.iter().for_each(|p| p.iter().for_each(|&v| w.f32(v)));
    c.rotations.iter().for_each(|q| [q.w, q.i, q.j, q.k].iter().for_each(|&v| w.f32(v)));
    c.scales.iter().for_each(|p| p.iter().for_each(|&v| w.f32(v)));
    c.opacities.iter().for_each(|&v| w.f32(v));
    c.colors.iter().for_each(|p| p.iter().for_each(|&v| w.f32(v)));
}

fn decode_cloud(r: &mut Reader) -> std::result::Result<GaussianCloud, FormatError> {
    let at = r.pos;
    let n = r.u64()? as usize;
    r.ensure(n, 14 * 4)?;
    let positions = (0..n).map(|_| r.vec3_f32()).collect::<std::result::Result<_, _>>()?;
    let rotations = (0..n)
        .map(|_| Ok(Quat::new(r.f32()?, r.f32()?, r.f32()?, r.f32()?)))
        .collect::<std::result::Result<_, FormatError>>()?;
    let scales = (0..n).map(|_| r.vec3_f32()).collect::<std::result::Result<_, _>>()?;
    let opacities = (0..n).map(|_| r.f32()).collect::<std::result::Result<_, _>>()?;
    let colors = (0..n).map(|_| r.vec3_f32()).collect::<std::result::Result<_, _>>()?;
    let c = GaussianCloud {
        positions,
        rotations,
        scales,
        opacities,
        colors,
    };
    c.validate().map_err(|v| FormatError::Invalid {
        context: "cloud",
        offset: at,
        reason: v.to_string(),
    })?;
    Ok(c)
}

fn encode_skeleton(w: &mut Writer, s: &Skeleton) {
    w.u32(s.len() as u32);
    s.joints.iter().for_each(|j| w.vec3(j));
    s.parents.iter().for_each(|p| w.i32(p.map_or(-1, |p| p as i32)));
    match &s.identifiers {
        Some(ids) => {
            w.u8(1);
            ids.iter().for_each(|id| w.str(id));
        }
        None => w.u8(0),
    }
}

fn decode_skeleton(r: &mut Reader) -> std::result::Result<Skeleton, FormatError> {
    let at = r.pos;
    let b = r.u32()? as usize;
    r.ensure(b, 28)?;
    let joints = (0..b).map(|_| r.vec3()).collect::<std::result::Result<Vec<_>, _>>()?;
    let mut parents = Vec::with_capacity(b);
    for _ in 0..b {
        let p_at = r.pos;
        let p = r.i32()?;
        parents.push(match p {
            -1 => None,
            p if p >= 0 => Some(p as usize),
            _ => {
                return Err(FormatError::Invalid {
                    context: "parent index",
                    offset: p_at,
                    reason: format!("{p}"),
                })
            }
        });
    }
    let ids = match r.u8()? {
        0 => None,
        1 => Some((0..b).map(|_| r.str()).collect::<std::result::Result<Vec<_>, _>>()?),
        v => {
            return Err(FormatError::Invalid {
                context: "identifier flag",
                offset: r.pos - 1,
                reason: format!("{v}"),
            })
        }
    };
    let invalid = |e: Error| FormatError::Invalid {
        context: "skeleton",
        offset: at,
        reason: e.to_string(),
    };
    let mut s = Skeleton::new(joints, parents).map_err(invalid)?;
    if let Some(ids) = ids {
        s = s.with_identifiers(ids).map_err(invalid)?;
    }
    Ok(s)
}

fn encode_poses(w: &mut Writer, p: &PoseSequence) {
    w.u32(p.frame_count() as u32);
    w.u32(p.joint_count() as u32);
    p.theta().iter().for_each(|q| w.quat(q));
    p.root_translation.iter().for_each(|t| w.vec3(t));
}

fn decode_poses(r: &mut Reader) -> std::result::Result<PoseSequence, FormatError> {
    let at = r.pos;
    let t = r.u32()? as usize;
    let b = r.u32()? as usize;
    r.ensure(t.saturating_mul(b), 32)?;
    let theta = (0..t * b).map(|_| r.quat()).collect::<std::result::Result<Vec<_>, _>>()?;
    r.ensure(t, 24)?;
    let trans = (0..t).map(|_| r.vec3()).collect::<std::result::Result<Vec<_>, _>>()?;
    PoseSequence::from_parts(t, b, theta, trans).map_err(|e| FormatError::Invalid {
        context: "poses",
        offset: at,
        reason: e.to_string(),
    })
}

fn encode_layer(w: &mut Writer, l: &Layer) {
    w.u32(l.inputs as u32);
    w.u32(l.outputs as u32);
    w.f64s(&l.weights);
    w.f64s(&l.bias);
}

fn decode_layer(r: &mut Reader) -> std::result::Result<Layer, FormatError> {
    let inputs = r.u32()? as usize;
    let outputs = r.u32()? as usize;
    let weights = r.f64s(inputs.saturating_mul(outputs))?;
    let bias = r.f64s(outputs)?;
    Ok(Layer {
        inputs,
        outputs,
        weights,
        bias,
    })
}

fn encode_field(w: &mut Writer, f: &HexplaneField) {
    w.vec3(&f.bounds_min);
    w.vec3(&f.bounds_max);
    w.f64(f.time_max);
    f.resolutions().iter().for_each(|&r| w.u32(r as u32));
    w.u32(f.feature_width as u32);
    w.u8(match f.rotation_mode {
        RotationDeltaMode::Additive => 0,
        RotationDeltaMode::Multiplicative => 1,
    });
    f.planes.iter().for_each(|p| w.f64s(&p.data));
    w.u32(f.decoder.trunk.len() as u32);
    f.decoder.layers().for_each(|l| encode_layer(w, l));
}

fn decode_field(r: &mut Reader) -> std::result::Result<HexplaneField, FormatError> {
    let at = r.pos;
    let bounds_min = r.vec3()?;
    let bounds_max = r.vec3()?;
    let time_max = r.f64()?;
    let res = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let c = r.u32()? as usize;
    let mode_at = r.pos;
    let rotation_mode = match r.u8()? {
        0 => RotationDeltaMode::Additive,
        1 => RotationDeltaMode::Multiplicative,
        v => {
            return Err(FormatError::Invalid {
                context: "rotation mode",
                offset: mode_at,
                reason: format!("{v}"),
            })
        }
    };
    let mut planes = Vec::with_capacity(6);
    for &(a, b) in crate::hexplane::PLANE_AXES.iter() {
        let n = res[a].saturating_mul(res[b]).saturating_mul(c);
        planes.push(Plane {
            rows: res[a],
            cols: res[b],
            data: r.f64s(n)?,
        });
    }
    let trunk_len = r.u32()? as usize;
    r.ensure(trunk_len, 8)?;
    let trunk = (0..trunk_len).map(|_| decode_layer(r)).collect::<std::result::Result<Vec<_>, _>>()?;
    let heads = [decode_layer(r)?, decode_layer(r)?, decode_layer(r)?];
    let invalid = |e: Error| FormatError::Invalid {
        context: "field",
        offset: at,
        reason: e.to_string(),
    };
    let decoder = DecoderWeights::from_layers(trunk, heads).map_err(invalid)?;
    let f = HexplaneField {
        planes,
        bounds_min,
        bounds_max,
        time_max,
        feature_width: c,
        decoder,
        rotation_mode,
    };
    f.validate().map_err(invalid)?;
    Ok(f)
}

fn encode_camera(w: &mut Writer, c: &CameraSpec) {
    w.f64s(&c.position);
    w.f64s(&c.target);
    w.f64s(&c.up);
    w.f64(c.fov_y);
    w.f64(c.near);
    w.u32(c.width as u32);
    w.u32(c.height as u32);
}

fn decode_camera(r: &mut Reader) -> std::result::Result<CameraSpec, FormatError> {
    let at = r.pos;
    let v3 = |r: &mut Reader| -> std::result::Result<[f64; 3], FormatError> { Ok([r.f64()?, r.f64()?, r.f64()?]) };
    let c = CameraSpec {
        position: v3(r)?,
        target: v3(r)?,
        up: v3(r)?,
        fov_y: r.f64()?,
        near: r.f64()?,
        width: r.u32()? as usize,
        height: r.u32()? as usize,
    };
    c.validate().map_err(|e| FormatError::Invalid {
        context: "camera",
        offset: at,
        reason: e.to_string(),
    })?;
    Ok(c)
}

fn encode_targets(w: &mut Writer, t: &Targets) {
    w.u32(t.frames.len() as u32);
    for f in &t.frames {
        match &f.points {
            Some(p) => {
                w.u8(1);
                w.u64(p.len() as u64);
                p.iter().for_each(|v| w.vec3(v));
            }
            None => w.u8(0),
        }
        w.u32(f.views.len() as u32);
        for v in &f.views {
            encode_camera(w, &v.camera);
            w.f64s(&v.image.rgb);
            w.f64s(&v.image.alpha);
        }
    }
}

fn decode_targets(r: &mut Reader) -> std::result::Result<Targets, FormatError> {
    let t = r.u32()? as usize;
    r.ensure(t, 5)?;
    let mut frames = Vec::with_capacity(t);
    for _ in 0..t {
        let points = match r.u8()? {
            0 => None,
            _ => {
                let n = r.u64()? as usize;
                r.ensure(n, 24)?;
                Some((0..n).map(|_| r.vec3()).collect::<std::result::Result<Vec<_>, _>>()?)
            }
        };
        let nv = r.u32()? as usize;
        let mut views = Vec::new();
        for _ in 0..nv {
            let camera = decode_camera(r)?;
            let px = camera.width * camera.height;
            let rgb = r.f64s(px * 3)?;
            let alpha = r.f64s(px)?;
            views.push(TargetView {
                image: RenderedFrame {
                    width: camera.width,
                    height: camera.height,
                    rgb,
                    alpha,
                },
                camera,
            });
        }
        frames.push(FrameTarget { points, views });
    }
    Ok(Targets { frames })
}

/// Serializes a validated document.
pub fn save(doc: &SceneDocument) -> Result<Vec<u8>> {
    doc.validate()?;
    let mut sections: Vec<([u8; 4], Vec<u8>)> = Vec::new();
    let mut add = |tag: &[u8; 4], f: &dyn Fn(&mut Writer)| {
        let mut w = Writer { buf: Vec::new() };
        f(&mut w);
        sections.push((*tag, w.buf));
    };
    if let Some(c) = &doc.cloud {
        add(b"CLOU", &|w| encode_cloud(w, c));
    }
    if let Some(s) = &doc.skeleton {
        add(b"SKEL", &|w| encode_skeleton(w, s));
    }
    if let Some(p) = &doc.poses {
        add(b"POSE", &|w| encode_poses(w, p));
    }
    if let Some(f) = &doc.field {
        add(b"HEXF", &|w| encode_field(w, f));
    }
    if let Some(s) = &doc.settings {
        add(b"SETT", &|w| {
            w.u32(s.skin_k);
            w.u32(s.smoothing_window);
        });
    }
    if let Some(t) = &doc.targets {
        add(b"TRGT", &|w| encode_targets(w, t));
    }
    let mut out = Writer { buf: Vec::new() };
    out.buf.extend(MAGIC);
    out.u32(VERSION);
    out.u32(sections.len() as u32);
    let mut offset = HEADER_LEN + ENTRY_LEN * sections.len();
    for (tag, body) in &sections {
        out.buf.extend(tag);
        out.u64(offset as u64);
        out.u64(body.len() as u64);
        offset += body.len();
    }
    for (_, body) in &sections {
        out.buf.extend(body);
    }
    Ok(out.buf)
}

/// Parses a container. Errors carry absolute byte offsets.
pub fn load(bytes: &[u8]) -> Result<SceneDocument> {
    load_inner(bytes).map_err(Error::Format)
}

fn load_inner(bytes: &[u8]) -> std::result::Result<SceneDocument, FormatError> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        end: bytes.len(),
    };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    r.pos = MAGIC.len();
    let version_at = r.pos;
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::VersionMismatch {
            found: version,
            expected: VERSION,
            offset: version_at,
        });
    }
    let count = r.u32()? as usize;
    r.ensure(count, ENTRY_LEN)?;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let entry_at = r.pos;
        let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
        let offset = r.u64()? as usize;
        let length = r.u64()? as usize;
        if offset.checked_add(length).map_or(true, |e| e > bytes.len()) {
            return Err(FormatError::Truncated {
                offset: entry_at,
                needed: offset.saturating_add(length),
                available: bytes.len(),
            });
        }
        table.push((tag, offset, length));
    }
    let mut doc = SceneDocument::default();
    let mut seen: Vec<[u8; 4]> = Vec::new();
    for (tag, offset, length) in table {
        if seen.contains(&tag) {
            return Err(FormatError::DuplicateSection {
                tag: String::from_utf8_lossy(&tag).into_owned(),
            });
        }
        seen.push(tag);
        let mut s = Reader {
            buf: bytes,
            pos: offset,
            end: offset + length,
        };
        match &tag {
            b"CLOU" => {
                doc.cloud = Some(decode_cloud(&mut s)?);
                s.finish("cloud section")?;
            }
            b"SKEL" => {
                doc.skeleton = Some(decode_skeleton(&mut s)?);
                s.finish("skeleton section")?;
            }
            b"POSE" => {
                doc.poses = Some(decode_poses(&mut s)?);
                s.finish("pose section")?;
            }
            b"HEXF" => {
                doc.field = Some(decode_field(&mut s)?);
                s.finish("field section")?;
            }
            b"SETT" => {
                doc.settings = Some(Settings {
                    skin_k: s.u32()?,
                    smoothing_window: s.u32()?,
                });
                s.finish("settings section")?;
            }
            b"TRGT" => {
                doc.targets = Some(decode_targets(&mut s)?);
                s.finish("target section")?;
            }
            _ => {}
        }
    }
    if let (Some(sk), Some(p)) = (&doc.skeleton, &doc.poses) {
        if sk.len() != p.joint_count() {
            let at = seen_offset(bytes, b"POSE");
            return Err(FormatError::CountMismatch {
                context: "pose joints vs skeleton",
                offset: at,
                expected: sk.len(),
                found: p.joint_count(),
            });
        }
    }
    Ok(doc)
}

fn seen_offset(bytes: &[u8], tag: &[u8; 4]) -> usize {
    let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    for i in 0..count {
        let e = HEADER_LEN + i * ENTRY_LEN;
        if &bytes[e..e + 4] == tag {
            return u64::from_le_bytes(bytes[e + 4..e + 12].try_into().unwrap()) as usize;
        }
    }
    0
}

pub fn save_file(path: &std::path::Path, doc: &SceneDocument) -> Result<()> {
    std::fs::write(path, save(doc)?)?;
    Ok(())
}

pub fn load_file(path: &std::path::Path) -> Result<SceneDocument> {
    load(&std::fs::read(path)?)
}
