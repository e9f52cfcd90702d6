//! Software EWA splatter with an analytic backward pass.
//!
//! Splats are projected through the local affine approximation of the
//! pinhole map, sorted by view depth (ties by index) and composited front to
//! back. The footprint is a Gaussian with a C1 taper that reaches zero at
//! three standard deviations, so pixel values stay differentiable at the
//! cutoff.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{quat_to_matrix, quat_to_matrix_vjp, Mat3, Quat, Vec3};
use crate::scene::GaussianCloud;
use nalgebra::{Matrix2, Matrix2x3, Vector2};

/// Screen-space dilation added to every projected covariance, in pixels².
pub const DILATION: f64 = 0.3;

/// Squared Mahalanobis radius of the footprint cutoff (3 sigma).
pub const CUTOFF: f64 = 9.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub position: [f64; 3],
    pub target: [f64; 3],
    pub up: [f64; 3],
    /// Vertical field of view in radians.
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
}

/// Camera frame and intrinsics derived from a [`CameraSpec`].
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    /// Rows are right, up, forward.
    pub view: Mat3,
    pub origin: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub near: f64,
}

impl Projection {
    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.view * (p - self.origin)
    }

    /// Pixel coordinates (x right, y down) of a camera-space point.
    pub fn to_pixel(&self, c: &Vec3) -> Vector2<f64> {
        Vector2::new(self.cx + self.fx * c.x / c.z, self.cy - self.fy * c.y / c.z)
    }

    pub fn project(&self, p: &Vec3) -> Option<Vector2<f64>> {
        let c = self.to_camera(p);
        (c.z >= self.near).then(|| self.to_pixel(&c))
    }

    fn jacobian(&self, c: &Vec3) -> Matrix2x3<f64> {
        let iz = 1.0 / c.z;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * c.x * iz * iz,
            0.0,
            -self.fy * iz,
            self.fy * c.y * iz * iz,
        )
    }
}

impl CameraSpec {
    pub fn new(position: Vec3, target: Vec3, up: Vec3, fov_y: f64, width: usize, height: usize) -> Result<Self> {
        let c = Self {
            position: position.into(),
            target: target.into(),
            up: up.into(),
            fov_y,
            width,
            height,
            near: 0.01,
        };
        c.projection()?;
        Ok(c)
    }

    /// Camera on a sphere around `target`, +y up. Azimuth 0 looks down -z
    /// from the +z side; angles in radians.
    pub fn orbit(
        target: Vec3,
        distance: f64,
        azimuth: f64,
        elevation: f64,
        fov_y: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if !(distance > 0.0) {
            return Err(Error::NonPositive {
                what: "camera distance",
                value: distance,
            });
        }
        let dir = Vec3::new(
            elevation.cos() * azimuth.sin(),
            elevation.sin(),
            elevation.cos() * azimuth.cos(),
        );
        Self::new(target + dir * distance, target, Vec3::y(), fov_y, width, height)
    }

    pub fn orbit_degrees(
        target: Vec3,
        distance: f64,
        azimuth_deg: f64,
        elevation_deg: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        Self::orbit(
            target,
            distance,
            azimuth_deg.to_radians(),
            elevation_deg.to_radians(),
            45f64.to_radians(),
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.projection().map(|_| ())
    }

    pub fn projection(&self) -> Result<Projection> {
        if self.width < 1 || self.height < 1 {
            return Err(Error::DegenerateCamera("image dimensions must be at least 1"));
        }
        if !(self.fov_y > 0.0 && self.fov_y < std::f64::consts::PI) {
            return Err(Error::DegenerateCamera("field of view must lie in (0, pi)"));
        }
        if !(self.near > 0.0) {
            return Err(Error::DegenerateCamera("near plane must be positive"));
        }
        let pos = Vec3::from(self.position);
        let fwd = Vec3::from(self.target) - pos;
        if !(fwd.norm() > 0.0) || !fwd.iter().all(|v| v.is_finite()) {
            return Err(Error::DegenerateCamera("position coincides with target"));
        }
        let fwd = fwd.normalize();
        let up = Vec3::from(self.up);
        let right = fwd.cross(&up);
        if !(right.norm() > 1e-9 * up.norm().max(1e-300)) {
            return Err(Error::DegenerateCamera("up vector parallel to view direction"));
        }
        let right = right.normalize();
        let cam_up = right.cross(&fwd);
        let fy = self.height as f64 / (2.0 * (self.fov_y / 2.0).tan());
        Ok(Projection {
            view: Mat3::from_rows(&[right.transpose(), cam_up.transpose(), fwd.transpose()]),
            origin: pos,
            fx: fy,
            fy,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
            near: self.near,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub width: usize,
    pub height: usize,
    /// Row-major, row 0 at the top, three channels per pixel.
    pub rgb: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl RenderedFrame {
    pub fn blank(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![0.0; width * height * 3],
            alpha: vec![0.0; width * height],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> ([f64; 3], f64) {
        let i = y * self.width + x;
        ([self.rgb[3 * i], self.rgb[3 * i + 1], self.rgb[3 * i + 2]], self.alpha[i])
    }

    pub fn to_rgba8(&self) -> Vec<u8> {
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let mut out = Vec::with_capacity(self.alpha.len() * 4);
        for i in 0..self.alpha.len() {
            out.extend([q(self.rgb[3 * i]), q(self.rgb[3 * i + 1]), q(self.rgb[3 * i + 2]), q(self.alpha[i])]);
        }
        out
    }

    /// 8-bit RGBA PNG bytes.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgba);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
            w.write_image_data(&self.to_rgba8()).map_err(|e| Error::Png(e.to_string()))?;
        }
        Ok(buf)
    }

    pub fn write_png(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    pub fn squared_difference(&self, other: &RenderedFrame) -> f64 {
        let a: f64 = self.rgb.iter().zip(&other.rgb).map(|(x, y)| (x - y).powi(2)).sum();
        let b: f64 = self.alpha.iter().zip(&other.alpha).map(|(x, y)| (x - y).powi(2)).sum();
        a + b
    }
}

/// Decodes an RGBA8 PNG into a frame.
pub fn decode_png(bytes: &[u8]) -> Result<RenderedFrame> {
    let dec = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = dec.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    if info.color_type != png::ColorType::Rgba || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png("expected 8-bit RGBA".into()));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut f = RenderedFrame::blank(w, h);
    for i in 0..w * h {
        for c in 0..3 {
            f.rgb[3 * i + c] = buf[4 * i + c] as f64 / 255.0;
        }
        f.alpha[i] = buf[4 * i + 3] as f64 / 255.0;
    }
    Ok(f)
}

const TAPER_NORM: f64 = 1.0 - 5.5 * 0.011108996538242306;
const E_CUT: f64 = 0.011108996538242306; // exp(-4.5)

/// Footprint weight at squared Mahalanobis distance `m`; 1 at the center.
pub fn footprint(m: f64) -> f64 {
    if m >= CUTOFF {
        0.0
    } else {
        ((-0.5 * m).exp() - E_CUT * (1.0 - 0.5 * (m - CUTOFF))) / TAPER_NORM
    }
}

fn footprint_derivative(m: f64) -> f64 {
    if m >= CUTOFF {
        0.0
    } else {
        0.5 * (E_CUT - (-0.5 * m).exp()) / TAPER_NORM
    }
}

/// One splat projected to the image.
#[derive(Debug, Clone, Copy)]
struct Projected {
    index: usize,
    cam: Vec3,
    mean: Vector2<f64>,
    cov_c: Mat3,
    jac: Matrix2x3<f64>,
    conic: Matrix2<f64>,
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

fn project_cloud(cloud: &GaussianCloud, proj: &Projection, width: usize, height: usize) -> Vec<Projected> {
    let mut out = Vec::new();
    for i in 0..cloud.len() {
        if cloud.opacities[i] <= 0.0 {
            continue;
        }
        let cam = proj.to_camera(&cloud.positions[i]);
        if cam.z < proj.near {
            continue;
        }
        let m = quat_to_matrix(&cloud.rotations[i]) * Mat3::from_diagonal(&cloud.scales[i]);
        let cov_c = proj.view * (m * m.transpose()) * proj.view.transpose();
        let jac = proj.jacobian(&cam);
        let cov2 = jac * cov_c * jac.transpose() + Matrix2::identity() * DILATION;
        let Some(conic) = cov2.try_inverse() else { continue };
        let mean = proj.to_pixel(&cam);
        let mid = 0.5 * (cov2[(0, 0)] + cov2[(1, 1)]);
        let det = cov2.determinant();
        let lmax = mid + (mid * mid - det).max(0.0).sqrt();
        let r = 3.0 * lmax.sqrt();
        if !(r.is_finite() && mean.x.is_finite() && mean.y.is_finite()) {
            continue;
        }
        // Pixel centers at k + 0.5 inside [mean - r, mean + r].
        let lo_x = (mean.x - r - 0.5).ceil().max(0.0);
        let hi_x = (mean.x + r - 0.5).floor().min(width as f64 - 1.0);
        let lo_y = (mean.y - r - 0.5).ceil().max(0.0);
        let hi_y = (mean.y + r - 0.5).floor().min(height as f64 - 1.0);
        if lo_x > hi_x || lo_y > hi_y {
            continue;
        }
        out.push(Projected {
            index: i,
            cam,
            mean,
            cov_c,
            jac,
            conic,
            x0: lo_x as usize,
            x1: hi_x as usize,
            y0: lo_y as usize,
            y1: hi_y as usize,
        });
    }
    out.sort_by(|a, b| a.cam.z.total_cmp(&b.cam.z).then(a.index.cmp(&b.index)));
    out
}

fn mahalanobis(s: &Projected, px: usize, py: usize) -> (Vector2<f64>, f64) {
    let d = Vector2::new(px as f64 + 0.5, py as f64 + 0.5) - s.mean;
    (d, (d.transpose() * s.conic * d)[0])
}

/// Renders `cloud` through `camera`. Background is transparent black.
pub fn render(cloud: &GaussianCloud, camera: &CameraSpec) -> Result<RenderedFrame> {
    let proj = camera.projection()?;
    let (w, h) = (camera.width, camera.height);
    let mut frame = RenderedFrame::blank(w, h);
    let mut trans = vec![1.0; w * h];
    for s in project_cloud(cloud, &proj, w, h) {
        let o = cloud.opacities[s.index];
        let c = cloud.colors[s.index];
        for py in s.y0..=s.y1 {
            for px in s.x0..=s.x1 {
                let (_, m) = mahalanobis(&s, px, py);
                let a = o * footprint(m);
                if a <= 0.0 {
                    continue;
                }
                let k = py * w + px;
                let wgt = trans[k] * a;
                for ch in 0..3 {
                    frame.rgb[3 * k + ch] += wgt * c[ch];
                }
                frame.alpha[k] += wgt;
                trans[k] *= 1.0 - a;
            }
        }
    }
    for v in frame.rgb.iter_mut().chain(frame.alpha.iter_mut()) {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(frame)
}

/// Gradients of a scalar loss with respect to every splat attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatGrad {
    pub position: Vec<Vec3>,
    pub rotation: Vec<Quat>,
    pub scale: Vec<Vec3>,
    pub opacity: Vec<f64>,
    pub color: Vec<Vec3>,
}

impl SplatGrad {
    pub fn zeros(n: usize) -> Self {
        Self {
            position: vec![Vec3::zeros(); n],
            rotation: vec![Quat::new(0.0, 0.0, 0.0, 0.0); n],
            scale: vec![Vec3::zeros(); n],
            opacity: vec![0.0; n],
            color: vec![Vec3::zeros(); n],
        }
    }
}

/// Pulls `dL/d rgb` and `dL/d alpha` (same layout as [`RenderedFrame`])
/// back to the splats. The final clamp to `[0, 1]` is treated as identity.
pub fn render_vjp(cloud: &GaussianCloud, camera: &CameraSpec, grad_rgb: &[f64], grad_alpha: &[f64]) -> Result<SplatGrad> {
    let proj = camera.projection()?;
    let (w, h) = (camera.width, camera.height);
    if grad_rgb.len() != 3 * w * h || grad_alpha.len() != w * h {
        return Err(Error::DimensionMismatch {
            context: "render gradient image",
            expected: w * h,
            found: grad_alpha.len(),
        });
    }
    let splats = project_cloud(cloud, &proj, w, h);
    let mut lists: Vec<Vec<u32>> = vec![Vec::new(); w * h];
    for (si, s) in splats.iter().enumerate() {
        for py in s.y0..=s.y1 {
            for px in s.x0..=s.x1 {
                let k = py * w + px;
                if grad_alpha[k] != 0.0 || grad_rgb[3 * k..3 * k + 3].iter().any(|&g| g != 0.0) {
                    lists[py * w + px].push(si as u32);
                }
            }
        }
    }
    let mut g_mean = vec![Vector2::zeros(); splats.len()];
    let mut g_cov2 = vec![Matrix2::zeros(); splats.len()];
    let mut out = SplatGrad::zeros(cloud.len());
    let mut alphas: Vec<(usize, f64, f64, Vector2<f64>)> = Vec::new();
    for k in 0..w * h {
        if lists[k].is_empty() {
            continue;
        }
        let (px, py) = (k % w, k / w);
        let g = [grad_rgb[3 * k], grad_rgb[3 * k + 1], grad_rgb[3 * k + 2], grad_alpha[k]];
        alphas.clear();
        for &si in &lists[k] {
            let s = &splats[si as usize];
            let (d, m) = mahalanobis(s, px, py);
            let a = cloud.opacities[s.index] * footprint(m);
            if a > 0.0 {
                alphas.push((si as usize, a, m, d));
            }
        }
        // Transmittance in front of each splat.
        let mut tr = Vec::with_capacity(alphas.len());
        let mut t = 1.0;
        for &(_, a, _, _) in &alphas {
            tr.push(t);
            t *= 1.0 - a;
        }
        // Suffix of what lies behind, as seen through splat i.
        let mut back = [0.0; 4];
        for (j, &(si, a, m, d)) in alphas.iter().enumerate().rev() {
            let s = &splats[si];
            let c = cloud.colors[s.index];
            let val = [c.x, c.y, c.z, 1.0];
            let t = tr[j];
            let mut g_a = 0.0;
            for ch in 0..4 {
                g_a += g[ch] * t * (val[ch] - back[ch]);
            }
            for ch in 0..3 {
                out.color[s.index][ch] += g[ch] * t * a;
            }
            for ch in 0..4 {
                back[ch] = val[ch] * a + (1.0 - a) * back[ch];
            }
            let o = cloud.opacities[s.index];
            out.opacity[s.index] += g_a * footprint(m);
            let g_m = g_a * o * footprint_derivative(m);
            if g_m != 0.0 {
                let cd = s.conic * d;
                g_mean[si] -= cd * (2.0 * g_m);
                g_cov2[si] -= cd * cd.transpose() * g_m;
            }
        }
    }
    for (si, s) in splats.iter().enumerate() {
        let i = s.index;
        let gs2 = 0.5 * (g_cov2[si] + g_cov2[si].transpose());
        let gm = g_mean[si];
        let c = s.cam;
        let iz = 1.0 / c.z;
        // Mean: u = cx + fx x/z, v = cy - fy y/z.
        let mut g_cam = Vec3::new(
            gm.x * proj.fx * iz,
            -gm.y * proj.fy * iz,
            -gm.x * proj.fx * c.x * iz * iz + gm.y * proj.fy * c.y * iz * iz,
        );
        // Covariance: cov2 = J cov_c J^T + dilation.
        let g_j = 2.0 * gs2 * s.jac * s.cov_c;
        let fx = proj.fx;
        let fy = proj.fy;
        g_cam.x += g_j[(0, 2)] * (-fx * iz * iz);
        g_cam.y += g_j[(1, 2)] * (fy * iz * iz);
        g_cam.z += g_j[(0, 0)] * (-fx * iz * iz)
            + g_j[(0, 2)] * (2.0 * fx * c.x * iz * iz * iz)
            + g_j[(1, 1)] * (fy * iz * iz)
            + g_j[(1, 2)] * (-2.0 * fy * c.y * iz * iz * iz);
        out.position[i] += proj.view.transpose() * g_cam;
        let g_cov_c = s.jac.transpose() * gs2 * s.jac;
        let g_cov = proj.view.transpose() * g_cov_c * proj.view;
        let r = quat_to_matrix(&cloud.rotations[i]);
        let m = r * Mat3::from_diagonal(&cloud.scales[i]);
        let g_m = 2.0 * g_cov * m;
        let g_r = g_m * Mat3::from_diagonal(&cloud.scales[i]);
        for a in 0..3 {
            out.scale[i][a] += r.column(a).dot(&g_m.column(a));
        }
        out.rotation[i] += quat_to_matrix_vjp(&cloud.rotations[i], &g_r);
    }
    Ok(out)
}
