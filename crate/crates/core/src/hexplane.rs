//! Six-plane factorized 4D feature field with an MLP decoder.
//!
//! Planes cover the axis pairs xy, xz, yz, xt, yt, zt. A query samples each
//! plane bilinearly and fuses the six samples by elementwise product. The
//! decoder maps the fused feature to position, rotation and log-scale deltas.
//!
//! Parameters are exposed as one flat vector: the six planes in the order
//! above (row-major, feature fastest), then each decoder layer as weights
//! (output-major) followed by biases, trunk first, then the position,
//! rotation and scale heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{normalize, normalize_vjp, quat, Quat, Vec3};
use crate::scene::GaussianCloud;

/// Axis pairs of the six planes; axis 3 is time.
pub const PLANE_AXES: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)];

/// Head output widths: position, rotation (wxyz), log-scale.
pub const HEAD_WIDTHS: [usize; 3] = [3, 4, 3];

const OUTPUTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RotationDeltaMode {
    /// `normalize(q + dq)`.
    #[default]
    Additive,
    /// `normalize(normalize(1 + dq) * q)`.
    Multiplicative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub spatial_resolution: usize,
    /// Time-axis resolution; `None` uses one node per frame.
    pub temporal_resolution: Option<usize>,
    pub feature_width: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub init_noise: f64,
    pub rotation_mode: RotationDeltaMode,
    pub seed: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            spatial_resolution: 64,
            temporal_resolution: None,
            feature_width: 32,
            hidden_width: 64,
            hidden_layers: 2,
            init_noise: 1e-2,
            rotation_mode: RotationDeltaMode::Additive,
            seed: 0,
        }
    }
}

impl FieldConfig {
    /// Closed-form parameter count for `frames` frames.
    pub fn parameter_count(&self, frames: usize) -> usize {
        let rs = self.spatial_resolution;
        let rt = self.temporal_resolution.unwrap_or(frames);
        let c = self.feature_width;
        let planes = 3 * rs * rs * c + 3 * rs * rt * c;
        let mut decoder = 0;
        let mut width = c;
        for _ in 0..self.hidden_layers {
            decoder += width * self.hidden_width + self.hidden_width;
            width = self.hidden_width;
        }
        decoder += width * OUTPUTS + OUTPUTS;
        planes + decoder
    }
}

/// One fully connected layer, `weights[o * inputs + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn param_len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            out.push(self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>());
        }
    }

    /// Accumulates parameter gradients into `grad` (this layer's slice) and
    /// returns the gradient on the input.
    fn backward(&self, x: &[f64], g_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let (gw, gb) = grad.split_at_mut(self.weights.len());
        let mut g_in = vec![0.0; self.inputs];
        for o in 0..self.outputs {
            let g = g_out[o];
            if g == 0.0 {
                continue;
            }
            gb[o] += g;
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            for i in 0..self.inputs {
                gw[o * self.inputs + i] += g * x[i];
                g_in[i] += g * row[i];
            }
        }
        g_in
    }
}

/// ReLU trunk plus three linear heads.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    pub trunk: Vec<Layer>,
    pub heads: [Layer; 3],
}

impl DecoderWeights {
    /// Trunk weights uniform in `±1/sqrt(fan_in)`, biases zero, heads zero.
    pub fn new(input: usize, hidden: usize, layers: usize, rng: &mut impl Rng) -> Self {
        let mut trunk = Vec::with_capacity(layers);
        let mut width = input;
        for _ in 0..layers {
            let mut l = Layer::zeros(width, hidden);
            let bound = 1.0 / (width as f64).sqrt();
            for w in &mut l.weights {
                *w = rng.gen_range(-bound..bound);
            }
            trunk.push(l);
            width = hidden;
        }
        let heads = HEAD_WIDTHS.map(|o| Layer::zeros(width, o));
        Self { trunk, heads }
    }

    pub fn from_layers(trunk: Vec<Layer>, heads: [Layer; 3]) -> Result<Self> {
        let d = Self { trunk, heads };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let mut width = self.input_width();
        for l in self.trunk.iter().chain(self.heads.iter()) {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::DimensionMismatch {
                    context: "decoder layer storage",
                    expected: l.inputs * l.outputs,
                    found: l.weights.len(),
                });
            }
        }
        for l in &self.trunk {
            if l.inputs != width {
                return Err(Error::DimensionMismatch {
                    context: "decoder trunk",
                    expected: width,
                    found: l.inputs,
                });
            }
            width = l.outputs;
        }
        for (h, &o) in self.heads.iter().zip(&HEAD_WIDTHS) {
            if h.inputs != width || h.outputs != o {
                return Err(Error::DimensionMismatch {
                    context: "decoder head",
                    expected: width,
                    found: h.inputs,
                });
            }
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.trunk.first().map_or(self.heads[0].inputs, |l| l.inputs)
    }

    pub fn param_len(&self) -> usize {
        self.layers().map(Layer::param_len).sum()
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.trunk.iter().chain(self.heads.iter())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.trunk.iter_mut().chain(self.heads.iter_mut())
    }

    fn forward(&self, features: &[f64]) -> DecoderTrace {
        let mut acts = vec![features.to_vec()];
        let mut buf = Vec::new();
        for l in &self.trunk {
            l.forward(acts.last().unwrap(), &mut buf);
            for v in &mut buf {
                *v = v.max(0.0);
            }
            acts.push(buf.clone());
        }
        let top = acts.last().unwrap();
        let mut out = [0.0; OUTPUTS];
        let mut k = 0;
        for h in &self.heads {
            h.forward(top, &mut buf);
            out[k..k + h.outputs].copy_from_slice(&buf);
            k += h.outputs;
        }
        DecoderTrace { acts, out }
    }

    /// `grad` is this decoder's slice of the flat gradient.
    fn backward(&self, trace: &DecoderTrace, g_out: &[f64; OUTPUTS], grad: &mut [f64]) -> Vec<f64> {
        let trunk_len: usize = self.trunk.iter().map(Layer::param_len).sum();
        let (g_trunk, mut g_heads) = grad.split_at_mut(trunk_len);
        let top = trace.acts.last().unwrap();
        let mut g_top = vec![0.0; top.len()];
        let mut k = 0;
        for h in &self.heads {
            let (gh, rest) = std::mem::take(&mut g_heads).split_at_mut(h.param_len());
            g_heads = rest;
            let g = h.backward(top, &g_out[k..k + h.outputs], gh);
            for (a, b) in g_top.iter_mut().zip(g) {
                *a += b;
            }
            k += h.outputs;
        }
        let mut offsets = Vec::with_capacity(self.trunk.len());
        let mut off = 0;
        for l in &self.trunk {
            offsets.push(off);
            off += l.param_len();
        }
        let mut g = g_top;
        for (li, l) in self.trunk.iter().enumerate().rev() {
            // Post-activation zero means the unit was clamped.
            let post = &trace.acts[li + 1];
            for (gv, &a) in g.iter_mut().zip(post) {
                if a <= 0.0 {
                    *gv = 0.0;
                }
            }
            let slice = &mut g_trunk[offsets[li]..offsets[li] + l.param_len()];
            g = l.backward(&trace.acts[li], &g, slice);
        }
        g
    }
}

struct DecoderTrace {
    acts: Vec<Vec<f64>>,
    out: [f64; OUTPUTS],
}

/// One `rows x cols x width` feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Plane {
    fn at(&self, i: usize, j: usize, width: usize) -> &[f64] {
        let o = (i * self.cols + j) * width;
        &self.data[o..o + width]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HexplaneField {
    pub planes: Vec<Plane>,
    pub bounds_min: Vec3,
    pub bounds_max: Vec3,
    /// Upper time bound; queries accept `t` in `[0, time_max]`.
    pub time_max: f64,
    pub feature_width: usize,
    pub decoder: DecoderWeights,
    pub rotation_mode: RotationDeltaMode,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianDeltas {
    pub d_position: Vec<Vec3>,
    pub d_rotation: Vec<Quat>,
    pub d_scale: Vec<Vec3>,
}

impl GaussianDeltas {
    pub fn zeros(n: usize) -> Self {
        Self {
            d_position: vec![Vec3::zeros(); n],
            d_rotation: vec![quat(0.0, 0.0, 0.0, 0.0); n],
            d_scale: vec![Vec3::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.d_position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_position.is_empty()
    }

    fn push(&mut self, o: &[f64; OUTPUTS]) {
        self.d_position.push(Vec3::new(o[0], o[1], o[2]));
        self.d_rotation.push(quat(o[3], o[4], o[5], o[6]));
        self.d_scale.push(Vec3::new(o[7], o[8], o[9]));
    }
}

/// Bilinear footprint of one query on one plane.
#[derive(Debug, Clone, Copy)]
struct PlaneSample {
    i0: usize,
    j0: usize,
    i1: usize,
    j1: usize,
    fi: f64,
    fj: f64,
    /// d(grid coordinate)/d(world coordinate), zero when clamped.
    di: f64,
    dj: f64,
}

/// Cached forward pass of one query.
pub struct QueryTrace {
    samples: [PlaneSample; 6],
    values: Vec<Vec<f64>>,
    features: Vec<f64>,
    decoder: DecoderTrace,
}

impl QueryTrace {
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn output(&self) -> [f64; OUTPUTS] {
        self.decoder.out
    }

    /// On/off state of every trunk unit; the decoder is smooth in its inputs
    /// and parameters while this pattern stays fixed.
    pub fn active_units(&self) -> Vec<bool> {
        self.decoder.acts[1..].iter().flatten().map(|&a| a > 0.0).collect()
    }
}

fn grid_coord(value: f64, lo: f64, hi: f64, res: usize) -> (usize, usize, f64, f64) {
    if res == 1 {
        return (0, 0, 0.0, 0.0);
    }
    let scale = (res - 1) as f64 / (hi - lo);
    let g = (value - lo) * scale;
    let max = (res - 1) as f64;
    let (g, d) = if g <= 0.0 {
        (0.0, 0.0)
    } else if g >= max {
        (max, 0.0)
    } else {
        (g, scale)
    };
    let i0 = (g.floor() as usize).min(res - 2);
    (i0, i0 + 1, g - i0 as f64, d)
}

impl HexplaneField {
    /// Fresh field over the given box for `frames` frames.
    pub fn new(config: &FieldConfig, bounds_min: Vec3, bounds_max: Vec3, frames: usize) -> Result<Self> {
        if frames == 0 {
            return Err(Error::NonPositive {
                what: "field frame count",
                value: 0.0,
            });
        }
        for (what, v) in [
            ("spatial_resolution", config.spatial_resolution),
            ("feature_width", config.feature_width),
            ("hidden_width", config.hidden_width),
        ] {
            if v == 0 {
                return Err(Error::NonPositive { what, value: 0.0 });
            }
        }
        let rt = config.temporal_resolution.unwrap_or(frames);
        if rt == 0 {
            return Err(Error::NonPositive {
                what: "temporal_resolution",
                value: 0.0,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config.feature_width;
        let rs = config.spatial_resolution;
        let planes = PLANE_AXES
            .iter()
            .map(|&(_, b)| {
                let cols = if b == 3 { rt } else { rs };
                let mut data = vec![1.0; rs * cols * c];
                if b == 3 && config.init_noise > 0.0 {
                    for v in &mut data {
                        *v += rng.gen_range(-config.init_noise..config.init_noise);
                    }
                }
                Plane { rows: rs, cols, data }
            })
            .collect();
        let decoder = DecoderWeights::new(c, config.hidden_width, config.hidden_layers, &mut rng);
        let field = Self {
            planes,
            bounds_min,
            bounds_max,
            time_max: (frames - 1) as f64,
            feature_width: c,
            decoder,
            rotation_mode: config.rotation_mode,
        };
        field.validate()?;
        Ok(field)
    }

    /// Box around a cloud, padded by `margin` (relative) on every axis.
    pub fn for_cloud(config: &FieldConfig, cloud: &GaussianCloud, frames: usize, margin: f64) -> Result<Self> {
        let (lo, hi) = cloud.bounds();
        let pad = (hi - lo).map(|e| e.max(1e-3)) * margin + Vec3::repeat(1e-3);
        Self::new(config, lo - pad, hi + pad, frames)
    }

    pub fn validate(&self) -> Result<()> {
        if self.planes.len() != 6 {
            return Err(Error::DimensionMismatch {
                context: "hexplane plane count",
                expected: 6,
                found: self.planes.len(),
            });
        }
        for a in 0..3 {
            let extent = self.bounds_max[a] - self.bounds_min[a];
            if !(extent > 0.0) {
                return Err(Error::NonPositive {
                    what: "hexplane spatial extent",
                    value: extent,
                });
            }
        }
        if !(self.time_max >= 0.0) {
            return Err(Error::NonPositive {
                what: "hexplane time bound",
                value: self.time_max,
            });
        }
        let res = self.resolutions();
        for (k, (p, &(a, b))) in self.planes.iter().zip(&PLANE_AXES).enumerate() {
            if p.rows != res[a] || p.cols != res[b] || p.data.len() != p.rows * p.cols * self.feature_width {
                return Err(Error::DimensionMismatch {
                    context: "hexplane plane shape",
                    expected: res[a] * res[b] * self.feature_width,
                    found: k,
                });
            }
        }
        self.decoder.validate()?;
        if self.decoder.input_width() != self.feature_width {
            return Err(Error::DimensionMismatch {
                context: "decoder input width",
                expected: self.feature_width,
                found: self.decoder.input_width(),
            });
        }
        Ok(())
    }

    /// Resolution along x, y, z, t.
    pub fn resolutions(&self) -> [usize; 4] {
        let p = &self.planes;
        [p[0].rows, p[0].cols, p[1].cols, p[3].cols]
    }

    pub fn frame_count(&self) -> usize {
        self.time_max as usize + 1
    }

    pub fn plane_param_len(&self) -> usize {
        self.planes.iter().map(|p| p.data.len()).sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.plane_param_len() + self.decoder.param_len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.parameter_count());
        for p in &self.planes {
            v.extend_from_slice(&p.data);
        }
        for l in self.decoder.layers() {
            v.extend_from_slice(&l.weights);
            v.extend_from_slice(&l.bias);
        }
        v
    }

    pub fn set_params(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.parameter_count() {
            return Err(Error::DimensionMismatch {
                context: "hexplane parameters",
                expected: self.parameter_count(),
                found: v.len(),
            });
        }
        let mut off = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&v[off..off + dst.len()]);
            off += dst.len();
        };
        for p in &mut self.planes {
            take(&mut p.data);
        }
        for l in self.decoder.layers_mut() {
            take(&mut l.weights);
            take(&mut l.bias);
        }
        Ok(())
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.time_max).contains(&t) {
            return Err(Error::TimeOutOfBounds { t, max: self.time_max });
        }
        Ok(())
    }

    fn trace(&self, p: &Vec3, t: f64) -> QueryTrace {
        let res = self.resolutions();
        let coord = |axis: usize| {
            if axis == 3 {
                grid_coord(t, 0.0, self.time_max.max(f64::MIN_POSITIVE), res[3])
            } else {
                grid_coord(p[axis], self.bounds_min[axis], self.bounds_max[axis], res[axis])
            }
        };
        let coords = [coord(0), coord(1), coord(2), coord(3)];
        let c = self.feature_width;
        let mut samples = [PlaneSample {
            i0: 0,
            j0: 0,
            i1: 0,
            j1: 0,
            fi: 0.0,
            fj: 0.0,
            di: 0.0,
            dj: 0.0,
        }; 6];
        let mut values = Vec::with_capacity(6);
        let mut features = vec![1.0; c];
        for (k, &(a, b)) in PLANE_AXES.iter().enumerate() {
            let (i0, i1, fi, di) = coords[a];
            let (j0, j1, fj, dj) = coords[b];
            let s = PlaneSample {
                i0,
                j0,
                i1,
                j1,
                fi,
                fj,
                di,
                dj,
            };
            samples[k] = s;
            let pl = &self.planes[k];
            let (v00, v10, v01, v11) = (pl.at(i0, j0, c), pl.at(i1, j0, c), pl.at(i0, j1, c), pl.at(i1, j1, c));
            let w = [(1.0 - fi) * (1.0 - fj), fi * (1.0 - fj), (1.0 - fi) * fj, fi * fj];
            let val: Vec<f64> = (0..c)
                .map(|ch| w[0] * v00[ch] + w[1] * v10[ch] + w[2] * v01[ch] + w[3] * v11[ch])
                .collect();
            for (f, v) in features.iter_mut().zip(&val) {
                *f *= v;
            }
            values.push(val);
        }
        let decoder = self.decoder.forward(&features);
        QueryTrace {
            samples,
            values,
            features,
            decoder,
        }
    }

    /// Fused features for each point at time `t`. Out-of-box points clamp.
    pub fn query_features(&self, points: &[Vec3], t: f64) -> Result<Vec<Vec<f64>>> {
        self.check_time(t)?;
        Ok(points.iter().map(|p| self.trace(p, t).features).collect())
    }

    /// Decoded deltas for each point at time `t`.
    pub fn query_deltas(&self, points: &[Vec3], t: f64) -> Result<GaussianDeltas> {
        self.check_time(t)?;
        let mut d = GaussianDeltas::default();
        for p in points {
            d.push(&self.trace(p, t).decoder.out);
        }
        Ok(d)
    }

    pub fn query_traced(&self, points: &[Vec3], t: f64) -> Result<Vec<QueryTrace>> {
        self.check_time(t)?;
        Ok(points.iter().map(|p| self.trace(p, t)).collect())
    }

    /// Backpropagates a gradient on one query's outputs into `grad` (flat
    /// parameter layout) and returns the gradient on the query point.
    pub fn query_vjp(&self, trace: &QueryTrace, g_out: &[f64; OUTPUTS], grad: &mut [f64]) -> Vec3 {
        let c = self.feature_width;
        let plane_len = self.plane_param_len();
        let (g_planes, g_dec) = grad.split_at_mut(plane_len);
        let g_feat = self.decoder.backward(&trace.decoder, g_out, g_dec);
        if g_feat.iter().all(|&g| g == 0.0) {
            return Vec3::zeros();
        }
        // Product rule via prefix/suffix products, so zero samples are safe.
        let mut prefix = vec![vec![1.0; c]; 7];
        for k in 0..6 {
            for ch in 0..c {
                prefix[k + 1][ch] = prefix[k][ch] * trace.values[k][ch];
            }
        }
        let mut suffix = vec![1.0; c];
        let mut g_point = Vec3::zeros();
        let mut off = plane_len;
        for k in (0..6).rev() {
            let pl = &self.planes[k];
            off -= pl.data.len();
            let s = trace.samples[k];
            let gs: Vec<f64> = (0..c).map(|ch| g_feat[ch] * prefix[k][ch] * suffix[ch]).collect();
            let w = [(1.0 - s.fi) * (1.0 - s.fj), s.fi * (1.0 - s.fj), (1.0 - s.fi) * s.fj, s.fi * s.fj];
            let corners = [(s.i0, s.j0), (s.i1, s.j0), (s.i0, s.j1), (s.i1, s.j1)];
            for (&(i, j), &wk) in corners.iter().zip(&w) {
                if wk == 0.0 {
                    continue;
                }
                let base = off + (i * pl.cols + j) * c;
                for ch in 0..c {
                    g_planes[base + ch] += wk * gs[ch];
                }
            }
            let (a, b) = PLANE_AXES[k];
            if s.di != 0.0 || s.dj != 0.0 {
                let (v00, v10, v01, v11) =
                    (pl.at(s.i0, s.j0, c), pl.at(s.i1, s.j0, c), pl.at(s.i0, s.j1, c), pl.at(s.i1, s.j1, c));
                let mut d_fi = 0.0;
                let mut d_fj = 0.0;
                for ch in 0..c {
                    d_fi += gs[ch] * ((1.0 - s.fj) * (v10[ch] - v00[ch]) + s.fj * (v11[ch] - v01[ch]));
                    d_fj += gs[ch] * ((1.0 - s.fi) * (v01[ch] - v00[ch]) + s.fi * (v11[ch] - v10[ch]));
                }
                if a < 3 {
                    g_point[a] += d_fi * s.di;
                }
                if b < 3 {
                    g_point[b] += d_fj * s.dj;
                }
            }
            for ch in 0..c {
                suffix[ch] *= trace.values[k][ch];
            }
        }
        g_point
    }

    /// Sum over planes of the mean squared difference between adjacent
    /// nodes, pooled over both plane axes and all channels.
    pub fn tv_regularizer(&self) -> f64 {
        self.tv_impl(None)
    }

    /// Adds `scale * d(tv)/d(params)` into the plane part of `grad`.
    pub fn tv_vjp(&self, scale: f64, grad: &mut [f64]) -> f64 {
        self.tv_impl(Some((scale, grad)))
    }

    fn tv_impl(&self, mut grad: Option<(f64, &mut [f64])>) -> f64 {
        let c = self.feature_width;
        let mut total = 0.0;
        let mut off = 0;
        for pl in &self.planes {
            let pairs = ((pl.rows.saturating_sub(1)) * pl.cols + pl.rows * (pl.cols.saturating_sub(1))) * c;
            if pairs > 0 {
                let mut sum = 0.0;
                let inv = 1.0 / pairs as f64;
                let mut visit = |a: usize, b: usize, grad: &mut Option<(f64, &mut [f64])>| {
                    let d = pl.data[a] - pl.data[b];
                    sum += d * d;
                    if let Some((s, g)) = grad.as_mut() {
                        let v = 2.0 * d * inv * *s;
                        g[off + a] += v;
                        g[off + b] -= v;
                    }
                };
                for i in 0..pl.rows {
                    for j in 0..pl.cols {
                        let base = (i * pl.cols + j) * c;
                        for ch in 0..c {
                            if i + 1 < pl.rows {
                                visit(base + pl.cols * c + ch, base + ch, &mut grad);
                            }
                            if j + 1 < pl.cols {
                                visit(base + c + ch, base + ch, &mut grad);
                            }
                        }
                    }
                }
                total += sum * inv;
            }
            off += pl.data.len();
        }
        total
    }
}

/// Runs the decoder on precomputed features.
pub fn decode(decoder: &DecoderWeights, features: &[Vec<f64>]) -> Result<GaussianDeltas> {
    let width = decoder.input_width();
    let mut d = GaussianDeltas::default();
    for f in features {
        if f.len() != width {
            return Err(Error::DimensionMismatch {
                context: "decoder input",
                expected: width,
                found: f.len(),
            });
        }
        d.push(&decoder.forward(f).out);
    }
    Ok(d)
}

fn refine_rotation(q: &Quat, dq: &Quat, mode: RotationDeltaMode) -> Quat {
    match mode {
        RotationDeltaMode::Additive => normalize(&(q + dq)),
        RotationDeltaMode::Multiplicative => {
            let d = normalize(&(quat(1.0, 0.0, 0.0, 0.0) + dq));
            normalize(&(d * q))
        }
    }
}

/// Applies deltas: positions add, rotations per `mode`, scales multiply by
/// `exp(ds)`. Opacities and colors pass through.
pub fn apply_refinement(cloud_r: &GaussianCloud, deltas: &GaussianDeltas, mode: RotationDeltaMode) -> Result<GaussianCloud> {
    let n = cloud_r.len();
    for (ctx, len) in [
        ("d_position", deltas.d_position.len()),
        ("d_rotation", deltas.d_rotation.len()),
        ("d_scale", deltas.d_scale.len()),
    ] {
        if len != n {
            return Err(Error::DimensionMismatch {
                context: ctx,
                expected: n,
                found: len,
            });
        }
    }
    Ok(GaussianCloud {
        positions: cloud_r.positions.iter().zip(&deltas.d_position).map(|(p, d)| p + d).collect(),
        rotations: cloud_r
            .rotations
            .iter()
            .zip(&deltas.d_rotation)
            .map(|(q, d)| refine_rotation(q, d, mode))
            .collect(),
        scales: cloud_r
            .scales
            .iter()
            .zip(&deltas.d_scale)
            .map(|(s, d)| s.component_mul(&d.map(f64::exp)))
            .collect(),
        opacities: cloud_r.opacities.clone(),
        colors: cloud_r.colors.clone(),
    })
}

/// Gradients flowing out of the refinement step for one splat.
#[derive(Debug, Clone, Copy)]
pub struct RefineGrad {
    pub position: Vec3,
    pub rotation: Quat,
    pub scale: Vec3,
}

impl HexplaneField {
    /// Full refinement of a rigidly deformed cloud at frame time `t`, with
    /// the traces needed for [`HexplaneField::refine_vjp`].
    pub fn refine(&self, cloud_r: &GaussianCloud, t: f64) -> Result<(GaussianCloud, Vec<QueryTrace>)> {
        let traces = self.query_traced(&cloud_r.positions, t)?;
        let mut d = GaussianDeltas::default();
        for tr in &traces {
            d.push(&tr.decoder.out);
        }
        Ok((apply_refinement(cloud_r, &d, self.rotation_mode)?, traces))
    }

    /// Pulls output-cloud gradients back to the input cloud and accumulates
    /// field parameter gradients into `grad`.
    pub fn refine_vjp(
        &self,
        cloud_r: &GaussianCloud,
        traces: &[QueryTrace],
        g_positions: &[Vec3],
        g_rotations: &[Quat],
        g_scales: &[Vec3],
        grad: &mut [f64],
    ) -> Vec<RefineGrad> {
        let mut out = Vec::with_capacity(cloud_r.len());
        for i in 0..cloud_r.len() {
            let o = traces[i].decoder.out;
            let dq = quat(o[3], o[4], o[5], o[6]);
            let ds = Vec3::new(o[7], o[8], o[9]);
            let q = cloud_r.rotations[i];
            let (g_dq, g_q) = match self.rotation_mode {
                RotationDeltaMode::Additive => {
                    let g = normalize_vjp(&(q + dq), &g_rotations[i]);
                    (g, g)
                }
                RotationDeltaMode::Multiplicative => {
                    let d = quat(1.0, 0.0, 0.0, 0.0) + dq;
                    let dn = normalize(&d);
                    let g_m = normalize_vjp(&(dn * q), &g_rotations[i]);
                    let g_dn = g_m * q.conjugate();
                    (normalize_vjp(&d, &g_dn), dn.conjugate() * g_m)
                }
            };
            let e = ds.map(f64::exp);
            let g_s_out = g_scales[i];
            let g_ds = g_s_out.component_mul(&cloud_r.scales[i].component_mul(&e));
            let g = [
                g_positions[i].x,
                g_positions[i].y,
                g_positions[i].z,
                g_dq.w,
                g_dq.i,
                g_dq.j,
                g_dq.k,
                g_ds.x,
                g_ds.y,
                g_ds.z,
            ];
            let gp = self.query_vjp(&traces[i], &g, grad);
            out.push(RefineGrad {
                position: g_positions[i] + gp,
                rotation: g_q,
                scale: g_s_out.component_mul(&e),
            });
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> FieldConfig {
        FieldConfig {
            spatial_resolution: 5,
            temporal_resolution: Some(4),
            feature_width: 3,
            hidden_width: 6,
            ..FieldConfig::default()
        }
    }

    fn random_field(seed: u64) -> HexplaneField {
        let mut f = HexplaneField::new(&small_config(), Vec3::repeat(-1.0), Vec3::repeat(1.0), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = f.params();
        for v in &mut p {
            *v = rng.gen_range(-1.0..1.0);
        }
        f.set_params(&p).unwrap();
        f
    }

    /// Independent oracle: per-plane bilinear interpolation from scratch.
    fn oracle(f: &HexplaneField, p: &Vec3, t: f64) -> Vec<f64> {
        let res = f.resolutions();
        let norm = |axis: usize| -> f64 {
            let (v, lo, hi) = if axis == 3 {
                (t, 0.0, f.time_max)
            } else {
                (p[axis], f.bounds_min[axis], f.bounds_max[axis])
            };
            ((v - lo) / (hi - lo)).clamp(0.0, 1.0) * (res[axis] - 1) as f64
        };
        let mut out = vec![1.0; f.feature_width];
        for (k, &(a, b)) in PLANE_AXES.iter().enumerate() {
            let (u, v) = (norm(a), norm(b));
            let pl = &f.planes[k];
            for ch in 0..f.feature_width {
                let mut acc = 0.0;
                for i in 0..pl.rows {
                    for j in 0..pl.cols {
                        let wi = (1.0 - (u - i as f64).abs()).max(0.0);
                        let wj = (1.0 - (v - j as f64).abs()).max(0.0);
                        acc += wi * wj * pl.data[(i * pl.cols + j) * f.feature_width + ch];
                    }
                }
                out[ch] *= acc;
            }
        }
        out
    }

    #[test]
    fn ones_field_gives_ones() {
        let mut cfg = small_config();
        cfg.init_noise = 0.0;
        let f = HexplaneField::new(&cfg, Vec3::repeat(-1.0), Vec3::repeat(1.0), 4).unwrap();
        let feats = f.query_features(&[Vec3::new(0.3, -0.2, 0.9), Vec3::repeat(5.0)], 1.5).unwrap();
        assert!(feats.iter().flatten().all(|&v| v == 1.0));
    }

    #[test]
    fn grid_node_query_is_product_of_nodes() {
        let f = random_field(1);
        // Node (1, 2, 3) in x, y, z and node 2 in time.
        let p = Vec3::new(-1.0 + 0.5, -1.0 + 1.0, -1.0 + 1.5);
        let t = 2.0;
        let idx = [1usize, 2, 3, 2];
        let c = f.feature_width;
        let got = &f.query_features(&[p], t).unwrap()[0];
        for ch in 0..c {
            let mut expect = 1.0;
            for (k, &(a, b)) in PLANE_AXES.iter().enumerate() {
                expect *= f.planes[k].at(idx[a], idx[b], c)[ch];
            }
            assert!((got[ch] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_bilinear_oracle() {
        let f = random_field(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let p = Vec3::new(rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2));
            let t = rng.gen_range(0.0..=3.0);
            let got = &f.query_features(&[p], t).unwrap()[0];
            let want = oracle(&f, &p, t);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn time_outside_bounds_errors() {
        let f = random_field(1);
        assert!(matches!(f.query_features(&[Vec3::zeros()], 3.5), Err(Error::TimeOutOfBounds { .. })));
        assert!(f.query_features(&[Vec3::zeros()], -0.1).is_err());
    }

    #[test]
    fn zero_heads_give_zero_deltas() {
        let f = HexplaneField::new(&small_config(), Vec3::repeat(-1.0), Vec3::repeat(1.0), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vec3> = (0..100).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen()) * 3.0).collect();
        let d = f.query_deltas(&pts, 1.0).unwrap();
        assert!(d.d_position.iter().all(|v| *v == Vec3::zeros()));
        assert!(d.d_rotation.iter().all(|v| v.norm_squared() == 0.0));
        assert!(d.d_scale.iter().all(|v| *v == Vec3::zeros()));
        assert!(decode(&f.decoder, &[]).unwrap().is_empty());
    }

    #[test]
    fn hand_set_single_unit_decoder() {
        // x -> relu(2x - 1) -> heads; input [1] gives hidden 1.
        let trunk = vec![Layer {
            inputs: 1,
            outputs: 1,
            weights: vec![2.0],
            bias: vec![-1.0],
        }];
        let mut heads = HEAD_WIDTHS.map(|o| Layer::zeros(1, o));
        heads[0].weights = vec![3.0, 0.0, -1.0];
        heads[0].bias = vec![0.5, 0.0, 0.0];
        heads[1].bias = vec![0.0, 1.0, 0.0, 0.0];
        heads[2].weights = vec![0.0, 0.0, 4.0];
        let d = DecoderWeights::from_layers(trunk, heads).unwrap();
        let out = decode(&d, &[vec![1.0], vec![0.0]]).unwrap();
        assert_eq!(out.d_position[0], Vec3::new(3.5, 0.0, -1.0));
        assert_eq!(out.d_rotation[0], quat(0.0, 1.0, 0.0, 0.0));
        assert_eq!(out.d_scale[0], Vec3::new(0.0, 0.0, 4.0));
        // Input 0: hidden clamps to 0, only biases remain.
        assert_eq!(out.d_position[1], Vec3::new(0.5, 0.0, 0.0));
        assert!(decode(&d, &[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn decoder_layer_mismatch_rejected() {
        let trunk = vec![Layer::zeros(2, 3)];
        let heads = HEAD_WIDTHS.map(|o| Layer::zeros(4, o));
        assert!(DecoderWeights::from_layers(trunk, heads).is_err());
    }

    #[test]
    fn decode_is_lipschitz() {
        let f = random_field(5);
        let x = vec![0.3, -0.7, 0.2];
        let base = decode(&f.decoder, &[x.clone()]).unwrap();
        for eps in [1e-3, 1e-5] {
            let y: Vec<f64> = x.iter().map(|v| v + eps).collect();
            let d = decode(&f.decoder, &[y]).unwrap();
            let diff = (d.d_position[0] - base.d_position[0]).norm() + (d.d_scale[0] - base.d_scale[0]).norm();
            assert!(diff < 1e3 * eps);
        }
    }

    fn one_splat_cloud(n: usize, seed: u64) -> GaussianCloud {
        GaussianCloud::random_in_sphere(n, 0.9, seed).unwrap()
    }

    #[test]
    fn apply_refinement_examples() {
        let cloud = one_splat_cloud(20, 1);
        let zero = GaussianDeltas::zeros(20);
        let same = apply_refinement(&cloud, &zero, RotationDeltaMode::Additive).unwrap();
        assert_eq!(same.positions, cloud.positions);
        assert_eq!(same.scales, cloud.scales);
        for (a, b) in same.rotations.iter().zip(&cloud.rotations) {
            assert!((a - b).norm() <= 1e-7);
        }
        let mut shift = GaussianDeltas::zeros(20);
        shift.d_position = vec![Vec3::x(); 20];
        shift.d_scale = vec![Vec3::new(0.0, 2f64.ln(), 0.0); 20];
        let out = apply_refinement(&cloud, &shift, RotationDeltaMode::Multiplicative).unwrap();
        for i in 0..20 {
            assert_eq!(out.positions[i], cloud.positions[i] + Vec3::x());
            assert!((out.scales[i].y - 2.0 * cloud.scales[i].y).abs() < 1e-15);
            assert_eq!(out.scales[i].x, cloud.scales[i].x);
        }
        assert!(apply_refinement(&cloud, &GaussianDeltas::zeros(3), RotationDeltaMode::Additive).is_err());
    }

    #[test]
    fn tv_examples() {
        let mut cfg = small_config();
        cfg.init_noise = 0.0;
        let mut f = HexplaneField::new(&cfg, Vec3::repeat(-1.0), Vec3::repeat(1.0), 4).unwrap();
        assert_eq!(f.tv_regularizer(), 0.0);
        // Unit step between rows 1 and 2 of the xy plane, all channels.
        let c = f.feature_width;
        let (rows, cols) = (f.planes[0].rows, f.planes[0].cols);
        for i in 2..rows {
            for j in 0..cols {
                for ch in 0..c {
                    f.planes[0].data[(i * cols + j) * c + ch] += 1.0;
                }
            }
        }
        let pairs = ((rows - 1) * cols + rows * (cols - 1)) * c;
        let unit_diffs = cols * c;
        let expect = unit_diffs as f64 / pairs as f64;
        assert!((f.tv_regularizer() - expect).abs() < 1e-15);

        let g = random_field(7);
        let base = g.tv_regularizer();
        let mut scaled = g.clone();
        let mut shifted = g.clone();
        for pl in &mut scaled.planes {
            pl.data.iter_mut().for_each(|v| *v *= 3.0);
        }
        shifted.planes[4].data.iter_mut().for_each(|v| *v += 10.0);
        assert!((scaled.tv_regularizer() - 9.0 * base).abs() < 1e-10);
        assert!((shifted.tv_regularizer() - base).abs() < 1e-10);
    }

    #[test]
    fn tv_gradient_matches_finite_differences() {
        let f = random_field(8);
        let mut grad = vec![0.0; f.parameter_count()];
        f.tv_vjp(1.0, &mut grad);
        let p = f.params();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..40 {
            let k = rng.gen_range(0..f.plane_param_len());
            let h = 1e-6;
            let mut a = f.clone();
            let mut b = f.clone();
            let mut pa = p.clone();
            let mut pb = p.clone();
            pa[k] += h;
            pb[k] -= h;
            a.set_params(&pa).unwrap();
            b.set_params(&pb).unwrap();
            let fd = (a.tv_regularizer() - b.tv_regularizer()) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-7);
        }
    }

    fn refine_loss(f: &HexplaneField, cloud: &GaussianCloud, w: &[[f64; 10]]) -> f64 {
        let (out, _) = f.refine(cloud, 1.3).unwrap();
        (0..cloud.len())
            .map(|i| {
                let p = out.positions[i];
                let q = out.rotations[i];
                let s = out.scales[i];
                let v = [p.x, p.y, p.z, q.w, q.i, q.j, q.k, s.x, s.y, s.z];
                v.iter().zip(&w[i]).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum()
    }

    fn check_refine_gradients(mode: RotationDeltaMode) {
        let mut f = random_field(10);
        f.rotation_mode = mode;
        // Keep deltas modest so rotations stay away from singular sums.
        let mut p = f.params();
        let dec = f.plane_param_len();
        for v in &mut p[dec..] {
            *v *= 0.3;
        }
        f.set_params(&p).unwrap();
        let cloud = one_splat_cloud(6, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w: Vec<[f64; 10]> = (0..6).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect();
        let (_, traces) = f.refine(&cloud, 1.3).unwrap();
        let gp: Vec<Vec3> = w.iter().map(|r| Vec3::new(r[0], r[1], r[2])).collect();
        let gq: Vec<Quat> = w.iter().map(|r| quat(r[3], r[4], r[5], r[6])).collect();
        let gs: Vec<Vec3> = w.iter().map(|r| Vec3::new(r[7], r[8], r[9])).collect();
        let mut grad = vec![0.0; f.parameter_count()];
        let per = f.refine_vjp(&cloud, &traces, &gp, &gq, &gs, &mut grad);
        let h = 1e-6;
        let tol = |fd: f64, an: f64| (fd - an).abs() < 1e-5 * (1.0 + an.abs());
        for k in (0..p.len()).step_by(7) {
            let mut a = f.clone();
            let mut b = f.clone();
            let mut pa = p.clone();
            let mut pb = p.clone();
            pa[k] += h;
            pb[k] -= h;
            a.set_params(&pa).unwrap();
            b.set_params(&pb).unwrap();
            let fd = (refine_loss(&a, &cloud, &w) - refine_loss(&b, &cloud, &w)) / (2.0 * h);
            assert!(tol(fd, grad[k]), "{mode:?} param {k}: fd {fd} an {}", grad[k]);
        }
        for i in 0..6 {
            for ax in 0..3 {
                let mut a = cloud.clone();
                let mut b = cloud.clone();
                a.positions[i][ax] += h;
                b.positions[i][ax] -= h;
                let fd = (refine_loss(&f, &a, &w) - refine_loss(&f, &b, &w)) / (2.0 * h);
                assert!(tol(fd, per[i].position[ax]), "position {i} {ax}: fd {fd} an {}", per[i].position[ax]);
                let mut a = cloud.clone();
                let mut b = cloud.clone();
                a.scales[i][ax] += h;
                b.scales[i][ax] -= h;
                let fd = (refine_loss(&f, &a, &w) - refine_loss(&f, &b, &w)) / (2.0 * h);
                assert!(tol(fd, per[i].scale[ax]));
            }
            for c in 0..4 {
                let mut a = cloud.clone();
                let mut b = cloud.clone();
                a.rotations[i].coords[c] += h;
                b.rotations[i].coords[c] -= h;
                let fd = (refine_loss(&f, &a, &w) - refine_loss(&f, &b, &w)) / (2.0 * h);
                assert!(tol(fd, per[i].rotation.coords[c]), "{mode:?} rotation {i} {c}");
            }
        }
    }

    #[test]
    fn refine_vjp_additive() {
        check_refine_gradients(RotationDeltaMode::Additive);
    }

    #[test]
    fn refine_vjp_multiplicative() {
        check_refine_gradients(RotationDeltaMode::Multiplicative);
    }

    #[test]
    fn parameter_count_closed_form() {
        let cfg = FieldConfig {
            spatial_resolution: 32,
            feature_width: 16,
            ..FieldConfig::default()
        };
        let f = HexplaneField::new(&cfg, Vec3::repeat(-1.0), Vec3::repeat(1.0), 32).unwrap();
        let planes = 6 * 32 * 32 * 16;
        let decoder = (16 * 64 + 64) + (64 * 64 + 64) + (64 * 10 + 10);
        assert_eq!(f.parameter_count(), planes + decoder);
        assert_eq!(cfg.parameter_count(32), planes + decoder);
        assert_eq!(f.params().len(), f.parameter_count());
        let d = FieldConfig::default();
        assert_eq!(d.parameter_count(32), 596_746);
    }

    #[test]
    fn invalid_bounds_rejected() {
        let r = HexplaneField::new(&small_config(), Vec3::zeros(), Vec3::new(1.0, 0.0, 1.0), 4);
        assert!(r.is_err());
        let r = HexplaneField::new(&small_config(), Vec3::zeros(), Vec3::repeat(1.0), 0);
        assert!(r.is_err());
    }

    #[test]
    fn identity_start_keeps_rigid_cloud() {
        let cloud = one_splat_cloud(50, 3);
        let f = HexplaneField::for_cloud(&FieldConfig::default(), &cloud, 8, 0.1).unwrap();
        for t in 0..8 {
            let (out, _) = f.refine(&cloud, t as f64).unwrap();
            assert_eq!(out.positions, cloud.positions);
            for (a, b) in out.rotations.iter().zip(&cloud.rotations) {
                assert!((a - b).norm() < 1e-6);
            }
        }
    }
}
