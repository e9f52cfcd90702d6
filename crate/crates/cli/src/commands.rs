//! Subcommand implementations, callable without the argument parser.

use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use splatrig::io::{load_file, save_file};
use splatrig::optimize::{fit_with_progress, FitInit, FitOutcome, StepRecord, Targets};
use splatrig::scene::{Motion, Template};
use splatrig::{
    build_tree, make_synthetic_scene, sample_candidates, CameraSpec, FitConfig, FitReport, Scene, SceneDocument,
    SessionState, Settings, Stage, SyntheticSpec, Vec3,
};

use crate::config::default_fit_config;
use crate::error::{CliError, Result};

pub const DEFAULT_SETTINGS: Settings = Settings {
    skin_k: 4,
    smoothing_window: 1,
};

pub fn read_document(path: &Path) -> Result<SceneDocument> {
    load_file(path).map_err(|source| CliError::File {
        path: path.to_owned(),
        source,
    })
}

pub fn write_document(path: &Path, doc: &SceneDocument) -> Result<()> {
    save_file(path, doc).map_err(|source| CliError::File {
        path: path.to_owned(),
        source,
    })
}

/// A camera orbiting the center of the scene bounds. Angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Orbit {
    pub azimuth: f64,
    pub elevation: f64,
    /// Defaults to a distance that fits the bounds in view.
    pub distance: Option<f64>,
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for Orbit {
    fn default() -> Self {
        Self {
            azimuth: 0.0,
            elevation: 0.0,
            distance: None,
            fov_y: 45.0,
            width: 256,
            height: 256,
        }
    }
}

impl Orbit {
    pub fn camera(&self, bounds_min: [f64; 3], bounds_max: [f64; 3]) -> splatrig::Result<CameraSpec> {
        let lo = Vec3::from(bounds_min);
        let hi = Vec3::from(bounds_max);
        let center = (lo + hi) / 2.0;
        let fov = self.fov_y.to_radians();
        let radius = ((hi - lo).norm() / 2.0).max(1e-3);
        let distance = self.distance.unwrap_or(1.2 * radius / (fov / 2.0).sin());
        CameraSpec::orbit(
            center,
            distance,
            self.azimuth.to_radians(),
            self.elevation.to_radians(),
            fov,
            self.width,
            self.height,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub template: Template,
    pub frames: usize,
    pub splats_per_bone: Option<usize>,
    pub amplitude_deg: f64,
    pub seed: u64,
    /// Target renders per frame, evenly spaced in azimuth.
    pub views: usize,
    pub resolution: usize,
    /// Also store the generating poses.
    pub with_poses: bool,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            template: Template::Pendulum,
            frames: 16,
            splats_per_bone: None,
            amplitude_deg: 30.0,
            seed: 0,
            views: 0,
            resolution: 64,
            with_poses: false,
        }
    }
}

/// Builds a synthetic document: cloud, skeleton and targets generated by a
/// known swing motion.
pub fn synth(opts: &SynthOptions) -> Result<SceneDocument> {
    let mut spec = SyntheticSpec::new(
        opts.template,
        opts.frames,
        Motion::Swing {
            amplitude: opts.amplitude_deg.to_radians(),
        },
    )
    .seed(opts.seed);
    if let Some(n) = opts.splats_per_bone {
        spec = spec.splats_per_bone(n);
    }
    let (cloud, skeleton, truth) = make_synthetic_scene(&spec)?;
    let generator = Scene::new(cloud.clone(), skeleton.clone(), DEFAULT_SETTINGS.skin_k as usize, 0)?;
    let (lo, hi) = cloud.bounds();
    let cameras = (0..opts.views)
        .map(|v| {
            Orbit {
                azimuth: 360.0 * v as f64 / opts.views as f64,
                elevation: 10.0,
                width: opts.resolution,
                height: opts.resolution,
                ..Orbit::default()
            }
            .camera(lo.into(), hi.into())
        })
        .collect::<splatrig::Result<Vec<_>>>()?;
    let targets = Targets::synthesize(&generator, &truth, None, &cameras, true)?;
    Ok(SceneDocument {
        cloud: Some(cloud),
        skeleton: Some(skeleton),
        poses: opts.with_poses.then_some(truth),
        field: None,
        settings: Some(DEFAULT_SETTINGS),
        targets: Some(targets),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonizeOutcome {
    pub joints: usize,
    /// Sections removed because they no longer match the skeleton.
    pub dropped: Vec<&'static str>,
}

/// Replaces the skeleton with an MST over `candidates` sampled splats.
pub fn skeletonize(doc: &mut SceneDocument, candidates: usize, seed: u64) -> Result<SkeletonizeOutcome> {
    let cloud = doc
        .cloud
        .as_ref()
        .ok_or_else(|| CliError::missing("cloud", "create a document with `splatrig synth`"))?;
    let skeleton = build_tree(&sample_candidates(cloud, candidates, seed)?)?;
    let mut dropped = Vec::new();
    if doc.poses.as_ref().is_some_and(|p| p.joint_count() != skeleton.len()) {
        doc.poses = None;
        dropped.push("poses");
    }
    if doc.field.take().is_some() {
        dropped.push("field");
    }
    let joints = skeleton.len();
    doc.skeleton = Some(skeleton);
    Ok(SkeletonizeOutcome { joints, dropped })
}

/// Checks that `doc` has what `stage` needs.
pub fn check_fit_inputs(doc: &SceneDocument, stage: Stage) -> Result<()> {
    if doc.cloud.is_none() {
        return Err(CliError::missing("cloud", "create a document with `splatrig synth`"));
    }
    if doc.skeleton.is_none() {
        return Err(CliError::missing(
            "skeleton",
            "run `splatrig skeletonize IN --candidates 70` first",
        ));
    }
    if doc.targets.is_none() {
        return Err(CliError::missing(
            "targets",
            "fitting needs per-frame targets; `splatrig synth` writes them",
        ));
    }
    if stage == Stage::N && doc.poses.is_none() {
        return Err(CliError::missing("poses", "run `splatrig fit IN --stage R` first"));
    }
    Ok(())
}

/// Runs one fitting stage on `doc`. Stage R starts from identity poses;
/// stage N starts from the stored poses and a fresh field.
pub fn fit_document(doc: &SceneDocument, config: &FitConfig) -> Result<FitOutcome> {
    fit_document_with_progress(doc, config, |_| ControlFlow::Continue(()))
}

/// Like [`fit_document`], reporting each step to `progress`.
pub fn fit_document_with_progress(
    doc: &SceneDocument,
    config: &FitConfig,
    progress: impl FnMut(&StepRecord) -> ControlFlow<()>,
) -> Result<FitOutcome> {
    check_fit_inputs(doc, config.stage)?;
    let settings = doc.settings.unwrap_or(DEFAULT_SETTINGS);
    let (Some(cloud), Some(skeleton), Some(targets)) = (&doc.cloud, &doc.skeleton, &doc.targets) else {
        unreachable!("checked above")
    };
    let scene = Scene::new(
        cloud.clone(),
        skeleton.clone(),
        settings.skin_k as usize,
        config.smoothing_window,
    )?;
    let init = match config.stage {
        Stage::R => FitInit::default(),
        Stage::N => FitInit {
            poses: doc.poses.clone(),
            field: None,
        },
    };
    Ok(fit_with_progress(&scene, targets, config, init, progress)?)
}

/// Writes a fit outcome back into `doc`.
pub fn apply_fit(doc: &mut SceneDocument, config: &FitConfig, out: FitOutcome) -> FitReport {
    let mut settings = doc.settings.unwrap_or(DEFAULT_SETTINGS);
    settings.smoothing_window = config.smoothing_window as u32;
    doc.settings = Some(settings);
    match config.stage {
        Stage::R => {
            doc.poses = Some(out.poses);
            doc.field = None;
        }
        Stage::N => {
            doc.field = out.field;
            if config.unfreeze_cloud {
                doc.cloud = Some(out.cloud);
            }
        }
    }
    out.report
}

/// The config used when none is given on the command line.
pub fn resolve_config(doc: &SceneDocument, stage: Stage, config: Option<FitConfig>) -> FitConfig {
    match config {
        Some(mut c) => {
            c.stage = stage;
            c
        }
        None => default_fit_config(stage, doc.targets.as_ref().unwrap_or(&Targets::default())),
    }
}

/// `<base>.fit.jsonl` (per-step records) and `<base>.fit.json` (summary).
pub fn report_paths(base: &Path) -> (PathBuf, PathBuf) {
    let mut jsonl = base.as_os_str().to_owned();
    jsonl.push(".fit.jsonl");
    let mut json = base.as_os_str().to_owned();
    json.push(".fit.json");
    (jsonl.into(), json.into())
}

pub fn write_report(report: &FitReport, base: &Path) -> Result<(PathBuf, PathBuf)> {
    let (jsonl, json) = report_paths(base);
    let mut w = std::io::BufWriter::new(std::fs::File::create(&jsonl)?);
    report.write_jsonl(&mut w)?;
    std::io::Write::flush(&mut w)?;
    std::fs::write(&json, serde_json::to_string_pretty(&report.summary()).expect("summary serializes"))?;
    Ok((jsonl, json))
}

pub fn session(doc: SceneDocument) -> Result<SessionState> {
    if doc.cloud.is_none() {
        return Err(CliError::missing("cloud", "create a document with `splatrig synth`"));
    }
    if doc.skeleton.is_none() {
        return Err(CliError::missing(
            "skeleton",
            "run `splatrig skeletonize IN --candidates 70` first",
        ));
    }
    Ok(SessionState::new(doc)?)
}

/// PNG bytes of frame `t` seen from `orbit`.
pub fn render_png(doc: SceneDocument, t: usize, orbit: &Orbit) -> Result<Vec<u8>> {
    let s = session(doc)?;
    let summary = s.summary();
    let cam = orbit.camera(summary.bounds_min, summary.bounds_max)?;
    Ok(s.render_frame(t, &cam)?.encode_png()?)
}

/// BVH text of the smoothed poses at `fps`.
pub fn export_bvh(doc: SceneDocument, fps: f64) -> Result<String> {
    if doc.poses.is_none() {
        return Err(CliError::missing("poses", "run `splatrig fit IN --stage R` first"));
    }
    Ok(session(doc)?.export_bvh(fps)?)
}
