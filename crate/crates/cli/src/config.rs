//! Fit configuration files.
//!
//! A config is a TOML table whose keys mirror [`FitConfig`]. Every key is
//! optional; omitted keys keep their defaults, including individual loss
//! weights inside `[weights]`. Unknown keys are rejected.
//!
//! ```toml
//! steps = 2000
//! smoothing_window = 1
//!
//! [schedule]
//! start = 5e-5
//! end = 5e-6
//! shape = "exponential"   # or "linear", "constant"
//!
//! [weights]
//! rec = 0.0
//! mask = 0.0
//! chamfer = 2e4
//!
//! [field]
//! spatial_resolution = 32
//! feature_width = 16
//! ```

use std::path::Path;

use splatrig::optimize::{LossWeights, Targets};
use splatrig::{FitConfig, Stage};

use crate::error::{CliError, Result};

/// Chamfer weight used when the targets carry points but no images.
pub const POINT_ONLY_CHAMFER: f64 = 2e4;

pub fn parse_fit_config(text: &str) -> std::result::Result<FitConfig, String> {
    let cfg: FitConfig = toml::from_str(text).map_err(|e| e.to_string())?;
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

pub fn load_fit_config(path: &Path) -> Result<FitConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    parse_fit_config(&text).map_err(|message| CliError::Config {
        path: path.to_owned(),
        message,
    })
}

/// Defaults for `stage` given the available targets. Image terms are used
/// when every frame has views; otherwise point targets drive a chamfer fit.
pub fn default_fit_config(stage: Stage, targets: &Targets) -> FitConfig {
    let images = !targets.frames.is_empty() && targets.frames.iter().all(|f| !f.views.is_empty());
    let weights = if images {
        LossWeights::default()
    } else {
        LossWeights {
            rec: 0.0,
            mask: 0.0,
            chamfer: POINT_ONLY_CHAMFER,
            ..LossWeights::default()
        }
    };
    FitConfig {
        stage,
        weights,
        ..FitConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use splatrig::optimize::FrameTarget;

    #[test]
    fn example_config_parses_to_defaults() {
        let cfg = parse_fit_config(include_str!("../../../docs/fit.example.toml")).unwrap();
        let d = FitConfig::default();
        assert_eq!(cfg.steps, Some(d.effective_steps()));
        assert_eq!(cfg.schedule, Some(d.effective_schedule()));
        assert_eq!(FitConfig { steps: None, schedule: None, ..cfg }, d);
    }

    #[test]
    fn omitted_keys_keep_defaults() {
        let cfg = parse_fit_config("steps = 10\n[weights]\nchamfer = 5.0\n").unwrap();
        assert_eq!(cfg.steps, Some(10));
        assert_eq!(cfg.weights.chamfer, 5.0);
        assert_eq!(cfg.weights.rec, LossWeights::default().rec);
        assert_eq!(cfg.smoothing_window, 1);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(parse_fit_config("stepz = 10").is_err());
        assert!(parse_fit_config("[schedule]\nstart = 1e-6\nend = 1e-3").is_err());
        assert!(parse_fit_config("[weights]\nrec = 0.0\nchamfer = 0.0\nmask = 1.0").is_err());
    }

    #[test]
    fn stage_names() {
        assert_eq!(parse_fit_config("stage = \"N\"").unwrap().stage, Stage::N);
        assert_eq!(parse_fit_config("stage = \"rigid\"").unwrap().stage, Stage::R);
    }

    #[test]
    fn point_targets_select_chamfer() {
        let t = Targets {
            frames: vec![
                FrameTarget {
                    points: Some(vec![Default::default()]),
                    views: vec![],
                };
                3
            ],
        };
        let cfg = default_fit_config(Stage::R, &t);
        assert_eq!(cfg.weights.chamfer, POINT_ONLY_CHAMFER);
        assert_eq!(cfg.weights.rec, 0.0);
        assert!(cfg.validate().is_ok());
    }
}
