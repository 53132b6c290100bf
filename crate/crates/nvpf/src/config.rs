//! Run configuration: one JSON file drives every CLI mode.
//!
//! Every run also writes the fully resolved configuration (seed
//! overrides applied) back out as a run manifest, so any artifact can
//! be regenerated bit-exactly from the manifest alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::GenConfig;
use crate::temporal::VideoAggregation;

/// What the harness should do.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    TrainNvpf,
    TrainTnvpf,
    Eval,
    GenData,
    GradCheck,
    Inspect,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::TrainNvpf => "train-nvpf",
            Mode::TrainTnvpf => "train-tnvpf",
            Mode::Eval => "eval",
            Mode::GenData => "gen-data",
            Mode::GradCheck => "grad-check",
            Mode::Inspect => "inspect",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "train-nvpf" => Ok(Mode::TrainNvpf),
            "train-tnvpf" => Ok(Mode::TrainTnvpf),
            "eval" => Ok(Mode::Eval),
            "gen-data" => Ok(Mode::GenData),
            "grad-check" => Ok(Mode::GradCheck),
            "inspect" => Ok(Mode::Inspect),
            other => Err(Error::Config(format!("unknown mode \"{other}\""))),
        }
    }
}

/// Optional short-sequence warmup for recurrent training: use the first
/// `start_t` frames of every video until `switch_epoch`, full sequences
/// after.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Curriculum {
    pub start_t: usize,
    pub switch_epoch: usize,
}

fn default_learning_rate() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_batch_size() -> usize {
    512
}
fn default_epochs() -> usize {
    1
}
fn default_n_max() -> usize {
    4
}
fn default_feature_dim() -> usize {
    8
}
fn default_d_h() -> usize {
    64
}
fn default_units() -> usize {
    4
}
fn default_frame_cols() -> usize {
    8
}
fn default_frame_units() -> usize {
    4
}
fn default_feature_maps() -> usize {
    8
}
fn default_t() -> usize {
    5
}
fn default_train_fraction() -> f64 {
    0.9
}

/// Everything one run needs. Paths are optional because different modes
/// need different subsets; [`RunConfig::validate`] enforces the per-mode
/// requirements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,

    /// Checkpoint directory to read (eval / inspect).
    #[serde(default)]
    pub model: Option<PathBuf>,
    /// Dataset file to read (train / eval / inspect).
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Output directory for checkpoints, curves, reports, datasets.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,

    // Optimization. Paper-scale defaults; desk-scale runs override.
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,

    // Model geometry.
    /// Column budget of the group grid (largest group size).
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    /// Feature vector length M (rows of every grid).
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    /// Recurrent state size.
    #[serde(default = "default_d_h")]
    pub d_h: usize,
    /// Coupling units in the group-level flow.
    #[serde(default = "default_units")]
    pub units: usize,
    /// Column budget of the frame-level grid (recurrent model).
    #[serde(default = "default_frame_cols")]
    pub frame_cols: usize,
    /// Coupling units in the frame-level flow.
    #[serde(default = "default_frame_units")]
    pub frame_units: usize,
    /// Channels inside the coupling subnets.
    #[serde(default = "default_feature_maps")]
    pub feature_maps: usize,
    /// Attach the auxiliary softmax head to the group-level flow.
    #[serde(default)]
    pub with_head: bool,

    // Sequence handling.
    /// Frames per video used in training and prediction (longer videos
    /// are truncated to the first `t` frames).
    #[serde(default = "default_t")]
    pub t: usize,
    #[serde(default)]
    pub aggregation: VideoAggregation,
    #[serde(default)]
    pub curriculum: Option<Curriculum>,

    // Data generation / splitting.
    #[serde(default)]
    pub gen: Option<GenConfig>,
    /// Fraction of video ids that land in the train split.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

impl RunConfig {
    /// A config with every default filled in, for building variations in
    /// code and tests.
    pub fn new(mode: Mode) -> RunConfig {
        RunConfig {
            mode,
            model: None,
            dataset: None,
            out_dir: None,
            learning_rate: default_learning_rate(),
            momentum: default_momentum(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            seed: 0,
            n_max: default_n_max(),
            feature_dim: default_feature_dim(),
            d_h: default_d_h(),
            units: default_units(),
            frame_cols: default_frame_cols(),
            frame_units: default_frame_units(),
            feature_maps: default_feature_maps(),
            with_head: false,
            t: default_t(),
            aggregation: VideoAggregation::default(),
            curriculum: None,
            gen: None,
            train_fraction: default_train_fraction(),
        }
    }

    /// Parse a config file without validating, so command-line overrides
    /// can fill gaps (a run manifest deliberately omits `out_dir`). All
    /// failures come back as [`Error::Config`] with the offending path.
    pub fn parse_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Parse and validate a config file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let cfg = Self::parse_file(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply command-line overrides. A seed override also retargets the
    /// generator seed in gen-data mode, since that is the seed such runs
    /// actually consume.
    pub fn apply_overrides(&mut self, seed: Option<u64>, out_dir: Option<PathBuf>) {
        if let Some(s) = seed {
            self.seed = s;
            if self.mode == Mode::GenData {
                if let Some(g) = &mut self.gen {
                    g.seed = s;
                }
            }
        }
        if let Some(o) = out_dir {
            self.out_dir = Some(o);
        }
    }

    /// Check numeric ranges and per-mode path requirements.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            ));
        }
        for (name, v) in [
            ("n_max", self.n_max),
            ("feature_dim", self.feature_dim),
            ("d_h", self.d_h),
            ("units", self.units),
            ("frame_cols", self.frame_cols),
            ("frame_units", self.frame_units),
            ("feature_maps", self.feature_maps),
            ("t", self.t),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if let Some(c) = &self.curriculum {
            if c.start_t == 0 {
                return bad("curriculum.start_t must be at least 1".into());
            }
        }
        if let Some(g) = &self.gen {
            g.validate().map_err(|e| Error::Config(e.to_string()))?;
        }

        let require = |field: &str, present: bool| {
            if present {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "mode {} requires \"{field}\"",
                    self.mode
                )))
            }
        };
        match self.mode {
            Mode::TrainNvpf | Mode::TrainTnvpf => {
                require("dataset", self.dataset.is_some())?;
                require("out_dir", self.out_dir.is_some())?;
            }
            Mode::Eval => {
                require("model", self.model.is_some())?;
                require("dataset", self.dataset.is_some())?;
                require("out_dir", self.out_dir.is_some())?;
            }
            Mode::GenData => {
                require("gen", self.gen.is_some())?;
                require("out_dir", self.out_dir.is_some())?;
            }
            Mode::GradCheck => {}
            Mode::Inspect => {
                require("model", self.model.is_some())?;
                require("dataset", self.dataset.is_some())?;
                require("out_dir", self.out_dir.is_some())?;
            }
        }
        Ok(())
    }

    /// The form persisted to `run-manifest.json`: CLI overrides already
    /// applied, but `out_dir` cleared so reruns into a different
    /// directory produce byte-identical manifests.
    pub fn manifest_form(&self) -> RunConfig {
        let mut c = self.clone();
        c.out_dir = None;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(dir: &tempfile::TempDir, name: &str, text: &str) -> PathBuf {
        let p = dir.path().join(name);
        let mut f = std::fs::File::create(&p).unwrap();
        f.write_all(text.as_bytes()).unwrap();
        p
    }

    #[test]
    fn minimal_grad_check_config_loads_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(&dir, "run.json", r#"{"mode": "grad-check"}"#);
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.mode, Mode::GradCheck);
        assert_eq!(cfg.learning_rate, 0.1);
        assert_eq!(cfg.momentum, 0.9);
        assert_eq!(cfg.batch_size, 512);
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.d_h, 64);
        assert_eq!(cfg.aggregation, VideoAggregation::FinalStep);
        assert_eq!(cfg.train_fraction, 0.9);
    }

    #[test]
    fn unknown_field_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(
            &dir,
            "run.json",
            r#"{"mode": "grad-check", "learning_rte": 0.01}"#,
        );
        let err = RunConfig::load(&p).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err:?}");
        assert!(err.to_string().contains("learning_rte"));
    }

    #[test]
    fn missing_paths_are_reported_per_mode() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(&dir, "run.json", r#"{"mode": "train-nvpf"}"#);
        let err = RunConfig::load(&p).unwrap_err();
        assert!(err.to_string().contains("dataset"), "got {err}");

        let p = write_tmp(
            &dir,
            "run2.json",
            r#"{"mode": "eval", "dataset": "d.jsonl", "out_dir": "out"}"#,
        );
        let err = RunConfig::load(&p).unwrap_err();
        assert!(err.to_string().contains("model"), "got {err}");

        let p = write_tmp(&dir, "run3.json", r#"{"mode": "gen-data", "out_dir": "out"}"#);
        let err = RunConfig::load(&p).unwrap_err();
        assert!(err.to_string().contains("gen"), "got {err}");
    }

    #[test]
    fn numeric_ranges_are_enforced() {
        let mut cfg = RunConfig::new(Mode::GradCheck);
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
        cfg.learning_rate = 0.1;
        cfg.momentum = 1.0;
        assert!(cfg.validate().is_err());
        cfg.momentum = 0.9;
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        cfg.batch_size = 8;
        cfg.train_fraction = 1.0;
        assert!(cfg.validate().is_err());
        cfg.train_fraction = 0.9;
        cfg.t = 0;
        assert!(cfg.validate().is_err());
        cfg.t = 5;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn config_round_trips_through_json() {
        let mut cfg = RunConfig::new(Mode::TrainTnvpf);
        cfg.dataset = Some(PathBuf::from("data/videos.jsonl"));
        cfg.out_dir = Some(PathBuf::from("out"));
        cfg.learning_rate = 2e-3;
        cfg.batch_size = 8;
        cfg.epochs = 15;
        cfg.d_h = 32;
        cfg.aggregation = VideoAggregation::MeanLogits;
        cfg.curriculum = Some(Curriculum {
            start_t: 2,
            switch_epoch: 3,
        });
        cfg.gen = Some(GenConfig::video_defaults());
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn manifest_form_clears_out_dir_only() {
        let mut cfg = RunConfig::new(Mode::Eval);
        cfg.model = Some(PathBuf::from("m"));
        cfg.dataset = Some(PathBuf::from("d"));
        cfg.out_dir = Some(PathBuf::from("somewhere"));
        cfg.seed = 7;
        let m = cfg.manifest_form();
        assert_eq!(m.out_dir, None);
        assert_eq!(m.model, cfg.model);
        assert_eq!(m.seed, 7);
    }

    #[test]
    fn overrides_replace_seed_and_out_dir() {
        let mut cfg = RunConfig::new(Mode::GenData);
        cfg.gen = Some(GenConfig::group_defaults());
        cfg.apply_overrides(Some(42), Some(PathBuf::from("elsewhere")));
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.gen.as_ref().unwrap().seed, 42);
        assert_eq!(cfg.out_dir, Some(PathBuf::from("elsewhere")));

        // Outside gen-data the generator block keeps its own seed.
        let mut cfg = RunConfig::new(Mode::TrainNvpf);
        cfg.gen = Some(GenConfig::group_defaults());
        cfg.apply_overrides(Some(42), None);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.gen.as_ref().unwrap().seed, 0);

        cfg.apply_overrides(None, None);
        assert_eq!(cfg.seed, 42);
    }

    #[test]
    fn mode_names_round_trip() {
        for (mode, name) in [
            (Mode::TrainNvpf, "train-nvpf"),
            (Mode::TrainTnvpf, "train-tnvpf"),
            (Mode::Eval, "eval"),
            (Mode::GenData, "gen-data"),
            (Mode::GradCheck, "grad-check"),
            (Mode::Inspect, "inspect"),
        ] {
            assert_eq!(mode.to_string(), name);
            assert_eq!(name.parse::<Mode>().unwrap(), mode);
            let json = format!("\"{name}\"");
            let parsed: Mode = serde_json::from_str(&json).unwrap();
            assert_eq!(parsed, mode);
        }
        assert!("trainnvpf".parse::<Mode>().is_err());
    }
}
