use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{parse_kv, parse_value, render};
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::training::{ModelConfig, TrainConfig};

/// Finite-difference settings for `gradcheck`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub batch_size: usize,
    pub max_coords: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            batch_size: 4,
            max_coords: 200,
        }
    }
}

/// Everything a run needs, read from a flat `key = value` file.
///
/// `seed` is the default for `dataset.seed`, `model.seed` and `train.seed`;
/// a section seed given explicitly wins.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    /// Existing dataset file; when absent the dataset is generated in memory.
    pub dataset_path: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: None,
            dataset_path: None,
            dataset: DatasetSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut explicit_seeds = [false; 3];
        for e in parse_kv(text, path)? {
            let at = |err: Error| Error::Parse {
                path: path.to_path_buf(),
                line: e.line,
                msg: match err {
                    Error::Config(m) | Error::Spec(m) => m,
                    other => other.to_string(),
                },
            };
            let known = match e.key.split_once('.') {
                None => cfg.set_top(&e.key, &e.value).map_err(at)?,
                Some(("dataset", "path")) => {
                    cfg.dataset_path = Some(PathBuf::from(&e.value));
                    true
                }
                Some(("dataset", k)) => {
                    explicit_seeds[0] |= k == "seed";
                    cfg.dataset.set(k, &e.value).map_err(at)?
                }
                Some(("model", k)) => {
                    explicit_seeds[1] |= k == "seed";
                    cfg.model.set(k, &e.value).map_err(at)?
                }
                Some(("train", k)) => {
                    explicit_seeds[2] |= k == "seed";
                    cfg.train.set(k, &e.value).map_err(at)?
                }
                Some(("gradcheck", k)) => cfg.set_gradcheck(k, &e.value).map_err(at)?,
                _ => false,
            };
            if !known {
                return Err(at(Error::config(format!("unknown key `{}`", e.key))));
            }
        }
        if !explicit_seeds[0] {
            cfg.dataset.seed = cfg.seed;
        }
        if !explicit_seeds[1] {
            cfg.model.seed = cfg.seed;
        }
        if !explicit_seeds[2] {
            cfg.train.seed = cfg.seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set_top(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "output_dir" => self.output_dir = Some(PathBuf::from(value)),
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn set_gradcheck(&mut self, key: &str, value: &str) -> Result<bool> {
        let g = &mut self.gradcheck;
        match key {
            "step" => g.step = parse_value(key, value)?,
            "tolerance" => g.tolerance = parse_value(key, value)?,
            "batch_size" => g.batch_size = parse_value(key, value)?,
            "max_coords" => g.max_coords = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Overrides every seed, section seeds included.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.dataset.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.d_model != self.dataset.d_model {
            return Err(Error::config(format!(
                "model.d_model = {} but dataset.d_model = {}",
                self.model.d_model, self.dataset.d_model
            )));
        }
        if self.model.num_classes != self.dataset.num_classes {
            return Err(Error::config(format!(
                "model.num_classes = {} but dataset.num_classes = {}",
                self.model.num_classes, self.dataset.num_classes
            )));
        }
        let g = &self.gradcheck;
        if !(g.step > 0.0 && g.step.is_finite()) || g.tolerance < 0.0 || g.batch_size == 0 || g.max_coords == 0 {
            return Err(Error::config("gradcheck settings must be positive"));
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out = vec![("seed".to_string(), self.seed.to_string())];
        if let Some(dir) = &self.output_dir {
            out.push(("output_dir".into(), dir.display().to_string()));
        }
        if let Some(p) = &self.dataset_path {
            out.push(("dataset.path".into(), p.display().to_string()));
        }
        out.extend(self.dataset.entries());
        out.extend(self.model.entries());
        out.extend(self.train.entries());
        let g = &self.gradcheck;
        for (k, v) in [
            ("step", format!("{:?}", g.step)),
            ("tolerance", format!("{:?}", g.tolerance)),
            ("batch_size", g.batch_size.to_string()),
            ("max_coords", g.max_coords.to_string()),
        ] {
            out.push((format!("gradcheck.{k}"), v));
        }
        out
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn resolved(&self) -> String {
        render(&self.entries())
    }
}
