//! Run configuration: plain `key = value` text grouped into sections.
//!
//! ```text
//! # comment
//! [model]
//! latent_width = 64
//! [encoder_train]
//! epochs = 300
//! ```
//!
//! Sections: `run`, `model`, `encoder_train`, `decoder_train`, `schedule`,
//! `data`, `eval`, `tasks`. Unknown sections and keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data_io::write_atomic;
use crate::diffusion::{build_schedule, NoiseSchedule, ResidualTerm};
use crate::error::{Error, Result};
use crate::metrics::EvalConfig;
use crate::model::ModelConfig;
use crate::tasks::DEFAULT_VISIBLE_FRACTION;
use crate::training::TrainConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.txt";
pub const VERSION_FILE: &str = "version.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub beta_start: f64,
    pub beta_end: f64,
    pub residual: ResidualTerm,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            beta_start: 1e-4,
            beta_end: 0.05,
            residual: ResidualTerm::SqrtSigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub target_points: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            target_points: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub visible_fraction: f64,
    pub quant_bits: u8,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            visible_fraction: DEFAULT_VISIBLE_FRACTION,
            quant_bits: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub model: ModelConfig,
    pub encoder_train: TrainConfig,
    pub decoder_train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub tasks: TaskConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            model: ModelConfig::default(),
            encoder_train: TrainConfig::encoder_default(),
            decoder_train: TrainConfig::decoder_default(),
            schedule: ScheduleConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            tasks: TaskConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value '{v}' for '{key}'")))
}

impl RunConfig {
    /// Applies `section.key = value`.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        match section {
            "run" => match key {
                "seed" => self.seed = parse_num(key, value)?,
                "out" => self.out = Some(PathBuf::from(value)),
                _ => return Err(unknown(section, key)),
            },
            "model" => self.model.set(key, value)?,
            "encoder_train" => self.encoder_train.set(key, value)?,
            "decoder_train" => self.decoder_train.set(key, value)?,
            "schedule" => match key {
                "beta_start" => self.schedule.beta_start = parse_num(key, value)?,
                "beta_end" => self.schedule.beta_end = parse_num(key, value)?,
                "residual" => self.schedule.residual = value.parse()?,
                _ => return Err(unknown(section, key)),
            },
            "data" => match key {
                "manifest" => self.data.manifest = Some(PathBuf::from(value)),
                "target_points" => self.data.target_points = parse_num(key, value)?,
                _ => return Err(unknown(section, key)),
            },
            "eval" => match key {
                "grid_resolution" => self.eval.grid_resolution = parse_num(key, value)?,
                _ => return Err(unknown(section, key)),
            },
            "tasks" => match key {
                "visible_fraction" => self.tasks.visible_fraction = parse_num(key, value)?,
                "quant_bits" => self.tasks.quant_bits = parse_num(key, value)?,
                _ => return Err(unknown(section, key)),
            },
            _ => return Err(Error::InvalidArgument(format!("unknown section [{section}]"))),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults. Relative paths resolve
    /// against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: n + 1, msg };
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| err(format!("malformed section header '{line}'")))?;
                section = Some(name.trim().to_string());
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got '{line}'")))?;
            let sec = section.as_deref().ok_or_else(|| err("key before any [section]".into()))?;
            cfg.set(sec, k.trim(), v.trim()).map_err(|e| err(e.to_string()))?;
        }
        for p in [&mut cfg.out, &mut cfg.data.manifest].into_iter().flatten() {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.encoder_train.validate()?;
        self.decoder_train.validate()?;
        self.noise_schedule()?;
        Ok(())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        let mut s = build_schedule(self.model.timesteps, self.schedule.beta_start, self.schedule.beta_end)?;
        s.residual = self.schedule.residual;
        Ok(s)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# pointdiff {VERSION}");
        let _ = writeln!(s, "[run]\nseed = {}", self.seed);
        if let Some(o) = &self.out {
            let _ = writeln!(s, "out = {}", o.display());
        }
        let _ = write!(s, "\n[model]\n{}", self.model.to_kv());
        let _ = write!(s, "\n[encoder_train]\n{}", self.encoder_train.to_kv());
        let _ = write!(s, "\n[decoder_train]\n{}", self.decoder_train.to_kv());
        let residual = match self.schedule.residual {
            ResidualTerm::SqrtSigma => "sqrt_sigma",
            ResidualTerm::Sigma => "sigma",
        };
        let _ = writeln!(
            s,
            "\n[schedule]\nbeta_start = {}\nbeta_end = {}\nresidual = {residual}",
            self.schedule.beta_start, self.schedule.beta_end
        );
        let _ = writeln!(s, "\n[data]");
        if let Some(m) = &self.data.manifest {
            let _ = writeln!(s, "manifest = {}", m.display());
        }
        let _ = writeln!(s, "target_points = {}", self.data.target_points);
        let _ = writeln!(s, "\n[eval]\ngrid_resolution = {}", self.eval.grid_resolution);
        let _ = writeln!(
            s,
            "\n[tasks]\nvisible_fraction = {}\nquant_bits = {}",
            self.tasks.visible_fraction, self.tasks.quant_bits
        );
        s
    }

    /// Writes the resolved config and the tool version into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join(RESOLVED_CONFIG_FILE), self.to_text().as_bytes())?;
        write_atomic(&dir.join(VERSION_FILE), format!("pointdiff {VERSION}\n").as_bytes())
    }
}

fn unknown(section: &str, key: &str) -> Error {
    Error::InvalidArgument(format!("unknown key '{key}' in [{section}]"))
}
