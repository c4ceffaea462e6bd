use std::fmt;
use std::path::{Path, PathBuf};

use ctpp::events::{compute_stats, rescale_times, Dataset, DEFAULT_MAX_LEN};
use ctpp::model::ModelConfig;
use ctpp::train::TrainConfig;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::CliError;

pub const OUTPUT_ENV: &str = "CTPP_OUTPUT_DIR";

/// How raw timestamps are rescaled before training.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum TimeScale {
    /// Keep times as they are.
    #[default]
    None,
    /// Divide by the mean training interval δ.
    Auto,
    Factor(f64),
}

impl fmt::Display for TimeScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeScale::None => f.write_str("none"),
            TimeScale::Auto => f.write_str("auto"),
            TimeScale::Factor(s) => write!(f, "{s}"),
        }
    }
}

impl Serialize for TimeScale {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            TimeScale::Factor(v) => s.serialize_f64(*v),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for TimeScale {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) if v > 0.0 && v.is_finite() => Ok(TimeScale::Factor(v)),
            Raw::Num(v) => Err(serde::de::Error::custom(format!("time_scale must be positive, got {v}"))),
            Raw::Text(t) => match t.as_str() {
                "none" => Ok(TimeScale::None),
                "auto" => Ok(TimeScale::Auto),
                other => Err(serde::de::Error::custom(format!(
                    "time_scale must be a number, \"none\" or \"auto\", got `{other}`"
                ))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    pub num_marks: usize,
    pub max_len: usize,
    pub time_scale: TimeScale,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: "train.jsonl".into(),
            valid: "valid.jsonl".into(),
            test: "test.jsonl".into(),
            num_marks: 1,
            max_len: DEFAULT_MAX_LEN,
            time_scale: TimeScale::None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Falls back to `$CTPP_OUTPUT_DIR`, then `ctpp-out`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

/// Everything `ctpp train` reads from its config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    /// Reads the file and makes every relative path relative to its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.train, &mut cfg.data.valid, &mut cfg.data.test] {
            *p = resolve(base, p);
        }
        if let Some(dir) = &mut cfg.output.dir {
            *dir = resolve(base, dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output
            .dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("ctpp-out"))
    }

    /// Loads the three splits and applies the configured time scale.
    pub fn load_dataset(&self) -> Result<Dataset, CliError> {
        let d = &self.data;
        let data = Dataset::from_files(&d.train, &d.valid, &d.test, d.num_marks, d.max_len)?;
        let s = match d.time_scale {
            TimeScale::None => return Ok(data),
            TimeScale::Auto => 1.0 / compute_stats(&data)?.delta,
            TimeScale::Factor(s) => s,
        };
        Ok(rescale_times(&data, s)?)
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Tiny instance used by `ctpp gradcheck`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub num_marks: usize,
    pub dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub channels: usize,
    pub components: usize,
    pub len: usize,
    pub seeds: u64,
    pub omega0: f64,
    pub kernel_hidden: Vec<usize>,
    pub step: f64,
    pub tolerance: f64,
    pub beta: f64,
    /// Adds 1 to one analytic kernel-gradient entry before comparing.
    pub corrupt_gradient: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            num_marks: 3,
            dim: 4,
            hidden: 8,
            layers: 2,
            channels: 2,
            components: 3,
            len: 5,
            seeds: 5,
            omega0: 1.0,
            kernel_hidden: vec![8, 8],
            step: 1e-5,
            tolerance: 1e-4,
            beta: 0.3,
            corrupt_gradient: false,
        }
    }
}

impl GradCheckConfig {
    pub const MAX_DIM: usize = 8;
    pub const MAX_LEN: usize = 6;

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let cfg: GradCheckConfig = toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.dim == 0 || self.dim > Self::MAX_DIM || self.hidden == 0 || self.hidden > Self::MAX_DIM {
            return Err(CliError::Usage(format!(
                "gradcheck needs 1 ≤ dim, hidden ≤ {}",
                Self::MAX_DIM
            )));
        }
        if self.len < 2 || self.len > Self::MAX_LEN {
            return Err(CliError::Usage(format!("gradcheck needs 2 ≤ len ≤ {}", Self::MAX_LEN)));
        }
        if self.seeds == 0 || self.channels == 0 {
            return Err(CliError::Usage("gradcheck needs at least one seed and one channel".into()));
        }
        Ok(())
    }
}
