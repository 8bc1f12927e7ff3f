//! Flat `key = value` configuration with defaults, file parsing, and
//! command-line overrides.
//!
//! Precedence: built-in defaults < config file < overrides. Unknown keys are
//! rejected so typos fail fast. `to_lines` serializes the effective
//! configuration in registry order; the same text is embedded in checkpoints
//! and echoed at the start of every training log.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::{HorizonMode, Normalization};
use crate::error::{Error, Result};
use crate::graph_learning::GraphMode;
use crate::model::{Channels, MtgnnConfig};
use crate::synth::SynthConfig;
use crate::training::TrainConfig;

/// Registered keys and their defaults (multi-step task defaults).
pub const KEYS: &[(&str, &str)] = &[
    ("task", "multi_step"),
    ("num_nodes", "0"),
    ("input_len", "12"),
    ("output_len", "12"),
    ("horizon", "3"),
    ("layers", "3"),
    ("dilation_rate", "1"),
    ("start_channels", "32"),
    ("conv_channels", "32"),
    ("skip_channels", "64"),
    ("end_channels", "128"),
    ("mixhop_depth", "2"),
    ("mixhop_beta", "0.05"),
    ("graph_mode", "uni_directed"),
    ("graph_k", "20"),
    ("graph_alpha", "3"),
    ("embed_dim", "40"),
    ("dropout", "0.3"),
    ("use_gc", "true"),
    ("use_mixhop_selection", "true"),
    ("use_inception", "true"),
    ("use_curriculum", "true"),
    ("pad_input", "true"),
    ("lr", "0.001"),
    ("l2_penalty", "0.0001"),
    ("grad_clip", "5"),
    ("batch_size", "64"),
    ("epochs", "30"),
    ("curriculum_step", "100"),
    ("split_size", "1"),
    ("seed", "42"),
    ("train_frac", "0.7"),
    ("valid_frac", "0.2"),
    ("normalization", "zscore"),
    ("time_of_day", "false"),
    ("steps_per_day", "288"),
    ("forward_fill", "false"),
    ("predefined_graph", ""),
    ("synth_nodes", "10"),
    ("synth_edges", "15"),
    ("synth_lag", "3"),
    ("synth_noise", "0.1"),
    ("synth_len", "5740"),
];

#[derive(Debug, Clone)]
pub struct FlatConfig {
    values: BTreeMap<String, String>,
}

impl Default for FlatConfig {
    fn default() -> Self {
        let values = KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        FlatConfig { values }
    }
}

impl FlatConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(|s| s.as_str()).unwrap_or_default()
    }

    /// Parse `key = value` lines; `#` starts a comment, blank lines ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(key.trim(), value).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn apply_overrides(&mut self, overrides: &[(String, String)]) -> Result<()> {
        for (k, v) in overrides {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Effective configuration in registry order, one `key = value` per line.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(self.get(k));
            out.push('\n');
        }
        out
    }

    fn usize_of(&self, key: &str) -> Result<usize> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("key `{key}` must be a non-negative integer, got `{}`", self.get(key))))
    }

    fn u64_of(&self, key: &str) -> Result<u64> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("key `{key}` must be a non-negative integer, got `{}`", self.get(key))))
    }

    fn f64_of(&self, key: &str) -> Result<f64> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("key `{key}` must be a number, got `{}`", self.get(key))))
    }

    fn bool_of(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(Error::Config(format!("key `{key}` must be a boolean, got `{other}`"))),
        }
    }
}

/// Windowing/normalization settings derived from the flat config.
#[derive(Debug, Clone)]
pub struct DataConfig {
    pub horizon_mode: HorizonMode,
    pub input_len: usize,
    pub train_frac: f64,
    pub valid_frac: f64,
    pub normalization: Normalization,
    pub time_of_day: bool,
    pub steps_per_day: usize,
    pub forward_fill: bool,
}

/// Fully typed view over a [`FlatConfig`].
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub flat: FlatConfig,
    pub model: MtgnnConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub predefined_graph: Option<String>,
}

impl RunConfig {
    pub fn from_flat(flat: FlatConfig) -> Result<RunConfig> {
        let task = flat.get("task").to_string();
        let horizon_mode = match task.as_str() {
            "multi_step" => HorizonMode::MultiStep,
            "single_step" => HorizonMode::SingleStep { horizon: flat.usize_of("horizon")? },
            other => {
                return Err(Error::Config(format!(
                    "task must be multi_step or single_step, got `{other}`"
                )))
            }
        };
        let output_len = match horizon_mode {
            HorizonMode::MultiStep => flat.usize_of("output_len")?,
            HorizonMode::SingleStep { .. } => 1,
        };
        let time_of_day = flat.bool_of("time_of_day")?;
        let model = MtgnnConfig {
            num_nodes: flat.usize_of("num_nodes")?,
            in_dim: if time_of_day { 2 } else { 1 },
            input_len: flat.usize_of("input_len")?,
            output_len,
            layers: flat.usize_of("layers")?,
            dilation_rate: flat.usize_of("dilation_rate")?,
            channels: Channels {
                start: flat.usize_of("start_channels")?,
                conv: flat.usize_of("conv_channels")?,
                skip: flat.usize_of("skip_channels")?,
                end: flat.usize_of("end_channels")?,
            },
            mixhop_depth: flat.usize_of("mixhop_depth")?,
            mixhop_beta: flat.f64_of("mixhop_beta")?,
            graph_mode: GraphMode::parse(flat.get("graph_mode"))?,
            graph_k: flat.usize_of("graph_k")?,
            graph_alpha: flat.f64_of("graph_alpha")?,
            embed_dim: flat.usize_of("embed_dim")?,
            dropout: flat.f64_of("dropout")?,
            use_gc: flat.bool_of("use_gc")?,
            use_mixhop_selection: flat.bool_of("use_mixhop_selection")?,
            use_inception: flat.bool_of("use_inception")?,
            use_curriculum: flat.bool_of("use_curriculum")?,
            pad_input: flat.bool_of("pad_input")?,
        };
        model.validate()?;
        let train = TrainConfig {
            lr: flat.f64_of("lr")?,
            l2_penalty: flat.f64_of("l2_penalty")?,
            grad_clip: flat.f64_of("grad_clip")?,
            batch_size: flat.usize_of("batch_size")?,
            epochs: flat.usize_of("epochs")?,
            curriculum_step: flat.usize_of("curriculum_step")?,
            split_size: flat.usize_of("split_size")?,
            seed: flat.u64_of("seed")?,
        };
        train.validate()?;
        let data = DataConfig {
            horizon_mode,
            input_len: model.input_len,
            train_frac: flat.f64_of("train_frac")?,
            valid_frac: flat.f64_of("valid_frac")?,
            normalization: Normalization::parse(flat.get("normalization"))?,
            time_of_day,
            steps_per_day: flat.usize_of("steps_per_day")?,
            forward_fill: flat.bool_of("forward_fill")?,
        };
        if !(data.train_frac > 0.0
            && data.valid_frac >= 0.0
            && data.train_frac + data.valid_frac < 1.0 + 1e-12)
        {
            return Err(Error::Config(format!(
                "split fractions invalid: train={} valid={}",
                data.train_frac, data.valid_frac
            )));
        }
        if data.steps_per_day == 0 {
            return Err(Error::Config("steps_per_day must be >= 1".into()));
        }
        let synth = SynthConfig {
            nodes: flat.usize_of("synth_nodes")?,
            edges: flat.usize_of("synth_edges")?,
            lag: flat.usize_of("synth_lag")?,
            noise: flat.f64_of("synth_noise")?,
            len: flat.usize_of("synth_len")?,
            seed: flat.u64_of("seed")?,
        };
        let predefined_graph = match flat.get("predefined_graph") {
            "" => None,
            p => Some(p.to_string()),
        };
        Ok(RunConfig { flat, model, train, data, synth, predefined_graph })
    }

    /// Defaults + optional file + overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut flat = FlatConfig::default();
        if let Some(p) = path {
            flat.apply_file(p)?;
        }
        flat.apply_overrides(overrides)?;
        RunConfig::from_flat(flat)
    }

    /// Re-derive the typed views after mutating the flat map.
    pub fn rebind(mut self, key: &str, value: &str) -> Result<RunConfig> {
        self.flat.set(key, value)?;
        RunConfig::from_flat(self.flat)
    }
}
