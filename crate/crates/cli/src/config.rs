//! Plain-text key-value run configuration with flag overrides.
//!
//! Every default equals the full-method preset; a config file may override
//! any subset; command-line `--set key=value` pairs win over the file.

use std::fmt::Write as _;
use std::path::Path;

use mmjail_core::orchestrator::{AttackConfig, Precision};

use crate::CliError;

/// Attack configuration plus the protocol fields the commands need.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub attack: AttackConfig,
    /// Training-split size for the universal attack.
    pub n_train: usize,
    /// Held-out evaluation set size.
    pub n_test: usize,
    /// Test resamplings averaged by evaluation.
    pub resamples: usize,
    /// Split seed; defaults to the run seed.
    pub split_seed: Option<u64>,
    /// Whether `seed` came from the file or an override rather than the
    /// preset default.
    pub seed_explicit: bool,
}

impl RunConfig {
    pub fn defaults() -> Self {
        RunConfig {
            attack: AttackConfig::ours(),
            n_train: 25,
            n_test: 100,
            resamples: 3,
            split_seed: None,
            seed_explicit: false,
        }
    }

    pub fn from_preset(preset: &str) -> Result<Self, CliError> {
        Ok(RunConfig {
            attack: AttackConfig::preset(preset).map_err(CliError::usage_from)?,
            ..Self::defaults()
        })
    }

    /// Apply `key = value` lines from a config file.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Usage(format!(
                    "config line {} is not `key = value`: {raw:?}",
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Apply one override; unknown keys are usage errors naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let bad = |key: &str, value: &str| {
            CliError::Usage(format!("invalid value {value:?} for config key {key:?}"))
        };
        macro_rules! parse {
            ($field:expr, $ty:ty) => {
                $field = value.parse::<$ty>().map_err(|_| bad(key, value))?
            };
        }
        match key {
            "outer_iters" => parse!(self.attack.outer_iters, usize),
            "image_iters" => parse!(self.attack.image_iters, usize),
            "suffix_iters" => parse!(self.attack.suffix_iters, usize),
            "behavior_batch" => parse!(self.attack.behavior_batch, usize),
            "image_neighbors" => parse!(self.attack.image_neighbors, usize),
            "suffix_neighbors" => parse!(self.attack.suffix_neighbors, usize),
            "image_radius" => parse!(self.attack.image_radius, f64),
            "image_step" => parse!(self.attack.image_step, f64),
            "momentum" => parse!(self.attack.momentum, f64),
            "suffix_len" => parse!(self.attack.suffix_len, usize),
            "candidate_batch" => parse!(self.attack.candidate_batch, usize),
            "top_k" => parse!(self.attack.top_k, usize),
            "seed" => {
                parse!(self.attack.seed, u64);
                self.seed_explicit = true;
            }
            "suffix_enabled" => parse!(self.attack.suffix_enabled, bool),
            "image_enabled" => parse!(self.attack.image_enabled, bool),
            "suffix_variance_enabled" => parse!(self.attack.suffix_variance_enabled, bool),
            "image_variance_enabled" => parse!(self.attack.image_variance_enabled, bool),
            "precision" => {
                self.attack.precision = match value {
                    "f64" => Precision::F64,
                    "f32" => Precision::F32,
                    _ => return Err(bad(key, value)),
                }
            }
            "n_train" => parse!(self.n_train, usize),
            "n_test" => parse!(self.n_test, usize),
            "resamples" => parse!(self.resamples, usize),
            "split_seed" => {
                self.split_seed = Some(value.parse::<u64>().map_err(|_| bad(key, value))?)
            }
            other => {
                return Err(CliError::Usage(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// Render the effective configuration in config-file syntax.
    pub fn render(&self) -> String {
        let a = &self.attack;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("outer_iters", a.outer_iters.to_string());
        kv("image_iters", a.image_iters.to_string());
        kv("suffix_iters", a.suffix_iters.to_string());
        kv("behavior_batch", a.behavior_batch.to_string());
        kv("image_neighbors", a.image_neighbors.to_string());
        kv("suffix_neighbors", a.suffix_neighbors.to_string());
        kv("image_radius", a.image_radius.to_string());
        kv("image_step", a.image_step.to_string());
        kv("momentum", a.momentum.to_string());
        kv("suffix_len", a.suffix_len.to_string());
        kv("candidate_batch", a.candidate_batch.to_string());
        kv("top_k", a.top_k.to_string());
        kv("seed", a.seed.to_string());
        kv("suffix_enabled", a.suffix_enabled.to_string());
        kv("image_enabled", a.image_enabled.to_string());
        kv("suffix_variance_enabled", a.suffix_variance_enabled.to_string());
        kv("image_variance_enabled", a.image_variance_enabled.to_string());
        kv(
            "precision",
            match a.precision {
                Precision::F64 => "f64".to_string(),
                Precision::F32 => "f32".to_string(),
            },
        );
        kv("n_train", self.n_train.to_string());
        kv("n_test", self.n_test.to_string());
        kv("resamples", self.resamples.to_string());
        if let Some(s) = self.split_seed {
            kv("split_seed", s.to_string());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_named_in_error() {
        let mut cfg = RunConfig::defaults();
        match cfg.set("bogus_key", "1") {
            Err(CliError::Usage(msg)) => assert!(msg.contains("bogus_key")),
            other => panic!("expected usage error, got {other:?}"),
        }
    }

    #[test]
    fn file_then_override() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "# comment\nsuffix_len = 4\ntop_k = 12\n").unwrap();
        let mut cfg = RunConfig::defaults();
        cfg.apply_file(&p).unwrap();
        assert_eq!(cfg.attack.suffix_len, 4);
        cfg.set("suffix_len", "6").unwrap();
        assert_eq!(cfg.attack.suffix_len, 6);
    }

    #[test]
    fn render_round_trips() {
        let mut cfg = RunConfig::defaults();
        cfg.set("momentum", "0.5").unwrap();
        let rendered = cfg.render();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, &rendered).unwrap();
        let mut back = RunConfig::defaults();
        back.apply_file(&p).unwrap();
        assert_eq!(back.attack, cfg.attack);
    }
}
