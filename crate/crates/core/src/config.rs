//! Run configuration: flat dotted JSON keys (`pipeline.n_envs`, `agent.gamma`)
//! over profile defaults, with unknown keys rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::agent::AgentConfig;
use crate::env::{EnvConfig, EnvName, EnvSpec, Preprocessor};
use crate::error::{Error, Result};
use crate::nn::{ConvImpl, NetworkSpec};
use crate::optim::AdamConfig;

pub const DETERMINISTIC_ENV_VAR: &str = "BA3C_DETERMINISTIC";

/// True when `BA3C_DETERMINISTIC=1` is set.
pub fn deterministic_forced() -> bool {
    std::env::var(DETERMINISTIC_ENV_VAR).map(|v| v.trim() == "1").unwrap_or(false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Sized for the built-in toy games on a workstation.
    #[default]
    Desk,
    /// The published hyperparameter table verbatim.
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!("unknown profile {other:?} (expected desk or paper)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub n_envs: usize,
    pub batch_size: usize,
    pub train_queue_capacity: usize,
    pub predict_min_batch: usize,
    pub predict_timeout_ms: f64,
    /// Artificial delay in batches between the training queue and the trainer.
    pub delay_k: usize,
    /// Abort when the trainer makes no progress for this long.
    pub watchdog_secs: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            n_envs: 16,
            batch_size: 32,
            train_queue_capacity: 3,
            predict_min_batch: 4,
            predict_timeout_ms: 2.0,
            delay_k: 0,
            watchdog_secs: 120.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_envs == 0 || self.batch_size == 0 || self.train_queue_capacity == 0 || self.predict_min_batch == 0 {
            return bad("pipeline sizes and capacities must be at least 1".into());
        }
        if self.predict_min_batch > self.n_envs {
            return bad(format!(
                "pipeline.predict_min_batch ({}) exceeds pipeline.n_envs ({})",
                self.predict_min_batch, self.n_envs
            ));
        }
        if !(self.predict_timeout_ms >= 0.0 && self.predict_timeout_ms.is_finite()) {
            return bad("pipeline.predict_timeout_ms must be a non-negative number".into());
        }
        if !(self.watchdog_secs > 0.0) {
            return bad("pipeline.watchdog_secs must be positive".into());
        }
        Ok(())
    }

    pub fn predict_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.predict_timeout_ms / 1000.0)
    }

    pub fn watchdog(&self) -> Duration {
        Duration::from_secs_f64(self.watchdog_secs)
    }

    /// Upper bound on `train_version - gen_version` for any trained batch.
    pub fn staleness_bound(&self) -> u64 {
        (self.train_queue_capacity + self.delay_k + 1) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSetup {
    pub name: EnvName,
    pub grid: Option<usize>,
    pub max_steps: Option<usize>,
    pub frame_history: usize,
    /// `[h, w]` the raw frames are rescaled to.
    pub image_size: [usize; 2],
}

impl EnvSetup {
    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            name: self.name,
            grid: self.grid,
            max_steps: self.max_steps,
        }
    }

    pub fn preprocessor(&self) -> Preprocessor {
        Preprocessor::new((self.image_size[0], self.image_size[1]), self.frame_history)
    }

    /// `[h, w, c]` of the network input.
    pub fn state_dims(&self, spec: &EnvSpec) -> [usize; 3] {
        self.preprocessor().state_dims(spec.obs_channels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Toy,
    Atari,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSetup {
    pub arch: Arch,
    pub conv_impl: ConvImpl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Async,
    Sync,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSetup {
    /// Environment steps to take, summed over all workers.
    pub frames: u64,
    /// Frames between evaluations; 0 evaluates only at the end.
    pub eval_interval: u64,
    pub eval_games: usize,
    pub mode: TrainMode,
    /// Episodes played per iteration in sync mode.
    pub sync_episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub deterministic: bool,
    pub optim: AdamConfig,
    pub agent: AgentConfig,
    pub pipeline: PipelineConfig,
    pub env: EnvSetup,
    pub net: NetSetup,
    pub train: TrainSetup,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let desk = RunConfig {
            profile,
            seed: 0,
            output_dir: PathBuf::from("out"),
            deterministic: false,
            optim: AdamConfig::default(),
            agent: AgentConfig::default(),
            pipeline: PipelineConfig::default(),
            env: EnvSetup {
                name: EnvName::Catch,
                grid: None,
                max_steps: None,
                frame_history: 4,
                image_size: [24, 24],
            },
            net: NetSetup {
                arch: Arch::Toy,
                conv_impl: ConvImpl::Optimized,
            },
            train: TrainSetup {
                frames: 200_000,
                eval_interval: 20_000,
                eval_games: 50,
                mode: TrainMode::Async,
                sync_episodes: 16,
            },
        };
        match profile {
            Profile::Desk => desk,
            Profile::Paper => {
                let mut c = desk;
                c.optim.learning_rate = 0.001;
                c.pipeline.batch_size = 128;
                c.env.frame_history = 4;
                c.agent.local_t_max = 5;
                c.env.image_size = [84, 84];
                c.agent.gamma = 0.99;
                c.net.arch = Arch::Atari;
                c
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.agent.validate()?;
        let o = &self.optim;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::Config("optim.learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.epsilon > 0.0) {
            return Err(Error::Config("optim betas must be in [0, 1) and epsilon positive".into()));
        }
        if let Some(c) = o.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("optim.clip_norm must be positive".into()));
            }
        }
        if self.env.frame_history == 0 || self.env.image_size.contains(&0) {
            return Err(Error::Config("env.frame_history and env.image_size must be positive".into()));
        }
        if self.train.eval_games == 0 || self.train.sync_episodes == 0 {
            return Err(Error::Config("train.eval_games and train.sync_episodes must be positive".into()));
        }
        self.network_spec()?;
        Ok(())
    }

    pub fn env_spec(&self) -> Result<EnvSpec> {
        self.env.env_config().spec().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        let spec = self.env_spec()?;
        let input = self.env.state_dims(&spec);
        let mut net = match self.net.arch {
            Arch::Toy => NetworkSpec::toy(input, spec.n_actions),
            Arch::Atari => NetworkSpec::atari(input, spec.n_actions),
        };
        net.conv_impl = self.net.conv_impl;
        // compile once to reject inputs too small for the trunk
        crate::nn::Network::<f32>::new(net.clone(), &mut rand::rngs::mock::StepRng::new(0, 1))
            .map_err(|e| Error::Config(format!("network does not fit input {input:?}: {e}")))?;
        Ok(net)
    }

    /// Config as a flat map of dotted keys.
    pub fn to_flat(&self) -> Result<BTreeMap<String, Value>> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self)?, &mut out);
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        let flat: Map<String, Value> = self.to_flat()?.into_iter().collect();
        Ok(serde_json::to_string_pretty(&Value::Object(flat))?)
    }

    /// Resolves a config: profile defaults, then `file` keys, then `overrides`.
    /// The profile comes from the last layer that sets `profile`.
    pub fn resolve(file: &BTreeMap<String, Value>, overrides: &BTreeMap<String, Value>) -> Result<Self> {
        let profile_value = overrides.get("profile").or_else(|| file.get("profile"));
        let profile = match profile_value {
            None => Profile::default(),
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("profile: {e}")))?,
        };
        let mut flat = RunConfig::for_profile(profile).to_flat()?;
        for (k, v) in file.iter().chain(overrides) {
            match flat.get_mut(k) {
                Some(slot) => *slot = v.clone(),
                None => return Err(Error::Config(format!("unknown config key {k:?}"))),
            }
        }
        let nested = unflatten(&flat)?;
        let cfg: RunConfig = serde_json::from_value(nested).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::resolve(&parse_flat(text)?, &BTreeMap::new())
    }

    pub fn load(path: &Path, overrides: &BTreeMap<String, Value>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::resolve(&parse_flat(&text)?, overrides)
    }
}

/// Parses a JSON object of dotted keys. Nested objects are accepted too and
/// flattened, so both spellings of a key resolve the same way.
pub fn parse_flat(text: &str) -> Result<BTreeMap<String, Value>> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
    if !v.is_object() {
        return Err(Error::Config("config must be a JSON object".into()));
    }
    let mut out = BTreeMap::new();
    flatten("", &v, &mut out);
    Ok(out)
}

/// `key=value` override; the value is read as JSON when it parses, else as a string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Result<Value> {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().expect("split yields at least one part");
        let mut node = &mut root;
        for p in parts {
            let entry = node.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
            node = entry
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("config key {key:?} conflicts with a scalar")))?;
        }
        node.insert(last.to_string(), v.clone());
    }
    Ok(Value::Object(root))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn map(pairs: &[(&str, Value)]) -> BTreeMap<String, Value> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn defaults_validate() {
        RunConfig::for_profile(Profile::Desk).validate().unwrap();
        RunConfig::for_profile(Profile::Paper).validate().unwrap();
    }

    #[test]
    fn paper_profile_restores_table_values() {
        let c = RunConfig::resolve(&map(&[("profile", json!("paper"))]), &BTreeMap::new()).unwrap();
        assert_eq!(c.optim.learning_rate, 0.001);
        assert_eq!(c.pipeline.batch_size, 128);
        assert_eq!(c.env.frame_history, 4);
        assert_eq!(c.agent.local_t_max, 5);
        assert_eq!(c.env.image_size, [84, 84]);
        assert_eq!(c.agent.gamma, 0.99);
        let d = RunConfig::for_profile(Profile::Desk);
        assert_eq!((d.pipeline.batch_size, d.env.image_size), (32, [24, 24]));
    }

    #[test]
    fn flat_keys_and_overrides() {
        let file = map(&[("pipeline.n_envs", json!(4)), ("agent.gamma", json!(0.9)), ("seed", json!(3))]);
        let flags = map(&[("seed", json!(7))]);
        let c = RunConfig::resolve(&file, &flags).unwrap();
        assert_eq!((c.pipeline.n_envs, c.agent.gamma, c.seed), (4, 0.9, 7));
    }

    #[test]
    fn nested_spelling_is_accepted() {
        let c = RunConfig::from_json(r#"{"pipeline": {"delay_k": 5}, "env.name": "minipong"}"#).unwrap();
        assert_eq!(c.pipeline.delay_k, 5);
        assert_eq!(c.env.name, EnvName::MiniPong);
    }

    #[test]
    fn unknown_and_invalid_keys_rejected() {
        for text in [
            r#"{"pipeline.n_env": 4}"#,
            r#"{"bogus": 1}"#,
            r#"{"agent.gamma": 1.5}"#,
            r#"{"pipeline.predict_min_batch": 64}"#,
            r#"{"profile": "huge"}"#,
            r#"[1, 2]"#,
            r#"{"env.image_size": [4, 4]}"#,
        ] {
            assert!(matches!(RunConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let c = RunConfig::from_json(r#"{"profile": "paper", "optim.clip_norm": 40.0, "seed": 9}"#).unwrap();
        let text = c.to_json().unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn override_parsing() {
        assert_eq!(parse_override("seed=4").unwrap(), ("seed".into(), json!(4)));
        assert_eq!(parse_override("env.name=catch").unwrap(), ("env.name".into(), json!("catch")));
        assert!(parse_override("seed").is_err());
    }

    #[test]
    fn staleness_bound_formula() {
        let p = PipelineConfig { train_queue_capacity: 3, delay_k: 10, ..Default::default() };
        assert_eq!(p.staleness_bound(), 14);
    }
}
