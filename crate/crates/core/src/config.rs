//! Run configuration: TOML file with `[env]`, `[data]`, `[model]` and `[run]`
//! sections. Resolution order is built-in defaults, then the file, then
//! `TABB_<SECTION>_<KEY>` environment variables, then `--set section.key=value`
//! overrides. Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::Tier;
use crate::envs::{EnvSpec, Family, ShiftKind};
use crate::error::{Error, Result};

pub const ENV_PREFIX: &str = "TABB_";
pub const SECTIONS: [&str; 4] = ["env", "data", "model", "run"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WtarMode {
    /// Per-dimension variance normalized to mean 1, then clamped.
    Variance,
    /// Inverse variance normalized to mean 1, then clamped.
    InverseVariance,
    /// Raw variance, clamped only.
    Raw,
}

/// Which value function supplies the bootstrap in the critic target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticValueSource {
    Iql,
    Anchor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Tabb,
    NoTbm,
    SrcActor,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Tabb, Variant::NoTbm, Variant::SrcActor];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Tabb => "tabb",
            Variant::NoTbm => "no_tbm",
            Variant::SrcActor => "src_actor",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tabb" => Ok(Variant::Tabb),
            "no_tbm" => Ok(Variant::NoTbm),
            "src_actor" => Ok(Variant::SrcActor),
            _ => Err(Error::Config(format!("unknown variant `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Monte Carlo rollouts.
    Rollout,
    /// Exact expected return by dynamic programming (grid only).
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayMode {
    /// Exact expected target backup over the transition distribution.
    Expected,
    /// One sampled target step per transition.
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub family: Family,
    pub shift_kind: ShiftKind,
    pub shift_level: f64,
    /// Episode length; 0 picks the family default (100 grid, 200 point mass).
    pub horizon: usize,
    pub reward_scale: f64,
    pub grid_size: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            family: Family::GridSlip,
            shift_kind: ShiftKind::Friction,
            shift_level: 0.3,
            horizon: 0,
            reward_scale: 1.0,
            grid_size: 8,
        }
    }
}

impl EnvConfig {
    pub fn spec(&self, seed: u64) -> EnvSpec {
        EnvSpec {
            family: self.family,
            shift_kind: self.shift_kind,
            shift_level: self.shift_level,
            horizon: match (self.horizon, self.family) {
                (0, Family::GridSlip) => 100,
                (0, Family::PointMass) => 200,
                (h, _) => h,
            },
            reward_scale: self.reward_scale,
            seed,
            grid_size: self.grid_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source_size: usize,
    pub target_size: usize,
    pub source_tier: Tier,
    pub target_tier: Tier,
    /// Root seed for dataset generation, shared by every training seed.
    pub seed: u64,
    /// Dataset directory; relative paths resolve against the run directory.
    pub dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source_size: crate::datasets::DEFAULT_SOURCE_SIZE,
            target_size: crate::datasets::DEFAULT_TARGET_SIZE,
            source_tier: Tier::Medium,
            target_tier: Tier::Random,
            seed: 0,
            dir: PathBuf::from("data"),
        }
    }
}

/// Network and optimization hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub learning_rate: f64,
    pub optimizer: String,
    pub discount: f64,
    pub target_update_rate: f64,
    pub batch_size: usize,
    pub expectile: f64,
    pub advantage_temperature: f64,
    pub latent_state_dim: usize,
    pub latent_action_dim: usize,
    pub state_encoder_hidden: Vec<usize>,
    pub state_action_encoder_hidden: Vec<usize>,
    pub latent_pretraining_steps: usize,
    pub tbm_temperature: f64,
    pub huber_delta: f64,
    pub predictor_hidden: Vec<usize>,
    pub refinement_steps: usize,
    pub anchor_steps: usize,
    pub wtar_refresh_every: usize,
    pub wtar_mode: WtarMode,
    pub wtar_clamp: [f64; 2],
    pub stop_grad_next_latent: bool,
    pub adv_clip: f64,
    pub weight_rescale: bool,
    pub critic_value_source: CriticValueSource,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            actor_hidden: vec![256, 256],
            critic_hidden: vec![256, 256],
            learning_rate: 3e-4,
            optimizer: "adam".into(),
            discount: 0.99,
            target_update_rate: 5e-3,
            batch_size: 256,
            expectile: 0.7,
            advantage_temperature: 3.0,
            latent_state_dim: 64,
            latent_action_dim: 64,
            state_encoder_hidden: vec![256, 256],
            state_action_encoder_hidden: vec![256, 256],
            latent_pretraining_steps: 200_000,
            tbm_temperature: 0.3,
            huber_delta: 1.0,
            predictor_hidden: vec![256, 256],
            refinement_steps: 20_000,
            anchor_steps: 20_000,
            wtar_refresh_every: 1000,
            wtar_mode: WtarMode::Variance,
            wtar_clamp: [0.1, 10.0],
            stop_grad_next_latent: true,
            adv_clip: 100.0,
            weight_rescale: false,
            critic_value_source: CriticValueSource::Iql,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.optimizer != "adam" {
            return bad(format!("optimizer `{}` unsupported (only adam)", self.optimizer));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return bad(format!("discount {} not in [0, 1)", self.discount));
        }
        if !(0.0..=1.0).contains(&self.target_update_rate) {
            return bad(format!("target_update_rate {}", self.target_update_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.expectile > 0.0 && self.expectile < 1.0) {
            return bad(format!("expectile {} not in (0, 1)", self.expectile));
        }
        if [self.tbm_temperature, self.huber_delta, self.adv_clip].iter().any(|v| v.is_nan() || *v <= 0.0) {
            return bad("tbm_temperature, huber_delta and adv_clip must be positive".into());
        }
        if !self.advantage_temperature.is_finite() || self.advantage_temperature < 0.0 {
            return bad(format!("advantage_temperature {}", self.advantage_temperature));
        }
        if self.latent_state_dim == 0 || self.latent_action_dim == 0 {
            return bad("latent dims must be >= 1".into());
        }
        for (name, h) in [
            ("actor_hidden", &self.actor_hidden),
            ("critic_hidden", &self.critic_hidden),
            ("state_encoder_hidden", &self.state_encoder_hidden),
            ("state_action_encoder_hidden", &self.state_action_encoder_hidden),
            ("predictor_hidden", &self.predictor_hidden),
        ] {
            if h.is_empty() || h.contains(&0) {
                return bad(format!("{name} must be a non-empty list of positive widths"));
            }
        }
        if self.wtar_refresh_every == 0 {
            return bad("wtar_refresh_every must be >= 1".into());
        }
        let [lo, hi] = self.wtar_clamp;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("wtar_clamp [{lo}, {hi}]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub variant: Variant,
    /// Variants trained by `sweep`.
    pub variants: Vec<Variant>,
    pub steps: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub eval_mode: EvalMode,
    pub out_dir: PathBuf,
    pub workers: usize,
    pub diagnose_transitions: usize,
    pub diagnose_groups: usize,
    pub replay_mode: ReplayMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seeds: vec![0],
            variant: Variant::Tabb,
            variants: Variant::ALL.to_vec(),
            steps: 100_000,
            eval_every: 5_000,
            eval_episodes: 20,
            eval_mode: EvalMode::Rollout,
            out_dir: PathBuf::from("runs/default"),
            workers: 1,
            diagnose_transitions: 10_000,
            diagnose_groups: 10,
            replay_mode: ReplayMode::Expected,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub env: EnvConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub run: RunConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.env.spec(0).validate().map_err(|e| Error::Config(e.to_string()))?;
        self.model.validate()?;
        if self.data.source_size == 0 || self.data.target_size == 0 {
            return Err(Error::Config("dataset sizes must be >= 1".into()));
        }
        if self.run.seeds.is_empty() {
            return Err(Error::Config("run.seeds is empty".into()));
        }
        if self.run.eval_every == 0 || self.run.workers == 0 || self.run.diagnose_groups == 0 {
            return Err(Error::Config("eval_every, workers and diagnose_groups must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Resolver::new().file_text(text)?.finish()
    }

    /// Resolved data directory.
    pub fn data_dir(&self) -> PathBuf {
        if self.data.dir.is_absolute() {
            self.data.dir.clone()
        } else {
            self.run.out_dir.join(&self.data.dir)
        }
    }
}

/// Layers config sources over the defaults.
pub struct Resolver {
    table: toml::Table,
}

impl Default for Resolver {
    fn default() -> Self {
        Self::new()
    }
}

impl Resolver {
    pub fn new() -> Self {
        Self::from_config(&Config::default())
    }

    /// Starts from `base` instead of the built-in defaults.
    pub fn from_config(base: &Config) -> Self {
        let table = toml::Table::try_from(base).expect("config serializes");
        Resolver { table }
    }

    pub fn file(self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        self.file_text(&text)
    }

    pub fn file_text(mut self, text: &str) -> Result<Self> {
        let parsed: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for (section, value) in parsed {
            let Some(body) = value.as_table() else {
                return Err(Error::Config(format!("top-level key `{section}` is not a section")));
            };
            for (key, v) in body {
                self.put(&section, key, v.clone())?;
            }
        }
        Ok(self)
    }

    /// Applies `TABB_<SECTION>_<KEY>` variables. Other variables are ignored.
    pub fn env_vars<I>(mut self, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut vars: Vec<_> = vars.into_iter().collect();
        vars.sort();
        for (name, raw) in vars {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else { continue };
            let rest = rest.to_ascii_lowercase();
            let Some(section) = SECTIONS.iter().find(|s| rest.starts_with(&format!("{s}_"))) else {
                continue;
            };
            let key = &rest[section.len() + 1..];
            self.put(section, key, parse_value(&raw))?;
        }
        Ok(self)
    }

    /// Applies `section.key=value` overrides.
    pub fn sets<'a, I>(mut self, sets: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        for s in sets {
            let (path, raw) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{s}` is not section.key=value")))?;
            let (section, key) = path
                .trim()
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("override key `{path}` is not section.key")))?;
            self.put(section, key, parse_value(raw.trim()))?;
        }
        Ok(self)
    }

    pub fn set(mut self, section: &str, key: &str, value: toml::Value) -> Result<Self> {
        self.put(section, key, value)?;
        Ok(self)
    }

    fn put(&mut self, section: &str, key: &str, value: toml::Value) -> Result<()> {
        let body = self
            .table
            .get_mut(section)
            .and_then(|v| v.as_table_mut())
            .ok_or_else(|| Error::Config(format!("unknown section `{section}`")))?;
        if !body.contains_key(key) {
            return Err(Error::Config(format!("unknown key `{section}.{key}`")));
        }
        body.insert(key.to_string(), value);
        Ok(())
    }

    pub fn finish(self) -> Result<Config> {
        let cfg: Config = toml::Value::Table(self.table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses an override as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// A small profile for laptop-scale runs and the test suite.
pub fn desk_profile() -> Config {
    let mut c = Config::default();
    c.model.actor_hidden = vec![64, 64];
    c.model.critic_hidden = vec![64, 64];
    c.model.state_encoder_hidden = vec![64, 64];
    c.model.state_action_encoder_hidden = vec![64, 64];
    c.model.predictor_hidden = vec![64, 64];
    c.model.latent_state_dim = 16;
    c.model.latent_action_dim = 16;
    c.model.latent_pretraining_steps = 3_000;
    c.model.refinement_steps = 2_000;
    c.model.anchor_steps = 5_000;
    c.run.steps = 10_000;
    c.run.eval_every = 2_000;
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_published_hyperparameters() {
        let m = ModelConfig::default();
        assert_eq!(m.actor_hidden, vec![256, 256]);
        assert_eq!(m.critic_hidden, vec![256, 256]);
        assert_eq!(m.learning_rate, 3e-4);
        assert_eq!(m.optimizer, "adam");
        assert_eq!(m.discount, 0.99);
        assert_eq!(m.target_update_rate, 5e-3);
        assert_eq!(m.batch_size, 256);
        assert_eq!(m.expectile, 0.7);
        assert_eq!(m.advantage_temperature, 3.0);
        assert_eq!(m.latent_state_dim, 64);
        assert_eq!(m.latent_action_dim, 64);
        assert_eq!(m.state_encoder_hidden, vec![256, 256]);
        assert_eq!(m.state_action_encoder_hidden, vec![256, 256]);
        assert_eq!(m.latent_pretraining_steps, 200_000);
        assert_eq!(m.tbm_temperature, 0.3);
        let d = DataConfig::default();
        assert_eq!((d.source_size, d.target_size), (50_000, 5_000));
    }

    #[test]
    fn precedence_is_defaults_file_env_flags() {
        let cfg = Resolver::new()
            .file_text("[model]\nbatch_size = 64\ndiscount = 0.9\n[run]\nsteps = 7\n")
            .unwrap()
            .env_vars([
                ("TABB_MODEL_DISCOUNT".to_string(), "0.95".to_string()),
                ("TABB_RUN_STEPS".to_string(), "8".to_string()),
                ("UNRELATED".to_string(), "x".to_string()),
            ])
            .unwrap()
            .sets(["run.steps=9"])
            .unwrap()
            .finish()
            .unwrap();
        assert_eq!(cfg.model.batch_size, 64);
        assert_eq!(cfg.model.discount, 0.95);
        assert_eq!(cfg.run.steps, 9);
        assert_eq!(cfg.model.expectile, 0.7);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(Config::from_toml("[model]\nbogus = 1\n").unwrap_err().is_config());
        assert!(Config::from_toml("[nope]\nx = 1\n").unwrap_err().is_config());
        assert!(Resolver::new().sets(["run.nope=1"]).is_err());
        assert!(Resolver::new()
            .env_vars([("TABB_MODEL_NOPE".to_string(), "1".to_string())])
            .is_err());
    }

    #[test]
    fn string_enums_parse_from_overrides() {
        let cfg = Resolver::new()
            .sets(["run.variant=no_tbm", "env.family=point_mass", "env.shift_level=2.0"])
            .unwrap()
            .finish()
            .unwrap();
        assert_eq!(cfg.run.variant, Variant::NoTbm);
        assert_eq!(cfg.env.family, Family::PointMass);
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = desk_profile();
        assert_eq!(Config::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn schema_keys_are_frozen() {
        let v: toml::Table = toml::from_str(&Config::default().to_toml()).unwrap();
        let keys = |sec: &str| {
            let mut k: Vec<String> = v[sec].as_table().unwrap().keys().cloned().collect();
            k.sort();
            k.join(",")
        };
        assert_eq!(keys("env"), "family,grid_size,horizon,reward_scale,shift_kind,shift_level");
        assert_eq!(keys("data"), "dir,seed,source_size,source_tier,target_size,target_tier");
        assert_eq!(
            keys("model"),
            "actor_hidden,adv_clip,advantage_temperature,anchor_steps,batch_size,critic_hidden,\
             critic_value_source,discount,expectile,huber_delta,latent_action_dim,\
             latent_pretraining_steps,latent_state_dim,learning_rate,optimizer,predictor_hidden,\
             refinement_steps,state_action_encoder_hidden,state_encoder_hidden,stop_grad_next_latent,\
             target_update_rate,tbm_temperature,weight_rescale,wtar_clamp,wtar_mode,wtar_refresh_every"
        );
        assert_eq!(
            keys("run"),
            "diagnose_groups,diagnose_transitions,eval_episodes,eval_every,eval_mode,out_dir,\
             replay_mode,seeds,steps,variant,variants,workers"
        );
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(Config::from_toml("[model]\nexpectile = 1.5\n").unwrap_err().is_config());
        assert!(Config::from_toml("[env]\nshift_level = 3.0\n").unwrap_err().is_config());
        assert!(Config::from_toml("[model]\nbatch_size = \"x\"\n").unwrap_err().is_config());
    }
}
