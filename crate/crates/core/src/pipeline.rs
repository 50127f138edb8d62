//! End-to-end orchestration behind the CLI: dataset generation, the
//! representation/anchor stages, agent training per variant, evaluation,
//! diagnostics and summary tables, all under one run directory.
//!
//! ```text
//! <out_dir>/manifest.json
//! <out_dir>/data/{source,target}.tbds
//! <out_dir>/seed_<s>/{stack,anchor}.ckpt, tbm_scores.csv
//! <out_dir>/seed_<s>/<variant>/{agent.ckpt, metrics.jsonl}
//! <out_dir>/seed_<s>/diagnose/...
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{self, AgentBundle, EvalResult, MetricsRecord, TrainConfig, TrainData};
use crate::config::{Config, EvalMode, Variant};
use crate::datasets::{self, DatasetHeader, Domain, OfflineDataset};
use crate::diagnostics::{self, BoundReport, DiagnosticSummary, OracleRecord, PercentileCurve};
use crate::envs::{make_pair, Env, EnvSpec};
use crate::error::{Error, Result};
use crate::numerics::{Checkpoint, Mlp};
use crate::representation::{self, EncoderStack, LatentTable, StageTrace};
use crate::rng::SeedStreams;
use crate::tbm::{self, AnchorTrace, AnchorValue, TbmScore};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct RunLayout {
    pub root: PathBuf,
    pub data: PathBuf,
}

impl RunLayout {
    pub fn new(cfg: &Config) -> Self {
        RunLayout { root: cfg.run.out_dir.clone(), data: cfg.data_dir() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn source_data(&self) -> PathBuf {
        self.data.join("source.tbds")
    }

    pub fn target_data(&self) -> PathBuf {
        self.data.join("target.tbds")
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed_{seed}"))
    }

    pub fn stack(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("stack.ckpt")
    }

    pub fn anchor(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("anchor.ckpt")
    }

    pub fn scores(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("tbm_scores.csv")
    }

    pub fn variant_dir(&self, seed: u64, v: Variant) -> PathBuf {
        self.seed_dir(seed).join(v.as_str())
    }

    pub fn agent(&self, seed: u64, v: Variant) -> PathBuf {
        self.variant_dir(seed, v).join("agent.ckpt")
    }

    pub fn metrics(&self, seed: u64, v: Variant) -> PathBuf {
        self.variant_dir(seed, v).join("metrics.jsonl")
    }

    pub fn diagnose_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("diagnose")
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).map_err(|e| Error::io(p, e))
}

/// Resolved snapshot written before training and never rewritten.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub tool_version: String,
    /// SHA-256 of the tool version and the TOML config snapshot.
    pub config_hash: String,
    pub config: Config,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub created_unix: u64,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
}

impl Manifest {
    pub fn new(cfg: &Config, variants: &[Variant]) -> Self {
        let mut h = Sha256::new();
        h.update(env!("CARGO_PKG_VERSION").as_bytes());
        h.update(cfg.to_toml().as_bytes());
        let mut artifacts = vec!["data/source.tbds".to_string(), "data/target.tbds".to_string()];
        for s in &cfg.run.seeds {
            artifacts.push(format!("seed_{s}/stack.ckpt"));
            artifacts.push(format!("seed_{s}/anchor.ckpt"));
            artifacts.push(format!("seed_{s}/tbm_scores.csv"));
            for v in variants {
                artifacts.push(format!("seed_{s}/{}/agent.ckpt", v.as_str()));
                artifacts.push(format!("seed_{s}/{}/metrics.jsonl", v.as_str()));
            }
        }
        Manifest {
            format_version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: hex::encode(h.finalize()),
            config: cfg.clone(),
            seeds: cfg.run.seeds.clone(),
            variants: variants.to_vec(),
            created_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            artifacts,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::Version { path: path.into(), found: m.format_version, expected: MANIFEST_VERSION });
        }
        m.config.validate()?;
        Ok(m)
    }

    fn write_new(&self, path: &Path, force: bool) -> Result<()> {
        if path.exists() && !force {
            return Err(Error::Exists(path.into()));
        }
        if let Some(dir) = path.parent() {
            create_dir(dir)?;
        }
        write_text(path, &serde_json::to_string_pretty(self)?)
    }
}

/// Writes the source and target datasets for `cfg` and returns their headers.
pub fn gen_data(cfg: &Config, force: bool) -> Result<(DatasetHeader, DatasetHeader)> {
    let layout = RunLayout::new(cfg);
    for p in [layout.source_data(), layout.target_data()] {
        if p.exists() && !force {
            return Err(Error::Exists(p));
        }
    }
    let (src, tar) = build_data(cfg)?;
    create_dir(&layout.data)?;
    src.save(&layout.source_data())?;
    tar.save(&layout.target_data())?;
    Ok((src.header, tar.header))
}

/// In-memory datasets for `cfg`, seeded from `data.seed`.
pub fn build_data(cfg: &Config) -> Result<(OfflineDataset, OfflineDataset)> {
    let (src_env, tar_env) = envs_for(cfg)?;
    let streams = SeedStreams::new(cfg.data.seed);
    let src = datasets::generate(&src_env, cfg.data.source_tier, cfg.data.source_size, streams.seed("data/source"), Domain::Source)?;
    let tar = datasets::generate(&tar_env, cfg.data.target_tier, cfg.data.target_size, streams.seed("data/target"), Domain::Target)?;
    Ok((src, tar))
}

pub fn envs_for(cfg: &Config) -> Result<(Env, Env)> {
    make_pair(&cfg.env.spec(cfg.data.seed))
}

fn same_env(a: &EnvSpec, b: &EnvSpec) -> bool {
    EnvSpec { seed: 0, ..a.clone() } == EnvSpec { seed: 0, ..b.clone() }
}

/// Loads both datasets and checks them against the configured env.
pub fn load_data(cfg: &Config) -> Result<(OfflineDataset, OfflineDataset)> {
    let layout = RunLayout::new(cfg);
    let src = OfflineDataset::load(&layout.source_data())?;
    let tar = OfflineDataset::load(&layout.target_data())?;
    let want = cfg.env.spec(cfg.data.seed);
    for (ds, p) in [(&src, layout.source_data()), (&tar, layout.target_data())] {
        if !same_env(&ds.header.env_spec, &want) {
            return Err(Error::Config(format!("{} was generated for a different environment", p.display())));
        }
    }
    if src.domain() != Domain::Source || tar.domain() != Domain::Target {
        return Err(Error::Format { path: layout.data.clone(), reason: "source/target files are swapped".into() });
    }
    Ok((src, tar))
}

/// Frozen encoders, refined predictor and anchor value for one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedModels {
    pub stack: EncoderStack,
    pub anchor: AnchorValue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresentationTrace {
    pub stage1: StageTrace,
    pub stage2: StageTrace,
    pub anchor: AnchorTrace,
}

/// Stage 1 on the union, stage 2 on target data, then the anchor value.
pub fn train_representation(cfg: &Config, seed: u64, src: &OfflineDataset, tar: &OfflineDataset) -> Result<(SeedModels, RepresentationTrace)> {
    let streams = SeedStreams::new(seed);
    let m = &cfg.model;
    let mut init = streams.stream("init/representation");
    let mut stack = EncoderStack::new(src.dims().state, src.dims().action, m, &mut init)?;
    let mut rng = streams.stream("train/representation");
    let stage1 = representation::train_stage1(&mut stack, src, tar, m.latent_pretraining_steps, m, &mut rng)?;
    let (stage2, _) = representation::train_stage2(&mut stack, tar, m.refinement_steps, m, &mut rng)?;
    let mut rng = streams.stream("train/anchor");
    let (anchor, anchor_trace) = tbm::train_anchor(&stack, tar, m.anchor_steps, m, &mut rng)?;
    Ok((SeedModels { stack, anchor }, RepresentationTrace { stage1, stage2, anchor: anchor_trace }))
}

fn env_meta(cfg: &Config) -> serde_json::Value {
    serde_json::to_value(cfg.env.spec(cfg.data.seed)).expect("spec serializes")
}

fn save_models(cfg: &Config, models: &SeedModels, layout: &RunLayout, seed: u64) -> Result<()> {
    let meta = serde_json::json!({ "kind": "stack", "seed": seed, "env": env_meta(cfg) });
    models.stack.to_checkpoint(meta).save(&layout.stack(seed))?;
    let mut ck = Checkpoint::new(serde_json::json!({
        "kind": "anchor", "seed": seed, "gamma": models.anchor.gamma, "env": env_meta(cfg),
    }));
    ck.push("anchor", &models.anchor.net);
    ck.save(&layout.anchor(seed))
}

fn check_env_meta(cfg: &Config, meta: &serde_json::Value, path: &Path) -> Result<()> {
    let spec: EnvSpec = serde_json::from_value(meta.get("env").cloned().unwrap_or_default())
        .map_err(|_| Error::Format { path: path.into(), reason: "checkpoint lacks an env spec".into() })?;
    if !same_env(&spec, &cfg.env.spec(cfg.data.seed)) {
        return Err(Error::Config(format!("{} was trained on a different environment than configured", path.display())));
    }
    Ok(())
}

pub fn load_models(cfg: &Config, seed: u64) -> Result<SeedModels> {
    let layout = RunLayout::new(cfg);
    let ck = Checkpoint::load(&layout.stack(seed))?;
    check_env_meta(cfg, &ck.meta, &layout.stack(seed))?;
    let stack = EncoderStack::from_checkpoint(&ck, cfg.model.learning_rate)?;
    let ck = Checkpoint::load(&layout.anchor(seed))?;
    check_env_meta(cfg, &ck.meta, &layout.anchor(seed))?;
    let gamma = ck.meta.get("gamma").and_then(|g| g.as_f64()).unwrap_or(cfg.model.discount);
    let anchor = AnchorValue::new(ck.get("anchor")?.clone(), gamma)?;
    Ok(SeedModels { stack, anchor })
}

/// Latent tables and source mismatch scores, computed once per seed.
pub struct Cached {
    pub source_latents: LatentTable,
    pub target_latents: LatentTable,
    pub source_scores: Vec<TbmScore>,
}

pub fn cache(models: &SeedModels, src: &OfflineDataset, tar: &OfflineDataset) -> Result<Cached> {
    let source_latents = models.stack.encode_dataset(src)?;
    let target_latents = models.stack.encode_dataset(tar)?;
    let source_scores = tbm::score_table(&models.stack, &models.anchor, &source_latents, &src.rewards, &src.terminals)?;
    Ok(Cached { source_latents, target_latents, source_scores })
}

/// Trains one variant for one seed; `sink` receives each metrics record.
#[allow(clippy::too_many_arguments)]
pub fn train_agent<F>(
    cfg: &Config,
    seed: u64,
    variant: Variant,
    models: &SeedModels,
    cached: &Cached,
    src: &OfflineDataset,
    tar: &OfflineDataset,
    target_env: &Env,
    sink: F,
) -> Result<(AgentBundle, Vec<MetricsRecord>)>
where
    F: FnMut(&MetricsRecord) -> Result<()>,
{
    let streams = SeedStreams::new(seed);
    let m = &cfg.model;
    let mut init = streams.stream("init/agent");
    let mut bundle = AgentBundle::new(
        src.dims().state,
        src.dims().action,
        models.stack.latent_state_dim(),
        models.stack.latent_action_dim(),
        target_env.action_box(),
        m,
        &mut init,
    )?;
    let scores: Vec<f64> = cached.source_scores.iter().map(|s| s.value).collect();
    let data = TrainData {
        source: src,
        target: tar,
        source_latents: &cached.source_latents,
        target_latents: &cached.target_latents,
        source_tbm: Some(&scores),
        anchor: Some(&models.anchor),
        target_env,
        refs: tar.header.score_refs,
    };
    let tc = TrainConfig {
        steps: cfg.run.steps,
        variant,
        seed,
        eval_every: cfg.run.eval_every,
        eval_episodes: cfg.run.eval_episodes,
        eval_mode: cfg.run.eval_mode,
        batch_size: m.batch_size,
    };
    // Every variant of a seed sees the same batch stream.
    let mut rng = streams.stream("train/agent");
    let trace = agents::train(&mut bundle, &data, &tc, &mut rng, sink)?;
    Ok((bundle, trace))
}

fn agent_meta(cfg: &Config, seed: u64, variant: Variant) -> serde_json::Value {
    serde_json::json!({ "kind": "agent", "seed": seed, "variant": variant, "env": env_meta(cfg) })
}

/// Everything for one seed: representation, cached scores, then each variant.
fn run_seed(cfg: &Config, seed: u64, variants: &[Variant], src: &OfflineDataset, tar: &OfflineDataset) -> Result<()> {
    let layout = RunLayout::new(cfg);
    create_dir(&layout.seed_dir(seed))?;
    let (_, target_env) = envs_for(cfg)?;
    let (models, _) = train_representation(cfg, seed, src, tar)?;
    save_models(cfg, &models, &layout, seed)?;
    let cached = cache(&models, src, tar)?;
    let values: Vec<f64> = cached.source_scores.iter().map(|s| s.value).collect();
    let w = tbm::weights(&values, cfg.model.tbm_temperature)?;
    let idx: Vec<usize> = (0..src.len()).collect();
    tbm::write_scores_csv(&layout.scores(seed), &idx, &cached.source_scores, &w.weights)?;
    for &v in variants {
        create_dir(&layout.variant_dir(seed, v))?;
        let path = layout.metrics(seed, v);
        if path.exists() {
            std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
        let (bundle, _) = train_agent(cfg, seed, v, &models, &cached, src, tar, &target_env, |r| agents::append_metrics(&path, r))?;
        bundle.to_checkpoint(agent_meta(cfg, seed, v)).save(&layout.agent(seed, v))?;
    }
    Ok(())
}

/// Runs `jobs` on up to `workers` threads and returns the first error.
fn parallel<T: Sync>(jobs: &[T], workers: usize, f: impl Fn(&T) -> Result<()> + Sync) -> Result<()> {
    let next = AtomicUsize::new(0);
    let errors: Mutex<Vec<(usize, Error)>> = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                if let Err(e) = f(&jobs[i]) {
                    errors.lock().expect("poisoned").push((i, e));
                }
            });
        }
    });
    let mut errs = errors.into_inner().expect("poisoned");
    errs.sort_by_key(|(i, _)| *i);
    match errs.into_iter().next() {
        Some((_, e)) => Err(e),
        None => Ok(()),
    }
}

/// Writes the manifest, then trains every configured seed for `variants`,
/// `run.workers` seeds at a time. Datasets must already exist.
pub fn train(cfg: &Config, variants: &[Variant], force: bool) -> Result<Manifest> {
    cfg.validate()?;
    if variants.is_empty() {
        return Err(Error::Config("no variants to train".into()));
    }
    let layout = RunLayout::new(cfg);
    let (src, tar) = load_data(cfg)?;
    let manifest = Manifest::new(cfg, variants);
    manifest.write_new(&layout.manifest(), force)?;
    parallel(&cfg.run.seeds, cfg.run.workers, |&seed| run_seed(cfg, seed, variants, &src, &tar))?;
    Ok(manifest)
}

/// Re-runs a manifest's snapshot into `out_dir` (or its original directory).
pub fn rerun(manifest: &Manifest, out_dir: Option<&Path>, force: bool) -> Result<Manifest> {
    let mut cfg = manifest.config.clone();
    if let Some(o) = out_dir {
        if !cfg.data.dir.is_absolute() {
            cfg.data.dir = cfg.data_dir();
        }
        cfg.run.out_dir = o.to_path_buf();
    }
    let layout = RunLayout::new(&cfg);
    if !layout.source_data().exists() || !layout.target_data().exists() {
        gen_data(&cfg, force)?;
    }
    train(&cfg, &manifest.variants, force)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub seed: u64,
    pub variant: Variant,
    pub mean_return: f64,
    pub normalized_score: f64,
}

pub fn load_agent(cfg: &Config, path: &Path, action_box: (f64, f64)) -> Result<(AgentBundle, serde_json::Value)> {
    let ck = Checkpoint::load(path)?;
    check_env_meta(cfg, &ck.meta, path)?;
    Ok((AgentBundle::from_checkpoint(&ck, action_box, &cfg.model)?, ck.meta))
}

fn eval_bundle(cfg: &Config, bundle: &AgentBundle, env: &Env, refs: datasets::ScoreRefs, seed: u64) -> Result<EvalResult> {
    match cfg.run.eval_mode {
        EvalMode::Exact => agents::evaluate_exact(bundle, env, refs),
        EvalMode::Rollout => agents::evaluate(bundle, env, cfg.run.eval_episodes, SeedStreams::new(seed).seed("eval"), refs),
    }
}

/// Evaluates one checkpoint, or every seed of `run.variant` when `checkpoint`
/// is `None`, in the target env.
pub fn eval(cfg: &Config, checkpoint: Option<&Path>) -> Result<Vec<EvalRow>> {
    let layout = RunLayout::new(cfg);
    let (_, env) = envs_for(cfg)?;
    let refs = match OfflineDataset::inspect(&layout.target_data()) {
        Ok(h) => h.score_refs,
        Err(_) => datasets::score_refs(&env)?,
    };
    let paths: Vec<PathBuf> = match checkpoint {
        Some(p) => vec![p.to_path_buf()],
        None => cfg.run.seeds.iter().map(|&s| layout.agent(s, cfg.run.variant)).collect(),
    };
    let mut rows = Vec::new();
    for p in paths {
        let (bundle, meta) = load_agent(cfg, &p, env.action_box())?;
        let seed = meta.get("seed").and_then(|s| s.as_u64()).unwrap_or(0);
        let variant = meta
            .get("variant")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .unwrap_or(cfg.run.variant);
        let r = eval_bundle(cfg, &bundle, &env, refs, seed)?;
        rows.push(EvalRow { seed, variant, mean_return: r.mean_return, normalized_score: r.normalized_score });
    }
    Ok(rows)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from("seed,variant,mean_return,normalized_score\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.6},{:.4}\n", r.seed, r.variant.as_str(), r.mean_return, r.normalized_score));
    }
    let (m, s) = mean_std(&rows.iter().map(|r| r.normalized_score).collect::<Vec<_>>());
    out.push_str(&format!("mean,,,{m:.1}±{s:.1}\n"));
    out
}

/// Final normalized score per (variant, seed) from the metrics traces under
/// `root`, summarized as `mean±std` rows.
pub fn report(root: &Path) -> Result<String> {
    let mut finals: BTreeMap<&'static str, Vec<(u64, f64)>> = BTreeMap::new();
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut seed_dirs: Vec<(u64, PathBuf)> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().to_string();
            name.strip_prefix("seed_").and_then(|s| s.parse().ok()).map(|s| (s, e.path()))
        })
        .collect();
    seed_dirs.sort();
    for (seed, dir) in seed_dirs {
        for v in Variant::ALL {
            let p = dir.join(v.as_str()).join("metrics.jsonl");
            if !p.exists() {
                continue;
            }
            if let Some(last) = agents::read_metrics(&p)?.last() {
                finals.entry(v.as_str()).or_default().push((seed, last.normalized_score));
            }
        }
    }
    if finals.is_empty() {
        return Err(Error::InvalidArgument(format!("no metrics traces under {}", root.display())));
    }
    let mut out = String::from("variant,seeds,mean,std,score\n");
    for v in Variant::ALL {
        if let Some(rows) = finals.get(v.as_str()) {
            let scores: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let (m, s) = mean_std(&scores);
            out.push_str(&format!("{},{},{m:.4},{s:.4},{m:.1}±{s:.1}\n", v.as_str(), scores.len()));
        }
    }
    Ok(out)
}

/// Diagnostic artifacts held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagnosis {
    pub records: Vec<OracleRecord>,
    pub nearest: Vec<f64>,
    pub curve_tbm: PercentileCurve,
    pub curve_nearest: PercentileCurve,
    pub summary: DiagnosticSummary,
}

/// Oracle replay of a uniform subset of source rows, the bound check over
/// that set, and percentile curves for the mismatch score and the
/// nearest-neighbour comparison criterion.
pub fn diagnose_models(cfg: &Config, seed: u64, models: &SeedModels, src: &OfflineDataset, tar: &OfflineDataset) -> Result<Diagnosis> {
    let (_, target_env) = envs_for(cfg)?;
    let streams = SeedStreams::new(seed);
    let idx = diagnostics::probe_indices(src.len(), cfg.run.diagnose_transitions, streams.seed("diagnose"));
    let run = diagnostics::oracle_bellman_error(
        &models.stack,
        &models.anchor,
        &target_env,
        src,
        &idx,
        cfg.run.replay_mode,
        streams.seed("diagnose/replay"),
    )?;
    // Terminal transitions have no bootstrap on the realized side but keep
    // one on the predicted side, so their score measures that asymmetry
    // rather than dynamics mismatch; they are reported but not ranked.
    let records: Vec<OracleRecord> = run.records.iter().filter(|r| r.bound_applies()).cloned().collect();
    let kept: Vec<usize> = records.iter().map(|r| r.index).collect();
    let nearest = diagnostics::nearest_target_distance(&models.stack, src, &kept, tar)?;
    let tbm: Vec<f64> = records.iter().map(|r| r.tbm).collect();
    let delta: Vec<f64> = records.iter().map(|r| r.oracle_delta).collect();
    let groups = cfg.run.diagnose_groups;
    let curve_tbm = diagnostics::percentile_curve(&tbm, &delta, groups)?;
    let curve_nearest = diagnostics::percentile_curve(&nearest, &delta, groups)?;
    let bound = match diagnostics::theorem1_check(&run.records, &run.records, models.anchor.gamma) {
        Ok(b) => b,
        Err(_) => BoundReport {
            epsilon: 0.0,
            lipschitz: 0.0,
            violations: 0,
            total: 0,
            excluded: run.records.len(),
            worst_margin: f64::NEG_INFINITY,
        },
    };
    let summary = DiagnosticSummary {
        transitions: run.records.len(),
        ranked: records.len(),
        skipped: run.skipped,
        groups,
        spearman_tbm: curve_tbm.spearman,
        spearman_comparison: curve_nearest.spearman,
        curve_tbm: curve_tbm.group_means.clone(),
        curve_comparison: curve_nearest.group_means.clone(),
        mean_oracle_delta: delta.iter().sum::<f64>() / delta.len().max(1) as f64,
        bound,
    };
    Ok(Diagnosis { records, nearest, curve_tbm, curve_nearest, summary })
}

/// Loads a seed's trained models, diagnoses them and writes the CSV curves,
/// the bound report, the JSON summary and a plain-text summary.
pub fn diagnose(cfg: &Config, seed: u64, force: bool) -> Result<DiagnosticSummary> {
    let layout = RunLayout::new(cfg);
    let dir = layout.diagnose_dir(seed);
    if dir.join("summary.json").exists() && !force {
        return Err(Error::Exists(dir.join("summary.json")));
    }
    let (src, tar) = load_data(cfg)?;
    let models = load_models(cfg, seed)?;
    let d = diagnose_models(cfg, seed, &models, &src, &tar)?;
    create_dir(&dir)?;
    let tbm: Vec<f64> = d.records.iter().map(|r| r.tbm).collect();
    diagnostics::write_curve_csv(&dir.join("curve_tbm.csv"), &d.records, &tbm, &d.curve_tbm)?;
    diagnostics::write_curve_csv(&dir.join("curve_nearest.csv"), &d.records, &d.nearest, &d.curve_nearest)?;
    write_text(&dir.join("bound.json"), &serde_json::to_string_pretty(&d.summary.bound)?)?;
    write_text(&dir.join("summary.json"), &serde_json::to_string_pretty(&d.summary)?)?;
    write_text(&dir.join("summary.txt"), &diagnostics::summary_text(&d.summary))?;
    Ok(d.summary)
}

/// Convenience for tests and the FFI: a greedy agent whose policy plays the
/// DP optimum of the target grid.
pub fn oracle_agent(cfg: &Config, env: &Env) -> Result<AgentBundle> {
    let g = env.as_grid().ok_or_else(|| Error::UnsupportedEnv("oracle agent needs a grid".into()))?;
    let dp = crate::envs::exact_dp(env, cfg.model.discount)?;
    let n = g.num_states();
    let spec = crate::numerics::MlpSpec::linear(n, 4);
    let mut v = vec![0.0; spec.param_count()];
    for (s, &a) in dp.policy.iter().enumerate() {
        v[a * n + s] = 1.0;
    }
    let policy = Mlp::new(spec.clone(), crate::numerics::ParamVector::from_values(&spec, v)?)?;
    let mut rng = SeedStreams::new(0).stream("init/oracle");
    let mut b = AgentBundle::new(n, 4, 1, 1, env.action_box(), &crate::config::ModelConfig {
        critic_hidden: vec![1],
        actor_hidden: vec![1],
        ..cfg.model.clone()
    }, &mut rng)?;
    b.policy.net = policy;
    Ok(b)
}
