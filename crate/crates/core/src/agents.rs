//! IQL-style learner with mismatch-weighted source transitions in the critic,
//! target-only expectile value fitting and advantage-weighted policy
//! extraction, plus evaluation and the metrics trace.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::config::{CriticValueSource, EvalMode, ModelConfig, Variant};
use crate::datasets::{normalized_score, sample_indices, Domain, OfflineDataset, ScoreRefs};
use crate::envs::{grid, Env};
use crate::error::{Error, Result};
use crate::numerics::loss::{expectile_grad_unchecked, expectile_unchecked, huber_grad_unchecked, huber_unchecked};
use crate::numerics::{view2, Checkpoint, Mlp, MlpSpec, Trainable};
use crate::representation::LatentTable;
use crate::rng;
use crate::tbm::{self, AnchorValue};

#[derive(Clone, Debug, PartialEq)]
pub struct AgentHyper {
    pub gamma: f64,
    pub expectile: f64,
    pub beta: f64,
    pub adv_clip: f64,
    pub huber_delta: f64,
    pub target_update_rate: f64,
    pub tbm_temperature: f64,
    pub weight_rescale: bool,
    pub critic_value_source: CriticValueSource,
}

impl AgentHyper {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        AgentHyper {
            gamma: cfg.discount,
            expectile: cfg.expectile,
            beta: cfg.advantage_temperature,
            adv_clip: cfg.adv_clip,
            huber_delta: cfg.huber_delta,
            target_update_rate: cfg.target_update_rate,
            tbm_temperature: cfg.tbm_temperature,
            weight_rescale: cfg.weight_rescale,
            critic_value_source: cfg.critic_value_source,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentBundle {
    /// `Q(z_s || z_sa)`.
    pub critic: Trainable,
    pub critic_target: Mlp,
    /// `V(z_s)`.
    pub value: Trainable,
    /// Deterministic action head over raw state features.
    pub policy: Trainable,
    pub hyper: AgentHyper,
    pub action_box: (f64, f64),
}

/// One domain's mini-batch with cached latents.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch {
    pub domain: Domain,
    pub joint: Array2<f64>,
    pub z_s: Array2<f64>,
    pub z_next: Array2<f64>,
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Vec<f64>,
    pub terminals: Vec<bool>,
}

impl LatentBatch {
    pub fn gather(ds: &OfflineDataset, table: &LatentTable, idx: &[usize]) -> Result<Self> {
        if table.len() != ds.len() {
            return Err(Error::dim("latent table rows", ds.len(), table.len()));
        }
        let states = view2(&ds.states, ds.dims().state)?.select(Axis(0), idx);
        let actions = view2(&ds.actions, ds.dims().action)?.select(Axis(0), idx);
        Ok(LatentBatch {
            domain: ds.domain(),
            joint: table.joint_rows(idx),
            z_s: table.z_s.select(Axis(0), idx),
            z_next: table.z_next.select(Axis(0), idx),
            states,
            actions,
            rewards: idx.iter().map(|&i| ds.rewards[i]).collect(),
            terminals: idx.iter().map(|&i| ds.terminals[i]).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    fn require(&self, domain: Domain, what: &str) -> Result<()> {
        if self.domain != domain {
            return Err(Error::InvalidArgument(format!("{what} accepts {domain:?} transitions only")));
        }
        Ok(())
    }
}

fn column(a: Array2<f64>) -> Vec<f64> {
    a.into_raw_vec_and_offset().0
}

impl AgentBundle {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        latent_state_dim: usize,
        latent_action_dim: usize,
        action_box: (f64, f64),
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let critic = Mlp::glorot(
            MlpSpec::new(latent_state_dim + latent_action_dim, cfg.critic_hidden.clone(), 1),
            rng,
        )?;
        let value = Mlp::glorot(MlpSpec::new(latent_state_dim, cfg.critic_hidden.clone(), 1), rng)?;
        let policy = Mlp::glorot(MlpSpec::new(state_dim, cfg.actor_hidden.clone(), action_dim), rng)?;
        Ok(AgentBundle {
            critic_target: critic.clone(),
            critic: Trainable::new("critic", critic, cfg.learning_rate),
            value: Trainable::new("value", value, cfg.learning_rate),
            policy: Trainable::new("policy", policy, cfg.learning_rate),
            hyper: AgentHyper::from_config(cfg),
            action_box,
        })
    }

    /// Bootstrap values `V(z')` for the critic target.
    fn bootstrap(&self, z_next: ArrayView2<'_, f64>, anchor: Option<&AnchorValue>) -> Result<Vec<f64>> {
        match self.hyper.critic_value_source {
            CriticValueSource::Iql => Ok(column(self.value.net.forward_batch(z_next)?)),
            CriticValueSource::Anchor => anchor
                .ok_or_else(|| Error::InvalidArgument("anchor bootstrap requested without an anchor".into()))?
                .values(z_next),
        }
    }

    /// Clipped deterministic action for raw state features.
    pub fn act(&self, features: &[f64]) -> Result<Vec<f64>> {
        let (lo, hi) = self.action_box;
        Ok(self.policy.net.forward(features)?.iter().map(|a| a.clamp(lo, hi)).collect())
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::new(meta);
        ck.push("critic", &self.critic.net);
        ck.push("critic_target", &self.critic_target);
        ck.push("value", &self.value.net);
        ck.push("policy", &self.policy.net);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, action_box: (f64, f64), cfg: &ModelConfig) -> Result<Self> {
        let lr = cfg.learning_rate;
        Ok(AgentBundle {
            critic: Trainable::new("critic", ck.get("critic")?.clone(), lr),
            critic_target: ck.get("critic_target")?.clone(),
            value: Trainable::new("value", ck.get("value")?.clone(), lr),
            policy: Trainable::new("policy", ck.get("policy")?.clone(), lr),
            hyper: AgentHyper::from_config(cfg),
            action_box,
        })
    }
}

/// Critic step on `L_tar + L_src`: `L_tar` is the mean Huber TD error over
/// the target batch, `L_src` the `weights`-weighted sum over the source batch
/// (times the batch size when `weight_rescale` is set). Both use the target
/// `y = r + gamma (1 - terminal) V(z')`. Ends with the soft target update.
pub fn critic_update(
    bundle: &mut AgentBundle,
    target: &LatentBatch,
    source: Option<(&LatentBatch, &[f64])>,
    anchor: Option<&AnchorValue>,
) -> Result<(f64, f64)> {
    target.require(Domain::Target, "critic target term")?;
    let h = bundle.hyper.clone();
    let nt = target.len();
    let (joint, z_next, rewards, terminals, ns) = match source {
        Some((src, w)) if !src.is_empty() => {
            src.require(Domain::Source, "critic source term")?;
            if w.len() != src.len() {
                return Err(Error::dim("source weights", src.len(), w.len()));
            }
            let joint = concatenate(Axis(0), &[target.joint.view(), src.joint.view()]).expect("same width");
            let z_next = concatenate(Axis(0), &[target.z_next.view(), src.z_next.view()]).expect("same width");
            let r = [target.rewards.as_slice(), &src.rewards].concat();
            let t = [target.terminals.as_slice(), &src.terminals].concat();
            (joint, z_next, r, t, src.len())
        }
        _ => (target.joint.clone(), target.z_next.clone(), target.rewards.clone(), target.terminals.clone(), 0),
    };
    let v_next = bundle.bootstrap(z_next.view(), anchor)?;
    let tape = bundle.critic.net.forward_tape(joint.view())?;
    let q = tape.output();
    let mut grad = Array2::zeros((nt + ns, 1));
    let (mut l_tar, mut l_src) = (0.0, 0.0);
    let scale = if h.weight_rescale { ns as f64 } else { 1.0 };
    for i in 0..nt + ns {
        let cont = if terminals[i] { 0.0 } else { 1.0 };
        let u = q[[i, 0]] - (rewards[i] + h.gamma * cont * v_next[i]);
        let (l, g) = (huber_unchecked(u, h.huber_delta), huber_grad_unchecked(u, h.huber_delta));
        if i < nt {
            l_tar += l / nt as f64;
            grad[[i, 0]] = g / nt as f64;
        } else {
            let w = source.expect("source rows present").1[i - nt] * scale;
            l_src += w * l;
            grad[[i, 0]] = w * g;
        }
    }
    if !(l_tar + l_src).is_finite() {
        return Err(Error::NonFinite { layer: bundle.critic.net.spec.num_layers(), stage: "critic loss" });
    }
    let g = bundle.critic.net.backward(&tape, grad.view(), false)?;
    bundle.critic.apply(&g.params)?;
    bundle.critic_target.params.soft_update(&bundle.critic.net.params, h.target_update_rate);
    Ok((l_tar, l_src))
}

/// Expectile regression of `V(z_s)` toward the target critic, target data only.
pub fn value_update(bundle: &mut AgentBundle, target: &LatentBatch) -> Result<f64> {
    target.require(Domain::Target, "value update")?;
    let tau = bundle.hyper.expectile;
    let qt = bundle.critic_target.forward_batch(target.joint.view())?;
    let tape = bundle.value.net.forward_tape(target.z_s.view())?;
    let n = target.len() as f64;
    let mut grad = Array2::zeros((target.len(), 1));
    let mut loss = 0.0;
    for i in 0..target.len() {
        let u = qt[[i, 0]] - tape.output()[[i, 0]];
        loss += expectile_unchecked(u, tau) / n;
        grad[[i, 0]] = -expectile_grad_unchecked(u, tau) / n;
    }
    let g = bundle.value.net.backward(&tape, grad.view(), false)?;
    bundle.value.apply(&g.params)?;
    Ok(loss)
}

/// `min(exp(beta (Q_target - V)), clip)` per row.
pub fn advantage_weights(bundle: &AgentBundle, batch: &LatentBatch) -> Result<Vec<f64>> {
    let qt = bundle.critic_target.forward_batch(batch.joint.view())?;
    let v = bundle.value.net.forward_batch(batch.z_s.view())?;
    let h = &bundle.hyper;
    let w: Vec<f64> = (0..batch.len())
        .map(|i| (h.beta * (qt[[i, 0]] - v[[i, 0]])).exp().min(h.adv_clip))
        .collect();
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { layer: 0, stage: "advantage weight" });
    }
    Ok(w)
}

/// Weighted squared action error and its gradient rows, accumulated into
/// `grad` starting at row `offset`.
fn regression_terms(pred: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>, w: &[f64], grad: &mut Array2<f64>, offset: usize) -> f64 {
    let mut loss = 0.0;
    for i in 0..w.len() {
        for j in 0..pred.ncols() {
            let d = pred[[i, j]] - actions[[i, j]];
            loss += w[i] * d * d;
            grad[[offset + i, j]] = 2.0 * w[i] * d;
        }
    }
    loss
}

/// Advantage-weighted regression on the target batch.
pub fn policy_update(bundle: &mut AgentBundle, target: &LatentBatch) -> Result<f64> {
    target.require(Domain::Target, "policy update")?;
    policy_step(bundle, target, None)
}

/// Policy step with an extra source term whose rows are weighted by the
/// transferability weight times the advantage weight.
pub fn policy_update_with_source(bundle: &mut AgentBundle, target: &LatentBatch, source: &LatentBatch, weights: &[f64]) -> Result<f64> {
    target.require(Domain::Target, "policy target term")?;
    source.require(Domain::Source, "policy source term")?;
    if weights.len() != source.len() {
        return Err(Error::dim("source weights", source.len(), weights.len()));
    }
    policy_step(bundle, target, Some((source, weights)))
}

fn policy_step(bundle: &mut AgentBundle, target: &LatentBatch, source: Option<(&LatentBatch, &[f64])>) -> Result<f64> {
    let nt = target.len();
    let mut w: Vec<f64> = advantage_weights(bundle, target)?.iter().map(|a| a / nt as f64).collect();
    let mut states = target.states.clone();
    let mut actions = target.actions.clone();
    if let Some((src, omega)) = source {
        let scale = if bundle.hyper.weight_rescale { src.len() as f64 } else { 1.0 };
        let adv = advantage_weights(bundle, src)?;
        w.extend(adv.iter().zip(omega).map(|(a, o)| a * o * scale));
        states = concatenate(Axis(0), &[states.view(), src.states.view()]).expect("same width");
        actions = concatenate(Axis(0), &[actions.view(), src.actions.view()]).expect("same width");
    }
    let tape = bundle.policy.net.forward_tape(states.view())?;
    let mut grad = Array2::zeros(tape.output().raw_dim());
    let loss = regression_terms(tape.output().view(), actions.view(), &w, &mut grad, 0);
    if !loss.is_finite() {
        return Err(Error::NonFinite { layer: bundle.policy.net.spec.num_layers(), stage: "policy loss" });
    }
    let g = bundle.policy.net.backward(&tape, grad.view(), false)?;
    bundle.policy.apply(&g.params)?;
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean_return: f64,
    pub normalized_score: f64,
}

/// Mean undiscounted return of the deterministic policy over `episodes`
/// rollouts in `env`. Parameters are only read.
pub fn evaluate(bundle: &AgentBundle, env: &Env, episodes: usize, seed: u64, refs: ScoreRefs) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one episode".into()));
    }
    let mut rng = rng::Rng::seed_from_u64(seed);
    let j = crate::datasets::monte_carlo(env, episodes, &mut rng, |s, _| {
        bundle.act(&env.features(s)).expect("policy matches env dims")
    })?;
    Ok(EvalResult { mean_return: j, normalized_score: normalized_score(j, refs)? })
}

/// Exact expected return of the deterministic policy on a grid.
pub fn evaluate_exact(bundle: &AgentBundle, env: &Env, refs: ScoreRefs) -> Result<EvalResult> {
    let g = env
        .as_grid()
        .ok_or_else(|| Error::UnsupportedEnv("exact evaluation needs a grid".into()))?;
    let mut policy = Vec::with_capacity(g.num_states());
    for cell in 0..g.num_states() {
        let a = bundle.act(&env.features(&crate::envs::EnvState::Grid(cell)))?;
        let mut best = 0;
        for (i, &v) in a.iter().enumerate() {
            if v > a[best] {
                best = i;
            }
        }
        policy.push(best);
    }
    let j = grid::expected_return(g, &grid::greedy_probs(&policy), env.horizon());
    Ok(EvalResult { mean_return: j, normalized_score: normalized_score(j, refs)? })
}

/// One line of the metrics trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub l_q_tar: f64,
    pub l_q_src: f64,
    pub l_v: f64,
    pub l_pi: f64,
    pub weight_entropy: f64,
    pub eval_return: f64,
    pub normalized_score: f64,
    pub seed: u64,
    pub variant: Variant,
}

/// Appends one record as a single write, so an interrupted run leaves only
/// whole lines.
pub fn append_metrics(path: &Path, rec: &MetricsRecord) -> Result<()> {
    let mut line = serde_json::to_string(rec)?;
    line.push('\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub variant: Variant,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub eval_mode: EvalMode,
    pub batch_size: usize,
}

/// Everything the training loop reads. Latents and mismatch scores are
/// computed once because the encoders, predictor and anchor are frozen.
pub struct TrainData<'a> {
    pub source: &'a OfflineDataset,
    pub target: &'a OfflineDataset,
    pub source_latents: &'a LatentTable,
    pub target_latents: &'a LatentTable,
    /// Mismatch score of every source row; required by `tabb`/`src_actor`.
    pub source_tbm: Option<&'a [f64]>,
    pub anchor: Option<&'a AnchorValue>,
    pub target_env: &'a Env,
    pub refs: ScoreRefs,
}

#[derive(Default)]
struct Running {
    n: usize,
    q_tar: f64,
    q_src: f64,
    v: f64,
    pi: f64,
    entropy: f64,
}

/// Training loop. Each step samples one target and one source batch, weights
/// the source batch (softmax of mismatch scores, or uniform for `no_tbm`),
/// then runs the critic, value and policy updates. A record is emitted every
/// `eval_every` steps and after the last step, with losses averaged since the
/// previous record.
pub fn train<R, F>(bundle: &mut AgentBundle, data: &TrainData<'_>, cfg: &TrainConfig, rng: &mut R, mut sink: F) -> Result<Vec<MetricsRecord>>
where
    R: Rng + ?Sized,
    F: FnMut(&MetricsRecord) -> Result<()>,
{
    if data.source.domain() != Domain::Source || data.target.domain() != Domain::Target {
        return Err(Error::InvalidArgument("source/target datasets carry the wrong domain tags".into()));
    }
    if data.source.dims() != data.target.dims() {
        return Err(Error::InvalidArgument("source and target datasets have different dimensions".into()));
    }
    if data.source.header.env_spec.family != data.target_env.family() {
        return Err(Error::InvalidArgument("datasets and evaluation env disagree on the family".into()));
    }
    let scores = match (cfg.variant, data.source_tbm) {
        (Variant::NoTbm, _) => None,
        (_, Some(s)) if s.len() == data.source.len() => Some(s),
        (_, Some(s)) => return Err(Error::dim("source mismatch scores", data.source.len(), s.len())),
        (v, None) => {
            return Err(Error::InvalidArgument(format!("variant {} needs mismatch scores", v.as_str())))
        }
    };
    let bt = cfg.batch_size.min(data.target.len());
    let bs = cfg.batch_size.min(data.source.len());
    let mut trace = Vec::new();
    let mut run = Running::default();
    for step in 1..=cfg.steps {
        let ti = sample_indices(data.target.len(), bt, rng)?;
        let si = sample_indices(data.source.len(), bs, rng)?;
        let tar = LatentBatch::gather(data.target, data.target_latents, &ti)?;
        let src = LatentBatch::gather(data.source, data.source_latents, &si)?;
        let omega = match scores {
            Some(s) => {
                let batch: Vec<f64> = si.iter().map(|&i| s[i]).collect();
                tbm::weights(&batch, bundle.hyper.tbm_temperature)?.weights
            }
            None => vec![1.0 / bs as f64; bs],
        };
        let (lq_t, lq_s) = critic_update(bundle, &tar, Some((&src, &omega)), data.anchor)?;
        let lv = value_update(bundle, &tar)?;
        let lpi = match cfg.variant {
            Variant::SrcActor => policy_update_with_source(bundle, &tar, &src, &omega)?,
            _ => policy_update(bundle, &tar)?,
        };
        run.n += 1;
        run.q_tar += lq_t;
        run.q_src += lq_s;
        run.v += lv;
        run.pi += lpi;
        run.entropy += tbm::entropy(&omega);
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let eval = match cfg.eval_mode {
                EvalMode::Exact => evaluate_exact(bundle, data.target_env, data.refs)?,
                EvalMode::Rollout => {
                    let seed = rng::SeedStreams::new(cfg.seed).seed("eval");
                    evaluate(bundle, data.target_env, cfg.eval_episodes, seed, data.refs)?
                }
            };
            let n = run.n as f64;
            let rec = MetricsRecord {
                step,
                l_q_tar: run.q_tar / n,
                l_q_src: run.q_src / n,
                l_v: run.v / n,
                l_pi: run.pi / n,
                weight_entropy: run.entropy / n,
                eval_return: eval.mean_return,
                normalized_score: eval.normalized_score,
                seed: cfg.seed,
                variant: cfg.variant,
            };
            sink(&rec)?;
            trace.push(rec);
            run = Running::default();
        }
    }
    Ok(trace)
}
