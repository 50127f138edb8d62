//! Shared latent space: state encoder `phi`, state-action encoder `psi` and
//! the target-domain predictor `f_ref`, trained in two stages (joint
//! pretraining on both domains, then predictor refinement on target data).

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::config::{ModelConfig, WtarMode};
use crate::datasets::{sample_indices, Domain, OfflineDataset};
use crate::error::{Error, Result};
use crate::numerics::{hcat, view2, Checkpoint, Mlp, MlpSpec, Trainable};

#[derive(Clone, Debug, PartialEq)]
pub struct LatentTriple {
    pub z_s: Vec<f64>,
    pub z_sa: Vec<f64>,
    pub z_s_next: Vec<f64>,
}

/// Latent codes for every row of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTable {
    pub z_s: Array2<f64>,
    pub z_sa: Array2<f64>,
    pub z_next: Array2<f64>,
}

impl LatentTable {
    pub fn len(&self) -> usize {
        self.z_s.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[z_s | z_sa]` rows for the given indices.
    pub fn joint_rows(&self, idx: &[usize]) -> Array2<f64> {
        hcat(self.z_s.select(Axis(0), idx).view(), self.z_sa.select(Axis(0), idx).view())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStack {
    pub phi: Trainable,
    pub psi: Trainable,
    pub f_ref: Trainable,
}

impl EncoderStack {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let ls = cfg.latent_state_dim;
        let la = cfg.latent_action_dim;
        let phi = Mlp::glorot(MlpSpec::new(state_dim, cfg.state_encoder_hidden.clone(), ls), rng)?;
        let psi = Mlp::glorot(
            MlpSpec::new(state_dim + action_dim, cfg.state_action_encoder_hidden.clone(), la),
            rng,
        )?;
        let f_ref = Mlp::glorot(MlpSpec::new(ls + la, cfg.predictor_hidden.clone(), 1 + ls), rng)?;
        Self::from_nets(phi, psi, f_ref, cfg.learning_rate)
    }

    pub fn from_nets(phi: Mlp, psi: Mlp, f_ref: Mlp, lr: f64) -> Result<Self> {
        let ls = phi.output_dim();
        let la = psi.output_dim();
        if psi.input_dim() <= phi.input_dim() {
            return Err(Error::dim("psi input (state + action)", phi.input_dim() + 1, psi.input_dim()));
        }
        if f_ref.input_dim() != ls + la {
            return Err(Error::dim("f_ref input", ls + la, f_ref.input_dim()));
        }
        if f_ref.output_dim() != 1 + ls {
            return Err(Error::dim("f_ref output", 1 + ls, f_ref.output_dim()));
        }
        Ok(EncoderStack {
            phi: Trainable::new("phi", phi, lr),
            psi: Trainable::new("psi", psi, lr),
            f_ref: Trainable::new("f_ref", f_ref, lr),
        })
    }

    pub fn state_dim(&self) -> usize {
        self.phi.net.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.psi.net.input_dim() - self.state_dim()
    }

    pub fn latent_state_dim(&self) -> usize {
        self.phi.net.output_dim()
    }

    pub fn latent_action_dim(&self) -> usize {
        self.psi.net.output_dim()
    }

    pub fn freeze_encoders(&mut self) {
        self.phi.frozen = true;
        self.psi.frozen = true;
    }

    pub fn encoders_frozen(&self) -> bool {
        self.phi.frozen && self.psi.frozen
    }

    pub fn encode(&self, s: &[f64], a: &[f64], s_next: &[f64]) -> Result<LatentTriple> {
        if s.len() != self.state_dim() || s_next.len() != self.state_dim() {
            return Err(Error::dim("state", self.state_dim(), s.len().max(s_next.len())));
        }
        if a.len() != self.action_dim() {
            return Err(Error::dim("action", self.action_dim(), a.len()));
        }
        let sa: Vec<f64> = s.iter().chain(a).copied().collect();
        Ok(LatentTriple {
            z_s: self.phi.net.forward(s)?,
            z_sa: self.psi.net.forward(&sa)?,
            z_s_next: self.phi.net.forward(s_next)?,
        })
    }

    pub fn encode_states(&self, states: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.phi.net.forward_batch(states)
    }

    pub fn encode_pairs(&self, states: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.psi.net.forward_batch(hcat(states, actions).view())
    }

    /// Latents for every row of `ds`, computed in chunks.
    pub fn encode_dataset(&self, ds: &OfflineDataset) -> Result<LatentTable> {
        self.check_dims(ds)?;
        let s = view2(&ds.states, ds.dims().state)?;
        let a = view2(&ds.actions, ds.dims().action)?;
        let ns = view2(&ds.next_states, ds.dims().state)?;
        let n = ds.len();
        let mut table = LatentTable {
            z_s: Array2::zeros((n, self.latent_state_dim())),
            z_sa: Array2::zeros((n, self.latent_action_dim())),
            z_next: Array2::zeros((n, self.latent_state_dim())),
        };
        const CHUNK: usize = 4096;
        for lo in (0..n).step_by(CHUNK) {
            let hi = (lo + CHUNK).min(n);
            let rows = s![lo..hi, ..];
            table.z_s.slice_mut(rows).assign(&self.encode_states(s.slice(rows))?);
            table.z_sa.slice_mut(rows).assign(&self.encode_pairs(s.slice(rows), a.slice(rows))?);
            table.z_next.slice_mut(rows).assign(&self.encode_states(ns.slice(rows))?);
        }
        Ok(table)
    }

    /// Splits `f_ref(z_s || z_sa)` into the reward head and the latent head.
    pub fn predict_target(&self, z_s: &[f64], z_sa: &[f64]) -> Result<(f64, Vec<f64>)> {
        if z_s.len() != self.latent_state_dim() {
            return Err(Error::dim("z_s", self.latent_state_dim(), z_s.len()));
        }
        if z_sa.len() != self.latent_action_dim() {
            return Err(Error::dim("z_sa", self.latent_action_dim(), z_sa.len()));
        }
        let input: Vec<f64> = z_s.iter().chain(z_sa).copied().collect();
        let out = self.f_ref.net.forward(&input)?;
        Ok((out[0], out[1..].to_vec()))
    }

    /// Batched predictor: column 0 is `r_hat`, the rest `z_hat'`.
    pub fn predict_batch(&self, joint: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.f_ref.net.forward_batch(joint)
    }

    fn check_dims(&self, ds: &OfflineDataset) -> Result<()> {
        let d = ds.dims();
        if d.state != self.state_dim() {
            return Err(Error::dim("dataset state dim", self.state_dim(), d.state));
        }
        if d.action != self.action_dim() {
            return Err(Error::dim("dataset action dim", self.action_dim(), d.action));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::new(meta);
        ck.push("phi", &self.phi.net);
        ck.push("psi", &self.psi.net);
        ck.push("f_ref", &self.f_ref.net);
        ck
    }

    /// Restores a stack; restored encoders are frozen.
    pub fn from_checkpoint(ck: &Checkpoint, lr: f64) -> Result<Self> {
        let mut stack = Self::from_nets(
            ck.get("phi")?.clone(),
            ck.get("psi")?.clone(),
            ck.get("f_ref")?.clone(),
            lr,
        )?;
        stack.freeze_encoders();
        Ok(stack)
    }
}

/// Diagonal latent weights built from target-domain latent variances.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceWeights {
    pub diagonal: Vec<f64>,
    /// Number of target states the variances were estimated from.
    pub samples: usize,
    pub clamp: [f64; 2],
}

impl VarianceWeights {
    pub fn uniform(dim: usize, clamp: [f64; 2]) -> Self {
        VarianceWeights { diagonal: vec![1.0; dim], samples: 0, clamp }
    }

    /// Weights from a matrix of target latents (one row per state).
    pub fn from_latents(z: ArrayView2<'_, f64>, mode: WtarMode, clamp: [f64; 2]) -> Result<Self> {
        let n = z.nrows();
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "latent variance needs at least 2 target states, got {n}"
            )));
        }
        let mean: Array1<f64> = z.mean_axis(Axis(0)).expect("non-empty");
        let mut var = vec![0.0; z.ncols()];
        for row in z.rows() {
            for (j, v) in var.iter_mut().enumerate() {
                let d = row[j] - mean[j];
                *v += d * d;
            }
        }
        for v in &mut var {
            *v /= n as f64;
        }
        let raw: Vec<f64> = match mode {
            WtarMode::Variance | WtarMode::Raw => var,
            WtarMode::InverseVariance => var.iter().map(|&v| if v > 0.0 { 1.0 / v } else { f64::INFINITY }).collect(),
        };
        let scaled: Vec<f64> = match mode {
            WtarMode::Raw => raw,
            _ => {
                let finite: Vec<f64> = raw.iter().copied().filter(|v| v.is_finite()).collect();
                let m = finite.iter().sum::<f64>() / raw.len() as f64;
                if m > 0.0 {
                    raw.iter().map(|v| v / m).collect()
                } else {
                    raw
                }
            }
        };
        let [lo, hi] = clamp;
        Ok(VarianceWeights {
            diagonal: scaled.iter().map(|v| v.clamp(lo, hi)).collect(),
            samples: n,
            clamp,
        })
    }
}

/// `W_tar` from the current `phi` over every target state.
pub fn compute_wtar(stack: &EncoderStack, target: &OfflineDataset, mode: WtarMode, clamp: [f64; 2]) -> Result<VarianceWeights> {
    if target.domain() != Domain::Target {
        return Err(Error::InvalidArgument("W_tar needs the target dataset".into()));
    }
    let z = stack.encode_states(view2(&target.states, target.dims().state)?)?;
    VarianceWeights::from_latents(z.view(), mode, clamp)
}

/// Per-step losses of a training stage.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StageTrace {
    pub loss: Vec<f64>,
    pub reward_mse: Vec<f64>,
}

/// Loss head of the representation objective. Returns the mean loss, the
/// mean squared reward error and dL/d(predictor output).
fn prediction_loss(pred: &Array2<f64>, rewards: &[f64], z_next: ArrayView2<'_, f64>, w: &[f64]) -> (f64, f64, Array2<f64>) {
    let b = rewards.len() as f64;
    let mut grad = Array2::zeros(pred.raw_dim());
    let mut loss = 0.0;
    let mut r_mse = 0.0;
    for (i, row) in pred.rows().into_iter().enumerate() {
        let dr = row[0] - rewards[i];
        r_mse += dr * dr;
        loss += dr * dr;
        grad[[i, 0]] = 2.0 * dr / b;
        for (j, wj) in w.iter().enumerate() {
            let dz = row[1 + j] - z_next[[i, j]];
            loss += wj * dz * dz;
            grad[[i, 1 + j]] = 2.0 * wj * dz / b;
        }
    }
    (loss / b, r_mse / b, grad)
}

fn diverged(step: usize, what: &str, trace: &StageTrace) -> Error {
    let tail: Vec<String> = trace.loss.iter().rev().take(5).rev().map(|v| format!("{v:.4e}")).collect();
    Error::Diverged {
        step,
        what: format!("{what}; last losses [{}]", tail.join(", ")),
    }
}

struct MixedRows<'a> {
    src: &'a OfflineDataset,
    tar: &'a OfflineDataset,
}

impl MixedRows<'_> {
    fn len(&self) -> usize {
        self.src.len() + self.tar.len()
    }

    /// Gathers rows of the union (source rows first).
    fn gather(&self, idx: &[usize]) -> (Array2<f64>, Array2<f64>, Vec<f64>, Array2<f64>) {
        let sd = self.src.dims().state;
        let ad = self.src.dims().action;
        let n = idx.len();
        let mut s = Array2::zeros((n, sd));
        let mut a = Array2::zeros((n, ad));
        let mut ns = Array2::zeros((n, sd));
        let mut r = Vec::with_capacity(n);
        for (k, &i) in idx.iter().enumerate() {
            let (ds, j) = if i < self.src.len() { (self.src, i) } else { (self.tar, i - self.src.len()) };
            s.row_mut(k).assign(&ndarray::aview1(ds.state(j)));
            a.row_mut(k).assign(&ndarray::aview1(ds.action(j)));
            ns.row_mut(k).assign(&ndarray::aview1(ds.next_state(j)));
            r.push(ds.rewards[j]);
        }
        (s, a, r, ns)
    }
}

/// Stage 1: joint training of `phi`, `psi` and `f_ref` on mini-batches drawn
/// uniformly from the union of both datasets. `W_tar` is refreshed from the
/// target states every `wtar_refresh_every` steps.
pub fn train_stage1<R: Rng + ?Sized>(
    stack: &mut EncoderStack,
    source: &OfflineDataset,
    target: &OfflineDataset,
    steps: usize,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<StageTrace> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::InvalidArgument("stage 1 needs non-empty source and target data".into()));
    }
    if source.domain() != Domain::Source || target.domain() != Domain::Target {
        return Err(Error::InvalidArgument("stage 1 datasets have the wrong domain tags".into()));
    }
    if stack.phi.frozen || stack.psi.frozen {
        return Err(Error::Frozen(if stack.phi.frozen { "phi" } else { "psi" }));
    }
    stack.check_dims(source)?;
    stack.check_dims(target)?;
    let rows = MixedRows { src: source, tar: target };
    let batch = cfg.batch_size.min(rows.len());
    let ls = stack.latent_state_dim();
    let mut trace = StageTrace::default();
    let mut w = VarianceWeights::uniform(ls, cfg.wtar_clamp);
    for step in 0..steps {
        if step % cfg.wtar_refresh_every == 0 {
            w = compute_wtar(stack, target, cfg.wtar_mode, cfg.wtar_clamp)?;
        }
        let idx = sample_indices(rows.len(), batch, rng)?;
        let (s, a, r, ns) = rows.gather(&idx);
        let phi_tape = stack.phi.net.forward_tape(s.view())?;
        let psi_tape = stack.psi.net.forward_tape(hcat(s.view(), a.view()).view())?;
        let next_tape = stack.phi.net.forward_tape(ns.view())?;
        let joint = hcat(phi_tape.output().view(), psi_tape.output().view());
        let f_tape = stack.f_ref.net.forward_tape(joint.view())?;
        let (loss, r_mse, d_out) = prediction_loss(f_tape.output(), &r, next_tape.output().view(), &w.diagonal);
        if !loss.is_finite() {
            return Err(diverged(step, "non-finite stage-1 loss", &trace));
        }
        let f_grads = stack.f_ref.net.backward(&f_tape, d_out.view(), true)?;
        let d_joint = f_grads.input.expect("input gradient requested");
        let d_zs = d_joint.slice(s![.., ..ls]);
        let d_zsa = d_joint.slice(s![.., ls..]);
        let mut phi_grad = stack.phi.net.backward(&phi_tape, d_zs, false)?.params;
        if !cfg.stop_grad_next_latent {
            // d/dz' of W (z' - z_hat')^2 is the negative of the z_hat' gradient
            let d_next = d_out.slice(s![.., 1..]).mapv(|v| -v);
            let g = stack.phi.net.backward(&next_tape, d_next.view(), false)?.params;
            for (a, b) in phi_grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        let psi_grad = stack.psi.net.backward(&psi_tape, d_zsa, false)?.params;
        stack.f_ref.apply(&f_grads.params)?;
        stack.phi.apply(&phi_grad)?;
        stack.psi.apply(&psi_grad)?;
        trace.loss.push(loss);
        trace.reward_mse.push(r_mse);
    }
    Ok(trace)
}

/// Mean representation loss of the current predictor over every row of `ds`.
pub fn prediction_error(stack: &EncoderStack, ds: &OfflineDataset, w: &VarianceWeights) -> Result<(f64, f64)> {
    let table = stack.encode_dataset(ds)?;
    let pred = stack.predict_batch(hcat(table.z_s.view(), table.z_sa.view()).view())?;
    let (loss, r_mse, _) = prediction_loss(&pred, &ds.rewards, table.z_next.view(), &w.diagonal);
    Ok((loss, r_mse))
}

/// Stage 2: encoders frozen, `f_ref` refined on target batches only. Returns
/// the trace and the `W_tar` used.
pub fn train_stage2<R: Rng + ?Sized>(
    stack: &mut EncoderStack,
    target: &OfflineDataset,
    steps: usize,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<(StageTrace, VarianceWeights)> {
    if target.domain() != Domain::Target {
        return Err(Error::InvalidArgument("stage 2 consumes target data only".into()));
    }
    stack.freeze_encoders();
    let w = compute_wtar(stack, target, cfg.wtar_mode, cfg.wtar_clamp)?;
    let table = stack.encode_dataset(target)?;
    let batch = cfg.batch_size.min(target.len());
    let mut trace = StageTrace::default();
    for step in 0..steps {
        let idx = sample_indices(target.len(), batch, rng)?;
        let joint = table.joint_rows(&idx);
        let z_next = table.z_next.select(Axis(0), &idx);
        let r: Vec<f64> = idx.iter().map(|&i| target.rewards[i]).collect();
        let tape = stack.f_ref.net.forward_tape(joint.view())?;
        let (loss, r_mse, d_out) = prediction_loss(tape.output(), &r, z_next.view(), &w.diagonal);
        if !loss.is_finite() {
            return Err(diverged(step, "non-finite stage-2 loss", &trace));
        }
        let g = stack.f_ref.net.backward(&tape, d_out.view(), false)?;
        stack.f_ref.apply(&g.params)?;
        trace.loss.push(loss);
        trace.reward_mse.push(r_mse);
    }
    Ok((trace, w))
}
