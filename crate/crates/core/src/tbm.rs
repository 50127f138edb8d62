//! Target Bellman Mismatch: the target-only anchor value, per-transition
//! mismatch scores and the batch softmax that turns them into weights.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use crate::config::ModelConfig;
use crate::datasets::{sample_indices, Domain, OfflineDataset, Transition};
use crate::error::{Error, Result};
use crate::numerics::loss::{expectile_grad_unchecked, expectile_unchecked, huber_grad_unchecked, huber_unchecked};
use crate::numerics::{hcat, Mlp, MlpSpec, Trainable};
use crate::representation::{EncoderStack, LatentTable};

/// Latent-state value function fitted on target data only.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorValue {
    pub net: Mlp,
    pub gamma: f64,
}

impl AnchorValue {
    pub fn new(net: Mlp, gamma: f64) -> Result<Self> {
        if net.output_dim() != 1 {
            return Err(Error::dim("anchor output", 1, net.output_dim()));
        }
        Ok(AnchorValue { net, gamma })
    }

    pub fn value(&self, z: &[f64]) -> Result<f64> {
        Ok(self.net.forward(z)?[0])
    }

    pub fn values(&self, z: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        Ok(self.net.forward_batch(z)?.into_raw_vec_and_offset().0)
    }
}

#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AnchorTrace {
    pub q_loss: Vec<f64>,
    pub v_loss: Vec<f64>,
}

/// Expectile TD on target data: a helper critic `q(z_s || z_sa)` regresses to
/// `r + gamma (1 - terminal) V(z')` with a soft-updated copy, and `V(z_s)` is
/// fitted to that copy by the `cfg.expectile` expectile.
pub fn train_anchor<R: Rng + ?Sized>(
    stack: &EncoderStack,
    target: &OfflineDataset,
    steps: usize,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<(AnchorValue, AnchorTrace)> {
    if target.domain() != Domain::Target {
        return Err(Error::InvalidArgument("anchor value trains on target transitions only".into()));
    }
    if !stack.encoders_frozen() {
        return Err(Error::InvalidArgument("anchor training needs frozen encoders".into()));
    }
    let table = stack.encode_dataset(target)?;
    let ls = stack.latent_state_dim();
    let la = stack.latent_action_dim();
    let mut v = Trainable::new("anchor", Mlp::glorot(MlpSpec::new(ls, cfg.critic_hidden.clone(), 1), rng)?, cfg.learning_rate);
    let mut q = Trainable::new(
        "anchor_q",
        Mlp::glorot(MlpSpec::new(ls + la, cfg.critic_hidden.clone(), 1), rng)?,
        cfg.learning_rate,
    );
    let mut q_target = q.net.clone();
    let batch = cfg.batch_size.min(target.len());
    let b = batch as f64;
    let mut trace = AnchorTrace::default();
    for _ in 0..steps {
        let idx = sample_indices(target.len(), batch, rng)?;
        let joint = table.joint_rows(&idx);
        let z_s = table.z_s.select(Axis(0), &idx);
        let v_next = v.net.forward_batch(table.z_next.select(Axis(0), &idx).view())?;

        let tape = q.net.forward_tape(joint.view())?;
        let mut dq = Array2::zeros((batch, 1));
        let mut lq = 0.0;
        for (k, &i) in idx.iter().enumerate() {
            let cont = if target.terminals[i] { 0.0 } else { 1.0 };
            let y = target.rewards[i] + cfg.discount * cont * v_next[[k, 0]];
            let u = tape.output()[[k, 0]] - y;
            lq += huber_unchecked(u, cfg.huber_delta);
            dq[[k, 0]] = huber_grad_unchecked(u, cfg.huber_delta) / b;
        }
        let g = q.net.backward(&tape, dq.view(), false)?;
        q.apply(&g.params)?;
        q_target.params.soft_update(&q.net.params, cfg.target_update_rate);

        let qt = q_target.forward_batch(joint.view())?;
        let tape = v.net.forward_tape(z_s.view())?;
        let mut dv = Array2::zeros((batch, 1));
        let mut lv = 0.0;
        for k in 0..batch {
            let u = qt[[k, 0]] - tape.output()[[k, 0]];
            lv += expectile_unchecked(u, cfg.expectile);
            dv[[k, 0]] = -expectile_grad_unchecked(u, cfg.expectile) / b;
        }
        let g = v.net.backward(&tape, dv.view(), false)?;
        v.apply(&g.params)?;
        trace.q_loss.push(lq / b);
        trace.v_loss.push(lv / b);
    }
    Ok((AnchorValue::new(v.net, cfg.discount)?, trace))
}

/// A transition's mismatch score with its two Bellman targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TbmScore {
    pub value: f64,
    pub y_real: f64,
    pub y_tar: f64,
}

impl TbmScore {
    fn new(y_real: f64, y_tar: f64) -> Self {
        TbmScore { value: (y_real - y_tar).abs(), y_real, y_tar }
    }
}

/// `|(r + gamma (1 - terminal) V(phi(s'))) - (r_hat + gamma V(z_hat'))|` with
/// `(r_hat, z_hat') = f_ref(phi(s), psi(s, a))`; the same anchor scores both.
pub fn tbm_score(stack: &EncoderStack, anchor: &AnchorValue, t: &Transition<'_>) -> Result<TbmScore> {
    let z = stack.encode(t.state, t.action, t.next_state)?;
    let (r_hat, z_hat) = stack.predict_target(&z.z_s, &z.z_sa)?;
    let cont = if t.terminal { 0.0 } else { 1.0 };
    let y_real = t.reward + anchor.gamma * cont * anchor.value(&z.z_s_next)?;
    let y_tar = r_hat + anchor.gamma * anchor.value(&z_hat)?;
    Ok(TbmScore::new(y_real, y_tar))
}

/// Scores for every row of a dataset whose latents are in `table`.
pub fn score_table(
    stack: &EncoderStack,
    anchor: &AnchorValue,
    table: &LatentTable,
    rewards: &[f64],
    terminals: &[bool],
) -> Result<Vec<TbmScore>> {
    if rewards.len() != table.len() || terminals.len() != table.len() {
        return Err(Error::dim("reward/terminal columns", table.len(), rewards.len()));
    }
    let n = table.len();
    let mut out = Vec::with_capacity(n);
    const CHUNK: usize = 4096;
    for lo in (0..n).step_by(CHUNK) {
        let hi = (lo + CHUNK).min(n);
        let rows = ndarray::s![lo..hi, ..];
        let pred = stack.predict_batch(hcat(table.z_s.slice(rows), table.z_sa.slice(rows)).view())?;
        let v_hat = anchor.values(pred.slice(ndarray::s![.., 1..]))?;
        let v_next = anchor.values(table.z_next.slice(rows))?;
        for k in 0..hi - lo {
            let i = lo + k;
            let cont = if terminals[i] { 0.0 } else { 1.0 };
            let y_real = rewards[i] + anchor.gamma * cont * v_next[k];
            let y_tar = pred[[k, 0]] + anchor.gamma * v_hat[k];
            out.push(TbmScore::new(y_real, y_tar));
        }
    }
    Ok(out)
}

pub fn score_dataset(stack: &EncoderStack, anchor: &AnchorValue, ds: &OfflineDataset) -> Result<Vec<TbmScore>> {
    let table = stack.encode_dataset(ds)?;
    score_table(stack, anchor, &table, &ds.rewards, &ds.terminals)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    pub temperature: f64,
}

impl WeightVector {
    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        entropy(&self.weights)
    }
}

pub fn entropy(w: &[f64]) -> f64 {
    -w.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Softmax of `-tbm / temperature` over the batch, shifted by the minimum
/// score before exponentiation.
pub fn weights(scores: &[f64], temperature: f64) -> Result<WeightVector> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("weights of an empty batch".into()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {temperature}")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN mismatch score".into()));
    }
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = scores.iter().map(|s| (-(s - min) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(WeightVector {
        weights: e.iter().map(|v| v / z).collect(),
        temperature,
    })
}

/// Writes `index,tbm,y_real,y_tar,weight` rows.
pub fn write_scores_csv(path: &Path, indices: &[usize], scores: &[TbmScore], w: &[f64]) -> Result<()> {
    if indices.len() != scores.len() || w.len() != scores.len() {
        return Err(Error::dim("csv columns", scores.len(), indices.len().min(w.len())));
    }
    let mut out = String::from("index,tbm,y_real,y_tar,weight\n");
    for ((i, s), w) in indices.iter().zip(scores).zip(w) {
        out.push_str(&format!("{i},{},{},{},{}\n", s.value, s.y_real, s.y_tar, w));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use crate::config::desk_profile;
    use crate::datasets::{generate, Tier};
    use crate::envs::{grid, Env, GridLayout, GridSlip};
    use rand::SeedableRng;

    #[test]
    fn softmax_hand_case_and_symmetry() {
        let w = weights(&[0.0, 3f64.ln()], 1.0).unwrap();
        assert!((w.weights[0] - 0.75).abs() < 1e-12 && (w.weights[1] - 0.25).abs() < 1e-12);
        let u = weights(&[0.4; 7], 0.3).unwrap();
        assert!(u.weights.iter().all(|&x| x == 1.0 / 7.0));
        assert!(weights(&[], 1.0).is_err());
        assert!(weights(&[1.0], 0.0).is_err());
        let big = weights(&[1e6, 1e6 + 1.0], 1e-3).unwrap();
        assert!(big.weights.iter().all(|w| w.is_finite()));
    }

    fn anchor_with_bias(dim: usize, c: f64) -> AnchorValue {
        let spec = MlpSpec::new(dim, vec![4], 1);
        let mut rng = crate::rng::Rng::seed_from_u64(1);
        let mut net = Mlp::glorot(spec, &mut rng).unwrap();
        let n = net.params.len();
        net.params.values[n - 1] += c;
        AnchorValue::new(net, 0.99).unwrap()
    }

    #[test]
    fn perfect_predictor_scores_zero_and_reward_offset_shows() {
        let mut stack = tabular_stack(3, 2);
        let anchor = anchor_with_bias(3, 0.0);
        let psi = stack.encode(&[1.0, 0.0, 0.0], &[0.0, 1.0], &[1.0, 0.0, 0.0]).unwrap().z_sa;
        assert_eq!(psi, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let s = [1.0, 0.0, 0.0];
        let ns = [0.0, 1.0, 0.0];
        let a = [0.0, 1.0];
        // f_ref outputs (r, phi(s')) exactly through its bias
        let n = stack.f_ref.net.params.len();
        let bias = &mut stack.f_ref.net.params.values[n - 4..];
        bias.copy_from_slice(&[0.2, 0.0, 1.0, 0.0]);
        let t = Transition { state: &s, action: &a, reward: 0.2, next_state: &ns, terminal: false, domain: Domain::Source };
        let score = tbm_score(&stack, &anchor, &t).unwrap();
        assert!(score.value.abs() < 1e-15, "{score:?}");
        stack.f_ref.net.params.values[n - 4] = 0.7;
        let score = tbm_score(&stack, &anchor, &t).unwrap();
        assert!((score.value - 0.5).abs() < 1e-12);
    }

    #[test]
    fn score_is_invariant_to_value_offset() {
        let mut rng = crate::rng::Rng::seed_from_u64(2);
        let cfg = desk_profile().model;
        let stack = EncoderStack::new(3, 2, &cfg, &mut rng).unwrap();
        let t = Transition {
            state: &[0.1, 0.2, -0.3],
            action: &[0.5, -0.5],
            reward: -0.4,
            next_state: &[0.0, 0.3, -0.1],
            terminal: false,
            domain: Domain::Source,
        };
        let a = tbm_score(&stack, &anchor_with_bias(16, 0.0), &t).unwrap();
        let b = tbm_score(&stack, &anchor_with_bias(16, 5.0), &t).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
        assert!((b.y_real - a.y_real - 0.99 * 5.0).abs() < 1e-12);
    }

    fn grid_target(layout: GridLayout, slip: f64, n: usize) -> (Env, OfflineDataset) {
        let env = Env::grid(layout, slip, 50).unwrap();
        let ds = generate(&env, Tier::Random, n, 11, Domain::Target).unwrap();
        (env, ds)
    }

    #[test]
    fn anchor_matches_behavior_values_on_a_tabular_grid() {
        let layout = GridLayout::cliff(4);
        let (env, ds) = grid_target(layout, 0.3, 20_000);
        let mut cfg = desk_profile().model;
        cfg.discount = 0.9;
        cfg.expectile = 0.5;
        cfg.learning_rate = 1e-3;
        cfg.target_update_rate = 0.05;
        cfg.batch_size = 128;
        cfg.critic_hidden = vec![32];
        let stack = tabular_stack(16, 4);
        let mut rng = crate::rng::Rng::seed_from_u64(3);
        let (anchor, _) = train_anchor(&stack, &ds, 8000, &cfg, &mut rng).unwrap();
        let g: &GridSlip = env.as_grid().unwrap();
        let uniform = vec![[0.25; grid::NUM_ACTIONS]; 16];
        let v_pi = grid::policy_values(g, &uniform, 0.9);
        for cell in 0..16 {
            let mut onehot = vec![0.0; 16];
            onehot[cell] = 1.0;
            let v = anchor.value(&onehot).unwrap();
            assert!((v - v_pi[cell]).abs() < 0.1, "cell {cell}: {v} vs {}", v_pi[cell]);
        }
    }

    #[test]
    fn absorbing_zero_reward_anchor_is_zero() {
        let mut layout = GridLayout::open(1, 2);
        layout.goal_reward = 0.0;
        let (_, ds) = grid_target(layout, 0.0, 500);
        let mut cfg = desk_profile().model;
        cfg.critic_hidden = vec![8];
        cfg.batch_size = 64;
        cfg.learning_rate = 3e-3;
        let stack = tabular_stack(2, 4);
        let mut rng = crate::rng::Rng::seed_from_u64(4);
        let (anchor, _) = train_anchor(&stack, &ds, 1500, &cfg, &mut rng).unwrap();
        assert!(anchor.value(&[0.0, 1.0]).unwrap().abs() < 0.02);
        let before = anchor.clone();
        let table = stack.encode_dataset(&ds).unwrap();
        let a = score_table(&stack, &anchor, &table, &ds.rewards, &ds.terminals).unwrap();
        let b = score_table(&stack, &anchor, &table, &ds.rewards, &ds.terminals).unwrap();
        assert_eq!(a, b);
        assert_eq!(anchor, before);
    }

    #[test]
    fn anchor_rejects_source_data() {
        let (src, _) = crate::envs::make_pair(&crate::envs::EnvSpec::grid_slip(crate::envs::ShiftKind::None, 0.0)).unwrap();
        let ds = generate(&src, Tier::Random, 100, 0, Domain::Source).unwrap();
        let stack = tabular_stack(64, 4);
        let mut rng = crate::rng::Rng::seed_from_u64(0);
        assert!(train_anchor(&stack, &ds, 1, &desk_profile().model, &mut rng).is_err());
    }

    #[test]
    fn batch_scores_match_single_scores() {
        let (src, _) = crate::envs::make_pair(&crate::envs::EnvSpec::grid_slip(crate::envs::ShiftKind::None, 0.0)).unwrap();
        let ds = generate(&src, Tier::Random, 50, 0, Domain::Source).unwrap();
        let mut rng = crate::rng::Rng::seed_from_u64(5);
        let mut stack = EncoderStack::new(64, 4, &desk_profile().model, &mut rng).unwrap();
        stack.freeze_encoders();
        let anchor = anchor_with_bias(16, 0.3);
        let all = score_dataset(&stack, &anchor, &ds).unwrap();
        for i in 0..ds.len() {
            let one = tbm_score(&stack, &anchor, &ds.get(i)).unwrap();
            assert!((one.value - all[i].value).abs() < 1e-12);
        }
    }
}
