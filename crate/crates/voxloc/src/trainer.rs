//! Deep Q-learning training loop.
//!
//! One optimizer step per environment step once the replay buffer has
//! warmed up; a frozen copy of the network supplies bootstrap targets
//! and is refreshed on a fixed cadence of optimizer steps. Exploration
//! is epsilon-greedy with a linear anneal, and exploratory draws are
//! guided: they come from the set of actions the environment would
//! reward, falling back to a uniform draw only when that set is empty.

use std::fmt::Write as _;
use std::sync::Arc;

use thiserror::Error;

use crate::env::{Env, EnvConfig, EnvError, EnvState, Mode};
use crate::geometry::{Action, ACTION_COUNT};
use crate::phantom::LabeledVolume;
use crate::qnet::{AdamState, QNetError, QNetwork, QValues, TargetNetwork};
use crate::replay::{ReplayBuffer, Transition};
use crate::rng::Rng;

/// Stream indices used to split the training seed into independent
/// generator states.
const NET_STREAM: u64 = 1;
const LOOP_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Passes over the training volume list.
    pub epochs: u32,
    /// Epochs over which epsilon anneals linearly from `eps_start` to
    /// `eps_end`; it stays at `eps_end` afterwards.
    pub anneal_epochs: u32,
    pub eps_start: f64,
    pub eps_end: f64,
    pub batch_size: usize,
    /// Optimizer steps between target-network refreshes.
    pub target_sync: u64,
    /// Stored transitions required before optimization begins.
    pub warmup: usize,
    pub replay_capacity: usize,
    /// Hidden layer widths, input to output.
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            anneal_epochs: 20,
            eps_start: 1.0,
            eps_end: 0.1,
            batch_size: 48,
            target_sync: 500,
            warmup: 480,
            replay_capacity: 14_000,
            hidden: vec![256, 128, 64],
            learning_rate: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.anneal_epochs == 0 {
            return Err("anneal_epochs must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.eps_start) || !(0.0..=1.0).contains(&self.eps_end) {
            return Err("epsilon bounds must lie in [0, 1]".into());
        }
        if self.eps_end > self.eps_start {
            return Err("eps_end must not exceed eps_start".into());
        }
        if self.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        if self.replay_capacity == 0 {
            return Err("replay_capacity must be positive".into());
        }
        if self.batch_size > self.replay_capacity {
            return Err("batch_size must not exceed replay_capacity".into());
        }
        if self.warmup > self.replay_capacity {
            return Err("warmup must not exceed replay_capacity".into());
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err("hidden layer widths must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err("learning_rate must be positive and finite".into());
        }
        if self.target_sync == 0 {
            return Err("target_sync must be positive".into());
        }
        Ok(())
    }
}

/// Linear epsilon anneal: full exploration at epoch 0, `eps_end` from
/// `anneal_epochs` onwards.
pub fn epsilon(epoch: u32, cfg: &TrainConfig) -> f64 {
    let frac = epoch as f64 / cfg.anneal_epochs as f64;
    (cfg.eps_start - (cfg.eps_start - cfg.eps_end) * frac).max(cfg.eps_end)
}

/// Index of the largest q-value; ties break toward the lowest ordinal.
pub fn greedy_action(q: &[f32; ACTION_COUNT]) -> Action {
    let mut best = 0;
    for i in 1..ACTION_COUNT {
        if q[i] > q[best] {
            best = i;
        }
    }
    Action::from_ordinal(best).expect("ordinal in range")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SelectedAction {
    pub action: Action,
    /// True when the action came from the exploration branch rather
    /// than the greedy argmax.
    pub explored: bool,
}

/// Epsilon-greedy selection with guided exploration. `mask` holds the
/// actions the environment would currently reward; exploratory draws
/// are uniform over it, or over all actions when it is empty.
pub fn select_action<Q: QValues>(
    q: &Q,
    input: &[f32],
    eps: f64,
    mask: &[Action],
    rng: &mut Rng,
) -> SelectedAction {
    if rng.next_f64() < eps {
        let action = if mask.is_empty() {
            Action::from_ordinal(rng.below(ACTION_COUNT)).expect("ordinal in range")
        } else {
            mask[rng.below(mask.len())]
        };
        SelectedAction { action, explored: true }
    } else {
        SelectedAction { action: greedy_action(&q.q_values(input)), explored: false }
    }
}

/// Bootstrap target for one transition: the raw reward at terminals,
/// otherwise reward plus the discounted best successor value under the
/// frozen network. Computed in f64 so fixture comparisons are not
/// limited by f32 resolution.
pub fn bellman_target(
    tr: &Transition,
    target: &TargetNetwork<f32>,
    gamma: f64,
    scratch: &mut Vec<f32>,
) -> f64 {
    if tr.terminal {
        return tr.reward as f64;
    }
    scratch.clear();
    tr.next_input(scratch);
    let q = target.q_values(scratch);
    let best = q.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    tr.reward as f64 + gamma * best as f64
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training requires at least one volume")]
    NoVolumes,
    #[error("no episode in progress")]
    NoEpisode,
    #[error("an episode is already in progress")]
    EpisodeActive,
    #[error("loss became non-finite ({loss}); training diverged")]
    NonFiniteLoss { loss: f64 },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Net(#[from] QNetError),
    #[error(transparent)]
    Data(#[from] crate::phantom::PhantomError),
}

/// One optimizer step on a sampled batch. The loss is the mean squared
/// temporal-difference error, with gradient flowing only through each
/// transition's taken action.
pub fn train_step(
    net: &mut QNetwork<f32>,
    target: &TargetNetwork<f32>,
    batch: &[&Transition],
    gamma: f64,
    opt: &mut AdamState<f32>,
) -> Result<f64, TrainError> {
    assert!(!batch.is_empty(), "train_step requires a non-empty batch");
    let inv_b = 1.0 / batch.len() as f64;
    let mut grads = net.zero_gradients();
    let mut loss = 0.0;
    let mut input = Vec::new();
    let mut scratch = Vec::new();
    for tr in batch {
        let want = bellman_target(tr, target, gamma, &mut scratch);
        input.clear();
        tr.state_input(&mut input);
        let trace = net.forward_trace(&input)?;
        let pred = trace.output()[tr.action.ordinal()] as f64;
        let diff = pred - want;
        loss += diff * diff * inv_b;
        let mut out_grad = [0.0f32; ACTION_COUNT];
        out_grad[tr.action.ordinal()] = (2.0 * diff * inv_b) as f32;
        net.backward_from_trace(&input, &trace, &out_grad, &mut grads)?;
    }
    opt.step(net, &grads)?;
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { loss });
    }
    Ok(loss)
}

/// Counters over exploratory action draws, kept to verify that guided
/// exploration only proposes actions the environment rewards.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GuidedStats {
    /// Exploratory draws taken from a non-empty guided mask.
    pub guided: u64,
    /// Of those, how many earned a positive reward.
    pub guided_positive: u64,
    /// Exploratory draws that fell back to a uniform choice.
    pub uniform: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRow {
    pub epoch: u32,
    pub episode: u32,
    pub steps: u32,
    pub mean_reward: f64,
    pub final_iou: f64,
    pub mean_loss: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<EpisodeRow>,
    pub guided: GuidedStats,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,episode,steps,mean_reward,final_iou,loss,epsilon\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6},{:.6}",
                r.epoch, r.episode, r.steps, r.mean_reward, r.final_iou, r.mean_loss, r.epsilon
            )
            .expect("string write");
        }
        out
    }

    /// Mean final IoU over one epoch's episodes, if any were logged.
    pub fn epoch_mean_final_iou(&self, epoch: u32) -> Option<f64> {
        let ious: Vec<f64> =
            self.rows.iter().filter(|r| r.epoch == epoch).map(|r| r.final_iou).collect();
        if ious.is_empty() {
            None
        } else {
            Some(ious.iter().sum::<f64>() / ious.len() as f64)
        }
    }
}

struct ActiveEpisode {
    env: Env,
    state: EnvState,
    epoch: u32,
    episode: u32,
    reward_sum: f64,
    loss_sum: f64,
    loss_count: u32,
}

/// Outcome of a single training step inside an episode.
pub struct StepOutcome {
    pub reward: f32,
    /// Loss of the optimizer step, absent during warmup.
    pub loss: Option<f64>,
    /// True when this step refreshed the target network.
    pub synced: bool,
    /// Log row, present exactly when the episode just terminated.
    pub finished: Option<EpisodeRow>,
}

/// Stepwise training driver owning the network, its frozen copy, the
/// optimizer, the replay buffer, and the exploration generator.
pub struct Trainer {
    cfg: TrainConfig,
    env_cfg: EnvConfig,
    net: QNetwork<f32>,
    target: TargetNetwork<f32>,
    opt: AdamState<f32>,
    buffer: ReplayBuffer,
    rng: Rng,
    episode: Option<ActiveEpisode>,
    guided: GuidedStats,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, env_cfg: EnvConfig) -> Result<Self, TrainError> {
        cfg.validate().map_err(TrainError::InvalidConfig)?;
        env_cfg.validate().map_err(TrainError::InvalidConfig)?;
        let net = QNetwork::<f32>::new(env_cfg.crop_edge, &cfg.hidden, Rng::derive_stream(cfg.seed, NET_STREAM));
        let target = TargetNetwork::from_net(&net);
        let opt = AdamState::new(cfg.learning_rate, &net);
        let buffer = ReplayBuffer::new(cfg.replay_capacity);
        let rng = Rng::new(Rng::derive_stream(cfg.seed, LOOP_STREAM));
        Ok(Trainer { cfg, env_cfg, net, target, opt, buffer, rng, episode: None, guided: GuidedStats::default() })
    }

    pub fn net(&self) -> &QNetwork<f32> {
        &self.net
    }

    pub fn target(&self) -> &TargetNetwork<f32> {
        &self.target
    }

    pub fn opt_steps(&self) -> u64 {
        self.opt.steps_taken()
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn guided_stats(&self) -> GuidedStats {
        self.guided
    }

    pub fn into_net(self) -> QNetwork<f32> {
        self.net
    }

    pub fn begin_episode(
        &mut self,
        labeled: Arc<LabeledVolume>,
        organ_id: u32,
        epoch: u32,
        episode: u32,
    ) -> Result<(), TrainError> {
        if self.episode.is_some() {
            return Err(TrainError::EpisodeActive);
        }
        let env = Env::new(labeled, organ_id, Mode::Train, self.env_cfg.clone())?;
        let state = env.reset(Some(&mut self.rng));
        self.episode = Some(ActiveEpisode {
            env,
            state,
            epoch,
            episode,
            reward_sum: 0.0,
            loss_sum: 0.0,
            loss_count: 0,
        });
        Ok(())
    }

    /// Advances the active episode one step: select an action, apply
    /// it, store the transition, and (after warmup) run one optimizer
    /// step on a fresh uniform batch.
    pub fn step_episode(&mut self) -> Result<StepOutcome, TrainError> {
        let ep = self.episode.as_mut().ok_or(TrainError::NoEpisode)?;
        let eps = epsilon(ep.epoch, &self.cfg);
        let mask = ep.env.guided_action_mask(&ep.state);
        let input = ep.state.network_input();
        let chosen = select_action(&self.net, &input, eps, &mask, &mut self.rng);
        if chosen.explored {
            if mask.is_empty() {
                self.guided.uniform += 1;
            } else {
                self.guided.guided += 1;
            }
        }
        let result = ep.env.step(&ep.state, chosen.action)?;
        if chosen.explored && !mask.is_empty() && result.reward > 0.0 {
            self.guided.guided_positive += 1;
        }
        self.buffer.push(Transition::from_step(&ep.state, chosen.action, &result));
        ep.reward_sum += result.reward as f64;
        let terminal = result.terminal;
        let final_iou = result.iou_after;
        ep.state = result.state;

        let mut loss = None;
        let mut synced = false;
        if self.buffer.len() >= self.cfg.warmup {
            let idx = self.buffer.sample_indices(&mut self.rng, self.cfg.batch_size);
            let batch: Vec<&Transition> = idx.iter().map(|&i| self.buffer.get(i)).collect();
            let l = train_step(&mut self.net, &self.target, &batch, self.env_cfg.gamma, &mut self.opt)?;
            let ep = self.episode.as_mut().expect("episode still active");
            ep.loss_sum += l;
            ep.loss_count += 1;
            loss = Some(l);
            if self.opt.steps_taken() % self.cfg.target_sync == 0 {
                self.target.sync(&self.net);
                synced = true;
            }
        }

        let finished = if terminal {
            let ep = self.episode.take().expect("episode still active");
            let steps = ep.state.step;
            Some(EpisodeRow {
                epoch: ep.epoch,
                episode: ep.episode,
                steps,
                mean_reward: ep.reward_sum / steps.max(1) as f64,
                final_iou,
                mean_loss: if ep.loss_count > 0 { ep.loss_sum / ep.loss_count as f64 } else { 0.0 },
                epsilon: eps,
            })
        } else {
            None
        };
        Ok(StepOutcome { reward: result.reward, loss, synced, finished })
    }

    /// Runs one episode to termination and returns its log row.
    pub fn run_episode(
        &mut self,
        labeled: Arc<LabeledVolume>,
        organ_id: u32,
        epoch: u32,
        episode: u32,
    ) -> Result<EpisodeRow, TrainError> {
        self.begin_episode(labeled, organ_id, epoch, episode)?;
        loop {
            if let Some(row) = self.step_episode()?.finished {
                return Ok(row);
            }
        }
    }
}

pub struct TrainOutput {
    pub net: QNetwork<f32>,
    pub log: TrainLog,
}

/// Full training run: `epochs` passes over `volumes`, one episode per
/// volume per epoch, localizing `organ_id` in each.
pub fn train(
    volumes: &[Arc<LabeledVolume>],
    organ_id: u32,
    cfg: TrainConfig,
    env_cfg: EnvConfig,
) -> Result<TrainOutput, TrainError> {
    if volumes.is_empty() {
        return Err(TrainError::NoVolumes);
    }
    let mut trainer = Trainer::new(cfg.clone(), env_cfg)?;
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        for (i, vol) in volumes.iter().enumerate() {
            let row = trainer.run_episode(vol.clone(), organ_id, epoch, i as u32)?;
            log.rows.push(row);
        }
    }
    log.guided = trainer.guided_stats();
    Ok(TrainOutput { net: trainer.into_net(), log })
}

/// [`train`] over every volume listed in a manifest file.
pub fn train_from_manifest<P: AsRef<std::path::Path>>(
    manifest: P,
    organ_id: u32,
    cfg: TrainConfig,
    env_cfg: EnvConfig,
) -> Result<TrainOutput, TrainError> {
    let volumes: Vec<Arc<LabeledVolume>> = crate::phantom::load_manifest_volumes(manifest)?
        .into_iter()
        .map(Arc::new)
        .collect();
    train(&volumes, organ_id, cfg, env_cfg)
}
