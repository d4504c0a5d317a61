//! The learned schedulers.
//!
//! The decomposed scheduler scores a placement by summing one shared value
//! head over every PM's post-placement state; since a placement touches a
//! single PM, candidate scores differ from a common base sum in one term
//! only, which keeps action evaluation O(candidates) instead of
//! O(candidates x PMs) and makes the policy independent of fleet size.
//! Training is Double DQN over a replay buffer filled by several episodes
//! per epoch, with a Polyak-averaged target net.
//!
//! A monolithic variant (one net over the whole cluster state with one
//! output per action) is kept as the comparison baseline.

use std::collections::VecDeque;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{
    apply_request, Action, ClusterState, NumaMode, NumaResources, StateSnapshot, VmRequest,
    NUMA_NODES,
};
use crate::heuristics::{self, CandidateSet, FilterSpec, SchedError, SurrogateWeights};
use crate::net::{
    adam_step, grad_indexed_regression, grad_sum_regression, AdamState, Mlp, NetError, Tape,
};
use crate::sim::{Episode, Policy, RewardKind, SimError};
use crate::trace::{generate_trace, Catalog, ScenarioConfig, ScenarioMode};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Width of the per-PM input in look-ahead mode: remaining cpu/mem per NUMA
/// node, capacity-normalized.
pub const PM_FEATURES: usize = 4;
/// Width without look-ahead: pre-placement PM state, the request demand, and
/// a one-of-three slot encoding (node 0 / node 1 / both).
pub const NO_LOOKAHEAD_FEATURES: usize = PM_FEATURES + 5;

/// What the per-PM value head consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueInput {
    /// The PM state after hypothetically applying the action (default).
    #[default]
    LookAhead,
    /// The raw PM state plus request and action encoding; ablation variant.
    NoLookAhead,
}

impl ValueInput {
    pub fn width(self) -> usize {
        match self {
            ValueInput::LookAhead => PM_FEATURES,
            ValueInput::NoLookAhead => NO_LOOKAHEAD_FEATURES,
        }
    }
}

/// Which learned scheduler a trainer or checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Decomposed per-PM value with candidate filtering.
    CvdRl,
    /// Monolithic net over the full cluster state.
    FlatDqn,
}

/// Training hyperparameters. Defaults follow the reference setup; desk-scale
/// runs override epochs, widths, and batch sizes downward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub gamma: f64,
    pub epsilon: f64,
    pub batch: usize,
    pub lr: f64,
    pub tau: f64,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub k: usize,
    pub seed: u64,
    pub hidden_width: usize,
    pub buffer_capacity: usize,
    /// Run one optimizer step every this many environment steps.
    pub update_every: usize,
    pub grad_clip: Option<f64>,
    pub reward: RewardKind,
    pub value_input: ValueInput,
    /// Disabled only by the unfiltered ablation.
    pub use_filter: bool,
    /// Explicit (best-fit, surrogate) split; None uses the named split for k.
    pub filter_split: Option<(usize, usize)>,
    pub surrogate_weights: SurrogateWeights,
    pub include_buffer_in_checkpoint: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            gamma: 0.75,
            epsilon: 0.1,
            batch: 2048,
            lr: 5e-4,
            tau: 0.01,
            epochs: 3000,
            episodes_per_epoch: 5,
            k: 5,
            seed: 0,
            hidden_width: 128,
            buffer_capacity: 100_000,
            update_every: 1,
            grad_clip: Some(10.0),
            reward: RewardKind::UnitPerAllocation,
            value_input: ValueInput::LookAhead,
            use_filter: true,
            filter_split: None,
            surrogate_weights: SurrogateWeights::default(),
            include_buffer_in_checkpoint: true,
        }
    }
}

impl AgentConfig {
    pub fn filter_spec(&self) -> Option<FilterSpec> {
        if !self.use_filter {
            return None;
        }
        Some(match self.filter_split {
            Some((n_best_fit, n_surrogate)) => FilterSpec {
                n_best_fit,
                n_surrogate,
            },
            None => FilterSpec::for_k(self.k),
        })
    }
}

/// Scoring context shared by acting and target computation: candidate
/// selection and input encoding must match on both sides.
#[derive(Debug, Clone, Copy)]
pub struct ScoringRule {
    pub value_input: ValueInput,
    pub filter: Option<FilterSpec>,
    pub weights: SurrogateWeights,
}

impl ScoringRule {
    pub fn of(cfg: &AgentConfig) -> ScoringRule {
        ScoringRule {
            value_input: cfg.value_input,
            filter: cfg.filter_spec(),
            weights: cfg.surrogate_weights,
        }
    }

    /// Candidate actions for the pending request: the top-k filter output,
    /// or the whole feasible set when filtering is off.
    pub fn candidates(&self, state: &ClusterState) -> Result<CandidateSet, SchedError> {
        match self.filter {
            Some(spec) => heuristics::top_k_filter_with(state, spec, self.weights),
            None => heuristics::unfiltered_candidates(state),
        }
    }
}

/// Anything that can value a single PM input vector. The network implements
/// it; tests substitute closed-form scores.
pub trait PmValue {
    fn value(&mut self, input: &[f64]) -> f64;
}

/// [`PmValue`] backed by an [`Mlp`], reusing one activation tape across
/// calls.
pub struct MlpValue<'a> {
    net: &'a Mlp,
    tape: Tape,
}

impl<'a> MlpValue<'a> {
    pub fn new(net: &'a Mlp) -> Self {
        debug_assert_eq!(net.output_dim(), 1);
        MlpValue {
            net,
            tape: Tape::default(),
        }
    }
}

impl PmValue for MlpValue<'_> {
    fn value(&mut self, input: &[f64]) -> f64 {
        self.net.forward_tape(input, &mut self.tape);
        self.tape.output()[0]
    }
}

/// Closed-form per-PM value that makes the greedy decomposed policy
/// reproduce Best-Fit: squared used-CPU per node. The gain of a placement
/// grows with how full the target already is (convexity), so the tightest
/// feasible target wins, and for split placements the gain depends only on
/// the PM's total used CPU.
pub struct BestFitValue;

impl PmValue for BestFitValue {
    fn value(&mut self, input: &[f64]) -> f64 {
        debug_assert_eq!(input.len(), PM_FEATURES);
        let used0 = 1.0 - input[0];
        let used1 = 1.0 - input[2];
        used0 * used0 + used1 * used1
    }
}

/// Capacity-normalized features of one PM: `[cpu0, mem0, cpu1, mem1]`
/// remaining fractions.
pub fn pm_feature(rem: &[NumaResources; NUMA_NODES], cap: &[NumaResources; NUMA_NODES]) -> [f64; 4] {
    [
        rem[0].cpu as f64 / cap[0].cpu as f64,
        rem[0].mem as f64 / cap[0].mem as f64,
        rem[1].cpu as f64 / cap[1].cpu as f64,
        rem[1].mem as f64 / cap[1].mem as f64,
    ]
}

fn push_request_norm(input: &mut Vec<f64>, req: &VmRequest, cap: &[NumaResources; NUMA_NODES]) {
    let cpu_cap = (cap[0].cpu + cap[1].cpu) as f64;
    let mem_cap = (cap[0].mem + cap[1].mem) as f64;
    input.push(req.resources.cpu as f64 / cpu_cap);
    input.push(req.resources.mem as f64 / mem_cap);
}

/// Per-PM head input for PM `pm` under `action`; `action = None` means this
/// PM is untouched by the placement.
fn pm_input(
    out: &mut Vec<f64>,
    mode: ValueInput,
    rem: &[NumaResources; NUMA_NODES],
    cap: &[NumaResources; NUMA_NODES],
    req: &VmRequest,
    action: Option<Action>,
) {
    out.clear();
    match mode {
        ValueInput::LookAhead => {
            let shown = match action {
                Some(a) => {
                    apply_request(rem, req, a.numa()).expect("look-ahead on infeasible action")
                }
                None => *rem,
            };
            out.extend_from_slice(&pm_feature(&shown, cap));
        }
        ValueInput::NoLookAhead => {
            out.extend_from_slice(&pm_feature(rem, cap));
            push_request_norm(out, req, cap);
            let slot = match (action, req.numa_mode) {
                (None, _) => [0.0, 0.0, 0.0],
                (Some(_), NumaMode::Double) => [0.0, 0.0, 1.0],
                (Some(a), NumaMode::Single) if a.numa() == 0 => [1.0, 0.0, 0.0],
                (Some(_), NumaMode::Single) => [0.0, 1.0, 0.0],
            };
            out.extend_from_slice(&slot);
        }
    }
}

/// Scores every candidate: cluster value = sum of the per-PM head over all
/// PMs after hypothetically applying the candidate. Exploits locality: only
/// the candidate's PM deviates from the shared base sum. Output order
/// follows the candidate order.
pub fn evaluate_candidates(
    state: &ClusterState,
    candidates: &CandidateSet,
    value: &mut dyn PmValue,
    mode: ValueInput,
) -> Vec<(Action, f64)> {
    let req = state.pending().expect("evaluate_candidates needs a pending request");
    let n = state.pm_count();
    let mut input = Vec::with_capacity(mode.width());
    let mut base = Vec::with_capacity(n);
    let mut base_sum = 0.0;
    for pm in state.pms() {
        pm_input(&mut input, mode, &pm.remaining, &pm.capacity, req, None);
        let v = value.value(&input);
        base.push(v);
        base_sum += v;
    }
    candidates
        .actions()
        .iter()
        .map(|&a| {
            let pm = &state.pms()[a.pm()];
            pm_input(&mut input, mode, &pm.remaining, &pm.capacity, req, Some(a));
            let score = base_sum - base[a.pm()] + value.value(&input);
            (a, score)
        })
        .collect()
}

/// Reference implementation of [`evaluate_candidates`] that rebuilds the
/// full sum per candidate. Kept for equivalence tests.
pub fn evaluate_candidates_naive(
    state: &ClusterState,
    candidates: &CandidateSet,
    value: &mut dyn PmValue,
    mode: ValueInput,
) -> Vec<(Action, f64)> {
    let req = state.pending().expect("needs a pending request");
    let mut input = Vec::new();
    candidates
        .actions()
        .iter()
        .map(|&a| {
            let mut sum = 0.0;
            for (idx, pm) in state.pms().iter().enumerate() {
                let act = if idx == a.pm() { Some(a) } else { None };
                pm_input(&mut input, mode, &pm.remaining, &pm.capacity, req, act);
                sum += value.value(&input);
            }
            (a, sum)
        })
        .collect()
}

/// Highest-scoring candidate, ties broken by lowest action index.
pub fn argmax_score(scored: &[(Action, f64)]) -> Option<Action> {
    let mut best: Option<(Action, f64)> = None;
    for &(a, s) in scored {
        best = match best {
            None => Some((a, s)),
            Some((ba, bs)) => {
                if s > bs || (s == bs && a.index() < ba.index()) {
                    Some((a, s))
                } else {
                    Some((ba, bs))
                }
            }
        };
    }
    best.map(|(a, _)| a)
}

/// Epsilon-greedy pick over the candidate set: with probability epsilon a
/// uniform candidate, otherwise the score argmax.
pub fn select_action(
    state: &ClusterState,
    candidates: &CandidateSet,
    value: &mut dyn PmValue,
    mode: ValueInput,
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Action, SchedError> {
    if candidates.is_empty() {
        return Err(SchedError::NoFeasibleAction);
    }
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        return Ok(candidates.actions()[rng.gen_range(0..candidates.len())]);
    }
    let scored = evaluate_candidates(state, candidates, value, mode);
    Ok(argmax_score(&scored).expect("non-empty candidate set"))
}

/// Flattened cluster features for the monolithic net: per-node remaining
/// cpu/mem fractions, then the request (cpu, mem normalized by one PM's
/// capacity, double flag). Terminal states encode a zero request.
pub fn flat_features(state: &ClusterState) -> Vec<f64> {
    let mut out = Vec::with_capacity(flat_input_width(state.pm_count()));
    for pm in state.pms() {
        let f = pm_feature(&pm.remaining, &pm.capacity);
        out.extend_from_slice(&f);
    }
    match state.pending() {
        Some(req) => {
            let cap = &state.pms()[0].capacity;
            let cpu_cap = (cap[0].cpu + cap[1].cpu) as f64;
            let mem_cap = (cap[0].mem + cap[1].mem) as f64;
            out.push(req.resources.cpu as f64 / cpu_cap);
            out.push(req.resources.mem as f64 / mem_cap);
            out.push(match req.numa_mode {
                NumaMode::Single => 0.0,
                NumaMode::Double => 1.0,
            });
        }
        None => out.extend_from_slice(&[0.0, 0.0, 0.0]),
    }
    out
}

pub fn flat_input_width(n_pms: usize) -> usize {
    n_pms * PM_FEATURES + 3
}

/// Greedy masked argmax of the monolithic head over the feasible set.
pub fn flat_greedy(state: &ClusterState, net: &Mlp) -> Result<Action, SchedError> {
    let feasible = state.feasible_action_set();
    if feasible.is_empty() {
        return Err(SchedError::NoFeasibleAction);
    }
    let q = net.forward(&flat_features(state));
    let scored: Vec<(Action, f64)> = feasible.into_iter().map(|a| (a, q[a.index()])).collect();
    Ok(argmax_score(&scored).expect("non-empty feasible set"))
}

/// One stored environment step. Snapshots keep the decision-relevant state
/// only; next_state is taken after releases and any expansion, i.e. exactly
/// what the policy faced next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: StateSnapshot,
    pub action: Action,
    pub reward: f64,
    pub next_state: StateSnapshot,
    pub done: bool,
}

/// Fixed-capacity ring buffer with uniform sampling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    data: Vec<Transition>,
    position: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        ReplayBuffer {
            capacity,
            data: Vec::new(),
            position: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends, overwriting the oldest entry once full.
    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.position] = t;
        }
        self.position = (self.position + 1) % self.capacity;
    }

    /// Uniform sample with replacement.
    pub fn sample<'a>(&'a self, batch: usize, rng: &mut ChaCha8Rng) -> Vec<&'a Transition> {
        (0..batch)
            .map(|_| &self.data[rng.gen_range(0..self.data.len())])
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.data.iter()
    }
}

/// Double-DQN regression targets for the decomposed head: the online net
/// picks the next state's best candidate, the target net values it. The
/// candidate rule must be the acting one.
pub fn compute_targets(
    batch: &[&Transition],
    online: &Mlp,
    target: &Mlp,
    gamma: f64,
    rule: &ScoringRule,
) -> Vec<f64> {
    let mut online_value = MlpValue::new(online);
    let mut target_value = MlpValue::new(target);
    batch
        .iter()
        .map(|t| {
            if t.done {
                return t.reward;
            }
            let next = t.next_state.to_state();
            let candidates = match rule.candidates(&next) {
                Ok(c) => c,
                // Non-terminal transitions always have a feasible successor;
                // be safe if a stale snapshot still disagrees.
                Err(_) => return t.reward,
            };
            let scored = evaluate_candidates(&next, &candidates, &mut online_value, rule.value_input);
            let best = argmax_score(&scored).expect("non-empty candidates");
            let chosen = CandidateSet::from_actions(vec![best]);
            let target_scored =
                evaluate_candidates(&next, &chosen, &mut target_value, rule.value_input);
            t.reward + gamma * target_scored[0].1
        })
        .collect()
}

/// Double-DQN targets for the monolithic head, feasibility-masked.
pub fn compute_targets_flat(
    batch: &[&Transition],
    online: &Mlp,
    target: &Mlp,
    gamma: f64,
) -> Vec<f64> {
    batch
        .iter()
        .map(|t| {
            if t.done {
                return t.reward;
            }
            let next = t.next_state.to_state();
            let feasible = next.feasible_action_set();
            if feasible.is_empty() {
                return t.reward;
            }
            let features = flat_features(&next);
            let q_online = online.forward(&features);
            let scored: Vec<(Action, f64)> = feasible
                .into_iter()
                .map(|a| (a, q_online[a.index()]))
                .collect();
            let best = argmax_score(&scored).expect("non-empty feasible set");
            let q_target = target.forward(&features);
            t.reward + gamma * q_target[best.index()]
        })
        .collect()
}

/// Per-PM inputs describing the post-placement intermediate state of a
/// stored transition; what the online net regresses toward the target value.
fn prediction_inputs(t: &Transition, mode: ValueInput) -> Vec<Vec<f64>> {
    let req = t
        .state
        .pending
        .as_ref()
        .expect("stored transitions start at a decision point");
    let n = t.state.pm_count();
    let mut inputs = Vec::with_capacity(n);
    for i in 0..n {
        let mut v = Vec::with_capacity(mode.width());
        let action = if i == t.action.pm() { Some(t.action) } else { None };
        pm_input(
            &mut v,
            mode,
            &t.state.remaining[i],
            &t.state.capacity[i],
            req,
            action,
        );
        inputs.push(v);
    }
    inputs
}

/// One optimizer step: sample, build Double-DQN targets, regress, clip,
/// Adam, then Polyak-update the target net. Returns the batch loss, or None
/// while the buffer is still smaller than the batch size.
pub fn train_step(
    buffer: &ReplayBuffer,
    online: &mut Mlp,
    target: &mut Mlp,
    opt: &mut AdamState,
    cfg: &AgentConfig,
    kind: PolicyKind,
    rng: &mut ChaCha8Rng,
) -> Result<Option<f64>, AgentError> {
    if buffer.len() < cfg.batch {
        return Ok(None);
    }
    let batch = buffer.sample(cfg.batch, rng);
    let rule = ScoringRule::of(cfg);
    let (loss, mut grads) = match kind {
        PolicyKind::CvdRl => {
            let targets = compute_targets(&batch, online, target, cfg.gamma, &rule);
            let samples: Vec<(Vec<Vec<f64>>, f64)> = batch
                .iter()
                .zip(targets)
                .map(|(t, y)| (prediction_inputs(t, cfg.value_input), y))
                .collect();
            grad_sum_regression(online, &samples)
        }
        PolicyKind::FlatDqn => {
            let targets = compute_targets_flat(&batch, online, target, cfg.gamma);
            let samples: Vec<(Vec<f64>, usize, f64)> = batch
                .iter()
                .zip(targets)
                .map(|(t, y)| {
                    let state = t.state.to_state();
                    (flat_features(&state), t.action.index(), y)
                })
                .collect();
            grad_indexed_regression(online, &samples)
        }
    };
    if let Some(max_norm) = cfg.grad_clip {
        grads.clip_global_norm(max_norm);
    }
    adam_step(online, &grads, opt)?;
    target.soft_update_from(online, cfg.tau)?;
    Ok(Some(loss))
}

/// Greedy (or epsilon-greedy) policy around a trained decomposed head.
pub struct CvdPolicy {
    pub net: Mlp,
    pub rule_input: ValueInput,
    pub filter: Option<FilterSpec>,
    pub weights: SurrogateWeights,
    pub epsilon: f64,
}

impl CvdPolicy {
    pub fn greedy(net: Mlp, cfg: &AgentConfig) -> CvdPolicy {
        CvdPolicy {
            net,
            rule_input: cfg.value_input,
            filter: cfg.filter_spec(),
            weights: cfg.surrogate_weights,
            epsilon: 0.0,
        }
    }
}

impl Policy for CvdPolicy {
    fn act(&mut self, state: &ClusterState, rng: &mut ChaCha8Rng) -> Result<Action, SchedError> {
        let candidates = match self.filter {
            Some(spec) => heuristics::top_k_filter_with(state, spec, self.weights)?,
            None => heuristics::unfiltered_candidates(state)?,
        };
        let mut value = MlpValue::new(&self.net);
        select_action(
            state,
            &candidates,
            &mut value,
            self.rule_input,
            self.epsilon,
            rng,
        )
    }

    fn name(&self) -> &str {
        "cvd_rl"
    }
}

/// Greedy policy around a trained monolithic head. Tied to the fleet size it
/// was trained with.
pub struct FlatPolicy {
    pub net: Mlp,
}

impl Policy for FlatPolicy {
    fn act(&mut self, state: &ClusterState, _rng: &mut ChaCha8Rng) -> Result<Action, SchedError> {
        assert_eq!(
            self.net.input_dim(),
            flat_input_width(state.pm_count()),
            "monolithic net trained for a different fleet size"
        );
        flat_greedy(state, &self.net)
    }

    fn name(&self) -> &str {
        "flat_dqn"
    }
}

/// Everything a training run needs; checkpoints embed it so a run can resume
/// from the file alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub agent: AgentConfig,
    pub scenario: ScenarioConfig,
    pub catalog: Catalog,
    /// Creates per generated episode trace.
    pub trace_length: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            agent: AgentConfig::default(),
            scenario: ScenarioConfig::default(),
            catalog: Catalog::default_catalog(),
            trace_length: 200,
        }
    }
}

/// Per-epoch training log row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_return: f64,
    pub scheduled_length: f64,
    pub loss: f64,
    pub epsilon: f64,
    pub buffer_size: usize,
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: PolicyKind,
    pub config: TrainConfig,
    pub next_epoch: usize,
    pub online: Mlp,
    pub target: Mlp,
    pub optimizer: AdamState,
    /// Whole ring buffer, write position included, so resume overwrites in
    /// the same order the uninterrupted run would have.
    pub buffer: Option<ReplayBuffer>,
}

struct EpisodeSample {
    transitions: Vec<Transition>,
    ret: f64,
    length: u64,
    candidate_count: usize,
}

/// Owns the nets, optimizer, and replay buffer of one training run and
/// advances them epoch by epoch.
pub struct Trainer {
    pub kind: PolicyKind,
    pub config: TrainConfig,
    online: Mlp,
    target: Mlp,
    opt: AdamState,
    buffer: ReplayBuffer,
    next_epoch: usize,
}

impl Trainer {
    pub fn new(kind: PolicyKind, config: TrainConfig) -> Result<Trainer, AgentError> {
        config
            .scenario
            .validate()
            .map_err(AgentError::Checkpoint)?;
        if kind == PolicyKind::FlatDqn && config.scenario.mode == ScenarioMode::Expansion {
            return Err(AgentError::Checkpoint(
                "the monolithic baseline has a fixed input width and cannot train on expanding fleets"
                    .into(),
            ));
        }
        let agent = &config.agent;
        let mut rng = crate::seed_rng(agent.seed, crate::seeds::NET_INIT, 0, 0);
        let online = match kind {
            PolicyKind::CvdRl => {
                Mlp::value_net(agent.value_input.width(), agent.hidden_width, 1, &mut rng)
            }
            PolicyKind::FlatDqn => Mlp::value_net(
                flat_input_width(config.scenario.n_pms_initial),
                agent.hidden_width,
                config.scenario.n_pms_initial * NUMA_NODES,
                &mut rng,
            ),
        };
        let target = online.clone();
        let opt = AdamState::new(&online, agent.lr);
        let buffer = ReplayBuffer::new(agent.buffer_capacity);
        Ok(Trainer {
            kind,
            config,
            online,
            target,
            opt,
            buffer,
            next_epoch: 0,
        })
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    pub fn online(&self) -> &Mlp {
        &self.online
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    /// Greedy policy snapshot of the current online net.
    pub fn policy(&self) -> Box<dyn Policy> {
        match self.kind {
            PolicyKind::CvdRl => Box::new(CvdPolicy::greedy(self.online.clone(), &self.config.agent)),
            PolicyKind::FlatDqn => Box::new(FlatPolicy {
                net: self.online.clone(),
            }),
        }
    }

    /// The trace a given (epoch, lane) episode replays; exposed so baselines
    /// can be evaluated on exactly the training traces.
    pub fn episode_trace(config: &TrainConfig, epoch: usize, lane: usize) -> crate::trace::Trace {
        let mut seed_rng = crate::seed_rng(
            config.agent.seed,
            crate::seeds::TRACE,
            epoch as u64,
            lane as u64,
        );
        generate_trace(&config.catalog, config.trace_length, seed_rng.gen())
    }

    /// Runs one epoch: several exploration episodes feed the buffer (the
    /// net is frozen while they run), then one optimizer step per
    /// `update_every` environment steps. Returns the epoch's log row.
    pub fn run_epoch(&mut self) -> Result<EpochLog, AgentError> {
        let epoch = self.next_epoch;
        let cfg = &self.config;
        let lanes = cfg.agent.episodes_per_epoch;
        let mut samples: Vec<Option<EpisodeSample>> = Vec::new();
        samples.resize_with(lanes, || None);
        let online = &self.online;
        let kind = self.kind;
        std::thread::scope(|scope| -> Result<(), AgentError> {
            let mut handles = Vec::new();
            for (lane, slot) in samples.iter_mut().enumerate() {
                handles.push(scope.spawn(move || -> Result<(), AgentError> {
                    let trace = Trainer::episode_trace(cfg, epoch, lane);
                    let mut rng = crate::seed_rng(
                        cfg.agent.seed,
                        crate::seeds::EXPLORE,
                        epoch as u64,
                        lane as u64,
                    );
                    *slot = Some(sample_episode(kind, online, cfg, &trace, &mut rng)?);
                    Ok(())
                }));
            }
            for h in handles {
                h.join().expect("sampler thread panicked")?;
            }
            Ok(())
        })?;

        let mut total_steps = 0u64;
        let mut total_return = 0.0;
        let mut total_candidates = 0usize;
        for sample in samples.iter().flatten() {
            total_steps += sample.length;
            total_return += sample.ret;
            total_candidates += sample.candidate_count;
        }
        for sample in samples.iter_mut() {
            let sample = sample.take().expect("all lanes sampled");
            for t in sample.transitions {
                self.buffer.push(t);
            }
        }
        if total_steps > 0 {
            log::debug!(
                "epoch {epoch}: mean candidate set size {:.2}",
                total_candidates as f64 / total_steps as f64
            );
        }

        let train_steps = (total_steps as usize).div_ceil(self.config.agent.update_every.max(1));
        let mut rng = crate::seed_rng(
            self.config.agent.seed,
            crate::seeds::TRAIN,
            epoch as u64,
            0,
        );
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        let agent_cfg = self.config.agent.clone();
        for _ in 0..train_steps {
            if let Some(loss) = train_step(
                &self.buffer,
                &mut self.online,
                &mut self.target,
                &mut self.opt,
                &agent_cfg,
                self.kind,
                &mut rng,
            )? {
                loss_sum += loss;
                loss_count += 1;
            }
        }

        self.next_epoch += 1;
        let lanes_f = lanes as f64;
        Ok(EpochLog {
            epoch,
            mean_return: total_return / lanes_f,
            scheduled_length: total_steps as f64 / lanes_f,
            loss: if loss_count == 0 {
                0.0
            } else {
                loss_sum / loss_count as f64
            },
            epsilon: self.config.agent.epsilon,
            buffer_size: self.buffer.len(),
        })
    }

    /// Runs all remaining epochs, invoking `on_epoch` after each.
    pub fn run(
        &mut self,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>, AgentError> {
        let mut logs = Vec::new();
        while self.next_epoch < self.config.agent.epochs {
            let log = self.run_epoch()?;
            on_epoch(&log);
            logs.push(log);
        }
        Ok(logs)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            kind: self.kind,
            config: self.config.clone(),
            next_epoch: self.next_epoch,
            online: self.online.clone(),
            target: self.target.clone(),
            optimizer: self.opt.clone(),
            buffer: if self.config.agent.include_buffer_in_checkpoint {
                Some(self.buffer.clone())
            } else {
                None
            },
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), AgentError> {
        let bytes = serde_json::to_vec(&self.checkpoint())
            .map_err(|e| AgentError::Checkpoint(e.to_string()))?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    /// Restores a trainer from a checkpoint. Without a stored buffer the run
    /// continues but replays are rebuilt from scratch, so exact trajectory
    /// continuation needs `include_buffer_in_checkpoint`.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Trainer, AgentError> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(AgentError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        ckpt.online.validate()?;
        ckpt.target.validate()?;
        if !ckpt.optimizer.matches(&ckpt.online) {
            return Err(AgentError::Checkpoint(
                "optimizer state does not match network shape".into(),
            ));
        }
        if ckpt.online.input_dim() != ckpt.target.input_dim()
            || ckpt.online.output_dim() != ckpt.target.output_dim()
        {
            return Err(AgentError::Checkpoint(
                "online and target architectures differ".into(),
            ));
        }
        let expected_input = match ckpt.kind {
            PolicyKind::CvdRl => ckpt.config.agent.value_input.width(),
            PolicyKind::FlatDqn => flat_input_width(ckpt.config.scenario.n_pms_initial),
        };
        if ckpt.online.input_dim() != expected_input {
            return Err(AgentError::Checkpoint(format!(
                "network input width {} does not match the configured encoding ({})",
                ckpt.online.input_dim(),
                expected_input
            )));
        }
        let buffer = ckpt
            .buffer
            .unwrap_or_else(|| ReplayBuffer::new(ckpt.config.agent.buffer_capacity));
        Ok(Trainer {
            kind: ckpt.kind,
            config: ckpt.config,
            online: ckpt.online,
            target: ckpt.target,
            opt: ckpt.optimizer,
            buffer,
            next_epoch: ckpt.next_epoch,
        })
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, AgentError> {
    let bytes = std::fs::read(path)?;
    let ckpt: Checkpoint =
        serde_json::from_slice(&bytes).map_err(|e| AgentError::Checkpoint(e.to_string()))?;
    Ok(ckpt)
}

/// Runs one exploration episode and records its transitions.
fn sample_episode(
    kind: PolicyKind,
    online: &Mlp,
    cfg: &TrainConfig,
    trace: &crate::trace::Trace,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeSample, AgentError> {
    let rule = ScoringRule::of(&cfg.agent);
    let mut episode = Episode::start(&cfg.scenario, trace, cfg.agent.reward)?;
    let mut transitions = Vec::new();
    let mut ret = 0.0;
    let mut candidate_count = 0usize;
    let mut value = (kind == PolicyKind::CvdRl).then(|| MlpValue::new(online));
    while !episode.done() {
        let snapshot = episode.snapshot();
        let action = match kind {
            PolicyKind::CvdRl => {
                let candidates = rule.candidates(episode.state())?;
                candidate_count += candidates.len();
                select_action(
                    episode.state(),
                    &candidates,
                    value.as_mut().expect("decomposed sampler has a value head"),
                    cfg.agent.value_input,
                    cfg.agent.epsilon,
                    rng,
                )?
            }
            PolicyKind::FlatDqn => {
                let feasible = episode.state().feasible_action_set();
                candidate_count += feasible.len();
                if rng.gen::<f64>() < cfg.agent.epsilon {
                    feasible[rng.gen_range(0..feasible.len())]
                } else {
                    flat_greedy(episode.state(), online)?
                }
            }
        };
        let (reward, done) = episode.step(action)?;
        ret += reward;
        transitions.push(Transition {
            state: snapshot,
            action,
            reward,
            next_state: episode.snapshot(),
            done,
        });
    }
    Ok(EpisodeSample {
        transitions,
        ret,
        length: episode.scheduled_length(),
        candidate_count,
    })
}

/// Queue-backed helper for tests that need a fixed action sequence.
pub struct ScriptedPolicy {
    pub actions: VecDeque<Action>,
}

impl Policy for ScriptedPolicy {
    fn act(&mut self, _state: &ClusterState, _rng: &mut ChaCha8Rng) -> Result<Action, SchedError> {
        self.actions.pop_front().ok_or(SchedError::NoFeasibleAction)
    }

    fn name(&self) -> &str {
        "scripted"
    }
}
