//! Episode simulation: replays a trace against a cluster under a scheduling
//! policy, handling warm start, releases between decisions, termination, and
//! cluster expansion.
//!
//! One step = one placement decision. After the placement, every release up
//! to the next create is applied, so the state a policy sees always has a
//! feasible pending create (or the episode is over). Utilization is sampled
//! once per step, after those releases.

use std::collections::HashSet;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{Action, ClusterError, ClusterState, NumaResources, ReqOp, StateSnapshot};
use crate::heuristics::{self, SchedError, SurrogateWeights};
use crate::trace::{warm_start, ScenarioConfig, ScenarioMode, Trace, TraceError, TraceEvent};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error("step on a finished episode")]
    EpisodeOver,
}

/// Reward handed to the learner per successful placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// +1 per placement; episode return equals scheduled length.
    #[default]
    UnitPerAllocation,
    /// Placed CPU as a fraction of cluster capacity, favoring large VMs.
    CpuWeighted,
}

/// Aggregated outcome of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    /// Requests placed before termination.
    pub scheduled_length: u64,
    /// Mean of the per-step utilization samples.
    pub avg_cpu_utilization: f64,
    /// Sum of duration * price_rate over placed requests.
    pub income: f64,
    /// Decision steps taken; equals scheduled_length.
    pub steps: u64,
}

/// A running episode. Create with [`Episode::start`], then alternate
/// inspecting [`Episode::state`] and calling [`Episode::step`] until
/// [`Episode::done`].
pub struct Episode {
    scenario: ScenarioConfig,
    reward: RewardKind,
    state: ClusterState,
    events: Vec<TraceEvent>,
    cursor: usize,
    skipped: HashSet<u64>,
    done: bool,
    current_time: u64,
    scheduled_length: u64,
    income: f64,
    util_sum: f64,
    util_samples: u64,
    expansion_history: Vec<(u64, usize)>,
    capacity_cache: Arc<Vec<[NumaResources; 2]>>,
}

impl Episode {
    /// Builds the cluster, applies the scenario's warm start, and advances to
    /// the first decision point. The episode may already be done if the trace
    /// holds no feasible create.
    pub fn start(
        scenario: &ScenarioConfig,
        trace: &Trace,
        reward: RewardKind,
    ) -> Result<Episode, SimError> {
        let warmed = warm_start(scenario.initial_state(), trace, scenario.warm_start_ratio)?;
        let capacity_cache = Arc::new(
            warmed
                .state
                .pms()
                .iter()
                .map(|pm| pm.capacity)
                .collect::<Vec<_>>(),
        );
        let mut ep = Episode {
            scenario: scenario.clone(),
            reward,
            state: warmed.state,
            events: warmed.remaining,
            cursor: 0,
            skipped: warmed.skipped,
            done: false,
            current_time: 0,
            scheduled_length: 0,
            income: 0.0,
            util_sum: 0.0,
            util_samples: 0,
            expansion_history: Vec::new(),
            capacity_cache,
        };
        ep.advance_to_next_decision()?;
        Ok(ep)
    }

    pub fn state(&self) -> &ClusterState {
        &self.state
    }

    pub fn done(&self) -> bool {
        self.done
    }

    pub fn scheduled_length(&self) -> u64 {
        self.scheduled_length
    }

    /// (time, fleet size) after each expansion trigger.
    pub fn expansion_history(&self) -> &[(u64, usize)] {
        &self.expansion_history
    }

    pub fn snapshot(&self) -> StateSnapshot {
        StateSnapshot::with_capacity(&self.state, Arc::clone(&self.capacity_cache))
    }

    /// Places the pending create at `action`, then rolls the trace forward to
    /// the next decision point. Returns the reward and whether the episode
    /// finished.
    pub fn step(&mut self, action: Action) -> Result<(f64, bool), SimError> {
        if self.done {
            return Err(SimError::EpisodeOver);
        }
        let req = *self.state.pending().ok_or(SimError::EpisodeOver)?;
        self.state.allocate_in_place(action)?;
        self.scheduled_length += 1;
        self.income += req.duration as f64 * req.price_rate;
        let reward = match self.reward {
            RewardKind::UnitPerAllocation => 1.0,
            RewardKind::CpuWeighted => {
                req.resources.cpu as f64 / self.state.total_capacity_cpu() as f64
            }
        };
        self.state.set_pending(None);
        self.advance_to_next_decision()?;
        self.util_sum += self.state.cpu_utilization();
        self.util_samples += 1;
        Ok((reward, self.done))
    }

    /// Applies releases until the next create becomes pending, then resolves
    /// feasibility: in NonExpansion mode an unplaceable create ends the
    /// episode; in Expansion mode the fleet grows until the create fits or
    /// the cap is reached.
    fn advance_to_next_decision(&mut self) -> Result<(), SimError> {
        loop {
            let Some(ev) = self.events.get(self.cursor) else {
                self.state.set_pending(None);
                self.done = true;
                return Ok(());
            };
            self.cursor += 1;
            match ev.request.op {
                ReqOp::Release => {
                    if !self.skipped.remove(&ev.request.vm_id) {
                        self.state.release_in_place(ev.request.vm_id)?;
                    }
                }
                ReqOp::Create => {
                    self.current_time = ev.t;
                    self.state.set_pending(Some(ev.request));
                    break;
                }
            }
        }
        while self.state.feasible_action_set().is_empty() {
            match self.scenario.mode {
                ScenarioMode::NonExpansion => {
                    self.done = true;
                    return Ok(());
                }
                ScenarioMode::Expansion => {
                    if !self.maybe_expand() {
                        self.done = true;
                        return Ok(());
                    }
                }
            }
        }
        Ok(())
    }

    /// Grows the fleet by one expansion step (clamped to the cap). Returns
    /// false when the cap is already reached.
    pub fn maybe_expand(&mut self) -> bool {
        let n = self.state.pm_count();
        if n >= self.scenario.n_pms_max {
            return false;
        }
        let added = self.scenario.expansion_step.min(self.scenario.n_pms_max - n);
        self.state.add_pms(added, self.scenario.pm_capacity);
        self.capacity_cache = Arc::new(
            self.state
                .pms()
                .iter()
                .map(|pm| pm.capacity)
                .collect::<Vec<_>>(),
        );
        self.expansion_history
            .push((self.current_time, self.state.pm_count()));
        true
    }

    pub fn result(&self) -> EpisodeResult {
        EpisodeResult {
            scheduled_length: self.scheduled_length,
            avg_cpu_utilization: if self.util_samples == 0 {
                0.0
            } else {
                self.util_sum / self.util_samples as f64
            },
            income: self.income,
            steps: self.scheduled_length,
        }
    }
}

/// A scheduling policy: maps the current state (with its pending create) to
/// a placement. `rng` feeds stochastic policies; deterministic ones ignore
/// it.
pub trait Policy {
    fn act(&mut self, state: &ClusterState, rng: &mut ChaCha8Rng) -> Result<Action, SchedError>;
    fn name(&self) -> &str;
}

pub struct FirstFitPolicy;

impl Policy for FirstFitPolicy {
    fn act(&mut self, state: &ClusterState, _rng: &mut ChaCha8Rng) -> Result<Action, SchedError> {
        heuristics::first_fit(state)
    }

    fn name(&self) -> &str {
        "first_fit"
    }
}

pub struct BestFitPolicy;

impl Policy for BestFitPolicy {
    fn act(&mut self, state: &ClusterState, _rng: &mut ChaCha8Rng) -> Result<Action, SchedError> {
        heuristics::best_fit(state)
    }

    fn name(&self) -> &str {
        "best_fit"
    }
}

pub struct SurrogatePolicy {
    pub weights: SurrogateWeights,
}

impl Default for SurrogatePolicy {
    fn default() -> Self {
        SurrogatePolicy {
            weights: SurrogateWeights::default(),
        }
    }
}

impl Policy for SurrogatePolicy {
    fn act(&mut self, state: &ClusterState, _rng: &mut ChaCha8Rng) -> Result<Action, SchedError> {
        Ok(heuristics::internal_surrogate_weighted(state, self.weights)?[0])
    }

    fn name(&self) -> &str {
        "internal"
    }
}

/// Uniform choice over the feasible set; the floor every learned policy is
/// expected to beat.
pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn act(&mut self, state: &ClusterState, rng: &mut ChaCha8Rng) -> Result<Action, SchedError> {
        let actions = state.feasible_action_set();
        if actions.is_empty() {
            return Err(SchedError::NoFeasibleAction);
        }
        Ok(actions[rng.gen_range(0..actions.len())])
    }

    fn name(&self) -> &str {
        "random"
    }
}

/// Runs one full episode (warm start included) of `policy` on `trace`.
pub fn run_episode(
    scenario: &ScenarioConfig,
    trace: &Trace,
    policy: &mut dyn Policy,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeResult, SimError> {
    let mut ep = Episode::start(scenario, trace, RewardKind::UnitPerAllocation)?;
    while !ep.done() {
        let action = policy.act(ep.state(), rng)?;
        ep.step(action)?;
    }
    Ok(ep.result())
}
