//! Rule-based schedulers and the candidate filter that narrows the action
//! space for the learned scheduler.
//!
//! All ranking functions operate on the canonical feasible set from
//! [`ClusterState::feasible_action_set`] and break score ties by lowest
//! action index, so results are deterministic.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{apply_request, Action, ClusterState, NumaMode};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchedError {
    #[error("no feasible action for the pending request")]
    NoFeasibleAction,
}

/// Lowest feasible action index.
pub fn first_fit(state: &ClusterState) -> Result<Action, SchedError> {
    state
        .feasible_action_set()
        .into_iter()
        .next()
        .ok_or(SchedError::NoFeasibleAction)
}

fn remaining_cpu_key(state: &ClusterState, action: Action) -> u64 {
    let pm = &state.pms()[action.pm()];
    let mode = state
        .pending()
        .map(|r| r.numa_mode)
        .unwrap_or(NumaMode::Single);
    match mode {
        // Tightest NUMA node that still fits.
        NumaMode::Single => pm.remaining[action.numa()].cpu as u64,
        // Double placements are PM-level decisions.
        NumaMode::Double => pm.remaining.iter().map(|r| r.cpu as u64).sum(),
    }
}

/// Feasible action whose target (NUMA node for single requests, whole PM for
/// double ones) has the least remaining CPU.
pub fn best_fit(state: &ClusterState) -> Result<Action, SchedError> {
    state
        .feasible_action_set()
        .into_iter()
        .min_by_key(|a| (remaining_cpu_key(state, *a), a.index()))
        .ok_or(SchedError::NoFeasibleAction)
}

/// Every feasible action ordered by the Best-Fit criterion (ties by index).
pub fn best_fit_ranking(state: &ClusterState) -> Vec<Action> {
    let mut actions = state.feasible_action_set();
    actions.sort_by_key(|a| (remaining_cpu_key(state, *a), a.index()));
    actions
}

/// Weights of the production-scheduler surrogate score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateWeights {
    pub cpu: f64,
    pub mem: f64,
    pub balance: f64,
}

impl Default for SurrogateWeights {
    fn default() -> Self {
        SurrogateWeights {
            cpu: 1.0,
            mem: 0.5,
            balance: 0.25,
        }
    }
}

/// Surrogate score of one feasible action: a capacity-normalized blend of
/// post-placement CPU and memory left on the target plus the CPU imbalance
/// between the PM's two nodes. Lower is better, so the scheduler packs
/// tightly while keeping NUMA nodes even.
pub fn surrogate_score(state: &ClusterState, action: Action, w: SurrogateWeights) -> f64 {
    let req = state.pending().expect("surrogate_score needs a pending request");
    let pm = &state.pms()[action.pm()];
    let post = apply_request(&pm.remaining, req, action.numa())
        .expect("surrogate_score requires a feasible action");
    let cap = &pm.capacity;
    let (cpu_term, mem_term) = match req.numa_mode {
        NumaMode::Single => {
            let slot = action.numa();
            (
                post[slot].cpu as f64 / cap[slot].cpu as f64,
                post[slot].mem as f64 / cap[slot].mem as f64,
            )
        }
        NumaMode::Double => {
            let cpu_cap: u32 = cap.iter().map(|r| r.cpu).sum();
            let mem_cap: u32 = cap.iter().map(|r| r.mem).sum();
            let cpu_post: u32 = post.iter().map(|r| r.cpu).sum();
            let mem_post: u32 = post.iter().map(|r| r.mem).sum();
            (
                cpu_post as f64 / cpu_cap as f64,
                mem_post as f64 / mem_cap as f64,
            )
        }
    };
    let balance = (post[0].cpu as f64 - post[1].cpu as f64).abs() / cap[0].cpu as f64;
    w.cpu * cpu_term + w.mem * mem_term + w.balance * balance
}

/// Full surrogate ranking of the feasible set, ascending score, ties by
/// index. Errors when nothing fits.
pub fn internal_surrogate_weighted(
    state: &ClusterState,
    w: SurrogateWeights,
) -> Result<Vec<Action>, SchedError> {
    let actions = state.feasible_action_set();
    if actions.is_empty() {
        return Err(SchedError::NoFeasibleAction);
    }
    let mut scored: Vec<(f64, Action)> = actions
        .into_iter()
        .map(|a| (surrogate_score(state, a, w), a))
        .collect();
    scored.sort_by(|(sa, aa), (sb, ab)| sa.total_cmp(sb).then(aa.index().cmp(&ab.index())));
    Ok(scored.into_iter().map(|(_, a)| a).collect())
}

/// [`internal_surrogate_weighted`] with the default weights.
pub fn internal_surrogate(state: &ClusterState) -> Result<Vec<Action>, SchedError> {
    internal_surrogate_weighted(state, SurrogateWeights::default())
}

/// How many candidates each ranking contributes to the filter union.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub n_best_fit: usize,
    pub n_surrogate: usize,
}

impl FilterSpec {
    /// Named splits used throughout: k=5 takes Best-Fit's top-2 plus the
    /// surrogate's top-3; the swept variants use (2,1), (4,3) and (6,4).
    /// Other sizes split half-and-half, Best-Fit rounded up.
    pub fn for_k(k: usize) -> FilterSpec {
        let (n_best_fit, n_surrogate) = match k {
            3 => (2, 1),
            5 => (2, 3),
            7 => (4, 3),
            10 => (6, 4),
            _ => (k.div_ceil(2), k / 2),
        };
        FilterSpec {
            n_best_fit,
            n_surrogate,
        }
    }

    pub fn k(&self) -> usize {
        self.n_best_fit + self.n_surrogate
    }
}

/// Ordered, duplicate-free set of candidate actions, at most k of them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    actions: Vec<Action>,
}

impl CandidateSet {
    /// Wraps an explicit action list; callers are trusted to pass distinct
    /// feasible actions.
    pub fn from_actions(actions: Vec<Action>) -> CandidateSet {
        CandidateSet { actions }
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn contains(&self, action: Action) -> bool {
        self.actions.contains(&action)
    }
}

/// Narrows the feasible set to at most k candidates: the union of Best-Fit's
/// and the surrogate's top slices. When the two overlap, the set is
/// backfilled from the surrogate's ranking (then Best-Fit's) so exploration
/// keeps its breadth whenever enough feasible actions exist.
pub fn top_k_filter_with(
    state: &ClusterState,
    spec: FilterSpec,
    w: SurrogateWeights,
) -> Result<CandidateSet, SchedError> {
    let k = spec.k();
    assert!(k >= 1, "filter needs k >= 1");
    let bf = best_fit_ranking(state);
    if bf.is_empty() {
        return Err(SchedError::NoFeasibleAction);
    }
    let is = internal_surrogate_weighted(state, w)?;
    let mut actions: Vec<Action> = Vec::with_capacity(k);
    let push = |a: Action, actions: &mut Vec<Action>| {
        if actions.len() < k && !actions.contains(&a) {
            actions.push(a);
        }
    };
    for &a in bf.iter().take(spec.n_best_fit) {
        push(a, &mut actions);
    }
    for &a in is.iter().take(spec.n_surrogate) {
        push(a, &mut actions);
    }
    for &a in is.iter().skip(spec.n_surrogate) {
        push(a, &mut actions);
    }
    for &a in bf.iter().skip(spec.n_best_fit) {
        push(a, &mut actions);
    }
    Ok(CandidateSet { actions })
}

/// [`top_k_filter_with`] using the named split for `k` and default weights.
pub fn top_k_filter(state: &ClusterState, k: usize) -> Result<CandidateSet, SchedError> {
    top_k_filter_with(state, FilterSpec::for_k(k), SurrogateWeights::default())
}

/// All feasible actions in index order, used by the unfiltered agent
/// variant. Same output type as the filter so policies can swap freely.
pub fn unfiltered_candidates(state: &ClusterState) -> Result<CandidateSet, SchedError> {
    let actions = state.feasible_action_set();
    if actions.is_empty() {
        return Err(SchedError::NoFeasibleAction);
    }
    Ok(CandidateSet { actions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{ClusterState, NumaResources, ReqOp, VmRequest, NUMA_NODES};
    use rand::Rng;

    fn req(cpu: u32, mem: u32, mode: NumaMode) -> VmRequest {
        VmRequest {
            vm_id: 0,
            resources: NumaResources::new(cpu, mem),
            op: ReqOp::Create,
            numa_mode: mode,
            duration: 1,
            price_rate: 0.0,
        }
    }

    /// State with the given remaining CPU per NUMA node (mem kept ample).
    fn state_with_cpu(remaining: &[u32]) -> ClusterState {
        assert_eq!(remaining.len() % NUMA_NODES, 0);
        let n = remaining.len() / NUMA_NODES;
        let mut state = ClusterState::homogeneous(n, NumaResources::new(16, 64));
        for (slot, &cpu) in remaining.iter().enumerate() {
            let burn = 16 - cpu;
            if burn == 0 {
                continue;
            }
            let mut r = req(burn, 1, NumaMode::Single);
            r.vm_id = 1000 + slot as u64;
            state.set_pending(Some(r));
            state.allocate_in_place(Action(slot)).unwrap();
        }
        state.set_pending(None);
        state
    }

    #[test]
    fn first_fit_picks_lowest_feasible_index() {
        let mut state = state_with_cpu(&[1, 1, 8, 8]);
        state.set_pending(Some(req(4, 8, NumaMode::Single)));
        assert_eq!(first_fit(&state).unwrap(), Action(2));
    }

    #[test]
    fn first_fit_errors_when_nothing_fits() {
        let mut state = state_with_cpu(&[1, 1, 1, 1]);
        state.set_pending(Some(req(4, 8, NumaMode::Single)));
        assert_eq!(first_fit(&state), Err(SchedError::NoFeasibleAction));
    }

    #[test]
    fn best_fit_prefers_tightest_node() {
        let mut state = state_with_cpu(&[8, 3, 5, 6]);
        state.set_pending(Some(req(2, 2, NumaMode::Single)));
        assert_eq!(best_fit(&state).unwrap(), Action(1));
    }

    #[test]
    fn best_fit_breaks_ties_by_lowest_index() {
        let mut state = state_with_cpu(&[5, 5, 5, 5]);
        state.set_pending(Some(req(2, 2, NumaMode::Single)));
        assert_eq!(best_fit(&state).unwrap(), Action(0));
    }

    #[test]
    fn best_fit_double_ranks_whole_pms() {
        // PM sums: 12 vs 6; the double request needs 4+4 per node, so only
        // feasibility on both nodes counts, then the tighter PM wins.
        let mut state = state_with_cpu(&[8, 4, 2, 4]);
        state.set_pending(Some(req(4, 4, NumaMode::Double)));
        assert_eq!(best_fit(&state).unwrap(), Action(2));
    }

    #[test]
    fn best_fit_matches_brute_force_argmin() {
        let mut rng = crate::seed_rng(3, 17, 0, 0);
        for _ in 0..300 {
            let n = rng.gen_range(1..8);
            let cpus: Vec<u32> = (0..n * NUMA_NODES).map(|_| rng.gen_range(0..17)).collect();
            let mut state = state_with_cpu(&cpus);
            let mode = if rng.gen_bool(0.4) {
                NumaMode::Double
            } else {
                NumaMode::Single
            };
            state.set_pending(Some(req(rng.gen_range(1..5) * 2, 4, mode)));
            let feasible = state.feasible_action_set();
            if feasible.is_empty() {
                assert_eq!(best_fit(&state), Err(SchedError::NoFeasibleAction));
                continue;
            }
            let expect = feasible
                .iter()
                .copied()
                .min_by_key(|a| (remaining_cpu_key(&state, *a), a.index()))
                .unwrap();
            assert_eq!(best_fit(&state).unwrap(), expect);
        }
    }

    #[test]
    fn surrogate_ranks_by_hand_computed_scores() {
        // Capacity 16 per node. Remaining cpu [4, 16, 10, 16], mem ample.
        // Request (2 cpu, 2 mem) single:
        //   slot 0: cpu (4-2)/16 = 0.125, mem (63-2)/64, |2-16|/16 * 0.25
        //   slot 2: cpu (10-2)/16 = 0.5 ...
        // Hand-ranking puts slot 0 first (tight cpu dominates), then slot 2,
        // then the two empty nodes, ties broken by index.
        let mut state = state_with_cpu(&[4, 16, 10, 16]);
        state.set_pending(Some(req(2, 2, NumaMode::Single)));
        let w = SurrogateWeights::default();
        let ranking = internal_surrogate(&state).unwrap();
        let mut scored: Vec<(f64, Action)> = state
            .feasible_action_set()
            .into_iter()
            .map(|a| (surrogate_score(&state, a, w), a))
            .collect();
        scored.sort_by(|(sa, aa), (sb, ab)| sa.total_cmp(sb).then(aa.index().cmp(&ab.index())));
        assert_eq!(
            ranking,
            scored.iter().map(|(_, a)| *a).collect::<Vec<_>>()
        );
        assert_eq!(ranking[0], Action(0));
        // Spot-check one score numerically.
        let s0 = surrogate_score(&state, Action(0), w);
        let expect = 1.0 * (2.0 / 16.0) + 0.5 * (61.0 / 64.0) + 0.25 * (14.0 / 16.0);
        assert!((s0 - expect).abs() < 1e-12, "{s0} vs {expect}");
    }

    #[test]
    fn surrogate_single_feasible_action_is_returned() {
        let mut state = state_with_cpu(&[2, 0, 0, 0]);
        state.set_pending(Some(req(2, 2, NumaMode::Single)));
        assert_eq!(internal_surrogate(&state).unwrap(), vec![Action(0)]);
    }

    #[test]
    fn surrogate_cpu_only_weights_reduce_to_best_fit_order() {
        let mut rng = crate::seed_rng(5, 23, 0, 0);
        let w = SurrogateWeights {
            cpu: 1.0,
            mem: 0.0,
            balance: 0.0,
        };
        for _ in 0..100 {
            let n = rng.gen_range(1..6);
            let cpus: Vec<u32> = (0..n * NUMA_NODES).map(|_| rng.gen_range(0..17)).collect();
            let mut state = state_with_cpu(&cpus);
            let mode = if rng.gen_bool(0.3) {
                NumaMode::Double
            } else {
                NumaMode::Single
            };
            state.set_pending(Some(req(2, 2, mode)));
            if state.feasible_action_set().is_empty() {
                continue;
            }
            assert_eq!(
                internal_surrogate_weighted(&state, w).unwrap(),
                best_fit_ranking(&state)
            );
        }
    }

    #[test]
    fn filter_unions_disjoint_tops() {
        // Engineer disjoint rankings: best-fit cares only about cpu, the
        // surrogate's memory term drags in different slots.
        let mut state = state_with_cpu(&[16; 12]);
        // Burn memory asymmetrically: big memory holes on slots 0..3 make
        // the surrogate prefer them last despite equal cpu.
        for slot in 0..4 {
            let mut r = req(1, 40, NumaMode::Single);
            r.vm_id = 2000 + slot as u64;
            state.set_pending(Some(r));
            state.allocate_in_place(Action(slot)).unwrap();
        }
        // Tighten cpu on slots 0..2 so best-fit's top-2 is {0, 1}.
        for slot in 0..2 {
            let mut r = req(10, 1, NumaMode::Single);
            r.vm_id = 3000 + slot as u64;
            state.set_pending(Some(r));
            state.allocate_in_place(Action(slot)).unwrap();
        }
        state.set_pending(Some(req(2, 2, NumaMode::Single)));
        let cands = top_k_filter(&state, 5).unwrap();
        assert_eq!(cands.len(), 5);
        let bf = best_fit_ranking(&state);
        let is = internal_surrogate(&state).unwrap();
        assert!(cands.contains(bf[0]) && cands.contains(bf[1]));
        assert!(cands.contains(is[0]) && cands.contains(is[1]) && cands.contains(is[2]));
    }

    #[test]
    fn filter_backfills_on_overlap() {
        // Fully symmetric state: both rankings agree, union would be 3 deep,
        // backfill must still produce 5 distinct candidates.
        let mut state = state_with_cpu(&[16; 12]);
        state.set_pending(Some(req(2, 2, NumaMode::Single)));
        let cands = top_k_filter(&state, 5).unwrap();
        assert_eq!(cands.len(), 5);
        let mut dedup = cands.actions().to_vec();
        dedup.dedup();
        assert_eq!(dedup.len(), 5);
    }

    #[test]
    fn filter_returns_fewer_when_feasibility_is_scarce() {
        let mut state = state_with_cpu(&[4, 0, 4, 0]);
        state.set_pending(Some(req(4, 4, NumaMode::Single)));
        let cands = top_k_filter(&state, 5).unwrap();
        assert_eq!(cands.len(), 2);
    }

    #[test]
    fn filter_contains_best_fit_and_respects_k() {
        let mut rng = crate::seed_rng(11, 31, 0, 0);
        for _ in 0..300 {
            let n = rng.gen_range(1..10);
            let cpus: Vec<u32> = (0..n * NUMA_NODES).map(|_| rng.gen_range(0..17)).collect();
            let mut state = state_with_cpu(&cpus);
            let mode = if rng.gen_bool(0.3) {
                NumaMode::Double
            } else {
                NumaMode::Single
            };
            state.set_pending(Some(req(rng.gen_range(1..4) * 2, 4, mode)));
            let feasible = state.feasible_action_set();
            if feasible.is_empty() {
                continue;
            }
            let k = *[3usize, 5, 7, 10][..].iter().nth(rng.gen_range(0..4)).unwrap();
            let cands = top_k_filter(&state, k).unwrap();
            assert!(cands.len() <= k);
            assert_eq!(cands.len(), k.min(feasible.len()));
            assert!(cands.contains(best_fit(&state).unwrap()));
            for a in cands.actions() {
                assert!(feasible.contains(a));
            }
            // Deterministic.
            assert_eq!(top_k_filter(&state, k).unwrap(), cands);
        }
    }

    #[test]
    fn named_splits() {
        assert_eq!(FilterSpec::for_k(3), FilterSpec { n_best_fit: 2, n_surrogate: 1 });
        assert_eq!(FilterSpec::for_k(5), FilterSpec { n_best_fit: 2, n_surrogate: 3 });
        assert_eq!(FilterSpec::for_k(7), FilterSpec { n_best_fit: 4, n_surrogate: 3 });
        assert_eq!(FilterSpec::for_k(10), FilterSpec { n_best_fit: 6, n_surrogate: 4 });
        assert_eq!(FilterSpec::for_k(4), FilterSpec { n_best_fit: 2, n_surrogate: 2 });
    }
}
