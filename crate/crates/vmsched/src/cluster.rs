//! Cluster state machine: PMs with two NUMA nodes, VM requests, and the
//! allocate/release dynamics every other module builds on.
//!
//! Actions are flat indices over (PM, NUMA) slots. A cluster of N PMs exposes
//! 2N indices; index `l` targets NUMA `l % 2` of PM `l / 2`. Double-NUMA
//! requests split evenly across both nodes of the PM, so for them `l` and
//! `l ^ 1` describe the same placement and the even index is canonical.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// NUMA nodes per PM. The action encoding and the even/odd canonicalization
/// assume exactly two.
pub const NUMA_NODES: usize = 2;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ClusterError {
    #[error("action index {index} out of range for {pm_count} PMs")]
    InvalidAction { index: usize, pm_count: usize },
    #[error("allocation at action {index} would overdraw PM {pm}")]
    InfeasibleAllocation { index: usize, pm: usize },
    #[error("release for vm {vm_id} which is not live")]
    UnknownVm { vm_id: u64 },
    #[error("no pending request to place")]
    NoPendingRequest,
}

/// A CPU/memory pair. Used both for capacities/remaining amounts on a NUMA
/// node and for request demands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NumaResources {
    pub cpu: u32,
    pub mem: u32,
}

impl NumaResources {
    pub const ZERO: NumaResources = NumaResources { cpu: 0, mem: 0 };

    pub fn new(cpu: u32, mem: u32) -> Self {
        NumaResources { cpu, mem }
    }

    /// True when `demand` fits inside `self`.
    pub fn fits(&self, demand: NumaResources) -> bool {
        self.cpu >= demand.cpu && self.mem >= demand.mem
    }

    pub fn checked_sub(&self, demand: NumaResources) -> Option<NumaResources> {
        Some(NumaResources {
            cpu: self.cpu.checked_sub(demand.cpu)?,
            mem: self.mem.checked_sub(demand.mem)?,
        })
    }

    pub fn add(&self, other: NumaResources) -> NumaResources {
        NumaResources {
            cpu: self.cpu + other.cpu,
            mem: self.mem + other.mem,
        }
    }

    /// Per-node share of a double-NUMA request. Callers must have validated
    /// that both fields are even.
    pub fn half(&self) -> NumaResources {
        NumaResources {
            cpu: self.cpu / 2,
            mem: self.mem / 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NumaMode {
    /// The VM lands on one NUMA node.
    Single,
    /// The VM splits evenly across both nodes of one PM.
    Double,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReqOp {
    Create,
    Release,
}

/// One VM request as it appears in a trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VmRequest {
    pub vm_id: u64,
    pub resources: NumaResources,
    pub op: ReqOp,
    pub numa_mode: NumaMode,
    /// Lifetime in time units. Income counts `duration * price_rate`.
    pub duration: u64,
    pub price_rate: f64,
}

impl VmRequest {
    /// Double-NUMA demands must split evenly across two nodes.
    pub fn valid_shape(&self) -> bool {
        match self.numa_mode {
            NumaMode::Single => true,
            NumaMode::Double => self.resources.cpu % 2 == 0 && self.resources.mem % 2 == 0,
        }
    }
}

/// Flat action index over (PM, NUMA) slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Action(pub usize);

impl Action {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn pm(self) -> usize {
        self.0 / NUMA_NODES
    }

    pub fn numa(self) -> usize {
        self.0 % NUMA_NODES
    }

    /// The other NUMA slot on the same PM.
    pub fn paired(self) -> Action {
        Action(self.0 ^ 1)
    }

    /// Double-NUMA placements are PM-level, so `l` and `l ^ 1` coincide; the
    /// even index represents them. Single placements are already canonical.
    pub fn canonical(self, mode: NumaMode) -> Action {
        match mode {
            NumaMode::Single => self,
            NumaMode::Double => Action(self.0 & !1),
        }
    }
}

/// How a live VM occupies its PM; enough to undo the allocation exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub pm: usize,
    pub numa_mode: NumaMode,
    /// NUMA slot for single placements, unused for double.
    pub slot: usize,
    pub resources: NumaResources,
}

/// One physical machine: remaining and total resources per NUMA node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicalMachine {
    pub id: usize,
    pub remaining: [NumaResources; NUMA_NODES],
    pub capacity: [NumaResources; NUMA_NODES],
}

impl PhysicalMachine {
    pub fn fresh(id: usize, capacity: [NumaResources; NUMA_NODES]) -> Self {
        PhysicalMachine {
            id,
            remaining: capacity,
            capacity,
        }
    }
}

/// Applies a request to one PM's remaining resources. `slot` is the NUMA
/// index for single requests and ignored for double ones. Returns the
/// post-allocation remaining amounts, or None when the PM cannot host it.
///
/// This helper is the single implementation of the placement arithmetic;
/// state transitions, feasibility checks, and the value-net look-ahead all
/// route through it so they cannot drift apart.
pub fn apply_request(
    remaining: &[NumaResources; NUMA_NODES],
    req: &VmRequest,
    slot: usize,
) -> Option<[NumaResources; NUMA_NODES]> {
    let mut out = *remaining;
    match req.numa_mode {
        NumaMode::Single => {
            out[slot] = out[slot].checked_sub(req.resources)?;
        }
        NumaMode::Double => {
            let share = req.resources.half();
            out[0] = out[0].checked_sub(share)?;
            out[1] = out[1].checked_sub(share)?;
        }
    }
    Some(out)
}

/// Full scheduler-facing state: the machines plus the request waiting to be
/// placed. Live placements are tracked so releases can restore resources
/// exactly as they were taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pms: Vec<PhysicalMachine>,
    pending: Option<VmRequest>,
    live: HashMap<u64, Placement>,
}

impl ClusterState {
    pub fn new(pms: Vec<PhysicalMachine>) -> Self {
        ClusterState {
            pms,
            pending: None,
            live: HashMap::new(),
        }
    }

    /// N identical empty PMs with the given per-node capacity.
    pub fn homogeneous(n_pms: usize, node_capacity: NumaResources) -> Self {
        let pms = (0..n_pms)
            .map(|id| PhysicalMachine::fresh(id, [node_capacity; NUMA_NODES]))
            .collect();
        ClusterState::new(pms)
    }

    pub fn pm_count(&self) -> usize {
        self.pms.len()
    }

    /// Number of action indices, i.e. 2N.
    pub fn action_count(&self) -> usize {
        self.pms.len() * NUMA_NODES
    }

    pub fn pms(&self) -> &[PhysicalMachine] {
        &self.pms
    }

    pub fn pending(&self) -> Option<&VmRequest> {
        self.pending.as_ref()
    }

    pub fn set_pending(&mut self, req: Option<VmRequest>) {
        self.pending = req;
    }

    pub fn live_placements(&self) -> &HashMap<u64, Placement> {
        &self.live
    }

    /// Appends `count` fresh PMs with the given per-node capacity (cluster
    /// expansion). Ids continue the existing sequence.
    pub fn add_pms(&mut self, count: usize, node_capacity: NumaResources) {
        let start = self.pms.len();
        for id in start..start + count {
            self.pms
                .push(PhysicalMachine::fresh(id, [node_capacity; NUMA_NODES]));
        }
    }

    fn check_action(&self, action: Action) -> Result<(), ClusterError> {
        if action.index() >= self.action_count() {
            return Err(ClusterError::InvalidAction {
                index: action.index(),
                pm_count: self.pm_count(),
            });
        }
        Ok(())
    }

    /// Whether the pending request fits at `action`. False when nothing is
    /// pending; Err only for out-of-range indices.
    pub fn feasible(&self, action: Action) -> Result<bool, ClusterError> {
        self.check_action(action)?;
        let Some(req) = &self.pending else {
            return Ok(false);
        };
        let pm = &self.pms[action.pm()];
        Ok(apply_request(&pm.remaining, req, action.numa()).is_some())
    }

    /// All feasible placements for the pending request, ascending by index.
    /// Double-NUMA requests contribute one canonical (even) index per PM.
    pub fn feasible_action_set(&self) -> Vec<Action> {
        let Some(req) = &self.pending else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for (pm_idx, pm) in self.pms.iter().enumerate() {
            match req.numa_mode {
                NumaMode::Single => {
                    for slot in 0..NUMA_NODES {
                        if apply_request(&pm.remaining, req, slot).is_some() {
                            out.push(Action(pm_idx * NUMA_NODES + slot));
                        }
                    }
                }
                NumaMode::Double => {
                    if apply_request(&pm.remaining, req, 0).is_some() {
                        out.push(Action(pm_idx * NUMA_NODES));
                    }
                }
            }
        }
        out
    }

    /// Places the pending request at `action`, mutating in place. Only the
    /// targeted PM changes. The request is recorded as live; the pending slot
    /// is left untouched so callers can inspect it afterwards.
    pub fn allocate_in_place(&mut self, action: Action) -> Result<(), ClusterError> {
        self.check_action(action)?;
        let req = self.pending.ok_or(ClusterError::NoPendingRequest)?;
        let pm_idx = action.pm();
        let pm = &mut self.pms[pm_idx];
        let next = apply_request(&pm.remaining, &req, action.numa()).ok_or(
            ClusterError::InfeasibleAllocation {
                index: action.index(),
                pm: pm_idx,
            },
        )?;
        pm.remaining = next;
        self.live.insert(
            req.vm_id,
            Placement {
                pm: pm_idx,
                numa_mode: req.numa_mode,
                slot: action.numa(),
                resources: req.resources,
            },
        );
        Ok(())
    }

    /// Pure variant of [`allocate_in_place`]: returns the successor state.
    pub fn allocate(&self, action: Action) -> Result<ClusterState, ClusterError> {
        let mut next = self.clone();
        next.allocate_in_place(action)?;
        Ok(next)
    }

    /// Returns a live VM's resources to its PM, exactly undoing the
    /// placement recorded at allocation time.
    pub fn release_in_place(&mut self, vm_id: u64) -> Result<(), ClusterError> {
        let placement = self
            .live
            .remove(&vm_id)
            .ok_or(ClusterError::UnknownVm { vm_id })?;
        let pm = &mut self.pms[placement.pm];
        match placement.numa_mode {
            NumaMode::Single => {
                pm.remaining[placement.slot] =
                    pm.remaining[placement.slot].add(placement.resources);
            }
            NumaMode::Double => {
                let share = placement.resources.half();
                pm.remaining[0] = pm.remaining[0].add(share);
                pm.remaining[1] = pm.remaining[1].add(share);
            }
        }
        debug_assert!(
            pm.capacity
                .iter()
                .zip(pm.remaining.iter())
                .all(|(cap, rem)| cap.fits(*rem)),
            "release overflowed capacity on pm {}",
            placement.pm
        );
        Ok(())
    }

    /// Pure batch release; each request's vm_id must be live.
    pub fn release(&self, requests: &[VmRequest]) -> Result<ClusterState, ClusterError> {
        let mut next = self.clone();
        for req in requests {
            next.release_in_place(req.vm_id)?;
        }
        Ok(next)
    }

    pub fn total_capacity_cpu(&self) -> u64 {
        self.pms
            .iter()
            .map(|pm| pm.capacity.iter().map(|r| r.cpu as u64).sum::<u64>())
            .sum()
    }

    pub fn allocated_cpu(&self) -> u64 {
        self.pms
            .iter()
            .map(|pm| {
                pm.capacity
                    .iter()
                    .zip(pm.remaining.iter())
                    .map(|(cap, rem)| (cap.cpu - rem.cpu) as u64)
                    .sum::<u64>()
            })
            .sum()
    }

    /// Cluster-wide CPU utilization in [0, 1].
    pub fn cpu_utilization(&self) -> f64 {
        let cap = self.total_capacity_cpu();
        if cap == 0 {
            return 0.0;
        }
        self.allocated_cpu() as f64 / cap as f64
    }
}

/// Cheap copy of the decision-relevant part of a state: per-PM remaining
/// resources, shared capacities, and the pending request. Replay buffers
/// store these instead of full states; capacities sit behind an Arc because
/// they only change on expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub remaining: Vec<[NumaResources; NUMA_NODES]>,
    pub capacity: Arc<Vec<[NumaResources; NUMA_NODES]>>,
    pub pending: Option<VmRequest>,
}

impl StateSnapshot {
    pub fn of(state: &ClusterState) -> Self {
        StateSnapshot {
            remaining: state.pms.iter().map(|pm| pm.remaining).collect(),
            capacity: Arc::new(state.pms.iter().map(|pm| pm.capacity).collect()),
            pending: state.pending,
        }
    }

    /// Same as [`StateSnapshot::of`] but reusing an existing capacity Arc,
    /// valid as long as the PM set has not changed since it was taken.
    pub fn with_capacity(state: &ClusterState, capacity: Arc<Vec<[NumaResources; 2]>>) -> Self {
        debug_assert_eq!(capacity.len(), state.pm_count());
        StateSnapshot {
            remaining: state.pms.iter().map(|pm| pm.remaining).collect(),
            capacity,
            pending: state.pending,
        }
    }

    pub fn pm_count(&self) -> usize {
        self.remaining.len()
    }

    /// Rebuilds a state for feasibility checks and candidate scoring. Live
    /// placements are not part of a snapshot, so the result cannot process
    /// releases.
    pub fn to_state(&self) -> ClusterState {
        let pms = self
            .remaining
            .iter()
            .zip(self.capacity.iter())
            .enumerate()
            .map(|(id, (rem, cap))| PhysicalMachine {
                id,
                remaining: *rem,
                capacity: *cap,
            })
            .collect();
        let mut state = ClusterState::new(pms);
        state.set_pending(self.pending);
        state
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn req(cpu: u32, mem: u32, mode: NumaMode) -> VmRequest {
        VmRequest {
            vm_id: 1,
            resources: NumaResources::new(cpu, mem),
            op: ReqOp::Create,
            numa_mode: mode,
            duration: 10,
            price_rate: 1.0,
        }
    }

    fn two_pm_state() -> ClusterState {
        ClusterState::homogeneous(2, NumaResources::new(8, 16))
    }

    #[test]
    fn single_allocation_consumes_one_node() {
        let mut state = two_pm_state();
        state.set_pending(Some(req(4, 8, NumaMode::Single)));
        state.allocate_in_place(Action(0)).unwrap();
        assert_eq!(state.pms()[0].remaining[0], NumaResources::new(4, 8));
        assert_eq!(state.pms()[0].remaining[1], NumaResources::new(8, 16));
        assert_eq!(state.pms()[1].remaining[0], NumaResources::new(8, 16));
        assert_eq!(state.pms()[1].remaining[1], NumaResources::new(8, 16));
    }

    #[test]
    fn single_allocation_on_odd_slot() {
        let mut state = two_pm_state();
        state.set_pending(Some(req(4, 8, NumaMode::Single)));
        state.allocate_in_place(Action(3)).unwrap();
        assert_eq!(state.pms()[1].remaining[0], NumaResources::new(8, 16));
        assert_eq!(state.pms()[1].remaining[1], NumaResources::new(4, 8));
    }

    #[test]
    fn double_allocation_splits_evenly() {
        let mut state = two_pm_state();
        state.set_pending(Some(req(4, 8, NumaMode::Double)));
        state.allocate_in_place(Action(0)).unwrap();
        assert_eq!(state.pms()[0].remaining[0], NumaResources::new(6, 12));
        assert_eq!(state.pms()[0].remaining[1], NumaResources::new(6, 12));
    }

    #[test]
    fn infeasible_allocation_is_rejected_and_state_unchanged() {
        let mut state = two_pm_state();
        state.set_pending(Some(req(9, 4, NumaMode::Single)));
        let before = state.clone();
        let err = state.allocate_in_place(Action(0)).unwrap_err();
        assert_eq!(
            err,
            ClusterError::InfeasibleAllocation { index: 0, pm: 0 }
        );
        assert_eq!(state, before);
    }

    #[test]
    fn feasibility_checks_both_resources() {
        let mut state = two_pm_state();
        state.set_pending(Some(req(8, 16, NumaMode::Single)));
        assert!(state.feasible(Action(0)).unwrap());
        state.set_pending(Some(req(8, 17, NumaMode::Single)));
        assert!(!state.feasible(Action(0)).unwrap());
        state.set_pending(Some(req(9, 16, NumaMode::Single)));
        assert!(!state.feasible(Action(0)).unwrap());
    }

    #[test]
    fn out_of_range_action_errors() {
        let state = two_pm_state();
        assert_eq!(
            state.feasible(Action(4)).unwrap_err(),
            ClusterError::InvalidAction {
                index: 4,
                pm_count: 2
            }
        );
    }

    #[test]
    fn double_feasibility_needs_both_nodes() {
        // Node 1 is nearly drained; a double request that would fit node 0
        // alone must be rejected at the PM level.
        let mut state = two_pm_state();
        state.set_pending(Some(req(8, 2, NumaMode::Single)));
        state.allocate_in_place(Action(1)).unwrap();
        state.set_pending(Some(req(2, 2, NumaMode::Double)));
        assert!(!state.feasible(Action(0)).unwrap());
        assert!(state.feasible(Action(2)).unwrap());
    }

    #[test]
    fn release_restores_single_placement() {
        let mut state = two_pm_state();
        state.set_pending(Some(req(4, 8, NumaMode::Single)));
        state.allocate_in_place(Action(1)).unwrap();
        state.release_in_place(1).unwrap();
        assert_eq!(state.pms()[0].remaining[1], NumaResources::new(8, 16));
        assert!(state.live_placements().is_empty());
    }

    #[test]
    fn release_restores_double_placement_on_both_nodes() {
        let mut state = two_pm_state();
        state.set_pending(Some(req(6, 10, NumaMode::Double)));
        state.allocate_in_place(Action(2)).unwrap();
        assert_eq!(state.pms()[1].remaining[0], NumaResources::new(5, 11));
        state.release_in_place(1).unwrap();
        assert_eq!(state.pms()[1].remaining[0], NumaResources::new(8, 16));
        assert_eq!(state.pms()[1].remaining[1], NumaResources::new(8, 16));
    }

    #[test]
    fn release_of_unknown_vm_errors() {
        let mut state = two_pm_state();
        assert_eq!(
            state.release_in_place(42).unwrap_err(),
            ClusterError::UnknownVm { vm_id: 42 }
        );
    }

    #[test]
    fn feasible_action_set_matches_per_index_scan() {
        // Brute-force oracle: probe every index with `feasible` and compare.
        let mut rng = crate::seed_rng(7, 99, 0, 0);
        for _ in 0..200 {
            let n = rng.gen_range(1..6);
            let mut state = ClusterState::homogeneous(n, NumaResources::new(16, 32));
            // Random fill.
            for _ in 0..rng.gen_range(0..12) {
                let mode = if rng.gen_bool(0.3) {
                    NumaMode::Double
                } else {
                    NumaMode::Single
                };
                let cpu = rng.gen_range(1..6) * 2;
                let mut r = req(cpu, cpu * 2, mode);
                r.vm_id = rng.gen();
                state.set_pending(Some(r));
                let actions = state.feasible_action_set();
                if let Some(&a) = actions.first() {
                    state.allocate_in_place(a).unwrap();
                }
            }
            let mode = if rng.gen_bool(0.5) {
                NumaMode::Double
            } else {
                NumaMode::Single
            };
            state.set_pending(Some(req(4, 8, mode)));
            let got = state.feasible_action_set();
            let mut expect = Vec::new();
            for idx in 0..state.action_count() {
                let a = Action(idx);
                if state.feasible(a).unwrap() && a.canonical(mode) == a {
                    expect.push(a);
                }
            }
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn double_actions_share_canonical_index() {
        let state = {
            let mut s = two_pm_state();
            s.set_pending(Some(req(4, 8, NumaMode::Double)));
            s
        };
        let even = state.allocate(Action(2)).unwrap();
        let odd = state.allocate(Action(3)).unwrap();
        assert_eq!(even.pms(), odd.pms());
        assert_eq!(Action(3).canonical(NumaMode::Double), Action(2));
    }

    #[test]
    fn snapshot_round_trips_through_state() {
        let mut state = two_pm_state();
        state.set_pending(Some(req(4, 8, NumaMode::Single)));
        state.allocate_in_place(Action(0)).unwrap();
        let snap = StateSnapshot::of(&state);
        let rebuilt = snap.to_state();
        assert_eq!(rebuilt.pms(), state.pms());
        assert_eq!(rebuilt.pending(), state.pending());
    }

    proptest! {
        #[test]
        fn allocate_release_round_trip(
            cpu in 1u32..8,
            mem in 1u32..16,
            double in proptest::bool::ANY,
            idx in 0usize..4,
        ) {
            let mode = if double { NumaMode::Double } else { NumaMode::Single };
            let mut r = req(cpu * 2, mem * 2, mode);
            r.vm_id = 7;
            let mut state = two_pm_state();
            state.set_pending(Some(r));
            let action = Action(idx).canonical(mode);
            if state.feasible(action).unwrap() {
                let before = state.pms().to_vec();
                state.allocate_in_place(action).unwrap();
                state.release_in_place(7).unwrap();
                prop_assert_eq!(state.pms(), &before[..]);
            }
        }

        #[test]
        fn allocation_conserves_resources_and_is_local(
            cpu in 1u32..8,
            mem in 1u32..16,
            double in proptest::bool::ANY,
            idx in 0usize..4,
        ) {
            let mode = if double { NumaMode::Double } else { NumaMode::Single };
            let r = req(cpu * 2, mem * 2, mode);
            let mut state = two_pm_state();
            state.set_pending(Some(r));
            let action = Action(idx).canonical(mode);
            if state.feasible(action).unwrap() {
                let before = state.clone();
                state.allocate_in_place(action).unwrap();
                // Locality: non-target PM untouched.
                let other = 1 - action.pm();
                prop_assert_eq!(&state.pms()[other], &before.pms()[other]);
                // Conservation: total drop equals the demand.
                let drop_cpu: u32 = state.pms().iter().zip(before.pms()).map(|(a, b)| {
                    (b.remaining[0].cpu - a.remaining[0].cpu)
                        + (b.remaining[1].cpu - a.remaining[1].cpu)
                }).sum();
                let drop_mem: u32 = state.pms().iter().zip(before.pms()).map(|(a, b)| {
                    (b.remaining[0].mem - a.remaining[0].mem)
                        + (b.remaining[1].mem - a.remaining[1].mem)
                }).sum();
                prop_assert_eq!(drop_cpu, r.resources.cpu);
                prop_assert_eq!(drop_mem, r.resources.mem);
            }
        }
    }
}
