//! Request traces: synthetic generation, JSON-lines persistence, scenario
//! configuration, and the warm-start prefill.
//!
//! Trace files hold one event per line:
//! `{"t":0,"vm_id":0,"op":"create","cpu":4,"mem":8,"numa_mode":"single","duration":50,"price_rate":0.4}`
//! Events are ordered by `t`, ties resolved by line order. Every release
//! refers to a previously created VM.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{
    ClusterError, ClusterState, NumaMode, NumaResources, ReqOp, VmRequest,
};
use crate::heuristics;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: {msg}")]
    Ordering { line: usize, msg: String },
    #[error("warm start target {target} unreachable; trace exhausted at utilization {reached}")]
    WarmStartUnreachable { target: f64, reached: f64 },
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One trace line: arrival time plus the request itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t: u64,
    pub request: VmRequest,
}

/// A VM shape in the synthetic catalog. Durations are drawn uniformly from
/// the inclusive range; a duration of `u64::MAX` (or one whose release time
/// would overflow) means the VM never terminates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmType {
    pub name: String,
    pub cpu: u32,
    pub mem: u32,
    pub numa_mode: NumaMode,
    pub duration: [u64; 2],
    pub price_rate: f64,
    /// Relative sampling weight; weights need not sum to one.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub types: Vec<VmType>,
}

impl Catalog {
    /// Small/medium/large singles plus two double-NUMA shapes, skewed toward
    /// small VMs the way public cloud traces are.
    pub fn default_catalog() -> Catalog {
        let mk = |name: &str, cpu: u32, mode, weight| VmType {
            name: name.to_string(),
            cpu,
            mem: cpu * 2,
            numa_mode: mode,
            duration: [30, 120],
            price_rate: cpu as f64 * 0.1,
            weight,
        };
        Catalog {
            types: vec![
                mk("s1", 1, NumaMode::Single, 0.30),
                mk("s2", 2, NumaMode::Single, 0.25),
                mk("s4", 4, NumaMode::Single, 0.20),
                mk("d8", 8, NumaMode::Double, 0.15),
                mk("d16", 16, NumaMode::Double, 0.10),
            ],
        }
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        for (i, t) in self.types.iter().enumerate() {
            let bad = |msg: String| TraceError::Parse { line: i, msg };
            if t.weight <= 0.0 || !t.weight.is_finite() {
                return Err(bad(format!("type {}: weight must be positive", t.name)));
            }
            if t.cpu == 0 {
                return Err(bad(format!("type {}: cpu must be positive", t.name)));
            }
            if t.duration[0] > t.duration[1] {
                return Err(bad(format!("type {}: empty duration range", t.name)));
            }
            if t.numa_mode == NumaMode::Double && (t.cpu % 2 != 0 || t.mem % 2 != 0) {
                return Err(bad(format!(
                    "type {}: double-NUMA shapes need even cpu and mem",
                    t.name
                )));
            }
        }
        Ok(())
    }
}

impl Default for Catalog {
    fn default() -> Self {
        Catalog::default_catalog()
    }
}

/// Provenance of a generated trace; saved as a sidecar next to the events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub seed: u64,
    pub length: usize,
    pub catalog: Catalog,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
    pub meta: Option<TraceMeta>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioMode {
    NonExpansion,
    Expansion,
}

/// Cluster scenario: machine fleet, warm-start level, and expansion rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub n_pms_initial: usize,
    /// Warm-start CPU utilization target in [0, 1).
    pub warm_start_ratio: f64,
    pub mode: ScenarioMode,
    /// PMs added per expansion trigger (Expansion mode only).
    pub expansion_step: usize,
    /// Fleet size cap (Expansion mode only).
    pub n_pms_max: usize,
    /// Per-NUMA-node capacity, identical across the fleet.
    pub pm_capacity: NumaResources,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            n_pms_initial: 5,
            warm_start_ratio: 0.0,
            mode: ScenarioMode::NonExpansion,
            expansion_step: 10,
            n_pms_max: 110,
            pm_capacity: NumaResources::new(16, 32),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_pms_initial == 0 {
            return Err("n_pms_initial must be positive".into());
        }
        if !(0.0..1.0).contains(&self.warm_start_ratio) {
            return Err("warm_start_ratio must lie in [0, 1)".into());
        }
        if self.pm_capacity.cpu == 0 || self.pm_capacity.mem == 0 {
            return Err("pm_capacity must be positive".into());
        }
        if self.mode == ScenarioMode::Expansion {
            if self.n_pms_initial > self.n_pms_max {
                return Err("expansion requires n_pms_initial <= n_pms_max".into());
            }
            if self.expansion_step == 0 {
                return Err("expansion_step must be positive".into());
            }
        }
        Ok(())
    }

    pub fn initial_state(&self) -> ClusterState {
        ClusterState::homogeneous(self.n_pms_initial, self.pm_capacity)
    }
}

/// Flat JSON shape of one trace line, kept separate from the in-memory types
/// so the file format stays pinned.
#[derive(Serialize, Deserialize)]
struct TraceLine {
    t: u64,
    vm_id: u64,
    op: ReqOp,
    cpu: u32,
    mem: u32,
    numa_mode: NumaMode,
    duration: u64,
    price_rate: f64,
}

impl From<&TraceEvent> for TraceLine {
    fn from(ev: &TraceEvent) -> Self {
        TraceLine {
            t: ev.t,
            vm_id: ev.request.vm_id,
            op: ev.request.op,
            cpu: ev.request.resources.cpu,
            mem: ev.request.resources.mem,
            numa_mode: ev.request.numa_mode,
            duration: ev.request.duration,
            price_rate: ev.request.price_rate,
        }
    }
}

impl From<TraceLine> for TraceEvent {
    fn from(line: TraceLine) -> Self {
        TraceEvent {
            t: line.t,
            request: VmRequest {
                vm_id: line.vm_id,
                resources: NumaResources::new(line.cpu, line.mem),
                op: line.op,
                numa_mode: line.numa_mode,
                duration: line.duration,
                price_rate: line.price_rate,
            },
        }
    }
}

/// Draws `length` create events (one per time unit) from the catalog and
/// interleaves the matching releases at `t + duration`. Same inputs, same
/// bytes out.
pub fn generate_trace(catalog: &Catalog, length: usize, seed: u64) -> Trace {
    catalog.validate().expect("invalid catalog");
    let mut rng = crate::seed_rng(seed, crate::seeds::TRACE, 0, 0);
    let weights = WeightedIndex::new(catalog.types.iter().map(|t| t.weight)).unwrap();
    // (t, seq) sort key; releases get the odd sequence slot right after their
    // create so a release landing on a later create's arrival time is
    // processed before that create.
    let mut events: Vec<(u64, u64, TraceEvent)> = Vec::with_capacity(length * 2);
    for i in 0..length {
        let ty = &catalog.types[weights.sample(&mut rng)];
        let t = i as u64;
        let duration = rng.gen_range(ty.duration[0]..=ty.duration[1]);
        let request = VmRequest {
            vm_id: i as u64,
            resources: NumaResources::new(ty.cpu, ty.mem),
            op: ReqOp::Create,
            numa_mode: ty.numa_mode,
            duration,
            price_rate: ty.price_rate,
        };
        events.push((t, 2 * i as u64, TraceEvent { t, request }));
        let t_release = (duration != u64::MAX).then(|| t.checked_add(duration)).flatten();
        if let Some(t_release) = t_release {
            let mut release = request;
            release.op = ReqOp::Release;
            events.push((
                t_release,
                2 * i as u64 + 1,
                TraceEvent {
                    t: t_release,
                    request: release,
                },
            ));
        }
    }
    events.sort_by_key(|(t, seq, _)| (*t, *seq));
    Trace {
        events: events.into_iter().map(|(_, _, ev)| ev).collect(),
        meta: Some(TraceMeta {
            seed,
            length,
            catalog: catalog.clone(),
        }),
    }
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".meta.json");
    std::path::PathBuf::from(os)
}

/// Parses a JSON-lines trace and validates ordering: arrival times
/// non-decreasing, no duplicate creates of a live VM, releases only for
/// previously created, still-live VMs. A meta sidecar is picked up when
/// present.
pub fn load_trace(path: &Path) -> Result<Trace, TraceError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut events = Vec::new();
    let mut live: HashSet<u64> = HashSet::new();
    let mut last_t = 0u64;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TraceLine = serde_json::from_str(&line).map_err(|e| TraceError::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let ev = TraceEvent::from(parsed);
        if !ev.request.valid_shape() {
            return Err(TraceError::Parse {
                line: lineno,
                msg: format!(
                    "vm {}: double-NUMA requests need even cpu and mem",
                    ev.request.vm_id
                ),
            });
        }
        if ev.t < last_t {
            return Err(TraceError::Ordering {
                line: lineno,
                msg: format!("arrival time {} decreases (previous {})", ev.t, last_t),
            });
        }
        last_t = ev.t;
        match ev.request.op {
            ReqOp::Create => {
                if !live.insert(ev.request.vm_id) {
                    return Err(TraceError::Ordering {
                        line: lineno,
                        msg: format!("vm {} created while still live", ev.request.vm_id),
                    });
                }
            }
            ReqOp::Release => {
                if !live.remove(&ev.request.vm_id) {
                    return Err(TraceError::Ordering {
                        line: lineno,
                        msg: format!("release of vm {} before its create", ev.request.vm_id),
                    });
                }
            }
        }
        events.push(ev);
    }
    let meta = match std::fs::read(meta_path(path)) {
        Ok(bytes) => Some(serde_json::from_slice(&bytes).map_err(|e| TraceError::Parse {
            line: 0,
            msg: format!("meta sidecar: {e}"),
        })?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };
    Ok(Trace { events, meta })
}

/// Writes the trace as JSON lines (and the meta sidecar when present), the
/// exact inverse of [`load_trace`].
pub fn save_trace(trace: &Trace, path: &Path) -> Result<(), TraceError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ev in &trace.events {
        let line = serde_json::to_string(&TraceLine::from(ev)).expect("trace line serializes");
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    if let Some(meta) = &trace.meta {
        let bytes = serde_json::to_vec_pretty(meta).expect("meta serializes");
        std::fs::write(meta_path(path), bytes)?;
    }
    Ok(())
}

/// Result of the warm-start prefill: the filled cluster, the unconsumed
/// trace tail, and the creates that were skipped as infeasible (their
/// releases must be ignored later).
#[derive(Debug)]
pub struct WarmStarted {
    pub state: ClusterState,
    pub remaining: Vec<TraceEvent>,
    pub skipped: HashSet<u64>,
}

/// Plays the trace prefix into `state`, placing each create with Best-Fit
/// and applying releases, until cluster CPU utilization reaches `ratio`.
/// Infeasible creates are skipped, not fatal. `ratio == 0` consumes nothing.
pub fn warm_start(
    state: ClusterState,
    trace: &Trace,
    ratio: f64,
) -> Result<WarmStarted, TraceError> {
    let mut state = state;
    let mut skipped = HashSet::new();
    let mut cursor = 0usize;
    while state.cpu_utilization() < ratio {
        let Some(ev) = trace.events.get(cursor) else {
            return Err(TraceError::WarmStartUnreachable {
                target: ratio,
                reached: state.cpu_utilization(),
            });
        };
        cursor += 1;
        match ev.request.op {
            ReqOp::Create => {
                state.set_pending(Some(ev.request));
                match heuristics::best_fit(&state) {
                    Ok(action) => state.allocate_in_place(action)?,
                    Err(heuristics::SchedError::NoFeasibleAction) => {
                        skipped.insert(ev.request.vm_id);
                    }
                }
                state.set_pending(None);
            }
            ReqOp::Release => {
                if !skipped.remove(&ev.request.vm_id) {
                    state.release_in_place(ev.request.vm_id)?;
                }
            }
        }
    }
    state.set_pending(None);
    Ok(WarmStarted {
        state,
        remaining: trace.events[cursor..].to_vec(),
        skipped,
    })
}

/// Empirical per-type counts of create events, keyed by (cpu, mem, mode).
/// Test helper for checking generator frequencies against catalog weights.
pub fn create_shape_counts(trace: &Trace) -> HashMap<(u32, u32, NumaMode), usize> {
    let mut counts = HashMap::new();
    for ev in &trace.events {
        if ev.request.op == ReqOp::Create {
            *counts
                .entry((
                    ev.request.resources.cpu,
                    ev.request.resources.mem,
                    ev.request.numa_mode,
                ))
                .or_insert(0) += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn infinite_catalog() -> Catalog {
        let mut cat = Catalog::default_catalog();
        for t in &mut cat.types {
            t.duration = [u64::MAX, u64::MAX];
        }
        cat
    }

    #[test]
    fn generate_is_deterministic() {
        let cat = Catalog::default_catalog();
        let a = generate_trace(&cat, 500, 42);
        let b = generate_trace(&cat, 500, 42);
        assert_eq!(a, b);
        let c = generate_trace(&cat, 500, 43);
        assert_ne!(a.events, c.events);
    }

    #[test]
    fn infinite_durations_produce_creates_only() {
        let trace = generate_trace(&infinite_catalog(), 10, 1);
        assert_eq!(trace.events.len(), 10);
        assert!(trace
            .events
            .iter()
            .all(|ev| ev.request.op == ReqOp::Create));
    }

    #[test]
    fn releases_match_creates_and_are_ordered() {
        let trace = generate_trace(&Catalog::default_catalog(), 300, 9);
        let mut live = HashSet::new();
        let mut last_t = 0;
        let mut releases = 0;
        for ev in &trace.events {
            assert!(ev.t >= last_t);
            last_t = ev.t;
            match ev.request.op {
                ReqOp::Create => assert!(live.insert(ev.request.vm_id)),
                ReqOp::Release => {
                    releases += 1;
                    assert!(live.remove(&ev.request.vm_id));
                }
            }
        }
        assert_eq!(releases, 300);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        let trace = generate_trace(&Catalog::default_catalog(), 200, 5);
        save_trace(&trace, &path).unwrap();
        let loaded = load_trace(&path).unwrap();
        assert_eq!(loaded, trace);
    }

    #[test]
    fn load_parses_known_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"t\":0,\"vm_id\":0,\"op\":\"create\",\"cpu\":4,\"mem\":8,\"numa_mode\":\"single\",\"duration\":5,\"price_rate\":0.4}\n",
                "{\"t\":1,\"vm_id\":1,\"op\":\"create\",\"cpu\":8,\"mem\":16,\"numa_mode\":\"double\",\"duration\":9,\"price_rate\":0.8}\n",
                "{\"t\":5,\"vm_id\":0,\"op\":\"release\",\"cpu\":4,\"mem\":8,\"numa_mode\":\"single\",\"duration\":5,\"price_rate\":0.4}\n",
            ),
        )
        .unwrap();
        let trace = load_trace(&path).unwrap();
        assert_eq!(trace.events.len(), 3);
        assert_eq!(trace.events[1].request.numa_mode, NumaMode::Double);
        assert_eq!(trace.events[2].request.op, ReqOp::Release);
        assert!(trace.meta.is_none());
    }

    #[test]
    fn empty_file_is_empty_trace() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let trace = load_trace(&path).unwrap();
        assert!(trace.events.is_empty());
    }

    #[test]
    fn release_before_create_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"t\":0,\"vm_id\":3,\"op\":\"release\",\"cpu\":4,\"mem\":8,\"numa_mode\":\"single\",\"duration\":5,\"price_rate\":0.1}\n",
        )
        .unwrap();
        match load_trace(&path) {
            Err(TraceError::Ordering { line: 1, .. }) => {}
            other => panic!("expected ordering error, got {other:?}"),
        }
    }

    #[test]
    fn unsorted_times_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"t\":5,\"vm_id\":0,\"op\":\"create\",\"cpu\":4,\"mem\":8,\"numa_mode\":\"single\",\"duration\":5,\"price_rate\":0.1}\n",
                "{\"t\":2,\"vm_id\":1,\"op\":\"create\",\"cpu\":4,\"mem\":8,\"numa_mode\":\"single\",\"duration\":5,\"price_rate\":0.1}\n",
            ),
        )
        .unwrap();
        assert!(matches!(
            load_trace(&path),
            Err(TraceError::Ordering { line: 2, .. })
        ));
    }

    #[test]
    fn garbage_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "not json\n").unwrap();
        assert!(matches!(
            load_trace(&path),
            Err(TraceError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn type_frequencies_track_weights() {
        // Pearson chi-square against the catalog distribution plus a 2-point
        // absolute tolerance per type. df = 4, critical value at p=0.001.
        let cat = Catalog::default_catalog();
        let n = 100_000usize;
        let trace = generate_trace(&cat, n, 1234);
        let counts = create_shape_counts(&trace);
        let total_weight: f64 = cat.types.iter().map(|t| t.weight).sum();
        let mut chi2 = 0.0;
        for ty in &cat.types {
            let observed = *counts
                .get(&(ty.cpu, ty.mem, ty.numa_mode))
                .unwrap_or(&0) as f64;
            let expected = n as f64 * ty.weight / total_weight;
            chi2 += (observed - expected).powi(2) / expected;
            let freq_gap = (observed / n as f64 - ty.weight / total_weight).abs();
            assert!(
                freq_gap < 0.02,
                "type {} frequency off by {freq_gap:.4}",
                ty.name
            );
        }
        assert!(chi2 < 18.47, "chi-square {chi2:.2} exceeds df=4 critical value");
    }

    #[test]
    fn warm_start_ratio_zero_consumes_nothing() {
        let trace = generate_trace(&Catalog::default_catalog(), 50, 3);
        let state = ClusterState::homogeneous(2, NumaResources::new(16, 32));
        let ws = warm_start(state.clone(), &trace, 0.0).unwrap();
        assert_eq!(ws.state, state);
        assert_eq!(ws.remaining.len(), trace.events.len());
        assert!(ws.skipped.is_empty());
    }

    #[test]
    fn warm_start_reaches_target_utilization() {
        // 2 PMs, 8 cores per node, 32 total: ratio 0.5 needs >= 16 allocated.
        let trace = generate_trace(&Catalog::default_catalog(), 200, 11);
        let state = ClusterState::homogeneous(2, NumaResources::new(8, 16));
        let ws = warm_start(state, &trace, 0.5).unwrap();
        assert!(ws.state.allocated_cpu() >= 16);
        // Stop happened at the first crossing: undoing the last placement
        // would land below the target again is hard to reconstruct here, but
        // the reached level must not wildly overshoot one VM's worth.
        assert!(ws.state.cpu_utilization() >= 0.5);
    }

    #[test]
    fn warm_start_unreachable_on_short_trace() {
        let trace = generate_trace(&Catalog::default_catalog(), 3, 7);
        let state = ClusterState::homogeneous(50, NumaResources::new(64, 128));
        assert!(matches!(
            warm_start(state, &trace, 0.9),
            Err(TraceError::WarmStartUnreachable { .. })
        ));
    }

    #[test]
    fn warm_start_skips_infeasible_creates() {
        // Tiny cluster: plenty of creates will not fit; they must be skipped
        // and recorded rather than aborting the prefill.
        let trace = generate_trace(&Catalog::default_catalog(), 400, 21);
        let state = ClusterState::homogeneous(1, NumaResources::new(4, 8));
        let ws = warm_start(state, &trace, 0.7).unwrap();
        assert!(ws.state.cpu_utilization() >= 0.7);
        for vm in &ws.skipped {
            assert!(!ws.state.live_placements().contains_key(vm));
        }
    }

    #[test]
    fn scenario_validation() {
        let mut cfg = ScenarioConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.warm_start_ratio = 1.0;
        assert!(cfg.validate().is_err());
        cfg.warm_start_ratio = 0.5;
        cfg.mode = ScenarioMode::Expansion;
        cfg.n_pms_initial = 200;
        assert!(cfg.validate().is_err());
    }
}
