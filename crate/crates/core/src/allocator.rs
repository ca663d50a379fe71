//! Placement selection between a spreading and a packing candidate under
//! per-node GPU, CPU and memory budgets, with look-ahead over the next
//! ranked jobs.
//!
//! The 0-1 program: a selector `x` picks way1 (spread) or way2 (pack); the
//! occupancy matrix `CJO[node][slot]` must cover the chosen way's GPUs and
//! respect every node budget; the objective maximizes occupied slots.
//! Per-node constraints are independent once `x` is fixed, so the optimum
//! is evaluated exactly per node for both values of `x`.

use serde::{Deserialize, Serialize};

use crate::cluster::{split_demand, ClusterState, PlacementPlan};
use crate::features::cff_of;
use crate::trace::JobRecord;

pub const DEFAULT_LOOKAHEAD: usize = 16;
const ORACLE_MAX_NODES: usize = 8;
const ORACLE_MAX_SLOTS: u32 = 8;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AllocError {
    #[error("way holds {got} GPUs but the job requests {want}")]
    GpuMismatch { want: u32, got: u32 },
    #[error("way references node index {0} outside the snapshot")]
    UnknownNode(usize),
    #[error("problem has no candidate way")]
    NoWays,
    #[error("instance too large for exhaustive search: {0}")]
    TooLarge(String),
}

/// Free resources of one node plus its slot count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeBudget {
    pub slots: u32,
    pub free_gpus: u32,
    pub free_cpus: u32,
    pub free_mem_mb: u64,
}

/// What one way takes from one node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeDemand {
    pub node: usize,
    pub gpus: u32,
    pub cpus: u32,
    pub mem_mb: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Way {
    pub plan: Option<PlacementPlan>,
    pub demand: Vec<NodeDemand>,
}

impl Way {
    pub fn gpus(&self) -> u32 {
        self.demand.iter().map(|d| d.gpus).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WayChoice {
    Way1,
    Way2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocProblem {
    pub job_id: String,
    pub requested_gpus: u32,
    pub nodes: Vec<NodeBudget>,
    pub cpu_per_gpu: u32,
    pub mem_per_gpu_mb: u64,
    /// Spreading candidate.
    pub way1: Option<Way>,
    /// Packing candidate.
    pub way2: Option<Way>,
    /// Candidate ways of the next ranked jobs, used to break ties.
    pub lookahead: Vec<Vec<Way>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocSolution {
    pub selected_way: Option<WayChoice>,
    /// Per-node slot occupancy; `true` marks an occupied slot.
    pub occupancy: Vec<Vec<bool>>,
    pub objective: u32,
    pub feasible: bool,
}

impl AllocSolution {
    fn infeasible(p: &AllocProblem) -> Self {
        AllocSolution {
            selected_way: None,
            occupancy: p.nodes.iter().map(|n| vec![false; n.slots as usize]).collect(),
            objective: 0,
            feasible: false,
        }
    }
}

impl AllocProblem {
    fn validate(&self) -> Result<(), AllocError> {
        if self.way1.is_none() && self.way2.is_none() {
            return Err(AllocError::NoWays);
        }
        for w in self.way1.iter().chain(&self.way2) {
            if w.gpus() != self.requested_gpus {
                return Err(AllocError::GpuMismatch {
                    want: self.requested_gpus,
                    got: w.gpus(),
                });
            }
            if let Some(d) = w.demand.iter().find(|d| d.node >= self.nodes.len()) {
                return Err(AllocError::UnknownNode(d.node));
            }
        }
        Ok(())
    }

    fn way(&self, c: WayChoice) -> Option<&Way> {
        match c {
            WayChoice::Way1 => self.way1.as_ref(),
            WayChoice::Way2 => self.way2.as_ref(),
        }
    }

    /// GPUs, CPUs and memory the way takes from node `n`.
    fn taken(way: &Way, n: usize) -> (u32, u32, u64) {
        way.demand
            .iter()
            .filter(|d| d.node == n)
            .fold((0, 0, 0), |acc, d| (acc.0 + d.gpus, acc.1 + d.cpus, acc.2 + d.mem_mb))
    }

    /// Whether an occupancy count `o` on node `n` is admissible under `way`:
    /// it covers the way's GPUs there, fits the free GPUs, and the way's
    /// share plus `cpu/mem per GPU` for every extra slot fits the budgets.
    fn admissible(&self, way: &Way, n: usize, o: u32) -> bool {
        let b = &self.nodes[n];
        let (g, c, m) = Self::taken(way, n);
        if o < g || o > b.free_gpus || c > b.free_cpus || m > b.free_mem_mb {
            return false;
        }
        let extra = (o - g) as u64;
        c as u64 + extra * self.cpu_per_gpu as u64 <= b.free_cpus as u64
            && m + extra * self.mem_per_gpu_mb <= b.free_mem_mb
    }

    /// Best occupancy count per node under `way`, or `None` if the way
    /// cannot be placed.
    fn best_fill(&self, way: &Way) -> Option<Vec<u32>> {
        let mut out = Vec::with_capacity(self.nodes.len());
        for n in 0..self.nodes.len() {
            let b = &self.nodes[n];
            let (g, c, m) = Self::taken(way, n);
            if !self.admissible(way, n, g) {
                return None;
            }
            let cpu_room = (b.free_cpus - c) as u64 / self.cpu_per_gpu.max(1) as u64;
            let mem_room = if self.mem_per_gpu_mb == 0 {
                u64::MAX
            } else {
                (b.free_mem_mb - m) / self.mem_per_gpu_mb
            };
            let extra = ((b.free_gpus - g) as u64).min(cpu_room).min(mem_room) as u32;
            out.push(g + extra);
        }
        Some(out)
    }

    /// Free resources after applying `way`.
    fn after(&self, way: &Way) -> Vec<NodeBudget> {
        let mut nodes = self.nodes.clone();
        for d in &way.demand {
            let b = &mut nodes[d.node];
            b.free_gpus -= d.gpus;
            b.free_cpus -= d.cpus;
            b.free_mem_mb -= d.mem_mb;
        }
        nodes
    }
}

fn fits(nodes: &[NodeBudget], way: &Way) -> bool {
    way.demand.iter().all(|d| {
        nodes.get(d.node).is_some_and(|b| {
            b.free_gpus >= d.gpus && b.free_cpus >= d.cpus && b.free_mem_mb >= d.mem_mb
        })
    })
}

/// Tie-break key, larger is better: objective, then look-ahead jobs still
/// placeable, then lower post-placement fragmentation, then packing.
fn preference(p: &AllocProblem, choice: WayChoice, objective: u32) -> (u32, usize, i64, u8) {
    let way = p.way(choice).expect("scored ways exist");
    let after = p.after(way);
    let placeable = p.lookahead.iter().filter(|ways| ways.iter().any(|w| fits(&after, w))).count();
    let free: Vec<u32> = after.iter().map(|b| b.free_gpus).collect();
    // fixed-point so the key stays totally ordered
    let frag = (cff_of(&free) * 1e12).round() as i64;
    let pack = u8::from(choice == WayChoice::Way2);
    (objective, placeable, -frag, pack)
}

fn occupancy_matrix(p: &AllocProblem, counts: &[u32]) -> Vec<Vec<bool>> {
    p.nodes
        .iter()
        .zip(counts)
        .map(|(b, &c)| (0..b.slots).map(|s| s < c).collect())
        .collect()
}

fn pick(p: &AllocProblem, scored: Vec<(WayChoice, u32, Vec<Vec<bool>>)>) -> AllocSolution {
    scored
        .into_iter()
        .max_by_key(|(c, obj, _)| preference(p, *c, *obj))
        .map(|(c, objective, occupancy)| AllocSolution {
            selected_way: Some(c),
            occupancy,
            objective,
            feasible: true,
        })
        .unwrap_or_else(|| AllocSolution::infeasible(p))
}

/// Exact optimum of the placement program.
pub fn solve(p: &AllocProblem) -> Result<AllocSolution, AllocError> {
    p.validate()?;
    let mut scored = Vec::new();
    for c in [WayChoice::Way1, WayChoice::Way2] {
        let Some(way) = p.way(c) else { continue };
        if let Some(counts) = p.best_fill(way) {
            let objective = counts.iter().sum();
            scored.push((c, objective, occupancy_matrix(p, &counts)));
        }
    }
    Ok(pick(p, scored))
}

/// Exhaustive search over the selector and every boolean occupancy row of
/// every node. Limited to 8 nodes with at most 8 slots each.
pub fn brute_force_oracle(p: &AllocProblem) -> Result<AllocSolution, AllocError> {
    p.validate()?;
    if p.nodes.len() > ORACLE_MAX_NODES || p.nodes.iter().any(|b| b.slots > ORACLE_MAX_SLOTS) {
        return Err(AllocError::TooLarge(format!("{} nodes", p.nodes.len())));
    }
    let mut scored = Vec::new();
    for c in [WayChoice::Way1, WayChoice::Way2] {
        let Some(way) = p.way(c) else { continue };
        let mut rows = Vec::with_capacity(p.nodes.len());
        let mut ok = true;
        for (n, b) in p.nodes.iter().enumerate() {
            // the node's rows are independent of every other node's
            let mut best: Option<Vec<bool>> = None;
            for bits in 0u32..(1 << b.slots) {
                let o = bits.count_ones();
                if !p.admissible(way, n, o) {
                    continue;
                }
                if best.as_ref().is_none_or(|r| r.iter().filter(|&&x| x).count() < o as usize) {
                    best = Some((0..b.slots).map(|s| bits & (1 << s) != 0).collect());
                }
            }
            match best {
                Some(r) => rows.push(r),
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            let objective = rows.iter().flatten().filter(|&&x| x).count() as u32;
            scored.push((c, objective, rows));
        }
    }
    Ok(pick(p, scored))
}

fn budgets(state: &ClusterState) -> Vec<NodeBudget> {
    state
        .spec()
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| NodeBudget {
            slots: n.gpus,
            free_gpus: state.free_gpus()[i],
            free_cpus: state.free_cpus()[i],
            free_mem_mb: state.free_mem_mb()[i],
        })
        .collect()
}

/// Resolve a plan into per-node demands against `state`'s node indexing.
pub fn way_of(state: &ClusterState, job: &JobRecord, plan: &PlacementPlan) -> Way {
    let gpus: Vec<u32> = plan.assignments.iter().map(|a| a.gpu_count).collect();
    let split = split_demand(state.spec(), job, &gpus);
    let demand = plan
        .assignments
        .iter()
        .zip(split)
        .map(|(a, (cpus, mem_mb))| NodeDemand {
            node: state.node_index(&a.node_id).expect("plan from this cluster"),
            gpus: a.gpu_count,
            cpus,
            mem_mb,
        })
        .collect();
    Way {
        plan: Some(plan.clone()),
        demand,
    }
}

/// The two candidate ways for `job`: the first pack candidate as way2 and
/// the widest spread as way1. With no pack, way2 is the narrowest spread.
pub fn candidate_ways(state: &ClusterState, job: &JobRecord) -> (Option<Way>, Option<Way>, usize) {
    let cands = state.candidate_placements(job);
    let n = cands.len();
    if n == 0 {
        return (None, None, 0);
    }
    let pack = cands.iter().position(|c| c.node_count() == 1);
    let way2_idx = pack.unwrap_or(0);
    let widest = (0..n).rev().find(|&i| i != way2_idx);
    let way2 = Some(way_of(state, job, &cands[way2_idx]));
    let way1 = widest.map(|i| way_of(state, job, &cands[i]));
    (way1, way2, n)
}

/// Build the problem for `job` with the given look-ahead jobs.
pub fn build_problem(state: &ClusterState, job: &JobRecord, lookahead: &[&JobRecord]) -> Option<AllocProblem> {
    let (way1, way2, _) = candidate_ways(state, job);
    if way1.is_none() && way2.is_none() {
        return None;
    }
    let look = lookahead
        .iter()
        .map(|j| {
            state
                .candidate_placements(j)
                .iter()
                .map(|c| way_of(state, j, c))
                .collect()
        })
        .collect();
    Some(AllocProblem {
        job_id: job.job_id.clone(),
        requested_gpus: job.requested_gpus,
        nodes: budgets(state),
        cpu_per_gpu: state.spec().cpu_per_gpu,
        mem_per_gpu_mb: state.spec().mem_per_gpu_mb(),
        way1,
        way2,
        lookahead: look,
    })
}

/// One job's outcome in [`lookahead_allocate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookaheadPick {
    pub job_id: String,
    /// `None` when the job has no feasible way (left queued).
    pub plan: Option<PlacementPlan>,
    pub solution: Option<AllocSolution>,
    /// Whether the solver ran (at least two candidates existed).
    pub solved: bool,
}

/// Choose a plan for `job` on the current state, consulting `lookahead`
/// jobs for tie-breaks. The solver only runs when the job has at least two
/// candidate placements.
pub fn choose_plan(
    state: &ClusterState,
    job: &JobRecord,
    lookahead: &[&JobRecord],
) -> Option<(PlacementPlan, Option<AllocSolution>)> {
    let cands = state.candidate_placements(job);
    match cands.len() {
        0 => None,
        1 => cands.into_iter().next().map(|c| (c, None)),
        _ => {
            let p = build_problem(state, job, lookahead)?;
            let sol = solve(&p).ok()?;
            let way = p.way(sol.selected_way?)?;
            way.plan.clone().map(|plan| (plan, Some(sol)))
        }
    }
}

/// Process ranked jobs in order, reserving each winner on a working copy
/// so later jobs see earlier reservations. Each job's tie-break looks at
/// the jobs ranked after it, up to `k - 1` of them.
pub fn lookahead_allocate(ranked: &[&JobRecord], state: &ClusterState, k: usize) -> Vec<LookaheadPick> {
    let k = k.max(1);
    let mut work = state.clone();
    let top = &ranked[..ranked.len().min(k)];
    let mut out = Vec::with_capacity(top.len());
    for (i, &job) in top.iter().enumerate() {
        let rest = &top[i + 1..];
        match choose_plan(&work, job, rest) {
            Some((plan, sol)) => {
                work.allocate(job, &plan).expect("chosen plans are feasible");
                out.push(LookaheadPick {
                    job_id: job.job_id.clone(),
                    solved: sol.is_some(),
                    plan: Some(plan),
                    solution: sol,
                });
            }
            None => out.push(LookaheadPick {
                job_id: job.job_id.clone(),
                plan: None,
                solution: None,
                solved: false,
            }),
        }
    }
    out
}

/// One JSON line for the audit dump.
pub fn audit_line(p: &AllocProblem, s: &AllocSolution) -> serde_json::Result<String> {
    #[derive(Serialize)]
    struct Line<'a> {
        problem: &'a AllocProblem,
        solution: &'a AllocSolution,
    }
    serde_json::to_string(&Line { problem: p, solution: s })
}
