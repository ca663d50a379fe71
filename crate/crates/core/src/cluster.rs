//! Heterogeneous cluster model: node inventory, allocation bookkeeping and
//! the canonical pack/spread candidate family.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{GpuType, JobRecord};

/// Memory is tracked in whole megabytes so that allocate/release is exact.
pub fn gb_to_mb(gb: f64) -> u64 {
    (gb * 1024.0).round().max(0.0) as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub node_id: String,
    pub gpu_type: GpuType,
    pub gpus: u32,
    pub cpus: u32,
    pub mem_gb: f64,
    #[serde(default)]
    pub vc_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub nodes: Vec<NodeSpec>,
    pub cpu_per_gpu: u32,
    pub mem_per_gpu: f64,
    /// Jobs with a non-empty `vc_id` only run on nodes of that virtual cluster.
    #[serde(default = "default_true")]
    pub confine_to_vc: bool,
}

fn default_true() -> bool {
    true
}

/// `count` identical nodes, the compact form used in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeGroup {
    pub count: u32,
    pub gpu_type: String,
    pub gpus: u32,
    pub cpus: u32,
    pub mem_gb: f64,
    #[serde(default)]
    pub vc_id: String,
    /// Node ids become `<prefix><index>`; defaults to `<vc or type>-n`.
    #[serde(default)]
    pub prefix: Option<String>,
}

/// On-disk cluster description: ratios plus a list of node groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub cpu_per_gpu: u32,
    pub mem_per_gpu: f64,
    #[serde(default = "default_true")]
    pub confine_to_vc: bool,
    #[serde(rename = "group")]
    pub groups: Vec<NodeGroup>,
}

impl ClusterConfig {
    pub fn into_spec(self) -> Result<ClusterSpec, ClusterError> {
        let mut nodes = Vec::new();
        for (g, group) in self.groups.iter().enumerate() {
            let prefix = group.prefix.clone().unwrap_or_else(|| {
                let base = if group.vc_id.is_empty() { &group.gpu_type } else { &group.vc_id };
                format!("{}-g{}-n", base.to_ascii_lowercase(), g)
            });
            for i in 0..group.count {
                nodes.push(NodeSpec {
                    node_id: format!("{prefix}{i:02}"),
                    gpu_type: GpuType::new(group.gpu_type.clone()),
                    gpus: group.gpus,
                    cpus: group.cpus,
                    mem_gb: group.mem_gb,
                    vc_id: group.vc_id.clone(),
                });
            }
        }
        let spec = ClusterSpec {
            nodes,
            cpu_per_gpu: self.cpu_per_gpu,
            mem_per_gpu: self.mem_per_gpu,
            confine_to_vc: self.confine_to_vc,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl ClusterSpec {
    pub fn from_toml(text: &str) -> Result<Self, ClusterError> {
        let cfg: ClusterConfig = toml::from_str(text).map_err(|e| ClusterError::Config(e.to_string()))?;
        cfg.into_spec()
    }

    pub fn validate(&self) -> Result<(), ClusterError> {
        if self.nodes.is_empty() {
            return Err(ClusterError::Config("cluster has no nodes".into()));
        }
        if self.cpu_per_gpu == 0 || !(self.mem_per_gpu.is_finite() && self.mem_per_gpu > 0.0) {
            return Err(ClusterError::Config("cpu_per_gpu and mem_per_gpu must be positive".into()));
        }
        let mut ids = HashSet::new();
        for n in &self.nodes {
            if !ids.insert(n.node_id.as_str()) {
                return Err(ClusterError::DuplicateNode(n.node_id.clone()));
            }
            if n.gpus == 0 || n.cpus == 0 || !(n.mem_gb.is_finite() && n.mem_gb > 0.0) {
                return Err(ClusterError::Config(format!("node {} has a zero resource", n.node_id)));
            }
        }
        Ok(())
    }

    pub fn total_gpus(&self) -> u32 {
        self.nodes.iter().map(|n| n.gpus).sum()
    }

    pub fn mem_per_gpu_mb(&self) -> u64 {
        gb_to_mb(self.mem_per_gpu)
    }

    /// Whether `node` may host any part of `job` (type and VC matching).
    pub fn eligible(&self, job: &JobRecord, node: &NodeSpec) -> bool {
        job.gpu_type.accepts(&node.gpu_type)
            && (!self.confine_to_vc || job.vc_id.is_empty() || job.vc_id == node.vc_id)
    }

    /// Largest GPU count the job could ever get (all eligible nodes idle).
    pub fn eligible_capacity(&self, job: &JobRecord) -> u32 {
        self.nodes.iter().filter(|n| self.eligible(job, n)).map(|n| n.gpus).sum()
    }

    /// Helios-style layout: VC1..VC5 with 16, 12, 10, 8 and 8 nodes of
    /// 8 GPUs each.
    pub fn helios(gpu_type: &str) -> Self {
        let groups = [16, 12, 10, 8, 8]
            .iter()
            .enumerate()
            .map(|(i, &count)| NodeGroup {
                count,
                gpu_type: gpu_type.to_string(),
                gpus: 8,
                cpus: 64,
                mem_gb: 512.0,
                vc_id: format!("VC{}", i + 1),
                prefix: Some(format!("vc{}-n", i + 1)),
            })
            .collect();
        ClusterConfig {
            cpu_per_gpu: 8,
            mem_per_gpu: 64.0,
            confine_to_vc: true,
            groups,
        }
        .into_spec()
        .expect("static layout is valid")
    }
}

/// How a plan distributes GPUs over nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanStyle {
    Pack,
    Spread,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Assignment {
    pub node_id: String,
    pub gpu_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub assignments: Vec<Assignment>,
    pub style: PlanStyle,
}

impl PlacementPlan {
    pub fn new(assignments: Vec<(String, u32)>, style: PlanStyle) -> Self {
        PlacementPlan {
            assignments: assignments
                .into_iter()
                .map(|(node_id, gpu_count)| Assignment { node_id, gpu_count })
                .collect(),
            style,
        }
    }

    pub fn total_gpus(&self) -> u32 {
        self.assignments.iter().map(|a| a.gpu_count).sum()
    }

    pub fn node_count(&self) -> usize {
        self.assignments.len()
    }
}

impl fmt::Display for PlacementPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .assignments
            .iter()
            .map(|a| format!("{}:{}", a.node_id, a.gpu_count))
            .collect();
        write!(f, "{:?}[{}]", self.style, parts.join(","))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("duplicate node id '{0}'")]
    DuplicateNode(String),
    #[error("cluster config: {0}")]
    Config(String),
    #[error("unknown node '{0}'")]
    UnknownNode(String),
    #[error("plan is malformed: {0}")]
    MalformedPlan(String),
    #[error("node {node} cannot host job {job_id}: {reason}")]
    Ineligible { job_id: String, node: String, reason: String },
    #[error("infeasible plan for job {job_id}: node {node} lacks {resource}")]
    Infeasible { job_id: String, node: String, resource: &'static str },
    #[error("job {0} is already allocated")]
    AlreadyAllocated(String),
    #[error("job {0} has no allocation")]
    UnknownJob(String),
}

/// Resources one plan entry consumes on its node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryUse {
    pub node: usize,
    pub gpus: u32,
    pub cpus: u32,
    pub mem_mb: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub plan: PlacementPlan,
    pub uses: Vec<EntryUse>,
}

/// Split a job's CPU/memory demand over entries holding `gpus[i]` GPUs.
///
/// Without explicit demands the proportional model applies
/// (`gpus × cpu_per_gpu`, `gpus × mem_per_gpu`). Explicit totals are split
/// proportionally to GPU share; integer remainders go to the first entries.
pub fn split_demand(spec: &ClusterSpec, job: &JobRecord, gpus: &[u32]) -> Vec<(u32, u64)> {
    let total: u32 = gpus.iter().sum();
    let cpus = match job.requested_cpus {
        Some(c) => split_integer(c as u64, gpus, total),
        None => gpus.iter().map(|&g| (g * spec.cpu_per_gpu) as u64).collect(),
    };
    let mem = match job.requested_mem_gb {
        Some(m) => split_integer(gb_to_mb(m), gpus, total),
        None => gpus.iter().map(|&g| g as u64 * spec.mem_per_gpu_mb()).collect(),
    };
    cpus.into_iter().zip(mem).map(|(c, m)| (c as u32, m)).collect()
}

fn split_integer(amount: u64, gpus: &[u32], total: u32) -> Vec<u64> {
    if total == 0 {
        return vec![0; gpus.len()];
    }
    let mut shares: Vec<u64> = gpus.iter().map(|&g| amount * g as u64 / total as u64).collect();
    let mut rest = amount - shares.iter().sum::<u64>();
    for s in shares.iter_mut() {
        if rest == 0 {
            break;
        }
        *s += 1;
        rest -= 1;
    }
    shares
}

/// Mutable allocation state of one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    spec: Arc<ClusterSpec>,
    index: Arc<HashMap<String, usize>>,
    free_gpus: Vec<u32>,
    free_cpus: Vec<u32>,
    free_mem_mb: Vec<u64>,
    allocations: BTreeMap<String, Allocation>,
}

/// An all-idle cluster for `spec`.
pub fn build_cluster(spec: ClusterSpec) -> Result<ClusterState, ClusterError> {
    spec.validate()?;
    let index = spec
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.node_id.clone(), i))
        .collect();
    Ok(ClusterState {
        free_gpus: spec.nodes.iter().map(|n| n.gpus).collect(),
        free_cpus: spec.nodes.iter().map(|n| n.cpus).collect(),
        free_mem_mb: spec.nodes.iter().map(|n| gb_to_mb(n.mem_gb)).collect(),
        index: Arc::new(index),
        spec: Arc::new(spec),
        allocations: BTreeMap::new(),
    })
}

impl ClusterState {
    pub fn spec(&self) -> &ClusterSpec {
        &self.spec
    }

    pub fn node_index(&self, node_id: &str) -> Option<usize> {
        self.index.get(node_id).copied()
    }

    pub fn free_gpus(&self) -> &[u32] {
        &self.free_gpus
    }

    pub fn free_cpus(&self) -> &[u32] {
        &self.free_cpus
    }

    pub fn free_mem_mb(&self) -> &[u64] {
        &self.free_mem_mb
    }

    pub fn free_gpus_of(&self, node_id: &str) -> Option<u32> {
        self.node_index(node_id).map(|i| self.free_gpus[i])
    }

    pub fn allocations(&self) -> &BTreeMap<String, Allocation> {
        &self.allocations
    }

    pub fn total_free_gpus(&self) -> u32 {
        self.free_gpus.iter().sum()
    }

    pub fn allocated_gpus(&self) -> u32 {
        self.spec.total_gpus() - self.total_free_gpus()
    }

    /// Nodes with every GPU idle.
    pub fn free_nodes(&self) -> usize {
        self.spec
            .nodes
            .iter()
            .zip(&self.free_gpus)
            .filter(|(n, &f)| f == n.gpus)
            .count()
    }

    /// Free GPUs summed per GPU type; types without nodes are absent.
    pub fn free_gpus_by_type(&self) -> BTreeMap<GpuType, u32> {
        let mut out = BTreeMap::new();
        for (node, &free) in self.spec.nodes.iter().zip(&self.free_gpus) {
            *out.entry(node.gpu_type.clone()).or_insert(0) += free;
        }
        out
    }

    /// Free GPUs on nodes the job is allowed to use.
    pub fn eligible_free_gpus(&self, job: &JobRecord) -> u32 {
        self.spec
            .nodes
            .iter()
            .zip(&self.free_gpus)
            .filter(|(n, _)| self.spec.eligible(job, n))
            .map(|(_, &f)| f)
            .sum()
    }

    fn resolve(&self, job: &JobRecord, plan: &PlacementPlan) -> Result<Vec<EntryUse>, ClusterError> {
        if plan.assignments.is_empty() {
            return Err(ClusterError::MalformedPlan("no assignments".into()));
        }
        let mut seen = HashSet::new();
        let mut nodes = Vec::with_capacity(plan.assignments.len());
        for a in &plan.assignments {
            let idx = self
                .node_index(&a.node_id)
                .ok_or_else(|| ClusterError::UnknownNode(a.node_id.clone()))?;
            if !seen.insert(idx) {
                return Err(ClusterError::MalformedPlan(format!("node {} repeated", a.node_id)));
            }
            if a.gpu_count == 0 {
                return Err(ClusterError::MalformedPlan(format!("zero GPUs on {}", a.node_id)));
            }
            let node = &self.spec.nodes[idx];
            if !self.spec.eligible(job, node) {
                return Err(ClusterError::Ineligible {
                    job_id: job.job_id.clone(),
                    node: a.node_id.clone(),
                    reason: format!("node is {}/{}, job wants {}/{}", node.gpu_type, node.vc_id, job.gpu_type, job.vc_id),
                });
            }
            nodes.push(idx);
        }
        if plan.total_gpus() != job.requested_gpus {
            return Err(ClusterError::MalformedPlan(format!(
                "plan holds {} GPUs, job {} requests {}",
                plan.total_gpus(),
                job.job_id,
                job.requested_gpus
            )));
        }
        let gpus: Vec<u32> = plan.assignments.iter().map(|a| a.gpu_count).collect();
        let demand = split_demand(&self.spec, job, &gpus);
        Ok(nodes
            .into_iter()
            .zip(gpus)
            .zip(demand)
            .map(|((node, gpus), (cpus, mem_mb))| EntryUse { node, gpus, cpus, mem_mb })
            .collect())
    }

    /// Check a plan without applying it.
    pub fn check(&self, job: &JobRecord, plan: &PlacementPlan) -> Result<Vec<EntryUse>, ClusterError> {
        let uses = self.resolve(job, plan)?;
        for u in &uses {
            let lacks = if u.gpus > self.free_gpus[u.node] {
                Some("gpus")
            } else if u.cpus > self.free_cpus[u.node] {
                Some("cpus")
            } else if u.mem_mb > self.free_mem_mb[u.node] {
                Some("memory")
            } else {
                None
            };
            if let Some(resource) = lacks {
                return Err(ClusterError::Infeasible {
                    job_id: job.job_id.clone(),
                    node: self.spec.nodes[u.node].node_id.clone(),
                    resource,
                });
            }
        }
        Ok(uses)
    }

    /// Apply `plan` for `job`. On error the state is unchanged.
    pub fn allocate(&mut self, job: &JobRecord, plan: &PlacementPlan) -> Result<(), ClusterError> {
        if self.allocations.contains_key(&job.job_id) {
            return Err(ClusterError::AlreadyAllocated(job.job_id.clone()));
        }
        let uses = self.check(job, plan)?;
        for u in &uses {
            self.free_gpus[u.node] -= u.gpus;
            self.free_cpus[u.node] -= u.cpus;
            self.free_mem_mb[u.node] -= u.mem_mb;
        }
        self.allocations.insert(
            job.job_id.clone(),
            Allocation {
                plan: plan.clone(),
                uses,
            },
        );
        Ok(())
    }

    /// Return a job's resources; yields the plan it held.
    pub fn release(&mut self, job_id: &str) -> Result<PlacementPlan, ClusterError> {
        let alloc = self
            .allocations
            .remove(job_id)
            .ok_or_else(|| ClusterError::UnknownJob(job_id.to_string()))?;
        for u in &alloc.uses {
            self.free_gpus[u.node] += u.gpus;
            self.free_cpus[u.node] += u.cpus;
            self.free_mem_mb[u.node] += u.mem_mb;
        }
        Ok(alloc.plan)
    }

    /// Free + allocated == capacity on every node, for every resource.
    pub fn check_conservation(&self) -> Result<(), String> {
        let n = self.spec.nodes.len();
        let mut gpus = vec![0u32; n];
        let mut cpus = vec![0u32; n];
        let mut mem = vec![0u64; n];
        for alloc in self.allocations.values() {
            for u in &alloc.uses {
                gpus[u.node] += u.gpus;
                cpus[u.node] += u.cpus;
                mem[u.node] += u.mem_mb;
            }
        }
        for (i, node) in self.spec.nodes.iter().enumerate() {
            if gpus[i] + self.free_gpus[i] != node.gpus
                || cpus[i] + self.free_cpus[i] != node.cpus
                || mem[i] + self.free_mem_mb[i] != gb_to_mb(node.mem_gb)
            {
                return Err(format!("conservation broken on node {}", node.node_id));
            }
        }
        Ok(())
    }

    /// Eligible node indices in placement order: most free GPUs first,
    /// then by node id.
    fn ordered_nodes(&self, job: &JobRecord) -> Vec<usize> {
        let mut nodes: Vec<usize> = (0..self.spec.nodes.len())
            .filter(|&i| self.free_gpus[i] > 0 && self.spec.eligible(job, &self.spec.nodes[i]))
            .collect();
        nodes.sort_by(|&a, &b| {
            self.free_gpus[b]
                .cmp(&self.free_gpus[a])
                .then_with(|| self.spec.nodes[a].node_id.cmp(&self.spec.nodes[b].node_id))
        });
        nodes
    }

    fn fits(&self, node: usize, gpus: u32, cpus: u32, mem_mb: u64) -> bool {
        self.free_gpus[node] >= gpus && self.free_cpus[node] >= cpus && self.free_mem_mb[node] >= mem_mb
    }

    /// Feasible members of the canonical family: one pack per GPU type class,
    /// then even spreads over `m` nodes for each divisor `m > 1` of the
    /// request. Packs come first, spreads by increasing width.
    pub fn candidate_placements(&self, job: &JobRecord) -> Vec<PlacementPlan> {
        self.candidates_inner(job, false)
    }

    /// `true` iff [`candidate_placements`](Self::candidate_placements) is non-empty.
    pub fn can_schedule_now(&self, job: &JobRecord) -> bool {
        !self.candidates_inner(job, true).is_empty()
    }

    /// The first canonical candidate (pack before spread, fewest nodes).
    pub fn first_fit_plan(&self, job: &JobRecord) -> Option<PlacementPlan> {
        self.candidates_inner(job, true).into_iter().next()
    }

    fn candidates_inner(&self, job: &JobRecord, first_only: bool) -> Vec<PlacementPlan> {
        let want = job.requested_gpus;
        let mut out = Vec::new();
        if want == 0 || self.eligible_free_gpus(job) < want {
            return out;
        }
        let ordered = self.ordered_nodes(job);
        let mut classes: Vec<&GpuType> = ordered.iter().map(|&i| &self.spec.nodes[i].gpu_type).collect();
        classes.sort();
        classes.dedup();

        let pack_demand = split_demand(&self.spec, job, &[want])[0];
        for class in &classes {
            let pick = ordered
                .iter()
                .copied()
                .filter(|&i| &self.spec.nodes[i].gpu_type == *class)
                .find(|&i| self.fits(i, want, pack_demand.0, pack_demand.1));
            if let Some(i) = pick {
                out.push(PlacementPlan::new(vec![(self.spec.nodes[i].node_id.clone(), want)], PlanStyle::Pack));
                if first_only {
                    return out;
                }
            }
        }
        for class in &classes {
            for m in (2..=want).filter(|m| want % m == 0) {
                let per = want / m;
                let shares = split_demand(&self.spec, job, &vec![per; m as usize]);
                // every chosen node must satisfy the largest share
                let cpu_need = shares.iter().map(|s| s.0).max().unwrap_or(0);
                let mem_need = shares.iter().map(|s| s.1).max().unwrap_or(0);
                let picked: Vec<usize> = ordered
                    .iter()
                    .copied()
                    .filter(|&i| &self.spec.nodes[i].gpu_type == *class)
                    .filter(|&i| self.fits(i, per, cpu_need, mem_need))
                    .take(m as usize)
                    .collect();
                if picked.len() == m as usize {
                    let entries = picked
                        .iter()
                        .map(|&i| (self.spec.nodes[i].node_id.clone(), per))
                        .collect();
                    out.push(PlacementPlan::new(entries, PlanStyle::Spread));
                    if first_only {
                        return out;
                    }
                }
            }
        }
        out
    }
}
