//! Per-job and aggregate scheduling metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default bound (seconds) for bounded slowdown.
pub const DEFAULT_TAU: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobOutcome {
    pub job_id: String,
    pub submit_time: u64,
    pub start_time: u64,
    pub end_time: u64,
    pub gpus_used: u32,
}

impl JobOutcome {
    pub fn runtime(&self) -> u64 {
        self.end_time - self.start_time
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Wait,
    Jct,
    Bsld,
    Utilization,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Wait, Metric::Jct, Metric::Bsld, Metric::Utilization];

    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::Utilization)
    }
}

impl FromStr for Metric {
    type Err = MetricError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "wait" | "wait_time" => Ok(Metric::Wait),
            "jct" => Ok(Metric::Jct),
            "bsld" | "slowdown" => Ok(Metric::Bsld),
            "util" | "utilization" => Ok(Metric::Utilization),
            other => Err(MetricError::Unknown(other.to_string())),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Metric::Wait => "wait",
            Metric::Jct => "jct",
            Metric::Bsld => "bsld",
            Metric::Utilization => "utilization",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("unknown metric '{0}'")]
    Unknown(String),
    #[error("no outcomes to aggregate")]
    Empty,
    #[error("empty utilization horizon")]
    EmptyHorizon,
    #[error("horizon starts before the timeline")]
    HorizonOutsideTimeline,
    #[error("utilization needs a timeline, not job outcomes")]
    NeedsTimeline,
}

pub fn wait_time(o: &JobOutcome) -> u64 {
    o.start_time - o.submit_time
}

pub fn jct(o: &JobOutcome) -> u64 {
    o.end_time - o.submit_time
}

/// `max((wait + run) / max(run, tau), 1)`.
pub fn bsld(o: &JobOutcome, tau: f64) -> f64 {
    bsld_raw(wait_time(o) as f64, o.runtime() as f64, tau)
}

pub fn bsld_raw(wait: f64, run: f64, tau: f64) -> f64 {
    ((wait + run) / run.max(tau)).max(1.0)
}

/// Event-wise record of allocated GPUs; each sample holds until the next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationTimeline {
    samples: Vec<(u64, u32)>,
    pub total_gpus: u32,
}

impl UtilizationTimeline {
    pub fn new(total_gpus: u32) -> Self {
        UtilizationTimeline {
            samples: Vec::new(),
            total_gpus,
        }
    }

    /// Record the allocated count from `t` on. A sample at the same
    /// timestamp as the last one replaces it.
    pub fn record(&mut self, t: u64, allocated: u32) {
        debug_assert!(allocated <= self.total_gpus);
        match self.samples.last_mut() {
            Some(last) if last.0 == t => last.1 = allocated,
            Some(last) => {
                debug_assert!(t > last.0, "timeline must move forward");
                self.samples.push((t, allocated));
            }
            None => self.samples.push((t, allocated)),
        }
    }

    pub fn samples(&self) -> &[(u64, u32)] {
        &self.samples
    }

    pub fn span(&self) -> Option<(u64, u64)> {
        Some((self.samples.first()?.0, self.samples.last()?.0))
    }
}

/// Time-weighted mean of allocated/total over `[start, end)`.
pub fn utilization(tl: &UtilizationTimeline, horizon: (u64, u64)) -> Result<f64, MetricError> {
    let (start, end) = horizon;
    if end <= start || tl.total_gpus == 0 {
        return Err(MetricError::EmptyHorizon);
    }
    let first = tl.samples.first().ok_or(MetricError::HorizonOutsideTimeline)?;
    if start < first.0 {
        return Err(MetricError::HorizonOutsideTimeline);
    }
    let mut area = 0.0;
    for (i, &(t, alloc)) in tl.samples.iter().enumerate() {
        let next = tl.samples.get(i + 1).map_or(u64::MAX, |s| s.0);
        let lo = t.max(start);
        let hi = next.min(end);
        if hi > lo {
            area += (hi - lo) as f64 * alloc as f64;
        }
    }
    Ok(area / ((end - start) as f64 * tl.total_gpus as f64))
}

/// Sum of per-job scores for wait, JCT and bounded slowdown.
///
/// Utilization is not a per-job score; callers use [`utilization`] on the
/// episode timeline instead.
pub fn aggregate_score(outcomes: &[JobOutcome], metric: Metric, tau: f64) -> Result<f64, MetricError> {
    if outcomes.is_empty() {
        return Err(MetricError::Empty);
    }
    let score = |o: &JobOutcome| match metric {
        Metric::Wait => Ok(wait_time(o) as f64),
        Metric::Jct => Ok(jct(o) as f64),
        Metric::Bsld => Ok(bsld(o, tau)),
        Metric::Utilization => Err(MetricError::NeedsTimeline),
    };
    outcomes.iter().map(score).sum()
}

/// Per-job means plus utilization; the single-line JSON aggregate record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricSummary {
    pub jobs: usize,
    pub mean_wait: f64,
    pub mean_jct: f64,
    pub mean_bsld: f64,
    pub utilization: f64,
    pub makespan: u64,
}

impl MetricSummary {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Wait => self.mean_wait,
            Metric::Jct => self.mean_jct,
            Metric::Bsld => self.mean_bsld,
            Metric::Utilization => self.utilization,
        }
    }
}

pub fn summarize(outcomes: &[JobOutcome], tl: &UtilizationTimeline, tau: f64) -> Result<MetricSummary, MetricError> {
    let n = outcomes.len();
    if n == 0 {
        return Err(MetricError::Empty);
    }
    let start = outcomes.iter().map(|o| o.submit_time).min().unwrap_or(0);
    let end = outcomes.iter().map(|o| o.end_time).max().unwrap_or(0);
    let util = if end > start { utilization(tl, (start, end))? } else { 0.0 };
    Ok(MetricSummary {
        jobs: n,
        mean_wait: aggregate_score(outcomes, Metric::Wait, tau)? / n as f64,
        mean_jct: aggregate_score(outcomes, Metric::Jct, tau)? / n as f64,
        mean_bsld: aggregate_score(outcomes, Metric::Bsld, tau)? / n as f64,
        utilization: util,
        makespan: end - start,
    })
}

/// Per-job CSV: job_id, submit, start, end, wait, jct, bsld.
pub fn outcomes_csv(outcomes: &[JobOutcome], tau: f64) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["job_id", "submit", "start", "end", "wait", "jct", "bsld"])?;
    for o in outcomes {
        w.write_record([
            o.job_id.clone(),
            o.submit_time.to_string(),
            o.start_time.to_string(),
            o.end_time.to_string(),
            wait_time(o).to_string(),
            jct(o).to_string(),
            format!("{:.6}", bsld(o, tau)),
        ])?;
    }
    w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn out(submit: u64, start: u64, end: u64) -> JobOutcome {
        JobOutcome {
            job_id: format!("j{submit}-{start}"),
            submit_time: submit,
            start_time: start,
            end_time: end,
            gpus_used: 1,
        }
    }

    #[test]
    fn wait_and_jct() {
        assert_eq!(wait_time(&out(0, 0, 5)), 0);
        assert_eq!(wait_time(&out(100, 350, 950)), 250);
        assert_eq!(jct(&out(0, 0, 10)), 10);
        assert_eq!(jct(&out(100, 350, 950)), 850);
        let batch = [out(0, 0, 1), out(0, 250, 251), out(0, 500, 501)];
        let mean = aggregate_score(&batch, Metric::Wait, DEFAULT_TAU).unwrap() / 3.0;
        assert_eq!(mean, 250.0);
    }

    #[test]
    fn bsld_cases() {
        assert_eq!(bsld(&out(0, 90, 100), 10.0), 10.0);
        assert_eq!(bsld(&out(0, 0, 5), 10.0), 1.0);
        assert_eq!(bsld(&out(0, 0, 100), 10.0), 1.0);
    }

    #[test]
    fn aggregates() {
        let waits = [out(0, 0, 1), out(0, 250, 260), out(0, 500, 510)];
        assert_eq!(aggregate_score(&waits, Metric::Wait, 10.0).unwrap(), 750.0);
        let one = [out(100, 350, 950)];
        assert_eq!(aggregate_score(&one, Metric::Jct, 10.0).unwrap(), 850.0);
        let two = [out(0, 90, 100), out(0, 0, 100)];
        assert_eq!(aggregate_score(&two, Metric::Bsld, 10.0).unwrap(), 11.0);
        assert_eq!(aggregate_score(&[], Metric::Wait, 10.0), Err(MetricError::Empty));
        assert_eq!(aggregate_score(&one, Metric::Utilization, 10.0), Err(MetricError::NeedsTimeline));
    }

    #[test]
    fn utilization_cases() {
        let mut tl = UtilizationTimeline::new(4);
        tl.record(0, 2);
        assert_eq!(utilization(&tl, (0, 100)).unwrap(), 0.5);

        let mut tl = UtilizationTimeline::new(4);
        tl.record(0, 4);
        tl.record(50, 0);
        assert_eq!(utilization(&tl, (0, 100)).unwrap(), 0.5);

        let mut tl = UtilizationTimeline::new(4);
        tl.record(0, 0);
        assert_eq!(utilization(&tl, (0, 100)).unwrap(), 0.0);
        assert_eq!(utilization(&tl, (10, 10)), Err(MetricError::EmptyHorizon));

        let mut late = UtilizationTimeline::new(4);
        late.record(5, 1);
        assert_eq!(utilization(&late, (0, 10)), Err(MetricError::HorizonOutsideTimeline));
    }

    #[test]
    fn mean_jct_is_mean_wait_plus_mean_runtime() {
        let batch = [out(0, 3, 20), out(5, 9, 12), out(7, 7, 100)];
        let n = batch.len() as f64;
        let mean_jct = aggregate_score(&batch, Metric::Jct, 10.0).unwrap() / n;
        let mean_wait = aggregate_score(&batch, Metric::Wait, 10.0).unwrap() / n;
        let mean_run = batch.iter().map(|o| o.runtime() as f64).sum::<f64>() / n;
        assert!((mean_jct - (mean_wait + mean_run)).abs() < 1e-12);
    }

    #[test]
    fn metric_labels() {
        assert_eq!("WAIT".parse::<Metric>().unwrap(), Metric::Wait);
        assert!("fairness".parse::<Metric>().is_err());
        assert_eq!(Metric::Bsld.to_string(), "bsld");
    }

    #[test]
    fn outcomes_csv_header() {
        let bytes = outcomes_csv(&[out(0, 90, 100)], 10.0).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.starts_with("job_id,submit,start,end,wait,jct,bsld\n"));
        assert!(text.contains(",90,100,10.000000"));
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn bsld_at_least_one(wait in 0u64..100_000, run in 1u64..100_000, tau in 1.0f64..100.0) {
                prop_assert!(bsld_raw(wait as f64, run as f64, tau) >= 1.0);
            }

            #[test]
            fn bsld_non_increasing_in_run(wait in 0u64..10_000, run in 10u64..10_000, extra in 0u64..1000) {
                let a = bsld_raw(wait as f64, run as f64, 10.0);
                let b = bsld_raw(wait as f64, (run + extra) as f64, 10.0);
                prop_assert!(b <= a + 1e-12);
            }

            #[test]
            fn sums_split_over_concatenation(
                jobs in prop::collection::vec((0u64..1000, 0u64..1000, 1u64..1000), 2..40),
                cut in 1usize..39,
            ) {
                let outs: Vec<JobOutcome> = jobs
                    .iter()
                    .enumerate()
                    .map(|(i, &(s, w, r))| JobOutcome {
                        job_id: i.to_string(),
                        submit_time: s,
                        start_time: s + w,
                        end_time: s + w + r,
                        gpus_used: 1,
                    })
                    .collect();
                let cut = cut.min(outs.len() - 1);
                for m in [Metric::Wait, Metric::Jct, Metric::Bsld] {
                    let whole = aggregate_score(&outs, m, 10.0).unwrap();
                    let parts = aggregate_score(&outs[..cut], m, 10.0).unwrap()
                        + aggregate_score(&outs[cut..], m, 10.0).unwrap();
                    prop_assert!((whole - parts).abs() <= 1e-9 * whole.abs().max(1.0));
                }
            }

            #[test]
            fn refinement_invariant(
                steps in prop::collection::vec((1u64..50, 0u32..8), 1..20),
                split in 0usize..20,
            ) {
                let mut tl = UtilizationTimeline::new(8);
                let mut refined = UtilizationTimeline::new(8);
                let mut t = 0;
                for (i, &(dt, a)) in steps.iter().enumerate() {
                    tl.record(t, a);
                    refined.record(t, a);
                    if i == split && dt > 1 {
                        // redundant sample repeating the current value
                        refined.record(t + dt / 2, a);
                    }
                    t += dt;
                }
                let u1 = utilization(&tl, (0, t)).unwrap();
                let u2 = utilization(&refined, (0, t)).unwrap();
                prop_assert!((u1 - u2).abs() < 1e-12);
            }
        }
    }
}
