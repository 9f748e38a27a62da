//! Analytical step-time model for data/tensor/pipeline parallel plans.
//!
//! A phase with base work `W` on plan `(dp, tp, pp)` with `m` micro-batches
//! takes `W / dp * tp_factor(tp) * (m + pp - 1) / (m * pp)`, where
//! `tp_factor(tp) = (1 + c (tp - 1)) / tp`. Decoding proceeds one token at a
//! time, so generation runs with `m = 1` and gains nothing from `pp`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPlan {
    pub dp: usize,
    pub tp: usize,
    pub pp: usize,
}

impl ParallelPlan {
    pub fn devices(&self) -> usize {
        self.dp * self.tp * self.pp
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    Ppo,
    SftOrDpo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModelParams {
    /// Single-device time of one training step.
    pub step_time: f64,
    /// Fraction of a PPO step spent generating.
    pub gen_share: f64,
    /// Per-extra-shard tensor-parallel communication overhead, in [0, 0.25].
    pub tp_overhead: f64,
    pub train_microbatches: usize,
    pub gen_microbatches: usize,
    /// Shards the weights must be split into to fit in device memory.
    pub min_model_shards: usize,
}

impl Default for CostModelParams {
    fn default() -> Self {
        CostModelParams {
            step_time: 1.0,
            gen_share: 0.8,
            tp_overhead: 0.1,
            train_microbatches: 16,
            gen_microbatches: 1,
            min_model_shards: 4,
        }
    }
}

impl CostModelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_time > 0.0) {
            return Err(Error::InvalidConfig("step_time must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gen_share) {
            return Err(Error::InvalidConfig("gen_share must be in [0, 1]".into()));
        }
        if !(0.0..=0.25).contains(&self.tp_overhead) {
            return Err(Error::InvalidConfig("tp_overhead must be in [0, 0.25]".into()));
        }
        if self.train_microbatches == 0 || self.gen_microbatches == 0 || self.min_model_shards == 0 {
            return Err(Error::InvalidConfig("micro-batch counts and min_model_shards must be positive".into()));
        }
        Ok(())
    }

    fn gen_share_for(&self, kind: WorkloadKind) -> f64 {
        match kind {
            WorkloadKind::Ppo => self.gen_share,
            WorkloadKind::SftOrDpo => 0.0,
        }
    }
}

/// Idle fraction of a synchronous pipeline: `(pp - 1) / (m + pp - 1)`.
pub fn bubble_fraction(pp: usize, microbatches: usize) -> f64 {
    (pp - 1) as f64 / (microbatches + pp - 1) as f64
}

fn tp_factor(tp: usize, c: f64) -> f64 {
    (1.0 + c * (tp - 1) as f64) / tp as f64
}

fn phase_time(work: f64, plan: &ParallelPlan, m: usize, c: f64) -> f64 {
    work / plan.dp as f64 * tp_factor(plan.tp, c) * (m + plan.pp - 1) as f64 / (m * plan.pp) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepEstimate {
    pub gen_time: f64,
    pub learn_time: f64,
    pub gen_bubble: f64,
    pub learn_bubble: f64,
    /// Time-weighted bubble over both phases.
    pub bubble_fraction: f64,
    pub total: f64,
}

pub fn estimate_step_time(
    plan: &ParallelPlan,
    device_count: usize,
    kind: WorkloadKind,
    params: &CostModelParams,
) -> Result<StepEstimate> {
    params.validate()?;
    if plan.dp == 0 || plan.tp == 0 || plan.pp == 0 {
        return Err(Error::InvalidArgument("parallel degrees must be positive".into()));
    }
    if plan.devices() != device_count {
        return Err(Error::InvalidArgument(format!(
            "plan {}x{}x{} uses {} devices, expected {device_count}",
            plan.dp,
            plan.tp,
            plan.pp,
            plan.devices()
        )));
    }
    let need = params.min_model_shards.min(device_count);
    if plan.tp * plan.pp < need {
        return Err(Error::InvalidArgument(format!("tp*pp = {} < {need} required model shards", plan.tp * plan.pp)));
    }
    let share = params.gen_share_for(kind);
    let c = params.tp_overhead;
    let gen_time = phase_time(share * params.step_time, plan, params.gen_microbatches, c);
    let learn_time = phase_time((1.0 - share) * params.step_time, plan, params.train_microbatches, c);
    let gen_bubble = bubble_fraction(plan.pp, params.gen_microbatches);
    let learn_bubble = bubble_fraction(plan.pp, params.train_microbatches);
    let total = gen_time + learn_time;
    Ok(StepEstimate {
        gen_time,
        learn_time,
        gen_bubble,
        learn_bubble,
        bubble_fraction: (gen_time * gen_bubble + learn_time * learn_bubble) / total,
        total,
    })
}

/// Every factorization `dp * tp * pp = device_count` that fits in memory,
/// ordered by `pp`, then `tp`.
pub fn feasible_plans(device_count: usize, params: &CostModelParams) -> Vec<ParallelPlan> {
    let divisors: Vec<usize> = (1..=device_count).filter(|d| device_count.is_multiple_of(*d)).collect();
    let need = params.min_model_shards.min(device_count);
    let mut out = Vec::new();
    for &pp in &divisors {
        for &tp in &divisors {
            if !(device_count / pp).is_multiple_of(tp) || tp * pp < need {
                continue;
            }
            out.push(ParallelPlan { dp: device_count / (tp * pp), tp, pp });
        }
    }
    out
}

pub fn plan_table(
    device_count: usize,
    kind: WorkloadKind,
    params: &CostModelParams,
) -> Result<Vec<(ParallelPlan, StepEstimate)>> {
    if device_count == 0 {
        return Err(Error::InvalidArgument("device_count must be at least 1".into()));
    }
    feasible_plans(device_count, params)
        .into_iter()
        .map(|p| Ok((p, estimate_step_time(&p, device_count, kind, params)?)))
        .collect()
}

/// Fastest feasible plan; the first in `feasible_plans` order wins ties.
pub fn recommend_plan(device_count: usize, kind: WorkloadKind, params: &CostModelParams) -> Result<ParallelPlan> {
    let table = plan_table(device_count, kind, params)?;
    let mut best = table[0];
    for row in &table[1..] {
        if row.1.total < best.1.total {
            best = *row;
        }
    }
    Ok(best.0)
}

pub const PLAN_CSV_HEADER: &str = "dp,tp,pp,gen_time,learn_time,bubble_fraction,total";

pub fn plan_table_csv(rows: &[(ParallelPlan, StepEstimate)]) -> String {
    let mut s = format!("{PLAN_CSV_HEADER}\n");
    for (p, e) in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.dp, p.tp, p.pp, e.gen_time, e.learn_time, e.bubble_fraction, e.total
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const DEVICES: [usize; 5] = [1, 2, 4, 8, 16];

    #[test]
    fn bubble_values() {
        assert_eq!(bubble_fraction(1, 1), 0.0);
        assert_eq!(bubble_fraction(4, 1), 0.75);
        let p = CostModelParams { train_microbatches: 1, ..Default::default() };
        let e = estimate_step_time(&ParallelPlan { dp: 1, tp: 1, pp: 4 }, 4, WorkloadKind::Ppo, &p).unwrap();
        assert!((e.bubble_fraction - 0.75).abs() < 1e-15);
        let e = estimate_step_time(&ParallelPlan { dp: 1, tp: 4, pp: 1 }, 4, WorkloadKind::Ppo, &p).unwrap();
        assert_eq!(e.bubble_fraction, 0.0);
    }

    #[test]
    fn doubling_dp_halves_learn_time() {
        let p = CostModelParams::default();
        let a = estimate_step_time(&ParallelPlan { dp: 1, tp: 4, pp: 1 }, 4, WorkloadKind::Ppo, &p).unwrap();
        let b = estimate_step_time(&ParallelPlan { dp: 2, tp: 4, pp: 1 }, 8, WorkloadKind::Ppo, &p).unwrap();
        assert!((b.learn_time * 2.0 - a.learn_time).abs() < 1e-15);
        // Per-replica decode time, gen_time * dp, is unchanged.
        assert!((b.gen_time * 2.0 - a.gen_time).abs() < 1e-15);
    }

    #[test]
    fn rejects_mismatched_and_oversized_plans() {
        let p = CostModelParams::default();
        assert!(estimate_step_time(&ParallelPlan { dp: 2, tp: 2, pp: 1 }, 8, WorkloadKind::Ppo, &p).is_err());
        assert!(estimate_step_time(&ParallelPlan { dp: 8, tp: 1, pp: 1 }, 8, WorkloadKind::Ppo, &p).is_err());
        assert!(recommend_plan(0, WorkloadKind::Ppo, &p).is_err());
    }

    #[test]
    fn recommendations() {
        let p = CostModelParams::default();
        assert_eq!(recommend_plan(1, WorkloadKind::Ppo, &p).unwrap(), ParallelPlan { dp: 1, tp: 1, pp: 1 });
        assert_eq!(recommend_plan(8, WorkloadKind::Ppo, &p).unwrap().pp, 1);
        assert_eq!(recommend_plan(8, WorkloadKind::SftOrDpo, &p).unwrap(), ParallelPlan { dp: 2, tp: 2, pp: 2 });
    }

    #[test]
    fn csv_layout() {
        let rows = plan_table(4, WorkloadKind::Ppo, &CostModelParams::default()).unwrap();
        let csv = plan_table_csv(&rows);
        assert_eq!(csv.lines().next().unwrap(), PLAN_CSV_HEADER);
        assert_eq!(csv.lines().count(), rows.len() + 1);
    }

    fn brute_force(n: usize, kind: WorkloadKind, p: &CostModelParams) -> f64 {
        let mut best = f64::INFINITY;
        for dp in 1..=n {
            for tp in 1..=n {
                for pp in 1..=n {
                    if let Ok(e) = estimate_step_time(&ParallelPlan { dp, tp, pp }, n, kind, p) {
                        best = best.min(e.total);
                    }
                }
            }
        }
        best
    }

    proptest! {
        #[test]
        fn bubble_monotone(pp in 2usize..32, m in 1usize..64) {
            prop_assert!(bubble_fraction(pp + 1, m) > bubble_fraction(pp, m));
            prop_assert!(bubble_fraction(pp, m + 1) < bubble_fraction(pp, m));
            prop_assert!(bubble_fraction(pp, m) > 0.0);
        }

        #[test]
        fn generation_heavy_prefers_no_pipeline(
            share in 0.8f64..=1.0,
            c in 0.0f64..=0.25,
            m in 1usize..64,
            shards in 1usize..20,
            di in 0usize..5,
        ) {
            let n = DEVICES[di];
            let p = CostModelParams { gen_share: share, tp_overhead: c, train_microbatches: m, min_model_shards: shards, ..Default::default() };
            let rows = plan_table(n, WorkloadKind::Ppo, &p).unwrap();
            let best_flat = rows.iter().filter(|r| r.0.pp == 1).map(|r| r.1.total).fold(f64::INFINITY, f64::min);
            for (plan, e) in &rows {
                if plan.pp > 1 {
                    prop_assert!(e.total > best_flat);
                }
            }
            let rec = recommend_plan(n, WorkloadKind::Ppo, &p).unwrap();
            prop_assert_eq!(rec.pp, 1);
            let e = estimate_step_time(&rec, n, WorkloadKind::Ppo, &p).unwrap();
            prop_assert_eq!(e.total, brute_force(n, WorkloadKind::Ppo, &p));
        }
    }
}
