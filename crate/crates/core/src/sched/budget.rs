use crate::costmodel::{prefill_entry, CostModelParams};
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::request::Batch;

/// Worst-case number of full iterations a token's gap can span on a `pp`-stage
/// pipeline.
pub fn pipeline_tbt_factor(pp_degree: u64) -> u64 {
    pp_degree.max(1)
}

/// Grid-search knobs for [`compute_token_budget`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetSearch {
    pub chunk_align: u64,
    pub max_budget: u64,
}

impl Default for BudgetSearch {
    fn default() -> Self {
        Self { chunk_align: 32, max_budget: 8192 }
    }
}

/// Largest token budget whose hybrid iteration (the representative decodes
/// plus one fresh prefill chunk filling up to the budget) keeps the pipelined
/// TBT bound within `t_max_ms`.
pub fn compute_token_budget<S: Scalar>(
    t_max_ms: S,
    params: &CostModelParams<S>,
    tp_degree: u64,
    pp_degree: u64,
    decodes: &Batch,
    search: BudgetSearch,
) -> Result<u64> {
    if search.chunk_align == 0 {
        return Err(Error::InvalidConfig("chunk_align must be >= 1".into()));
    }
    let factor = S::count(pipeline_tbt_factor(pp_degree));
    let n_dec = decodes.total_tokens;
    let mut best = None;
    let mut tau = search.chunk_align;
    while tau <= search.max_budget {
        if tau > n_dec {
            let mut batch = decodes.clone();
            batch.push(prefill_entry(u64::MAX, tau - n_dec, 0));
            if params.iteration_time(&batch, tp_degree) * factor <= t_max_ms {
                best = Some(tau);
            }
        }
        tau += search.chunk_align;
    }
    best.ok_or_else(|| {
        Error::InfeasibleSlo(format!(
            "no token budget up to {} keeps the iteration within {} ms ({} decodes, pp {pp_degree})",
            search.max_budget, t_max_ms, n_dec
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::{reference_decode_batch, uniform_decode_batch};

    fn params() -> CostModelParams<f64> {
        CostModelParams::from_rates("t", 0.02, 512, 1e-6, 2e-6, 1e-4, 2.0)
    }

    #[test]
    fn budget_grows_with_slo() {
        let p = params();
        let d = reference_decode_batch();
        let s = BudgetSearch::default();
        let mut last = 0;
        for t in [30.0, 40.0, 50.0, 100.0, 200.0] {
            let tau = compute_token_budget(t, &p, 1, 1, &d, s).unwrap();
            assert!(tau >= last);
            assert_eq!(tau % 32, 0);
            last = tau;
        }
    }

    #[test]
    fn pipeline_factor_lowers_budget() {
        let p = params();
        let d = reference_decode_batch();
        let s = BudgetSearch::default();
        let one = compute_token_budget(100.0, &p, 1, 1, &d, s).unwrap();
        let two = compute_token_budget(100.0, &p, 1, 2, &d, s).unwrap();
        assert!(two < one);
    }

    #[test]
    fn slo_below_floor_is_infeasible() {
        let p = params();
        let err = compute_token_budget(1.0, &p, 1, 1, &uniform_decode_batch(4, 100), BudgetSearch::default());
        assert!(matches!(err, Err(Error::InfeasibleSlo(_))));
    }

    #[test]
    fn chosen_budget_is_maximal() {
        let p = params();
        let d = uniform_decode_batch(8, 1000);
        let t = 40.0;
        let tau = compute_token_budget(t, &p, 1, 1, &d, BudgetSearch::default()).unwrap();
        let at = |n: u64| {
            let mut b = d.clone();
            b.push(prefill_entry(99, n - 8, 0));
            p.iteration_time(&b, 1)
        };
        assert!(at(tau) <= t);
        assert!(at(tau + 32) > t);
    }
}
