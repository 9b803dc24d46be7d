//! Least-squares fit of cost-model constants to profiled iteration times.
//!
//! The model is linear in its constants once each anchor is assigned to the
//! memory- or compute-bound regime, so the fit enumerates the regime splits
//! implied by the anchors' token counts, solves a non-negative least-squares
//! problem on relative errors for each, and keeps the best split whose
//! recovered saturation point is consistent with the assignment.

use nalgebra::{DMatrix, DVector, RealField};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::{decode_entry, prefill_entry, CostModelParams};
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::request::Batch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrefillSpec {
    pub chunk: u64,
    #[serde(default)]
    pub prefix: u64,
}

/// One profiled batch and its measured full-iteration time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar", deny_unknown_fields)]
pub struct Anchor<S> {
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub decode_count: u64,
    /// Context length attended by each decode.
    #[serde(default)]
    pub decode_kv: u64,
    #[serde(default)]
    pub prefills: Vec<PrefillSpec>,
    pub observed_ms: S,
}

impl<S: Scalar> Anchor<S> {
    pub fn batch(&self) -> Batch {
        let mut entries: Vec<_> = (0..self.decode_count)
            .map(|i| decode_entry(i, self.decode_kv))
            .collect();
        let base = self.decode_count;
        entries.extend(
            self.prefills
                .iter()
                .enumerate()
                .map(|(i, p)| prefill_entry(base + i as u64, p.chunk, p.prefix)),
        );
        Batch::new(entries)
    }

    fn label_or(&self, i: usize) -> String {
        self.label.clone().unwrap_or_else(|| format!("anchor {i}"))
    }
}

/// Anchors plus the constants that are fixed rather than fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar", deny_unknown_fields)]
pub struct AnchorSet<S> {
    pub name: String,
    #[serde(default = "one")]
    pub tp_degree: u64,
    #[serde(default = "one")]
    pub pp_degree: u64,
    #[serde(default = "tile")]
    pub tile_size: u64,
    #[serde(default)]
    pub tile_penalty_frac: S,
    #[serde(default)]
    pub tp_comm_ms: S,
    #[serde(default)]
    pub pp_send_ms: S,
    pub anchors: Vec<Anchor<S>>,
}

fn one() -> u64 {
    1
}

fn tile() -> u64 {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "S: Scalar")]
pub struct Residual<S> {
    pub label: String,
    pub observed_ms: S,
    pub fitted_ms: S,
    pub rel_error: S,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "S: Scalar")]
pub struct Calibration<S> {
    pub params: CostModelParams<S>,
    pub residuals: Vec<Residual<S>>,
    pub notes: Vec<String>,
}

impl<S: Scalar> Calibration<S> {
    pub fn max_rel_error(&self) -> S {
        self.residuals
            .iter()
            .map(|r| r.rel_error)
            .fold(S::zero(), |a, b| Float::max(a, b))
    }
}

const FITTED: [&str; 6] = [
    "fixed_overhead_ms",
    "mem_floor_ms",
    "per_token_linear_ms",
    "attn_prefill_quad_ms",
    "attn_kv_read_ms",
    "attn_decode_per_kv_ms",
];

struct Row<S> {
    tokens: u64,
    compute: S,
    quad: S,
    kv_read: S,
    decode_kv: S,
    target: S,
}

struct Fit<S> {
    theta: [S; 6],
    cost: S,
    consistent: bool,
}

/// Fits cost-model constants to `set`. Overheads, tile behavior and
/// parallelism are taken from the anchor set, everything else is fitted.
pub fn calibrate<S: Scalar + RealField>(set: &AnchorSet<S>) -> Result<Calibration<S>> {
    let unconstrained = |reason: &str, names: &[&str]| Error::Calibration {
        reason: reason.to_string(),
        unconstrained: names.iter().map(|s| s.to_string()).collect(),
    };
    if set.anchors.len() < 4 {
        return Err(unconstrained(
            &format!("need at least 4 anchors, got {}", set.anchors.len()),
            &FITTED,
        ));
    }
    let has_decode_only = set
        .anchors
        .iter()
        .any(|a| a.decode_count > 0 && a.prefills.is_empty());
    let has_prefill = set.anchors.iter().any(|a| !a.prefills.is_empty());
    match (has_decode_only, has_prefill) {
        (false, false) => {
            return Err(unconstrained("anchors are empty batches", &FITTED));
        }
        (false, true) => {
            return Err(unconstrained(
                "no decode-only anchor",
                &["mem_floor_ms", "attn_decode_per_kv_ms"],
            ))
        }
        (true, false) => {
            return Err(unconstrained(
                "no prefill anchor",
                &["per_token_linear_ms", "attn_prefill_quad_ms", "attn_kv_read_ms"],
            ))
        }
        (true, true) => {}
    }

    let tp = set.tp_degree.max(1);
    let mut template = CostModelParams::<S>::from_rates(
        set.name.clone(),
        S::one(),
        1,
        S::zero(),
        S::zero(),
        S::zero(),
        S::zero(),
    );
    template.tile_size = set.tile_size;
    template.tile_penalty_frac = set.tile_penalty_frac;
    template.tp_comm_ms = set.tp_comm_ms;
    template.pp_send_ms = set.pp_send_ms;
    template.tp_degree = tp;
    template.pp_degree = set.pp_degree.max(1);
    let comm = if tp > 1 { set.tp_comm_ms } else { S::zero() };

    let mut rows = Vec::with_capacity(set.anchors.len());
    for (i, a) in set.anchors.iter().enumerate() {
        let batch = a.batch();
        if batch.is_empty() {
            return Err(Error::Calibration {
                reason: format!("{} describes an empty batch", a.label_or(i)),
                unconstrained: vec![],
            });
        }
        let target = a.observed_ms - comm;
        if !(target > S::zero()) {
            return Err(Error::Calibration {
                reason: format!("{}: observed time does not exceed fixed communication", a.label_or(i)),
                unconstrained: vec![],
            });
        }
        let n = batch.total_tokens;
        let (mut quad, mut kv_read) = (S::zero(), S::zero());
        for p in &a.prefills {
            let c = S::count(p.chunk);
            quad = quad + c * c;
            kv_read = kv_read + c * S::count(p.prefix);
        }
        rows.push(Row {
            tokens: n,
            compute: S::count(n) * template.tile_penalty(n) / S::count(tp),
            quad,
            kv_read,
            decode_kv: S::count(batch.decode_kv_tokens()),
            target,
        });
    }
    let kv_free = rows.iter().all(|r| r.kv_read == S::zero());

    let mut levels: Vec<u64> = rows.iter().map(|r| r.tokens).collect();
    levels.sort_unstable();
    levels.dedup();

    let mut best: Option<(Fit<S>, usize)> = None;
    for split in 0..levels.len().saturating_sub(1) {
        let threshold = levels[split];
        let Some(fit) = fit_split(&rows, threshold, kv_free) else {
            continue;
        };
        let better = match &best {
            None => true,
            Some((b, _)) => match (fit.consistent, b.consistent) {
                (true, false) => true,
                (false, true) => false,
                _ => fit.cost < b.cost,
            },
        };
        if better {
            best = Some((fit, split));
        }
    }
    let Some((fit, split)) = best else {
        return Err(Error::Calibration {
            reason: "anchors do not span both the memory- and compute-bound regimes".into(),
            unconstrained: vec!["mem_floor_ms".into(), "per_token_linear_ms".into()],
        });
    };

    let mut notes = Vec::new();
    if !fit.consistent {
        notes.push(format!(
            "no regime split was self-consistent; using anchors with <= {} tokens as memory-bound",
            levels[split]
        ));
    }
    let [fixed, floor_eff, per_token, quad, kv_read, decode] = fit.theta;
    let kv_read = if kv_free {
        notes.push("no anchor re-reads a prompt prefix; attn_kv_read_ms tied to 2 x attn_prefill_quad_ms".into());
        quad + quad
    } else {
        kv_read
    };
    if !(per_token > S::zero()) {
        return Err(Error::Calibration {
            reason: "fitted per-token linear cost is zero".into(),
            unconstrained: vec!["per_token_linear_ms".into()],
        });
    }
    let mem_floor = floor_eff * S::count(tp);
    let saturation = Float::round(mem_floor / per_token).as_f64().max(1.0) as u64;

    let mut params = template;
    params.per_token_linear_ms = per_token;
    params.saturation_tokens = saturation;
    params.mem_floor_ms = per_token * S::count(saturation);
    params.attn_prefill_quad_ms = quad;
    params.attn_kv_read_ms = kv_read;
    params.attn_decode_per_kv_ms = decode;
    params.fixed_overhead_ms = fixed;

    let residuals = set
        .anchors
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let fitted = params.iteration_time(&a.batch(), tp);
            Residual {
                label: a.label_or(i),
                observed_ms: a.observed_ms,
                fitted_ms: fitted,
                rel_error: Float::abs(fitted - a.observed_ms) / a.observed_ms,
            }
        })
        .collect();
    Ok(Calibration { params, residuals, notes })
}

fn fit_split<S: Scalar + RealField>(rows: &[Row<S>], mem_max: u64, kv_free: bool) -> Option<Fit<S>> {
    let m = rows.len();
    let mut a = DMatrix::<S>::zeros(m, 6);
    let mut y = DVector::<S>::zeros(m);
    for (i, r) in rows.iter().enumerate() {
        let w = S::one() / r.target;
        let memory = r.tokens <= mem_max;
        a[(i, 0)] = w;
        if memory {
            a[(i, 1)] = w;
        } else {
            a[(i, 2)] = r.compute * w;
        }
        a[(i, 3)] = r.quad * w;
        a[(i, 4)] = if kv_free { S::zero() } else { r.kv_read * w };
        a[(i, 5)] = r.decode_kv * w;
        y[i] = S::one();
    }
    // equilibrate columns; all-zero columns stay pinned at zero
    let mut scale = [S::zero(); 6];
    for (j, s) in scale.iter_mut().enumerate() {
        let norm = a.column(j).iter().fold(S::zero(), |acc, &v| Float::max(acc, Float::abs(v)));
        *s = norm;
        if norm > S::zero() {
            for i in 0..m {
                a[(i, j)] = a[(i, j)] / norm;
            }
        }
    }
    let x = nnls(&a, &y);
    let resid = &y - &a * &x;
    let cost = resid.iter().fold(S::zero(), |acc, &v| acc + v * v);
    let mut theta = [S::zero(); 6];
    for j in 0..6 {
        if scale[j] > S::zero() {
            theta[j] = x[j] / scale[j];
        }
    }
    let (floor_eff, per_token) = (theta[1], theta[2]);
    if !(per_token > S::zero()) {
        return Some(Fit { theta, cost, consistent: false });
    }
    // every anchor must land on the side of the roofline it was assigned to;
    // tile padding can push a small batch past the floor, so compare times
    // rather than token counts
    let slack = S::of(1e-6) * floor_eff;
    let consistent = rows.iter().all(|r| {
        let math = per_token * r.compute;
        if r.tokens <= mem_max {
            math <= floor_eff + slack
        } else {
            math + slack >= floor_eff
        }
    });
    Some(Fit { theta, cost, consistent })
}

/// Lawson-Hanson non-negative least squares: `min |Ax - y|` s.t. `x >= 0`.
fn nnls<S: Scalar + RealField>(a: &DMatrix<S>, y: &DVector<S>) -> DVector<S> {
    let n = a.ncols();
    let tol = S::of(1e-10);
    let mut x = DVector::<S>::zeros(n);
    let mut passive = vec![false; n];
    let live: Vec<bool> = (0..n).map(|j| a.column(j).iter().any(|v| *v != S::zero())).collect();

    for _ in 0..(3 * n + 10) {
        let w = a.transpose() * (y - a * &x);
        let candidate = (0..n)
            .filter(|&j| live[j] && !passive[j] && w[j] > tol)
            .max_by(|&i, &j| w[i].partial_cmp(&w[j]).unwrap_or(std::cmp::Ordering::Equal));
        let Some(j) = candidate else { break };
        passive[j] = true;
        loop {
            let s = solve_passive(a, y, &passive);
            let blocked: Vec<usize> = (0..n).filter(|&i| passive[i] && s[i] <= tol).collect();
            if blocked.is_empty() {
                x = s;
                break;
            }
            let mut alpha = S::one();
            for &i in &blocked {
                let denom = x[i] - s[i];
                if denom > S::zero() {
                    alpha = Float::min(alpha, x[i] / denom);
                }
            }
            for i in 0..n {
                x[i] = x[i] + alpha * (s[i] - x[i]);
                if passive[i] && x[i] <= tol {
                    passive[i] = false;
                    x[i] = S::zero();
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    x
}

fn solve_passive<S: Scalar + RealField>(a: &DMatrix<S>, y: &DVector<S>, passive: &[bool]) -> DVector<S> {
    let cols: Vec<usize> = (0..passive.len()).filter(|&j| passive[j]).collect();
    let sub = a.select_columns(cols.iter());
    let sol = sub
        .svd(true, true)
        .solve(y, S::of(1e-12))
        .unwrap_or_else(|_| DVector::zeros(cols.len()));
    let mut out = DVector::<S>::zeros(passive.len());
    for (k, &j) in cols.iter().enumerate() {
        out[j] = sol[k];
    }
    out
}
