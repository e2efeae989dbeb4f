//! Differentiable top-k selection over distance vectors.
//!
//! The soft indicator is the first column of an entropic optimal transport
//! plan between the `n` distances (uniform mass `1/n` each) and two anchors
//! holding `K/n` and `(n-K)/n` of the mass. As the regularization goes to
//! zero the plan approaches the sorted assignment, so `z` approaches the hard
//! top-k indicator. The transport problem is solved with log-domain Sinkhorn
//! iterations; gradients are available either by differentiating through the
//! recorded iterations or implicitly at the fixed point.

use log::debug;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AdfaError, Result};

/// Where the two transport targets sit on the (row-normalized) distance axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    /// `(min(x), max(x))` of the normalized input row.
    #[default]
    MinMaxOfInput,
    /// `(0, 1)`.
    Fixed,
}

/// Exponent of the point-to-anchor cost `|x - a|^p`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum CostPower {
    Abs,
    #[default]
    Squared,
}

impl TryFrom<u8> for CostPower {
    type Error = String;

    fn try_from(value: u8) -> std::result::Result<Self, Self::Error> {
        match value {
            1 => Ok(CostPower::Abs),
            2 => Ok(CostPower::Squared),
            other => Err(format!("cost_power must be 1 or 2, got {other}")),
        }
    }
}

impl From<CostPower> for u8 {
    fn from(value: CostPower) -> Self {
        match value {
            CostPower::Abs => 1,
            CostPower::Squared => 2,
        }
    }
}

impl CostPower {
    fn cost(self, u: f64) -> f64 {
        match self {
            CostPower::Abs => u.abs(),
            CostPower::Squared => u * u,
        }
    }

    fn derivative(self, u: f64) -> f64 {
        match self {
            CostPower::Abs => {
                if u > 0.0 {
                    1.0
                } else if u < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            CostPower::Squared => 2.0 * u,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackwardMode {
    /// Reverse-mode through every recorded Sinkhorn iteration.
    #[default]
    Unrolled,
    /// Closed-form adjoint of the converged fixed point.
    Implicit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SoftTopKConfig {
    pub k: usize,
    /// Entropic regularization, applied to row-max-normalized distances.
    pub ot_epsilon: f64,
    pub max_iters: usize,
    /// Summed absolute row-marginal violation accepted as converged.
    pub tolerance: f64,
    pub anchor_mode: AnchorMode,
    pub cost_power: CostPower,
    pub backward_mode: BackwardMode,
}

impl Default for SoftTopKConfig {
    fn default() -> Self {
        SoftTopKConfig {
            k: 3,
            ot_epsilon: 0.01,
            max_iters: 200,
            tolerance: 1e-6,
            anchor_mode: AnchorMode::MinMaxOfInput,
            cost_power: CostPower::Squared,
            backward_mode: BackwardMode::Unrolled,
        }
    }
}

impl SoftTopKConfig {
    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn with_ot_epsilon(mut self, ot_epsilon: f64) -> Self {
        self.ot_epsilon = ot_epsilon;
        self
    }

    pub fn with_budget(mut self, max_iters: usize, tolerance: f64) -> Self {
        self.max_iters = max_iters;
        self.tolerance = tolerance;
        self
    }

    pub fn with_backward_mode(mut self, mode: BackwardMode) -> Self {
        self.backward_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(AdfaError::Config("soft_topk.k must be at least 1".into()));
        }
        if !(self.ot_epsilon > 0.0 && self.ot_epsilon.is_finite()) {
            return Err(AdfaError::Config(format!(
                "soft_topk.ot_epsilon must be positive, got {}",
                self.ot_epsilon
            )));
        }
        if self.max_iters == 0 {
            return Err(AdfaError::Config("soft_topk.max_iters must be at least 1".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(AdfaError::Config("soft_topk.tolerance must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Result of a Sinkhorn solve.
#[derive(Clone, Debug)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    pub row_potential: Array1<f64>,
    pub col_potential: Array1<f64>,
    pub iterations: usize,
    /// `sum_i |rowsum_i - mu_i|` of the returned plan. Column sums are exact.
    pub marginal_violation: f64,
    pub converged: bool,
}

/// Potentials visited by the solver, kept for the unrolled backward pass.
/// `rows[t]` was computed from `cols[t - 1]` (zeros for `t = 0`) and
/// `cols[t]` from `rows[t]`.
#[derive(Debug, Default)]
struct SinkhornTrace {
    rows: Vec<Vec<f64>>,
    cols: Vec<Vec<f64>>,
}

/// Log-domain solver state. Potentials are kept divided by `eps`
/// (`u = f / eps`, `v = g / eps`) and the cost is stored column-major and
/// pre-divided by `eps`.
struct Solver {
    n: usize,
    m: usize,
    scaled_cost: Vec<f64>,
    log_mu: Vec<f64>,
    mu: Vec<f64>,
    log_nu: Vec<f64>,
    eps: f64,
    /// Rows holding the K-th and (K+1)-th smallest cost difference of a
    /// two-column problem; the first column potential starts midway.
    start: Option<(usize, usize)>,
}

impl Solver {
    /// Starts a two-column problem with its cut between the K-th and
    /// (K+1)-th rows ranked by `c_i0 - c_i1`. From a zero start the cut
    /// creeps toward that point with steps shrinking like the remaining
    /// error once the selection saturates.
    fn with_threshold_start(mut self, k: usize) -> Self {
        if self.m != 2 || k == 0 || k >= self.n {
            return self;
        }
        let delta: Vec<f64> = (0..self.n).map(|i| self.scaled_cost[i] - self.scaled_cost[self.n + i]).collect();
        let key = |i: &usize| (delta[*i], *i);
        let mut order: Vec<usize> = (0..self.n).collect();
        order.select_nth_unstable_by(k, |a, b| key(a).partial_cmp(&key(b)).expect("finite costs"));
        let above = order[k];
        let below = *order[..k]
            .iter()
            .max_by(|a, b| key(a).partial_cmp(&key(b)).expect("finite costs"))
            .expect("k >= 1");
        self.start = Some((below, above));
        self
    }

    fn initial_v(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.m];
        if let Some((a, b)) = self.start {
            let n = self.n;
            let delta = |i: usize| self.scaled_cost[i] - self.scaled_cost[n + i];
            v[0] = 0.5 * (delta(a) + delta(b));
        }
        v
    }

    fn column(&self, j: usize) -> &[f64] {
        &self.scaled_cost[j * self.n..(j + 1) * self.n]
    }

    /// `lse[i] = LSE_j(v_j - c_ij)`.
    fn row_lse(&self, v: &[f64], lse: &mut [f64]) {
        if self.m == 2 {
            let (c0, c1) = (self.column(0), self.column(1));
            for i in 0..self.n {
                let a = v[0] - c0[i];
                let b = v[1] - c1[i];
                let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
                lse[i] = if hi == f64::NEG_INFINITY { hi } else { hi + (lo - hi).exp().ln_1p() };
            }
            return;
        }
        for (i, out) in lse.iter_mut().enumerate() {
            let max = (0..self.m)
                .map(|j| v[j] - self.scaled_cost[j * self.n + i])
                .fold(f64::NEG_INFINITY, f64::max);
            *out = if max == f64::NEG_INFINITY {
                max
            } else {
                let sum: f64 = (0..self.m)
                    .map(|j| (v[j] - self.scaled_cost[j * self.n + i] - max).exp())
                    .sum();
                max + sum.ln()
            };
        }
    }

    fn row_update(&self, lse: &[f64], u: &mut [f64]) {
        for ((ui, &lm), &l) in u.iter_mut().zip(&self.log_mu).zip(lse) {
            *ui = lm - l;
        }
    }

    /// `v_j = log nu_j - LSE_i(u_i - c_ij)`.
    fn col_update(&self, u: &[f64], v: &mut [f64], buf: &mut [f64]) {
        for j in 0..self.m {
            let c = self.column(j);
            let mut max = f64::NEG_INFINITY;
            for i in 0..self.n {
                buf[i] = u[i] - c[i];
                max = max.max(buf[i]);
            }
            let lse = if max == f64::NEG_INFINITY {
                max
            } else {
                max + buf.iter().map(|&q| (q - max).exp()).sum::<f64>().ln()
            };
            v[j] = self.log_nu[j] - lse;
        }
    }

    fn plan(&self, u: &[f64], v: &[f64]) -> Array2<f64> {
        Array2::from_shape_fn((self.n, self.m), |(i, j)| {
            (u[i] + v[j] - self.scaled_cost[j * self.n + i]).exp()
        })
    }

    fn run(&self, max_iters: usize, tolerance: f64, mut trace: Option<&mut SinkhornTrace>) -> TransportPlan {
        let mut v = self.initial_v();
        let mut lse = vec![0.0; self.n];
        let mut u = vec![0.0; self.n];
        let mut buf = vec![0.0; self.n];
        self.row_lse(&v, &mut lse);
        self.row_update(&lse, &mut u);
        let mut iterations = 0;
        let mut violation = f64::INFINITY;
        let mut converged = false;
        for it in 1..=max_iters {
            if let Some(t) = trace.as_deref_mut() {
                t.rows.push(u.clone());
            }
            self.col_update(&u, &mut v, &mut buf);
            if let Some(t) = trace.as_deref_mut() {
                t.cols.push(v.clone());
            }
            self.row_lse(&v, &mut lse);
            violation = u
                .iter()
                .zip(&lse)
                .zip(&self.mu)
                .map(|((&ui, &li), &mi)| ((ui + li).exp() - mi).abs())
                .sum();
            iterations = it;
            if violation <= tolerance {
                converged = true;
                break;
            }
            if it < max_iters {
                self.row_update(&lse, &mut u);
            }
        }
        TransportPlan {
            plan: self.plan(&u, &v),
            row_potential: Array1::from_iter(u.iter().map(|x| x * self.eps)),
            col_potential: Array1::from_iter(v.iter().map(|x| x * self.eps)),
            iterations,
            marginal_violation: violation,
            converged,
        }
    }

    /// Reverse pass through the recorded iterations: maps the adjoint of the
    /// returned plan to the adjoint of the (unscaled) cost matrix.
    fn backward(&self, result: &TransportPlan, trace: &SinkhornTrace, plan_bar: &Array2<f64>) -> Array2<f64> {
        let (n, m) = (self.n, self.m);
        let w = plan_bar * &result.plan;
        // column-major like the cost
        let mut cost_bar = vec![0.0; n * m];
        for j in 0..m {
            for i in 0..n {
                cost_bar[j * n + i] = -w[[i, j]];
            }
        }
        let mut u_bar: Vec<f64> = w.sum_axis(Axis(1)).to_vec();
        let mut v_bar: Vec<f64> = w.sum_axis(Axis(0)).to_vec();
        let v_init = self.initial_v();
        let mut q = vec![0.0; n];
        let mut p = vec![0.0; m];
        for t in (0..trace.rows.len()).rev() {
            // cols[t] = col_update(rows[t])
            let u = &trace.rows[t];
            for j in 0..m {
                if v_bar[j] == 0.0 {
                    continue;
                }
                let c = self.column(j);
                let mut max = f64::NEG_INFINITY;
                for i in 0..n {
                    q[i] = u[i] - c[i];
                    max = max.max(q[i]);
                }
                let mut total = 0.0;
                for qi in q.iter_mut() {
                    *qi = (*qi - max).exp();
                    total += *qi;
                }
                let scale = v_bar[j] / total;
                let cb = &mut cost_bar[j * n..(j + 1) * n];
                for i in 0..n {
                    let contrib = scale * q[i];
                    u_bar[i] -= contrib;
                    cb[i] += contrib;
                }
                v_bar[j] = 0.0;
            }
            // rows[t] = row_update(cols[t - 1])
            let v = if t == 0 { &v_init } else { &trace.cols[t - 1] };
            for i in 0..n {
                if u_bar[i] == 0.0 {
                    continue;
                }
                let mut max = f64::NEG_INFINITY;
                for j in 0..m {
                    p[j] = v[j] - self.scaled_cost[j * n + i];
                    max = max.max(p[j]);
                }
                let mut total = 0.0;
                for pj in p.iter_mut() {
                    *pj = (*pj - max).exp();
                    total += *pj;
                }
                for j in 0..m {
                    let contrib = u_bar[i] * p[j] / total;
                    v_bar[j] -= contrib;
                    cost_bar[j * n + i] += contrib;
                }
                u_bar[i] = 0.0;
            }
        }
        if let Some((a, b)) = self.start {
            // v_init[0] = (c_a0 - c_a1 + c_b0 - c_b1) / 2
            let half = 0.5 * v_bar[0];
            for i in [a, b] {
                cost_bar[i] += half;
                cost_bar[n + i] -= half;
            }
        }
        Array2::from_shape_fn((n, m), |(i, j)| cost_bar[j * n + i] / self.eps)
    }
}

fn solver(
    cost: ArrayView2<f64>,
    row_marginal: ArrayView1<f64>,
    col_marginal: ArrayView1<f64>,
    ot_epsilon: f64,
) -> Result<Solver> {
    let (n, m) = cost.dim();
    if row_marginal.len() != n || col_marginal.len() != m {
        return Err(AdfaError::Argument(format!(
            "marginal lengths ({}, {}) do not match cost shape {n}x{m}",
            row_marginal.len(),
            col_marginal.len()
        )));
    }
    if n == 0 || m == 0 {
        return Err(AdfaError::Argument("empty transport problem".into()));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(AdfaError::Numeric("non-finite entry in transport cost".into()));
    }
    if row_marginal.iter().chain(col_marginal.iter()).any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(AdfaError::Argument("marginals must be finite and nonnegative".into()));
    }
    let (rs, cs) = (row_marginal.sum(), col_marginal.sum());
    if (rs - cs).abs() > 1e-9 {
        return Err(AdfaError::Argument(format!(
            "marginal masses differ: rows {rs}, columns {cs}"
        )));
    }
    if !(ot_epsilon > 0.0) {
        return Err(AdfaError::Argument(format!("ot_epsilon must be positive, got {ot_epsilon}")));
    }
    let scaled_cost = cost.t().iter().map(|c| c / ot_epsilon).collect();
    Ok(Solver {
        n,
        m,
        scaled_cost,
        log_mu: row_marginal.iter().map(|v| v.ln()).collect(),
        mu: row_marginal.to_vec(),
        log_nu: col_marginal.iter().map(|v| v.ln()).collect(),
        eps: ot_epsilon,
        start: None,
    })
}

/// Entropy-regularized optimal transport between `row_marginal` and
/// `col_marginal` under `cost`, solved in the log domain.
///
/// The last update of every iteration is the column scaling, so the column
/// marginals of the returned plan hold to rounding error; the reported
/// violation is on the rows. Running out of iterations is not an error, it is
/// logged and reflected in [`TransportPlan::converged`].
pub fn sinkhorn(
    cost: ArrayView2<f64>,
    row_marginal: ArrayView1<f64>,
    col_marginal: ArrayView1<f64>,
    cfg: &SoftTopKConfig,
) -> Result<TransportPlan> {
    let s = solver(cost, row_marginal, col_marginal, cfg.ot_epsilon)?;
    let plan = s.run(cfg.max_iters, cfg.tolerance, None);
    if !plan.converged {
        debug!(
            "sinkhorn stopped after {} iterations with marginal violation {:.3e}",
            plan.iterations, plan.marginal_violation
        );
    }
    Ok(plan)
}

/// Soft membership of each entry in the set of the `K` smallest.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftIndicator {
    pub z: Array1<f64>,
    pub iterations: usize,
    pub marginal_violation: f64,
    pub converged: bool,
}

/// Two-anchor transport problem built from one distance row.
struct AnchorProblem {
    cost: Array2<f64>,
    normalized: Vec<f64>,
    anchors: [f64; 2],
    /// Row maximum used as divisor, with its index.
    scale: Option<(f64, usize)>,
    argmin: usize,
    argmax: usize,
}

impl AnchorProblem {
    fn new(d: ArrayView1<f64>, cfg: &SoftTopKConfig) -> Result<Self> {
        let n = d.len();
        if cfg.k == 0 || cfg.k >= n {
            return Err(AdfaError::Argument(format!(
                "soft top-k needs 1 <= K < n, got K = {} with n = {n}",
                cfg.k
            )));
        }
        if let Some(bad) = d.iter().find(|v| !v.is_finite()) {
            return Err(AdfaError::Numeric(format!("non-finite distance {bad}")));
        }
        if d.iter().any(|&v| v < 0.0) {
            return Err(AdfaError::Argument("distances must be nonnegative".into()));
        }
        let mut argmin = 0;
        let mut argmax = 0;
        for (i, &v) in d.iter().enumerate() {
            if v < d[argmin] {
                argmin = i;
            }
            if v > d[argmax] {
                argmax = i;
            }
        }
        let max = d[argmax];
        let scale = (max > 0.0).then_some((max, argmax));
        let normalized: Vec<f64> = match scale {
            Some((s, _)) => d.iter().map(|v| v / s).collect(),
            None => d.to_vec(),
        };
        let anchors = match cfg.anchor_mode {
            AnchorMode::MinMaxOfInput => [normalized[argmin], normalized[argmax]],
            AnchorMode::Fixed => [0.0, 1.0],
        };
        let cost = Array2::from_shape_fn((n, 2), |(i, j)| cfg.cost_power.cost(normalized[i] - anchors[j]));
        Ok(AnchorProblem {
            cost,
            normalized,
            anchors,
            scale,
            argmin,
            argmax,
        })
    }

    fn marginals(n: usize, k: usize) -> (Array1<f64>, Array1<f64>) {
        let nf = n as f64;
        (
            Array1::from_elem(n, 1.0 / nf),
            Array1::from(vec![k as f64 / nf, (n - k) as f64 / nf]),
        )
    }

    /// Chain rule from the cost adjoint back to the raw distances.
    fn distance_grad(&self, cost_bar: &Array2<f64>, cfg: &SoftTopKConfig) -> Array1<f64> {
        let n = self.normalized.len();
        let mut x_bar = vec![0.0; n];
        let mut anchor_bar = [0.0; 2];
        for i in 0..n {
            for j in 0..2 {
                let dc = cost_bar[[i, j]] * cfg.cost_power.derivative(self.normalized[i] - self.anchors[j]);
                x_bar[i] += dc;
                anchor_bar[j] -= dc;
            }
        }
        if cfg.anchor_mode == AnchorMode::MinMaxOfInput {
            x_bar[self.argmin] += anchor_bar[0];
            x_bar[self.argmax] += anchor_bar[1];
        }
        match self.scale {
            Some((s, idx)) => {
                let weighted: f64 = x_bar.iter().zip(&self.normalized).map(|(g, x)| g * x).sum();
                let mut d_bar: Vec<f64> = x_bar.iter().map(|g| g / s).collect();
                d_bar[idx] -= weighted / s;
                Array1::from(d_bar)
            }
            None => Array1::from(x_bar),
        }
    }
}

fn indicator(plan: &TransportPlan, k: usize) -> SoftIndicator {
    let n = plan.plan.nrows() as f64;
    let z = plan.plan.column(0).mapv(|v| v * n);
    debug_assert!((z.sum() - k as f64).abs() <= 1e-4, "soft top-k mass {} for K = {k}", z.sum());
    SoftIndicator {
        z,
        iterations: plan.iterations,
        marginal_violation: plan.marginal_violation,
        converged: plan.converged,
    }
}

/// Soft top-k indicator of the `cfg.k` smallest entries of `d`.
pub fn soft_topk(d: ArrayView1<f64>, cfg: &SoftTopKConfig) -> Result<SoftIndicator> {
    let problem = AnchorProblem::new(d, cfg)?;
    let (mu, nu) = AnchorProblem::marginals(d.len(), cfg.k);
    let s = solver(problem.cost.view(), mu.view(), nu.view(), cfg.ot_epsilon)?.with_threshold_start(cfg.k);
    let plan = s.run(cfg.max_iters, cfg.tolerance, None);
    if !plan.converged {
        debug!(
            "soft top-k stopped after {} iterations with marginal violation {:.3e}",
            plan.iterations, plan.marginal_violation
        );
    }
    Ok(indicator(&plan, cfg.k))
}

/// Row-wise [`soft_topk`] over a matrix of distance rows.
pub fn soft_topk_batch(dmat: ArrayView2<f64>, cfg: &SoftTopKConfig) -> Result<Array2<f64>> {
    let (m, n) = dmat.dim();
    let rows: Vec<Array1<f64>> = dmat
        .axis_iter(Axis(0))
        .into_par_iter()
        .map(|row| soft_topk(row, cfg).map(|s| s.z))
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros((m, n));
    for (mut dst, src) in out.outer_iter_mut().zip(rows) {
        dst.assign(&src);
    }
    Ok(out)
}

/// Forward pass plus the vector-Jacobian product `upstream^T dz/dd`.
pub fn soft_topk_with_vjp(
    d: ArrayView1<f64>,
    cfg: &SoftTopKConfig,
    upstream: ArrayView1<f64>,
) -> Result<(SoftIndicator, Array1<f64>)> {
    let n = d.len();
    if upstream.len() != n {
        return Err(AdfaError::Argument(format!(
            "upstream length {} does not match {n} distances",
            upstream.len()
        )));
    }
    let problem = AnchorProblem::new(d, cfg)?;
    let (mu, nu) = AnchorProblem::marginals(n, cfg.k);
    let s = solver(problem.cost.view(), mu.view(), nu.view(), cfg.ot_epsilon)?.with_threshold_start(cfg.k);
    let nf = n as f64;
    let (ind, cost_bar) = match cfg.backward_mode {
        BackwardMode::Unrolled => {
            let mut trace = SinkhornTrace::default();
            let plan = s.run(cfg.max_iters, cfg.tolerance, Some(&mut trace));
            if !plan.converged {
                debug!(
                    "sinkhorn stopped after {} iterations with marginal violation {:.3e}",
                    plan.iterations, plan.marginal_violation
                );
            }
            let mut plan_bar = Array2::zeros((n, 2));
            plan_bar.column_mut(0).assign(&upstream.mapv(|v| v * nf));
            let cost_bar = s.backward(&plan, &trace, &plan_bar);
            (indicator(&plan, cfg.k), cost_bar)
        }
        BackwardMode::Implicit => {
            let plan = s.run(cfg.max_iters, cfg.tolerance, None);
            if !plan.converged {
                return Err(AdfaError::Numeric(format!(
                    "implicit backward needs a converged forward pass; violation {:.3e} after {} iterations",
                    plan.marginal_violation, plan.iterations
                )));
            }
            let eps = cfg.ot_epsilon;
            // z_i = sigmoid((delta - (C_i0 - C_i1)) / eps) at the fixed point.
            let slopes: Vec<f64> = plan
                .plan
                .outer_iter()
                .map(|row| {
                    let z = row[0] / (row[0] + row[1]);
                    z * (1.0 - z) / eps
                })
                .collect();
            let total: f64 = slopes.iter().sum();
            let mut cost_bar = Array2::zeros((n, 2));
            if total > 0.0 {
                let mean_v: f64 = slopes.iter().zip(upstream.iter()).map(|(s, v)| s * v).sum::<f64>() / total;
                for (j, &sj) in slopes.iter().enumerate() {
                    let delta_bar = sj * (mean_v - upstream[j]);
                    cost_bar[[j, 0]] = delta_bar;
                    cost_bar[[j, 1]] = -delta_bar;
                }
            }
            (indicator(&plan, cfg.k), cost_bar)
        }
    };
    Ok((ind, problem.distance_grad(&cost_bar, cfg)))
}

/// Vector-Jacobian product of [`soft_topk`] with respect to the distances.
pub fn soft_topk_vjp(d: ArrayView1<f64>, cfg: &SoftTopKConfig, upstream: ArrayView1<f64>) -> Result<Array1<f64>> {
    soft_topk_with_vjp(d, cfg, upstream).map(|(_, g)| g)
}

/// Exact top-k indicator: ones at the `k` smallest entries, ties to the lower
/// index.
pub fn hard_topk(d: ArrayView1<f64>, k: usize) -> Result<Array1<f64>> {
    let n = d.len();
    if k == 0 || k > n {
        return Err(AdfaError::Argument(format!("hard top-k needs 1 <= k <= n, got k = {k}, n = {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    let mut out = Array1::zeros(n);
    for &i in &order[..k] {
        out[i] = 1.0;
    }
    Ok(out)
}
