//! Cosine-distance costs between token sets, the IPOT proximal-point solver
//! for the transport plan, an exact small-instance LP oracle, and the
//! alignment loss.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IpotConfig {
    pub beta: f64,
    pub outer_iters: usize,
    pub inner_iters: usize,
}

impl Default for IpotConfig {
    fn default() -> Self {
        Self { beta: 0.5, outer_iters: 50, inner_iters: 1 }
    }
}

/// Above this value of `min(C) / beta` the solver runs in the log domain.
pub const LOG_DOMAIN_THRESHOLD: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan<T> {
    pub plan: Tensor<T>,
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub ot_cost: T,
}

/// `C[i][j] = 1 - cos(a_i, v_j)`. Rows with zero norm get distance 1 to
/// everything, with a warning.
pub fn cosine_cost<T: Scalar>(eeg: &Tensor<T>, video: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let a = tape.constant(eeg.clone());
    let v = tape.constant(video.clone());
    let c = cosine_cost_var(&mut tape, a, v)?;
    Ok(tape.value(c).clone())
}

/// Differentiable cosine cost on the tape.
pub fn cosine_cost_var<T: Scalar>(tape: &mut Tape<T>, eeg: Var, video: Var) -> Result<Var> {
    let (ne, de) = tape.value(eeg).dims2()?;
    let (nv, dv) = tape.value(video).dims2()?;
    if de != dv {
        return Err(dim_err(format!("cosine cost between widths {de} and {dv}")));
    }
    let zero_rows = |t: &Tensor<T>, n: usize| (0..n).filter(|&i| t.row(i).iter().all(|x| *x == T::zero())).count();
    let zeros = zero_rows(tape.value(eeg), ne) + zero_rows(tape.value(video), nv);
    if zeros > 0 {
        log::warn!("{zeros} zero-norm token(s) in cosine cost; their distances are set to 1");
    }
    let an = tape.l2_normalize_rows(eeg)?;
    let vn = tape.l2_normalize_rows(video)?;
    let vt = tape.transpose(vn)?;
    let sim = tape.matmul(an, vt)?;
    let neg = tape.scale(sim, -T::one());
    Ok(tape.add_scalar(neg, T::one()))
}

fn check_marginal<T: Scalar>(m: &[T], what: &str) -> Result<()> {
    let sum: f64 = m.iter().map(|x| x.as_f64()).sum();
    if m.iter().any(|x| x.as_f64() < 0.0 || !x.as_f64().is_finite()) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("marginal {what} must be nonnegative and sum to 1 (sum {sum})")));
    }
    Ok(())
}

pub fn uniform<T: Scalar>(n: usize) -> Vec<T> {
    vec![T::one() / T::lit(n as f64); n]
}

/// IPOT with uniform marginals.
pub fn ipot_uniform<T: Scalar>(c: &Tensor<T>, cfg: &IpotConfig) -> Result<TransportPlan<T>> {
    let (n, m) = c.dims2()?;
    ipot(c, &uniform(n), &uniform(m), cfg)
}

pub fn ipot<T: Scalar>(c: &Tensor<T>, a: &[T], b: &[T], cfg: &IpotConfig) -> Result<TransportPlan<T>> {
    Ok(ipot_trace(c, a, b, cfg)?.0)
}

/// Runs IPOT and also returns the transport cost of the (rounded) plan after
/// every outer iteration.
pub fn ipot_trace<T: Scalar>(c: &Tensor<T>, a: &[T], b: &[T], cfg: &IpotConfig) -> Result<(TransportPlan<T>, Vec<T>)> {
    let (n, m) = c.dims2()?;
    if a.len() != n || b.len() != m {
        return Err(dim_err(format!("marginals of length {}/{} for a {n}x{m} cost", a.len(), b.len())));
    }
    check_marginal(a, "a")?;
    check_marginal(b, "b")?;
    if !(cfg.beta > 0.0) {
        return Err(Error::Config(format!("IPOT beta must be positive, got {}", cfg.beta)));
    }
    let cd = c.data();
    if cd.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite transport cost (beta = {})", cfg.beta)));
    }
    let beta = T::lit(cfg.beta);
    let cmin = cd.iter().copied().fold(T::infinity(), T::min);
    let log_domain = (cmin / beta).as_f64() > LOG_DOMAIN_THRESHOLD;
    let mut trace = Vec::with_capacity(cfg.outer_iters);
    let mut plan = if log_domain {
        ipot_log(cd, a, b, n, m, beta, cfg, &mut trace)?
    } else {
        let g: Vec<T> = cd.iter().map(|&x| (-x / beta).exp()).collect();
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("IPOT kernel exp(-C/beta) is not finite for beta = {}", cfg.beta)));
        }
        ipot_plain(cd, &g, a, b, n, m, cfg, &mut trace)?
    };
    round_to_marginals(&mut plan, a, b, n, m);
    let cost = dot(cd, &plan);
    let plan = Tensor::new(vec![n, m], plan)?;
    Ok((TransportPlan { plan, a: a.to_vec(), b: b.to_vec(), ot_cost: cost }, trace))
}

fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    x.iter().zip(y).map(|(&p, &q)| p * q).sum()
}

#[allow(clippy::too_many_arguments)]
fn ipot_plain<T: Scalar>(
    cd: &[T],
    g: &[T],
    a: &[T],
    b: &[T],
    n: usize,
    m: usize,
    cfg: &IpotConfig,
    trace: &mut Vec<T>,
) -> Result<Vec<T>> {
    let mut t = vec![T::one() / T::lit((n * m) as f64); n * m];
    let mut u = vec![T::one(); n];
    let mut v = vec![T::one() / T::lit(m as f64); m];
    let mut q = vec![T::zero(); n * m];
    for _ in 0..cfg.outer_iters {
        for k in 0..n * m {
            q[k] = g[k] * t[k];
        }
        for _ in 0..cfg.inner_iters.max(1) {
            for i in 0..n {
                let s = dot(&q[i * m..(i + 1) * m], &v);
                u[i] = a[i] / s;
            }
            for j in 0..m {
                let s: T = (0..n).map(|i| q[i * m + j] * u[i]).sum();
                v[j] = b[j] / s;
            }
        }
        for i in 0..n {
            for j in 0..m {
                t[i * m + j] = u[i] * q[i * m + j] * v[j];
            }
        }
        if t.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("IPOT plan became non-finite (beta = {})", cfg.beta)));
        }
        let mut rounded = t.clone();
        round_to_marginals(&mut rounded, a, b, n, m);
        trace.push(dot(cd, &rounded));
    }
    Ok(t)
}

fn logsumexp<T: Scalar>(xs: impl Iterator<Item = T> + Clone) -> T {
    let mx = xs.clone().fold(T::neg_infinity(), T::max);
    if mx == T::neg_infinity() {
        return mx;
    }
    mx + xs.map(|x| (x - mx).exp()).sum::<T>().ln()
}

/// Same iteration with every multiplicative quantity kept as a logarithm.
#[allow(clippy::too_many_arguments)]
fn ipot_log<T: Scalar>(
    cd: &[T],
    a: &[T],
    b: &[T],
    n: usize,
    m: usize,
    beta: T,
    cfg: &IpotConfig,
    trace: &mut Vec<T>,
) -> Result<Vec<T>> {
    let la: Vec<T> = a.iter().map(|x| x.ln()).collect();
    let lb: Vec<T> = b.iter().map(|x| x.ln()).collect();
    let mut lt = vec![-T::lit((n * m) as f64).ln(); n * m];
    let mut lu = vec![T::zero(); n];
    let mut lv = vec![-T::lit(m as f64).ln(); m];
    let mut lq = vec![T::zero(); n * m];
    let mut t = vec![T::zero(); n * m];
    for _ in 0..cfg.outer_iters {
        for k in 0..n * m {
            lq[k] = -cd[k] / beta + lt[k];
        }
        for _ in 0..cfg.inner_iters.max(1) {
            for i in 0..n {
                lu[i] = la[i] - logsumexp((0..m).map(|j| lq[i * m + j] + lv[j]));
            }
            for j in 0..m {
                lv[j] = lb[j] - logsumexp((0..n).map(|i| lq[i * m + j] + lu[i]));
            }
        }
        for i in 0..n {
            for j in 0..m {
                lt[i * m + j] = lu[i] + lq[i * m + j] + lv[j];
            }
        }
        for (x, l) in t.iter_mut().zip(&lt) {
            *x = l.exp();
        }
        if t.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("log-domain IPOT became non-finite (beta = {})", beta)));
        }
        let mut rounded = t.clone();
        round_to_marginals(&mut rounded, a, b, n, m);
        trace.push(dot(cd, &rounded));
    }
    if cfg.outer_iters == 0 {
        for (x, l) in t.iter_mut().zip(&lt) {
            *x = l.exp();
        }
    }
    Ok(t)
}

/// Projects a nonnegative matrix onto the transport polytope: scale down
/// overfull rows, then overfull columns, then add the rank-one correction of
/// the remaining deficits (all nonnegative).
pub fn round_to_marginals<T: Scalar>(t: &mut [T], a: &[T], b: &[T], n: usize, m: usize) {
    for i in 0..n {
        let r: T = t[i * m..(i + 1) * m].iter().copied().sum();
        if r > a[i] {
            let s = a[i] / r;
            t[i * m..(i + 1) * m].iter_mut().for_each(|x| *x *= s);
        }
    }
    for j in 0..m {
        let cs: T = (0..n).map(|i| t[i * m + j]).sum();
        if cs > b[j] {
            let s = b[j] / cs;
            (0..n).for_each(|i| t[i * m + j] *= s);
        }
    }
    let er: Vec<T> = (0..n).map(|i| (a[i] - t[i * m..(i + 1) * m].iter().copied().sum::<T>()).max(T::zero())).collect();
    let ec: Vec<T> = (0..m).map(|j| (b[j] - (0..n).map(|i| t[i * m + j]).sum::<T>()).max(T::zero())).collect();
    let total: T = ec.iter().copied().sum();
    if total > T::zero() {
        for i in 0..n {
            for j in 0..m {
                t[i * m + j] += er[i] * ec[j] / total;
            }
        }
    }
}

/// `lambda · Σ C ⊙ T*` on the tape, with the plan held constant so the
/// gradient reaches only the cost.
pub fn ot_loss_var<T: Scalar>(tape: &mut Tape<T>, cost: Var, plan: &Tensor<T>, lambda: T) -> Result<Var> {
    if tape.shape(cost) != plan.shape() {
        return Err(dim_err(format!("plan {:?} vs cost {:?}", plan.shape(), tape.shape(cost))));
    }
    let p = tape.constant(plan.clone());
    let prod = tape.mul(cost, p)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, lambda))
}

/// `lambda · tr(Cᵀ T*)`.
pub fn ot_loss<T: Scalar>(plan: &Tensor<T>, cost: &Tensor<T>, lambda: T) -> Result<T> {
    if plan.shape() != cost.shape() {
        return Err(dim_err(format!("plan {:?} vs cost {:?}", plan.shape(), cost.shape())));
    }
    Ok(lambda * dot(cost.data(), plan.data()))
}

/// Exact transportation LP optimum by enumerating all basic feasible
/// solutions (spanning trees of the bipartite support graph). Limited to
/// `n · m ≤ 16`.
pub fn exact_ot_oracle(c: &Tensor<f64>, a: &[f64], b: &[f64]) -> Result<TransportPlan<f64>> {
    let (n, m) = c.dims2()?;
    if n * m > 16 {
        return Err(Error::Contract(format!("exact OT oracle is limited to 16 cells, got {n}x{m}")));
    }
    if a.len() != n || b.len() != m {
        return Err(dim_err("marginal lengths do not match the cost"));
    }
    check_marginal(a, "a")?;
    check_marginal(b, "b")?;
    let k = n + m - 1;
    let cells = n * m;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut subset = Vec::with_capacity(k);
    let mut visit = |subset: &[usize]| {
        if let Some(x) = solve_tree(subset, a, b, n, m) {
            let cost = dot(c.data(), &x);
            if best.as_ref().is_none_or(|(bc, _)| cost < *bc) {
                best = Some((cost, x));
            }
        }
    };
    combinations(cells, k, 0, &mut subset, &mut visit);
    let (cost, x) = best.ok_or_else(|| Error::Numeric("no basic feasible solution found".into()))?;
    Ok(TransportPlan { plan: Tensor::new(vec![n, m], x)?, a: a.to_vec(), b: b.to_vec(), ot_cost: cost })
}

fn combinations(n: usize, k: usize, start: usize, cur: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
    if cur.len() == k {
        f(cur);
        return;
    }
    for i in start..n {
        if n - i < k - cur.len() {
            break;
        }
        cur.push(i);
        combinations(n, k, i + 1, cur, f);
        cur.pop();
    }
}

/// Solves the basis `cells` by repeatedly fixing a cell that is the only
/// unfixed one in its row or column. Returns `None` when the cells do not
/// form a spanning tree or the solution is negative.
fn solve_tree(cells: &[usize], a: &[f64], b: &[f64], n: usize, m: usize) -> Option<Vec<f64>> {
    let mut parent: Vec<usize> = (0..n + m).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    for &cell in cells {
        let (ra, rb) = (find(&mut parent, cell / m), find(&mut parent, n + cell % m));
        if ra == rb {
            return None;
        }
        parent[ra] = rb;
    }
    let mut row_left = a.to_vec();
    let mut col_left = b.to_vec();
    let mut open: Vec<usize> = cells.to_vec();
    let mut x = vec![0.0; n * m];
    while !open.is_empty() {
        let pos = open.iter().position(|&cell| {
            let (i, j) = (cell / m, cell % m);
            open.iter().filter(|&&o| o / m == i).count() == 1 || open.iter().filter(|&&o| o % m == j).count() == 1
        })?;
        let cell = open.swap_remove(pos);
        let (i, j) = (cell / m, cell % m);
        let row_leaf = open.iter().all(|&o| o / m != i);
        let v = if row_leaf { row_left[i] } else { col_left[j] };
        if v < -1e-12 {
            return None;
        }
        let v = v.max(0.0);
        x[cell] = v;
        row_left[i] -= v;
        col_left[j] -= v;
    }
    if row_left.iter().chain(&col_left).any(|r| r.abs() > 1e-9) {
        return None;
    }
    Some(x)
}
