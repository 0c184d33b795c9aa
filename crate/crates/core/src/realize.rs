//! Full-information allocation rules as dense tables over the joint support,
//! their realized and interim quantities, and a solver that finds a table
//! realizing a prescribed utility vector.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dist::{feq, JointOutcome, JointSupport};
use crate::error::{Error, Result};
use crate::geometry::support_value;
use crate::{dot, norm};

/// Iteration cap of the feasibility solver.
pub const REALIZE_MAX_ITER: usize = 10_000;

/// Rounds without a relative drop of the residual norm before giving up.
pub const REALIZE_PATIENCE: usize = 200;

/// An allocation rule: a point of the simplex for every joint outcome.
#[derive(Clone, Debug)]
pub struct AllocationTable {
    support: Arc<JointSupport>,
    alloc: Vec<f64>,
}

impl AllocationTable {
    pub fn zeros(support: Arc<JointSupport>) -> Self {
        let len = support.len() * support.n();
        Self { support, alloc: vec![0.0; len] }
    }

    /// The report-independent rule allocating `q_i` to agent `i`.
    pub fn constant(support: Arc<JointSupport>, q: &[f64]) -> Self {
        let n = support.n();
        let mut alloc = Vec::with_capacity(support.len() * n);
        for _ in 0..support.len() {
            alloc.extend_from_slice(&q[..n]);
        }
        Self { support, alloc }
    }

    pub fn from_fn(support: Arc<JointSupport>, mut f: impl FnMut(&JointOutcome<'_>) -> Vec<f64>) -> Self {
        let mut alloc = Vec::with_capacity(support.len() * support.n());
        for o in support.iter() {
            alloc.extend(f(&o));
        }
        Self { support, alloc }
    }

    /// Builds a table from raw row-major entries after checking simplex membership.
    pub fn from_entries(support: Arc<JointSupport>, alloc: Vec<f64>) -> Result<Self> {
        let n = support.n();
        if alloc.len() != support.len() * n {
            return Err(Error::InvalidInput("allocation size does not match the support".into()));
        }
        for row in alloc.chunks(n) {
            let s: f64 = row.iter().sum();
            if row.iter().any(|p| *p < -1e-12) || s > 1.0 + 1e-12 {
                return Err(Error::InvalidInput(format!("entry {row:?} is not in the simplex")));
            }
        }
        Ok(Self { support, alloc })
    }

    /// Convex combination of tables on the same support.
    pub fn mix(parts: &[(f64, &AllocationTable)]) -> Self {
        let support = parts[0].1.support.clone();
        let mut alloc = vec![0.0; parts[0].1.alloc.len()];
        for (w, t) in parts {
            for (a, b) in alloc.iter_mut().zip(&t.alloc) {
                *a += w * b;
            }
        }
        Self { support, alloc }
    }

    pub fn support(&self) -> &Arc<JointSupport> {
        &self.support
    }

    pub fn entry(&self, k: usize) -> &[f64] {
        let n = self.support.n();
        &self.alloc[k * n..(k + 1) * n]
    }

    pub fn entries(&self) -> &[f64] {
        &self.alloc
    }

    /// `E[u_i p_i(u)]` for every agent, by exact enumeration.
    pub fn realized_utilities(&self) -> Vec<f64> {
        let n = self.support.n();
        let mut u = vec![0.0; n];
        for k in 0..self.support.len() {
            let vals = self.support.values(k);
            let p = self.support.prob(k);
            let a = self.entry(k);
            for i in 0..n {
                u[i] += p * vals[i] * a[i];
            }
        }
        u
    }

    /// Largest distance of an entry from the simplex.
    pub fn simplex_violation(&self) -> f64 {
        let n = self.support.n();
        self.alloc
            .chunks(n)
            .map(|row| {
                let neg = row.iter().map(|p| (-p).max(0.0)).fold(0.0, f64::max);
                neg.max(row.iter().sum::<f64>() - 1.0)
            })
            .fold(0.0, f64::max)
    }

    /// One row per joint outcome: atom indices, probability, then allocations.
    pub fn to_csv(&self) -> String {
        let n = self.support.n();
        let mut out = String::new();
        let header: Vec<String> = (0..n)
            .map(|i| format!("atom{}", i + 1))
            .chain(std::iter::once("prob".to_string()))
            .chain((0..n).map(|i| format!("p{}", i + 1)))
            .collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for k in 0..self.support.len() {
            let mut cells: Vec<String> =
                self.support.atom_indices(k).iter().map(|a| a.to_string()).collect();
            cells.push(crate::fmt_f64(self.support.prob(k)));
            cells.extend(self.entry(k).iter().map(|p| crate::fmt_f64(*p)));
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum TieRule {
    #[default]
    UniformSplit,
    /// Earlier agents in the list win ties.
    FixedPriority(Vec<usize>),
}

/// Allocates the whole unit to a maximizer of `beta_i u_i` on every outcome.
pub fn first_best_table(support: &Arc<JointSupport>, beta: &[f64], tie: &TieRule) -> Result<AllocationTable> {
    let n = support.n();
    if beta.len() != n || beta.iter().any(|b| !b.is_finite() || *b < 0.0) || beta.iter().all(|b| *b == 0.0) {
        return Err(Error::InvalidInput("beta must be nonnegative and nonzero".into()));
    }
    let mut winners = Vec::with_capacity(n);
    Ok(AllocationTable::from_fn(support.clone(), |o| {
        let mut row = vec![0.0; n];
        let m = (0..n).filter(|&i| beta[i] > 0.0).map(|i| beta[i] * o.values[i]).fold(f64::MIN, f64::max);
        winners.clear();
        winners.extend((0..n).filter(|&i| beta[i] > 0.0 && feq(beta[i] * o.values[i], m)));
        spread(&mut row, &winners, tie);
        row
    }))
}

fn spread(row: &mut [f64], winners: &[usize], tie: &TieRule) {
    if winners.is_empty() {
        return;
    }
    match tie {
        TieRule::UniformSplit => {
            let w = 1.0 / winners.len() as f64;
            for &i in winners {
                row[i] = w;
            }
        }
        TieRule::FixedPriority(order) => {
            let pick = order.iter().find(|i| winners.contains(i)).copied().unwrap_or(winners[0]);
            row[pick] = 1.0;
        }
    }
}

/// Linear maximization oracle over realizable vectors for a signed direction:
/// agents with a nonpositive coefficient never receive the resource, and
/// nothing is allocated when no weighted value is positive.
pub(crate) fn oracle_table(support: &Arc<JointSupport>, beta: &[f64]) -> AllocationTable {
    let n = support.n();
    let mut winners = Vec::with_capacity(n);
    AllocationTable::from_fn(support.clone(), |o| {
        let mut row = vec![0.0; n];
        let m = (0..n).filter(|&i| beta[i] > 0.0).map(|i| beta[i] * o.values[i]).fold(0.0, f64::max);
        if m > 0.0 {
            winners.clear();
            winners.extend((0..n).filter(|&i| beta[i] > 0.0 && feq(beta[i] * o.values[i], m)));
            spread(&mut row, &winners, &TieRule::UniformSplit);
        }
        row
    })
}

/// Realized vector of [`oracle_table`] without materializing the table.
pub(crate) fn oracle_point(support: &JointSupport, beta: &[f64]) -> Vec<f64> {
    let n = support.n();
    let mut u = vec![0.0; n];
    let mut winners = Vec::with_capacity(n);
    for k in 0..support.len() {
        let vals = support.values(k);
        let m = (0..n).filter(|&i| beta[i] > 0.0).map(|i| beta[i] * vals[i]).fold(0.0, f64::max);
        if m <= 0.0 {
            continue;
        }
        winners.clear();
        winners.extend((0..n).filter(|&i| beta[i] > 0.0 && feq(beta[i] * vals[i], m)));
        let w = support.prob(k) / winners.len() as f64;
        for &i in &winners {
            u[i] += w * vals[i];
        }
    }
    u
}

/// Interim allocation `P_i(v) = E[p_i(v, u_{-i})]` on agent `i`'s support atoms.
#[derive(Clone, Debug, PartialEq)]
pub struct InterimAllocation {
    pub agent: usize,
    /// Support atoms of the agent, increasing.
    pub atoms: Vec<f64>,
    /// Their probabilities.
    pub probs: Vec<f64>,
    pub values: Vec<f64>,
    pub monotone: bool,
}

impl InterimAllocation {
    /// Position of the support atom governing report `v`: the largest atom at
    /// or below `v`, the first atom for reports below every atom.
    pub fn position(&self, v: f64) -> usize {
        self.atoms.iter().rposition(|a| *a <= v + 1e-12).unwrap_or(0)
    }

    /// Right-continuous step extension.
    pub fn at(&self, v: f64) -> f64 {
        self.values[self.position(v)]
    }

    /// `∫_0^v P(x) dx` with `P` extended by its first value below the first atom.
    pub fn integral_to(&self, v: f64) -> f64 {
        let mut total = 0.0;
        let mut left = 0.0;
        let mut current = self.values[0];
        for (k, &a) in self.atoms.iter().enumerate() {
            if a >= v {
                break;
            }
            // On [left, a) the step value is that of the previous atom
            // (or the first atom when nothing lies below).
            total += (a - left) * current;
            left = a;
            current = self.values[k];
        }
        if v > left {
            total += (v - left) * current;
        }
        total
    }

    /// `∫_0^∞ P(u > x) P(x) dx` with the survival function of the agent.
    pub fn survival_weighted_integral(&self) -> f64 {
        // On [a_{k-1}, a_k) survival is the mass of atoms k.. and P is the
        // value at atom k-1 (atom 0 on the first piece).
        let m = self.atoms.len();
        let mut tail: Vec<f64> = vec![0.0; m + 1];
        for k in (0..m).rev() {
            tail[k] = tail[k + 1] + self.probs[k];
        }
        let mut total = 0.0;
        let mut left = 0.0;
        for k in 0..m {
            let val = if k == 0 { self.values[0] } else { self.values[k - 1] };
            total += (self.atoms[k] - left) * tail[k] * val;
            left = self.atoms[k];
        }
        total
    }
}

pub fn interim_allocation(table: &AllocationTable, i: usize) -> InterimAllocation {
    let support = table.support();
    let dist = support.profile().dist(i);
    let supp = support.agent_support(i);
    let mut values = vec![0.0; supp.len()];
    for k in 0..support.len() {
        values[support.local_index(k, i)] += support.prob(k) * table.entry(k)[i];
    }
    let probs: Vec<f64> = supp.iter().map(|&a| dist.probs()[a]).collect();
    for (v, p) in values.iter_mut().zip(&probs) {
        *v /= p;
    }
    let monotone = values.windows(2).all(|w| w[1] >= w[0] - 1e-12);
    InterimAllocation {
        agent: i,
        atoms: supp.iter().map(|&a| dist.atoms()[a]).collect(),
        probs,
        values,
        monotone,
    }
}

/// A realizing table, or a direction along which the target exceeds the region.
#[derive(Clone, Debug)]
pub enum RealizeOutcome {
    Feasible(AllocationTable),
    Infeasible { witness: Vec<f64>, violation: f64 },
}

impl RealizeOutcome {
    pub fn feasible(self) -> Option<AllocationTable> {
        match self {
            RealizeOutcome::Feasible(t) => Some(t),
            RealizeOutcome::Infeasible { .. } => None,
        }
    }
}

/// Finds a table whose realized utilities match `target` within `tol` in the
/// max norm.
///
/// The realizable vectors form the convex hull of the oracle points, so this
/// is a minimum-norm-point problem for `q - target` over that hull, solved with
/// Wolfe's method. Whenever a direction separates the target by more than
/// `tol` the solver stops with that direction as witness.
pub fn realize_point(support: &Arc<JointSupport>, target: &[f64], tol: f64) -> Result<RealizeOutcome> {
    let n = support.n();
    if target.len() != n || target.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("target has the wrong length or is not finite".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidInput("tolerance must be positive".into()));
    }
    let means = support.profile().means();
    for i in 0..n {
        if target[i] < -tol {
            let mut w = vec![0.0; n];
            w[i] = -1.0;
            return Ok(RealizeOutcome::Infeasible { witness: w, violation: -target[i] });
        }
    }
    // Points of the NI simplex are realized by constant tables.
    let mut load = 0.0;
    let mut q = vec![0.0; n];
    let mut constant_ok = true;
    for i in 0..n {
        let v = target[i].max(0.0);
        if v > 0.0 {
            if means[i] <= 0.0 {
                constant_ok = false;
                break;
            }
            q[i] = v / means[i];
            load += q[i];
        }
    }
    if constant_ok && load <= 1.0 {
        return Ok(RealizeOutcome::Feasible(AllocationTable::constant(support.clone(), &q)));
    }

    let shift = |p: Vec<f64>| -> Vec<f64> { p.iter().zip(target).map(|(a, b)| a - b).collect() };
    // Active set: oracle directions, shifted points, convex weights.
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    let mut pts: Vec<Vec<f64>> = Vec::new();
    let mut lambda: Vec<f64> = Vec::new();

    let first_dir: Vec<f64> = target.iter().map(|v| v.max(0.0) + 1e-300).collect();
    pts.push(shift(oracle_point(support, &first_dir)));
    dirs.push(first_dir);
    lambda.push(1.0);
    let mut x = pts[0].clone();

    // Near the frontier the residual can creep down for thousands of rounds.
    let (mut best, mut best_iter) = (f64::INFINITY, 0);
    for iter in 0..REALIZE_MAX_ITER {
        let inf = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let nx2 = dot(&x, &x);
        if nx2 < best * (1.0 - 1e-9) {
            (best, best_iter) = (nx2, iter);
        } else if iter - best_iter >= REALIZE_PATIENCE {
            return Err(Error::SolverStall { iterations: iter, residual: inf });
        }
        if inf <= tol {
            let parts: Vec<(f64, AllocationTable)> =
                dirs.iter().zip(&lambda).map(|(d, l)| (*l, oracle_table(support, d))).collect();
            let refs: Vec<(f64, &AllocationTable)> = parts.iter().map(|(l, t)| (*l, t)).collect();
            return Ok(RealizeOutcome::Feasible(AllocationTable::mix(&refs)));
        }
        let nx = norm(&x);
        let beta: Vec<f64> = x.iter().map(|v| -v / nx).collect();
        let p_new = shift(oracle_point(support, &beta));
        // min over the hull of x.p equals x.p_new; positive means 0 is separated.
        let gap = -dot(&beta, &p_new);
        if gap > tol {
            let violation = dot(&beta, target) - support_value(support.profile(), &beta);
            return Ok(RealizeOutcome::Infeasible { witness: beta, violation });
        }
        if dot(&x, &x) - dot(&x, &p_new) <= 1e-15 * (1.0 + dot(&x, &x)) {
            // x is the minimum-norm point but still farther than tol:
            // separation holds with a margin below tol.
            let violation = dot(&beta, target) - support_value(support.profile(), &beta);
            if violation > 0.0 {
                return Ok(RealizeOutcome::Infeasible { witness: beta, violation });
            }
            return Err(Error::SolverStall { iterations: iter, residual: inf });
        }
        pts.push(p_new);
        dirs.push(beta);
        lambda.push(0.0);

        // Minor cycles.
        loop {
            let mu = match affine_minimizer(&pts) {
                Some(m) => m,
                None => break,
            };
            if mu.iter().all(|m| *m > 1e-14) {
                lambda = mu;
                break;
            }
            let mut theta = 1.0f64;
            for (l, m) in lambda.iter().zip(&mu) {
                if *m < *l {
                    theta = theta.min(l / (l - m));
                }
            }
            for (l, m) in lambda.iter_mut().zip(&mu) {
                *l = (1.0 - theta) * *l + theta * m;
            }
            let mut k = 0;
            while k < lambda.len() {
                if lambda[k] <= 1e-14 {
                    lambda.remove(k);
                    pts.remove(k);
                    dirs.remove(k);
                } else {
                    k += 1;
                }
            }
            let s: f64 = lambda.iter().sum();
            lambda.iter_mut().for_each(|l| *l /= s);
            if pts.len() == 1 {
                break;
            }
        }
        x = vec![0.0; n];
        for (l, p) in lambda.iter().zip(&pts) {
            for i in 0..n {
                x[i] += l * p[i];
            }
        }
    }
    let inf = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Err(Error::SolverStall { iterations: REALIZE_MAX_ITER, residual: inf })
}

/// Weights `mu` with unit sum minimizing `|Σ mu_k p_k|`.
fn affine_minimizer(pts: &[Vec<f64>]) -> Option<Vec<f64>> {
    let m = pts.len();
    if m == 1 {
        return Some(vec![1.0]);
    }
    let mut a = DMatrix::<f64>::zeros(m + 1, m + 1);
    for i in 0..m {
        for j in 0..m {
            a[(i, j)] = dot(&pts[i], &pts[j]);
        }
        a[(i, m)] = 1.0;
        a[(m, i)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(m + 1);
    b[m] = 1.0;
    // The unbounded `svd` can spin forever on nearly singular Gram matrices.
    let sol = a.try_svd(true, true, f64::EPSILON, 10_000)?.solve(&b, 1e-14).ok()?;
    let mu: Vec<f64> = (0..m).map(|k| sol[k]).collect();
    let s: f64 = mu.iter().sum();
    if !s.is_finite() || s.abs() < 1e-12 {
        return None;
    }
    Some(mu.iter().map(|v| v / s).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{DiscreteDist, UtilityProfile};

    fn e1() -> Arc<JointSupport> {
        let d = DiscreteDist::new(vec![1.0 / 6.0, 5.0 / 6.0], vec![0.5, 0.5]).unwrap();
        let p = UtilityProfile::new(1.0, vec![1.0, 1.0], vec![d.clone(), d]).unwrap();
        Arc::new(JointSupport::new(&p).unwrap())
    }

    #[test]
    fn first_best_split_and_priority() {
        let s = e1();
        let t = first_best_table(&s, &[1.0, 1.0], &TieRule::UniformSplit).unwrap();
        let u = t.realized_utilities();
        assert!((u[0] - 1.0 / 3.0).abs() < 1e-12 && (u[1] - 1.0 / 3.0).abs() < 1e-12);
        let t = first_best_table(&s, &[1.0, 1.0], &TieRule::FixedPriority(vec![0, 1])).unwrap();
        let u = t.realized_utilities();
        assert!((u[0] - 11.0 / 24.0).abs() < 1e-12 && (u[1] - 5.0 / 24.0).abs() < 1e-12);
        let p = interim_allocation(&t, 0);
        assert_eq!(p.values, vec![0.5, 1.0]);
    }

    #[test]
    fn interim_of_split() {
        let s = e1();
        let t = first_best_table(&s, &[1.0, 1.0], &TieRule::UniformSplit).unwrap();
        let p = interim_allocation(&t, 0);
        assert!((p.values[0] - 0.25).abs() < 1e-15 && (p.values[1] - 0.75).abs() < 1e-15);
        assert!(p.monotone);
        // Below the first atom the first value applies.
        assert_eq!(p.at(0.0), 0.25);
        assert_eq!(p.at(0.5), 0.25);
        assert!((p.integral_to(0.5) - 0.125).abs() < 1e-15);
        assert!((p.integral_to(1.0) - (0.25 * 5.0 / 6.0 + 0.75 / 6.0)).abs() < 1e-15);
    }

    #[test]
    fn realize_round_trip_and_reject() {
        let s = e1();
        let t = realize_point(&s, &[0.3, 0.3], 1e-9).unwrap().feasible().unwrap();
        let u = t.realized_utilities();
        assert!((u[0] - 0.3).abs() < 1e-9 && (u[1] - 0.3).abs() < 1e-9);
        assert!(t.simplex_violation() < 1e-12);
        match realize_point(&s, &[0.6, 0.0], 1e-9).unwrap() {
            RealizeOutcome::Infeasible { witness, violation } => {
                assert!(violation > 0.09);
                assert!(witness[0] > 0.99);
            }
            _ => panic!("expected infeasible"),
        }
        let z = realize_point(&s, &[0.0, 0.0], 1e-9).unwrap().feasible().unwrap();
        assert!(z.entries().iter().all(|p| *p == 0.0));
    }
}
