//! Geometry of the full-information region `U*`: its support function, ball
//! membership, the structural classification of agents, and pruning.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::dist::{feq, DiscreteDist, JointSupport, UtilityProfile};
use crate::error::{Error, Result};
use crate::realize::AllocationTable;
use crate::{dot, norm};

/// `E[max(0, max_i beta_i u_i)]`, the support function of `U*`.
///
/// Coordinates with a nonpositive coefficient never contribute, so signed
/// directions are accepted. Computed as `∫ P(max > t) dt` over the sorted
/// weighted atoms, which needs no joint enumeration.
pub fn support_value(profile: &UtilityProfile, beta: &[f64]) -> f64 {
    let mut cols: Vec<Vec<(f64, f64)>> = Vec::new();
    for i in 0..profile.n() {
        if beta[i] > 0.0 {
            let d = profile.dist(i);
            let col: Vec<(f64, f64)> =
                d.atoms().iter().zip(d.probs()).map(|(a, p)| (beta[i] * a, *p)).collect();
            cols.push(col);
        }
    }
    if cols.is_empty() {
        return 0.0;
    }
    let mut ts: Vec<f64> = cols.iter().flatten().map(|(t, _)| *t).filter(|t| *t > 0.0).collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let mut ptr = vec![0usize; cols.len()];
    let mut cdf = vec![0.0f64; cols.len()];
    let mut total = 0.0;
    let mut left = 0.0;
    for &t in &ts {
        // P(max <= s) for s in [left, t) is the product of the CDFs at left.
        for (c, col) in cols.iter().enumerate() {
            while ptr[c] < col.len() && col[ptr[c]].0 <= left {
                cdf[c] += col[ptr[c]].1;
                ptr[c] += 1;
            }
        }
        let below: f64 = cdf.iter().product();
        total += (t - left) * (1.0 - below).max(0.0);
        left = t;
    }
    total
}

/// Same quantity by summing over the enumerated joint support.
pub fn support_value_enumerated(support: &JointSupport, beta: &[f64]) -> f64 {
    support
        .iter()
        .map(|o| {
            let m = o.values.iter().zip(beta).map(|(u, b)| u * b).fold(0.0, f64::max);
            o.prob * m
        })
        .sum()
}

/// `max(0, max_i beta_i E[u_i])`, the support function of the no-information region.
pub fn no_info_value(profile: &UtilityProfile, beta: &[f64]) -> f64 {
    profile.means().iter().zip(beta).map(|(m, b)| m * b).fold(0.0, f64::max)
}

/// Best weighted welfare achievable in a single round without money.
///
/// A one-shot incentive-compatible rule can only use whether each report is
/// zero, so the achievable region is `U*` of the profile in which each agent's
/// positive atoms are merged into their conditional mean.
pub fn one_shot_value(profile: &UtilityProfile, beta: &[f64]) -> f64 {
    let dists: Vec<DiscreteDist> = profile.dists().iter().map(merged_positive).collect();
    let merged = UtilityProfile::new(profile.vbar(), profile.alpha().to_vec(), dists)
        .expect("merging atoms keeps the profile valid");
    support_value(&merged, beta)
}

fn merged_positive(d: &DiscreteDist) -> DiscreteDist {
    let p0 = d.prob_zero();
    let mean = d.mean();
    if p0 >= 1.0 || mean <= 0.0 {
        return DiscreteDist::point_mass(0.0).expect("valid point mass");
    }
    let cond = mean / (1.0 - p0);
    if p0 > 0.0 {
        DiscreteDist::new(vec![0.0, cond], vec![p0, 1.0 - p0]).expect("two-atom distribution")
    } else {
        DiscreteDist::point_mass(cond).expect("valid point mass")
    }
}

/// Ball membership request.
#[derive(Clone, Debug)]
pub struct BallQuery {
    pub center: Vec<f64>,
    pub radius: f64,
    pub direction_budget: usize,
    pub refinement_steps: usize,
}

impl BallQuery {
    pub fn new(center: Vec<f64>, radius: f64) -> Self {
        let n = center.len();
        let budget = match n {
            1 | 2 => 1000,
            3 => 2000,
            _ => 4000,
        };
        Self { center, radius, direction_budget: budget, refinement_steps: 60 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum BallVerdict {
    /// Smallest observed slack and where it was found.
    Inside { min_slack: f64, direction: Vec<f64> },
    /// A direction along which the ball leaves the region, with its negative slack.
    Outside { witness: Vec<f64>, slack: f64 },
}

impl BallVerdict {
    pub fn is_inside(&self) -> bool {
        matches!(self, BallVerdict::Inside { .. })
    }

    pub fn slack(&self) -> f64 {
        match self {
            BallVerdict::Inside { min_slack, .. } => *min_slack,
            BallVerdict::Outside { slack, .. } => *slack,
        }
    }
}

/// Deterministic set of unit directions in the nonnegative orthant.
///
/// The axes and the diagonal are always present; `extra` directions are
/// normalized and appended.
pub fn orthant_grid(n: usize, budget: usize, extra: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for i in 0..n {
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        dirs.push(e);
    }
    if n > 1 {
        dirs.push(vec![1.0 / (n as f64).sqrt(); n]);
    }
    for e in extra {
        let s = norm(e);
        if s > 0.0 && e.iter().all(|v| *v >= 0.0) {
            dirs.push(e.iter().map(|v| v / s).collect());
        }
    }
    match n {
        1 => {}
        2 => {
            for k in 1..budget.max(2) {
                let th = std::f64::consts::FRAC_PI_2 * k as f64 / budget.max(2) as f64;
                dirs.push(vec![th.cos(), th.sin()]);
            }
        }
        3 => {
            // Fibonacci lattice over the whole sphere, folded into the orthant.
            let m = budget.max(8);
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            for k in 0..m {
                let z = 1.0 - (k as f64 + 0.5) / m as f64;
                let rad = (1.0 - z * z).sqrt();
                let th = golden * k as f64;
                dirs.push(vec![(rad * th.cos()).abs(), (rad * th.sin()).abs(), z.abs()]);
            }
        }
        _ => {
            // Kronecker points in the cube pushed through -ln give uniform
            // points on the simplex; square roots land on the sphere.
            let primes = [2.0, 3.0, 5.0, 7.0, 11.0, 13.0, 17.0, 19.0, 23.0, 29.0, 31.0, 37.0];
            for k in 1..=budget {
                let e: Vec<f64> = (0..n)
                    .map(|j| {
                        let frac = (k as f64 * f64::sqrt(primes[j % primes.len()] + (j / primes.len()) as f64))
                            .fract();
                        -(frac.max(1e-12)).ln()
                    })
                    .collect();
                let s: f64 = e.iter().sum();
                dirs.push(e.iter().map(|v| (v / s).sqrt()).collect());
            }
        }
    }
    dirs
}

/// Local pattern search minimizing `f` over unit vectors of the orthant.
pub(crate) fn refine_direction(
    start: &[f64],
    value: f64,
    steps: usize,
    f: &dyn Fn(&[f64]) -> f64,
) -> (Vec<f64>, f64) {
    let n = start.len();
    let mut best = start.to_vec();
    let mut best_val = value;
    let mut step = 0.1;
    for _ in 0..steps {
        let mut improved = false;
        for i in 0..n {
            for sign in [1.0, -1.0] {
                let mut cand = best.clone();
                cand[i] = (cand[i] + sign * step).max(0.0);
                let s = norm(&cand);
                if s == 0.0 {
                    continue;
                }
                cand.iter_mut().for_each(|v| *v /= s);
                let val = f(&cand);
                if val < best_val {
                    best = cand;
                    best_val = val;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
            if step < 1e-9 {
                break;
            }
        }
    }
    (best, best_val)
}

/// Decides `B(x, r) ⊂ U*`.
///
/// Positivity is checked first (a failure reports the axis `e_i` whose
/// coordinate would turn negative). Otherwise the slack
/// `h(β) - βᵀx - r` is minimized over unit `β ≥ 0` by a fixed grid plus local
/// refinement from the best grid points.
pub fn ball_in_ustar(profile: &UtilityProfile, query: &BallQuery) -> Result<BallVerdict> {
    let n = profile.n();
    let x = &query.center;
    let r = query.radius;
    if x.len() != n || !(r >= 0.0) || query.direction_budget == 0 {
        return Err(Error::InvalidInput("malformed ball query".into()));
    }
    for i in 0..n {
        if x[i] < r {
            let mut w = vec![0.0; n];
            w[i] = 1.0;
            return Ok(BallVerdict::Outside { witness: w, slack: x[i] - r });
        }
    }
    let slack = |b: &[f64]| support_value(profile, b) - dot(b, x) - r;
    let grid = orthant_grid(n, query.direction_budget, &[profile.alpha().to_vec()]);
    let values: Vec<f64> = grid.par_iter().map(|b| slack(b)).collect();

    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|a, b| values[*a].total_cmp(&values[*b]).then(a.cmp(b)));
    let mut best_dir = grid[order[0]].clone();
    let mut best_val = values[order[0]];
    for &k in order.iter().take(3) {
        let (d, v) = refine_direction(&grid[k], values[k], query.refinement_steps, &slack);
        if v < best_val {
            best_val = v;
            best_dir = d;
        }
    }
    Ok(if best_val < 0.0 {
        BallVerdict::Outside { witness: best_dir, slack: best_val }
    } else {
        BallVerdict::Inside { min_slack: best_val, direction: best_dir }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum TrivialCase {
    DominantAgent(usize),
    /// Agents in priority order with the smallest positive weighted atom of each.
    Hierarchy { order: Vec<usize>, thresholds: Vec<f64> },
    None,
}

#[derive(Clone, Debug)]
pub struct TrivialCaseReport {
    pub case: TrivialCase,
    /// One-shot rule reaching the α-optimal vector (absent when the joint
    /// support is too large to tabulate).
    pub optimal_single_shot: Option<AllocationTable>,
    pub alpha_optimal_vector: Option<Vec<f64>>,
}

fn weighted_range(profile: &UtilityProfile, i: usize) -> (f64, f64, f64) {
    let ws = profile.weighted_support(i);
    let max = ws.iter().map(|w| w.0).fold(0.0, f64::max);
    let min = ws.iter().map(|w| w.0).fold(f64::INFINITY, f64::min);
    let min_pos = ws.iter().map(|w| w.0).filter(|w| *w > 0.0).fold(f64::INFINITY, f64::min);
    (min, min_pos, max)
}

fn weighted_zero_mass(profile: &UtilityProfile, i: usize) -> f64 {
    profile.weighted_support(i).iter().filter(|w| w.0 == 0.0).map(|w| w.1).sum()
}

/// Detects the instances whose α-optimum is already reachable in one round:
/// a dominant agent, or a hierarchy of agents gated by zero utilities.
pub fn classify_trivial(profile: &UtilityProfile) -> TrivialCaseReport {
    let none = TrivialCaseReport { case: TrivialCase::None, optimal_single_shot: None, alpha_optimal_vector: None };
    let n = profile.n();
    let ranges: Vec<(f64, f64, f64)> = (0..n).map(|i| weighted_range(profile, i)).collect();
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut order = Vec::new();
    let mut thresholds = Vec::new();
    loop {
        if remaining.iter().all(|&j| ranges[j].2 <= 0.0) {
            break;
        }
        let pick = remaining.iter().copied().find(|&i| {
            ranges[i].2 > 0.0 && remaining.iter().all(|&j| j == i || ranges[i].1 >= ranges[j].2 || feq(ranges[i].1, ranges[j].2))
        });
        let Some(i) = pick else { return none };
        order.push(i);
        thresholds.push(ranges[i].1);
        remaining.retain(|&j| j != i);
        if weighted_zero_mass(profile, i) <= 0.0 || remaining.is_empty() {
            break;
        }
    }
    if order.is_empty() {
        // Every weighted utility vanishes: allocating to anyone is optimal.
        order.push(0);
        thresholds.push(0.0);
    }
    let means = profile.means();
    let mut vector = vec![0.0; n];
    let mut gate = 1.0;
    for &i in &order {
        vector[i] = gate * means[i];
        gate *= profile.dist(i).prob_zero();
    }
    let gap = support_value(profile, profile.alpha()) - dot(profile.alpha(), &vector);
    if gap > 1e-10 {
        return none;
    }
    let table = JointSupport::new(profile).ok().map(|js| {
        let js = Arc::new(js);
        let last = *order.last().expect("nonempty order");
        AllocationTable::from_fn(js, |o| {
            let mut row = vec![0.0; n];
            let win = order.iter().copied().find(|&i| o.values[i] > 0.0).unwrap_or(last);
            row[win] = 1.0;
            row
        })
    });
    let case = if order.len() == 1 {
        TrivialCase::DominantAgent(order[0])
    } else {
        TrivialCase::Hierarchy { order, thresholds }
    };
    TrivialCaseReport { case, optimal_single_shot: table, alpha_optimal_vector: Some(vector) }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AgentSets {
    /// Agents that neither are dominated nor live in an exclusive interval.
    pub i_set: Vec<usize>,
    pub j_set: Vec<usize>,
    pub k_set: Vec<usize>,
    /// `I` plus the agents tying for the maximum with positive probability.
    pub i_tilde: Vec<usize>,
    /// `J` sorted by its intervals `(j, m_j, M_j)`.
    pub j_ordering: Vec<(usize, f64, f64)>,
    /// Common value of the deterministic agents in `K` (zero when `K` is empty).
    pub m: f64,
}

/// `P(max_{j≠i} α_j u_j = a)`.
fn prob_others_max_equals(profile: &UtilityProfile, i: usize, a: f64) -> f64 {
    let mut le = 1.0;
    let mut lt = 1.0;
    for j in (0..profile.n()).filter(|&j| j != i) {
        let ws = profile.weighted_support(j);
        le *= ws.iter().filter(|w| w.0 < a || feq(w.0, a)).map(|w| w.1).sum::<f64>();
        lt *= ws.iter().filter(|w| w.0 < a && !feq(w.0, a)).map(|w| w.1).sum::<f64>();
    }
    le - lt
}

/// Classifies the agents into the sets `I`, `J`, `K` and `Ĩ`.
pub fn agent_sets(profile: &UtilityProfile) -> AgentSets {
    let n = profile.n();
    let ranges: Vec<(f64, f64, f64)> = (0..n).map(|i| weighted_range(profile, i)).collect();
    let ge = |a: f64, b: f64| a > b || feq(a, b);
    let gt = |a: f64, b: f64| a > b && !feq(a, b);

    let cond_a = |i: usize| (0..n).any(|j| j != i && ge(ranges[j].0, ranges[i].2));
    let cond_b = |i: usize| {
        let (_, m, big_m) = ranges[i];
        if !m.is_finite() {
            return true;
        }
        (0..n).filter(|&j| j != i).all(|j| {
            let ws = profile.weighted_support(j);
            let interior = ws.iter().any(|w| gt(w.0, m) && gt(big_m, w.0));
            // A competitor that also sits on both endpoints (and zero) forces
            // the planner to compare exact reports, so no interval isolates i.
            let straddles = gt(big_m, m)
                && ws.iter().all(|w| w.0 == 0.0 || (ge(w.0, m) && ge(big_m, w.0)))
                && ws.iter().any(|w| feq(w.0, m))
                && ws.iter().any(|w| feq(w.0, big_m));
            !interior && !straddles
        })
    };
    let i_set: Vec<usize> = (0..n).filter(|&i| n > 1 && !cond_a(i) && !cond_b(i)).collect();
    let j_set: Vec<usize> = (0..n)
        .filter(|&i| !i_set.contains(&i) && (0..n).all(|j| j == i || gt(ranges[i].2, ranges[j].0)))
        .collect();
    let k_set: Vec<usize> = (0..n)
        .filter(|&i| {
            !i_set.contains(&i) && !j_set.contains(&i) && (0..n).all(|j| j == i || ge(ranges[i].2, ranges[j].0))
        })
        .collect();
    let mut i_tilde = i_set.clone();
    for i in 0..n {
        if i_tilde.contains(&i) || n < 2 {
            continue;
        }
        let tie: f64 = profile
            .weighted_support(i)
            .iter()
            .filter(|w| w.0 > 0.0)
            .map(|w| w.1 * prob_others_max_equals(profile, i, w.0))
            .sum();
        if tie > 0.0 {
            i_tilde.push(i);
        }
    }
    i_tilde.sort_unstable();
    let mut j_ordering: Vec<(usize, f64, f64)> = j_set
        .iter()
        .map(|&j| {
            let (_, m, big_m) = ranges[j];
            (j, if m.is_finite() { m } else { 0.0 }, big_m)
        })
        .collect();
    j_ordering.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.2.total_cmp(&b.2)).then(a.0.cmp(&b.0)));
    let m = k_set.first().map(|&k| ranges[k].2).unwrap_or(0.0);
    AgentSets { i_set, j_set, k_set, i_tilde, j_ordering, m }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PruneResult {
    pub pruned_indices: Vec<usize>,
    pub u_tilde: Vec<f64>,
    pub j_of_u: Vec<usize>,
    /// Product of the zero-utility probabilities of the pruned agents.
    pub scale: f64,
}

impl PruneResult {
    /// `(U_i 1[i ∉ J(U)])_i + P·Ũ`, which must give back `U`.
    pub fn reconstruct(&self, u: &[f64]) -> Vec<f64> {
        (0..u.len())
            .map(|i| {
                let kept = if self.j_of_u.contains(&i) { 0.0 } else { u[i] };
                kept + self.scale * self.u_tilde[i]
            })
            .collect()
    }
}

/// Removes agents whose promise saturates their mean, rescaling the others by
/// the probability that the removed agent has zero utility.
pub fn prune(profile: &UtilityProfile, u: &[f64]) -> Result<PruneResult> {
    let n = profile.n();
    let means = profile.means();
    for i in 0..n {
        if u[i] > means[i] + 1e-12 {
            return Err(Error::NotInRegion { index: i, value: u[i], bound: means[i] });
        }
    }
    let active: Vec<usize> = (0..n).filter(|&i| u[i] > 0.0).collect();
    let mut cur = u.to_vec();
    let mut pruned = Vec::new();
    let mut scale = 1.0;
    while let Some(i) = active.iter().copied().find(|&i| !pruned.contains(&i) && cur[i] >= means[i] - 1e-12) {
        pruned.push(i);
        let p0 = profile.dist(i).prob_zero();
        scale *= p0;
        if p0 <= 0.0 {
            cur = vec![0.0; n];
            break;
        }
        for v in cur.iter_mut() {
            *v /= p0;
        }
        cur[i] = 0.0;
    }
    let j_of_u = active.iter().copied().filter(|&i| cur[i] > 0.0).collect();
    Ok(PruneResult { pruned_indices: pruned, u_tilde: cur, j_of_u, scale })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e1() -> UtilityProfile {
        let d = DiscreteDist::new(vec![1.0 / 6.0, 5.0 / 6.0], vec![0.5, 0.5]).unwrap();
        UtilityProfile::new(1.0, vec![1.0, 1.0], vec![d.clone(), d]).unwrap()
    }

    #[test]
    fn support_values_agree() {
        let p = e1();
        let js = JointSupport::new(&p).unwrap();
        for beta in [[1.0, 1.0], [1.0, 0.0], [0.3, 0.9], [2.0, 1.0]] {
            let a = support_value(&p, &beta);
            let b = support_value_enumerated(&js, &beta);
            assert!((a - b).abs() < 1e-12, "{beta:?}: {a} vs {b}");
        }
        assert!((support_value(&p, &[1.0, 1.0]) - 2.0 / 3.0).abs() < 1e-12);
        assert!((no_info_value(&p, &[1.0, 1.0]) - 0.5).abs() < 1e-15);
        assert_eq!(support_value(&p, &[-1.0, 0.0]), 0.0);
    }

    #[test]
    fn ball_verdicts() {
        let p = e1();
        let v = ball_in_ustar(&p, &BallQuery::new(vec![0.25, 0.25], 0.05)).unwrap();
        match v {
            BallVerdict::Inside { min_slack, .. } => {
                let diag = 2.0 / 3.0 - 0.5 - 0.05;
                assert!(min_slack <= diag + 1e-12 && min_slack > 0.0);
            }
            _ => panic!("expected inside"),
        }
        let v = ball_in_ustar(&p, &BallQuery::new(vec![0.04, 0.25], 0.05)).unwrap();
        assert!(matches!(v, BallVerdict::Outside { ref witness, .. } if witness[0] == 1.0));
        let v = ball_in_ustar(&p, &BallQuery::new(vec![1.0 / 3.0, 1.0 / 3.0], 1e-3)).unwrap();
        match v {
            BallVerdict::Outside { witness, slack } => {
                assert!(slack < 0.0);
                assert!((witness[0] - witness[1]).abs() < 0.05);
            }
            _ => panic!("expected outside"),
        }
    }

    #[test]
    fn one_shot_merges_positive_atoms() {
        let p = e1();
        // Without zero atoms only constant rules are incentive compatible.
        assert!((one_shot_value(&p, &[1.0, 1.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn prune_one_step() {
        let d1 = DiscreteDist::new(vec![0.0, 0.5], vec![0.5, 0.5]).unwrap();
        let d2 = DiscreteDist::new(vec![0.2, 0.6], vec![0.5, 0.5]).unwrap();
        let p = UtilityProfile::new(1.0, vec![1.0, 1.0], vec![d1, d2]).unwrap();
        let r = prune(&p, &[0.25, 0.1]).unwrap();
        assert_eq!(r.pruned_indices, vec![0]);
        assert_eq!(r.u_tilde, vec![0.0, 0.2]);
        assert_eq!(r.scale, 0.5);
        assert_eq!(r.j_of_u, vec![1]);
        assert!(matches!(prune(&p, &[0.3, 0.0]), Err(Error::NotInRegion { index: 0, .. })));
    }
}
