//! Promised-utility mechanisms built around a ball inside `U*`.
//!
//! A mechanism state is a promised utility vector `U`. Each round the planner
//! allocates according to `p(·|U)` and commits to a continuation promise
//! `W(·|U)` that is again a state of the mechanism. Boundary states
//! `U = x + r y` allocate with a table realizing `anchor + outer·y` (for the
//! stationary mechanism `anchor = x`, `outer = r + δ`); the extra `δ` pulls the
//! mean promise toward the center and absorbs the spread introduced by the
//! coupling. Every other state of the region is a scaled mixture of a boundary
//! state and the trivial vertices `E[u_i] e_i`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::dist::{JointSupport, UtilityProfile};
use crate::error::{Error, Result};
use crate::geometry::{ball_in_ustar, no_info_value, orthant_grid, refine_direction, support_value, BallQuery, BallVerdict};
use crate::realize::{interim_allocation, realize_point, AllocationTable, InterimAllocation, RealizeOutcome};
use crate::{dot, norm};

/// Tolerance used when realizing boundary targets.
pub const REALIZE_TOL: f64 = 1e-11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize)]
pub enum CouplingVariant {
    /// Couples only the two coordinates with the largest `|α_i|`.
    #[default]
    New,
    /// Spreads every deviation over all coordinates with `α_i ≠ 0`.
    Legacy,
}

/// Couples independent promises `W̃_i` (with means `m_i`) so that every
/// realization lies on the hyperplane `αᵀZ = αᵀm` while `E[Z_i | W̃_i] = W̃_i`.
pub fn couple_promises(tilde_w: &[f64], means: &[f64], alpha: &[f64], variant: CouplingVariant) -> Result<Vec<f64>> {
    let n = tilde_w.len();
    if means.len() != n || alpha.len() != n {
        return Err(Error::InvalidInput("coupling inputs differ in length".into()));
    }
    let dev: Vec<f64> = tilde_w.iter().zip(means).map(|(w, m)| w - m).collect();
    let mut z = tilde_w.to_vec();
    match variant {
        CouplingVariant::New => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|a, b| alpha[*b].abs().total_cmp(&alpha[*a].abs()).then(a.cmp(b)));
            if n < 2 || alpha[idx[0]] == 0.0 || alpha[idx[1]] == 0.0 {
                return Err(Error::ZeroDirection);
            }
            let (i1, i2) = (idx[0], idx[1]);
            let spill: f64 = (0..n).filter(|&j| j != i1).map(|j| alpha[j] / alpha[i1] * dev[j]).sum();
            z[i1] = tilde_w[i1] - spill;
            z[i2] = tilde_w[i2] - alpha[i1] / alpha[i2] * dev[i1];
        }
        CouplingVariant::Legacy => {
            let active: Vec<usize> = (0..n).filter(|&i| alpha[i] != 0.0).collect();
            if active.len() < 2 {
                return Err(Error::ZeroDirection);
            }
            let k = (active.len() - 1) as f64;
            for &i in &active {
                let spill: f64 = active.iter().filter(|&&j| j != i).map(|&j| alpha[j] / alpha[i] * dev[j]).sum();
                z[i] = tilde_w[i] - spill / k;
            }
        }
    }
    Ok(z)
}

/// `W_i(v|U) = (U_i + (1-γ)(∫_0^v P - P(v) v - ∫ S P)) / γ` with `S` the
/// survival function of agent `i`.
pub fn interim_promise(p: &InterimAllocation, u_i: f64, gamma: f64, v: f64) -> f64 {
    (u_i + (1.0 - gamma) * (p.integral_to(v) - p.at(v) * v - p.survival_weighted_integral())) / gamma
}

/// Source of the constant `C` in the safe-margin chain `δ ≥ C(1-γ)/(γ r)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum ConstantPolicy {
    /// The closed form of [`margin_constant`].
    ClosedForm,
    Fixed(f64),
    /// Largest squared promise spread over the cached boundary plans, in
    /// units of `(1-γ)/γ`. It is exactly the quantity the chain has to dominate.
    Certified,
}

/// The constant of the safe-margin chain for a ball `B(x, r)`.
///
/// The general form is `4n²v̄²(1 + max E[u_i] / min(E[u_i] - x_i - r))²`. When
/// all atoms are at least `lower > 0` the form `v̄²(2n + v̄/lower)²` is also
/// available; the smaller applicable value is returned.
pub fn margin_constant(profile: &UtilityProfile, x: &[f64], r: f64, lower: Option<f64>) -> Result<f64> {
    let n = profile.n() as f64;
    let vbar = profile.vbar();
    let means = profile.means();
    let (worst, gap) = means
        .iter()
        .zip(x)
        .enumerate()
        .map(|(i, (m, xi))| (i, m - xi - r))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least one agent");
    let max_mean = means.iter().copied().fold(0.0, f64::max);
    let general = (gap > 0.0).then(|| 4.0 * n * n * vbar * vbar * (1.0 + max_mean / gap).powi(2));
    let assumed = lower.filter(|lb| {
        *lb > 0.0 && profile.dists().iter().all(|d| d.support().iter().all(|&k| d.atoms()[k] >= *lb))
    });
    let bounded = assumed.map(|lb| vbar * vbar * (2.0 * n + vbar / lb).powi(2));
    match (general, bounded) {
        (Some(a), Some(b)) => Ok(a.min(b)),
        (Some(a), None) => Ok(a),
        (None, Some(b)) => Ok(b),
        (None, None) => Err(Error::DegenerateCenter { index: worst, gap }),
    }
}

/// Geometry of one round of a ball mechanism.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stage {
    pub gamma: f64,
    pub center: Vec<f64>,
    pub radius: f64,
    /// Boundary state `center + radius·y` allocates with a table realizing
    /// `anchor + outer·y`.
    pub anchor: Vec<f64>,
    pub outer: f64,
    /// Ball that continuation promises of boundary states must stay in.
    pub next_center: Vec<f64>,
    pub next_radius: f64,
}

impl Stage {
    pub fn stationary(x: &[f64], r: f64, delta: f64, gamma: f64) -> Self {
        Self {
            gamma,
            center: x.to_vec(),
            radius: r,
            anchor: x.to_vec(),
            outer: r + delta,
            next_center: x.to_vec(),
            next_radius: r,
        }
    }

    pub fn margin(&self) -> f64 {
        self.outer - self.radius
    }

    pub fn kappa(&self) -> f64 {
        (1.0 - self.gamma) / self.gamma
    }
}

/// Allocation and promise data of one boundary state.
#[derive(Clone, Debug)]
pub struct BoundaryPlan {
    pub direction: Vec<f64>,
    /// `center + radius·direction`.
    pub point: Vec<f64>,
    pub table: AllocationTable,
    pub interim: Vec<InterimAllocation>,
    /// Interim promise of each agent at each of its support atoms.
    pub interim_promises: Vec<Vec<f64>>,
    pub mean_promise: Vec<f64>,
    /// Coupled promise vector per joint outcome, row-major.
    pub promises: Vec<f64>,
    /// `max_v |W(v) - W̄|`.
    pub spread: f64,
    /// `next_radius - max_v |W(v) - next_center|`.
    pub slack: f64,
}

impl BoundaryPlan {
    pub fn promise(&self, k: usize) -> &[f64] {
        let n = self.direction.len();
        &self.promises[k * n..(k + 1) * n]
    }

    fn build(support: &Arc<JointSupport>, stage: &Stage, y: &[f64]) -> Result<Self> {
        let n = support.n();
        let point: Vec<f64> = (0..n).map(|i| stage.center[i] + stage.radius * y[i]).collect();
        let target: Vec<f64> = (0..n).map(|i| stage.anchor[i] + stage.outer * y[i]).collect();
        let table = flat_table(support, &stage.anchor, &target)?;
        let gamma = stage.gamma;
        let interim: Vec<InterimAllocation> = (0..n).map(|i| interim_allocation(&table, i)).collect();
        let interim_promises: Vec<Vec<f64>> = (0..n)
            .map(|i| interim[i].atoms.iter().map(|&a| interim_promise(&interim[i], point[i], gamma, a)).collect())
            .collect();
        let mean_promise: Vec<f64> = (0..n)
            .map(|i| interim[i].probs.iter().zip(&interim_promises[i]).map(|(p, w)| p * w).sum())
            .collect();
        let mut promises = Vec::with_capacity(support.len() * n);
        let mut tilde = vec![0.0; n];
        let mut spread = 0.0f64;
        let mut far = 0.0f64;
        for k in 0..support.len() {
            for i in 0..n {
                tilde[i] = interim_promises[i][support.local_index(k, i)];
            }
            let z = if n == 1 { tilde.clone() } else { couple_promises(&tilde, &mean_promise, y, CouplingVariant::New)? };
            let dev: Vec<f64> = z.iter().zip(&mean_promise).map(|(a, b)| a - b).collect();
            spread = spread.max(norm(&dev));
            let off: Vec<f64> = z.iter().zip(&stage.next_center).map(|(a, b)| a - b).collect();
            far = far.max(norm(&off));
            promises.extend(z);
        }
        Ok(Self {
            direction: y.to_vec(),
            point,
            table,
            interim,
            interim_promises,
            mean_promise,
            promises,
            spread,
            slack: stage.next_radius - far,
        })
    }
}

/// Realizes `target` with interim allocations as flat as possible.
///
/// When `anchor` lies strictly inside the no-information simplex, the target
/// is written as a mix of the constant table at the point where the ray from
/// the anchor leaves the simplex and a realized point farther out on the same
/// ray. The non-constant part then carries weight proportional to how far the
/// target overhangs the simplex, and so does the promise spread.
pub fn flat_table(support: &Arc<JointSupport>, anchor: &[f64], target: &[f64]) -> Result<AllocationTable> {
    let realize = |t: &[f64]| -> Result<std::result::Result<AllocationTable, (Vec<f64>, f64)>> {
        Ok(match realize_point(support, t, REALIZE_TOL)? {
            RealizeOutcome::Feasible(tab) => Ok(tab),
            RealizeOutcome::Infeasible { witness, violation } => Err((witness, violation)),
        })
    };
    let means = support.profile().means();
    let load = |v: &[f64]| -> f64 { v.iter().zip(&means).map(|(a, e)| if *e > 0.0 { a / e } else { 0.0 }).sum() };
    let direct = || -> Result<AllocationTable> {
        realize(target)?.map_err(|(witness, violation)| Error::NotInUstar { witness, slack: -violation })
    };
    let dir: Vec<f64> = target.iter().zip(anchor).map(|(t, a)| t - a).collect();
    let (la, ld) = (load(anchor), load(&dir));
    if load(target) <= 1.0 || la >= 1.0 - 1e-9 || ld <= 0.0 || anchor.iter().any(|a| *a < 0.0) {
        return direct();
    }
    let at = |s: f64| -> Vec<f64> { anchor.iter().zip(&dir).map(|(a, d)| a + s * d).collect() };
    let exit = (1.0 - la) / ld;
    // A stalled solve far out on the ray only shortens the ray.
    let realize = |t: &[f64]| -> Result<std::result::Result<AllocationTable, (Vec<f64>, f64)>> {
        match realize(t) {
            Err(Error::SolverStall { .. }) => Ok(Err((Vec::new(), 0.0))),
            other => other,
        }
    };
    let Ok(mut far_table) = realize(target)? else { return direct() };
    let (mut lo, mut hi) = (1.0, 1.0);
    // Grow until infeasible, then bisect on the ray.
    while hi < 64.0 {
        hi *= 2.0;
        match realize(&at(hi))? {
            Ok(t) => {
                lo = hi;
                far_table = t;
            }
            Err(_) => break,
        }
    }
    for _ in 0..20 {
        if hi - lo <= 1e-3 * lo {
            break;
        }
        let mid = 0.5 * (lo + hi);
        match realize(&at(mid))? {
            Ok(t) => {
                lo = mid;
                far_table = t;
            }
            Err(_) => hi = mid,
        }
    }
    let lambda = (1.0 - exit) / (lo - exit);
    let q: Vec<f64> = at(exit).iter().zip(&means).map(|(v, e)| if *e > 0.0 { (v / e).max(0.0) } else { 0.0 }).collect();
    let flat = AllocationTable::constant(support.clone(), &q);
    Ok(AllocationTable::mix(&[(1.0 - lambda, &flat), (lambda, &far_table)]))
}

/// A state of the mechanism with its decomposition
/// `U_i = s_i (q_i E[u_i] + q_0 ỹ_i)`, `ỹ` a boundary point.
#[derive(Clone, Debug)]
pub struct PromiseState {
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    pub q: Vec<f64>,
    pub q0: f64,
    pub plan: Option<Arc<BoundaryPlan>>,
}

impl PromiseState {
    pub fn boundary_point(&self) -> Option<&[f64]> {
        self.plan.as_ref().map(|p| p.point.as_slice())
    }

    /// `s ∘ (Σ q_j E_j e_j + q_0 ỹ)`.
    pub fn reconstruct(&self, means: &[f64]) -> Vec<f64> {
        (0..self.u.len())
            .map(|i| {
                let b = self.plan.as_ref().map(|p| p.point[i]).unwrap_or(0.0);
                self.s[i] * (self.q[i] * means[i] + self.q0 * b)
            })
            .collect()
    }

    /// Constant-allocation state (no boundary component).
    pub fn is_vertex(&self) -> bool {
        self.plan.is_none() || self.q0 == 0.0
    }
}

/// Allocation and promise of a state for every joint outcome.
#[derive(Clone, Debug)]
pub struct RoundRule {
    pub support: Arc<JointSupport>,
    pub gamma: f64,
    pub target: Vec<f64>,
    pub alloc: Vec<f64>,
    pub promises: Vec<f64>,
}

impl RoundRule {
    /// A one-round rule: `γ = 0` and no continuation.
    pub fn one_shot(table: &AllocationTable) -> Self {
        Self {
            support: table.support().clone(),
            gamma: 0.0,
            target: table.realized_utilities(),
            alloc: table.entries().to_vec(),
            promises: vec![0.0; table.entries().len()],
        }
    }

    pub fn allocation(&self, k: usize) -> &[f64] {
        let n = self.support.n();
        &self.alloc[k * n..(k + 1) * n]
    }

    pub fn promise(&self, k: usize) -> &[f64] {
        let n = self.support.n();
        &self.promises[k * n..(k + 1) * n]
    }

    /// `max_i |U_i - E[(1-γ) u_i p_i + γ W_i]|`.
    pub fn promise_keeping_violation(&self) -> f64 {
        let n = self.support.n();
        let mut acc = vec![0.0; n];
        for k in 0..self.support.len() {
            let p = self.support.prob(k);
            let vals = self.support.values(k);
            for i in 0..n {
                acc[i] += p * ((1.0 - self.gamma) * vals[i] * self.allocation(k)[i] + self.gamma * self.promise(k)[i]);
            }
        }
        acc.iter().zip(&self.target).map(|(a, u)| (a - u).abs()).fold(0.0, f64::max)
    }

    /// Interim allocation and promise of agent `i` at each support atom.
    pub fn interim(&self, i: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let supp = self.support.agent_support(i);
        let dist = self.support.profile().dist(i);
        let mut pa = vec![0.0; supp.len()];
        let mut wa = vec![0.0; supp.len()];
        for k in 0..self.support.len() {
            let l = self.support.local_index(k, i);
            pa[l] += self.support.prob(k) * self.allocation(k)[i];
            wa[l] += self.support.prob(k) * self.promise(k)[i];
        }
        let atoms: Vec<f64> = supp.iter().map(|&a| dist.atoms()[a]).collect();
        for (l, &a) in supp.iter().enumerate() {
            pa[l] /= dist.probs()[a];
            wa[l] /= dist.probs()[a];
        }
        (atoms, pa, wa)
    }

    /// Largest gain from a one-round misreport, over agents, true atoms and
    /// reports at atoms or midpoints between them (off-atom reports are
    /// treated as the support atom below).
    pub fn ic_gain(&self) -> f64 {
        let g = self.gamma;
        let mut worst = 0.0f64;
        for i in 0..self.support.n() {
            let (atoms, pa, wa) = self.interim(i);
            let mut reports: Vec<usize> = (0..atoms.len()).collect();
            // A midpoint snaps to the atom below it.
            reports.extend(0..atoms.len().saturating_sub(1));
            for (t, &u) in atoms.iter().enumerate() {
                let truthful = (1.0 - g) * u * pa[t] + g * wa[t];
                for &v in &reports {
                    worst = worst.max((1.0 - g) * u * pa[v] + g * wa[v] - truthful);
                }
            }
        }
        worst
    }
}

/// Outcome of a verifier: the measured quantity and whether it meets the tolerance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Check {
    pub value: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct BuildOptions {
    pub constant: ConstantPolicy,
    /// Valuation floor for the bounded-valuation constant; detected from the
    /// supports when absent.
    pub lower_bound: Option<f64>,
    /// Number of cached boundary directions; `None` picks 64, 256 or 512 by dimension.
    pub grid_size: Option<usize>,
    /// Slack demanded from the ball check, as a multiple of `v̄`.
    pub required_slack: f64,
    /// Skip the margin chain and the ball check (for counterexamples).
    pub unchecked: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self { constant: ConstantPolicy::ClosedForm, lower_bound: None, grid_size: None, required_slack: 1e-6, unchecked: false }
    }
}

/// One step of play.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub allocation: Vec<f64>,
    pub promise: Vec<f64>,
    pub next: PromiseState,
}

#[derive(Clone, Debug)]
pub struct BallMechanism {
    support: Arc<JointSupport>,
    stage: Stage,
    constant: f64,
    plans: Vec<Arc<BoundaryPlan>>,
    means: Vec<f64>,
}

pub fn build_ball_mechanism(profile: &UtilityProfile, x: &[f64], r: f64, delta: f64, gamma: f64) -> Result<BallMechanism> {
    let support = Arc::new(JointSupport::new(profile)?);
    BallMechanism::build(support, Stage::stationary(x, r, delta, gamma), &BuildOptions::default())
}

fn default_grid(n: usize) -> usize {
    match n {
        1 | 2 => 64,
        3 => 256,
        _ => 512,
    }
}

impl BallMechanism {
    pub fn build(support: Arc<JointSupport>, stage: Stage, opts: &BuildOptions) -> Result<Self> {
        let profile = support.profile().clone();
        let n = profile.n();
        if stage.center.len() != n || stage.anchor.len() != n || stage.next_center.len() != n {
            return Err(Error::InvalidInput("stage vectors have the wrong length".into()));
        }
        if !(stage.gamma > 0.0 && stage.gamma < 1.0) || !(stage.radius > 0.0) || stage.outer < stage.radius {
            return Err(Error::InvalidInput("need 0 < γ < 1, r > 0 and δ ≥ 0".into()));
        }
        let kappa = stage.kappa();
        let delta = stage.margin();
        if !opts.unchecked {
            if delta > stage.radius / kappa * (1.0 + 1e-12) {
                return Err(Error::MarginViolated(format!(
                    "δ = {delta} exceeds rγ/(1-γ) = {}",
                    stage.radius / kappa
                )));
            }
            let verdict = ball_in_ustar(&profile, &BallQuery::new(stage.anchor.clone(), stage.outer))?;
            let need = opts.required_slack * profile.vbar();
            match verdict {
                BallVerdict::Outside { witness, slack } => return Err(Error::NotInUstar { witness, slack }),
                BallVerdict::Inside { min_slack, direction } if min_slack < need => {
                    return Err(Error::NotInUstar { witness: direction, slack: min_slack - need })
                }
                _ => {}
            }
        }
        let means = profile.means();
        let mut mech = Self { support, stage, constant: 0.0, plans: Vec::new(), means };
        let grid_size = opts.grid_size.unwrap_or_else(|| default_grid(n));
        if grid_size > 0 && n > 1 {
            let grid = mech.plan_directions(grid_size);
            let built: Vec<Result<BoundaryPlan>> =
                grid.par_iter().map(|y| BoundaryPlan::build(&mech.support, &mech.stage, y)).collect();
            for b in built {
                mech.plans.push(Arc::new(b?));
            }
        }
        mech.constant = match opts.constant {
            ConstantPolicy::Fixed(c) => c,
            ConstantPolicy::ClosedForm => {
                let lower = opts.lower_bound.or_else(|| {
                    let lb = profile.dists().iter().map(|d| d.min_atom()).fold(f64::INFINITY, f64::min);
                    (lb > 0.0).then_some(lb)
                });
                margin_constant(&profile, &mech.stage.center, mech.stage.radius, lower)?
            }
            ConstantPolicy::Certified => mech.plans.iter().map(|p| (p.spread / kappa).powi(2)).fold(0.0, f64::max),
        };
        if !opts.unchecked {
            let floor = mech.constant * kappa / mech.stage.radius;
            if delta < floor * (1.0 - 1e-12) {
                return Err(Error::MarginViolated(format!("δ = {delta} is below C(1-γ)/(γr) = {floor}")));
            }
        }
        Ok(mech)
    }

    pub fn support(&self) -> &Arc<JointSupport> {
        &self.support
    }

    pub fn profile(&self) -> &UtilityProfile {
        self.support.profile()
    }

    pub fn stage(&self) -> &Stage {
        &self.stage
    }

    pub fn gamma(&self) -> f64 {
        self.stage.gamma
    }

    pub fn center(&self) -> &[f64] {
        &self.stage.center
    }

    pub fn radius(&self) -> f64 {
        self.stage.radius
    }

    pub fn margin(&self) -> f64 {
        self.stage.margin()
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    pub fn plans(&self) -> &[Arc<BoundaryPlan>] {
        &self.plans
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    /// Largest squared spread of the cached plans in units of `(1-γ)/γ`.
    pub fn certified_constant(&self) -> f64 {
        let k = self.stage.kappa();
        self.plans.iter().map(|p| (p.spread / k).powi(2)).fold(0.0, f64::max)
    }

    /// Cached directions: the good part of a dense orthant grid, subsampled to
    /// `budget`, plus a local fan around the normal of the no-information
    /// facet. The good cone can be very thin, so the coarse grid alone misses it.
    fn plan_directions(&self, budget: usize) -> Vec<Vec<f64>> {
        let n = self.profile().n();
        let means = &self.means;
        let mut local: Vec<Vec<f64>> = vec![self.profile().alpha().to_vec()];
        if means.iter().all(|e| *e > 0.0) {
            let inv: Vec<f64> = means.iter().map(|e| 1.0 / e).collect();
            let s = norm(&inv);
            let nu: Vec<f64> = inv.iter().map(|v| v / s).collect();
            local.push(nu.clone());
            for i in 0..n {
                let mut t: Vec<f64> = nu.iter().map(|v| -v * nu[i]).collect();
                t[i] += 1.0;
                let tn = norm(&t);
                if tn < 1e-12 {
                    continue;
                }
                for scale in [0.3, 0.1, 0.03, 0.01, 0.003, 0.001] {
                    for sign in [1.0, -1.0] {
                        let y: Vec<f64> =
                            nu.iter().zip(&t).map(|(a, b)| a + sign * scale * b / tn).collect();
                        if y.iter().all(|v| *v >= 0.0) {
                            let yn = norm(&y);
                            local.push(y.iter().map(|v| v / yn).collect());
                        }
                    }
                }
            }
        }
        let mut dirs: Vec<Vec<f64>> =
            local.into_iter().filter(|y| self.is_good_direction(y)).collect();
        let dense: Vec<Vec<f64>> = orthant_grid(n, budget * 64, &[])
            .into_iter()
            .filter(|y| self.is_good_direction(y))
            .collect();
        let room = budget.saturating_sub(dirs.len()).max(1);
        let step = dense.len().div_ceil(room).max(1);
        dirs.extend(dense.into_iter().step_by(step));
        dirs
    }

    /// `y ≥ 0` such that `x + r y` is exposed in the region: no trivial vertex
    /// lies farther along `y`.
    pub fn is_good_direction(&self, y: &[f64]) -> bool {
        if y.iter().any(|v| *v < -1e-12) {
            return false;
        }
        let reach = dot(y, &self.stage.center) + self.stage.radius;
        y.iter().zip(&self.means).all(|(yi, e)| reach >= yi * e - 1e-12)
    }

    /// Cached plan for a grid direction, or a fresh one.
    pub fn plan_for(&self, y: &[f64]) -> Result<Arc<BoundaryPlan>> {
        if let Some(p) = self.plans.iter().find(|p| p.direction.iter().zip(y).all(|(a, b)| (a - b).abs() <= 1e-12)) {
            return Ok(p.clone());
        }
        Ok(Arc::new(BoundaryPlan::build(&self.support, &self.stage, y)?))
    }

    fn boundary(&self, y: &[f64]) -> Vec<f64> {
        self.stage.center.iter().zip(y).map(|(c, v)| c + self.stage.radius * v).collect()
    }

    /// Decomposes `u` with the largest possible boundary weight `q_0`.
    pub fn decompose(&self, u: &[f64]) -> Result<PromiseState> {
        let n = self.means.len();
        if u.len() != n || u.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("state has the wrong length".into()));
        }
        if u.iter().any(|v| *v < -1e-12) {
            return Err(Error::StateOutsideRegion { state: u.to_vec() });
        }
        let u: Vec<f64> = u.iter().map(|v| v.max(0.0)).collect();
        if u.iter().all(|v| *v <= 1e-15) {
            return Ok(PromiseState { u, s: vec![0.0; n], q: vec![0.0; n], q0: 0.0, plan: None });
        }
        if n > 1 {
            let off: Vec<f64> = u.iter().zip(&self.stage.center).map(|(a, b)| a - b).collect();
            let dist = norm(&off);
            if (dist - self.stage.radius).abs() <= 1e-10 * self.stage.radius.max(1.0) {
                let y: Vec<f64> = off.iter().map(|v| v / dist).collect();
                if self.is_good_direction(&y) {
                    let plan = self.plan_for(&y)?;
                    return Ok(PromiseState { u, s: vec![1.0; n], q: vec![0.0; n], q0: 1.0, plan: Some(plan) });
                }
            }
            // Cached directions first; first index wins ties.
            let mut best: Option<(usize, f64)> = None;
            for (k, p) in self.plans.iter().enumerate() {
                if let Some(q0) = max_boundary_weight(&u, &p.point, &self.means) {
                    if best.map_or(true, |(_, b)| q0 > b + 1e-12) {
                        best = Some((k, q0));
                    }
                }
            }
            if let Some((k, q0)) = best {
                if q0 > 0.0 {
                    return Ok(self.assemble(u, q0, Some(self.plans[k].clone())));
                }
            }
            if best.is_none() {
                if let Some(y) = self.search_direction(&u) {
                    let b = self.boundary(&y);
                    let q0 = max_boundary_weight(&u, &b, &self.means).unwrap_or(0.0);
                    let plan = self.plan_for(&y)?;
                    return Ok(self.assemble(u, q0, Some(plan)));
                }
            }
        }
        let load: f64 = u.iter().zip(&self.means).map(|(v, e)| if *v > 0.0 { v / e } else { 0.0 }).sum();
        if load <= 1.0 + 1e-12 && u.iter().zip(&self.means).all(|(v, e)| *v == 0.0 || *e > 0.0) {
            return Ok(self.assemble(u, 0.0, None));
        }
        Err(Error::StateOutsideRegion { state: u })
    }

    /// Pattern search over good directions for a feasible decomposition.
    fn search_direction(&self, u: &[f64]) -> Option<Vec<f64>> {
        let n = u.len();
        let score = |y: &[f64]| -> f64 {
            if !self.is_good_direction(y) {
                return f64::INFINITY;
            }
            let b = self.boundary(y);
            match max_boundary_weight(u, &b, &self.means) {
                Some(q0) => -q0,
                None => psi_min(u, &b, &self.means),
            }
        };
        let mut starts: Vec<Vec<f64>> = orthant_grid(n, 4 * default_grid(n), &[u.to_vec()])
            .into_iter()
            .filter(|y| self.is_good_direction(y))
            .collect();
        if starts.is_empty() {
            return None;
        }
        let vals: Vec<f64> = starts.iter().map(|y| score(y)).collect();
        let mut order: Vec<usize> = (0..starts.len()).collect();
        order.sort_by(|a, b| vals[*a].total_cmp(&vals[*b]).then(a.cmp(b)));
        let mut best: Option<(Vec<f64>, f64)> = None;
        for &k in order.iter().take(3) {
            let (y, v) = refine_direction(&starts[k], vals[k], 80, &score);
            if best.as_ref().map_or(true, |(_, bv)| v < *bv) {
                best = Some((y, v));
            }
        }
        starts.clear();
        best.filter(|(_, v)| *v <= 0.0).map(|(y, _)| y)
    }

    fn assemble(&self, u: Vec<f64>, q0: f64, plan: Option<Arc<BoundaryPlan>>) -> PromiseState {
        let n = u.len();
        let b: Vec<f64> = plan.as_ref().map(|p| p.point.clone()).unwrap_or_else(|| vec![0.0; n]);
        let mut q = vec![0.0; n];
        let mut s = vec![0.0; n];
        for j in 0..n {
            if self.means[j] > 0.0 {
                q[j] = (u[j] - q0 * b[j]).max(0.0) / self.means[j];
            }
            let w = q[j] * self.means[j] + q0 * b[j];
            s[j] = if w > 0.0 { (u[j] / w).min(1.0) } else { 0.0 };
        }
        let plan = if q0 > 0.0 { plan } else { None };
        PromiseState { u, s, q, q0, plan }
    }

    /// Full round rule of a state.
    pub fn rule(&self, state: &PromiseState) -> RoundRule {
        let n = self.means.len();
        let len = self.support.len();
        let mut alloc = Vec::with_capacity(len * n);
        let mut promises = Vec::with_capacity(len * n);
        for k in 0..len {
            for i in 0..n {
                let (p, z) = match &state.plan {
                    Some(plan) => (plan.table.entry(k)[i], plan.promise(k)[i]),
                    None => (0.0, 0.0),
                };
                alloc.push(state.s[i] * (state.q[i] + state.q0 * p));
                promises.push(state.s[i] * (state.q[i] * self.means[i] + state.q0 * z));
            }
        }
        RoundRule { support: self.support.clone(), gamma: self.stage.gamma, target: state.u.clone(), alloc, promises }
    }

    /// Allocation and continuation for joint outcome `k`, without decomposing
    /// the continuation.
    pub fn transition(&self, state: &PromiseState, k: usize) -> (Vec<f64>, Vec<f64>) {
        let n = self.means.len();
        let mut alloc = vec![0.0; n];
        let mut promise = vec![0.0; n];
        for i in 0..n {
            let (p, z) = match &state.plan {
                Some(plan) => (plan.table.entry(k)[i], plan.promise(k)[i]),
                None => (0.0, 0.0),
            };
            alloc[i] = state.s[i] * (state.q[i] + state.q0 * p);
            promise[i] = state.s[i] * (state.q[i] * self.means[i] + state.q0 * z);
        }
        (alloc, promise)
    }

    /// Plays joint outcome `k` from `state`.
    pub fn step(&self, state: &PromiseState, k: usize) -> Result<StepOutcome> {
        let (allocation, promise) = self.transition(state, k);
        let next = self.decompose(&promise)?;
        Ok(StepOutcome { allocation, promise, next })
    }

    /// Plays a report vector, snapping off-atom reports to the atom below.
    pub fn step_reports(&self, state: &PromiseState, reports: &[f64]) -> Result<StepOutcome> {
        self.step(state, self.support.locate_reports(reports))
    }

    /// Worst slack of the continuation promises of `state`.
    ///
    /// Boundary components must land in the next ball; for mixed states the
    /// boundary component is recovered from each coordinate the state uses.
    /// Constant states keep their promise and report exactly zero.
    pub fn promise_slack(&self, state: &PromiseState) -> f64 {
        let Some(plan) = &state.plan else { return 0.0 };
        if state.q0 <= 0.0 {
            return 0.0;
        }
        let n = self.means.len();
        let rule = self.rule(state);
        let mut worst = f64::INFINITY;
        let mut z = vec![0.0; n];
        for k in 0..self.support.len() {
            let w = rule.promise(k);
            for i in 0..n {
                z[i] = if state.s[i] > 0.0 {
                    (w[i] / state.s[i] - state.q[i] * self.means[i]) / state.q0
                } else {
                    plan.promise(k)[i]
                };
            }
            let off: Vec<f64> = z.iter().zip(&self.stage.next_center).map(|(a, b)| a - b).collect();
            worst = worst.min(self.stage.next_radius - norm(&off));
        }
        worst
    }

    /// State of the region maximizing `αᵀU`.
    pub fn alpha_best_state(&self) -> Result<PromiseState> {
        let profile = self.profile();
        let alpha = profile.alpha();
        let a = norm(alpha);
        let dir: Vec<f64> = alpha.iter().map(|v| v / a).collect();
        let ball = dot(alpha, &self.stage.center) + self.stage.radius * a;
        if profile.n() > 1 && self.is_good_direction(&dir) && ball >= no_info_value(profile, alpha) {
            return self.decompose(&self.boundary(&dir));
        }
        let (i, _) = self
            .means
            .iter()
            .zip(alpha)
            .enumerate()
            .map(|(i, (m, w))| (i, m * w))
            .fold((0, f64::MIN), |acc, x| if x.1 > acc.1 { x } else { acc });
        let mut u = vec![0.0; profile.n()];
        u[i] = self.means[i];
        self.decompose(&u)
    }

    /// `h(α) - max(NI(α), αᵀx + r|α|)`.
    pub fn region_gap(&self) -> f64 {
        region_gap(self.profile(), &self.stage.center, self.stage.radius)
    }
}

/// α-gap of the region generated by `B(x, r)` and the trivial vertices.
pub fn region_gap(profile: &UtilityProfile, x: &[f64], r: f64) -> f64 {
    let alpha = profile.alpha();
    let reach = no_info_value(profile, alpha).max(dot(alpha, x) + r * norm(alpha));
    support_value(profile, alpha) - reach
}

/// Center of a ball of radius `rho` inside `U*` maximizing `αᵀx`, with every
/// support constraint met with slack at least `slack`.
///
/// Kelley's cutting-plane method: the linear program keeps the cuts
/// `βᵀx + ρ|β| ≤ h(β)` found so far and the separation oracle is [`ball_in_ustar`].
pub fn place_ball(profile: &UtilityProfile, rho: f64, slack: f64) -> Result<Vec<f64>> {
    use microlp::{ComparisonOp, OptimizationDirection, Problem};
    let n = profile.n();
    let alpha = profile.alpha();
    let means = profile.means();
    let reach = rho + slack;
    let mut cuts: Vec<Vec<f64>> = orthant_grid(n, 16 * n, &[alpha.to_vec()]);
    let mut last = vec![0.0; n];
    for _ in 0..400 {
        let mut lp = Problem::new(OptimizationDirection::Maximize);
        let vars: Vec<_> = (0..n).map(|i| lp.add_var(alpha[i], (reach, means[i].max(reach)))).collect();
        for b in &cuts {
            let expr: Vec<_> = vars.iter().zip(b).map(|(v, c)| (*v, *c)).collect();
            lp.add_constraint(expr, ComparisonOp::Le, support_value(profile, b) - reach * norm(b));
        }
        let infeasible = |slack: f64| Error::NotInUstar { witness: alpha.to_vec(), slack };
        let sol = match lp.solve() {
            Ok(out) => out.into_solution().map_err(|_| infeasible(f64::NAN))?,
            Err(_) => return Err(infeasible(-reach)),
        };
        let x: Vec<f64> = vars.iter().map(|v| sol.var_value(*v)).collect();
        match ball_in_ustar(profile, &BallQuery::new(x.clone(), reach))? {
            BallVerdict::Inside { .. } => return Ok(x),
            BallVerdict::Outside { witness, slack: s } => {
                if s > -1e-13 * profile.vbar() || x == last {
                    // Step back along the witness by the tiny remaining violation.
                    return Ok(x.iter().zip(&witness).map(|(xi, w)| xi + s * w).collect());
                }
                cuts.push(witness);
            }
        }
        last = x;
    }
    Err(Error::SolverStall { iterations: 400, residual: f64::NAN })
}

/// `ψ(q) = q + Σ_j (u_j - q b_j)⁺ / E_j` at the breakpoints, as (q, ψ) pairs.
fn psi_points(u: &[f64], b: &[f64], e: &[f64]) -> Option<Vec<(f64, f64)>> {
    if u.iter().zip(e).any(|(v, m)| *v > 1e-15 && *m <= 0.0) {
        return None;
    }
    let psi = |q: f64| -> f64 {
        q + u.iter().zip(b).zip(e).filter(|(_, m)| **m > 0.0).map(|((v, bj), m)| (v - q * bj).max(0.0) / m).sum::<f64>()
    };
    let mut qs = vec![0.0, 1.0];
    for (v, bj) in u.iter().zip(b) {
        if *bj > 0.0 {
            let t = v / bj;
            if t > 0.0 && t < 1.0 {
                qs.push(t);
            }
        }
    }
    qs.sort_by(f64::total_cmp);
    qs.dedup();
    Some(qs.into_iter().map(|q| (q, psi(q))).collect())
}

fn psi_min(u: &[f64], b: &[f64], e: &[f64]) -> f64 {
    psi_points(u, b, e).map_or(f64::INFINITY, |pts| pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min))
}

/// Largest `q_0 ∈ [0, 1]` with `ψ(q_0) ≤ 1`, if any.
fn max_boundary_weight(u: &[f64], b: &[f64], e: &[f64]) -> Option<f64> {
    const EPS: f64 = 1e-12;
    let pts = psi_points(u, b, e)?;
    let last = pts.iter().rposition(|p| p.1 <= 1.0 + EPS)?;
    if last + 1 == pts.len() {
        return Some(1.0);
    }
    let (qa, pa) = pts[last];
    let (qb, pb) = pts[last + 1];
    if pa >= 1.0 {
        return Some(qa);
    }
    Some((qa + (1.0 - pa) / (pb - pa) * (qb - qa)).clamp(qa, qb))
}

/// Promise keeping of `state`: largest deviation between `U` and the value it
/// delivers.
pub fn verify_promise_keeping(mech: &BallMechanism, state: &PromiseState, tol: f64) -> Check {
    let value = mech.rule(state).promise_keeping_violation();
    Check { value, passed: value <= tol }
}

/// Validity of the continuation promises: worst slack over all joint reports.
pub fn verify_valid_promises(mech: &BallMechanism, state: &PromiseState) -> Check {
    let value = mech.promise_slack(state);
    Check { value, passed: value >= -1e-9 }
}

/// One-round incentive compatibility of `state`: largest misreport gain.
pub fn verify_ic(mech: &BallMechanism, state: &PromiseState, tol: f64) -> Check {
    let value = mech.rule(state).ic_gain();
    Check { value, passed: value <= tol }
}

/// Knobs of the finite-horizon construction.
#[derive(Clone, Debug)]
pub struct FiniteHorizonConfig {
    /// Multiplier `c_0` in `C̃ = c_0 C`.
    pub c0: f64,
    /// The constant `C` of the margin chain.
    pub constant: f64,
    /// Scale of the start-up ball; defaults to `min E[u_i] / (12 n)`.
    pub r0: Option<f64>,
    /// Start-up center; defaults to `6 r_0 1`.
    pub x0: Option<Vec<f64>>,
    /// Direction budget of the per-step ball checks (0 disables them).
    pub ball_budget: usize,
}

impl Default for FiniteHorizonConfig {
    fn default() -> Self {
        Self { c0: 8.0, constant: 1.0, r0: None, x0: None, ball_budget: 128 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScheduleStep {
    /// Rounds remaining, including this one.
    pub t: usize,
    pub gamma: f64,
    pub center: Vec<f64>,
    pub radius: f64,
    pub margin: f64,
    /// Center of the ball whose points the tables realize.
    pub anchor: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct FiniteHorizonSchedule {
    pub horizon: usize,
    pub t0: usize,
    pub t1: usize,
    pub c_tilde: f64,
    pub r0: f64,
    pub x0: Vec<f64>,
    pub x: Vec<f64>,
    pub r: f64,
    pub delta: f64,
    /// Steps for `t = t0 + 1 ..= horizon`, in increasing `t`.
    pub steps: Vec<ScheduleStep>,
    /// `|x^{(T)} - x|`.
    pub drift: f64,
    /// Worst ball-check slack over the steps (infinite when checks are off).
    pub min_ball_slack: f64,
}

pub fn finite_gamma(t: usize) -> f64 {
    1.0 - 1.0 / t as f64
}

impl FiniteHorizonSchedule {
    pub fn step(&self, t: usize) -> Option<&ScheduleStep> {
        if t <= self.t0 || t > self.horizon {
            return None;
        }
        self.steps.get(t - self.t0 - 1)
    }

    pub fn final_center(&self) -> &[f64] {
        self.steps.last().map(|s| s.center.as_slice()).unwrap_or(&self.x0)
    }

    /// Round geometry at `t` remaining rounds (`t > t0`).
    pub fn stage(&self, t: usize) -> Option<Stage> {
        let s = self.step(t)?;
        let (next_center, next_radius) = match self.step(t - 1) {
            Some(p) => (p.center.clone(), p.radius),
            // The start-up ball: promises land inside the no-information set.
            None => (self.x0.clone(), s.radius),
        };
        Some(Stage {
            gamma: s.gamma,
            center: s.center.clone(),
            radius: s.radius,
            anchor: s.anchor.clone(),
            outer: s.radius + s.margin,
            next_center,
            next_radius,
        })
    }

    /// `rγ/(1-γ) ≥ δ_t ≥ C̃(1-γ)/(γ r_t)` at every step; returns the first failure.
    pub fn chain_violation(&self) -> Option<usize> {
        self.steps.iter().find_map(|s| {
            let k = (1.0 - s.gamma) / s.gamma;
            let ok = s.radius / k >= s.margin * (1.0 - 1e-12) && s.margin >= self.c_tilde * k / s.radius * (1.0 - 1e-12);
            (!ok).then_some(s.t)
        })
    }

    /// α-gap of the final ball `B(x^{(T)}, r)`.
    pub fn region_gap(&self, profile: &UtilityProfile) -> f64 {
        region_gap(profile, self.final_center(), self.r)
    }
}

/// Builds the radius/margin/center trajectory that reaches `B(x, r)` in `T` rounds.
pub fn finite_horizon_schedule(
    profile: &UtilityProfile,
    x: &[f64],
    r: f64,
    delta: f64,
    horizon: usize,
    config: &FiniteHorizonConfig,
) -> Result<FiniteHorizonSchedule> {
    let sched = schedule_geometry(profile, x, r, delta, horizon, config)?;
    check_schedule(profile, sched, config)
}

fn schedule_geometry(
    profile: &UtilityProfile,
    x: &[f64],
    r: f64,
    delta: f64,
    horizon: usize,
    config: &FiniteHorizonConfig,
) -> Result<FiniteHorizonSchedule> {
    let n = profile.n();
    let infeasible = |step: usize, reason: String| Error::ScheduleInfeasible { step, reason };
    if horizon < 2 {
        return Err(infeasible(horizon, "the horizon must be at least 2".into()));
    }
    if x.len() != n || !(r > 0.0) || !(delta > 0.0) {
        return Err(Error::InvalidInput("need a center of length n and r, δ > 0".into()));
    }
    let means = profile.means();
    let min_mean = means.iter().copied().fold(f64::INFINITY, f64::min);
    let r0 = config.r0.unwrap_or(min_mean / (12.0 * n as f64));
    let x0 = config.x0.clone().unwrap_or_else(|| vec![6.0 * r0; n]);
    let c_tilde = config.c0 * config.constant;
    if !(r0 >= 2.0 * r) {
        return Err(infeasible(0, format!("need r ≤ r0/2 (r = {r}, r0 = {r0})")));
    }
    if delta > r {
        return Err(infeasible(horizon, format!("need δ ≤ r (δ = {delta}, r = {r})")));
    }
    let tf = horizon as f64;
    let floor = c_tilde / ((tf - 1.0) * r) * (1.0 + (r / delta).ln());
    if delta < floor * (1.0 - 1e-12) {
        return Err(infeasible(horizon, format!("δ = {delta} is below the chain floor {floor}")));
    }
    let rad = |t: usize| (c_tilde / (t as f64 - 1.0)).sqrt();
    let mut t1 = 2usize;
    while t1 <= horizon && rad(t1) > r {
        t1 += 1;
    }
    if t1 > horizon {
        return Err(infeasible(horizon, "the radius never settles before the horizon".into()));
    }
    let mut t0 = 1usize;
    for t in 2..=horizon {
        if 2.0 * rad(t) >= r0 {
            t0 = t;
        }
    }
    let rho = r + delta;
    let mut center = x0.clone();
    let mut steps = Vec::with_capacity(horizon - t0);
    for t in t0 + 1..=horizon {
        let gamma = finite_gamma(t);
        let (rt, dt) = if t < t1 {
            (rad(t), rad(t))
        } else {
            (r, (c_tilde / ((t as f64 - 1.0) * r)).max(delta))
        };
        let w = (rt + dt - rho) / (2.0 * r0 - rho);
        let anchor: Vec<f64> = (0..n).map(|i| x[i] + w * (x0[i] - x[i])).collect();
        for i in 0..n {
            center[i] = gamma * center[i] + (1.0 - gamma) * anchor[i];
        }
        steps.push(ScheduleStep { t, gamma, center: center.clone(), radius: rt, margin: dt, anchor });
    }
    let off: Vec<f64> = center.iter().zip(x).map(|(a, b)| a - b).collect();
    Ok(FiniteHorizonSchedule {
        horizon,
        t0,
        t1,
        c_tilde,
        r0,
        x0,
        x: x.to_vec(),
        r,
        delta,
        steps,
        drift: norm(&off),
        min_ball_slack: f64::INFINITY,
    })
}

fn check_schedule(profile: &UtilityProfile, mut sched: FiniteHorizonSchedule, config: &FiniteHorizonConfig) -> Result<FiniteHorizonSchedule> {
    if let Some(t) = sched.chain_violation() {
        return Err(Error::ScheduleInfeasible { step: t, reason: "per-step margin chain fails".into() });
    }
    // The start-up ball must hold the first promises without information.
    let means = profile.means();
    let half = sched.r0 / 2.0;
    let inv: Vec<f64> = means.iter().map(|m| 1.0 / m).collect();
    let load: f64 = sched.x0.iter().zip(&means).map(|(a, m)| a / m).sum::<f64>() + half * norm(&inv);
    if load > 1.0 || sched.x0.iter().any(|v| *v < half) {
        return Err(Error::ScheduleInfeasible { step: sched.t0, reason: "start-up ball leaves the no-information set".into() });
    }
    if config.ball_budget == 0 {
        return Ok(sched);
    }
    let query = |c: &[f64], rad: f64| BallQuery { center: c.to_vec(), radius: rad, direction_budget: config.ball_budget, refinement_steps: 20 };
    let start = ball_in_ustar(profile, &query(&sched.x0, 2.0 * sched.r0))?;
    if !start.is_inside() {
        return Err(Error::ScheduleInfeasible { step: 0, reason: format!("B(x0, 2 r0) leaves U* (slack {:e})", start.slack()) });
    }
    let mut worst = start.slack();
    let mut last: Option<(Vec<f64>, f64, f64)> = None;
    for s in &sched.steps {
        let rho = s.radius + s.margin;
        let slack = match &last {
            Some((a, r, v)) if *a == s.anchor && *r == rho => *v,
            _ => ball_in_ustar(profile, &query(&s.anchor, rho))?.slack(),
        };
        if slack < 0.0 {
            return Err(Error::ScheduleInfeasible { step: s.t, reason: format!("B(y_t, r_t + δ_t) leaves U* (slack {slack:e})") });
        }
        worst = worst.min(slack);
        last = Some((s.anchor.clone(), rho, slack));
    }
    sched.min_ball_slack = worst;
    Ok(sched)
}

/// Smallest margin `δ` whose schedule meets the chain floor and keeps the final
/// drift within `δ/2`. `center_for` maps a margin to the target center.
pub fn calibrate_margin(
    profile: &UtilityProfile,
    center_for: &dyn Fn(f64) -> Vec<f64>,
    r: f64,
    horizon: usize,
    config: &FiniteHorizonConfig,
) -> Result<FiniteHorizonSchedule> {
    let tf = horizon as f64;
    if horizon < 2 {
        return Err(Error::ScheduleInfeasible { step: horizon, reason: "the horizon must be at least 2".into() });
    }
    let k = config.c0 * config.constant / ((tf - 1.0) * r);
    let chain = |d: f64| d - k * (1.0 + (r / d).ln());
    if chain(r) < 0.0 {
        return Err(Error::ScheduleInfeasible { step: horizon, reason: "no margin below r meets the chain".into() });
    }
    let (mut lo, mut hi) = (r * 1e-12, r);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chain(mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let d_min = hi * (1.0 + 1e-12);
    let ok = |d: f64| -> bool {
        schedule_geometry(profile, &center_for(d), r, d.min(r), horizon, config).map_or(false, |s| s.drift <= d / 2.0)
    };
    let mut prev = d_min;
    let mut found = None;
    if ok(d_min) {
        found = Some(d_min);
    } else {
        for j in 1..=60 {
            let d = d_min * (r / d_min).powf(j as f64 / 60.0);
            if ok(d) {
                found = Some(d);
                break;
            }
            prev = d;
        }
    }
    let mut hi = found.ok_or_else(|| Error::ScheduleInfeasible { step: horizon, reason: "drift exceeds δ/2 for every margin up to r".into() })?;
    let mut lo = prev;
    if hi > d_min {
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if ok(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
    }
    finite_horizon_schedule(profile, &center_for(hi), r, hi, horizon, config)
}

/// The time-varying mechanism of a finite-horizon schedule.
#[derive(Clone, Debug)]
pub struct FiniteHorizonMechanism {
    support: Arc<JointSupport>,
    horizon: usize,
    t0: usize,
    x0: Vec<f64>,
    /// Stage mechanisms for `t = t0 + 1 ..= horizon`.
    stages: Vec<BallMechanism>,
    /// Optimal one-round rule, used when the horizon is a single round.
    one_shot: Option<AllocationTable>,
    means: Vec<f64>,
}

/// State of a finite-horizon play: rounds remaining and the promise.
#[derive(Clone, Debug)]
pub struct FiniteState {
    pub t: usize,
    pub u: Vec<f64>,
    pub ball: Option<PromiseState>,
}

impl FiniteHorizonMechanism {
    pub fn from_schedule(support: Arc<JointSupport>, schedule: &FiniteHorizonSchedule) -> Result<Self> {
        let opts = BuildOptions { unchecked: true, grid_size: Some(16), constant: ConstantPolicy::Fixed(schedule.c_tilde), ..Default::default() };
        let stages = (schedule.t0 + 1..=schedule.horizon)
            .map(|t| BallMechanism::build(support.clone(), schedule.stage(t).expect("step in range"), &opts))
            .collect::<Result<Vec<_>>>()?;
        // The schedule's constant is a modelling choice; the tables must also
        // meet the chain with the spread they actually have.
        for (t, m) in (schedule.t0 + 1..).zip(&stages) {
            let k = m.stage.kappa();
            let need = k * m.certified_constant() / m.radius();
            if m.margin() < need * (1.0 - 1e-12) {
                return Err(Error::MarginViolated(format!(
                    "stage t = {t}: margin {:e} is below the certified floor {need:e}",
                    m.margin()
                )));
            }
        }
        let means = support.profile().means();
        Ok(Self { support, horizon: schedule.horizon, t0: schedule.t0, x0: schedule.x0.clone(), stages, one_shot: None, means })
    }

    /// Single-round play with the best one-shot incentive-compatible rule:
    /// only whether each report is zero is used.
    pub fn one_shot(support: Arc<JointSupport>) -> Self {
        let profile = support.profile().clone();
        let alpha = profile.alpha().to_vec();
        let n = profile.n();
        let means = profile.means();
        let cond: Vec<f64> = profile
            .dists()
            .iter()
            .map(|d| {
                let p = 1.0 - d.prob_zero();
                if p > 0.0 { d.mean() / p } else { 0.0 }
            })
            .collect();
        let mut winners = Vec::with_capacity(n);
        let table = AllocationTable::from_fn(support.clone(), |o| {
            let mut row = vec![0.0; n];
            let w: Vec<f64> = (0..n).map(|i| if o.values[i] > 0.0 { alpha[i] * cond[i] } else { 0.0 }).collect();
            let m = w.iter().copied().fold(0.0, f64::max);
            if m > 0.0 {
                winners.clear();
                winners.extend((0..n).filter(|&i| crate::dist::feq(w[i], m)));
                for &i in &winners {
                    row[i] = 1.0 / winners.len() as f64;
                }
            }
            row
        });
        Self { support, horizon: 1, t0: 1, x0: vec![0.0; n], stages: Vec::new(), one_shot: Some(table), means }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn support(&self) -> &Arc<JointSupport> {
        &self.support
    }

    pub fn stage(&self, t: usize) -> Option<&BallMechanism> {
        if t <= self.t0 {
            return None;
        }
        self.stages.get(t - self.t0 - 1)
    }

    /// The state delivering the largest `αᵀU` at the full horizon.
    pub fn initial_state(&self) -> Result<FiniteState> {
        if let Some(table) = &self.one_shot {
            return Ok(FiniteState { t: 1, u: table.realized_utilities(), ball: None });
        }
        match self.stage(self.horizon) {
            Some(m) => {
                let st = m.alpha_best_state()?;
                Ok(FiniteState { t: self.horizon, u: st.u.clone(), ball: Some(st) })
            }
            None => Ok(FiniteState { t: self.horizon, u: self.x0.clone(), ball: None }),
        }
    }

    pub fn state_at(&self, t: usize, u: &[f64]) -> Result<FiniteState> {
        match self.stage(t) {
            Some(m) => Ok(FiniteState { t, u: u.to_vec(), ball: Some(m.decompose(u)?) }),
            None => {
                let load: f64 = u.iter().zip(&self.means).map(|(v, e)| if *v > 0.0 { v / e } else { 0.0 }).sum();
                if load > 1.0 + 1e-9 {
                    return Err(Error::StateOutsideRegion { state: u.to_vec() });
                }
                Ok(FiniteState { t, u: u.to_vec(), ball: None })
            }
        }
    }

    /// Allocation for outcome `k` and the next state (none after the last round).
    pub fn step(&self, state: &FiniteState, k: usize) -> Result<(Vec<f64>, Option<FiniteState>)> {
        if let Some(table) = &self.one_shot {
            return Ok((table.entry(k).to_vec(), None));
        }
        let (alloc, promise) = match (&state.ball, self.stage(state.t)) {
            (Some(ps), Some(m)) => m.transition(ps, k),
            _ => {
                // Constant allocation keeps the promise unchanged.
                let q: Vec<f64> = state.u.iter().zip(&self.means).map(|(v, e)| if *e > 0.0 { v / e } else { 0.0 }).collect();
                (q, state.u.clone())
            }
        };
        if state.t <= 1 {
            return Ok((alloc, None));
        }
        let next = self.state_at(state.t - 1, &promise)?;
        Ok((alloc, Some(next)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::DiscreteDist;

    fn e1(vbar: f64) -> UtilityProfile {
        let d = DiscreteDist::new(vec![1.0 / 6.0, 5.0 / 6.0], vec![0.5, 0.5]).unwrap();
        UtilityProfile::new(vbar, vec![1.0, 1.0], vec![d.clone(), d]).unwrap()
    }

    #[test]
    fn coupling_example() {
        let z = couple_promises(&[5.0, 3.0, 7.0], &[4.0, 3.0, 7.0], &[2.0, 1.0, 0.0], CouplingVariant::New).unwrap();
        assert_eq!(z, vec![5.0, 1.0, 7.0]);
        let z = couple_promises(&[0.3, 0.6], &[0.4, 0.5], &[1.0, 1.0], CouplingVariant::Legacy).unwrap();
        let w = couple_promises(&[0.3, 0.6], &[0.4, 0.5], &[1.0, 1.0], CouplingVariant::New).unwrap();
        assert!((z[0] - w[0]).abs() < 1e-15 && (z[1] - w[1]).abs() < 1e-15);
        assert!(matches!(
            couple_promises(&[1.0, 1.0], &[0.0, 0.0], &[1.0, 0.0], CouplingVariant::New),
            Err(Error::ZeroDirection)
        ));
    }

    #[test]
    fn constants() {
        let p = e1(1.0);
        let c = margin_constant(&p, &[0.25, 0.25], 0.05, None).unwrap();
        assert!((c - 196.0).abs() < 1e-9);
        let p = e1(5.0 / 6.0);
        let c = margin_constant(&p, &[0.25, 0.25], 0.05, Some(1.0 / 6.0)).unwrap();
        assert!((c - 56.25).abs() < 1e-9);
        assert!(matches!(margin_constant(&p, &[0.5, 0.25], 0.05, None), Err(Error::DegenerateCenter { index: 0, .. })));
    }

    #[test]
    fn constant_interim_promise() {
        let p = InterimAllocation { agent: 0, atoms: vec![0.25, 0.75], probs: vec![0.5, 0.5], values: vec![0.5, 0.5], monotone: true };
        let w = interim_promise(&p, 0.3, 0.9, 0.25);
        assert!((w - 0.275 / 0.9).abs() < 1e-15);
        assert!((interim_promise(&p, 0.3, 0.9, 0.75) - w).abs() < 1e-15);
    }

    #[test]
    fn closed_form_constant_mechanism() {
        let p = e1(5.0 / 6.0);
        let gamma = 0.9999;
        let r = (56.25f64 * (1.0 - gamma) / gamma).sqrt();
        let m = build_ball_mechanism(&p, &[0.2, 0.2], r, r, gamma).unwrap();
        assert!((m.constant() - 56.25).abs() < 1e-9);
        let st = m.alpha_best_state().unwrap();
        assert!(verify_promise_keeping(&m, &st, 1e-9).passed);
        assert!(verify_valid_promises(&m, &st).passed);
        assert!(verify_ic(&m, &st, 1e-8).passed);
        let plan = st.plan.as_ref().unwrap();
        let y = &plan.direction;
        let k = (1.0 - gamma) / gamma;
        for i in 0..2 {
            let want = 0.2 + (r - k * r) * y[i];
            assert!((plan.mean_promise[i] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn build_errors() {
        let p = e1(1.0);
        assert!(matches!(build_ball_mechanism(&p, &[0.25, 0.25], 0.1, 10.0, 0.5), Err(Error::MarginViolated(_))));
        match build_ball_mechanism(&p, &[0.25, 0.25], 0.15, 0.15, 0.99) {
            Err(Error::NotInUstar { witness, .. }) => assert_eq!(witness, vec![1.0, 0.0]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn vertex_and_zero_states() {
        let p = e1(1.0);
        let opts = BuildOptions { constant: ConstantPolicy::Certified, unchecked: true, ..Default::default() };
        let support = Arc::new(JointSupport::new(&p).unwrap());
        let m = BallMechanism::build(support, Stage::stationary(&[0.2, 0.2], 0.05, 0.05, 0.9), &opts).unwrap();
        let v = m.decompose(&[0.5, 0.0]).unwrap();
        assert!(v.is_vertex());
        assert_eq!(verify_valid_promises(&m, &v).value, 0.0);
        for k in 0..4 {
            let out = m.step(&v, k).unwrap();
            assert_eq!(out.allocation, vec![1.0, 0.0]);
            assert!((out.promise[0] - 0.5).abs() < 1e-15);
        }
        let z = m.decompose(&[0.0, 0.0]).unwrap();
        let out = m.step(&z, 3).unwrap();
        assert_eq!(out.allocation, vec![0.0, 0.0]);
    }
}
