//! Simulated play, exact welfare gaps, deviation search and parameter sweeps.
//!
//! Monte Carlo runs draw types with [`CounterRng`], keyed by
//! `(seed, episode, round, agent)`, so results do not depend on how episodes
//! are scheduled across threads. Per-episode totals are reduced in episode
//! order.

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::dist::{CounterRng, JointSupport, UtilityProfile};
use crate::error::{Error, Result};
use crate::geometry::support_value;
use crate::mechanism::{
    calibrate_margin, place_ball, BallMechanism, FiniteHorizonConfig, FiniteHorizonMechanism, PromiseState,
};
use crate::rates::{default_eta_grid, fit_rate, predicted_eta_from, running_slopes, RateFunctions, RateReport};
use crate::realize::AllocationTable;
use crate::{dot, fmt_f64, norm};

/// Discounted runs stop once `γ^t` falls to this level.
pub const TRUNCATION: f64 = 1e-6;
/// Largest number of misreport maps enumerated by [`best_response_search`].
pub const MAX_DEVIATION_MAPS: usize = 10_000;

/// A mechanism that can be played round by round.
pub trait Dynamic: Sync {
    type State: Clone + Send + Sync;

    fn support(&self) -> &Arc<JointSupport>;
    fn gamma(&self) -> f64;
    fn promised<'a>(&self, state: &'a Self::State) -> &'a [f64];
    /// Allocation for joint outcome `k` and the continuation state, if any.
    fn advance(&self, state: &Self::State, k: usize) -> Result<(Vec<f64>, Option<Self::State>)>;
}

impl Dynamic for BallMechanism {
    type State = PromiseState;

    fn support(&self) -> &Arc<JointSupport> {
        BallMechanism::support(self)
    }

    fn gamma(&self) -> f64 {
        BallMechanism::gamma(self)
    }

    fn promised<'a>(&self, state: &'a PromiseState) -> &'a [f64] {
        &state.u
    }

    fn advance(&self, state: &PromiseState, k: usize) -> Result<(Vec<f64>, Option<PromiseState>)> {
        let out = self.step(state, k)?;
        Ok((out.allocation, Some(out.next)))
    }
}

/// A single round played with a fixed table (`γ = 0`).
#[derive(Clone, Debug)]
pub struct OneShot {
    pub table: AllocationTable,
}

impl Dynamic for OneShot {
    type State = Vec<f64>;

    fn support(&self) -> &Arc<JointSupport> {
        self.table.support()
    }

    fn gamma(&self) -> f64 {
        0.0
    }

    fn promised<'a>(&self, state: &'a Vec<f64>) -> &'a [f64] {
        state
    }

    fn advance(&self, _: &Vec<f64>, k: usize) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        Ok((self.table.entry(k).to_vec(), None))
    }
}

impl OneShot {
    pub fn state(&self) -> Vec<f64> {
        self.table.realized_utilities()
    }
}

/// Reporting behavior of the agents.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum Strategy {
    Truthful,
    /// Agent `agent` reports `map[l]` (a position in its support) whenever its
    /// true type is at position `l`; everyone else is truthful.
    Deviator { agent: usize, map: Vec<usize> },
}

impl Strategy {
    fn apply(&self, local: &mut [usize]) {
        if let Strategy::Deviator { agent, map } = self {
            local[*agent] = map[local[*agent]];
        }
    }

    fn validate(&self, support: &JointSupport) -> Result<()> {
        if let Strategy::Deviator { agent, map } = self {
            if *agent >= support.n() {
                return Err(Error::InvalidInput(format!("agent {agent} out of range")));
            }
            let m = support.agent_support(*agent).len();
            if map.len() != m || map.iter().any(|&v| v >= m) {
                return Err(Error::InvalidInput("misreport map does not match the agent's support".into()));
            }
        }
        Ok(())
    }
}

/// Rounds played by a discounted run: the first `t` with `γ^t ≤ 1e-6`.
pub fn truncation_rounds(gamma: f64) -> usize {
    if gamma <= 0.0 {
        return 1;
    }
    (TRUNCATION.ln() / gamma.ln()).ceil().max(1.0) as usize
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub reports: Vec<f64>,
    pub values: Vec<f64>,
    pub allocation: Vec<f64>,
    /// `u_i p_i` for each agent.
    pub utilities: Vec<f64>,
    /// Promise at the start of the round.
    pub promise: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SimulationTrace {
    pub gamma: f64,
    pub records: Vec<RoundRecord>,
    /// `(1-γ) Σ_t γ^t u_i(t) p_i(t)`; the plain sum of utilities when `γ = 0`.
    pub discounted: Vec<f64>,
}

impl SimulationTrace {
    /// Recomputes the discounted totals from the records.
    pub fn recompute(&self) -> Vec<f64> {
        let n = self.discounted.len();
        let mut acc = vec![0.0; n];
        let mut w = 1.0 - self.gamma;
        for r in &self.records {
            for i in 0..n {
                acc[i] += w * r.utilities[i];
            }
            w *= self.gamma;
        }
        acc
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SimulationSummary {
    pub gamma: f64,
    pub episodes: usize,
    pub rounds: usize,
    /// Exact promise of the starting state.
    pub promised: Vec<f64>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    /// `v̄ γ^{rounds}`, the largest utility the truncated tail could carry.
    pub tail_bound: f64,
    /// `h(α)`.
    pub first_best: f64,
    /// `αᵀU` of the starting state.
    pub exact_welfare: f64,
    /// `αᵀ mean`.
    pub welfare: f64,
    /// `h(α) - αᵀU`.
    pub gap: f64,
}

impl SimulationSummary {
    /// `|mean_i - U_i| ≤ k·stderr_i + tail` for every agent.
    pub fn consistent(&self, k: f64) -> bool {
        self.mean
            .iter()
            .zip(&self.promised)
            .zip(&self.stderr)
            .all(|((m, u), s)| (m - u).abs() <= k * s + self.tail_bound)
    }
}

fn play_episode<M: Dynamic>(
    mech: &M,
    start: &M::State,
    seed: u64,
    episode: u64,
    rounds: usize,
    strategy: &Strategy,
    mut record: Option<&mut Vec<RoundRecord>>,
) -> Result<Vec<f64>> {
    let support = mech.support();
    let n = support.n();
    let gamma = mech.gamma();
    let mut rng = CounterRng::new(seed, episode, n);
    let mut total = vec![0.0; n];
    let mut weight = 1.0 - gamma;
    let mut state = start.clone();
    for round in 0..rounds {
        let truth = rng.draw_round(support, round as u64);
        let mut local = truth.clone();
        strategy.apply(&mut local);
        let k_true = support.locate(&truth);
        let k = support.locate(&local);
        let (alloc, next) = mech.advance(&state, k)?;
        let values = support.values(k_true);
        let utils: Vec<f64> = values.iter().zip(&alloc).map(|(v, p)| v * p).collect();
        for i in 0..n {
            total[i] += weight * utils[i];
        }
        if let Some(rec) = record.as_deref_mut() {
            rec.push(RoundRecord {
                round,
                reports: support.values(k).to_vec(),
                values: values.to_vec(),
                allocation: alloc,
                utilities: utils,
                promise: mech.promised(&state).to_vec(),
            });
        }
        weight *= gamma;
        match next {
            Some(s) => state = s,
            None => break,
        }
    }
    Ok(total)
}

/// One recorded episode.
pub fn trace_discounted<M: Dynamic>(mech: &M, start: &M::State, seed: u64, episode: u64, strategy: &Strategy) -> Result<SimulationTrace> {
    strategy.validate(mech.support())?;
    let mut records = Vec::new();
    let discounted = play_episode(mech, start, seed, episode, truncation_rounds(mech.gamma()), strategy, Some(&mut records))?;
    Ok(SimulationTrace { gamma: mech.gamma(), records, discounted })
}

fn mean_stderr(totals: &[Vec<f64>], n: usize) -> (Vec<f64>, Vec<f64>) {
    let m = totals.len() as f64;
    let mut mean = vec![0.0; n];
    for t in totals {
        for i in 0..n {
            mean[i] += t[i];
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![0.0; n];
    for t in totals {
        for i in 0..n {
            var[i] += (t[i] - mean[i]).powi(2);
        }
    }
    let stderr = var.iter().map(|v| if m > 1.0 { (v / (m - 1.0) / m).sqrt() } else { 0.0 }).collect();
    (mean, stderr)
}

/// Monte Carlo estimate of the discounted utilities from `start`.
pub fn run_discounted<M: Dynamic>(mech: &M, start: &M::State, episodes: usize, seed: u64, strategy: &Strategy) -> Result<SimulationSummary> {
    let support = mech.support();
    strategy.validate(support)?;
    let profile = support.profile();
    let gamma = mech.gamma();
    let rounds = truncation_rounds(gamma);
    let totals = (0..episodes as u64)
        .into_par_iter()
        .map(|e| play_episode(mech, start, seed, e, rounds, strategy, None))
        .collect::<Result<Vec<_>>>()?;
    let (mean, stderr) = mean_stderr(&totals, profile.n());
    let promised = mech.promised(start).to_vec();
    let alpha = profile.alpha();
    let first_best = support_value(profile, alpha);
    let exact_welfare = dot(alpha, &promised);
    Ok(SimulationSummary {
        gamma,
        episodes,
        rounds,
        tail_bound: if gamma > 0.0 { profile.vbar() * gamma.powi(rounds as i32) } else { 0.0 },
        first_best,
        exact_welfare,
        welfare: dot(alpha, &mean),
        gap: first_best - exact_welfare,
        promised,
        mean,
        stderr,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct FiniteSummary {
    pub horizon: usize,
    pub episodes: usize,
    /// Exact average utilities of the starting state.
    pub promised: Vec<f64>,
    /// Monte Carlo average utilities per round.
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub first_best: f64,
    pub exact_gap: f64,
    pub monte_carlo_gap: f64,
}

impl FiniteSummary {
    /// `|mean_i - U_i| ≤ k·stderr_i` for every agent.
    pub fn consistent(&self, k: f64) -> bool {
        self.mean.iter().zip(&self.promised).zip(&self.stderr).all(|((m, u), s)| (m - u).abs() <= k * s)
    }
}

/// Plays the finite-horizon mechanism for its full horizon.
pub fn run_finite(mech: &FiniteHorizonMechanism, episodes: usize, seed: u64) -> Result<FiniteSummary> {
    let support = mech.support();
    let profile = support.profile();
    let n = profile.n();
    let horizon = mech.horizon();
    let start = mech.initial_state()?;
    let totals = (0..episodes as u64)
        .into_par_iter()
        .map(|e| {
            let mut rng = CounterRng::new(seed, e, n);
            let mut total = vec![0.0; n];
            let mut state = Some(start.clone());
            let mut round = 0u64;
            while let Some(s) = state {
                let local = rng.draw_round(support, round);
                let k = support.locate(&local);
                let (alloc, next) = mech.step(&s, k)?;
                for i in 0..n {
                    total[i] += support.values(k)[i] * alloc[i] / horizon as f64;
                }
                state = next;
                round += 1;
            }
            Ok(total)
        })
        .collect::<Result<Vec<_>>>()?;
    let (mean, stderr) = mean_stderr(&totals, n);
    let alpha = profile.alpha();
    let first_best = support_value(profile, alpha);
    Ok(FiniteSummary {
        horizon,
        episodes,
        exact_gap: first_best - dot(alpha, &start.u),
        monte_carlo_gap: first_best - dot(alpha, &mean),
        promised: start.u,
        mean,
        stderr,
        first_best,
    })
}

/// `h(α) - max(NI(α), αᵀx + r|α|)` of the mechanism's region.
pub fn exact_region_gap(mech: &BallMechanism) -> f64 {
    mech.region_gap()
}

#[derive(Clone, Debug, Default)]
pub struct DeviationOptions {
    /// Rounds evaluated exactly before continuing at the promised value
    /// (0 picks 2).
    pub depth: usize,
    /// Pull continuation promises that leave the region back toward the
    /// center instead of failing.
    pub clamp: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct DeviationResult {
    pub agent: usize,
    pub truthful: f64,
    pub best: f64,
    /// `best - truthful`.
    pub gain: f64,
    pub best_map: Vec<usize>,
    pub maps: usize,
    /// Continuations that had to be clamped.
    pub clamped: usize,
}

struct Node {
    u: Vec<f64>,
    /// For each reported outcome: allocation and child index (absent at leaves).
    children: Vec<(Vec<f64>, usize)>,
}

fn clamp_into(mech: &BallMechanism, w: &[f64]) -> Result<PromiseState> {
    let c = mech.center();
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let p: Vec<f64> = c.iter().zip(w).map(|(a, b)| a + mid * (b - a)).collect();
        if mech.decompose(&p).is_ok() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let p: Vec<f64> = c.iter().zip(w).map(|(a, b)| a + lo * (b - a)).collect();
    mech.decompose(&p)
}

/// Best stationary misreport map of `agent` against truthful opponents,
/// evaluated exactly over the first rounds with the promised value as
/// continuation.
pub fn best_response_search(mech: &BallMechanism, state: &PromiseState, agent: usize, opts: &DeviationOptions) -> Result<DeviationResult> {
    let support = mech.support().clone();
    let n = support.n();
    if agent >= n {
        return Err(Error::InvalidInput(format!("agent {agent} out of range")));
    }
    let m = support.agent_support(agent).len();
    let maps = (m as u128).checked_pow(m as u32).unwrap_or(u128::MAX);
    if maps > MAX_DEVIATION_MAPS as u128 {
        return Err(Error::GridTooLarge { size: maps, limit: MAX_DEVIATION_MAPS });
    }
    let depth = if opts.depth == 0 { 2 } else { opts.depth };
    let gamma = mech.gamma();
    let len = support.len();

    // Every reported history shares the same state tree.
    let mut clamped = 0usize;
    let mut nodes = vec![Node { u: state.u.clone(), children: Vec::new() }];
    let mut states = vec![Some(state.clone())];
    let mut frontier = vec![0usize];
    for level in 0..depth {
        let mut next_frontier = Vec::new();
        for &id in &frontier {
            let st = states[id].clone().expect("interior node has a state");
            let mut children = Vec::with_capacity(len);
            for k in 0..len {
                let (alloc, w) = mech.transition(&st, k);
                let leaf = level + 1 == depth;
                let child = match mech.decompose(&w) {
                    Ok(s) => Some(s),
                    Err(Error::StateOutsideRegion { .. }) if opts.clamp => {
                        clamped += 1;
                        Some(clamp_into(mech, &w)?)
                    }
                    Err(e) if !leaf => return Err(e),
                    Err(_) => None,
                };
                let u = child.as_ref().map(|c| c.u.clone()).unwrap_or(w);
                nodes.push(Node { u, children: Vec::new() });
                states.push(if leaf { None } else { child });
                let cid = nodes.len() - 1;
                children.push((alloc, cid));
                next_frontier.push(cid);
            }
            nodes[id].children = children;
        }
        frontier = next_frontier;
    }

    let value = |map: &[usize]| -> f64 {
        fn rec(nodes: &[Node], id: usize, support: &JointSupport, agent: usize, map: &[usize], gamma: f64) -> f64 {
            let node = &nodes[id];
            if node.children.is_empty() {
                return node.u[agent];
            }
            let mut local = vec![0usize; support.n()];
            let mut acc = 0.0;
            for k in 0..support.len() {
                for (i, l) in local.iter_mut().enumerate() {
                    *l = support.local_index(k, i);
                }
                local[agent] = map[local[agent]];
                let kr = support.locate(&local);
                let (alloc, child) = &node.children[kr];
                let u = support.values(k)[agent];
                acc += support.prob(k) * ((1.0 - gamma) * u * alloc[agent] + gamma * rec(nodes, *child, support, agent, map, gamma));
            }
            acc
        }
        rec(&nodes, 0, &support, agent, map, gamma)
    };

    let identity: Vec<usize> = (0..m).collect();
    let truthful = value(&identity);
    let mut best = truthful;
    let mut best_map = identity;
    let mut map = vec![0usize; m];
    for code in 0..maps as usize {
        let mut c = code;
        for slot in map.iter_mut() {
            *slot = c % m;
            c /= m;
        }
        let v = value(&map);
        if v > best {
            best = v;
            best_map = map.clone();
        }
    }
    Ok(DeviationResult { agent, truthful, best, gain: best - truthful, best_map, maps: maps as usize, clamped })
}

/// How a sweep picks the ball for each parameter value.
#[derive(Clone, Debug)]
pub enum BuilderPolicy {
    /// `r = δ = √(C(1-γ)/γ)`, ball of radius `r + δ` pushed along `α`.
    UniversalRate { constant: f64 },
    /// Fixed `r`, `δ = C(1-γ)/(γ r)`.
    SmoothBall { r: f64, constant: f64 },
    /// Finite-horizon schedules with the smallest margin meeting the chain and
    /// the drift bound; centers slide along `α` inside a ball of radius `2r`.
    FiniteHorizon { r: f64, config: FiniteHorizonConfig },
}

#[derive(Clone, Debug)]
pub enum SweepGrid {
    Gammas(Vec<f64>),
    Horizons(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub grid: SweepGrid,
    pub policy: BuilderPolicy,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepPoint {
    /// `γ` or `T`.
    pub parameter: f64,
    /// `1-γ` or `T`, the abscissa of the fit.
    pub rate_parameter: f64,
    pub x: Vec<f64>,
    pub r: f64,
    pub delta: f64,
    pub gap: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub report: RateReport,
}

/// `γ = 1 - 2^{-k}` for `k` in `ks`.
pub fn dyadic_gammas(ks: std::ops::RangeInclusive<i32>) -> Vec<f64> {
    ks.map(|k| 1.0 - f64::powi(2.0, -k)).collect()
}

/// Exact region gaps along the grid and their log-log slope.
pub fn sweep(profile: &UtilityProfile, config: &SweepConfig) -> Result<SweepResult> {
    let alpha = profile.alpha();
    let a_hat: Vec<f64> = alpha.iter().map(|a| a / norm(alpha)).collect();
    let mut points = Vec::new();
    match (&config.grid, &config.policy) {
        (SweepGrid::Gammas(gammas), BuilderPolicy::UniversalRate { constant }) => {
            for &g in gammas {
                let r = (constant * (1.0 - g) / g).sqrt();
                let x = place_ball(profile, 2.0 * r, 0.0)?;
                let gap = crate::mechanism::region_gap(profile, &x, r);
                points.push(SweepPoint { parameter: g, rate_parameter: 1.0 - g, x, r, delta: r, gap });
            }
        }
        (SweepGrid::Gammas(gammas), BuilderPolicy::SmoothBall { r, constant }) => {
            for &g in gammas {
                let delta = constant * (1.0 - g) / (g * r);
                let x = place_ball(profile, r + delta, 0.0)?;
                let gap = crate::mechanism::region_gap(profile, &x, *r);
                points.push(SweepPoint { parameter: g, rate_parameter: 1.0 - g, x, r: *r, delta, gap });
            }
        }
        (SweepGrid::Horizons(ts), BuilderPolicy::FiniteHorizon { r, config }) => {
            let base = place_ball(profile, 2.0 * r, 1e-10 * profile.vbar())?;
            let center_for = |d: f64| -> Vec<f64> { base.iter().zip(&a_hat).map(|(b, a)| b + (r - d) * a).collect() };
            for &t in ts {
                let sched = calibrate_margin(profile, &center_for, *r, t, config)?;
                let gap = sched.region_gap(profile);
                points.push(SweepPoint {
                    parameter: t as f64,
                    rate_parameter: t as f64,
                    x: sched.final_center().to_vec(),
                    r: *r,
                    delta: sched.delta,
                    gap,
                });
            }
        }
        _ => return Err(Error::InvalidInput("sweep grid does not match the builder policy".into())),
    }
    let series: Vec<(f64, f64)> = points.iter().map(|p| (p.rate_parameter, p.gap)).collect();
    let report = fit_rate(&series)?;
    Ok(SweepResult { points, report })
}

/// CSV with header `parameter,rate_parameter,r,delta,gap,x1..xn`.
pub fn sweep_csv(result: &SweepResult) -> String {
    let n = result.points.first().map(|p| p.x.len()).unwrap_or(0);
    let mut out = String::from("parameter,rate_parameter,r,delta,gap");
    for i in 0..n {
        let _ = write!(out, ",x{}", i + 1);
    }
    out.push('\n');
    for p in &result.points {
        let mut cells = vec![fmt_f64(p.parameter), fmt_f64(p.rate_parameter), fmt_f64(p.r), fmt_f64(p.delta), fmt_f64(p.gap)];
        cells.extend(p.x.iter().map(|v| fmt_f64(*v)));
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// One row of the rates table.
#[derive(Clone, Debug, Serialize)]
pub struct RateRow {
    pub gamma_or_t: f64,
    pub gap: f64,
    /// Predicted structural `η*` (NaN without a partition or for horizons).
    pub eta_star: f64,
    pub f_at_eta: f64,
    pub slope_running: f64,
}

/// Combines a sweep with the structural `η*(γ)` of a partition.
pub fn rate_rows(profile: &UtilityProfile, result: &SweepResult, partition: Option<&[Vec<usize>]>, c_eta: f64) -> Result<Vec<RateRow>> {
    let series: Vec<(f64, f64)> = result.points.iter().map(|p| (p.rate_parameter, p.gap)).collect();
    let slopes = running_slopes(&series);
    let grid = default_eta_grid();
    let table = match partition {
        Some(p) => Some(RateFunctions::evaluate(profile, p, &grid)?.partition),
        None => None,
    };
    Ok(result
        .points
        .iter()
        .zip(slopes)
        .map(|(p, slope)| {
            let discounted = p.parameter < 1.0;
            let (eta_star, f_at_eta) = match (&table, discounted) {
                (Some(f), true) => {
                    let eta = predicted_eta_from(&grid, f, p.parameter, c_eta);
                    let k = grid.iter().position(|g| *g >= eta).unwrap_or(grid.len() - 1);
                    (eta, f[k])
                }
                _ => (f64::NAN, f64::NAN),
            };
            RateRow { gamma_or_t: p.parameter, gap: p.gap, eta_star, f_at_eta, slope_running: slope }
        })
        .collect())
}

pub fn rate_rows_csv(rows: &[RateRow]) -> String {
    let mut out = String::from("gamma_or_T,gap,eta_star,f_at_eta,slope_running\n");
    for r in rows {
        let cells = [r.gamma_or_t, r.gap, r.eta_star, r.f_at_eta, r.slope_running].map(fmt_f64);
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::DiscreteDist;
    use crate::mechanism::{BuildOptions, ConstantPolicy, Stage};
    use crate::realize::{first_best_table, TieRule};

    fn e1() -> UtilityProfile {
        let d = DiscreteDist::new(vec![1.0 / 6.0, 5.0 / 6.0], vec![0.5, 0.5]).unwrap();
        UtilityProfile::new(1.0, vec![1.0, 1.0], vec![d.clone(), d]).unwrap()
    }

    #[test]
    fn one_shot_run_is_exact() {
        let p = e1();
        let support = Arc::new(JointSupport::new(&p).unwrap());
        let table = first_best_table(&support, &[1.0, 1.0], &TieRule::UniformSplit).unwrap();
        let m = OneShot { table };
        let s = run_discounted(&m, &m.state(), 50, 1, &Strategy::Truthful).unwrap();
        assert_eq!(s.rounds, 1);
        assert!(s.consistent(4.0));
    }

    #[test]
    fn identity_deviation_matches_truth() {
        let p = e1();
        let support = Arc::new(JointSupport::new(&p).unwrap());
        let opts = BuildOptions { constant: ConstantPolicy::Certified, ..Default::default() };
        let m = BallMechanism::build(support, Stage::stationary(&[0.2, 0.2], 0.05, 0.05, 0.9), &opts).unwrap();
        let st = m.alpha_best_state().unwrap();
        let a = run_discounted(&m, &st, 40, 9, &Strategy::Truthful).unwrap();
        let b = run_discounted(&m, &st, 40, 9, &Strategy::Deviator { agent: 0, map: vec![0, 1] }).unwrap();
        assert_eq!(a.mean, b.mean);
        let tr = trace_discounted(&m, &st, 9, 3, &Strategy::Truthful).unwrap();
        for (x, y) in tr.recompute().iter().zip(&tr.discounted) {
            assert!((x - y).abs() < 1e-12);
        }
        let dev = best_response_search(&m, &st, 0, &DeviationOptions::default()).unwrap();
        assert!(dev.gain <= 1e-6, "{dev:?}");
    }
}
