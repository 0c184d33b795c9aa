//! Rate-characterizing functions of an instance, max flow, and slope fits.
//!
//! All expectations are exact sums over the joint support. Absolute constants
//! that only exist in the asymptotic statements are plain parameters; every
//! output here is structural up to those constants.

use std::collections::VecDeque;

use serde::Serialize;

use crate::dist::{feq, JointSupport, UtilityProfile};
use crate::error::{Error, Result};
use crate::geometry::agent_sets;

/// Largest total agent count accepted by the subset enumerations.
pub const MAX_PARTITION_AGENTS: usize = 16;
/// Absolute tolerance of the augmenting-path search.
pub const FLOW_TOL: f64 = 1e-12;

fn le(a: f64, b: f64) -> bool {
    a <= b || feq(a, b)
}

/// Geometric grid of `points` values from `lo` to `hi`.
pub fn eta_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points < 2 {
        return vec![hi];
    }
    let step = (hi / lo).ln() / (points - 1) as f64;
    (0..points).map(|k| if k + 1 == points { hi } else { lo * (step * k as f64).exp() }).collect()
}

/// The default 256-point grid on `[1e-4, 1]`.
pub fn default_eta_grid() -> Vec<f64> {
    eta_grid(1e-4, 1.0, 256)
}

/// `E[u_i 1{α_j u_j = Z} 1{α_j u_j ∈ [α_i u_i, (1+η) α_i u_i]}]` with `Z = max_k α_k u_k`.
pub fn f_pair(profile: &UtilityProfile, i: usize, j: usize, eta: f64) -> Result<f64> {
    let support = JointSupport::new(profile)?;
    Ok(f_pair_on(&support, i, j, eta))
}

fn weighted_max(alpha: &[f64], values: &[f64], mut keep: impl FnMut(usize) -> bool) -> f64 {
    values.iter().zip(alpha).enumerate().filter(|(k, _)| keep(*k)).map(|(_, (u, a))| a * u).fold(f64::NEG_INFINITY, f64::max)
}

pub(crate) fn f_pair_on(support: &JointSupport, i: usize, j: usize, eta: f64) -> f64 {
    let alpha = support.profile().alpha();
    support
        .iter()
        .filter(|o| {
            let z = weighted_max(alpha, o.values, |_| true);
            let wj = alpha[j] * o.values[j];
            let wi = alpha[i] * o.values[i];
            feq(wj, z) && le(wi, wj) && le(wj, (1.0 + eta) * wi)
        })
        .map(|o| o.prob * o.values[i])
        .sum()
}

/// `E[u_i 1{α_i u_i/(1+η) ≤ Z_i ≤ (1+η) α_i u_i}]` with `Z_i = max_{j≠i} α_j u_j`.
pub fn g_i(profile: &UtilityProfile, i: usize, eta: f64) -> Result<f64> {
    let support = JointSupport::new(profile)?;
    let alpha = profile.alpha();
    Ok(support
        .iter()
        .filter(|o| {
            let zi = weighted_max(alpha, o.values, |k| k != i);
            let wi = alpha[i] * o.values[i];
            le(wi / (1.0 + eta), zi) && le(zi, (1.0 + eta) * wi)
        })
        .map(|o| o.prob * o.values[i])
        .sum())
}

/// Largest `η₁` such that `g_i(η) = 0` for every `η < η₁` (infinite when
/// `g_i` vanishes identically). Zero means ties occur with positive probability.
pub fn g_zero_threshold(profile: &UtilityProfile, i: usize) -> Result<f64> {
    let support = JointSupport::new(profile)?;
    let alpha = profile.alpha();
    let mut best = f64::INFINITY;
    for o in support.iter() {
        let wi = alpha[i] * o.values[i];
        let zi = weighted_max(alpha, o.values, |k| k != i);
        if o.values[i] <= 0.0 || o.prob <= 0.0 {
            continue;
        }
        if zi <= 0.0 {
            continue;
        }
        let ratio = if zi > wi { zi / wi } else { wi / zi };
        best = best.min(ratio - 1.0);
    }
    Ok(best.max(0.0))
}

fn check_partition(profile: &UtilityProfile, partition: &[Vec<usize>]) -> Result<()> {
    let size: usize = partition.iter().map(|p| p.len()).sum();
    if size > MAX_PARTITION_AGENTS {
        return Err(Error::PartitionTooLarge { size });
    }
    let mut seen = vec![false; profile.n()];
    for part in partition {
        if part.len() < 2 {
            return Err(Error::InvalidInput("every part needs at least two agents".into()));
        }
        for &i in part {
            if i >= profile.n() || seen[i] {
                return Err(Error::InvalidInput(format!("agent {i} is out of range or repeated")));
            }
            seen[i] = true;
        }
    }
    Ok(())
}

/// `min_s min_{∅⊊B⊊I_s} E[Z_B 1{Z_B ≤ Z_{I_s∖B} = Z ≤ (1+η) Z_B}]`.
pub fn f_partition(profile: &UtilityProfile, partition: &[Vec<usize>], eta: f64) -> Result<f64> {
    check_partition(profile, partition)?;
    let support = JointSupport::new(profile)?;
    let alpha = profile.alpha();
    let mut best = f64::INFINITY;
    for part in partition {
        let m = part.len();
        for mask in 1..(1u32 << m) - 1 {
            let in_b = |k: usize| part.iter().position(|&a| a == k).is_some_and(|p| mask & (1 << p) != 0);
            let in_rest = |k: usize| part.iter().position(|&a| a == k).is_some_and(|p| mask & (1 << p) == 0);
            let value: f64 = support
                .iter()
                .filter_map(|o| {
                    let z = weighted_max(alpha, o.values, |_| true);
                    let zb = weighted_max(alpha, o.values, in_b);
                    let zr = weighted_max(alpha, o.values, in_rest);
                    (le(zb, zr) && feq(zr, z) && le(z, (1.0 + eta) * zb)).then_some(o.prob * zb)
                })
                .sum();
            best = best.min(value);
        }
    }
    Ok(if best.is_finite() { best } else { 0.0 })
}

/// Maximum flow from `source` to `sink` by breadth-first augmenting paths.
pub fn max_flow(nodes: usize, edges: &[(usize, usize, f64)], source: usize, sink: usize) -> f64 {
    if source == sink || source >= nodes || sink >= nodes {
        return 0.0;
    }
    let mut cap = vec![vec![0.0f64; nodes]; nodes];
    for &(a, b, c) in edges {
        if a < nodes && b < nodes && a != b {
            cap[a][b] += c.max(0.0);
        }
    }
    let mut total = 0.0;
    loop {
        let mut parent = vec![usize::MAX; nodes];
        parent[source] = source;
        let mut queue = VecDeque::from([source]);
        while let Some(v) = queue.pop_front() {
            for w in 0..nodes {
                if parent[w] == usize::MAX && cap[v][w] > FLOW_TOL {
                    parent[w] = v;
                    queue.push_back(w);
                }
            }
        }
        if parent[sink] == usize::MAX {
            return total;
        }
        let mut push = f64::INFINITY;
        let mut v = sink;
        while v != source {
            push = push.min(cap[parent[v]][v]);
            v = parent[v];
        }
        let mut v = sink;
        while v != source {
            let u = parent[v];
            cap[u][v] -= push;
            cap[v][u] += push;
            v = u;
        }
        total += push;
    }
}

/// Minimum over parts and ordered pairs of the max flow on the graph with edge
/// weights `f_pair(η; k, l)`.
pub fn f_tilde(profile: &UtilityProfile, partition: &[Vec<usize>], eta: f64) -> Result<f64> {
    check_partition(profile, partition)?;
    let support = JointSupport::new(profile)?;
    let mut best = f64::INFINITY;
    for part in partition {
        let m = part.len();
        let mut edges = Vec::with_capacity(m * (m - 1));
        for (a, &k) in part.iter().enumerate() {
            for (b, &l) in part.iter().enumerate() {
                if a != b {
                    edges.push((a, b, f_pair_on(&support, k, l, eta)));
                }
            }
        }
        for s in 0..m {
            for t in 0..m {
                if s != t {
                    best = best.min(max_flow(m, &edges, s, t));
                }
            }
        }
    }
    Ok(if best.is_finite() { best } else { 0.0 })
}

/// Strongly connected components of a directed graph, each sorted, ordered by
/// smallest member.
pub fn scc_partition(nodes: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut reach = vec![vec![false; nodes]; nodes];
    for v in 0..nodes {
        reach[v][v] = true;
    }
    for &(a, b) in edges {
        if a < nodes && b < nodes {
            reach[a][b] = true;
        }
    }
    for k in 0..nodes {
        for a in 0..nodes {
            if reach[a][k] {
                for b in 0..nodes {
                    if reach[k][b] {
                        reach[a][b] = true;
                    }
                }
            }
        }
    }
    let mut assigned = vec![false; nodes];
    let mut parts = Vec::new();
    for v in 0..nodes {
        if assigned[v] {
            continue;
        }
        let comp: Vec<usize> = (0..nodes).filter(|&w| reach[v][w] && reach[w][v]).collect();
        for &w in &comp {
            assigned[w] = true;
        }
        parts.push(comp);
    }
    parts
}

/// Partition of `Ĩ` into strongly connected components of the linear-growth
/// graph (edge `i → j` when `f_pair(η; i, j) ≥ slope·η` on a small grid below
/// `eta_probe`), if every component has at least two agents.
pub fn sc3_partition(profile: &UtilityProfile, eta_probe: f64, slope: f64) -> Result<Option<Vec<Vec<usize>>>> {
    let tilde = agent_sets(profile).i_tilde;
    if tilde.len() < 2 {
        return Ok(None);
    }
    let support = JointSupport::new(profile)?;
    let probes: Vec<f64> = (0..5).map(|k| eta_probe / f64::powi(2.0, k)).collect();
    let mut edges = Vec::new();
    for (a, &i) in tilde.iter().enumerate() {
        for (b, &j) in tilde.iter().enumerate() {
            if a != b && probes.iter().all(|&e| f_pair_on(&support, i, j, e) >= slope * e) {
                edges.push((a, b));
            }
        }
    }
    let parts = scc_partition(tilde.len(), &edges);
    if parts.iter().any(|p| p.len() < 2) {
        return Ok(None);
    }
    Ok(Some(parts.into_iter().map(|p| p.into_iter().map(|k| tilde[k]).collect()).collect()))
}

/// `inf {1} ∪ {η : f(η') ≥ C_η √(1-γ) η'/η for all grid η' ≥ η}` on `grid`
/// (increasing), given `f` evaluated on the same grid.
pub fn predicted_eta_from(grid: &[f64], f: &[f64], gamma: f64, c_eta: f64) -> f64 {
    let scale = c_eta * (1.0 - gamma).sqrt();
    let mut best = 1.0f64;
    for (k, &eta) in grid.iter().enumerate() {
        if (k..grid.len()).all(|m| f[m] >= scale * grid[m] / eta) {
            best = best.min(eta);
            break;
        }
    }
    best
}

/// [`predicted_eta_from`] for the partition rate function on the default grid.
pub fn predicted_eta(profile: &UtilityProfile, partition: &[Vec<usize>], gamma: f64, c_eta: f64) -> Result<f64> {
    let grid = default_eta_grid();
    let f = RateFunctions::evaluate(profile, partition, &grid)?.partition;
    Ok(predicted_eta_from(&grid, &f, gamma, c_eta))
}

/// `sup {η ∈ grid : g_i(η) ≤ c_η √(1-γ)}`, zero when no grid point qualifies.
pub fn lower_eta(profile: &UtilityProfile, i: usize, gamma: f64, c_eta: f64) -> Result<f64> {
    let scale = c_eta * (1.0 - gamma).sqrt();
    let mut best = 0.0;
    for eta in default_eta_grid() {
        if g_i(profile, i, eta)? <= scale {
            best = eta;
        }
    }
    Ok(best)
}

/// `δ cosh(c_f r/√(1-γ)) / cosh(c_f r₀/√(1-γ))`, evaluated without overflow.
pub fn gluing_profile(r: f64, delta: f64, c_f: f64, r0: f64, gamma: f64) -> f64 {
    let s = (1.0 - gamma).sqrt();
    let a = c_f * r / s;
    let b = c_f * r0 / s;
    delta * (a - b).exp() * (1.0 + (-2.0 * a).exp()) / (1.0 + (-2.0 * b).exp())
}

/// Rate functions tabulated on an η grid.
#[derive(Clone, Debug, Serialize)]
pub struct RateFunctions {
    pub grid: Vec<f64>,
    /// The agents of `Ĩ`.
    pub agents: Vec<usize>,
    /// `pair[a][b][k] = f_pair(grid[k]; Ĩ[a], Ĩ[b])`.
    pub pair: Vec<Vec<Vec<f64>>>,
    /// `g[a][k] = g_{Ĩ[a]}(grid[k])`.
    pub g: Vec<Vec<f64>>,
    pub partition: Vec<f64>,
    pub tilde: Vec<f64>,
}

impl RateFunctions {
    pub fn evaluate(profile: &UtilityProfile, partition: &[Vec<usize>], grid: &[f64]) -> Result<Self> {
        check_partition(profile, partition)?;
        let support = JointSupport::new(profile)?;
        let agents = agent_sets(profile).i_tilde;
        let pair = agents
            .iter()
            .map(|&i| agents.iter().map(|&j| grid.iter().map(|&e| if i == j { 0.0 } else { f_pair_on(&support, i, j, e) }).collect()).collect())
            .collect();
        let g = agents.iter().map(|&i| grid.iter().map(|&e| g_i(profile, i, e)).collect::<Result<Vec<_>>>()).collect::<Result<Vec<_>>>()?;
        let partition_vals = grid.iter().map(|&e| f_partition(profile, partition, e)).collect::<Result<Vec<_>>>()?;
        let tilde = grid.iter().map(|&e| f_tilde(profile, partition, e)).collect::<Result<Vec<_>>>()?;
        Ok(Self { grid: grid.to_vec(), agents, pair, g, partition: partition_vals, tilde })
    }
}

/// Least-squares fit of `log gap` against `log parameter`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateReport {
    pub points: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the log fit.
    pub residual: f64,
}

pub fn fit_rate(series: &[(f64, f64)]) -> Result<RateReport> {
    if series.len() < 5 {
        return Err(Error::DegenerateSeries(format!("{} points, need at least 5", series.len())));
    }
    if let Some(p) = series.iter().find(|(x, y)| !(*x > 0.0 && *y > 0.0)) {
        return Err(Error::DegenerateSeries(format!("non-positive entry {p:?}")));
    }
    let xs: Vec<f64> = series.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = series.iter().map(|p| p.1.ln()).collect();
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::DegenerateSeries("all parameters coincide".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum::<f64>() / m).sqrt();
    Ok(RateReport { points: series.to_vec(), slope, intercept, residual })
}

/// Running slopes: entry `k` fits the first `k + 1` points (NaN below five).
pub fn running_slopes(series: &[(f64, f64)]) -> Vec<f64> {
    (0..series.len()).map(|k| fit_rate(&series[..=k]).map(|r| r.slope).unwrap_or(f64::NAN)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::DiscreteDist;

    fn tie() -> UtilityProfile {
        let d = DiscreteDist::new(vec![1.0 / 6.0, 5.0 / 6.0], vec![0.5, 0.5]).unwrap();
        UtilityProfile::new(1.0, vec![1.0, 1.0], vec![d.clone(), d]).unwrap()
    }

    fn tie_free() -> UtilityProfile {
        let a = DiscreteDist::new(vec![0.2, 0.8], vec![0.5, 0.5]).unwrap();
        let b = DiscreteDist::new(vec![0.3, 0.7], vec![0.5, 0.5]).unwrap();
        UtilityProfile::new(1.0, vec![1.0, 1.0], vec![a, b]).unwrap()
    }

    #[test]
    fn pair_and_g_values() {
        assert!((f_pair(&tie(), 0, 1, 0.0).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(f_pair(&tie_free(), 0, 1, 0.0).unwrap(), 0.0);
        assert!((f_pair(&tie_free(), 0, 1, 0.5).unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(g_i(&tie_free(), 0, 0.14).unwrap(), 0.0);
        assert!((g_i(&tie_free(), 0, 1.0 / 7.0).unwrap() - 0.2).abs() < 1e-15);
        assert!((g_i(&tie_free(), 0, 10.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((g_zero_threshold(&tie_free(), 0).unwrap() - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(g_zero_threshold(&tie(), 0).unwrap(), 0.0);
    }

    #[test]
    fn partition_values() {
        let p = tie();
        assert!((f_partition(&p, &[vec![0, 1]], 0.0).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(f_partition(&tie_free(), &[vec![0, 1]], 0.0).unwrap(), 0.0);
        let f = f_tilde(&p, &[vec![0, 1]], 0.3).unwrap();
        let want = f_pair(&p, 0, 1, 0.3).unwrap().min(f_pair(&p, 1, 0, 0.3).unwrap());
        assert!((f - want).abs() < 1e-15);
    }

    #[test]
    fn flows() {
        assert_eq!(max_flow(2, &[(0, 1, 0.7)], 0, 1), 0.7);
        assert_eq!(max_flow(3, &[(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)], 0, 2), 2.0);
        assert_eq!(max_flow(3, &[(0, 1, 1.0)], 0, 2), 0.0);
    }

    #[test]
    fn sc3() {
        assert_eq!(sc3_partition(&tie(), 1e-3, 1.0).unwrap(), Some(vec![vec![0, 1]]));
        assert_eq!(sc3_partition(&tie_free(), 1e-3, 1.0).unwrap(), None);
        let parts = scc_partition(4, &[(0, 1), (1, 0), (2, 3), (3, 2), (1, 2)]);
        assert_eq!(parts, vec![vec![0, 1], vec![2, 3]]);
    }

    #[test]
    fn gluing_and_fit() {
        assert_eq!(gluing_profile(0.3, 0.01, 1.0, 0.3, 0.99), 0.01);
        let g = gluing_profile(0.0, 1.0, 1.0, 1.0, 0.99);
        assert!((g - 1.0 / 10f64.cosh()).abs() < 1e-18);
        let series: Vec<(f64, f64)> = (4..=10).map(|k| {
            let x = f64::powi(2.0, -k);
            (x, 3.0 * x)
        }).collect();
        let r = fit_rate(&series).unwrap();
        assert!((r.slope - 1.0).abs() < 1e-12 && (r.intercept - 3f64.ln()).abs() < 1e-12);
        assert!(matches!(fit_rate(&series[..4]), Err(Error::DegenerateSeries(_))));
    }

    #[test]
    fn predicted_eta_linear() {
        let grid = default_eta_grid();
        let f: Vec<f64> = grid.iter().map(|e| 2.0 * e).collect();
        // f(η') ≥ c√(1-γ)η'/η ⇔ η ≥ c√(1-γ)/2.
        let eta = predicted_eta_from(&grid, &f, 0.96, 1.0);
        assert!(eta >= 0.1 && eta < 0.1 * 1.04);
    }
}
