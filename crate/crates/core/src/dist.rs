//! Bounded discrete utility distributions, problem instances and the exact
//! joint-support enumeration every expectation in the crate is computed on.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the total mass of a distribution.
pub const PROB_TOL: f64 = 1e-12;
/// Default bound on the number of enumerated joint outcomes.
pub const DEFAULT_JOINT_CAP: usize = 1_000_000;

/// Equality of two weighted utility values, decided with a relative 1e-12 tolerance.
pub fn feq(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDist {
    atoms: Vec<f64>,
    probs: Vec<f64>,
}

impl DiscreteDist {
    pub fn new(atoms: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidDistribution("no atoms".into()));
        }
        if atoms.len() != probs.len() {
            return Err(Error::InvalidDistribution(format!(
                "{} atoms but {} probabilities",
                atoms.len(),
                probs.len()
            )));
        }
        if atoms.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::InvalidDistribution("atoms must be finite and nonnegative".into()));
        }
        if atoms.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidDistribution("atoms must be strictly increasing".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidDistribution("probabilities must be nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidDistribution(format!("probabilities sum to {total}")));
        }
        Ok(Self { atoms, probs })
    }

    pub fn point_mass(v: f64) -> Result<Self> {
        Self::new(vec![v], vec![1.0])
    }

    /// Uniform mixture over the midpoints of `k` equal subintervals of `[a, b]`.
    pub fn discretize_uniform(a: f64, b: f64, k: usize) -> Result<Self> {
        if !(0.0 <= a && a < b) || k < 2 {
            return Err(Error::InvalidDistribution(format!(
                "discretize_uniform needs 0 <= a < b and k >= 2 (got a={a}, b={b}, k={k})"
            )));
        }
        let h = (b - a) / k as f64;
        let atoms = (0..k).map(|j| a + (j as f64 + 0.5) * h).collect();
        Self::new(atoms, vec![1.0 / k as f64; k])
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().zip(&self.probs).map(|(a, p)| a * p).sum()
    }

    /// `P(u > v)`.
    pub fn survival(&self, v: f64) -> f64 {
        self.atoms
            .iter()
            .zip(&self.probs)
            .filter(|(a, _)| **a > v)
            .map(|(_, p)| p)
            .sum()
    }

    /// `P(u <= v)`.
    pub fn cdf(&self, v: f64) -> f64 {
        self.atoms
            .iter()
            .zip(&self.probs)
            .filter(|(a, _)| **a <= v)
            .map(|(_, p)| p)
            .sum()
    }

    /// `∫_0^∞ P(u > v) dv`, integrated piece by piece between atoms.
    pub fn survival_integral(&self) -> f64 {
        let mut total = 0.0;
        let mut left = 0.0;
        for &a in &self.atoms {
            total += (a - left) * self.survival(left);
            left = a;
        }
        total
    }

    pub fn prob_zero(&self) -> f64 {
        self.atoms
            .iter()
            .zip(&self.probs)
            .filter(|(a, _)| **a == 0.0)
            .map(|(_, p)| p)
            .sum()
    }

    /// Indices of atoms carrying positive probability.
    pub fn support(&self) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.probs[k] > 0.0).collect()
    }

    pub fn max_atom(&self) -> f64 {
        self.support().last().map(|&k| self.atoms[k]).unwrap_or(0.0)
    }

    pub fn min_atom(&self) -> f64 {
        self.support().first().map(|&k| self.atoms[k]).unwrap_or(0.0)
    }

    /// Inverse-CDF draw from a uniform variate in `[0, 1)`.
    pub fn quantile_index(&self, w: f64) -> usize {
        let mut acc = 0.0;
        let mut last = 0;
        for (k, p) in self.probs.iter().enumerate() {
            if *p <= 0.0 {
                continue;
            }
            acc += p;
            last = k;
            if w < acc {
                return k;
            }
        }
        last
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.atoms[self.quantile_index(rng.gen::<f64>())]
    }
}

/// A problem instance: one distribution per agent, the common bound and the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct UtilityProfile {
    vbar: f64,
    alpha: Vec<f64>,
    dists: Vec<DiscreteDist>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AgentSpec {
    pub atoms: Vec<f64>,
    pub probs: Vec<f64>,
}

/// On-disk instance format.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstanceFile {
    pub vbar: f64,
    pub alpha: Vec<f64>,
    pub agents: Vec<AgentSpec>,
}

impl UtilityProfile {
    pub fn new(vbar: f64, alpha: Vec<f64>, dists: Vec<DiscreteDist>) -> Result<Self> {
        if dists.is_empty() {
            return Err(Error::InvalidProfile("no agents".into()));
        }
        if alpha.len() != dists.len() {
            return Err(Error::InvalidProfile(format!(
                "{} weights for {} agents",
                alpha.len(),
                dists.len()
            )));
        }
        if !(vbar.is_finite() && vbar > 0.0) {
            return Err(Error::InvalidProfile(format!("vbar must be positive, got {vbar}")));
        }
        if alpha.iter().any(|a| !a.is_finite() || *a < 0.0) || alpha.iter().all(|a| *a == 0.0) {
            return Err(Error::InvalidProfile(
                "alpha must be nonnegative with a positive entry".into(),
            ));
        }
        for (i, d) in dists.iter().enumerate() {
            if d.atoms().last().copied().unwrap_or(0.0) > vbar {
                return Err(Error::InvalidProfile(format!("agent {i} has an atom above vbar")));
            }
        }
        Ok(Self { vbar, alpha, dists })
    }

    /// Same distributions under a different weight vector.
    pub fn with_alpha(&self, alpha: Vec<f64>) -> Result<Self> {
        Self::new(self.vbar, alpha, self.dists.clone())
    }

    pub fn from_instance(file: InstanceFile) -> Result<Self> {
        let dists = file
            .agents
            .into_iter()
            .map(|a| DiscreteDist::new(a.atoms, a.probs))
            .collect::<Result<Vec<_>>>()?;
        Self::new(file.vbar, file.alpha, dists)
    }

    pub fn to_instance(&self) -> InstanceFile {
        InstanceFile {
            vbar: self.vbar,
            alpha: self.alpha.clone(),
            agents: self
                .dists
                .iter()
                .map(|d| AgentSpec { atoms: d.atoms.clone(), probs: d.probs.clone() })
                .collect(),
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Self::from_instance(serde_json::from_str(s)?)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn n(&self) -> usize {
        self.dists.len()
    }

    pub fn vbar(&self) -> f64 {
        self.vbar
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn dist(&self, i: usize) -> &DiscreteDist {
        &self.dists[i]
    }

    pub fn dists(&self) -> &[DiscreteDist] {
        &self.dists
    }

    pub fn means(&self) -> Vec<f64> {
        self.dists.iter().map(DiscreteDist::mean).collect()
    }

    /// Positive-probability atoms of agent `i` scaled by `alpha_i`, with their masses.
    pub fn weighted_support(&self, i: usize) -> Vec<(f64, f64)> {
        let d = &self.dists[i];
        d.support()
            .into_iter()
            .map(|k| (self.alpha[i] * d.atoms[k], d.probs[k]))
            .collect()
    }
}

/// One cell of the joint support.
#[derive(Clone, Copy, Debug)]
pub struct JointOutcome<'a> {
    pub values: &'a [f64],
    /// Index into each agent's atom list.
    pub atoms: &'a [usize],
    pub prob: f64,
}

/// Full cartesian enumeration of the positive-probability atoms, stored flat.
#[derive(Clone, Debug)]
pub struct JointSupport {
    profile: UtilityProfile,
    n: usize,
    len: usize,
    values: Vec<f64>,
    atoms: Vec<usize>,
    probs: Vec<f64>,
    /// Positive-probability atom indices per agent.
    supports: Vec<Vec<usize>>,
    strides: Vec<usize>,
}

impl JointSupport {
    pub fn new(profile: &UtilityProfile) -> Result<Self> {
        Self::with_cap(profile, DEFAULT_JOINT_CAP)
    }

    pub fn with_cap(profile: &UtilityProfile, cap: usize) -> Result<Self> {
        let n = profile.n();
        let supports: Vec<Vec<usize>> = profile.dists.iter().map(DiscreteDist::support).collect();
        let size: u128 = supports.iter().map(|s| s.len() as u128).product();
        if size > cap as u128 {
            return Err(Error::CapExceeded { size, cap });
        }
        let len = size as usize;
        // Last agent varies fastest.
        let mut strides = vec![1usize; n];
        for i in (0..n.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * supports[i + 1].len();
        }
        let mut values = Vec::with_capacity(len * n);
        let mut atoms = Vec::with_capacity(len * n);
        let mut probs = Vec::with_capacity(len);
        for k in 0..len {
            let mut p = 1.0;
            for i in 0..n {
                let local = (k / strides[i]) % supports[i].len();
                let a = supports[i][local];
                let d = &profile.dists[i];
                values.push(d.atoms[a]);
                atoms.push(a);
                p *= d.probs[a];
            }
            probs.push(p);
        }
        Ok(Self { profile: profile.clone(), n, len, values, atoms, probs, supports, strides })
    }

    pub fn profile(&self) -> &UtilityProfile {
        &self.profile
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn values(&self, k: usize) -> &[f64] {
        &self.values[k * self.n..(k + 1) * self.n]
    }

    pub fn atom_indices(&self, k: usize) -> &[usize] {
        &self.atoms[k * self.n..(k + 1) * self.n]
    }

    pub fn prob(&self, k: usize) -> f64 {
        self.probs[k]
    }

    pub fn outcome(&self, k: usize) -> JointOutcome<'_> {
        JointOutcome { values: self.values(k), atoms: self.atom_indices(k), prob: self.probs[k] }
    }

    pub fn iter(&self) -> impl Iterator<Item = JointOutcome<'_>> + '_ {
        (0..self.len).map(move |k| self.outcome(k))
    }

    /// Positive-probability atom indices of agent `i`, increasing.
    pub fn agent_support(&self, i: usize) -> &[usize] {
        &self.supports[i]
    }

    /// Position of a report within agent `i`'s support: the largest support atom
    /// at or below `v`, or the smallest one when `v` is below all of them.
    pub fn snap(&self, i: usize, v: f64) -> usize {
        let atoms = self.profile.dists[i].atoms();
        let supp = &self.supports[i];
        let mut best = 0;
        for (local, &a) in supp.iter().enumerate() {
            if atoms[a] <= v + 1e-12 {
                best = local;
            }
        }
        best
    }

    /// Outcome index from per-agent positions within the supports.
    pub fn locate(&self, local: &[usize]) -> usize {
        local.iter().zip(&self.strides).map(|(l, s)| l * s).sum()
    }

    /// Outcome index for a report vector, snapping each coordinate.
    pub fn locate_reports(&self, reports: &[f64]) -> usize {
        let local: Vec<usize> = (0..self.n).map(|i| self.snap(i, reports[i])).collect();
        self.locate(&local)
    }

    /// Position of agent `i` within its support at outcome `k`.
    pub fn local_index(&self, k: usize, i: usize) -> usize {
        (k / self.strides[i]) % self.supports[i].len()
    }
}

/// Exact enumeration as an owned list.
pub fn joint_support(profile: &UtilityProfile) -> Result<Vec<(Vec<f64>, f64)>> {
    let js = JointSupport::new(profile)?;
    Ok(js.iter().map(|o| (o.values.to_vec(), o.prob)).collect())
}

/// Counter-based generator: the variate used for `(round, agent)` within an
/// episode does not depend on how many draws were made before it, so serial
/// and parallel runs consume identical numbers.
#[derive(Clone, Debug)]
pub struct CounterRng {
    rng: ChaCha8Rng,
    n: u64,
}

impl CounterRng {
    pub fn new(seed: u64, episode: u64, n_agents: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(episode);
        Self { rng, n: n_agents as u64 }
    }

    pub fn uniform(&mut self, round: u64, agent: usize) -> f64 {
        // Each f64 consumes one 64-bit word, i.e. two 32-bit positions.
        self.rng.set_word_pos(((round * self.n + agent as u64) as u128) * 2);
        self.rng.gen::<f64>()
    }

    /// Draws every agent's utility for one round; returns support positions.
    pub fn draw_round(&mut self, support: &JointSupport, round: u64) -> Vec<usize> {
        let profile = support.profile();
        (0..support.n())
            .map(|i| {
                let a = profile.dist(i).quantile_index(self.uniform(round, i));
                support.agent_support(i).iter().position(|&s| s == a).unwrap_or(0)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point() -> DiscreteDist {
        DiscreteDist::new(vec![1.0 / 6.0, 5.0 / 6.0], vec![0.5, 0.5]).unwrap()
    }

    #[test]
    fn means() {
        assert!((two_point().mean() - 0.5).abs() < 1e-15);
        assert_eq!(DiscreteDist::point_mass(0.7).unwrap().mean(), 0.7);
        let d = DiscreteDist::new(vec![0.0, 0.5], vec![0.5, 0.5]).unwrap();
        assert!((d.mean() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn survival_steps() {
        let d = two_point();
        assert_eq!(d.survival(0.0), 1.0);
        assert_eq!(d.survival(1.0 / 6.0), 0.5);
        assert_eq!(d.survival(5.0 / 6.0), 0.0);
        assert!((d.survival_integral() - d.mean()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(DiscreteDist::new(vec![], vec![]).is_err());
        assert!(DiscreteDist::new(vec![0.5, 0.2], vec![0.5, 0.5]).is_err());
        assert!(DiscreteDist::new(vec![0.2, 0.5], vec![0.5, 0.6]).is_err());
        assert!(DiscreteDist::new(vec![0.2], vec![-1.0]).is_err());
        let d = two_point();
        assert!(UtilityProfile::new(0.5, vec![1.0], vec![d.clone()]).is_err());
        assert!(UtilityProfile::new(1.0, vec![0.0], vec![d]).is_err());
    }

    #[test]
    fn discretized_uniform() {
        let d = DiscreteDist::discretize_uniform(0.0, 1.0, 2).unwrap();
        assert_eq!(d.atoms(), &[0.25, 0.75]);
        let d = DiscreteDist::discretize_uniform(0.0, 1.0, 100).unwrap();
        assert!((d.mean() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn enumeration_counts() {
        let d2 = two_point();
        let d3 = DiscreteDist::new(vec![0.1, 0.2, 0.3], vec![0.2, 0.3, 0.5]).unwrap();
        let p = UtilityProfile::new(1.0, vec![1.0; 3], vec![d2.clone(), d3, d2]).unwrap();
        let js = JointSupport::new(&p).unwrap();
        assert_eq!(js.len(), 12);
        let total: f64 = js.iter().map(|o| o.prob).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for k in 0..js.len() {
            let local: Vec<usize> = (0..3).map(|i| js.local_index(k, i)).collect();
            assert_eq!(js.locate(&local), k);
        }
        assert!(matches!(
            JointSupport::with_cap(&p, 11),
            Err(Error::CapExceeded { size: 12, cap: 11 })
        ));
    }

    #[test]
    fn snapping_goes_down() {
        let p = UtilityProfile::new(1.0, vec![1.0], vec![two_point()]).unwrap();
        let js = JointSupport::new(&p).unwrap();
        assert_eq!(js.snap(0, 0.5), 0);
        assert_eq!(js.snap(0, 0.0), 0);
        assert_eq!(js.snap(0, 0.9), 1);
    }

    #[test]
    fn counter_rng_is_positional() {
        let mut a = CounterRng::new(7, 3, 2);
        let mut b = CounterRng::new(7, 3, 2);
        let x = a.uniform(5, 1);
        let _ = b.uniform(0, 0);
        assert_eq!(b.uniform(5, 1), x);
        let mut c = CounterRng::new(7, 4, 2);
        assert_ne!(c.uniform(5, 1), x);
    }
}
