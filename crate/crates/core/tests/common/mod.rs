#![allow(dead_code)]

use std::sync::Arc;

use promise_ledger::geometry::{ball_in_ustar, BallQuery};
use promise_ledger::mechanism::{BallMechanism, BuildOptions, ConstantPolicy, Stage};
use promise_ledger::{norm, DiscreteDist, JointSupport, UtilityProfile};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn symmetric(atoms: [f64; 2]) -> UtilityProfile {
    let d = DiscreteDist::new(atoms.to_vec(), vec![0.5, 0.5]).unwrap();
    UtilityProfile::new(1.0, vec![1.0, 1.0], vec![d.clone(), d]).unwrap()
}

/// Both agents on `{1/6, 5/6}`: ties happen with positive probability.
pub fn tie() -> UtilityProfile {
    symmetric([1.0 / 6.0, 5.0 / 6.0])
}

pub fn tie_free() -> UtilityProfile {
    UtilityProfile::new(
        1.0,
        vec![1.0, 1.0],
        vec![
            DiscreteDist::new(vec![0.2, 0.8], vec![0.5, 0.5]).unwrap(),
            DiscreteDist::new(vec![0.3, 0.7], vec![0.5, 0.5]).unwrap(),
        ],
    )
    .unwrap()
}

/// Two or three agents with two to four atoms on a 1/20 grid.
pub fn random_profile(seed: u64) -> UtilityProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=3);
    let dists = (0..n)
        .map(|_| {
            let m = rng.gen_range(2..=4);
            let mut atoms: Vec<f64> = (0..m).map(|_| rng.gen_range(0..=20) as f64 / 20.0).collect();
            atoms.sort_by(f64::total_cmp);
            atoms.dedup();
            if atoms.len() < 2 {
                atoms = vec![0.25, 0.75];
            }
            let w: Vec<f64> = atoms.iter().map(|_| rng.gen_range(0.2..1.0)).collect();
            let s: f64 = w.iter().sum();
            DiscreteDist::new(atoms, w.iter().map(|x| x / s).collect()).unwrap()
        })
        .collect();
    let alpha = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    UtilityProfile::new(1.0, alpha, dists).unwrap()
}

/// Largest radius of a ball around `x` that stays in the region.
pub fn max_radius(profile: &UtilityProfile, x: &[f64]) -> f64 {
    let (mut lo, mut hi) = (0.0, profile.vbar());
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if ball_in_ustar(profile, &BallQuery::new(x.to_vec(), mid)).unwrap().is_inside() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

pub struct Interior {
    pub x: Vec<f64>,
    pub r: f64,
    pub delta: f64,
    /// Unit normal of the no-information facet the ball pokes through.
    pub normal: Vec<f64>,
}

impl Interior {
    pub fn boundary_point(&self) -> Vec<f64> {
        self.x.iter().zip(&self.normal).map(|(a, v)| a + self.r * v).collect()
    }
}

/// A ball centered at `E/(n+1)` that overhangs the no-information facet by a
/// small fraction of its distance `d` to it. The boundary spread grows with the
/// overhang while the margin chain needs `δ r ≥ κ C`, so the overhang is cut
/// until the certified constant clears the chain with room to spare.
pub fn interior_ball(profile: &UtilityProfile, support: &Arc<JointSupport>, gamma: f64) -> Option<Interior> {
    let e = profile.means();
    if e.iter().any(|m| *m <= 0.0) {
        return None;
    }
    let n = profile.n() as f64;
    let x: Vec<f64> = e.iter().map(|m| m / (n + 1.0)).collect();
    let inv: Vec<f64> = e.iter().map(|m| 1.0 / m).collect();
    let normal: Vec<f64> = inv.iter().map(|v| v / norm(&inv)).collect();
    let d = 1.0 / ((n + 1.0) * norm(&inv));
    let cap = 0.97 * max_radius(profile, &x);
    let kappa = (1.0 - gamma) / gamma;
    for f in [1.03, 1.01, 1.003, 1.001] {
        let rho = (f * d).min(cap);
        if rho <= d {
            return None;
        }
        let r = 0.5 * (d + rho);
        let delta = rho - r;
        let opts = BuildOptions { constant: ConstantPolicy::Certified, unchecked: true, ..Default::default() };
        let m = BallMechanism::build(support.clone(), Stage::stationary(&x, r, delta, gamma), &opts).ok()?;
        if m.plans().len() >= 3 && delta * r >= 4.0 * kappa * m.certified_constant() {
            return Some(Interior { x, r, delta, normal });
        }
    }
    None
}

/// Checked build of [`interior_ball`].
pub fn interior_mechanism(profile: &UtilityProfile, gamma: f64) -> Option<(BallMechanism, Interior)> {
    let support = Arc::new(JointSupport::new(profile).ok()?);
    let ball = interior_ball(profile, &support, gamma)?;
    let opts = BuildOptions { constant: ConstantPolicy::Certified, ..Default::default() };
    let mech = BallMechanism::build(support, Stage::stationary(&ball.x, ball.r, ball.delta, gamma), &opts).ok()?;
    Some((mech, ball))
}

/// Joint outcome drawn from the support.
pub fn draw(support: &JointSupport, rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for k in 0..support.len() {
        acc += support.prob(k);
        if u < acc {
            return k;
        }
    }
    support.len() - 1
}

/// Status line that bypasses the test harness's output capture.
pub fn report(id: usize, passed: bool, detail: &str) {
    use std::io::Write;
    let status = if passed { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "acceptance {id:>2}: {status} {detail}");
}
