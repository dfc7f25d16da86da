//! Randomized invariant checks of the geometry and loss code, runnable from the binary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::dataset::{build_digit_neighbor_graph, SemanticNeighborGraph};
use crate::geometry::{angular_distance, normalize_to_sphere, slerp, subtended_angle, UnitVector};
use crate::losses::{
    atnl, kl_standard_normal, kl_standard_normal_with_grad, mine_triplets, mine_triplets_with,
    reconstruction_l1_with_grad, triplet_hinge_with_grad, GaussianPosterior, Metric, MiningStrategy, Triplet,
    TripletSet,
};

const CASES: usize = 200;

/// Outcome of one invariant over `cases` random instances.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfCheck {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    /// Largest observed violation (error or residual), for the record.
    pub worst: f64,
}

impl SelfCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

fn check(name: &'static str, cases: usize, mut f: impl FnMut(usize) -> (bool, f64)) -> SelfCheck {
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for i in 0..cases {
        let (ok, err) = f(i);
        if !ok {
            failures += 1;
        }
        worst = worst.max(err);
    }
    SelfCheck { name, cases, failures, worst }
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> UnitVector {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(u) = normalize_to_sphere(&v) {
            return u;
        }
    }
}

/// A pair at angle at most 3 rad, clear of the antipodal guard.
fn pair(rng: &mut ChaCha8Rng, d: usize) -> (UnitVector, UnitVector) {
    loop {
        let (a, b) = (unit(rng, d), unit(rng, d));
        if subtended_angle(&a, &b) < 3.0 {
            return (a, b);
        }
    }
}

/// Random orthogonal matrix (row-major) by Gram-Schmidt on Gaussian rows.
fn rotation(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    while rows.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for r in &rows {
            let p: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(x, y)| *x -= p * y);
        }
        if let Ok(u) = normalize_to_sphere(&v) {
            rows.push(u.into_inner());
        }
    }
    rows
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Vec<UnitVector>, Vec<usize>) {
    let z = (0..n).map(|_| unit(rng, d)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..10)).collect();
    (z, labels)
}

/// Batch-hard choice recomputed from the exhaustive triplet list.
fn brute_force_batch_hard(z: &[UnitVector], all: &TripletSet) -> Vec<Triplet> {
    let d = |a: usize, b: usize| angular_distance(&z[a], &z[b]);
    let mut out = Vec::new();
    for a in 0..z.len() {
        let mine: Vec<&Triplet> = all.iter().filter(|t| t.anchor == a).collect();
        if mine.is_empty() {
            continue;
        }
        let pos = mine.iter().map(|t| t.positive).fold(None, |best: Option<usize>, p| match best {
            Some(b) if d(a, b) >= d(a, p) => Some(b),
            _ => Some(p),
        });
        let neg = mine.iter().map(|t| t.negative).fold(None, |best: Option<usize>, n| match best {
            Some(b) if d(a, b) <= d(a, n) => Some(b),
            _ => Some(n),
        });
        out.push(Triplet { anchor: a, positive: pos.unwrap(), negative: neg.unwrap() });
    }
    out
}

/// Runs every check with `seed`; each returns in well under a second.
pub fn run_selftest(seed: u64) -> Vec<SelfCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut out = Vec::new();

    out.push(check("slerp stays on the unit sphere", CASES, |_| {
        let d = rng.random_range(2..33);
        let (a, b) = pair(rng, d);
        let w = rng.random_range(0.0..=1.0);
        let s = slerp(&a, &b, w).unwrap();
        let err = (s.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs();
        (err < 1e-9, err)
    }));
    out.push(check("slerp endpoints are exact", CASES, |_| {
        let (a, b) = pair(rng, 16);
        let ok = slerp(&a, &b, 0.0).unwrap() == a && slerp(&a, &b, 1.0).unwrap() == b;
        (ok, if ok { 0.0 } else { 1.0 })
    }));
    out.push(check("slerp is symmetric", CASES, |_| {
        let (a, b) = pair(rng, 16);
        let w = rng.random_range(0.0..=1.0);
        let (p, q) = (slerp(&a, &b, w).unwrap(), slerp(&b, &a, 1.0 - w).unwrap());
        let err = p.iter().zip(q.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        (err < 1e-9, err)
    }));
    out.push(check("slerp moves at constant speed", CASES, |_| {
        let (a, b) = pair(rng, 16);
        let w = rng.random_range(0.0..=1.0);
        let s = slerp(&a, &b, w).unwrap();
        let err = (subtended_angle(&a, &s) - w * subtended_angle(&a, &b)).abs();
        (err < 1e-9, err)
    }));
    out.push(check("angular distance obeys the triangle inequality", CASES, |_| {
        let (a, b, c) = (unit(rng, 8), unit(rng, 8), unit(rng, 8));
        let slack = angular_distance(&a, &b) + angular_distance(&b, &c) - angular_distance(&a, &c);
        (slack >= -1e-9, (-slack).max(0.0))
    }));

    let graph = build_digit_neighbor_graph();
    out.push(check("atnl is nonnegative", CASES, |_| {
        let (z, labels) = random_batch(rng, 20, 8);
        let set = mine_triplets(&z, &labels, &graph, MiningStrategy::AllValid).unwrap();
        let v = atnl(&z, &set, rng.random_range(0.0..std::f64::consts::PI)).unwrap().value;
        (v >= 0.0, (-v).max(0.0))
    }));
    out.push(check("atnl hinge is zero once the margin holds", CASES, |_| {
        let m = rng.random_range(0.0..1.0);
        let dap = rng.random_range(0.0..1.0);
        let (a, p, n) = (UnitVector::axis(2, 0), at_angle(dap), at_angle(dap + m + 1e-6));
        let set = TripletSet::new(vec![Triplet { anchor: 0, positive: 1, negative: 2 }]);
        let v = atnl(&[a, p, n], &set, m).unwrap().value;
        (v == 0.0, v)
    }));
    out.push(check("atnl is rotation invariant", 50, |_| {
        let (z, labels) = random_batch(rng, 16, 6);
        let r = rotation(rng, 6);
        let rz: Vec<UnitVector> = z
            .iter()
            .map(|v| {
                let w: Vec<f64> = r.iter().map(|row| row.iter().zip(v.iter()).map(|(a, b)| a * b).sum()).collect();
                normalize_to_sphere(&w).unwrap()
            })
            .collect();
        let set = mine_triplets(&z, &labels, &graph, MiningStrategy::AllValid).unwrap();
        let err = (atnl(&z, &set, 1.2).unwrap().value - atnl(&rz, &set, 1.2).unwrap().value).abs();
        (err < 1e-9, err)
    }));
    out.push(check("kl is nonnegative", CASES, |_| {
        let d = rng.random_range(1..9);
        let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let lv: Vec<f64> = (0..d).map(|_| rng.random_range(-4.0..4.0)).collect();
        let v = kl_standard_normal(&GaussianPosterior::new(d, mu, lv).unwrap()).unwrap();
        (v >= 0.0, (-v).max(0.0))
    }));
    out.push(check("kl adds over dimensions", CASES, |_| {
        let mu: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let lv: Vec<f64> = (0..4).map(|_| rng.random_range(-4.0..4.0)).collect();
        let whole = kl_standard_normal(&GaussianPosterior::new(4, mu.clone(), lv.clone()).unwrap()).unwrap();
        let parts: f64 = (0..4)
            .map(|j| kl_standard_normal(&GaussianPosterior::new(1, vec![mu[j]], vec![lv[j]]).unwrap()).unwrap())
            .sum();
        let err = (whole - parts).abs();
        (err < 1e-9, err)
    }));
    out.push(check("batch-hard mining matches brute force", CASES, |_| {
        let n = rng.random_range(2..65);
        let (z, labels) = random_batch(rng, n, 8);
        let all = mine_triplets(&z, &labels, &graph, MiningStrategy::AllValid).unwrap();
        let hard = mine_triplets(&z, &labels, &graph, MiningStrategy::BatchHard).unwrap();
        let ok = hard.triplets() == brute_force_batch_hard(&z, &all).as_slice();
        (ok, if ok { 0.0 } else { 1.0 })
    }));
    out.push(check("loss gradients match finite differences", 30, |_| {
        let err = gradient_error(rng, &graph);
        (err < 1e-4, err)
    }));
    out
}

fn at_angle(theta: f64) -> UnitVector {
    UnitVector::new(vec![theta.cos(), theta.sin()]).unwrap()
}

/// Worst relative error between analytic and central-difference gradients (h = 1e-5) of the
/// triplet hinge, KL, and L1 losses at one random point.
fn gradient_error(rng: &mut ChaCha8Rng, graph: &SemanticNeighborGraph) -> f64 {
    const H: f64 = 1e-5;
    let mut worst: f64 = 0.0;

    // Triplet hinge over free (unnormalized) rows; probes sit away from kinks.
    let (z, labels) = random_batch(rng, 12, 5);
    let rows: Vec<Vec<f64>> = z.iter().map(|u| u.iter().map(|v| v * 0.9).collect()).collect();
    let set = mine_triplets_with(&rows, &labels, graph, Metric::Angular, MiningStrategy::AllValid).unwrap();
    let loss = |r: &[Vec<f64>]| triplet_hinge_with_grad(r, &set, 0.7, Metric::Angular).unwrap().0.value;
    let kinked = |r: &[Vec<f64>]| {
        set.iter().any(|t| {
            let h = Metric::Angular.distance(&r[t.anchor], &r[t.positive])
                - Metric::Angular.distance(&r[t.anchor], &r[t.negative])
                + 0.7;
            h.abs() < 1e-4
        })
    };
    if !kinked(&rows) {
        let (_, grads) = triplet_hinge_with_grad(&rows, &set, 0.7, Metric::Angular).unwrap();
        for _ in 0..5 {
            let (i, j) = (rng.random_range(0..rows.len()), rng.random_range(0..5));
            let (mut p, mut m) = (rows.clone(), rows.clone());
            p[i][j] += H;
            m[i][j] -= H;
            if kinked(&p) || kinked(&m) {
                continue;
            }
            let fd = (loss(&p) - loss(&m)) / (2.0 * H);
            if grads[i][j].abs() > 1e-6 || fd.abs() > 1e-6 {
                worst = worst.max(rel_err(grads[i][j], fd));
            }
        }
    }

    let mu: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
    let lv: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
    let kl = |mu: &[f64], lv: &[f64]| {
        kl_standard_normal(&GaussianPosterior::new(3, mu.to_vec(), lv.to_vec()).unwrap()).unwrap()
    };
    let (_, dmu, dlv) = kl_standard_normal_with_grad(&GaussianPosterior::new(3, mu.clone(), lv.clone()).unwrap()).unwrap();
    for j in 0..6 {
        let (mut p, mut m) = (mu.clone(), mu.clone());
        p[j] += H;
        m[j] -= H;
        worst = worst.max(rel_err(dmu[j], (kl(&p, &lv) - kl(&m, &lv)) / (2.0 * H)));
        let (mut p, mut m) = (lv.clone(), lv.clone());
        p[j] += H;
        m[j] -= H;
        worst = worst.max(rel_err(dlv[j], (kl(&mu, &p) - kl(&mu, &m)) / (2.0 * H)));
    }

    // L1 away from its kink: every |x - x_hat| exceeds the step.
    let x: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
    let xh: Vec<f64> = x.iter().map(|v| v + if rng.random() { 0.1 } else { -0.1 }).collect();
    let (_, g) = reconstruction_l1_with_grad(&x, &xh).unwrap();
    for j in 0..8 {
        let (mut p, mut m) = (xh.clone(), xh.clone());
        p[j] += H;
        m[j] -= H;
        let f = |v: &[f64]| reconstruction_l1_with_grad(&x, v).unwrap().0;
        worst = worst.max(rel_err(g[j], (f(&p) - f(&m)) / (2.0 * H)));
    }
    worst
}
