//! Training objectives and online triplet mining.
//!
//! All three objectives use mean reduction: L1 over every pixel of the batch, KL over
//! the batch, and the triplet hinge over the `N` mined triplets. Every loss has a
//! companion that also returns its analytic gradient.

use std::fmt;
use std::str::FromStr;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::dataset::SemanticNeighborGraph;
use crate::error::{Error, Result};
use crate::geometry::{clamped_dot, dot, UnitVector, DOT_EPS};

/// Lower/upper bound applied to encoder log-variances.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// Diagonal Gaussian posteriors for a batch, stored row-major (`len * d_z`).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    d_z: usize,
    mu: Vec<f64>,
    log_var: Vec<f64>,
}

impl GaussianPosterior {
    pub fn new(d_z: usize, mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if d_z == 0 || mu.len() != log_var.len() || !mu.len().is_multiple_of(d_z) {
            return Err(Error::Shape(format!(
                "posterior with d_z={d_z}: {} means vs {} log-variances",
                mu.len(),
                log_var.len()
            )));
        }
        if mu.iter().chain(&log_var).any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("posterior contains non-finite entries".into()));
        }
        Ok(Self { d_z, mu, log_var })
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    pub fn len(&self) -> usize {
        self.mu.len() / self.d_z
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn mu_row(&self, i: usize) -> &[f64] {
        &self.mu[i * self.d_z..(i + 1) * self.d_z]
    }

    pub fn log_var_row(&self, i: usize) -> &[f64] {
        &self.log_var[i * self.d_z..(i + 1) * self.d_z]
    }
}

/// Mean absolute error over every element.
pub fn reconstruction_l1<T: Float>(x: &[T], x_hat: &[T]) -> Result<f64> {
    reconstruction_l1_with_grad(x, x_hat).map(|(v, _)| v)
}

/// Mean absolute error and its gradient with respect to `x_hat` (zero where they agree).
pub fn reconstruction_l1_with_grad<T: Float>(x: &[T], x_hat: &[T]) -> Result<(f64, Vec<T>)> {
    if x.len() != x_hat.len() {
        return Err(Error::Shape(format!(
            "reconstruction target has {} elements, output has {}",
            x.len(),
            x_hat.len()
        )));
    }
    if x.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = x.len() as f64;
    let inv = T::from(1.0 / n).expect("representable");
    let mut sum = 0.0f64;
    let grad = x
        .iter()
        .zip(x_hat)
        .map(|(&a, &b)| {
            let d = b - a;
            sum += d.abs().to_f64().unwrap_or(f64::NAN);
            if d > T::zero() {
                inv
            } else if d < T::zero() {
                -inv
            } else {
                T::zero()
            }
        })
        .collect();
    Ok((sum / n, grad))
}

/// `KL(N(mu, exp(log_var)) || N(0, I))` summed over dimensions, averaged over the batch.
pub fn kl_standard_normal(post: &GaussianPosterior) -> Result<f64> {
    kl_standard_normal_with_grad(post).map(|(v, _, _)| v)
}

/// KL value plus gradients with respect to `mu` and `log_var`.
pub fn kl_standard_normal_with_grad(post: &GaussianPosterior) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if post.mu.iter().chain(&post.log_var).any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite posterior passed to KL".into()));
    }
    let b = post.len().max(1) as f64;
    let mut total = 0.0;
    let mut d_mu = Vec::with_capacity(post.mu.len());
    let mut d_lv = Vec::with_capacity(post.mu.len());
    for (&m, &lv) in post.mu.iter().zip(&post.log_var) {
        let e = lv.exp();
        total += -0.5 * (1.0 + lv - m * m - e);
        d_mu.push(m / b);
        d_lv.push(0.5 * (e - 1.0) / b);
    }
    Ok((total / b, d_mu, d_lv))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TripletSet {
    triplets: Vec<Triplet>,
}

impl TripletSet {
    pub fn new(triplets: Vec<Triplet>) -> Self {
        Self { triplets }
    }

    pub fn count(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Triplet> {
        self.triplets.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningStrategy {
    /// Per anchor: farthest valid positive and nearest valid negative.
    BatchHard,
    /// Every (anchor, positive, negative) combination satisfying the class constraints.
    AllValid,
    /// Every (anchor, positive) pair, with the nearest negative farther than the positive;
    /// when no negative is, the farthest negative.
    SemiHard,
}

impl FromStr for MiningStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch_hard" => Ok(Self::BatchHard),
            "all_valid" => Ok(Self::AllValid),
            "semi_hard" => Ok(Self::SemiHard),
            _ => Err(Error::Config(format!(
                "unknown mining strategy {s:?} (expected batch_hard, semi_hard or all_valid)"
            ))),
        }
    }
}

impl fmt::Display for MiningStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::BatchHard => "batch_hard",
            Self::AllValid => "all_valid",
            Self::SemiHard => "semi_hard",
        })
    }
}

/// Distance used for mining and for the triplet hinge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// `acos` of the clamped dot product; inputs must be unit vectors.
    Angular,
    /// Plain L2 distance.
    Euclidean,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Angular => clamped_dot(a, b).acos(),
            Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        }
    }

    /// Adds `scale * d distance(a, b) / d a` into `ga` and the `b` counterpart into `gb`.
    fn accumulate_grad(self, a: &[f64], b: &[f64], scale: f64, ga: &mut [f64], gb: &mut [f64]) {
        match self {
            Metric::Angular => {
                let c = dot(a, b);
                // Clamped region: the distance is locally constant.
                if c >= 1.0 - DOT_EPS || c <= -1.0 + DOT_EPS {
                    return;
                }
                let k = -scale / (1.0 - c * c).sqrt();
                for i in 0..a.len() {
                    ga[i] += k * b[i];
                    gb[i] += k * a[i];
                }
            }
            Metric::Euclidean => {
                let d = self.distance(a, b);
                if d == 0.0 {
                    return;
                }
                for i in 0..a.len() {
                    let g = scale * (a[i] - b[i]) / d;
                    ga[i] += g;
                    gb[i] -= g;
                }
            }
        }
    }
}

/// Mines triplets from angular distances between normalized latents.
///
/// Positives share the anchor's class or are graph neighbors of it; everything else is
/// a negative. The anchor itself is never its own positive. Anchors lacking either pool
/// are skipped.
pub fn mine_triplets(
    latents: &[UnitVector],
    labels: &[usize],
    graph: &SemanticNeighborGraph,
    strategy: MiningStrategy,
) -> Result<TripletSet> {
    let rows: Vec<&[f64]> = latents.iter().map(|v| v.as_slice()).collect();
    mine_triplets_with(&rows, labels, graph, Metric::Angular, strategy)
}

/// [`mine_triplets`] over arbitrary points and metric.
pub fn mine_triplets_with<V: AsRef<[f64]>>(
    points: &[V],
    labels: &[usize],
    graph: &SemanticNeighborGraph,
    metric: Metric,
    strategy: MiningStrategy,
) -> Result<TripletSet> {
    if points.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} latents but {} labels",
            points.len(),
            labels.len()
        )));
    }
    let n = points.len();
    let positive = |a: usize, b: usize| graph.is_positive(labels[a], labels[b]);
    let mut out = Vec::new();
    let dist_matrix = || -> Vec<f64> {
        (0..n * n).map(|k| metric.distance(points[k / n].as_ref(), points[k % n].as_ref())).collect()
    };
    match strategy {
        MiningStrategy::SemiHard => {
            let dist = dist_matrix();
            for a in 0..n {
                let negs: Vec<usize> = (0..n).filter(|&x| !positive(a, x)).collect();
                if negs.is_empty() {
                    continue;
                }
                for p in (0..n).filter(|&p| p != a && positive(a, p)) {
                    let dap = dist[a * n + p];
                    let mut outside: Option<(usize, f64)> = None;
                    let mut farthest: Option<(usize, f64)> = None;
                    for &x in &negs {
                        let d = dist[a * n + x];
                        if d > dap && outside.is_none_or(|(_, best)| d < best) {
                            outside = Some((x, d));
                        }
                        if farthest.is_none_or(|(_, best)| d > best) {
                            farthest = Some((x, d));
                        }
                    }
                    let (neg, _) = outside.or(farthest).expect("non-empty negatives");
                    out.push(Triplet { anchor: a, positive: p, negative: neg });
                }
            }
        }
        MiningStrategy::AllValid => {
            for a in 0..n {
                for p in (0..n).filter(|&p| p != a && positive(a, p)) {
                    for neg in (0..n).filter(|&x| !positive(a, x)) {
                        out.push(Triplet { anchor: a, positive: p, negative: neg });
                    }
                }
            }
        }
        MiningStrategy::BatchHard => {
            let dist = dist_matrix();
            for a in 0..n {
                let mut hardest_pos: Option<(usize, f64)> = None;
                let mut hardest_neg: Option<(usize, f64)> = None;
                for j in 0..n {
                    if j == a {
                        continue;
                    }
                    let d = dist[a * n + j];
                    if positive(a, j) {
                        // Strict comparisons keep the lowest index on ties.
                        if hardest_pos.is_none_or(|(_, best)| d > best) {
                            hardest_pos = Some((j, d));
                        }
                    } else if hardest_neg.is_none_or(|(_, best)| d < best) {
                        hardest_neg = Some((j, d));
                    }
                }
                if let (Some((p, _)), Some((neg, _))) = (hardest_pos, hardest_neg) {
                    out.push(Triplet { anchor: a, positive: p, negative: neg });
                }
            }
        }
    }
    Ok(TripletSet::new(out))
}

/// Value of a triplet hinge objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletLoss {
    /// `sum_i max(d(a,p) - d(a,n) + margin, 0) / N`; zero when there are no triplets.
    pub value: f64,
    /// Triplets with a strictly positive hinge.
    pub active: usize,
    /// Set when the triplet set was empty.
    pub no_triplets: bool,
}

/// Angular triplet-neighbor loss over normalized latents.
pub fn atnl(latents: &[UnitVector], triplets: &TripletSet, margin: f64) -> Result<TripletLoss> {
    atnl_with_grad(latents, triplets, margin).map(|(l, _)| l)
}

/// Angular triplet-neighbor loss and its gradient with respect to each latent.
pub fn atnl_with_grad(latents: &[UnitVector], triplets: &TripletSet, margin: f64) -> Result<(TripletLoss, Vec<Vec<f64>>)> {
    if !(0.0..=std::f64::consts::PI).contains(&margin) {
        return Err(Error::InvalidArgument(format!("angular margin {margin} outside [0, pi]")));
    }
    triplet_hinge_with_grad(latents, triplets, margin, Metric::Angular)
}

/// Generic triplet hinge with mean reduction over the triplet count.
pub fn triplet_hinge_with_grad<V: AsRef<[f64]>>(
    points: &[V],
    triplets: &TripletSet,
    margin: f64,
    metric: Metric,
) -> Result<(TripletLoss, Vec<Vec<f64>>)> {
    let dim = points.first().map_or(0, |p| p.as_ref().len());
    let mut grads = vec![vec![0.0; dim]; points.len()];
    if triplets.is_empty() {
        return Ok((TripletLoss { value: 0.0, active: 0, no_triplets: true }, grads));
    }
    if let Some(t) = triplets.iter().find(|t| t.anchor.max(t.positive).max(t.negative) >= points.len()) {
        return Err(Error::Shape(format!("triplet {t:?} indexes past {} latents", points.len())));
    }
    let scale = 1.0 / triplets.count() as f64;
    let mut sum = 0.0;
    let mut active = 0;
    let (mut ga, mut gp, mut gn) = (vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]);
    for t in triplets.iter() {
        let (a, p, n) = (points[t.anchor].as_ref(), points[t.positive].as_ref(), points[t.negative].as_ref());
        let h = metric.distance(a, p) - metric.distance(a, n) + margin;
        if h > 0.0 {
            sum += h;
            active += 1;
            for buf in [&mut ga, &mut gp, &mut gn] {
                buf.iter_mut().for_each(|v| *v = 0.0);
            }
            metric.accumulate_grad(a, p, scale, &mut ga, &mut gp);
            metric.accumulate_grad(a, n, -scale, &mut ga, &mut gn);
            for (idx, g) in [(t.anchor, &ga), (t.positive, &gp), (t.negative, &gn)] {
                for (x, y) in grads[idx].iter_mut().zip(g) {
                    *x += y;
                }
            }
        }
    }
    Ok((
        TripletLoss { value: sum * scale, active, no_triplets: false },
        grads,
    ))
}

/// Weights of the three objectives in the total loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub rec: f64,
    pub kl: f64,
    pub atn: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { rec: 10.0, kl: 1e-4, atn: 1.0 }
    }
}

pub fn total_loss(rec: f64, kl: f64, atn: f64, w: &LossWeights) -> f64 {
    w.rec * rec + w.kl * kl + w.atn * atn
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::build_digit_neighbor_graph;
    use crate::geometry::normalize_to_sphere;

    fn unit_at(angle: f64) -> UnitVector {
        UnitVector::new(vec![angle.cos(), angle.sin(), 0.0]).unwrap()
    }

    #[test]
    fn l1_examples() {
        let x = [0.1f64, 0.5, 0.9, 0.2];
        assert_eq!(reconstruction_l1(&x, &x).unwrap(), 0.0);
        let shifted: Vec<f64> = x.iter().map(|v| v + 0.1).collect();
        assert!((reconstruction_l1(&x, &shifted).unwrap() - 0.1).abs() < 1e-12);
        assert!(reconstruction_l1(&x, &x[..3]).is_err());
    }

    #[test]
    fn kl_examples() {
        let zero = GaussianPosterior::new(1, vec![0.0], vec![0.0]).unwrap();
        assert_eq!(kl_standard_normal(&zero).unwrap(), 0.0);
        let one = GaussianPosterior::new(1, vec![1.0], vec![0.0]).unwrap();
        assert!((kl_standard_normal(&one).unwrap() - 0.5).abs() < 1e-15);
        let a = GaussianPosterior::new(1, vec![0.3], vec![-0.4]).unwrap();
        let b = GaussianPosterior::new(1, vec![-1.2], vec![0.7]).unwrap();
        let ab = GaussianPosterior::new(2, vec![0.3, -1.2], vec![-0.4, 0.7]).unwrap();
        let sum = kl_standard_normal(&a).unwrap() + kl_standard_normal(&b).unwrap();
        assert!((kl_standard_normal(&ab).unwrap() - sum).abs() < 1e-14);
        assert!(GaussianPosterior::new(1, vec![f64::NAN], vec![0.0]).is_err());
    }

    #[test]
    fn atnl_scalar_example() {
        // d(a,p) = pi/6, d(a,n) = pi/3, margin 1.2 -> 1.2 - pi/6 = 0.676401...
        let z = vec![unit_at(0.0), unit_at(std::f64::consts::FRAC_PI_6), unit_at(std::f64::consts::FRAC_PI_3)];
        let t = TripletSet::new(vec![Triplet { anchor: 0, positive: 1, negative: 2 }]);
        let l = atnl(&z, &t, 1.2).unwrap();
        assert!((l.value - 0.6764).abs() < 1e-4, "{}", l.value);
        assert_eq!(l.active, 1);
    }

    #[test]
    fn atnl_hinge_boundary_and_zero_margin() {
        let z = vec![unit_at(0.0), unit_at(0.3), unit_at(0.3 + 1.2)];
        let t = TripletSet::new(vec![Triplet { anchor: 0, positive: 1, negative: 2 }]);
        assert!(atnl(&z, &t, 1.2).unwrap().value <= 1e-9);

        let z = vec![unit_at(0.0), unit_at(0.0), unit_at(2.0)];
        assert_eq!(atnl(&z, &t, 0.0).unwrap().value, 0.0);

        let empty = atnl(&z, &TripletSet::default(), 1.2).unwrap();
        assert!(empty.no_triplets && empty.value == 0.0);
        assert!(atnl(&z, &t, 4.0).is_err());
    }

    #[test]
    fn mining_respects_semantic_neighbors() {
        let g = build_digit_neighbor_graph();
        let labels = [0, 0, 1, 5, 5, 1];
        let z: Vec<UnitVector> = (0..6).map(|i| unit_at(i as f64 * 0.4)).collect();
        let all = mine_triplets(&z, &labels, &g, MiningStrategy::AllValid).unwrap();
        for t in all.iter().filter(|t| labels[t.anchor] == 0) {
            assert!([0, 1].contains(&labels[t.positive]));
            assert_eq!(labels[t.negative], 5);
        }
        assert!(all.iter().all(|t| t.anchor != t.positive));

        let single = mine_triplets(&z, &[3; 6], &g, MiningStrategy::BatchHard).unwrap();
        assert!(single.is_empty());
        assert!(mine_triplets(&z, &[0; 5], &g, MiningStrategy::AllValid).is_err());
    }

    #[test]
    fn batch_hard_picks_extremes() {
        let g = SemanticNeighborGraph::class_only(2);
        let labels = [0, 0, 0, 1, 1];
        let z: Vec<UnitVector> = [0.0, 0.1, 0.5, 0.9, 2.0].iter().map(|&a| unit_at(a)).collect();
        let t = mine_triplets(&z, &labels, &g, MiningStrategy::BatchHard).unwrap();
        assert_eq!(t.triplets()[0], Triplet { anchor: 0, positive: 2, negative: 3 });
        assert_eq!(t.count(), 5);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert!((total_loss(1.0, 1.0, 1.0, &w) - 11.0001).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w), 0.0);
        let a = total_loss(0.3, 2.0, 0.7, &w);
        assert!((total_loss(0.6, 4.0, 1.4, &w) - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn euclidean_hinge_gradient_direction() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 0.5]];
        let t = TripletSet::new(vec![Triplet { anchor: 0, positive: 1, negative: 2 }]);
        let (l, g) = triplet_hinge_with_grad(&pts, &t, 0.2, Metric::Euclidean).unwrap();
        assert!((l.value - 0.7).abs() < 1e-12);
        // Moving the positive toward the anchor lowers the loss.
        assert!(g[1][0] > 0.0);
        assert!(normalize_to_sphere(&pts[1]).is_ok());
    }
}
