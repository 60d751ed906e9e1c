//! Lloyd's k-means with seeded farthest-point initialization.
//!
//! Initialization draws the first centroid uniformly with the seed, then
//! repeatedly adds the point whose squared distance to its nearest chosen
//! centroid is largest (ties: lowest index). Whenever an assignment pass
//! leaves a cluster empty, the point farthest from its own centroid (taken
//! from a cluster with at least two members) is moved into it and becomes its
//! centroid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeded_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansState {
    pub centroids: Vec<Vec<f64>>,
    /// Cluster id for each input point.
    pub assignments: Vec<usize>,
    pub iterations_run: usize,
    pub converged: bool,
}

impl KMeansState {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Within-cluster sum of squared distances.
    pub fn inertia<V: AsRef<[f64]>>(&self, points: &[V]) -> f64 {
        points
            .iter()
            .zip(&self.assignments)
            .map(|(p, &c)| sq_dist(p.as_ref(), &self.centroids[c]))
            .sum()
    }

    pub fn members(&self, cluster: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignments
            .iter()
            .enumerate()
            .filter(move |(_, &c)| c == cluster)
            .map(|(i, _)| i)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KMeansParams {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        KMeansParams {
            max_iters: 100,
            tol: 1e-9,
        }
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.iter().enumerate() {
        let d = sq_dist(p, mu);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

pub fn kmeans<V: AsRef<[f64]>>(
    points: &[V],
    k: usize,
    seed: u64,
    params: KMeansParams,
) -> Result<KMeansState> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::OutOfRange(format!(
            "k = {k} clusters for {n} points"
        )));
    }
    if params.max_iters == 0 || params.tol.is_nan() || params.tol <= 0.0 {
        return Err(Error::Config(
            "k-means needs max_iters >= 1 and tol > 0".into(),
        ));
    }
    let dim = points[0].as_ref().len();
    for p in points {
        let p = p.as_ref();
        if p.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: p.len(),
            });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("k-means input".into()));
        }
    }

    let mut centroids = init_farthest(points, k, seed);
    let mut assignments = vec![0; n];
    let mut converged = false;
    let mut iterations_run = 0;

    while iterations_run < params.max_iters {
        iterations_run += 1;
        assign(points, &mut centroids, &mut assignments);
        let updated = means(points, &assignments, k, dim);
        let movement = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        if movement < params.tol {
            converged = true;
            break;
        }
    }
    assign(points, &mut centroids, &mut assignments);

    Ok(KMeansState {
        centroids,
        assignments,
        iterations_run,
        converged,
    })
}

fn init_farthest<V: AsRef<[f64]>>(points: &[V], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut rng = seeded_rng(seed);
    let first = rng.random_range(0..n);
    let mut chosen = vec![false; n];
    chosen[first] = true;
    let mut centroids = vec![points[first].as_ref().to_vec()];
    let mut min_d: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p.as_ref(), &centroids[0]))
        .collect();
    while centroids.len() < k {
        let mut pick = None;
        for i in 0..n {
            if chosen[i] {
                continue;
            }
            match pick {
                None => pick = Some(i),
                Some(j) if min_d[i] > min_d[j] => pick = Some(i),
                _ => {}
            }
        }
        let i = pick.expect("k <= n leaves an unchosen point");
        chosen[i] = true;
        let c = points[i].as_ref().to_vec();
        for (d, p) in min_d.iter_mut().zip(points) {
            *d = d.min(sq_dist(p.as_ref(), &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Nearest-centroid assignment followed by empty-cluster repair.
fn assign<V: AsRef<[f64]>>(points: &[V], centroids: &mut [Vec<f64>], assignments: &mut [usize]) {
    let k = centroids.len();
    let mut dist = vec![0.0; points.len()];
    for (i, p) in points.iter().enumerate() {
        let (c, d) = nearest(p.as_ref(), centroids);
        assignments[i] = c;
        dist[i] = d;
    }
    let mut sizes = vec![0usize; k];
    for &c in assignments.iter() {
        sizes[c] += 1;
    }
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let mut donor: Option<usize> = None;
        for i in 0..points.len() {
            if sizes[assignments[i]] < 2 {
                continue;
            }
            if donor.is_none_or(|j| dist[i] > dist[j]) {
                donor = Some(i);
            }
        }
        let i = donor.expect("k <= n guarantees a cluster with two members");
        sizes[assignments[i]] -= 1;
        sizes[empty] = 1;
        assignments[i] = empty;
        dist[i] = 0.0;
        centroids[empty] = points[i].as_ref().to_vec();
    }
}

fn means<V: AsRef<[f64]>>(
    points: &[V],
    assignments: &[usize],
    k: usize,
    dim: usize,
) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assignments) {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(p.as_ref()) {
            *s += v;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        for v in s.iter_mut() {
            *v /= n as f64;
        }
    }
    sums
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn four() -> Vec<Vec<f64>> {
        vec![
            vec![0.0, 0.0],
            vec![0.0, 0.1],
            vec![5.0, 5.0],
            vec![5.0, 5.1],
        ]
    }

    /// Minimum within-cluster SSE partition by exhaustive labelling.
    fn brute_force_partition(points: &[Vec<f64>], k: usize) -> Vec<Vec<usize>> {
        let n = points.len();
        let mut best: (f64, Vec<usize>) = (f64::INFINITY, vec![]);
        let mut labels = vec![0usize; n];
        loop {
            let mut used = vec![false; k];
            labels.iter().for_each(|&l| used[l] = true);
            if used.iter().all(|&u| u) {
                let mut sse = 0.0;
                for c in 0..k {
                    let members: Vec<&Vec<f64>> = (0..n)
                        .filter(|&i| labels[i] == c)
                        .map(|i| &points[i])
                        .collect();
                    let dim = points[0].len();
                    let mu: Vec<f64> = (0..dim)
                        .map(|d| members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64)
                        .collect();
                    sse += members.iter().map(|m| sq_dist(m, &mu)).sum::<f64>();
                }
                if sse < best.0 - 1e-12 {
                    best = (sse, labels.clone());
                }
            }
            let mut i = 0;
            while i < n {
                labels[i] += 1;
                if labels[i] < k {
                    break;
                }
                labels[i] = 0;
                i += 1;
            }
            if i == n {
                break;
            }
        }
        canonical(&best.1, k)
    }

    fn canonical(labels: &[usize], k: usize) -> Vec<Vec<usize>> {
        let mut groups: Vec<Vec<usize>> = (0..k)
            .map(|c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
            .collect();
        groups.retain(|g| !g.is_empty());
        groups.sort();
        groups
    }

    #[test]
    fn four_point_partition_matches_brute_force() {
        let pts = four();
        let expected = brute_force_partition(&pts, 2);
        assert_eq!(expected, vec![vec![0, 1], vec![2, 3]]);
        for seed in 0..10 {
            let st = kmeans(&pts, 2, seed, KMeansParams::default()).unwrap();
            assert_eq!(canonical(&st.assignments, 2), expected);
            assert!(st.converged);
        }
    }

    #[test]
    fn k_equals_n_is_zero_inertia() {
        let pts = four();
        let st = kmeans(&pts, 4, 3, KMeansParams::default()).unwrap();
        let mut a = st.assignments.clone();
        a.sort();
        a.dedup();
        assert_eq!(a.len(), 4);
        assert_eq!(st.inertia(&pts), 0.0);
    }

    #[test]
    fn deterministic_and_errors() {
        let pts = four();
        let a = kmeans(&pts, 2, 5, KMeansParams::default()).unwrap();
        assert_eq!(a, kmeans(&pts, 2, 5, KMeansParams::default()).unwrap());
        assert!(kmeans(&pts, 5, 0, KMeansParams::default()).is_err());
        assert!(kmeans(&pts, 0, 0, KMeansParams::default()).is_err());
        let bad = vec![vec![0.0, f64::NAN]];
        assert!(kmeans(&bad, 1, 0, KMeansParams::default()).is_err());
        let p = KMeansParams {
            max_iters: 0,
            tol: 1.0,
        };
        assert!(kmeans(&pts, 1, 0, p).is_err());
    }

    #[test]
    fn identical_points_still_fill_every_cluster() {
        let pts = vec![vec![1.0, 1.0]; 5];
        let st = kmeans(&pts, 3, 1, KMeansParams::default()).unwrap();
        for c in 0..3 {
            assert!(st.members(c).count() >= 1);
        }
    }

    proptest! {
        #[test]
        fn terminal_assignment_is_nearest(
            pts in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 4..40),
            k in 1usize..4,
            seed in any::<u64>(),
        ) {
            let st = kmeans(&pts, k, seed, KMeansParams::default()).unwrap();
            for (p, &c) in pts.iter().zip(&st.assignments) {
                let own = sq_dist(p, &st.centroids[c]);
                for mu in &st.centroids {
                    prop_assert!(own <= sq_dist(p, mu) + 1e-12);
                }
            }
            for c in 0..k {
                prop_assert!(st.members(c).count() >= 1);
            }
        }

        #[test]
        fn duplicate_groups_match_optimal_partition(
            centers in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 2), 2..4),
            reps in prop::collection::vec(1usize..4, 3),
            seed in any::<u64>(),
        ) {
            // Keep groups well apart so the optimum is unambiguous.
            let k = centers.len();
            for a in 0..k {
                for b in a + 1..k {
                    prop_assume!(sq_dist(&centers[a], &centers[b]) > 1.0);
                }
            }
            let mut pts = Vec::new();
            let mut group = Vec::new();
            for (g, c) in centers.iter().enumerate() {
                for _ in 0..reps[g] {
                    pts.push(c.clone());
                    group.push(g);
                }
            }
            prop_assume!(pts.len() <= 8);
            let expected = canonical(&group, k);
            prop_assert_eq!(brute_force_partition(&pts, k), expected.clone());
            let st = kmeans(&pts, k, seed, KMeansParams::default()).unwrap();
            prop_assert_eq!(canonical(&st.assignments, k), expected);
        }
    }
}
