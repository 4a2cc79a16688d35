use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, MarkId, Result};

const MAX_LLOYD_ITERS: usize = 100;

/// Assignment of every non-EOS mark to one of `m` clusters of similar mean
/// completion time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMap {
    /// Indexed by mark id; `None` only for `<EOS>`.
    pub assignment: Vec<Option<usize>>,
    /// Mean completion time per cluster, ascending.
    pub centroids: Vec<f64>,
    pub m: usize,
}

impl ClusterMap {
    pub fn cluster_of(&self, mark: MarkId) -> Option<usize> {
        self.assignment.get(mark.0).copied().flatten()
    }

    pub fn members(&self, cluster: usize) -> Vec<MarkId> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == Some(cluster))
            .map(|(i, _)| MarkId(i))
            .collect()
    }
}

fn nearest(x: f64, centroids: &[f64]) -> usize {
    let mut best = 0;
    for (c, &mu) in centroids.iter().enumerate() {
        // strict comparison keeps ties on the lower id
        if (x - mu).abs() < (x - centroids[best]).abs() {
            best = c;
        }
    }
    best
}

/// One-dimensional k-means. The first centroid is a seeded random point; each
/// further one is the point farthest from its nearest chosen centroid.
/// Returned centroids are sorted ascending and labels follow that order.
pub fn kmeans_1d(values: &[f64], k: usize, seed: u64) -> Result<(Vec<f64>, Vec<usize>)> {
    if k == 0 || k > values.len() {
        return Err(DataError::Config(format!(
            "cannot form {k} clusters from {} values",
            values.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![values[rng.random_range(0..values.len())]];
    while centroids.len() < k {
        let mut far = 0;
        let mut far_d = -1.0;
        for (i, &x) in values.iter().enumerate() {
            let d = (x - centroids[nearest(x, &centroids)]).abs();
            if d > far_d {
                far_d = d;
                far = i;
            }
        }
        centroids.push(values[far]);
    }
    centroids.sort_by(f64::total_cmp);

    let mut labels: Vec<usize> = values.iter().map(|&x| nearest(x, &centroids)).collect();
    for _ in 0..MAX_LLOYD_ITERS {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (&x, &l) in values.iter().zip(&labels) {
            sums[l] += x;
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c] / counts[c] as f64;
            }
        }
        let next: Vec<usize> = values.iter().map(|&x| nearest(x, &centroids)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| centroids[a].total_cmp(&centroids[b]).then(a.cmp(&b)));
    let mut relabel = vec![0; k];
    for (new, &old) in order.iter().enumerate() {
        relabel[old] = new;
    }
    let sorted = order.iter().map(|&o| centroids[o]).collect();
    Ok((sorted, labels.into_iter().map(|l| relabel[l]).collect()))
}

/// Mean completion time per non-EOS mark: the mean gap to the following
/// event. Marks with no successor anywhere fall back to the overall mean.
pub fn mean_completion_times(train: &Dataset) -> Vec<f64> {
    let n_marks = train.marks.len() - 1;
    let mut sums = vec![0.0; n_marks];
    let mut counts = vec![0usize; n_marks];
    for s in &train.sequences {
        for w in s.events().windows(2) {
            if w[0].mark.0 < n_marks {
                sums[w[0].mark.0] += w[1].delta;
                counts[w[0].mark.0] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    let fallback = if total > 0 {
        sums.iter().sum::<f64>() / total as f64
    } else {
        train.time_scales().1
    };
    sums.iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { fallback })
        .collect()
}

/// Clusters the non-EOS marks of `train` into `m` groups by mean completion time.
pub fn cluster_actions(train: &Dataset, m: usize, seed: u64) -> Result<ClusterMap> {
    let n_marks = train.marks.len() - 1;
    if m == 0 || m > n_marks {
        return Err(DataError::Config(format!(
            "cluster count {m} must lie in 1..={n_marks} (distinct non-EOS marks)"
        )));
    }
    let means = mean_completion_times(train);
    let (centroids, labels) = kmeans_1d(&means, m, seed)?;
    let mut assignment: Vec<Option<usize>> = labels.into_iter().map(Some).collect();
    assignment.push(None);
    Ok(ClusterMap {
        assignment,
        centroids,
        m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ActionRecord, SequenceRecord};

    /// Minimum within-cluster sum of squares over every labeling into `k` groups.
    fn brute_force(values: &[f64], k: usize) -> Vec<usize> {
        let n = values.len();
        let mut best = (f64::INFINITY, vec![]);
        for code in 0..k.pow(n as u32) {
            let labels: Vec<usize> = (0..n).map(|i| (code / k.pow(i as u32)) % k).collect();
            if (0..k).any(|c| !labels.contains(&c)) {
                continue;
            }
            let cost: f64 = (0..k)
                .map(|c| {
                    let pts: Vec<f64> = (0..n).filter(|&i| labels[i] == c).map(|i| values[i]).collect();
                    let mu = pts.iter().sum::<f64>() / pts.len() as f64;
                    pts.iter().map(|x| (x - mu).powi(2)).sum::<f64>()
                })
                .sum();
            if cost < best.0 {
                best = (cost, labels);
            }
        }
        best.1
    }

    fn same_partition(a: &[usize], b: &[usize]) -> bool {
        (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
    }

    #[test]
    fn matches_brute_force_partition() {
        let values = [1.0, 1.1, 9.0];
        let (_, labels) = kmeans_1d(&values, 2, 0).unwrap();
        assert!(same_partition(&labels, &brute_force(&values, 2)));
        assert_eq!(labels[0], labels[1]);
        assert_ne!(labels[0], labels[2]);
    }

    #[test]
    fn agrees_with_brute_force_on_small_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..40 {
            let n = rng.random_range(3..7);
            let k = rng.random_range(1..=3.min(n));
            // well-separated groups make the optimum unambiguous
            let values: Vec<f64> = (0..n)
                .map(|i| (i % k) as f64 * 100.0 + rng.random_range(0.0..1.0))
                .collect();
            let (_, labels) = kmeans_1d(&values, k, trial).unwrap();
            assert!(same_partition(&labels, &brute_force(&values, k)), "{values:?}");
        }
    }

    #[test]
    fn single_and_exact_fit() {
        let values = [3.0, 1.0, 2.0, 7.0];
        let (c, l) = kmeans_1d(&values, 1, 5).unwrap();
        assert_eq!(l, vec![0; 4]);
        assert!((c[0] - 3.25).abs() < 1e-12);
        let (c, l) = kmeans_1d(&values, 4, 5).unwrap();
        assert_eq!(c, vec![1.0, 2.0, 3.0, 7.0]);
        assert_eq!(l, vec![2, 0, 1, 3]);
    }

    #[test]
    fn result_is_lloyd_fixed_point() {
        let values = [0.5, 0.7, 2.0, 2.2, 2.1, 10.0, 11.0, 4.0];
        let (c, l) = kmeans_1d(&values, 3, 9).unwrap();
        for (x, label) in values.iter().zip(&l) {
            assert_eq!(nearest(*x, &c), *label);
        }
        assert!(c.windows(2).all(|w| w[0] <= w[1]));
    }

    fn corpus() -> Dataset {
        // completion means: a → 1.0, b → 1.1, c → 9.0
        let seq = |acts: &[(&str, f64)]| SequenceRecord {
            goal: "g".into(),
            actions: acts
                .iter()
                .map(|&(m, t)| ActionRecord { mark: m.into(), time: t })
                .collect(),
        };
        Dataset::from_records(&[
            seq(&[("a", 1.0), ("b", 2.0), ("c", 3.1), ("a", 12.1)]),
            seq(&[("c", 1.0), ("a", 10.0), ("b", 11.0), ("c", 12.1)]),
        ])
        .unwrap()
    }

    #[test]
    fn cluster_actions_groups_by_completion_time() {
        let d = corpus();
        let means = mean_completion_times(&d);
        assert!((means[0] - 1.0).abs() < 1e-9);
        assert!((means[1] - 1.1).abs() < 1e-9);
        assert!((means[2] - 9.0).abs() < 1e-9);
        let cm = cluster_actions(&d, 2, 3).unwrap();
        assert_eq!(cm.assignment, vec![Some(0), Some(0), Some(1), None]);
        assert_eq!(cm.members(1), vec![MarkId(2)]);
        let again = cluster_actions(&d, 2, 3).unwrap();
        assert_eq!(cm, again);
    }

    #[test]
    fn too_many_clusters_is_a_configuration_error() {
        let d = corpus();
        assert!(matches!(cluster_actions(&d, 4, 0), Err(DataError::Config(_))));
        assert!(matches!(cluster_actions(&d, 0, 0), Err(DataError::Config(_))));
        let all = cluster_actions(&d, 3, 0).unwrap();
        assert_eq!(all.assignment, vec![Some(0), Some(1), Some(2), None]);
    }
}
