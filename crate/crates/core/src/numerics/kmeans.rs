use super::matrix::{squared_distance, DenseMatrix};
use super::rng::SeededRng;
use super::Real;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct KMeansResult<T> {
    pub assignments: Vec<usize>,
    pub centroids: DenseMatrix<T>,
    /// Within-cluster sum of squares after every assignment step.
    pub objective_history: Vec<T>,
}

impl<T: Real> KMeansResult<T> {
    pub fn objective(&self) -> T {
        *self.objective_history.last().expect("at least one assignment")
    }
}

/// Lloyd's algorithm with k-means++ seeding. Rows of `points` are the samples.
pub fn kmeans<T: Real>(
    points: &DenseMatrix<T>,
    k: usize,
    max_iters: usize,
    rng: &mut SeededRng,
) -> Result<KMeansResult<T>> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::InvalidInput("k-means needs K >= 1".into()));
    }
    if k > n {
        return Err(Error::InvalidInput(format!(
            "K = {k} exceeds the number of points ({n})"
        )));
    }
    if max_iters == 0 {
        return Err(Error::InvalidInput("k-means needs max_iters >= 1".into()));
    }

    let mut centroids = seed_plus_plus(points, k, rng);
    let mut assignments = vec![usize::MAX; n];
    let mut history = Vec::new();

    for _ in 0..max_iters {
        let (changed, objective) = assign(points, &centroids, &mut assignments);
        history.push(objective);
        if !changed {
            break;
        }
        update(points, &assignments, &mut centroids);
    }
    let (_, objective) = assign(points, &centroids, &mut assignments);
    history.push(objective);

    Ok(KMeansResult {
        assignments,
        centroids,
        objective_history: history,
    })
}

/// Best of `restarts` independent runs by final objective.
pub fn kmeans_restarts<T: Real>(
    points: &DenseMatrix<T>,
    k: usize,
    max_iters: usize,
    restarts: usize,
    rng: &mut SeededRng,
) -> Result<KMeansResult<T>> {
    let mut best: Option<KMeansResult<T>> = None;
    for _ in 0..restarts.max(1) {
        let run = kmeans(points, k, max_iters, rng)?;
        if best.as_ref().is_none_or(|b| run.objective() < b.objective()) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one run"))
}

fn seed_plus_plus<T: Real>(points: &DenseMatrix<T>, k: usize, rng: &mut SeededRng) -> DenseMatrix<T> {
    let n = points.rows();
    let mut chosen = Vec::with_capacity(k);
    let mut is_chosen = vec![false; n];
    let first = rng.below(n);
    chosen.push(first);
    is_chosen[first] = true;
    let mut dist: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.row(i), points.row(first)).to_f64_lossy())
        .collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.next_f64() * total;
            let mut pick = None;
            for (i, &d) in dist.iter().enumerate() {
                if d > 0.0 && !is_chosen[i] {
                    pick = Some(i);
                    if u < d {
                        break;
                    }
                    u -= d;
                }
            }
            pick.expect("positive mass implies a candidate")
        } else {
            // every remaining point duplicates a centroid
            let free: Vec<usize> = (0..n).filter(|&i| !is_chosen[i]).collect();
            free[rng.below(free.len())]
        };
        chosen.push(next);
        is_chosen[next] = true;
        for (i, d) in dist.iter_mut().enumerate() {
            let nd = squared_distance(points.row(i), points.row(next)).to_f64_lossy();
            if nd < *d {
                *d = nd;
            }
        }
    }
    let mut centroids = DenseMatrix::zeros(k, points.cols());
    for (c, &i) in chosen.iter().enumerate() {
        centroids.row_mut(c).copy_from_slice(points.row(i));
    }
    centroids
}

fn nearest<T: Real>(point: &[T], centroids: &DenseMatrix<T>) -> (usize, T) {
    let mut best = (0, T::infinity());
    for c in 0..centroids.rows() {
        let d = squared_distance(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign<T: Real>(
    points: &DenseMatrix<T>,
    centroids: &DenseMatrix<T>,
    assignments: &mut [usize],
) -> (bool, T) {
    let mut changed = false;
    let mut objective = T::zero();
    for (i, slot) in assignments.iter_mut().enumerate() {
        let (c, d) = nearest(points.row(i), centroids);
        if *slot != c {
            *slot = c;
            changed = true;
        }
        objective += d;
    }
    (changed, objective)
}

fn update<T: Real>(points: &DenseMatrix<T>, assignments: &[usize], centroids: &mut DenseMatrix<T>) {
    let k = centroids.rows();
    let mut sums: DenseMatrix<T> = DenseMatrix::zeros(k, points.cols());
    let mut counts = vec![0usize; k];
    for (i, &c) in assignments.iter().enumerate() {
        counts[c] += 1;
        for (s, &x) in sums.row_mut(c).iter_mut().zip(points.row(i)) {
            *s += x;
        }
    }
    for c in 0..k {
        // an empty cluster keeps its previous centroid
        if counts[c] > 0 {
            let inv = T::one() / T::from_usize_lossy(counts[c]);
            for (dst, &s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                *dst = s * inv;
            }
        }
    }
}
