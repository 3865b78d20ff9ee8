//! Lloyd's k-means with a fixed iteration budget.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::stream_rng;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub dim: usize,
    /// Row-major `k × dim`.
    pub centroids: Vec<f64>,
    /// Cluster of each input row, consistent with `centroids`.
    pub assignment: Vec<usize>,
}

impl KMeansResult {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lower index.
fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = dist2(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Clusters the `n × dim` row-major `data` into `k` groups.
///
/// Centroids start at `k` distinct rows picked by a seeded shuffle and are
/// refined for exactly `iters` rounds. A cluster left empty by an update is
/// re-seeded at the row farthest from its own centroid.
pub fn kmeans(data: &[f64], dim: usize, k: usize, iters: usize, seed: u64) -> Result<KMeansResult> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(Error::Shape("k-means data is not a whole number of rows".into()));
    }
    let n = data.len() / dim;
    if k == 0 {
        return Err(Error::Config("k-means needs at least one cluster".into()));
    }
    if n < k {
        return Err(Error::TooFewEntries { k, available: n });
    }
    let row = |i: usize| &data[i * dim..(i + 1) * dim];

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, "kmeans-init", &[]));
    let mut centroids: Vec<f64> = order[..k].iter().flat_map(|&i| row(i).to_vec()).collect();
    let mut assignment = vec![0usize; n];

    let assign = |centroids: &[f64], assignment: &mut [usize]| {
        for (i, a) in assignment.iter_mut().enumerate() {
            *a = nearest(row(i), centroids, dim).0;
        }
    };

    for _ in 0..iters {
        assign(&centroids, &mut assignment);
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignment.iter().enumerate() {
            counts[a] += 1;
            for (s, x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(row(i)) {
                *s += x;
            }
        }
        let mut empty = Vec::new();
        for j in 0..k {
            if counts[j] == 0 {
                empty.push(j);
                continue;
            }
            for (c, s) in centroids[j * dim..(j + 1) * dim]
                .iter_mut()
                .zip(&sums[j * dim..(j + 1) * dim])
            {
                *c = s / counts[j] as f64;
            }
        }
        if !empty.is_empty() {
            let mut spread: Vec<(f64, usize)> = (0..n)
                .map(|i| {
                    let a = assignment[i];
                    (dist2(row(i), &centroids[a * dim..(a + 1) * dim]), i)
                })
                .collect();
            spread.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for (j, &(_, i)) in empty.iter().zip(&spread) {
                centroids[j * dim..(j + 1) * dim].copy_from_slice(row(i));
            }
        }
    }
    assign(&centroids, &mut assignment);
    Ok(KMeansResult {
        dim,
        centroids,
        assignment,
    })
}
