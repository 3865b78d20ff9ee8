//! Inverted-file index with product-quantized residuals.
//!
//! Rows are assigned to the nearest of `ncluster` coarse centroids. With
//! `m > 0` sub-quantizers, the residual `row − centroid` is split into `m`
//! contiguous sub-vectors and each is replaced by the one-byte id of its
//! nearest sub-codebook entry. Queries scan the `nprobe` closest clusters
//! and score codes by asymmetric distance computation: a per-query lookup
//! table of squared distances from the query residual to every sub-codebook
//! entry, summed over sub-spaces.
//!
//! `m = 0` disables quantization; postings then hold the unquantized rows
//! and distances are exact.

use super::kmeans::kmeans;
use super::{select_k, sq_dist, Datastore, Neighbor};
use crate::error::{Error, Result};
use crate::rng::stream_seed;

/// Sub-codebook size cap, so that codes fit in a byte.
pub const MAX_KSUB: usize = 256;

/// `m` codebooks of `ksub` centroids, each of dimension `dim / m`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductQuantizer {
    dim: usize,
    m: usize,
    ksub: usize,
    /// `m × ksub × (dim/m)`, row-major.
    codebooks: Vec<f32>,
}

impl ProductQuantizer {
    pub fn new(dim: usize, m: usize, ksub: usize, codebooks: Vec<f32>) -> Result<Self> {
        if m == 0 || !dim.is_multiple_of(m) {
            return Err(Error::Config(format!("m = {m} must divide dimension {dim}")));
        }
        if ksub == 0 || ksub > MAX_KSUB {
            return Err(Error::Config(format!("ksub = {ksub} outside 1..=256")));
        }
        if codebooks.len() != dim * ksub {
            return Err(Error::Shape("codebook size does not match m·ksub·dsub".into()));
        }
        Ok(ProductQuantizer {
            dim,
            m,
            ksub,
            codebooks,
        })
    }

    /// Trains one k-means per sub-space over `n × dim` residuals.
    pub fn train(residuals: &[f64], dim: usize, m: usize, iters: usize, seed: u64) -> Result<Self> {
        if m == 0 || !dim.is_multiple_of(m) {
            return Err(Error::Config(format!("m = {m} must divide dimension {dim}")));
        }
        let n = residuals.len() / dim;
        let dsub = dim / m;
        let ksub = n.min(MAX_KSUB);
        let mut codebooks = Vec::with_capacity(dim * ksub);
        for j in 0..m {
            let sub: Vec<f64> = residuals
                .chunks_exact(dim)
                .flat_map(|r| r[j * dsub..(j + 1) * dsub].iter().copied())
                .collect();
            let km = kmeans(&sub, dsub, ksub, iters, stream_seed(seed, "pq", &[j as u64]))?;
            codebooks.extend(km.centroids.iter().map(|&c| c as f32));
        }
        Self::new(dim, m, ksub, codebooks)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn ksub(&self) -> usize {
        self.ksub
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn codebooks(&self) -> &[f32] {
        &self.codebooks
    }

    fn dsub(&self) -> usize {
        self.dim / self.m
    }

    fn entry(&self, j: usize, c: usize) -> &[f32] {
        let dsub = self.dsub();
        let start = (j * self.ksub + c) * dsub;
        &self.codebooks[start..start + dsub]
    }

    /// Nearest codebook entry per sub-space.
    pub fn encode(&self, residual: &[f64]) -> Vec<u8> {
        let dsub = self.dsub();
        (0..self.m)
            .map(|j| {
                let part = &residual[j * dsub..(j + 1) * dsub];
                let mut best = (0usize, f64::INFINITY);
                for c in 0..self.ksub {
                    let d = sq_dist(part, self.entry(j, c));
                    if d < best.1 {
                        best = (c, d);
                    }
                }
                best.0 as u8
            })
            .collect()
    }

    /// `table[j·ksub + c] = ‖residual_j − codebook_j[c]‖²`.
    pub fn distance_table(&self, residual: &[f64]) -> Vec<f64> {
        let dsub = self.dsub();
        let mut table = Vec::with_capacity(self.m * self.ksub);
        for j in 0..self.m {
            let part = &residual[j * dsub..(j + 1) * dsub];
            for c in 0..self.ksub {
                table.push(sq_dist(part, self.entry(j, c)));
            }
        }
        table
    }

    /// Approximate squared distance of a code under a lookup table.
    pub fn adc_distance(&self, table: &[f64], code: &[u8]) -> f64 {
        code.iter()
            .enumerate()
            .map(|(j, &c)| table[j * self.ksub + c as usize])
            .sum()
    }
}

/// One coarse cluster's postings.
#[derive(Clone, Debug, Default, PartialEq)]
pub(crate) struct InvertedList {
    pub(crate) rows: Vec<u32>,
    pub(crate) values: Vec<u32>,
    /// `m` bytes per row when quantized.
    pub(crate) codes: Vec<u8>,
    /// `dim` floats per row when not quantized.
    pub(crate) raw: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IvfPqIndex {
    pub(crate) dim: usize,
    /// Row-major `ncluster × dim`.
    pub(crate) centroids: Vec<f32>,
    pub(crate) lists: Vec<InvertedList>,
    pub(crate) pq: Option<ProductQuantizer>,
}

impl IvfPqIndex {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ncluster(&self) -> usize {
        self.lists.len()
    }

    pub fn len(&self) -> usize {
        self.lists.iter().map(|l| l.rows.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pq(&self) -> Option<&ProductQuantizer> {
        self.pq.as_ref()
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    /// Coarse cluster of every datastore row, indexed by row.
    pub fn assignment(&self) -> Vec<usize> {
        let mut out = vec![usize::MAX; self.len()];
        for (c, list) in self.lists.iter().enumerate() {
            for &r in &list.rows {
                out[r as usize] = c;
            }
        }
        out
    }

    /// Rows of cluster `c`, in insertion order.
    pub fn list_rows(&self, c: usize) -> &[u32] {
        &self.lists[c].rows
    }
}

/// Builds an IVF index over `store`; `m = 0` keeps raw vectors.
pub fn build_ivfpq(
    store: &Datastore,
    ncluster: usize,
    m: usize,
    kmeans_iters: usize,
    seed: u64,
) -> Result<IvfPqIndex> {
    let dim = store.dim();
    if ncluster == 0 {
        return Err(Error::Config("ncluster must be positive".into()));
    }
    if store.len() < ncluster {
        return Err(Error::TooFewEntries {
            k: ncluster,
            available: store.len(),
        });
    }
    if m > 0 && !dim.is_multiple_of(m) {
        return Err(Error::Config(format!("m = {m} must divide dimension {dim}")));
    }
    let data: Vec<f64> = store.keys().iter().map(|&x| f64::from(x)).collect();
    let coarse = kmeans(&data, dim, ncluster, kmeans_iters, stream_seed(seed, "coarse", &[]))?;
    let centroids: Vec<f32> = coarse.centroids.iter().map(|&c| c as f32).collect();

    let residual = |row: usize, cluster: usize| -> Vec<f64> {
        let c = &centroids[cluster * dim..(cluster + 1) * dim];
        data[row * dim..(row + 1) * dim]
            .iter()
            .zip(c)
            .map(|(&x, &c)| x - f64::from(c))
            .collect()
    };

    let pq = if m > 0 {
        let residuals: Vec<f64> = (0..store.len())
            .flat_map(|r| residual(r, coarse.assignment[r]))
            .collect();
        Some(ProductQuantizer::train(&residuals, dim, m, kmeans_iters, seed)?)
    } else {
        None
    };

    let mut lists = vec![InvertedList::default(); ncluster];
    for (row, &cluster) in coarse.assignment.iter().enumerate() {
        let list = &mut lists[cluster];
        list.rows.push(row as u32);
        list.values.push(store.values()[row]);
        match &pq {
            Some(pq) => list.codes.extend(pq.encode(&residual(row, cluster))),
            None => list.raw.extend_from_slice(store.key(row)),
        }
    }
    Ok(IvfPqIndex {
        dim,
        centroids,
        lists,
        pq,
    })
}

/// Approximate `k` nearest rows, scanning the `nprobe` closest clusters.
///
/// Returns fewer than `k` rows when the probed clusters hold fewer.
pub fn approx_knn(index: &IvfPqIndex, query: &[f64], k: usize, nprobe: usize) -> Result<Vec<Neighbor>> {
    if index.is_empty() {
        return Err(Error::Empty("IVF index"));
    }
    if query.len() != index.dim {
        return Err(Error::Shape(format!(
            "query has dimension {}, index {}",
            query.len(),
            index.dim
        )));
    }
    if nprobe == 0 || nprobe > index.ncluster() {
        return Err(Error::Config(format!(
            "nprobe = {nprobe} outside 1..={}",
            index.ncluster()
        )));
    }
    let mut probes: Vec<(f64, usize)> = (0..index.ncluster())
        .map(|c| (sq_dist(query, index.centroid(c)), c))
        .collect();
    probes.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut found = Vec::new();
    for &(_, c) in &probes[..nprobe] {
        let list = &index.lists[c];
        match &index.pq {
            Some(pq) => {
                let centroid = index.centroid(c);
                let res: Vec<f64> = query
                    .iter()
                    .zip(centroid)
                    .map(|(&q, &c)| q - f64::from(c))
                    .collect();
                let table = pq.distance_table(&res);
                for (i, code) in list.codes.chunks_exact(pq.m()).enumerate() {
                    found.push(Neighbor {
                        row: list.rows[i] as usize,
                        dist: pq.adc_distance(&table, code),
                        value: list.values[i],
                    });
                }
            }
            None => {
                for (i, raw) in list.raw.chunks_exact(index.dim).enumerate() {
                    found.push(Neighbor {
                        row: list.rows[i] as usize,
                        dist: sq_dist(query, raw),
                        value: list.values[i],
                    });
                }
            }
        }
    }
    Ok(select_k(found, k))
}
