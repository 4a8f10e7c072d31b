//! In-memory datasets, the IDX codec, synthetic blobs, Dirichlet non-IID
//! client partitioning and the proxy/test split.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::model::Batch;
use crate::rng::RngStream;

pub mod idx;

/// Row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    input_dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        inputs: Vec<f64>,
        labels: Vec<usize>,
        input_dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 {
            return Err(Error::invalid("input_dim and num_classes must be positive"));
        }
        if inputs.len() != labels.len() * input_dim {
            return Err(Error::invalid(format!(
                "{} input values for {} samples of dimension {input_dim}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!(
                "label {y} >= num_classes {num_classes}"
            )));
        }
        if inputs.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("dataset inputs must be finite"));
        }
        Ok(Dataset {
            inputs,
            labels,
            input_dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn input_rows(&self, start: usize, end: usize) -> &[f64] {
        &self.inputs[start * self.input_dim..end * self.input_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn as_batch(&self) -> Result<Batch<'_>> {
        Batch::new(&self.inputs, &self.labels, self.input_dim)
    }

    /// Copy of the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut inputs = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.input(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            inputs,
            labels,
            input_dim: self.input_dim,
            num_classes: self.num_classes,
        }
    }

    /// Sample positions grouped by class, ascending within each class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// The positions of one client's local samples inside the training set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientShard {
    pub client_id: usize,
    pub indices: Vec<usize>,
}

impl ClientShard {
    pub fn new(client_id: usize, indices: Vec<usize>) -> Self {
        ClientShard { client_id, indices }
    }

    /// `N_k`.
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Deterministic unit-norm center of class `class` in `dim` dimensions.
///
/// Centers depend only on `(class, dim)`, so train and test sets generated
/// from different streams share them.
pub fn class_center(class: usize, dim: usize) -> Vec<f64> {
    const CENTER_SEED: u64 = 0x00C3_A55C_E47E_0001;
    let mut stream = RngStream::new(CENTER_SEED, class as u64);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| stream.normal()).collect();
        let norm = math::sqrt(math::dot_slices(&v, &v));
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Balanced Gaussian blobs: `per_class` samples of `μ_c + spread · N(0, I)`
/// for every class, in class-major order.
pub fn gen_synthetic(
    num_classes: usize,
    input_dim: usize,
    per_class: usize,
    spread: f64,
    stream: &mut RngStream,
) -> Result<Dataset> {
    if num_classes == 0 || input_dim == 0 || per_class == 0 {
        return Err(Error::invalid("synthetic dataset sizes must be positive"));
    }
    if !(spread >= 0.0) || !spread.is_finite() {
        return Err(Error::invalid(
            "spread must be a finite non-negative number",
        ));
    }
    let mut inputs = Vec::with_capacity(num_classes * per_class * input_dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for c in 0..num_classes {
        let center = class_center(c, input_dim);
        for _ in 0..per_class {
            for &m in &center {
                let noise = if spread == 0.0 {
                    0.0
                } else {
                    spread * stream.normal()
                };
                inputs.push(m + noise);
            }
            labels.push(c);
        }
    }
    Dataset::new(inputs, labels, input_dim, num_classes)
}

pub const PARTITION_ATTEMPTS: usize = 100;

/// Splits `data` across `k` clients with per-class Dirichlet(`alpha`·1)
/// proportions.
///
/// Each class's indices are shuffled and cut at the cumulative proportions.
/// A draw whose smallest shard has fewer than `min_per_client` samples is
/// discarded and the whole partition redrawn, up to [`PARTITION_ATTEMPTS`]
/// times. Shard indices are returned sorted.
pub fn dirichlet_partition(
    data: &Dataset,
    k: usize,
    alpha: f64,
    min_per_client: usize,
    stream: &mut RngStream,
) -> Result<Vec<ClientShard>> {
    if k == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!(
            "D_alpha must be positive, got {alpha}"
        )));
    }
    let by_class = data.class_indices();
    let mut best_smallest = 0;
    for _ in 0..PARTITION_ATTEMPTS {
        let mut shards: Vec<Vec<usize>> = vec![Vec::new(); k];
        for class in &by_class {
            let mut idx = class.clone();
            stream.shuffle(&mut idx);
            let props = stream.dirichlet_symmetric(alpha, k)?;
            let n = idx.len();
            let mut start = 0;
            let mut cum = 0.0;
            for (client, p) in props.iter().enumerate() {
                let end = if client + 1 == k {
                    n
                } else {
                    cum += p;
                    ((cum * n as f64) as usize).clamp(start, n)
                };
                shards[client].extend_from_slice(&idx[start..end]);
                start = end;
            }
        }
        let smallest = shards.iter().map(Vec::len).min().unwrap_or(0);
        if smallest >= min_per_client {
            return Ok(shards
                .into_iter()
                .enumerate()
                .map(|(id, mut indices)| {
                    indices.sort_unstable();
                    ClientShard::new(id, indices)
                })
                .collect());
        }
        best_smallest = best_smallest.max(smallest);
    }
    Err(Error::PartitionInfeasible {
        attempts: PARTITION_ATTEMPTS,
        smallest: best_smallest,
    })
}

/// Result of [`split_proxy`]: the proxy set for FedLAW and the disjoint
/// remainder used as the final test set, with their source positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxySplit {
    pub proxy: Dataset,
    pub final_test: Dataset,
    pub proxy_indices: Vec<usize>,
    pub final_test_indices: Vec<usize>,
}

/// Draws exactly `per_class` samples of every class from `test` as the
/// proxy set; everything else becomes the final test set.
pub fn split_proxy(test: &Dataset, per_class: usize, stream: &mut RngStream) -> Result<ProxySplit> {
    let by_class = test.class_indices();
    if let Some((c, have)) = by_class
        .iter()
        .map(Vec::len)
        .enumerate()
        .find(|&(_, n)| n < per_class)
    {
        return Err(Error::invalid(format!(
            "class {c} has {have} test samples, fewer than the {per_class} requested for the proxy set"
        )));
    }
    let mut in_proxy = vec![false; test.len()];
    let mut proxy_indices = Vec::with_capacity(per_class * by_class.len());
    for class in &by_class {
        let mut idx = class.clone();
        stream.shuffle(&mut idx);
        for &i in &idx[..per_class] {
            in_proxy[i] = true;
            proxy_indices.push(i);
        }
    }
    let final_test_indices: Vec<usize> = (0..test.len()).filter(|&i| !in_proxy[i]).collect();
    Ok(ProxySplit {
        proxy: test.subset(&proxy_indices),
        final_test: test.subset(&final_test_indices),
        proxy_indices,
        final_test_indices,
    })
}
