use super::{Dataset, Labels};
use crate::error::{ensure, Result};
use crate::rng::Rng;
use crate::tensor::Tensor4;

/// Example order for one epoch: a permutation drawn from a stream keyed by
/// `(seed, epoch)`, so each epoch reshuffles and any epoch can be replayed.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::stream(seed, epoch).shuffle(&mut order);
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Tensor4<f32>,
    pub labels: Labels,
}

/// Consecutive batches over one epoch's order; the last one may be short.
pub struct BatchIter<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<'a> BatchIter<'a> {
    pub fn new(data: &'a Dataset, batch_size: usize, seed: u64, epoch: u64) -> Result<Self> {
        ensure!(batch_size >= 1, Config, "batch size must be >= 1");
        Ok(Self {
            data,
            order: epoch_order(data.len(), seed, epoch),
            batch_size,
            pos: 0,
        })
    }

    /// Dataset order, no shuffling.
    pub fn sequential(data: &'a Dataset, batch_size: usize) -> Result<Self> {
        ensure!(batch_size >= 1, Config, "batch size must be >= 1");
        Ok(Self {
            data,
            order: (0..data.len()).collect(),
            batch_size,
            pos: 0,
        })
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(self.data.images.gather(&indices).map(|images| Batch {
            labels: self.data.labels.gather(&indices),
            images,
            indices,
        }))
    }
}
