//! Fixed-capacity FIFO queue of key-encoder features used as negatives.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embedding::{norm, EmbeddingMatrix, UNIT_TOLERANCE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BankInit {
    /// Full bank of seeded random unit rows.
    Random(u64),
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    rows: Vec<f64>,
    cursor: usize,
    occupancy: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize, init: BankInit) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::BadShape(format!(
                "bank needs capacity and dim >= 1, got {capacity}x{dim}"
            )));
        }
        let mut rows = vec![0.0; capacity * dim];
        let occupancy = match init {
            BankInit::Empty => 0,
            BankInit::Random(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for row in rows.chunks_exact_mut(dim) {
                    loop {
                        for v in row.iter_mut() {
                            *v = StandardNormal.sample(&mut rng);
                        }
                        let n = norm(row);
                        if n > 1e-6 {
                            row.iter_mut().for_each(|v| *v /= n);
                            break;
                        }
                    }
                }
                capacity
            }
        };
        Ok(Self {
            capacity,
            dim,
            rows,
            cursor: 0,
            occupancy,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn occupancy(&self) -> usize {
        self.occupancy
    }

    /// Slot the next enqueued row will be written to.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Writes `keys` at the cursor, wrapping around and overwriting the
    /// oldest rows once full.
    pub fn enqueue(&mut self, keys: &EmbeddingMatrix) -> Result<()> {
        if keys.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: keys.dim(),
            });
        }
        if keys.rows() > self.capacity {
            return Err(Error::BatchTooLarge {
                batch: keys.rows(),
                capacity: self.capacity,
            });
        }
        for r in keys.iter_rows() {
            let n = norm(r);
            if (n - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::NotNormalized { norm: n });
            }
        }
        for r in keys.iter_rows() {
            let at = self.cursor * self.dim;
            self.rows[at..at + self.dim].copy_from_slice(r);
            self.cursor = (self.cursor + 1) % self.capacity;
        }
        self.occupancy = (self.occupancy + keys.rows()).min(self.capacity);
        Ok(())
    }

    /// Snapshot of the occupied rows in storage order.
    ///
    /// Rows fill slots `0..occupancy` before the first wraparound, so the
    /// occupied region is always a prefix of storage.
    pub fn negatives_view(&self) -> EmbeddingMatrix {
        EmbeddingMatrix::from_normalized_unchecked(
            self.occupancy,
            self.dim,
            self.rows[..self.occupancy * self.dim].to_vec(),
        )
    }
}
