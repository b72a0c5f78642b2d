//! Fixed-capacity FIFO queues of unit-norm key embeddings.

use ndarray::{s, Array2, ArrayView2};

use crate::error::{Error, Result};

pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Fails unless every row of `m` has L2 norm `1 ± UNIT_NORM_TOL`.
pub fn check_unit_rows(what: &str, m: ArrayView2<f64>) -> Result<()> {
    for (i, row) in m.rows().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if !((n - 1.0).abs() <= UNIT_NORM_TOL) {
            return Err(Error::InvalidInput(format!(
                "{what} row {i} has norm {n}, expected unit norm"
            )));
        }
    }
    Ok(())
}

/// Id recorded for rows enqueued without an instance id.
pub const UNKNOWN_INSTANCE: i64 = -1;

#[derive(Debug, Clone, PartialEq)]
pub struct NegativeQueue {
    buffer: Array2<f64>,
    /// Source instance of each physical row.
    ids: Vec<i64>,
    write_ptr: usize,
    filled: usize,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "queue capacity and dimension must be positive (got {capacity}x{dim})"
            )));
        }
        Ok(Self {
            buffer: Array2::zeros((capacity, dim)),
            ids: vec![UNKNOWN_INSTANCE; capacity],
            write_ptr: 0,
            filled: 0,
        })
    }

    /// Rebuilds a queue from its serialised parts.
    pub fn from_parts(buffer: Array2<f64>, ids: Vec<i64>, write_ptr: usize, filled: usize) -> Result<Self> {
        let k = buffer.nrows();
        if k == 0 || ids.len() != k || write_ptr >= k || filled > k || (filled < k && write_ptr != filled) {
            return Err(Error::Corrupt(format!(
                "inconsistent queue state: capacity {k}, write_ptr {write_ptr}, filled {filled}"
            )));
        }
        Ok(Self {
            buffer,
            ids,
            write_ptr,
            filled,
        })
    }

    pub fn capacity(&self) -> usize {
        self.buffer.nrows()
    }

    pub fn dim(&self) -> usize {
        self.buffer.ncols()
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn write_ptr(&self) -> usize {
        self.write_ptr
    }

    pub fn is_empty(&self) -> bool {
        self.filled == 0
    }

    /// Raw ring storage (row-major, physical order).
    pub fn buffer(&self) -> &Array2<f64> {
        &self.buffer
    }

    /// Raw ring of instance ids, aligned with [`Self::buffer`].
    pub fn raw_ids(&self) -> &[i64] {
        &self.ids
    }

    /// Writes `batch` at the write pointer, overwriting the oldest rows.
    pub fn enqueue(&mut self, batch: ArrayView2<f64>) -> Result<()> {
        self.enqueue_with_ids(batch, &vec![UNKNOWN_INSTANCE; batch.nrows()])
    }

    /// As [`Self::enqueue`], recording the source instance of every row.
    pub fn enqueue_with_ids(&mut self, batch: ArrayView2<f64>, ids: &[i64]) -> Result<()> {
        let (b, k) = (batch.nrows(), self.capacity());
        if ids.len() != b {
            return Err(Error::Shape(format!("{} ids for {b} rows", ids.len())));
        }
        if batch.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "queue holds {}-d rows, batch has {}",
                self.dim(),
                batch.ncols()
            )));
        }
        if b > k {
            return Err(Error::InvalidInput(format!(
                "batch of {b} rows exceeds queue capacity {k}"
            )));
        }
        check_unit_rows("enqueued", batch)?;
        let first = b.min(k - self.write_ptr);
        self.buffer
            .slice_mut(s![self.write_ptr..self.write_ptr + first, ..])
            .assign(&batch.slice(s![..first, ..]));
        if first < b {
            self.buffer
                .slice_mut(s![..b - first, ..])
                .assign(&batch.slice(s![first.., ..]));
        }
        for (r, &id) in ids.iter().enumerate() {
            self.ids[(self.write_ptr + r) % k] = id;
        }
        self.write_ptr = (self.write_ptr + b) % k;
        self.filled = (self.filled + b).min(k);
        Ok(())
    }

    /// Instance ids of [`Self::snapshot`] rows, oldest first.
    pub fn snapshot_ids(&self) -> Vec<i64> {
        if self.filled < self.capacity() {
            return self.ids[..self.filled].to_vec();
        }
        let mut out = self.ids[self.write_ptr..].to_vec();
        out.extend_from_slice(&self.ids[..self.write_ptr]);
        out
    }

    /// Valid rows, oldest first, as an owned copy.
    pub fn snapshot(&self) -> Array2<f64> {
        if self.filled < self.capacity() {
            return self.buffer.slice(s![..self.filled, ..]).to_owned();
        }
        let mut out = Array2::zeros(self.buffer.raw_dim());
        let tail = self.capacity() - self.write_ptr;
        out.slice_mut(s![..tail, ..])
            .assign(&self.buffer.slice(s![self.write_ptr.., ..]));
        out.slice_mut(s![tail.., ..])
            .assign(&self.buffer.slice(s![..self.write_ptr, ..]));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn basis(i: usize) -> Array2<f64> {
        let mut m = Array2::zeros((1, 4));
        m[[0, i % 4]] = 1.0;
        m
    }

    fn rows(ids: &[usize]) -> Array2<f64> {
        let mut m = Array2::zeros((ids.len(), 4));
        for (r, &i) in ids.iter().enumerate() {
            // Distinct unit rows: rotate within the first two coordinates.
            let a = i as f64 * 0.3;
            m[[r, 0]] = a.cos();
            m[[r, 1]] = a.sin();
        }
        m
    }

    #[test]
    fn fifo_eviction() {
        let mut q = NegativeQueue::new(4, 4).unwrap();
        q.enqueue(rows(&[0, 1, 2, 3]).view()).unwrap();
        q.enqueue(rows(&[4, 5]).view()).unwrap();
        assert_eq!(q.snapshot(), rows(&[2, 3, 4, 5]));
    }

    #[test]
    fn fill_to_capacity() {
        let mut q = NegativeQueue::new(3, 4).unwrap();
        q.enqueue(rows(&[0, 1, 2]).view()).unwrap();
        assert_eq!(q.filled(), 3);
        assert_eq!(q.write_ptr(), 0);
    }

    #[test]
    fn rejects_non_unit_rows_and_oversized_batches() {
        let mut q = NegativeQueue::new(2, 4).unwrap();
        assert!(q.enqueue(basis(0).mapv(|v| v * 0.5).view()).is_err());
        assert!(q.enqueue(rows(&[0, 1, 2]).view()).is_err());
        assert!(q.enqueue(array![[1.0, 0.0]].view()).is_err());
        assert!(q.is_empty());
    }

    #[test]
    fn empty_snapshot_and_copy_semantics() {
        let mut q = NegativeQueue::new(4, 4).unwrap();
        assert_eq!(q.snapshot().dim(), (0, 4));
        q.enqueue(rows(&[0]).view()).unwrap();
        let snap = q.snapshot();
        q.enqueue(rows(&[1]).view()).unwrap();
        assert_eq!(snap, rows(&[0]));
    }

    #[test]
    fn parts_round_trip() {
        let mut q = NegativeQueue::new(3, 4).unwrap();
        q.enqueue(rows(&[0, 1]).view()).unwrap();
        q.enqueue(rows(&[2, 3]).view()).unwrap();
        let back = NegativeQueue::from_parts(q.buffer().clone(), q.raw_ids().to_vec(), q.write_ptr(), q.filled()).unwrap();
        assert_eq!(back, q);
        assert!(NegativeQueue::from_parts(Array2::zeros((3, 4)), vec![-1; 3], 1, 2).is_err());
        assert!(NegativeQueue::from_parts(Array2::zeros((3, 4)), vec![-1; 2], 0, 0).is_err());
    }

    #[test]
    fn ids_follow_rows() {
        let mut q = NegativeQueue::new(3, 4).unwrap();
        q.enqueue_with_ids(rows(&[0, 1]).view(), &[10, 11]).unwrap();
        q.enqueue_with_ids(rows(&[2, 3]).view(), &[12, 13]).unwrap();
        assert_eq!(q.snapshot_ids(), vec![11, 12, 13]);
        q.enqueue(rows(&[4]).view()).unwrap();
        assert_eq!(q.snapshot_ids(), vec![12, 13, UNKNOWN_INSTANCE]);
        assert!(q.enqueue_with_ids(rows(&[5]).view(), &[1, 2]).is_err());
    }
}
