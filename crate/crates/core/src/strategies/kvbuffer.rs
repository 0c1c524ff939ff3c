use crate::error::Result;
use crate::tensor::Tensor;

/// Keys and values for every sequence row over one column scope, with the
/// diffusion step that last wrote each row.
#[derive(Debug, Clone, PartialEq)]
pub struct KvBuffer {
    pub k: Tensor,
    pub v: Tensor,
    stamps: Vec<Option<usize>>,
}

impl KvBuffer {
    pub fn new(rows: usize, width: usize) -> Self {
        Self {
            k: Tensor::zeros(&[rows, width]),
            v: Tensor::zeros(&[rows, width]),
            stamps: vec![None; rows],
        }
    }

    /// Writes `k`/`v` row `i` into buffer row `rows[i]`, stamped `step`.
    pub fn write(&mut self, rows: &[usize], k: &Tensor, v: &Tensor, step: usize) -> Result<()> {
        self.k.scatter_rows(rows, k)?;
        self.v.scatter_rows(rows, v)?;
        for &r in rows {
            self.stamps[r] = Some(step);
        }
        Ok(())
    }

    pub fn stamp(&self, row: usize) -> Option<usize> {
        self.stamps[row]
    }

    /// Oldest and newest stamp over `rows`; `None` if any row is unwritten.
    pub fn stamp_range(&self, rows: &[usize]) -> Option<(usize, usize)> {
        let mut lo = usize::MAX;
        let mut hi = 0;
        for &r in rows {
            let s = self.stamps[r]?;
            lo = lo.min(s);
            hi = hi.max(s);
        }
        Some((lo, hi))
    }

    pub fn bytes(&self, element_size: usize) -> u64 {
        self.k.bytes(element_size) + self.v.bytes(element_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_and_stamp() {
        let mut b = KvBuffer::new(4, 2);
        assert_eq!(b.stamp_range(&[0]), None);
        let k = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        b.write(&[3, 1], &k, &k.scale(2.0), 7).unwrap();
        assert_eq!(b.k.row(3), &[1.0, 2.0]);
        assert_eq!(b.v.row(1), &[6.0, 8.0]);
        b.write(&[1], &k.slice_rows(0..1), &k.slice_rows(0..1), 6).unwrap();
        assert_eq!(b.stamp_range(&[1, 3]), Some((6, 7)));
        assert_eq!(b.bytes(8), 128);
    }
}
