//! Dense storage and index algebra for low-rank tensors in dimension 1 or 2.
//!
//! Coordinate tensors in this crate have rank at most six and live either at
//! a single point (`Tab`) or over a whole grid (`TensorField`, one contiguous
//! block per point). All components are stored densely; with `n <= 2` and
//! rank `<= 6` a block never exceeds 64 entries, so no sparsity or symmetry
//! compression is worth its complexity.
//!
//! Symmetrization is performed by explicit averaging over permutations of
//! the selected index positions. This is the reference semantics every
//! formula in the crate is written against; no weight shortcuts are taken.

use itertools::Itertools;

/// Flat offset of multi-index `idx` in an `n`-ary tensor block (row-major).
pub fn flat_index(n: usize, idx: &[usize]) -> usize {
    let mut f = 0;
    for &i in idx {
        debug_assert!(i < n);
        f = f * n + i;
    }
    f
}

/// Visit every multi-index of the given rank in row-major order.
pub fn for_each_index(n: usize, rank: usize, mut f: impl FnMut(&[usize])) {
    let mut idx = vec![0usize; rank];
    loop {
        f(&idx);
        // Odometer increment; returns when all indices have wrapped.
        let mut pos = rank;
        loop {
            if pos == 0 {
                return;
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < n {
                break;
            }
            idx[pos] = 0;
        }
    }
}

/// Average a block over all permutations of the given index positions.
///
/// `block` is a dense rank-`rank` tensor over `n` values per index. The
/// positions slice selects which index slots participate; all others are
/// held fixed.
pub fn symmetrize_block(n: usize, rank: usize, block: &mut [f64], positions: &[usize]) {
    assert_eq!(block.len(), n.pow(rank as u32), "block size mismatch");
    if positions.len() < 2 {
        return;
    }
    let perms: Vec<Vec<usize>> = (0..positions.len()).permutations(positions.len()).collect();
    let weight = 1.0 / perms.len() as f64;
    let mut out = vec![0.0; block.len()];
    let mut permuted = vec![0usize; rank];
    for_each_index(n, rank, |idx| {
        let mut acc = 0.0;
        for perm in &perms {
            permuted.copy_from_slice(idx);
            for (slot, &src) in perm.iter().enumerate() {
                permuted[positions[slot]] = idx[positions[src]];
            }
            acc += block[flat_index(n, &permuted)];
        }
        out[flat_index(n, idx)] = acc * weight;
    });
    block.copy_from_slice(&out);
}

/// Dense tensor block at a single point.
#[derive(Debug, Clone, PartialEq)]
pub struct Tab {
    n: usize,
    rank: usize,
    a: Vec<f64>,
}

impl Tab {
    /// Zero tensor of the given rank.
    pub fn zeros(n: usize, rank: usize) -> Tab {
        Tab {
            n,
            rank,
            a: vec![0.0; n.pow(rank as u32)],
        }
    }

    /// Build from a function of the multi-index.
    pub fn from_fn(n: usize, rank: usize, f: impl Fn(&[usize]) -> f64) -> Tab {
        let mut t = Tab::zeros(n, rank);
        for_each_index(n, rank, |idx| {
            let v = f(idx);
            t.a[flat_index(n, idx)] = v;
        });
        t
    }

    /// Index dimension.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Tensor rank.
    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Component at `idx`.
    pub fn at(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.rank);
        self.a[flat_index(self.n, idx)]
    }

    /// Set component at `idx`.
    pub fn set(&mut self, idx: &[usize], v: f64) {
        debug_assert_eq!(idx.len(), self.rank);
        let f = flat_index(self.n, idx);
        self.a[f] = v;
    }

    /// Add to component at `idx`.
    pub fn add_at(&mut self, idx: &[usize], v: f64) {
        let f = flat_index(self.n, idx);
        self.a[f] += v;
    }

    /// Raw components, row-major.
    pub fn raw(&self) -> &[f64] {
        &self.a
    }

    /// Mutable raw components.
    pub fn raw_mut(&mut self) -> &mut [f64] {
        &mut self.a
    }

    /// Symmetrize over all index positions.
    pub fn symmetrize_all(&mut self) {
        let positions: Vec<usize> = (0..self.rank).collect();
        symmetrize_block(self.n, self.rank, &mut self.a, &positions);
    }

    /// Symmetrize over the given index positions.
    pub fn symmetrize(&mut self, positions: &[usize]) {
        symmetrize_block(self.n, self.rank, &mut self.a, positions);
    }

    /// Largest absolute component.
    pub fn max_abs(&self) -> f64 {
        self.a.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute difference to another tensor of the same shape.
    pub fn distance(&self, other: &Tab) -> f64 {
        assert_eq!(self.n, other.n);
        assert_eq!(self.rank, other.rank);
        self.a
            .iter()
            .zip(&other.a)
            .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }
}

/// Tensor field over a grid: one dense rank-`rank` block per point.
#[derive(Debug, Clone)]
pub struct TensorField {
    n: usize,
    rank: usize,
    npts: usize,
    data: Vec<f64>,
}

impl TensorField {
    /// Zero field.
    pub fn zeros(npts: usize, n: usize, rank: usize) -> TensorField {
        TensorField {
            n,
            rank,
            npts,
            data: vec![0.0; npts * n.pow(rank as u32)],
        }
    }

    /// Build from a function of (point, multi-index).
    pub fn from_fn(npts: usize, n: usize, rank: usize, f: impl Fn(usize, &[usize]) -> f64) -> TensorField {
        let mut t = TensorField::zeros(npts, n, rank);
        let block = n.pow(rank as u32);
        for p in 0..npts {
            for_each_index(n, rank, |idx| {
                t.data[p * block + flat_index(n, idx)] = f(p, idx);
            });
        }
        t
    }

    /// Index dimension.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Tensor rank.
    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Number of grid points.
    pub fn len(&self) -> usize {
        self.npts
    }

    /// True when the field covers no points.
    pub fn is_empty(&self) -> bool {
        self.npts == 0
    }

    /// Component at point `p`, multi-index `idx`.
    pub fn at(&self, p: usize, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.rank);
        self.data[p * self.block_len() + flat_index(self.n, idx)]
    }

    /// Set component at point `p`, multi-index `idx`.
    pub fn set(&mut self, p: usize, idx: &[usize], v: f64) {
        let b = self.block_len();
        self.data[p * b + flat_index(self.n, idx)] = v;
    }

    /// Dense block at point `p`.
    pub fn block(&self, p: usize) -> &[f64] {
        let b = self.block_len();
        &self.data[p * b..(p + 1) * b]
    }

    /// Extract the block at point `p` as a `Tab`.
    pub fn tab(&self, p: usize) -> Tab {
        Tab {
            n: self.n,
            rank: self.rank,
            a: self.block(p).to_vec(),
        }
    }

    /// Overwrite the block at point `p`.
    pub fn set_tab(&mut self, p: usize, t: &Tab) {
        assert_eq!(t.n, self.n);
        assert_eq!(t.rank, self.rank);
        let b = self.block_len();
        self.data[p * b..(p + 1) * b].copy_from_slice(&t.a);
    }

    /// Scalar component field for a fixed multi-index, one value per point.
    pub fn component(&self, idx: &[usize]) -> Vec<f64> {
        let off = flat_index(self.n, idx);
        let b = self.block_len();
        (0..self.npts).map(|p| self.data[p * b + off]).collect()
    }

    /// Symmetrize every block over the given index positions.
    pub fn symmetrize(&mut self, positions: &[usize]) {
        let b = self.block_len();
        for p in 0..self.npts {
            symmetrize_block(self.n, self.rank, &mut self.data[p * b..(p + 1) * b], positions);
        }
    }

    /// Largest absolute component over all points.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn block_len(&self) -> usize {
        self.n.pow(self.rank as u32)
    }
}
