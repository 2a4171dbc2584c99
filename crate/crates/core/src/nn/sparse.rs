//! Sparse adjacency, destination-row edge partitioning, and the single
//! aggregation kernel every layer kind reduces to: per destination row,
//! a coefficient-weighted sum over in-edge sources plus an optional self
//! term. Rows never span two partitions, each row is evaluated in
//! ascending source order, and accumulation is in f64, so the output is
//! bitwise identical for every partition count.

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

use super::{NnError, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjEntry<T> {
    pub dst: u32,
    pub src: u32,
    pub weight: T,
}

/// Sparse adjacency over batch rows, entries sorted by (dst, src) with
/// precomputed row offsets.
#[derive(Debug, Clone)]
pub struct SparseAdj<T> {
    rows: usize,
    entries: Vec<AdjEntry<T>>,
    offsets: Vec<usize>,
}

impl<T: Scalar> SparseAdj<T> {
    pub fn new(rows: usize, entries: Vec<AdjEntry<T>>) -> Result<Self, NnError> {
        for pair in entries.windows(2) {
            if (pair[0].dst, pair[0].src) >= (pair[1].dst, pair[1].src) {
                return Err(NnError::SchemaError(
                    "adjacency entries not sorted by (dst, src)".into(),
                ));
            }
        }
        if let Some(e) = entries
            .iter()
            .find(|e| e.dst as usize >= rows || e.src as usize >= rows)
        {
            return Err(NnError::SchemaError(format!(
                "entry ({}, {}) outside {rows} rows",
                e.dst, e.src
            )));
        }
        let mut offsets = vec![0usize; rows + 1];
        for e in &entries {
            offsets[e.dst as usize + 1] += 1;
        }
        for r in 0..rows {
            offsets[r + 1] += offsets[r];
        }
        Ok(SparseAdj {
            rows,
            entries,
            offsets,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn entries(&self) -> &[AdjEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn row_range(&self, row: usize) -> Range<usize> {
        self.offsets[row]..self.offsets[row + 1]
    }

    pub fn row_entries(&self, row: usize) -> &[AdjEntry<T>] {
        &self.entries[self.row_range(row)]
    }

    pub fn cast<U: Scalar>(&self) -> SparseAdj<U> {
        SparseAdj {
            rows: self.rows,
            entries: self
                .entries
                .iter()
                .map(|e| AdjEntry {
                    dst: e.dst,
                    src: e.src,
                    weight: U::from_f64(e.weight.as_f64()),
                })
                .collect(),
            offsets: self.offsets.clone(),
        }
    }
}

/// Split of a sparse adjacency into `t` contiguous spans of whole
/// destination rows, balanced by entry count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgePartition {
    pub entry_ranges: Vec<Range<usize>>,
    pub row_ranges: Vec<Range<usize>>,
}

impl EdgePartition {
    pub fn parts(&self) -> usize {
        self.row_ranges.len()
    }
}

/// Greedy balance: close a part once it reaches ceil(total/t) entries, so
/// parts differ by at most one row's degree. Later parts may be empty when
/// t exceeds the number of occupied rows.
pub fn partition_edges<T: Scalar>(a: &SparseAdj<T>, t: usize) -> EdgePartition {
    let t = t.max(1);
    let target = a.len().div_ceil(t).max(1);
    let mut entry_ranges = Vec::with_capacity(t);
    let mut row_ranges = Vec::with_capacity(t);
    let mut row = 0usize;
    for p in 0..t {
        let row_start = row;
        if p == t - 1 {
            row = a.rows;
        } else {
            let mut acc = 0usize;
            while row < a.rows && acc < target {
                acc += a.row_range(row).len();
                row += 1;
            }
        }
        row_ranges.push(row_start..row);
        entry_ranges.push(a.offsets[row_start]..a.offsets[row]);
    }
    EdgePartition {
        entry_ranges,
        row_ranges,
    }
}

/// Per-entry and optional per-row-self coefficients for one aggregation.
/// GCN supplies normalized edge weights (self-loops are entries), SAGE
/// supplies 1/in-degree with a unit self term, GAT supplies attention
/// weights for entries and self.
#[derive(Debug, Clone, Copy)]
pub struct AggCoeffs<'a, T> {
    pub entry: &'a [T],
    pub self_coeff: Option<&'a [T]>,
}

fn check_shapes<T: Scalar>(
    a: &SparseAdj<T>,
    part: &EdgePartition,
    h: &ArrayView2<T>,
    coeffs: &AggCoeffs<T>,
    active: Option<&[bool]>,
) -> Result<(), NnError> {
    if h.nrows() != a.rows {
        return Err(NnError::ShapeError(format!(
            "embedding rows {} != adjacency rows {}",
            h.nrows(),
            a.rows
        )));
    }
    if coeffs.entry.len() != a.len() {
        return Err(NnError::ShapeError(format!(
            "coefficient count {} != entry count {}",
            coeffs.entry.len(),
            a.len()
        )));
    }
    if let Some(s) = coeffs.self_coeff {
        if s.len() != a.rows {
            return Err(NnError::ShapeError(format!(
                "self-coefficient count {} != row count {}",
                s.len(),
                a.rows
            )));
        }
    }
    if let Some(m) = active {
        if m.len() != a.rows {
            return Err(NnError::ShapeError(format!(
                "active mask length {} != row count {}",
                m.len(),
                a.rows
            )));
        }
    }
    let covered: usize = part.entry_ranges.iter().map(|r| r.len()).sum();
    if covered != a.len() || part.row_ranges.last().map(|r| r.end) != Some(a.rows) {
        return Err(NnError::ShapeError(
            "edge partition does not cover the adjacency".into(),
        ));
    }
    Ok(())
}

/// Coefficient-weighted aggregation: out[v] = sum over in-edges (v,u) of
/// coeff * h[u], plus self_coeff[v] * h[v] when present. Rows outside
/// `active` are zero. Partitions run in parallel over disjoint row spans;
/// `ops` (when given) accumulates (#edge terms + #self terms) * width.
pub fn aggregate<T: Scalar>(
    a: &SparseAdj<T>,
    part: &EdgePartition,
    h: &ArrayView2<T>,
    coeffs: AggCoeffs<T>,
    active: Option<&[bool]>,
    ops: Option<&AtomicU64>,
) -> Result<Array2<T>, NnError> {
    check_shapes(a, part, h, &coeffs, active)?;
    let width = h.ncols();
    let mut out = Array2::<T>::zeros((a.rows, width));

    // Carve the output into per-partition row chunks so partitions write
    // disjoint memory.
    let mut chunks = Vec::with_capacity(part.parts());
    let mut rest = out.view_mut();
    for r in &part.row_ranges {
        let (chunk, tail) = rest.split_at(Axis(0), r.len());
        chunks.push(chunk);
        rest = tail;
    }

    let tasks: Vec<_> = chunks.into_iter().zip(part.row_ranges.iter()).collect();
    let op_counts: Vec<u64> = tasks
        .into_par_iter()
        .map(|(mut chunk, rows)| {
            let mut acc = vec![0f64; width];
            let mut local_ops = 0u64;
            for (i, row) in rows.clone().enumerate() {
                if let Some(m) = active {
                    if !m[row] {
                        continue;
                    }
                }
                for v in acc.iter_mut() {
                    *v = 0.0;
                }
                let range = a.row_range(row);
                for idx in range.clone() {
                    let e = &a.entries[idx];
                    let c = coeffs.entry[idx].as_f64();
                    let src = h.row(e.src as usize);
                    for (v, x) in acc.iter_mut().zip(src.iter()) {
                        *v += c * x.as_f64();
                    }
                }
                local_ops += range.len() as u64;
                if let Some(s) = coeffs.self_coeff {
                    let c = s[row].as_f64();
                    let own = h.row(row);
                    for (v, x) in acc.iter_mut().zip(own.iter()) {
                        *v += c * x.as_f64();
                    }
                    local_ops += 1;
                }
                let mut dst = chunk.row_mut(i);
                for (o, v) in dst.iter_mut().zip(acc.iter()) {
                    *o = T::from_f64(*v);
                }
            }
            local_ops * width as u64
        })
        .collect();
    if let Some(ops) = ops {
        ops.fetch_add(op_counts.iter().sum(), Ordering::Relaxed);
    }
    Ok(out)
}

/// Reverse-mode counterpart of `aggregate`: given dL/d(out), produces
/// dL/dh plus per-entry and per-row-self coefficient gradients. Runs
/// sequentially in ascending row order so results are deterministic.
pub fn aggregate_backward<T: Scalar>(
    a: &SparseAdj<T>,
    dz: &ArrayView2<T>,
    h: &ArrayView2<T>,
    coeffs: AggCoeffs<T>,
    active: Option<&[bool]>,
) -> Result<(Array2<T>, Vec<T>, Vec<T>), NnError> {
    let single = partition_edges(a, 1);
    check_shapes(a, &single, h, &coeffs, active)?;
    if dz.dim() != h.dim() {
        return Err(NnError::ShapeError(format!(
            "gradient shape {:?} != embedding shape {:?}",
            dz.dim(),
            h.dim()
        )));
    }
    let width = h.ncols();
    let mut dh = Array2::<f64>::zeros((a.rows, width));
    let mut dentry = vec![T::zero(); a.len()];
    let mut dself = vec![T::zero(); a.rows];
    for row in 0..a.rows {
        if let Some(m) = active {
            if !m[row] {
                continue;
            }
        }
        let g = dz.row(row);
        for idx in a.row_range(row) {
            let e = &a.entries[idx];
            let c = coeffs.entry[idx].as_f64();
            let src = e.src as usize;
            let mut dot = 0f64;
            {
                let hs = h.row(src);
                let mut drow = dh.row_mut(src);
                for ((d, gv), hv) in drow.iter_mut().zip(g.iter()).zip(hs.iter()) {
                    *d += c * gv.as_f64();
                    dot += gv.as_f64() * hv.as_f64();
                }
            }
            dentry[idx] = T::from_f64(dot);
        }
        if let Some(s) = coeffs.self_coeff {
            let c = s[row].as_f64();
            let mut dot = 0f64;
            let hr = h.row(row);
            let mut drow = dh.row_mut(row);
            for ((d, gv), hv) in drow.iter_mut().zip(g.iter()).zip(hr.iter()) {
                *d += c * gv.as_f64();
                dot += gv.as_f64() * hv.as_f64();
            }
            dself[row] = T::from_f64(dot);
        }
    }
    let dh = dh.mapv(T::from_f64);
    Ok((dh, dentry, dself))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn adj(rows: usize, entries: &[(u32, u32, f32)]) -> SparseAdj<f32> {
        SparseAdj::new(
            rows,
            entries
                .iter()
                .map(|&(dst, src, weight)| AdjEntry { dst, src, weight })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn partition_balances_row_sizes() {
        // Rows sized {2, 1, 1}: two parts of 2 entries each.
        let a = adj(3, &[(0, 1, 1.0), (0, 2, 1.0), (1, 0, 1.0), (2, 0, 1.0)]);
        let p = partition_edges(&a, 2);
        assert_eq!(p.row_ranges, vec![0..1, 1..3]);
        assert_eq!(p.entry_ranges, vec![0..2, 2..4]);
    }

    #[test]
    fn partition_single_part_covers_all() {
        let a = adj(3, &[(0, 1, 1.0), (2, 0, 1.0)]);
        let p = partition_edges(&a, 1);
        assert_eq!(p.row_ranges, vec![0..3]);
        assert_eq!(p.entry_ranges, vec![0..2]);
    }

    #[test]
    fn partition_more_parts_than_rows() {
        let a = adj(2, &[(0, 1, 1.0), (1, 0, 1.0)]);
        let p = partition_edges(&a, 5);
        assert_eq!(p.parts(), 5);
        let covered: usize = p.entry_ranges.iter().map(|r| r.len()).sum();
        assert_eq!(covered, 2);
        // Row-disjoint: ranges tile 0..rows in order.
        let mut next = 0;
        for r in &p.row_ranges {
            assert_eq!(r.start, next);
            next = r.end;
        }
        assert_eq!(next, 2);
    }

    #[test]
    fn aggregate_mean_plus_self() {
        // Row 0 receives the mean of rows 1 and 2 plus itself.
        let a = adj(3, &[(0, 1, 1.0), (0, 2, 1.0)]);
        let h = array![[0.0f32, 0.0], [1.0, 1.0], [3.0, 3.0]];
        let coeff = vec![0.5f32, 0.5];
        let selfc = vec![1.0f32, 1.0, 1.0];
        let p = partition_edges(&a, 1);
        let out = aggregate(
            &a,
            &p,
            &h.view(),
            AggCoeffs {
                entry: &coeff,
                self_coeff: Some(&selfc),
            },
            None,
            None,
        )
        .unwrap();
        assert_eq!(out.row(0).to_vec(), vec![2.0, 2.0]);
    }

    #[test]
    fn aggregate_uniform_attention() {
        // Equal attention over self [0] and neighbors [2], [4] gives [2].
        let a = adj(3, &[(0, 1, 1.0), (0, 2, 1.0)]);
        let h = array![[0.0f32], [2.0], [4.0]];
        let third = 1.0f32 / 3.0;
        let coeff = vec![third, third];
        let selfc = vec![third, 0.0, 0.0];
        let p = partition_edges(&a, 1);
        let out = aggregate(
            &a,
            &p,
            &h.view(),
            AggCoeffs {
                entry: &coeff,
                self_coeff: Some(&selfc),
            },
            None,
            None,
        )
        .unwrap();
        assert!((out[[0, 0]] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn aggregate_bitwise_partition_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows = 60usize;
        let mut entries = Vec::new();
        for dst in 0..rows as u32 {
            for src in 0..rows as u32 {
                if rng.random_range(0..8) == 0 {
                    entries.push(AdjEntry {
                        dst,
                        src,
                        weight: rng.random_range(0.1..1.0f32),
                    });
                }
            }
        }
        let a = SparseAdj::new(rows, entries).unwrap();
        let h = Array2::from_shape_fn((rows, 7), |_| rng.random_range(-1.0..1.0f32));
        let coeff: Vec<f32> = a.entries().iter().map(|e| e.weight).collect();
        let selfc: Vec<f32> = (0..rows).map(|_| rng.random_range(0.0..1.0f32)).collect();

        let reference = aggregate(
            &a,
            &partition_edges(&a, 1),
            &h.view(),
            AggCoeffs {
                entry: &coeff,
                self_coeff: Some(&selfc),
            },
            None,
            None,
        )
        .unwrap();
        for t in [2, 3, 4, 8, 64] {
            let out = aggregate(
                &a,
                &partition_edges(&a, t),
                &h.view(),
                AggCoeffs {
                    entry: &coeff,
                    self_coeff: Some(&selfc),
                },
                None,
                None,
            )
            .unwrap();
            for (x, y) in reference.iter().zip(out.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "t={t}");
            }
        }
    }

    #[test]
    fn aggregate_counts_operations() {
        let a = adj(3, &[(0, 1, 1.0), (0, 2, 1.0), (1, 2, 1.0)]);
        let h = Array2::<f32>::ones((3, 4));
        let coeff = vec![1.0f32; 3];
        let selfc = vec![1.0f32; 3];
        let ops = AtomicU64::new(0);
        aggregate(
            &a,
            &partition_edges(&a, 2),
            &h.view(),
            AggCoeffs {
                entry: &coeff,
                self_coeff: Some(&selfc),
            },
            None,
            Some(&ops),
        )
        .unwrap();
        // 3 edge terms + 3 self terms, width 4.
        assert_eq!(ops.load(Ordering::Relaxed), 24);
    }

    #[test]
    fn aggregate_rejects_bad_shapes() {
        let a = adj(2, &[(0, 1, 1.0)]);
        let h = Array2::<f32>::zeros((3, 2));
        let coeff = vec![1.0f32];
        let r = aggregate(
            &a,
            &partition_edges(&a, 1),
            &h.view(),
            AggCoeffs {
                entry: &coeff,
                self_coeff: None,
            },
            None,
            None,
        );
        assert!(matches!(r, Err(NnError::ShapeError(_))));
    }

    #[test]
    fn backward_matches_manual_small_case() {
        // out[0] = 2*h[1] + self 3*h[0]; dz = ones.
        let a = adj(2, &[(0, 1, 2.0)]);
        let h = array![[1.0f32, 2.0], [3.0, 4.0]];
        let coeff = vec![2.0f32];
        let selfc = vec![3.0f32, 0.0];
        let dz = array![[1.0f32, 1.0], [0.0, 0.0]];
        let (dh, dentry, dself) = aggregate_backward(
            &a,
            &dz.view(),
            &h.view(),
            AggCoeffs {
                entry: &coeff,
                self_coeff: Some(&selfc),
            },
            None,
        )
        .unwrap();
        // dh[1] = 2 * dz[0]; dh[0] = 3 * dz[0].
        assert_eq!(dh.row(1).to_vec(), vec![2.0, 2.0]);
        assert_eq!(dh.row(0).to_vec(), vec![3.0, 3.0]);
        // dentry = dz[0] . h[1] = 3 + 4; dself[0] = dz[0] . h[0] = 1 + 2.
        assert_eq!(dentry, vec![7.0]);
        assert_eq!(dself, vec![3.0, 0.0]);
    }

    #[test]
    fn entries_must_be_sorted() {
        let r = SparseAdj::new(
            2,
            vec![
                AdjEntry {
                    dst: 1,
                    src: 0,
                    weight: 1.0f32,
                },
                AdjEntry {
                    dst: 0,
                    src: 1,
                    weight: 1.0,
                },
            ],
        );
        assert!(matches!(r, Err(NnError::SchemaError(_))));
    }
}
