//! Sparse storage and the direct solver used by every implicit solve.
//!
//! Matrices are kept in CSR form with both triangles stored. Factorisation
//! is a profile (skyline) `LDLᵀ` without pivoting: the ring-by-ring node
//! ordering keeps the profile near `n_θ` on the bulk rows and `2 n_θ` on the
//! surface rows. By Sylvester's law the signs of `D` give the inertia, which
//! is how callers detect loss of positive definiteness.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

/// Accumulates `(row, col, value)` entries; duplicates are summed in
/// insertion order.
#[derive(Debug, Clone)]
pub struct TripletBuilder {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            entries: Vec::new(),
        }
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.n && j < self.n);
        self.entries.push((i, j, v));
    }

    /// Adds `c · (e_a - e_b)(e_a - e_b)ᵀ`.
    pub fn add_link(&mut self, a: usize, b: usize, c: f64) {
        self.add(a, a, c);
        self.add(b, b, c);
        self.add(a, b, -c);
        self.add(b, a, -c);
    }

    /// Adds `c · v vᵀ` for a sparse vector `v`.
    pub fn add_outer(&mut self, v: &[(usize, f64)], c: f64) {
        for &(i, a) in v {
            for &(j, b) in v {
                self.add(i, j, c * a * b);
            }
        }
    }

    pub fn build(mut self) -> CsrMatrix {
        self.entries.sort_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0usize; self.n + 1];
        let mut cols = Vec::with_capacity(self.entries.len());
        let mut vals: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in self.entries {
            if last == Some((i, j)) {
                *vals.last_mut().expect("entry") += v;
            } else {
                cols.push(j);
                vals.push(v);
                row_ptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..self.n {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrMatrix {
            n: self.n,
            row_ptr,
            cols,
            vals,
        }
    }
}

impl CsrMatrix {
    pub fn zeros(n: usize) -> Self {
        TripletBuilder::new(n).build()
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diagonal(&vec![1.0; n])
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        let mut b = TripletBuilder::new(d.len());
        for (i, &v) in d.iter().enumerate() {
            b.add(i, i, v);
        }
        b.build()
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()]
            .iter()
            .copied()
            .zip(self.vals[r].iter().copied())
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[r.clone()].binary_search(&j) {
            Ok(k) => self.vals[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.vals[k] * x[self.cols[k]];
            }
            *yi = s;
        }
    }

    pub fn quad_form(&self, x: &[f64], y: &[f64]) -> f64 {
        dot(&self.mul_vec(x), y)
    }

    /// `max |A_ij - A_ji|` over stored entries.
    pub fn max_asymmetry(&self) -> f64 {
        self.triplets()
            .map(|(i, j, v)| (v - self.get(j, i)).abs())
            .fold(0.0, f64::max)
    }

    /// `self + s · other` on the union pattern.
    pub fn add_scaled(&self, other: &CsrMatrix, s: f64) -> CsrMatrix {
        assert_eq!(self.n, other.n);
        let mut b = TripletBuilder::new(self.n);
        for (i, j, v) in self.triplets() {
            b.add(i, j, v);
        }
        for (i, j, v) in other.triplets() {
            b.add(i, j, s * v);
        }
        b.build()
    }

    pub fn add_diagonal(&self, d: &[f64]) -> CsrMatrix {
        self.add_scaled(&CsrMatrix::from_diagonal(d), 1.0)
    }

    pub fn scaled(&self, s: f64) -> CsrMatrix {
        let mut out = self.clone();
        out.vals.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// Builds a block matrix `[[a, c], [cᵀ, b]]` from an off-diagonal block
    /// given as triplets in local coordinates of `(a, b)`.
    pub fn block(a: &CsrMatrix, b: &CsrMatrix, coupling: &[(usize, usize, f64)]) -> CsrMatrix {
        let na = a.n;
        let mut t = TripletBuilder::new(na + b.n);
        for (i, j, v) in a.triplets() {
            t.add(i, j, v);
        }
        for (i, j, v) in b.triplets() {
            t.add(na + i, na + j, v);
        }
        for &(i, j, v) in coupling {
            t.add(i, na + j, v);
            t.add(na + j, i, v);
        }
        t.build()
    }

    /// Text triplet table, one `row col value` per line.
    pub fn to_triplet_text(&self) -> String {
        let mut s = String::with_capacity(self.nnz() * 32);
        for (i, j, v) in self.triplets() {
            s.push_str(&format!("{i} {j} {v:e}\n"));
        }
        s
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, j, v) in self.triplets() {
            d[i][j] = v;
        }
        d
    }
}

/// Profile `LDLᵀ` factorisation of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct ProfileLdlt {
    n: usize,
    first: Vec<usize>,
    start: Vec<usize>,
    data: Vec<f64>,
    negative_pivots: usize,
}

impl ProfileLdlt {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        let n = a.dim();
        let mut first: Vec<usize> = (0..n).collect();
        for (i, j, _) in a.triplets() {
            if j < first[i] {
                first[i] = j;
            }
        }
        let mut start = vec![0usize; n + 1];
        for i in 0..n {
            start[i + 1] = start[i] + (i - first[i] + 1);
        }
        let mut data = vec![0.0; start[n]];
        let mut scale: f64 = 0.0;
        for (i, j, v) in a.triplets() {
            if j <= i {
                data[start[i] + j - first[i]] = v;
            }
            if i == j {
                scale = scale.max(v.abs());
            }
        }

        let mut negative_pivots = 0;
        let tiny = scale * 1e-15;
        for i in 0..n {
            let fi = first[i];
            let si = start[i];
            // g_j = L_ij D_j, computed in place
            for j in fi..i {
                let fj = first[j];
                let sj = start[j];
                let lo = fi.max(fj);
                let mut acc = 0.0;
                let (ri, rj) = (
                    &data[si + lo - fi..si + j - fi],
                    &data[sj + lo - fj..sj + j - fj],
                );
                for (x, y) in ri.iter().zip(rj) {
                    acc += x * y;
                }
                data[si + j - fi] -= acc;
            }
            let mut d = data[si + i - fi];
            for j in fi..i {
                let dj = data[start[j] + j - first[j]];
                let g = data[si + j - fi];
                let l = g / dj;
                d -= g * l;
                data[si + j - fi] = l;
            }
            if !(d.abs() > tiny) || !d.is_finite() {
                return Err(Error::Numerical {
                    message: format!("zero pivot at row {i} in LDLᵀ"),
                    residual: d,
                });
            }
            if d < 0.0 {
                negative_pivots += 1;
            }
            data[si + i - fi] = d;
        }
        Ok(Self {
            n,
            first,
            start,
            data,
            negative_pivots,
        })
    }

    /// Factorises and insists on positive definiteness.
    pub fn factor_spd(a: &CsrMatrix) -> Result<Self> {
        let f = Self::factor(a)?;
        if f.negative_pivots > 0 {
            let (pivot, value) = (0..f.n)
                .map(|i| (i, f.pivot(i)))
                .find(|&(_, d)| d < 0.0)
                .expect("negative pivot");
            return Err(Error::NotPositiveDefinite { pivot, value });
        }
        Ok(f)
    }

    fn pivot(&self, i: usize) -> f64 {
        self.data[self.start[i] + i - self.first[i]]
    }

    /// Number of negative eigenvalues of the factored matrix.
    pub fn negative_pivots(&self) -> usize {
        self.negative_pivots
    }

    pub fn is_positive_definite(&self) -> bool {
        self.negative_pivots == 0
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.n;
        // L y = b
        for i in 0..n {
            let fi = self.first[i];
            let row = &self.data[self.start[i]..self.start[i] + i - fi];
            let mut acc = 0.0;
            for (l, xv) in row.iter().zip(&x[fi..i]) {
                acc += l * xv;
            }
            x[i] -= acc;
        }
        for i in 0..n {
            x[i] /= self.pivot(i);
        }
        // Lᵀ x = y
        for i in (0..n).rev() {
            let fi = self.first[i];
            let xi = x[i];
            let row = &self.data[self.start[i]..self.start[i] + i - fi];
            for (l, xv) in row.iter().zip(&mut x[fi..i]) {
                *xv -= l * xi;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// `Σ w_i a_i²`.
pub fn weighted_norm_sq(w: &[f64], a: &[f64]) -> f64 {
    w.iter().zip(a).map(|(w, x)| w * x * x).sum()
}
