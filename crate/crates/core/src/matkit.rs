//! Small dense matrices (at most 16x16) and the closed-form arrowhead inverse.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

pub const MAX_DIM: usize = 16;

/// Relative pivot tolerance for elimination.
const PIVOT_TOL: f64 = 1e-14;

/// Condition estimates above this only log a warning.
pub const CONDITION_WARN: f64 = 1e8;

/// Row-major dense real matrix.
#[derive(Clone, PartialEq)]
pub struct SmallMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for SmallMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "SmallMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl SmallMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(
            rows <= MAX_DIM && cols <= MAX_DIM,
            "SmallMatrix limited to {MAX_DIM}x{MAX_DIM}"
        );
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if r > MAX_DIM || c > MAX_DIM {
            return Err(Error::Shape(format!("{r}x{c} exceeds {MAX_DIM}x{MAX_DIM}")));
        }
        let mut m = Self::zeros(r, c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::Shape(format!(
                    "row {i} has {} entries, expected {c}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::domain(format!("row {i} has a non-finite entry")));
            }
            m.data[i * c..(i + 1) * c].copy_from_slice(row);
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &SmallMatrix) -> Result<SmallMatrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn add_assign(&mut self, other: &SmallMatrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &SmallMatrix, scale: f64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    /// `self += scale * v v^T`.
    pub fn add_outer(&mut self, v: &[f64], scale: f64) {
        assert!(self.rows == v.len() && self.cols == v.len());
        for i in 0..v.len() {
            let si = scale * v[i];
            for j in 0..v.len() {
                self.data[i * self.cols + j] += si * v[j];
            }
        }
    }

    pub fn scaled(&self, s: f64) -> SmallMatrix {
        let mut m = self.clone();
        m.data.iter_mut().for_each(|v| *v *= s);
        m
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &SmallMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Nonzero only on the main diagonal, first row and first column.
    pub fn is_arrowhead(&self) -> bool {
        if !self.is_square() {
            return false;
        }
        for i in 1..self.rows {
            for j in 1..self.cols {
                if i != j && self[(i, j)] != 0.0 {
                    return false;
                }
            }
        }
        true
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.is_square()
            && (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }
}

impl Index<(usize, usize)> for SmallMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for SmallMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

fn warn_if_ill_conditioned(m: &SmallMatrix, inv: &SmallMatrix, what: &str) {
    let cond = m.norm_inf() * inv.norm_inf();
    if cond > CONDITION_WARN {
        log::warn!("{what}: condition estimate {cond:.3e} exceeds {CONDITION_WARN:.0e}; precision degraded");
    }
}

/// Closed-form inverse of an arrowhead matrix.
///
/// With `m = [[a, b^T], [c, D]]` and `D` diagonal, the Schur complement
/// `s = a - sum_j b_j c_j / d_j` gives
/// `m^-1 = [[1/s, -b^T D^-1 / s], [-D^-1 c / s, D^-1 + D^-1 c b^T D^-1 / s]]`.
pub fn arrowhead_inverse(m: &SmallMatrix) -> Result<SmallMatrix> {
    if !m.is_arrowhead() {
        return Err(Error::Shape("matrix is not arrowhead".into()));
    }
    let n = m.rows();
    if n == 0 {
        return Err(Error::Shape("empty matrix".into()));
    }
    let scale = m.norm_inf();
    let mut dinv = vec![0.0; n];
    for j in 1..n {
        let d = m[(j, j)];
        if d == 0.0 || d.abs() <= PIVOT_TOL * scale {
            return Err(Error::Singular(format!("zero diagonal pivot at index {j}")));
        }
        dinv[j] = 1.0 / d;
    }
    let mut schur = m[(0, 0)];
    for j in 1..n {
        schur -= m[(0, j)] * m[(j, 0)] * dinv[j];
    }
    if schur == 0.0 || schur.abs() <= PIVOT_TOL * scale {
        return Err(Error::Singular(format!(
            "Schur complement {schur:e} is zero"
        )));
    }
    let s_inv = 1.0 / schur;
    let mut out = SmallMatrix::zeros(n, n);
    out[(0, 0)] = s_inv;
    for j in 1..n {
        out[(0, j)] = -m[(0, j)] * dinv[j] * s_inv;
        out[(j, 0)] = -m[(j, 0)] * dinv[j] * s_inv;
    }
    for i in 1..n {
        let ci = m[(i, 0)] * dinv[i];
        for j in 1..n {
            let mut v = ci * m[(0, j)] * dinv[j] * s_inv;
            if i == j {
                v += dinv[i];
            }
            out[(i, j)] = v;
        }
    }
    warn_if_ill_conditioned(m, &out, "arrowhead inverse");
    Ok(out)
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn general_inverse(m: &SmallMatrix) -> Result<SmallMatrix> {
    let inv = invert_quiet(m)?;
    warn_if_ill_conditioned(m, &inv, "general inverse");
    Ok(inv)
}

/// As [`general_inverse`] without the conditioning warning; used in hot loops.
pub(crate) fn invert_quiet(m: &SmallMatrix) -> Result<SmallMatrix> {
    if !m.is_square() {
        return Err(Error::Shape(format!("cannot invert {}x{}", m.rows, m.cols)));
    }
    let n = m.rows;
    let scale = m.data.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if scale == 0.0 && n > 0 {
        return Err(Error::Singular("zero matrix".into()));
    }
    let mut a = m.clone();
    let mut inv = SmallMatrix::identity(n);
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&x, &y| a[(x, col)].abs().total_cmp(&a[(y, col)].abs()))
            .unwrap();
        let p = a[(pivot_row, col)];
        if p.abs() <= PIVOT_TOL * scale {
            return Err(Error::Singular(format!("pivot {p:e} in column {col}")));
        }
        if pivot_row != col {
            for j in 0..n {
                a.data.swap(pivot_row * n + j, col * n + j);
                inv.data.swap(pivot_row * n + j, col * n + j);
            }
        }
        let pinv = 1.0 / p;
        for j in 0..n {
            a[(col, j)] *= pinv;
            inv[(col, j)] *= pinv;
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let f = a[(i, col)];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                a[(i, j)] -= f * a[(col, j)];
                inv[(i, j)] -= f * inv[(col, j)];
            }
        }
    }
    Ok(inv)
}

/// `c^T b_inv m b_inv c`.
pub fn quadratic_form(c: &[f64], b_inv: &SmallMatrix, m: &SmallMatrix) -> Result<f64> {
    let n = c.len();
    if b_inv.rows() != n || b_inv.cols() != n || m.rows() != n || m.cols() != n {
        return Err(Error::Shape(format!(
            "contrast of length {n} with {}x{} and {}x{} matrices",
            b_inv.rows(),
            b_inv.cols(),
            m.rows(),
            m.cols()
        )));
    }
    // b_inv^T c on the left; b_inv is symmetric for every caller but this keeps the product literal.
    let left: Vec<f64> = (0..n)
        .map(|j| (0..n).map(|i| c[i] * b_inv[(i, j)]).sum())
        .collect();
    let right = b_inv.mul_vec(c)?;
    let mr = m.mul_vec(&right)?;
    Ok(left.iter().zip(&mr).map(|(a, b)| a * b).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_triple(c: &[f64], b: &SmallMatrix, m: &SmallMatrix) -> f64 {
        let n = c.len();
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        total += c[i] * b[(i, j)] * m[(j, k)] * b[(k, l)] * c[l];
                    }
                }
            }
        }
        total
    }

    pub(crate) fn random_arrowhead(rng: &mut ChaCha8Rng, n: usize) -> SmallMatrix {
        let mut m = SmallMatrix::zeros(n, n);
        let mut corner = 0.0;
        for j in 1..n {
            let d = rng.random_range(0.5..2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            m[(j, j)] = d;
            let b = rng.random_range(-1.0..1.0);
            let c = rng.random_range(-1.0..1.0);
            m[(0, j)] = b;
            m[(j, 0)] = c;
            corner += b * c / d;
        }
        // Keep the Schur complement away from zero.
        let s = rng.random_range(0.5..2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        m[(0, 0)] = corner + s;
        m
    }

    #[test]
    fn identity_inverts_to_identity() {
        let i5 = SmallMatrix::identity(5);
        assert_eq!(arrowhead_inverse(&i5).unwrap(), i5);
        assert_eq!(general_inverse(&i5).unwrap(), i5);
    }

    #[test]
    fn diagonal_arrowhead_gives_reciprocals() {
        let d = SmallMatrix::diagonal(&[2.0, 4.0, 0.5, 8.0, 1.0]);
        let inv = arrowhead_inverse(&d).unwrap();
        assert_eq!(inv, SmallMatrix::diagonal(&[0.5, 0.25, 2.0, 0.125, 1.0]));
    }

    #[test]
    fn arrowhead_matches_gaussian_elimination() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let m = random_arrowhead(&mut rng, 5);
            let a = arrowhead_inverse(&m).unwrap();
            let g = general_inverse(&m).unwrap();
            assert!(a.max_abs_diff(&g) <= 1e-12, "{:e}", a.max_abs_diff(&g));
            let resid = m
                .matmul(&a)
                .unwrap()
                .max_abs_diff(&SmallMatrix::identity(5));
            assert!(resid <= 1e-12);
        }
    }

    #[test]
    fn two_by_two_closed_form() {
        let m = SmallMatrix::from_rows(&[&[1.0, 0.5], &[0.5, 1.0]]).unwrap();
        let inv = general_inverse(&m).unwrap();
        let expected = SmallMatrix::from_rows(&[&[1.0, -0.5], &[-0.5, 1.0]])
            .unwrap()
            .scaled(1.0 / 0.75);
        assert!(inv.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn singular_inputs_are_rejected() {
        let rank1 = SmallMatrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]).unwrap();
        assert!(matches!(general_inverse(&rank1), Err(Error::Singular(_))));
        let mut a = SmallMatrix::identity(3);
        a[(2, 2)] = 0.0;
        assert!(matches!(arrowhead_inverse(&a), Err(Error::Singular(_))));
        // Zero Schur complement: corner equals sum of wing products.
        let b = SmallMatrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]).unwrap();
        assert!(matches!(arrowhead_inverse(&b), Err(Error::Singular(_))));
    }

    #[test]
    fn non_arrowhead_is_a_shape_error() {
        let mut m = SmallMatrix::identity(3);
        m[(1, 2)] = 0.3;
        assert!(matches!(arrowhead_inverse(&m), Err(Error::Shape(_))));
        assert!(matches!(
            general_inverse(&SmallMatrix::zeros(2, 3)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn quadratic_form_examples() {
        let i5 = SmallMatrix::identity(5);
        let e2 = [0.0, 1.0, 0.0, 0.0, 0.0];
        assert_eq!(quadratic_form(&e2, &i5, &i5).unwrap(), 1.0);

        let b = [2.0, 0.5, 4.0, 1.5, 3.0];
        let mdiag = [1.0, 0.7, 2.0, 0.9, 1.1];
        let b_inv = SmallMatrix::diagonal(&b.map(|v| 1.0 / v));
        let m = SmallMatrix::diagonal(&mdiag);
        let c = [0.0, 1.0, 0.0, -1.0, 0.0];
        let expected: f64 = (0..5).map(|d| c[d] * c[d] * mdiag[d] / (b[d] * b[d])).sum();
        assert!((quadratic_form(&c, &b_inv, &m).unwrap() - expected).abs() < 1e-15);

        assert!(quadratic_form(&[1.0, 0.0], &i5, &i5).is_err());
    }

    #[test]
    fn quadratic_form_matches_naive_triple_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let mut b = SmallMatrix::zeros(5, 5);
            let mut m = SmallMatrix::zeros(5, 5);
            for i in 0..5 {
                for j in 0..5 {
                    b[(i, j)] = rng.random_range(-1.0..1.0);
                    m[(i, j)] = rng.random_range(-1.0..1.0);
                }
            }
            let c: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q = quadratic_form(&c, &b, &m).unwrap();
            assert!((q - naive_triple(&c, &b, &m)).abs() < 1e-12);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn double_inverse_round_trips(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let m = random_arrowhead(&mut rng, 5);
                let back_a = arrowhead_inverse(&arrowhead_inverse(&m).unwrap());
                let back_g = general_inverse(&general_inverse(&m).unwrap()).unwrap();
                prop_assert!(back_g.max_abs_diff(&m) < 1e-10);
                // The inverse of an arrowhead is generally dense.
                if let Ok(back) = back_a {
                    prop_assert!(back.max_abs_diff(&m) < 1e-10);
                }
            }

            #[test]
            fn quadratic_form_even_in_c(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut b = SmallMatrix::zeros(4, 4);
                let mut m = SmallMatrix::zeros(4, 4);
                for i in 0..4 {
                    for j in 0..=i {
                        let x = rng.random_range(-1.0..1.0);
                        let y = rng.random_range(-1.0..1.0);
                        b[(i, j)] = x; b[(j, i)] = x;
                        m[(i, j)] = y; m[(j, i)] = y;
                    }
                }
                let c: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                let neg: Vec<f64> = c.iter().map(|v| -v).collect();
                prop_assert_eq!(quadratic_form(&c, &b, &m).unwrap(), quadratic_form(&neg, &b, &m).unwrap());
            }
        }
    }
}
