//! Small dense linear-algebra helpers shared by the recursions.

use nalgebra::{DMatrix, DVector};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

pub fn symmetrize(m: &mut Mat) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn symmetrized(mut m: Mat) -> Mat {
    symmetrize(&mut m);
    m
}

/// Largest absolute asymmetry `|m_ij - m_ji|`.
pub fn asymmetry(m: &Mat) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Symmetric square root of a positive semi-definite matrix.
///
/// Eigenvalues down to `-1e-12 * max|λ|` are clamped to zero; anything more
/// negative is rejected.
pub fn psd_sqrt(m: &Mat) -> Option<Mat> {
    if m.nrows() != m.ncols() || asymmetry(m) > 1e-10 * (1.0 + m.amax()) {
        return None;
    }
    let eig = symmetrized(m.clone()).symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    if eig.eigenvalues.iter().any(|&l| l < -1e-12 * scale || !l.is_finite()) {
        return None;
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    Some(symmetrized(q * Mat::from_diagonal(&roots) * q.transpose()))
}

/// Log-determinant of a symmetric positive definite matrix, `None` if the
/// Cholesky factorization fails.
pub fn spd_log_det(m: &Mat) -> Option<f64> {
    let chol = symmetrized(m.clone()).cholesky()?;
    let l = chol.l_dirty();
    let mut acc = 0.0;
    for i in 0..m.nrows() {
        let d = l[(i, i)];
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        acc += d.ln();
    }
    Some(2.0 * acc)
}

pub fn is_spd(m: &Mat) -> bool {
    spd_log_det(m).is_some()
}

/// Solves `a x = b` through an LU factorization.
pub fn lu_solve(a: &Mat, b: &Mat) -> Option<Mat> {
    let x = a.clone().lu().solve(b)?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

pub fn lu_solve_vec(a: &Mat, b: &Vector) -> Option<Vector> {
    let x = a.clone().lu().solve(b)?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

pub fn determinant(a: &Mat) -> f64 {
    a.clone().lu().determinant()
}

pub fn all_finite_mat(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn all_finite_vec(v: &Vector) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Serde adapters that store matrices as row-major nested arrays.
pub mod serde_mat {
    use super::{Mat, Vector};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
        (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
            .collect()
    }

    pub fn from_rows(rows: &[Vec<f64>], ncols_if_empty: usize) -> Result<Mat, String> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(ncols_if_empty, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err("ragged matrix rows".into());
        }
        Ok(Mat::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }

    pub mod matrix {
        use super::*;

        pub fn serialize<S: Serializer>(m: &Mat, s: S) -> Result<S::Ok, S::Error> {
            to_rows(m).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat, D::Error> {
            let rows = Vec::<Vec<f64>>::deserialize(d)?;
            from_rows(&rows, 0).map_err(serde::de::Error::custom)
        }
    }

    pub mod matrices {
        use super::*;

        pub fn serialize<S: Serializer>(ms: &[Mat], s: S) -> Result<S::Ok, S::Error> {
            ms.iter().map(to_rows).collect::<Vec<_>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Mat>, D::Error> {
            let all = Vec::<Vec<Vec<f64>>>::deserialize(d)?;
            all.iter()
                .map(|rows| from_rows(rows, 0).map_err(serde::de::Error::custom))
                .collect()
        }
    }

    pub mod vectors {
        use super::*;

        pub fn serialize<S: Serializer>(vs: &[Vector], s: S) -> Result<S::Ok, S::Error> {
            vs.iter()
                .map(|v| v.iter().copied().collect::<Vec<f64>>())
                .collect::<Vec<_>>()
                .serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vector>, D::Error> {
            let all = Vec::<Vec<f64>>::deserialize(d)?;
            Ok(all.into_iter().map(Vector::from_vec).collect())
        }
    }
}
