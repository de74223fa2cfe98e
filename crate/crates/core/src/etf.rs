//! Simplex equiangular tight frames.
//!
//! A simplex ETF with `L` classes in `d` dimensions is the matrix
//! `N = sqrt(L/(L-1)) · U · (I_L - 1_L 1_Lᵀ / L)` for any `U` (d×L) with
//! orthonormal columns. Its columns are unit vectors whose pairwise inner
//! products all equal `-1/(L-1)`. The frame is used as a fixed, never-trained
//! classifier on per-class feature centers.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use npyz::WriterBuilder;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, l2_norm, Matrix};
use crate::rng::{rng_for, stream};
use crate::scalar::Scalar;

/// d×L matrix with orthonormal columns (`UᵀU = I_L`).
#[derive(Clone, Debug, PartialEq)]
pub struct OrthonormalMatrix<T> {
    entries: Matrix<T>,
}

impl<T: Scalar> OrthonormalMatrix<T> {
    /// The first `cols` columns of the `dim`×`dim` identity.
    pub fn identity(dim: usize, cols: usize) -> Result<Self> {
        if dim < cols {
            return Err(Error::Dimension(format!(
                "rotation needs dim >= num_classes, got dim={dim}, num_classes={cols}"
            )));
        }
        let mut m = Matrix::zeros(dim, cols);
        for i in 0..cols {
            m[(i, i)] = T::one();
        }
        Ok(Self { entries: m })
    }

    /// Wraps `m` after checking `mᵀm = I` to within `tol`.
    pub fn try_from_matrix(m: Matrix<T>, tol: T) -> Result<Self> {
        let dev = m.matmul_tn(&m).max_abs_diff(&Matrix::identity(m.cols()));
        if dev > tol {
            return Err(Error::InvalidArgument(format!(
                "columns are not orthonormal (max |UᵀU - I| = {dev})"
            )));
        }
        Ok(Self { entries: m })
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.entries
    }

    pub fn dim(&self) -> usize {
        self.entries.rows()
    }

    pub fn cols(&self) -> usize {
        self.entries.cols()
    }
}

/// Seeded random d×L matrix with orthonormal columns: a Gaussian matrix
/// orthonormalised by modified Gram-Schmidt with one re-orthogonalisation
/// pass (the Q factor of its thin QR decomposition).
pub fn make_rotation<T: Scalar>(
    dim: usize,
    num_classes: usize,
    seed: u64,
) -> Result<OrthonormalMatrix<T>> {
    if num_classes == 0 {
        return Err(Error::InvalidArgument("num_classes must be positive".into()));
    }
    if dim < num_classes {
        return Err(Error::Dimension(format!(
            "rotation needs dim >= num_classes, got dim={dim}, num_classes={num_classes}"
        )));
    }
    let mut rng = rng_for(&[stream::ROTATION, seed, dim as u64, num_classes as u64]);
    let mut cols: Vec<Vec<T>> = Vec::with_capacity(num_classes);
    while cols.len() < num_classes {
        let mut v: Vec<T> = (0..dim)
            .map(|_| T::lit(StandardNormal.sample(&mut rng)))
            .collect();
        for _ in 0..2 {
            for q in &cols {
                let proj = dot(&v, q);
                for (vi, &qi) in v.iter_mut().zip(q) {
                    *vi -= proj * qi;
                }
            }
        }
        let norm = l2_norm(&v);
        // a Gaussian draw in the span of previous columns has probability zero;
        // redraw rather than divide by a vanishing norm
        if norm < T::lit(1e-6) {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        cols.push(v);
    }
    let mut m = Matrix::zeros(dim, num_classes);
    for (c, col) in cols.iter().enumerate() {
        for (r, &x) in col.iter().enumerate() {
            m[(r, c)] = x;
        }
    }
    Ok(OrthonormalMatrix { entries: m })
}

/// Class vectors stored column-wise: `vectors` is d×L, column `l` is the
/// prototype of class `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexEtf<T> {
    vectors: Matrix<T>,
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtfMetadata {
    pub dim: usize,
    pub num_classes: usize,
    pub seed: Option<u64>,
}

impl<T: Scalar> SimplexEtf<T> {
    /// Wraps an arbitrary d×L matrix as a frame. No geometric check is made;
    /// use [`verify_etf`] for that.
    pub fn from_vectors(vectors: Matrix<T>, seed: Option<u64>) -> Result<Self> {
        if vectors.cols() < 2 {
            return Err(Error::InvalidArgument(
                "a simplex frame needs at least two classes".into(),
            ));
        }
        Ok(Self { vectors, seed })
    }

    /// Builds `sqrt(L/(L-1)) · U · (I - 11ᵀ/L)` from a given rotation.
    pub fn from_rotation(rotation: &OrthonormalMatrix<T>, seed: Option<u64>) -> Result<Self> {
        let l = rotation.cols();
        if l < 2 {
            return Err(Error::InvalidArgument(
                "a simplex frame needs at least two classes".into(),
            ));
        }
        let lf = T::lit(l as f64);
        let mut centering = Matrix::identity(l);
        for v in centering.as_mut_slice() {
            *v -= T::one() / lf;
        }
        let mut n = rotation.matrix().matmul(&centering);
        n.scale((lf / (lf - T::one())).sqrt());
        Ok(Self { vectors: n, seed })
    }

    pub fn vectors(&self) -> &Matrix<T> {
        &self.vectors
    }

    pub fn dim(&self) -> usize {
        self.vectors.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.vectors.cols()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn column(&self, class: usize) -> Vec<T> {
        self.vectors.column(class)
    }

    /// `NᵀN`.
    pub fn gram(&self) -> Matrix<T> {
        self.vectors.matmul_tn(&self.vectors)
    }

    /// `Q·N` for a d×d orthonormal `Q`.
    pub fn rotated(&self, q: &OrthonormalMatrix<T>) -> Result<Self> {
        if q.dim() != self.dim() || q.cols() != self.dim() {
            return Err(Error::Dimension(format!(
                "rotation must be {d}x{d}, got {}x{}",
                q.dim(),
                q.cols(),
                d = self.dim()
            )));
        }
        Ok(Self {
            vectors: q.matrix().matmul(&self.vectors),
            seed: self.seed,
        })
    }

    pub fn metadata(&self) -> EtfMetadata {
        EtfMetadata {
            dim: self.dim(),
            num_classes: self.num_classes(),
            seed: self.seed,
        }
    }

    /// Writes the frame as a `.npy` array (d×L, float64, C order) and its
    /// metadata as JSON next to it.
    pub fn export(&self, array_path: &Path, meta_path: &Path) -> Result<()> {
        let file = File::create(array_path).map_err(|e| Error::io(array_path, e))?;
        let mut writer = npyz::WriteOptions::new()
            .default_dtype()
            .shape(&[self.dim() as u64, self.num_classes() as u64])
            .writer(BufWriter::new(file))
            .begin_nd()
            .map_err(|e| Error::io(array_path, e))?;
        writer
            .extend(self.vectors.as_slice().iter().map(|v| v.as_f64()))
            .map_err(|e| Error::io(array_path, e))?;
        writer.finish().map_err(|e| Error::io(array_path, e))?;
        let meta = serde_json::to_string_pretty(&self.metadata())?;
        std::fs::write(meta_path, meta).map_err(|e| Error::io(meta_path, e))
    }

    pub fn import(array_path: &Path, meta_path: &Path) -> Result<Self> {
        let meta_text = std::fs::read_to_string(meta_path).map_err(|e| Error::io(meta_path, e))?;
        let meta: EtfMetadata = serde_json::from_str(&meta_text)?;
        let bytes = std::fs::read(array_path).map_err(|e| Error::io(array_path, e))?;
        let npy = npyz::NpyFile::new(&bytes[..]).map_err(|e| Error::io(array_path, e))?;
        if npy.shape() != [meta.dim as u64, meta.num_classes as u64] {
            return Err(Error::Mismatch(format!(
                "frame array has shape {:?}, metadata says {}x{}",
                npy.shape(),
                meta.dim,
                meta.num_classes
            )));
        }
        if npy.order() != npyz::Order::C {
            return Err(Error::Serde("frame array must be C-ordered".into()));
        }
        let data: Vec<f64> = npy.into_vec().map_err(|e| Error::io(array_path, e))?;
        let m = Matrix::from_vec(meta.dim, meta.num_classes, data.into_iter().map(T::lit).collect())?;
        Self::from_vectors(m, meta.seed)
    }
}

/// Frame built from a seeded random rotation.
pub fn make_simplex_etf<T: Scalar>(
    dim: usize,
    num_classes: usize,
    seed: u64,
) -> Result<SimplexEtf<T>> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(
            "a simplex frame needs at least two classes".into(),
        ));
    }
    let u = make_rotation(dim, num_classes, seed)?;
    SimplexEtf::from_rotation(&u, Some(seed))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtfReport<T> {
    pub passed: bool,
    /// max over columns of `| ‖n_l‖ - 1 |`
    pub max_norm_deviation: T,
    /// max over column pairs of `| n_iᵀn_j + 1/(L-1) |`
    pub max_angle_deviation: T,
}

pub fn verify_etf<T: Scalar>(frame: &SimplexEtf<T>, tol: T) -> EtfReport<T> {
    let l = frame.num_classes();
    let target = -T::one() / T::lit((l - 1) as f64);
    let cols: Vec<Vec<T>> = (0..l).map(|c| frame.column(c)).collect();
    let mut norm_dev = T::zero();
    let mut angle_dev = T::zero();
    for i in 0..l {
        norm_dev = norm_dev.max((l2_norm(&cols[i]) - T::one()).abs());
        for j in (i + 1)..l {
            angle_dev = angle_dev.max((dot(&cols[i], &cols[j]) - target).abs());
        }
    }
    EtfReport {
        passed: norm_dev <= tol && angle_dev <= tol,
        max_norm_deviation: norm_dev,
        max_angle_deviation: angle_dev,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rotation_three_by_three_is_orthonormal() {
        let u = make_rotation::<f64>(3, 3, 0).unwrap();
        let dev = u.matrix().matmul_tn(u.matrix()).max_abs_diff(&Matrix::identity(3));
        assert!(dev < 1e-6);
    }

    #[test]
    fn identity_rotation() {
        let u = OrthonormalMatrix::<f64>::identity(2, 2).unwrap();
        assert_eq!(u.matrix(), &Matrix::identity(2));
    }

    #[test]
    fn rotation_128_by_7_has_orthogonal_columns() {
        // QR route: verify the MGS output by its Gram matrix rather than by construction
        let u = make_rotation::<f64>(128, 7, 42).unwrap();
        let g = u.matrix().matmul_tn(u.matrix());
        for i in 0..7 {
            assert!((g[(i, i)] - 1.0).abs() < 1e-6);
            for j in 0..7 {
                if i != j {
                    assert!(g[(i, j)].abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn rotation_rejects_short_dim() {
        assert!(matches!(make_rotation::<f64>(2, 3, 0), Err(Error::Dimension(_))));
        assert!(matches!(make_simplex_etf::<f64>(4, 5, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn rotation_deterministic() {
        assert_eq!(make_rotation::<f64>(16, 5, 9).unwrap(), make_rotation::<f64>(16, 5, 9).unwrap());
        assert_ne!(make_rotation::<f64>(16, 5, 9).unwrap(), make_rotation::<f64>(16, 5, 10).unwrap());
    }

    #[test]
    fn two_class_identity_frame() {
        let u = OrthonormalMatrix::<f64>::identity(2, 2).unwrap();
        let n = SimplexEtf::from_rotation(&u, None).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let expect = Matrix::from_f64_rows(&[[h, -h], [-h, h]]).unwrap();
        assert!(n.vectors().max_abs_diff(&expect) < 1e-12);
        assert!((dot(&n.column(0), &n.column(1)) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn six_classes_gram_off_diagonal() {
        let n = make_simplex_etf::<f64>(128, 6, 7).unwrap();
        let g = n.gram();
        for i in 0..6 {
            for j in 0..6 {
                let want = if i == j { 1.0 } else { -0.2 };
                assert!((g[(i, j)] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn verify_passes_on_construction() {
        let n = make_simplex_etf::<f64>(8, 3, 1).unwrap();
        assert!(verify_etf(&n, 1e-6).passed);
    }

    #[test]
    fn verify_flags_scaled_column() {
        let n = make_simplex_etf::<f64>(8, 4, 1).unwrap();
        let mut v = n.vectors().clone();
        for r in 0..v.rows() {
            v[(r, 2)] *= 2.0;
        }
        let report = verify_etf(&SimplexEtf::from_vectors(v, None).unwrap(), 1e-6);
        assert!(!report.passed);
        assert!((report.max_norm_deviation - 1.0).abs() < 1e-9);
    }

    #[test]
    fn verify_flags_standard_basis() {
        let basis = SimplexEtf::from_vectors(Matrix::<f64>::identity(3), None).unwrap();
        let report = verify_etf(&basis, 1e-6);
        assert!(!report.passed);
        assert!(report.max_norm_deviation.abs() < 1e-12);
        assert!((report.max_angle_deviation - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_class_rejected() {
        assert!(make_simplex_etf::<f64>(4, 1, 0).is_err());
    }

    #[test]
    fn export_import_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let n = make_simplex_etf::<f32>(12, 4, 3).unwrap();
        let (a, m) = (dir.path().join("etf.npy"), dir.path().join("etf.json"));
        n.export(&a, &m).unwrap();
        let back = SimplexEtf::<f32>::import(&a, &m).unwrap();
        assert_eq!(back, n);
        assert_eq!(back.metadata().seed, Some(3));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn construction_always_verifies(l in 2usize..9, extra in 0usize..24, seed in any::<u64>()) {
            let n = make_simplex_etf::<f64>(l + extra, l, seed).unwrap();
            prop_assert!(verify_etf(&n, 1e-6).passed);
            let lf = l as f64;
            let g = n.gram();
            for i in 0..l {
                for j in 0..l {
                    let want = if i == j { lf / (lf - 1.0) } else { 0.0 } - 1.0 / (lf - 1.0);
                    prop_assert!((g[(i, j)] - want).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn rotation_invariance(l in 2usize..7, extra in 0usize..8, s1 in any::<u64>(), s2 in any::<u64>()) {
            let d = l + extra;
            let n = make_simplex_etf::<f64>(d, l, s1).unwrap();
            let q = make_rotation::<f64>(d, d, s2).unwrap();
            prop_assert!(verify_etf(&n.rotated(&q).unwrap(), 1e-6).passed);
        }
    }
}
