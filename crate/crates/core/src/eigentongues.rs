//! EigenTongues: PCA over flattened, resized ultrasound frames.
//!
//! The fit uses an unbiased (n - 1) covariance. When frames outnumber pixels
//! the d x d covariance is decomposed directly, otherwise the n x n Gram
//! matrix is decomposed and its eigenvectors are mapped back to pixel space.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

pub const DEFAULT_VARIANCE_TARGET: f64 = 0.70;
pub const DEFAULT_MAX_COMPONENTS: usize = 128;

const MAGIC: &[u8; 4] = b"ETNG";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EigenTonguesModel {
    pub mean: Array1<f64>,
    /// k x d, orthonormal rows.
    pub basis: Array2<f64>,
    /// Non-increasing, length k.
    pub eigenvalues: Array1<f64>,
    pub variance_target: f64,
    /// Fraction of total variance captured by the kept components.
    pub variance_retained: f64,
    pub total_variance: f64,
}

impl EigenTonguesModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn n_components(&self) -> usize {
        self.basis.nrows()
    }

    pub fn explained_variance_ratio(&self) -> Array1<f64> {
        self.eigenvalues.mapv(|v| v / self.total_variance)
    }

    pub fn transform(&self, frame: ArrayView1<f64>) -> Result<Array1<f64>> {
        if frame.len() != self.dim() {
            return Err(Error::Argument(format!(
                "frame length {} does not match model dimension {}",
                frame.len(),
                self.dim()
            )));
        }
        let centered = &frame - &self.mean;
        Ok(self.basis.dot(&centered))
    }

    /// Projects every row of `frames`.
    pub fn transform_rows(&self, frames: ArrayView2<f64>) -> Result<Array2<f64>> {
        if frames.ncols() != self.dim() {
            return Err(Error::Argument(format!(
                "frame length {} does not match model dimension {}",
                frames.ncols(),
                self.dim()
            )));
        }
        let centered = &frames - &self.mean.view().insert_axis(Axis(0));
        Ok(centered.dot(&self.basis.t()))
    }

    pub fn inverse_transform(&self, coeffs: ArrayView1<f64>) -> Result<Array1<f64>> {
        if coeffs.len() != self.n_components() {
            return Err(Error::Argument(format!(
                "coefficient length {} does not match component count {}",
                coeffs.len(),
                self.n_components()
            )));
        }
        Ok(&self.mean + &self.basis.t().dot(&coeffs))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (k, d) = self.basis.dim();
        let mut out = Vec::with_capacity(48 + 8 * (d + k + k * d));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(d as u64).to_le_bytes());
        out.extend_from_slice(&(k as u64).to_le_bytes());
        for v in [self.variance_target, self.variance_retained, self.total_variance] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.mean.iter().chain(self.eigenvalues.iter()).chain(self.basis.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = crate::binio::Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not an eigentongues model file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported eigentongues model version {version}")));
        }
        let d = r.u64()? as usize;
        let k = r.u64()? as usize;
        let variance_target = r.f64()?;
        let variance_retained = r.f64()?;
        let total_variance = r.f64()?;
        let mean = Array1::from(r.f64_vec(d)?);
        let eigenvalues = Array1::from(r.f64_vec(k)?);
        let basis = Array2::from_shape_vec((k, d), r.f64_vec(k * d)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        r.finish()?;
        Ok(Self {
            mean,
            basis,
            eigenvalues,
            variance_target,
            variance_retained,
            total_variance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Fits the compressor on rows of `frames` (n x d). Keeps the smallest `k`
/// whose cumulative variance fraction reaches `variance_target`, then
/// truncates to `max_components` if given.
pub fn fit_pca(
    frames: ArrayView2<f64>,
    variance_target: f64,
    max_components: Option<usize>,
) -> Result<EigenTonguesModel> {
    let (n, d) = frames.dim();
    if n < 2 {
        return Err(Error::Data(format!("PCA needs at least 2 frames, got {n}")));
    }
    if d == 0 {
        return Err(Error::Data("PCA frames have zero length".into()));
    }
    if !(variance_target > 0.0 && variance_target <= 1.0) {
        return Err(Error::Argument(format!(
            "variance target must be in (0, 1], got {variance_target}"
        )));
    }
    if max_components == Some(0) {
        return Err(Error::Argument("max_components must be >= 1".into()));
    }

    let mean = frames.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &frames - &mean.view().insert_axis(Axis(0));
    let denom = (n - 1) as f64;
    let total_variance = centered.iter().map(|v| v * v).sum::<f64>() / denom;
    if !(total_variance > 0.0) {
        return Err(Error::Data("frames have zero total variance".into()));
    }

    let (eigenvalues, basis) = if d <= n {
        covariance_route(&centered, denom)
    } else {
        gram_route(&centered, denom)
    };

    let mut cumulative = 0.0;
    let mut k = eigenvalues.len();
    for (i, &ev) in eigenvalues.iter().enumerate() {
        cumulative += ev;
        if cumulative / total_variance >= variance_target - 1e-12 {
            k = i + 1;
            break;
        }
    }
    if let Some(cap) = max_components {
        k = k.min(cap);
    }
    k = k.max(1).min(eigenvalues.len());

    let eigenvalues = Array1::from(eigenvalues[..k].to_vec());
    let mut basis = basis.slice(ndarray::s![..k, ..]).to_owned();
    orient_rows(&mut basis);
    let variance_retained = (eigenvalues.sum() / total_variance).min(1.0);

    Ok(EigenTonguesModel {
        mean,
        basis,
        eigenvalues,
        variance_target,
        variance_retained,
        total_variance,
    })
}

/// Eigenpairs sorted by non-increasing eigenvalue, negative round-off clamped to 0.
fn sorted_eigen(sym: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    (values, vectors)
}

fn to_nalgebra(a: &Array2<f64>) -> DMatrix<f64> {
    let (r, c) = a.dim();
    DMatrix::from_fn(r, c, |i, j| a[[i, j]])
}

fn covariance_route(centered: &Array2<f64>, denom: f64) -> (Vec<f64>, Array2<f64>) {
    let cov = centered.t().dot(centered) / denom;
    let (values, vectors) = sorted_eigen(to_nalgebra(&cov));
    let d = cov.nrows();
    let basis = Array2::from_shape_fn((values.len(), d), |(k, j)| vectors[(j, k)]);
    (values, basis)
}

fn gram_route(centered: &Array2<f64>, denom: f64) -> (Vec<f64>, Array2<f64>) {
    let gram = centered.dot(&centered.t()) / denom;
    let (values, vectors) = sorted_eigen(to_nalgebra(&gram));
    let n = gram.nrows();
    let scale_floor = values.first().copied().unwrap_or(0.0) * 1e-12;
    // centring leaves at most n - 1 informative directions
    let usable: Vec<usize> = (0..values.len().min(n - 1))
        .filter(|&k| values[k] > scale_floor)
        .collect();
    let u = Array2::from_shape_fn((n, usable.len()), |(i, c)| vectors[(i, usable[c])]);
    let mut basis = u.t().dot(centered);
    for (mut row, &k) in basis.rows_mut().into_iter().zip(&usable) {
        let norm = (values[k] * denom).sqrt();
        row.map_inplace(|v| *v /= norm);
    }
    reorthonormalize(&mut basis);
    let values = usable.iter().map(|&k| values[k]).collect();
    (values, basis)
}

/// Modified Gram-Schmidt over rows.
fn reorthonormalize(basis: &mut Array2<f64>) {
    for i in 0..basis.nrows() {
        for j in 0..i {
            let proj = basis.row(i).dot(&basis.row(j));
            let prev = basis.row(j).to_owned();
            basis.row_mut(i).scaled_add(-proj, &prev);
        }
        let norm = basis.row(i).dot(&basis.row(i)).sqrt();
        if norm > 0.0 {
            basis.row_mut(i).map_inplace(|v| *v /= norm);
        }
    }
}

/// Flips each row so its largest-magnitude entry is positive.
fn orient_rows(basis: &mut Array2<f64>) {
    for mut row in basis.rows_mut() {
        let mut pivot = 0.0f64;
        for &v in row.iter() {
            if v.abs() > pivot.abs() {
                pivot = v;
            }
        }
        if pivot < 0.0 {
            row.map_inplace(|v| *v = -*v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frames(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |(_, j)| rng.gen_range(-1.0..1.0) * (1.0 + j as f64))
    }

    #[test]
    fn single_axis_variance() {
        let frames = Array2::from_shape_fn((20, 5), |(i, j)| if j == 2 { i as f64 } else { 3.0 });
        let model = fit_pca(frames.view(), 0.70, None).unwrap();
        assert_eq!(model.n_components(), 1);
        let row = model.basis.row(0);
        assert!((row[2] - 1.0).abs() < 1e-10);
        for j in [0, 1, 3, 4] {
            assert!(row[j].abs() < 1e-10);
        }
        assert!((model.variance_retained - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_frames() {
        let frames = array![[1.0, 2.0]];
        assert!(matches!(fit_pca(frames.view(), 0.7, None), Err(Error::Data(_))));
    }

    #[test]
    fn zero_variance() {
        let frames = Array2::from_elem((5, 3), 4.0);
        assert!(matches!(fit_pca(frames.view(), 0.7, None), Err(Error::Data(_))));
    }

    #[test]
    fn cap_truncates() {
        let frames = random_frames(50, 8, 3);
        let full = fit_pca(frames.view(), 1.0, None).unwrap();
        assert_eq!(full.n_components(), 8);
        let capped = fit_pca(frames.view(), 1.0, Some(3)).unwrap();
        assert_eq!(capped.n_components(), 3);
        assert!(capped.variance_retained < 1.0);
    }

    #[test]
    fn transform_of_mean_is_zero() {
        let frames = random_frames(40, 6, 1);
        let model = fit_pca(frames.view(), 0.9, None).unwrap();
        let coeffs = model.transform(model.mean.view()).unwrap();
        assert!(coeffs.iter().all(|c| c.abs() < 1e-12));
        let back = model.inverse_transform(Array1::zeros(model.n_components()).view()).unwrap();
        assert_eq!(back, model.mean);
    }

    #[test]
    fn transform_along_first_axis() {
        let frames = random_frames(40, 6, 2);
        let model = fit_pca(frames.view(), 0.9, None).unwrap();
        let x = &model.mean + &(&model.basis.row(0) * 3.0);
        let c = model.transform(x.view()).unwrap();
        assert!((c[0] - 3.0).abs() < 1e-10);
        assert!(c.iter().skip(1).all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn length_mismatch() {
        let frames = random_frames(10, 4, 9);
        let model = fit_pca(frames.view(), 0.9, None).unwrap();
        assert!(matches!(model.transform(Array1::zeros(3).view()), Err(Error::Argument(_))));
        let k = model.n_components();
        assert!(matches!(
            model.inverse_transform(Array1::zeros(k + 1).view()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn full_rank_round_trip() {
        let frames = random_frames(30, 5, 4);
        let model = fit_pca(frames.view(), 1.0, None).unwrap();
        for row in frames.rows() {
            let back = model.inverse_transform(model.transform(row).unwrap().view()).unwrap();
            for (a, b) in back.iter().zip(row.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gram_route_matches_covariance_route() {
        // d > n forces the Gram route; compare against the covariance route on the same data
        let frames = random_frames(12, 30, 5);
        let gram = fit_pca(frames.view(), 1.0, None).unwrap();
        assert_eq!(gram.n_components(), 11);
        let mean = frames.mean_axis(Axis(0)).unwrap();
        let centered = &frames - &mean.insert_axis(Axis(0));
        let (values, basis) = covariance_route(&centered, 11.0);
        for k in 0..11 {
            assert!((gram.eigenvalues[k] - values[k]).abs() < 1e-9 * values[0]);
            let dot = gram.basis.row(k).dot(&basis.row(k)).abs();
            assert!((dot - 1.0).abs() < 1e-8, "component {k}: |dot| = {dot}");
        }
    }

    #[test]
    fn sign_convention() {
        let frames = random_frames(25, 7, 6);
        let model = fit_pca(frames.view(), 1.0, None).unwrap();
        for row in model.basis.rows() {
            let pivot = row.iter().copied().fold(0.0f64, |p, v| if v.abs() > p.abs() { v } else { p });
            assert!(pivot > 0.0);
        }
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let frames = random_frames(25, 7, 7);
        let model = fit_pca(frames.view(), 0.8, None).unwrap();
        let back = EigenTonguesModel::from_bytes(&model.to_bytes()).unwrap();
        assert_eq!(back, model);
        let mut bytes = model.to_bytes();
        bytes.pop();
        assert!(EigenTonguesModel::from_bytes(&bytes).is_err());
    }
}
