//! Gaussian feature statistics and the Fréchet distance between them.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TSFS";
const VERSION: u32 = 1;
/// Added to both covariances when either is this close to singular.
pub const COV_REGULARIZATION: f64 = 1e-6;
const EIGEN_EPS: f64 = 1e-14;
const EIGEN_MAX_ITER: usize = 10_000;

/// Single-pass mean and co-moment accumulation (Welford, with Chan's merge).
#[derive(Clone, Debug, PartialEq)]
pub struct StatsAccumulator {
    dim: usize,
    count: u64,
    mean: DVector<f64>,
    comoment: DMatrix<f64>,
}

impl StatsAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            count: 0,
            mean: DVector::zeros(dim),
            comoment: DMatrix::zeros(dim, dim),
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::shape(format!(
                "feature of dimension {} pushed into {}-dimensional statistics",
                x.len(),
                self.dim
            )));
        }
        self.count += 1;
        let x = DVector::from_column_slice(x);
        let before = &x - &self.mean;
        self.mean += &before / self.count as f64;
        let after = &x - &self.mean;
        self.comoment += &before * after.transpose();
        Ok(())
    }

    pub fn extend<'a>(&mut self, xs: impl IntoIterator<Item = &'a [f64]>) -> Result<()> {
        xs.into_iter().try_for_each(|x| self.push(x))
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::shape("merging statistics of different dimension"));
        }
        if other.count == 0 {
            return Ok(());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta = &other.mean - &self.mean;
        self.comoment += &other.comoment + &delta * delta.transpose() * (na * nb / n);
        self.mean += delta * (nb / n);
        self.count += other.count;
        Ok(())
    }

    pub fn finish(&self) -> Result<FeatureStats> {
        if self.count < 2 {
            return Err(Error::invalid(format!(
                "feature statistics need at least 2 samples, got {}",
                self.count
            )));
        }
        let mut cov = &self.comoment / (self.count as f64 - 1.0);
        symmetrize(&mut cov);
        Ok(FeatureStats {
            mean: self.mean.clone(),
            cov,
            count: self.count,
        })
    }
}

/// Mean, unbiased covariance and sample count of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: u64,
}

impl FeatureStats {
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let dim = features
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::invalid("no features"))?;
        let mut acc = StatsAccumulator::new(dim);
        acc.extend(features.iter().map(Vec::as_slice))?;
        acc.finish()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `MAGIC, version u32, dim u64, count u64, mean, covariance (row-major)`,
    /// little-endian f64 throughout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.dim();
        let mut out = Vec::with_capacity(24 + 8 * d * (d + 1));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(d as u64).to_le_bytes());
        out.extend_from_slice(&self.count.to_le_bytes());
        for v in self.mean.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for r in 0..d {
            for c in 0..d {
                out.extend_from_slice(&self.cov[(r, c)].to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Corrupt(format!("feature statistics: {m}"));
        if bytes.len() < 24 || &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let d = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let count = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
        let expected = d
            .checked_mul(d + 1)
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| n.checked_add(24))
            .ok_or_else(|| corrupt("dimension overflow"))?;
        if bytes.len() != expected {
            return Err(corrupt("length does not match dimension"));
        }
        let floats: Vec<f64> = bytes[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self {
            mean: DVector::from_column_slice(&floats[..d]),
            cov: DMatrix::from_row_slice(d, d, &floats[d..]),
            count,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

fn eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut m = m.clone();
    symmetrize(&mut m);
    SymmetricEigen::try_new(m.clone(), EIGEN_EPS, EIGEN_MAX_ITER).ok_or_else(|| {
        let diag_max = m.diagonal().amax();
        Error::Numerical(format!(
            "eigendecomposition of {what} ({0}x{0}, max |diag| {diag_max:.3e}) did not converge",
            m.nrows()
        ))
    })
}

/// Principal square root of a symmetric positive semi-definite matrix;
/// negative eigenvalues from rounding are clamped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = eigen(m, "matrix")?;
    let roots = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose())
}

fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    Ok(eigen(m, "covariance")?.eigenvalues.min())
}

/// `|μa - μb|² + Tr(Σa + Σb - 2 (Σa^½ Σb Σa^½)^½)`.
///
/// `Tr((Σa Σb)^½)` is taken through the symmetric product `Σa^½ Σb Σa^½`,
/// which has the same eigenvalues. If either covariance has an eigenvalue
/// below [`COV_REGULARIZATION`], that amount is added to both diagonals.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!(
            "Fréchet distance between {}- and {}-dimensional statistics",
            a.dim(),
            b.dim()
        )));
    }
    let mut sa = a.cov.clone();
    let mut sb = b.cov.clone();
    if min_eigenvalue(&sa)? < COV_REGULARIZATION || min_eigenvalue(&sb)? < COV_REGULARIZATION {
        let reg = DMatrix::identity(a.dim(), a.dim()) * COV_REGULARIZATION;
        sa += &reg;
        sb += reg;
    }
    let root_a = sqrtm_psd(&sa)?;
    let product = &root_a * &sb * &root_a;
    let tr_sqrt: f64 = eigen(&product, "covariance product")?
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let dm = (&a.mean - &b.mean).norm_squared();
    let fd = dm + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    if !fd.is_finite() {
        return Err(Error::Numerical("Fréchet distance is not finite".into()));
    }
    Ok(fd.max(0.0))
}
