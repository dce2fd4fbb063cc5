//! Embedding post-processing and PLDA scoring.
//!
//! Embeddings are length-normalized, whitened by a global PCA, and per
//! conversation reduced by a PCA fitted to that conversation alone. The PLDA
//! model is the two-covariance one: in its diagonalized space an embedding
//! is `y + e` with `y ~ N(0, diag(psi))` shared by a speaker and
//! `e ~ N(0, I)` drawn per segment.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::container;
use crate::error::{Error, Result};

/// Relative eigenvalue floor below which a covariance counts as singular.
const RANK_TOLERANCE: f64 = 1e-10;

/// Scales `v` to norm `sqrt(D)`.
pub fn length_normalize(v: &DVector<f64>) -> Result<DVector<f64>> {
    let norm = v.norm();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::invalid(format!(
            "cannot length-normalize a vector of norm {norm}"
        )));
    }
    Ok(v * ((v.len() as f64).sqrt() / norm))
}

/// Eigenpairs of a symmetric matrix, largest first. Each eigenvector's
/// largest-magnitude entry is made positive so results do not depend on the
/// solver's sign choice.
pub(crate) fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(i).into_owned();
        let pivot = col.iamax();
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(k, &col);
    }
    (values, vectors)
}

/// Stacks vectors as rows, checking they share a dimension.
pub fn stack_rows(vectors: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let dim = vectors.first().map_or(0, |v| v.len());
    if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
        return Err(Error::Dimension {
            expected: dim,
            actual: v.len(),
            context: "embedding dimension",
        });
    }
    Ok(DMatrix::from_fn(vectors.len(), dim, |r, c| vectors[r][c]))
}

/// Mean and population (1/n) covariance of the rows of `x`.
fn mean_and_covariance(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean = x.row_sum().transpose() / n;
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.tr_mul(&centered) / n;
    (mean, cov)
}

/// Global PCA whitening, optionally reducing dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Whitener {
    pub mean: DVector<f64>,
    /// `K x D`; rows are principal directions scaled by `1/sqrt(lambda)`,
    /// largest eigenvalue first.
    pub transform: DMatrix<f64>,
    /// Kept eigenvalues, descending.
    pub eigenvalues: DVector<f64>,
}

pub fn fit_pca_whitener(embeddings: &[DVector<f64>], out_dim: usize) -> Result<Whitener> {
    let x = stack_rows(embeddings)?;
    let (n, dim) = x.shape();
    if out_dim == 0 || out_dim > dim {
        return Err(Error::invalid(format!(
            "whitening to {out_dim} dims needs 1 <= out_dim <= {dim}"
        )));
    }
    if n <= out_dim {
        return Err(Error::invalid(format!(
            "{n} embeddings cannot whiten to {out_dim} dims"
        )));
    }
    let (mean, cov) = mean_and_covariance(&x);
    let (values, vectors) = sym_eigen_desc(&cov);
    let top = values[0];
    if !(top > 0.0) || values[out_dim - 1] <= top * RANK_TOLERANCE {
        return Err(Error::Numerical(format!(
            "embedding covariance has rank below {out_dim} (eigenvalue {:e} vs largest {top:e})",
            values[out_dim - 1]
        )));
    }
    let mut transform = DMatrix::zeros(out_dim, dim);
    for k in 0..out_dim {
        let row = vectors.column(k).transpose() / values[k].sqrt();
        transform.set_row(k, &row);
    }
    Ok(Whitener {
        mean,
        transform,
        eigenvalues: values.rows(0, out_dim).into_owned(),
    })
}

const WHITENER_MAGIC: &[u8; 4] = b"XWHT";
const PLDA_MAGIC: &[u8; 4] = b"XPLD";
const EMBEDDING_MAGIC: &[u8; 4] = b"XEMB";
const FORMAT_VERSION: u32 = 1;

fn write_matrix<W: Write>(w: &mut W, m: &DMatrix<f64>) -> Result<()> {
    container::write_u32(w, m.nrows() as u32)?;
    container::write_u32(w, m.ncols() as u32)?;
    let row_major: Vec<f64> = m.transpose().iter().copied().collect();
    container::write_f64_blob(w, &row_major)
}

fn read_matrix<R: Read>(r: &mut R) -> Result<DMatrix<f64>> {
    let rows = container::read_u32(r)? as usize;
    let cols = container::read_u32(r)? as usize;
    let data = container::read_f64_blob(r)?;
    if data.len() != rows * cols {
        return Err(Error::Format(format!(
            "{rows}x{cols} matrix stored with {} values",
            data.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

fn read_vector<R: Read>(r: &mut R, len: usize, what: &str) -> Result<DVector<f64>> {
    let data = container::read_f64_blob(r)?;
    if data.len() != len {
        return Err(Error::Format(format!(
            "{what}: expected {len} values, found {}",
            data.len()
        )));
    }
    Ok(DVector::from_vec(data))
}

fn check_version<R: Read>(r: &mut R) -> Result<()> {
    let v = container::read_u32(r)?;
    if v != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {v}")));
    }
    Ok(())
}

impl Whitener {
    pub fn input_dim(&self) -> usize {
        self.transform.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.transform.nrows()
    }

    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                actual: v.len(),
                context: "whitener input",
            });
        }
        Ok(&self.transform * (v - &self.mean))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        container::write_magic(w, WHITENER_MAGIC)?;
        container::write_u32(w, FORMAT_VERSION)?;
        write_matrix(w, &self.transform)?;
        container::write_f64_blob(w, self.mean.as_slice())?;
        container::write_f64_blob(w, self.eigenvalues.as_slice())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        container::expect_magic(r, WHITENER_MAGIC)?;
        check_version(r)?;
        let transform = read_matrix(r)?;
        let mean = read_vector(r, transform.ncols(), "whitener mean")?;
        let eigenvalues = read_vector(r, transform.nrows(), "whitener eigenvalues")?;
        Ok(Whitener {
            mean,
            transform,
            eigenvalues,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Whitener::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// `max(1, ceil(fraction * dim))`, computed so that e.g. 0.1 * 150 is 15.
pub fn conversation_dim(dim: usize, fraction: f64) -> usize {
    let scaled = fraction * dim as f64;
    // 0.1 * 150 evaluates to 15.000000000000002; do not round that up
    let k = (scaled - 1e-9 * scaled.abs().max(1.0)).ceil();
    (k.max(1.0) as usize).min(dim)
}

/// Rows are the top `conversation_dim(K, fraction)` principal directions of
/// the conversation's own covariance. With fewer than two embeddings the
/// first `min(K, n)` coordinate axes are returned instead.
pub fn conversation_pca(embeddings: &[DVector<f64>], fraction: f64) -> Result<DMatrix<f64>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "fraction {fraction} outside (0, 1]"
        )));
    }
    let x = stack_rows(embeddings)?;
    let (n, dim) = x.shape();
    if dim == 0 {
        return Err(Error::invalid(
            "conversation PCA needs at least one embedding",
        ));
    }
    if n < 2 {
        return Ok(DMatrix::identity(n.min(dim), dim));
    }
    let k = conversation_dim(dim, fraction);
    let (_, cov) = mean_and_covariance(&x);
    let (_, vectors) = sym_eigen_desc(&cov);
    Ok(vectors.columns(0, k).transpose())
}

/// Two-covariance PLDA in its diagonalized form.
#[derive(Debug, Clone, PartialEq)]
pub struct PldaModel {
    pub mean: DVector<f64>,
    /// Maps `x - mean` to coordinates where the within-class covariance is
    /// the identity and the between-class covariance is `diag(psi)`.
    pub diagonalizer: DMatrix<f64>,
    /// Between-class variances, descending.
    pub psi: DVector<f64>,
}

impl PldaModel {
    /// Simultaneously diagonalizes `within` (to the identity) and `between`.
    pub fn from_covariances(
        mean: DVector<f64>,
        within: &DMatrix<f64>,
        between: &DMatrix<f64>,
    ) -> Result<Self> {
        let dim = mean.len();
        if within.shape() != (dim, dim) || between.shape() != (dim, dim) {
            return Err(Error::Dimension {
                expected: dim,
                actual: within.nrows(),
                context: "PLDA covariance size",
            });
        }
        let (wv, we) = sym_eigen_desc(within);
        let top = wv.max();
        if !(top > 0.0) || wv.min() <= top * RANK_TOLERANCE {
            return Err(Error::Numerical(format!(
                "within-class scatter is singular (eigenvalues {:e}..{top:e})",
                wv.min()
            )));
        }
        let inv_sqrt = DMatrix::from_diagonal(&wv.map(|l| 1.0 / l.sqrt()));
        let whiten = inv_sqrt * we.transpose();
        let b = &whiten * between * whiten.transpose();
        let (bv, be) = sym_eigen_desc(&b);
        Ok(PldaModel {
            mean,
            diagonalizer: be.transpose() * whiten,
            psi: bv.map(|p| p.max(0.0)),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Covariances `(within, between)` in the input space.
    pub fn covariances(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let inv = self
            .diagonalizer
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("PLDA diagonalizer is singular".into()))?;
        let within = &inv * inv.transpose();
        let between = &inv * DMatrix::from_diagonal(&self.psi) * inv.transpose();
        Ok((within, between))
    }

    /// Coordinates of `x` in the diagonalized space.
    pub fn transform(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                actual: x.len(),
                context: "PLDA input",
            });
        }
        Ok(&self.diagonalizer * (x - &self.mean))
    }

    /// Same-speaker versus different-speaker log-likelihood ratio.
    pub fn score(&self, a: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
        Ok(self.score_transformed(&self.transform(a)?, &self.transform(b)?))
    }

    /// [`PldaModel::score`] on already transformed vectors.
    pub fn score_transformed(&self, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        self.psi
            .iter()
            .zip(u.iter().zip(v.iter()))
            .map(|(&p, (&u, &v))| {
                let sq = u * u + v * v;
                let cross = u * v;
                let s = 2.0 * p + 1.0;
                // log N([u v]; 0, [[p+1, p], [p, p+1]]) - log N(u; 0, p+1) - log N(v; 0, p+1)
                -0.5 * s.ln() + (p + 1.0).ln() - 0.5 * ((p + 1.0) * sq - 2.0 * p * cross) / s
                    + 0.5 * sq / (p + 1.0)
            })
            .sum()
    }

    /// The model seen through `projection` (rows orthonormal), re-diagonalized.
    pub fn project(&self, projection: &DMatrix<f64>) -> Result<PldaModel> {
        if projection.ncols() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                actual: projection.ncols(),
                context: "PLDA projection columns",
            });
        }
        let (within, between) = self.covariances()?;
        PldaModel::from_covariances(
            projection * &self.mean,
            &(projection * within * projection.transpose()),
            &(projection * between * projection.transpose()),
        )
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        container::write_magic(w, PLDA_MAGIC)?;
        container::write_u32(w, FORMAT_VERSION)?;
        write_matrix(w, &self.diagonalizer)?;
        container::write_f64_blob(w, self.mean.as_slice())?;
        container::write_f64_blob(w, self.psi.as_slice())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        container::expect_magic(r, PLDA_MAGIC)?;
        check_version(r)?;
        let diagonalizer = read_matrix(r)?;
        if !diagonalizer.is_square() {
            return Err(Error::Format("PLDA diagonalizer is not square".into()));
        }
        let mean = read_vector(r, diagonalizer.ncols(), "PLDA mean")?;
        let psi = read_vector(r, diagonalizer.nrows(), "PLDA psi")?;
        Ok(PldaModel {
            mean,
            diagonalizer,
            psi,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        PldaModel::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Scatter-based two-covariance estimate from labelled embeddings.
///
/// The within-class covariance is the pooled unbiased scatter around class
/// means. Class means scatter with `between + within / n_c`, so the
/// between-class estimate subtracts the average `within / n_c`.
pub fn fit_plda<L: Ord + Clone>(embeddings: &[DVector<f64>], labels: &[L]) -> Result<PldaModel> {
    if embeddings.len() != labels.len() {
        return Err(Error::Dimension {
            expected: embeddings.len(),
            actual: labels.len(),
            context: "PLDA labels per embedding",
        });
    }
    let x = stack_rows(embeddings)?;
    let (n, dim) = x.shape();
    let mut classes: BTreeMap<L, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        classes.entry(l.clone()).or_default().push(i);
    }
    let c = classes.len();
    if c < 2 {
        return Err(Error::invalid("PLDA needs at least two speakers"));
    }
    if n <= c {
        return Err(Error::invalid(
            "PLDA needs some speaker with two or more embeddings",
        ));
    }
    let mean = x.row_sum().transpose() / n as f64;
    let mut within = DMatrix::zeros(dim, dim);
    let mut means_scatter = DMatrix::zeros(dim, dim);
    let mut inv_count = 0.0;
    for members in classes.values() {
        let m = members
            .iter()
            .map(|&i| embeddings[i].clone())
            .sum::<DVector<f64>>()
            / members.len() as f64;
        for &i in members {
            let d = &embeddings[i] - &m;
            within.ger(1.0, &d, &d, 1.0);
        }
        let d = &m - &mean;
        means_scatter.ger(1.0, &d, &d, 1.0);
        inv_count += 1.0 / members.len() as f64;
    }
    within /= (n - c) as f64;
    let between = means_scatter / (c - 1) as f64 - &within * (inv_count / c as f64);
    PldaModel::from_covariances(mean, &within, &between)
}

/// Symmetric matrix of pairwise PLDA scores; the diagonal is zero and
/// carries no meaning.
pub fn score_matrix(model: &PldaModel, embeddings: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let t = embeddings
        .iter()
        .map(|e| model.transform(e))
        .collect::<Result<Vec<_>>>()?;
    let n = t.len();
    let mut s = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v = model.score_transformed(&t[i], &t[j]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    Ok(s)
}

/// A segment embedding keyed by its segment id.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub id: String,
    pub vector: DVector<f64>,
}

pub fn write_embeddings<W: Write>(w: &mut W, embeddings: &[Embedding]) -> Result<()> {
    let dim = embeddings.first().map_or(0, |e| e.vector.len());
    container::write_magic(w, EMBEDDING_MAGIC)?;
    container::write_u32(w, embeddings.len() as u32)?;
    container::write_u32(w, dim as u32)?;
    for e in embeddings {
        if e.vector.len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                actual: e.vector.len(),
                context: "embedding dimension",
            });
        }
        let id = e.id.as_bytes();
        let len = u16::try_from(id.len())
            .map_err(|_| Error::invalid(format!("segment id too long: {}", e.id)))?;
        container::write_u16(w, len)?;
        w.write_all(id)?;
        container::write_f32s(w, e.vector.iter().map(|&v| v as f32))?;
    }
    Ok(())
}

pub fn read_embeddings<R: Read>(r: &mut R) -> Result<Vec<Embedding>> {
    container::expect_magic(r, EMBEDDING_MAGIC)?;
    let count = container::read_u32(r)? as usize;
    let dim = container::read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = container::read_u16(r)? as usize;
        let mut id = vec![0u8; len];
        r.read_exact(&mut id)?;
        let id = String::from_utf8(id)
            .map_err(|e| Error::Format(format!("segment id is not UTF-8: {e}")))?;
        let values = container::read_f32s(r, dim)?;
        out.push(Embedding {
            id,
            vector: DVector::from_iterator(dim, values.into_iter().map(f64::from)),
        });
    }
    Ok(out)
}

pub fn save_embeddings(path: impl AsRef<Path>, embeddings: &[Embedding]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_embeddings(&mut w, embeddings)?;
    w.flush()?;
    Ok(())
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Vec<Embedding>> {
    read_embeddings(&mut BufReader::new(File::open(path)?))
}
