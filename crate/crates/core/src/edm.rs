//! Pairwise-distance geometry.
//!
//! Distance matrices, the double-centered Gram spectrum, classical MDS,
//! least-squares similarity alignment, node permutations and the windowed
//! Gaussian ranging-noise model.

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, WipError};

/// Ordered 3D point set: body joints first, then anchors when present.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseFrame {
    pub points: Vec<Vector3<f64>>,
}

impl PoseFrame {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        Self { points }
    }

    pub fn from_rows(rows: &[[f64; 3]]) -> Self {
        Self {
            points: rows.iter().map(|r| Vector3::new(r[0], r[1], r[2])).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|c| c.is_finite()))
    }

    pub fn centroid(&self) -> Vector3<f64> {
        let n = self.points.len().max(1) as f64;
        self.points.iter().fold(Vector3::zeros(), |acc, p| acc + p) / n
    }

    /// Keeps only the listed nodes, in the given order.
    pub fn select(&self, indices: &[usize]) -> PoseFrame {
        PoseFrame::new(indices.iter().map(|&i| self.points[i]).collect())
    }

    pub fn map(&self, f: impl Fn(&Vector3<f64>) -> Vector3<f64>) -> PoseFrame {
        PoseFrame::new(self.points.iter().map(f).collect())
    }
}

/// Symmetric matrix of inter-node distances.
///
/// `measured` marks raw or corrupted data; those matrices may hold negative
/// entries and a non-zero diagonal until they are clamped at model ingest.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub values: DMatrix<f64>,
    pub measured: bool,
}

impl DistanceMatrix {
    /// Wraps raw measurements, symmetrizing them as `(A + Aᵀ) / 2`.
    pub fn from_measured(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != values.ncols() {
            return Err(WipError::invalid(format!(
                "distance matrix must be square, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(WipError::invalid("distance matrix has non-finite entries"));
        }
        let sym = (&values + values.transpose()) * 0.5;
        Ok(Self {
            values: sym,
            measured: true,
        })
    }

    /// Wraps a matrix that is already a clean distance matrix. Only checks shape.
    pub fn from_clean(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != values.ncols() {
            return Err(WipError::invalid("distance matrix must be square"));
        }
        Ok(Self {
            values,
            measured: false,
        })
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    /// Principal submatrix over `indices`, in the given order.
    pub fn submatrix(&self, indices: &[usize]) -> DistanceMatrix {
        let n = indices.len();
        let values = DMatrix::from_fn(n, n, |i, j| self.values[(indices[i], indices[j])]);
        DistanceMatrix {
            values,
            measured: self.measured,
        }
    }

    /// Copy with negative entries set to zero, as fed to the network.
    pub fn clamped(&self) -> DistanceMatrix {
        DistanceMatrix {
            values: self.values.map(|v| v.max(0.0)),
            measured: self.measured,
        }
    }

    /// Row-major entries.
    pub fn to_row_major(&self) -> Vec<f64> {
        let n = self.size();
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                out.push(self.values[(i, j)]);
            }
        }
        out
    }

    pub fn from_row_major(n: usize, data: &[f64], measured: bool) -> Result<Self> {
        if data.len() != n * n {
            return Err(WipError::invalid(format!(
                "expected {} entries for a {n}x{n} matrix, got {}",
                n * n,
                data.len()
            )));
        }
        let values = DMatrix::from_row_slice(n, n, data);
        if measured {
            Self::from_measured(values)
        } else {
            Self::from_clean(values)
        }
    }
}

/// Full pairwise Euclidean distance matrix of a frame.
pub fn pwd(frame: &PoseFrame) -> Result<DistanceMatrix> {
    if !frame.is_finite() {
        return Err(WipError::invalid("pose frame has non-finite coordinates"));
    }
    let n = frame.len();
    let mut values = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = (frame.points[i] - frame.points[j]).norm();
            values[(i, j)] = d;
            values[(j, i)] = d;
        }
    }
    Ok(DistanceMatrix {
        values,
        measured: false,
    })
}

/// Double-centered Gram matrix `-1/2 · C (D∘D) C` with `C = I - 11ᵀ/n`.
pub fn centered_gram(d: &DistanceMatrix) -> DMatrix<f64> {
    let n = d.size();
    let sq = d.values.map(|v| v * v);
    let row_means: Vec<f64> = (0..n).map(|i| sq.row(i).mean()).collect();
    let col_means: Vec<f64> = (0..n).map(|j| sq.column(j).mean()).collect();
    let grand = sq.mean();
    DMatrix::from_fn(n, n, |i, j| {
        -0.5 * (sq[(i, j)] - row_means[i] - col_means[j] + grand)
    })
}

fn check_square_symmetric(d: &DistanceMatrix) -> Result<()> {
    let n = d.size();
    if d.values.ncols() != n {
        return Err(WipError::invalid("distance matrix must be square"));
    }
    let scale = d.values.amax().max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            if (d.values[(i, j)] - d.values[(j, i)]).abs() > 1e-9 * scale {
                return Err(WipError::invalid(format!(
                    "distance matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// Classical (Torgerson) MDS into `dim ≤ 3` dimensions, zero-padded to 3D.
///
/// The embedding is centered at the origin. Reflection is left unresolved.
pub fn classical_mds(d: &DistanceMatrix, dim: usize) -> Result<PoseFrame> {
    check_square_symmetric(d)?;
    let n = d.size();
    if n == 0 {
        return Err(WipError::invalid("empty distance matrix"));
    }
    if n == 1 {
        return Ok(PoseFrame::new(vec![Vector3::zeros()]));
    }
    if dim == 0 || dim > 3 {
        return Err(WipError::invalid(format!(
            "embedding dimension must be in 1..=3, got {dim}"
        )));
    }
    if dim > n - 1 {
        return Err(WipError::invalid(format!(
            "embedding dimension {dim} exceeds n - 1 = {} for {n} nodes",
            n - 1
        )));
    }
    let gram = centered_gram(d);
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut points = vec![Vector3::zeros(); n];
    for (axis, &k) in order.iter().take(dim).enumerate() {
        let lambda = eig.eigenvalues[k].max(0.0);
        let s = lambda.sqrt();
        for (i, p) in points.iter_mut().enumerate() {
            p[axis] = eig.eigenvectors[(i, k)] * s;
        }
    }
    let frame = PoseFrame::new(points);
    let c = frame.centroid();
    Ok(frame.map(|p| p - c))
}

/// Similarity transform `x ↦ scale · R x + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }

    pub fn apply_frame(&self, frame: &PoseFrame) -> PoseFrame {
        frame.map(|p| self.apply(p))
    }

    pub fn is_reflection(&self) -> bool {
        self.rotation.determinant() < 0.0
    }
}

/// Result of [`procrustes_align`].
#[derive(Clone, Debug)]
pub struct Alignment {
    pub aligned: PoseFrame,
    pub transform: Similarity,
    /// Sum of squared point residuals after alignment.
    pub residual: f64,
}

/// Numerical rank of a centered point set (0 coincident, 1 collinear, 2 planar, 3 general).
pub fn point_rank(frame: &PoseFrame) -> usize {
    let c = frame.centroid();
    let mut cov = Matrix3::zeros();
    for p in &frame.points {
        let q = p - c;
        cov += q * q.transpose();
    }
    let sv = cov.symmetric_eigenvalues().map(|v| v.abs().sqrt());
    let top = sv.max();
    if top <= 1e-12 {
        return 0;
    }
    sv.iter().filter(|&&s| s > 1e-9 * top).count()
}

/// Least-squares similarity (Kabsch–Umeyama) mapping `source` onto `target`.
pub fn procrustes_align(
    source: &PoseFrame,
    target: &PoseFrame,
    allow_scale: bool,
    allow_reflection: bool,
) -> Result<Alignment> {
    if source.len() != target.len() {
        return Err(WipError::invalid(format!(
            "point count mismatch: {} vs {}",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(WipError::DegenerateGeometry {
            rank: point_rank(source),
            message: "at least 3 points are required".into(),
        });
    }
    for (name, f) in [("source", source), ("target", target)] {
        let rank = point_rank(f);
        if rank < 2 {
            return Err(WipError::DegenerateGeometry {
                rank,
                message: format!("{name} points are collinear or coincident"),
            });
        }
    }
    let cs = source.centroid();
    let ct = target.centroid();
    let mut h = Matrix3::zeros();
    let mut src_var = 0.0;
    for (s, t) in source.points.iter().zip(&target.points) {
        let a = s - cs;
        let b = t - ct;
        h += b * a.transpose();
        src_var += a.norm_squared();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut correction = Matrix3::identity();
    if !allow_reflection && (u * v_t).determinant() < 0.0 {
        // Flip the axis paired with the smallest singular value.
        let (k, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("three singular values");
        correction[(k, k)] = -1.0;
    }
    let rotation = u * correction * v_t;
    let scale = if allow_scale {
        let trace: f64 = (0..3)
            .map(|k| svd.singular_values[k] * correction[(k, k)])
            .sum();
        trace / src_var
    } else {
        1.0
    };
    let translation = ct - rotation * cs * scale;
    let transform = Similarity {
        rotation,
        translation,
        scale,
    };
    let aligned = transform.apply_frame(source);
    let residual = aligned
        .points
        .iter()
        .zip(&target.points)
        .map(|(a, b)| (a - b).norm_squared())
        .sum();
    Ok(Alignment {
        aligned,
        transform,
        residual,
    })
}

/// Bijection on node indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let n = mapping.len();
        let mut seen = vec![false; n];
        for &m in &mapping {
            if m >= n || seen[m] {
                return Err(WipError::invalid("mapping is not a bijection"));
            }
            seen[m] = true;
        }
        Ok(Self(mapping))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn random<R: rand::Rng>(n: usize, rng: &mut R) -> Self {
        use rand::seq::SliceRandom;
        let mut v: Vec<usize> = (0..n).collect();
        v.shuffle(rng);
        Self(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn apply(&self, i: usize) -> usize {
        self.0[i]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (i, &m) in self.0.iter().enumerate() {
            inv[m] = i;
        }
        Self(inv)
    }
}

/// `D'[i][j] = D[π(i)][π(j)]`.
pub fn permute(d: &DistanceMatrix, p: &Permutation) -> Result<DistanceMatrix> {
    if p.len() != d.size() {
        return Err(WipError::invalid(format!(
            "permutation over {} nodes applied to {}x{} matrix",
            p.len(),
            d.size(),
            d.size()
        )));
    }
    Ok(d.submatrix(p.as_slice()))
}

/// Parameters of the windowed Gaussian ranging-noise model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma: f64,
    pub window: usize,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn new(sigma: f64, window: usize, seed: u64) -> Result<Self> {
        let cfg = Self {
            sigma,
            window,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn clean() -> Self {
        Self {
            sigma: 0.0,
            window: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(WipError::invalid(format!(
                "sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(WipError::invalid(format!(
                "noise window must be odd and >= 1, got {}",
                self.window
            )));
        }
        Ok(())
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma: 0.15,
            window: 5,
            seed: 0,
        }
    }
}

/// Adds symmetric zero-diagonal Gaussian noise to every frame, then takes a
/// centered moving average of width `cfg.window`.
///
/// Frames near either end average over the truncated window and divide by
/// the number of frames actually present. Negative entries are kept.
pub fn corrupt(sequence: &[DistanceMatrix], cfg: &NoiseConfig) -> Result<Vec<DistanceMatrix>> {
    cfg.validate()?;
    if sequence.len() < cfg.window {
        return Err(WipError::invalid(format!(
            "noise window {} is longer than the sequence ({} frames)",
            cfg.window,
            sequence.len()
        )));
    }
    let n = sequence[0].size();
    if sequence.iter().any(|d| d.size() != n) {
        return Err(WipError::invalid("all matrices must share one size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noisy: Vec<DMatrix<f64>> = if cfg.sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.sigma).expect("sigma validated");
        sequence
            .iter()
            .map(|d| {
                let mut m = d.values.clone();
                for i in 0..n {
                    for j in (i + 1)..n {
                        let e = normal.sample(&mut rng);
                        m[(i, j)] += e;
                        m[(j, i)] += e;
                    }
                }
                m
            })
            .collect()
    } else {
        sequence.iter().map(|d| d.values.clone()).collect()
    };
    let half = cfg.window / 2;
    let len = sequence.len();
    let out = (0..len)
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + half).min(len - 1);
            let mut acc = DMatrix::zeros(n, n);
            for m in &noisy[lo..=hi] {
                acc += m;
            }
            DistanceMatrix {
                values: acc / (hi - lo + 1) as f64,
                measured: true,
            }
        })
        .collect();
    Ok(out)
}

/// Spectral and metric diagnostics of one distance matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenReport {
    /// Centered-Gram eigenvalues sorted by descending magnitude.
    pub by_magnitude: Vec<f64>,
    /// Same eigenvalues sorted by descending signed value.
    pub by_value: Vec<f64>,
    /// Cumulative explained variance for k = 1..=5.
    pub cev: [f64; 5],
    /// Fraction of ordered distinct triples satisfying the triangle inequality.
    pub tis: f64,
}

impl EigenReport {
    pub fn cev(&self, k: usize) -> f64 {
        self.cev[k.clamp(1, 5) - 1]
    }

    /// Eigenvalues left after dropping the three largest, under either ordering.
    pub fn residual_spectrum(&self, by_magnitude: bool) -> &[f64] {
        let v = if by_magnitude {
            &self.by_magnitude
        } else {
            &self.by_value
        };
        &v[v.len().min(3)..]
    }
}

/// Fraction of ordered triples `(i, j, k)`, pairwise distinct, with
/// `D_ij + D_jk - D_ik >= 0`. A tolerance of `1e-12 · max|D|` absorbs
/// round-off on collinear triples.
pub fn triangle_inequality_score(d: &DistanceMatrix) -> f64 {
    let n = d.size();
    if n < 3 {
        return 1.0;
    }
    let tol = 1e-12 * d.values.amax().max(f64::MIN_POSITIVE);
    let v = &d.values;
    let mut ok = 0usize;
    let mut total = 0usize;
    for i in 0..n {
        for j in 0..n {
            if j == i {
                continue;
            }
            for k in 0..n {
                if k == i || k == j {
                    continue;
                }
                total += 1;
                if v[(i, j)] + v[(j, k)] - v[(i, k)] >= -tol {
                    ok += 1;
                }
            }
        }
    }
    ok as f64 / total as f64
}

pub fn eigen_report(d: &DistanceMatrix) -> Result<EigenReport> {
    check_square_symmetric(d)?;
    let gram = centered_gram(d);
    let eig = SymmetricEigen::new(gram);
    let mut by_value: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    by_value.sort_by(|a, b| b.total_cmp(a));
    let mut by_magnitude = by_value.clone();
    by_magnitude.sort_by(|a, b| b.abs().total_cmp(&a.abs()));
    let total: f64 = by_magnitude.iter().map(|v| v.abs()).sum();
    let mut cev = [1.0; 5];
    if total > 0.0 {
        let mut acc = 0.0;
        for (k, slot) in cev.iter_mut().enumerate() {
            if let Some(v) = by_magnitude.get(k) {
                acc += v.abs();
            }
            *slot = acc / total;
        }
    }
    Ok(EigenReport {
        by_magnitude,
        by_value,
        cev,
        tis: triangle_inequality_score(d),
    })
}
