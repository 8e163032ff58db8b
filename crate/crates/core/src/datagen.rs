//! Binary Gaussian-cluster benchmark with interpolated distribution shift,
//! and the CSV dataset format.
//!
//! Each class is `N(μ, Σ)` with `μ ~ N(k·1, I)` and `Σ = U D Uᵀ` (`U` Haar,
//! `D` diagonal with entries uniform in `d_range`). Source clusters use
//! `k_source`, target clusters `k_target`; a shifted test distribution takes
//! the convex combination of means and covariances with weight `λ` on the
//! target.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Jitter added to a covariance's diagonal when Cholesky fails.
pub const CHOLESKY_JITTER: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianShiftSpec {
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub k_source: f64,
    #[serde(default = "default_k_target")]
    pub k_target: f64,
    #[serde(default = "default_d_range")]
    pub d_range: [f64; 2],
    #[serde(default)]
    pub seed: u64,
}

fn default_dim() -> usize {
    100
}
fn default_k_target() -> f64 {
    1.0
}
fn default_d_range() -> [f64; 2] {
    [0.5, 2.0]
}

impl Default for GaussianShiftSpec {
    fn default() -> Self {
        Self {
            dim: default_dim(),
            lambda: 0.0,
            k_source: 0.0,
            k_target: default_k_target(),
            d_range: default_d_range(),
            seed: 0,
        }
    }
}

impl GaussianShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("data.dim must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("data.lambda must lie in [0, 1], got {}", self.lambda)));
        }
        let [lo, hi] = self.d_range;
        if !(lo > 0.0) || !(hi >= lo) || !hi.is_finite() {
            return Err(Error::Config(format!(
                "data.d_range must satisfy 0 < lo <= hi, got [{lo}, {hi}]"
            )));
        }
        Ok(())
    }
}

/// Means and covariances of the two classes (`+1` and `−1`).
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterParams {
    pub mu_pos: Vec<f64>,
    pub mu_neg: Vec<f64>,
    pub sigma_pos: Tensor<f64>,
    pub sigma_neg: Tensor<f64>,
}

impl ClusterParams {
    pub fn dim(&self) -> usize {
        self.mu_pos.len()
    }

    /// Symmetry within 1e-12 and a successful (possibly jittered) Cholesky.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.mu_neg.len() != d {
            return dim_err("class means differ in length");
        }
        for s in [&self.sigma_pos, &self.sigma_neg] {
            if s.rows() != d || s.cols() != d {
                return dim_err(format!("covariance must be {d}x{d}"));
            }
            for i in 0..d {
                for j in 0..i {
                    if (s.at(i, j) - s.at(j, i)).abs() > 1e-12 {
                        return Err(Error::Numerical(format!("covariance not symmetric at ({i},{j})")));
                    }
                }
            }
            cholesky(s)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRole {
    SourceTrain,
    SourceVal,
    TestStream,
}

/// Inputs with integer labels: `±1` for the binary benchmark, class indices
/// otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor<f64>,
    pub labels: Vec<i64>,
    pub role: DatasetRole,
}

impl Dataset {
    pub fn new(inputs: Tensor<f64>, labels: Vec<i64>, role: DatasetRole) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return dim_err(format!("{} rows but {} labels", inputs.rows(), labels.len()));
        }
        Ok(Self { inputs, labels, role })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Class indices: `−1 → 0`, `+1 → 1` when labels are signs, otherwise the
    /// labels themselves.
    pub fn classes(&self) -> Result<Vec<usize>> {
        let signed = self.labels.iter().any(|&l| l < 0);
        self.labels
            .iter()
            .map(|&l| match (signed, l) {
                (true, -1) => Ok(0),
                (true, 1) => Ok(1),
                (false, l) if l >= 0 => Ok(l as usize),
                _ => Err(Error::Config(format!("label {l} is neither ±1 nor a class index"))),
            })
            .collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            role: self.role,
        }
    }

    /// Consecutive batches of `size` rows; the final batch keeps the
    /// remainder, or is merged into its predecessor when smaller than
    /// `min_last`.
    pub fn batches(&self, size: usize, min_last: usize) -> Vec<Dataset> {
        let n = self.len();
        let size = size.max(1);
        let mut out: Vec<Vec<usize>> = (0..n).collect::<Vec<_>>().chunks(size).map(<[usize]>::to_vec).collect();
        if out.len() > 1 && out.last().is_some_and(|b| b.len() < min_last) {
            let last = out.pop().unwrap_or_default();
            out.last_mut().expect("non-empty").extend(last);
        }
        out.iter().map(|idx| self.subset(idx)).collect()
    }
}

/// RNG for one purpose (`stream`) under a run seed.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn randn(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Haar-distributed orthogonal matrix: QR of a standard Gaussian matrix with
/// the columns of `Q` sign-corrected by `sign(diag R)`.
pub fn sample_haar_orthogonal(dim: usize, rng: &mut impl Rng) -> Tensor<f64> {
    let a = DMatrix::<f64>::from_fn(dim, dim, |_, _| randn(rng));
    let qr = a.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    to_tensor(&q)
}

fn to_tensor(m: &DMatrix<f64>) -> Tensor<f64> {
    Tensor::from_rows(
        &(0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
            .collect::<Vec<_>>(),
    )
    .expect("rectangular")
}

fn to_dmatrix(t: &Tensor<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

/// Lower Cholesky factor, retrying once with `CHOLESKY_JITTER·I`.
pub fn cholesky(sigma: &Tensor<f64>) -> Result<Tensor<f64>> {
    let m = to_dmatrix(sigma);
    if let Some(c) = m.clone().cholesky() {
        return Ok(to_tensor(&c.l()));
    }
    let jittered = m + DMatrix::identity(sigma.rows(), sigma.rows()) * CHOLESKY_JITTER;
    jittered
        .cholesky()
        .map(|c| to_tensor(&c.l()))
        .ok_or_else(|| Error::Numerical("covariance is not positive definite (Cholesky failed after jitter)".into()))
}

fn sample_covariance(spec: &GaussianShiftSpec, rng: &mut impl Rng) -> Tensor<f64> {
    let d = spec.dim;
    let u = sample_haar_orthogonal(d, rng);
    let [lo, hi] = spec.d_range;
    let diag: Vec<f64> = (0..d)
        .map(|_| if hi > lo { rng.gen_range(lo..hi) } else { lo })
        .collect();
    // U D Uᵀ, then symmetrized so the stored matrix is exactly symmetric
    let mut ud = u.clone();
    for i in 0..d {
        for (j, v) in ud.row_slice_mut(i).iter_mut().enumerate() {
            *v *= diag[j];
        }
    }
    let s = ud.matmul(&u.transpose()).expect("square");
    let st = s.transpose();
    s.zip_map(&st, |a, b| 0.5 * (a + b)).expect("square")
}

/// Class means drawn from `N(k·1, I)` and covariances `U D Uᵀ`.
pub fn make_cluster_params(k: f64, spec: &GaussianShiftSpec, rng: &mut impl Rng) -> Result<ClusterParams> {
    spec.validate()?;
    let d = spec.dim;
    let mu_pos: Vec<f64> = (0..d).map(|_| k + randn(rng)).collect();
    let mu_neg: Vec<f64> = (0..d).map(|_| k + randn(rng)).collect();
    let sigma_pos = sample_covariance(spec, rng);
    let sigma_neg = sample_covariance(spec, rng);
    Ok(ClusterParams {
        mu_pos,
        mu_neg,
        sigma_pos,
        sigma_neg,
    })
}

/// Elementwise `λ·target + (1−λ)·source`.
pub fn interpolate_shift(source: &ClusterParams, target: &ClusterParams, lambda: f64) -> Result<ClusterParams> {
    if source.dim() != target.dim() {
        return dim_err(format!("source dim {} vs target dim {}", source.dim(), target.dim()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let mix = |s: f64, t: f64| lambda * t + (1.0 - lambda) * s;
    let vmix = |s: &[f64], t: &[f64]| s.iter().zip(t).map(|(&a, &b)| mix(a, b)).collect::<Vec<_>>();
    Ok(ClusterParams {
        mu_pos: vmix(&source.mu_pos, &target.mu_pos),
        mu_neg: vmix(&source.mu_neg, &target.mu_neg),
        sigma_pos: source.sigma_pos.zip_map(&target.sigma_pos, mix)?,
        sigma_neg: source.sigma_neg.zip_map(&target.sigma_neg, mix)?,
    })
}

/// `n_per_class` draws from each class (labels `+1` / `−1`), shuffled.
pub fn sample_dataset(
    params: &ClusterParams,
    n_per_class: usize,
    role: DatasetRole,
    rng: &mut impl Rng,
) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be >= 1".into()));
    }
    let d = params.dim();
    let mut rows: Vec<(Vec<f64>, i64)> = Vec::with_capacity(2 * n_per_class);
    for (mu, sigma, label) in [
        (&params.mu_pos, &params.sigma_pos, 1i64),
        (&params.mu_neg, &params.sigma_neg, -1i64),
    ] {
        let l = cholesky(sigma)?;
        for _ in 0..n_per_class {
            let z: Vec<f64> = (0..d).map(|_| randn(rng)).collect();
            let x: Vec<f64> = (0..d)
                .map(|i| mu[i] + (0..=i).map(|j| l.at(i, j) * z[j]).sum::<f64>())
                .collect();
            rows.push((x, label));
        }
    }
    rows.shuffle(rng);
    let labels = rows.iter().map(|r| r.1).collect();
    let inputs = Tensor::from_rows(&rows.into_iter().map(|r| r.0).collect::<Vec<_>>())?;
    Dataset::new(inputs, labels, role)
}

/// Source and target cluster parameters plus datasets for one benchmark
/// instance.
#[derive(Clone, Debug)]
pub struct ShiftBenchmark {
    pub spec: GaussianShiftSpec,
    pub source: ClusterParams,
    pub target: ClusterParams,
}

/// RNG streams used by [`ShiftBenchmark`]; fixed so runs are reproducible.
const STREAM_SOURCE_PARAMS: u64 = 1;
const STREAM_TARGET_PARAMS: u64 = 2;
const STREAM_SOURCE_TRAIN: u64 = 3;
const STREAM_SOURCE_VAL: u64 = 4;
const STREAM_TEST_BASE: u64 = 100;
const STREAM_VARIANT_STRIDE: u64 = 1 << 32;

impl ShiftBenchmark {
    /// Independent source (`k_source`) and target (`k_target`) draws.
    pub fn new(spec: &GaussianShiftSpec) -> Result<Self> {
        spec.validate()?;
        let source = make_cluster_params(spec.k_source, spec, &mut rng_for(spec.seed, STREAM_SOURCE_PARAMS))?;
        let target = make_cluster_params(spec.k_target, spec, &mut rng_for(spec.seed, STREAM_TARGET_PARAMS))?;
        Ok(Self {
            spec: spec.clone(),
            source,
            target,
        })
    }

    pub fn source_train(&self, n_per_class: usize) -> Result<Dataset> {
        sample_dataset(&self.source, n_per_class, DatasetRole::SourceTrain, &mut rng_for(self.spec.seed, STREAM_SOURCE_TRAIN))
    }

    pub fn source_val(&self, n_per_class: usize) -> Result<Dataset> {
        sample_dataset(&self.source, n_per_class, DatasetRole::SourceVal, &mut rng_for(self.spec.seed, STREAM_SOURCE_VAL))
    }

    /// Test stream at shift `lambda`; `replicate` selects an independent draw
    /// (used to separate validation streams from evaluation streams).
    pub fn test_stream(&self, lambda: f64, n_per_class: usize, replicate: u64) -> Result<Dataset> {
        self.shifted_stream(&self.target, lambda, n_per_class, replicate)
    }

    /// Additional target clusters (`variant ≥ 1`) drawn from the same prior
    /// as `target`, giving shifts in other directions. Variant 0 is `target`.
    pub fn target_variant(&self, variant: u64) -> Result<ClusterParams> {
        if variant == 0 {
            return Ok(self.target.clone());
        }
        let stream = STREAM_TARGET_PARAMS + STREAM_VARIANT_STRIDE * variant;
        make_cluster_params(self.spec.k_target, &self.spec, &mut rng_for(self.spec.seed, stream))
    }

    /// Stream at shift `lambda` toward an arbitrary target.
    pub fn shifted_stream(&self, target: &ClusterParams, lambda: f64, n_per_class: usize, replicate: u64) -> Result<Dataset> {
        let params = interpolate_shift(&self.source, target, lambda)?;
        let stream = STREAM_TEST_BASE + replicate * 1000 + (lambda * 1000.0).round() as u64;
        sample_dataset(&params, n_per_class, DatasetRole::TestStream, &mut rng_for(self.spec.seed, stream))
    }
}

// ---- CSV ----

/// Writes `label,f0,f1,…` with shortest round-trip float formatting.
pub fn save_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    let mut header = vec!["label".to_string()];
    header.extend((0..data.dim()).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(csv_io)?;
    for (i, &label) in data.labels.iter().enumerate() {
        let mut rec = vec![label.to_string()];
        rec.extend(data.inputs.row_slice(i).iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line: 0,
            detail: format!("{other:?}"),
        },
    }
}

pub fn load_csv(path: &Path, role: DatasetRole) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text, role)
}

pub fn parse_csv(text: &str, role: DatasetRole) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = rdr.records();
    let header = match records.next() {
        None => {
            return Err(Error::Parse {
                line: 1,
                detail: "no header".into(),
            })
        }
        Some(r) => r.map_err(|e| Error::Parse { line: 1, detail: e.to_string() })?,
    };
    if header.get(0) != Some("label") {
        return Err(Error::Parse {
            line: 1,
            detail: "header must start with `label`".into(),
        });
    }
    let d = header.len() - 1;
    for (j, name) in header.iter().skip(1).enumerate() {
        if name != format!("f{j}") {
            return Err(Error::Parse {
                line: 1,
                detail: format!("expected column f{j}, found `{name}`"),
            });
        }
    }
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            detail: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != d + 1 {
            return Err(Error::Parse {
                line,
                detail: format!("expected {} columns, found {}", d + 1, rec.len()),
            });
        }
        let label: i64 = rec[0].trim().parse().map_err(|_| Error::Parse {
            line,
            detail: format!("bad label `{}`", &rec[0]),
        })?;
        labels.push(label);
        for (j, field) in rec.iter().skip(1).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line,
                detail: format!("bad value `{field}` in column f{j}"),
            })?;
            data.push(v);
        }
    }
    let n = labels.len();
    Dataset::new(Tensor::matrix(n, d, data)?, labels, role)
}

/// Writes rows of already formatted cells under a header.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{}", header.join(","))?;
    for r in rows {
        writeln!(f, "{}", r.join(","))?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(dim: usize) -> GaussianShiftSpec {
        GaussianShiftSpec { dim, seed: 3, ..Default::default() }
    }

    #[test]
    fn haar_dim_one_is_sign() {
        let q = sample_haar_orthogonal(1, &mut rng_for(0, 0));
        assert_eq!(q.item().abs(), 1.0);
    }

    #[test]
    fn haar_is_orthogonal() {
        let q = sample_haar_orthogonal(100, &mut rng_for(1, 0));
        let qtq = q.transpose().matmul(&q).unwrap();
        let id = Tensor::<f64>::identity(100);
        let err = qtq.zip_map(&id, |a, b| (a - b).abs()).unwrap().max_abs();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn haar_first_column_is_centered() {
        // rotational symmetry: E[Q e₁] = 0; each coordinate has variance 1/d
        let mut rng = rng_for(2, 0);
        let (d, n) = (4, 2000);
        let mut sum = vec![0.0; d];
        for _ in 0..n {
            let q = sample_haar_orthogonal(d, &mut rng);
            for (i, s) in sum.iter_mut().enumerate() {
                *s += q.at(i, 0);
            }
        }
        let bound = 5.0 / (n as f64).sqrt();
        for s in sum {
            assert!((s / n as f64).abs() < bound);
        }
    }

    #[test]
    fn degenerate_d_range_gives_scaled_identity() {
        let spec = GaussianShiftSpec { d_range: [1.7, 1.7], ..small_spec(20) };
        let p = make_cluster_params(0.0, &spec, &mut rng_for(5, 0)).unwrap();
        let id = Tensor::<f64>::identity(20).map(|v| 1.7 * v);
        let err = p.sigma_pos.zip_map(&id, |a, b| (a - b).abs()).unwrap().max_abs();
        assert!(err < 1e-9);
    }

    #[test]
    fn mean_norm_concentrates_and_covariance_symmetric() {
        let spec = small_spec(100);
        let p = make_cluster_params(0.0, &spec, &mut rng_for(6, 0)).unwrap();
        let r = p.mu_pos.iter().map(|v| v * v).sum::<f64>() / 100.0;
        assert!((0.6..=1.5).contains(&r), "{r}");
        p.validate().unwrap();
        let st = p.sigma_neg.transpose();
        assert!(p.sigma_neg.zip_map(&st, |a, b| (a - b).abs()).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn invalid_d_range_is_config_error() {
        let spec = GaussianShiftSpec { d_range: [0.0, 1.0], ..small_spec(3) };
        assert!(matches!(make_cluster_params(0.0, &spec, &mut rng_for(0, 0)), Err(Error::Config(_))));
        let spec = GaussianShiftSpec { d_range: [2.0, 1.0], ..small_spec(3) };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn interpolation_endpoints_and_easy_shift() {
        let spec = small_spec(10);
        let s = make_cluster_params(0.0, &spec, &mut rng_for(7, 1)).unwrap();
        let t = make_cluster_params(1.0, &spec, &mut rng_for(7, 2)).unwrap();
        assert_eq!(interpolate_shift(&s, &t, 0.0).unwrap(), s);
        assert_eq!(interpolate_shift(&s, &t, 1.0).unwrap(), t);
        let m = interpolate_shift(&s, &t, 0.6).unwrap();
        for i in 0..10 {
            assert!((m.mu_pos[i] - (0.6 * t.mu_pos[i] + 0.4 * s.mu_pos[i])).abs() <= 1e-15);
        }
        for (i, v) in m.sigma_neg.data().iter().enumerate() {
            assert!((v - (0.6 * t.sigma_neg.data()[i] + 0.4 * s.sigma_neg.data()[i])).abs() <= 1e-15);
        }
        let other = make_cluster_params(0.0, &small_spec(3), &mut rng_for(7, 3)).unwrap();
        assert!(matches!(interpolate_shift(&s, &other, 0.5), Err(Error::Dimension(_))));
    }

    #[test]
    fn interpolated_covariances_stay_psd() {
        for seed in 0..10 {
            let b = ShiftBenchmark::new(&GaussianShiftSpec { dim: 30, seed, ..Default::default() }).unwrap();
            for lambda in [0.0, 0.25, 0.5, 0.6, 0.65, 0.7, 1.0] {
                interpolate_shift(&b.source, &b.target, lambda).unwrap().validate().unwrap();
            }
        }
    }

    #[test]
    fn standard_normal_sample_mean() {
        let d = 5;
        let p = ClusterParams {
            mu_pos: vec![0.0; d],
            mu_neg: vec![0.0; d],
            sigma_pos: Tensor::identity(d),
            sigma_neg: Tensor::identity(d),
        };
        let ds = sample_dataset(&p, 5000, DatasetRole::TestStream, &mut rng_for(8, 0)).unwrap();
        assert_eq!(ds.len(), 10000);
        let bound = 4.0 / (10000f64).sqrt();
        for j in 0..d {
            let m = (0..ds.len()).map(|i| ds.inputs.at(i, j)).sum::<f64>() / ds.len() as f64;
            assert!(m.abs() < bound);
        }
        let one = sample_dataset(&p, 1, DatasetRole::TestStream, &mut rng_for(8, 1)).unwrap();
        assert_eq!(one.len(), 2);
        let mut l = one.labels.clone();
        l.sort();
        assert_eq!(l, vec![-1, 1]);
    }

    #[test]
    fn sampling_is_deterministic() {
        let b = ShiftBenchmark::new(&small_spec(8)).unwrap();
        let a = b.test_stream(0.65, 20, 0).unwrap();
        let c = b.test_stream(0.65, 20, 0).unwrap();
        assert_eq!(a, c);
        assert_ne!(a, b.test_stream(0.65, 20, 1).unwrap());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let ds = Dataset::new(
            Tensor::from_rows(&[vec![0.1, 1.0 / 3.0], vec![-2.5e-300, 7.0]]).unwrap(),
            vec![1, -1],
            DatasetRole::SourceTrain,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        save_csv(&p, &ds).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("label,f0,f1\n"));
        assert_eq!(load_csv(&p, DatasetRole::SourceTrain).unwrap(), ds);

        match parse_csv("label,f0,f1\n1,0.5,0.25\n-1,0.5\n", DatasetRole::TestStream) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match parse_csv("", DatasetRole::TestStream) {
            Err(Error::Parse { detail, .. }) => assert_eq!(detail, "no header"),
            other => panic!("{other:?}"),
        }
        assert!(parse_csv("label,f0\n1,abc\n", DatasetRole::TestStream).is_err());
    }

    #[test]
    fn batches_merge_small_tail() {
        let ds = Dataset::new(Tensor::zeros(&[9, 1]), vec![1; 9], DatasetRole::TestStream).unwrap();
        let b = ds.batches(4, 2);
        assert_eq!(b.iter().map(Dataset::len).collect::<Vec<_>>(), vec![4, 5]);
        let b = ds.batches(3, 2);
        assert_eq!(b.len(), 3);
    }
}
