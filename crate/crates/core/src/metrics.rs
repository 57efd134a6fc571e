//! Representation and landscape measurements: linear-kernel alignment
//! between feature populations, kernel two-sample distance with a
//! permutation null, and loss-fluctuation probes on trained models.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Model, NnError, PreparedEpisode};
use crate::seeded::{normal, phase_rng, subseed};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("population needs at least 2 rows, got {0}")]
    PopulationTooSmall(usize),
    #[error("populations have {left} and {right} rows, need equal counts")]
    RowMismatch { left: usize, right: usize },
    #[error("population contains a non-finite entry")]
    NonFinite,
    #[error("population is constant; alignment is undefined")]
    ConstantPopulation,
    #[error("all pooled samples coincide; kernel bandwidth is undefined")]
    DegenerateBandwidth,
    #[error("need at least {need} trials, got {got}")]
    TooFewTrials { need: usize, got: usize },
    #[error("gram matrices must be square and equally sized")]
    BadGram,
    #[error("{metric} value {value} outside its admissible range")]
    ValueOutOfRange { metric: &'static str, value: f64 },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// `n` feature vectors of width `d`, one row per sample.
#[derive(Debug, Clone)]
pub struct FeaturePopulation {
    rows: Tensor,
}

impl FeaturePopulation {
    pub fn new(rows: Tensor) -> Result<Self> {
        if rows.ndim() != 2 {
            return Err(MetricsError::Tensor(TensorError::BadRank {
                op: "feature population",
                got: rows.ndim(),
            }));
        }
        if rows.dims()[0] < 2 {
            return Err(MetricsError::PopulationTooSmall(rows.dims()[0]));
        }
        if rows.data().iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::NonFinite);
        }
        Ok(Self { rows })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(MetricsError::PopulationTooSmall(n));
        }
        let d = rows[0].len();
        let mut flat = Vec::with_capacity(n * d);
        for r in rows {
            if r.len() != d {
                return Err(MetricsError::BadGram);
            }
            flat.extend_from_slice(r);
        }
        Self::new(Tensor::from_vec(&[n, d], flat)?)
    }

    pub fn n(&self) -> usize {
        self.rows.dims()[0]
    }

    pub fn d(&self) -> usize {
        self.rows.dims()[1]
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.rows.data()[i * self.d()..][..self.d()]
    }
}

/// One measured similarity value and the context needed to reread it later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityEntry {
    /// Named extraction point ("backbone" or "encoder"), optionally
    /// qualified by the model variant it was measured on.
    pub tap: String,
    /// "cka", "relative-cka" or "mmd".
    pub metric: String,
    pub value: f64,
    pub domains: (String, String),
    pub seed: u64,
}

/// Collected similarity measurements across taps, domains and seeds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub entries: Vec<SimilarityEntry>,
}

impl SimilarityReport {
    /// Appends one measurement, rejecting values outside the metric's
    /// admissible range (alignment in [0,1], distances nonnegative, both
    /// with rounding slack).
    pub fn push(&mut self, entry: SimilarityEntry) -> Result<()> {
        let ok = match entry.metric.as_str() {
            "cka" => (-1e-9..=1.0 + 1e-9).contains(&entry.value),
            "mmd" => entry.value >= -1e-9,
            _ => entry.value.is_finite(),
        };
        if !ok {
            return Err(MetricsError::ValueOutOfRange {
                metric: if entry.metric == "cka" { "cka" } else { "mmd" },
                value: entry.value,
            });
        }
        self.entries.push(entry);
        Ok(())
    }

    /// All values recorded for a `(tap, metric)` pair, in insertion order.
    pub fn values(&self, tap: &str, metric: &str) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.tap == tap && e.metric == metric)
            .map(|e| e.value)
            .collect()
    }
}

/// Linear kernel gram matrix `X X^T`.
pub fn gram_linear(x: &FeaturePopulation) -> Tensor {
    let n = x.n();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| a * b).sum();
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    Tensor::from_vec(&[n, n], k).expect("gram shape")
}

/// Doubly centers a square kernel matrix in place.
fn center(k: &mut [f64], n: usize) {
    let mut row_mean = vec![0.0; n];
    let mut grand = 0.0;
    for i in 0..n {
        let s: f64 = k[i * n..][..n].iter().sum();
        row_mean[i] = s / n as f64;
        grand += s;
    }
    let grand = grand / (n * n) as f64;
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] += grand - row_mean[i] - row_mean[j];
        }
    }
}

/// Empirical dependence between two kernels on the same sample index:
/// `tr(K H L H) / (n - 1)^2` with `H` the centering projector.
pub fn hsic(k: &Tensor, l: &Tensor) -> Result<f64> {
    let (kd, ld) = (k.dims(), l.dims());
    if kd.len() != 2 || ld.len() != 2 || kd[0] != kd[1] || ld[0] != ld[1] || kd[0] != ld[0] {
        return Err(MetricsError::BadGram);
    }
    let n = kd[0];
    if n < 2 {
        return Err(MetricsError::PopulationTooSmall(n));
    }
    let mut kc = k.data().to_vec();
    let mut lc = l.data().to_vec();
    center(&mut kc, n);
    center(&mut lc, n);
    let tr: f64 = kc.iter().zip(&lc).map(|(a, b)| a * b).sum();
    Ok(tr / ((n - 1) * (n - 1)) as f64)
}

/// Linear centered kernel alignment between two equally sized populations;
/// 1 means identical representation geometry up to rotation and scale.
pub fn cka(x: &FeaturePopulation, y: &FeaturePopulation) -> Result<f64> {
    if x.n() != y.n() {
        return Err(MetricsError::RowMismatch { left: x.n(), right: y.n() });
    }
    let k = gram_linear(x);
    let l = gram_linear(y);
    let hxy = hsic(&k, &l)?;
    let hxx = hsic(&k, &k)?;
    let hyy = hsic(&l, &l)?;
    if hxx <= 1e-30 || hyy <= 1e-30 {
        return Err(MetricsError::ConstantPopulation);
    }
    Ok(hxy / (hxx * hyy).sqrt())
}

#[derive(Debug, Clone)]
pub struct MmdTest {
    pub statistic: f64,
    pub bandwidth: f64,
    pub null: Vec<f64>,
    pub p_value: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise distance over the pooled rows.
fn median_bandwidth(rows: &[&[f64]]) -> Result<f64> {
    let mut dists = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            dists.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let mid = dists.len() / 2;
    let med = if dists.len() % 2 == 0 { (dists[mid - 1] + dists[mid]) / 2.0 } else { dists[mid] };
    if med < 1e-150 {
        return Err(MetricsError::DegenerateBandwidth);
    }
    Ok(med)
}

fn mmd_unbiased(xs: &[&[f64]], ys: &[&[f64]], sigma: f64) -> f64 {
    let kern = |a: &[f64], b: &[f64]| (-sq_dist(a, b) / (2.0 * sigma * sigma)).exp();
    let (m, n) = (xs.len(), ys.len());
    let mut kxx = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kxx += kern(xs[i], xs[j]);
            }
        }
    }
    let mut kyy = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kyy += kern(ys[i], ys[j]);
            }
        }
    }
    let mut kxy = 0.0;
    for x in xs {
        for y in ys {
            kxy += kern(x, y);
        }
    }
    kxx / (m * (m - 1)) as f64 + kyy / (n * (n - 1)) as f64 - 2.0 * kxy / (m * n) as f64
}

/// Unbiased gaussian-kernel two-sample distance with the median-heuristic
/// bandwidth over the pooled samples. Can be slightly negative under the
/// null by construction.
pub fn mmd_rbf(x: &FeaturePopulation, y: &FeaturePopulation) -> Result<f64> {
    let pooled: Vec<&[f64]> = (0..x.n()).map(|i| x.row(i)).chain((0..y.n()).map(|i| y.row(i))).collect();
    let sigma = median_bandwidth(&pooled)?;
    let xs: Vec<&[f64]> = (0..x.n()).map(|i| x.row(i)).collect();
    let ys: Vec<&[f64]> = (0..y.n()).map(|i| y.row(i)).collect();
    Ok(mmd_unbiased(&xs, &ys, sigma))
}

/// Permutation test: the observed statistic against `permutations` pooled
/// reshuffles at the same bandwidth. The p-value uses the add-one rule.
pub fn mmd_permutation_test(
    x: &FeaturePopulation,
    y: &FeaturePopulation,
    permutations: usize,
    seed: u64,
) -> Result<MmdTest> {
    if permutations == 0 {
        return Err(MetricsError::TooFewTrials { need: 1, got: 0 });
    }
    if x.d() != y.d() {
        return Err(MetricsError::BadGram);
    }
    let pooled: Vec<&[f64]> = (0..x.n()).map(|i| x.row(i)).chain((0..y.n()).map(|i| y.row(i))).collect();
    let sigma = median_bandwidth(&pooled)?;
    let xs: Vec<&[f64]> = pooled[..x.n()].to_vec();
    let ys: Vec<&[f64]> = pooled[x.n()..].to_vec();
    let statistic = mmd_unbiased(&xs, &ys, sigma);
    let mut rng = phase_rng(seed, "mmd-permutation");
    let mut idx: Vec<usize> = (0..pooled.len()).collect();
    let mut null = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        idx.shuffle(&mut rng);
        let xs: Vec<&[f64]> = idx[..x.n()].iter().map(|&i| pooled[i]).collect();
        let ys: Vec<&[f64]> = idx[x.n()..].iter().map(|&i| pooled[i]).collect();
        null.push(mmd_unbiased(&xs, &ys, sigma));
    }
    let exceed = null.iter().filter(|&&v| v >= statistic).count();
    let p_value = (1 + exceed) as f64 / (1 + permutations) as f64;
    Ok(MmdTest { statistic, bandwidth: sigma, null, p_value })
}

/// Mean evaluation loss of a model over fixed episodes.
pub fn mean_eval_loss(model: &Model, eval: &[PreparedEpisode]) -> Result<f64> {
    if eval.is_empty() {
        return Err(MetricsError::TooFewTrials { need: 1, got: 0 });
    }
    let mut total = 0.0;
    for ep in eval {
        total += model.eval_episode(ep)?.loss;
    }
    Ok(total / eval.len() as f64)
}

/// Loss-landscape flatness probe: standard deviation of the evaluation
/// loss across trials that add isotropic gaussian noise to every parameter
/// outside the frozen backbone. The noise standard deviation is `sigma`
/// times the rms magnitude of the perturbed parameter vector, so probes of
/// differently-scaled models stay comparable. Zero `sigma` gives exactly
/// zero.
pub fn gaussian_loss_fluctuation(
    model: &Model,
    eval: &[PreparedEpisode],
    trials: usize,
    sigma: f64,
    seed: u64,
) -> Result<f64> {
    if trials < 2 {
        return Err(MetricsError::TooFewTrials { need: 2, got: trials });
    }
    let (mut sq, mut n) = (0.0, 0usize);
    for p in model.params() {
        sq += p.data().iter().map(|v| v * v).sum::<f64>();
        n += p.len();
    }
    let std = sigma * (sq / n.max(1) as f64).sqrt();
    let mut losses = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut noisy = model.clone();
        let mut rng = phase_rng(subseed(seed, "loss-noise"), &format!("trial-{t}"));
        for p in noisy.params_mut() {
            for v in p.data_mut() {
                *v += std * normal(&mut rng);
            }
        }
        losses.push(mean_eval_loss(&noisy, eval)?);
    }
    let mean = losses.iter().sum::<f64>() / trials as f64;
    let var = losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / (trials - 1) as f64;
    Ok(var.sqrt())
}

/// Spread of outcomes across repeated runs: best minus worst.
pub fn outcome_spread(outcomes: &[f64]) -> Result<f64> {
    if outcomes.len() < 2 {
        return Err(MetricsError::TooFewTrials { need: 2, got: outcomes.len() });
    }
    if outcomes.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let max = outcomes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = outcomes.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(max - min)
}
