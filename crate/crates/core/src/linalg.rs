//! Small dense helpers shared by the probe, residual and vocab modules.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; 0 when either vector is zero, exactly 1 for
/// identical nonzero vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = norm(a) * norm(b);
    if denom == 0.0 {
        return 0.0;
    }
    if a == b {
        return 1.0;
    }
    (dot(a, b) / denom).clamp(-1.0, 1.0)
}

/// Root mean square about zero.
pub fn rms(a: &[f64]) -> f64 {
    (dot(a, a) / a.len() as f64).sqrt()
}

/// Parameter-free layer normalization `(x − mean) / sqrt(var + eps)`.
pub fn layer_norm(x: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let rstd = 1.0 / (var + eps).sqrt();
    x.iter().map(|v| (v - mean) * rstd).collect()
}

/// Ranks with ties averaged (1-based).
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = r;
        }
        i = j + 1;
    }
    out
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

/// Least-squares slope of `y` on `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
    }
    sxy / sxx
}

pub fn rows_to_array(rows: &[Vec<f64>]) -> Array2<f64> {
    let d = rows.first().map_or(0, Vec::len);
    let mut out = Array2::zeros((rows.len(), d));
    for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(&ArrayView1::from(src.as_slice()));
    }
    out
}

/// Mean-centers the rows of `x`, returning the centered copy and the mean.
pub fn center(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let mean = x
        .mean_axis(Axis(0))
        .unwrap_or_else(|| Array1::zeros(x.ncols()));
    (x - &mean, mean)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerIteration {
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for PowerIteration {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 1000,
            seed: 0,
        }
    }
}

/// A principal direction with the variance it explains.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub direction: Array1<f64>,
    pub variance: f64,
}

enum CovOp<'a> {
    Dense(Array2<f64>),
    Implicit(ArrayView2<'a, f64>),
}

impl CovOp<'_> {
    fn apply(&self, v: &Array1<f64>, n: f64) -> Array1<f64> {
        match self {
            CovOp::Dense(c) => c.dot(v),
            CovOp::Implicit(x) => x.t().dot(&x.dot(v)) / n,
        }
    }
}

fn random_unit(d: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let mut v: Array1<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
    let n = v.dot(&v).sqrt();
    v /= n;
    v
}

/// Top principal direction of already-centered rows by power iteration on
/// the covariance operator.
fn top_direction(xc: ArrayView2<f64>, cfg: &PowerIteration, rng: &mut ChaCha8Rng) -> Result<Component> {
    let (n, d) = xc.dim();
    let nf = n as f64;
    let op = if d <= 512 || d <= n / 4 {
        CovOp::Dense(xc.t().dot(&xc) / nf)
    } else {
        CovOp::Implicit(xc)
    };
    let mut v = random_unit(d, rng);
    for _ in 0..cfg.max_iter {
        let w = op.apply(&v, nf);
        let len = w.dot(&w).sqrt();
        if !len.is_finite() {
            return Err(Error::Numeric("power iteration produced a non-finite vector".into()));
        }
        if len == 0.0 {
            return Err(Error::Degenerate("covariance annihilates the iterate".into()));
        }
        let next = w / len;
        let delta = (&next - &v).mapv(|x| x * x).sum().sqrt();
        v = next;
        if delta < cfg.tol {
            let variance = v.dot(&op.apply(&v, nf));
            return Ok(Component { direction: v, variance });
        }
    }
    Err(Error::Numeric(format!(
        "power iteration did not converge within {} iterations",
        cfg.max_iter
    )))
}

fn total_variance(xc: &Array2<f64>) -> f64 {
    xc.mapv(|v| v * v).sum() / xc.nrows().max(1) as f64
}

/// Top `k` principal components of the rows of `x` (centered internally),
/// by power iteration with deflation.
///
/// Fails with [`Error::Degenerate`] when the rows have no spread. A later
/// component whose residual variance is negligible comes back with a zero
/// direction.
pub fn principal_components(x: &Array2<f64>, k: usize, cfg: &PowerIteration) -> Result<Vec<Component>> {
    if x.nrows() < 2 {
        return Err(Error::Degenerate("need at least two rows".into()));
    }
    let (mut xc, mean) = center(x);
    let tv = total_variance(&xc);
    let scale = mean.dot(&mean) / mean.len().max(1) as f64 + tv;
    if tv == 0.0 || tv <= 1e-20 * scale {
        return Err(Error::Degenerate("all rows are identical (zero covariance)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        if total_variance(&xc) <= 1e-20 * tv {
            out.push(Component {
                direction: Array1::zeros(x.ncols()),
                variance: 0.0,
            });
            continue;
        }
        let c = top_direction(xc.view(), cfg, &mut rng)?;
        let proj = xc.dot(&c.direction);
        for (mut row, p) in xc.rows_mut().into_iter().zip(proj.iter()) {
            row.scaled_add(-*p, &c.direction);
        }
        out.push(c);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn cosine_and_norms() {
        assert_relative_eq!(cosine(&[1.0, 0.0], &[0.0, 2.0]), 0.0);
        assert_relative_eq!(cosine(&[1.0, 1.0], &[2.0, 2.0]), 1.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
        let v = [3.0, -4.0, 12.0, 0.0];
        assert_relative_eq!(norm(&v), 2.0 * rms(&v), max_relative = 1e-15);
    }

    #[test]
    fn spearman_monotone() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_relative_eq!(spearman(&a, &[10.0, 20.0, 25.0, 100.0]), 1.0);
        assert_relative_eq!(spearman(&a, &[4.0, 3.0, 2.0, 1.0]), -1.0);
    }

    #[test]
    fn slope_of_line() {
        assert_relative_eq!(ols_slope(&[0.0, 1.0, 2.0], &[1.0, 1.5, 2.0]), 0.5);
    }

    #[test]
    fn pca_finds_dominant_axis() {
        let x = array![[3.0, 0.1], [-3.0, -0.1], [2.9, -0.1], [-3.1, 0.1]];
        let pcs = principal_components(&x, 2, &PowerIteration::default()).unwrap();
        assert!(pcs[0].direction[0].abs() > 0.999);
        assert!(pcs[1].direction[1].abs() > 0.99);
        assert!(pcs[0].variance > pcs[1].variance);
    }

    #[test]
    fn identical_rows_are_degenerate() {
        let x = Array2::from_elem((5, 3), 0.1);
        assert!(matches!(
            principal_components(&x, 1, &PowerIteration::default()),
            Err(Error::Degenerate(_))
        ));
    }
}
