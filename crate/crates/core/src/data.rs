//! Gaussian-mixture classification data and its second-moment spectrum.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{gaussian_matrix, sym_eig, Matrix, Rng};

/// Full-batch classification dataset. Samples are rows of `x`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub onehot: Matrix,
    pub n: usize,
    pub d: usize,
    pub c: usize,
    pub separation: f64,
    pub seed: u64,
}

/// Eigendecomposition of the uncentered second moment `XᵀX / n`.
#[derive(Debug, Clone)]
pub struct DataSpectrum {
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// `d × d`, column `k` pairs with `eigenvalues[k]`.
    pub basis: Matrix,
}

/// Samples an isotropic Gaussian mixture with `c` classes.
///
/// Class means are standard normal draws rescaled so that their average
/// pairwise distance is `separation·√2`; each sample adds unit-variance
/// noise. Labels are assigned round-robin and the sample order is then
/// shuffled, so classes stay balanced to within one sample.
pub fn gen_gaussian_mixture(n: usize, d: usize, c: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if c < 2 {
        return invalid(format!("need at least 2 classes, got {c}"));
    }
    if n < c {
        return invalid(format!("need n >= c, got n={n}, c={c}"));
    }
    if d == 0 {
        return invalid("need d >= 1");
    }
    if !(separation >= 0.0) || !separation.is_finite() {
        return invalid(format!("separation must be finite and >= 0, got {separation}"));
    }

    let mut rng = Rng::new(seed);
    let mut means = gaussian_matrix(&mut rng, c, d, 1.0)?;
    let mut dist_sum = 0.0;
    let mut pairs = 0usize;
    for a in 0..c {
        for b in (a + 1)..c {
            dist_sum += means
                .row(a)
                .iter()
                .zip(means.row(b))
                .map(|(u, v)| (u - v).powi(2))
                .sum::<f64>()
                .sqrt();
            pairs += 1;
        }
    }
    let mean_dist = dist_sum / pairs as f64;
    let target = separation * std::f64::consts::SQRT_2;
    let factor = if mean_dist > 0.0 { target / mean_dist } else { 0.0 };
    means = means.scale(factor);

    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);

    let mut x = Matrix::zeros(n, d);
    let mut labels = vec![0usize; n];
    let mut onehot = Matrix::zeros(n, c);
    for (slot, &row) in order.iter().enumerate() {
        let label = slot % c;
        labels[row] = label;
        onehot[(row, label)] = 1.0;
    }
    for i in 0..n {
        let mu = means.row(labels[i]).to_vec();
        for (j, m) in mu.iter().enumerate() {
            x[(i, j)] = m + rng.normal();
        }
    }

    Ok(Dataset {
        x,
        labels,
        onehot,
        n,
        d,
        c,
        separation,
        seed,
    })
}

impl Dataset {
    /// Builds a dataset from explicit features and labels.
    pub fn from_parts(x: Matrix, labels: Vec<usize>, c: usize) -> Result<Self> {
        let (n, d) = x.shape();
        if labels.len() != n {
            return invalid("labels length must equal number of rows");
        }
        if labels.iter().any(|&l| l >= c) {
            return invalid("label out of range");
        }
        let mut onehot = Matrix::zeros(n, c);
        for (i, &l) in labels.iter().enumerate() {
            onehot[(i, l)] = 1.0;
        }
        Ok(Self {
            x,
            labels,
            onehot,
            n,
            d,
            c,
            separation: f64::NAN,
            seed: 0,
        })
    }

    /// Same labels, features multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            x: self.x.scale(s),
            ..self.clone()
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.c];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Writes `f0,...,f{d-1},label` rows with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (0..self.d).map(|j| format!("f{j}")).collect();
        writeln!(w, "{},label", header.join(","))?;
        for i in 0..self.n {
            let fields: Vec<String> = self.x.row(i).iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(w, "{},{}", fields.join(","), self.labels[i])?;
        }
        Ok(())
    }
}

/// Spectrum of `XᵀX / n` (uncentered).
pub fn data_cov_spectrum(ds: &Dataset) -> Result<DataSpectrum> {
    if ds.n < 2 {
        return invalid("data_cov_spectrum needs n >= 2");
    }
    let gram = ds.x.t_matmul(&ds.x)?.scale(1.0 / ds.n as f64);
    let eig = sym_eig(&gram)?;
    Ok(DataSpectrum {
        eigenvalues: eig.eigenvalues,
        basis: eig.eigenvectors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub const PROTOCOL_SEEDS: [u64; 5] = [42, 137, 256, 512, 1024];

    #[test]
    fn default_shapes_and_balance() {
        let ds = gen_gaussian_mixture(200, 20, 5, 2.0, 42).unwrap();
        assert_eq!(ds.x.shape(), (200, 20));
        assert_eq!(ds.onehot.shape(), (200, 5));
        assert_eq!(ds.class_counts(), vec![40; 5]);
        for i in 0..ds.n {
            let row = ds.onehot.row(i);
            assert_eq!(row.iter().sum::<f64>(), 1.0);
            assert_eq!(row.iter().filter(|&&v| v != 0.0).count(), 1);
            assert_eq!(row[ds.labels[i]], 1.0);
        }
    }

    #[test]
    fn unbalanced_counts_within_one() {
        let ds = gen_gaussian_mixture(23, 3, 4, 1.0, 1).unwrap();
        let counts = ds.class_counts();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn zero_separation_collapses_means() {
        let ds = gen_gaussian_mixture(2000, 5, 4, 0.0, 3).unwrap();
        // per-class empirical means all near the origin (noise scale 1/sqrt(500))
        for k in 0..4 {
            let rows: Vec<usize> = (0..ds.n).filter(|&i| ds.labels[i] == k).collect();
            for j in 0..5 {
                let m = rows.iter().map(|&i| ds.x[(i, j)]).sum::<f64>() / rows.len() as f64;
                assert!(m.abs() < 0.2, "class {k} feature {j} mean {m}");
            }
        }
    }

    #[test]
    fn separation_sets_mean_distance() {
        let ds = gen_gaussian_mixture(5000, 20, 5, 2.0, 42).unwrap();
        let means: Vec<Vec<f64>> = (0..5)
            .map(|k| {
                let rows: Vec<usize> = (0..ds.n).filter(|&i| ds.labels[i] == k).collect();
                (0..20)
                    .map(|j| rows.iter().map(|&i| ds.x[(i, j)]).sum::<f64>() / rows.len() as f64)
                    .collect()
            })
            .collect();
        let mut total = 0.0;
        let mut pairs = 0.0;
        for a in 0..5 {
            for b in (a + 1)..5 {
                total += means[a].iter().zip(&means[b]).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
                pairs += 1.0;
            }
        }
        let avg = total / pairs;
        assert!((avg - 2.0 * 2f64.sqrt()).abs() < 0.15, "avg distance {avg}");
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = gen_gaussian_mixture(50, 4, 3, 2.0, 42).unwrap();
        let b = gen_gaussian_mixture(50, 4, 3, 2.0, 42).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.labels, b.labels);
        let sets: Vec<Dataset> = PROTOCOL_SEEDS
            .iter()
            .map(|&s| gen_gaussian_mixture(50, 4, 3, 2.0, s).unwrap())
            .collect();
        for i in 0..sets.len() {
            for j in (i + 1)..sets.len() {
                assert_ne!(sets[i].x, sets[j].x);
            }
        }
    }

    #[test]
    fn rejects_too_few_samples() {
        assert!(gen_gaussian_mixture(3, 2, 5, 1.0, 0).is_err());
        assert!(gen_gaussian_mixture(10, 2, 1, 1.0, 0).is_err());
    }

    #[test]
    fn spectrum_matches_explicit_gram_and_trace() {
        let ds = gen_gaussian_mixture(200, 20, 5, 2.0, 137).unwrap();
        let spec = data_cov_spectrum(&ds).unwrap();
        let mut gram = Matrix::zeros(20, 20);
        for i in 0..ds.n {
            for a in 0..20 {
                for b in 0..20 {
                    gram[(a, b)] += ds.x[(i, a)] * ds.x[(i, b)] / ds.n as f64;
                }
            }
        }
        let direct = sym_eig(&gram).unwrap();
        for (u, v) in spec.eigenvalues.iter().zip(&direct.eigenvalues) {
            assert!((u - v).abs() < 1e-10 * (1.0 + v.abs()));
        }
        assert!(spec.eigenvalues.iter().all(|&l| l >= -1e-10));
        let trace: f64 = spec.eigenvalues.iter().sum();
        let fro = ds.x.frobenius_sq() / ds.n as f64;
        assert!((trace - fro).abs() <= 1e-10 * fro);
        let btb = spec.basis.t_matmul(&spec.basis).unwrap();
        assert!(btb.sub(&Matrix::identity(20)).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn whitened_input_has_unit_spectrum() {
        // x = sqrt(n) · (first d columns of an orthonormal basis)
        let n = 8;
        let x = Matrix::from_fn(n, 4, |i, j| if i == j { (n as f64).sqrt() } else { 0.0 });
        let ds = Dataset::from_parts(x, vec![0, 1, 0, 1, 0, 1, 0, 1], 2).unwrap();
        let spec = data_cov_spectrum(&ds).unwrap();
        for l in spec.eigenvalues {
            assert!((l - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_layout() {
        let ds = gen_gaussian_mixture(4, 2, 2, 1.0, 9).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "f0,f1,label");
        assert_eq!(lines.len(), 5);
        let first: Vec<&str> = lines[1].split(',').collect();
        let v: f64 = first[0].parse().unwrap();
        assert_eq!(v, ds.x[(0, 0)]);
        assert_eq!(first[2].parse::<usize>().unwrap(), ds.labels[0]);
    }
}
