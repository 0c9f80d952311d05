//! Gaussian mixture model with full covariances, fitted by EM with k-means++
//! seeding and multiple restarts.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;

use super::linalg::{cholesky, solve_lower};
use crate::error::{Error, Result};

pub struct GmmConfig {
    pub components: usize,
    pub restarts: usize,
    pub max_iters: usize,
    pub covariance_reg: f64,
    pub tol: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig {
            components: 2,
            restarts: 5,
            max_iters: 200,
            covariance_reg: 1e-6,
            tol: 1e-7,
        }
    }
}

pub struct Gmm {
    pub weights: Array1<f64>,
    pub means: Array2<f64>,
    /// (k, d, d) covariances.
    pub covariances: Array3<f64>,
    pub log_likelihood: f64,
}

struct Component {
    chol: Array2<f64>,
    log_det_half: f64,
}

fn component_factors(cov: &Array2<f64>, reg: f64) -> Result<Component> {
    let d = cov.dim().0;
    let mut reg = reg;
    for _ in 0..8 {
        let mut c = cov.clone();
        for i in 0..d {
            c[[i, i]] += reg;
        }
        if let Ok(l) = cholesky(&c) {
            let log_det_half: f64 = (0..d).map(|i| l[[i, i]].ln()).sum();
            return Ok(Component {
                chol: l,
                log_det_half,
            });
        }
        reg *= 10.0;
    }
    Err(Error::Analysis("covariance not positive definite".into()))
}

fn log_gaussian(comp: &Component, mean: &Array1<f64>, x: &Array1<f64>) -> f64 {
    let d = mean.len() as f64;
    let diff = x - mean;
    let y = solve_lower(&comp.chol, &diff);
    let maha: f64 = y.iter().map(|v| v * v).sum();
    -0.5 * (maha + d * (2.0 * std::f64::consts::PI).ln()) - comp.log_det_half
}

/// Fit by EM, keeping the restart with the best final log-likelihood.
pub fn fit_gmm(x: &Array2<f64>, cfg: &GmmConfig, rng: &mut impl Rng) -> Result<Gmm> {
    let (n, d) = x.dim();
    let k = cfg.components;
    if k == 0 || k > n {
        return Err(Error::Analysis(format!(
            "gmm: {k} components for {n} samples"
        )));
    }
    let mut best: Option<Gmm> = None;
    for _restart in 0..cfg.restarts {
        let model = fit_once(x, cfg, rng)?;
        if best
            .as_ref()
            .map(|b| model.log_likelihood > b.log_likelihood)
            .unwrap_or(true)
        {
            best = Some(model);
        }
    }
    Ok(best.unwrap())
}

fn kmeans_pp_centers(x: &Array2<f64>, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = x.dim().0;
    let mut centers = vec![rng.gen_range(0..n)];
    let mut dist2: Vec<f64> = (0..n)
        .map(|i| {
            let diff = &x.row(i) - &x.row(centers[0]);
            diff.dot(&diff)
        })
        .collect();
    while centers.len() < k {
        let total: f64 = dist2.iter().sum();
        let idx = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut u = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d2) in dist2.iter().enumerate() {
                u -= d2;
                if u <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centers.push(idx);
        for i in 0..n {
            let diff = &x.row(i) - &x.row(idx);
            let d2 = diff.dot(&diff);
            if d2 < dist2[i] {
                dist2[i] = d2;
            }
        }
    }
    centers
}

fn fit_once(x: &Array2<f64>, cfg: &GmmConfig, rng: &mut impl Rng) -> Result<Gmm> {
    let (n, d) = x.dim();
    let k = cfg.components;
    // Initialize responsibilities from a k-means++ hard assignment.
    let centers = kmeans_pp_centers(x, k, rng);
    let mut resp = Array2::<f64>::zeros((n, k));
    for i in 0..n {
        let mut arg = 0;
        let mut best = f64::INFINITY;
        for (j, c) in centers.iter().enumerate() {
            let diff = &x.row(i) - &x.row(*c);
            let d2 = diff.dot(&diff);
            if d2 < best {
                best = d2;
                arg = j;
            }
        }
        resp[[i, arg]] = 1.0;
    }

    let mut weights = Array1::<f64>::zeros(k);
    let mut means = Array2::<f64>::zeros((k, d));
    let mut covs = Array3::<f64>::zeros((k, d, d));
    let mut prev_ll = f64::NEG_INFINITY;
    let mut ll = f64::NEG_INFINITY;

    for _iter in 0..cfg.max_iters {
        // M step.
        let nk = resp.sum_axis(Axis(0));
        for j in 0..k {
            let w = nk[j].max(1e-10);
            weights[j] = w / n as f64;
            let mut mu = Array1::<f64>::zeros(d);
            for i in 0..n {
                mu.scaled_add(resp[[i, j]], &x.row(i));
            }
            mu /= w;
            let mut cov = Array2::<f64>::zeros((d, d));
            for i in 0..n {
                let r = resp[[i, j]];
                if r == 0.0 {
                    continue;
                }
                let diff = &x.row(i) - &mu;
                for a in 0..d {
                    let ra = r * diff[a];
                    for b in 0..d {
                        cov[[a, b]] += ra * diff[b];
                    }
                }
            }
            cov /= w;
            means.row_mut(j).assign(&mu);
            covs.index_axis_mut(Axis(0), j).assign(&cov);
        }

        // E step in the log domain.
        let comps: Vec<Component> = (0..k)
            .map(|j| component_factors(&covs.index_axis(Axis(0), j).to_owned(), cfg.covariance_reg))
            .collect::<Result<_>>()?;
        ll = 0.0;
        for i in 0..n {
            let xi = x.row(i).to_owned();
            let mut logp: Vec<f64> = (0..k)
                .map(|j| weights[j].max(1e-300).ln() + log_gaussian(&comps[j], &means.row(j).to_owned(), &xi))
                .collect();
            let max = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for lp in logp.iter_mut() {
                *lp = (*lp - max).exp();
                sum += *lp;
            }
            for (j, lp) in logp.iter().enumerate() {
                resp[[i, j]] = lp / sum;
            }
            ll += max + sum.ln();
        }
        if (ll - prev_ll).abs() < cfg.tol * ll.abs().max(1.0) {
            break;
        }
        prev_ll = ll;
    }
    Ok(Gmm {
        weights,
        means,
        covariances: covs,
        log_likelihood: ll,
    })
}

impl Gmm {
    /// Hard assignment by maximum posterior responsibility.
    pub fn predict(&self, x: &Array2<f64>, reg: f64) -> Result<Vec<u32>> {
        let (n, _) = x.dim();
        let k = self.weights.len();
        let comps: Vec<Component> = (0..k)
            .map(|j| component_factors(&self.covariances.index_axis(Axis(0), j).to_owned(), reg))
            .collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let xi = x.row(i).to_owned();
            let mut arg = 0usize;
            let mut best = f64::NEG_INFINITY;
            for j in 0..k {
                let lp = self.weights[j].max(1e-300).ln()
                    + log_gaussian(&comps[j], &self.means.row(j).to_owned(), &xi);
                if lp > best {
                    best = lp;
                    arg = j;
                }
            }
            out.push(arg as u32);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::ami::adjusted_mutual_information;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn blobs(rng: &mut ChaCha8Rng) -> (Array2<f64>, Vec<u32>) {
        let n_per = 80;
        let mut x = Array2::<f64>::zeros((2 * n_per, 3));
        let mut y = Vec::new();
        for i in 0..2 * n_per {
            let c = i / n_per;
            let center = if c == 0 { -4.0 } else { 4.0 };
            for j in 0..3 {
                x[[i, j]] = center + rng.sample::<f64, _>(StandardNormal);
            }
            y.push(c as u32);
        }
        (x, y)
    }

    #[test]
    fn separated_blobs_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (x, truth) = blobs(&mut rng);
        let cfg = GmmConfig {
            components: 2,
            ..GmmConfig::default()
        };
        let gmm = fit_gmm(&x, &cfg, &mut rng).unwrap();
        let pred = gmm.predict(&x, cfg.covariance_reg).unwrap();
        let ami = adjusted_mutual_information(&pred, &truth);
        assert!(ami >= 0.95, "ami {ami}");
    }

    #[test]
    fn k_larger_than_sample_count_fails() {
        let x = Array2::<f64>::zeros((3, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = GmmConfig {
            components: 5,
            ..GmmConfig::default()
        };
        assert!(fit_gmm(&x, &cfg, &mut rng).is_err());
    }

    #[test]
    fn seeded_fit_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, _) = blobs(&mut rng);
        let cfg = GmmConfig {
            components: 2,
            restarts: 2,
            ..GmmConfig::default()
        };
        let fit = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = fit_gmm(&x, &cfg, &mut rng).unwrap();
            (g.log_likelihood, g.predict(&x, cfg.covariance_reg).unwrap())
        };
        let (ll1, p1) = fit(7);
        let (ll2, p2) = fit(7);
        assert_eq!(ll1, ll2);
        assert_eq!(p1, p2);
    }
}
