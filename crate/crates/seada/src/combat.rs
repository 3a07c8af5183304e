//! Location/scale batch harmonization of LDR matrices with empirical-Bayes
//! shrinkage of the per-batch estimates (the ComBat baseline).
//!
//! Per feature: fit x = batch effect + covariate effect, standardize by the
//! covariate-adjusted grand mean and pooled sd, estimate per-batch location
//! gamma and scale delta squared on the standardized data, optionally shrink
//! them toward moment-matched normal / inverse-gamma priors shared across
//! features, then remove them. Per-batch scale uses the population (1/n)
//! variance so that a single-batch fit is an exact identity.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SeadaError};

/// Relative-change threshold for the shrinkage fixed point.
pub const EB_TOL: f64 = 1e-6;
pub const EB_MAX_ITERS: usize = 100;
/// Below this, a cross-feature moment is treated as degenerate and the
/// shrinkage for that batch falls back to the direct estimates.
const MOMENT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct DesignInfo {
    /// Per-row batch label.
    pub batch: Vec<String>,
    /// Optional N x C covariate matrix (e.g. disease indicators).
    pub covariates: Option<Array2<f64>>,
}

impl DesignInfo {
    pub fn no_covariates(batch: Vec<String>) -> Self {
        DesignInfo { batch, covariates: None }
    }
}

/// Disease-style one-hot covariates: one column per distinct label except
/// the first (reference) level, in sorted label order. Returns None when
/// fewer than two levels are present.
pub fn one_hot_covariates(labels: &[String]) -> Option<Array2<f64>> {
    let mut levels: Vec<&String> = labels.iter().collect();
    levels.sort();
    levels.dedup();
    if levels.len() < 2 {
        return None;
    }
    let cols = &levels[1..];
    let mut m = Array2::zeros((labels.len(), cols.len()));
    for (i, lab) in labels.iter().enumerate() {
        if let Some(j) = cols.iter().position(|c| *c == lab) {
            m[[i, j]] = 1.0;
        }
    }
    Some(m)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CombatModel {
    pub batches: Vec<String>,
    /// Per-feature covariate-adjusted grand mean.
    pub grand_mean: Vec<f64>,
    /// C x L covariate coefficients (row-major, empty when fit without).
    pub beta: Vec<Vec<f64>>,
    pub pooled_sd: Vec<f64>,
    /// B x L shrunken locations, batch-major.
    pub gamma_star: Vec<Vec<f64>>,
    /// B x L shrunken squared scales, batch-major.
    pub delta2_star: Vec<Vec<f64>>,
    pub eb: bool,
}

impl CombatModel {
    pub fn num_features(&self) -> usize {
        self.grand_mean.len()
    }

    pub fn num_covariates(&self) -> usize {
        self.beta.len()
    }

    pub fn batch_index(&self, label: &str) -> Result<usize> {
        self.batches.iter().position(|b| b == label).ok_or_else(|| {
            SeadaError::InvalidInput(format!(
                "batch '{label}' was not present when the harmonization model was fitted"
            ))
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.batches.is_empty() {
            return Err(SeadaError::InvalidInput("model has no fitted batches".into()));
        }
        for row in &self.delta2_star {
            if row.iter().any(|&d| !(d > 0.0)) {
                return Err(SeadaError::InvalidInput("non-positive delta* in model".into()));
            }
        }
        Ok(())
    }
}

/// Solve A x = b by Gaussian elimination with partial pivoting.
fn solve(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let n = a.nrows();
    let mut m = a.clone();
    let mut x = b.clone();
    for col in 0..n {
        let (piv, piv_abs) = (col..n)
            .map(|r| (r, m[[r, col]].abs()))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        if piv_abs < 1e-10 {
            return Err(SeadaError::InvalidInput(
                "design matrix is rank-deficient (collinear batch/covariate columns)".into(),
            ));
        }
        if piv != col {
            for c in 0..n {
                m.swap([piv, c], [col, c]);
            }
            x.swap(piv, col);
        }
        for r in col + 1..n {
            let f = m[[r, col]] / m[[col, col]];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                m[[r, c]] -= f * m[[col, c]];
            }
            x[r] -= f * x[col];
        }
    }
    for col in (0..n).rev() {
        let mut s = x[col];
        for c in col + 1..n {
            s -= m[[col, c]] * x[c];
        }
        x[col] = s / m[[col, col]];
    }
    Ok(x)
}

struct BatchLayout {
    labels: Vec<String>,
    /// Row indices per batch, in input order.
    rows: Vec<Vec<usize>>,
}

fn batch_layout(batch: &[String]) -> Result<BatchLayout> {
    let mut labels: Vec<String> = batch.to_vec();
    labels.sort();
    labels.dedup();
    let rows: Vec<Vec<usize>> = labels
        .iter()
        .map(|lab| (0..batch.len()).filter(|&i| &batch[i] == lab).collect())
        .collect();
    for (lab, r) in labels.iter().zip(&rows) {
        if r.len() < 2 {
            return Err(SeadaError::InvalidInput(format!(
                "batch '{lab}' has {} row(s); at least 2 required",
                r.len()
            )));
        }
    }
    Ok(BatchLayout { labels, rows })
}

pub fn combat_fit(features: &Array2<f64>, design: &DesignInfo, eb: bool) -> Result<CombatModel> {
    let (n, l) = features.dim();
    if design.batch.len() != n {
        return Err(SeadaError::ShapeMismatch {
            expected: format!("{n} batch labels"),
            got: format!("{}", design.batch.len()),
        });
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(SeadaError::NonFinite("feature matrix".into()));
    }
    let layout = batch_layout(&design.batch)?;
    let nb = layout.labels.len();
    let ncov = design.covariates.as_ref().map_or(0, |c| c.ncols());
    if let Some(cov) = &design.covariates {
        if cov.nrows() != n {
            return Err(SeadaError::ShapeMismatch {
                expected: format!("{n} covariate rows"),
                got: format!("{}", cov.nrows()),
            });
        }
    }

    // design matrix [batch one-hot | covariates]; the one-hots span the
    // intercept, so covariates must not
    let p = nb + ncov;
    let mut z = Array2::<f64>::zeros((n, p));
    for (b, rows) in layout.rows.iter().enumerate() {
        for &r in rows {
            z[[r, b]] = 1.0;
        }
    }
    if let Some(cov) = &design.covariates {
        z.slice_mut(ndarray::s![.., nb..]).assign(cov);
    }
    let ztz = z.t().dot(&z);
    let ztx = z.t().dot(features); // p x l

    // feature-wise OLS, then batch-size-weighted grand mean
    let mut theta = Array2::<f64>::zeros((p, l));
    for f in 0..l {
        let rhs = ztx.column(f).to_owned();
        let sol = solve(&ztz, &rhs)?;
        theta.column_mut(f).assign(&sol);
    }
    let mut grand = Array1::<f64>::zeros(l);
    for (b, rows) in layout.rows.iter().enumerate() {
        let w = rows.len() as f64 / n as f64;
        grand.scaled_add(w, &theta.row(b));
    }
    let beta = theta.slice(ndarray::s![nb.., ..]).to_owned(); // ncov x l

    // pooled variance of the full-fit residuals
    let fitted = z.dot(&theta);
    let resid = features - &fitted;
    let pooled_var = resid.mapv(|v| v * v).mean_axis(Axis(0)).unwrap();
    for (f, &v) in pooled_var.iter().enumerate() {
        if v <= 0.0 {
            return Err(SeadaError::InvalidInput(format!(
                "feature {f} has zero pooled variance; cannot standardize"
            )));
        }
    }
    let pooled_sd = pooled_var.mapv(f64::sqrt);

    // standardize against grand mean + covariate effects only
    let mut stand = features.clone();
    for i in 0..n {
        for f in 0..l {
            let mut m = grand[f];
            if let Some(cov) = &design.covariates {
                for c in 0..ncov {
                    m += cov[[i, c]] * beta[[c, f]];
                }
            }
            stand[[i, f]] = (features[[i, f]] - m) / pooled_sd[f];
        }
    }

    // per-batch location and population-variance scale on standardized data
    let mut gamma_hat = Array2::<f64>::zeros((nb, l));
    let mut delta2_hat = Array2::<f64>::zeros((nb, l));
    for (b, rows) in layout.rows.iter().enumerate() {
        let nbatch = rows.len() as f64;
        for f in 0..l {
            let mean: f64 = rows.iter().map(|&r| stand[[r, f]]).sum::<f64>() / nbatch;
            let var: f64 =
                rows.iter().map(|&r| (stand[[r, f]] - mean).powi(2)).sum::<f64>() / nbatch;
            gamma_hat[[b, f]] = mean;
            delta2_hat[[b, f]] = var;
        }
    }

    let (gamma_star, delta2_star) = if eb {
        eb_shrink(&stand, &layout, &gamma_hat, &delta2_hat)?
    } else {
        (gamma_hat, delta2_hat)
    };
    for (b, lab) in layout.labels.iter().enumerate() {
        for f in 0..l {
            if !(delta2_star[[b, f]] > 0.0) {
                return Err(SeadaError::InvalidInput(format!(
                    "non-positive delta* for batch '{lab}' feature {f}"
                )));
            }
        }
    }

    let model = CombatModel {
        batches: layout.labels,
        grand_mean: grand.to_vec(),
        beta: (0..ncov).map(|c| beta.row(c).to_vec()).collect(),
        pooled_sd: pooled_sd.to_vec(),
        gamma_star: (0..nb).map(|b| gamma_star.row(b).to_vec()).collect(),
        delta2_star: (0..nb).map(|b| delta2_star.row(b).to_vec()).collect(),
        eb,
    };
    model.validate()?;
    Ok(model)
}

/// Moment-matched normal / inverse-gamma shrinkage, iterated per batch until
/// the estimates move by a relative EB_TOL or EB_MAX_ITERS is hit. Batches
/// whose cross-feature moments are degenerate keep the direct estimates.
fn eb_shrink(
    stand: &Array2<f64>,
    layout: &BatchLayout,
    gamma_hat: &Array2<f64>,
    delta2_hat: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (nb, l) = gamma_hat.dim();
    let mut gamma_star = gamma_hat.clone();
    let mut delta2_star = delta2_hat.clone();
    for b in 0..nb {
        let g: Vec<f64> = gamma_hat.row(b).to_vec();
        let d: Vec<f64> = delta2_hat.row(b).to_vec();
        let gbar = g.iter().sum::<f64>() / l as f64;
        let t2 = g.iter().map(|&v| (v - gbar).powi(2)).sum::<f64>() / (l as f64 - 1.0).max(1.0);
        let m = d.iter().sum::<f64>() / l as f64;
        let s2 = d.iter().map(|&v| (v - m).powi(2)).sum::<f64>() / (l as f64 - 1.0).max(1.0);
        if t2 < MOMENT_FLOOR || s2 < MOMENT_FLOOR {
            continue;
        }
        let a_prior = (2.0 * s2 + m * m) / s2;
        let b_prior = (m * s2 + m * m * m) / s2;
        let rows = &layout.rows[b];
        let nbatch = rows.len() as f64;

        let mut g_old = g.clone();
        let mut d_old = d.clone();
        for iter in 0..EB_MAX_ITERS {
            let mut change: f64 = 0.0;
            let mut g_new = vec![0.0; l];
            let mut d_new = vec![0.0; l];
            for f in 0..l {
                g_new[f] = (nbatch * t2 * g[f] + d_old[f] * gbar) / (nbatch * t2 + d_old[f]);
                let sum2: f64 = rows.iter().map(|&r| (stand[[r, f]] - g_new[f]).powi(2)).sum();
                d_new[f] = (0.5 * sum2 + b_prior) / (nbatch / 2.0 + a_prior - 1.0);
                if !(d_new[f] > 0.0) {
                    return Err(SeadaError::InvalidInput(format!(
                        "shrinkage produced non-positive delta* (batch '{}', feature {f}, iteration {iter})",
                        layout.labels[b]
                    )));
                }
                change = change
                    .max((g_new[f] - g_old[f]).abs() / g_old[f].abs().max(MOMENT_FLOOR))
                    .max((d_new[f] - d_old[f]).abs() / d_old[f].abs().max(MOMENT_FLOOR));
            }
            g_old = g_new;
            d_old = d_new;
            if change < EB_TOL {
                break;
            }
        }
        for f in 0..l {
            gamma_star[[b, f]] = g_old[f];
            delta2_star[[b, f]] = d_old[f];
        }
    }
    Ok((gamma_star, delta2_star))
}

/// Remove the fitted batch effects. Covariates must match the fit (same
/// column count, or absent when fit without); unknown batch labels error.
pub fn combat_apply(
    model: &CombatModel,
    features: &Array2<f64>,
    design: &DesignInfo,
) -> Result<Array2<f64>> {
    model.validate()?;
    let (n, l) = features.dim();
    if l != model.num_features() {
        return Err(SeadaError::ShapeMismatch {
            expected: format!("{} features", model.num_features()),
            got: format!("{l}"),
        });
    }
    if design.batch.len() != n {
        return Err(SeadaError::ShapeMismatch {
            expected: format!("{n} batch labels"),
            got: format!("{}", design.batch.len()),
        });
    }
    let ncov = design.covariates.as_ref().map_or(0, |c| c.ncols());
    if ncov != model.num_covariates() {
        return Err(SeadaError::ShapeMismatch {
            expected: format!("{} covariate columns", model.num_covariates()),
            got: format!("{ncov}"),
        });
    }
    let mut out = Array2::<f64>::zeros((n, l));
    for i in 0..n {
        let b = model.batch_index(&design.batch[i])?;
        for f in 0..l {
            let mut m = model.grand_mean[f];
            if let Some(cov) = &design.covariates {
                for c in 0..ncov {
                    m += cov[[i, c]] * model.beta[c][f];
                }
            }
            let z = (features[[i, f]] - m) / model.pooled_sd[f];
            let adj = (z - model.gamma_star[b][f]) / model.delta2_star[b][f].sqrt();
            out[[i, f]] = adj * model.pooled_sd[f] + m;
        }
    }
    Ok(out)
}

pub fn save_combat_model(path: &Path, model: &CombatModel) -> Result<()> {
    model.validate()?;
    let json = serde_json::to_string_pretty(model)?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_combat_model(path: &Path) -> Result<CombatModel> {
    let json = fs::read_to_string(path)?;
    let model: CombatModel = serde_json::from_str(&json)?;
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn two_batch_fixture(gamma: [f64; 2], delta: [f64; 2]) -> (Array2<f64>, DesignInfo) {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let std = Normal::new(0.0f64, 1.0).unwrap();
        let (n_per, l) = (150, 6);
        let mut x = Array2::zeros((2 * n_per, l));
        let mut batch = Vec::new();
        for b in 0..2 {
            for i in 0..n_per {
                batch.push(format!("b{b}"));
                for f in 0..l {
                    let base = 0.5 * f as f64;
                    // feature-specific batch effects, as the shrinkage prior assumes
                    let g = gamma[b] * (1.0 + 0.3 * f as f64);
                    x[[b * n_per + i, f]] = base + g + delta[b] * std.sample(&mut rng);
                }
            }
        }
        (x, DesignInfo::no_covariates(batch))
    }

    fn batch_stats(x: &Array2<f64>, batch: &[String], lab: &str, f: usize) -> (f64, f64) {
        let rows: Vec<usize> = (0..batch.len()).filter(|&i| batch[i] == lab).collect();
        let mean = rows.iter().map(|&r| x[[r, f]]).sum::<f64>() / rows.len() as f64;
        let var =
            rows.iter().map(|&r| (x[[r, f]] - mean).powi(2)).sum::<f64>() / rows.len() as f64;
        (mean, var)
    }

    #[test]
    fn single_batch_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let std = Normal::new(0.0f64, 1.0).unwrap();
        let x = Array2::from_shape_fn((20, 5), |_| 2.0 + std.sample(&mut rng));
        let design = DesignInfo::no_covariates(vec!["only".to_string(); 20]);
        for eb in [false, true] {
            let model = combat_fit(&x, &design, eb).unwrap();
            let out = combat_apply(&model, &x, &design).unwrap();
            let max_diff = (&out - &x).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(max_diff < 1e-6, "eb={eb}: max diff {max_diff}");
        }
    }

    #[test]
    fn direct_estimates_align_batch_means_and_variances() {
        let (x, design) = two_batch_fixture([0.0, 1.5], [1.0, 2.0]);
        let model = combat_fit(&x, &design, false).unwrap();
        let out = combat_apply(&model, &x, &design).unwrap();
        for f in 0..x.ncols() {
            let grand = out.column(f).mean().unwrap();
            let (m0, v0) = batch_stats(&out, &design.batch, "b0", f);
            let (m1, v1) = batch_stats(&out, &design.batch, "b1", f);
            assert!((m0 - grand).abs() < 1e-8, "feature {f}: b0 mean {m0} vs grand {grand}");
            assert!((m1 - grand).abs() < 1e-8, "feature {f}: b1 mean {m1} vs grand {grand}");
            assert!((v0 - v1).abs() < 1e-6, "feature {f}: variances {v0} vs {v1}");
        }
    }

    #[test]
    fn shrinkage_reduces_mean_gap_by_ninety_percent() {
        let (x, design) = two_batch_fixture([0.0, 1.5], [1.0, 2.0]);
        let model = combat_fit(&x, &design, true).unwrap();
        let out = combat_apply(&model, &x, &design).unwrap();
        for f in 0..x.ncols() {
            let gap_before = {
                let (m0, _) = batch_stats(&x, &design.batch, "b0", f);
                let (m1, _) = batch_stats(&x, &design.batch, "b1", f);
                (m1 - m0).abs()
            };
            let gap_after = {
                let (m0, _) = batch_stats(&out, &design.batch, "b0", f);
                let (m1, _) = batch_stats(&out, &design.batch, "b1", f);
                (m1 - m0).abs()
            };
            assert!(
                gap_after <= 0.1 * gap_before,
                "feature {f}: gap {gap_before} -> {gap_after}"
            );
        }
    }

    #[test]
    fn unknown_batch_at_apply_fails() {
        let (x, design) = two_batch_fixture([0.0, 1.0], [1.0, 1.0]);
        let model = combat_fit(&x, &design, false).unwrap();
        let mut bad = design.clone();
        bad.batch[0] = "mystery".to_string();
        let err = combat_apply(&model, &x, &bad).unwrap_err();
        assert!(err.to_string().contains("mystery"));
    }

    #[test]
    fn tiny_batch_fails() {
        let (x, mut design) = two_batch_fixture([0.0, 1.0], [1.0, 1.0]);
        for lab in design.batch.iter_mut().skip(1) {
            if lab == "b0" {
                *lab = "b1".to_string();
            }
        }
        assert!(combat_fit(&x, &design, false).is_err());
    }

    #[test]
    fn zero_variance_feature_named_in_error() {
        let (mut x, design) = two_batch_fixture([0.0, 1.0], [1.0, 1.0]);
        x.column_mut(3).fill(0.25);
        let err = combat_fit(&x, &design, false).unwrap_err();
        assert!(err.to_string().contains("feature 3"), "got: {err}");
    }

    #[test]
    fn row_permutation_commutes() {
        let (x, design) = two_batch_fixture([0.0, 1.5], [1.0, 2.0]);
        let model = combat_fit(&x, &design, true).unwrap();
        let out = combat_apply(&model, &x, &design).unwrap();
        let n = x.nrows();
        let perm: Vec<usize> = (0..n).map(|i| (i * 37 + 11) % n).collect();
        let xp = Array2::from_shape_fn(x.dim(), |(i, f)| x[[perm[i], f]]);
        let dp = DesignInfo::no_covariates(perm.iter().map(|&i| design.batch[i].clone()).collect());
        let outp = combat_apply(&model, &xp, &dp).unwrap();
        for i in 0..n {
            for f in 0..x.ncols() {
                assert_eq!(outp[[i, f]], out[[perm[i], f]]);
            }
        }
    }

    #[test]
    fn feature_permutation_equivariance() {
        let (x, design) = two_batch_fixture([0.0, 1.5], [1.0, 2.0]);
        let l = x.ncols();
        let perm: Vec<usize> = (0..l).rev().collect();
        let out = {
            let model = combat_fit(&x, &design, true).unwrap();
            combat_apply(&model, &x, &design).unwrap()
        };
        let xp = Array2::from_shape_fn(x.dim(), |(i, f)| x[[i, perm[f]]]);
        let outp = {
            let model = combat_fit(&xp, &design, true).unwrap();
            combat_apply(&model, &xp, &design).unwrap()
        };
        for i in 0..x.nrows() {
            for f in 0..l {
                let diff = (outp[[i, f]] - out[[i, perm[f]]]).abs();
                assert!(diff < 1e-12, "row {i} feature {f}: diff {diff}");
            }
        }
    }

    #[test]
    fn covariate_preserves_group_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let std = Normal::new(0.0f64, 0.3).unwrap();
        let (n_per, l) = (30, 4);
        let mut x = Array2::zeros((4 * n_per, l));
        let mut batch = Vec::new();
        let mut disease = Vec::new();
        let offset = 2.0;
        let mut row = 0;
        for b in 0..2 {
            for g in 0..2 {
                for _ in 0..n_per {
                    batch.push(format!("b{b}"));
                    disease.push(if g == 0 { "CN".to_string() } else { "AD".to_string() });
                    for f in 0..l {
                        x[[row, f]] =
                            b as f64 * 1.2 + g as f64 * offset + std.sample(&mut rng);
                    }
                    row += 1;
                }
            }
        }
        let design =
            DesignInfo { batch, covariates: one_hot_covariates(&disease) };
        let model = combat_fit(&x, &design, false).unwrap();
        let out = combat_apply(&model, &x, &design).unwrap();
        for f in 0..l {
            let mean_of = |want: &str| {
                let rows: Vec<usize> =
                    (0..disease.len()).filter(|&i| disease[i] == want).collect();
                rows.iter().map(|&r| out[[r, f]]).sum::<f64>() / rows.len() as f64
            };
            let sep = mean_of("AD") - mean_of("CN");
            assert!(
                (sep - offset).abs() < 0.2,
                "feature {f}: group offset {sep} should survive harmonization"
            );
            // batch effect removed within each group
            let b_gap = {
                let rows = |b: &str| -> Vec<usize> {
                    (0..design.batch.len())
                        .filter(|&i| design.batch[i] == b && disease[i] == "CN")
                        .collect()
                };
                let m = |rs: &[usize]| rs.iter().map(|&r| out[[r, f]]).sum::<f64>() / rs.len() as f64;
                (m(&rows("b1")) - m(&rows("b0"))).abs()
            };
            assert!(b_gap < 0.2, "feature {f}: residual batch gap {b_gap}");
        }
    }

    #[test]
    fn one_hot_covariates_reference_level() {
        let labels: Vec<String> =
            ["CN", "AD", "CN", "MCI"].iter().map(|s| s.to_string()).collect();
        let m = one_hot_covariates(&labels).unwrap();
        // sorted levels AD, CN, MCI; AD is reference -> columns CN, MCI
        assert_eq!(m.ncols(), 2);
        assert_eq!(m.row(0).to_vec(), vec![1.0, 0.0]);
        assert_eq!(m.row(1).to_vec(), vec![0.0, 0.0]);
        assert_eq!(m.row(3).to_vec(), vec![0.0, 1.0]);
        assert!(one_hot_covariates(&vec!["CN".to_string(); 4]).is_none());
    }

    #[test]
    fn model_file_round_trip() {
        let (x, design) = two_batch_fixture([0.0, 1.5], [1.0, 2.0]);
        let model = combat_fit(&x, &design, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_combat_model(&path, &model).unwrap();
        let loaded = load_combat_model(&path).unwrap();
        let a = combat_apply(&model, &x, &design).unwrap();
        let b = combat_apply(&loaded, &x, &design).unwrap();
        assert_eq!(a, b);
        assert_eq!(model.batches, loaded.batches);
    }
}
