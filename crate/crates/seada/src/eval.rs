//! Evaluation of LDR quality along four axes: reconstruction fidelity
//! (RMSE/SSIM), diagnostic signal (CN-vs-AD k-NN probe), residual domain
//! information (linear softmax probe), and domain clustering structure
//! (six agreement indices against k-means / domain partitions), plus the
//! per-method report table.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Disease, Volume};
use crate::error::{Result, SeadaError};
use crate::seeds;
use crate::trainer::LdrStore;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 1e-4; // (0.01 * range)^2 for range 1
pub const SSIM_C2: f64 = 9e-4; // (0.03 * range)^2
pub const KNN_K: usize = 5;
pub const PROBE_STEPS: usize = 500;
pub const PROBE_LR: f64 = 0.2;
pub const KMEANS_RESTARTS: usize = 10;

fn check_shapes(a: &Volume, b: &Volume) -> Result<()> {
    if a.data.dim() != b.data.dim() {
        return Err(SeadaError::ShapeMismatch {
            expected: format!("{:?}", a.data.dim()),
            got: format!("{:?}", b.data.dim()),
        });
    }
    Ok(())
}

pub fn rmse(a: &Volume, b: &Volume) -> Result<f64> {
    check_shapes(a, b)?;
    let n = a.data.len() as f64;
    let ss: f64 = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok((ss / n).sqrt())
}

/// Mean local SSIM over all fully-interior 7^3 uniform windows.
pub fn ssim3d(a: &Volume, b: &Volume) -> Result<f64> {
    check_shapes(a, b)?;
    let (d, h, w) = a.data.dim();
    let k = SSIM_WINDOW;
    if d < k || h < k || w < k {
        return Err(SeadaError::InvalidInput(format!(
            "volume {d}x{h}x{w} smaller than the {k}^3 SSIM window"
        )));
    }
    let n = (k * k * k) as f64;
    let mut total = 0.0f64;
    let mut windows = 0usize;
    for z0 in 0..=d - k {
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
                for z in z0..z0 + k {
                    for y in y0..y0 + k {
                        for x in x0..x0 + k {
                            let p = a.data[[z, y, x]] as f64;
                            let q = b.data[[z, y, x]] as f64;
                            sx += p;
                            sy += q;
                            sxx += p * p;
                            syy += q * q;
                            sxy += p * q;
                        }
                    }
                }
                let mx = sx / n;
                let my = sy / n;
                let vx = sxx / n - mx * mx;
                let vy = syy / n - my * my;
                let cxy = sxy / n - mx * my;
                let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2);
                let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
                total += num / den;
                windows += 1;
            }
        }
    }
    Ok(total / windows as f64)
}

/// Unweighted mean of per-class F1 over the union of true and predicted
/// classes. A class never predicted (or never true) contributes 0.
pub fn macro_f1<T: Ord + Clone>(y_true: &[T], y_pred: &[T]) -> Result<f64> {
    if y_true.is_empty() || y_true.len() != y_pred.len() {
        return Err(SeadaError::InvalidInput(format!(
            "macro_f1 needs equal non-empty label lists, got {} and {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut classes: Vec<T> = y_true.iter().chain(y_pred.iter()).cloned().collect();
    classes.sort();
    classes.dedup();
    let mut sum = 0.0f64;
    for c in &classes {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (t, p) in y_true.iter().zip(y_pred.iter()) {
            match (t == c, p == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        if tp > 0 {
            let prec = tp as f64 / (tp + fp) as f64;
            let rec = tp as f64 / (tp + fn_) as f64;
            sum += 2.0 * prec * rec / (prec + rec);
        }
    }
    Ok(sum / classes.len() as f64)
}

fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        dot += x as f64 * y as f64;
        na += (x as f64).powi(2);
        nb += (y as f64).powi(2);
    }
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na.sqrt() * nb.sqrt())
}

/// CN-vs-AD k-nearest-neighbor probe: majority vote over the k nearest
/// train rows by cosine distance, ties broken toward CN, then by the
/// nearest neighbor among the tied classes. MCI rows are excluded on both
/// sides. Returns macro F1 on the test rows.
pub fn diag_f1_k(train: &LdrStore, test: &LdrStore, k: usize) -> Result<f64> {
    let tr = train.select(|i| train.diseases[i] != Disease::MCI);
    let te = test.select(|i| test.diseases[i] != Disease::MCI);
    for class in [Disease::CN, Disease::AD] {
        if !tr.diseases.contains(&class) {
            return Err(SeadaError::InvalidInput(format!(
                "diagnostic probe train set has no {class} rows"
            )));
        }
    }
    if te.is_empty() {
        return Err(SeadaError::InvalidInput("diagnostic probe test set is empty".into()));
    }
    if tr.len() < k {
        return Err(SeadaError::InvalidInput(format!(
            "diagnostic probe needs >= {k} train rows, got {}",
            tr.len()
        )));
    }
    let mut preds = Vec::with_capacity(te.len());
    for i in 0..te.len() {
        let q = te.matrix.row(i);
        let mut dists: Vec<(f64, usize)> = (0..tr.len())
            .map(|j| {
                (
                    cosine_distance(q.as_slice().unwrap(), tr.matrix.row(j).as_slice().unwrap()),
                    j,
                )
            })
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let top = &dists[..k];
        let count = |d: Disease| top.iter().filter(|(_, j)| tr.diseases[*j] == d).count();
        let (cn, ad) = (count(Disease::CN), count(Disease::AD));
        // tied votes resolve toward CN (binary probe, so the further
        // nearest-neighbor tiebreak never fires)
        let pred = if ad > cn { Disease::AD } else { Disease::CN };
        preds.push(pred);
    }
    macro_f1(&te.diseases, &preds)
}

pub fn diag_f1(train: &LdrStore, test: &LdrStore) -> Result<f64> {
    diag_f1_k(train, test, KNN_K)
}

/// Residual domain information: a fresh linear softmax probe trained with
/// full-batch gradient descent on a patient-level 80/20 split, reported as
/// macro F1 on the held-out 20%. Independent of the model's own adversary.
pub fn domain_f1(ldrs: &LdrStore, seed: u64) -> Result<f64> {
    ldrs.validate()?;
    let mut domain_rows: BTreeMap<usize, usize> = BTreeMap::new();
    for d in &ldrs.domains {
        *domain_rows.entry(d.index).or_insert(0) += 1;
    }
    if domain_rows.len() < 2 {
        return Err(SeadaError::InvalidInput("domain probe needs >= 2 domains".into()));
    }
    for (dom, count) in &domain_rows {
        if *count < 10 {
            return Err(SeadaError::InvalidInput(format!(
                "domain {dom} has only {count} rows; >= 10 required for the probe"
            )));
        }
    }
    let classes: Vec<usize> = domain_rows.keys().copied().collect();
    let class_of = |dom: usize| classes.iter().position(|&c| c == dom).unwrap();

    // patient-level split so scans of one patient never straddle it
    let mut patients: Vec<&String> = ldrs.patient_ids.iter().collect();
    patients.sort();
    patients.dedup();
    if patients.len() < 2 {
        return Err(SeadaError::InvalidInput("domain probe needs >= 2 patients".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "domain-probe-split"));
    let mut shuffled: Vec<String> = patients.iter().map(|p| (*p).clone()).collect();
    shuffled.shuffle(&mut rng);
    let n_train = (((shuffled.len() as f64) * 0.8).round() as usize).clamp(1, shuffled.len() - 1);
    let train_patients: std::collections::BTreeSet<&String> =
        shuffled[..n_train].iter().collect();
    let train_rows: Vec<usize> =
        (0..ldrs.len()).filter(|&i| train_patients.contains(&ldrs.patient_ids[i])).collect();
    let eval_rows: Vec<usize> =
        (0..ldrs.len()).filter(|&i| !train_patients.contains(&ldrs.patient_ids[i])).collect();
    if train_rows.is_empty() || eval_rows.is_empty() {
        return Err(SeadaError::InvalidInput("degenerate probe split".into()));
    }

    // standardize features on the train rows
    let l = ldrs.latent_dim();
    let mut mean = vec![0.0f64; l];
    let mut sd = vec![0.0f64; l];
    for f in 0..l {
        let m: f64 =
            train_rows.iter().map(|&r| ldrs.matrix[[r, f]] as f64).sum::<f64>() / train_rows.len() as f64;
        let v: f64 = train_rows
            .iter()
            .map(|&r| (ldrs.matrix[[r, f]] as f64 - m).powi(2))
            .sum::<f64>()
            / train_rows.len() as f64;
        mean[f] = m;
        sd[f] = v.sqrt().max(1e-6);
    }
    let feat = |r: usize| -> Vec<f64> {
        (0..l).map(|f| (ldrs.matrix[[r, f]] as f64 - mean[f]) / sd[f]).collect()
    };

    let k = classes.len();
    let mut w = Array2::<f64>::zeros((l, k));
    let mut b = Array1::<f64>::zeros(k);
    let xs: Vec<Vec<f64>> = train_rows.iter().map(|&r| feat(r)).collect();
    let ys: Vec<usize> = train_rows.iter().map(|&r| class_of(ldrs.domains[r].index)).collect();
    let n = xs.len() as f64;
    for _ in 0..PROBE_STEPS {
        let mut gw = Array2::<f64>::zeros((l, k));
        let mut gb = Array1::<f64>::zeros(k);
        for (x, &y) in xs.iter().zip(&ys) {
            let mut logits = b.clone();
            for f in 0..l {
                for c in 0..k {
                    logits[c] += x[f] * w[[f, c]];
                }
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&v| (v - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for c in 0..k {
                let g = exps[c] / sum - if c == y { 1.0 } else { 0.0 };
                gb[c] += g / n;
                for f in 0..l {
                    gw[[f, c]] += x[f] * g / n;
                }
            }
        }
        w.scaled_add(-PROBE_LR, &gw);
        b.scaled_add(-PROBE_LR, &gb);
    }

    let mut y_true = Vec::with_capacity(eval_rows.len());
    let mut y_pred = Vec::with_capacity(eval_rows.len());
    for &r in &eval_rows {
        let x = feat(r);
        let mut best = (0usize, f64::NEG_INFINITY);
        for c in 0..k {
            let mut v = b[c];
            for f in 0..l {
                v += x[f] * w[[f, c]];
            }
            if v > best.1 {
                best = (c, v);
            }
        }
        y_true.push(class_of(ldrs.domains[r].index));
        y_pred.push(best.0);
    }
    macro_f1(&y_true, &y_pred)
}

fn entropy(counts: &[usize], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

struct Contingency {
    table: Vec<Vec<usize>>,
    row_sums: Vec<usize>,
    col_sums: Vec<usize>,
    n: usize,
}

fn contingency(a: &[usize], b: &[usize]) -> Result<Contingency> {
    if a.is_empty() || a.len() != b.len() {
        return Err(SeadaError::InvalidInput("label lists must be equal and non-empty".into()));
    }
    let remap = |labels: &[usize]| -> (Vec<usize>, usize) {
        let mut uniq: Vec<usize> = labels.to_vec();
        uniq.sort_unstable();
        uniq.dedup();
        (labels.iter().map(|l| uniq.binary_search(l).unwrap()).collect(), uniq.len())
    };
    let (ra, ka) = remap(a);
    let (rb, kb) = remap(b);
    let mut table = vec![vec![0usize; kb]; ka];
    for (&i, &j) in ra.iter().zip(rb.iter()) {
        table[i][j] += 1;
    }
    let row_sums: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<usize> =
        (0..kb).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    Ok(Contingency { table, row_sums, col_sums, n: a.len() })
}

/// Homogeneity, completeness, and V-measure of `assignments` against
/// `labels`, via conditional entropies of the contingency table.
pub fn homogeneity_completeness_v(labels: &[usize], assignments: &[usize]) -> Result<(f64, f64, f64)> {
    let ct = contingency(labels, assignments)?;
    let n = ct.n as f64;
    let h_c = entropy(&ct.row_sums, n);
    let h_k = entropy(&ct.col_sums, n);
    // H(C|K)
    let mut h_c_k = 0.0f64;
    let mut h_k_c = 0.0f64;
    for (i, row) in ct.table.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij == 0 {
                continue;
            }
            let p = nij as f64 / n;
            h_c_k -= p * ((nij as f64 / ct.col_sums[j] as f64).ln());
            h_k_c -= p * ((nij as f64 / ct.row_sums[i] as f64).ln());
        }
    }
    let homogeneity = if h_c == 0.0 { 1.0 } else { 1.0 - h_c_k / h_c };
    let completeness = if h_k == 0.0 { 1.0 } else { 1.0 - h_k_c / h_k };
    let v = if homogeneity + completeness == 0.0 {
        0.0
    } else {
        2.0 * homogeneity * completeness / (homogeneity + completeness)
    };
    Ok((homogeneity, completeness, v))
}

fn comb2(x: usize) -> f64 {
    (x as f64) * (x as f64 - 1.0) / 2.0
}

pub fn adjusted_rand_index(labels: &[usize], assignments: &[usize]) -> Result<f64> {
    let ct = contingency(labels, assignments)?;
    let sum_ij: f64 = ct.table.iter().flatten().map(|&v| comb2(v)).sum();
    let sum_a: f64 = ct.row_sums.iter().map(|&v| comb2(v)).sum();
    let sum_b: f64 = ct.col_sums.iter().map(|&v| comb2(v)).sum();
    let total = comb2(ct.n);
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    if (max_index - expected).abs() < 1e-15 {
        return Ok(1.0);
    }
    Ok((sum_ij - expected) / (max_index - expected))
}

/// Expected mutual information under the permutation model, natural log.
fn expected_mutual_information(ct: &Contingency) -> f64 {
    let n = ct.n;
    let nf = n as f64;
    // ln k! table
    let mut lnf = vec![0.0f64; n + 1];
    for i in 1..=n {
        lnf[i] = lnf[i - 1] + (i as f64).ln();
    }
    let mut emi = 0.0f64;
    for &ai in &ct.row_sums {
        for &bj in &ct.col_sums {
            let lo = 1.max(ai + bj) as isize - n as isize;
            let lo = lo.max(1) as usize;
            let hi = ai.min(bj);
            for nij in lo..=hi {
                let term = (nij as f64 / nf) * ((nf * nij as f64) / (ai as f64 * bj as f64)).ln();
                let ln_p = lnf[ai] + lnf[bj] + lnf[n - ai] + lnf[n - bj]
                    - lnf[n]
                    - lnf[nij]
                    - lnf[ai - nij]
                    - lnf[bj - nij]
                    - lnf[n + nij - ai - bj];
                emi += term * ln_p.exp();
            }
        }
    }
    emi
}

pub fn adjusted_mutual_information(labels: &[usize], assignments: &[usize]) -> Result<f64> {
    let ct = contingency(labels, assignments)?;
    let n = ct.n as f64;
    let h_a = entropy(&ct.row_sums, n);
    let h_b = entropy(&ct.col_sums, n);
    let mut mi = 0.0f64;
    for (i, row) in ct.table.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij == 0 {
                continue;
            }
            let p = nij as f64 / n;
            mi += p * ((n * nij as f64) / (ct.row_sums[i] as f64 * ct.col_sums[j] as f64)).ln();
        }
    }
    let emi = expected_mutual_information(&ct);
    let denom = 0.5 * (h_a + h_b) - emi;
    if denom.abs() < 1e-15 {
        return Ok(1.0);
    }
    Ok((mi - emi) / denom)
}

fn sq_euclid(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// k-means with k-means++ seeding; returns (assignments, inertia).
fn kmeans_once(x: &Array2<f32>, k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, f64) {
    let n = x.nrows();
    let l = x.ncols();
    let row = |i: usize| x.row(i).to_slice().unwrap();
    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.gen_range(0..n);
    centers.push(row(first).iter().map(|&v| v as f64).collect());
    let mut d2: Vec<f64> = (0..n)
        .map(|i| row(i).iter().zip(&centers[0]).map(|(&v, &c)| (v as f64 - c).powi(2)).sum())
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut t = rng.gen_range(0.0..total);
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if t < d {
                    idx = i;
                    break;
                }
                t -= d;
            }
            idx
        };
        let c: Vec<f64> = row(pick).iter().map(|&v| v as f64).collect();
        for i in 0..n {
            let d: f64 = row(i).iter().zip(&c).map(|(&v, &cc)| (v as f64 - cc).powi(2)).sum();
            if d < d2[i] {
                d2[i] = d;
            }
        }
        centers.push(c);
    }
    let mut assign = vec![0usize; n];
    for _ in 0..300 {
        let mut changed = false;
        for i in 0..n {
            let mut best = (0usize, f64::INFINITY);
            for (c, center) in centers.iter().enumerate() {
                let d: f64 =
                    row(i).iter().zip(center).map(|(&v, &cc)| (v as f64 - cc).powi(2)).sum();
                if d < best.1 {
                    best = (c, d);
                }
            }
            if assign[i] != best.0 {
                assign[i] = best.0;
                changed = true;
            }
        }
        // recompute centers; revive an empty cluster with the farthest point
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0f64; l]; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (f, &v) in row(i).iter().enumerate() {
                sums[assign[i]][f] += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da: f64 = row(a)
                            .iter()
                            .zip(&centers[assign[a]])
                            .map(|(&v, &cc)| (v as f64 - cc).powi(2))
                            .sum();
                        let db: f64 = row(b)
                            .iter()
                            .zip(&centers[assign[b]])
                            .map(|(&v, &cc)| (v as f64 - cc).powi(2))
                            .sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centers[c] = row(far).iter().map(|&v| v as f64).collect();
                assign[far] = c;
                changed = true;
            } else {
                for f in 0..l {
                    centers[c][f] = sums[c][f] / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let inertia: f64 = (0..n)
        .map(|i| {
            row(i)
                .iter()
                .zip(&centers[assign[i]])
                .map(|(&v, &c)| (v as f64 - c).powi(2))
                .sum::<f64>()
        })
        .sum();
    (assign, inertia)
}

pub fn kmeans(x: &Array2<f32>, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = x.nrows();
    if k == 0 || n < k {
        return Err(SeadaError::InvalidInput(format!("k-means needs >= k={k} rows, got {n}")));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for r in 0..KMEANS_RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive_indexed(seed, "kmeans", r as u64));
        let (assign, inertia) = kmeans_once(x, k, &mut rng);
        if best.as_ref().map_or(true, |(_, bi)| inertia < *bi) {
            best = Some((assign, inertia));
        }
    }
    Ok(best.unwrap().0)
}

/// Mean silhouette coefficient of the given partition, Euclidean distance.
/// Singleton clusters score 0.
pub fn silhouette(x: &Array2<f32>, labels: &[usize]) -> Result<f64> {
    let n = x.nrows();
    if labels.len() != n || n < 2 {
        return Err(SeadaError::InvalidInput("silhouette needs >= 2 labeled rows".into()));
    }
    let mut uniq: Vec<usize> = labels.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    if uniq.len() < 2 {
        return Err(SeadaError::InvalidInput("silhouette needs >= 2 clusters".into()));
    }
    let sizes: BTreeMap<usize, usize> = uniq
        .iter()
        .map(|&c| (c, labels.iter().filter(|&&l| l == c).count()))
        .collect();
    let mut total = 0.0f64;
    for i in 0..n {
        if sizes[&labels[i]] == 1 {
            continue;
        }
        let mut sums: BTreeMap<usize, f64> = uniq.iter().map(|&c| (c, 0.0)).collect();
        for j in 0..n {
            if j == i {
                continue;
            }
            let d = sq_euclid(x.row(i).to_slice().unwrap(), x.row(j).to_slice().unwrap()).sqrt();
            *sums.get_mut(&labels[j]).unwrap() += d;
        }
        let a = sums[&labels[i]] / (sizes[&labels[i]] - 1) as f64;
        let b = uniq
            .iter()
            .filter(|&&c| c != labels[i])
            .map(|&c| sums[&c] / sizes[&c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusteringIndices {
    pub silhouette: f64,
    pub homogeneity: f64,
    pub completeness: f64,
    pub v_measure: f64,
    pub ari: f64,
    pub ami: f64,
}

impl ClusteringIndices {
    pub fn as_array(&self) -> [f64; 6] {
        [self.silhouette, self.homogeneity, self.completeness, self.v_measure, self.ari, self.ami]
    }

    pub const NAMES: [&'static str; 6] =
        ["silhouette", "homogeneity", "completeness", "v_measure", "ari", "ami"];
}

/// Domain structure of the LDR space: silhouette of the domain partition
/// itself; the four agreement indices between a k-means clustering
/// (k = number of domains present) and the domain labels.
pub fn clustering_indices(ldrs: &LdrStore, cn_only: bool, seed: u64) -> Result<ClusteringIndices> {
    let sub = if cn_only { ldrs.select(|i| ldrs.diseases[i] == Disease::CN) } else { ldrs.clone() };
    let labels: Vec<usize> = sub.domains.iter().map(|d| d.index).collect();
    let mut uniq = labels.clone();
    uniq.sort_unstable();
    uniq.dedup();
    if uniq.len() < 2 {
        return Err(SeadaError::InvalidInput(format!(
            "clustering needs >= 2 domains, found {}",
            uniq.len()
        )));
    }
    let assignments = kmeans(&sub.matrix, uniq.len(), seed)?;
    let (homogeneity, completeness, v_measure) = homogeneity_completeness_v(&labels, &assignments)?;
    Ok(ClusteringIndices {
        silhouette: silhouette(&sub.matrix, &labels)?,
        homogeneity,
        completeness,
        v_measure,
        ari: adjusted_rand_index(&labels, &assignments)?,
        ami: adjusted_mutual_information(&labels, &assignments)?,
    })
}

/// Mean relative percent change per index; indices whose baseline magnitude
/// is below 1e-9 are excluded.
pub fn clustering_reduction(method: &ClusteringIndices, baseline: &ClusteringIndices) -> Result<f64> {
    let m = method.as_array();
    let b = baseline.as_array();
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (mi, bi) in m.iter().zip(b.iter()) {
        if bi.abs() < 1e-9 {
            continue;
        }
        sum += 100.0 * (mi - bi) / bi.abs();
        count += 1;
    }
    if count == 0 {
        return Err(SeadaError::InvalidInput(
            "all baseline clustering indices are below 1e-9; reduction undefined".into(),
        ));
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub rmse_mean: Option<f64>,
    pub rmse_std: Option<f64>,
    pub ssim_mean: Option<f64>,
    pub ssim_std: Option<f64>,
    pub diag_f1_out: f64,
    pub diag_f1_in: f64,
    pub domain_f1: f64,
    pub clustering: ClusteringIndices,
    pub clustering_reduction_percent: f64,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(SeadaError::InvalidInput(format!("{}: {msg}", self.method)));
        if let Some(r) = self.rmse_mean {
            if !(r >= 0.0) {
                return bad("rmse out of range");
            }
        }
        if let Some(s) = self.ssim_mean {
            if !(-1.0..=1.0).contains(&s) {
                return bad("ssim out of range");
            }
        }
        for f1 in [self.diag_f1_out, self.diag_f1_in, self.domain_f1] {
            if !(0.0..=1.0).contains(&f1) {
                return bad("F1 out of range");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub num_train_domains: usize,
    pub rows: Vec<MetricsReport>,
}

pub const BASELINE_METHOD: &str = "CAE";

/// Assemble the final table: reduction percentages are recomputed against
/// the CAE row, whose own reduction is 0 by definition.
pub fn build_report(mut rows: Vec<MetricsReport>, num_train_domains: usize) -> Result<Report> {
    let baseline = rows
        .iter()
        .find(|r| r.method == BASELINE_METHOD)
        .ok_or_else(|| {
            SeadaError::InvalidInput(format!("report needs a {BASELINE_METHOD} baseline row"))
        })?
        .clustering;
    for row in &mut rows {
        row.validate()?;
        row.clustering_reduction_percent = if row.method == BASELINE_METHOD {
            0.0
        } else {
            clustering_reduction(&row.clustering, &baseline)?
        };
    }
    Ok(Report { num_train_domains, rows })
}

fn fmt_opt(v: Option<f64>, std: Option<f64>) -> String {
    match (v, std) {
        (Some(m), Some(s)) => format!("{m:.4}±{s:.4}"),
        (Some(m), None) => format!("{m:.4}"),
        _ => "n/a".to_string(),
    }
}

/// Aligned plain-text rendering of the report table.
pub fn render_report_text(report: &Report) -> String {
    let headers = [
        "Method",
        "RMSE ↓",
        "SSIM ↑",
        "Diag.F1 (out) ↑",
        "Diag.F1 (in) ↑",
        "Domain F1 *",
        "Clust.red.% ↓",
    ];
    let mut cells: Vec<Vec<String>> = vec![headers.iter().map(|s| s.to_string()).collect()];
    for r in &report.rows {
        cells.push(vec![
            r.method.clone(),
            fmt_opt(r.rmse_mean, r.rmse_std),
            fmt_opt(r.ssim_mean, r.ssim_std),
            format!("{:.4}", r.diag_f1_out),
            format!("{:.4}", r.diag_f1_in),
            format!("{:.4}", r.domain_f1),
            format!("{:+.2}", r.clustering_reduction_percent),
        ]);
    }
    let widths: Vec<usize> = (0..headers.len())
        .map(|c| cells.iter().map(|row| row[c].chars().count()).max().unwrap())
        .collect();
    let mut out = String::new();
    for (i, row) in cells.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, &w)| format!("{cell:<width$}", width = w))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            out.push('\n');
        }
    }
    out.push_str(&format!(
        "* Domain F1 close to 1/{} (the {}-domain chance level) indicates strong harmonization.\n",
        report.num_train_domains, report.num_train_domains
    ));
    out.push('\n');
    out.push_str("Clustering indices (CN rows, domain labels):\n");
    for r in &report.rows {
        let vals: Vec<String> = ClusteringIndices::NAMES
            .iter()
            .zip(r.clustering.as_array())
            .map(|(n, v)| format!("{n}={v:.4}"))
            .collect();
        out.push_str(&format!("  {:<8} {}\n", r.method, vals.join(" ")));
    }
    out
}

pub fn save_report(path: &Path, report: &Report) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<Report> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DomainId;
    use ndarray::Array3;
    use rand_distr::{Distribution, Normal};

    fn vol(fill: f32) -> Volume {
        Volume::new(Array3::from_elem((8, 8, 8), fill), 1.0)
    }

    #[test]
    fn rmse_identity_and_constant() {
        let a = vol(0.0);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        assert!((rmse(&a, &vol(0.5)).unwrap() - 0.5).abs() < 1e-12);
        let small = Volume::new(Array3::zeros((4, 4, 4)), 1.0);
        assert!(rmse(&a, &small).is_err());
    }

    #[test]
    fn ssim_identity_constant_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Volume::new(Array3::from_shape_fn((10, 10, 10), |_| rng.gen::<f32>()), 1.0);
        assert!((ssim3d(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        // constant volumes: closed form (2*0.2*0.8 + C1) / (0.04 + 0.64 + C1)
        let got = ssim3d(&vol(0.2), &vol(0.8)).unwrap();
        let want = (0.32 + 1e-4) / (0.68 + 1e-4);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        let b = Volume::new(Array3::from_shape_fn((10, 10, 10), |_| rng.gen::<f32>()), 1.0);
        assert!((ssim3d(&a, &b).unwrap() - ssim3d(&b, &a).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn macro_f1_oracles() {
        assert_eq!(macro_f1(&[1, 2, 1], &[1, 2, 1]).unwrap(), 1.0);
        assert_eq!(macro_f1(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 0.0);
        let got = macro_f1(&["A", "A", "B", "B"], &["A", "B", "B", "B"]).unwrap();
        assert!((got - 11.0 / 15.0).abs() < 1e-9, "{got}");
        assert!(macro_f1::<u8>(&[], &[]).is_err());
    }

    fn ldr_store(rows: Vec<(Vec<f32>, &str, Disease, usize)>) -> LdrStore {
        let l = rows[0].0.len();
        let mut matrix = Array2::zeros((rows.len(), l));
        for (i, (v, _, _, _)) in rows.iter().enumerate() {
            for (f, &x) in v.iter().enumerate() {
                matrix[[i, f]] = x;
            }
        }
        LdrStore {
            matrix,
            patient_ids: rows.iter().map(|r| r.1.to_string()).collect(),
            diseases: rows.iter().map(|r| r.2).collect(),
            domains: rows
                .iter()
                .map(|r| DomainId { index: r.3, name: format!("d{}", r.3) })
                .collect(),
            train_domain_indices: vec![0, 1],
        }
    }

    fn gaussian_clouds(n_per: usize, sigma: f32, seed: u64) -> LdrStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0f32, sigma).unwrap();
        let mut rows = Vec::new();
        for i in 0..n_per {
            let cn: Vec<f32> = (0..4).map(|_| -1.0 + noise.sample(&mut rng)).collect();
            rows.push((cn, format!("cn{i}"), Disease::CN, 0));
            let ad: Vec<f32> = (0..4).map(|_| 1.0 + noise.sample(&mut rng)).collect();
            rows.push((ad, format!("ad{i}"), Disease::AD, 0));
        }
        let l = 4;
        let mut matrix = Array2::zeros((rows.len(), l));
        for (i, (v, _, _, _)) in rows.iter().enumerate() {
            for (f, &x) in v.iter().enumerate() {
                matrix[[i, f]] = x;
            }
        }
        LdrStore {
            matrix,
            patient_ids: rows.iter().map(|r| r.1.clone()).collect(),
            diseases: rows.iter().map(|r| r.2).collect(),
            domains: rows
                .iter()
                .map(|r| DomainId { index: r.3, name: format!("d{}", r.3) })
                .collect(),
            train_domain_indices: vec![0],
        }
    }

    #[test]
    fn diag_f1_self_retrieval_and_separable() {
        let store = gaussian_clouds(10, 0.1, 1);
        assert_eq!(diag_f1_k(&store, &store, 1).unwrap(), 1.0);
        let test = gaussian_clouds(8, 0.1, 2);
        assert_eq!(diag_f1(&store, &test).unwrap(), 1.0);
    }

    #[test]
    fn diag_f1_requires_both_classes() {
        let store = gaussian_clouds(10, 0.1, 1);
        let cn_only = store.select(|i| store.diseases[i] == Disease::CN);
        assert!(diag_f1(&cn_only, &store).is_err());
    }

    fn domain_fixture(n_per: usize, k: usize, separable: bool, seed: u64) -> LdrStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0f32, 1.0).unwrap();
        let mut rows = Vec::new();
        for dom in 0..k {
            for i in 0..n_per {
                let mut v: Vec<f32> = (0..6).map(|_| noise.sample(&mut rng)).collect();
                if separable {
                    v[0] = dom as f32;
                }
                rows.push((v, format!("p{dom}-{i}"), Disease::CN, dom));
            }
        }
        ldr_store(rows.iter().map(|(v, p, d, dom)| (v.clone(), p.as_str(), *d, *dom)).collect())
    }

    #[test]
    fn domain_f1_separable_is_perfect() {
        let store = domain_fixture(15, 3, true, 9);
        assert_eq!(domain_f1(&store, 1).unwrap(), 1.0);
    }

    #[test]
    fn domain_f1_chance_level() {
        let mut vals = Vec::new();
        for seed in 0..5 {
            let store = domain_fixture(30, 5, false, 50 + seed);
            vals.push(domain_f1(&store, seed).unwrap());
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = vals[2];
        assert!((0.1..=0.35).contains(&median), "median chance F1 {median} ({vals:?})");
    }

    #[test]
    fn domain_f1_rejects_thin_domains() {
        let store = domain_fixture(9, 2, true, 1);
        let err = domain_f1(&store, 1).unwrap_err();
        assert!(err.to_string().contains(">= 10"));
    }

    #[test]
    fn supervised_indices_perfect_agreement() {
        let labels = [0, 0, 1, 1, 2, 2];
        let (h, c, v) = homogeneity_completeness_v(&labels, &labels).unwrap();
        assert!((h - 1.0).abs() < 1e-12 && (c - 1.0).abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        assert!((adjusted_rand_index(&labels, &labels).unwrap() - 1.0).abs() < 1e-12);
        assert!((adjusted_mutual_information(&labels, &labels).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ari_oracles() {
        // permutation invariance
        assert!(
            (adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap() - 1.0).abs() < 1e-12
        );
        // hand pair-count: all 6 pairs discordant with structure -> -0.5
        let got = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
        assert!((got - (-0.5)).abs() < 1e-12, "{got}");
    }

    #[test]
    fn silhouette_two_tight_clusters() {
        let mut m = Array2::zeros((8, 2));
        for i in 0..4 {
            m[[i, 0]] = 10.0 + 0.01 * i as f32;
            m[[i + 4, 0]] = -10.0 + 0.01 * i as f32;
        }
        let labels = [0, 0, 0, 0, 1, 1, 1, 1];
        let s = silhouette(&m, &labels).unwrap();
        assert!(s > 0.99, "{s}");
        let bad = [0, 1, 0, 1, 0, 1, 0, 1];
        assert!(silhouette(&m, &bad).unwrap() < s);
    }

    #[test]
    fn clustering_indices_separated_domains() {
        let store = domain_fixture(12, 3, true, 4);
        // make coordinate separation dominate the noise
        let mut store = store;
        store.matrix.column_mut(0).mapv_inplace(|v| v * 50.0);
        let idx = clustering_indices(&store, true, 7).unwrap();
        assert!(idx.homogeneity > 0.9 && idx.ari > 0.9 && idx.ami > 0.9, "{idx:?}");
        let one_domain = store.select(|i| store.domains[i].index == 0);
        assert!(clustering_indices(&one_domain, true, 7).is_err());
    }

    #[test]
    fn clustering_indices_deterministic() {
        let store = domain_fixture(12, 3, false, 4);
        let a = clustering_indices(&store, true, 7).unwrap();
        let b = clustering_indices(&store, true, 7).unwrap();
        assert_eq!(a, b);
    }

    fn flat_indices(v: f64) -> ClusteringIndices {
        ClusteringIndices {
            silhouette: v,
            homogeneity: v,
            completeness: v,
            v_measure: v,
            ari: v,
            ami: v,
        }
    }

    #[test]
    fn reduction_identity_full_and_exclusion() {
        let b = flat_indices(0.5);
        assert_eq!(clustering_reduction(&b, &b).unwrap(), 0.0);
        assert_eq!(clustering_reduction(&flat_indices(0.0), &b).unwrap(), -100.0);
        let mut partial = b;
        partial.silhouette = 0.0; // near-zero baseline entry excluded
        let mut m = flat_indices(0.25);
        m.silhouette = 123.0;
        assert_eq!(clustering_reduction(&m, &partial).unwrap(), -50.0);
        assert!(clustering_reduction(&b, &flat_indices(0.0)).is_err());
    }

    fn report_row(method: &str, with_recon: bool, scale: f64) -> MetricsReport {
        MetricsReport {
            method: method.to_string(),
            rmse_mean: with_recon.then_some(0.07),
            rmse_std: with_recon.then_some(0.01),
            ssim_mean: with_recon.then_some(0.9),
            ssim_std: with_recon.then_some(0.02),
            diag_f1_out: 0.7,
            diag_f1_in: 0.75,
            domain_f1: 0.3,
            clustering: flat_indices(scale),
            clustering_reduction_percent: 0.0,
        }
    }

    #[test]
    fn report_assembly_and_rendering() {
        let rows = vec![
            report_row("CAE", true, 0.5),
            report_row("NOISE", false, 0.4),
            report_row("SEADA", true, 0.1),
        ];
        let report = build_report(rows, 5).unwrap();
        assert_eq!(report.rows[0].clustering_reduction_percent, 0.0);
        assert!((report.rows[2].clustering_reduction_percent - (-80.0)).abs() < 1e-9);
        let text = render_report_text(&report);
        assert!(text.contains("n/a"), "{text}");
        assert!(text.contains("1/5"), "{text}");
        assert!(build_report(vec![report_row("SEADA", true, 0.1)], 5).is_err());
    }

    #[test]
    fn report_file_round_trip() {
        let report =
            build_report(vec![report_row("CAE", true, 0.5), report_row("ADA", true, 0.3)], 5)
                .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        save_report(&path, &report).unwrap();
        assert_eq!(load_report(&path).unwrap(), report);
        let first = fs::read(&path).unwrap();
        save_report(&path, &load_report(&path).unwrap()).unwrap();
        assert_eq!(first, fs::read(&path).unwrap());
    }
}
