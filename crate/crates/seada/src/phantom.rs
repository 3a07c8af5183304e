//! Deterministic synthetic multi-domain, multi-disease volumetric dataset
//! generator. Stands in for access-restricted scanner data: each "patient"
//! is a smooth ellipsoidal anatomy with nested intensity shells, diseases
//! are focal atrophy lesions, and domains are acquisition effects
//! (gain / bias / noise / blur).

use ndarray::{Array3, Zip};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    DatasetManifest, Disease, DomainEntry, DomainId, DomainRole, Sample, SampleDescriptor, Volume,
    STORE_SCHEMA_VERSION,
};
use crate::error::{Result, SeadaError};
use crate::seeds;

/// Scanner/protocol effect for one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainEffect {
    pub gain: f32,
    pub bias: f32,
    pub noise_sigma: f32,
    pub blur_sigma: f32,
}

impl DomainEffect {
    pub fn validate(&self) -> Result<()> {
        if self.gain <= 0.0 {
            return Err(SeadaError::InvalidInput("domain gain must be > 0".into()));
        }
        if self.noise_sigma < 0.0 || self.blur_sigma < 0.0 {
            return Err(SeadaError::InvalidInput("noise_sigma and blur_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Focal pathology effect. `atrophy_factor` = 1 means no change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiseaseEffect {
    pub atrophy_factor: f32,
    /// Lesion center as a fraction of each axis length.
    pub lesion_center_frac: [f32; 3],
    pub lesion_radius: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub role: DomainRole,
    pub effect: DomainEffect,
    /// Patients per disease in this domain.
    pub cn: usize,
    pub ad: usize,
    #[serde(default)]
    pub mci: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub shape: [usize; 3],
    pub voxel_size_mm: f32,
    pub domains: Vec<DomainSpec>,
    pub ad_effect: DiseaseEffect,
    pub mci_effect: DiseaseEffect,
    pub scans_per_patient: usize,
    #[serde(default)]
    pub master_seed: u64,
}

impl PhantomConfig {
    /// Desk-scale default: 5 training + 2 held-out test domains, effects
    /// spaced so that domain is linearly separable from raw voxel statistics.
    pub fn default_desk(master_seed: u64) -> Self {
        let mk = |name: &str, role, gain, bias, noise, blur, cn, ad| DomainSpec {
            name: name.to_string(),
            role,
            effect: DomainEffect { gain, bias, noise_sigma: noise, blur_sigma: blur },
            cn,
            ad,
            mci: 0,
        };
        PhantomConfig {
            shape: [32, 32, 32],
            voxel_size_mm: 2.0,
            domains: vec![
                mk("site0", DomainRole::Train, 0.70, -0.140, 0.022, 0.30, 13, 13),
                mk("site1", DomainRole::Train, 0.80, -0.100, 0.024, 0.34, 13, 13),
                mk("site2", DomainRole::Train, 0.90, -0.060, 0.027, 0.39, 13, 13),
                mk("site3", DomainRole::Train, 1.00, -0.020, 0.029, 0.43, 13, 13),
                mk("site4", DomainRole::Train, 1.10, 0.020, 0.031, 0.47, 13, 13),
                mk("site5", DomainRole::Train, 1.20, 0.060, 0.033, 0.51, 13, 13),
                mk("site6", DomainRole::Train, 1.30, 0.100, 0.036, 0.56, 13, 13),
                mk("site7", DomainRole::Train, 1.40, 0.140, 0.038, 0.60, 13, 13),
                mk("site8", DomainRole::Test, 0.85, -0.080, 0.026, 0.37, 10, 10),
                mk("site9", DomainRole::Test, 1.25, 0.080, 0.035, 0.54, 10, 10),
            ],
            ad_effect: DiseaseEffect {
                atrophy_factor: 0.40,
                lesion_center_frac: [0.42, 0.40, 0.58],
                lesion_radius: 4.5,
            },
            mci_effect: DiseaseEffect {
                atrophy_factor: 0.72,
                lesion_center_frac: [0.42, 0.40, 0.58],
                lesion_radius: 4.5,
            },
            scans_per_patient: 1,
            master_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&s| s == 0) {
            return Err(SeadaError::InvalidInput("phantom shape must be positive".into()));
        }
        if self.domains.len() < 2 {
            return Err(SeadaError::InvalidInput("phantom config needs K >= 2 domains".into()));
        }
        if self.scans_per_patient == 0 {
            return Err(SeadaError::InvalidInput("scans_per_patient must be >= 1".into()));
        }
        for d in &self.domains {
            d.effect.validate()?;
            if d.role == DomainRole::Train && d.cn == 0 {
                return Err(SeadaError::InvalidInput(format!(
                    "train domain '{}' has zero CN patients; stage 3 would starve",
                    d.name
                )));
            }
        }
        for (i, a) in self.domains.iter().enumerate() {
            for b in self.domains.iter().skip(i + 1) {
                if a.effect == b.effect {
                    return Err(SeadaError::InvalidInput(format!(
                        "domains '{}' and '{}' have identical effects",
                        a.name, b.name
                    )));
                }
                if a.name == b.name {
                    return Err(SeadaError::InvalidInput(format!("duplicate domain name '{}'", a.name)));
                }
            }
        }
        Ok(())
    }
}

fn smoothstep(t: f32) -> f32 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Smooth ellipsoidal anatomy with nested intensity shells and a seeded
/// low-frequency per-patient radial deformation. Values in [0, 1],
/// bit-deterministic in `patient_seed`.
pub fn generate_base_anatomy(patient_seed: u64, shape: [usize; 3]) -> Volume {
    let [d, h, w] = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(patient_seed);
    // coarse 4x4x4 deformation grid, +-12% radial perturbation
    let grid: Vec<f32> = (0..64).map(|_| rng.gen_range(-0.12f32..0.12)).collect();
    // mild per-patient tissue intensity jitter
    let shell_outer = 0.48 + rng.gen_range(-0.04f32..0.04);
    let shell_inner = 0.80 + rng.gen_range(-0.04f32..0.04);
    let core = 0.22 + rng.gen_range(-0.03f32..0.03);

    let trilerp = |fx: f32, fy: f32, fz: f32| -> f32 {
        let g = 3.0; // grid cells per axis
        let (x, y, z) = (fx * g, fy * g, fz * g);
        let (x0, y0, z0) = (x.floor() as usize, y.floor() as usize, z.floor() as usize);
        let (x0, y0, z0) = (x0.min(2), y0.min(2), z0.min(2));
        let (tx, ty, tz) = (x - x0 as f32, y - y0 as f32, z - z0 as f32);
        let at = |i: usize, j: usize, k: usize| grid[i * 16 + j * 4 + k];
        let mut acc = 0.0;
        for (di, wi) in [(0, 1.0 - tx), (1, tx)] {
            for (dj, wj) in [(0, 1.0 - ty), (1, ty)] {
                for (dk, wk) in [(0, 1.0 - tz), (1, tz)] {
                    acc += wi * wj * wk * at(x0 + di, y0 + dj, z0 + dk);
                }
            }
        }
        acc
    };

    let center = [d as f32 / 2.0, h as f32 / 2.0, w as f32 / 2.0];
    let semi = [d as f32 * 0.42, h as f32 * 0.42, w as f32 * 0.42];
    let mut data = Array3::<f32>::zeros((d, h, w));
    for i in 0..d {
        for j in 0..h {
            for k in 0..w {
                // normalized ellipsoidal radius, deformed per patient
                let dx = (i as f32 + 0.5 - center[0]) / semi[0];
                let dy = (j as f32 + 0.5 - center[1]) / semi[1];
                let dz = (k as f32 + 0.5 - center[2]) / semi[2];
                let r0 = (dx * dx + dy * dy + dz * dz).sqrt();
                let deform = trilerp(i as f32 / d as f32, j as f32 / h as f32, k as f32 / w as f32);
                let r = r0 * (1.0 + deform);
                // nested shells: core ventricle, white matter, gray shell,
                // each blended smoothly over a 0.1-wide band
                let v = if r >= 1.0 {
                    0.0
                } else {
                    let gray = shell_outer * smoothstep((1.0 - r) / 0.1);
                    let white = (shell_inner - shell_outer) * smoothstep((0.72 - r) / 0.1);
                    let vent = (core - shell_inner) * smoothstep((0.28 - r) / 0.1);
                    gray + white + vent
                };
                data[[i, j, k]] = v.clamp(0.0, 1.0);
            }
        }
    }
    Volume::new(data, 1.0)
}

/// Multiply intensities inside the lesion sphere by `atrophy_factor`, with a
/// smooth falloff over a 2-voxel margin; voxels beyond the margin are
/// untouched bit-exactly.
pub fn apply_disease(vol: &Volume, effect: &DiseaseEffect) -> Result<Volume> {
    let (d, h, w) = vol.shape();
    let center = [
        effect.lesion_center_frac[0] * d as f32,
        effect.lesion_center_frac[1] * h as f32,
        effect.lesion_center_frac[2] * w as f32,
    ];
    let radius = effect.lesion_radius;
    if radius <= 0.0 {
        return Err(SeadaError::InvalidInput("lesion_radius must be > 0".into()));
    }
    const MARGIN: f32 = 2.0;
    for axis in 0..3 {
        let len = [d, h, w][axis] as f32;
        if center[axis] - radius - MARGIN < 0.0 || center[axis] + radius + MARGIN > len {
            return Err(SeadaError::InvalidInput(format!(
                "lesion sphere (center {:?}, radius {radius}) plus margin falls outside the volume",
                center
            )));
        }
    }
    if (effect.atrophy_factor - 1.0).abs() == 0.0 {
        return Ok(vol.clone());
    }
    let mut out = vol.data.clone();
    // only visit the lesion bounding box; everything else stays bit-exact
    let lo = |c: f32| ((c - radius - MARGIN).floor().max(0.0)) as usize;
    let hi = |c: f32, len: usize| ((c + radius + MARGIN).ceil() as usize).min(len);
    for i in lo(center[0])..hi(center[0], d) {
        for j in lo(center[1])..hi(center[1], h) {
            for k in lo(center[2])..hi(center[2], w) {
                let dx = i as f32 + 0.5 - center[0];
                let dy = j as f32 + 0.5 - center[1];
                let dz = k as f32 + 0.5 - center[2];
                let r = (dx * dx + dy * dy + dz * dz).sqrt();
                if r >= radius + MARGIN {
                    continue;
                }
                let scale = if r <= radius {
                    effect.atrophy_factor
                } else {
                    // blend factor -> 1 across the margin band
                    let t = smoothstep((r - radius) / MARGIN);
                    effect.atrophy_factor + (1.0 - effect.atrophy_factor) * t
                };
                out[[i, j, k]] *= scale;
            }
        }
    }
    Ok(Volume::new(out, vol.voxel_size_mm))
}

/// Separable Gaussian blur with 1D kernels truncated at 3 sigma.
/// `sigma == 0` returns the input unchanged.
pub fn gaussian_blur(data: &Array3<f32>, sigma: f32) -> Array3<f32> {
    if sigma <= 0.0 {
        return data.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0f64;
    for t in -radius..=radius {
        let v = (-((t * t) as f64) / (2.0 * (sigma as f64).powi(2))).exp();
        kernel.push(v);
        sum += v;
    }
    let kernel: Vec<f32> = kernel.into_iter().map(|v| (v / sum) as f32).collect();

    let (d, h, w) = (data.shape()[0], data.shape()[1], data.shape()[2]);
    let mut cur = data.clone();
    for axis in 0..3 {
        let mut next = Array3::<f32>::zeros((d, h, w));
        let len = [d, h, w][axis] as isize;
        for i in 0..d {
            for j in 0..h {
                for k in 0..w {
                    let pos = [i as isize, j as isize, k as isize];
                    let mut acc = 0.0f32;
                    for (ki, kv) in kernel.iter().enumerate() {
                        let off = ki as isize - radius;
                        // clamp-to-edge boundary
                        let mut p = pos;
                        p[axis] = (p[axis] + off).clamp(0, len - 1);
                        acc += kv * cur[[p[0] as usize, p[1] as usize, p[2] as usize]];
                    }
                    next[[i, j, k]] = acc;
                }
            }
        }
        cur = next;
    }
    cur
}

/// Apply a scanner effect: blur, affine intensity transform, seeded additive
/// Gaussian noise, clipped back to [0, 1].
pub fn apply_domain(vol: &Volume, effect: &DomainEffect, scan_seed: u64) -> Result<Volume> {
    effect.validate()?;
    let blurred = gaussian_blur(&vol.data, effect.blur_sigma);
    let mut out = blurred;
    if effect.gain != 1.0 || effect.bias != 0.0 {
        out.mapv_inplace(|v| v * effect.gain + effect.bias);
    }
    if effect.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(scan_seed);
        let normal = Normal::new(0.0f32, effect.noise_sigma).expect("validated sigma");
        Zip::from(&mut out).for_each(|v| *v += normal.sample(&mut rng));
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(Volume::new(out, vol.voxel_size_mm))
}

/// Generate the full dataset described by `config`. Per-patient and per-scan
/// seeds are derived by stable hashing from the master seed, so output is
/// identical regardless of generation order.
pub fn generate_dataset(config: &PhantomConfig) -> Result<(DatasetManifest, Vec<Sample>)> {
    config.validate()?;
    let mut samples = Vec::new();
    let mut descriptors = Vec::new();
    let domains: Vec<DomainEntry> = config
        .domains
        .iter()
        .enumerate()
        .map(|(i, d)| DomainEntry { index: i, name: d.name.clone(), role: d.role })
        .collect();

    for (dom_idx, dom) in config.domains.iter().enumerate() {
        for (disease, count) in [
            (Disease::CN, dom.cn),
            (Disease::AD, dom.ad),
            (Disease::MCI, dom.mci),
        ] {
            for p in 0..count {
                let patient_id = format!("{}-{}-{:03}", dom.name, disease, p);
                let patient_seed = seeds::derive(config.master_seed, &format!("anatomy/{patient_id}"));
                let base = generate_base_anatomy(patient_seed, config.shape);
                let diseased = match disease {
                    Disease::CN => base,
                    Disease::AD => apply_disease(&base, &config.ad_effect)?,
                    Disease::MCI => apply_disease(&base, &config.mci_effect)?,
                };
                for scan in 0..config.scans_per_patient {
                    let scan_seed = seeds::derive_indexed(
                        config.master_seed,
                        &format!("scan/{patient_id}"),
                        scan as u64,
                    );
                    let vol = apply_domain(&diseased, &dom.effect, scan_seed)?;
                    let file = format!("{patient_id}-s{scan}.raw");
                    descriptors.push(SampleDescriptor {
                        file: file.clone(),
                        patient_id: patient_id.clone(),
                        disease,
                        domain: dom_idx,
                    });
                    samples.push(Sample {
                        volume: Volume::new(vol.data, config.voxel_size_mm),
                        patient_id: patient_id.clone(),
                        disease,
                        domain: DomainId { index: dom_idx, name: dom.name.clone() },
                    });
                }
            }
        }
    }

    let manifest = DatasetManifest {
        schema_version: STORE_SCHEMA_VERSION,
        shape: config.shape,
        voxel_size_mm: config.voxel_size_mm,
        domains,
        samples: descriptors,
    };
    manifest.validate()?;
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn anatomy_is_deterministic() {
        let a = generate_base_anatomy(11, [16, 16, 16]);
        let b = generate_base_anatomy(11, [16, 16, 16]);
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn anatomy_seeds_differ_in_over_one_percent_of_voxels() {
        let a = generate_base_anatomy(1, [16, 16, 16]);
        let b = generate_base_anatomy(2, [16, 16, 16]);
        let differing = a.data.iter().zip(b.data.iter()).filter(|(x, y)| x != y).count();
        let frac = differing as f64 / a.data.len() as f64;
        assert!(frac > 0.01, "only {frac:.4} of voxels differ");
    }

    #[test]
    fn anatomy_range_is_unit_interval() {
        let v = generate_base_anatomy(5, [16, 16, 16]);
        assert!(v.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    fn lesion() -> DiseaseEffect {
        DiseaseEffect {
            atrophy_factor: 0.5,
            lesion_center_frac: [0.5, 0.5, 0.5],
            lesion_radius: 3.0,
        }
    }

    #[test]
    fn disease_identity_when_factor_is_one() {
        let v = generate_base_anatomy(3, [16, 16, 16]);
        let e = DiseaseEffect { atrophy_factor: 1.0, ..lesion() };
        let out = apply_disease(&v, &e).unwrap();
        assert_eq!(out.data, v.data);
    }

    #[test]
    fn disease_zero_factor_zeroes_lesion_core() {
        let v = Volume::new(Array3::from_elem((16, 16, 16), 0.7f32), 1.0);
        let e = DiseaseEffect { atrophy_factor: 0.0, ..lesion() };
        let out = apply_disease(&v, &e).unwrap();
        assert_eq!(out.data[[8, 8, 8]], 0.0);
        assert_eq!(out.data[[8, 8, 9]], 0.0);
    }

    #[test]
    fn disease_leaves_outside_margin_bit_exact() {
        let v = generate_base_anatomy(9, [16, 16, 16]);
        let out = apply_disease(&v, &lesion()).unwrap();
        let c = [8.0f32, 8.0, 8.0];
        let mut checked = 0;
        for i in 0..16 {
            for j in 0..16 {
                for k in 0..16 {
                    let r = ((i as f32 + 0.5 - c[0]).powi(2)
                        + (j as f32 + 0.5 - c[1]).powi(2)
                        + (k as f32 + 0.5 - c[2]).powi(2))
                    .sqrt();
                    if r >= 5.0 {
                        assert_eq!(out.data[[i, j, k]], v.data[[i, j, k]]);
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn disease_rejects_out_of_bounds_lesion() {
        let v = generate_base_anatomy(1, [16, 16, 16]);
        let e = DiseaseEffect {
            atrophy_factor: 0.5,
            lesion_center_frac: [0.05, 0.5, 0.5],
            lesion_radius: 3.0,
        };
        assert!(apply_disease(&v, &e).is_err());
    }

    #[test]
    fn domain_identity_effect_is_bit_exact() {
        let v = generate_base_anatomy(4, [16, 16, 16]);
        let e = DomainEffect { gain: 1.0, bias: 0.0, noise_sigma: 0.0, blur_sigma: 0.0 };
        let out = apply_domain(&v, &e, 123).unwrap();
        assert_eq!(out.data, v.data);
    }

    #[test]
    fn domain_no_noise_is_seed_independent() {
        let v = generate_base_anatomy(4, [16, 16, 16]);
        let e = DomainEffect { gain: 1.1, bias: 0.02, noise_sigma: 0.0, blur_sigma: 0.7 };
        let a = apply_domain(&v, &e, 1).unwrap();
        let b = apply_domain(&v, &e, 999).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn domain_affine_on_constant_volume() {
        let v = Volume::new(Array3::from_elem((4, 4, 4), 0.3f32), 1.0);
        let e = DomainEffect { gain: 2.0, bias: 0.1, noise_sigma: 0.0, blur_sigma: 0.0 };
        let out = apply_domain(&v, &e, 0).unwrap();
        for &x in out.data.iter() {
            assert!((x - 0.7).abs() < 1e-6, "0.3*2+0.1 should be 0.7, got {x}");
        }
    }

    #[test]
    fn blur_preserves_constant_volumes() {
        let v = Array3::from_elem((8, 8, 8), 0.4f32);
        let out = gaussian_blur(&v, 1.2);
        for &x in out.iter() {
            assert!((x - 0.4).abs() < 1e-5);
        }
    }

    fn tiny_config() -> PhantomConfig {
        let mut c = PhantomConfig::default_desk(99);
        c.shape = [16, 16, 16];
        // shrink the lesion so it fits a 16^3 volume with the 2-voxel margin
        c.ad_effect =
            DiseaseEffect { atrophy_factor: 0.4, lesion_center_frac: [0.5, 0.5, 0.5], lesion_radius: 2.5 };
        c.mci_effect =
            DiseaseEffect { atrophy_factor: 0.72, lesion_center_frac: [0.5, 0.5, 0.5], lesion_radius: 2.5 };
        for d in &mut c.domains {
            d.cn = 2;
            d.ad = 2;
        }
        c.domains.truncate(3);
        c.domains[2].role = DomainRole::Test;
        c
    }

    #[test]
    fn dataset_counts_match_config() {
        let c = tiny_config();
        let (manifest, samples) = generate_dataset(&c).unwrap();
        assert_eq!(samples.len(), 3 * 4);
        assert_eq!(manifest.samples.len(), samples.len());
        assert_eq!(manifest.domains.len(), 3);
    }

    #[test]
    fn dataset_is_deterministic() {
        let c = tiny_config();
        let (_, a) = generate_dataset(&c).unwrap();
        let (_, b) = generate_dataset(&c).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.volume.data, y.volume.data);
            assert_eq!(x.patient_id, y.patient_id);
        }
    }

    #[test]
    fn dataset_rejects_zero_cn_train_domain() {
        let mut c = tiny_config();
        c.domains[0].cn = 0;
        assert!(generate_dataset(&c).is_err());
    }

    #[test]
    fn per_domain_mean_follows_bias_ordering() {
        // same gain, no blur/noise: per-domain mean intensity must follow bias
        let mut c = tiny_config();
        for (i, d) in c.domains.iter_mut().enumerate() {
            d.effect = DomainEffect {
                gain: 1.0,
                bias: -0.05 + 0.05 * i as f32,
                noise_sigma: 0.0,
                blur_sigma: 0.0,
            };
        }
        let (_, samples) = generate_dataset(&c).unwrap();
        let mut means = vec![(0.0f64, 0usize); 3];
        for s in &samples {
            let m = s.volume.data.iter().map(|&v| v as f64).sum::<f64>() / s.volume.data.len() as f64;
            means[s.domain.index].0 += m;
            means[s.domain.index].1 += 1;
        }
        let means: Vec<f64> = means.iter().map(|(s, n)| s / *n as f64).collect();
        assert!(means[0] < means[1] && means[1] < means[2], "means {means:?}");
    }

    #[test]
    fn generated_volumes_satisfy_volume_invariants() {
        let (_, samples) = generate_dataset(&tiny_config()).unwrap();
        for s in &samples {
            assert!(s.volume.all_finite());
            assert!(s.volume.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
