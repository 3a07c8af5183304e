//! Domain types, dataset manifests, patient-level splitting, intensity
//! normalization, and the on-disk volume store.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SeadaError};

pub const STORE_SCHEMA_VERSION: u32 = 1;

/// 3D scalar intensity grid. Axis order is (depth, height, width).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    pub voxel_size_mm: f32,
}

impl Volume {
    pub fn new(data: Array3<f32>, voxel_size_mm: f32) -> Self {
        Volume { data, voxel_size_mm }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Disease {
    CN,
    AD,
    MCI,
}

impl Disease {
    pub fn as_str(&self) -> &'static str {
        match self {
            Disease::CN => "CN",
            Disease::AD => "AD",
            Disease::MCI => "MCI",
        }
    }

    pub fn parse(s: &str) -> Result<Disease> {
        match s {
            "CN" => Ok(Disease::CN),
            "AD" => Ok(Disease::AD),
            "MCI" => Ok(Disease::MCI),
            _ => Err(SeadaError::InvalidInput(format!("unknown disease label '{s}'"))),
        }
    }
}

impl std::fmt::Display for Disease {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Acquisition context label. Indices are dense and unique within a manifest.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DomainId {
    pub index: usize,
    pub name: String,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub volume: Volume,
    pub patient_id: String,
    pub disease: Disease,
    pub domain: DomainId,
}

/// Descriptor for one sample in a manifest (volume lives in its own file).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleDescriptor {
    pub file: String,
    pub patient_id: String,
    pub disease: Disease,
    pub domain: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainEntry {
    pub index: usize,
    pub name: String,
    pub role: DomainRole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainRole {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub shape: [usize; 3],
    pub voxel_size_mm: f32,
    pub domains: Vec<DomainEntry>,
    pub samples: Vec<SampleDescriptor>,
}

impl DatasetManifest {
    pub fn train_domains(&self) -> Vec<DomainId> {
        self.domains
            .iter()
            .filter(|d| d.role == DomainRole::Train)
            .map(|d| DomainId { index: d.index, name: d.name.clone() })
            .collect()
    }

    pub fn test_domains(&self) -> Vec<DomainId> {
        self.domains
            .iter()
            .filter(|d| d.role == DomainRole::Test)
            .map(|d| DomainId { index: d.index, name: d.name.clone() })
            .collect()
    }

    pub fn domain(&self, index: usize) -> Result<DomainId> {
        self.domains
            .iter()
            .find(|d| d.index == index)
            .map(|d| DomainId { index: d.index, name: d.name.clone() })
            .ok_or_else(|| SeadaError::InvalidInput(format!("unknown domain index {index}")))
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for d in &self.domains {
            if !seen.insert(d.index) {
                return Err(SeadaError::InvalidInput(format!(
                    "duplicate domain index {} in manifest",
                    d.index
                )));
            }
        }
        if (0..self.domains.len()).any(|i| !seen.contains(&i)) {
            return Err(SeadaError::InvalidInput(
                "domain indices are not dense in [0, K)".into(),
            ));
        }
        for s in &self.samples {
            if s.patient_id.is_empty() {
                return Err(SeadaError::InvalidInput(format!(
                    "sample '{}' has empty patient_id",
                    s.file
                )));
            }
            if !seen.contains(&s.domain) {
                return Err(SeadaError::Store {
                    sample: s.file.clone(),
                    msg: format!("domain index {} not declared in manifest", s.domain),
                });
            }
        }
        Ok(())
    }
}

/// Patient-level train/eval partition. Never splits by scan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_ids: BTreeSet<String>,
    pub eval_ids: BTreeSet<String>,
}

/// Clamp negatives to 0 and values above `sigma_mult * sigma` to that cap,
/// then map linearly to [0, 1]. `sigma` is the standard deviation of the
/// voxels that are strictly positive after the negative clamp, computed
/// per volume (background zeros would otherwise deflate it).
///
/// An all-zero volume is returned unchanged; sigma is undefined there.
pub fn normalize_intensity(vol: &Volume, sigma_mult: f32) -> Result<Volume> {
    if sigma_mult <= 0.0 {
        return Err(SeadaError::InvalidInput("sigma_mult must be > 0".into()));
    }
    if !vol.all_finite() {
        return Err(SeadaError::NonFinite("normalize_intensity input".into()));
    }
    let clamped = vol.data.mapv(|v| v.max(0.0));
    let positives: Vec<f64> = clamped.iter().filter(|&&v| v > 0.0).map(|&v| v as f64).collect();
    if positives.is_empty() {
        return Ok(Volume::new(clamped, vol.voxel_size_mm));
    }
    let n = positives.len() as f64;
    let mean = positives.iter().sum::<f64>() / n;
    let var = positives.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sigma = var.sqrt();
    let cap = sigma_mult as f64 * sigma;
    if cap <= 0.0 {
        // constant positive foreground: every positive voxel equals the mean
        // and sigma is 0; map positives to 1 and keep zeros at 0
        let out = clamped.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        return Ok(Volume::new(out, vol.voxel_size_mm));
    }
    let out = clamped.mapv(|v| ((v as f64).min(cap) / cap) as f32);
    Ok(Volume::new(out, vol.voxel_size_mm))
}

/// Deterministic patient-level split by seeded shuffle.
pub fn make_patient_split(manifest: &DatasetManifest, ratio: f64, seed: u64) -> Result<Split> {
    if !(0.0 < ratio && ratio < 1.0) {
        return Err(SeadaError::InvalidInput(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut patients: Vec<String> = manifest
        .samples
        .iter()
        .map(|s| s.patient_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if patients.len() < 2 {
        return Err(SeadaError::InvalidInput(format!(
            "need at least 2 patients to split, got {}",
            patients.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);
    let n_train = ((patients.len() as f64 * ratio).round() as usize).clamp(1, patients.len() - 1);
    let train_ids: BTreeSet<String> = patients[..n_train].iter().cloned().collect();
    let eval_ids: BTreeSet<String> = patients[n_train..].iter().cloned().collect();
    Ok(Split { train_ids, eval_ids })
}

/// Save a volume store: one raw little-endian f32 file per sample plus a
/// JSON manifest. Round-trip is bit-exact.
pub fn save_volume_store(dir: &Path, manifest: &DatasetManifest, samples: &[Sample]) -> Result<()> {
    manifest.validate()?;
    if manifest.samples.len() != samples.len() {
        return Err(SeadaError::InvalidInput(format!(
            "manifest lists {} samples but {} volumes supplied",
            manifest.samples.len(),
            samples.len()
        )));
    }
    fs::create_dir_all(dir)?;
    for (desc, sample) in manifest.samples.iter().zip(samples) {
        let (d, h, w) = sample.volume.shape();
        if [d, h, w] != manifest.shape {
            return Err(SeadaError::Store {
                sample: desc.file.clone(),
                msg: format!("volume shape {:?} differs from manifest shape {:?}", [d, h, w], manifest.shape),
            });
        }
        let mut bytes = Vec::with_capacity(d * h * w * 4);
        for v in sample.volume.data.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(dir.join(&desc.file))?;
        f.write_all(&bytes)?;
    }
    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Load a volume store written by [`save_volume_store`].
pub fn load_volume_store(dir: &Path) -> Result<(DatasetManifest, Vec<Sample>)> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.schema_version != STORE_SCHEMA_VERSION {
        return Err(SeadaError::Serde(format!(
            "unsupported store schema_version {}",
            manifest.schema_version
        )));
    }
    manifest.validate()?;
    let [d, h, w] = manifest.shape;
    let expected_bytes = d * h * w * 4;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for desc in &manifest.samples {
        let mut bytes = Vec::new();
        fs::File::open(dir.join(&desc.file))
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| SeadaError::Store { sample: desc.file.clone(), msg: e.to_string() })?;
        if bytes.len() != expected_bytes {
            return Err(SeadaError::Store {
                sample: desc.file.clone(),
                msg: format!("expected {expected_bytes} bytes, found {}", bytes.len()),
            });
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let data = Array3::from_shape_vec((d, h, w), values)
            .map_err(|e| SeadaError::Store { sample: desc.file.clone(), msg: e.to_string() })?;
        samples.push(Sample {
            volume: Volume::new(data, manifest.voxel_size_mm),
            patient_id: desc.patient_id.clone(),
            disease: desc.disease,
            domain: manifest.domain(desc.domain)?,
        });
    }
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn vol(values: Vec<f32>, shape: (usize, usize, usize)) -> Volume {
        Volume::new(Array3::from_shape_vec(shape, values).unwrap(), 2.0)
    }

    #[test]
    fn normalize_all_zero_is_noop() {
        let v = vol(vec![0.0; 64], (4, 4, 4));
        let out = normalize_intensity(&v, 4.0).unwrap();
        assert_eq!(out.data, v.data);
    }

    #[test]
    fn normalize_max_at_cap_maps_to_one() {
        // positives {1, 2, 3}: mean 2, sigma = sqrt(2/3); craft a volume whose
        // max is exactly 4*sigma by appending that value and recomputing
        let base = [1.0f32, 2.0, 3.0];
        let n = base.len() as f64;
        let mean = base.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = base.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let _ = var;
        // simpler: two distinct positives a < b with b == 4*sigma({a, b})
        // sigma = (b - a) / 2, so b = 4(b - a)/2 = 2b - 2a => b = 2a
        let a = 0.5f32;
        let b = 1.0f32;
        let mut values = vec![0.0; 6];
        values.push(a);
        values.push(b);
        let v = vol(values, (2, 2, 2));
        let out = normalize_intensity(&v, 4.0).unwrap();
        let max = out.data.iter().cloned().fold(f32::MIN, f32::max);
        assert!((max - 1.0).abs() < 1e-6, "max voxel should map to 1.0, got {max}");
    }

    #[test]
    fn normalize_hand_built_volume() {
        // values {-1, 0, 1, 2, 3, 4, 5, 100}; after negative clamp positives
        // are {1, 2, 3, 4, 5, 100}, mean = 115/6, sigma over those, cap = 4*sigma
        let values = vec![-1.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 100.0];
        let v = vol(values.clone(), (2, 2, 2));
        let pos: Vec<f64> = vec![1.0, 2.0, 3.0, 4.0, 5.0, 100.0];
        let mean = pos.iter().sum::<f64>() / 6.0;
        let var = pos.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 6.0;
        let cap = 4.0 * var.sqrt();
        let expected: Vec<f32> = values
            .iter()
            .map(|&x| ((x as f64).max(0.0).min(cap) / cap) as f32)
            .collect();
        let out = normalize_intensity(&v, 4.0).unwrap();
        for (o, e) in out.data.iter().zip(&expected) {
            assert!((o - e).abs() < 1e-7, "got {o}, expected {e}");
        }
    }

    #[test]
    fn normalize_rejects_non_finite() {
        let v = vol(vec![f32::NAN; 8], (2, 2, 2));
        assert!(normalize_intensity(&v, 4.0).is_err());
    }

    #[test]
    fn normalize_is_idempotent_within_tolerance() {
        let mut rng_vals: Vec<f32> = (0..64).map(|i| ((i * 37 % 101) as f32 - 20.0) / 13.0).collect();
        rng_vals[0] = -5.0;
        let v = vol(rng_vals, (4, 4, 4));
        let once = normalize_intensity(&v, 4.0).unwrap();
        let twice = normalize_intensity(&once, 4.0).unwrap();
        for (a, b) in once.data.iter().zip(twice.data.iter()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    fn toy_manifest(patients: &[(&str, usize)]) -> DatasetManifest {
        DatasetManifest {
            schema_version: STORE_SCHEMA_VERSION,
            shape: [2, 2, 2],
            voxel_size_mm: 2.0,
            domains: vec![
                DomainEntry { index: 0, name: "a".into(), role: DomainRole::Train },
                DomainEntry { index: 1, name: "b".into(), role: DomainRole::Test },
            ],
            samples: patients
                .iter()
                .enumerate()
                .map(|(i, (p, dom))| SampleDescriptor {
                    file: format!("s{i}.raw"),
                    patient_id: p.to_string(),
                    disease: Disease::CN,
                    domain: *dom,
                })
                .collect(),
        }
    }

    #[test]
    fn split_counts_and_disjointness() {
        let pats: Vec<(String, usize)> = (0..10).map(|i| (format!("p{i}"), 0)).collect();
        let refs: Vec<(&str, usize)> = pats.iter().map(|(p, d)| (p.as_str(), *d)).collect();
        let m = toy_manifest(&refs);
        let split = make_patient_split(&m, 0.8, 7).unwrap();
        assert_eq!(split.train_ids.len(), 8);
        assert_eq!(split.eval_ids.len(), 2);
        assert!(split.train_ids.is_disjoint(&split.eval_ids));
    }

    #[test]
    fn split_is_deterministic() {
        let pats: Vec<(String, usize)> = (0..25).map(|i| (format!("p{i}"), 0)).collect();
        let refs: Vec<(&str, usize)> = pats.iter().map(|(p, d)| (p.as_str(), *d)).collect();
        let m = toy_manifest(&refs);
        assert_eq!(
            make_patient_split(&m, 0.8, 3).unwrap(),
            make_patient_split(&m, 0.8, 3).unwrap()
        );
    }

    #[test]
    fn split_groups_scans_by_patient() {
        // one patient with 5 scans plus 4 singleton patients
        let m = toy_manifest(&[
            ("multi", 0),
            ("multi", 0),
            ("multi", 0),
            ("multi", 0),
            ("multi", 0),
            ("q1", 0),
            ("q2", 0),
            ("q3", 0),
            ("q4", 1),
        ]);
        for seed in 0..20 {
            let split = make_patient_split(&m, 0.5, seed).unwrap();
            let in_train = split.train_ids.contains("multi");
            let in_eval = split.eval_ids.contains("multi");
            assert!(in_train ^ in_eval);
        }
    }

    #[test]
    fn split_rejects_single_patient() {
        let m = toy_manifest(&[("only", 0), ("only", 0)]);
        assert!(make_patient_split(&m, 0.8, 0).is_err());
    }

    #[test]
    fn store_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = toy_manifest(&[("p0", 0)]);
        let sample = Sample {
            volume: vol(vec![0.1, -0.5, 3.25, 0.0, 1.0, 2.5, -7.125, 0.75], (2, 2, 2)),
            patient_id: "p0".into(),
            disease: Disease::CN,
            domain: DomainId { index: 0, name: "a".into() },
        };
        save_volume_store(dir.path(), &m, std::slice::from_ref(&sample)).unwrap();
        let (m2, loaded) = load_volume_store(dir.path()).unwrap();
        assert_eq!(m2.samples.len(), 1);
        assert_eq!(loaded[0].volume.data, sample.volume.data);
        assert_eq!(loaded[0].patient_id, "p0");
    }

    #[test]
    fn store_rejects_truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        let m = toy_manifest(&[("p0", 0)]);
        let sample = Sample {
            volume: vol(vec![0.0; 8], (2, 2, 2)),
            patient_id: "p0".into(),
            disease: Disease::CN,
            domain: DomainId { index: 0, name: "a".into() },
        };
        save_volume_store(dir.path(), &m, &[sample]).unwrap();
        let raw = dir.path().join("s0.raw");
        let bytes = fs::read(&raw).unwrap();
        fs::write(&raw, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_volume_store(dir.path()).unwrap_err();
        assert!(err.to_string().contains("s0.raw"), "error should name the sample: {err}");
    }

    #[test]
    fn store_reports_domain_count() {
        let mut m = toy_manifest(&[("p0", 0)]);
        m.domains.push(DomainEntry { index: 2, name: "c".into(), role: DomainRole::Test });
        assert_eq!(m.domains.len(), 3);
        m.validate().unwrap();
    }
}
