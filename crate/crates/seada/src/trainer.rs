//! Three-stage alternating training. Within each batch: stage 1 fits the
//! encoder/decoder (and style encoder) to reconstruct, stage 2 fits the
//! domain predictor to classify z, stage 3 pushes the encoder toward
//! domain-uninformative z against the frozen predictor, on CN data only.
//! The plain autoencoder runs stage 1 alone.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Disease, DomainId, Sample};
use crate::error::{Result, SeadaError};
use crate::nets::{init_bundle, ArchConfig, DomainPredictor, Method, ModelBundle};
use crate::nn::{confusion_loss, cross_entropy_logits, Adam};
use crate::seeds;

pub const LDR_MAGIC: &[u8; 8] = b"SEADALD1";
pub const LDR_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_stage1: f32,
    pub lr_stage2: f32,
    pub lr_stage3: f32,
    /// Predictor updates per batch in stage 2; the latents are encoded once.
    pub stage2_reps: usize,
    pub w_recon: f32,
    pub w_style: f32,
    pub w_conf: f32,
    pub seed: u64,
    /// Stage 3 trains on CN data only; always true for adversarial methods.
    pub cn_only_stage3: bool,
    /// Average the weights over the last N epochs (Polyak tail averaging).
    /// The alternating min-max game cycles rather than converging, so the
    /// final iterate is an arbitrary point of the cycle; the tail average is
    /// a far more stable representative. 0 disables averaging.
    pub avg_tail_epochs: usize,
}

impl TrainConfig {
    pub fn desk_default(method: Method, seed: u64) -> Self {
        TrainConfig {
            method,
            epochs: 14,
            batch_size: 16,
            lr_stage1: 1e-3,
            lr_stage2: 2e-3,
            lr_stage3: 2e-3,
            stage2_reps: 5,
            w_recon: 1.0,
            w_style: 0.5,
            w_conf: 0.6,
            seed,
            cn_only_stage3: true,
            avg_tail_epochs: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(SeadaError::Config("batch_size must be >= 2".into()));
        }
        if self.stage2_reps == 0 {
            return Err(SeadaError::Config("stage2_reps must be >= 1".into()));
        }
        if self.w_recon < 0.0 || self.w_style < 0.0 || self.w_conf < 0.0 {
            return Err(SeadaError::Config("loss weights must be >= 0".into()));
        }
        if self.method.adversarial() && !self.cn_only_stage3 {
            return Err(SeadaError::Config(
                "stage 3 is CN-only for adversarial methods".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Stage1,
    Stage2,
    Stage3,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Stage3 => "stage3",
        }
    }
}

/// Loss values of one stage step. Fields not produced by the stage are zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub stage: Stage,
    pub recon_loss: f32,
    pub style_loss: f32,
    pub domain_loss: f32,
    pub confusion_loss: f32,
}

impl LossRecord {
    fn check_finite(self) -> Result<LossRecord> {
        let vals = [self.recon_loss, self.style_loss, self.domain_loss, self.confusion_loss];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(SeadaError::Training {
                step: self.step,
                msg: format!(
                    "non-finite loss in {}: recon={} style={} domain={} confusion={}",
                    self.stage.as_str(),
                    self.recon_loss,
                    self.style_loss,
                    self.domain_loss,
                    self.confusion_loss
                ),
            });
        }
        Ok(self)
    }
}

/// Bundle plus per-component optimizer state.
pub struct Trainer {
    pub bundle: ModelBundle,
    pub cfg: TrainConfig,
    opt_encoder: Adam,
    opt_decoder: Adam,
    opt_style: Adam,
    opt_predictor: Adam,
}

impl Trainer {
    pub fn new(bundle: ModelBundle, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if bundle.method != cfg.method {
            return Err(SeadaError::Config(format!(
                "bundle method {} does not match config method {}",
                bundle.method.as_str(),
                cfg.method.as_str()
            )));
        }
        Ok(Trainer {
            bundle,
            cfg,
            opt_encoder: Adam::default(),
            opt_decoder: Adam::default(),
            opt_style: Adam::default(),
            opt_predictor: Adam::default(),
        })
    }

    /// Replace the domain predictor with a fresh initialization and reset its
    /// optimizer state. An adversary that has settled at chance stops
    /// producing a useful confusion gradient even when linearly decodable
    /// domain signal remains; periodic restarts force it to re-find that
    /// signal.
    pub fn reinit_predictor(&mut self, seed: u64) -> Result<()> {
        if self.bundle.predictor.is_none() {
            return Err(SeadaError::InvalidInput(
                "method has no domain predictor to reinitialize".into(),
            ));
        }
        self.bundle.predictor = Some(DomainPredictor::new(&self.bundle.arch, seed));
        self.opt_predictor = Adam::default();
        Ok(())
    }

    /// Stage 1: update encoder, decoder, and (for SE-ADA) style encoder to
    /// minimize reconstruction and style error. The domain predictor is
    /// untouched bit-exactly.
    pub fn stage1_step(&mut self, batch: &[&Sample]) -> Result<LossRecord> {
        if batch.is_empty() {
            return Err(SeadaError::InvalidInput("empty batch".into()));
        }
        let b = batch.len() as f32;
        let method = self.bundle.method;
        for p in self.bundle.encoder.params_mut() {
            p.zero_grad();
        }
        for p in self.bundle.decoder.params_mut() {
            p.zero_grad();
        }
        if let Some(se) = &mut self.bundle.style {
            for p in se.params_mut() {
                p.zero_grad();
            }
        }

        let mut recon_sum = 0.0f64;
        let mut style_sum = 0.0f64;
        for sample in batch {
            let x4 = self.bundle.volume_to_input(&sample.volume)?;
            let nvox = x4.len() as f32;
            let class = if method == Method::MDADA || method == Method::SEADA {
                self.bundle.class_of_domain(sample.domain.index)?
            } else {
                0
            };
            let (z, enc_cache) = self.bundle.encoder.forward(&x4);

            let style_out = if method == Method::SEADA {
                let se = self.bundle.style.as_ref().unwrap();
                Some(se.forward(&x4))
            } else {
                None
            };
            let z_total = match &style_out {
                Some((_, zk, _)) => &z + zk,
                None => z.clone(),
            };
            let branch = if method == Method::MDADA { class } else { 0 };
            let (xh, dec_cache) = self.bundle.decoder.forward(&z_total, branch);

            let diff = &xh - &x4;
            let mse: f64 = diff.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / nvox as f64;
            recon_sum += mse;
            let grad_xh = diff.mapv(|v| v * 2.0 * self.cfg.w_recon / (nvox * b));
            let grad_z_total = self.bundle.decoder.backward(&dec_cache, &grad_xh);

            if let Some((s_logits, _, se_cache)) = style_out {
                let class_for_style = self.bundle.class_of_domain(sample.domain.index)?;
                let (ce, mut grad_s) = cross_entropy_logits(&s_logits, class_for_style);
                style_sum += ce as f64;
                grad_s.mapv_inplace(|v| v * self.cfg.w_style / b);
                let se = self.bundle.style.as_mut().unwrap();
                se.backward(&se_cache, &grad_z_total, &grad_s);
            }
            self.bundle.encoder.backward(&enc_cache, &grad_z_total);
        }

        let record = LossRecord {
            step: self.bundle.step,
            stage: Stage::Stage1,
            recon_loss: (recon_sum / b as f64) as f32,
            style_loss: (style_sum / b as f64) as f32,
            domain_loss: 0.0,
            confusion_loss: 0.0,
        }
        .check_finite()?;

        let lr = self.cfg.lr_stage1;
        self.opt_encoder.step(&mut self.bundle.encoder.params_mut(), lr);
        self.opt_decoder.step(&mut self.bundle.decoder.params_mut(), lr);
        if let Some(se) = &mut self.bundle.style {
            self.opt_style.step(&mut se.params_mut(), lr);
        }
        Ok(record)
    }

    /// Stage 2: update the domain predictor to classify domains from z.
    /// Encoder gradients are discarded.
    pub fn stage2_step(&mut self, batch: &[&Sample]) -> Result<LossRecord> {
        self.stage2_steps(batch, 1)
    }

    /// Run `reps` predictor updates on one batch. The encoder is frozen in
    /// stage 2, so the latents are computed once and reused; extra reps let
    /// the adversary track the encoder more closely at fixed encoding cost.
    pub fn stage2_steps(&mut self, batch: &[&Sample], reps: usize) -> Result<LossRecord> {
        if self.bundle.method == Method::CAE {
            return Err(SeadaError::InvalidInput("CAE has no domain predictor (stage 2)".into()));
        }
        if batch.is_empty() {
            return Err(SeadaError::InvalidInput("empty batch".into()));
        }
        if reps == 0 {
            return Err(SeadaError::InvalidInput("stage 2 needs at least one rep".into()));
        }
        let b = batch.len() as f32;
        let mut encoded = Vec::with_capacity(batch.len());
        for sample in batch {
            let class = self.bundle.class_of_domain(sample.domain.index)?;
            encoded.push((self.bundle.encode(&sample.volume)?, class));
        }
        // the predictor sees batch-standardized latents (matching the view a
        // post-hoc linear probe gets), so low-variance directions cannot hide
        // domain information from the adversary
        let mut z_refs: Vec<&mut Array1<f32>> = encoded.iter_mut().map(|(z, _)| z).collect();
        batch_standardize_in_place(&mut z_refs);
        let mut record = None;
        for _ in 0..reps {
            {
                let gd = self.bundle.predictor.as_mut().unwrap();
                for p in gd.params_mut() {
                    p.zero_grad();
                }
            }
            let mut loss_sum = 0.0f64;
            for (z, class) in &encoded {
                let gd = self.bundle.predictor.as_mut().unwrap();
                let (d, cache) = gd.forward(z);
                let (ce, mut grad_d) = cross_entropy_logits(&d, *class);
                loss_sum += ce as f64;
                grad_d.mapv_inplace(|v| v / b);
                let _ = gd.backward(&cache, &grad_d);
            }
            record = Some(
                LossRecord {
                    step: self.bundle.step,
                    stage: Stage::Stage2,
                    recon_loss: 0.0,
                    style_loss: 0.0,
                    domain_loss: (loss_sum / b as f64) as f32,
                    confusion_loss: 0.0,
                }
                .check_finite()?,
            );
            let lr = self.cfg.lr_stage2;
            let gd = self.bundle.predictor.as_mut().unwrap();
            self.opt_predictor.step(&mut gd.params_mut(), lr);
        }
        Ok(record.unwrap())
    }

    /// Stage 3: update the encoder to push the frozen predictor's output
    /// toward the uniform distribution. Every sample must be CN; a non-CN
    /// sample is a hard error, not silently filtered.
    pub fn stage3_step(&mut self, cn_batch: &[&Sample]) -> Result<LossRecord> {
        if self.bundle.method == Method::CAE {
            return Err(SeadaError::InvalidInput("CAE has no adversarial stage 3".into()));
        }
        if cn_batch.is_empty() {
            return Err(SeadaError::InvalidInput("empty batch".into()));
        }
        for sample in cn_batch {
            if sample.disease != Disease::CN {
                return Err(SeadaError::InvalidInput(format!(
                    "stage 3 batch contains non-CN sample '{}' ({})",
                    sample.patient_id, sample.disease
                )));
            }
        }
        let b = cn_batch.len() as f32;
        for p in self.bundle.encoder.params_mut() {
            p.zero_grad();
        }
        // forward pass over the whole batch first: the predictor operates on
        // batch-standardized latents, so the statistics must be known before
        // any backward pass
        let mut encoded = Vec::with_capacity(cn_batch.len());
        for sample in cn_batch {
            let x4 = self.bundle.volume_to_input(&sample.volume)?;
            let (z, enc_cache) = self.bundle.encoder.forward(&x4);
            encoded.push((z, enc_cache));
        }
        let mut z_refs: Vec<&mut Array1<f32>> = encoded.iter_mut().map(|(z, _)| z).collect();
        let (_, sd) = batch_standardize_in_place(&mut z_refs);
        // predictor grads get written during backprop to z but are never
        // stepped; they are zeroed again at the top of the next stage 2
        let mut loss_sum = 0.0f64;
        for (zhat, enc_cache) in &encoded {
            let gd = self.bundle.predictor.as_mut().unwrap();
            let (d, cache) = gd.forward(zhat);
            let (closs, mut grad_d) = confusion_loss(&d);
            loss_sum += closs as f64;
            grad_d.mapv_inplace(|v| v * self.cfg.w_conf / b);
            let grad_zhat = gd.backward(&cache, &grad_d);
            // statistics are treated as constants: d(zhat)/d(z) = 1/sd
            let grad_z = &grad_zhat / &sd;
            self.bundle.encoder.backward(enc_cache, &grad_z);
        }
        let record = LossRecord {
            step: self.bundle.step,
            stage: Stage::Stage3,
            recon_loss: 0.0,
            style_loss: 0.0,
            domain_loss: 0.0,
            confusion_loss: (loss_sum / b as f64) as f32,
        }
        .check_finite()?;
        self.opt_encoder.step(&mut self.bundle.encoder.params_mut(), self.cfg.lr_stage3);
        Ok(record)
    }
}

/// Standardize each latent dimension to zero mean and unit variance over the
/// batch, in place. Returns the per-dimension mean and the (floored) standard
/// deviation actually divided by. The adversarial stages apply this before the
/// domain predictor so that the scale of a latent direction cannot hide the
/// domain information it carries.
fn batch_standardize_in_place(zs: &mut [&mut Array1<f32>]) -> (Array1<f32>, Array1<f32>) {
    let n = zs.len() as f32;
    let l = zs[0].len();
    let mut mean = Array1::<f32>::zeros(l);
    for z in zs.iter() {
        mean += &**z;
    }
    mean /= n;
    let mut var = Array1::<f32>::zeros(l);
    for z in zs.iter() {
        let d = &**z - &mean;
        var += &(&d * &d);
    }
    var /= n;
    let sd = var.mapv(|v| (v + 1e-6).sqrt());
    for z in zs.iter_mut() {
        **z -= &mean;
        **z /= &sd;
    }
    (mean, sd)
}

/// Samples restricted to training domains, plus the (sorted) manifest
/// indices of those domains.
pub struct TrainingSet {
    pub samples: Vec<Sample>,
    pub train_domain_indices: Vec<usize>,
}

impl TrainingSet {
    pub fn new(samples: Vec<Sample>, mut train_domain_indices: Vec<usize>) -> Result<Self> {
        train_domain_indices.sort_unstable();
        train_domain_indices.dedup();
        if train_domain_indices.len() < 2 {
            return Err(SeadaError::InvalidInput("need at least 2 training domains".into()));
        }
        for s in &samples {
            if !train_domain_indices.contains(&s.domain.index) {
                return Err(SeadaError::InvalidInput(format!(
                    "sample '{}' is from non-training domain {}",
                    s.patient_id, s.domain.index
                )));
            }
        }
        Ok(TrainingSet { samples, train_domain_indices })
    }

    fn cn_pool(&self) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].disease == Disease::CN).collect()
    }
}

/// Run the full three-stage training loop. Deterministic given the config
/// seed. `on_epoch` is invoked after every epoch (checkpoint hooks).
pub fn train_with_callback(
    set: &TrainingSet,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &mut ModelBundle) -> Result<()>,
) -> Result<(ModelBundle, Vec<LossRecord>)> {
    cfg.validate()?;
    let mut arch = arch.clone();
    arch.num_domains = set.train_domain_indices.len();
    if set.samples.is_empty() {
        return Err(SeadaError::InvalidInput("empty training set".into()));
    }
    for &dom in &set.train_domain_indices {
        let has_cn = set
            .samples
            .iter()
            .any(|s| s.domain.index == dom && s.disease == Disease::CN);
        if !has_cn {
            return Err(SeadaError::InvalidInput(format!(
                "training domain {dom} has no CN samples; stage 3 would starve"
            )));
        }
    }
    let bundle = init_bundle(&arch, cfg.method, cfg.seed, set.train_domain_indices.clone())?;
    let mut trainer = Trainer::new(bundle, cfg.clone())?;
    let cn_pool = set.cn_pool();
    let mut history = Vec::new();

    let avg_tail = cfg.avg_tail_epochs.min(cfg.epochs);
    let mut avg_acc: Vec<ndarray::ArrayD<f64>> = Vec::new();
    let mut avg_count: u64 = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..set.samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive_indexed(cfg.seed, "order", epoch as u64));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &set.samples[i]).collect();
            history.push(trainer.stage1_step(&batch)?);
            if cfg.method.adversarial() {
                history.push(trainer.stage2_steps(&batch, trainer.cfg.stage2_reps)?);
                // resample the CN pool with replacement to full batch size so
                // the adversarial gradient magnitude is batch-size-independent
                let mut cn_rng = ChaCha8Rng::seed_from_u64(seeds::derive_indexed(
                    cfg.seed,
                    "cn",
                    trainer.bundle.step,
                ));
                let cn_batch: Vec<&Sample> = (0..cfg.batch_size)
                    .map(|_| &set.samples[cn_pool[cn_rng.gen_range(0..cn_pool.len())]])
                    .collect();
                history.push(trainer.stage3_step(&cn_batch)?);
            }
            trainer.bundle.step += 1;
            if epoch + avg_tail >= cfg.epochs {
                let params = trainer.bundle.all_params_mut();
                if avg_acc.is_empty() {
                    avg_acc = params
                        .iter()
                        .map(|p| p.value.mapv(|v| v as f64))
                        .collect();
                } else {
                    for (a, p) in avg_acc.iter_mut().zip(&params) {
                        a.zip_mut_with(&p.value, |a, &v| *a += v as f64);
                    }
                }
                avg_count += 1;
            }
        }
        on_epoch(epoch, &mut trainer.bundle)?;
    }
    if avg_count > 0 {
        let inv = 1.0 / avg_count as f64;
        for (p, a) in trainer.bundle.all_params_mut().into_iter().zip(&avg_acc) {
            p.value.zip_mut_with(a, |v, &s| *v = (s * inv) as f32);
        }
    }
    Ok((trainer.bundle, history))
}

pub fn train(
    set: &TrainingSet,
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<(ModelBundle, Vec<LossRecord>)> {
    train_with_callback(set, arch, cfg, |_, _| Ok(()))
}

/// The extracted LDR matrix with parallel label arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct LdrStore {
    pub matrix: Array2<f32>,
    pub patient_ids: Vec<String>,
    pub diseases: Vec<Disease>,
    pub domains: Vec<DomainId>,
    pub train_domain_indices: Vec<usize>,
}

impl LdrStore {
    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn latent_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.matrix.nrows();
        if self.patient_ids.len() != n || self.diseases.len() != n || self.domains.len() != n {
            return Err(SeadaError::InvalidInput(format!(
                "LDR store label arrays out of step with matrix ({} rows)",
                n
            )));
        }
        if self.matrix.iter().any(|v| !v.is_finite()) {
            return Err(SeadaError::NonFinite("LDR matrix".into()));
        }
        Ok(())
    }

    /// Row subset, preserving order.
    pub fn select(&self, keep: impl Fn(usize) -> bool) -> LdrStore {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        let l = self.latent_dim();
        let mut matrix = Array2::zeros((rows.len(), l));
        for (r, &i) in rows.iter().enumerate() {
            matrix.row_mut(r).assign(&self.matrix.row(i));
        }
        LdrStore {
            matrix,
            patient_ids: rows.iter().map(|&i| self.patient_ids[i].clone()).collect(),
            diseases: rows.iter().map(|&i| self.diseases[i]).collect(),
            domains: rows.iter().map(|&i| self.domains[i].clone()).collect(),
            train_domain_indices: self.train_domain_indices.clone(),
        }
    }
}

/// Inference-mode encode of every sample, rows in input order.
pub fn extract_ldrs(bundle: &ModelBundle, samples: &[Sample]) -> Result<LdrStore> {
    let l = bundle.latent_dim();
    let mut matrix = Array2::zeros((samples.len(), l));
    let mut patient_ids = Vec::with_capacity(samples.len());
    let mut diseases = Vec::with_capacity(samples.len());
    let mut domains = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let z = bundle.encode(&s.volume)?;
        matrix.row_mut(i).assign(&z);
        patient_ids.push(s.patient_id.clone());
        diseases.push(s.disease);
        domains.push(s.domain.clone());
    }
    let store = LdrStore {
        matrix,
        patient_ids,
        diseases,
        domains,
        train_domain_indices: bundle.train_domain_indices.clone(),
    };
    store.validate()?;
    Ok(store)
}

/// The noise baseline: element-wise seeded Gaussian noise on the LDRs.
pub fn add_noise(ldrs: &LdrStore, sigma: f32, seed: u64) -> Result<LdrStore> {
    if sigma < 0.0 {
        return Err(SeadaError::InvalidInput("noise sigma must be >= 0".into()));
    }
    let mut out = ldrs.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, sigma).expect("validated sigma");
    out.matrix.mapv_inplace(|v| v + normal.sample(&mut rng));
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct LdrHeader {
    schema_version: u32,
    n: usize,
    l: usize,
    label_schema: Vec<String>,
    train_domain_indices: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct LdrLabels {
    patient_ids: Vec<String>,
    diseases: Vec<Disease>,
    domains: Vec<DomainId>,
}

/// Bit-exact LDR file: header JSON, row-major little-endian f32 matrix,
/// label block JSON.
pub fn save_ldr_store(path: &Path, store: &LdrStore) -> Result<()> {
    store.validate()?;
    let header = LdrHeader {
        schema_version: LDR_SCHEMA_VERSION,
        n: store.len(),
        l: store.latent_dim(),
        label_schema: vec!["patient_id".into(), "disease".into(), "domain".into()],
        train_domain_indices: store.train_domain_indices.clone(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let labels = LdrLabels {
        patient_ids: store.patient_ids.clone(),
        diseases: store.diseases.clone(),
        domains: store.domains.clone(),
    };
    let labels_json = serde_json::to_vec(&labels)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(LDR_MAGIC)?;
    f.write_all(&(header_json.len() as u64).to_le_bytes())?;
    f.write_all(&header_json)?;
    let mut bytes = Vec::with_capacity(store.matrix.len() * 4);
    for v in store.matrix.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&bytes)?;
    f.write_all(&(labels_json.len() as u64).to_le_bytes())?;
    f.write_all(&labels_json)?;
    Ok(())
}

pub fn load_ldr_store(path: &Path) -> Result<LdrStore> {
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != LDR_MAGIC {
        return Err(SeadaError::Serde(format!("{}: not an LDR file", path.display())));
    }
    let mut len8 = [0u8; 8];
    f.read_exact(&mut len8)?;
    let header_len = u64::from_le_bytes(len8) as usize;
    let mut hj = vec![0u8; header_len];
    f.read_exact(&mut hj)?;
    let header: LdrHeader = serde_json::from_slice(&hj)?;
    if header.schema_version != LDR_SCHEMA_VERSION {
        return Err(SeadaError::Serde(format!(
            "unsupported LDR schema_version {}",
            header.schema_version
        )));
    }
    let mut bytes = vec![0u8; header.n * header.l * 4];
    f.read_exact(&mut bytes)
        .map_err(|e| SeadaError::Serde(format!("LDR file truncated: {e}")))?;
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let matrix = Array2::from_shape_vec((header.n, header.l), values)
        .map_err(|e| SeadaError::Serde(e.to_string()))?;
    f.read_exact(&mut len8)?;
    let labels_len = u64::from_le_bytes(len8) as usize;
    let mut lj = vec![0u8; labels_len];
    f.read_exact(&mut lj)?;
    let labels: LdrLabels = serde_json::from_slice(&lj)?;
    let store = LdrStore {
        matrix,
        patient_ids: labels.patient_ids,
        diseases: labels.diseases,
        domains: labels.domains,
        train_domain_indices: header.train_domain_indices,
    };
    store.validate()?;
    Ok(store)
}

/// Loss history as a delimited text table.
pub fn save_history(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut out = String::from("step\tstage\trecon\tstyle\tdomain\tconfusion\n");
    for r in history {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.step, r.stage.as_str(), r.recon_loss, r.style_loss, r.domain_loss, r.confusion_loss
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Volume;
    use crate::nets::param_bytes;
    use ndarray::Array3;

    fn arch() -> ArchConfig {
        let mut a = ArchConfig::desk_default(3);
        a.shape = [16, 16, 16];
        a.channels = [2, 4, 4, 8];
        a.style_channels = [2, 4];
        a.latent_dim = 8;
        a.predictor_hidden = 16;
        a
    }

    fn cfg(method: Method) -> TrainConfig {
        let mut c = TrainConfig::desk_default(method, 5);
        c.epochs = 1;
        c.batch_size = 4;
        c
    }

    fn sample(domain: usize, disease: Disease, pid: &str, seed: u64) -> Sample {
        let mut vol = crate::phantom::generate_base_anatomy(seed, [16, 16, 16]);
        // shift intensity by domain so domains are separable from voxel stats
        vol.data.mapv_inplace(|v| (v * (0.8 + 0.15 * domain as f32)).clamp(0.0, 1.0));
        Sample {
            volume: vol,
            patient_id: pid.to_string(),
            disease,
            domain: DomainId { index: domain, name: format!("d{domain}") },
        }
    }

    fn toy_batch() -> Vec<Sample> {
        (0..8)
            .map(|i| {
                let dom = i % 3;
                let dis = if i % 2 == 0 { Disease::CN } else { Disease::AD };
                sample(dom, dis, &format!("p{i}"), 100 + i as u64)
            })
            .collect()
    }

    fn trainer(method: Method) -> Trainer {
        let bundle = init_bundle(&arch(), method, 5, vec![0, 1, 2]).unwrap();
        Trainer::new(bundle, cfg(method)).unwrap()
    }

    #[test]
    fn stage1_leaves_predictor_bit_exact() {
        let mut t = trainer(Method::SEADA);
        let samples = toy_batch();
        let refs: Vec<&Sample> = samples.iter().collect();
        let before = param_bytes(&mut t.bundle.predictor.as_mut().unwrap().params_mut());
        t.stage1_step(&refs).unwrap();
        let after = param_bytes(&mut t.bundle.predictor.as_mut().unwrap().params_mut());
        assert_eq!(before, after);
    }

    #[test]
    fn stage1_cae_updates_only_encoder_decoder() {
        let mut t = trainer(Method::CAE);
        let samples = toy_batch();
        let refs: Vec<&Sample> = samples.iter().collect();
        let enc_before = param_bytes(&mut t.bundle.encoder.params_mut());
        let rec = t.stage1_step(&refs).unwrap();
        assert_eq!(rec.style_loss, 0.0);
        assert!(t.bundle.style.is_none() && t.bundle.predictor.is_none());
        let enc_after = param_bytes(&mut t.bundle.encoder.params_mut());
        assert_ne!(enc_before, enc_after);
    }

    #[test]
    fn repeated_stage1_reduces_reconstruction_loss() {
        for method in [Method::CAE, Method::SEADA, Method::MDADA] {
            let mut t = trainer(method);
            let samples = toy_batch();
            let refs: Vec<&Sample> = samples.iter().collect();
            let first = t.stage1_step(&refs).unwrap().recon_loss;
            let mut last = first;
            for _ in 0..49 {
                last = t.stage1_step(&refs).unwrap().recon_loss;
            }
            assert!(
                last < first,
                "{}: recon loss should fall: first {first}, last {last}",
                method.as_str()
            );
        }
    }

    #[test]
    fn stage2_leaves_generators_bit_exact() {
        let mut t = trainer(Method::SEADA);
        let samples = toy_batch();
        let refs: Vec<&Sample> = samples.iter().collect();
        let enc = param_bytes(&mut t.bundle.encoder.params_mut());
        let dec = param_bytes(&mut t.bundle.decoder.params_mut());
        let se = param_bytes(&mut t.bundle.style.as_mut().unwrap().params_mut());
        t.stage2_step(&refs).unwrap();
        assert_eq!(enc, param_bytes(&mut t.bundle.encoder.params_mut()));
        assert_eq!(dec, param_bytes(&mut t.bundle.decoder.params_mut()));
        assert_eq!(se, param_bytes(&mut t.bundle.style.as_mut().unwrap().params_mut()));
    }

    #[test]
    fn stage2_learns_separable_domains() {
        let mut t = trainer(Method::ADA);
        t.cfg.lr_stage2 = 1e-3;
        // one intensity ramp axis per domain: trivially separable
        let samples: Vec<Sample> = (0..9)
            .map(|i| {
                let dom = i % 3;
                Sample {
                    volume: Volume::new(
                        Array3::from_shape_fn((16, 16, 16), |(z, y, x)| {
                            [z, y, x][dom] as f32 / 15.0
                        }),
                        1.0,
                    ),
                    patient_id: format!("p{i}"),
                    disease: Disease::CN,
                    domain: DomainId { index: dom, name: format!("d{dom}") },
                }
            })
            .collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        for _ in 0..200 {
            t.stage2_step(&refs).unwrap();
        }
        let mut correct = 0;
        for s in &samples {
            let z = t.bundle.encode(&s.volume).unwrap();
            let d = t.bundle.domain_predict(&z).unwrap();
            let pred = d
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred == s.domain.index {
                correct += 1;
            }
        }
        assert!(correct as f32 / 9.0 > 0.9, "accuracy {}/9", correct);
    }

    #[test]
    fn stage2_rejects_cae() {
        let mut t = trainer(Method::CAE);
        let samples = toy_batch();
        let refs: Vec<&Sample> = samples.iter().collect();
        assert!(t.stage2_step(&refs).is_err());
    }

    #[test]
    fn stage3_rejects_non_cn_batch() {
        let mut t = trainer(Method::SEADA);
        let samples = toy_batch();
        let refs: Vec<&Sample> = samples.iter().collect();
        assert!(refs.iter().any(|s| s.disease != Disease::CN));
        assert!(t.stage3_step(&refs).is_err());
    }

    #[test]
    fn stage3_leaves_predictor_bit_exact() {
        let mut t = trainer(Method::ADA);
        let samples = toy_batch();
        let cn: Vec<&Sample> = samples.iter().filter(|s| s.disease == Disease::CN).collect();
        let before = param_bytes(&mut t.bundle.predictor.as_mut().unwrap().params_mut());
        t.stage3_step(&cn).unwrap();
        assert_eq!(before, param_bytes(&mut t.bundle.predictor.as_mut().unwrap().params_mut()));
    }

    fn toy_set() -> TrainingSet {
        TrainingSet::new(toy_batch(), vec![0, 1, 2]).unwrap()
    }

    #[test]
    fn cae_history_has_only_stage1() {
        let (_, history) = train(&toy_set(), &arch(), &cfg(Method::CAE)).unwrap();
        assert!(!history.is_empty());
        assert!(history.iter().all(|r| r.stage == Stage::Stage1));
    }

    #[test]
    fn adversarial_history_interleaves_three_stages() {
        let (_, history) = train(&toy_set(), &arch(), &cfg(Method::SEADA)).unwrap();
        assert_eq!(history.len() % 3, 0);
        for chunk in history.chunks(3) {
            assert_eq!(chunk[0].stage, Stage::Stage1);
            assert_eq!(chunk[1].stage, Stage::Stage2);
            assert_eq!(chunk[2].stage, Stage::Stage3);
        }
        assert!(history
            .iter()
            .all(|r| [r.recon_loss, r.style_loss, r.domain_loss, r.confusion_loss]
                .iter()
                .all(|v| v.is_finite())));
    }

    #[test]
    fn training_is_deterministic() {
        let (mut a, _) = train(&toy_set(), &arch(), &cfg(Method::SEADA)).unwrap();
        let (mut b, _) = train(&toy_set(), &arch(), &cfg(Method::SEADA)).unwrap();
        assert_eq!(param_bytes(&mut a.all_params_mut()), param_bytes(&mut b.all_params_mut()));
    }

    #[test]
    fn train_rejects_missing_cn_domain() {
        let samples: Vec<Sample> = toy_batch()
            .into_iter()
            .map(|mut s| {
                if s.domain.index == 2 {
                    s.disease = Disease::AD;
                }
                s
            })
            .collect();
        let set = TrainingSet::new(samples, vec![0, 1, 2]).unwrap();
        assert!(train(&set, &arch(), &cfg(Method::SEADA)).is_err());
    }

    #[test]
    fn extract_shapes_labels_and_determinism() {
        let bundle = init_bundle(&arch(), Method::CAE, 5, vec![0, 1, 2]).unwrap();
        let samples = toy_batch();
        let a = extract_ldrs(&bundle, &samples).unwrap();
        let b = extract_ldrs(&bundle, &samples).unwrap();
        assert_eq!(a.matrix.dim(), (8, 8));
        assert_eq!(a.matrix, b.matrix);
        assert_eq!(a.patient_ids[3], samples[3].patient_id);
        assert_eq!(a.diseases[5], samples[5].disease);
        assert_eq!(a.domains[7], samples[7].domain);
    }

    #[test]
    fn add_noise_identity_and_determinism() {
        let bundle = init_bundle(&arch(), Method::CAE, 5, vec![0, 1, 2]).unwrap();
        let ldrs = extract_ldrs(&bundle, &toy_batch()).unwrap();
        let same = add_noise(&ldrs, 0.0, 1).unwrap();
        assert_eq!(same.matrix, ldrs.matrix);
        let n1 = add_noise(&ldrs, 0.1, 7).unwrap();
        let n2 = add_noise(&ldrs, 0.1, 7).unwrap();
        assert_eq!(n1.matrix, n2.matrix);
        assert_ne!(n1.matrix, ldrs.matrix);
    }

    #[test]
    fn add_noise_is_unbiased() {
        let mut ldrs = {
            let bundle = init_bundle(&arch(), Method::CAE, 5, vec![0, 1, 2]).unwrap();
            extract_ldrs(&bundle, &toy_batch()).unwrap()
        };
        // widen to 10^4 entries
        let n = 1250;
        let l = 8;
        ldrs.matrix = Array2::zeros((n, l));
        ldrs.patient_ids = (0..n).map(|i| format!("p{i}")).collect();
        ldrs.diseases = vec![Disease::CN; n];
        ldrs.domains = vec![DomainId { index: 0, name: "d0".into() }; n];
        let sigma = 0.1f64;
        let noised = add_noise(&ldrs, sigma as f32, 3).unwrap();
        let mean: f64 =
            noised.matrix.iter().map(|&v| v as f64).sum::<f64>() / (n * l) as f64;
        assert!(mean.abs() < 3.0 * sigma / 100.0, "noise mean {mean}");
    }

    #[test]
    fn ldr_file_round_trip_is_bit_exact() {
        let bundle = init_bundle(&arch(), Method::CAE, 5, vec![0, 1, 2]).unwrap();
        let ldrs = extract_ldrs(&bundle, &toy_batch()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ldr");
        save_ldr_store(&path, &ldrs).unwrap();
        let loaded = load_ldr_store(&path).unwrap();
        assert_eq!(loaded, ldrs);
        // byte-identical on rewrite
        let path2 = dir.path().join("y.ldr");
        save_ldr_store(&path2, &loaded).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }
}
