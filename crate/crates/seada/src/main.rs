use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use seada::combat::{
    combat_apply, combat_fit, one_hot_covariates, save_combat_model, DesignInfo,
};
use seada::config::{load_config, ExperimentConfig};
use seada::data::{
    load_volume_store, make_patient_split, save_volume_store, DatasetManifest, Disease, Sample,
    Split,
};
use seada::error::{Result, SeadaError};
use seada::eval::{
    build_report, clustering_indices, diag_f1, domain_f1, load_report, render_report_text, rmse,
    save_report, ssim3d, MetricsReport, Report,
};
use seada::nets::{load_checkpoint, save_checkpoint, Method, ModelBundle};
use seada::phantom::generate_dataset;
use seada::seeds;
use seada::trainer::{
    add_noise, extract_ldrs, load_ldr_store, save_history, save_ldr_store, train_with_callback,
    LdrStore, LossRecord, Stage, TrainingSet,
};

#[derive(Parser)]
#[command(name = "seada", version, about = "Domain-invariant volumetric representation learning")]
struct Cli {
    /// Experiment config file.
    #[arg(long, global = true, default_value = "configs/default.toml")]
    config: PathBuf,
    /// Override the config's master seed (re-derives all pipeline seeds).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic multi-domain volume store.
    GenData,
    /// Train one method (CAE, ADA, MDADA, SEADA) on the store.
    Train {
        #[arg(long)]
        method: String,
    },
    /// Extract LDRs for every sample from a trained checkpoint.
    Extract {
        #[arg(long)]
        method: String,
    },
    /// Post-hoc LDR transforms (NOISE, COMBAT) on the CAE LDRs.
    Harmonize {
        #[arg(long)]
        method: String,
    },
    /// Compute all metrics and write the report.
    Evaluate,
    /// Re-render an existing report to text.
    Report,
}

struct Layout {
    out: PathBuf,
}

impl Layout {
    fn store(&self) -> PathBuf {
        self.out.join("store")
    }
    fn checkpoint(&self, m: &str) -> PathBuf {
        self.out.join("checkpoints").join(format!("{m}.ckpt"))
    }
    fn history(&self, m: &str) -> PathBuf {
        self.out.join("history").join(format!("{m}.tsv"))
    }
    fn ldr(&self, m: &str) -> PathBuf {
        self.out.join("ldrs").join(format!("{m}.ldr"))
    }
    fn combat_model(&self) -> PathBuf {
        self.out.join("ldrs").join("combat_model.json")
    }
    fn report_json(&self) -> PathBuf {
        self.out.join("report.json")
    }
    fn report_txt(&self) -> PathBuf {
        self.out.join("report.txt")
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("SEADA_ERR[{}] {}", e.code(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    let layout = Layout { out: cfg.out_dir.clone() };
    match &cli.cmd {
        Cmd::GenData => cmd_gen_data(&cfg, &layout, cli.force),
        Cmd::Train { method } => cmd_train(&cfg, &layout, method),
        Cmd::Extract { method } => cmd_extract(&cfg, &layout, method),
        Cmd::Harmonize { method } => cmd_harmonize(&cfg, &layout, method),
        Cmd::Evaluate => cmd_evaluate(&cfg, &layout),
        Cmd::Report => cmd_report(&layout),
    }
}

fn parse_trained_method(name: &str) -> Result<Method> {
    match name.to_ascii_uppercase().as_str() {
        "NOISE" | "COMBAT" => Err(SeadaError::Config(format!(
            "{name} is a post-hoc LDR transform, not a trained model; use `harmonize`"
        ))),
        other => Method::parse(other),
    }
}

fn cmd_gen_data(cfg: &ExperimentConfig, layout: &Layout, force: bool) -> Result<()> {
    let store = layout.store();
    if store.exists() && store.read_dir()?.next().is_some() {
        if !force {
            return Err(SeadaError::InvalidInput(format!(
                "{} is not empty; pass --force to overwrite",
                store.display()
            )));
        }
        fs::remove_dir_all(&store)?;
    }
    let (manifest, samples) = generate_dataset(&cfg.phantom)?;
    save_volume_store(&store, &manifest, &samples)?;
    print_count_table(&manifest);
    println!("wrote {} volumes to {}", samples.len(), store.display());
    Ok(())
}

fn print_count_table(manifest: &DatasetManifest) {
    let mut counts: BTreeMap<(usize, Disease), usize> = BTreeMap::new();
    for s in &manifest.samples {
        *counts.entry((s.domain, s.disease)).or_insert(0) += 1;
    }
    println!("{:<8} {:<6} {:>5} {:>5} {:>5} {:>6}", "Domain", "Role", "CN", "AD", "MCI", "Total");
    let mut total = 0usize;
    for d in &manifest.domains {
        let c = |dis: Disease| counts.get(&(d.index, dis)).copied().unwrap_or(0);
        let row_total = c(Disease::CN) + c(Disease::AD) + c(Disease::MCI);
        total += row_total;
        println!(
            "{:<8} {:<6} {:>5} {:>5} {:>5} {:>6}",
            d.name,
            format!("{:?}", d.role).to_lowercase(),
            c(Disease::CN),
            c(Disease::AD),
            c(Disease::MCI),
            row_total
        );
    }
    println!("{:<8} {:<6} {:>5} {:>5} {:>5} {:>6}", "all", "", "", "", "", total);
}

fn load_store_and_split(
    cfg: &ExperimentConfig,
    layout: &Layout,
) -> Result<(DatasetManifest, Vec<Sample>, Split)> {
    let (manifest, samples) = load_volume_store(&layout.store())?;
    let split = make_patient_split(&manifest, cfg.train.split_ratio, cfg.split_seed())?;
    Ok((manifest, samples, split))
}

fn cmd_train(cfg: &ExperimentConfig, layout: &Layout, method_name: &str) -> Result<()> {
    let method = parse_trained_method(method_name)?;
    let (manifest, samples, split) = load_store_and_split(cfg, layout)?;
    let train_domains: Vec<usize> = manifest.train_domains().iter().map(|d| d.index).collect();
    let train_samples: Vec<Sample> = samples
        .into_iter()
        .filter(|s| train_domains.contains(&s.domain.index) && split.train_ids.contains(&s.patient_id))
        .collect();
    println!(
        "training {} on {} scans from {} domains",
        method.as_str(),
        train_samples.len(),
        train_domains.len()
    );
    let set = TrainingSet::new(train_samples, train_domains)?;
    let tcfg = cfg.train_config(method);
    let (mut bundle, history) = train_with_callback(&set, &cfg.arch, &tcfg, |epoch, _| {
        println!("  epoch {} done", epoch + 1);
        Ok(())
    })?;
    print_epoch_losses(&history, tcfg.epochs);
    fs::create_dir_all(layout.checkpoint(method.as_str()).parent().unwrap())?;
    fs::create_dir_all(layout.history(method.as_str()).parent().unwrap())?;
    save_checkpoint(&layout.checkpoint(method.as_str()), &mut bundle)?;
    save_history(&layout.history(method.as_str()), &history)?;
    println!("checkpoint: {}", layout.checkpoint(method.as_str()).display());
    Ok(())
}

fn print_epoch_losses(history: &[LossRecord], epochs: usize) {
    if history.is_empty() || epochs == 0 {
        return;
    }
    let per_epoch = history.len() / epochs;
    for (e, chunk) in history.chunks(per_epoch.max(1)).enumerate().take(epochs) {
        let mean = |stage: Stage, pick: fn(&LossRecord) -> f32| -> Option<f32> {
            let vals: Vec<f32> = chunk.iter().filter(|r| r.stage == stage).map(pick).collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f32>() / vals.len() as f32)
            }
        };
        let mut line = format!("epoch {:>2}", e + 1);
        if let Some(v) = mean(Stage::Stage1, |r| r.recon_loss) {
            line += &format!("  recon {v:.5}");
        }
        if let Some(v) = mean(Stage::Stage2, |r| r.domain_loss) {
            line += &format!("  domain {v:.4}");
        }
        if let Some(v) = mean(Stage::Stage3, |r| r.confusion_loss) {
            line += &format!("  confusion {v:.4}");
        }
        println!("{line}");
    }
}

fn cmd_extract(cfg: &ExperimentConfig, layout: &Layout, method_name: &str) -> Result<()> {
    let method = parse_trained_method(method_name)?;
    let bundle = load_checkpoint(&layout.checkpoint(method.as_str()))?;
    let (_, samples) = load_volume_store(&layout.store())?;
    let _ = cfg;
    let ldrs = extract_ldrs(&bundle, &samples)?;
    save_ldr_store(&layout.ldr(method.as_str()), &ldrs)?;
    println!(
        "extracted {} x {} LDRs to {}",
        ldrs.len(),
        ldrs.latent_dim(),
        layout.ldr(method.as_str()).display()
    );
    Ok(())
}

fn cmd_harmonize(cfg: &ExperimentConfig, layout: &Layout, method_name: &str) -> Result<()> {
    let src = layout.ldr("CAE");
    let base = load_ldr_store(&src).map_err(|e| {
        SeadaError::InvalidInput(format!(
            "cannot load baseline LDRs from {} (run `train`/`extract` for CAE first): {e}"
        , src.display()))
    })?;
    match method_name.to_ascii_uppercase().as_str() {
        "NOISE" => {
            let noised = add_noise(
                &base,
                cfg.eval.noise_sigma,
                seeds::derive(cfg.master_seed, "noise-baseline"),
            )?;
            save_ldr_store(&layout.ldr("NOISE"), &noised)?;
            println!("wrote {} noised rows to {}", noised.len(), layout.ldr("NOISE").display());
        }
        "COMBAT" => {
            let is_train =
                |i: usize| base.train_domain_indices.contains(&base.domains[i].index);
            let train = base.select(is_train);
            let skipped: Vec<&String> = (0..base.len())
                .filter(|&i| !is_train(i))
                .map(|i| &base.patient_ids[i])
                .collect();
            let design = DesignInfo {
                batch: train.domains.iter().map(|d| d.name.clone()).collect(),
                covariates: if cfg.eval.combat_covariates {
                    let labels: Vec<String> =
                        train.diseases.iter().map(|d| d.to_string()).collect();
                    one_hot_covariates(&labels)
                } else {
                    None
                },
            };
            let features = train.matrix.mapv(|v| v as f64);
            let model = combat_fit(&features, &design, cfg.eval.combat_eb)?;
            let adjusted = combat_apply(&model, &features, &design)?;
            let mut out = train.clone();
            out.matrix = adjusted.mapv(|v| v as f32);
            save_combat_model(&layout.combat_model(), &model)?;
            save_ldr_store(&layout.ldr("COMBAT"), &out)?;
            println!(
                "harmonized {} train-domain rows to {}",
                out.len(),
                layout.ldr("COMBAT").display()
            );
            if skipped.is_empty() {
                println!("skipped 0 rows");
            } else {
                println!(
                    "skipped {} rows from domains unseen at fit time (harmonization cannot \
                     transform unknown domains):",
                    skipped.len()
                );
                for id in skipped {
                    println!("  {id}");
                }
            }
        }
        other => {
            return Err(SeadaError::Config(format!(
                "unknown harmonize method '{other}' (NOISE or COMBAT)"
            )))
        }
    }
    Ok(())
}

fn mean_std(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

struct EvalContext {
    samples: Vec<Sample>,
    split: Split,
    train_domains: Vec<usize>,
    num_train_domains: usize,
    domain_probe_seed: u64,
    clustering_seed: u64,
}

fn recon_metrics(
    bundle: &ModelBundle,
    ctx: &EvalContext,
) -> Result<(f64, f64, f64, f64)> {
    let mut rmses = Vec::new();
    let mut ssims = Vec::new();
    for s in &ctx.samples {
        if !ctx.train_domains.contains(&s.domain.index)
            || !ctx.split.eval_ids.contains(&s.patient_id)
        {
            continue;
        }
        let xh = bundle.reconstruct(&s.volume, s.domain.index)?;
        rmses.push(rmse(&s.volume, &xh)?);
        ssims.push(ssim3d(&s.volume, &xh)?);
    }
    if rmses.is_empty() {
        return Err(SeadaError::InvalidInput("no eval-split samples for reconstruction".into()));
    }
    let (rm, rs) = mean_std(&rmses);
    let (sm, ss) = mean_std(&ssims);
    Ok((rm, rs, sm, ss))
}

fn method_row(
    cfg: &ExperimentConfig,
    layout: &Layout,
    ctx: &EvalContext,
    name: &str,
    cae_ldrs: &LdrStore,
) -> Result<MetricsReport> {
    let trained = !matches!(name, "NOISE" | "COMBAT");
    let ldrs = if name == "CAE" {
        cae_ldrs.clone()
    } else {
        load_ldr_store(&layout.ldr(name)).map_err(|e| {
            SeadaError::InvalidInput(format!(
                "missing LDRs for {name} (run the pipeline for it first): {e}"
            ))
        })?
    };
    let in_train_domain = |s: &LdrStore, i: usize| ctx.train_domains.contains(&s.domains[i].index);
    let train_rows = ldrs.select(|i| in_train_domain(&ldrs, i));
    if train_rows.is_empty() {
        return Err(SeadaError::InvalidInput(format!("{name}: no train-domain LDR rows")));
    }

    let (rmse_mean, rmse_std, ssim_mean, ssim_std) = if trained {
        let bundle = load_checkpoint(&layout.checkpoint(name))?;
        let (rm, rs, sm, ss) = recon_metrics(&bundle, ctx)?;
        (Some(rm), Some(rs), Some(sm), Some(ss))
    } else {
        (None, None, None, None)
    };

    // in-domain probe: patient-level split within the training domains
    let probe_train =
        train_rows.select(|i| ctx.split.train_ids.contains(&train_rows.patient_ids[i]));
    let probe_eval =
        train_rows.select(|i| ctx.split.eval_ids.contains(&train_rows.patient_ids[i]));
    let diag_in = diag_f1(&probe_train, &probe_eval)?;

    // out-of-domain probe: test-domain rows; the harmonization baseline
    // cannot transform unknown domains, so its queries are the raw CAE rows
    let out_rows = if name == "COMBAT" {
        cae_ldrs.select(|i| !in_train_domain(cae_ldrs, i))
    } else {
        ldrs.select(|i| !in_train_domain(&ldrs, i))
    };
    let diag_out = diag_f1(&train_rows, &out_rows)?;

    let domain = domain_f1(&train_rows, ctx.domain_probe_seed)?;
    let clustering = clustering_indices(&train_rows, true, ctx.clustering_seed)?;
    let _ = cfg;
    Ok(MetricsReport {
        method: name.to_string(),
        rmse_mean,
        rmse_std,
        ssim_mean,
        ssim_std,
        diag_f1_out: diag_out,
        diag_f1_in: diag_in,
        domain_f1: domain,
        clustering,
        clustering_reduction_percent: 0.0,
    })
}

fn cmd_evaluate(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let (manifest, samples, split) = load_store_and_split(cfg, layout)?;
    let train_domains: Vec<usize> = manifest.train_domains().iter().map(|d| d.index).collect();
    let ctx = EvalContext {
        samples,
        split,
        num_train_domains: train_domains.len(),
        train_domains,
        domain_probe_seed: cfg.eval_seed("domain-probe"),
        clustering_seed: cfg.eval_seed("clustering"),
    };
    let cae_ldrs = load_ldr_store(&layout.ldr("CAE")).map_err(|e| {
        SeadaError::InvalidInput(format!("baseline CAE LDRs are required for evaluation: {e}"))
    })?;
    let mut rows = Vec::new();
    for name in &cfg.methods {
        println!("evaluating {name} ...");
        rows.push(method_row(cfg, layout, &ctx, name, &cae_ldrs)?);
    }
    let report = build_report(rows, ctx.num_train_domains)?;
    save_report(&layout.report_json(), &report)?;
    let text = render_report_text(&report);
    fs::write(layout.report_txt(), &text)?;
    println!("\n{text}");
    println!("report: {}", layout.report_json().display());
    Ok(())
}

fn cmd_report(layout: &Layout) -> Result<()> {
    let report: Report = load_report(&layout.report_json())?;
    let text = render_report_text(&report);
    fs::write(layout.report_txt(), &text)?;
    println!("{text}");
    Ok(())
}
