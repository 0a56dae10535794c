use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use voxrecon::cortexsim::{images_from_pnm, simulate, Cohort};
use voxrecon::engine::Tensor;
use voxrecon::eval::{reconstruct_test, run_ablation, EvalReport, RunConfig};
use voxrecon::io::{write_pnm, PnmImage};
use voxrecon::nets::{Decoder, FeatureBank};
use voxrecon::trainer::{
    load_checkpoint, save_checkpoint, train_encoder, AblationPreset, Checkpoint, DecoderTrainer, EpochLosses,
};
use voxrecon::{Error, Result};

#[derive(Parser)]
#[command(name = "voxrecon", version, about = "Reconstruct stimuli from simulated voxel responses")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a cohort and write it as a directory of containers.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Cohort seed; overrides `cohort_seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the encoder, then the decoder, and write checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        cohort: PathBuf,
        /// Configuration preset; overrides the config's ablation flags.
        #[arg(long)]
        ablation: Option<AblationPreset>,
        /// Training seed; overrides `train.seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode the test responses of a cohort into image files.
    Reconstruct {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        cohort: PathBuf,
        /// Checkpoint file(s); give every fold of an excluded-target run.
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a directory of reconstructions against the cohort's test images.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value = "report")]
        label: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full ladder of configurations over several seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        cohort: PathBuf,
        /// Comma-separated training seeds.
        #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3, 4, 5])]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// What `train` leaves next to its checkpoints.
#[derive(Debug, Serialize, Deserialize)]
struct TrainRecord {
    config_hash: String,
    preset: Option<AblationPreset>,
    seed: u64,
    encoder_checksum: String,
    checkpoints: Vec<String>,
    history: Vec<Vec<EpochLosses>>,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_simulate(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let (brain, cohort) = simulate(&cfg.cohort, seed.unwrap_or(cfg.cohort_seed))?;
    cohort.save(out)?;
    log::info!("brain {:016x}: {} voxels, {} kept", brain.checksum(), cohort.voxel_count(), cohort.kept_voxels());
    println!("wrote cohort to {}", out.display());
    Ok(())
}

fn cmd_train(
    config: Option<&Path>,
    cohort: &Path,
    preset: Option<AblationPreset>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(p) = preset {
        let folds = cfg.train.ablation.exclusion_folds;
        cfg.train.ablation = p.flags();
        cfg.train.ablation.exclusion_folds = folds;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.train.validate()?;
    let cohort = Cohort::load(cohort)?;
    let net = cfg.net_for(&cohort)?;
    let bank = FeatureBank::new(&net)?;
    let (enc, _) = train_encoder(&cohort, &net, &bank, &cfg.train)?;
    log::info!("encoder trained, checksum {:016x}", enc.checksum());
    std::fs::create_dir_all(out)?;
    let n_test = cohort.test_images.rows();
    let folds = cfg.train.ablation.exclusion_folds;
    let sets: Vec<BTreeSet<usize>> = if cfg.train.ablation.exclude_target_fmri {
        (0..folds).map(|k| voxrecon::eval::fold_members(n_test, folds, k)).collect()
    } else {
        vec![BTreeSet::new()]
    };
    let single = sets.len() == 1;
    let mut record = TrainRecord {
        config_hash: format!("{:016x}", cfg.train.hash_with(&net)?),
        preset,
        seed: cfg.train.seed,
        encoder_checksum: format!("{:016x}", enc.checksum()),
        checkpoints: Vec::new(),
        history: Vec::new(),
    };
    for (k, ex) in sets.into_iter().enumerate() {
        let mut t = DecoderTrainer::new(&cohort, &net, &enc, &bank, &cfg.train, ex)?;
        t.run()?;
        let name = if single { "decoder.ckpt".to_string() } else { format!("decoder_fold{k}.ckpt") };
        save_checkpoint(out.join(&name), &t.checkpoint())?;
        record.history.push(t.history().to_vec());
        record.checkpoints.push(name);
    }
    std::fs::write(out.join("train.json"), serde_json::to_string_pretty(&record)?)?;
    println!("wrote {} checkpoint(s) to {}", record.checkpoints.len(), out.display());
    Ok(())
}

fn restore_decoders(cfg: &RunConfig, cohort: &Cohort, paths: &[PathBuf]) -> Result<Vec<(Decoder, BTreeSet<usize>)>> {
    let net = cfg.net_for(cohort)?;
    let bank: FeatureBank = FeatureBank::new(&net)?;
    paths
        .iter()
        .map(|p| {
            let ckpt: Checkpoint = load_checkpoint(p, None)?;
            if ckpt.bank_checksum != bank.checksum() {
                return Err(Error::Checkpoint(format!("{} was trained with a different feature bank", p.display())));
            }
            Ok((ckpt.restore_decoder(&net)?, ckpt.excluded.iter().map(|&i| i as usize).collect()))
        })
        .collect()
}

fn write_images(images: &Tensor<f32>, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let s = images.shape();
    let (channels, side) = (s[1], s[2]);
    let ext = if channels == 1 { "pgm" } else { "ppm" };
    for i in 0..images.rows() {
        let img = PnmImage { channels, height: side, width: side, data: images.row(i).to_vec() };
        write_pnm(out.join(format!("test_{i:04}.{ext}")), &img)?;
    }
    Ok(())
}

fn cmd_reconstruct(config: Option<&Path>, cohort: &Path, checkpoints: &[PathBuf], out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let cohort = Cohort::load(cohort)?;
    let decoders = restore_decoders(&cfg, &cohort, checkpoints)?;
    let recons = reconstruct_test(&cohort, &decoders)?;
    write_images(&recons, out)?;
    println!("wrote {} images to {}", recons.rows(), out.display());
    Ok(())
}

fn cmd_evaluate(config: Option<&Path>, cohort: &Path, images: &Path, label: &str, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let cohort = Cohort::load(cohort)?;
    let recons = images_from_pnm(images, cohort.image_side(), cohort.channels())?;
    if recons.rows() != cohort.test_images.rows() {
        return Err(Error::Data(format!(
            "found {} images for {} test stimuli",
            recons.rows(),
            cohort.test_images.rows()
        )));
    }
    let report = EvalReport::build(label, cfg.hash()?, &[(cfg.train.seed, recons)], &cohort.test_images, &cfg.eval)?;
    report.write(out, label)?;
    for a in &report.summary {
        println!("{}-way accuracy {:.4} [{:.4}, {:.4}]", a.n, a.accuracy, a.ci_low, a.ci_high);
    }
    Ok(())
}

fn cmd_ablate(config: Option<&Path>, cohort: &Path, seeds: &[u64], out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let cohort = Cohort::load(cohort)?;
    let ladder = run_ablation(&cohort, &cfg, seeds, &AblationPreset::ALL)?;
    ladder.write(out)?;
    for r in &ladder.rungs {
        println!("({}) 2-way accuracy {:.4}", r.preset.label(), r.report.accuracy(2).unwrap_or(f64::NAN));
    }
    for c in &ladder.comparisons {
        println!(
            "({}) - ({}): {:+.4}, {}/{} seeds, p = {:.4}",
            c.better.label(),
            c.worse.label(),
            c.mean_difference,
            c.seeds_improved,
            seeds.len(),
            c.p_value
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, seed, out } => cmd_simulate(config.as_deref(), seed, &out),
        Command::Train { config, cohort, ablation, seed, out } => {
            cmd_train(config.as_deref(), &cohort, ablation, seed, &out)
        }
        Command::Reconstruct { config, cohort, checkpoint, out } => {
            cmd_reconstruct(config.as_deref(), &cohort, &checkpoint, &out)
        }
        Command::Evaluate { config, cohort, images, label, out } => {
            cmd_evaluate(config.as_deref(), &cohort, &images, &label, &out)
        }
        Command::Ablate { config, cohort, seeds, out } => cmd_ablate(config.as_deref(), &cohort, &seeds, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
