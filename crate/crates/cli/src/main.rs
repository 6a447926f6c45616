//! `rome` command-line driver.

use anyhow::Context;
use clap::{Parser, Subcommand};
use rome_cli::config::{ExperimentConfig, StudyCase};
use rome_cli::study::{
    build_datasets, metric_table, run_case_study, stage_seed, train_stack, verification_rows,
};
use rome_cli::{default_eye_grid, eye_diagram, verify_assumption_properties, verify_csv, EyeAttack};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rome_attacks::Apg;
use rome_channel::psr_to_epsilon;
use rome_defense::{evaluate, load_bundle, save_bundle, EvalAttack};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "rome", about = "Semantic-communication jamming defense laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Experiment configuration (JSON). Omit for the built-in toy setup.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints and reports.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config case.
    #[arg(long, value_parser = parse_case)]
    case: Option<StudyCase>,
}

fn parse_case(s: &str) -> Result<StudyCase, String> {
    match s {
        "ideal" => Ok(StudyCase::Ideal),
        "general" => Ok(StudyCase::General),
        "worst" => Ok(StudyCase::Worst),
        other => Err(format!("unknown case '{other}' (ideal|general|worst)")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the defender stack and the attacker; write checkpoints.
    Train(CommonArgs),
    /// Evaluate the trained stack across the PSR grid; write metrics.csv.
    AttackEval {
        #[command(flatten)]
        common: CommonArgs,
        /// Optional single attack spec (JSON object or path):
        /// {"type":"gaussian|fgsm|pgd|apg","psr_db":..,"steps":..,"checkpoint":".."}
        #[arg(long)]
        attack: Option<String>,
    },
    /// Certified-bound report over the trained stack; writes verify.csv.
    Verify(CommonArgs),
    /// Detector eye diagram and property report; writes eye.csv.
    Eye(CommonArgs),
    /// Full pipeline: train, evaluate, verify, eye.
    CaseStudy(CommonArgs),
}

fn load_config(common: &CommonArgs) -> anyhow::Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => {
            let raw = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&raw).context("parsing experiment config")?
        }
        None => ExperimentConfig::toy(StudyCase::General, 7),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(case) = common.case {
        config.case = case;
    }
    config.validate()?;
    Ok(config)
}

fn load_attacker(out: &PathBuf, config: &ExperimentConfig) -> anyhow::Result<Apg> {
    let graph = rome_nn::checkpoint::load(out.join("checkpoints/attacker.ckpt"))?;
    let trigger_dim = graph.input_shapes()[0][0];
    let symbols = graph.output_shape()[0] / 2;
    Ok(Apg {
        graph,
        trigger_dim,
        symbols,
        uses_pam: config.case != StudyCase::Worst || true,
    })
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Train(common) => {
            let config = load_config(&common)?;
            std::fs::create_dir_all(&common.out)?;
            let (train_data, _) = build_datasets(&config)?;
            let (stack, attacker) = train_stack(&config, &train_data)?;
            save_bundle(&stack, common.out.join("checkpoints"))?;
            rome_nn::checkpoint::save(
                &attacker.graph,
                common.out.join("checkpoints/attacker.ckpt"),
            )?;
            println!("trained stack saved to {}", common.out.display());
        }
        Command::AttackEval { common, attack } => {
            let config = load_config(&common)?;
            let stack = load_bundle(common.out.join("checkpoints"))?;
            let attacker = load_attacker(&common.out, &config)?;
            let (_, test_data) = build_datasets(&config)?;
            match attack {
                None => {
                    let table = metric_table(&config, &stack, &attacker, &test_data)?;
                    std::fs::write(common.out.join("metrics.csv"), table.to_csv())?;
                    println!("metrics.csv written ({} rows)", table.rows.len());
                }
                Some(raw) => {
                    let raw = if raw.trim_start().starts_with('{') {
                        raw
                    } else {
                        std::fs::read_to_string(&raw)?
                    };
                    let spec: rome_attacks::AttackSpec = serde_json::from_str(&raw)?;
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(stage_seed(config.seed, 0xCAFE));
                    let (psr, attack_owned);
                    let eval_attack = match &spec {
                        rome_attacks::AttackSpec::Gaussian { psr_db } => {
                            psr = *psr_db;
                            EvalAttack::Gaussian
                        }
                        rome_attacks::AttackSpec::Fgsm { psr_db } => {
                            psr = *psr_db;
                            EvalAttack::Fgsm {
                                victim: &stack.classifiers[0],
                            }
                        }
                        rome_attacks::AttackSpec::Pgd { psr_db, steps } => {
                            psr = *psr_db;
                            EvalAttack::Pgd {
                                victim: &stack.classifiers[0],
                                steps: *steps,
                                step_frac: config.train.pgd_step_frac,
                            }
                        }
                        rome_attacks::AttackSpec::Apg { psr_db, checkpoint } => {
                            psr = *psr_db;
                            let graph = rome_nn::checkpoint::load(checkpoint)?;
                            let trigger_dim = graph.input_shapes()[0][0];
                            let symbols = graph.output_shape()[0] / 2;
                            attack_owned = Apg {
                                graph,
                                trigger_dim,
                                symbols,
                                uses_pam: true,
                            };
                            EvalAttack::Apg(&attack_owned)
                        }
                    };
                    let eps = psr_to_epsilon(psr, config.model.power);
                    let summary = evaluate(
                        &stack,
                        &test_data,
                        &eval_attack,
                        eps,
                        &config.channel,
                        config.eval.samples,
                        &mut rng,
                    )?;
                    println!(
                        "attack {} at {psr} dB: base {:?}, ensemble {:.4}, detector {:.4}",
                        eval_attack.label(),
                        summary.base_accuracy,
                        summary.ensemble_accuracy,
                        summary.detector_accuracy
                    );
                }
            }
        }
        Command::Verify(common) => {
            let config = load_config(&common)?;
            let stack = load_bundle(common.out.join("checkpoints"))?;
            let attacker = load_attacker(&common.out, &config)?;
            let (_, test_data) = build_datasets(&config)?;
            let (rows, eta) = verification_rows(&config, &stack, &attacker, &test_data)?;
            std::fs::write(
                common.out.join("verify.csv"),
                verify_csv(&rows, stack.classifiers[0].classes),
            )?;
            println!("verify.csv written (noise radius eta = {eta:.6})");
        }
        Command::Eye(common) => {
            let config = load_config(&common)?;
            let stack = load_bundle(common.out.join("checkpoints"))?;
            let attacker = load_attacker(&common.out, &config)?;
            let (_, test_data) = build_datasets(&config)?;
            let grid = default_eye_grid(&stack.levels, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(config.seed, 0x900));
            let eye = eye_diagram(
                &stack,
                &EyeAttack::Apg(&attacker),
                &grid,
                &test_data,
                config.eval.eye_samples,
                &config.channel,
                &mut rng,
            )?;
            std::fs::write(common.out.join("eye.csv"), eye.to_csv())?;
            let report = verify_assumption_properties(&eye, &stack.levels)?;
            std::fs::write(
                common.out.join("eye_report.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            println!("eye.csv and eye_report.json written");
        }
        Command::CaseStudy(common) => {
            let config = load_config(&common)?;
            let artifacts = run_case_study(&config, &common.out)?;
            println!(
                "case study complete: {} metric rows, eta = {:.6}, outputs in {}",
                artifacts.metrics.rows.len(),
                artifacts.noise_eta,
                common.out.display()
            );
        }
    }
    Ok(())
}
