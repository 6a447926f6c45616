//! Stage-by-stage smoke run of the toy pipeline with timings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rome_attacks::{build_apg, train_apg, ApgConfig, ApgTrainOpts};
use rome_channel::psr_to_epsilon;
use rome_cli::config::{ExperimentConfig, StudyCase};
use rome_cli::study::build_datasets;
use rome_defense::{
    acquire_base_classifiers, build_mpd, evaluate, train_joint, train_mpd, EnsembleStack,
    EvalAttack, MpdConfig, PowerLevelSet, TrainAttack, TrainOpts,
};
use rome_models::{build_classifier, build_encoder, ModelConfig};
use std::time::Instant;

fn main() -> anyhow::Result<()> {
    let config = ExperimentConfig::toy(StudyCase::General, 7);
    let (train_data, test_data) = build_datasets(&config)?;
    println!("train {} / test {}", train_data.len(), test_data.len());

    let model_cfg = ModelConfig {
        input_shape: train_data.sample_shape().to_vec(),
        scale: 8,
        classes: train_data.classes,
        power: 1.0,
        seed: 7,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut encoder = build_encoder(&model_cfg, &mut rng)?;
    let mut g0 = build_classifier(&model_cfg, &encoder.feature_shape, &mut rng)?;
    println!(
        "encoder: {} params, k={} symbols, feature {:?}; classifier: {} params",
        encoder.graph.param_count(),
        encoder.symbols,
        encoder.feature_shape,
        g0.graph.param_count()
    );

    let opts = TrainOpts {
        epochs: config.train.epochs_joint,
        batch: config.train.batch,
        lr: config.train.lr,
        pgd_steps: config.train.pgd_steps,
        pgd_step_frac: config.train.pgd_step_frac,
    };
    println!(
        "linear oracle on raw pixels: {:.3}",
        rome_cli::nearest_centroid_accuracy(&train_data, &test_data)
    );

    let t = Instant::now();
    let log = train_joint(&mut encoder, &mut g0, &config.channel, &train_data, &opts, &mut rng)?;
    println!(
        "joint: {:?} losses {:.3?} ..{:.3?}",
        t.elapsed(),
        log.epoch_losses.first().unwrap(),
        log.epoch_losses.last().unwrap()
    );
    // Train/test accuracy probe through the inference pipeline.
    {
        let mut probe_rng = ChaCha8Rng::seed_from_u64(77);
        for (name, ds) in [("train", &train_data), ("test", &test_data)] {
            let (images, labels) = ds.take(400);
            let x = encoder.encode(&images)?;
            let (eq, _) = rome_defense::receive(&x, None, &config.channel, &mut probe_rng)?;
            let features = encoder.symbols_to_features(&eq)?;
            let logits = g0.logits(&features)?;
            println!("g0 {name} acc = {:.3}", rome_nn::accuracy(&logits, &labels));
        }
    }

    let levels = PowerLevelSet::from_psr_range(-15.0, -1.0, 4, 1.0)?;
    println!("level boundaries: {:?}", levels.boundaries());

    // White-box agent probe: how much do PGD/FGSM/Gaussian hurt g0?
    {
        let mut probe_rng = ChaCha8Rng::seed_from_u64(88);
        let (images, labels) = test_data.take(256);
        let x = encoder.encode(&images)?;
        let (eq, _) = rome_defense::receive(&x, None, &config.channel, &mut probe_rng)?;
        let clean_feats = encoder.symbols_to_features(&eq)?;
        for eps in [0.178, 0.447, 0.891] {
            let epsv = vec![eps; 256];
            let delta = rome_attacks::pgd(&g0, &clean_feats, &labels, &epsv, 10, 0.25)?;
            let mut adv = clean_feats.clone();
            for (v, d) in adv.data_mut().iter_mut().zip(delta.data()) {
                *v += d;
            }
            let pgd_acc = rome_nn::accuracy(&g0.logits(&adv)?, &labels);
            let delta = rome_attacks::fgsm(&g0, &clean_feats, &labels, &epsv)?;
            let mut adv = clean_feats.clone();
            for (v, d) in adv.data_mut().iter_mut().zip(delta.data()) {
                *v += d;
            }
            let fgsm_acc = rome_nn::accuracy(&g0.logits(&adv)?, &labels);
            println!("probe eps {eps:.3}: pgd acc {pgd_acc:.3}, fgsm acc {fgsm_acc:.3}");
        }
    }

    // APG vs G0.
    let mut apg = build_apg(
        &ApgConfig {
            trigger_dim: 128,
            feature_shape: encoder.feature_shape.clone(),
            scale: 8,
            use_pam: true,
        },
        &mut rng,
    )?;
    println!("apg: {} params", apg.graph.param_count());
    let t = Instant::now();
    let stats = train_apg(
        &mut apg,
        &encoder,
        &g0,
        &config.channel,
        &train_data,
        &ApgTrainOpts {
            epochs: config.train.epochs_apg,
            batch: config.train.batch,
            lr: config.train.lr_attacker,
            psr_range_db: (-15.0, -1.0),
        },
        &mut rng,
    )?;
    println!("apg train: {:?} losses {:.3?}", t.elapsed(), stats.epoch_losses);

    // Ladder with self-PGD.
    let t = Instant::now();
    let at_opts = TrainOpts {
        epochs: config.train.epochs_at,
        ..opts.clone()
    };
    let ladder = acquire_base_classifiers(
        &g0,
        &encoder,
        &levels,
        &TrainAttack::SelfPgd,
        &config.channel,
        &train_data,
        &at_opts,
        true,
        &mut rng,
    )?;
    println!("ladder: {:?}", t.elapsed());

    // MPD.
    let mut mpd = build_mpd(
        &MpdConfig {
            levels: 4,
            map_rows: 4,
            classes: train_data.classes,
            feature_shape: encoder.feature_shape.clone(),
            scale: 8,
        },
        &mut rng,
    )?;
    println!("mpd: {} params", mpd.graph.param_count());
    let t = Instant::now();
    let mpd_opts = TrainOpts {
        epochs: config.train.epochs_mpd,
        ..opts.clone()
    };
    let mpd_log = train_mpd(
        &mut mpd,
        &encoder,
        &ladder,
        &levels,
        &TrainAttack::PgdAgainst(&ladder[0]),
        &config.channel,
        &train_data,
        &mpd_opts,
        None,
        &mut rng,
    )?;
    println!(
        "mpd train: {:?} losses {:?}",
        t.elapsed(),
        mpd_log
            .epoch_losses
            .iter()
            .map(|l| format!("{l:.3}"))
            .collect::<Vec<_>>()
    );

    let stack = EnsembleStack {
        encoder,
        classifiers: ladder,
        mpd,
        levels,
    };

    // Detection under the training-matched agent (PGD): per-level accuracy.
    {
        let mut r = ChaCha8Rng::seed_from_u64(30);
        for level in 0..4usize {
            let eps = match level {
                0 => 0.0,
                l => {
                    let (lo, hi) = stack.levels.interval(l)?;
                    (lo + hi) / 2.0
                }
            };
            let attack = if level == 0 {
                EvalAttack::None
            } else {
                EvalAttack::Pgd {
                    victim: &stack.classifiers[0],
                    steps: 10,
                    step_frac: 0.25,
                }
            };
            let s = evaluate(&stack, &test_data, &attack, eps, &config.channel, 256, &mut r)?;
            println!(
                "pgd-matched level {level} (eps {eps:.3}): det acc {:.3} meanpd {:?}",
                s.detector_accuracy,
                s.mean_detector.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>()
            );
        }
    }

    // Evaluation matrix.
    let t = Instant::now();
    let mut eval_rng = ChaCha8Rng::seed_from_u64(2);
    let clean = evaluate(
        &stack, &test_data, &EvalAttack::None, 0.0, &config.channel, 400, &mut eval_rng,
    )?;
    println!(
        "clean: base {:?} ens {:.3} det {:.3}",
        clean
            .base_accuracy
            .iter()
            .map(|a| format!("{a:.3}"))
            .collect::<Vec<_>>(),
        clean.ensemble_accuracy,
        clean.detector_accuracy
    );
    for psr in [-15.0, -11.0, -7.0, -3.0, -1.0] {
        let eps = psr_to_epsilon(psr, 1.0);
        let apg_sum = evaluate(
            &stack,
            &test_data,
            &EvalAttack::Apg(&apg),
            eps,
            &config.channel,
            400,
            &mut eval_rng,
        )?;
        let gauss = evaluate(
            &stack,
            &test_data,
            &EvalAttack::Gaussian,
            eps,
            &config.channel,
            400,
            &mut eval_rng,
        )?;
        println!(
            "psr {psr:>5} eps {eps:.3}: apg base {:?} ens {:.3} det {:.3} meanpd {:?} | gauss g0 {:.3}",
            apg_sum
                .base_accuracy
                .iter()
                .map(|a| format!("{a:.3}"))
                .collect::<Vec<_>>(),
            apg_sum.ensemble_accuracy,
            apg_sum.detector_accuracy,
            apg_sum
                .mean_detector
                .iter()
                .map(|a| format!("{a:.2}"))
                .collect::<Vec<_>>(),
            gauss.base_accuracy[0],
        );
    }
    println!("eval: {:?}", t.elapsed());
    Ok(())
}
