//! Case-study driver: trains the transmission stack, the attacker, and the
//! defense for one threat case, then evaluates and verifies everything.

use crate::config::{DatasetSpec, ExperimentConfig, StudyCase};
use crate::data::{load_cifar10, load_mnist_idx, synth_dataset};
use crate::eye::{default_eye_grid, eye_diagram, verify_assumption_properties, EyeAttack,
    EyePropertyReport};
use crate::metrics::{verify_csv, EyeTable, MetricRow, MetricTable, VerifyRow};
use anyhow::Context;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rome_attacks::{
    build_apg, train_apg, train_apg_worst_case, Apg, ApgConfig, ApgTrainOpts, WorstCaseStack,
};
use rome_channel::{noise_radius, psr_to_epsilon, ChannelModel};
use rome_defense::{
    acquire_base_classifiers, evaluate, save_bundle, train_joint, train_mpd, build_mpd,
    EnsembleStack, EvalAttack, MpdConfig, PowerLevelSet, TrainAttack, TrainOpts,
};
use rome_models::data::Dataset;
use rome_models::{build_classifier, build_encoder, ModelConfig};
use rome_nn::{softmax, Tensor};
use rome_verifier::{
    concretize, distortion_max_from_map, ensemble_bounds, ensemble_map, propagate,
    robustness_from_map, InputRegion, LinearBoundMap,
};
use std::path::Path;

/// Everything a study produces, kept in memory for the callers that want
/// to assert on it (the files are written as a side effect).
pub struct StudyArtifacts {
    pub stack: EnsembleStack,
    pub attacker: Apg,
    pub metrics: MetricTable,
    pub verify_rows: Vec<VerifyRow>,
    pub eye: EyeTable,
    pub eye_report: EyePropertyReport,
    pub noise_eta: f64,
}

fn splitmix(mut state: u64) -> u64 {
    state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent deterministic seed stream per pipeline stage.
pub fn stage_seed(base: u64, stage: u64) -> u64 {
    splitmix(base ^ splitmix(stage))
}

fn rng_for(base: u64, stage: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stage_seed(base, stage))
}

pub fn build_datasets(
    config: &ExperimentConfig,
) -> anyhow::Result<(Dataset, Dataset)> {
    match &config.dataset {
        DatasetSpec::Synthetic {
            classes,
            shape,
            margin,
            train_count,
            test_count,
        } => {
            // One draw for both splits, so train and test share the same
            // cluster geometry.
            let mut rng = rng_for(config.seed, 0xDA7A);
            let all = synth_dataset(*classes, shape, *margin, train_count + test_count, &mut rng)?;
            let (train, test) = all.split_at(*train_count)?;
            Ok((train, test))
        }
        DatasetSpec::Mnist {
            train_images,
            train_labels,
            test_images,
            test_labels,
            limit,
        } => {
            let train = load_mnist_idx(train_images, train_labels, *limit)?;
            let test = load_mnist_idx(test_images, test_labels, limit.map(|l| l / 4))?;
            Ok((train, test))
        }
        DatasetSpec::Cifar10 {
            train_batches,
            test_batch,
            limit,
        } => {
            let train = load_cifar10(train_batches, *limit)?;
            let test = load_cifar10(std::slice::from_ref(test_batch), limit.map(|l| l / 4))?;
            Ok((train, test))
        }
    }
}

fn train_opts(config: &ExperimentConfig, epochs: usize) -> TrainOpts {
    TrainOpts {
        epochs,
        batch: config.train.batch,
        lr: config.train.lr,
        pgd_steps: config.train.pgd_steps,
        pgd_step_frac: config.train.pgd_step_frac,
    }
}

/// Budget sweep locating the crossover points where the best ladder
/// classifier changes; interior level boundaries move onto the crossovers.
/// Falls back to the original boundary wherever a crossover is absent.
#[allow(clippy::too_many_arguments)]
fn tailor_boundaries(
    stack: &EnsembleStack,
    attacker: &Apg,
    defaults: &PowerLevelSet,
    data: &Dataset,
    channel: &ChannelModel,
    samples: usize,
    base_seed: u64,
) -> anyhow::Result<PowerLevelSet> {
    let b = defaults.boundaries();
    let n = defaults.count();
    if n <= 2 {
        return Ok(defaults.clone());
    }
    let (lo, hi) = (b[0], b[n - 1]);
    const SWEEP: usize = 13;
    let grid: Vec<f64> = (0..SWEEP)
        .map(|i| lo + (hi - lo) * i as f64 / (SWEEP - 1) as f64)
        .collect();

    let mut best: Vec<usize> = Vec::with_capacity(SWEEP);
    for (i, &eps) in grid.iter().enumerate() {
        let mut rng = rng_for(base_seed, 0xEA10 + i as u64);
        let summary = evaluate(
            stack,
            data,
            &EvalAttack::Apg(attacker),
            eps,
            channel,
            samples,
            &mut rng,
        )?;
        let mut k = 0;
        for (m, &acc) in summary.base_accuracy.iter().enumerate() {
            if acc > summary.base_accuracy[k] {
                k = m;
            }
        }
        best.push(k);
    }
    // Monotone envelope: once a stronger model wins, it keeps winning.
    for i in 1..best.len() {
        best[i] = best[i].max(best[i - 1]);
    }

    let mut boundaries = b.to_vec();
    for j in 1..n - 1 {
        // The boundary between levels j and j+1 sits where the best model
        // first reaches index > j.
        if let Some(pos) = best.iter().position(|&k| k > j) {
            if pos > 0 {
                boundaries[j] = (grid[pos - 1] + grid[pos]) / 2.0;
            }
        }
    }
    // Keep the set strictly increasing; give up on tailoring otherwise.
    if boundaries.windows(2).all(|w| w[0] < w[1]) {
        Ok(PowerLevelSet::from_boundaries(boundaries)?)
    } else {
        log::warn!("crossover sweep produced non-monotone boundaries; keeping the grid defaults");
        Ok(defaults.clone())
    }
}

/// Trains the full stack for the configured case.
pub fn train_stack(
    config: &ExperimentConfig,
    train_data: &Dataset,
) -> anyhow::Result<(EnsembleStack, Apg)> {
    config.validate()?;
    let shape = train_data.sample_shape().to_vec();
    let model_cfg = ModelConfig {
        input_shape: shape,
        scale: config.model.scale,
        classes: train_data.classes,
        power: config.model.power,
        seed: config.seed,
    };
    let channel = &config.channel;
    let psr_lo = *config.psr_grid_db.first().expect("validated grid");
    let psr_hi = *config.psr_grid_db.last().expect("validated grid");

    // Encoder and the standard classifier, trained jointly end to end.
    let mut init_rng = rng_for(config.seed, 0x1217);
    let mut encoder = build_encoder(&model_cfg, &mut init_rng)?;
    let mut standard = build_classifier(&model_cfg, &encoder.feature_shape, &mut init_rng)?;
    let mut rng = rng_for(config.seed, 0x301);
    train_joint(
        &mut encoder,
        &mut standard,
        channel,
        train_data,
        &train_opts(config, config.train.epochs_joint),
        &mut rng,
    )?;

    // Attacker generator against the standard classifier.
    let apg_cfg = ApgConfig {
        trigger_dim: 128,
        feature_shape: encoder.feature_shape.clone(),
        scale: config.model.scale,
        use_pam: true,
    };
    let mut attacker = build_apg(&apg_cfg, &mut rng_for(config.seed, 0xA96))?;
    let apg_opts = ApgTrainOpts {
        epochs: config.train.epochs_apg,
        batch: config.train.batch,
        lr: config.train.lr_attacker,
        psr_range_db: (psr_lo, psr_hi),
    };
    let mut rng = rng_for(config.seed, 0x302);
    train_apg(
        &mut attacker,
        &encoder,
        &standard,
        channel,
        train_data,
        &apg_opts,
        &mut rng,
    )?;

    // Ladder over the default level grid.
    let levels = PowerLevelSet::from_psr_range(psr_lo, psr_hi, config.levels, config.model.power)?;
    let ladder_attack = match config.case {
        StudyCase::Ideal => TrainAttack::Apg(&attacker),
        StudyCase::General | StudyCase::Worst => TrainAttack::SelfPgd,
    };
    let mut rng = rng_for(config.seed, 0x303);
    let classifiers = acquire_base_classifiers(
        &standard,
        &encoder,
        &levels,
        &ladder_attack,
        channel,
        train_data,
        &train_opts(config, config.train.epochs_at),
        config.train.chain_ladder,
        &mut rng,
    )?;

    let mpd = build_mpd(
        &MpdConfig {
            levels: config.levels,
            map_rows: config.levels,
            classes: train_data.classes,
            feature_shape: encoder.feature_shape.clone(),
            scale: config.model.scale,
        },
        &mut rng_for(config.seed, 0x304),
    )?;
    let mut stack = EnsembleStack {
        encoder,
        classifiers,
        mpd,
        levels,
    };

    // Ideal case: re-derive the level boundaries from the ladder's
    // crossover points before training the detector.

    if config.case == StudyCase::Ideal {
        stack.levels = tailor_boundaries(
            &stack,
            &attacker,
            &stack.levels.clone(),
            train_data,
            channel,
            200,
            config.seed,
        )?;
    }

    // Detector training.
    let mpd_attack = match config.case {
        StudyCase::Ideal => TrainAttack::Apg(&attacker),
        StudyCase::General | StudyCase::Worst => TrainAttack::PgdAgainst(&stack.classifiers[0]),
    };
    let self_at = config
        .train
        .mpd_self_at_frac
        .map(|f| f * stack.levels.boundaries()[0]);
    let mut rng = rng_for(config.seed, 0x305);
    let mut mpd = stack.mpd.clone();
    train_mpd(
        &mut mpd,
        &stack.encoder,
        &stack.classifiers,
        &stack.levels,
        &mpd_attack,
        channel,
        train_data,
        &train_opts(config, config.train.epochs_mpd),
        self_at,
        &mut rng,
    )?;
    stack.mpd = mpd;

    // Worst case: the attacker retrains against the whole trained stack.
    if config.case == StudyCase::Worst {
        let worst = WorstCaseStack {
            encoder: &stack.encoder,
            classifiers: &stack.classifiers,
            detector: &stack.mpd.graph,
            level_boundaries: stack.levels.boundaries(),
        };
        let mut rng = rng_for(config.seed, 0x306);
        train_apg_worst_case(
            &mut attacker,
            &worst,
            channel,
            train_data,
            &apg_opts,
            &mut rng,
        )?;
    }

    Ok((stack, attacker))
}

/// Accuracy table over the PSR grid plus the clean column, one row per
/// model and per the ensemble. Cells run in parallel over the frozen
/// stack with per-cell deterministic seeds.
pub fn metric_table(
    config: &ExperimentConfig,
    stack: &EnsembleStack,
    attacker: &Apg,
    test_data: &Dataset,
) -> anyhow::Result<MetricTable> {
    let case = config.case.label().to_string();
    let snr = config.channel.snr_db();
    let mut cells: Vec<(String, Option<f64>)> = vec![("clean".into(), None)];
    for &psr in &config.psr_grid_db {
        cells.push((format!("{psr}"), Some(psr_to_epsilon(psr, config.model.power))));
    }

    let summaries: Vec<_> = cells
        .par_iter()
        .enumerate()
        .map(|(i, (_, eps))| {
            let mut rng = rng_for(config.seed, 0x400 + i as u64);
            match eps {
                None => evaluate(
                    stack,
                    test_data,
                    &EvalAttack::None,
                    0.0,
                    &config.channel,
                    config.eval.samples,
                    &mut rng,
                ),
                Some(e) => evaluate(
                    stack,
                    test_data,
                    &EvalAttack::Apg(attacker),
                    *e,
                    &config.channel,
                    config.eval.samples,
                    &mut rng,
                ),
            }
        })
        .collect::<Result<_, _>>()?;

    let mut table = MetricTable::default();
    for ((label, _), summary) in cells.iter().zip(&summaries) {
        for (m, &acc) in summary.base_accuracy.iter().enumerate() {
            table.push(MetricRow {
                case: case.clone(),
                psr_db: label.clone(),
                snr_db: snr,
                model_id: format!("g{m}"),
                accuracy: acc,
                sample_count: summary.samples,
            });
        }
        table.push(MetricRow {
            case: case.clone(),
            psr_db: label.clone(),
            snr_db: snr,
            model_id: "ensemble".into(),
            accuracy: summary.ensemble_accuracy,
            sample_count: summary.samples,
        });
    }
    Ok(table)
}

/// Certified-bound report: one row per classifier and per the ensemble at
/// each level boundary radius (budget plus the noise quantile).
pub fn verification_rows(
    config: &ExperimentConfig,
    stack: &EnsembleStack,
    attacker: &Apg,
    test_data: &Dataset,
) -> anyhow::Result<(Vec<VerifyRow>, f64)> {
    let p = config.verify.norm;
    let mut rng = rng_for(config.seed, 0x500);
    let eta = noise_radius(
        config.channel.noise_variance(),
        stack.encoder.symbols,
        config.verify.delta,
        &mut rng,
    )?;
    let energy = stack.encoder.symbols as f64 * stack.encoder.power;

    // Region center: the first encoded test sample (a realistic operating
    // point for the intermediate ReLU intervals).
    let (images, _) = test_data.take(1);
    let x = stack.encoder.encode(&images)?;
    let center = Tensor::from_vec(x.row(0).to_vec());

    let classes = stack.classifiers[0].classes;
    let mut rows = Vec::new();
    for (bi, &eps) in stack.levels.boundaries().iter().enumerate() {
        let rho = eps + eta;
        let region = InputRegion::new(center.clone(), rho, p)?;

        let mut maps: Vec<LinearBoundMap> = Vec::with_capacity(stack.classifiers.len());
        for (m, cls) in stack.classifiers.iter().enumerate() {
            let map = propagate(&cls.graph, &region)?;
            let distortion = distortion_max_from_map(&map, &region, energy)?;
            let robustness = robustness_from_map(&map, p);
            let violations = count_violations(
                &[(&cls.graph, 1.0)],
                &map,
                &region,
                config.verify.mc_samples,
                &mut rng_for(config.seed, 0x600 + (bi * 16 + m) as u64),
            )?;
            rows.push(VerifyRow {
                model_id: format!("g{m}"),
                rho,
                norm: p.label().into(),
                robustness,
                mc_violations: violations,
                distortion,
            });
            maps.push(map);
        }

        // Ensemble row: detector output frozen at this budget, softmaxed
        // into the deployed ensembling weights.
        let mut rng_pd = rng_for(config.seed, 0x700 + bi as u64);
        let summary = evaluate(
            stack,
            test_data,
            &EvalAttack::Apg(attacker),
            eps,
            &config.channel,
            config.eval.samples.min(200),
            &mut rng_pd,
        )?;
        let weights = softmax(&Tensor::from_vec(summary.mean_detector.clone()))?;
        let combined = ensemble_map(&maps, weights.data())?;
        let distortion = distortion_max_from_map(&combined, &region, energy)?;
        let robustness = robustness_from_map(&combined, p);
        let graphs: Vec<(&rome_nn::Graph, f64)> = stack
            .classifiers
            .iter()
            .zip(weights.data())
            .map(|(c, &w)| (&c.graph, w))
            .collect();
        let violations = count_violations(
            &graphs,
            &combined,
            &region,
            config.verify.mc_samples,
            &mut rng_for(config.seed, 0x800 + bi as u64),
        )?;
        // Sanity: the weighted concretized bounds enclose the combined
        // map's own concretization.
        let _ = ensemble_bounds(&maps, weights.data(), &region)?;
        rows.push(VerifyRow {
            model_id: "ensemble".into(),
            rho,
            norm: p.label().into(),
            robustness,
            mc_violations: violations,
            distortion,
        });
    }
    debug_assert_eq!(rows.len() % (stack.classifiers.len() + 1), 0);
    debug_assert!(rows.iter().all(|r| r.distortion.len() == classes));
    Ok((rows, eta))
}

/// Samples the region and counts pointwise bound violations of the
/// weighted forward outputs against the map's affine bounds.
fn count_violations(
    graphs: &[(&rome_nn::Graph, f64)],
    map: &LinearBoundMap,
    region: &InputRegion,
    samples: usize,
    rng: &mut impl Rng,
) -> anyhow::Result<usize> {
    const SLACK: f64 = 1e-9;
    let d = region.dim();
    let (conc_upper, conc_lower) = concretize(map, region)?;
    let mut violations = 0usize;
    for _ in 0..samples {
        // Direction on the unit p-sphere, scaled into the ball.
        let dir: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0f64)).collect();
        let norm = region.norm.vector_norm(&dir).max(1e-300);
        let scale = region.radius * rng.gen_range(0.0..1.0f64).powf(1.0 / d as f64) / norm;
        let x: Vec<f64> = region
            .center
            .data()
            .iter()
            .zip(dir.iter())
            .map(|(c, v)| c + v * scale)
            .collect();

        let first = graphs[0].0;
        let shape = {
            let mut s = vec![1usize];
            s.extend_from_slice(&first.nodes[first.inputs[0]].out_shape);
            s
        };
        let input = Tensor::new(shape, x.clone())?;
        let mut y = vec![0.0; map.output_dim()];
        for (graph, w) in graphs {
            let out = graph.forward(std::slice::from_ref(&input))?;
            for (acc, v) in y.iter_mut().zip(out.output().data()) {
                *acc += w * v;
            }
        }
        let up = map.eval_upper(&x);
        let lo = map.eval_lower(&x);
        for i in 0..y.len() {
            let tol = SLACK * (1.0 + y[i].abs());
            if y[i] > up[i] + tol
                || y[i] < lo[i] - tol
                || y[i] > conc_upper[i] + tol
                || y[i] < conc_lower[i] - tol
            {
                violations += 1;
            }
        }
    }
    Ok(violations)
}

/// Runs the full pipeline and writes `metrics.csv`, `verify.csv`,
/// `eye.csv`, the property report, the config echo, and the checkpoint
/// directory under `out_dir`.
pub fn run_case_study(
    config: &ExperimentConfig,
    out_dir: impl AsRef<Path>,
) -> anyhow::Result<StudyArtifacts> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let (train_data, test_data) = build_datasets(config)?;

    let (stack, attacker) = train_stack(config, &train_data).context("training stage")?;
    save_bundle(&stack, out_dir.join("checkpoints"))?;
    rome_nn::checkpoint::save(&attacker.graph, out_dir.join("checkpoints/attacker.ckpt"))?;

    let metrics =
        metric_table(config, &stack, &attacker, &test_data).context("evaluation stage")?;
    std::fs::write(out_dir.join("metrics.csv"), metrics.to_csv())?;

    let (verify_rows, noise_eta) =
        verification_rows(config, &stack, &attacker, &test_data).context("verification stage")?;
    std::fs::write(
        out_dir.join("verify.csv"),
        verify_csv(&verify_rows, stack.classifiers[0].classes),
    )?;

    let grid = default_eye_grid(&stack.levels, 4);
    let mut rng = rng_for(config.seed, 0x900);
    let eye = eye_diagram(
        &stack,
        &EyeAttack::Apg(&attacker),
        &grid,
        &test_data,
        config.eval.eye_samples,
        &config.channel,
        &mut rng,
    )
    .context("eye stage")?;
    std::fs::write(out_dir.join("eye.csv"), eye.to_csv())?;
    let eye_report = verify_assumption_properties(&eye, &stack.levels)?;
    std::fs::write(
        out_dir.join("eye_report.json"),
        serde_json::to_string_pretty(&eye_report)?,
    )?;

    // Config echo with the resolved boundaries, for reproducibility.
    #[derive(serde::Serialize)]
    struct Echo<'a> {
        config: &'a ExperimentConfig,
        level_boundaries: &'a [f64],
        noise_eta: f64,
    }
    std::fs::write(
        out_dir.join("config_echo.json"),
        serde_json::to_string_pretty(&Echo {
            config,
            level_boundaries: stack.levels.boundaries(),
            noise_eta,
        })?,
    )?;

    Ok(StudyArtifacts {
        stack,
        attacker,
        metrics,
        verify_rows,
        eye,
        eye_report,
        noise_eta,
    })
}
