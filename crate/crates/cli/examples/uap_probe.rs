//! Probe: ceiling of universal (input-agnostic) perturbations on the toy
//! task, via direct projected gradient ascent on a single symbol-domain
//! vector, compared with generator training at several settings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rome_attacks::{build_apg, train_apg, ApgConfig, ApgTrainOpts};
use rome_cli::config::{ExperimentConfig, StudyCase};
use rome_cli::study::build_datasets;
use rome_defense::{receive, train_joint, TrainOpts};
use rome_models::{build_classifier, build_encoder, ModelConfig};
use rome_nn::{accuracy, softmax_ce_grad, Tensor};

fn main() -> anyhow::Result<()> {
    let config = ExperimentConfig::toy(StudyCase::General, 7);
    let (train_data, test_data) = build_datasets(&config)?;
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
    let opts = TrainOpts {
        epochs: config.train.epochs_joint,
        batch: config.train.batch,
        lr: config.train.lr,
        pgd_steps: 10,
        pgd_step_frac: 0.25,
    };
    train_joint(&mut encoder, &mut g0, &config.channel, &train_data, &opts, &mut rng)?;

    let eval_acc = |delta: Option<&[f64]>, eps: f64| -> anyhow::Result<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let (images, labels) = test_data.take(400);
        let x = encoder.encode(&images)?;
        let jam = delta.map(|d| {
            let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scaled: Vec<f64> = d.iter().map(|v| v * eps / n).collect();
            let rows: Vec<Tensor> = (0..400).map(|_| Tensor::from_vec(scaled.clone())).collect();
            Tensor::stack(&rows).unwrap()
        });
        let (eq, _) = receive(&x, jam.as_ref(), &config.channel, &mut r)?;
        let features = encoder.symbols_to_features(&eq)?;
        Ok(accuracy(&g0.logits(&features)?, &labels))
    };
    println!("clean acc: {:.3}", eval_acc(None, 0.0)?);

    // Direct UAP: ascend the mean training loss over a fixed delta.
    let dim = 2 * encoder.symbols;
    let eps_max = 0.891;
    let mut delta = vec![0.01; dim];
    let mut rng2 = ChaCha8Rng::seed_from_u64(9);
    for step in 0..300 {
        let idx: Vec<usize> = (0..128).map(|i| (step * 61 + i * 7) % train_data.len()).collect();
        let (images, labels) = train_data.gather(&idx);
        let x = encoder.encode(&images)?;
        let rows: Vec<Tensor> = (0..idx.len()).map(|_| Tensor::from_vec(delta.clone())).collect();
        let jam = Tensor::stack(&rows)?;
        let (eq, _) = receive(&x, Some(&jam), &config.channel, &mut rng2)?;
        let features = encoder.symbols_to_features(&eq)?;
        let tape = g0.graph.forward(std::slice::from_ref(&features))?;
        let (_loss, dlogits) = softmax_ce_grad(tape.output(), &labels)?;
        let grads = g0.graph.backward(&tape, &dlogits)?;
        // Mean input gradient over the batch = gradient on the shared delta.
        let gin = &grads.input_grads[0];
        let mut g = vec![0.0; dim];
        for bi in 0..idx.len() {
            for (j, v) in gin.row(bi).iter().enumerate() {
                g[j] += v;
            }
        }
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm > 0.0 {
            for (d, gv) in delta.iter_mut().zip(&g) {
                *d += 0.05 * eps_max * gv / gnorm;
            }
        }
        let dnorm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        if dnorm > eps_max {
            let s = eps_max / dnorm;
            delta.iter_mut().for_each(|v| *v *= s);
        }
    }
    for eps in [0.178, 0.447, 0.891] {
        println!("direct UAP at eps {eps:.3}: acc {:.3}", eval_acc(Some(&delta), eps)?);
    }

    // Generator training at aggressive settings.
    let mut apg = build_apg(
        &ApgConfig {
            trigger_dim: 128,
            feature_shape: encoder.feature_shape.clone(),
            scale: 8,
            use_pam: true,
        },
        &mut rng,
    )?;
    let stats = train_apg(
        &mut apg,
        &encoder,
        &g0,
        &config.channel,
        &train_data,
        &ApgTrainOpts {
            epochs: 30,
            batch: 32,
            lr: 5e-3,
            psr_range_db: (-15.0, -1.0),
        },
        &mut rng,
    )?;
    println!(
        "apg 30 epochs lr 5e-3: losses {:?}",
        stats
            .epoch_losses
            .iter()
            .step_by(3)
            .map(|l| format!("{l:.3}"))
            .collect::<Vec<_>>()
    );
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for eps in [0.178, 0.447, 0.891] {
        let (images, labels) = test_data.take(400);
        let x = encoder.encode(&images)?;
        let jam = apg.generate(&vec![eps; 400], &mut r)?;
        let (eq, _) = receive(&x, Some(&jam), &config.channel, &mut r)?;
        let features = encoder.symbols_to_features(&eq)?;
        let acc = accuracy(&g0.logits(&features)?, &labels);
        println!("trained APG at eps {eps:.3}: acc {acc:.3}");
    }
    Ok(())
}
