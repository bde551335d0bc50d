//! Desk-scale convergence run: train on synthetic quadrupeds, then report
//! held-out PCK@0.05 and AUC for both samplers and a collapsed prior.
//!
//! Usage: `cargo run --release --example desk_experiment -- [epochs] [train_n] [val_n]`
//!
//! Config keys can be overridden through upper-case environment variables
//! (`BATCH_SIZE=1 CHANNELS=128 ...`). `ONLY_DISTINCT` skips the collapsed-prior
//! run and `ONLY_DDIM` skips the literal sampler. The numbers in
//! `tests/calibration/desk.json` were taken from the acceptance run itself.

use std::time::Instant;

use diffpose::metrics::{self, Detection, EvalConfig, EvalImage};
use diffpose::pipeline::{self, InferMode, InferOptions, TrainConfig, Trainer, TrainingSet};
use diffpose::priors::{self, SemanticPrior};
use diffpose::rng::Rng;
use diffpose::synthdata::{
    builtin_quadruped, generate_sample, sample_seed, GenerateOptions, Sample,
};

fn split(n: usize, seed: u64) -> Vec<Sample> {
    let spec = builtin_quadruped();
    (0..n)
        .map(|i| generate_sample(&spec, sample_seed(seed, i), &GenerateOptions::default()).unwrap())
        .collect()
}

fn pck_auc(tr: &Trainer, prior: &SemanticPrior, val: &[Sample], mode: InferMode) -> (f64, f64) {
    let opts = InferOptions {
        mode,
        ..InferOptions::from_config(&tr.cfg)
    };
    let images: Vec<EvalImage> = val
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = Rng::derive(tr.cfg.seed, i as u64);
            let r = pipeline::infer(
                &s.image, &tr.params, &tr.model, &tr.sched, prior, &opts, &mut rng,
            )
            .unwrap();
            EvalImage {
                image_id: i as u64,
                gts: vec![s.kps.clone()],
                dets: vec![Detection {
                    kps: r.keypoints,
                    score: 1.0,
                }],
            }
        })
        .collect();
    let cfg = EvalConfig::new(prior.num_keypoints());
    (
        metrics::pck(&images, cfg.pck_alpha, &cfg).unwrap().value,
        metrics::auc(&images, &cfg).unwrap(),
    )
}

fn main() {
    let args: Vec<usize> = std::env::args()
        .skip(1)
        .map(|a| a.parse().unwrap())
        .collect();
    let epochs = args.first().copied().unwrap_or(30);
    let (n_train, n_val) = (
        args.get(1).copied().unwrap_or(500),
        args.get(2).copied().unwrap_or(100),
    );
    let train = split(n_train, 1);
    let val = split(n_val, 2);
    let spec = builtin_quadruped();
    let bundle = priors::build_prompts("quadruped", &spec.keypoints).unwrap();
    let distinct = priors::pseudo_embed(&bundle, priors::DEFAULT_EMBED_DIM, 0).unwrap();
    let collapsed = priors::collapsed(&distinct, 0);
    let scale = epochs as f64 / 30.0;
    let cfg = TrainConfig {
        epochs,
        lr_decay_epochs: if epochs >= 30 {
            vec![(24.0 * scale) as usize, (29.0 * scale) as usize]
        } else {
            vec![]
        },
        ..TrainConfig::default()
    };
    let env = |k: &str| std::env::var(k).ok();
    let mut cfg = cfg;
    for key in [
        "batch_size",
        "channels",
        "sigma",
        "heads",
        "time_dim",
        "loss_target",
        "lr",
    ] {
        if let Some(v) = env(&key.to_uppercase()) {
            cfg.set(key, &v).unwrap();
        }
    }
    eprintln!("{}", cfg.to_text().replace('\n', "; "));
    let runs: Vec<(&str, &SemanticPrior)> = if env("ONLY_DISTINCT").is_some() {
        vec![("distinct", &distinct)]
    } else {
        vec![("distinct", &distinct), ("collapsed", &collapsed)]
    };
    for (label, prior) in runs {
        let model = cfg.model_config(17, prior.dim(), (64, 64)).unwrap();
        let mut data = TrainingSet {
            images: vec![],
            targets: vec![],
            masks: vec![],
        };
        for s in &train {
            data.push(s.image.clone(), &s.kps, &model, &cfg).unwrap();
        }
        let mut tr = Trainer::new(cfg.clone(), model).unwrap();
        let start = Instant::now();
        while !tr.finished() {
            let logs = tr.train_epoch(&data, prior, |_| Ok(())).unwrap();
            let mean = logs.iter().map(|l| l.loss).sum::<f64>() / logs.len() as f64;
            eprintln!(
                "{label} epoch {} loss {mean:.6} lr {} {:.1}s",
                tr.epoch,
                logs[0].lr,
                start.elapsed().as_secs_f64()
            );
        }
        let modes: &[InferMode] = if env("ONLY_DDIM").is_some() {
            &[InferMode::Ddim]
        } else {
            &[InferMode::Ddim, InferMode::Literal]
        };
        for &mode in modes {
            let (p, a) = pck_auc(&tr, prior, &val, mode);
            println!("{label} {mode}: pck@0.05 = {p:.4} auc = {a:.4}");
        }
    }
}
