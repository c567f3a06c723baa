//! Training loop: variable-length patch sequences, MSE on query patches, AdamW.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{augment, AugmentRanges, GrayImage};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenize::{build_sequence, random_locations, sample_patches, target_tensor, InputSequence, Variant};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub t_i_min: usize,
    pub t_i_max: usize,
    pub t_q: usize,
    pub batch: usize,
    pub epochs: usize,
    /// Batches per epoch; `None` means one pass worth of images.
    pub steps_per_epoch: Option<usize>,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub augment: AugmentRanges,
    /// Worker threads for per-element tapes; 0 uses the global pool.
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            t_i_min: 1,
            t_i_max: 1024,
            t_q: 1024,
            batch: 16,
            epochs: 1,
            steps_per_epoch: None,
            adam: AdamConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            augment: AugmentRanges::default(),
            jobs: 0,
        }
    }
}

impl TrainConfig {
    /// CPU-sized profile used by the acceptance runs.
    pub fn desk() -> Self {
        TrainConfig {
            t_i_max: 256,
            t_q: 256,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1 <= self.t_i_min && self.t_i_min <= self.t_i_max) {
            return Err(Error::Config(format!(
                "need 1 <= t_i_min ({}) <= t_i_max ({})",
                self.t_i_min, self.t_i_max
            )));
        }
        if self.t_q == 0 || self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("t_q, batch and epochs must be >= 1".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps_per_epoch must be >= 1".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.eps > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2))
            || a.weight_decay < 0.0
        {
            return Err(Error::Config("invalid optimizer hyperparameters".into()));
        }
        Ok(())
    }

    pub fn steps_for(&self, n_images: usize) -> usize {
        self.epochs * self.steps_per_epoch.unwrap_or_else(|| n_images.div_ceil(self.batch).max(1))
    }
}

/// Mean of squared differences over all entries.
pub fn mse_loss<'t>(pred: &Var<'t>, target: &Var<'t>) -> Result<Var<'t>> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    Ok(pred.sub(target)?.square().mean())
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a combined word.
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for batch `step` of a run.
pub fn batch_seed(run_seed: u64, step: usize) -> u64 {
    mix(run_seed, step as u64 + 1)
}

/// The sequence and SSE target for one batch element.
pub fn make_example(
    images: &[GrayImage],
    vi: usize,
    t_q: usize,
    variant: Variant,
    ranges: &AugmentRanges,
    seed: u64,
) -> Result<(InputSequence, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src = &images[rng.gen_range(0..images.len())];
    let img = augment(src, &ranges.sample(&mut rng));
    let patches = sample_patches(&img, vi, &mut rng)?;
    let queries = random_locations(img.side(), t_q, &mut rng);
    let target = target_tensor(&img, &queries)?;
    let seq = build_sequence(patches, queries, variant, Some(vi))?;
    Ok((seq, target))
}

fn element_grads(model: &Model, seq: &InputSequence, target: &Tensor) -> Result<(f64, Vec<Tensor>)> {
    let params = model.params().expect("trainable model");
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let pred = model.predict_on_tape(&tape, &bound, seq)?;
    let loss = mse_loss(&pred, &tape.constant(target.clone()))?;
    let value = loss.value().item();
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let mut g = tape.backward(&loss)?;
    let grads = bound
        .iter()
        .map(|v| g.take(v).unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();
    Ok((value, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            writeln!(s, "{},{l:e}", i + 1).unwrap();
        }
        s
    }
}

/// Run one batch and apply the update. Returns the mean loss.
pub fn train_step(model: &mut Model, opt: &mut Adam, cfg: &TrainConfig, images: &[GrayImage], step: usize) -> Result<f64> {
    let seed = batch_seed(cfg.seed, step);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vi = rng.gen_range(cfg.t_i_min..=cfg.t_i_max);
    let variant = model.variant();
    let elems: Vec<u64> = (0..cfg.batch).map(|_| rng.gen()).collect();
    let run = |s: &u64| -> Result<(f64, Vec<Tensor>)> {
        let (seq, target) = make_example(images, vi, cfg.t_q, variant, &cfg.augment, *s)?;
        element_grads(model, &seq, &target)
    };
    let results: Vec<Result<(f64, Vec<Tensor>)>> = elems.par_iter().map(run).collect();
    let mut total: Option<Vec<Tensor>> = None;
    let mut loss = 0.0;
    // Fixed-order reduction keeps the sum independent of scheduling.
    for r in results {
        let (l, g) = r.map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("{m} at step {step} (batch seed {seed:#018x}, V_I {vi})")),
            e => e,
        })?;
        if !l.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step} (batch seed {seed:#018x}, V_I {vi})"
            )));
        }
        loss += l;
        match total.as_mut() {
            None => total = Some(g),
            Some(t) => t.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
        }
    }
    let n = cfg.batch as f64;
    let params = model.params_mut().expect("trainable model");
    params.accumulate_tensors(&total.unwrap());
    params.scale_grads(1.0 / n);
    opt.step(params);
    if !params.all_finite() {
        return Err(Error::Numeric(format!(
            "non-finite parameters after step {step} (batch seed {seed:#018x})"
        )));
    }
    Ok(loss / n)
}

/// Train in place. With `out_dir`, writes `loss.csv`, `model.ckpt` and
/// every `checkpoint_every` epochs `model_epoch<k>.ckpt`.
pub fn train(model: &mut Model, cfg: &TrainConfig, images: &[GrayImage], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    if model.params().is_none() {
        return Err(Error::Unsupported(format!("cannot train a {} model", model.kind().as_str())));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut opt = Adam::new(cfg.adam, model.params().unwrap());
    let per_epoch = cfg.steps_for(images.len()) / cfg.epochs;
    let mut outcome = TrainOutcome { losses: Vec::new() };
    let result = pool.install(|| -> Result<()> {
        for epoch in 1..=cfg.epochs {
            for _ in 0..per_epoch {
                let step = outcome.losses.len();
                outcome.losses.push(train_step(model, &mut opt, cfg, images, step)?);
            }
            if let Some(dir) = out_dir {
                if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch < cfg.epochs {
                    model.save(&dir.join(format!("model_epoch{epoch}.ckpt")))?;
                }
            }
        }
        Ok(())
    });
    if let Some(dir) = out_dir {
        let p = dir.join("loss.csv");
        fs::write(&p, outcome.loss_csv()).map_err(|e| Error::io(&p, e))?;
    }
    result?;
    if let Some(dir) = out_dir {
        model.save(&dir.join("model.ckpt"))?;
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthOptions};
    use crate::ssm::{ModelConfig, SsmModel};
    use crate::tokenize::{sample_patches, PatchSample};

    fn images(n: usize) -> Vec<GrayImage> {
        synth_dataset(
            &mut ChaCha8Rng::seed_from_u64(3),
            n,
            &SynthOptions {
                side: 32,
                ..Default::default()
            },
        )
    }

    fn tiny_ssm(seed: u64) -> Model {
        Model::Ssm(
            SsmModel::init(
                ModelConfig {
                    n_blocks: 2,
                    ..ModelConfig::default()
                },
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap(),
        )
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            t_i_max: 16,
            t_q: 8,
            batch: 2,
            epochs: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn mse_loss_matches_two_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tape = Tape::new();
        let pa = tape.constant(Tensor::new(&[3, 16], a.clone()).unwrap());
        let pb = tape.constant(Tensor::new(&[3, 16], b.clone()).unwrap());
        let l = mse_loss(&pa, &pb).unwrap().value().item();
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..16 {
                s += (a[i * 16 + j] - b[i * 16 + j]).powi(2);
            }
        }
        assert!((l - s / 48.0).abs() < 1e-15);
        assert_eq!(mse_loss(&pa, &pa).unwrap().value().item(), 0.0);
        let shifted = tape.constant(Tensor::new(&[3, 16], a.iter().map(|v| v + 0.1).collect()).unwrap());
        assert!((mse_loss(&shifted, &pa).unwrap().value().item() - 0.01).abs() < 1e-15);
        let other = tape.constant(Tensor::zeros(&[2, 16]));
        assert!(mse_loss(&pa, &other).is_err());
    }

    #[test]
    fn one_epoch_smoke() {
        let imgs = images(4);
        let mut m = tiny_ssm(1);
        let out = train(&mut m, &small_cfg(), &imgs, None).unwrap();
        assert_eq!(out.losses.len(), 2);
        assert!(out.losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn same_seed_same_curve() {
        let imgs = images(4);
        let cfg = TrainConfig {
            epochs: 3,
            ..small_cfg()
        };
        let a = train(&mut tiny_ssm(2), &cfg, &imgs, None).unwrap();
        let b = train(&mut tiny_ssm(2), &cfg, &imgs, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn overfits_one_fixed_example() {
        let img = &images(1)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let patches: Vec<PatchSample> = sample_patches(img, 24, &mut rng).unwrap();
        let queries = random_locations(img.side(), 16, &mut rng);
        let target = target_tensor(img, &queries).unwrap();
        let seq = build_sequence(patches, queries, Variant::Default, None).unwrap();
        let mut m = tiny_ssm(5);
        let mut opt = Adam::new(
            AdamConfig {
                lr: 3e-3,
                ..Default::default()
            },
            m.params().unwrap(),
        );
        let mut losses = Vec::new();
        for _ in 0..50 {
            let (l, g) = element_grads(&m, &seq, &target).unwrap();
            losses.push(l);
            let p = m.params_mut().unwrap();
            p.accumulate_tensors(&g);
            opt.step(p);
        }
        let rises = losses.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(rises <= 5, "{rises} non-monotone steps: {losses:?}");
        assert!(losses[49] < losses[0]);
    }

    #[test]
    fn writes_curve_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            checkpoint_every: 1,
            ..small_cfg()
        };
        let mut m = tiny_ssm(6);
        train(&mut m, &cfg, &images(4), Some(dir.path())).unwrap();
        let csv = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert!(csv.starts_with("step,loss\n1,"));
        assert_eq!(csv.lines().count(), 5);
        assert!(dir.path().join("model.ckpt").exists());
        assert!(dir.path().join("model_epoch1.ckpt").exists());
    }

    #[test]
    fn untrainable_models_are_rejected() {
        assert!(matches!(
            train(&mut Model::Oracle, &small_cfg(), &images(2), None),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn invalid_ranges_are_config_errors() {
        let cfg = TrainConfig {
            t_i_min: 10,
            t_i_max: 5,
            ..small_cfg()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
