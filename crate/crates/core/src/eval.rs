//! Streaming inference sessions and the (V_I, V_Q) evaluation grid.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::GrayImage;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::ssm::{HiddenState, StepPlan};
use crate::tokenize::{
    extract_ground_truth, extract_ground_truth_snapped, random_locations, sample_patches, Location, Patch,
    PatchSample, Variant, PATCH_LEN,
};
use crate::train::batch_seed;

enum Stream {
    Ssm { state: HiddenState, plan: StepPlan },
    Memory(Vec<PatchSample>),
    Stateless,
}

/// Incremental view of one image stream.
///
/// [`Session::query`] works on a copy of the recurrent state, so probing
/// mid-stream never changes what later observations see.
pub struct Session<'m> {
    model: &'m Model,
    source: &'m GrayImage,
    stream: Stream,
    observed: usize,
    /// Per-block ‖Δ‖₂ of every token fed so far (SSM only), when enabled.
    delta_log: Option<Vec<Vec<f64>>>,
}

impl<'m> Session<'m> {
    /// `declared_len` is required for the prepended variant and is what the
    /// length token encodes.
    pub fn new(model: &'m Model, source: &'m GrayImage, declared_len: Option<usize>) -> Result<Self> {
        Self::build(model, source, declared_len, false)
    }

    /// Like [`Session::new`], recording per-block ‖Δ_t‖₂ of every token
    /// including the length token. No-op for non-SSM models.
    pub fn with_delta_log(model: &'m Model, source: &'m GrayImage, declared_len: Option<usize>) -> Result<Self> {
        Self::build(model, source, declared_len, true)
    }

    fn build(model: &'m Model, source: &'m GrayImage, declared_len: Option<usize>, log: bool) -> Result<Self> {
        let stream = match model {
            Model::Ssm(m) => Stream::Ssm {
                state: HiddenState::zeros(&m.config),
                plan: m.step_plan(),
            },
            Model::Transformer(_) => Stream::Memory(Vec::new()),
            Model::Oracle | Model::MeanPatch(_) => Stream::Stateless,
        };
        let mut s = Session {
            model,
            source,
            stream,
            observed: 0,
            delta_log: match model {
                Model::Ssm(m) if log => Some(vec![Vec::new(); m.config.n_blocks]),
                _ => None,
            },
        };
        if model.variant() == Variant::Prepended {
            let n = declared_len
                .filter(|&n| n >= 1)
                .ok_or_else(|| Error::contract("prepended variant needs a declared length >= 1"))?;
            if let Model::Ssm(m) = model {
                let tok = m.embed.length_token(&m.params, n)?;
                s.feed(&tok)?;
            }
        }
        Ok(s)
    }

    /// Image the oracle answers from. Patches already observed are kept.
    pub fn set_source(&mut self, source: &'m GrayImage) {
        self.source = source;
    }

    pub fn delta_log(&self) -> Option<&[Vec<f64>]> {
        self.delta_log.as_deref()
    }

    fn feed(&mut self, token: &[f64]) -> Result<Vec<f64>> {
        let (Model::Ssm(m), Stream::Ssm { state, plan }) = (self.model, &mut self.stream) else {
            return Err(Error::contract("token stream on a non-recurrent model"));
        };
        let mut d = Vec::new();
        let out = m.step(plan, token, state, self.delta_log.is_some().then_some(&mut d))?;
        if let Some(log) = self.delta_log.as_mut() {
            for (b, v) in log.iter_mut().zip(d) {
                b.push(v);
            }
        }
        Ok(out)
    }

    pub fn observed(&self) -> usize {
        self.observed
    }

    pub fn observe(&mut self, p: &PatchSample) -> Result<()> {
        match (self.model, &mut self.stream) {
            (Model::Ssm(m), Stream::Ssm { .. }) => {
                let tok = m.embed.image_token(&m.params, p);
                self.feed(&tok)?;
            }
            (_, Stream::Memory(mem)) => mem.push(*p),
            _ => {}
        }
        self.observed += 1;
        Ok(())
    }

    pub fn observe_all(&mut self, ps: &[PatchSample]) -> Result<()> {
        ps.iter().try_for_each(|p| self.observe(p))
    }

    pub fn hidden_state(&self) -> Option<&HiddenState> {
        match &self.stream {
            Stream::Ssm { state, .. } => Some(state),
            _ => None,
        }
    }

    /// Predict patches at `locs` from everything observed so far.
    pub fn query(&self, locs: &[Location]) -> Result<Vec<Patch>> {
        match (self.model, &self.stream) {
            (Model::Ssm(m), Stream::Ssm { state, .. }) => {
                let mut state = state.clone();
                let mut plan = m.step_plan();
                m.step(&mut plan, &m.embed.separator(&m.params), &mut state, None)?;
                locs.iter()
                    .map(|&l| {
                        let tok = m.embed.query_token(&m.params, l)?;
                        let out = m.step(&mut plan, &tok, &mut state, None)?;
                        Ok(m.head(&out))
                    })
                    .collect()
            }
            (Model::Transformer(m), Stream::Memory(mem)) => {
                if locs.is_empty() {
                    return Ok(Vec::new());
                }
                m.predict(mem, locs)
            }
            (Model::Oracle, _) => Ok(locs
                .iter()
                .map(|&l| extract_ground_truth_snapped(self.source, l))
                .collect()),
            (Model::MeanPatch(p), _) => Ok(vec![*p; locs.len()]),
            _ => unreachable!("stream matches model"),
        }
    }
}

/// Mean squared error of predictions against ground truth at `locs`.
pub fn patch_mse(img: &GrayImage, locs: &[Location], preds: &[Patch]) -> Result<f64> {
    if locs.len() != preds.len() || locs.is_empty() {
        return Err(Error::dim("prediction and location counts differ"));
    }
    let mut se = 0.0;
    for (l, p) in locs.iter().zip(preds) {
        let t = extract_ground_truth(img, *l)?;
        se += p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(se / (locs.len() * PATCH_LEN) as f64)
}

/// MSE of one image at one (V_I, V_Q) cell. Patches and query locations
/// come from separate seeds.
pub fn image_mse(model: &Model, img: &GrayImage, vi: usize, vq: usize, patch_seed: u64, query_seed: u64) -> Result<f64> {
    let patches = sample_patches(img, vi, &mut ChaCha8Rng::seed_from_u64(patch_seed))?;
    let locs = random_locations(img.side(), vq, &mut ChaCha8Rng::seed_from_u64(query_seed));
    let mut s = Session::new(model, img, Some(vi))?;
    s.observe_all(&patches)?;
    patch_mse(img, &locs, &s.query(&locs)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub model_id: String,
    pub vi: usize,
    pub vq: usize,
    pub mean_mse: f64,
    pub ci95: f64,
    pub n: usize,
}

impl MetricsRecord {
    /// Mean and normal-approximation 95% half-width over per-image values.
    pub fn from_samples(model_id: &str, vi: usize, vq: usize, mses: &[f64]) -> Result<Self> {
        let n = mses.len();
        if n < 2 {
            return Err(Error::contract("a confidence interval needs at least two images"));
        }
        let mean = mses.iter().sum::<f64>() / n as f64;
        let var = mses.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Ok(MetricsRecord {
            model_id: model_id.to_string(),
            vi,
            vq,
            mean_mse: mean,
            ci95: 1.96 * var.sqrt() / (n as f64).sqrt(),
            n,
        })
    }
}

pub const METRICS_HEADER: &str = "model_id,vi,vq,mean_mse,ci95,n";

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in records {
        writeln!(s, "{},{},{},{:e},{:e},{}", r.model_id, r.vi, r.vq, r.mean_mse, r.ci95, r.n).unwrap();
    }
    s
}

/// Seeds for image `i` of a cell. Patches depend on V_I and queries on V_Q
/// only, so cells along one axis share the other axis' draws and a cell's
/// value does not depend on which other cells are evaluated.
fn cell_seeds(seed: u64, vi: usize, vq: usize, i: usize) -> (u64, u64) {
    (
        batch_seed(batch_seed(batch_seed(seed, 1), vi), i),
        batch_seed(batch_seed(batch_seed(seed, 2), vq), i),
    )
}

/// Per-image MSE for every cell, in `vi`-major order.
pub fn evaluate_grid(
    model: &Model,
    model_id: &str,
    images: &[GrayImage],
    vi_list: &[usize],
    vq_list: &[usize],
    n_images: usize,
    seed: u64,
) -> Result<Vec<MetricsRecord>> {
    if vi_list.is_empty() || vq_list.is_empty() {
        return Err(Error::contract("empty V_I or V_Q list"));
    }
    if n_images < 2 {
        return Err(Error::contract("a confidence interval needs at least two images"));
    }
    if images.is_empty() {
        return Err(Error::contract("evaluation set is empty"));
    }
    let mut out = Vec::with_capacity(vi_list.len() * vq_list.len());
    for &vi in vi_list {
        for &vq in vq_list {
            if vi == 0 || vq == 0 {
                return Err(Error::contract("V_I and V_Q must be >= 1"));
            }
            use rayon::prelude::*;
            let mses = (0..n_images)
                .into_par_iter()
                .map(|i| {
                    let (ps, qs) = cell_seeds(seed, vi, vq, i);
                    image_mse(model, &images[i % images.len()], vi, vq, ps, qs)
                })
                .collect::<Result<Vec<f64>>>()?;
            out.push(MetricsRecord::from_samples(model_id, vi, vq, &mses)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthOptions};
    use crate::ssm::{ModelConfig, SsmModel};
    use crate::tokenize::{build_sequence, grid_locations};
    use crate::transformer::{TransformerConfig, TransformerModel};
    use crate::tensor::Tape;

    fn images(n: usize) -> Vec<GrayImage> {
        synth_dataset(
            &mut ChaCha8Rng::seed_from_u64(5),
            n,
            &SynthOptions {
                side: 32,
                ..Default::default()
            },
        )
    }

    #[test]
    fn oracle_scores_zero() {
        let r = evaluate_grid(&Model::Oracle, "oracle", &images(3), &[1, 8], &[4, 16], 4, 0).unwrap();
        assert_eq!(r.len(), 4);
        assert!(r.iter().all(|m| m.mean_mse == 0.0 && m.ci95 == 0.0 && m.n == 4));
    }

    #[test]
    fn zero_model_scores_mean_square_of_queried_pixels() {
        let imgs = images(4);
        let r = evaluate_grid(&Model::MeanPatch([0.0; 16]), "zero", &imgs, &[3], &[10], 4, 9).unwrap();
        let mut per = Vec::new();
        for (i, img) in imgs.iter().enumerate() {
            let (_, qs) = cell_seeds(9, 3, 10, i);
            let locs = random_locations(img.side(), 10, &mut ChaCha8Rng::seed_from_u64(qs));
            let sq: f64 = locs
                .iter()
                .flat_map(|&l| extract_ground_truth(img, l).unwrap())
                .map(|v| v * v)
                .sum();
            per.push(sq / 160.0);
        }
        let expect = per.iter().sum::<f64>() / 4.0;
        assert!((r[0].mean_mse - expect).abs() < 1e-15);
    }

    #[test]
    fn baseline_ignores_image_tokens() {
        let imgs = images(3);
        let m = Model::MeanPatch([0.2; 16]);
        let r = evaluate_grid(&m, "avg", &imgs, &[1, 64, 512], &[32], 6, 2).unwrap();
        assert!(r.windows(2).all(|w| w[0].mean_mse == w[1].mean_mse));
    }

    #[test]
    fn too_few_images_is_a_contract_error() {
        assert!(matches!(
            evaluate_grid(&Model::Oracle, "o", &images(1), &[1], &[1], 1, 0),
            Err(Error::Contract(_))
        ));
        assert!(MetricsRecord::from_samples("x", 1, 1, &[0.5]).is_err());
    }

    #[test]
    fn ci_is_normal_half_width() {
        let r = MetricsRecord::from_samples("x", 1, 1, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(r.mean_mse, 2.5);
        let s = (5.0f64 / 3.0).sqrt();
        assert!((r.ci95 - 1.96 * s / 2.0).abs() < 1e-15);
    }

    #[test]
    fn ssm_session_matches_tape_forward() {
        let m = SsmModel::init(
            ModelConfig {
                variant: Variant::Prepended,
                ..ModelConfig::desk()
            },
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        let img = &images(1)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ps = sample_patches(img, 20, &mut rng).unwrap();
        let qs = random_locations(img.side(), 7, &mut rng);
        let seq = build_sequence(ps.clone(), qs.clone(), Variant::Prepended, Some(20)).unwrap();
        let tape = Tape::inference();
        let bound = m.params.bind(&tape);
        let full = m.predict_on_tape(&tape, &bound, &seq).unwrap();
        let model = Model::Ssm(m);
        let mut s = Session::new(&model, img, Some(20)).unwrap();
        s.observe_all(&ps).unwrap();
        let step = s.query(&qs).unwrap();
        for (i, p) in step.iter().enumerate() {
            for (a, b) in p.iter().zip(full.value().row(i)) {
                assert!((a - b).abs() <= 1e-10 * b.abs().max(1e-3), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn query_leaves_stream_untouched() {
        let m = Model::Ssm(SsmModel::init(ModelConfig::desk(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap());
        let img = &images(1)[0];
        let ps = sample_patches(img, 10, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let mut probed = Session::new(&m, img, None).unwrap();
        let mut plain = Session::new(&m, img, None).unwrap();
        for p in &ps {
            probed.observe(p).unwrap();
            probed.query(&grid_locations(32)).unwrap();
            plain.observe(p).unwrap();
        }
        assert_eq!(probed.hidden_state(), plain.hidden_state());
    }

    #[test]
    fn transformer_queries_are_separable() {
        let m = Model::Transformer(
            TransformerModel::init(TransformerConfig::default(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap(),
        );
        let img = &images(1)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ps = sample_patches(img, 12, &mut rng).unwrap();
        let a = random_locations(32, 3, &mut rng);
        let b = random_locations(32, 5, &mut rng);
        let mut s = Session::new(&m, img, None).unwrap();
        s.observe_all(&ps).unwrap();
        let union: Vec<_> = a.iter().chain(&b).copied().collect();
        let joint = s.query(&union).unwrap();
        let sep: Vec<_> = s.query(&a).unwrap().into_iter().chain(s.query(&b).unwrap()).collect();
        assert_eq!(joint.len(), sep.len());
        for (x, y) in joint.iter().flatten().zip(sep.iter().flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_is_reproducible() {
        let m = Model::Ssm(SsmModel::init(ModelConfig::desk(), &mut ChaCha8Rng::seed_from_u64(10)).unwrap());
        let imgs = images(3);
        let a = metrics_csv(&evaluate_grid(&m, "s", &imgs, &[4, 16], &[8], 3, 11).unwrap());
        let b = metrics_csv(&evaluate_grid(&m, "s", &imgs, &[4, 16], &[8], 3, 11).unwrap());
        assert_eq!(a, b);
        assert!(a.starts_with("model_id,vi,vq,mean_mse,ci95,n\ns,4,8,"));
    }
}
