//! Encoder/decoder transformer baseline.
//!
//! The encoder runs pre-norm self-attention and MLP layers over the image
//! tokens. The decoder embeds each query location and lets it cross-attend
//! to the encoder memory; queries never attend to each other, so every
//! query's prediction depends only on its own location and the memory.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::tokenize::{Embedder, InputSequence, Location, Patch, PatchSample, Variant};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder: usize,
    pub n_decoder: usize,
    pub mlp_ratio: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            d_model: 16,
            n_heads: 2,
            n_encoder: 4,
            n_decoder: 2,
            mlp_ratio: 4,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model < 3 || self.mlp_ratio == 0 {
            return Err(Error::Config("transformer extents must be positive".into()));
        }
        Ok(())
    }
}

/// Projection handles for one attention sublayer.
#[derive(Debug, Clone, Copy)]
pub struct AttnParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct MlpParams {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    norm_attn: ParamId,
    attn: AttnParams,
    norm_mlp: ParamId,
    mlp: MlpParams,
}

/// Multi-head scaled dot-product attention without masking.
pub fn attention<'t>(
    bound: &[Var<'t>],
    p: &AttnParams,
    q_in: &Var<'t>,
    kv_in: &Var<'t>,
    n_heads: usize,
) -> Result<Var<'t>> {
    let d = q_in.value().cols();
    if kv_in.value().cols() != d {
        return Err(Error::dim("query and key widths differ"));
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::dim(format!("width {d} not divisible into {n_heads} heads")));
    }
    let dh = d / n_heads;
    let q = q_in.matmul(&bound[p.w_q.0])?;
    let k = kv_in.matmul(&bound[p.w_k.0])?;
    let v = kv_in.matmul(&bound[p.w_v.0])?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = q.slice_cols(h * dh, dh)?;
        let kh = k.slice_cols(h * dh, dh)?;
        let vh = v.slice_cols(h * dh, dh)?;
        let w = qh.matmul(&kh.transpose()?)?.scale(scale).softmax_rows()?;
        heads.push(w.matmul(&vh)?);
    }
    let cat = if heads.len() == 1 {
        heads.pop().unwrap()
    } else {
        Var::concat_cols(&heads)?
    };
    cat.matmul(&bound[p.w_o.0])
}

fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).unwrap()
}

#[derive(Debug, Clone)]
pub struct TransformerModel {
    pub config: TransformerConfig,
    pub params: ParamStore,
    pub embed: Embedder,
    encoder: Vec<Layer>,
    decoder: Vec<Layer>,
    enc_norm: ParamId,
    dec_norm: ParamId,
}

fn init_layer<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &TransformerConfig, rng: &mut R) -> Result<Layer> {
    let d = cfg.d_model;
    let hidden = cfg.mlp_ratio * d;
    let bd = 1.0 / (d as f64).sqrt();
    let bh = 1.0 / (hidden as f64).sqrt();
    let p = |s: &str| format!("{prefix}.{s}");
    Ok(Layer {
        norm_attn: store.insert(p("norm_attn"), Tensor::ones(&[d]))?,
        attn: AttnParams {
            w_q: store.insert(p("w_q"), uniform(rng, &[d, d], bd))?,
            w_k: store.insert(p("w_k"), uniform(rng, &[d, d], bd))?,
            w_v: store.insert(p("w_v"), uniform(rng, &[d, d], bd))?,
            w_o: store.insert(p("w_o"), uniform(rng, &[d, d], bd))?,
        },
        norm_mlp: store.insert(p("norm_mlp"), Tensor::ones(&[d]))?,
        mlp: MlpParams {
            w1: store.insert(p("w1"), uniform(rng, &[d, hidden], bd))?,
            b1: store.insert(p("b1"), Tensor::zeros(&[hidden]))?,
            w2: store.insert(p("w2"), uniform(rng, &[hidden, d], bh))?,
            b2: store.insert(p("b2"), Tensor::zeros(&[d]))?,
        },
    })
}

fn load_layer(store: &ParamStore, prefix: &str) -> Result<Layer> {
    let g = |s: &str| store.require(&format!("{prefix}.{s}"));
    Ok(Layer {
        norm_attn: g("norm_attn")?,
        attn: AttnParams {
            w_q: g("w_q")?,
            w_k: g("w_k")?,
            w_v: g("w_v")?,
            w_o: g("w_o")?,
        },
        norm_mlp: g("norm_mlp")?,
        mlp: MlpParams {
            w1: g("w1")?,
            b1: g("b1")?,
            w2: g("w2")?,
            b2: g("b2")?,
        },
    })
}

impl TransformerModel {
    pub fn init<R: Rng>(config: TransformerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let embed = Embedder::init(&mut params, config.d_model, Variant::Default, rng)?;
        let encoder = (0..config.n_encoder)
            .map(|i| init_layer(&mut params, &format!("enc{i}"), &config, rng))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..config.n_decoder)
            .map(|i| init_layer(&mut params, &format!("dec{i}"), &config, rng))
            .collect::<Result<Vec<_>>>()?;
        let enc_norm = params.insert("enc_norm", Tensor::ones(&[config.d_model]))?;
        let dec_norm = params.insert("dec_norm", Tensor::ones(&[config.d_model]))?;
        Ok(TransformerModel {
            config,
            params,
            embed,
            encoder,
            decoder,
            enc_norm,
            dec_norm,
        })
    }

    /// Rebuild from stored parameters; the head count is not recoverable
    /// from shapes and must be supplied.
    pub fn from_params(params: ParamStore, n_heads: usize) -> Result<Self> {
        let embed = Embedder::from_store(&params)?;
        if embed.variant() != Variant::Default {
            return Err(Error::Unsupported("transformer with a length token".into()));
        }
        let count = |pre: &str| (0..).take_while(|i| params.contains(&format!("{pre}{i}.w_q"))).count();
        let encoder = (0..count("enc"))
            .map(|i| load_layer(&params, &format!("enc{i}")))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..count("dec"))
            .map(|i| load_layer(&params, &format!("dec{i}")))
            .collect::<Result<Vec<_>>>()?;
        let d = embed.d_model;
        let mlp_ratio = match encoder.first().or(decoder.first()) {
            Some(l) => params.get(l.mlp.w1).cols() / d,
            None => 4,
        };
        let config = TransformerConfig {
            d_model: d,
            n_heads,
            n_encoder: encoder.len(),
            n_decoder: decoder.len(),
            mlp_ratio,
        };
        config.validate()?;
        let hidden = mlp_ratio * d;
        for l in encoder.iter().chain(&decoder) {
            let expect = [
                (l.norm_attn, vec![d]),
                (l.attn.w_q, vec![d, d]),
                (l.attn.w_k, vec![d, d]),
                (l.attn.w_v, vec![d, d]),
                (l.attn.w_o, vec![d, d]),
                (l.norm_mlp, vec![d]),
                (l.mlp.w1, vec![d, hidden]),
                (l.mlp.b1, vec![hidden]),
                (l.mlp.w2, vec![hidden, d]),
                (l.mlp.b2, vec![d]),
            ];
            for (id, shape) in expect {
                if params.get(id).shape() != shape.as_slice() {
                    return Err(Error::dim(format!("{} has unexpected shape", params.name(id))));
                }
            }
        }
        let enc_norm = params.require("enc_norm")?;
        let dec_norm = params.require("dec_norm")?;
        Ok(TransformerModel {
            config,
            params,
            embed,
            encoder,
            decoder,
            enc_norm,
            dec_norm,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    fn mlp<'t>(&self, bound: &[Var<'t>], l: &Layer, x: &Var<'t>) -> Result<Var<'t>> {
        let h = x.rmsnorm(&bound[l.norm_mlp.0], NORM_EPS)?;
        let h = h.matmul(&bound[l.mlp.w1.0])?.add(&bound[l.mlp.b1.0])?.silu();
        let h = h.matmul(&bound[l.mlp.w2.0])?.add(&bound[l.mlp.b2.0])?;
        x.add(&h)
    }

    /// Encoder stack over `V_I × d` image tokens, without the final norm.
    pub fn encoder_forward<'t>(&self, bound: &[Var<'t>], tokens: &Var<'t>) -> Result<Var<'t>> {
        let mut x = tokens.clone();
        for l in &self.encoder {
            let h = x.rmsnorm(&bound[l.norm_attn.0], NORM_EPS)?;
            x = x.add(&attention(bound, &l.attn, &h, &h, self.config.n_heads)?)?;
            x = self.mlp(bound, l, &x)?;
        }
        Ok(x)
    }

    /// Decoder stack: the final-normed memory is shared by every layer.
    /// Returns the head output, one patch row per query.
    pub fn decoder_forward<'t>(&self, bound: &[Var<'t>], queries: &Var<'t>, memory: &Var<'t>) -> Result<Var<'t>> {
        if memory.value().rows() == 0 {
            return Err(Error::contract("decoder memory is empty"));
        }
        let mem = memory.rmsnorm(&bound[self.enc_norm.0], NORM_EPS)?;
        let mut x = queries.clone();
        for l in &self.decoder {
            let h = x.rmsnorm(&bound[l.norm_attn.0], NORM_EPS)?;
            x = x.add(&attention(bound, &l.attn, &h, &mem, self.config.n_heads)?)?;
            x = self.mlp(bound, l, &x)?;
        }
        let out = x.rmsnorm(&bound[self.dec_norm.0], NORM_EPS)?;
        self.embed.head_on_tape(bound, &out)
    }

    fn image_tokens<'t>(&self, tape: &'t Tape, bound: &[Var<'t>], patches: &[PatchSample]) -> Result<Var<'t>> {
        if patches.is_empty() {
            return Err(Error::contract("decoder memory is empty"));
        }
        let seq = InputSequence {
            length_input: None,
            patches: patches.to_vec(),
            queries: Vec::new(),
        };
        let all = self.embed.embed_on_tape(tape, bound, &seq)?;
        // Drop the trailing separator row.
        all.slice_rows(0, patches.len())
    }

    fn query_tokens<'t>(&self, tape: &'t Tape, bound: &[Var<'t>], queries: &[Location]) -> Result<Var<'t>> {
        let seq = InputSequence {
            length_input: None,
            patches: Vec::new(),
            queries: queries.to_vec(),
        };
        let all = self.embed.embed_on_tape(tape, bound, &seq)?;
        all.slice_rows(1, queries.len())
    }

    /// Predicted patches (`V_Q × 16`) for the query segment of a sequence.
    pub fn predict_on_tape<'t>(&self, tape: &'t Tape, bound: &[Var<'t>], seq: &InputSequence) -> Result<Var<'t>> {
        if seq.length_input.is_some() {
            return Err(Error::Unsupported("transformer with a length token".into()));
        }
        if seq.queries.is_empty() {
            return Err(Error::contract("no queries"));
        }
        let memory = self.encoder_forward(bound, &self.image_tokens(tape, bound, &seq.patches)?)?;
        let q = self.query_tokens(tape, bound, &seq.queries)?;
        self.decoder_forward(bound, &q, &memory)
    }

    /// Inference-only prediction.
    pub fn predict(&self, patches: &[PatchSample], queries: &[Location]) -> Result<Vec<Patch>> {
        let tape = Tape::inference();
        let bound = self.params.bind(&tape);
        let seq = InputSequence {
            length_input: None,
            patches: patches.to_vec(),
            queries: queries.to_vec(),
        };
        let out = self.predict_on_tape(&tape, &bound, &seq)?;
        Ok((0..queries.len())
            .map(|i| out.value().row(i).try_into().unwrap())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_strokes, SynthOptions};
    use crate::tokenize::sample_patches;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> TransformerModel {
        TransformerModel::init(TransformerConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn patches(seed: u64, n: usize) -> Vec<PatchSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = synth_strokes(
            &mut rng,
            &SynthOptions {
                side: 64,
                ..Default::default()
            },
        );
        sample_patches(&img, n, &mut rng).unwrap()
    }

    fn locs(n: usize, seed: u64) -> Vec<Location> {
        crate::tokenize::random_locations(64, n, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn attention_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let d = 8;
        let p = AttnParams {
            w_q: store.insert("q", uniform(&mut rng, &[d, d], 1.0)).unwrap(),
            w_k: store.insert("k", uniform(&mut rng, &[d, d], 1.0)).unwrap(),
            w_v: store.insert("v", uniform(&mut rng, &[d, d], 1.0)).unwrap(),
            w_o: store.insert("o", uniform(&mut rng, &[d, d], 1.0)).unwrap(),
        };
        let xq = uniform(&mut rng, &[3, d], 1.0);
        let xk = uniform(&mut rng, &[5, d], 1.0);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let out = attention(&bound, &p, &tape.constant(xq.clone()), &tape.constant(xk.clone()), 2).unwrap();

        let proj = |x: &Tensor, w: &Tensor| x.matmul(w).unwrap();
        let (q, k, v) = (
            proj(&xq, store.get(p.w_q)),
            proj(&xk, store.get(p.w_k)),
            proj(&xk, store.get(p.w_v)),
        );
        let dh = 4;
        let mut cat = vec![0.0; 3 * d];
        for h in 0..2 {
            for i in 0..3 {
                let s: Vec<f64> = (0..5)
                    .map(|j| (0..dh).map(|c| q.get2(i, h * dh + c) * k.get2(j, h * dh + c)).sum::<f64>() / 2.0)
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
                for c in 0..dh {
                    cat[i * d + h * dh + c] = (0..5).map(|j| (s[j] - m).exp() / z * v.get2(j, h * dh + c)).sum();
                }
            }
        }
        let expect = Tensor::new(&[3, d], cat).unwrap().matmul(store.get(p.w_o)).unwrap();
        for (a, b) in out.value().data().iter().zip(expect.data()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn single_key_attention_is_projected_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let d = 4;
        let p = AttnParams {
            w_q: store.insert("q", uniform(&mut rng, &[d, d], 1.0)).unwrap(),
            w_k: store.insert("k", uniform(&mut rng, &[d, d], 1.0)).unwrap(),
            w_v: store.insert("v", uniform(&mut rng, &[d, d], 1.0)).unwrap(),
            w_o: store.insert("o", uniform(&mut rng, &[d, d], 1.0)).unwrap(),
        };
        let kv = uniform(&mut rng, &[1, d], 1.0);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let q = tape.constant(uniform(&mut rng, &[6, d], 1.0));
        let out = attention(&bound, &p, &q, &tape.constant(kv.clone()), 2).unwrap();
        let expect = kv.matmul(store.get(p.w_v)).unwrap().matmul(store.get(p.w_o)).unwrap();
        for i in 0..6 {
            for (a, b) in out.value().row(i).iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let m = model(3);
        let ps = patches(4, 12);
        let perm: Vec<usize> = vec![5, 2, 11, 0, 7, 1, 9, 3, 10, 4, 8, 6];
        let shuffled: Vec<_> = perm.iter().map(|&i| ps[i]).collect();
        let tape = Tape::inference();
        let bound = m.params.bind(&tape);
        let a = m.encoder_forward(&bound, &m.image_tokens(&tape, &bound, &ps).unwrap()).unwrap();
        let b = m
            .encoder_forward(&bound, &m.image_tokens(&tape, &bound, &shuffled).unwrap())
            .unwrap();
        for (row, &src) in perm.iter().enumerate() {
            for (x, y) in b.value().row(row).iter().zip(a.value().row(src)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_depth_encoder_is_identity() {
        let m = TransformerModel::init(
            TransformerConfig {
                n_encoder: 0,
                ..Default::default()
            },
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        let tape = Tape::inference();
        let bound = m.params.bind(&tape);
        let t = m.image_tokens(&tape, &bound, &patches(6, 5)).unwrap();
        assert_eq!(m.encoder_forward(&bound, &t).unwrap().value(), t.value());
    }

    #[test]
    fn queries_are_independent() {
        let m = model(7);
        let ps = patches(8, 20);
        let qs = locs(9, 9);
        let all = m.predict(&ps, &qs).unwrap();
        for (i, q) in qs.iter().enumerate() {
            let alone = m.predict(&ps, &[*q]).unwrap();
            for (a, b) in alone[0].iter().zip(&all[i]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(m.predict(&ps, &locs(1, 10)).unwrap().len(), 1);
    }

    #[test]
    fn duplicated_memory_leaves_outputs_unchanged() {
        let m = TransformerModel::init(
            TransformerConfig {
                n_encoder: 0,
                ..Default::default()
            },
            &mut ChaCha8Rng::seed_from_u64(11),
        )
        .unwrap();
        let ps = patches(12, 10);
        let doubled: Vec<_> = ps.iter().chain(&ps).copied().collect();
        let qs = locs(4, 13);
        let a = m.predict(&ps, &qs).unwrap();
        let b = m.predict(&doubled, &qs).unwrap();
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn memory_permutation_invariance() {
        let m = model(14);
        let ps = patches(15, 10);
        let mut rev = ps.clone();
        rev.reverse();
        let qs = locs(3, 16);
        let a = m.predict(&ps, &qs).unwrap();
        let b = m.predict(&rev, &qs).unwrap();
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_memory_is_rejected() {
        let m = model(17);
        assert!(matches!(m.predict(&[], &locs(2, 1)), Err(Error::Contract(_))));
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = TransformerConfig {
            n_heads: 3,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn params_round_trip_through_store() {
        let m = model(18);
        let back = TransformerModel::from_params(m.params.clone(), 2).unwrap();
        assert_eq!(back.config, m.config);
    }
}
