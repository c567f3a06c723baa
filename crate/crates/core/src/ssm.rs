//! Mamba-style selective state-space model without the depthwise convolution.
//!
//! Each block is a pre-norm residual unit:
//!
//! ```text
//! x' = rmsnorm(x)
//! (u, z) = split(x' W_in);  u = silu(u)
//! (dt, B, C) = split(u W_x)
//! delta = softplus(dt W_dt + b_dt)
//! h_t = exp(delta_t A) ⊙ h_{t-1} + delta_t B_t u_t,   A = -exp(A_log)
//! y_t = C_t · h_t + D u_t
//! out = (y ⊙ silu(z)) W_out + x
//! ```
//!
//! Training runs the whole sequence through one fused scan op on the tape.
//! Probing and evaluation use [`SsmModel::step`], which advances a
//! [`HiddenState`] one token at a time.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{silu, softplus, ParamId, ParamStore, Tape, Tensor, Var};
use crate::tokenize::{Embedder, InputSequence, Patch, Variant};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub d_state: usize,
    pub expand: usize,
    pub dt_rank: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_blocks: 8,
            d_model: 16,
            d_state: 8,
            expand: 2,
            dt_rank: canonical_dt_rank(16),
            variant: Variant::Default,
        }
    }
}

/// `max(1, ceil(d_model / 16))`.
pub fn canonical_dt_rank(d_model: usize) -> usize {
    d_model.div_ceil(16).max(1)
}

impl ModelConfig {
    /// The CPU-sized profile used by the acceptance runs.
    pub fn desk() -> Self {
        ModelConfig {
            n_blocks: 4,
            ..Default::default()
        }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.d_state == 0 || self.expand == 0 || self.dt_rank == 0 {
            return Err(Error::Config("model extents must be >= 1".into()));
        }
        if self.d_model < 3 {
            return Err(Error::Config("model.d_model must be >= 3".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockParams {
    norm_w: ParamId,
    w_in: ParamId,
    w_x: ParamId,
    w_dt: ParamId,
    b_dt: ParamId,
    a_log: ParamId,
    d: ParamId,
    w_out: ParamId,
}

/// Per-block recurrent state, one `d_inner × d_state` matrix each.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub blocks: Vec<Tensor>,
}

impl HiddenState {
    pub fn zeros(config: &ModelConfig) -> Self {
        HiddenState {
            blocks: (0..config.n_blocks)
                .map(|_| Tensor::zeros(&[config.d_inner(), config.d_state]))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.blocks.iter().all(Tensor::all_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks.iter().map(Tensor::max_abs).fold(0.0, f64::max)
    }
}

/// Per-timestep `‖delta_t‖₂` over the inner channels of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaTrace {
    pub block: usize,
    pub norms: Vec<f64>,
}

/// Zero-order hold for `A`, Euler for `B`:
/// `Abar[c,n] = exp(delta[c] A[c,n])`, `Bbar[c,n] = delta[c] B[n]`.
pub fn discretize(delta: &[f64], a: &Tensor, b_t: &[f64]) -> Result<(Tensor, Tensor)> {
    let (c, n) = (delta.len(), b_t.len());
    if a.shape() != [c, n] {
        return Err(Error::dim(format!("A is {:?}, expected [{c}, {n}]", a.shape())));
    }
    let mut abar = vec![0.0; c * n];
    let mut bbar = vec![0.0; c * n];
    for i in 0..c {
        for j in 0..n {
            abar[i * n + j] = (delta[i] * a.data()[i * n + j]).exp();
            bbar[i * n + j] = delta[i] * b_t[j];
        }
    }
    Ok((Tensor::new(&[c, n], abar)?, Tensor::new(&[c, n], bbar)?))
}

/// Sequential selective scan as one tape op.
///
/// Shapes: `u, delta: T×C`, `a: C×N`, `b, c: T×N`, `d: C`, `h0: C×N`.
/// Returns `y: T×C` and the final state.
pub fn selective_scan<'t>(
    u: &Var<'t>,
    delta: &Var<'t>,
    a: &Var<'t>,
    b: &Var<'t>,
    c: &Var<'t>,
    d: &Var<'t>,
    h0: &Tensor,
) -> Result<(Var<'t>, Tensor)> {
    let (t_len, ch) = (u.value().rows(), u.value().cols());
    let n = a.value().cols();
    let ok = u.shape() == [t_len, ch]
        && delta.shape() == [t_len, ch]
        && a.shape() == [ch, n]
        && b.shape() == [t_len, n]
        && c.shape() == [t_len, n]
        && d.shape() == [ch]
        && h0.shape() == [ch, n];
    if !ok {
        return Err(Error::dim(format!(
            "selective_scan shapes u{:?} delta{:?} A{:?} B{:?} C{:?} D{:?} h0{:?}",
            u.shape(),
            delta.shape(),
            a.shape(),
            b.shape(),
            c.shape(),
            d.shape(),
            h0.shape()
        )));
    }
    if let Some(bad) = delta.value().data().iter().find(|&&v| !(v > 0.0)) {
        if !bad.is_finite() {
            return Err(Error::Numeric(format!("non-finite delta {bad}")));
        }
        return Err(Error::contract(format!("delta must be positive, found {bad}")));
    }

    let (uv, dv, av, bv, cv, ddv) = (
        u.value().clone(),
        delta.value().clone(),
        a.value().clone(),
        b.value().clone(),
        c.value().clone(),
        d.value().clone(),
    );
    let cn = ch * n;
    // hs[t] is the state after step t-1; hs[0] = h0.
    let mut hs = Vec::with_capacity((t_len + 1) * cn);
    hs.extend_from_slice(h0.data());
    let mut abars = Vec::with_capacity(t_len * cn);
    let mut y = vec![0.0; t_len * ch];
    for t in 0..t_len {
        let (ut, dt) = (uv.row(t), dv.row(t));
        let (bt, ctv) = (bv.row(t), cv.row(t));
        let prev = t * cn;
        for i in 0..ch {
            let du = dt[i] * ut[i];
            let mut acc = 0.0;
            for j in 0..n {
                let k = i * n + j;
                let abar = (dt[i] * av.data()[k]).exp();
                let h = abar * hs[prev + k] + du * bt[j];
                abars.push(abar);
                hs.push(h);
                acc += ctv[j] * h;
            }
            y[t * ch + i] = acc + ddv.data()[i] * ut[i];
        }
    }
    let h_final = Tensor::new(&[ch, n], hs[t_len * cn..].to_vec())?;
    let value = Tensor::new(&[t_len, ch], y)?;

    let out = u.tape().custom(&[u, delta, a, b, c, d], value, move |gy, want| {
        let mut gu = vec![0.0; t_len * ch];
        let mut gdelta = vec![0.0; t_len * ch];
        let mut ga = vec![0.0; cn];
        let mut gb = vec![0.0; t_len * n];
        let mut gc = vec![0.0; t_len * n];
        let mut gd = vec![0.0; ch];
        // Gradient flowing into h_t from later steps, already multiplied by Abar_{t+1}.
        let mut carry = vec![0.0; cn];
        for t in (0..t_len).rev() {
            let (ut, dt) = (uv.row(t), dv.row(t));
            let (bt, ctv) = (bv.row(t), cv.row(t));
            let gyt = gy.row(t);
            let cur = (t + 1) * cn;
            let prev = t * cn;
            for i in 0..ch {
                let g = gyt[i];
                gd[i] += g * ut[i];
                gu[t * ch + i] += g * ddv.data()[i];
                let mut gdel = 0.0;
                let mut gui = 0.0;
                for j in 0..n {
                    let k = i * n + j;
                    gc[t * n + j] += g * hs[cur + k];
                    let dh = g * ctv[j] + carry[k];
                    let abar = abars[prev + k];
                    let hp = hs[prev + k];
                    // d/d(delta) of exp(delta a) hp + delta b u
                    gdel += dh * (hp * abar * av.data()[k] + bt[j] * ut[i]);
                    ga[k] += dh * hp * abar * dt[i];
                    gb[t * n + j] += dh * dt[i] * ut[i];
                    gui += dh * dt[i] * bt[j];
                    carry[k] = dh * abar;
                }
                gdelta[t * ch + i] += gdel;
                gu[t * ch + i] += gui;
            }
        }
        let mk = |want: bool, shape: &[usize], v: Vec<f64>| want.then(|| Tensor::new(shape, v).unwrap());
        vec![
            mk(want[0], &[t_len, ch], gu),
            mk(want[1], &[t_len, ch], gdelta),
            mk(want[2], &[ch, n], ga),
            mk(want[3], &[t_len, n], gb),
            mk(want[4], &[t_len, n], gc),
            mk(want[5], &[ch], gd),
        ]
    });
    Ok((out, h_final))
}

fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).unwrap()
}

fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Full SSM reconstructor: embeddings, blocks, final norm and head.
#[derive(Debug, Clone)]
pub struct SsmModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub embed: Embedder,
    blocks: Vec<BlockParams>,
    final_norm: ParamId,
}

/// Scratch buffers and precomputed `A` for step mode.
pub struct StepPlan {
    a: Vec<Vec<f64>>,
    xn: Vec<f64>,
    xz: Vec<f64>,
    u: Vec<f64>,
    xdbl: Vec<f64>,
    delta: Vec<f64>,
    g: Vec<f64>,
    out: Vec<f64>,
}

impl SsmModel {
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let embed = Embedder::init(&mut params, config.d_model, config.variant, rng)?;
        let (d, di, n, r) = (config.d_model, config.d_inner(), config.d_state, config.dt_rank);
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for i in 0..config.n_blocks {
            let p = |s: &str| format!("block{i}.{s}");
            let dt: Vec<f64> = (0..di)
                .map(|_| {
                    let lo = 1e-3f64.ln();
                    let hi = 1e-1f64.ln();
                    inv_softplus(rng.gen_range(lo..hi).exp())
                })
                .collect();
            let a_log: Vec<f64> = (0..di * n).map(|k| ((k % n) as f64 + 1.0).ln()).collect();
            blocks.push(BlockParams {
                norm_w: params.insert(p("norm_w"), Tensor::ones(&[d]))?,
                w_in: params.insert(p("w_in"), uniform(rng, &[d, 2 * di], 1.0 / (d as f64).sqrt()))?,
                w_x: params.insert(p("w_x"), uniform(rng, &[di, r + 2 * n], 1.0 / (di as f64).sqrt()))?,
                w_dt: params.insert(p("w_dt"), uniform(rng, &[r, di], 1.0 / (r as f64).sqrt()))?,
                b_dt: params.insert(p("b_dt"), Tensor::vector(dt))?,
                a_log: params.insert(p("a_log"), Tensor::new(&[di, n], a_log)?)?,
                d: params.insert(p("d"), Tensor::ones(&[di]))?,
                w_out: params.insert(p("w_out"), uniform(rng, &[di, d], 1.0 / (di as f64).sqrt()))?,
            });
        }
        let final_norm = params.insert("final_norm", Tensor::ones(&[d]))?;
        embed.init_length_token(&mut params, rng);
        Ok(SsmModel {
            config,
            params,
            embed,
            blocks,
            final_norm,
        })
    }

    /// Rebuild from a parameter store, inferring the configuration from shapes.
    pub fn from_params(params: ParamStore) -> Result<Self> {
        let embed = Embedder::from_store(&params)?;
        let mut blocks = Vec::new();
        while params.contains(&format!("block{}.w_in", blocks.len())) {
            let i = blocks.len();
            let g = |s: &str| params.require(&format!("block{i}.{s}"));
            blocks.push(BlockParams {
                norm_w: g("norm_w")?,
                w_in: g("w_in")?,
                w_x: g("w_x")?,
                w_dt: g("w_dt")?,
                b_dt: g("b_dt")?,
                a_log: g("a_log")?,
                d: g("d")?,
                w_out: g("w_out")?,
            });
        }
        let first = blocks.first().ok_or_else(|| Error::contract("no SSM blocks in parameters"))?;
        let d_model = embed.d_model;
        let di = params.get(first.w_in).cols() / 2;
        let n = params.get(first.a_log).cols();
        let r = params.get(first.w_dt).rows();
        if di % d_model != 0 {
            return Err(Error::dim("inner width is not a multiple of d_model"));
        }
        let config = ModelConfig {
            n_blocks: blocks.len(),
            d_model,
            d_state: n,
            expand: di / d_model,
            dt_rank: r,
            variant: embed.variant(),
        };
        for b in &blocks {
            let expect = [
                (b.norm_w, vec![d_model]),
                (b.w_in, vec![d_model, 2 * di]),
                (b.w_x, vec![di, r + 2 * n]),
                (b.w_dt, vec![r, di]),
                (b.b_dt, vec![di]),
                (b.a_log, vec![di, n]),
                (b.d, vec![di]),
                (b.w_out, vec![di, d_model]),
            ];
            for (id, shape) in expect {
                if params.get(id).shape() != shape.as_slice() {
                    return Err(Error::dim(format!("{} has unexpected shape", params.name(id))));
                }
            }
        }
        let final_norm = params.require("final_norm")?;
        Ok(SsmModel {
            config,
            params,
            embed,
            blocks,
            final_norm,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// One block over a whole `T × d_model` sequence.
    pub fn block_forward<'t>(
        &self,
        bound: &[Var<'t>],
        index: usize,
        x: &Var<'t>,
        h0: &Tensor,
    ) -> Result<(Var<'t>, Tensor, DeltaTrace)> {
        let p = self
            .blocks
            .get(index)
            .ok_or_else(|| Error::contract(format!("no block {index}")))?;
        let (di, n, r) = (self.config.d_inner(), self.config.d_state, self.config.dt_rank);
        let xn = x.rmsnorm(&bound[p.norm_w.0], NORM_EPS)?;
        let xz = xn.matmul(&bound[p.w_in.0])?;
        let u = xz.slice_cols(0, di)?.silu();
        let z = xz.slice_cols(di, di)?;
        let xdbl = u.matmul(&bound[p.w_x.0])?;
        let dt_low = xdbl.slice_cols(0, r)?;
        let b = xdbl.slice_cols(r, n)?;
        let c = xdbl.slice_cols(r + n, n)?;
        let delta = dt_low.matmul(&bound[p.w_dt.0])?.add(&bound[p.b_dt.0])?.softplus();
        let a = bound[p.a_log.0].exp().neg();
        let (y, h_final) = selective_scan(&u, &delta, &a, &b, &c, &bound[p.d.0], h0)?;
        let gated = y.mul(&z.silu())?;
        let out = gated.matmul(&bound[p.w_out.0])?.add(x)?;
        let dv = delta.value();
        let norms = (0..dv.rows())
            .map(|t| dv.row(t).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        Ok((out, h_final, DeltaTrace { block: index, norms }))
    }

    /// All blocks then the final norm, starting from zero state.
    /// Produces one output row per input row.
    pub fn forward_tokens<'t>(&self, bound: &[Var<'t>], x: &Var<'t>) -> Result<(Var<'t>, Vec<DeltaTrace>)> {
        if x.value().rank() != 2 || x.value().cols() != self.config.d_model {
            return Err(Error::dim(format!("tokens {:?} for d_model {}", x.shape(), self.config.d_model)));
        }
        let zeros = HiddenState::zeros(&self.config);
        let mut h = x.clone();
        let mut traces = Vec::with_capacity(self.blocks.len());
        for (i, h0) in zeros.blocks.iter().enumerate() {
            let (next, _, trace) = self.block_forward(bound, i, &h, h0)?;
            h = next;
            traces.push(trace);
        }
        Ok((h.rmsnorm(&bound[self.final_norm.0], NORM_EPS)?, traces))
    }

    /// Predicted patches (`V_Q × 16`) for the query segment of a sequence.
    pub fn predict_on_tape<'t>(&self, tape: &'t Tape, bound: &[Var<'t>], seq: &InputSequence) -> Result<Var<'t>> {
        let tokens = self.embed.embed_on_tape(tape, bound, seq)?;
        let (out, _) = self.forward_tokens(bound, &tokens)?;
        let q = seq.query_range();
        let rows = out.slice_rows(q.start, q.len())?;
        self.embed.head_on_tape(bound, &rows)
    }

    pub fn step_plan(&self) -> StepPlan {
        let (d, di, n, r) = (
            self.config.d_model,
            self.config.d_inner(),
            self.config.d_state,
            self.config.dt_rank,
        );
        StepPlan {
            a: self
                .blocks
                .iter()
                .map(|b| self.params.get(b.a_log).data().iter().map(|v| -v.exp()).collect())
                .collect(),
            xn: vec![0.0; d],
            xz: vec![0.0; 2 * di],
            u: vec![0.0; di],
            xdbl: vec![0.0; r + 2 * n],
            delta: vec![0.0; di],
            g: vec![0.0; di],
            out: vec![0.0; d],
        }
    }

    /// Advance every block by one token. Returns the final-normed output;
    /// when `deltas` is given, `‖delta‖₂` per block is appended to it.
    pub fn step(
        &self,
        plan: &mut StepPlan,
        token: &[f64],
        state: &mut HiddenState,
        mut deltas: Option<&mut Vec<f64>>,
    ) -> Result<Vec<f64>> {
        let cfg = &self.config;
        let (d, di, n, r) = (cfg.d_model, cfg.d_inner(), cfg.d_state, cfg.dt_rank);
        if token.len() != d {
            return Err(Error::dim(format!("token of length {} for d_model {d}", token.len())));
        }
        if state.blocks.len() != self.blocks.len()
            || state.blocks.iter().any(|h| h.shape() != [di, n])
        {
            return Err(Error::contract("hidden state does not match the model configuration"));
        }
        let mut x = token.to_vec();
        for (bi, p) in self.blocks.iter().enumerate() {
            rmsnorm_into(&x, self.params.get(p.norm_w).data(), &mut plan.xn);
            crate::tensor::vecmat_into(&plan.xn, self.params.get(p.w_in).data(), &mut plan.xz);
            for i in 0..di {
                plan.u[i] = silu(plan.xz[i]);
            }
            crate::tensor::vecmat_into(&plan.u, self.params.get(p.w_x).data(), &mut plan.xdbl);
            let w_dt = self.params.get(p.w_dt).data();
            let b_dt = self.params.get(p.b_dt).data();
            for i in 0..di {
                let mut s = b_dt[i];
                for k in 0..r {
                    s += plan.xdbl[k] * w_dt[k * di + i];
                }
                plan.delta[i] = softplus(s);
            }
            if let Some(ds) = deltas.as_deref_mut() {
                ds.push(plan.delta.iter().map(|v| v * v).sum::<f64>().sqrt());
            }
            let (bt, ct) = (&plan.xdbl[r..r + n], &plan.xdbl[r + n..r + 2 * n]);
            let a = &plan.a[bi];
            let dvec = self.params.get(p.d).data();
            let h = state.blocks[bi].data_mut();
            for i in 0..di {
                let du = plan.delta[i] * plan.u[i];
                let mut acc = 0.0;
                for j in 0..n {
                    let k = i * n + j;
                    h[k] = (plan.delta[i] * a[k]).exp() * h[k] + du * bt[j];
                    acc += ct[j] * h[k];
                }
                let y = acc + dvec[i] * plan.u[i];
                plan.g[i] = y * silu(plan.xz[di + i]);
            }
            crate::tensor::vecmat_into(&plan.g, self.params.get(p.w_out).data(), &mut plan.out);
            for (xv, o) in x.iter_mut().zip(&plan.out) {
                *xv += o;
            }
        }
        let mut y = vec![0.0; d];
        rmsnorm_into(&x, self.params.get(self.final_norm).data(), &mut y);
        Ok(y)
    }

    pub fn head(&self, out: &[f64]) -> Patch {
        self.embed.head(&self.params, out)
    }
}

fn rmsnorm_into(x: &[f64], w: &[f64], out: &mut [f64]) {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let denom = (ms + NORM_EPS).sqrt();
    let inv = if denom > 0.0 { 1.0 / denom } else { 0.0 };
    for ((o, &xv), &wv) in out.iter_mut().zip(x).zip(w) {
        *o = xv * inv * wv;
    }
}
