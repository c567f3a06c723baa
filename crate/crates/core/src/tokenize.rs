//! Patch-sequence tokenization and reconstruction assembly.
//!
//! Images are cut into 4×4 patches at random lattice positions. An image
//! token is a linear embedding of the 16 pixels concatenated with the
//! normalized patch center. Query tokens are an affine map of a target
//! center. The model answers each query with 16 pixel values.

use rand::Rng;

use crate::data::GrayImage;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub const PATCH_SIDE: usize = 4;
pub const PATCH_LEN: usize = PATCH_SIDE * PATCH_SIDE;
/// Length that maps to 1.0 in the prepended length token.
pub const MAX_DECLARED_LEN: usize = 65_536;

pub type Patch = [f64; PATCH_LEN];

/// Whether sequences start with a token that encodes the image-token count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Variant {
    #[default]
    Default,
    Prepended,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Default => "default",
            Variant::Prepended => "prepended",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Variant::Default),
            "prepended" => Ok(Variant::Prepended),
            other => Err(Error::Config(format!("unknown model variant {other:?}"))),
        }
    }
}

/// Normalized patch-center coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Location {
    pub cx: f64,
    pub cy: f64,
}

impl Location {
    /// Center of the window whose top-left pixel is `(row0, col0)`.
    pub fn of_window(side: usize, row0: usize, col0: usize) -> Self {
        let s = side as f64;
        Location {
            cx: (col0 as f64 + 2.0) / s,
            cy: (row0 as f64 + 2.0) / s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchSample {
    /// Row-major 4×4 pixels.
    pub pixels: Patch,
    pub row0: usize,
    pub col0: usize,
    pub loc: Location,
}

/// Number of valid top-left positions along one axis.
pub fn positions_per_axis(side: usize) -> usize {
    side + 1 - PATCH_SIDE
}

fn check_side(side: usize) -> Result<()> {
    if side < PATCH_SIDE || side % PATCH_SIDE != 0 {
        return Err(Error::contract(format!(
            "image side {side} must be a positive multiple of {PATCH_SIDE}"
        )));
    }
    Ok(())
}

pub fn patch_at(img: &GrayImage, row0: usize, col0: usize) -> PatchSample {
    let mut pixels = [0.0; PATCH_LEN];
    for r in 0..PATCH_SIDE {
        for c in 0..PATCH_SIDE {
            pixels[r * PATCH_SIDE + c] = img.get(row0 + r, col0 + c);
        }
    }
    PatchSample {
        pixels,
        row0,
        col0,
        loc: Location::of_window(img.side(), row0, col0),
    }
}

/// `count` patches with uniformly drawn top-left corners; duplicates allowed.
pub fn sample_patches<R: Rng>(img: &GrayImage, count: usize, rng: &mut R) -> Result<Vec<PatchSample>> {
    let n = positions_per_axis(img.side());
    sample_patches_in(img, count, (0, n), (0, n), rng)
}

/// Like [`sample_patches`] with top-left rows and columns drawn from the
/// half-open ranges given.
pub fn sample_patches_in<R: Rng>(
    img: &GrayImage,
    count: usize,
    rows: (usize, usize),
    cols: (usize, usize),
    rng: &mut R,
) -> Result<Vec<PatchSample>> {
    if count == 0 {
        return Err(Error::contract("patch count must be >= 1"));
    }
    check_side(img.side())?;
    let n = positions_per_axis(img.side());
    if rows.0 >= rows.1 || cols.0 >= cols.1 || rows.1 > n || cols.1 > n {
        return Err(Error::contract("empty or out-of-image sampling region"));
    }
    Ok((0..count)
        .map(|_| {
            let r = rng.gen_range(rows.0..rows.1);
            let c = rng.gen_range(cols.0..cols.1);
            patch_at(img, r, c)
        })
        .collect())
}

/// Random query targets on the lattice of valid window centers.
pub fn random_locations<R: Rng>(side: usize, count: usize, rng: &mut R) -> Vec<Location> {
    let n = positions_per_axis(side);
    (0..count)
        .map(|_| Location::of_window(side, rng.gen_range(0..n), rng.gen_range(0..n)))
        .collect()
}

/// Dense non-overlapping grid of window centers, row-major over cells.
pub fn grid_locations(side: usize) -> Vec<Location> {
    let cells = side / PATCH_SIDE;
    (0..cells * cells)
        .map(|i| Location::of_window(side, (i / cells) * PATCH_SIDE, (i % cells) * PATCH_SIDE))
        .collect()
}

const LATTICE_TOL: f64 = 1e-9;

fn lattice_index(side: usize, coord: f64) -> f64 {
    coord * side as f64 - 2.0
}

/// Top-left corner of the nearest valid window.
pub fn snap_to_lattice(side: usize, loc: Location) -> (usize, usize) {
    let max = (positions_per_axis(side) - 1) as f64;
    let r = lattice_index(side, loc.cy).round().clamp(0.0, max) as usize;
    let c = lattice_index(side, loc.cx).round().clamp(0.0, max) as usize;
    (r, c)
}

/// The 16 true pixels at an exact lattice location.
pub fn extract_ground_truth(img: &GrayImage, loc: Location) -> Result<Patch> {
    let side = img.side();
    let (r, c) = snap_to_lattice(side, loc);
    let exact = Location::of_window(side, r, c);
    let off = ((exact.cx - loc.cx) * side as f64).abs().max(((exact.cy - loc.cy) * side as f64).abs());
    if off > LATTICE_TOL {
        return Err(Error::contract(format!(
            "location ({}, {}) is not a valid window center",
            loc.cx, loc.cy
        )));
    }
    Ok(patch_at(img, r, c).pixels)
}

/// Ground truth for arbitrary locations via nearest-window snapping.
pub fn extract_ground_truth_snapped(img: &GrayImage, loc: Location) -> Patch {
    let (r, c) = snap_to_lattice(img.side(), loc);
    patch_at(img, r, c).pixels
}

/// Paste predicted patches for the dense grid into an image, clamping.
pub fn assemble_reconstruction(side: usize, tokens: &[(Location, Patch)]) -> Result<GrayImage> {
    check_side(side)?;
    let cells = side / PATCH_SIDE;
    if tokens.len() != cells * cells {
        return Err(Error::contract(format!(
            "{} tokens for a {cells}x{cells} grid",
            tokens.len()
        )));
    }
    let mut seen = vec![false; cells * cells];
    let mut px = vec![0.0; side * side];
    for (loc, patch) in tokens {
        let (r, c) = snap_to_lattice(side, *loc);
        let exact = Location::of_window(side, r, c);
        if r % PATCH_SIDE != 0
            || c % PATCH_SIDE != 0
            || (exact.cx - loc.cx).abs() > LATTICE_TOL
            || (exact.cy - loc.cy).abs() > LATTICE_TOL
        {
            return Err(Error::contract(format!(
                "location ({}, {}) is not a grid cell",
                loc.cx, loc.cy
            )));
        }
        let cell = (r / PATCH_SIDE) * cells + c / PATCH_SIDE;
        if std::mem::replace(&mut seen[cell], true) {
            return Err(Error::contract("grid cell given twice"));
        }
        for dr in 0..PATCH_SIDE {
            for dc in 0..PATCH_SIDE {
                px[(r + dr) * side + c + dc] = patch[dr * PATCH_SIDE + dc];
            }
        }
    }
    GrayImage::from_unclamped(side, px)
}

/// Scalar fed to the length projection: log2(len) / log2(65536).
pub fn length_scalar(declared_len: usize) -> f64 {
    (declared_len as f64).log2() / (MAX_DECLARED_LEN as f64).log2()
}

/// Token layout: optional length token, image tokens, separator, queries.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSequence {
    pub length_input: Option<f64>,
    pub patches: Vec<PatchSample>,
    pub queries: Vec<Location>,
}

impl InputSequence {
    fn lead(&self) -> usize {
        self.length_input.is_some() as usize
    }

    pub fn len(&self) -> usize {
        self.lead() + self.patches.len() + 1 + self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn image_range(&self) -> std::ops::Range<usize> {
        self.lead()..self.lead() + self.patches.len()
    }

    pub fn separator_index(&self) -> usize {
        self.lead() + self.patches.len()
    }

    pub fn query_range(&self) -> std::ops::Range<usize> {
        let s = self.separator_index() + 1;
        s..s + self.queries.len()
    }
}

pub fn build_sequence(
    patches: Vec<PatchSample>,
    queries: Vec<Location>,
    variant: Variant,
    declared_len: Option<usize>,
) -> Result<InputSequence> {
    let length_input = match (variant, declared_len) {
        (Variant::Default, _) => None,
        (Variant::Prepended, Some(n)) if n >= 1 => Some(length_scalar(n)),
        (Variant::Prepended, _) => {
            return Err(Error::contract("prepended variant needs a declared length >= 1"))
        }
    };
    Ok(InputSequence {
        length_input,
        patches,
        queries,
    })
}

fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).unwrap()
}

/// Parameters shared by both model families: input embeddings and the
/// reconstruction head.
#[derive(Debug, Clone)]
pub struct Embedder {
    pub d_model: usize,
    w_patch: ParamId,
    b_patch: ParamId,
    sep: ParamId,
    w_query: ParamId,
    b_query: ParamId,
    length: Option<(ParamId, ParamId)>,
    w_head: ParamId,
    b_head: ParamId,
}

impl Embedder {
    pub fn init<R: Rng>(store: &mut ParamStore, d_model: usize, variant: Variant, rng: &mut R) -> Result<Self> {
        if d_model < 3 {
            return Err(Error::contract("d_model must leave room for two coordinates"));
        }
        let e = d_model - 2;
        let w_patch = store.insert("embed.w_patch", uniform(rng, &[PATCH_LEN, e], 0.25))?;
        let b_patch = store.insert("embed.b_patch", Tensor::zeros(&[e]))?;
        let sep = store.insert("embed.sep", uniform(rng, &[d_model], 1.0))?;
        let w_query = store.insert("embed.w_query", uniform(rng, &[2, d_model], 1.0 / 2f64.sqrt()))?;
        let b_query = store.insert("embed.b_query", uniform(rng, &[d_model], 1.0 / 2f64.sqrt()))?;
        let length = match variant {
            Variant::Default => None,
            // Filled by `init_length_token` once every shared parameter has
            // been drawn, so both variants share them under one seed.
            Variant::Prepended => Some((
                store.insert("embed.w_len", Tensor::zeros(&[1, d_model]))?,
                store.insert("embed.b_len", Tensor::zeros(&[d_model]))?,
            )),
        };
        let hb = 1.0 / (d_model as f64).sqrt();
        let w_head = store.insert("head.w", uniform(rng, &[d_model, PATCH_LEN], hb))?;
        let b_head = store.insert("head.b", Tensor::zeros(&[PATCH_LEN]))?;
        Ok(Embedder {
            d_model,
            w_patch,
            b_patch,
            sep,
            w_query,
            b_query,
            length,
            w_head,
            b_head,
        })
    }

    /// Recover handles from a loaded store.
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let sep = store.require("embed.sep")?;
        let d_model = store.get(sep).len();
        let length = match (store.id("embed.w_len"), store.id("embed.b_len")) {
            (Some(w), Some(b)) => Some((w, b)),
            (None, None) => None,
            _ => return Err(Error::contract("incomplete length-token parameters")),
        };
        let e = Embedder {
            d_model,
            w_patch: store.require("embed.w_patch")?,
            b_patch: store.require("embed.b_patch")?,
            sep,
            w_query: store.require("embed.w_query")?,
            b_query: store.require("embed.b_query")?,
            length,
            w_head: store.require("head.w")?,
            b_head: store.require("head.b")?,
        };
        let expect = [
            (e.w_patch, vec![PATCH_LEN, d_model - 2]),
            (e.b_patch, vec![d_model - 2]),
            (e.w_query, vec![2, d_model]),
            (e.b_query, vec![d_model]),
            (e.w_head, vec![d_model, PATCH_LEN]),
            (e.b_head, vec![PATCH_LEN]),
        ];
        for (id, shape) in expect {
            if store.get(id).shape() != shape.as_slice() {
                return Err(Error::dim(format!("{} has unexpected shape", store.name(id))));
            }
        }
        Ok(e)
    }

    pub fn variant(&self) -> Variant {
        if self.length.is_some() {
            Variant::Prepended
        } else {
            Variant::Default
        }
    }

    fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
        let n = w.cols();
        let mut out = b.data().to_vec();
        for (p, &xv) in x.iter().enumerate() {
            for (o, &wv) in out.iter_mut().zip(&w.data()[p * n..(p + 1) * n]) {
                *o += xv * wv;
            }
        }
        out
    }

    /// `concat(W_patch · pixels + b, cx, cy)`.
    pub fn image_token(&self, store: &ParamStore, p: &PatchSample) -> Vec<f64> {
        let mut t = Self::affine(&p.pixels, store.get(self.w_patch), store.get(self.b_patch));
        t.push(p.loc.cx);
        t.push(p.loc.cy);
        t
    }

    pub fn query_token(&self, store: &ParamStore, loc: Location) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&loc.cx) || !(0.0..=1.0).contains(&loc.cy) {
            return Err(Error::contract(format!(
                "query coordinates ({}, {}) outside [0, 1]",
                loc.cx, loc.cy
            )));
        }
        Ok(Self::affine(&[loc.cx, loc.cy], store.get(self.w_query), store.get(self.b_query)))
    }

    pub fn separator(&self, store: &ParamStore) -> Vec<f64> {
        store.get(self.sep).data().to_vec()
    }

    pub fn init_length_token<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        if let Some((w, b)) = self.length {
            *store.get_mut(w) = uniform(rng, &[1, self.d_model], 1.0);
            *store.get_mut(b) = uniform(rng, &[self.d_model], 1.0);
        }
    }

    pub fn length_token(&self, store: &ParamStore, declared_len: usize) -> Result<Vec<f64>> {
        let (w, b) = self
            .length
            .ok_or_else(|| Error::contract("model has no length token"))?;
        Ok(Self::affine(&[length_scalar(declared_len)], store.get(w), store.get(b)))
    }

    pub fn head(&self, store: &ParamStore, x: &[f64]) -> Patch {
        let v = Self::affine(x, store.get(self.w_head), store.get(self.b_head));
        v.try_into().expect("head emits 16 values")
    }

    /// Embedded sequence as an `L × d_model` matrix on the tape.
    pub fn embed_on_tape<'t>(&self, tape: &'t Tape, bound: &[Var<'t>], seq: &InputSequence) -> Result<Var<'t>> {
        let d = self.d_model;
        let mut parts = Vec::with_capacity(4);
        match (seq.length_input, self.length) {
            (Some(s), Some((w, b))) => {
                let x = tape.constant(Tensor::new(&[1, 1], vec![s])?);
                parts.push(x.matmul(&bound[w.0])?.add(&bound[b.0])?);
            }
            (None, None) => {}
            _ => return Err(Error::contract("sequence and model disagree on the length token")),
        }
        if !seq.patches.is_empty() {
            let n = seq.patches.len();
            let px: Vec<f64> = seq.patches.iter().flat_map(|p| p.pixels).collect();
            let coords: Vec<f64> = seq.patches.iter().flat_map(|p| [p.loc.cx, p.loc.cy]).collect();
            let px = tape.constant(Tensor::new(&[n, PATCH_LEN], px)?);
            let emb = px.matmul(&bound[self.w_patch.0])?.add(&bound[self.b_patch.0])?;
            let coords = tape.constant(Tensor::new(&[n, 2], coords)?);
            parts.push(Var::concat_cols(&[emb, coords])?);
        }
        parts.push(bound[self.sep.0].reshape(&[1, d])?);
        if !seq.queries.is_empty() {
            let q: Vec<f64> = seq.queries.iter().flat_map(|l| [l.cx, l.cy]).collect();
            let q = tape.constant(Tensor::new(&[seq.queries.len(), 2], q)?);
            parts.push(q.matmul(&bound[self.w_query.0])?.add(&bound[self.b_query.0])?);
        }
        Var::concat_rows(&parts)
    }

    /// Apply the reconstruction head to rows of `x`.
    pub fn head_on_tape<'t>(&self, bound: &[Var<'t>], x: &Var<'t>) -> Result<Var<'t>> {
        x.matmul(&bound[self.w_head.0])?.add(&bound[self.b_head.0])
    }
}

/// Ground-truth patches for a set of lattice locations as a `n × 16` tensor.
pub fn target_tensor(img: &GrayImage, locs: &[Location]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(locs.len() * PATCH_LEN);
    for &l in locs {
        data.extend_from_slice(&extract_ground_truth(img, l)?);
    }
    Tensor::new(&[locs.len(), PATCH_LEN], data)
}

/// Dataset-wide mean 4×4 patch, estimated from `n_samples` random patches
/// drawn over uniformly chosen images.
pub fn mean_patch_baseline<R: Rng>(images: &[GrayImage], n_samples: usize, rng: &mut R) -> Result<Patch> {
    if images.is_empty() {
        return Err(Error::contract("mean patch of an empty dataset"));
    }
    if n_samples == 0 {
        return Err(Error::contract("mean patch needs at least one sample"));
    }
    let mut acc = [0.0; PATCH_LEN];
    for _ in 0..n_samples {
        let img = &images[rng.gen_range(0..images.len())];
        let n = positions_per_axis(img.side());
        let p = patch_at(img, rng.gen_range(0..n), rng.gen_range(0..n));
        for (a, v) in acc.iter_mut().zip(p.pixels) {
            *a += v;
        }
    }
    Ok(acc.map(|a| a / n_samples as f64))
}

/// Running-mean MSE of a constant patch prediction over image/location pairs.
pub fn constant_prediction_mse(pred: &Patch, samples: &[(&GrayImage, Location)]) -> Result<f64> {
    let mut mean = 0.0;
    let mut k = 0usize;
    for (img, loc) in samples {
        let truth = extract_ground_truth(img, *loc)?;
        for (p, t) in pred.iter().zip(truth) {
            k += 1;
            mean += ((p - t) * (p - t) - mean) / k as f64;
        }
    }
    Ok(mean)
}
