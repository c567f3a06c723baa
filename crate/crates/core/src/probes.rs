//! Probing experiments over a single token stream: mid-sequence
//! snapshots, quadrant scan order, image switching, error at observed
//! locations and Δ-norm traces. Also the training-variant rewrites.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{pgm, GrayImage};
use crate::error::{Error, Result};
use crate::eval::{patch_mse, Session};
use crate::model::Model;
use crate::tokenize::{
    assemble_reconstruction, grid_locations, positions_per_axis, sample_patches, sample_patches_in, Location,
    Variant,
};
use crate::train::batch_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    /// Image tokens observed when the snapshot was taken.
    pub t: usize,
    pub image: GrayImage,
}

/// In-memory probe result; [`ProbeReport::write`] lays it out on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub probe: String,
    pub csv: String,
    pub snapshots: Vec<Snapshot>,
}

impl ProbeReport {
    /// Write `<root>/<probe>/<model_id>/{report.csv, snap_t<k>.pgm, config.txt}`
    /// and return the directory.
    pub fn write(&self, root: &Path, model_id: &str, config_text: &str) -> Result<PathBuf> {
        let dir = root.join(&self.probe).join(model_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let put = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        put("report.csv", self.csv.as_bytes())?;
        put("config.txt", config_text.as_bytes())?;
        for s in &self.snapshots {
            pgm::write(&dir.join(format!("snap_t{}.pgm", s.t)), &s.image)?;
        }
        Ok(dir)
    }
}

/// Dense-grid reconstruction from the session's current state.
pub fn reconstruct(session: &Session, side: usize) -> Result<GrayImage> {
    let locs = grid_locations(side);
    let preds = session.query(&locs)?;
    assemble_reconstruction(side, &locs.into_iter().zip(preds).collect::<Vec<_>>())
}

/// Powers of two up to `max`, then `max` itself.
pub fn log_schedule(max: usize) -> Vec<usize> {
    let mut v: Vec<usize> = std::iter::successors(Some(1usize), |&t| t.checked_mul(2))
        .take_while(|&t| t <= max)
        .collect();
    if max >= 1 && v.last() != Some(&max) {
        v.push(max);
    }
    v
}

fn check_ascending(ts: &[usize]) -> Result<()> {
    if ts.is_empty() || ts[0] == 0 || ts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract("checkpoints must be nonempty, positive and strictly ascending"));
    }
    Ok(())
}

/// Stream `stream_len` random patches of `img`, snapshotting a dense
/// reconstruction after each of `checkpoints` tokens.
/// CSV: `t,mse` against the original image.
pub fn snapshot_reconstructions(
    model: &Model,
    img: &GrayImage,
    checkpoints: &[usize],
    stream_len: usize,
    seed: u64,
) -> Result<ProbeReport> {
    check_ascending(checkpoints)?;
    if *checkpoints.last().unwrap() > stream_len {
        return Err(Error::contract(format!("checkpoint beyond stream length {stream_len}")));
    }
    let patches = sample_patches(img, stream_len, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut s = Session::new(model, img, Some(stream_len))?;
    let mut csv = String::from("t,mse\n");
    let mut snapshots = Vec::new();
    let mut next = checkpoints.iter().peekable();
    for p in &patches {
        s.observe(p)?;
        if next.peek() == Some(&&s.observed()) {
            next.next();
            let image = reconstruct(&s, img.side())?;
            writeln!(csv, "{},{:e}", s.observed(), image.mse(img)).unwrap();
            snapshots.push(Snapshot { t: s.observed(), image });
        }
    }
    Ok(ProbeReport {
        probe: "snapshots".into(),
        csv,
        snapshots,
    })
}

/// The image shrunk to half size in the top-left quadrant, background
/// elsewhere.
pub fn top_left_only(img: &GrayImage) -> GrayImage {
    let side = img.side();
    let half = img.resize(side / 2);
    let mut out = GrayImage::blank(side);
    for r in 0..side / 2 {
        for c in 0..side / 2 {
            out.set(r, c, half.get(r, c));
        }
    }
    out
}

/// Top-left corner ranges of windows lying inside quadrant `q`
/// (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right).
fn quadrant_ranges(side: usize, q: usize) -> ((usize, usize), (usize, usize)) {
    let half = side / 2;
    let n = positions_per_axis(side);
    let axis = |upper: bool| if upper { (0, half - 3) } else { (half, n) };
    (axis(q < 2), axis(q % 2 == 0))
}

/// Stream `tokens_per_quadrant` patches from each quadrant in `order`,
/// snapshotting after each quadrant. Each quadrant's patches depend only
/// on the seed and the quadrant, so orders differ only in sequence.
/// CSV: `t,quadrant,mse`.
pub fn probe_quadrant_order(
    model: &Model,
    img: &GrayImage,
    order: [usize; 4],
    tokens_per_quadrant: usize,
    seed: u64,
) -> Result<ProbeReport> {
    let mut sorted = order;
    sorted.sort_unstable();
    if sorted != [0, 1, 2, 3] {
        return Err(Error::contract(format!("{order:?} is not a permutation of the quadrants")));
    }
    if img.side() < 16 {
        return Err(Error::contract("quadrant probe needs images of side >= 16"));
    }
    let mut s = Session::new(model, img, Some(4 * tokens_per_quadrant))?;
    let mut csv = String::from("t,quadrant,mse\n");
    let mut snapshots = Vec::new();
    for q in order {
        let (rows, cols) = quadrant_ranges(img.side(), q);
        let mut rng = ChaCha8Rng::seed_from_u64(batch_seed(seed, q));
        s.observe_all(&sample_patches_in(img, tokens_per_quadrant, rows, cols, &mut rng)?)?;
        let image = reconstruct(&s, img.side())?;
        writeln!(csv, "{},{q},{:e}", s.observed(), image.mse(img)).unwrap();
        snapshots.push(Snapshot { t: s.observed(), image });
    }
    Ok(ProbeReport {
        probe: "quadrants".into(),
        csv,
        snapshots,
    })
}

/// Default switch schedule: powers of two through `2 · tokens_each`, plus
/// the switch point.
pub fn switch_schedule(tokens_each: usize) -> Vec<usize> {
    let set: BTreeSet<usize> = log_schedule(2 * tokens_each).into_iter().chain([tokens_each]).collect();
    set.into_iter().collect()
}

/// Stream `tokens_each` patches of `img1`, then `tokens_each` of `img2`.
/// CSV: `t,mse_img1,mse_img2` of each snapshot against both images.
pub fn probe_image_switch(
    model: &Model,
    img1: &GrayImage,
    img2: &GrayImage,
    tokens_each: usize,
    schedule: &[usize],
    seed: u64,
) -> Result<ProbeReport> {
    if tokens_each == 0 {
        return Err(Error::contract("tokens_each must be >= 1"));
    }
    if img1.side() != img2.side() {
        return Err(Error::contract("switch images differ in size"));
    }
    check_ascending(schedule)?;
    if *schedule.last().unwrap() > 2 * tokens_each {
        return Err(Error::contract("schedule runs past the stream"));
    }
    let phase = |img: &GrayImage, k: usize| sample_patches(img, tokens_each, &mut ChaCha8Rng::seed_from_u64(batch_seed(seed, k)));
    let (first, second) = (phase(img1, 1)?, phase(img2, 2)?);
    let mut s = Session::new(model, img1, Some(2 * tokens_each))?;
    let mut csv = String::from("t,mse_img1,mse_img2\n");
    let mut snapshots = Vec::new();
    let mut next = schedule.iter().peekable();
    for (i, p) in first.iter().chain(&second).enumerate() {
        if i == tokens_each {
            s.set_source(img2);
        }
        s.observe(p)?;
        if next.peek() == Some(&&s.observed()) {
            next.next();
            let image = reconstruct(&s, img1.side())?;
            writeln!(csv, "{},{:e},{:e}", s.observed(), image.mse(img1), image.mse(img2)).unwrap();
            snapshots.push(Snapshot { t: s.observed(), image });
        }
    }
    Ok(ProbeReport {
        probe: "switch".into(),
        csv,
        snapshots,
    })
}

/// Stream `vi` patches; at each point of the log schedule query exactly
/// the lattice positions seen so far. CSV: `t,observed_mse,n_locations`.
pub fn probe_observed_mse(model: &Model, img: &GrayImage, vi: usize, seed: u64) -> Result<ProbeReport> {
    let patches = sample_patches(img, vi, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let schedule = log_schedule(vi);
    let mut s = Session::new(model, img, Some(vi))?;
    let mut seen = BTreeSet::new();
    let mut csv = String::from("t,observed_mse,n_locations\n");
    let mut next = schedule.iter().peekable();
    for p in &patches {
        s.observe(p)?;
        seen.insert((p.row0, p.col0));
        if next.peek() == Some(&&s.observed()) {
            next.next();
            let locs: Vec<Location> = seen
                .iter()
                .map(|&(r, c)| Location::of_window(img.side(), r, c))
                .collect();
            let mse = patch_mse(img, &locs, &s.query(&locs)?)?;
            writeln!(csv, "{},{:e},{}", s.observed(), mse, locs.len()).unwrap();
        }
    }
    Ok(ProbeReport {
        probe: "observed".into(),
        csv,
        snapshots: Vec::new(),
    })
}

/// Averaged ‖Δ_t‖₂ traces, indexed `[vi][block][t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaTraces {
    pub vi_list: Vec<usize>,
    pub mean: Vec<Vec<Vec<f64>>>,
    /// Monte-Carlo standard error of each mean.
    pub se: Vec<Vec<Vec<f64>>>,
    pub n_sequences: usize,
}

impl DeltaTraces {
    /// `block,t,vi,delta_norm`, ordered by block, then t, then V_I.
    pub fn csv(&self) -> String {
        let mut s = String::from("block,t,vi,delta_norm\n");
        let (n_blocks, horizon) = (self.mean[0].len(), self.mean[0][0].len());
        for b in 0..n_blocks {
            for t in 0..horizon {
                for (k, vi) in self.vi_list.iter().enumerate() {
                    writeln!(s, "{b},{t},{vi},{:e}", self.mean[k][b][t]).unwrap();
                }
            }
        }
        s
    }

    pub fn report(&self) -> ProbeReport {
        ProbeReport {
            probe: "delta".into(),
            csv: self.csv(),
            snapshots: Vec::new(),
        }
    }

    /// Largest |mean(a) − mean(b)| over t for `block`, and the largest
    /// ratio of that difference to its standard error
    /// `sqrt(se_a² + se_b²)`.
    pub fn max_difference(&self, block: usize, a: usize, b: usize) -> (f64, f64) {
        self.max_difference_from(block, a, b, 0)
    }

    /// As [`Self::max_difference`] over `t >= from`; `from = 1` skips the
    /// length token of the prepended variant.
    pub fn max_difference_from(&self, block: usize, a: usize, b: usize, from: usize) -> (f64, f64) {
        let (ma, mb) = (&self.mean[a][block], &self.mean[b][block]);
        let (sa, sb) = (&self.se[a][block], &self.se[b][block]);
        let mut worst = (0.0f64, 0.0f64);
        for t in from..ma.len() {
            let d = (ma[t] - mb[t]).abs();
            let se = (sa[t] * sa[t] + sb[t] * sb[t]).sqrt();
            let z = if se > 0.0 { d / se } else if d > 0.0 { f64::INFINITY } else { 0.0 };
            worst = (worst.0.max(d), worst.1.max(z));
        }
        worst
    }
}

/// ‖Δ_t‖₂ per block over the first `t_horizon` stream tokens (the length
/// token included, for the prepended variant), averaged over `n_sequences`
/// sequences of declared length V_I drawn round-robin from `images`.
/// Tokens after the horizon cannot affect Δ_t, so they are not fed.
pub fn probe_delta_norms(
    model: &Model,
    images: &[GrayImage],
    vi_list: &[usize],
    t_horizon: usize,
    n_sequences: usize,
    seed: u64,
) -> Result<DeltaTraces> {
    let Model::Ssm(m) = model else {
        return Err(Error::Unsupported(format!("{} model has no Δ", model.kind().as_str())));
    };
    if images.is_empty() || vi_list.is_empty() || t_horizon == 0 || n_sequences < 2 {
        return Err(Error::contract("delta probe needs images, V_I values, a horizon and >= 2 sequences"));
    }
    let lead = (m.config.variant == Variant::Prepended) as usize;
    let n_blocks = m.config.n_blocks;
    let mut mean = Vec::new();
    let mut se = Vec::new();
    for &vi in vi_list {
        if vi + lead < t_horizon {
            return Err(Error::contract(format!("V_I={vi} is shorter than the horizon")));
        }
        let mut sum = vec![vec![0.0; t_horizon]; n_blocks];
        let mut sq = sum.clone();
        for j in 0..n_sequences {
            let img = &images[j % images.len()];
            let mut rng = ChaCha8Rng::seed_from_u64(batch_seed(batch_seed(seed, vi), j));
            let patches = sample_patches(img, t_horizon - lead, &mut rng)?;
            let mut s = Session::with_delta_log(model, img, Some(vi))?;
            s.observe_all(&patches)?;
            for (b, trace) in s.delta_log().unwrap().iter().enumerate() {
                for (t, &d) in trace.iter().enumerate() {
                    sum[b][t] += d;
                    sq[b][t] += d * d;
                }
            }
        }
        let n = n_sequences as f64;
        let mu: Vec<Vec<f64>> = sum.iter().map(|r| r.iter().map(|x| x / n).collect()).collect();
        let err = mu
            .iter()
            .zip(&sq)
            .map(|(mr, qr)| {
                mr.iter()
                    .zip(qr)
                    .map(|(m, q)| ((q / n - m * m).max(0.0) * n / (n - 1.0) / n).sqrt())
                    .collect()
            })
            .collect();
        mean.push(mu);
        se.push(err);
    }
    Ok(DeltaTraces {
        vi_list: vi_list.to_vec(),
        mean,
        se,
        n_sequences,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingVariant {
    Default,
    Truncated,
    Expanded,
    Prepended,
}

impl TrainingVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(TrainingVariant::Default),
            "truncated" => Ok(TrainingVariant::Truncated),
            "expanded" => Ok(TrainingVariant::Expanded),
            "prepended" => Ok(TrainingVariant::Prepended),
            _ => Err(Error::Config(format!("unknown training variant {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainingVariant::Default => "default",
            TrainingVariant::Truncated => "truncated",
            TrainingVariant::Expanded => "expanded",
            TrainingVariant::Prepended => "prepended",
        }
    }
}

/// Factor applied to T_I_max by the expanded variant.
pub const EXPAND_FACTOR: usize = 64;
/// Epochs are divided by this for the expanded variant to keep the token
/// budget in the same range.
pub const EXPAND_EPOCH_DIVISOR: usize = 16;

/// Rewrite a run for one of the length-generalization variants.
pub fn make_variant_config(base: &RunConfig, variant: TrainingVariant) -> Result<RunConfig> {
    base.validate()?;
    let mut c = base.clone();
    match variant {
        TrainingVariant::Default => {}
        TrainingVariant::Truncated => c.train.t_i_min = (c.train.t_i_max / 2).max(1),
        TrainingVariant::Expanded => {
            c.train.t_i_max *= EXPAND_FACTOR;
            c.train.epochs = c.train.epochs.div_ceil(EXPAND_EPOCH_DIVISOR);
        }
        TrainingVariant::Prepended => c.ssm.variant = Variant::Prepended,
    }
    c.validate()?;
    Ok(c)
}
