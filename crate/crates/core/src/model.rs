//! Model kinds behind one type, and their checkpoint files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::ssm::SsmModel;
use crate::tensor::{read_checkpoint, write_checkpoint, ParamStore, Tape, Tensor, Var};
use crate::tokenize::{InputSequence, Patch, Variant, PATCH_LEN};
use crate::transformer::TransformerModel;

const META_KIND: &str = "meta.kind";
const META_HEADS: &str = "meta.n_heads";
const META_MEAN: &str = "meta.mean_patch";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Ssm,
    Transformer,
    Oracle,
    MeanPatch,
}

impl ModelKind {
    fn code(self) -> f64 {
        match self {
            ModelKind::Ssm => 0.0,
            ModelKind::Transformer => 1.0,
            ModelKind::Oracle => 2.0,
            ModelKind::MeanPatch => 3.0,
        }
    }

    fn from_code(c: f64) -> Option<Self> {
        [ModelKind::Ssm, ModelKind::Transformer, ModelKind::Oracle, ModelKind::MeanPatch]
            .into_iter()
            .find(|k| k.code() == c)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Ssm => "ssm",
            ModelKind::Transformer => "transformer",
            ModelKind::Oracle => "oracle",
            ModelKind::MeanPatch => "mean-patch",
        }
    }
}

/// A reconstructor. `Oracle` answers from the source image and
/// `MeanPatch` always predicts the same patch; both exist for tests and
/// baselines and cannot be trained.
#[derive(Debug, Clone)]
pub enum Model {
    Ssm(SsmModel),
    Transformer(TransformerModel),
    Oracle,
    MeanPatch(Patch),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Ssm(_) => ModelKind::Ssm,
            Model::Transformer(_) => ModelKind::Transformer,
            Model::Oracle => ModelKind::Oracle,
            Model::MeanPatch(_) => ModelKind::MeanPatch,
        }
    }

    pub fn variant(&self) -> Variant {
        match self {
            Model::Ssm(m) => m.config.variant,
            _ => Variant::Default,
        }
    }

    pub fn params(&self) -> Option<&ParamStore> {
        match self {
            Model::Ssm(m) => Some(&m.params),
            Model::Transformer(m) => Some(&m.params),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut ParamStore> {
        match self {
            Model::Ssm(m) => Some(&mut m.params),
            Model::Transformer(m) => Some(&mut m.params),
            _ => None,
        }
    }

    /// Query-segment predictions on a tape, for training.
    pub fn predict_on_tape<'t>(&self, tape: &'t Tape, bound: &[Var<'t>], seq: &InputSequence) -> Result<Var<'t>> {
        match self {
            Model::Ssm(m) => m.predict_on_tape(tape, bound, seq),
            Model::Transformer(m) => m.predict_on_tape(tape, bound, seq),
            _ => Err(Error::Unsupported(format!("{} has no trainable forward", self.kind().as_str()))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let kind = Tensor::scalar(self.kind().code());
        let mut entries: Vec<(&str, &Tensor)> = vec![(META_KIND, &kind)];
        let heads;
        let mean;
        match self {
            Model::Ssm(m) => entries.extend(m.params.iter()),
            Model::Transformer(m) => {
                heads = Tensor::scalar(m.config.n_heads as f64);
                entries.push((META_HEADS, &heads));
                entries.extend(m.params.iter());
            }
            Model::Oracle => {}
            Model::MeanPatch(p) => {
                mean = Tensor::vector(p.to_vec());
                entries.push((META_MEAN, &mean));
            }
        }
        write_checkpoint(path, entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries = read_checkpoint(path)?;
        let bad = |msg: &str| Error::format(path, msg);
        let mut kind = None;
        let mut heads = None;
        let mut mean = None;
        let mut rest = Vec::with_capacity(entries.len());
        for (name, t) in entries {
            match name.as_str() {
                META_KIND => kind = Some(t.data()[0]),
                META_HEADS => heads = Some(t.data()[0]),
                META_MEAN => mean = Some(t),
                n if n.starts_with("meta.") => return Err(bad(&format!("unknown metadata record {n}"))),
                _ => rest.push((name, t)),
            }
        }
        let kind = ModelKind::from_code(kind.ok_or_else(|| bad("missing meta.kind"))?)
            .ok_or_else(|| bad("unknown model kind"))?;
        let wrap = |e: Error| match e {
            Error::Format { .. } | Error::Io { .. } => e,
            other => Error::format(path, other.to_string()),
        };
        match kind {
            ModelKind::Ssm => {
                let store = ParamStore::from_entries(rest).map_err(wrap)?;
                Ok(Model::Ssm(SsmModel::from_params(store).map_err(wrap)?))
            }
            ModelKind::Transformer => {
                let h = heads.ok_or_else(|| bad("missing meta.n_heads"))?;
                if !(h >= 1.0 && h.fract() == 0.0) {
                    return Err(bad("invalid meta.n_heads"));
                }
                let store = ParamStore::from_entries(rest).map_err(wrap)?;
                Ok(Model::Transformer(
                    TransformerModel::from_params(store, h as usize).map_err(wrap)?,
                ))
            }
            ModelKind::Oracle => Ok(Model::Oracle),
            ModelKind::MeanPatch => {
                let m = mean.ok_or_else(|| bad("missing meta.mean_patch"))?;
                let p: Patch = m
                    .data()
                    .try_into()
                    .map_err(|_| bad(&format!("mean patch must have {PATCH_LEN} values")))?;
                Ok(Model::MeanPatch(p))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::ModelConfig;
    use crate::transformer::TransformerConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn same_params(a: &Model, b: &Model) {
        let (pa, pb) = (a.params().unwrap(), b.params().unwrap());
        assert_eq!(pa.len(), pb.len());
        for ((na, ta), (nb, tb)) in pa.iter().zip(pb.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn checkpoints_round_trip_every_kind() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ssm = Model::Ssm(
            SsmModel::init(
                ModelConfig {
                    variant: Variant::Prepended,
                    ..ModelConfig::desk()
                },
                &mut rng,
            )
            .unwrap(),
        );
        let tf = Model::Transformer(TransformerModel::init(TransformerConfig::default(), &mut rng).unwrap());
        for (i, m) in [ssm, tf].iter().enumerate() {
            let p = dir.path().join(format!("m{i}.ckpt"));
            m.save(&p).unwrap();
            let back = Model::load(&p).unwrap();
            assert_eq!(back.kind(), m.kind());
            assert_eq!(back.variant(), m.variant());
            same_params(m, &back);
        }
        let p = dir.path().join("oracle.ckpt");
        Model::Oracle.save(&p).unwrap();
        assert_eq!(Model::load(&p).unwrap().kind(), ModelKind::Oracle);
        let p = dir.path().join("mean.ckpt");
        Model::MeanPatch([0.25; 16]).save(&p).unwrap();
        assert!(matches!(Model::load(&p).unwrap(), Model::MeanPatch(m) if m == [0.25; 16]));
    }

    #[test]
    fn checkpoint_without_kind_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        write_checkpoint(&p, [("w", &Tensor::scalar(1.0))]).unwrap();
        assert!(matches!(Model::load(&p), Err(Error::Format { .. })));
    }
}
