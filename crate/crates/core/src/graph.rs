//! Configuration variants and the forward wiring that decides which feature
//! maps are contrasted and where gradients may flow.

use std::fmt;
use std::str::FromStr;

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneBundle;
use crate::error::{Error, Result};
use crate::losses::{self, MiningStats};
use crate::nn::{BnCtx, BnPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Regional,
    Global,
    GlobalHm,
}

/// The ablation ladder, from the frozen-encoder regional baseline to the
/// full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    A,
    B,
    C,
    D,
    EMinus,
    E,
    BPlus,
    Ours,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantSpec {
    pub loss_kind: LossKind,
    pub optimize_encoder: bool,
    pub stop_gradient: bool,
    pub paired_encoders: bool,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::A,
        Variant::B,
        Variant::C,
        Variant::D,
        Variant::EMinus,
        Variant::E,
        Variant::BPlus,
        Variant::Ours,
    ];

    pub fn spec(self) -> VariantSpec {
        use LossKind::*;
        let (loss_kind, optimize_encoder, stop_gradient, paired_encoders) = match self {
            Variant::A => (Regional, false, false, false),
            Variant::B => (Global, false, false, false),
            Variant::C => (Global, true, false, false),
            Variant::D => (Global, true, true, false),
            Variant::EMinus => (Global, true, false, true),
            Variant::E => (Global, true, true, true),
            Variant::BPlus => (GlobalHm, false, false, false),
            Variant::Ours => (GlobalHm, true, true, true),
        };
        VariantSpec {
            loss_kind,
            optimize_encoder,
            stop_gradient,
            paired_encoders,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
            Variant::D => "D",
            Variant::EMinus => "E_MINUS",
            Variant::E => "E",
            Variant::BPlus => "B_PLUS",
            Variant::Ours => "OURS",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v = match s.to_ascii_uppercase().as_str() {
            "A" => Variant::A,
            "B" => Variant::B,
            "C" => Variant::C,
            "D" => Variant::D,
            "E_MINUS" | "E-" | "EMINUS" => Variant::EMinus,
            "E" => Variant::E,
            "B_PLUS" | "B+" | "BPLUS" => Variant::BPlus,
            "OURS" | "FULL" => Variant::Ours,
            _ => {
                return Err(Error::Config(format!(
                    "unknown variant '{s}' (expected A, B, C, D, E_MINUS, E, B_PLUS or OURS)"
                )))
            }
        };
        Ok(v)
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> Self {
        v.as_str().to_string()
    }
}

/// Which forward pass produced a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pass {
    /// Single encoder reconstructed from its own features.
    Single,
    /// Frozen-encoder targets, reconstructed from adapted-encoder features.
    FromAdapted,
    /// Adapted-encoder targets, reconstructed from frozen-encoder features.
    FromFrozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PairId {
    pub pass: Pass,
    /// Encoder stage, 0-based.
    pub stage: usize,
}

/// Target / reconstruction feature map pair, both `(B, C, H, W)`.
#[derive(Debug, Clone)]
pub struct Pair {
    pub target: Tensor,
    pub recon: Tensor,
    pub id: PairId,
}

#[derive(Debug, Clone)]
pub struct PairSet {
    pairs: Vec<Pair>,
}

impl PairSet {
    pub fn new(pairs: Vec<Pair>) -> Result<Self> {
        if pairs.len() != 3 && pairs.len() != 6 {
            return Err(Error::Shape(format!(
                "a pair set holds 3 or 6 pairs, got {}",
                pairs.len()
            )));
        }
        for p in &pairs {
            if p.target.dims() != p.recon.dims() {
                return Err(Error::Shape(format!(
                    "pair {:?} shapes differ: {:?} vs {:?}",
                    p.id,
                    p.target.dims(),
                    p.recon.dims()
                )));
            }
        }
        Ok(PairSet { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn targets(&self) -> Vec<Tensor> {
        self.pairs.iter().map(|p| p.target.clone()).collect()
    }

    pub fn recons(&self) -> Vec<Tensor> {
        self.pairs.iter().map(|p| p.recon.clone()).collect()
    }

    /// Per-pair distance maps, each `(B, H, W)`.
    pub fn distance_maps(&self) -> Result<Vec<Tensor>> {
        self.pairs
            .iter()
            .map(|p| losses::distance_map(&p.target.detach(), &p.recon.detach()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn bn_contexts(spec: &VariantSpec, policy: BnPolicy, mode: Mode) -> (BnCtx, BnCtx) {
    match mode {
        Mode::Eval => (BnCtx::EVAL, BnCtx::EVAL),
        Mode::Train => {
            let encoder = if spec.optimize_encoder {
                BnCtx::train(policy)
            } else {
                BnCtx::EVAL
            };
            (encoder, BnCtx::train(BnPolicy::Train))
        }
    }
}

fn stage_pairs(targets: &[Tensor], recons: &[Tensor], pass: Pass, stop_gradient: bool) -> Vec<Pair> {
    targets
        .iter()
        .zip(recons)
        .enumerate()
        .map(|(stage, (t, r))| Pair {
            target: if stop_gradient { t.detach() } else { t.clone() },
            recon: r.clone(),
            id: PairId { pass, stage },
        })
        .collect()
}

/// Runs the variant's forward wiring on an image batch `(B, 3, H, W)`.
///
/// A non-optimized encoder is cut from the graph. In paired variants both
/// passes share the bottleneck and decoder and see the same batch; the
/// frozen encoder always uses running statistics.
pub fn forward(variant: Variant, bundle: &BackboneBundle, images: &Tensor, mode: Mode) -> Result<PairSet> {
    let spec = variant.spec();
    if spec.optimize_encoder != bundle.trainable.encoder && mode == Mode::Train {
        return Err(Error::Config(format!(
            "variant {variant} expects a {} encoder",
            if spec.optimize_encoder { "trainable" } else { "frozen" }
        )));
    }
    let (enc_ctx, new_ctx) = bn_contexts(&spec, bundle.bn_policy, mode);
    let mut adapted = bundle.encoder.forward(images, enc_ctx)?;
    if !spec.optimize_encoder {
        adapted = adapted.detach();
    }
    let reconstruct = |input: &[Tensor]| -> Result<Vec<Tensor>> {
        let latent = bundle.bottleneck.forward(input, new_ctx)?;
        Ok(bundle.decoder.forward(&latent, new_ctx)?.into())
    };
    let pairs = if spec.paired_encoders {
        let frozen_enc = bundle.frozen.as_ref().ok_or_else(|| {
            Error::Config(format!("variant {variant} needs a frozen encoder copy in the bundle"))
        })?;
        let frozen = frozen_enc.forward(images, BnCtx::EVAL)?.detach();
        let from_adapted = reconstruct(adapted.stages())?;
        let from_frozen = reconstruct(frozen.stages())?;
        let mut pairs = stage_pairs(frozen.stages(), &from_adapted, Pass::FromAdapted, true);
        pairs.extend(stage_pairs(
            adapted.stages(),
            &from_frozen,
            Pass::FromFrozen,
            spec.stop_gradient,
        ));
        pairs
    } else {
        let recon = reconstruct(adapted.stages())?;
        stage_pairs(adapted.stages(), &recon, Pass::Single, spec.stop_gradient)
    };
    PairSet::new(pairs)
}

/// Loss of a pair set under the variant's objective. `alpha` is only read
/// for hard-mined objectives.
pub fn pair_loss(variant: Variant, pairs: &PairSet, alpha: f64) -> Result<(Tensor, Vec<MiningStats>)> {
    let spec = variant.spec();
    let targets = pairs.targets();
    let recons = pairs.recons();
    match spec.loss_kind {
        LossKind::Regional => Ok((losses::loss_regional(&targets, &recons)?, Vec::new())),
        LossKind::Global => Ok((
            losses::loss_global(&targets, &recons, spec.stop_gradient)?,
            Vec::new(),
        )),
        LossKind::GlobalHm => losses::loss_global_hm(&targets, &recons, alpha, spec.stop_gradient),
    }
}

/// Optimizer parameter groups.
#[derive(Debug, Clone, Default)]
pub struct ParamGroups {
    /// Bottleneck and decoder.
    pub new: Vec<(String, Var)>,
    /// The adapted encoder, when the variant optimizes it.
    pub pretrained: Vec<(String, Var)>,
}

pub fn trainable_parameters(variant: Variant, bundle: &BackboneBundle) -> ParamGroups {
    let new = bundle.new_store.trainable();
    let pretrained = if variant.spec().optimize_encoder {
        bundle.encoder_store.trainable()
    } else {
        Vec::new()
    };
    ParamGroups { new, pretrained }
}
