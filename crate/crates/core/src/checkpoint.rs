//! Checkpoint directories: `model.safetensors` with every parameter and
//! buffer of a bundle, and a `model.json` sidecar describing how to rebuild
//! and feed the model.

use std::fs;
use std::path::Path;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneBundle, BackboneSpec, BundleOptions};
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::graph::Variant;
use crate::nn::BnPolicy;
use crate::scoring::Reduction;

pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const SIDECAR_FILE: &str = "model.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preprocessing {
    pub image_size: usize,
    pub center_crop: Option<usize>,
    pub normalization: Normalization,
    pub nonzero_crop: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub backbone: BackboneSpec,
    pub variant: Variant,
    pub bn_policy: BnPolicy,
    pub preprocessing: Preprocessing,
    pub reduction: Reduction,
    pub smoothing_sigma: Option<f64>,
    /// Training iterations completed when the checkpoint was written.
    pub iteration: usize,
    pub seed: u64,
}

impl CheckpointMeta {
    pub fn bundle_options(&self) -> BundleOptions {
        let spec = self.variant.spec();
        BundleOptions {
            spec: self.backbone,
            paired: spec.paired_encoders,
            optimize_encoder: spec.optimize_encoder,
            bn_policy: self.bn_policy,
            seed: self.seed,
        }
    }
}

pub fn save(dir: &Path, bundle: &BackboneBundle, meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    candle_core::safetensors::save(&bundle.all_tensors(), dir.join(WEIGHTS_FILE))?;
    let sidecar = dir.join(SIDECAR_FILE);
    fs::write(&sidecar, serde_json::to_string_pretty(meta)?)
        .map_err(|e| Error::io(format!("writing {}", sidecar.display()), e))
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let sidecar = dir.join(SIDECAR_FILE);
    if !sidecar.is_file() {
        return Err(Error::Config(format!(
            "{} is not a checkpoint directory (no {SIDECAR_FILE})",
            dir.display()
        )));
    }
    let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(format!("reading {}", sidecar.display()), e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", sidecar.display())))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "{}: unsupported checkpoint format {} (expected {FORMAT_VERSION})",
            sidecar.display(),
            meta.format_version
        )));
    }
    Ok(meta)
}

/// Rebuilds the bundle described by the sidecar and loads its weights.
pub fn load(dir: &Path, device: &Device) -> Result<(BackboneBundle, CheckpointMeta)> {
    let meta = read_meta(dir)?;
    let weights = dir.join(WEIGHTS_FILE);
    if !weights.is_file() {
        return Err(Error::Config(format!("checkpoint weights {} missing", weights.display())));
    }
    let bundle = BackboneBundle::build(&meta.bundle_options(), None, device)?;
    let tensors = candle_core::safetensors::load(&weights, device)?;
    bundle.load_all(&tensors, &weights.display().to_string())?;
    Ok((bundle, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneId;

    fn meta(variant: Variant) -> CheckpointMeta {
        CheckpointMeta {
            format_version: FORMAT_VERSION,
            backbone: BackboneSpec::new(BackboneId::Resnet18).with_base_channels(4),
            variant,
            bn_policy: BnPolicy::Train,
            preprocessing: Preprocessing {
                image_size: 64,
                center_crop: None,
                normalization: Normalization::default(),
                nonzero_crop: false,
            },
            reduction: Reduction::Max,
            smoothing_sigma: None,
            iteration: 0,
            seed: 5,
        }
    }

    #[test]
    fn round_trip_preserves_every_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let m = meta(Variant::Ours);
        let bundle = BackboneBundle::build(&m.bundle_options(), None, &Device::Cpu).unwrap();
        save(dir.path(), &bundle, &m).unwrap();
        let (back, m2) = load(dir.path(), &Device::Cpu).unwrap();
        assert_eq!(m, m2);
        assert_eq!(bundle.encoder_store.checksum().unwrap(), back.encoder_store.checksum().unwrap());
        assert_eq!(bundle.new_store.checksum().unwrap(), back.new_store.checksum().unwrap());
        assert_eq!(
            bundle.frozen_store.as_ref().unwrap().checksum().unwrap(),
            back.frozen_store.as_ref().unwrap().checksum().unwrap()
        );
    }

    #[test]
    fn mismatched_backbone_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = meta(Variant::B);
        let bundle = BackboneBundle::build(&m.bundle_options(), None, &Device::Cpu).unwrap();
        save(dir.path(), &bundle, &m).unwrap();
        let mut wrong = m.clone();
        wrong.backbone = BackboneSpec::new(BackboneId::Resnet18).with_base_channels(8);
        fs::write(dir.path().join(SIDECAR_FILE), serde_json::to_string(&wrong).unwrap()).unwrap();
        assert!(load(dir.path(), &Device::Cpu).is_err());
    }

    #[test]
    fn missing_directory_is_a_user_error() {
        let err = load(Path::new("/no/such/checkpoint"), &Device::Cpu).unwrap_err();
        assert!(err.is_user_error());
    }
}
