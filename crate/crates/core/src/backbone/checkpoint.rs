//! Checkpoint directories: `manifest.json` plus `weights.bin`, a sequence of
//! named f32 little-endian tensor records.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::{Arch, ClassifierModel, DecoderModel, TapSpec, PADDING_CONVENTION};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FPADWTS\0";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Classifier,
    Decoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: ModelKind,
    pub arch_id: Arch,
    pub tap_spec: TapSpec,
    pub padding: String,
    pub epoch: usize,
    pub seed: u64,
    /// Decoder reconstruction side; classifiers record their patch side.
    pub input_side: usize,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

impl CheckpointManifest {
    pub fn for_classifier(model: &ClassifierModel, epoch: usize) -> Self {
        Self {
            kind: ModelKind::Classifier,
            arch_id: model.arch(),
            tap_spec: model.arch().tap_spec(),
            padding: PADDING_CONVENTION.to_string(),
            epoch,
            seed: model.seed(),
            input_side: model.arch().patch_input_side(),
            metrics: BTreeMap::new(),
        }
    }

    pub fn for_decoder(decoder: &DecoderModel, arch: Arch, epoch: usize) -> Self {
        Self {
            kind: ModelKind::Decoder,
            arch_id: arch,
            tap_spec: decoder.tap_spec().clone(),
            padding: PADDING_CONVENTION.to_string(),
            epoch,
            seed: decoder.seed(),
            input_side: decoder.input_side(),
            metrics: BTreeMap::new(),
        }
    }
}

fn write_weights(path: &Path, store: &ParamStore) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let records: Vec<_> = store.named_tensors().collect();
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, var) in records {
        let t = var.as_tensor();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(DTYPE_F32);
        buf.push(t.rank() as u8);
        for &d in t.dims() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated weights file".into()))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Reads every tensor record of a weights file as f32.
pub fn read_weights(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let mut data = Vec::new();
    fs::File::open(path)?.read_to_end(&mut data)?;
    let mut cur = Cursor { data: &data, pos: 0 };
    if cur.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a weights file", path.display())));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported weights version {version}")));
    }
    let count = cur.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let dtype = cur.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!("tensor {name}: unknown dtype tag {dtype}")));
        }
        let rank = cur.u8()? as usize;
        let dims = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = cur.take(n * 4)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.insert(name, Tensor::from_vec(values, dims, &Device::Cpu)?);
    }
    if cur.pos != data.len() {
        return Err(Error::Checkpoint("trailing bytes in weights file".into()));
    }
    Ok(out)
}

pub fn save_checkpoint(dir: &Path, manifest: &CheckpointManifest, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(manifest)?)?;
    write_weights(&dir.join(WEIGHTS_FILE), store)
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, BTreeMap<String, Tensor>)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::Checkpoint(format!("no checkpoint at {}", dir.display())));
    }
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    if manifest.padding != PADDING_CONVENTION {
        return Err(Error::Compatibility(format!(
            "checkpoint padding {} differs from {PADDING_CONVENTION}",
            manifest.padding
        )));
    }
    let weights = read_weights(&dir.join(WEIGHTS_FILE))?;
    Ok((manifest, weights))
}

pub fn save_classifier(dir: &Path, model: &ClassifierModel, manifest: &CheckpointManifest) -> Result<()> {
    save_checkpoint(dir, manifest, model.params())
}

pub fn load_classifier(dir: &Path, dtype: DType) -> Result<(ClassifierModel, CheckpointManifest)> {
    let (manifest, weights) = load_checkpoint(dir)?;
    if manifest.kind != ModelKind::Classifier {
        return Err(Error::Checkpoint(format!("{} holds a decoder", dir.display())));
    }
    if manifest.tap_spec != manifest.arch_id.tap_spec() {
        return Err(Error::Compatibility(format!("tap spec does not match {}", manifest.arch_id)));
    }
    let model = ClassifierModel::new(manifest.arch_id, dtype, manifest.seed)?;
    model.params().assign_named(&weights)?;
    Ok((model, manifest))
}

pub fn load_decoder(dir: &Path, dtype: DType) -> Result<(DecoderModel, CheckpointManifest)> {
    let (manifest, weights) = load_checkpoint(dir)?;
    if manifest.kind != ModelKind::Decoder {
        return Err(Error::Checkpoint(format!("{} holds a classifier", dir.display())));
    }
    let decoder = DecoderModel::new(&manifest.tap_spec, manifest.input_side, dtype, manifest.seed)?;
    decoder.params().assign_named(&weights)?;
    Ok((decoder, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classifier_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let model = ClassifierModel::new(Arch::Tiny, DType::F32, 11).unwrap();
        let mut manifest = CheckpointManifest::for_classifier(&model, 3);
        manifest.metrics.insert("val_ace".into(), 12.5);
        save_classifier(dir.path(), &model, &manifest).unwrap();
        let (loaded, m) = load_classifier(dir.path(), DType::F32).unwrap();
        assert_eq!(m, manifest);
        assert!(loaded.params().equals(model.params()).unwrap());
    }

    #[test]
    fn decoder_round_trips_and_kind_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let dec = DecoderModel::new(&Arch::Tiny.tap_spec(), 96, DType::F32, 2).unwrap();
        save_checkpoint(dir.path(), &CheckpointManifest::for_decoder(&dec, Arch::Tiny, 0), dec.params())
            .unwrap();
        let (loaded, _) = load_decoder(dir.path(), DType::F32).unwrap();
        assert!(loaded.params().equals(dec.params()).unwrap());
        assert!(load_classifier(dir.path(), DType::F32).is_err());
    }

    #[test]
    fn truncated_weights_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = ClassifierModel::new(Arch::Tiny, DType::F32, 1).unwrap();
        save_classifier(dir.path(), &model, &CheckpointManifest::for_classifier(&model, 0)).unwrap();
        let path = dir.path().join(WEIGHTS_FILE);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_classifier(dir.path(), DType::F32), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn missing_directory_is_a_checkpoint_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_checkpoint(&dir.path().join("nope")).is_err());
    }
}
