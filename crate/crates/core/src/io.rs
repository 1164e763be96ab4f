//! Serialization: the `PHRG` tensor container, run configuration, model
//! checkpoints and CSV output.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "PHRG" | version: u32 | entry_count: u32 | meta_count: u32
//! entry_count × { name_len: u32, name: utf8, dtype: u32, rank: u32,
//!                 extents: u64 × rank, offset: u64 }
//! meta_count  × { key_len: u32, key: utf8, value_len: u32, value: utf8 }
//! payload: row-major scalars, entry offsets relative to payload start
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{noisy_teacher, ArtifactSpec, SceneSpec};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use crate::tta::DenoiseConfig;
use crate::vit::{init_student_from_teacher, FeatureGrid, ViTConfig, ViTModel};

pub const MAGIC: &[u8; 4] = b"PHRG";
pub const FORMAT_VERSION: u32 = 1;

/// Metadata key carrying the producing run's config hash.
pub const CONFIG_HASH_KEY: &str = "config_hash";

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn dtype_code(&self) -> u32 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::I32(_) => 1,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Entry {
    pub fn f32(name: impl Into<String>, shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Self {
        Self { name: name.into(), shape: shape.into(), data: TensorData::F32(data) }
    }

    pub fn i32(name: impl Into<String>, shape: impl Into<Vec<usize>>, data: Vec<i32>) -> Self {
        Self { name: name.into(), shape: shape.into(), data: TensorData::I32(data) }
    }

    pub fn from_tensor(name: impl Into<String>, t: &Tensor<f32>) -> Self {
        Self::f32(name, t.shape().to_vec(), t.data().to_vec())
    }

    pub fn from_grid(name: impl Into<String>, g: &FeatureGrid<f32>) -> Self {
        Self::f32(name, vec![g.rows(), g.cols(), g.dim()], g.values().to_vec())
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::I32(_) => Err(Error::Format(format!("entry `{}` is int32, expected float32", self.name))),
        }
    }

    pub fn as_i32(&self) -> Result<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Ok(v),
            TensorData::F32(_) => Err(Error::Format(format!("entry `{}` is float32, expected int32", self.name))),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        Tensor::new(self.shape.clone(), self.as_f32()?.to_vec())
    }

    pub fn to_grid(&self) -> Result<FeatureGrid<f32>> {
        match self.shape[..] {
            [r, c, d] => FeatureGrid::new(r, c, d, self.as_f32()?.to_vec()),
            _ => Err(Error::Format(format!("entry `{}` has rank {}, expected 3", self.name, self.shape.len()))),
        }
    }
}

/// Named tensors plus string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub entries: Vec<Entry>,
    pub metadata: BTreeMap<String, String>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, e: Entry) {
        self.entries.push(e);
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("missing entry `{name}`")))
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Format(format!("duplicate entry name `{}`", e.name)));
            }
            if e.shape.iter().product::<usize>() != e.data.len() || e.shape.contains(&0) {
                return Err(Error::Format(format!(
                    "entry `{}` has shape {:?} but {} values",
                    e.name,
                    e.shape,
                    e.data.len()
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, self.entries.len() as u32);
        put_u32(&mut out, self.metadata.len() as u32);
        let mut offset = 0u64;
        for e in &self.entries {
            put_str(&mut out, &e.name);
            put_u32(&mut out, e.data.dtype_code());
            put_u32(&mut out, e.shape.len() as u32);
            for &s in &e.shape {
                out.extend_from_slice(&(s as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * e.data.len() as u64;
        }
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        for e in &self.entries {
            match &e.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not a PHRG container".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let n_entries = r.u32()? as usize;
        let n_meta = r.u32()? as usize;
        let mut headers = Vec::with_capacity(n_entries.min(1 << 16));
        for _ in 0..n_entries {
            let name = r.string()?;
            let dtype = r.u32()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            headers.push((name, dtype, shape, offset));
        }
        let mut metadata = BTreeMap::new();
        for _ in 0..n_meta {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        let payload = &bytes[r.pos..];
        let mut entries = Vec::with_capacity(headers.len());
        for (name, dtype, shape, offset) in headers {
            let n: usize = shape.iter().product();
            let raw = offset
                .checked_add(4 * n)
                .and_then(|end| payload.get(offset..end))
                .ok_or_else(|| Error::Format(format!("entry `{name}` runs past the payload")))?;
            let words = raw.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
            let data = match dtype {
                0 => TensorData::F32(words.map(f32::from_le_bytes).collect()),
                1 => TensorData::I32(words.map(i32::from_le_bytes).collect()),
                d => return Err(Error::Format(format!("entry `{name}` has unknown dtype code {d}"))),
            };
            entries.push(Entry { name, shape, data });
        }
        let c = Container { entries, metadata };
        c.validate()?;
        Ok(c)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated container".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("entry name is not UTF-8".into()))
    }
}

pub fn write_container(path: &Path, c: &Container) -> Result<()> {
    let bytes = c.to_bytes()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Container::from_bytes(&bytes)
}

/// Current run-config schema version.
pub const CONFIG_VERSION: u32 = 1;

/// Bench split sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSplit {
    pub train: usize,
    pub test: usize,
}

impl Default for BenchSplit {
    fn default() -> Self {
        Self { train: 16, test: 8 }
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub vit: ViTConfig,
    pub distill: DistillConfig,
    pub artifacts: ArtifactSpec,
    pub scene: SceneSpec,
    pub bench: BenchSplit,
    pub denoise: DenoiseConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let vit = ViTConfig {
            image_height: 32,
            image_width: 32,
            embed_dim: 32,
            depth: 2,
            num_heads: 4,
            mlp_ratio: 2,
            ..ViTConfig::default()
        };
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            scene: SceneSpec { height: 32, width: 32, prototype_dim: 32, ..SceneSpec::default() },
            vit,
            distill: DistillConfig::default(),
            artifacts: ArtifactSpec::default(),
            bench: BenchSplit::default(),
            denoise: DenoiseConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.vit.validate()?;
        self.distill.validate()?;
        self.artifacts.validate()?;
        if self.scene.height != self.vit.image_height || self.scene.width != self.vit.image_width {
            return Err(Error::Config("scene extents must match the model input size".into()));
        }
        if self.scene.patch_size != self.vit.patch_size {
            return Err(Error::Config("scene patch_size must match the model patch size".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML serialization, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let text = self.to_toml()?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }

    /// Frozen teacher: a clean model under the run seed with the configured
    /// artifacts baked into its forward pass.
    pub fn teacher(&self) -> Result<ViTModel<f32>> {
        let clean = ViTModel::init(self.vit.clone(), rng::derive_seed(self.seed, "teacher"))?;
        Ok(noisy_teacher(&clean, &self.artifacts))
    }

    /// Student with `m` registers built from [`RunConfig::teacher`].
    pub fn student(&self, m: usize) -> Result<ViTModel<f32>> {
        Ok(init_student_from_teacher(&self.teacher()?, m, rng::derive_seed(self.seed, "student")))
    }

    /// Distillation settings with the run seed applied.
    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig { seed: self.seed, ..self.distill.clone() }
    }
}

/// Save every parameter plus the model config (as TOML metadata).
pub fn save_model(path: &Path, model: &ViTModel<f32>, config_hash: &str) -> Result<()> {
    write_container(path, &model_container(model, config_hash)?)
}

pub fn model_container(model: &ViTModel<f32>, config_hash: &str) -> Result<Container> {
    let mut c = Container::new()
        .with_meta("kind", "checkpoint")
        .with_meta(CONFIG_HASH_KEY, config_hash)
        .with_meta("vit", toml::to_string(&model.config).map_err(|e| Error::Config(e.to_string()))?);
    if let Some(a) = &model.artifacts {
        c = c.with_meta("artifacts", toml::to_string(a).map_err(|e| Error::Config(e.to_string()))?);
    }
    for p in model.params() {
        c.push(Entry::from_tensor(p.name, p.tensor));
    }
    Ok(c)
}

pub fn model_from_container(c: &Container) -> Result<ViTModel<f32>> {
    let vit_text = c.meta("vit").ok_or_else(|| Error::Format("checkpoint has no model config".into()))?;
    let config: ViTConfig = toml::from_str(vit_text).map_err(|e| Error::Format(e.to_string()))?;
    let named = c
        .entries
        .iter()
        .map(|e| Ok((e.name.clone(), e.to_tensor()?)))
        .collect::<Result<Vec<_>>>()?;
    let mut model = ViTModel::from_named(config, named)?;
    model.artifacts = match c.meta("artifacts") {
        Some(a) => Some(toml::from_str(a).map_err(|e| Error::Format(e.to_string()))?),
        None => None,
    };
    Ok(model)
}

pub fn load_model(path: &Path) -> Result<(ViTModel<f32>, Option<String>)> {
    let c = read_container(path)?;
    let hash = c.meta(CONFIG_HASH_KEY).map(str::to_string);
    Ok((model_from_container(&c)?, hash))
}

/// Write a CSV file with a header row.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_small_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.phrg");
        let c = Container {
            entries: vec![
                Entry::f32("x", [2, 3], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0]),
                Entry::i32("labels", [2], vec![-7, 9]),
            ],
            metadata: [("k".to_string(), "v".to_string())].into(),
        };
        write_container(&path, &c).unwrap();
        let back = read_container(&path).unwrap();
        assert_eq!(back, c);
        let bits: Vec<u32> = back.get("x").unwrap().as_f32().unwrap().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits[5], (-0.0f32).to_bits());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let c = Container {
            entries: vec![Entry::f32("a", [1], vec![1.0]), Entry::f32("a", [1], vec![2.0])],
            ..Default::default()
        };
        assert!(matches!(c.to_bytes(), Err(Error::Format(_))));
    }

    #[test]
    fn empty_container_is_valid() {
        let bytes = Container::new().to_bytes().unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(bytes.len(), 16);
        assert_eq!(Container::from_bytes(&bytes).unwrap(), Container::new());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        assert!(Container::from_bytes(b"NOPE").is_err());
        let mut bytes = Container { entries: vec![Entry::f32("a", [4], vec![1.0; 4])], ..Default::default() }
            .to_bytes()
            .unwrap();
        bytes.truncate(bytes.len() - 2);
        assert!(Container::from_bytes(&bytes).is_err());
        assert!(Container { entries: vec![Entry::f32("a", [3], vec![1.0; 4])], ..Default::default() }
            .to_bytes()
            .is_err());
    }

    #[test]
    fn config_round_trip_and_hash() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        assert_eq!(cfg.hash().unwrap().len(), 64);
        let other = RunConfig { seed: 1, ..RunConfig::default() };
        assert_ne!(other.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn unknown_keys_and_versions_are_errors() {
        let mut text = RunConfig::default().to_toml().unwrap();
        text.insert_str(0, "bogus = 3\n");
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("version = 2\n").is_err());
        assert!(RunConfig::from_toml("[vit]\nwidth = 3\n").is_err());
        // Omitted sections take defaults.
        assert_eq!(RunConfig::from_toml("version = 1\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = RunConfig::default();
        let student = cfg.student(4).unwrap();
        let c = model_container(&student, "abc").unwrap();
        let back = model_from_container(&Container::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, student);
        assert_eq!(c.meta(CONFIG_HASH_KEY), Some("abc"));
    }

    proptest! {
        #[test]
        fn arbitrary_tensors_round_trip(values in proptest::collection::vec(any::<u32>(), 1..64), ints in proptest::collection::vec(any::<i32>(), 1..16)) {
            let floats: Vec<f32> = values.iter().map(|b| f32::from_bits(*b)).collect();
            let c = Container {
                entries: vec![Entry::f32("f", [floats.len()], floats.clone()), Entry::i32("i", [1, ints.len()], ints.clone())],
                ..Default::default()
            };
            let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
            let got: Vec<u32> = back.get("f").unwrap().as_f32().unwrap().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, values);
            prop_assert_eq!(back.get("i").unwrap().as_i32().unwrap(), &ints[..]);
        }
    }
}
