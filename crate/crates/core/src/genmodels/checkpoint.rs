use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    Dense, DiscriminatorParams, GenError, GeneratorArch, GeneratorParams, ProbeParams, VaeParams,
};
use crate::diffcore::{Parameterized, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"LSCK";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gan,
    Vae,
    Probe,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Gan => "gan",
            ModelKind::Vae => "vae",
            ModelKind::Probe => "probe",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = GenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gan" => Ok(ModelKind::Gan),
            "vae" => Ok(ModelKind::Vae),
            "probe" => Ok(ModelKind::Probe),
            other => Err(GenError::Checkpoint(format!(
                "unknown model kind `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    pub version: u32,
    /// Generator architecture; absent for probes.
    pub arch: Option<GeneratorArch>,
    pub tensors: Vec<TensorEntry>,
    pub seed: u64,
    /// Training configuration echo, free-form.
    pub config: serde_json::Value,
}

/// Serialized parameter set.
///
/// Layout: `LSCK`, u32 version, u64 header length, JSON header, then every
/// tensor as little-endian f32 in header order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor>,
}

fn named<M: Parameterized>(prefix: &str, model: &M, out: &mut Vec<(String, Tensor)>) {
    for (name, t) in model.param_names().into_iter().zip(model.params()) {
        out.push((format!("{prefix}.{name}"), t.clone()));
    }
}

fn dense(map: &mut BTreeMap<String, Tensor>, prefix: &str) -> Result<Dense, GenError> {
    let mut take = |suffix: &str| {
        let key = format!("{prefix}.{suffix}");
        map.remove(&key)
            .ok_or_else(|| GenError::Checkpoint(format!("missing tensor `{key}`")))
    };
    let weight = take("weight")?;
    let bias = take("bias")?;
    if weight.shape().len() != 2 || bias.shape() != [weight.shape()[1]] {
        return Err(GenError::Checkpoint(format!(
            "layer `{prefix}` has inconsistent shapes {:?} and {:?}",
            weight.shape(),
            bias.shape()
        )));
    }
    Ok(Dense { weight, bias })
}

fn generator_from(
    map: &mut BTreeMap<String, Tensor>,
    prefix: &str,
    arch: GeneratorArch,
) -> Result<GeneratorParams, GenError> {
    let params = GeneratorParams {
        arch,
        hidden: dense(map, &format!("{prefix}.hidden"))?,
        output: dense(map, &format!("{prefix}.output"))?,
    };
    let expected = GeneratorParams::init(arch, 0);
    for (a, b) in params.params().iter().zip(expected.params()) {
        if a.shape() != b.shape() {
            return Err(GenError::Checkpoint(format!(
                "generator tensor shape {:?} does not match architecture {}",
                a.shape(),
                arch.tag()
            )));
        }
    }
    Ok(params)
}

impl ModelCheckpoint {
    fn build(
        kind: ModelKind,
        arch: Option<GeneratorArch>,
        seed: u64,
        config: serde_json::Value,
        named: Vec<(String, Tensor)>,
    ) -> Self {
        let (entries, tensors): (Vec<_>, Vec<_>) = named
            .into_iter()
            .map(|(name, t)| {
                let entry = TensorEntry {
                    name,
                    shape: t.shape().to_vec(),
                };
                (entry, t)
            })
            .unzip();
        Self {
            header: CheckpointHeader {
                kind,
                version: CHECKPOINT_VERSION,
                arch,
                tensors: entries,
                seed,
                config,
            },
            tensors,
        }
    }

    /// GAN checkpoint; the discriminator is optional because fine-tuned
    /// generators are stored without one.
    pub fn from_gan(
        generator: &GeneratorParams,
        discriminator: Option<&DiscriminatorParams>,
        seed: u64,
        config: serde_json::Value,
    ) -> Self {
        let mut t = Vec::new();
        named("generator", generator, &mut t);
        if let Some(d) = discriminator {
            named("discriminator", d, &mut t);
        }
        Self::build(ModelKind::Gan, Some(generator.arch), seed, config, t)
    }

    pub fn from_vae(params: &VaeParams, seed: u64, config: serde_json::Value) -> Self {
        let mut t = Vec::new();
        for (name, tensor) in params.param_names().into_iter().zip(params.params()) {
            t.push((name, tensor.clone()));
        }
        Self::build(ModelKind::Vae, Some(params.arch()), seed, config, t)
    }

    pub fn from_probe(params: &ProbeParams, config: serde_json::Value) -> Self {
        let mut t = Vec::new();
        named("probe", params, &mut t);
        Self::build(ModelKind::Probe, None, params.seed, config, t)
    }

    pub fn kind(&self) -> ModelKind {
        self.header.kind
    }

    fn tensor_map(&self) -> BTreeMap<String, Tensor> {
        self.header
            .tensors
            .iter()
            .map(|e| e.name.clone())
            .zip(self.tensors.iter().cloned())
            .collect()
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<(), GenError> {
        if self.header.kind != kind {
            return Err(GenError::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.header.kind
            )));
        }
        Ok(())
    }

    fn arch(&self) -> Result<GeneratorArch, GenError> {
        self.header
            .arch
            .ok_or_else(|| GenError::Checkpoint("header has no generator architecture".into()))
    }

    pub fn to_gan(&self) -> Result<(GeneratorParams, Option<DiscriminatorParams>), GenError> {
        self.expect_kind(ModelKind::Gan)?;
        let mut map = self.tensor_map();
        let generator = generator_from(&mut map, "generator", self.arch()?)?;
        let discriminator = if map.contains_key("discriminator.hidden.weight") {
            Some(DiscriminatorParams {
                hidden: dense(&mut map, "discriminator.hidden")?,
                output: dense(&mut map, "discriminator.output")?,
            })
        } else {
            None
        };
        Ok((generator, discriminator))
    }

    pub fn to_vae(&self) -> Result<VaeParams, GenError> {
        self.expect_kind(ModelKind::Vae)?;
        let mut map = self.tensor_map();
        let arch = self.arch()?;
        Ok(VaeParams {
            enc_hidden: dense(&mut map, "encoder.hidden")?,
            enc_mu: dense(&mut map, "encoder.mu")?,
            enc_logvar: dense(&mut map, "encoder.logvar")?,
            decoder: generator_from(&mut map, "decoder", arch)?,
        })
    }

    pub fn to_probe(&self) -> Result<ProbeParams, GenError> {
        self.expect_kind(ModelKind::Probe)?;
        let mut map = self.tensor_map();
        let params = ProbeParams {
            hidden: dense(&mut map, "probe.hidden")?,
            heads: dense(&mut map, "probe.heads")?,
            seed: self.header.seed,
        };
        let expected = ProbeParams::init(0);
        for (a, b) in params.params().iter().zip(expected.params()) {
            if a.shape() != b.shape() {
                return Err(GenError::Checkpoint(format!(
                    "probe tensor shape {:?} is not {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(params)
    }

    /// The generator of a GAN checkpoint or the decoder of a VAE checkpoint.
    pub fn to_generator(&self) -> Result<GeneratorParams, GenError> {
        match self.header.kind {
            ModelKind::Gan => Ok(self.to_gan()?.0),
            ModelKind::Vae => Ok(self.to_vae()?.decoder),
            ModelKind::Probe => Err(GenError::Checkpoint(
                "a probe checkpoint has no generator".into(),
            )),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, GenError> {
        let header =
            serde_json::to_vec(&self.header).map_err(|e| GenError::Checkpoint(e.to_string()))?;
        let floats: usize = self.tensors.iter().map(Tensor::len).sum();
        let mut out = Vec::with_capacity(16 + header.len() + floats * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.header.version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GenError> {
        let bad = |msg: &str| GenError::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(GenError::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let blob_start = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[16..blob_start])
            .map_err(|e| GenError::Checkpoint(e.to_string()))?;
        if header.version != version {
            return Err(bad("header version disagrees with preamble"));
        }
        let blob = &bytes[blob_start..];
        let floats: usize = header
            .tensors
            .iter()
            .map(|e| e.shape.iter().product::<usize>())
            .sum();
        if blob.len() != floats * 4 {
            return Err(GenError::Checkpoint(format!(
                "header shapes account for {} bytes, blob has {}",
                floats * 4,
                blob.len()
            )));
        }
        let mut values = blob
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))));
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n = e.shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(GenError::Checkpoint(format!(
                    "tensor `{}` holds non-finite values",
                    e.name
                )));
            }
            tensors.push(Tensor::new(e.shape.clone(), data)?);
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), GenError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GenError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
