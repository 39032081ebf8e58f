//! Single-file model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "SG2SCKPT"
//! version   u32      1
//! spec      u32 length + UTF-8 JSON (model kind, schema, architecture)
//! step      u64
//! count     u32
//! count ×   u32 length + UTF-8 name, u32 rank, rank × u64 dims,
//!           prod(dims) × f32 values
//! ```

use std::io::{self, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::CheckpointError;
use crate::generator::{Generator, GeneratorConfig};
use crate::graph::Schema;
use crate::nn::ParamStore;
use crate::processor::{Dims, Processor, ProcessorConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SG2SCKPT";
pub const VERSION: u32 = 1;

/// What a checkpoint holds: enough to rebuild the network around the
/// stored weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Processor { schema: Schema, config: ProcessorConfig },
    Generator { schema: Schema, config: GeneratorConfig },
}

impl ModelSpec {
    pub fn schema(&self) -> &Schema {
        match self {
            ModelSpec::Processor { schema, .. } | ModelSpec::Generator { schema, .. } => schema,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ModelSpec::Processor { .. } => "processor",
            ModelSpec::Generator { .. } => "generator",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub step: u64,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn of_processor(p: &Processor, schema: &Schema, step: u64) -> Self {
        Self {
            spec: ModelSpec::Processor {
                schema: schema.clone(),
                config: p.config.clone(),
            },
            step,
            params: p.params.clone(),
        }
    }

    pub fn of_generator(g: &Generator, schema: &Schema, step: u64) -> Self {
        Self {
            spec: ModelSpec::Generator {
                schema: schema.clone(),
                config: g.config.clone(),
            },
            step,
            params: g.params.clone(),
        }
    }

    pub fn into_processor(self) -> Result<(Processor, Schema), CheckpointError> {
        match self.spec {
            ModelSpec::Processor { schema, config } => {
                let p = Processor::from_params(config, Dims::of(&schema), self.params)
                    .map_err(|e| CheckpointError::Incompatible(e.to_string()))?;
                Ok((p, schema))
            }
            other => Err(CheckpointError::Incompatible(format!(
                "expected a processor checkpoint, found a {} checkpoint",
                other.kind()
            ))),
        }
    }

    pub fn into_generator(self) -> Result<(Generator, Schema), CheckpointError> {
        match self.spec {
            ModelSpec::Generator { schema, config } => {
                let g = Generator::from_params(config, schema.classes.len(), self.params)
                    .map_err(|e| CheckpointError::Incompatible(e.to_string()))?;
                Ok((g, schema))
            }
            other => Err(CheckpointError::Incompatible(format!(
                "expected a generator checkpoint, found a {} checkpoint",
                other.kind()
            ))),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        let spec = serde_json::to_vec(&self.spec).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        write_bytes(&mut w, &spec)?;
        w.write_u64::<LittleEndian>(self.step)?;
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for (name, t) in self.params.iter() {
            write_bytes(&mut w, name.as_bytes())?;
            w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
            for &d in t.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in t.data() {
                w.write_f32::<LittleEndian>(v as f32)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let spec_bytes = read_bytes(&mut r)?;
        let spec: ModelSpec = serde_json::from_slice(&spec_bytes)
            .map_err(|e| CheckpointError::Corrupt(format!("model spec: {e}")))?;
        let step = r.read_u64::<LittleEndian>().map_err(truncated)?;
        let count = r.read_u32::<LittleEndian>().map_err(truncated)?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = String::from_utf8(read_bytes(&mut r)?)
                .map_err(|_| CheckpointError::Corrupt("parameter name is not UTF-8".into()))?;
            let rank = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
            if rank > 8 {
                return Err(CheckpointError::Corrupt(format!("`{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u64::<LittleEndian>().map_err(truncated)? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= 1 << 28)
                .ok_or_else(|| CheckpointError::Corrupt(format!("`{name}` has shape {shape:?}")))?;
            let mut data = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut data).map_err(truncated)?;
            if params.get(&name).is_some() {
                return Err(CheckpointError::Corrupt(format!("duplicate parameter `{name}`")));
            }
            params.insert(name, Tensor::new(&shape, data.into_iter().map(f64::from).collect()));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(Self { spec, step, params })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        Self::read_from(bytes)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// The weights as they will read back from disk (rounded to `f32`).
    pub fn rounded(&self) -> Self {
        Self::from_bytes(&self.to_bytes()).expect("round trip of a fresh checkpoint")
    }
}

fn truncated(e: io::Error) -> CheckpointError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        CheckpointError::Corrupt("truncated file".into())
    } else {
        CheckpointError::Io(e)
    }
}

fn write_bytes<W: Write>(w: &mut W, b: &[u8]) -> io::Result<()> {
    w.write_u32::<LittleEndian>(b.len() as u32)?;
    w.write_all(b)
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>, CheckpointError> {
    let n = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    if n > 1 << 24 {
        return Err(CheckpointError::Corrupt(format!("string of {n} bytes")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(b)
}
