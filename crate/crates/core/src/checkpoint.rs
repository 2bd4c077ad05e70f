//! Named-tensor checkpoints.
//!
//! Little-endian layout: magic `FGCK`, `u32` version, `u32` tensor count, then
//! per tensor a `u16` name length, the UTF-8 name, a `u8` rank, `rank × u32`
//! extents and the `f32` elements in row-major order. The producing stage is
//! the name prefix before the first `.` (`gan.critic.0.weight`).

use std::path::Path;

use crate::array::Array;
use crate::gcnattn::GcnParams;
use crate::genfeat::GanNets;
use crate::io::{self, FormatError};
use crate::nn::{Activation, LinearLayer, Mlp};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Array)>,
}

fn malformed(detail: impl Into<String>) -> FormatError {
    FormatError::Malformed {
        what: "checkpoint".into(),
        detail: detail.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(FormatError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, value: Array) {
        self.tensors.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn require(&self, name: &str) -> Result<&Array, FormatError> {
        self.get(name).ok_or_else(|| malformed(format!("missing tensor {name:?}")))
    }

    pub fn stage(&self) -> Option<&str> {
        self.tensors.first().and_then(|(n, _)| n.split('.').next())
    }

    pub fn encode(&self) -> Result<Vec<u8>, FormatError> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, a) in &self.tensors {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| FormatError::LabelTooLong(name.clone()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            let rank = u8::try_from(a.shape().len()).map_err(|_| malformed(format!("{name}: rank too large")))?;
            out.push(rank);
            for &d in a.shape() {
                let d = u32::try_from(d).map_err(|_| malformed(format!("{name}: extent {d} too large")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in a.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(FormatError::Magic {
                expected: "FGCK".into(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::Version(version));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| FormatError::Utf8)?.to_owned();
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or(FormatError::Truncated(bytes.len()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let a = Array::new(shape, data).map_err(|e| malformed(format!("{name}: {e}")))?;
            tensors.push((name, a));
        }
        if r.pos != bytes.len() {
            return Err(FormatError::Trailing(bytes.len() - r.pos));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        io::write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::decode(&io::read_file(path)?)
    }
}

fn push_mlp(ck: &mut Checkpoint, prefix: &str, mlp: &Mlp) {
    for (i, layer) in mlp.layers.iter().enumerate() {
        ck.push(format!("{prefix}.{i}.weight"), layer.weight.clone());
        ck.push(format!("{prefix}.{i}.bias"), layer.bias.clone());
    }
}

fn read_mlp(ck: &Checkpoint, prefix: &str, hidden: Activation) -> Result<Mlp, FormatError> {
    let mut layers = vec![];
    while let Some(weight) = ck.get(&format!("{prefix}.{}.weight", layers.len())) {
        let bias = ck.require(&format!("{prefix}.{}.bias", layers.len()))?;
        layers.push(LinearLayer {
            weight: weight.clone(),
            bias: bias.clone(),
        });
    }
    if layers.is_empty() {
        return Err(malformed(format!("no layers under {prefix:?}")));
    }
    let mut acts = vec![hidden; layers.len() - 1];
    acts.push(Activation::None);
    Mlp::from_layers(layers, acts).map_err(|e| malformed(format!("{prefix}: {e}")))
}

fn scalar(ck: &Checkpoint, name: &str) -> Result<f64, FormatError> {
    let a = ck.require(name)?;
    if a.len() != 1 {
        return Err(malformed(format!("{name} should hold one value")));
    }
    Ok(a.data()[0])
}

pub fn gan_checkpoint(nets: &GanNets, leaky_slope: f64) -> Checkpoint {
    let mut ck = Checkpoint::default();
    ck.push("gan.d_z", Array::scalar(nets.d_z as f64));
    ck.push("gan.leaky_slope", Array::scalar(leaky_slope));
    push_mlp(&mut ck, "gan.generator", &nets.generator);
    push_mlp(&mut ck, "gan.critic", &nets.critic);
    push_mlp(&mut ck, "gan.decoder", &nets.decoder);
    ck
}

pub fn gan_from_checkpoint(ck: &Checkpoint) -> Result<GanNets, FormatError> {
    let act = Activation::LeakyRelu(scalar(ck, "gan.leaky_slope")?);
    let d_z = scalar(ck, "gan.d_z")? as usize;
    let generator = read_mlp(ck, "gan.generator", act)?;
    let critic = read_mlp(ck, "gan.critic", act)?;
    let decoder = read_mlp(ck, "gan.decoder", act)?;
    let (d_x, d_c) = (generator.k_out(), decoder.k_out());
    if generator.k_in() != d_z + d_c || critic.k_in() != d_x + d_c || decoder.k_in() != d_x {
        return Err(malformed("generator, critic and decoder widths disagree"));
    }
    Ok(GanNets {
        generator,
        critic,
        decoder,
        d_z,
        d_c,
        d_x,
    })
}

/// Layer weights, the adjacency they were trained against, and the resulting
/// classifier rows.
pub fn gcn_checkpoint(params: &GcnParams, adjacency: &Array, classifiers: &Array) -> Checkpoint {
    let mut ck = Checkpoint::default();
    ck.push("gcn.leaky_slope", Array::scalar(params.leaky_slope));
    for (i, p) in params.phi.iter().enumerate() {
        ck.push(format!("gcn.phi.{i}"), p.clone());
    }
    ck.push("gcn.adjacency", adjacency.clone());
    ck.push("gcn.classifiers", classifiers.clone());
    ck
}

pub fn gcn_from_checkpoint(ck: &Checkpoint) -> Result<(GcnParams, Array, Array), FormatError> {
    let leaky_slope = scalar(ck, "gcn.leaky_slope")?;
    let mut phi = vec![];
    while let Some(p) = ck.get(&format!("gcn.phi.{}", phi.len())) {
        phi.push(p.clone());
    }
    Ok((
        GcnParams { phi, leaky_slope },
        ck.require("gcn.adjacency")?.clone(),
        ck.require("gcn.classifiers")?.clone(),
    ))
}
