//! Versioned binary serialization of flow stacks.
//!
//! Layout: magic `RGFS`, version, latent dim, layer count, architecture
//! block, per-layer descriptors, then the raw parameter floats (64-bit
//! little-endian). Round trips are bit-exact.

use std::path::Path;

use crate::diffcore::Activation;
use crate::error::{Error, Result};
use crate::io::{atomic_write, ByteReader, ByteWriter};

use super::{CouplingKind, FlowConfig, FlowStack, Layer};

const MAGIC: &[u8; 4] = b"RGFS";
const VERSION: u32 = 1;

fn kind_tag(kind: &CouplingKind) -> (u8, u32, f64) {
    match kind {
        CouplingKind::Affine => (0, 0, 0.0),
        CouplingKind::RqSpline { bins, tail_bound } => (1, *bins as u32, *tail_bound),
    }
}

fn kind_from(tag: u8, bins: u32, tail: f64) -> Result<CouplingKind> {
    match tag {
        0 => Ok(CouplingKind::Affine),
        1 => Ok(CouplingKind::RqSpline { bins: bins as usize, tail_bound: tail }),
        other => Err(Error::Parse(format!("unknown coupling kind tag {other}"))),
    }
}

/// Serializes a flow stack to bytes.
pub fn flow_to_bytes(stack: &FlowStack) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(stack.latent_dim as u32);
    w.u32(stack.layers.len() as u32);

    let cfg = &stack.config;
    let (ktag, bins, tail) = kind_tag(&cfg.kind);
    w.u8(ktag);
    w.u32(bins);
    w.f64(tail);
    w.u32(cfg.flow_steps as u32);
    w.u32(cfg.couplings_per_step as u32);
    w.u32(cfg.hidden_width as u32);
    w.u32(cfg.hidden_layers as u32);
    w.u8(match cfg.activation {
        Activation::Tanh => 0,
        Activation::Relu => 1,
    });
    w.u8(cfg.zero_init_last as u8);
    w.u64(stack.seed);

    for layer in &stack.layers {
        match layer {
            Layer::Coupling(cl) => {
                let (t, _, _) = kind_tag(&cl.kind);
                w.u8(t);
                w.u32(cl.param_offset as u32);
                w.u32(cl.conditioner.param_count() as u32);
            }
            Layer::Permutation { .. } => {
                w.u8(2);
                w.u32(0);
                w.u32(0);
            }
            Layer::Elementwise { kind, param_offset } => {
                let (t, _, _) = kind_tag(kind);
                w.u8(3 + t);
                w.u32(*param_offset as u32);
                w.u32(0);
            }
        }
    }

    w.u64(stack.params.len() as u64);
    for &v in stack.params.values() {
        w.f64(v);
    }
    w.into_inner()
}

/// Deserializes a flow stack, validating the header against the rebuilt
/// architecture.
pub fn flow_from_bytes(bytes: &[u8]) -> Result<FlowStack> {
    let mut r = ByteReader::new(bytes);
    if r.bytes(4)? != MAGIC {
        return Err(Error::Parse("not a flow blob (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Parse(format!("unsupported flow blob version {version}")));
    }
    let latent_dim = r.u32()? as usize;
    let n_layers = r.u32()? as usize;

    let ktag = r.u8()?;
    let bins = r.u32()?;
    let tail = r.f64()?;
    let kind = kind_from(ktag, bins, tail)?;
    let flow_steps = r.u32()? as usize;
    let couplings_per_step = r.u32()? as usize;
    let hidden_width = r.u32()? as usize;
    let hidden_layers = r.u32()? as usize;
    let activation = match r.u8()? {
        0 => Activation::Tanh,
        1 => Activation::Relu,
        other => return Err(Error::Parse(format!("unknown activation tag {other}"))),
    };
    let zero_init_last = r.u8()? != 0;
    let seed = r.u64()?;

    let config = FlowConfig {
        latent_dim,
        flow_steps,
        couplings_per_step,
        kind,
        hidden_width,
        hidden_layers,
        activation,
        zero_init_last,
    };
    let mut stack = FlowStack::build(&config, seed)?;
    if stack.layers.len() != n_layers {
        return Err(Error::Parse(format!(
            "layer count mismatch: blob says {n_layers}, architecture gives {}",
            stack.layers.len()
        )));
    }
    for layer in &stack.layers {
        let tag = r.u8()?;
        let off = r.u32()? as usize;
        let _count = r.u32()?;
        let ok = match layer {
            Layer::Coupling(cl) => {
                let (t, _, _) = kind_tag(&cl.kind);
                tag == t && off == cl.param_offset
            }
            Layer::Permutation { .. } => tag == 2,
            Layer::Elementwise { kind, param_offset } => {
                let (t, _, _) = kind_tag(kind);
                tag == 3 + t && off == *param_offset
            }
        };
        if !ok {
            return Err(Error::Parse("layer descriptor mismatch".into()));
        }
    }

    let count = r.u64()? as usize;
    if count != stack.params.len() {
        return Err(Error::Parse(format!(
            "parameter count mismatch: blob has {count}, architecture needs {}",
            stack.params.len()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(r.f64()?);
    }
    stack.set_params(values)?;
    Ok(stack)
}

pub fn save_flow(stack: &FlowStack, path: &Path) -> Result<()> {
    atomic_write(path, &flow_to_bytes(stack))
}

pub fn load_flow(path: &Path) -> Result<FlowStack> {
    let bytes = std::fs::read(path)?;
    flow_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::FlowConfig;

    #[test]
    fn round_trip_is_bit_exact() {
        for kind in [CouplingKind::Affine, CouplingKind::default_spline()] {
            let mut cfg = FlowConfig::new(6, 2, 2, kind);
            cfg.hidden_width = 8;
            let mut fs = FlowStack::build(&cfg, 42).unwrap();
            fs.randomize_params(9, 0.5);
            let bytes = flow_to_bytes(&fs);
            let back = flow_from_bytes(&bytes).unwrap();
            assert_eq!(back.latent_dim(), fs.latent_dim());
            assert_eq!(back.params().values().len(), fs.params().values().len());
            for (a, b) in back.params().values().iter().zip(fs.params().values()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
            let again = flow_to_bytes(&back);
            assert_eq!(bytes, again);
        }
    }

    #[test]
    fn corrupted_blob_is_rejected() {
        let cfg = FlowConfig::new(2, 1, 1, CouplingKind::Affine);
        let fs = FlowStack::build(&cfg, 0).unwrap();
        let mut bytes = flow_to_bytes(&fs);
        bytes[0] = b'X';
        assert!(flow_from_bytes(&bytes).is_err());
        let bytes = flow_to_bytes(&fs);
        assert!(flow_from_bytes(&bytes[..bytes.len() - 4]).is_err());
    }

    #[test]
    fn one_dimensional_stack_round_trips() {
        let cfg = FlowConfig::new(1, 2, 1, CouplingKind::default_spline());
        let mut fs = FlowStack::build(&cfg, 3).unwrap();
        fs.randomize_params(2, 0.3);
        let back = flow_from_bytes(&flow_to_bytes(&fs)).unwrap();
        assert_eq!(back.params().values(), fs.params().values());
    }
}
