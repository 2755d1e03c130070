//! Versioned binary checkpoints.
//!
//! Layout (all integers and floats little-endian):
//! - magic `OPAC1`
//! - u32 array count
//! - per array: u32 rank, u64 per-dimension sizes, f64 values
//! - f64 alpha, u64 env-step counter, u64 gradient-step counter
//!
//! Arrays appear in a fixed order: actor model (trunk layers, mean head,
//! log-std head, each as weight then bias), actor target, the three critic
//! models, then the three critic targets. Round-trips are byte-exact.

use crate::agent::AgentState;
use crate::diffcore::DiffArray;
use crate::ensemble::CriticTriple;
use crate::nets::{Activation, ActorNet, CriticNet, ParamSet};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 5] = b"OPAC1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Networks and counters restored from a checkpoint file.
pub struct Checkpoint {
    pub actor: ActorNet,
    pub actor_target: ActorNet,
    pub critics: CriticTriple,
    pub alpha: f64,
    pub env_steps: u64,
    pub grad_steps: u64,
}

fn write_array(w: &mut impl Write, arr: &DiffArray) -> io::Result<()> {
    w.write_all(&(arr.shape().len() as u32).to_le_bytes())?;
    for &d in arr.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in arr.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_array(r: &mut impl Read) -> Result<DiffArray, CheckpointError> {
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(CheckpointError::Corrupt(format!("array rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    if numel == 0 || numel > (1 << 30) {
        return Err(CheckpointError::Corrupt(format!("array shape {shape:?}")));
    }
    let mut data = vec![0.0f64; numel];
    let mut buf = [0u8; 8];
    for v in data.iter_mut() {
        r.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    Ok(DiffArray::new(shape, data))
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read) -> io::Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn actor_arrays(actor: &ActorNet) -> Vec<&DiffArray> {
    actor.params().iter().flat_map(|p| p.arrays()).collect()
}

/// Serialize the agent's networks, temperature, and counters.
pub fn save(state: &AgentState, path: &Path) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut arrays: Vec<&DiffArray> = Vec::new();
    arrays.extend(actor_arrays(&state.actor));
    arrays.extend(actor_arrays(&state.actor_target));
    for c in &state.critics.models {
        arrays.extend(c.params().arrays());
    }
    for c in &state.critics.targets {
        arrays.extend(c.params().arrays());
    }

    w.write_all(MAGIC)?;
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for arr in arrays {
        write_array(&mut w, arr)?;
    }
    w.write_all(&state.alpha.to_le_bytes())?;
    w.write_all(&state.env_steps.to_le_bytes())?;
    w.write_all(&state.grad_steps.to_le_bytes())?;
    w.flush()
}

/// Restore a checkpoint. The hidden-layer count is recovered from the array
/// count; activations are the fixed relu of this network family.
pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let n_arrays = read_u32(&mut r)? as usize;
    // Actors hold 2k+4 arrays each, critics 2k+2 each (k hidden layers):
    // total 2(2k+4) + 6(2k+2) = 16k + 20.
    if n_arrays < 36 || !(n_arrays - 20).is_multiple_of(16) {
        return Err(CheckpointError::Corrupt(format!(
            "unexpected array count {n_arrays}"
        )));
    }
    let k = (n_arrays - 20) / 16;

    let mut arrays = Vec::with_capacity(n_arrays);
    for _ in 0..n_arrays {
        arrays.push(read_array(&mut r)?);
    }
    let alpha = read_f64(&mut r)?;
    let env_steps = read_u64(&mut r)?;
    let grad_steps = read_u64(&mut r)?;

    let mut it = arrays.into_iter();
    let mut take = |n: usize| -> Vec<DiffArray> { it.by_ref().take(n).collect() };
    let read_actor = |take: &mut dyn FnMut(usize) -> Vec<DiffArray>| {
        let trunk = ParamSet::from_arrays(take(2 * k));
        let mean = ParamSet::from_arrays(take(2));
        let logstd = ParamSet::from_arrays(take(2));
        ActorNet::from_parts(Activation::Relu, trunk, mean, logstd)
    };
    let actor = read_actor(&mut take);
    let actor_target = read_actor(&mut take);
    let action_dim = actor.action_dim;
    let read_critic = |take: &mut dyn FnMut(usize) -> Vec<DiffArray>| {
        CriticNet::from_parts(
            Activation::Relu,
            action_dim,
            ParamSet::from_arrays(take(2 * (k + 1))),
        )
    };
    let models = [
        read_critic(&mut take),
        read_critic(&mut take),
        read_critic(&mut take),
    ];
    let targets = [
        read_critic(&mut take),
        read_critic(&mut take),
        read_critic(&mut take),
    ];

    Ok(Checkpoint {
        actor,
        actor_target,
        critics: CriticTriple { models, targets },
        alpha,
        env_steps,
        grad_steps,
    })
}
