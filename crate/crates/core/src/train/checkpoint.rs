//! Versioned binary checkpoints: parameters, optimizer accumulators, and the
//! threshold table, guarded by a magic header and parameter-layout hashes.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use super::optim::OptimizerState;
use crate::threshold::ThresholdTable;

const MAGIC: &[u8; 8] = b"VRSCKPT\x01";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("parameter layout hash mismatch: file {file:#x}, expected {expected:#x}")]
    LayoutHash { file: u64, expected: u64 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Everything needed to resume a belief-net training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub visible: u32,
    pub hidden: Vec<u32>,
    pub epoch: u32,
    pub step: u64,
    pub theta_hash: u64,
    pub theta: Vec<f64>,
    pub phi_hash: u64,
    pub phi: Vec<f64>,
    pub opt_theta: OptimizerState,
    pub opt_phi: OptimizerState,
    pub gamma: f64,
    pub est_samples: u64,
    pub refresh_every: u64,
    pub thresholds: Vec<f64>,
}

fn write_f64s(out: &mut dyn Write, values: &[f64]) -> std::io::Result<()> {
    out.write_u64::<LittleEndian>(values.len() as u64)?;
    for v in values {
        out.write_f64::<LittleEndian>(*v)?;
    }
    Ok(())
}

fn read_f64s(input: &mut dyn Read) -> Result<Vec<f64>, CheckpointError> {
    let len = input.read_u64::<LittleEndian>()? as usize;
    if len > (1 << 28) {
        return Err(CheckpointError::Malformed(format!("vector length {len}")));
    }
    let mut values = Vec::with_capacity(len);
    for _ in 0..len {
        values.push(input.read_f64::<LittleEndian>()?);
    }
    Ok(values)
}

fn write_optimizer(out: &mut dyn Write, opt: &OptimizerState) -> std::io::Result<()> {
    match opt {
        OptimizerState::SgdMomentum {
            lr,
            momentum,
            velocity,
        } => {
            out.write_u8(0)?;
            out.write_f64::<LittleEndian>(*lr)?;
            out.write_f64::<LittleEndian>(*momentum)?;
            write_f64s(out, velocity)?;
        }
        OptimizerState::Adam {
            lr,
            beta1,
            beta2,
            eps,
            step,
            first_moment,
            second_moment,
        } => {
            out.write_u8(1)?;
            out.write_f64::<LittleEndian>(*lr)?;
            out.write_f64::<LittleEndian>(*beta1)?;
            out.write_f64::<LittleEndian>(*beta2)?;
            out.write_f64::<LittleEndian>(*eps)?;
            out.write_u64::<LittleEndian>(*step)?;
            write_f64s(out, first_moment)?;
            write_f64s(out, second_moment)?;
        }
    }
    Ok(())
}

fn read_optimizer(input: &mut dyn Read) -> Result<OptimizerState, CheckpointError> {
    match input.read_u8()? {
        0 => Ok(OptimizerState::SgdMomentum {
            lr: input.read_f64::<LittleEndian>()?,
            momentum: input.read_f64::<LittleEndian>()?,
            velocity: read_f64s(input)?,
        }),
        1 => Ok(OptimizerState::Adam {
            lr: input.read_f64::<LittleEndian>()?,
            beta1: input.read_f64::<LittleEndian>()?,
            beta2: input.read_f64::<LittleEndian>()?,
            eps: input.read_f64::<LittleEndian>()?,
            step: input.read_u64::<LittleEndian>()?,
            first_moment: read_f64s(input)?,
            second_moment: read_f64s(input)?,
        }),
        tag => Err(CheckpointError::Malformed(format!("optimizer tag {tag}"))),
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(VERSION)?;
        out.write_u32::<LittleEndian>(self.visible)?;
        out.write_u32::<LittleEndian>(self.hidden.len() as u32)?;
        for h in &self.hidden {
            out.write_u32::<LittleEndian>(*h)?;
        }
        out.write_u32::<LittleEndian>(self.epoch)?;
        out.write_u64::<LittleEndian>(self.step)?;
        out.write_u64::<LittleEndian>(self.theta_hash)?;
        write_f64s(&mut out, &self.theta)?;
        out.write_u64::<LittleEndian>(self.phi_hash)?;
        write_f64s(&mut out, &self.phi)?;
        write_optimizer(&mut out, &self.opt_theta)?;
        write_optimizer(&mut out, &self.opt_phi)?;
        out.write_f64::<LittleEndian>(self.gamma)?;
        out.write_u64::<LittleEndian>(self.est_samples)?;
        out.write_u64::<LittleEndian>(self.refresh_every)?;
        write_f64s(&mut out, &self.thresholds)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = input.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let visible = input.read_u32::<LittleEndian>()?;
        let n_hidden = input.read_u32::<LittleEndian>()? as usize;
        if n_hidden > 64 {
            return Err(CheckpointError::Malformed(format!("{n_hidden} layers")));
        }
        let mut hidden = Vec::with_capacity(n_hidden);
        for _ in 0..n_hidden {
            hidden.push(input.read_u32::<LittleEndian>()?);
        }
        let epoch = input.read_u32::<LittleEndian>()?;
        let step = input.read_u64::<LittleEndian>()?;
        let theta_hash = input.read_u64::<LittleEndian>()?;
        let theta = read_f64s(&mut input)?;
        let phi_hash = input.read_u64::<LittleEndian>()?;
        let phi = read_f64s(&mut input)?;
        let opt_theta = read_optimizer(&mut input)?;
        let opt_phi = read_optimizer(&mut input)?;
        let gamma = input.read_f64::<LittleEndian>()?;
        let est_samples = input.read_u64::<LittleEndian>()?;
        let refresh_every = input.read_u64::<LittleEndian>()?;
        let thresholds = read_f64s(&mut input)?;
        Ok(Checkpoint {
            visible,
            hidden,
            epoch,
            step,
            theta_hash,
            theta,
            phi_hash,
            phi,
            opt_theta,
            opt_phi,
            gamma,
            est_samples,
            refresh_every,
            thresholds,
        })
    }

    pub fn threshold_table(&self) -> Result<ThresholdTable, CheckpointError> {
        let mut table = ThresholdTable::all_infinite(
            self.thresholds.len(),
            self.gamma,
            self.est_samples.max(1) as usize,
            self.refresh_every.max(1),
        )
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        table
            .thresholds_mut()
            .copy_from_slice(&self.thresholds);
        Ok(table)
    }
}
