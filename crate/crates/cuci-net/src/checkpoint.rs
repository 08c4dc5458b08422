//! Checkpoint container: one line of JSON (config echo, epoch, parameter
//! registry) followed by raw little-endian f32 parameter data.
//!
//! Loading rebuilds the parameter registry from the header's config and
//! verifies every header record against it — name, shape, offset, and total
//! payload length must all agree before any value is accepted.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CuciNet, ModelConfig};
use crate::nn::ParamStore;

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: [usize; 2],
    /// Scalar (not byte) offset into the payload.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    epoch: usize,
    params: Vec<ParamRecord>,
}

/// A checkpoint restored into a freshly constructed model.
pub struct Loaded {
    pub config: ModelConfig,
    pub epoch: usize,
    pub net: CuciNet,
    pub store: ParamStore,
}

pub fn save(path: &Path, config: &ModelConfig, epoch: usize, store: &ParamStore) -> Result<()> {
    let mut records = Vec::with_capacity(store.len());
    let mut offset = 0usize;
    for (_, entry) in store.iter() {
        let (r, c) = entry.value.dim();
        records.push(ParamRecord { name: entry.name.clone(), shape: [r, c], offset });
        offset += r * c;
    }
    let header = Header { config: config.clone(), epoch, params: records };
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut w, &header)
        .map_err(|e| Error::Data(format!("checkpoint: header encode failed: {e}")))?;
    w.write_all(b"\n")?;
    for (_, entry) in store.iter() {
        for &x in entry.value.iter() {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Loaded> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(Error::Data(format!(
                "checkpoint '{}': missing header terminator",
                path.display()
            )));
        }
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
    }
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Data(format!("checkpoint '{}': bad header: {e}", path.display())))?;
    header.config.validate()?;

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let expected_scalars: usize = header.params.iter().map(|p| p.shape[0] * p.shape[1]).sum();
    if payload.len() != expected_scalars * 4 {
        return Err(Error::Data(format!(
            "checkpoint '{}': payload is {} bytes, registry declares {}",
            path.display(),
            payload.len(),
            expected_scalars * 4
        )));
    }

    // The seed is irrelevant: every value is overwritten below.
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = CuciNet::new(&mut store, &mut rng, &header.config)?;

    if header.params.len() != store.len() {
        return Err(Error::Data(format!(
            "checkpoint '{}': registry has {} parameters, this config builds {}",
            path.display(),
            header.params.len(),
            store.len()
        )));
    }
    let mut expected_offset = 0usize;
    for record in &header.params {
        let id = store.find(&record.name).ok_or_else(|| {
            Error::Data(format!(
                "checkpoint '{}': unknown parameter '{}'",
                path.display(),
                record.name
            ))
        })?;
        let dim = store.value(id).dim();
        if [dim.0, dim.1] != record.shape {
            return Err(Error::Data(format!(
                "checkpoint '{}': parameter '{}' has shape {}x{}, this config expects {}x{}",
                path.display(),
                record.name,
                record.shape[0],
                record.shape[1],
                dim.0,
                dim.1
            )));
        }
        if record.offset != expected_offset {
            return Err(Error::Data(format!(
                "checkpoint '{}': parameter '{}' declares offset {}, expected {}",
                path.display(),
                record.name,
                record.offset,
                expected_offset
            )));
        }
        let n = dim.0 * dim.1;
        let base = record.offset * 4;
        let values: Vec<f64> = (0..n)
            .map(|i| {
                let b = base + i * 4;
                f32::from_le_bytes([payload[b], payload[b + 1], payload[b + 2], payload[b + 3]])
                    as f64
            })
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "checkpoint '{}': parameter '{}' contains non-finite values",
                path.display(),
                record.name
            )));
        }
        let arr = Array2::from_shape_vec(dim, values)
            .expect("length checked against the declared shape");
        store.set_value(id, arr);
        expected_offset += n;
    }

    Ok(Loaded { config: header.config, epoch: header.epoch, net, store })
}
