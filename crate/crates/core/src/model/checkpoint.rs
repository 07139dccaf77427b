//! Checkpoint format: a `SLIM` header followed by named f64 tensors.
//!
//! Layout (little-endian throughout):
//!   magic   4 bytes  "SLIM"
//!   version u8       currently 1
//!   n       u8       ensemble width
//!   seed    u64      construction seed (rebuilds the skeleton)
//!   digest  u64      architecture fingerprint; must match the loader's
//!   then, until EOF: name_len u16, name bytes (utf-8),
//!                    rank u8, dims rank*u32, values numel*f64
//!
//! Every parameter is present, the frozen teacher included, so a file is
//! a complete, self-describing model.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{ModelError, SlimModel};

const MAGIC: &[u8; 4] = b"SLIM";
const VERSION: u8 = 1;

pub fn save_checkpoint<T: Scalar>(model: &SlimModel<T>, path: &Path) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    let n = u8::try_from(model.n)
        .map_err(|_| ModelError::Format(format!("ensemble width {} exceeds u8", model.n)))?;
    w.write_all(&[n])?;
    w.write_all(&model.seed.to_le_bytes())?;
    w.write_all(&model.digest().to_le_bytes())?;

    let mut result = Ok(());
    model.visit(|name, _, tensor| {
        if result.is_err() {
            return;
        }
        result = write_tensor(&mut w, name, tensor);
    });
    result?;
    w.flush()?;
    Ok(())
}

fn write_tensor<T: Scalar>(
    w: &mut impl Write,
    name: &str,
    tensor: &Tensor<T>,
) -> Result<(), ModelError> {
    let name_len = u16::try_from(name.len())
        .map_err(|_| ModelError::Format(format!("parameter name {name:?} too long")))?;
    w.write_all(&name_len.to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    let rank = u8::try_from(tensor.shape().len())
        .map_err(|_| ModelError::Format(format!("parameter {name:?} rank exceeds u8")))?;
    w.write_all(&[rank])?;
    for &d in tensor.shape() {
        let d = u32::try_from(d)
            .map_err(|_| ModelError::Format(format!("parameter {name:?} dim exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for &v in tensor.data() {
        w.write_all(&v.as_f64().to_le_bytes())?;
    }
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<SlimModel<T>, ModelError> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Format(format!("bad magic {magic:02x?}")));
    }
    let version = read_u8(&mut r)?;
    if version != VERSION {
        return Err(ModelError::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let n = read_u8(&mut r)? as usize;
    let seed = read_u64(&mut r)?;
    let file_digest = read_u64(&mut r)?;

    let mut model = SlimModel::<T>::new(n, seed)?;
    let expected = model.digest();
    if file_digest != expected {
        return Err(ModelError::DigestMismatch { expected, actual: file_digest });
    }

    let mut stored: HashMap<String, Tensor<T>> = HashMap::new();
    loop {
        let mut len_buf = [0u8; 2];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u16::from_le_bytes(len_buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| ModelError::Format(format!("non-utf8 parameter name: {e}")))?;
        let rank = read_u8(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut d = [0u8; 4];
            r.read_exact(&mut d)?;
            shape.push(u32::from_le_bytes(d) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut v = [0u8; 8];
            r.read_exact(&mut v)?;
            data.push(T::from_f64(f64::from_le_bytes(v)));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| ModelError::Format(format!("parameter {name}: {e}")))?;
        if stored.insert(name.clone(), tensor).is_some() {
            return Err(ModelError::Format(format!("duplicate parameter {name}")));
        }
    }

    // Every model parameter must be present with the right shape...
    let mut missing = None;
    let mut shape_err = None;
    model.visit_mut(|name, _, tensor| {
        if missing.is_some() || shape_err.is_some() {
            return;
        }
        match stored.remove(name) {
            None => missing = Some(name.to_string()),
            Some(loaded) => {
                if loaded.shape() != tensor.shape() {
                    shape_err = Some(ModelError::ParamShape {
                        name: name.to_string(),
                        expected: tensor.shape().to_vec(),
                        actual: loaded.shape().to_vec(),
                    });
                } else {
                    *tensor = loaded;
                }
            }
        }
    });
    if let Some(name) = missing {
        return Err(ModelError::MissingParam(name));
    }
    if let Some(e) = shape_err {
        return Err(e);
    }
    // ...and nothing extra may remain.
    if let Some(name) = stored.into_keys().next() {
        return Err(ModelError::UnknownParam(name));
    }
    Ok(model)
}

fn read_u8(r: &mut impl Read) -> Result<u8, ModelError> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u64(r: &mut impl Read) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
