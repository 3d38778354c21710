//! Embedding files. A header `{provider_id, dimension, float_width}` is
//! followed by one record per id. Paths ending in `.jsonl` use JSON lines,
//! anything else uses the binary layout:
//!
//! ```text
//! b"DTEMB\0\0\x01" | u32 header_len | header JSON | u64 count |
//! count × (u32 id_len | id bytes | dimension × f32/f64)
//! ```
//!
//! All integers and floats are little-endian.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EmbeddingError, EmbeddingSet, FloatWidth};

const MAGIC: &[u8; 8] = b"DTEMB\0\0\x01";

#[derive(Serialize, Deserialize)]
struct Header {
    provider_id: String,
    dimension: usize,
    float_width: FloatWidth,
}

#[derive(Serialize, Deserialize)]
struct JsonRecord<V> {
    id: String,
    vector: V,
}

fn header_of(set: &EmbeddingSet) -> Header {
    Header {
        provider_id: set.provider_id.clone(),
        dimension: set.dimension,
        float_width: set.float_width,
    }
}

fn is_jsonl(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "jsonl")
}

pub(super) fn encode_binary(set: &EmbeddingSet, out: &mut impl Write) -> std::io::Result<()> {
    let header = serde_json::to_vec(&header_of(set))?;
    out.write_all(MAGIC)?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    out.write_all(&(set.vectors.len() as u64).to_le_bytes())?;
    for (id, values) in &set.vectors {
        out.write_all(&(id.len() as u32).to_le_bytes())?;
        out.write_all(id.as_bytes())?;
        for &v in values {
            match set.float_width {
                FloatWidth::F32 => out.write_all(&(v as f32).to_le_bytes())?,
                FloatWidth::F64 => out.write_all(&v.to_le_bytes())?,
            }
        }
    }
    Ok(())
}

fn encode_jsonl(set: &EmbeddingSet, out: &mut impl Write) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, &header_of(set))?;
    out.write_all(b"\n")?;
    for (id, values) in &set.vectors {
        match set.float_width {
            FloatWidth::F32 => {
                let v: Vec<f32> = values.iter().map(|&x| x as f32).collect();
                serde_json::to_writer(
                    &mut *out,
                    &JsonRecord {
                        id: id.clone(),
                        vector: v,
                    },
                )?;
            }
            FloatWidth::F64 => {
                serde_json::to_writer(
                    &mut *out,
                    &JsonRecord {
                        id: id.clone(),
                        vector: values,
                    },
                )?;
            }
        }
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_embeddings(path: impl AsRef<Path>, set: &EmbeddingSet) -> Result<(), EmbeddingError> {
    let path = path.as_ref();
    let io_err = |source| EmbeddingError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    if is_jsonl(path) {
        encode_jsonl(set, &mut out).map_err(io_err)?;
    } else {
        encode_binary(set, &mut out).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet, EmbeddingError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| EmbeddingError::Io {
        path: shown.clone(),
        source,
    })?;
    let reader = BufReader::new(file);
    let result = if is_jsonl(path) {
        decode_jsonl(reader)
    } else {
        decode_binary(reader)
    };
    result.map_err(|message| EmbeddingError::Format { path: shown, message })
}

fn decode_jsonl(reader: impl BufRead) -> Result<EmbeddingSet, String> {
    let mut lines = reader.lines().enumerate();
    let header: Header = loop {
        match lines.next() {
            Some((_, line)) => {
                let line = line.map_err(|e| e.to_string())?;
                if !line.trim().is_empty() {
                    break serde_json::from_str(&line).map_err(|e| format!("header: {e}"))?;
                }
            }
            None => return Err("missing header".into()),
        }
    };
    let mut set = EmbeddingSet::new(header.provider_id, header.dimension, header.float_width);
    for (n, line) in lines {
        let line = line.map_err(|e| e.to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        let values: (String, Vec<f64>) = match header.float_width {
            FloatWidth::F32 => {
                let r: JsonRecord<Vec<f32>> =
                    serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", n + 1))?;
                (r.id, r.vector.into_iter().map(f64::from).collect())
            }
            FloatWidth::F64 => {
                let r: JsonRecord<Vec<f64>> =
                    serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", n + 1))?;
                (r.id, r.vector)
            }
        };
        insert_unique(&mut set, values.0, values.1)?;
    }
    Ok(set)
}

fn insert_unique(set: &mut EmbeddingSet, id: String, values: Vec<f64>) -> Result<(), String> {
    if set.vectors.contains_key(&id) {
        return Err(format!("duplicate id {id:?}"));
    }
    set.insert(id, values).map_err(|e| e.to_string())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N], String> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| format!("truncated file: {e}"))?;
    Ok(buf)
}

fn decode_binary(mut r: impl Read) -> Result<EmbeddingSet, String> {
    if &read_exact::<8>(&mut r)? != MAGIC {
        return Err("bad magic".into());
    }
    let header_len = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header).map_err(|e| e.to_string())?;
    let header: Header = serde_json::from_slice(&header).map_err(|e| format!("header: {e}"))?;
    let count = u64::from_le_bytes(read_exact(&mut r)?);
    let mut set = EmbeddingSet::new(header.provider_id, header.dimension, header.float_width);
    for _ in 0..count {
        let id_len = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id).map_err(|e| e.to_string())?;
        let id = String::from_utf8(id).map_err(|e| e.to_string())?;
        let mut values = Vec::with_capacity(set.dimension);
        for _ in 0..set.dimension {
            values.push(match set.float_width {
                FloatWidth::F32 => f32::from_le_bytes(read_exact(&mut r)?) as f64,
                FloatWidth::F64 => f64::from_le_bytes(read_exact(&mut r)?),
            });
        }
        insert_unique(&mut set, id, values)?;
    }
    Ok(set)
}
