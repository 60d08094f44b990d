//! Bit-exact binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "SHRK" | version u32 | config 6 x u32 | block_ids u32 count + ids
//! tensor count u32
//! per tensor: name (u32 len + UTF-8) | dtype u8 (0 = f32, else bit width)
//!             rows u32 | cols u32 | group_size u32 | channel-scale flag u8
//!             payload offset u64 | payload len u64
//! payload section (concatenated, offsets relative to section start)
//! crc32 u32 over every preceding byte
//! ```
//!
//! Float payloads are raw f32 bit patterns, so save/load round-trips are
//! bit-identical; quantized payloads are packed codes, then group scales,
//! then the optional channel-scale vector.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{ModelCheckpoint, ModelConfig, TransformerBlock, Weight};
use crate::quant::{groups_per_row, packed_len, QuantizedTensor};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SHRK";
const VERSION: u32 = 1;

/// Parameter is stored as f32.
const DTYPE_F32: u8 = 0;

struct DirEntry {
    name: String,
    dtype: u8,
    rows: u32,
    cols: u32,
    group_size: u32,
    has_channel_scale: bool,
    offset: u64,
    len: u64,
}

fn dir_entry_size(name: &str) -> usize {
    4 + name.len() + 1 + 4 + 4 + 4 + 1 + 8 + 8
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f32s(buf: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Tensors in serialization order: every matrix and norm vector of the
/// model, names unique.
fn enumerate_tensors(model: &ModelCheckpoint) -> Vec<(String, TensorRef<'_>)> {
    let mut out: Vec<(String, TensorRef)> = Vec::new();
    out.push((
        "token_embedding".into(),
        TensorRef::Dense(&model.token_embedding),
    ));
    for (i, b) in model.blocks.iter().enumerate() {
        for (name, w) in b.linears(i) {
            out.push((name, TensorRef::from_weight(w)));
        }
        out.push((format!("block{i}.norm.attn"), TensorRef::NormVec(&b.norm_attn)));
        out.push((format!("block{i}.norm.mlp"), TensorRef::NormVec(&b.norm_mlp)));
    }
    out.push(("lm_head".into(), TensorRef::from_weight(&model.lm_head)));
    out
}

enum TensorRef<'a> {
    Dense(&'a Matrix),
    NormVec(&'a [f32]),
    Quant(&'a QuantizedTensor),
}

impl<'a> TensorRef<'a> {
    fn from_weight(w: &'a Weight) -> Self {
        match w {
            Weight::Dense(m) => TensorRef::Dense(m),
            Weight::Quantized(q) => TensorRef::Quant(q),
        }
    }

    fn shape(&self) -> (u32, u32) {
        match self {
            TensorRef::Dense(m) => (m.rows() as u32, m.cols() as u32),
            TensorRef::NormVec(v) => (1, v.len() as u32),
            TensorRef::Quant(q) => (q.rows() as u32, q.cols() as u32),
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            TensorRef::Dense(_) | TensorRef::NormVec(_) => DTYPE_F32,
            TensorRef::Quant(q) => q.bit_width(),
        }
    }

    fn payload(&self) -> Vec<u8> {
        match self {
            TensorRef::Dense(m) => {
                let mut buf = Vec::with_capacity(m.data().len() * 4);
                push_f32s(&mut buf, m.data());
                buf
            }
            TensorRef::NormVec(v) => {
                let mut buf = Vec::with_capacity(v.len() * 4);
                push_f32s(&mut buf, v);
                buf
            }
            TensorRef::Quant(q) => {
                let mut buf = Vec::with_capacity(q.payload_bytes());
                buf.extend_from_slice(q.packed_codes());
                push_f32s(&mut buf, q.group_scales());
                if let Some(cs) = q.channel_scale() {
                    push_f32s(&mut buf, cs);
                }
                buf
            }
        }
    }
}

/// Serialize a checkpoint to its on-disk byte layout.
pub fn to_bytes(model: &ModelCheckpoint) -> Vec<u8> {
    let tensors = enumerate_tensors(model);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, VERSION);
    let cfg = &model.config;
    for v in [
        cfg.vocab_size,
        cfg.d_model,
        cfg.n_layers,
        cfg.n_heads,
        cfg.d_ff,
        cfg.max_seq_len,
    ] {
        push_u32(&mut buf, v as u32);
    }
    push_u32(&mut buf, model.block_ids.len() as u32);
    for &id in &model.block_ids {
        push_u32(&mut buf, id as u32);
    }
    push_u32(&mut buf, tensors.len() as u32);

    let mut offset = 0u64;
    let mut payloads: Vec<Vec<u8>> = Vec::with_capacity(tensors.len());
    for (name, t) in &tensors {
        let payload = t.payload();
        let (rows, cols) = t.shape();
        push_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.dtype());
        push_u32(&mut buf, rows);
        push_u32(&mut buf, cols);
        let (gs, has_cs) = match t {
            TensorRef::Quant(q) => (q.group_size() as u32, q.channel_scale().is_some()),
            _ => (0, false),
        };
        push_u32(&mut buf, gs);
        buf.push(has_cs as u8);
        push_u64(&mut buf, offset);
        push_u64(&mut buf, payload.len() as u64);
        offset += payload.len() as u64;
        payloads.push(payload);
    }
    for p in payloads {
        buf.extend_from_slice(&p);
    }
    let crc = crc32fast::hash(&buf);
    push_u32(&mut buf, crc);
    buf
}

pub fn save(model: &ModelCheckpoint, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

/// Byte length of the serialized checkpoint, for size accounting.
pub fn serialized_bytes(model: &ModelCheckpoint) -> u64 {
    to_bytes(model).len() as u64
}

/// Size the same model would serialize to if every tensor payload were
/// stored at 16 bits per element, with identical header, directory, and
/// checksum overhead. Reference denominator for compression ratios.
pub fn fp16_equivalent_bytes(model: &ModelCheckpoint) -> u64 {
    let tensors = enumerate_tensors(model);
    let mut total = 4 + 4 + 6 * 4 + 4 + 4 * model.block_ids.len() + 4;
    for (name, t) in &tensors {
        total += dir_entry_size(name);
        let (rows, cols) = t.shape();
        total += 2 * rows as usize * cols as usize;
    }
    (total + 4) as u64
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn parse_dense(bytes: &[u8], rows: usize, cols: usize) -> Result<Matrix> {
    if bytes.len() != rows * cols * 4 {
        return Err(Error::CorruptCheckpoint(format!(
            "f32 payload length {} != {}",
            bytes.len(),
            rows * cols * 4
        )));
    }
    let mut c = Cursor { buf: bytes, pos: 0 };
    let data = c.f32_vec(rows * cols)?;
    Matrix::from_vec(rows, cols, data)
        .map_err(|e| Error::CorruptCheckpoint(format!("bad f32 tensor: {e}")))
}

fn parse_quant(entry: &DirEntry, bytes: &[u8]) -> Result<QuantizedTensor> {
    let (rows, cols) = (entry.rows as usize, entry.cols as usize);
    let gs = entry.group_size as usize;
    if gs == 0 {
        return Err(Error::CorruptCheckpoint("quantized group_size 0".into()));
    }
    let code_bytes = packed_len(rows * cols, entry.dtype);
    let scale_count = rows * groups_per_row(cols, gs);
    let cs_count = if entry.has_channel_scale { cols } else { 0 };
    let expected = code_bytes + 4 * (scale_count + cs_count);
    if bytes.len() != expected {
        return Err(Error::CorruptCheckpoint(format!(
            "quantized payload length {} != {expected}",
            bytes.len()
        )));
    }
    let mut c = Cursor { buf: bytes, pos: 0 };
    let packed = c.take(code_bytes)?.to_vec();
    let scales = c.f32_vec(scale_count)?;
    let channel = if entry.has_channel_scale {
        Some(c.f32_vec(cs_count)?)
    } else {
        None
    };
    QuantizedTensor::from_packed(rows, cols, entry.dtype, gs, packed, scales, channel)
        .map_err(|e| Error::CorruptCheckpoint(format!("bad quantized tensor: {e}")))
}

/// Parse a checkpoint from bytes, verifying magic, version, and checksum.
pub fn from_bytes(buf: &[u8]) -> Result<ModelCheckpoint> {
    if buf.len() < 12 {
        return Err(Error::CorruptCheckpoint("file shorter than header".into()));
    }
    let (body, crc_bytes) = buf.split_at(buf.len() - 4);
    let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored_crc {
        return Err(Error::CorruptCheckpoint("checksum mismatch".into()));
    }
    let mut c = Cursor { buf: body, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::CorruptCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let config = ModelConfig {
        vocab_size: c.u32()? as usize,
        d_model: c.u32()? as usize,
        n_layers: c.u32()? as usize,
        n_heads: c.u32()? as usize,
        d_ff: c.u32()? as usize,
        max_seq_len: c.u32()? as usize,
    };
    let n_ids = c.u32()? as usize;
    let mut block_ids = Vec::with_capacity(n_ids);
    for _ in 0..n_ids {
        block_ids.push(c.u32()? as usize);
    }
    let n_tensors = c.u32()? as usize;
    let mut entries = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| Error::CorruptCheckpoint("tensor name not UTF-8".into()))?;
        entries.push(DirEntry {
            name,
            dtype: c.u8()?,
            rows: c.u32()?,
            cols: c.u32()?,
            group_size: c.u32()?,
            has_channel_scale: c.u8()? != 0,
            offset: c.u64()?,
            len: c.u64()?,
        });
    }
    let payload_section = &body[c.pos..];

    let mut dense: std::collections::BTreeMap<String, Matrix> = Default::default();
    let mut quant: std::collections::BTreeMap<String, QuantizedTensor> = Default::default();
    for e in &entries {
        let (start, len) = (e.offset as usize, e.len as usize);
        if start + len > payload_section.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "payload for {} out of bounds",
                e.name
            )));
        }
        let bytes = &payload_section[start..start + len];
        match e.dtype {
            DTYPE_F32 => {
                dense.insert(e.name.clone(), parse_dense(bytes, e.rows as usize, e.cols as usize)?);
            }
            _ => {
                quant.insert(e.name.clone(), parse_quant(e, bytes)?);
            }
        }
    }

    let mut take_weight = |name: &str| -> Result<Weight> {
        if let Some(m) = dense.remove(name) {
            return Ok(Weight::Dense(m));
        }
        if let Some(q) = quant.remove(name) {
            return Ok(Weight::Quantized(q));
        }
        Err(Error::CorruptCheckpoint(format!("missing tensor {name}")))
    };

    let mut blocks = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let wq = take_weight(&format!("block{i}.attn.q"))?;
        let wk = take_weight(&format!("block{i}.attn.k"))?;
        let wv = take_weight(&format!("block{i}.attn.v"))?;
        let wo = take_weight(&format!("block{i}.attn.o"))?;
        let w_up = take_weight(&format!("block{i}.mlp.up"))?;
        let w_down = take_weight(&format!("block{i}.mlp.down"))?;
        blocks.push((wq, wk, wv, wo, w_up, w_down));
    }
    let lm_head = take_weight("lm_head")?;
    let token_embedding = dense
        .remove("token_embedding")
        .ok_or_else(|| Error::CorruptCheckpoint("missing token_embedding".into()))?;
    let mut norm = |name: String| -> Result<Vec<f32>> {
        let m = dense
            .remove(&name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor {name}")))?;
        Ok(m.data().to_vec())
    };
    let blocks: Vec<TransformerBlock> = blocks
        .into_iter()
        .enumerate()
        .map(|(i, (wq, wk, wv, wo, w_up, w_down))| {
            Ok(TransformerBlock {
                wq,
                wk,
                wv,
                wo,
                w_up,
                w_down,
                norm_attn: norm(format!("block{i}.norm.attn"))?,
                norm_mlp: norm(format!("block{i}.norm.mlp"))?,
            })
        })
        .collect::<Result<_>>()?;

    let model = ModelCheckpoint {
        config,
        token_embedding,
        blocks,
        lm_head,
        block_ids,
    };
    model
        .validate()
        .map_err(|e| Error::CorruptCheckpoint(format!("inconsistent checkpoint: {e}")))?;
    Ok(model)
}

pub fn load(path: &Path) -> Result<ModelCheckpoint> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::quantize_with_channel_scale;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_model(seed: u64) -> ModelCheckpoint {
        let cfg = ModelConfig {
            vocab_size: 40,
            d_model: 16,
            n_layers: 3,
            n_heads: 2,
            d_ff: 24,
            max_seq_len: 32,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelCheckpoint::random(cfg, &mut rng).unwrap()
    }

    fn quantize_some_layers(m: &mut ModelCheckpoint) {
        // One plain-RTN layer and one with a channel scale.
        let w = m.blocks[0].wq.as_dense().unwrap().clone();
        m.blocks[0].wq =
            Weight::Quantized(quantize_with_channel_scale(&w, 4, 8, None).unwrap());
        let w = m.blocks[1].w_down.as_dense().unwrap().clone();
        let s: Vec<f32> = (0..w.cols()).map(|j| 0.5 + j as f32 * 0.1).collect();
        m.blocks[1].w_down =
            Weight::Quantized(quantize_with_channel_scale(&w, 3, 5, Some(&s)).unwrap());
        let w = match &m.lm_head {
            Weight::Dense(w) => w.clone(),
            _ => unreachable!(),
        };
        m.lm_head = Weight::Quantized(quantize_with_channel_scale(&w, 8, 16, None).unwrap());
    }

    #[test]
    fn float_round_trip_bit_identical() {
        let m = small_model(1);
        let bytes = to_bytes(&m);
        let loaded = from_bytes(&bytes).unwrap();
        // Byte-level identity is the strongest round-trip statement.
        assert_eq!(to_bytes(&loaded), bytes);
        assert_eq!(loaded, m);
    }

    #[test]
    fn quantized_round_trip_bit_identical() {
        let mut m = small_model(2);
        quantize_some_layers(&mut m);
        let bytes = to_bytes(&m);
        let loaded = from_bytes(&bytes).unwrap();
        assert_eq!(to_bytes(&loaded), bytes);
        match (&loaded.blocks[1].w_down, &m.blocks[1].w_down) {
            (Weight::Quantized(a), Weight::Quantized(b)) => {
                assert_eq!(a.packed_codes(), b.packed_codes());
                assert_eq!(a.group_scales(), b.group_scales());
                assert_eq!(a.channel_scale(), b.channel_scale());
            }
            _ => panic!("w_down did not stay quantized"),
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.shrk");
        let m = small_model(3);
        save(&m, &path).unwrap();
        assert_eq!(load(&path).unwrap(), m);
        assert_eq!(
            std::fs::metadata(&path).unwrap().len(),
            serialized_bytes(&m)
        );
    }

    #[test]
    fn corrupt_byte_detected() {
        let mut m = small_model(4);
        quantize_some_layers(&mut m);
        let bytes = to_bytes(&m);
        // Flip one byte in several regions: header, directory, payload.
        for pos in [1usize, 40, bytes.len() / 2, bytes.len() - 10] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x40;
            assert!(
                from_bytes(&bad).is_err(),
                "corruption at byte {pos} went undetected"
            );
        }
    }

    #[test]
    fn truncation_detected() {
        let bytes = to_bytes(&small_model(5));
        assert!(from_bytes(&bytes[..bytes.len() - 9]).is_err());
        assert!(from_bytes(&bytes[..6]).is_err());
    }

    #[test]
    fn bad_magic_and_version_detected() {
        let bytes = to_bytes(&small_model(6));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        // Re-stamp the checksum so the magic check itself is exercised.
        let n = bad.len();
        let crc = crc32fast::hash(&bad[..n - 4]);
        bad[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(from_bytes(&bad), Err(Error::CorruptCheckpoint(m)) if m.contains("magic")));

        let mut bad = bytes;
        bad[4..8].copy_from_slice(&9u32.to_le_bytes());
        let n = bad.len();
        let crc = crc32fast::hash(&bad[..n - 4]);
        bad[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(
            matches!(from_bytes(&bad), Err(Error::CorruptCheckpoint(m)) if m.contains("version"))
        );
    }

    #[test]
    fn fp16_equivalent_is_exactly_two_bytes_per_element_cheaper_than_f32() {
        let m = small_model(7);
        let f32_size = serialized_bytes(&m);
        let fp16_size = fp16_equivalent_bytes(&m);
        let elements: u64 = m.param_count();
        assert_eq!(f32_size - fp16_size, 2 * elements);
    }

    #[test]
    fn quantized_file_smaller_than_fp16_equivalent() {
        let mut m = small_model(8);
        // Quantize every linear layer at 4 bits.
        for b in &mut m.blocks {
            for w in [
                &mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.w_up, &mut b.w_down,
            ] {
                let dense = w.as_dense().unwrap().clone();
                *w = Weight::Quantized(
                    quantize_with_channel_scale(&dense, 4, 8, None).unwrap(),
                );
            }
        }
        let dense = m.lm_head.as_dense().unwrap().clone();
        m.lm_head = Weight::Quantized(quantize_with_channel_scale(&dense, 4, 8, None).unwrap());
        assert!(serialized_bytes(&m) < fp16_equivalent_bytes(&m));
    }
}
