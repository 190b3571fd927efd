//! ENEF: the single-file deployable archive for a [`QuantizedModel`].
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0   magic "ENEF"
//! 4   version u16 (= 1)
//! 6   flags u16
//! 8   section count u32
//! 12  reserved u32 (= 0)
//! 16  section table, 16 bytes per entry: tag [u8; 4], offset u32, length u32, reserved u32
//! ..  sections, each starting on an 8-byte boundary, zero padded
//! ..  CRC-32 (IEEE) of every preceding byte, on an 8-byte boundary
//! ```
//!
//! Sections appear in the order META, TOPO, QPRM, WGT8, BI32, RQNT. See
//! `docs/enef-format.md` for the encoding of each section.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::graph::{DataType, ModelGraph, NodeSpec, OpKind, Padding, TensorSpec};
use crate::optimize::{QuantParams, QuantizedModel, RequantMultiplier};

pub const MAGIC: &[u8; 4] = b"ENEF";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;
pub const TABLE_ENTRY_LEN: usize = 16;
pub const ALIGN: usize = 8;

/// Set when an unsupported output head was removed before quantization.
pub const FLAG_HEAD_STRIPPED: u16 = 1;

pub const SECTION_TAGS: [&[u8; 4]; 6] = [b"META", b"TOPO", b"QPRM", b"WGT8", b"BI32", b"RQNT"];

/// Largest element count accepted for a single tensor.
const MAX_TENSOR_ELEMS: u64 = 1 << 31;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnefError {
    #[error("bad magic, not an ENEF archive")]
    BadMagic,
    #[error("unsupported ENEF version {0}")]
    UnsupportedVersion(u16),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("truncated section {0}")]
    TruncatedSection(String),
    #[error("malformed table: {0}")]
    MalformedTable(String),
    #[error("model violates archive invariants: {0}")]
    InvariantViolation(String),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Metadata {
    pub model_name: String,
    pub profile_name: String,
    pub flags: u16,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnefArchive {
    pub metadata: Metadata,
    pub model: QuantizedModel,
}

pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) {
        self.u32(n as u32);
    }
    fn str(&mut self, s: &str) {
        self.len(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }
}

fn dtype_code(d: DataType) -> u8 {
    match d {
        DataType::F32 => 0,
        DataType::I8 => 1,
        DataType::I32 => 2,
    }
}

fn op_code(k: &OpKind) -> (u8, u32, u32) {
    match *k {
        OpKind::Conv2D { stride, padding } => (0, stride as u32, matches!(padding, Padding::Valid) as u32),
        OpKind::MaxPool2D { window, stride } => (1, window as u32, stride as u32),
        OpKind::Relu => (2, 0, 0),
        OpKind::Flatten => (3, 0, 0),
        OpKind::Dense => (4, 0, 0),
        OpKind::Softmax => (5, 0, 0),
    }
}

fn encode_meta(meta: &Metadata) -> Vec<u8> {
    let mut w = Writer::default();
    w.str(&meta.model_name);
    w.str(&meta.profile_name);
    w.buf
}

fn encode_topology(g: &ModelGraph<f32>) -> Vec<u8> {
    let mut w = Writer::default();
    w.str(&g.name);
    w.len(g.tensors.len());
    for t in g.tensors.values() {
        w.str(&t.id);
        w.u8(dtype_code(t.dtype));
        w.u8(t.shape.len() as u8);
        for &d in &t.shape {
            w.u32(d as u32);
        }
    }
    w.str(&g.input.id);
    w.str(&g.output.id);
    w.len(g.nodes.len());
    for n in &g.nodes {
        let (code, p0, p1) = op_code(&n.kind);
        w.str(&n.id);
        w.u8(code);
        w.u32(p0);
        w.u32(p1);
        w.len(n.inputs.len());
        for i in &n.inputs {
            w.str(i);
        }
        w.str(&n.output);
    }
    w.buf
}

fn encode_qparams(act: &BTreeMap<String, QuantParams>, weight: &BTreeMap<String, QuantParams>) -> Vec<u8> {
    let mut w = Writer::default();
    for table in [act, weight] {
        w.len(table.len());
        for (id, p) in table {
            w.str(id);
            w.f64(p.scale);
            w.i32(p.zero_point);
        }
    }
    w.buf
}

fn encode_weights(weights: &BTreeMap<String, Vec<i8>>) -> Vec<u8> {
    let mut w = Writer::default();
    w.len(weights.len());
    for (id, data) in weights {
        w.str(id);
        w.len(data.len());
        w.buf.extend(data.iter().map(|&v| v as u8));
    }
    w.buf
}

fn encode_biases(biases: &BTreeMap<String, Vec<i32>>) -> Vec<u8> {
    let mut w = Writer::default();
    w.len(biases.len());
    for (id, data) in biases {
        w.str(id);
        w.len(data.len());
        for &v in data {
            w.i32(v);
        }
    }
    w.buf
}

fn encode_requant(requant: &BTreeMap<String, RequantMultiplier>) -> Vec<u8> {
    let mut w = Writer::default();
    w.len(requant.len());
    for (id, r) in requant {
        w.str(id);
        w.i32(r.m0);
        w.i32(r.shift);
    }
    w.buf
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Serializes `qm`. Output is a pure function of the inputs.
pub fn pack(qm: &QuantizedModel, metadata: &Metadata) -> Result<Vec<u8>, EnefError> {
    qm.check_invariants().map_err(|e| EnefError::InvariantViolation(e.to_string()))?;
    let sections: [Vec<u8>; 6] = [
        encode_meta(metadata),
        encode_topology(&qm.graph),
        encode_qparams(&qm.act_qparams, &qm.weight_qparams),
        encode_weights(&qm.weight_q),
        encode_biases(&qm.bias_q),
        encode_requant(&qm.requant),
    ];

    let table_end = HEADER_LEN + TABLE_ENTRY_LEN * sections.len();
    let mut offsets = Vec::with_capacity(sections.len());
    let mut cursor = align_up(table_end);
    for s in &sections {
        offsets.push(cursor);
        cursor = align_up(cursor + s.len());
    }
    if cursor > u32::MAX as usize {
        return Err(EnefError::InvariantViolation("archive exceeds 4 GiB".into()));
    }

    let mut out = Vec::with_capacity(cursor + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&metadata.flags.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for ((tag, s), off) in SECTION_TAGS.iter().zip(&sections).zip(&offsets) {
        out.extend_from_slice(*tag);
        out.extend_from_slice(&(*off as u32).to_le_bytes());
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
    }
    for (s, &off) in sections.iter().zip(&offsets) {
        out.resize(off, 0);
        out.extend_from_slice(s);
    }
    out.resize(cursor, 0);
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], section: &'static str) -> Self {
        Self { bytes, pos: 0, section }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], EnefError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| EnefError::TruncatedSection(self.section.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, EnefError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, EnefError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn i32(&mut self) -> Result<i32, EnefError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64, EnefError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String, EnefError> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.malformed("string is not UTF-8"))
    }

    fn malformed(&self, what: &str) -> EnefError {
        EnefError::MalformedTable(format!("{}: {what}", self.section))
    }

    fn finish(&self) -> Result<(), EnefError> {
        if self.pos != self.bytes.len() {
            return Err(self.malformed("trailing bytes"));
        }
        Ok(())
    }
}

fn insert_unique<V>(map: &mut BTreeMap<String, V>, key: String, value: V, r: &Reader<'_>) -> Result<(), EnefError> {
    if map.insert(key.clone(), value).is_some() {
        return Err(r.malformed(&format!("duplicate entry {key}")));
    }
    Ok(())
}

fn decode_meta(bytes: &[u8], flags: u16) -> Result<Metadata, EnefError> {
    let mut r = Reader::new(bytes, "META");
    let meta = Metadata { model_name: r.str()?, profile_name: r.str()?, flags };
    r.finish()?;
    Ok(meta)
}

fn decode_topology(bytes: &[u8]) -> Result<ModelGraph<f32>, EnefError> {
    let mut r = Reader::new(bytes, "TOPO");
    let name = r.str()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..r.u32()? {
        let id = r.str()?;
        let dtype = match r.u8()? {
            0 => DataType::F32,
            1 => DataType::I8,
            2 => DataType::I32,
            other => return Err(r.malformed(&format!("dtype code {other}"))),
        };
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut elems = 1u64;
        for _ in 0..rank {
            let d = r.u32()?;
            elems = elems.saturating_mul(d as u64);
            shape.push(d as usize);
        }
        if shape.contains(&0) || elems > MAX_TENSOR_ELEMS {
            return Err(r.malformed(&format!("tensor {id} has shape {shape:?}")));
        }
        let spec = TensorSpec { id: id.clone(), shape, dtype };
        insert_unique(&mut tensors, id, spec, &r)?;
    }
    let input_id = r.str()?;
    let output_id = r.str()?;
    let mut nodes = Vec::new();
    for _ in 0..r.u32()? {
        let id = r.str()?;
        let code = r.u8()?;
        let (p0, p1) = (r.u32()? as usize, r.u32()? as usize);
        let kind = match code {
            0 => OpKind::Conv2D {
                stride: p0,
                padding: match p1 {
                    0 => Padding::Same,
                    1 => Padding::Valid,
                    _ => return Err(r.malformed(&format!("padding code {p1}"))),
                },
            },
            1 => OpKind::MaxPool2D { window: p0, stride: p1 },
            2 => OpKind::Relu,
            3 => OpKind::Flatten,
            4 => OpKind::Dense,
            5 => OpKind::Softmax,
            other => return Err(r.malformed(&format!("op code {other}"))),
        };
        let mut inputs = Vec::new();
        for _ in 0..r.u32()? {
            inputs.push(r.str()?);
        }
        let output = r.str()?;
        nodes.push(NodeSpec { id, kind, inputs, output });
    }
    r.finish()?;
    let lookup = |id: &str| {
        tensors
            .get(id)
            .cloned()
            .ok_or_else(|| EnefError::MalformedTable(format!("TOPO: unknown tensor {id}")))
    };
    let input = lookup(&input_id)?;
    let output = lookup(&output_id)?;
    Ok(ModelGraph { name, input, output, nodes, tensors, weights: BTreeMap::new() })
}

type QParamTables = (BTreeMap<String, QuantParams>, BTreeMap<String, QuantParams>);

fn decode_qparams(bytes: &[u8]) -> Result<QParamTables, EnefError> {
    let mut r = Reader::new(bytes, "QPRM");
    let mut tables = [BTreeMap::new(), BTreeMap::new()];
    for table in tables.iter_mut() {
        for _ in 0..r.u32()? {
            let id = r.str()?;
            let p = QuantParams { scale: r.f64()?, zero_point: r.i32()? };
            insert_unique(table, id, p, &r)?;
        }
    }
    r.finish()?;
    let [act, weight] = tables;
    Ok((act, weight))
}

fn decode_weights(bytes: &[u8]) -> Result<BTreeMap<String, Vec<i8>>, EnefError> {
    let mut r = Reader::new(bytes, "WGT8");
    let mut out = BTreeMap::new();
    for _ in 0..r.u32()? {
        let id = r.str()?;
        let n = r.u32()? as usize;
        let data = r.take(n)?.iter().map(|&b| b as i8).collect();
        insert_unique(&mut out, id, data, &r)?;
    }
    r.finish()?;
    Ok(out)
}

fn decode_biases(bytes: &[u8]) -> Result<BTreeMap<String, Vec<i32>>, EnefError> {
    let mut r = Reader::new(bytes, "BI32");
    let mut out = BTreeMap::new();
    for _ in 0..r.u32()? {
        let id = r.str()?;
        let n = r.u32()? as usize;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| r.malformed("length overflow"))?)?;
        let data = raw.chunks_exact(4).map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        insert_unique(&mut out, id, data, &r)?;
    }
    r.finish()?;
    Ok(out)
}

fn decode_requant(bytes: &[u8]) -> Result<BTreeMap<String, RequantMultiplier>, EnefError> {
    let mut r = Reader::new(bytes, "RQNT");
    let mut out = BTreeMap::new();
    for _ in 0..r.u32()? {
        let id = r.str()?;
        let m = RequantMultiplier { m0: r.i32()?, shift: r.i32()? };
        insert_unique(&mut out, id, m, &r)?;
    }
    r.finish()?;
    Ok(out)
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Splits a checked archive into its six section payloads, in tag order.
fn sections(bytes: &[u8]) -> Result<(u16, [&[u8]; 6]), EnefError> {
    if !bytes.starts_with(MAGIC) {
        if bytes.len() < MAGIC.len() && MAGIC.starts_with(bytes) {
            return Err(EnefError::TruncatedSection("header".into()));
        }
        return Err(EnefError::BadMagic);
    }
    if bytes.len() < HEADER_LEN + 4 {
        return Err(EnefError::TruncatedSection("header".into()));
    }
    let version = le_u16(bytes, 4);
    if version != VERSION {
        return Err(EnefError::UnsupportedVersion(version));
    }
    let body_len = bytes.len() - 4;
    let stored = le_u32(bytes, body_len);
    let computed = crc32(&bytes[..body_len]);
    if stored != computed {
        return Err(EnefError::ChecksumMismatch { stored, computed });
    }
    let flags = le_u16(bytes, 6);
    let count = le_u32(bytes, 8) as usize;
    if count != SECTION_TAGS.len() {
        return Err(EnefError::MalformedTable(format!("expected {} sections, found {count}", SECTION_TAGS.len())));
    }
    if le_u32(bytes, 12) != 0 {
        return Err(EnefError::MalformedTable("reserved header field is not zero".into()));
    }
    let table_end = HEADER_LEN + TABLE_ENTRY_LEN * count;
    if table_end > body_len {
        return Err(EnefError::TruncatedSection("section table".into()));
    }
    let mut out: [&[u8]; 6] = [&[]; 6];
    let mut prev_end = table_end;
    for (i, tag) in SECTION_TAGS.iter().enumerate() {
        let entry = HEADER_LEN + i * TABLE_ENTRY_LEN;
        let name = String::from_utf8_lossy(*tag).into_owned();
        if &bytes[entry..entry + 4] != *tag {
            return Err(EnefError::MalformedTable(format!("section {i} should be {name}")));
        }
        let off = le_u32(bytes, entry + 4) as usize;
        let len = le_u32(bytes, entry + 8) as usize;
        if le_u32(bytes, entry + 12) != 0 {
            return Err(EnefError::MalformedTable(format!("{name}: reserved field is not zero")));
        }
        if !off.is_multiple_of(ALIGN) || off < prev_end {
            return Err(EnefError::MalformedTable(format!("{name}: bad offset {off}")));
        }
        let end = off.checked_add(len).filter(|&e| e <= body_len).ok_or(EnefError::TruncatedSection(name))?;
        out[i] = &bytes[off..end];
        prev_end = end;
    }
    Ok((flags, out))
}

/// Parses and validates an archive. Total over arbitrary input.
pub fn unpack_archive(bytes: &[u8]) -> Result<EnefArchive, EnefError> {
    let (flags, [meta, topo, qprm, wgt, bias, rq]) = sections(bytes)?;
    let metadata = decode_meta(meta, flags)?;
    let graph = decode_topology(topo)?;
    let (act_qparams, weight_qparams) = decode_qparams(qprm)?;
    let model = QuantizedModel {
        graph,
        weight_q: decode_weights(wgt)?,
        bias_q: decode_biases(bias)?,
        act_qparams,
        weight_qparams,
        requant: decode_requant(rq)?,
    };
    model.check_invariants().map_err(|e| EnefError::MalformedTable(e.to_string()))?;
    Ok(EnefArchive { metadata, model })
}

pub fn unpack(bytes: &[u8]) -> Result<QuantizedModel, EnefError> {
    unpack_archive(bytes).map(|a| a.model)
}

/// Annotated hex listing of an archive: header fields, the section table and
/// each section, 16 bytes per line.
pub fn annotate(bytes: &[u8]) -> Result<String, EnefError> {
    use std::fmt::Write;
    let (flags, _) = sections(bytes)?;
    let mut out = String::new();
    let line = |out: &mut String, at: usize, chunk: &[u8], note: &str| {
        let hex: Vec<String> = chunk.iter().map(|b| format!("{b:02x}")).collect();
        let _ = writeln!(out, "{at:06x}: {:<47}  # {note}", hex.join(" "));
    };
    line(&mut out, 0, &bytes[0..4], "magic \"ENEF\"");
    line(&mut out, 4, &bytes[4..6], &format!("version {}", le_u16(bytes, 4)));
    line(&mut out, 6, &bytes[6..8], &format!("flags {flags:#06x}"));
    line(&mut out, 8, &bytes[8..12], &format!("section count {}", le_u32(bytes, 8)));
    line(&mut out, 12, &bytes[12..16], "reserved");
    let mut spans = Vec::new();
    for (i, tag) in SECTION_TAGS.iter().enumerate() {
        let at = HEADER_LEN + i * TABLE_ENTRY_LEN;
        let off = le_u32(bytes, at + 4) as usize;
        let len = le_u32(bytes, at + 8) as usize;
        let name = String::from_utf8_lossy(*tag);
        line(&mut out, at, &bytes[at..at + TABLE_ENTRY_LEN], &format!("table: {name} offset {off} length {len}"));
        spans.push((name.into_owned(), off, len));
    }
    let mut cursor = HEADER_LEN + TABLE_ENTRY_LEN * SECTION_TAGS.len();
    for (name, off, len) in spans {
        if off > cursor {
            line(&mut out, cursor, &bytes[cursor..off], "padding");
        }
        for (j, chunk) in bytes[off..off + len].chunks(16).enumerate() {
            let note = if j == 0 { format!("{name} section") } else { name.clone() };
            line(&mut out, off + 16 * j, chunk, &note);
        }
        cursor = off + len;
    }
    let crc_at = bytes.len() - 4;
    if crc_at > cursor {
        line(&mut out, cursor, &bytes[cursor..crc_at], "padding");
    }
    line(&mut out, crc_at, &bytes[crc_at..], &format!("crc32 {:#010x}", le_u32(bytes, crc_at)));
    Ok(out)
}

/// Inverse of [`annotate`]: hex digits before each `#`, offsets ignored.
pub fn parse_annotated(text: &str) -> Option<Vec<u8>> {
    let mut out = Vec::new();
    for line in text.lines() {
        let data = line.split('#').next()?;
        let data = match data.split_once(':') {
            Some((_, rest)) => rest,
            None => data,
        };
        for tok in data.split_whitespace() {
            out.push(u8::from_str_radix(tok, 16).ok()?);
        }
    }
    Some(out)
}
