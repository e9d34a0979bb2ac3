//! Binary wire protocol shared by every node.
//!
//! A datagram carries exactly one [`Message`]: an 18-byte header (magic
//! `MDDS`, version 1.0, sender GUID prefix) followed by zero or more
//! submessages. Every submessage is framed as `kind: u8`, `flags: u8`,
//! `length: u16` and a kind-specific body. All integers are little-endian
//! and the encoding has no optional padding, so a decoded message re-encodes
//! to the same bytes.
//!
//! Payloads larger than the configured fragment size travel as a train of
//! `DATA_FRAG` submessages; [`fragment_payload`] and [`FragmentBuffer`]
//! implement both ends of that.

use std::fmt;

use rand::RngCore;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"MDDS";
pub const VERSION_MAJOR: u8 = 1;
pub const VERSION_MINOR: u8 = 0;
pub const HEADER_LEN: usize = 18;
pub const SUBMESSAGE_HEADER_LEN: usize = 4;
/// Largest UDP payload over IPv4; the protocol never relies on IP fragmentation.
pub const MAX_MESSAGE_LEN: usize = 65_507;
pub const MAX_NAME_LEN: usize = 256;
pub const MAX_BITMAP_BITS: u32 = 256;
pub const DEFAULT_FRAG_SIZE: usize = 1_200;
/// Upper bound on a reassembled payload; larger `total_len` values are rejected.
pub const MAX_REASSEMBLY_LEN: u32 = 64 * 1024 * 1024;

/// Fixed bytes in a DATA body before the payload.
pub const DATA_BODY_OVERHEAD: usize = 16;
/// Fixed bytes in a DATA_FRAG body before the fragment bytes.
pub const DATA_FRAG_BODY_OVERHEAD: usize = 24;

const KIND_ANNOUNCE: u8 = 1;
const KIND_DATA: u8 = 2;
const KIND_DATA_FRAG: u8 = 3;
const KIND_HEARTBEAT: u8 = 4;
const KIND_ACKNACK: u8 = 5;
const FLAG_FINAL: u8 = 0x01;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("bad magic, expected \"MDDS\"")]
    BadMagic,
    #[error("unsupported protocol version {major}.{minor}")]
    BadVersion { major: u8, minor: u8 },
    #[error("buffer truncated")]
    Truncated,
    #[error("malformed submessage: {0}")]
    Malformed(&'static str),
    #[error("encoded message of {size} bytes exceeds {MAX_MESSAGE_LEN}")]
    OversizeMessage { size: usize },
    #[error("invalid field: {0}")]
    InvalidField(&'static str),
    #[error("payload is empty")]
    EmptyPayload,
    #[error("inconsistent fragment: {0}")]
    InconsistentFragment(&'static str),
}

/// Per-participant half of a GUID. Generated once and never changed.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct GuidPrefix(pub [u8; 12]);

impl GuidPrefix {
    pub fn random() -> Self {
        let mut bytes = [0u8; 12];
        rand::thread_rng().fill_bytes(&mut bytes);
        GuidPrefix(bytes)
    }

    pub fn from_rng<R: RngCore>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 12];
        rng.fill_bytes(&mut bytes);
        GuidPrefix(bytes)
    }
}

impl fmt::Debug for GuidPrefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Display for GuidPrefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct EntityId(pub u32);

impl EntityId {
    /// Reserved; never assigned to a user endpoint.
    pub const INVALID: EntityId = EntityId(0);
    /// Used by the participant itself for discovery announcements.
    pub const DISCOVERY: EntityId = EntityId(0xFFFF_FFFF);

    pub fn is_user(self) -> bool {
        self != Self::INVALID && self != Self::DISCOVERY
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct Guid {
    pub prefix: GuidPrefix,
    pub entity_id: EntityId,
}

impl Guid {
    pub fn new(prefix: GuidPrefix, entity_id: EntityId) -> Self {
        Guid { prefix, entity_id }
    }

    pub fn to_bytes(self) -> [u8; 16] {
        let mut out = [0u8; 16];
        out[..12].copy_from_slice(&self.prefix.0);
        out[12..].copy_from_slice(&self.entity_id.0.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: [u8; 16]) -> Self {
        let mut prefix = [0u8; 12];
        prefix.copy_from_slice(&bytes[..12]);
        let entity = u32::from_le_bytes([bytes[12], bytes[13], bytes[14], bytes[15]]);
        Guid::new(GuidPrefix(prefix), EntityId(entity))
    }
}

impl fmt::Display for Guid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{:08x}", self.prefix, self.entity_id.0)
    }
}

/// Per-writer sample sequence number. The first sample is 1; 0 means "none yet".
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Default)]
pub struct SequenceNumber(pub u64);

impl SequenceNumber {
    pub const NONE: SequenceNumber = SequenceNumber(0);
    pub const FIRST: SequenceNumber = SequenceNumber(1);

    pub fn next(self) -> SequenceNumber {
        SequenceNumber(self.0 + 1)
    }
}

impl fmt::Display for SequenceNumber {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum EndpointRole {
    Writer,
    Reader,
}

impl EndpointRole {
    fn to_byte(self) -> u8 {
        match self {
            EndpointRole::Writer => 1,
            EndpointRole::Reader => 2,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(EndpointRole::Writer),
            2 => Some(EndpointRole::Reader),
            _ => None,
        }
    }
}

/// Delivery guarantee. Ordered so that `BestEffort < Reliable`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub enum Reliability {
    BestEffort,
    Reliable,
}

impl Reliability {
    fn to_byte(self) -> u8 {
        match self {
            Reliability::BestEffort => 1,
            Reliability::Reliable => 2,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(Reliability::BestEffort),
            2 => Some(Reliability::Reliable),
            _ => None,
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct EndpointInfo {
    pub entity_id: EntityId,
    pub role: EndpointRole,
    pub reliability: Reliability,
    pub topic_name: String,
    pub type_name: String,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Announce {
    pub lease_duration_ms: u32,
    pub endpoints: Vec<EndpointInfo>,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Data {
    pub writer_id: EntityId,
    pub seq: SequenceNumber,
    pub payload: Vec<u8>,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct DataFrag {
    pub writer_id: EntityId,
    pub seq: SequenceNumber,
    pub frag_index: u32,
    pub frag_count: u32,
    pub total_len: u32,
    pub data: Vec<u8>,
}

/// Writer advertisement of the sequence numbers it still holds.
/// `last_seq == first_seq - 1` encodes an empty history.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Heartbeat {
    pub writer_id: EntityId,
    pub first_seq: SequenceNumber,
    pub last_seq: SequenceNumber,
    pub count: u32,
    pub final_flag: bool,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct AckNack {
    pub reader_id: EntityId,
    pub writer_guid: Guid,
    /// Every seq below `base_seq` is acknowledged.
    pub base_seq: SequenceNumber,
    pub missing: SeqBitmap,
    pub final_flag: bool,
}

impl AckNack {
    pub fn missing_seqs(&self) -> impl Iterator<Item = SequenceNumber> + '_ {
        let base = self.base_seq.0;
        self.missing.iter_set().map(move |i| SequenceNumber(base + u64::from(i)))
    }
}

/// Up to 256 bits; bit `i` set means `base_seq + i` is missing.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub struct SeqBitmap {
    len: u32,
    words: [u64; 4],
}

impl SeqBitmap {
    pub fn new(len: u32) -> Self {
        assert!(len <= MAX_BITMAP_BITS, "bitmap length {len} exceeds {MAX_BITMAP_BITS}");
        SeqBitmap { len, words: [0; 4] }
    }

    pub fn len(&self) -> u32 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn set(&mut self, bit: u32) {
        assert!(bit < self.len, "bit {bit} out of range {}", self.len);
        self.words[(bit / 64) as usize] |= 1 << (bit % 64);
    }

    pub fn get(&self, bit: u32) -> bool {
        bit < self.len && self.words[(bit / 64) as usize] & (1 << (bit % 64)) != 0
    }

    pub fn count_set(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn iter_set(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.len).filter(move |&i| self.get(i))
    }

    fn byte_len(&self) -> usize {
        self.len.div_ceil(8) as usize
    }

    fn byte(&self, i: usize) -> u8 {
        (self.words[i / 8] >> ((i % 8) * 8)) as u8
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Submessage {
    Announce(Announce),
    Data(Data),
    DataFrag(DataFrag),
    Heartbeat(Heartbeat),
    AckNack(AckNack),
}

impl Submessage {
    fn kind(&self) -> u8 {
        match self {
            Submessage::Announce(_) => KIND_ANNOUNCE,
            Submessage::Data(_) => KIND_DATA,
            Submessage::DataFrag(_) => KIND_DATA_FRAG,
            Submessage::Heartbeat(_) => KIND_HEARTBEAT,
            Submessage::AckNack(_) => KIND_ACKNACK,
        }
    }

    fn flags(&self) -> u8 {
        match self {
            Submessage::Heartbeat(hb) if hb.final_flag => FLAG_FINAL,
            Submessage::AckNack(an) if an.final_flag => FLAG_FINAL,
            _ => 0,
        }
    }

    /// True for submessages that carry application payload bytes.
    pub fn is_data(&self) -> bool {
        matches!(self, Submessage::Data(_) | Submessage::DataFrag(_))
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Message {
    pub guid_prefix: GuidPrefix,
    pub submessages: Vec<Submessage>,
}

impl Message {
    pub fn new(guid_prefix: GuidPrefix) -> Self {
        Message { guid_prefix, submessages: Vec::new() }
    }

    pub fn with(guid_prefix: GuidPrefix, submessage: Submessage) -> Self {
        Message { guid_prefix, submessages: vec![submessage] }
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        encode_message(self)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        decode_message(bytes)
    }
}

pub fn encode_message(msg: &Message) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::with_capacity(HEADER_LEN + 64);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION_MAJOR);
    out.push(VERSION_MINOR);
    out.extend_from_slice(&msg.guid_prefix.0);
    for sub in &msg.submessages {
        let start = out.len();
        out.push(sub.kind());
        out.push(sub.flags());
        out.extend_from_slice(&[0, 0]);
        encode_body(sub, &mut out)?;
        let body_len = out.len() - start - SUBMESSAGE_HEADER_LEN;
        if body_len > usize::from(u16::MAX) || out.len() > MAX_MESSAGE_LEN {
            return Err(WireError::OversizeMessage { size: out.len() });
        }
        out[start + 2..start + 4].copy_from_slice(&(body_len as u16).to_le_bytes());
    }
    if out.len() > MAX_MESSAGE_LEN {
        return Err(WireError::OversizeMessage { size: out.len() });
    }
    Ok(out)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_name(out: &mut Vec<u8>, name: &str) -> Result<(), WireError> {
    if name.len() > MAX_NAME_LEN {
        return Err(WireError::InvalidField("name longer than 256 bytes"));
    }
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    Ok(())
}

fn check_len_fits(len: usize) -> Result<u32, WireError> {
    // Anything this large can never fit in a datagram anyway.
    if len > MAX_MESSAGE_LEN {
        return Err(WireError::OversizeMessage { size: HEADER_LEN + len });
    }
    Ok(len as u32)
}

fn encode_body(sub: &Submessage, out: &mut Vec<u8>) -> Result<(), WireError> {
    match sub {
        Submessage::Announce(a) => {
            put_u32(out, a.lease_duration_ms);
            if a.endpoints.len() > usize::from(u16::MAX) {
                return Err(WireError::InvalidField("too many endpoints"));
            }
            out.extend_from_slice(&(a.endpoints.len() as u16).to_le_bytes());
            for ep in &a.endpoints {
                put_u32(out, ep.entity_id.0);
                out.push(ep.role.to_byte());
                out.push(ep.reliability.to_byte());
                put_name(out, &ep.topic_name)?;
                put_name(out, &ep.type_name)?;
            }
        }
        Submessage::Data(d) => {
            let len = check_len_fits(d.payload.len())?;
            put_u32(out, d.writer_id.0);
            put_u64(out, d.seq.0);
            put_u32(out, len);
            out.extend_from_slice(&d.payload);
        }
        Submessage::DataFrag(f) => {
            if f.frag_count == 0 || f.frag_index >= f.frag_count {
                return Err(WireError::InvalidField("frag_index must be below frag_count"));
            }
            if f.data.is_empty() || f.data.len() as u64 > u64::from(f.total_len) {
                return Err(WireError::InvalidField("fragment length outside 1..=total_len"));
            }
            check_len_fits(f.data.len())?;
            put_u32(out, f.writer_id.0);
            put_u64(out, f.seq.0);
            put_u32(out, f.frag_index);
            put_u32(out, f.frag_count);
            put_u32(out, f.total_len);
            out.extend_from_slice(&f.data);
        }
        Submessage::Heartbeat(hb) => {
            if hb.first_seq.0 < 1 || hb.last_seq.0 < hb.first_seq.0 - 1 {
                return Err(WireError::InvalidField("heartbeat range"));
            }
            put_u32(out, hb.writer_id.0);
            put_u64(out, hb.first_seq.0);
            put_u64(out, hb.last_seq.0);
            put_u32(out, hb.count);
        }
        Submessage::AckNack(an) => {
            put_u32(out, an.reader_id.0);
            out.extend_from_slice(&an.writer_guid.to_bytes());
            put_u64(out, an.base_seq.0);
            put_u32(out, an.missing.len());
            for i in 0..an.missing.byte_len() {
                out.push(an.missing.byte(i));
            }
        }
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.remaining() < n {
            return Err(WireError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> Result<String, WireError> {
        let len = usize::from(self.u16()?);
        if len > MAX_NAME_LEN {
            return Err(WireError::Malformed("name longer than 256 bytes"));
        }
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| WireError::Malformed("name is not UTF-8"))
    }

    fn finish(&self) -> Result<(), WireError> {
        if self.remaining() != 0 {
            return Err(WireError::Malformed("trailing bytes in submessage body"));
        }
        Ok(())
    }
}

/// Parses a datagram. Unknown submessage kinds are skipped using their
/// length field.
pub fn decode_message(bytes: &[u8]) -> Result<Message, WireError> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4).map_err(|_| {
        if bytes[..] == MAGIC[..bytes.len()] {
            WireError::Truncated
        } else {
            WireError::BadMagic
        }
    })?;
    if magic != MAGIC {
        return Err(WireError::BadMagic);
    }
    let major = r.u8()?;
    let minor = r.u8()?;
    if major != VERSION_MAJOR {
        return Err(WireError::BadVersion { major, minor });
    }
    let mut prefix = [0u8; 12];
    prefix.copy_from_slice(r.take(12)?);
    let mut msg = Message::new(GuidPrefix(prefix));
    while r.remaining() > 0 {
        let kind = r.u8()?;
        let flags = r.u8()?;
        let len = usize::from(r.u16()?);
        let body = r.take(len)?;
        let final_flag = flags & FLAG_FINAL != 0;
        let sub = match kind {
            KIND_ANNOUNCE => Submessage::Announce(decode_announce(body)?),
            KIND_DATA => Submessage::Data(decode_data(body)?),
            KIND_DATA_FRAG => Submessage::DataFrag(decode_data_frag(body)?),
            KIND_HEARTBEAT => Submessage::Heartbeat(decode_heartbeat(body, final_flag)?),
            KIND_ACKNACK => Submessage::AckNack(decode_acknack(body, final_flag)?),
            _ => continue,
        };
        msg.submessages.push(sub);
    }
    Ok(msg)
}

fn decode_announce(body: &[u8]) -> Result<Announce, WireError> {
    let mut r = Reader::new(body);
    let lease_duration_ms = r.u32()?;
    let n = r.u16()?;
    let mut endpoints = Vec::with_capacity(usize::from(n).min(body.len() / 12));
    for _ in 0..n {
        let entity_id = EntityId(r.u32()?);
        let role = EndpointRole::from_byte(r.u8()?).ok_or(WireError::Malformed("endpoint role"))?;
        let reliability = Reliability::from_byte(r.u8()?).ok_or(WireError::Malformed("endpoint reliability"))?;
        let topic_name = r.name()?;
        let type_name = r.name()?;
        endpoints.push(EndpointInfo { entity_id, role, reliability, topic_name, type_name });
    }
    r.finish()?;
    Ok(Announce { lease_duration_ms, endpoints })
}

fn decode_data(body: &[u8]) -> Result<Data, WireError> {
    let mut r = Reader::new(body);
    let writer_id = EntityId(r.u32()?);
    let seq = SequenceNumber(r.u64()?);
    let len = r.u32()? as usize;
    let payload = r.take(len)?.to_vec();
    r.finish()?;
    Ok(Data { writer_id, seq, payload })
}

fn decode_data_frag(body: &[u8]) -> Result<DataFrag, WireError> {
    let mut r = Reader::new(body);
    let writer_id = EntityId(r.u32()?);
    let seq = SequenceNumber(r.u64()?);
    let frag_index = r.u32()?;
    let frag_count = r.u32()?;
    let total_len = r.u32()?;
    let data = r.take(r.remaining())?.to_vec();
    if frag_count == 0 || frag_index >= frag_count {
        return Err(WireError::Malformed("frag_index must be below frag_count"));
    }
    if data.is_empty() || data.len() as u64 > u64::from(total_len) {
        return Err(WireError::Malformed("fragment length outside 1..=total_len"));
    }
    Ok(DataFrag { writer_id, seq, frag_index, frag_count, total_len, data })
}

fn decode_heartbeat(body: &[u8], final_flag: bool) -> Result<Heartbeat, WireError> {
    let mut r = Reader::new(body);
    let writer_id = EntityId(r.u32()?);
    let first_seq = SequenceNumber(r.u64()?);
    let last_seq = SequenceNumber(r.u64()?);
    let count = r.u32()?;
    r.finish()?;
    if first_seq.0 < 1 || last_seq.0 < first_seq.0 - 1 {
        return Err(WireError::Malformed("heartbeat range"));
    }
    Ok(Heartbeat { writer_id, first_seq, last_seq, count, final_flag })
}

fn decode_acknack(body: &[u8], final_flag: bool) -> Result<AckNack, WireError> {
    let mut r = Reader::new(body);
    let reader_id = EntityId(r.u32()?);
    let guid: [u8; 16] = r.take(16)?.try_into().expect("16 bytes");
    let base_seq = SequenceNumber(r.u64()?);
    let nbits = r.u32()?;
    if nbits > MAX_BITMAP_BITS {
        return Err(WireError::Malformed("bitmap longer than 256 bits"));
    }
    let mut missing = SeqBitmap::new(nbits);
    let bytes = r.take(missing.byte_len())?;
    for (i, byte) in bytes.iter().enumerate() {
        for bit in 0..8 {
            let idx = (i * 8 + bit) as u32;
            if byte & (1 << bit) != 0 && idx < nbits {
                missing.set(idx);
            }
        }
    }
    r.finish()?;
    Ok(AckNack { reader_id, writer_guid: Guid::from_bytes(guid), base_seq, missing, final_flag })
}

/// Scans submessage headers without decoding bodies. True if the datagram
/// carries a DATA or DATA_FRAG submessage.
pub fn carries_data(bytes: &[u8]) -> bool {
    if bytes.len() < HEADER_LEN || bytes[..4] != MAGIC {
        return false;
    }
    let mut pos = HEADER_LEN;
    while pos + SUBMESSAGE_HEADER_LEN <= bytes.len() {
        let kind = bytes[pos];
        if kind == KIND_DATA || kind == KIND_DATA_FRAG {
            return true;
        }
        let len = usize::from(u16::from_le_bytes([bytes[pos + 2], bytes[pos + 3]]));
        pos += SUBMESSAGE_HEADER_LEN + len;
    }
    false
}

/// Number of fragments needed to carry `len` bytes in `frag_size` chunks.
pub fn fragment_count(len: usize, frag_size: usize) -> usize {
    len.div_ceil(frag_size)
}

/// Splits `payload` into a DATA_FRAG train for one `(writer, seq)`.
pub fn fragment_payload(
    writer_id: EntityId,
    seq: SequenceNumber,
    payload: &[u8],
    frag_size: usize,
) -> Result<Vec<DataFrag>, WireError> {
    if payload.is_empty() {
        return Err(WireError::EmptyPayload);
    }
    if frag_size == 0 {
        return Err(WireError::InvalidField("frag_size must be positive"));
    }
    let total_len =
        u32::try_from(payload.len()).map_err(|_| WireError::InvalidField("payload longer than u32::MAX"))?;
    let frag_count = fragment_count(payload.len(), frag_size) as u32;
    Ok(payload
        .chunks(frag_size)
        .enumerate()
        .map(|(i, chunk)| DataFrag {
            writer_id,
            seq,
            frag_index: i as u32,
            frag_count,
            total_len,
            data: chunk.to_vec(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reassembly {
    Complete(Vec<u8>),
    Incomplete,
}

/// Incremental reassembly state for one `(writer, seq)`.
///
/// The fragment size is inferred from the first accepted fragment: a
/// non-final fragment gives it directly, the final fragment gives it as
/// `(total_len - last_len) / (frag_count - 1)`.
#[derive(Debug, Clone)]
pub struct FragmentBuffer {
    writer_id: EntityId,
    seq: SequenceNumber,
    total_len: u32,
    frag_count: u32,
    frag_size: u32,
    buf: Vec<u8>,
    received: Vec<bool>,
    received_count: u32,
}

impl FragmentBuffer {
    pub fn new(first: &DataFrag) -> Result<Self, WireError> {
        if first.total_len == 0 {
            return Err(WireError::InconsistentFragment("total_len is zero"));
        }
        if first.total_len > MAX_REASSEMBLY_LEN {
            return Err(WireError::InconsistentFragment("total_len exceeds reassembly limit"));
        }
        if first.frag_count == 0 || first.frag_index >= first.frag_count {
            return Err(WireError::InconsistentFragment("frag_index out of range"));
        }
        let len = first.data.len() as u64;
        let total = u64::from(first.total_len);
        let count = u64::from(first.frag_count);
        let frag_size = if first.frag_index + 1 < first.frag_count {
            len
        } else if count == 1 {
            total
        } else {
            let rest = total.saturating_sub(len);
            if len == 0 || rest % (count - 1) != 0 {
                return Err(WireError::InconsistentFragment("final fragment size"));
            }
            rest / (count - 1)
        };
        if frag_size == 0 || total.div_ceil(frag_size) != count {
            return Err(WireError::InconsistentFragment("frag_count disagrees with sizes"));
        }
        let mut fb = FragmentBuffer {
            writer_id: first.writer_id,
            seq: first.seq,
            total_len: first.total_len,
            frag_count: first.frag_count,
            frag_size: frag_size as u32,
            buf: vec![0; first.total_len as usize],
            received: vec![false; first.frag_count as usize],
            received_count: 0,
        };
        fb.insert(first)?;
        Ok(fb)
    }

    pub fn seq(&self) -> SequenceNumber {
        self.seq
    }

    pub fn frag_count(&self) -> u32 {
        self.frag_count
    }

    pub fn received_count(&self) -> u32 {
        self.received_count
    }

    pub fn is_complete(&self) -> bool {
        self.received_count == self.frag_count
    }

    fn expected_len(&self, index: u32) -> usize {
        if index + 1 < self.frag_count {
            self.frag_size as usize
        } else {
            (self.total_len - self.frag_size * (self.frag_count - 1)) as usize
        }
    }

    /// Adds one fragment. Duplicate indices are ignored.
    pub fn insert(&mut self, frag: &DataFrag) -> Result<(), WireError> {
        if frag.writer_id != self.writer_id || frag.seq != self.seq {
            return Err(WireError::InconsistentFragment("writer or seq differs"));
        }
        if frag.total_len != self.total_len || frag.frag_count != self.frag_count {
            return Err(WireError::InconsistentFragment("total_len or frag_count differs"));
        }
        if frag.frag_index >= self.frag_count {
            return Err(WireError::InconsistentFragment("frag_index out of range"));
        }
        if frag.data.len() != self.expected_len(frag.frag_index) {
            return Err(WireError::InconsistentFragment("fragment size contradicts its index"));
        }
        let idx = frag.frag_index as usize;
        if self.received[idx] {
            return Ok(());
        }
        let offset = idx * self.frag_size as usize;
        self.buf[offset..offset + frag.data.len()].copy_from_slice(&frag.data);
        self.received[idx] = true;
        self.received_count += 1;
        Ok(())
    }

    /// Takes the payload once every fragment has arrived.
    pub fn take_if_complete(&mut self) -> Option<Vec<u8>> {
        if self.is_complete() {
            Some(std::mem::take(&mut self.buf))
        } else {
            None
        }
    }
}

/// Reassembles a set of fragments that all belong to one `(writer, seq)`.
pub fn reassemble(frags: &[DataFrag]) -> Result<Reassembly, WireError> {
    let Some((first, rest)) = frags.split_first() else {
        return Ok(Reassembly::Incomplete);
    };
    let mut buffer = FragmentBuffer::new(first)?;
    for frag in rest {
        buffer.insert(frag)?;
    }
    Ok(match buffer.take_if_complete() {
        Some(payload) => Reassembly::Complete(payload),
        None => Reassembly::Incomplete,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prefix(b: u8) -> GuidPrefix {
        GuidPrefix([b; 12])
    }

    #[test]
    fn header_only_message_is_18_bytes() {
        let bytes = encode_message(&Message::new(GuidPrefix([0; 12]))).unwrap();
        assert_eq!(bytes.len(), 18);
        assert_eq!(&bytes[..6], &[0x4D, 0x44, 0x44, 0x53, 0x01, 0x00]);
        assert!(bytes[6..].iter().all(|&b| b == 0));
        assert_eq!(decode_message(&bytes).unwrap(), Message::new(GuidPrefix([0; 12])));
    }

    #[test]
    fn oversize_data_is_rejected() {
        let msg = Message::with(
            prefix(1),
            Submessage::Data(Data { writer_id: EntityId(1), seq: SequenceNumber(1), payload: vec![0; 70_000] }),
        );
        assert!(matches!(encode_message(&msg), Err(WireError::OversizeMessage { .. })));
    }

    #[test]
    fn largest_single_data_fits() {
        let max_payload = MAX_MESSAGE_LEN - HEADER_LEN - SUBMESSAGE_HEADER_LEN - DATA_BODY_OVERHEAD;
        let mut msg = Message::with(
            prefix(1),
            Submessage::Data(Data { writer_id: EntityId(1), seq: SequenceNumber(1), payload: vec![7; max_payload] }),
        );
        assert_eq!(encode_message(&msg).unwrap().len(), MAX_MESSAGE_LEN);
        if let Submessage::Data(d) = &mut msg.submessages[0] {
            d.payload.push(0);
        }
        assert!(encode_message(&msg).is_err());
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_message(&Message::new(prefix(3))).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert_eq!(decode_message(&bytes), Err(WireError::BadMagic));
        let mut bytes = encode_message(&Message::new(prefix(3))).unwrap();
        bytes[4] = 2;
        assert_eq!(decode_message(&bytes), Err(WireError::BadVersion { major: 2, minor: 0 }));
        assert_eq!(decode_message(b"MD"), Err(WireError::Truncated));
        assert_eq!(decode_message(b"XY"), Err(WireError::BadMagic));
        assert_eq!(decode_message(b"MDDS\x01\x00abc"), Err(WireError::Truncated));
    }

    #[test]
    fn unknown_kind_is_skipped() {
        let data = Data { writer_id: EntityId(9), seq: SequenceNumber(4), payload: vec![1, 2, 3] };
        let mut bytes = encode_message(&Message::new(prefix(5))).unwrap();
        bytes.extend_from_slice(&[200, 0, 4, 0, 0xAA, 0xBB, 0xCC, 0xDD]);
        // DATA: kind 2, flags 0, length 19, writer 9, seq 4, len 3, payload
        bytes.extend_from_slice(&[2, 0, 19, 0]);
        bytes.extend_from_slice(&9u32.to_le_bytes());
        bytes.extend_from_slice(&4u64.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&[1, 2, 3]);
        let msg = decode_message(&bytes).unwrap();
        assert_eq!(msg.submessages, vec![Submessage::Data(data)]);
    }

    #[test]
    fn declared_length_overrun_is_truncated() {
        let mut bytes = encode_message(&Message::new(prefix(5))).unwrap();
        bytes.extend_from_slice(&[2, 0, 50, 0, 1, 2, 3]);
        assert_eq!(decode_message(&bytes), Err(WireError::Truncated));
    }

    #[test]
    fn acknack_bitmap_layout() {
        let mut missing = SeqBitmap::new(10);
        missing.set(0);
        missing.set(9);
        let an = AckNack {
            reader_id: EntityId(2),
            writer_guid: Guid::new(prefix(4), EntityId(1)),
            base_seq: SequenceNumber(2),
            missing,
            final_flag: false,
        };
        let bytes = encode_message(&Message::with(prefix(1), Submessage::AckNack(an.clone()))).unwrap();
        let body = &bytes[HEADER_LEN + SUBMESSAGE_HEADER_LEN..];
        assert_eq!(body.len(), 4 + 16 + 8 + 4 + 2);
        assert_eq!(&body[28..32], &10u32.to_le_bytes());
        assert_eq!(&body[32..], &[0b0000_0001, 0b0000_0010]);
        let back = decode_message(&bytes).unwrap();
        assert_eq!(back.submessages[0], Submessage::AckNack(an.clone()));
        let seqs: Vec<u64> = an.missing_seqs().map(|s| s.0).collect();
        assert_eq!(seqs, vec![2, 11]);
    }

    #[test]
    fn heartbeat_range_invariant() {
        let hb = |first, last| Heartbeat {
            writer_id: EntityId(1),
            first_seq: SequenceNumber(first),
            last_seq: SequenceNumber(last),
            count: 1,
            final_flag: false,
        };
        let enc = |h| encode_message(&Message::with(prefix(1), Submessage::Heartbeat(h)));
        assert!(enc(hb(1, 0)).is_ok());
        assert!(enc(hb(5, 10)).is_ok());
        assert!(enc(hb(0, 0)).is_err());
        assert!(enc(hb(5, 3)).is_err());
    }

    #[test]
    fn long_topic_names_rejected() {
        let ep = EndpointInfo {
            entity_id: EntityId(1),
            role: EndpointRole::Writer,
            reliability: Reliability::Reliable,
            topic_name: "x".repeat(257),
            type_name: "T".into(),
        };
        let msg =
            Message::with(prefix(1), Submessage::Announce(Announce { lease_duration_ms: 10, endpoints: vec![ep] }));
        assert!(matches!(encode_message(&msg), Err(WireError::InvalidField(_))));
    }

    #[test]
    fn fragment_arithmetic() {
        let payload: Vec<u8> = (0..262_144u32).map(|i| (i % 251) as u8).collect();
        let frags = fragment_payload(EntityId(1), SequenceNumber(1), &payload, 1_200).unwrap();
        assert_eq!(frags.len(), 219);
        assert_eq!(frags.last().unwrap().data.len(), 544);
        assert!(frags[..218].iter().all(|f| f.data.len() == 1_200));

        let exact = fragment_payload(EntityId(1), SequenceNumber(1), &[0; 1_200], 1_200).unwrap();
        assert_eq!(exact.len(), 1);
        assert_eq!(exact[0].data.len(), 1_200);

        assert_eq!(fragment_payload(EntityId(1), SequenceNumber(1), &[], 1_200), Err(WireError::EmptyPayload));
    }

    #[test]
    fn reassembly_reverse_order_and_missing() {
        let payload: Vec<u8> = (0..262_144u32).map(|i| (i * 7 % 256) as u8).collect();
        let mut frags = fragment_payload(EntityId(3), SequenceNumber(8), &payload, 1_200).unwrap();
        frags.reverse();
        assert_eq!(reassemble(&frags).unwrap(), Reassembly::Complete(payload.clone()));
        frags.remove(100);
        assert_eq!(reassemble(&frags).unwrap(), Reassembly::Incomplete);
    }

    #[test]
    fn duplicate_fragments_are_idempotent() {
        let payload = vec![9u8; 3_000];
        let frags = fragment_payload(EntityId(3), SequenceNumber(1), &payload, 1_000).unwrap();
        let mut with_dups = frags.clone();
        with_dups.extend(frags.iter().cloned());
        assert_eq!(reassemble(&with_dups).unwrap(), Reassembly::Complete(payload));
    }

    #[test]
    fn inconsistent_fragment_count() {
        let frags = fragment_payload(EntityId(3), SequenceNumber(1), &[1u8; 4_000], 1_000).unwrap();
        let mut odd = frags[1].clone();
        odd.frag_count = 5;
        assert!(matches!(reassemble(&[frags[0].clone(), odd]), Err(WireError::InconsistentFragment(_))));
        let mut short = frags[2].clone();
        short.data.pop();
        assert!(matches!(reassemble(&[frags[0].clone(), short]), Err(WireError::InconsistentFragment(_))));
    }

    #[test]
    fn frag_size_inferred_from_final_fragment() {
        let payload: Vec<u8> = (0..2_500u32).map(|i| i as u8).collect();
        let frags = fragment_payload(EntityId(1), SequenceNumber(1), &payload, 1_000).unwrap();
        let mut fb = FragmentBuffer::new(&frags[2]).unwrap();
        fb.insert(&frags[0]).unwrap();
        assert!(fb.take_if_complete().is_none());
        fb.insert(&frags[1]).unwrap();
        assert_eq!(fb.take_if_complete().unwrap(), payload);
    }
}
