//! Application payloads carried over the middleware, and PGM image I/O.
//!
//! Both payload types use a fixed little-endian layout:
//!
//! ```text
//! XrayImageSample      sample_id[16] width:u32 height:u32 bpp:u8 publish_us:u64 pixels[w*h]
//! ClassificationResult sample_id[16] label:u8 confidences:f64x4 inference_us:u64 result_us:u64
//! ```

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::RngCore;
use thiserror::Error;

pub const IMAGE_HEADER_LEN: usize = 16 + 4 + 4 + 1 + 8;
pub const RESULT_LEN: usize = 16 + 1 + 32 + 8 + 8;
pub const BITS_PER_PIXEL: u8 = 8;
/// Tolerance on the sum of the four confidences.
pub const CONFIDENCE_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SampleError {
    #[error("payload truncated")]
    Truncated,
    #[error("invalid label {0}")]
    BadLabel(u8),
    #[error("pixel count does not match dimensions")]
    BadPixelCount,
    #[error("invalid confidences: {0}")]
    BadConfidences(&'static str),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
}

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("malformed PGM header: {0}")]
    MalformedHeader(&'static str),
    #[error("expected {expected} pixel bytes, found {found}")]
    TruncatedPixels { expected: usize, found: usize },
    #[error("I/O failure: {0}")]
    IoFailure(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Label {
    Covid19 = 0,
    Normal = 1,
    LungOpacity = 2,
    ViralPneumonia = 3,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Covid19, Label::Normal, Label::LungOpacity, Label::ViralPneumonia];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: u8) -> Result<Label, SampleError> {
        Label::ALL.get(usize::from(i)).copied().ok_or(SampleError::BadLabel(i))
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Covid19 => "COVID19",
            Label::Normal => "NORMAL",
            Label::LungOpacity => "LUNG_OPACITY",
            Label::ViralPneumonia => "VIRAL_PNEUMONIA",
        }
    }

    /// Index of the largest score; the lowest index wins exact ties.
    pub fn argmax(scores: &[f64; 4]) -> Label {
        let mut best = 0;
        for k in 1..4 {
            if scores[k] > scores[best] {
                best = k;
            }
        }
        Label::ALL[best]
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown label {0:?}")]
pub struct ParseLabelError(pub String);

impl FromStr for Label {
    type Err = ParseLabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if let Some(l) = Label::ALL.iter().find(|l| l.name().eq_ignore_ascii_case(t)) {
            return Ok(*l);
        }
        match t.parse::<u8>() {
            Ok(i) if usize::from(i) < Label::ALL.len() => Ok(Label::ALL[usize::from(i)]),
            _ => Err(ParseLabelError(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct SampleId(pub [u8; 16]);

impl SampleId {
    pub fn random() -> Self {
        let mut b = [0u8; 16];
        rand::thread_rng().fill_bytes(&mut b);
        SampleId(b)
    }
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl FromStr for SampleId {
    type Err = ParseLabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.len() != 32 || !s.is_ascii() {
            return Err(ParseLabelError(s.to_string()));
        }
        let mut b = [0u8; 16];
        for (i, byte) in b.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| ParseLabelError(s.to_string()))?;
        }
        Ok(SampleId(b))
    }
}

pub fn unix_time_us() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_micros() as u64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct XrayImageSample {
    pub sample_id: SampleId,
    pub width: u32,
    pub height: u32,
    pub publish_timestamp_us: u64,
    pub pixels: Vec<u8>,
}

impl XrayImageSample {
    /// A new image with a fresh id and an unset publish timestamp.
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, SampleError> {
        if width == 0 || height == 0 || pixels.len() as u64 != u64::from(width) * u64::from(height) {
            return Err(SampleError::BadPixelCount);
        }
        Ok(XrayImageSample { sample_id: SampleId::random(), width, height, publish_timestamp_us: 0, pixels })
    }

    pub fn pixel(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn encoded_len(&self) -> usize {
        IMAGE_HEADER_LEN + self.pixels.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.sample_id.0);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.push(BITS_PER_PIXEL);
        out.extend_from_slice(&self.publish_timestamp_us.to_le_bytes());
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, SampleError> {
        if bytes.len() < IMAGE_HEADER_LEN {
            return Err(SampleError::Truncated);
        }
        let mut r = Cursor(bytes);
        let sample_id = SampleId(r.array());
        let width = u32::from_le_bytes(r.array());
        let height = u32::from_le_bytes(r.array());
        let bpp = r.array::<1>()[0];
        let publish_timestamp_us = u64::from_le_bytes(r.array());
        if bpp != BITS_PER_PIXEL || width == 0 || height == 0 {
            return Err(SampleError::BadPixelCount);
        }
        let expected = u64::from(width) * u64::from(height);
        let found = r.0.len() as u64;
        if found < expected {
            return Err(SampleError::Truncated);
        }
        if found > expected {
            return Err(SampleError::BadPixelCount);
        }
        Ok(XrayImageSample { sample_id, width, height, publish_timestamp_us, pixels: r.0.to_vec() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationResult {
    pub sample_id: SampleId,
    pub label: Label,
    pub confidences: [f64; 4],
    pub inference_duration_us: u64,
    pub result_timestamp_us: u64,
}

pub fn validate_confidences(c: &[f64; 4]) -> Result<(), SampleError> {
    if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(SampleError::BadConfidences("value outside [0, 1]"));
    }
    if (c.iter().sum::<f64>() - 1.0).abs() > CONFIDENCE_SUM_TOLERANCE {
        return Err(SampleError::BadConfidences("values do not sum to 1"));
    }
    Ok(())
}

impl ClassificationResult {
    /// Builds a result whose label is the argmax of `confidences`.
    pub fn new(
        sample_id: SampleId,
        confidences: [f64; 4],
        inference_duration_us: u64,
        result_timestamp_us: u64,
    ) -> Result<Self, SampleError> {
        validate_confidences(&confidences)?;
        Ok(ClassificationResult {
            sample_id,
            label: Label::argmax(&confidences),
            confidences,
            inference_duration_us,
            result_timestamp_us,
        })
    }

    pub fn confidence(&self) -> f64 {
        self.confidences[self.label.index()]
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(RESULT_LEN);
        out.extend_from_slice(&self.sample_id.0);
        out.push(self.label as u8);
        for c in self.confidences {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out.extend_from_slice(&self.inference_duration_us.to_le_bytes());
        out.extend_from_slice(&self.result_timestamp_us.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, SampleError> {
        if bytes.len() < RESULT_LEN {
            return Err(SampleError::Truncated);
        }
        if bytes.len() > RESULT_LEN {
            return Err(SampleError::TrailingBytes(bytes.len() - RESULT_LEN));
        }
        let mut r = Cursor(bytes);
        let sample_id = SampleId(r.array());
        let label = Label::from_index(r.array::<1>()[0])?;
        let mut confidences = [0.0; 4];
        for c in &mut confidences {
            *c = f64::from_le_bytes(r.array());
        }
        let inference_duration_us = u64::from_le_bytes(r.array());
        let result_timestamp_us = u64::from_le_bytes(r.array());
        validate_confidences(&confidences)?;
        if Label::argmax(&confidences) != label {
            return Err(SampleError::BadLabel(label as u8));
        }
        Ok(ClassificationResult { sample_id, label, confidences, inference_duration_us, result_timestamp_us })
    }
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    // Callers check the length up front.
    fn array<const N: usize>(&mut self) -> [u8; N] {
        let (head, tail) = self.0.split_at(N);
        self.0 = tail;
        head.try_into().expect("length checked")
    }
}

/// Parses a binary 8-bit PGM. The result gets a fresh sample id.
pub fn parse_pgm(bytes: &[u8]) -> Result<XrayImageSample, PgmError> {
    if bytes.len() < 2 {
        return Err(PgmError::MalformedHeader("missing magic"));
    }
    if &bytes[..2] != b"P5" {
        let magic = String::from_utf8_lossy(&bytes[..2]).into_owned();
        return Err(PgmError::UnsupportedFormat(magic));
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in &mut fields {
        *field = header_number(bytes, &mut pos)?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(PgmError::UnsupportedFormat(format!("maxval {maxval}")));
    }
    if width == 0 || height == 0 || width > u64::from(u32::MAX) || height > u64::from(u32::MAX) {
        return Err(PgmError::MalformedHeader("bad dimensions"));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(PgmError::MalformedHeader("missing whitespace before raster")),
    }
    let expected = width
        .checked_mul(height)
        .and_then(|n| usize::try_from(n).ok())
        .ok_or(PgmError::MalformedHeader("bad dimensions"))?;
    let raster = &bytes[pos..];
    if raster.len() < expected {
        return Err(PgmError::TruncatedPixels { expected, found: raster.len() });
    }
    let pixels = raster[..expected].to_vec();
    XrayImageSample::new(width as u32, height as u32, pixels).map_err(|_| PgmError::MalformedHeader("bad dimensions"))
}

fn header_number(bytes: &[u8], pos: &mut usize) -> Result<u64, PgmError> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n' && b != b'\r') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(PgmError::MalformedHeader("header ends early")),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err(PgmError::MalformedHeader("expected a decimal number"));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or(PgmError::MalformedHeader("number out of range"))
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<XrayImageSample, PgmError> {
    parse_pgm(&fs::read(path)?)
}

pub fn pgm_bytes(image: &XrayImageSample) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

pub fn save_pgm(image: &XrayImageSample, path: impl AsRef<Path>) -> Result<(), PgmError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&pgm_bytes(image))?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_pixel_image_golden_bytes() {
        let mut img = XrayImageSample::new(1, 1, vec![0x7f]).unwrap();
        img.sample_id = SampleId([0xab; 16]);
        img.publish_timestamp_us = 0x0102_0304_0506_0708;
        let bytes = img.encode();
        assert_eq!(bytes.len(), 34);
        let mut golden = vec![0xab; 16];
        golden.extend_from_slice(&[1, 0, 0, 0, 1, 0, 0, 0, 8]);
        golden.extend_from_slice(&[8, 7, 6, 5, 4, 3, 2, 1, 0x7f]);
        assert_eq!(bytes, golden);
        assert_eq!(XrayImageSample::decode(&bytes).unwrap(), img);
    }

    #[test]
    fn image_decode_errors() {
        let img = XrayImageSample::new(2, 2, vec![1, 2, 3, 4]).unwrap();
        let bytes = img.encode();
        assert_eq!(XrayImageSample::decode(&bytes[..10]), Err(SampleError::Truncated));
        assert_eq!(XrayImageSample::decode(&bytes[..bytes.len() - 1]), Err(SampleError::Truncated));
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(XrayImageSample::decode(&long), Err(SampleError::BadPixelCount));
        assert_eq!(XrayImageSample::new(2, 2, vec![0; 3]), Err(SampleError::BadPixelCount));
        assert_eq!(XrayImageSample::new(0, 2, vec![]), Err(SampleError::BadPixelCount));
    }

    #[test]
    fn result_layout_and_errors() {
        let r = ClassificationResult::new(SampleId([1; 16]), [0.1, 0.7, 0.1, 0.1], 5, 6).unwrap();
        assert_eq!(r.label, Label::Normal);
        let bytes = r.encode();
        assert_eq!(bytes.len(), RESULT_LEN);
        assert_eq!(RESULT_LEN, 65);
        assert_eq!(ClassificationResult::decode(&bytes).unwrap(), r);

        let mut bad = bytes.clone();
        bad[16] = 9;
        assert_eq!(ClassificationResult::decode(&bad), Err(SampleError::BadLabel(9)));
        let mut mismatch = bytes.clone();
        mismatch[16] = 0;
        assert_eq!(ClassificationResult::decode(&mismatch), Err(SampleError::BadLabel(0)));
        assert_eq!(ClassificationResult::decode(&bytes[..64]), Err(SampleError::Truncated));
        assert!(ClassificationResult::new(SampleId::default(), [0.5; 4], 0, 0).is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(Label::argmax(&[0.25; 4]), Label::Covid19);
        assert_eq!(Label::argmax(&[0.1, 0.4, 0.4, 0.1]), Label::Normal);
    }

    #[test]
    fn label_names_round_trip() {
        for l in Label::ALL {
            assert_eq!(l.name().parse::<Label>().unwrap(), l);
            assert_eq!(l.index().to_string().parse::<Label>().unwrap(), l);
        }
        assert!("CAT".parse::<Label>().is_err());
        let id = SampleId::random();
        assert_eq!(id.to_string().parse::<SampleId>().unwrap(), id);
    }

    #[test]
    fn pgm_parse_examples() {
        let img = parse_pgm(b"P5\n2 2\n255\n\x00\x40\x80\xff").unwrap();
        assert_eq!((img.width, img.height), (2, 2));
        assert_eq!(img.pixels, vec![0, 64, 128, 255]);

        let commented = parse_pgm(b"P5 # a comment\n 2\t2 # more\n255\n\x00\x40\x80\xff").unwrap();
        assert_eq!(commented.pixels, img.pixels);

        assert!(matches!(parse_pgm(b"P2\n2 2\n255\n0 1 2 3"), Err(PgmError::UnsupportedFormat(_))));
        assert!(matches!(parse_pgm(b"P5\n2 2\n65535\n"), Err(PgmError::UnsupportedFormat(_))));
        assert!(matches!(
            parse_pgm(b"P5\n2 2\n255\n\x00\x01\x02"),
            Err(PgmError::TruncatedPixels { expected: 4, found: 3 })
        ));
        assert!(matches!(parse_pgm(b"P5\n2\n"), Err(PgmError::MalformedHeader(_))));
        assert!(matches!(parse_pgm(b"P5\nx 2 255\n"), Err(PgmError::MalformedHeader(_))));
    }

    #[test]
    fn canonical_pgm_header_length() {
        let img = XrayImageSample::new(2, 2, vec![0, 64, 128, 255]).unwrap();
        let bytes = pgm_bytes(&img);
        assert_eq!(&bytes[..11], b"P5\n2 2\n255\n");
        assert_eq!(bytes.len(), 11 + 4);
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let img = XrayImageSample::new(3, 2, vec![9, 8, 7, 6, 5, 4]).unwrap();
        let path = dir.path().join("x.pgm");
        save_pgm(&img, &path).unwrap();
        let back = load_pgm(&path).unwrap();
        assert_eq!((back.width, back.height, back.pixels), (3, 2, img.pixels.clone()));
        assert!(matches!(save_pgm(&img, ""), Err(PgmError::IoFailure(_))));
        assert!(matches!(save_pgm(&img, dir.path().join("no/such/dir.pgm")), Err(PgmError::IoFailure(_))));
    }

    fn image() -> impl Strategy<Value = XrayImageSample> {
        (1u32..=64, 1u32..=64, any::<[u8; 16]>(), any::<u64>()).prop_flat_map(|(w, h, id, ts)| {
            proptest::collection::vec(any::<u8>(), (w * h) as usize).prop_map(move |pixels| XrayImageSample {
                sample_id: SampleId(id),
                width: w,
                height: h,
                publish_timestamp_us: ts,
                pixels,
            })
        })
    }

    proptest! {
        #[test]
        fn image_round_trip(img in image()) {
            prop_assert_eq!(XrayImageSample::decode(&img.encode()).unwrap(), img);
        }

        #[test]
        fn pgm_round_trip(img in image()) {
            let back = parse_pgm(&pgm_bytes(&img)).unwrap();
            prop_assert_eq!((back.width, back.height), (img.width, img.height));
            prop_assert_eq!(back.pixels, img.pixels);
        }

        #[test]
        fn result_round_trip(raw in any::<[u16; 4]>(), id in any::<[u8; 16]>(), a in any::<u64>(), b in any::<u64>()) {
            let total: f64 = raw.iter().map(|&v| f64::from(v) + 1.0).sum();
            let conf = raw.map(|v| (f64::from(v) + 1.0) / total);
            let r = ClassificationResult::new(SampleId(id), conf, a, b).unwrap();
            prop_assert_eq!(ClassificationResult::decode(&r.encode()).unwrap(), r);
        }
    }
}
