//! Wire formats: the compressed image stream and the model checkpoint.
//!
//! Stream layout, all integers little-endian:
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `TNC1` |
//! | 1 | version (1) |
//! | 2 | width before padding |
//! | 2 | height before padding |
//! | 1 | tile size (32) |
//! | 1 | mode: 0 constant, 1 adaptive |
//! | 2 | iterations, or target PSNR in 1/256 dB |
//! | 8 | model digest |
//! | rows·cols | iterations per tile, raster order |
//! | ⌈Σk·128/8⌉ | codes, MSB first, +1 → 1, zero padded |

use thiserror::Error;

use crate::model::{Architecture, CodecModel, Layout, TrainingMeta, BITS_PER_ITERATION, K_MAX, TILE};
use crate::nn::{BinaryCode, Params};
use crate::tensor::Tensor;

pub const STREAM_MAGIC: [u8; 4] = *b"TNC1";
pub const STREAM_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 21;
pub const MODEL_MAGIC: [u8; 4] = *b"TNCM";
pub const MODEL_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StreamError {
    #[error("not a tile codec stream (bad magic)")]
    BadMagic,
    #[error("unsupported stream version {0}")]
    UnsupportedVersion(u8),
    #[error("stream truncated: need {expected} bytes, have {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("stream has {actual} bytes, expected exactly {expected}")]
    TrailingBytes { expected: usize, actual: usize },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("tile {tile} plans {k} iterations, above the limit of {K_MAX}")]
    PlanEntry { tile: usize, k: u8 },
    #[error("plan covers {actual} tiles, header implies {expected}")]
    PlanSize { expected: usize, actual: usize },
    #[error("tile {tile} has {actual} codes but plans {expected}")]
    CodeCount { tile: usize, expected: usize, actual: usize },
    #[error("code of {0} bits, expected {BITS_PER_ITERATION}")]
    CodeLength(usize),
}

/// Rate control recorded in the header.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// Every tile uses exactly `k` iterations.
    Constant(u8),
    /// Per-tile iterations chosen to reach a PSNR target, in 1/256 dB.
    Adaptive { target_q8: u16 },
}

impl Mode {
    pub fn adaptive_db(target: f64) -> Option<Mode> {
        (0.0..100.0)
            .contains(&target)
            .then(|| Mode::Adaptive {
                target_q8: (target * 256.0).round() as u16,
            })
    }

    pub fn target_db(&self) -> Option<f64> {
        match *self {
            Mode::Adaptive { target_q8 } => Some(target_q8 as f64 / 256.0),
            Mode::Constant(_) => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Constant(_) => "constant",
            Mode::Adaptive { .. } => "adaptive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamHeader {
    pub width: u16,
    pub height: u16,
    pub mode: Mode,
    pub model_digest: [u8; 8],
}

impl StreamHeader {
    pub fn grid(&self) -> (usize, usize) {
        (
            (self.height as usize).div_ceil(TILE),
            (self.width as usize).div_ceil(TILE),
        )
    }

    fn validate(&self) -> Result<(), StreamError> {
        if self.width == 0 || self.height == 0 {
            return Err(StreamError::InvalidHeader(format!(
                "empty image {}x{}",
                self.width, self.height
            )));
        }
        match self.mode {
            Mode::Constant(k) if k as usize > K_MAX => {
                Err(StreamError::InvalidHeader(format!("constant k={k} above {K_MAX}")))
            }
            Mode::Adaptive { target_q8 } if target_q8 >= 100 * 256 => Err(StreamError::InvalidHeader(format!(
                "target {} dB outside [0, 100)",
                target_q8 as f64 / 256.0
            ))),
            _ => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[..4].copy_from_slice(&STREAM_MAGIC);
        b[4] = STREAM_VERSION;
        b[5..7].copy_from_slice(&self.width.to_le_bytes());
        b[7..9].copy_from_slice(&self.height.to_le_bytes());
        b[9] = TILE as u8;
        let (mode, param) = match self.mode {
            Mode::Constant(k) => (0, k as u16),
            Mode::Adaptive { target_q8 } => (1, target_q8),
        };
        b[10] = mode;
        b[11..13].copy_from_slice(&param.to_le_bytes());
        b[13..21].copy_from_slice(&self.model_digest);
        b
    }

    /// Parses and validates a header; magic and version are checked first.
    pub fn parse(bytes: &[u8]) -> Result<Self, StreamError> {
        if bytes.len() < 4 || bytes[..4] != STREAM_MAGIC {
            return Err(StreamError::BadMagic);
        }
        if bytes.len() < 5 {
            return Err(StreamError::Truncated {
                expected: HEADER_LEN,
                actual: bytes.len(),
            });
        }
        if bytes[4] != STREAM_VERSION {
            return Err(StreamError::UnsupportedVersion(bytes[4]));
        }
        if bytes.len() < HEADER_LEN {
            return Err(StreamError::Truncated {
                expected: HEADER_LEN,
                actual: bytes.len(),
            });
        }
        if bytes[9] as usize != TILE {
            return Err(StreamError::InvalidHeader(format!("tile size {}", bytes[9])));
        }
        let param = u16::from_le_bytes([bytes[11], bytes[12]]);
        let mode = match bytes[10] {
            0 if param <= u8::MAX as u16 => Mode::Constant(param as u8),
            0 => return Err(StreamError::InvalidHeader(format!("constant k={param} above {K_MAX}"))),
            1 => Mode::Adaptive { target_q8: param },
            m => return Err(StreamError::InvalidHeader(format!("unknown mode {m}"))),
        };
        let header = StreamHeader {
            width: u16::from_le_bytes([bytes[5], bytes[6]]),
            height: u16::from_le_bytes([bytes[7], bytes[8]]),
            mode,
            model_digest: bytes[13..21].try_into().expect("8 bytes"),
        };
        header.validate()?;
        Ok(header)
    }
}

/// Iterations per tile, row-major over the tile grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilePlan {
    pub rows: usize,
    pub cols: usize,
    pub iterations: Vec<u8>,
}

impl TilePlan {
    pub fn uniform(rows: usize, cols: usize, k: u8) -> Self {
        TilePlan {
            rows,
            cols,
            iterations: vec![k; rows * cols],
        }
    }

    pub fn payload_bits(&self) -> usize {
        self.iterations.iter().map(|&k| k as usize * BITS_PER_ITERATION).sum()
    }

    /// Count of tiles per iteration value `0..=K_MAX`.
    pub fn histogram(&self) -> [usize; K_MAX + 1] {
        let mut h = [0; K_MAX + 1];
        for &k in &self.iterations {
            h[(k as usize).min(K_MAX)] += 1;
        }
        h
    }
}

/// Bytes of a stream with `tiles` tiles carrying `payload_bits` code bits.
pub fn stream_len(tiles: usize, payload_bits: usize) -> usize {
    HEADER_LEN + tiles + payload_bits.div_ceil(8)
}

/// A parsed stream: header, plan, and each tile's codes in iteration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    pub header: StreamHeader,
    pub plan: TilePlan,
    pub codes: Vec<Vec<BinaryCode>>,
}

pub fn write_stream(header: &StreamHeader, plan: &TilePlan, codes: &[Vec<BinaryCode>]) -> Result<Vec<u8>, StreamError> {
    header.validate()?;
    let (rows, cols) = header.grid();
    if plan.rows != rows || plan.cols != cols || plan.iterations.len() != rows * cols {
        return Err(StreamError::PlanSize {
            expected: rows * cols,
            actual: plan.iterations.len(),
        });
    }
    if codes.len() != plan.iterations.len() {
        return Err(StreamError::PlanSize {
            expected: plan.iterations.len(),
            actual: codes.len(),
        });
    }
    let mut out = Vec::with_capacity(stream_len(rows * cols, plan.payload_bits()));
    out.extend_from_slice(&header.to_bytes());
    for (tile, &k) in plan.iterations.iter().enumerate() {
        if k as usize > K_MAX {
            return Err(StreamError::PlanEntry { tile, k });
        }
    }
    out.extend_from_slice(&plan.iterations);
    let (mut acc, mut n) = (0u8, 0);
    for (tile, (tile_codes, &k)) in codes.iter().zip(&plan.iterations).enumerate() {
        if tile_codes.len() != k as usize {
            return Err(StreamError::CodeCount {
                tile,
                expected: k as usize,
                actual: tile_codes.len(),
            });
        }
        for code in tile_codes {
            if code.len() != BITS_PER_ITERATION {
                return Err(StreamError::CodeLength(code.len()));
            }
            for bit in code.bits() {
                acc = acc << 1 | bit as u8;
                n += 1;
                if n == 8 {
                    out.push(acc);
                    (acc, n) = (0, 0);
                }
            }
        }
    }
    if n > 0 {
        out.push(acc << (8 - n));
    }
    Ok(out)
}

pub fn read_stream(bytes: &[u8]) -> Result<Stream, StreamError> {
    let header = StreamHeader::parse(bytes)?;
    let (rows, cols) = header.grid();
    let tiles = rows * cols;
    let plan_end = HEADER_LEN + tiles;
    if bytes.len() < plan_end {
        return Err(StreamError::Truncated {
            expected: plan_end,
            actual: bytes.len(),
        });
    }
    let iterations = bytes[HEADER_LEN..plan_end].to_vec();
    for (tile, &k) in iterations.iter().enumerate() {
        if k as usize > K_MAX {
            return Err(StreamError::PlanEntry { tile, k });
        }
        if let Mode::Constant(c) = header.mode {
            if k != c {
                return Err(StreamError::InvalidHeader(format!(
                    "tile {tile} plans {k} iterations in constant mode k={c}"
                )));
            }
        }
    }
    let plan = TilePlan { rows, cols, iterations };
    let total = stream_len(tiles, plan.payload_bits());
    if bytes.len() < total {
        return Err(StreamError::Truncated {
            expected: total,
            actual: bytes.len(),
        });
    }
    if bytes.len() > total {
        return Err(StreamError::TrailingBytes {
            expected: total,
            actual: bytes.len(),
        });
    }
    let payload = &bytes[plan_end..];
    let mut bit = 0usize;
    let codes = plan
        .iterations
        .iter()
        .map(|&k| {
            (0..k)
                .map(|_| {
                    let code = BinaryCode::from_bits(
                        (bit..bit + BITS_PER_ITERATION).map(|i| payload[i / 8] >> (7 - i % 8) & 1 == 1),
                    );
                    bit += BITS_PER_ITERATION;
                    code
                })
                .collect()
        })
        .collect();
    Ok(Stream { header, plan, codes })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelFileError {
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model file version {0}")]
    UnsupportedVersion(u8),
    #[error("model file truncated")]
    Truncated,
    #[error("model file has {0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("model descriptor inconsistent: {0}")]
    Descriptor(String),
    #[error("model digest mismatch: stored {stored}, computed {computed}")]
    Digest { stored: String, computed: String },
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serializes a model: magic, version, descriptor length and descriptor,
/// training metadata, weights as `f32` little-endian, digest.
pub fn save_model(model: &CodecModel) -> Vec<u8> {
    let desc = model.descriptor_bytes();
    let mut out = Vec::with_capacity(desc.len() + 4 * model.params().count() + 64);
    out.extend_from_slice(&MODEL_MAGIC);
    out.push(MODEL_VERSION);
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    out.extend_from_slice(&desc);
    let m = &model.meta;
    out.extend_from_slice(&m.context_steps.to_le_bytes());
    out.extend_from_slice(&m.context_loss.to_le_bytes());
    out.extend_from_slice(&m.residual_steps.to_le_bytes());
    out.extend_from_slice(&m.residual_loss.to_le_bytes());
    for t in model.params().iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&model.digest());
    out
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelFileError> {
        let s = self.data.get(self.pos..self.pos + n).ok_or(ModelFileError::Truncated)?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelFileError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelFileError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, ModelFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelFileError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32, ModelFileError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn descriptor_layout(desc: &[u8]) -> Result<(Architecture, Layout), ModelFileError> {
    let bad = |m: String| ModelFileError::Descriptor(m);
    let mut r = Reader { data: desc, pos: 0 };
    let mut fields = [0u16; 16];
    for f in &mut fields {
        *f = r.u16()?;
    }
    let arch = Architecture::from_fields(&fields).ok_or_else(|| bad(format!("architecture fields {fields:?}")))?;
    let layout = Layout::new(&arch);
    let n = r.u32()? as usize;
    if n != layout.specs.len() {
        return Err(bad(format!("{n} parameters, architecture has {}", layout.specs.len())));
    }
    for spec in &layout.specs {
        let len = r.u8()? as usize;
        let name = r.take(len)?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        if name != spec.name.as_bytes() || shape != spec.shape {
            return Err(bad(format!(
                "parameter {} {:?} where architecture expects {} {:?}",
                String::from_utf8_lossy(name),
                shape,
                spec.name,
                spec.shape
            )));
        }
    }
    if r.pos != desc.len() {
        return Err(bad("trailing descriptor bytes".into()));
    }
    Ok((arch, layout))
}

pub fn load_model(bytes: &[u8]) -> Result<CodecModel, ModelFileError> {
    let mut r = Reader { data: bytes, pos: 0 };
    if r.take(4).map_err(|_| ModelFileError::BadMagic)? != MODEL_MAGIC {
        return Err(ModelFileError::BadMagic);
    }
    let version = r.u8()?;
    if version != MODEL_VERSION {
        return Err(ModelFileError::UnsupportedVersion(version));
    }
    let dlen = r.u32()? as usize;
    let desc = r.take(dlen)?;
    let (arch, layout) = descriptor_layout(desc)?;
    let meta = TrainingMeta {
        context_steps: r.u64()?,
        context_loss: r.f32()?,
        residual_steps: r.u64()?,
        residual_loss: r.f32()?,
    };
    let mut tensors = Vec::with_capacity(layout.specs.len());
    for spec in &layout.specs {
        let raw = r.take(4 * spec.len())?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(Tensor::new(&spec.shape, data).map_err(|e| ModelFileError::Descriptor(e.to_string()))?);
    }
    let stored: [u8; 8] = r.take(8)?.try_into().expect("8 bytes");
    if r.pos != bytes.len() {
        return Err(ModelFileError::TrailingBytes(bytes.len() - r.pos));
    }
    let model = CodecModel::from_parts(arch, Params::from_tensors(tensors), meta)
        .ok_or_else(|| ModelFileError::Descriptor("parameter shapes".into()))?;
    let computed = model.digest();
    if computed != stored {
        return Err(ModelFileError::Digest {
            stored: hex(&stored),
            computed: hex(&computed),
        });
    }
    Ok(model)
}
