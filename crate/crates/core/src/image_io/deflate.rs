//! zlib/deflate: a complete inflater and a fixed-Huffman LZ77 compressor.

use super::ImageError;

const LENGTH_BASE: [u16; 29] = [
    3, 4, 5, 6, 7, 8, 9, 10, 11, 13, 15, 17, 19, 23, 27, 31, 35, 43, 51, 59, 67, 83, 99, 115, 131,
    163, 195, 227, 258,
];
const LENGTH_EXTRA: [u8; 29] = [
    0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4, 5, 5, 5, 5, 0,
];
const DIST_BASE: [u16; 30] = [
    1, 2, 3, 4, 5, 7, 9, 13, 17, 25, 33, 49, 65, 97, 129, 193, 257, 385, 513, 769, 1025, 1537,
    2049, 3073, 4097, 6145, 8193, 12289, 16385, 24577,
];
const DIST_EXTRA: [u8; 30] = [
    0, 0, 0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6, 7, 7, 8, 8, 9, 9, 10, 10, 11, 11, 12, 12, 13, 13,
];
const CODE_LENGTH_ORDER: [usize; 19] = [16, 17, 18, 0, 8, 7, 9, 6, 10, 5, 11, 4, 12, 3, 13, 2, 14, 1, 15];

const WINDOW: usize = 32 * 1024;
const MAX_MATCH: usize = 258;
const MIN_MATCH: usize = 3;
const HASH_BITS: u32 = 15;
const MAX_CHAIN: usize = 64;

pub fn adler32(data: &[u8]) -> u32 {
    let (mut a, mut b) = (1u32, 0u32);
    for chunk in data.chunks(5552) {
        for &x in chunk {
            a += x as u32;
            b += a;
        }
        a %= 65521;
        b %= 65521;
    }
    (b << 16) | a
}

fn corrupt(msg: impl Into<String>) -> ImageError {
    ImageError::Corrupt(msg.into())
}

struct BitReader<'a> {
    data: &'a [u8],
    pos: usize,
    bit: u32,
    nbits: u32,
}

impl<'a> BitReader<'a> {
    fn new(data: &'a [u8]) -> Self {
        BitReader {
            data,
            pos: 0,
            bit: 0,
            nbits: 0,
        }
    }

    fn bits(&mut self, n: u32) -> Result<u32, ImageError> {
        while self.nbits < n {
            let byte = *self.data.get(self.pos).ok_or_else(|| corrupt("deflate stream truncated"))?;
            self.pos += 1;
            self.bit |= (byte as u32) << self.nbits;
            self.nbits += 8;
        }
        let v = self.bit & ((1u64 << n) - 1) as u32;
        self.bit >>= n;
        self.nbits -= n;
        Ok(v)
    }

    fn align(&mut self) {
        self.bit = 0;
        self.nbits = 0;
    }
}

/// Canonical Huffman decoding table.
struct Huffman {
    counts: [u16; 16],
    symbols: Vec<u16>,
}

impl Huffman {
    fn new(lengths: &[u8]) -> Result<Self, ImageError> {
        let mut counts = [0u16; 16];
        for &l in lengths {
            counts[l as usize] += 1;
        }
        counts[0] = 0;
        let mut left = 1i32;
        for &c in &counts[1..] {
            left = 2 * left - c as i32;
            if left < 0 {
                return Err(corrupt("oversubscribed Huffman code"));
            }
        }
        let mut offs = [0u16; 16];
        for i in 1..15 {
            offs[i + 1] = offs[i] + counts[i];
        }
        let mut symbols = vec![0u16; lengths.len()];
        for (s, &l) in lengths.iter().enumerate() {
            if l != 0 {
                symbols[offs[l as usize] as usize] = s as u16;
                offs[l as usize] += 1;
            }
        }
        Ok(Huffman { counts, symbols })
    }

    fn decode(&self, r: &mut BitReader) -> Result<u16, ImageError> {
        let (mut code, mut first, mut index) = (0i32, 0i32, 0i32);
        for len in 1..16 {
            code |= r.bits(1)? as i32;
            let count = self.counts[len] as i32;
            if code - count < first {
                return Ok(self.symbols[(index + code - first) as usize]);
            }
            index += count;
            first += count;
            first <<= 1;
            code <<= 1;
        }
        Err(corrupt("invalid Huffman code"))
    }
}

fn fixed_tables() -> (Huffman, Huffman) {
    let mut lit = [0u8; 288];
    lit[..144].fill(8);
    lit[144..256].fill(9);
    lit[256..280].fill(7);
    lit[280..].fill(8);
    (
        Huffman::new(&lit).expect("fixed table"),
        Huffman::new(&[5u8; 30]).expect("fixed table"),
    )
}

fn dynamic_tables(r: &mut BitReader) -> Result<(Huffman, Huffman), ImageError> {
    let hlit = r.bits(5)? as usize + 257;
    let hdist = r.bits(5)? as usize + 1;
    let hclen = r.bits(4)? as usize + 4;
    let mut cl = [0u8; 19];
    for &i in &CODE_LENGTH_ORDER[..hclen] {
        cl[i] = r.bits(3)? as u8;
    }
    let clh = Huffman::new(&cl)?;
    let mut lengths = Vec::with_capacity(hlit + hdist);
    while lengths.len() < hlit + hdist {
        let sym = clh.decode(r)?;
        let (value, repeat) = match sym {
            0..=15 => (sym as u8, 1),
            16 => {
                let prev = *lengths.last().ok_or_else(|| corrupt("repeat with no previous length"))?;
                (prev, 3 + r.bits(2)? as usize)
            }
            17 => (0, 3 + r.bits(3)? as usize),
            _ => (0, 11 + r.bits(7)? as usize),
        };
        if lengths.len() + repeat > hlit + hdist {
            return Err(corrupt("code lengths overflow"));
        }
        lengths.extend(std::iter::repeat_n(value, repeat));
    }
    if lengths[256] == 0 {
        return Err(corrupt("missing end-of-block code"));
    }
    Ok((Huffman::new(&lengths[..hlit])?, Huffman::new(&lengths[hlit..])?))
}

fn inflate_block(r: &mut BitReader, lit: &Huffman, dist: &Huffman, out: &mut Vec<u8>) -> Result<(), ImageError> {
    loop {
        let sym = lit.decode(r)? as usize;
        match sym {
            0..=255 => out.push(sym as u8),
            256 => return Ok(()),
            257..=285 => {
                let i = sym - 257;
                let len = LENGTH_BASE[i] as usize + r.bits(LENGTH_EXTRA[i] as u32)? as usize;
                let d = dist.decode(r)? as usize;
                if d >= 30 {
                    return Err(corrupt("invalid distance symbol"));
                }
                let distance = DIST_BASE[d] as usize + r.bits(DIST_EXTRA[d] as u32)? as usize;
                if distance > out.len() {
                    return Err(corrupt("distance before start of output"));
                }
                let start = out.len() - distance;
                for k in 0..len {
                    out.push(out[start + k]);
                }
            }
            _ => return Err(corrupt("invalid literal/length symbol")),
        }
    }
}

/// Decodes a raw deflate stream; returns the output and the bytes consumed.
pub fn inflate_raw(data: &[u8]) -> Result<(Vec<u8>, usize), ImageError> {
    let mut r = BitReader::new(data);
    let mut out = Vec::new();
    loop {
        let last = r.bits(1)? == 1;
        match r.bits(2)? {
            0 => {
                r.align();
                let p = r.pos;
                let hdr = data.get(p..p + 4).ok_or_else(|| corrupt("stored block truncated"))?;
                let len = u16::from_le_bytes([hdr[0], hdr[1]]);
                let nlen = u16::from_le_bytes([hdr[2], hdr[3]]);
                if len != !nlen {
                    return Err(corrupt("stored block length check failed"));
                }
                let body = data
                    .get(p + 4..p + 4 + len as usize)
                    .ok_or_else(|| corrupt("stored block truncated"))?;
                out.extend_from_slice(body);
                r.pos = p + 4 + len as usize;
            }
            1 => {
                let (lit, dist) = fixed_tables();
                inflate_block(&mut r, &lit, &dist, &mut out)?;
            }
            2 => {
                let (lit, dist) = dynamic_tables(&mut r)?;
                inflate_block(&mut r, &lit, &dist, &mut out)?;
            }
            _ => return Err(corrupt("reserved block type")),
        }
        if last {
            return Ok((out, r.pos));
        }
    }
}

/// Decodes a zlib stream and checks its Adler-32 trailer.
pub fn zlib_decompress(data: &[u8]) -> Result<Vec<u8>, ImageError> {
    if data.len() < 6 {
        return Err(corrupt("zlib stream truncated"));
    }
    let (cmf, flg) = (data[0], data[1]);
    if cmf & 0x0f != 8 || !((cmf as u16) << 8 | flg as u16).is_multiple_of(31) {
        return Err(corrupt("bad zlib header"));
    }
    if flg & 0x20 != 0 {
        return Err(ImageError::Unsupported("zlib preset dictionary".into()));
    }
    let (out, used) = inflate_raw(&data[2..])?;
    let trailer = data
        .get(2 + used..2 + used + 4)
        .ok_or_else(|| corrupt("zlib checksum missing"))?;
    if u32::from_be_bytes(trailer.try_into().expect("4 bytes")) != adler32(&out) {
        return Err(corrupt("zlib checksum mismatch"));
    }
    Ok(out)
}

struct BitWriter {
    out: Vec<u8>,
    acc: u64,
    n: u32,
}

impl BitWriter {
    fn new() -> Self {
        BitWriter {
            out: Vec::new(),
            acc: 0,
            n: 0,
        }
    }

    fn put(&mut self, value: u32, bits: u32) {
        self.acc |= (value as u64) << self.n;
        self.n += bits;
        while self.n >= 8 {
            self.out.push(self.acc as u8);
            self.acc >>= 8;
            self.n -= 8;
        }
    }

    /// Huffman codes are sent most-significant bit first.
    fn put_code(&mut self, code: u32, len: u32) {
        let rev = code.reverse_bits() >> (32 - len);
        self.put(rev, len);
    }

    fn bit_len(&self) -> usize {
        self.out.len() * 8 + self.n as usize
    }

    fn finish(mut self) -> Vec<u8> {
        if self.n > 0 {
            self.out.push(self.acc as u8);
        }
        self.out
    }
}

fn fixed_literal(w: &mut BitWriter, sym: u32) {
    match sym {
        0..=143 => w.put_code(0x30 + sym, 8),
        144..=255 => w.put_code(0x190 + sym - 144, 9),
        256..=279 => w.put_code(sym - 256, 7),
        _ => w.put_code(0xc0 + sym - 280, 8),
    }
}

fn bucket(table: &[u16], value: usize) -> usize {
    table.partition_point(|&b| b as usize <= value) - 1
}

enum Token {
    Literal(u8),
    Match { len: usize, dist: usize },
}

fn hash3(d: &[u8]) -> usize {
    let v = (d[0] as u32) << 16 | (d[1] as u32) << 8 | d[2] as u32;
    (v.wrapping_mul(2654435761) >> (32 - HASH_BITS)) as usize
}

/// Greedy LZ77 parse with hash chains over a 32 KiB window.
fn tokenize(data: &[u8], mut emit: impl FnMut(Token)) {
    let mut head = vec![usize::MAX; 1 << HASH_BITS];
    let mut prev = vec![usize::MAX; data.len()];
    let mut i = 0;
    let insert = |pos: usize, head: &mut [usize], prev: &mut [usize]| {
        if pos + MIN_MATCH <= data.len() {
            let h = hash3(&data[pos..]);
            prev[pos] = head[h];
            head[h] = pos;
        }
    };
    while i < data.len() {
        let mut best = (0, 0);
        if i + MIN_MATCH <= data.len() {
            let mut cand = head[hash3(&data[i..])];
            let limit = (data.len() - i).min(MAX_MATCH);
            let mut chain = 0;
            while cand != usize::MAX && i - cand <= WINDOW && chain < MAX_CHAIN {
                let l = data[cand..].iter().zip(&data[i..i + limit]).take_while(|(a, b)| a == b).count();
                if l > best.0 {
                    best = (l, i - cand);
                    if l == limit {
                        break;
                    }
                }
                cand = prev[cand];
                chain += 1;
            }
        }
        if best.0 >= MIN_MATCH {
            emit(Token::Match {
                len: best.0,
                dist: best.1,
            });
            for p in i..i + best.0 {
                insert(p, &mut head, &mut prev);
            }
            i += best.0;
        } else {
            emit(Token::Literal(data[i]));
            insert(i, &mut head, &mut prev);
            i += 1;
        }
    }
}

fn write_token(w: &mut BitWriter, t: Token) {
    match t {
        Token::Literal(b) => fixed_literal(w, b as u32),
        Token::Match { len, dist } => {
            let li = bucket(&LENGTH_BASE, len);
            // 258 has its own code even though 227 + 31 also reaches it.
            let li = if len == 258 { 28 } else { li.min(27) };
            fixed_literal(w, 257 + li as u32);
            w.put((len - LENGTH_BASE[li] as usize) as u32, LENGTH_EXTRA[li] as u32);
            let di = bucket(&DIST_BASE, dist);
            w.put_code(di as u32, 5);
            w.put((dist - DIST_BASE[di] as usize) as u32, DIST_EXTRA[di] as u32);
        }
    }
}

/// Compression strategy of [`zlib_compress`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Stored,
    FixedHuffman,
}

fn deflate_fixed(data: &[u8]) -> BitWriter {
    let mut w = BitWriter::new();
    w.put(1, 1);
    w.put(1, 2);
    tokenize(data, |t| write_token(&mut w, t));
    fixed_literal(&mut w, 256);
    w
}

fn deflate_stored(data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() + data.len() / 65535 * 5 + 5);
    let mut chunks = data.chunks(65535).peekable();
    if chunks.peek().is_none() {
        out.extend_from_slice(&[1, 0, 0, 0xff, 0xff]);
    }
    while let Some(c) = chunks.next() {
        out.push(chunks.peek().is_none() as u8);
        out.extend_from_slice(&(c.len() as u16).to_le_bytes());
        out.extend_from_slice(&(!(c.len() as u16)).to_le_bytes());
        out.extend_from_slice(c);
    }
    out
}

pub fn zlib_compress(data: &[u8], strategy: Strategy) -> Vec<u8> {
    let mut out = vec![0x78, 0x01];
    match strategy {
        Strategy::Stored => out.extend(deflate_stored(data)),
        Strategy::FixedHuffman => out.extend(deflate_fixed(data).finish()),
    }
    out.extend_from_slice(&adler32(data).to_be_bytes());
    out
}

/// Size in bits of the fixed-Huffman deflate encoding of `data`, without
/// materializing more than the bit buffer.
pub fn compressed_bits(data: &[u8]) -> usize {
    deflate_fixed(data).bit_len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adler_reference_values() {
        assert_eq!(adler32(b""), 1);
        assert_eq!(adler32(b"Wikipedia"), 0x11E6_0398);
    }

    #[test]
    fn round_trip_both_strategies() {
        let mut data: Vec<u8> = (0..70_000u32).map(|i| (i * 7 % 251) as u8).collect();
        data.extend(std::iter::repeat_n(9u8, 1000));
        data.extend(b"abcabcabcabd");
        for s in [Strategy::Stored, Strategy::FixedHuffman] {
            assert_eq!(zlib_decompress(&zlib_compress(&data, s)).unwrap(), data);
            assert_eq!(zlib_decompress(&zlib_compress(&[], s)).unwrap(), Vec::<u8>::new());
        }
    }

    #[test]
    fn decodes_dynamic_block() {
        let stream = [
            0x78, 0xda, 0xd5, 0x8c, 0x57, 0x15, 0x80, 0x30, 0x0c, 0x45, 0xad, 0x3c, 0x05, 0x18, 0x40,
            0x4d, 0x0b, 0xe9, 0x60, 0x34, 0xdd, 0x05, 0xd4, 0x93, 0x83, 0x0b, 0xbe, 0xef, 0xa8, 0x8e,
            0x90, 0x9a, 0x5f, 0x76, 0xe8, 0xcc, 0x23, 0xc0, 0xf0, 0x85, 0xad, 0x9d, 0xb1, 0x80, 0x3b,
            0x65, 0x54, 0xc1, 0x87, 0x7a, 0x6e, 0xac, 0x6c, 0x67, 0x44, 0x25, 0xde, 0x79, 0x43, 0x8b,
            0x34, 0x7c, 0x75, 0x30, 0xbe, 0x93, 0xa0, 0x87, 0x02, 0x0e, 0x9f, 0x1a, 0x67, 0x69, 0x6d,
            0x99, 0xbe, 0xec, 0x2f, 0xd7, 0x17, 0x79, 0xf0, 0x5d, 0x82,
        ];
        assert_eq!((stream[2] >> 1) & 3, 2, "first block is dynamic");
        let text = b"the quick brown fox jumps over the lazy dog; pack my box with five dozen liquor jugs. ";
        assert_eq!(zlib_decompress(&stream).unwrap(), text.repeat(3));
    }

    #[test]
    fn flipped_checksum_is_detected() {
        let mut z = zlib_compress(b"payload", Strategy::FixedHuffman);
        let n = z.len();
        z[n - 1] ^= 1;
        assert!(matches!(zlib_decompress(&z), Err(ImageError::Corrupt(_))));
    }

    #[test]
    fn repetitive_data_compresses() {
        assert!(compressed_bits(&[0u8; 4096]) < compressed_bits(&(0..4096u32).map(|i| (i.wrapping_mul(2654435761) >> 24) as u8).collect::<Vec<_>>()));
    }
}
