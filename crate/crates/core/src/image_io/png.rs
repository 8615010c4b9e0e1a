//! PNG reader for non-interlaced 8-bit images and a deterministic writer.

use super::deflate::{zlib_compress, zlib_decompress, Strategy};
use super::{ImageError, RgbImage};

pub const SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

fn crc_table() -> [u32; 256] {
    let mut t = [0u32; 256];
    for (n, e) in t.iter_mut().enumerate() {
        let mut c = n as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xedb8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *e = c;
    }
    t
}

pub fn crc32(parts: &[&[u8]]) -> u32 {
    let table = crc_table();
    let mut c = !0u32;
    for p in parts {
        for &b in *p {
            c = table[((c ^ b as u32) & 0xff) as usize] ^ (c >> 8);
        }
    }
    !c
}

fn corrupt(msg: impl Into<String>) -> ImageError {
    ImageError::Corrupt(msg.into())
}

fn paeth(a: u8, b: u8, c: u8) -> u8 {
    let p = a as i16 + b as i16 - c as i16;
    let (pa, pb, pc) = ((p - a as i16).abs(), (p - b as i16).abs(), (p - c as i16).abs());
    if pa <= pb && pa <= pc {
        a
    } else if pb <= pc {
        b
    } else {
        c
    }
}

fn unfilter(raw: &[u8], width: usize, height: usize, bpp: usize) -> Result<Vec<u8>, ImageError> {
    let stride = width * bpp;
    if raw.len() != height * (stride + 1) {
        return Err(corrupt(format!(
            "image data is {} bytes, expected {}",
            raw.len(),
            height * (stride + 1)
        )));
    }
    let mut out = vec![0u8; height * stride];
    for y in 0..height {
        let line = &raw[y * (stride + 1)..(y + 1) * (stride + 1)];
        let (prev, cur) = out.split_at_mut(y * stride);
        let prev = if y == 0 { None } else { Some(&prev[(y - 1) * stride..]) };
        let cur = &mut cur[..stride];
        let filter = line[0];
        for x in 0..stride {
            let a = if x >= bpp { cur[x - bpp] } else { 0 };
            let b = prev.map_or(0, |p| p[x]);
            let c = if x >= bpp { prev.map_or(0, |p| p[x - bpp]) } else { 0 };
            let pred = match filter {
                0 => 0,
                1 => a,
                2 => b,
                3 => ((a as u16 + b as u16) / 2) as u8,
                4 => paeth(a, b, c),
                f => return Err(corrupt(format!("unknown filter type {f}"))),
            };
            cur[x] = line[1 + x].wrapping_add(pred);
        }
    }
    Ok(out)
}

pub fn decode(data: &[u8]) -> Result<RgbImage, ImageError> {
    if data.len() < 8 || data[..8] != SIGNATURE {
        return Err(corrupt("missing PNG signature"));
    }
    let mut pos = 8;
    let mut header: Option<(usize, usize, u8)> = None;
    let mut idat = Vec::new();
    loop {
        let hdr = data.get(pos..pos + 8).ok_or_else(|| corrupt("chunk header truncated"))?;
        let len = u32::from_be_bytes(hdr[..4].try_into().expect("4 bytes")) as usize;
        let kind: [u8; 4] = hdr[4..8].try_into().expect("4 bytes");
        let body = data
            .get(pos + 8..pos + 8 + len)
            .ok_or_else(|| corrupt(format!("chunk {} truncated", String::from_utf8_lossy(&kind))))?;
        let crc = data.get(pos + 8 + len..pos + 12 + len).ok_or_else(|| corrupt("chunk CRC missing"))?;
        if u32::from_be_bytes(crc.try_into().expect("4 bytes")) != crc32(&[&kind, body]) {
            return Err(corrupt(format!("CRC mismatch in chunk {}", String::from_utf8_lossy(&kind))));
        }
        pos += 12 + len;
        match &kind {
            b"IHDR" => {
                if body.len() != 13 || header.is_some() {
                    return Err(corrupt("malformed IHDR"));
                }
                let w = u32::from_be_bytes(body[0..4].try_into().expect("4 bytes")) as usize;
                let h = u32::from_be_bytes(body[4..8].try_into().expect("4 bytes")) as usize;
                let (depth, color, comp, filter, interlace) = (body[8], body[9], body[10], body[11], body[12]);
                if depth != 8 {
                    return Err(ImageError::Unsupported(format!("PNG bit depth {depth}")));
                }
                if !matches!(color, 0 | 2 | 4 | 6) {
                    return Err(ImageError::Unsupported(format!("PNG color type {color}")));
                }
                if interlace != 0 {
                    return Err(ImageError::Unsupported("interlaced PNG".into()));
                }
                if comp != 0 || filter != 0 {
                    return Err(corrupt("unknown compression or filter method"));
                }
                if w == 0 || h == 0 {
                    return Err(ImageError::EmptyImage { width: w, height: h });
                }
                header = Some((w, h, color));
            }
            b"IDAT" => idat.extend_from_slice(body),
            b"IEND" => break,
            _ if kind[0] & 0x20 == 0 => {
                return Err(ImageError::Unsupported(format!(
                    "critical PNG chunk {}",
                    String::from_utf8_lossy(&kind)
                )))
            }
            _ => {}
        }
    }
    let (w, h, color) = header.ok_or_else(|| corrupt("missing IHDR"))?;
    let channels = match color {
        0 => 1,
        2 => 3,
        4 => 2,
        _ => 4,
    };
    let raw = zlib_decompress(&idat)?;
    let samples = unfilter(&raw, w, h, channels)?;
    let mut rgb = Vec::with_capacity(w * h * 3);
    for px in samples.chunks_exact(channels) {
        match channels {
            1 | 2 => rgb.extend_from_slice(&[px[0]; 3]),
            _ => rgb.extend_from_slice(&px[..3]),
        }
    }
    RgbImage::new(w, h, rgb)
}

fn chunk(out: &mut Vec<u8>, kind: &[u8; 4], body: &[u8]) {
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(kind);
    out.extend_from_slice(body);
    out.extend_from_slice(&crc32(&[kind, body]).to_be_bytes());
}

/// Encodes an 8-bit RGB PNG with filter type 0 on every row.
pub fn encode(img: &RgbImage, strategy: Strategy) -> Vec<u8> {
    let mut out = SIGNATURE.to_vec();
    let mut ihdr = Vec::with_capacity(13);
    ihdr.extend_from_slice(&(img.width() as u32).to_be_bytes());
    ihdr.extend_from_slice(&(img.height() as u32).to_be_bytes());
    ihdr.extend_from_slice(&[8, 2, 0, 0, 0]);
    chunk(&mut out, b"IHDR", &ihdr);
    let stride = img.width() * 3;
    let mut raw = Vec::with_capacity(img.height() * (stride + 1));
    for row in img.pixels().chunks_exact(stride) {
        raw.push(0);
        raw.extend_from_slice(row);
    }
    chunk(&mut out, b"IDAT", &zlib_compress(&raw, strategy));
    chunk(&mut out, b"IEND", &[]);
    out
}
