//! Rate-distortion sweeps, CSV export and bit-allocation maps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::bitstream::TilePlan;
use crate::codec::{encode_image, CodecError, EncodeConfig, Encoded};
use crate::image_io::RgbImage;
use crate::metrics::psnr;
use crate::model::{CodecModel, K_MAX};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation corpus is empty")]
    EmptyCorpus,
    #[error("{image}: {source}")]
    Codec {
        image: String,
        #[source]
        source: CodecError,
    },
    #[error(transparent)]
    Image(#[from] crate::image_io::ImageError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One named image of an evaluation corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusImage {
    pub id: String,
    pub image: RgbImage,
}

/// Rate and distortion of one image at one setting.
#[derive(Debug, Clone, PartialEq)]
pub struct RdRecord {
    pub image: String,
    pub mode: &'static str,
    /// `k` for constant mode, target dB for adaptive mode.
    pub param: f64,
    /// All stream bytes, per pixel of the unpadded image.
    pub bpp: f64,
    /// Residual code bits only, per pixel.
    pub payload_bpp: f64,
    pub psnr: f64,
    pub plan: TilePlan,
}

fn record(item: &CorpusImage, cfg: &EncodeConfig, model: &CodecModel) -> Result<RdRecord, EvalError> {
    let enc: Encoded = encode_image(&item.image, cfg, model).map_err(|source| EvalError::Codec {
        image: item.id.clone(),
        source,
    })?;
    let (mode, param) = match cfg.mode {
        crate::codec::RateMode::Constant(k) => ("constant", k as f64),
        crate::codec::RateMode::Adaptive(t) => ("adaptive", t),
    };
    Ok(RdRecord {
        image: item.id.clone(),
        mode,
        param,
        bpp: enc.bpp(),
        payload_bpp: enc.payload_bpp(),
        psnr: psnr(&item.image, &enc.reconstruction).expect("same size"),
        plan: enc.plan,
    })
}

/// One record per (image, k), images outermost.
pub fn sweep_constant(corpus: &[CorpusImage], model: &CodecModel, ks: &[usize], threads: usize) -> Result<Vec<RdRecord>, EvalError> {
    if corpus.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut out = Vec::with_capacity(corpus.len() * ks.len());
    for item in corpus {
        for &k in ks {
            out.push(record(item, &EncodeConfig::constant(k).with_threads(threads), model)?);
        }
    }
    Ok(out)
}

/// One record per (image, target), images outermost. Each record carries
/// its tile plan for [`bitmap_pgm`].
pub fn sweep_adaptive(
    corpus: &[CorpusImage],
    model: &CodecModel,
    targets: &[f64],
    threads: usize,
) -> Result<Vec<RdRecord>, EvalError> {
    if corpus.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut out = Vec::with_capacity(corpus.len() * targets.len());
    for item in corpus {
        for &t in targets {
            out.push(record(item, &EncodeConfig::adaptive(t).with_threads(threads), model)?);
        }
    }
    Ok(out)
}

fn fmt_psnr(p: f64) -> String {
    if p.is_infinite() {
        "inf".into()
    } else {
        format!("{p:.4}")
    }
}

fn fmt_param(p: f64) -> String {
    format!("{p}")
}

pub const CSV_HEADER: &str = "image,mode,param,bpp,payload_bpp,psnr";

/// Per-record CSV; infinite PSNR is written as `inf`.
pub fn to_csv(records: &[RdRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{}",
            r.image,
            r.mode,
            fmt_param(r.param),
            r.bpp,
            r.payload_bpp,
            fmt_psnr(r.psnr)
        );
    }
    s
}

/// Image-mean summary for one (mode, param) setting.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub mode: &'static str,
    pub param: f64,
    pub images: usize,
    pub mean_bpp: f64,
    pub mean_payload_bpp: f64,
    /// Mean over images with finite PSNR.
    pub mean_psnr: f64,
    /// Images excluded from `mean_psnr` because they were lossless.
    pub infinite: usize,
}

/// Groups records by setting in first-appearance order.
pub fn summarize(records: &[RdRecord]) -> Vec<Summary> {
    let mut keys: Vec<(&'static str, f64)> = Vec::new();
    for r in records {
        if !keys.iter().any(|&(m, p)| m == r.mode && p == r.param) {
            keys.push((r.mode, r.param));
        }
    }
    keys.into_iter()
        .map(|(mode, param)| {
            let group: Vec<&RdRecord> = records.iter().filter(|r| r.mode == mode && r.param == param).collect();
            let finite: Vec<f64> = group.iter().map(|r| r.psnr).filter(|p| p.is_finite()).collect();
            let n = group.len() as f64;
            Summary {
                mode,
                param,
                images: group.len(),
                mean_bpp: group.iter().map(|r| r.bpp).sum::<f64>() / n,
                mean_payload_bpp: group.iter().map(|r| r.payload_bpp).sum::<f64>() / n,
                mean_psnr: if finite.is_empty() {
                    f64::INFINITY
                } else {
                    finite.iter().sum::<f64>() / finite.len() as f64
                },
                infinite: group.len() - finite.len(),
            }
        })
        .collect()
}

pub fn summary_csv(summaries: &[Summary]) -> String {
    let mut s = String::from("mode,param,images,bpp,payload_bpp,psnr,inf_count\n");
    for m in summaries {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{},{}",
            m.mode,
            fmt_param(m.param),
            m.images,
            m.mean_bpp,
            m.mean_payload_bpp,
            fmt_psnr(m.mean_psnr),
            m.infinite
        );
    }
    s
}

/// Gray level of a tile using `k` iterations: `round(k / K_MAX · 255)`.
pub fn bitmap_level(k: u8) -> u8 {
    (k as f64 / K_MAX as f64 * 255.0).round() as u8
}

/// Binary PGM (P5) with one pixel per tile.
pub fn bitmap_pgm(plan: &TilePlan) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", plan.cols, plan.rows).into_bytes();
    out.extend(plan.iterations.iter().map(|&k| bitmap_level(k)));
    out
}

/// Reads every `.png` and `.ppm` file of `dir`, sorted by file name. The id
/// of each image is its file stem.
pub fn load_corpus(dir: &Path) -> Result<Vec<CorpusImage>, EvalError> {
    let io = |source| EvalError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io)?;
    paths.retain(|p| {
        p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("ppm"))
    });
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            Ok(CorpusImage {
                id: p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                image: crate::image_io::read_image(&p)?,
            })
        })
        .collect()
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), EvalError> {
    std::fs::write(path, bytes).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}
