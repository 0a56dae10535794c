use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// An 8-bit grayscale or RGB image held as planar `[C, H, W]` floats in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PnmImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

fn quantize(v: f32) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Binary PGM (`P5`) for one channel, PPM (`P6`) for three. Values map to
/// `round(255 * x)`.
pub fn encode_pnm(img: &PnmImage) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Data(format!("cannot write a {c}-channel image as PNM"))),
    };
    let plane = img.height * img.width;
    if img.data.len() != img.channels * plane {
        return Err(Error::Data("image buffer does not match its dimensions".into()));
    }
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    for p in 0..plane {
        for c in 0..img.channels {
            out.push(quantize(img.data[c * plane + p]));
        }
    }
    Ok(out)
}

pub fn write_pnm(path: impl AsRef<Path>, img: &PnmImage) -> Result<()> {
    std::fs::write(path, encode_pnm(img)?)?;
    Ok(())
}

pub fn decode_pnm(bytes: &[u8]) -> Result<PnmImage> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data("truncated PNM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Data("bad PNM header".into()))?);
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Data(format!("unsupported PNM type {m}"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Data(format!("bad PNM header field `{s}`")));
    let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(Error::Data(format!("only 8-bit PNM is supported, maxval {maxval}")));
    }
    let plane = width * height;
    let raster = bytes.get(pos..pos + plane * channels).ok_or_else(|| Error::Data("truncated PNM raster".into()))?;
    let mut data = vec![0.0f32; plane * channels];
    for p in 0..plane {
        for c in 0..channels {
            data[c * plane + p] = raster[p * channels + c] as f32 / 255.0;
        }
    }
    Ok(PnmImage { channels, height, width, data })
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<PnmImage> {
    decode_pnm(&std::fs::read(path)?)
}

/// Reads every `.pgm`/`.ppm` file in a directory, sorted by file name.
pub fn read_pnm_dir(dir: impl AsRef<Path>) -> Result<Vec<PnmImage>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm")))
        .collect();
    paths.sort();
    paths.iter().map(read_pnm).collect()
}
