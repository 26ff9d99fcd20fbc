//! Binary PGM (`P5`) / PPM (`P6`) images, 8- or 16-bit.

use std::path::Path;

use crate::error::{RamError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageHeader {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub maxval: u32,
    /// Byte offset of the pixel data.
    pub data_offset: usize,
}

pub fn parse_header(bytes: &[u8]) -> Result<ImageHeader> {
    let bad = |m: &str| RamError::Data(format!("netpbm: {m}"));
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing raster"));
    }
    let channels = match tokens[0] {
        "P5" => 1,
        "P6" => 3,
        other => return Err(bad(&format!("unsupported magic `{other}`"))),
    };
    let num = |t: &str| t.parse::<usize>().map_err(|_| bad(&format!("bad number `{t}`")));
    let (width, height, maxval) = (num(tokens[1])?, num(tokens[2])?, num(tokens[3])?);
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad("bad dimensions or maxval"));
    }
    Ok(ImageHeader {
        channels,
        height,
        width,
        maxval: maxval as u32,
        data_offset: pos + 1,
    })
}

/// Decodes to a `C x H x W` tensor with values in `[0, 1]`.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(bytes)?;
    let bpv = if h.maxval > 255 { 2 } else { 1 };
    let count = h.channels * h.height * h.width;
    let raster = &bytes[h.data_offset..];
    if raster.len() < count * bpv {
        return Err(RamError::Data("netpbm: truncated raster".into()));
    }
    let hw = h.height * h.width;
    let mut data = vec![0.0; count];
    let scale = 1.0 / f64::from(h.maxval);
    for p in 0..hw {
        for c in 0..h.channels {
            let i = p * h.channels + c;
            let v = if bpv == 1 {
                u32::from(raster[i])
            } else {
                u32::from(u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]))
            };
            data[c * hw + p] = f64::from(v) * scale;
        }
    }
    Tensor::new(vec![h.channels, h.height, h.width], data)
}

/// Encodes a 1- or 3-channel `C x H x W` tensor in `[0, 1]` as 8-bit netpbm.
pub fn encode(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match image.shape() {
        &[c @ (1 | 3), h, w] => (c, h, w),
        s => return Err(RamError::Data(format!("cannot encode image of shape {s:?}"))),
    };
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let hw = h * w;
    for p in 0..hw {
        for ch in 0..c {
            let v = image.data()[ch * hw + p].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| RamError::io(path, e))?;
    decode(&bytes).map_err(|e| RamError::Data(format!("{}: {e}", path.display())))
}

pub fn read_header(path: &Path) -> Result<ImageHeader> {
    use std::io::Read;
    let mut buf = Vec::with_capacity(256);
    std::fs::File::open(path)
        .and_then(|f| f.take(256).read_to_end(&mut buf))
        .map_err(|e| RamError::io(path, e))?;
    parse_header(&buf).map_err(|e| RamError::Data(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeMode {
    Nearest,
    Bilinear,
}

impl std::str::FromStr for ResizeMode {
    type Err = RamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(ResizeMode::Nearest),
            "bilinear" => Ok(ResizeMode::Bilinear),
            other => Err(RamError::Config(format!("unknown resize mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for ResizeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ResizeMode::Nearest => "nearest",
            ResizeMode::Bilinear => "bilinear",
        })
    }
}

/// Resizes a `C x H x W` image (pixel-centre aligned sampling).
pub fn resize(image: &Tensor, height: usize, width: usize, mode: ResizeMode) -> Tensor {
    let [c, ih, iw] = image.shape()[..] else {
        panic!("resize expects a C x H x W image");
    };
    if (ih, iw) == (height, width) {
        return image.clone();
    }
    let src = |ch: usize, y: usize, x: usize| image.data()[(ch * ih + y) * iw + x];
    let sy = ih as f64 / height as f64;
    let sx = iw as f64 / width as f64;
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (ih - 1) as f64);
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (iw - 1) as f64);
                let v = match mode {
                    ResizeMode::Nearest => {
                        let yy = (((y as f64 + 0.5) * sy) as usize).min(ih - 1);
                        let xx = (((x as f64 + 0.5) * sx) as usize).min(iw - 1);
                        src(ch, yy, xx)
                    }
                    ResizeMode::Bilinear => {
                        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                        let (y1, x1) = ((y0 + 1).min(ih - 1), (x0 + 1).min(iw - 1));
                        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
                        let top = src(ch, y0, x0) * (1.0 - tx) + src(ch, y0, x1) * tx;
                        let bottom = src(ch, y1, x0) * (1.0 - tx) + src(ch, y1, x1) * tx;
                        top * (1.0 - ty) + bottom * ty
                    }
                };
                out.push(v);
            }
        }
    }
    Tensor::new(vec![c, height, width], out).expect("sizes agree")
}
