//! Binary masks, probability maps and their on-disk formats.
//!
//! Masks are stored as 8-bit single-channel PNG (0 = background, 255 =
//! foreground). Probability maps are stored as grayscale Portable FloatMap
//! with a fixed little-endian scale of `-1.0`. PFM rasters are written
//! bottom-to-top; in memory every raster is row-major top-to-bottom.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::geometry::Dims;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: PNG decode error: {message}")]
    Decode { path: String, message: String },
    #[error("{path}: PNG encode error: {message}")]
    Encode { path: String, message: String },
    #[error("{path}: expected 8-bit single-channel PNG, found {color} at {depth} bits")]
    UnsupportedPng {
        path: String,
        color: String,
        depth: u8,
    },
    #[error("{path}: zero-sized image")]
    ZeroSized { path: String },
    #[error("{path}: bad PFM header: {message}")]
    PfmHeader { path: String, message: String },
    #[error("{path}: big-endian PFM (positive scale) is not supported")]
    PfmBigEndian { path: String },
    #[error("{path}: PFM raster holds {found} bytes, expected {expected}")]
    PfmLength {
        path: String,
        expected: usize,
        found: usize,
    },
    #[error("{path}: value {value} at pixel ({x}, {y}) is outside [0, 1]")]
    PfmRange {
        path: String,
        x: usize,
        y: usize,
        value: f32,
    },
    #[error("raster shape {width}x{height} does not match {len} samples")]
    Shape {
        width: usize,
        height: usize,
        len: usize,
    },
    #[error("mask sample {value} at index {index} is not 0 or 1")]
    NotBinary { index: usize, value: u8 },
    #[error("probability {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f32 },
}

pub type Result<T> = std::result::Result<T, RasterError>;

fn io_err(path: &Path, source: std::io::Error) -> RasterError {
    RasterError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// A hard foreground/background raster for one frame.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(RasterError::Shape {
                width,
                height,
                len: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(RasterError::NotBinary { index, value });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            width: dims.width,
            height: dims.height,
            data: vec![0; dims.area()],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(dims.area());
        for y in 0..dims.height {
            for x in 0..dims.width {
                data.push(u8::from(f(x, y)));
            }
        }
        Self {
            width: dims.width,
            height: dims.height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> Dims {
        Dims {
            width: self.width,
            height: self.height,
        }
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Lifts the mask to a `{0.0, 1.0}` probability map.
    pub fn to_prob(&self) -> ProbMap {
        ProbMap {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f32::from(v)).collect(),
        }
    }
}

/// Soft foreground probabilities for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ProbMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(RasterError::Shape {
                width,
                height,
                len: data.len(),
            });
        }
        // NaN fails the range check as well.
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(RasterError::OutOfRange { index, value });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn constant(dims: Dims, value: f32) -> Result<Self> {
        Self::new(dims.width, dims.height, vec![value; dims.area()])
    }

    /// Builds a map without range validation; callers guarantee `[0, 1]`.
    pub(crate) fn from_raw(dims: Dims, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), dims.area());
        Self {
            width: dims.width,
            height: dims.height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> Dims {
        Dims {
            width: self.width,
            height: self.height,
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Foreground wherever the probability is at least `threshold`.
    pub fn threshold(&self, threshold: f32) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| u8::from(v >= threshold)).collect(),
        }
    }
}

/// An 8-bit single-channel PNG decoded as raw samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray8 {
    pub dims: Dims,
    pub data: Vec<u8>,
}

/// Reads an 8-bit single-channel PNG without any sample transformation.
pub fn read_gray8(path: &Path) -> Result<Gray8> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let shown = || path.display().to_string();
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| RasterError::Decode {
        path: shown(),
        message: e.to_string(),
    })?;
    let (width, height, color, depth) = {
        let info = reader.info();
        (info.width, info.height, info.color_type, info.bit_depth)
    };
    if width == 0 || height == 0 {
        return Err(RasterError::ZeroSized { path: shown() });
    }
    if color != png::ColorType::Grayscale || depth != png::BitDepth::Eight {
        return Err(RasterError::UnsupportedPng {
            path: shown(),
            color: format!("{color:?}"),
            depth: depth as u8,
        });
    }
    let size = reader.output_buffer_size().ok_or_else(|| RasterError::Decode {
        path: shown(),
        message: "image too large".into(),
    })?;
    let mut buf = vec![0u8; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| RasterError::Decode {
            path: shown(),
            message: e.to_string(),
        })?;
    let (width, height) = (width as usize, height as usize);
    let stride = frame.line_size;
    let mut data = Vec::with_capacity(width * height);
    for row in buf.chunks(stride).take(height) {
        data.extend_from_slice(&row[..width]);
    }
    Ok(Gray8 {
        dims: Dims { width, height },
        data,
    })
}

/// Writes raw samples as an 8-bit single-channel PNG.
pub fn write_gray8(path: &Path, dims: Dims, data: &[u8]) -> Result<()> {
    assert_eq!(data.len(), dims.area(), "gray8 raster length");
    let shown = || path.display().to_string();
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), dims.width as u32, dims.height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let enc_err = |e: png::EncodingError| RasterError::Encode {
        path: shown(),
        message: e.to_string(),
    };
    let mut writer = encoder.write_header().map_err(enc_err)?;
    writer.write_image_data(data).map_err(enc_err)?;
    writer.finish().map_err(enc_err)?;
    Ok(())
}

/// Reads a mask PNG; any nonzero sample becomes foreground.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let gray = read_gray8(path)?;
    Ok(BinaryMask {
        width: gray.dims.width,
        height: gray.dims.height,
        data: gray.data.into_iter().map(|v| u8::from(v != 0)).collect(),
    })
}

pub fn write_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let samples: Vec<u8> = mask.data.iter().map(|&v| v * 255).collect();
    write_gray8(path, mask.dims(), &samples)
}

/// Serializes a probability map as grayscale little-endian PFM.
pub fn encode_pfm(map: &ProbMap) -> Vec<u8> {
    let header = format!("Pf\n{} {}\n-1.0\n", map.width, map.height);
    let mut out = Vec::with_capacity(header.len() + 4 * map.data.len());
    out.extend_from_slice(header.as_bytes());
    for row in map.data.chunks(map.width).rev() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_pfm(map: &ProbMap, path: &Path) -> Result<()> {
    let bytes = encode_pfm(map);
    let mut file = File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&bytes).map_err(|e| io_err(path, e))
}

pub fn read_pfm(path: &Path) -> Result<ProbMap> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    decode_pfm(&bytes, &path.display().to_string())
}

/// Splits off the next whitespace-delimited header token. PFM headers end
/// with exactly one whitespace byte after the scale.
fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return None;
    }
    let token = &bytes[start..*pos];
    // consume the single delimiter
    *pos += 1;
    Some(token)
}

pub fn decode_pfm(bytes: &[u8], path: &str) -> Result<ProbMap> {
    let header_err = |message: &str| RasterError::PfmHeader {
        path: path.to_string(),
        message: message.to_string(),
    };
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos).ok_or_else(|| header_err("empty file"))?;
    if magic != b"Pf" {
        return Err(header_err("magic is not \"Pf\" (grayscale)"));
    }
    let mut number = |what: &str| -> Result<String> {
        let tok = next_token(bytes, &mut pos).ok_or_else(|| header_err(&format!("missing {what}")))?;
        std::str::from_utf8(tok)
            .map(str::to_owned)
            .map_err(|_| header_err(&format!("non-ASCII {what}")))
    };
    let width: usize = number("width")?
        .parse()
        .map_err(|_| header_err("unparsable width"))?;
    let height: usize = number("height")?
        .parse()
        .map_err(|_| header_err("unparsable height"))?;
    let scale: f64 = number("scale")?
        .parse()
        .map_err(|_| header_err("unparsable scale"))?;
    if width == 0 || height == 0 {
        return Err(header_err("zero dimension"));
    }
    if scale == 0.0 || !scale.is_finite() {
        return Err(header_err("scale must be nonzero"));
    }
    if scale > 0.0 {
        return Err(RasterError::PfmBigEndian {
            path: path.to_string(),
        });
    }
    let raster = bytes.get(pos..).unwrap_or(&[]);
    let expected = width * height * 4;
    if raster.len() != expected {
        return Err(RasterError::PfmLength {
            path: path.to_string(),
            expected,
            found: raster.len(),
        });
    }
    let mut data = vec![0f32; width * height];
    for (file_row, chunk) in raster.chunks_exact(width * 4).enumerate() {
        let y = height - 1 - file_row;
        for (x, b) in chunk.chunks_exact(4).enumerate() {
            let value = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            if !(0.0..=1.0).contains(&value) {
                return Err(RasterError::PfmRange {
                    path: path.to_string(),
                    x,
                    y,
                    value,
                });
            }
            data[y * width + x] = value;
        }
    }
    Ok(ProbMap {
        width,
        height,
        data,
    })
}
