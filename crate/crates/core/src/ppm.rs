//! Binary PPM (P6) image I/O. Zero-dependency and bit-exact, which is what
//! the deterministic corpus tests need.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub struct PpmImage {
    pub height: usize,
    pub width: usize,
    /// Interleaved RGB, row-major.
    pub pixels: Vec<u8>,
}

pub fn write_ppm(path: &Path, image: &PpmImage) -> Result<()> {
    if image.pixels.len() != image.height * image.width * 3 {
        return Err(Error::invalid("write_ppm", "pixel buffer size mismatch"));
    }
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    write!(out, "P6\n{} {}\n255\n", image.width, image.height).map_err(io_err)?;
    out.write_all(&image.pixels).map_err(io_err)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<PpmImage> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let bad = |detail: &str| Error::invalid("read_ppm", format!("{}: {detail}", path.display()));

    // Header: magic, width, height, maxval, separated by whitespace, then a
    // single whitespace byte before the raster.
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Option<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        // PPM comments run to end of line.
        while pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if token(&bytes).as_deref() != Some("P6") {
        return Err(bad("not a P6 file"));
    }
    let width: usize = token(&bytes).ok_or_else(|| bad("missing width"))?.parse().map_err(|_| bad("bad width"))?;
    let height: usize =
        token(&bytes).ok_or_else(|| bad("missing height"))?.parse().map_err(|_| bad("bad height"))?;
    let maxval: usize =
        token(&bytes).ok_or_else(|| bad("missing maxval"))?.parse().map_err(|_| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad("only maxval 255 supported"));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(bad("truncated raster"));
    }
    Ok(PpmImage { height, width, pixels: bytes[pos..pos + need].to_vec() })
}

/// Load a PPM as an HWC f32 tensor with pixels in `[0, 1]`.
pub fn load_image_tensor(path: &Path) -> Result<Tensor<f32>> {
    let ppm = read_ppm(path)?;
    let data = ppm.pixels.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![ppm.height, ppm.width, 3], data).map_err(Into::into)
}
