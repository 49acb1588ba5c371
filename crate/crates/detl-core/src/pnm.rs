//! Binary Netpbm readers and writers: 8-bit PGM (P5) and PPM (P6).

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::FileFormat {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Write an 8-bit binary PGM.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(format_err(path, "pixel buffer does not match dimensions"));
    }
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(pixels)?;
    w.flush()?;
    Ok(())
}

/// Read an 8-bit binary PGM. Returns (width, height, pixels).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = read_file(path)?;
    let (magic, rest) = parse_header(&bytes, path)?;
    if magic != "P5" {
        return Err(format_err(path, format!("expected P5 magic, got {magic}")));
    }
    let (width, height, data) = rest;
    if data.len() < width * height {
        return Err(format_err(path, "truncated pixel data"));
    }
    Ok((width, height, data[..width * height].to_vec()))
}

/// Write an 8-bit binary PPM from interleaved RGB bytes.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(format_err(path, "rgb buffer does not match dimensions"));
    }
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    write!(w, "P6\n{width} {height}\n255\n")?;
    w.write_all(rgb)?;
    w.flush()?;
    Ok(())
}

/// Read an 8-bit binary PPM. Returns (width, height, rgb).
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = read_file(path)?;
    let (magic, rest) = parse_header(&bytes, path)?;
    if magic != "P6" {
        return Err(format_err(path, format!("expected P6 magic, got {magic}")));
    }
    let (width, height, data) = rest;
    if data.len() < 3 * width * height {
        return Err(format_err(path, "truncated pixel data"));
    }
    Ok((width, height, data[..3 * width * height].to_vec()))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(std::fs::read(path)?)
}

type Header = (usize, usize, Vec<u8>);

/// Parse `<magic> <width> <height> <maxval>` allowing `#` comments, then
/// return the remaining raw bytes after the single whitespace that ends the
/// header.
fn parse_header<'a>(bytes: &'a [u8], path: &Path) -> Result<(String, Header)> {
    let mut pos = 0usize;
    let mut tokens: Vec<String> = Vec::new();
    while tokens.len() < 4 {
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
            return Err(format_err(path, "unexpected end of header"));
        }
        let token = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| format_err(path, "non-ascii header"))?;
        tokens.push(token.to_string());
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() {
        return Err(format_err(path, "missing pixel data"));
    }
    pos += 1;

    let magic = tokens[0].clone();
    let width: usize = tokens[1]
        .parse()
        .map_err(|_| format_err(path, "bad width"))?;
    let height: usize = tokens[2]
        .parse()
        .map_err(|_| format_err(path, "bad height"))?;
    let maxval: usize = tokens[3]
        .parse()
        .map_err(|_| format_err(path, "bad maxval"))?;
    if maxval != 255 {
        return Err(format_err(path, format!("only maxval 255 supported, got {maxval}")));
    }
    let _ = &bytes[..pos];
    Ok((magic, (width, height, bytes[pos..].to_vec())))
}
