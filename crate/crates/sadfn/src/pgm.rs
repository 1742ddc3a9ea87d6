//! Binary PGM (P5) image I/O.
//!
//! Used for sampling masks (255 = sampled, 0 = not sampled) and tissue
//! label maps (small class ids). Only 8-bit binary PGM is supported; the
//! reader tolerates `#` comment lines in the header.

use crate::{Error, Result};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

/// Writes an 8-bit binary PGM with maxval 255.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::shape(
            "write_pgm",
            format!("{} pixels for {width}x{height}", width * height),
            format!("{}", pixels.len()),
        ));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(format!("P5\n{width} {height}\n255\n").as_bytes())
        .and_then(|_| w.write_all(pixels))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit binary PGM; returns `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let magic = read_token(&mut r, path)?;
    if magic != "P5" {
        return Err(Error::parse(path, format!("expected P5 magic, got {magic:?}")));
    }
    let width: usize = parse_token(&read_token(&mut r, path)?, path, "width")?;
    let height: usize = parse_token(&read_token(&mut r, path)?, path, "height")?;
    let maxval: usize = parse_token(&read_token(&mut r, path)?, path, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::parse(path, format!("unsupported maxval {maxval}")));
    }

    let mut pixels = vec![0u8; width * height];
    r.read_exact(&mut pixels).map_err(|e| Error::io(path, e))?;
    let mut extra = [0u8; 1];
    match r.read(&mut extra) {
        Ok(0) => {}
        Ok(_) => return Err(Error::parse(path, "trailing bytes after pixel data")),
        Err(e) => return Err(Error::io(path, e)),
    }
    Ok((width, height, pixels))
}

/// Reads one whitespace-delimited header token, skipping `#` comments.
/// The final delimiter byte after the maxval token is consumed, which is
/// exactly the single whitespace the format requires before pixel data.
fn read_token(r: &mut impl BufRead, path: &Path) -> Result<String> {
    let mut token = String::new();
    let mut in_comment = false;
    loop {
        let mut byte = [0u8; 1];
        let n = r.read(&mut byte).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            if token.is_empty() {
                return Err(Error::parse(path, "unexpected end of header"));
            }
            return Ok(token);
        }
        let b = byte[0];
        if in_comment {
            if b == b'\n' {
                in_comment = false;
            }
            continue;
        }
        match b {
            b'#' if token.is_empty() => in_comment = true,
            b' ' | b'\t' | b'\r' | b'\n' => {
                if !token.is_empty() {
                    return Ok(token);
                }
            }
            _ => token.push(b as char),
        }
    }
}

fn parse_token(token: &str, path: &Path, what: &str) -> Result<usize> {
    token
        .parse()
        .map_err(|_| Error::parse(path, format!("bad {what}: {token:?}")))
}
