//! PFM (portable float map) reading and writing.
//!
//! Single-channel maps use the `Pf` header, three-channel maps `PF`. Rows are
//! stored bottom-to-top as the format prescribes; a negative scale marks
//! little-endian data. Float bits round-trip exactly, NaN marks invalid
//! pixels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::img::Grid;

#[derive(Debug, Error)]
pub enum PfmError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: not a PFM file (bad magic {magic:?})")]
    BadMagic { path: String, magic: String },
    #[error("{path}: malformed PFM header")]
    BadHeader { path: String },
    #[error("{path}: expected {expected} channels")]
    WrongChannels { path: String, expected: usize },
}

fn io_err(path: &Path, source: std::io::Error) -> PfmError {
    PfmError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write a single-channel float map.
pub fn write_gray(path: &Path, grid: &Grid<f32>) -> Result<(), PfmError> {
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(f);
    write!(w, "Pf\n{} {}\n-1.0\n", grid.width(), grid.height()).map_err(|e| io_err(path, e))?;
    for y in (0..grid.height()).rev() {
        for x in 0..grid.width() {
            w.write_all(&grid.get(x, y).to_le_bytes())
                .map_err(|e| io_err(path, e))?;
        }
    }
    Ok(())
}

/// Write a three-channel float map from per-pixel `[f32; 3]` values.
pub fn write_rgb(path: &Path, grid: &Grid<[f32; 3]>) -> Result<(), PfmError> {
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(f);
    write!(w, "PF\n{} {}\n-1.0\n", grid.width(), grid.height()).map_err(|e| io_err(path, e))?;
    for y in (0..grid.height()).rev() {
        for x in 0..grid.width() {
            for c in grid.get(x, y) {
                w.write_all(&c.to_le_bytes()).map_err(|e| io_err(path, e))?;
            }
        }
    }
    Ok(())
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    little_endian: bool,
}

fn read_header(path: &Path, r: &mut impl Read) -> Result<Header, PfmError> {
    // Header = three whitespace-separated tokens after the magic line.
    let mut tokens: Vec<String> = Vec::new();
    let mut cur = String::new();
    let mut byte = [0u8; 1];
    while tokens.len() < 4 {
        r.read_exact(&mut byte).map_err(|e| io_err(path, e))?;
        let c = byte[0] as char;
        if c.is_whitespace() {
            if !cur.is_empty() {
                tokens.push(std::mem::take(&mut cur));
            }
            // A single whitespace terminates the scale token and the header.
            if tokens.len() == 4 {
                break;
            }
        } else {
            cur.push(c);
        }
    }
    let channels = match tokens[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => {
            return Err(PfmError::BadMagic {
                path: path.display().to_string(),
                magic: other.to_string(),
            })
        }
    };
    let parse = |s: &str| -> Option<f64> { s.parse().ok() };
    let width = parse(&tokens[1]).ok_or_else(|| PfmError::BadHeader {
        path: path.display().to_string(),
    })? as usize;
    let height = parse(&tokens[2]).ok_or_else(|| PfmError::BadHeader {
        path: path.display().to_string(),
    })? as usize;
    let scale = parse(&tokens[3]).ok_or_else(|| PfmError::BadHeader {
        path: path.display().to_string(),
    })?;
    Ok(Header {
        channels,
        width,
        height,
        little_endian: scale < 0.0,
    })
}

/// Read a single-channel float map.
pub fn read_gray(path: &Path) -> Result<Grid<f32>, PfmError> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(f);
    let h = read_header(path, &mut r)?;
    if h.channels != 1 {
        return Err(PfmError::WrongChannels {
            path: path.display().to_string(),
            expected: 1,
        });
    }
    let mut raw = vec![0u8; h.width * h.height * 4];
    r.read_exact(&mut raw).map_err(|e| io_err(path, e))?;
    let mut grid = Grid::from_fill(h.width, h.height, 0.0f32);
    for y in 0..h.height {
        let src_row = h.height - 1 - y;
        for x in 0..h.width {
            let o = (src_row * h.width + x) * 4;
            let b = [raw[o], raw[o + 1], raw[o + 2], raw[o + 3]];
            let v = if h.little_endian {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
            grid.set(x, y, v);
        }
    }
    Ok(grid)
}

/// Read a three-channel float map.
pub fn read_rgb(path: &Path) -> Result<Grid<[f32; 3]>, PfmError> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(f);
    let h = read_header(path, &mut r)?;
    if h.channels != 3 {
        return Err(PfmError::WrongChannels {
            path: path.display().to_string(),
            expected: 3,
        });
    }
    let mut raw = vec![0u8; h.width * h.height * 12];
    r.read_exact(&mut raw).map_err(|e| io_err(path, e))?;
    let mut grid = Grid::from_fill(h.width, h.height, [0.0f32; 3]);
    for y in 0..h.height {
        let src_row = h.height - 1 - y;
        for x in 0..h.width {
            let mut px = [0.0f32; 3];
            for (c, slot) in px.iter_mut().enumerate() {
                let o = (src_row * h.width + x) * 12 + c * 4;
                let b = [raw[o], raw[o + 1], raw[o + 2], raw[o + 3]];
                *slot = if h.little_endian {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                };
            }
            grid.set(x, y, px);
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("mvps_pfm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.pfm");
        let grid = Grid::from_fn(7, 5, |x, y| {
            if (x + y) % 3 == 0 {
                f32::NAN
            } else {
                (x as f32 * 0.37 + y as f32 * 1.21).exp()
            }
        });
        write_gray(&path, &grid).unwrap();
        let back = read_gray(&path).unwrap();
        assert_eq!(back.width(), 7);
        assert_eq!(back.height(), 5);
        for y in 0..5 {
            for x in 0..7 {
                assert_eq!(grid.get(x, y).to_bits(), back.get(x, y).to_bits());
            }
        }
    }

    #[test]
    fn rgb_round_trip() {
        let dir = std::env::temp_dir().join("mvps_pfm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t3.pfm");
        let grid = Grid::from_fn(3, 2, |x, y| [x as f32, y as f32, 0.5]);
        write_rgb(&path, &grid).unwrap();
        let back = read_rgb(&path).unwrap();
        assert_eq!(back.get(2, 1), [2.0, 1.0, 0.5]);
    }
}
