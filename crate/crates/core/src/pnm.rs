//! Binary netpbm I/O: 8/16-bit greyscale PGM (`P5`) and 8-bit colour PPM (`P6`).
//!
//! Writers always emit the minimal header `P5\n<cols> <rows>\n<maxval>\n`, so a
//! read followed by a write reproduces the original bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grids::{Grid, HeightMap, Label, LabelMap, LabelRole};

/// Greyscale raster as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub maxval: u16,
    pub pixels: Grid<u16>,
}

/// Colour raster, one `[r, g, b]` triple per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ppm {
    pub pixels: Grid<[u8; 3]>,
}

struct Header {
    magic: [u8; 2],
    cols: usize,
    rows: usize,
    maxval: u16,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(Error::format("netpbm", "file too short"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(Error::format("netpbm", "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("netpbm", "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("netpbm", "header field out of range"))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::format("netpbm", "missing separator after maxval"));
    }
    pos += 1;
    let [cols, rows, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format("netpbm", format!("maxval {maxval} out of range")));
    }
    Ok(Header {
        magic,
        cols,
        rows,
        maxval: maxval as u16,
        data_start: pos,
    })
}

impl Pgm {
    pub fn new(maxval: u16, pixels: Grid<u16>) -> Result<Self> {
        if maxval == 0 {
            return Err(Error::invalid("PGM maxval must be positive"));
        }
        if pixels.iter().any(|&p| p > maxval) {
            return Err(Error::invalid("PGM sample exceeds maxval"));
        }
        Ok(Pgm { maxval, pixels })
    }

    pub fn from_u8(pixels: &Grid<u8>) -> Self {
        Pgm {
            maxval: 255,
            pixels: pixels.map(|&p| p as u16),
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let h = parse_header(bytes)?;
        if &h.magic != b"P5" {
            return Err(Error::format("PGM", "expected P5 magic"));
        }
        let wide = h.maxval > 255;
        let n = h.rows * h.cols;
        let need = if wide { 2 * n } else { n };
        let raster = &bytes[h.data_start..];
        if raster.len() != need {
            return Err(Error::format(
                "PGM",
                format!("expected {need} raster bytes, found {}", raster.len()),
            ));
        }
        let data: Vec<u16> = if wide {
            raster
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect()
        } else {
            raster.iter().map(|&b| b as u16).collect()
        };
        Pgm::new(h.maxval, Grid::from_vec(h.rows, h.cols, data)?)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!(
            "P5\n{} {}\n{}\n",
            self.pixels.cols(),
            self.pixels.rows(),
            self.maxval
        )
        .into_bytes();
        if self.maxval > 255 {
            for &p in self.pixels.iter() {
                out.extend_from_slice(&p.to_be_bytes());
            }
        } else {
            out.extend(self.pixels.iter().map(|&p| p as u8));
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Pgm::decode(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    /// The raster as bytes, failing for 16-bit files.
    pub fn to_u8(&self) -> Result<Grid<u8>> {
        if self.maxval > 255 {
            return Err(Error::format("PGM", "expected an 8-bit raster"));
        }
        Ok(self.pixels.map(|&p| p as u8))
    }
}

impl Ppm {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.pixels.cols(), self.pixels.rows()).into_bytes();
        for px in self.pixels.iter() {
            out.extend_from_slice(px);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let h = parse_header(bytes)?;
        if &h.magic != b"P6" || h.maxval != 255 {
            return Err(Error::format("PPM", "expected 8-bit P6"));
        }
        let raster = &bytes[h.data_start..];
        if raster.len() != 3 * h.rows * h.cols {
            return Err(Error::format("PPM", "raster length mismatch"));
        }
        let data = raster.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Ok(Ppm {
            pixels: Grid::from_vec(h.rows, h.cols, data)?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ppm::decode(&bytes)
    }
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn label_map_to_pgm(map: &LabelMap) -> Pgm {
    Pgm::from_u8(&map.labels().map(|l| l.code()))
}

pub fn label_map_from_pgm(pgm: &Pgm, role: LabelRole) -> Result<LabelMap> {
    let grid = pgm.to_u8()?;
    let mut labels = Vec::with_capacity(grid.len());
    for &c in grid.iter() {
        labels.push(
            Label::from_code(c).ok_or_else(|| Error::format("label map", format!("bad code {c}")))?,
        );
    }
    LabelMap::new(Grid::from_vec(grid.rows(), grid.cols(), labels)?, role)
}

/// Boolean masks use 0 / 255.
pub fn mask_to_pgm(mask: &Grid<bool>) -> Pgm {
    Pgm::from_u8(&mask.map(|&b| if b { 255 } else { 0 }))
}

pub fn mask_from_pgm(pgm: &Pgm) -> Result<Grid<bool>> {
    let grid = pgm.to_u8()?;
    if grid.iter().any(|&v| v != 0 && v != 255) {
        return Err(Error::format("mask", "values must be 0 or 255"));
    }
    Ok(grid.map(|&v| v == 255))
}

/// Unit-interval raster stored as 16-bit samples (`value * 65535`, rounded).
pub fn unit_to_pgm16(values: &Grid<f64>) -> Pgm {
    Pgm {
        maxval: 65535,
        pixels: values.map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16),
    }
}

pub fn unit_from_pgm16(pgm: &Pgm) -> Grid<f64> {
    let scale = pgm.maxval as f64;
    pgm.pixels.map(|&p| p as f64 / scale)
}

pub fn read_label_map(path: &Path, role: LabelRole) -> Result<LabelMap> {
    label_map_from_pgm(&Pgm::read(path)?, role)
}

pub fn write_label_map(path: &Path, map: &LabelMap) -> Result<()> {
    label_map_to_pgm(map).write(path)
}

pub fn read_mask(path: &Path) -> Result<Grid<bool>> {
    mask_from_pgm(&Pgm::read(path)?)
}

pub fn write_mask(path: &Path, mask: &Grid<bool>) -> Result<()> {
    mask_to_pgm(mask).write(path)
}

/// Reads `height.pgm` + `valid.pgm`.
pub fn read_height_map(height: &Path, valid: &Path, resolution: f64) -> Result<HeightMap> {
    let h = Pgm::read(height)?.to_u8()?;
    let v = read_mask(valid)?;
    HeightMap::new(h, v, resolution)
}

pub fn write_height_map(height: &Path, valid: &Path, map: &HeightMap) -> Result<()> {
    Pgm::from_u8(&map.height).write(height)?;
    write_mask(valid, &map.valid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_with_comment() {
        let bytes = b"P5\n# made by hand\n3 1\n255\n\x00\x01\x02";
        let pgm = Pgm::decode(bytes).unwrap();
        assert_eq!(pgm.pixels.as_slice(), &[0, 1, 2]);
        assert_eq!(pgm.encode(), b"P5\n3 1\n255\n\x00\x01\x02");
    }

    #[test]
    fn sixteen_bit_is_big_endian() {
        let pgm = Pgm::new(65535, Grid::from_vec(1, 2, vec![0x0102, 0xfffe]).unwrap()).unwrap();
        let bytes = pgm.encode();
        assert_eq!(&bytes[bytes.len() - 4..], &[1, 2, 0xff, 0xfe]);
        assert_eq!(Pgm::decode(&bytes).unwrap(), pgm);
    }

    #[test]
    fn rejects_truncated_raster() {
        assert!(Pgm::decode(b"P5\n2 2\n255\n\x00").is_err());
        assert!(Pgm::decode(b"P6\n1 1\n255\n\x00\x00\x00").is_err());
        assert!(Ppm::decode(b"P5\n1 1\n255\n\x00").is_err());
    }

    #[test]
    fn label_codes_checked() {
        let pgm = Pgm::from_u8(&Grid::from_vec(1, 2, vec![1, 7]).unwrap());
        assert!(label_map_from_pgm(&pgm, LabelRole::HumanGt).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_encode_is_stable(
            rows in 1usize..6,
            cols in 1usize..6,
            wide in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let maxval = if wide { 65535u16 } else { 255 };
            let mut x = seed | 1;
            let data: Vec<u16> = (0..rows * cols)
                .map(|_| {
                    x ^= x << 13;
                    x ^= x >> 7;
                    x ^= x << 17;
                    (x % (maxval as u64 + 1)) as u16
                })
                .collect();
            let pgm = Pgm::new(maxval, Grid::from_vec(rows, cols, data).unwrap()).unwrap();
            let bytes = pgm.encode();
            let back = Pgm::decode(&bytes).unwrap();
            prop_assert_eq!(&back, &pgm);
            prop_assert_eq!(back.encode(), bytes);
        }
    }
}
