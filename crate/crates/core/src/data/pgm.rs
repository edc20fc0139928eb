//! Netpbm graymap (PGM) reading and writing, ASCII `P2` and binary `P5`,
//! 8- and 16-bit.

use std::path::Path;

use super::DataError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Row-major raw samples.
    pub pixels: Vec<u16>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a str,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: impl Into<String>) -> DataError {
        DataError::Pgm {
            file: self.file.to_string(),
            offset: self.pos,
            msg: msg.into(),
        }
    }

    /// Skips whitespace and `#` comments.
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u64, DataError> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(match self.bytes.get(self.pos) {
                None => self.err(format!("unexpected end of file reading {what}")),
                Some(b) => self.err(format!("expected {what}, found byte {b:#04x}")),
            });
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        text.parse().map_err(|_| {
            let mut e = self.err(format!("{what} {text} out of range"));
            if let DataError::Pgm { offset, .. } = &mut e {
                *offset = start;
            }
            e
        })
    }
}

impl Pgm {
    /// Parses a PGM file held in memory; `file` is used in error messages.
    pub fn parse(bytes: &[u8], file: &str) -> Result<Self, DataError> {
        let mut c = Cursor { bytes, pos: 0, file };
        let binary = match bytes.get(..2) {
            Some(b"P2") => false,
            Some(b"P5") => true,
            _ => return Err(c.err("missing P2/P5 magic number")),
        };
        c.pos = 2;
        if !bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
            return Err(c.err("expected whitespace after magic number"));
        }
        let width = c.number("width")? as usize;
        let height = c.number("height")? as usize;
        if width == 0 || height == 0 {
            return Err(c.err(format!("zero image dimension {width}x{height}")));
        }
        let maxval = c.number("maxval")?;
        if maxval == 0 || maxval > 65535 {
            return Err(c.err(format!("maxval {maxval} outside 1..=65535")));
        }
        let maxval = maxval as u16;
        let count = width * height;
        let mut pixels = Vec::with_capacity(count);
        if binary {
            match bytes.get(c.pos) {
                Some(b) if b.is_ascii_whitespace() => c.pos += 1,
                _ => return Err(c.err("expected single whitespace before raster")),
            }
            let wide = maxval > 255;
            let need = count * if wide { 2 } else { 1 };
            let raster = &bytes[c.pos..];
            if raster.len() < need {
                c.pos = bytes.len();
                return Err(c.err(format!("raster truncated: need {need} bytes, found {}", raster.len())));
            }
            for i in 0..count {
                let v = if wide {
                    u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]])
                } else {
                    raster[i] as u16
                };
                if v > maxval {
                    c.pos += if wide { 2 * i } else { i };
                    return Err(c.err(format!("sample {v} exceeds maxval {maxval}")));
                }
                pixels.push(v);
            }
        } else {
            for _ in 0..count {
                let start = {
                    c.skip_space();
                    c.pos
                };
                let v = c.number("sample")?;
                if v > maxval as u64 {
                    c.pos = start;
                    return Err(c.err(format!("sample {v} exceeds maxval {maxval}")));
                }
                pixels.push(v as u16);
            }
        }
        Ok(Self {
            width,
            height,
            maxval,
            pixels,
        })
    }

    /// `[H, W]` tensor scaled to `[0, 1]` by `maxval`.
    pub fn to_tensor(&self) -> Tensor {
        let m = self.maxval as f64;
        let data = self.pixels.iter().map(|&p| p as f64 / m).collect();
        Tensor::new(vec![self.height, self.width], data).expect("dimensions match raster")
    }

    /// Quantizes a `[H, W]` tensor in `[0, 1]` to `maxval` levels.
    pub fn from_tensor(image: &Tensor, maxval: u16) -> Result<Self, DataError> {
        if image.shape().len() != 2 {
            return Err(DataError::Config(format!("expected a 2-D image, got {:?}", image.shape())));
        }
        if maxval == 0 {
            return Err(DataError::Config("maxval must be positive".into()));
        }
        let m = maxval as f64;
        let pixels = image
            .data()
            .iter()
            .map(|&v| {
                if !(0.0..=1.0).contains(&v) {
                    return Err(DataError::Config(format!("pixel value {v} outside [0, 1]")));
                }
                Ok((v * m).round() as u16)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            height: image.shape()[0],
            width: image.shape()[1],
            maxval,
            pixels,
        })
    }

    /// Binary `P5` encoding.
    pub fn to_p5(&self) -> Vec<u8> {
        self.to_p5_with_comment(None)
    }

    /// Binary `P5` encoding with an optional single-line header comment.
    pub fn to_p5_with_comment(&self, comment: Option<&str>) -> Vec<u8> {
        let comment = comment.map(|c| format!("# {}\n", c.replace('\n', " "))).unwrap_or_default();
        let mut out = format!("P5\n{comment}{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval > 255 {
            for p in &self.pixels {
                out.extend_from_slice(&p.to_be_bytes());
            }
        } else {
            out.extend(self.pixels.iter().map(|&p| p as u8));
        }
        out
    }

    /// ASCII `P2` encoding, one image row per line.
    pub fn to_p2(&self) -> Vec<u8> {
        let mut out = format!("P2\n{} {}\n{}\n", self.width, self.height, self.maxval);
        for row in self.pixels.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|p| p.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out.into_bytes()
    }
}

pub fn read_pgm(path: &Path) -> Result<Tensor, DataError> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(Pgm::parse(&bytes, &path.display().to_string())?.to_tensor())
}

/// Writes an 8-bit binary PGM.
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<(), DataError> {
    write_pgm_with_comment(path, image, None)
}

pub fn write_pgm_with_comment(path: &Path, image: &Tensor, comment: Option<&str>) -> Result<(), DataError> {
    let bytes = Pgm::from_tensor(image, 255)?.to_p5_with_comment(comment);
    std::fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}
