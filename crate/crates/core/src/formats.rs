//! On-disk formats: binary PGM images, the NTX1 array container, and the
//! seeded weight stream used to initialize every network.
//!
//! NTX1 layout (all integers little-endian):
//!
//! ```text
//! file    := "NTX1" version:u16=1 count:u16 section*
//! section := name_len:u16 name:utf8[name_len] record
//! record  := "NTX1" version:u16=1 rank:u16 dims:u32[rank] payload:f32[prod(dims)]
//! ```
//!
//! Sections are written sorted by name, so re-serializing a file that was
//! read without modification reproduces it byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Ntx1Error, Result};
use crate::grid::{Grid, KernelBank};

const MAGIC: &[u8; 4] = b"NTX1";
const VERSION: u16 = 1;

/// xorshift64* stream producing platform-independent weights.
#[derive(Debug, Clone)]
pub struct SeededWeightStream {
    state: u64,
}

impl SeededWeightStream {
    const MULTIPLIER: u64 = 0x2545_F491_4F6C_DD1D;
    const SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

    pub fn new(seed: u64) -> Self {
        let state = seed ^ Self::SEED_MIX;
        SeededWeightStream {
            state: if state == 0 { 1 } else { state },
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(Self::MULTIPLIER)
    }

    /// Uniform sample in [−1, 1) from the top 24 bits of the next output.
    pub fn next_sample(&mut self) -> f64 {
        let top = (self.next_u64() >> 40) as f64;
        top / (1u64 << 23) as f64 - 1.0
    }

    /// Uniform sample in [0, 1).
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 40) as f64 / (1u64 << 24) as f64
    }

    /// Uniform integer in `0..n` (n > 0).
    pub fn next_below(&mut self, n: usize) -> usize {
        ((self.next_unit() * n as f64) as usize).min(n - 1)
    }

    /// `count` samples scaled by the He factor √(2/fan_in).
    pub fn he_weights(&mut self, count: usize, fan_in: usize) -> Vec<f64> {
        let scale = (2.0 / fan_in as f64).sqrt();
        (0..count).map(|_| self.next_sample() * scale).collect()
    }
}

/// An array of arbitrary rank, as stored in an NTX1 section.
#[derive(Debug, Clone, PartialEq)]
pub struct NdArray {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl NdArray {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape("NdArray::new", format!("{dims:?}"), format!("{} values", data.len())));
        }
        Ok(NdArray { dims, data })
    }

    pub fn from_grid(grid: &Grid) -> Self {
        NdArray {
            dims: vec![grid.channels(), grid.height(), grid.width()],
            data: grid.as_slice().to_vec(),
        }
    }

    /// Interprets rank 3 as `c×h×w`, rank 2 as a single-channel `h×w`.
    pub fn to_grid(&self) -> Result<Grid> {
        match self.dims[..] {
            [c, h, w] => Grid::from_vec(c, h, w, self.data.clone()),
            [h, w] => Grid::from_vec(1, h, w, self.data.clone()),
            _ => Err(Error::InvalidArgument(format!(
                "array of dims {:?} is not a grid",
                self.dims
            ))),
        }
    }

    pub fn from_kernels(k: &KernelBank) -> Self {
        NdArray {
            dims: k.dims().to_vec(),
            data: k.as_slice().to_vec(),
        }
    }

    pub fn to_kernels(&self) -> Result<KernelBank> {
        match self.dims[..] {
            [o, i, kh, kw] => KernelBank::new(o, i, kh, kw, self.data.clone()),
            _ => Err(Error::InvalidArgument(format!(
                "array of dims {:?} is not a kernel bank",
                self.dims
            ))),
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        NdArray {
            dims: vec![data.len()],
            data,
        }
    }
}

pub type Ntx1Map = BTreeMap<String, NdArray>;

fn push_record(out: &mut Vec<u8>, array: &NdArray) -> std::result::Result<(), Ntx1Error> {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let rank = u16::try_from(array.dims.len())
        .map_err(|_| Ntx1Error::TooLarge(format!("rank {}", array.dims.len())))?;
    out.extend_from_slice(&rank.to_le_bytes());
    for &d in &array.dims {
        let d = u32::try_from(d).map_err(|_| Ntx1Error::TooLarge(format!("dimension {d}")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in &array.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

pub fn encode_ntx1(map: &Ntx1Map) -> std::result::Result<Vec<u8>, Ntx1Error> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u16::try_from(map.len())
        .map_err(|_| Ntx1Error::TooLarge(format!("{} sections", map.len())))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, array) in map {
        let len = u16::try_from(name.len())
            .map_err(|_| Ntx1Error::TooLarge(format!("name of {} bytes", name.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        push_record(&mut out, array)?;
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], Ntx1Error> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(Ntx1Error::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> std::result::Result<u16, Ntx1Error> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> std::result::Result<u32, Ntx1Error> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn header(&mut self) -> std::result::Result<(), Ntx1Error> {
        let magic = self.take(4)?;
        if magic != MAGIC {
            return Err(Ntx1Error::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
        }
        let version = self.u16()?;
        if version != VERSION {
            return Err(Ntx1Error::BadVersion(version));
        }
        Ok(())
    }

    fn record(&mut self) -> std::result::Result<NdArray, Ntx1Error> {
        self.header()?;
        let rank = self.u16()? as usize;
        // checked before allocating so a fuzzed rank cannot trigger a huge Vec
        if rank * 4 > self.bytes.len() - self.pos {
            return Err(Ntx1Error::Truncated {
                offset: self.pos,
                needed: rank * 4,
                available: self.bytes.len() - self.pos,
            });
        }
        let raw: Vec<u32> = (0..rank).map(|_| self.u32()).collect::<Result<_, _>>()?;
        let count = raw
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(|| Ntx1Error::DimsOverflow(raw.clone()))?;
        let payload = self.take(count)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(NdArray {
            dims: raw.into_iter().map(|d| d as usize).collect(),
            data,
        })
    }
}

pub fn decode_ntx1(bytes: &[u8]) -> std::result::Result<Ntx1Map, Ntx1Error> {
    let mut r = Reader { bytes, pos: 0 };
    r.header()?;
    let count = r.u16()?;
    let mut map = Ntx1Map::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Ntx1Error::BadName)?
            .to_owned();
        let array = r.record()?;
        if map.contains_key(&name) {
            return Err(Ntx1Error::DuplicateSection(name));
        }
        map.insert(name, array);
    }
    if r.pos != bytes.len() {
        return Err(Ntx1Error::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(map)
}

pub fn read_ntx1(path: impl AsRef<Path>) -> Result<Ntx1Map> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_ntx1(&bytes)?)
}

pub fn write_ntx1(map: &Ntx1Map, path: impl AsRef<Path>) -> Result<()> {
    atomic_write(path.as_ref(), &encode_ntx1(map)?)
}

/// Writes via a temporary sibling and a rename so readers never observe a
/// partially written file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Quantizes a [0, 1] value to a byte: clamp, scale by 255, round half to even.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

pub fn encode_pgm(grid: &Grid) -> Result<Vec<u8>> {
    if grid.channels() != 1 {
        return Err(Error::Pgm(format!(
            "only single-channel grids can be written, got {}",
            grid.shape()
        )));
    }
    let mut out = format!("P5\n{} {}\n255\n", grid.width(), grid.height()).into_bytes();
    out.extend(grid.as_slice().iter().map(|&v| to_byte(v)));
    Ok(out)
}

fn pgm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Pgm("truncated header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn pgm_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = pgm_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Pgm(format!("invalid {what} {:?}", String::from_utf8_lossy(tok))))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Grid> {
    let mut pos = 0;
    let magic = pgm_token(bytes, &mut pos)?;
    match magic {
        b"P5" => {}
        b"P2" => return Err(Error::Pgm("ASCII graymap (P2) is not supported, expected binary P5".into())),
        b"P6" | b"P3" => return Err(Error::Pgm("color pixmap (P3/P6) is not supported, expected binary P5".into())),
        other => {
            return Err(Error::Pgm(format!(
                "unrecognized magic {:?}, expected P5",
                String::from_utf8_lossy(other)
            )))
        }
    }
    let width = pgm_number(bytes, &mut pos, "width")?;
    let height = pgm_number(bytes, &mut pos, "height")?;
    let maxval = pgm_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Pgm(format!("maxval {maxval} is not supported, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Pgm(format!("empty image {width}x{height}")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Pgm("truncated header".into()));
    }
    pos += 1;
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::Pgm(format!("image {width}x{height} too large")))?;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::Pgm(format!("truncated payload: expected {n} bytes, found {}", bytes.len() - pos)))?;
    Grid::from_vec(1, height, width, raster.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Grid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|e| match e {
        Error::Pgm(msg) => Error::Pgm(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_pgm(grid: &Grid, path: impl AsRef<Path>) -> Result<()> {
    atomic_write(path.as_ref(), &encode_pgm(grid)?)
}
