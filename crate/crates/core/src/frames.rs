//! Grayscale frame stacks and their on-disk formats.
//!
//! Two formats are supported:
//! * a directory of 8-bit binary PGM (`P5`) files, time-ordered by file name;
//! * a raw cube: `height, width, count` as little-endian `u32`, then
//!   `count` row-major `u8` frames.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("no frames found in {0}")]
    Empty(PathBuf),
    #[error("frame size mismatch: expected {expected:?}, got {got:?}")]
    SizeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FrameError + '_ {
    move |source| FrameError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Frames with intensities normalized to `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack {
    pub height: usize,
    pub width: usize,
    pub frames: Vec<Vec<f64>>,
    pub timestamps: Vec<f64>,
}

impl FrameStack {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            frames: Vec::new(),
            timestamps: Vec::new(),
        }
    }

    pub fn push(&mut self, frame: Vec<f64>, t: f64) -> Result<(), FrameError> {
        if frame.len() != self.height * self.width {
            return Err(FrameError::SizeMismatch {
                expected: (self.height, self.width),
                got: (frame.len() / self.width.max(1), self.width),
            });
        }
        self.frames.push(frame);
        self.timestamps.push(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frames `[start, end)` as a new stack.
    pub fn slice(&self, start: usize, end: usize) -> FrameStack {
        FrameStack {
            height: self.height,
            width: self.width,
            frames: self.frames[start..end].to_vec(),
            timestamps: self.timestamps[start..end].to_vec(),
        }
    }

    pub fn pixel(&self, frame: usize, row: usize, col: usize) -> f64 {
        self.frames[frame][row * self.width + col]
    }

    /// Quantize every frame to 8 bits and back. Writing and re-reading a stack
    /// yields exactly this.
    pub fn quantized(&self) -> FrameStack {
        let mut out = self.clone();
        for f in &mut out.frames {
            for p in f.iter_mut() {
                *p = to_u8(*p) as f64 / 255.0;
            }
        }
        out
    }

    /// Assign timestamps `index / frame_rate`.
    pub fn with_frame_rate(mut self, frame_rate: f64) -> Self {
        self.timestamps = (0..self.frames.len())
            .map(|i| i as f64 / frame_rate)
            .collect();
        self
    }

    pub fn write_pgm_dir(&self, dir: &Path) -> Result<(), FrameError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (i, frame) in self.frames.iter().enumerate() {
            let path = dir.join(format!("frame_{i:06}.pgm"));
            let mut bytes = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
            bytes.extend(frame.iter().map(|&p| to_u8(p)));
            fs::write(&path, bytes).map_err(io_err(&path))?;
        }
        Ok(())
    }

    /// Read all `*.pgm` files in lexicographic order. Timestamps are frame
    /// indices until [`FrameStack::with_frame_rate`] is applied.
    pub fn read_pgm_dir(dir: &Path) -> Result<FrameStack, FrameError> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(FrameError::Empty(dir.to_path_buf()));
        }
        let mut stack: Option<FrameStack> = None;
        for (i, path) in paths.iter().enumerate() {
            let bytes = fs::read(path).map_err(io_err(path))?;
            let (w, h, data) = parse_pgm(&bytes).map_err(|msg| FrameError::Format {
                path: path.clone(),
                msg,
            })?;
            let s = stack.get_or_insert_with(|| FrameStack::new(h, w));
            if (s.height, s.width) != (h, w) {
                return Err(FrameError::SizeMismatch {
                    expected: (s.height, s.width),
                    got: (h, w),
                });
            }
            s.push(data.iter().map(|&b| b as f64 / 255.0).collect(), i as f64)?;
        }
        Ok(stack.expect("at least one frame"))
    }

    pub fn write_cube(&self, path: &Path) -> Result<(), FrameError> {
        let file = fs::File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(file);
        let mut header = Vec::with_capacity(12);
        for v in [
            self.height as u32,
            self.width as u32,
            self.frames.len() as u32,
        ] {
            header.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&header).map_err(io_err(path))?;
        for frame in &self.frames {
            let bytes: Vec<u8> = frame.iter().map(|&p| to_u8(p)).collect();
            w.write_all(&bytes).map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }

    pub fn read_cube(path: &Path) -> Result<FrameStack, FrameError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        let bad = |msg: &str| FrameError::Format {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        if bytes.len() < 12 {
            return Err(bad("truncated header"));
        }
        let word =
            |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
        let (h, w, k) = (word(0), word(1), word(2));
        let frame_len = h.checked_mul(w).ok_or_else(|| bad("frame size overflow"))?;
        if frame_len == 0 {
            return Err(bad("zero-sized frame"));
        }
        if bytes.len() != 12 + frame_len * k {
            return Err(bad("payload length does not match header"));
        }
        let mut stack = FrameStack::new(h, w);
        for f in 0..k {
            let start = 12 + f * frame_len;
            let frame = bytes[start..start + frame_len]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect();
            stack.push(frame, f as f64)?;
        }
        Ok(stack)
    }
}

fn to_u8(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, &[u8]), String> {
    let mut pos = 0;
    let mut token = || -> Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err("not a binary PGM (P5)".into());
    }
    let num = |s: String| {
        s.parse::<usize>()
            .map_err(|_| format!("bad header field {s:?}"))
    };
    let w = num(token()?)?;
    let h = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval != 255 {
        return Err(format!("only 8-bit PGM supported (maxval {maxval})"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let data_start = pos + 1;
    let need = w * h;
    if bytes.len() < data_start + need {
        return Err("truncated raster".into());
    }
    Ok((w, h, &bytes[data_start..data_start + need]))
}
