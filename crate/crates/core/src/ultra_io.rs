//! Raw ultrasound recordings: sidecar metadata, frame-major 8-bit scanline
//! data, bicubic resizing and nearest-frame resampling onto the acoustic
//! frame clock.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

pub const KEY_NUM_VECTORS: &str = "NumVectors";
pub const KEY_PIX_PER_VECTOR: &str = "PixPerVector";
pub const KEY_FRAME_RATE: &str = "FramesPerSec";
pub const KEY_FIRST_FRAME: &str = "TimeInSecsOfFirstFrame";

/// Frame geometry and timing of one recording.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UltrasoundMetadata {
    /// Scanlines per frame.
    pub num_vectors: usize,
    /// Echo samples per scanline.
    pub pix_per_vector: usize,
    /// Frames per second.
    pub frame_rate: f64,
    /// Time of the first frame relative to the audio start, in seconds.
    pub first_frame_offset: f64,
}

impl UltrasoundMetadata {
    pub fn new(
        num_vectors: usize,
        pix_per_vector: usize,
        frame_rate: f64,
        first_frame_offset: f64,
    ) -> Result<Self> {
        let meta = Self {
            num_vectors,
            pix_per_vector,
            frame_rate,
            first_frame_offset,
        };
        meta.validate()?;
        Ok(meta)
    }

    fn validate(&self) -> Result<()> {
        if self.num_vectors == 0 {
            return Err(Error::Metadata(format!("{KEY_NUM_VECTORS} must be >= 1")));
        }
        if self.pix_per_vector == 0 {
            return Err(Error::Metadata(format!("{KEY_PIX_PER_VECTOR} must be >= 1")));
        }
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return Err(Error::Metadata(format!("{KEY_FRAME_RATE} must be > 0")));
        }
        if !self.first_frame_offset.is_finite() {
            return Err(Error::Metadata(format!("{KEY_FIRST_FRAME} must be finite")));
        }
        Ok(())
    }

    pub fn frame_size(&self) -> usize {
        self.num_vectors * self.pix_per_vector
    }
}

impl fmt::Display for UltrasoundMetadata {
    /// Serializes in the same `Key=Value` form accepted by [`parse_metadata`].
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{KEY_NUM_VECTORS}={}", self.num_vectors)?;
        writeln!(f, "{KEY_PIX_PER_VECTOR}={}", self.pix_per_vector)?;
        writeln!(f, "{KEY_FRAME_RATE}={}", self.frame_rate)?;
        writeln!(f, "{KEY_FIRST_FRAME}={}", self.first_frame_offset)
    }
}

/// Parses a line-oriented `Key=Value` sidecar document. Unknown keys are ignored.
pub fn parse_metadata(text: &str) -> Result<UltrasoundMetadata> {
    let mut num_vectors = None;
    let mut pix_per_vector = None;
    let mut frame_rate = None;
    let mut first_frame = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        let key = key.trim();
        let value = value.trim();
        let bad = |what: &str| {
            Error::Metadata(format!(
                "line {line_no}: cannot parse {what} value `{value}` for {key}"
            ))
        };
        match key {
            KEY_NUM_VECTORS => num_vectors = Some(value.parse::<usize>().map_err(|_| bad("integer"))?),
            KEY_PIX_PER_VECTOR => {
                pix_per_vector = Some(value.parse::<usize>().map_err(|_| bad("integer"))?)
            }
            KEY_FRAME_RATE => frame_rate = Some(value.parse::<f64>().map_err(|_| bad("number"))?),
            KEY_FIRST_FRAME => first_frame = Some(value.parse::<f64>().map_err(|_| bad("number"))?),
            _ => {}
        }
    }

    let missing = |key: &str| Error::Metadata(format!("{key} missing"));
    UltrasoundMetadata::new(
        num_vectors.ok_or_else(|| missing(KEY_NUM_VECTORS))?,
        pix_per_vector.ok_or_else(|| missing(KEY_PIX_PER_VECTOR))?,
        frame_rate.ok_or_else(|| missing(KEY_FRAME_RATE))?,
        first_frame.ok_or_else(|| missing(KEY_FIRST_FRAME))?,
    )
}

/// One utterance's raw echo-return frames in recording order.
#[derive(Debug, Clone, PartialEq)]
pub struct UltrasoundSequence {
    pub metadata: UltrasoundMetadata,
    /// Each frame is `num_vectors x pix_per_vector`.
    pub frames: Vec<Array2<u8>>,
}

impl UltrasoundSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frame-major, scanline-major bytes; inverse of [`load_sequence`].
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.frames.len() * self.metadata.frame_size());
        for frame in &self.frames {
            out.extend(frame.iter().copied());
        }
        out
    }
}

/// Splits a raw octet stream into frames.
pub fn load_sequence(bytes: &[u8], meta: UltrasoundMetadata) -> Result<UltrasoundSequence> {
    let frame_size = meta.frame_size();
    let remainder = bytes.len() % frame_size;
    if remainder != 0 {
        return Err(Error::Format(format!(
            "raw ultrasound length {} is not a multiple of frame size {frame_size} (remainder={remainder})",
            bytes.len()
        )));
    }
    let frames = bytes
        .chunks_exact(frame_size)
        .map(|chunk| {
            Array2::from_shape_vec((meta.num_vectors, meta.pix_per_vector), chunk.to_vec())
                .expect("chunk length equals frame size")
        })
        .collect();
    Ok(UltrasoundSequence {
        metadata: meta,
        frames,
    })
}

/// Paths of one utterance's raw file and its sidecar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UltrasoundFiles {
    pub id: String,
    pub raw: PathBuf,
    pub param: PathBuf,
}

impl UltrasoundFiles {
    pub fn in_dir(dir: &Path, id: &str) -> Self {
        Self {
            id: id.to_string(),
            raw: dir.join(format!("{id}.ult")),
            param: dir.join(format!("{id}.param")),
        }
    }

    pub fn read_metadata(&self) -> Result<UltrasoundMetadata> {
        let text = fs::read_to_string(&self.param).map_err(|e| Error::io(&self.param, e))?;
        parse_metadata(&text).map_err(|e| Error::Metadata(format!("{}: {e}", self.param.display())))
    }

    pub fn read(&self) -> Result<UltrasoundSequence> {
        let meta = self.read_metadata()?;
        let bytes = fs::read(&self.raw).map_err(|e| Error::io(&self.raw, e))?;
        load_sequence(&bytes, meta).map_err(|e| Error::Format(format!("{}: {e}", self.raw.display())))
    }

    /// Frame count from the raw file length, without reading pixel data.
    pub fn frame_count(&self) -> Result<usize> {
        let meta = self.read_metadata()?;
        let len = fs::metadata(&self.raw).map_err(|e| Error::io(&self.raw, e))?.len() as usize;
        if !len.is_multiple_of(meta.frame_size()) {
            return Err(Error::Format(format!(
                "{}: length {len} is not a multiple of frame size {}",
                self.raw.display(),
                meta.frame_size()
            )));
        }
        Ok(len / meta.frame_size())
    }

    pub fn write(&self, seq: &UltrasoundSequence) -> Result<()> {
        fs::write(&self.param, seq.metadata.to_string()).map_err(|e| Error::io(&self.param, e))?;
        fs::write(&self.raw, seq.to_bytes()).map_err(|e| Error::io(&self.raw, e))
    }
}

/// Utterance ids of every `*.ult` file in `dir`, in lexicographic (recording) order.
pub fn discover_utterances(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("ult") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Cubic convolution kernel with a = -0.5.
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Source taps and weights for each output position along one axis.
/// Pixel centres are aligned: output `o` samples source coordinate
/// `(o + 0.5) * in/out - 0.5`; taps outside the input are clamped.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = in_len as f64 / out_len as f64;
    let last = in_len as isize - 1;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let frac = src - base;
            let base = base as isize;
            let mut idx = [0usize; 4];
            let mut w = [0f64; 4];
            for t in 0..4 {
                let offset = t as isize - 1;
                idx[t] = (base + offset).clamp(0, last) as usize;
                w[t] = cubic_kernel(frac - offset as f64);
            }
            (idx, w)
        })
        .collect()
}

fn resize_axis0(input: ArrayView2<f64>, out_rows: usize) -> Array2<f64> {
    let taps = axis_taps(input.nrows(), out_rows);
    let mut out = Array2::zeros((out_rows, input.ncols()));
    for (r, (idx, w)) in taps.iter().enumerate() {
        let mut row = out.row_mut(r);
        for t in 0..4 {
            row.scaled_add(w[t], &input.row(idx[t]));
        }
    }
    out
}

/// Separable bicubic resize. Output values are real and not re-quantized.
pub fn resize_bicubic(frame: ArrayView2<f64>, out_rows: usize, out_cols: usize) -> Result<Array2<f64>> {
    if out_rows == 0 || out_cols == 0 {
        return Err(Error::Argument(format!(
            "resize target must be at least 1x1, got {out_rows}x{out_cols}"
        )));
    }
    if frame.nrows() < 2 || frame.ncols() < 2 {
        return Err(Error::Argument(format!(
            "resize input must be at least 2x2, got {}x{}",
            frame.nrows(),
            frame.ncols()
        )));
    }
    let rows_done = resize_axis0(frame, out_rows);
    let cols_done = resize_axis0(rows_done.t(), out_cols);
    Ok(cols_done.reversed_axes())
}

/// Convenience wrapper for 8-bit frames.
pub fn resize_frame_u8(frame: &Array2<u8>, out_rows: usize, out_cols: usize) -> Result<Array2<f64>> {
    resize_bicubic(frame.mapv(f64::from).view(), out_rows, out_cols)
}

/// Nearest source frame for each of `n_target` frames on a clock with period
/// `frame_shift`: `round((k * frame_shift - offset) * frame_rate)`, clamped.
pub fn resample_to_frame_clock(
    seq: &UltrasoundSequence,
    frame_shift: f64,
    n_target: usize,
) -> Result<Vec<usize>> {
    resample_indices(&seq.metadata, seq.len(), frame_shift, n_target)
}

/// Same mapping as [`resample_to_frame_clock`] from metadata and a frame count alone.
pub fn resample_indices(
    meta: &UltrasoundMetadata,
    n_frames: usize,
    frame_shift: f64,
    n_target: usize,
) -> Result<Vec<usize>> {
    if !(frame_shift > 0.0) {
        return Err(Error::Argument(format!("frame shift must be > 0, got {frame_shift}")));
    }
    if n_target == 0 {
        return Ok(Vec::new());
    }
    if n_frames == 0 {
        return Err(Error::Data("cannot resample an empty ultrasound sequence".into()));
    }
    let last = (n_frames - 1) as f64;
    Ok((0..n_target)
        .map(|k| {
            let t = k as f64 * frame_shift;
            let pos = ((t - meta.first_frame_offset) * meta.frame_rate).round();
            pos.clamp(0.0, last) as usize
        })
        .collect())
}
