//! Acoustic parameter streams and regression targets.
//!
//! Target rows are laid out as
//! `[mgc, d mgc, dd mgc | bap, d bap, dd bap | lf0, d lf0, dd lf0 | vuv]`,
//! 199 columns for the default 60 MGC + 5 BAP configuration.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::binio::Reader;
use crate::error::{Error, Result};

pub const MGC_DIM: usize = 60;
pub const BAP_DIM: usize = 5;
pub const FRAME_SHIFT: f64 = 0.005;
/// LF0 value written for unvoiced frames.
pub const LF0_UNVOICED: f64 = -1e10;
/// LF0 values at or below this are unvoiced.
pub const LF0_UNVOICED_THRESHOLD: f64 = -1e9;
pub const VUV_THRESHOLD: f64 = 0.5;
pub const MINMAX_RANGE: (f64, f64) = (0.01, 0.99);

const DELTA_WINDOW: [f64; 3] = [-0.5, 0.0, 0.5];
const ACC_WINDOW: [f64; 3] = [1.0, -2.0, 1.0];

/// Reads a headerless little-endian f32 matrix of the given width.
pub fn load_stream(bytes: &[u8], width: usize) -> Result<Array2<f64>> {
    if width == 0 {
        return Err(Error::Argument("stream width must be >= 1".into()));
    }
    let row_bytes = width * 4;
    if !bytes.len().is_multiple_of(row_bytes) {
        return Err(Error::Format(format!(
            "stream length {} is not a multiple of {row_bytes} bytes (width {width})",
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Array2::from_shape_vec((bytes.len() / row_bytes, width), data).expect("checked length"))
}

pub fn stream_to_bytes(m: ArrayView2<f64>) -> Vec<u8> {
    m.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

pub fn read_stream_file(path: &Path, width: usize) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    load_stream(&bytes, width).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_stream_file(path: &Path, m: ArrayView2<f64>) -> Result<()> {
    fs::write(path, stream_to_bytes(m)).map_err(|e| Error::io(path, e))
}

/// Static streams for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticStreams {
    pub mgc: Array2<f64>,
    pub bap: Array2<f64>,
    /// Log-F0 with [`LF0_UNVOICED`] on unvoiced frames.
    pub lf0: Array1<f64>,
    pub frame_shift: f64,
}

impl AcousticStreams {
    pub fn new(mgc: Array2<f64>, bap: Array2<f64>, lf0: Array1<f64>, frame_shift: f64) -> Result<Self> {
        if mgc.nrows() != bap.nrows() || mgc.nrows() != lf0.len() {
            return Err(Error::Data(format!(
                "stream lengths differ: mgc {}, bap {}, lf0 {}",
                mgc.nrows(),
                bap.nrows(),
                lf0.len()
            )));
        }
        if !(frame_shift > 0.0) {
            return Err(Error::Argument(format!("frame shift must be > 0, got {frame_shift}")));
        }
        Ok(Self {
            mgc,
            bap,
            lf0,
            frame_shift,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.lf0.len()
    }

    pub fn layout(&self) -> StreamLayout {
        StreamLayout::new(self.mgc.ncols(), self.bap.ncols())
    }

    pub fn vuv(&self) -> Array1<f64> {
        self.lf0.mapv(|v| if v > LF0_UNVOICED_THRESHOLD { 1.0 } else { 0.0 })
    }

    pub fn read(files: &StreamFiles, layout: StreamLayout, frame_shift: f64) -> Result<Self> {
        let mgc = read_stream_file(&files.mgc, layout.mgc_dim)?;
        let bap = read_stream_file(&files.bap, layout.bap_dim)?;
        let lf0 = read_stream_file(&files.lf0, 1)?.column(0).to_owned();
        Self::new(mgc, bap, lf0, frame_shift)
    }

    pub fn write(&self, files: &StreamFiles) -> Result<()> {
        write_stream_file(&files.mgc, self.mgc.view())?;
        write_stream_file(&files.bap, self.bap.view())?;
        write_stream_file(&files.lf0, self.lf0.view().insert_axis(Axis(1)))
    }
}

/// `<id>.mgc`, `<id>.bap` and `<id>.lf0` in one directory.
#[derive(Debug, Clone)]
pub struct StreamFiles {
    pub mgc: PathBuf,
    pub bap: PathBuf,
    pub lf0: PathBuf,
}

impl StreamFiles {
    pub fn in_dir(dir: &Path, id: &str) -> Self {
        Self {
            mgc: dir.join(format!("{id}.mgc")),
            bap: dir.join(format!("{id}.bap")),
            lf0: dir.join(format!("{id}.lf0")),
        }
    }
}

/// Column offsets of the stacked target vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamLayout {
    pub mgc_dim: usize,
    pub bap_dim: usize,
}

impl Default for StreamLayout {
    fn default() -> Self {
        Self::new(MGC_DIM, BAP_DIM)
    }
}

impl StreamLayout {
    pub fn new(mgc_dim: usize, bap_dim: usize) -> Self {
        Self { mgc_dim, bap_dim }
    }

    pub fn width(&self) -> usize {
        3 * (self.mgc_dim + self.bap_dim + 1) + 1
    }

    pub fn mgc(&self) -> std::ops::Range<usize> {
        0..3 * self.mgc_dim
    }

    pub fn bap(&self) -> std::ops::Range<usize> {
        let start = 3 * self.mgc_dim;
        start..start + 3 * self.bap_dim
    }

    pub fn lf0(&self) -> std::ops::Range<usize> {
        let start = 3 * (self.mgc_dim + self.bap_dim);
        start..start + 3
    }

    pub fn vuv(&self) -> usize {
        self.width() - 1
    }
}

/// Fills unvoiced gaps in log domain. Returns the continuous contour and the
/// voicing flags.
pub fn interpolate_lf0(lf0: ArrayView1<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
    if lf0.is_empty() {
        return Err(Error::Data("cannot interpolate an empty LF0 stream".into()));
    }
    let vuv = lf0.mapv(|v| if v > LF0_UNVOICED_THRESHOLD { 1.0 } else { 0.0 });
    let voiced: Vec<usize> = (0..lf0.len()).filter(|&i| vuv[i] == 1.0).collect();
    let Some((&first, &last)) = voiced.first().zip(voiced.last()) else {
        return Ok((Array1::from_elem(lf0.len(), 100f64.ln()), vuv));
    };
    let mut out = lf0.to_owned();
    for i in 0..first {
        out[i] = lf0[first];
    }
    for i in last + 1..lf0.len() {
        out[i] = lf0[last];
    }
    for pair in voiced.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let span = (b - a) as f64;
        for i in a + 1..b {
            let t = (i - a) as f64 / span;
            out[i] = lf0[a] + t * (lf0[b] - lf0[a]);
        }
    }
    Ok((out, vuv))
}

/// `[static | delta | delta-delta]`, edge frames replicated.
pub fn compute_deltas(stream: ArrayView2<f64>) -> Array2<f64> {
    let (n, w) = stream.dim();
    let mut out = Array2::zeros((n, 3 * w));
    out.slice_mut(s![.., ..w]).assign(&stream);
    if n == 0 {
        return out;
    }
    for t in 0..n {
        let prev = stream.row(t.saturating_sub(1));
        let cur = stream.row(t);
        let next = stream.row((t + 1).min(n - 1));
        for d in 0..w {
            out[[t, w + d]] = DELTA_WINDOW[0] * prev[d] + DELTA_WINDOW[1] * cur[d] + DELTA_WINDOW[2] * next[d];
            out[[t, 2 * w + d]] = ACC_WINDOW[0] * prev[d] + ACC_WINDOW[1] * cur[d] + ACC_WINDOW[2] * next[d];
        }
    }
    out
}

/// Regression targets for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticTargetSequence {
    pub frames: Array2<f64>,
    pub layout: StreamLayout,
}

pub fn build_targets(streams: &AcousticStreams) -> Result<AcousticTargetSequence> {
    let layout = streams.layout();
    let n = streams.n_frames();
    let (lf0, vuv) = interpolate_lf0(streams.lf0.view())?;
    let mut frames = Array2::zeros((n, layout.width()));
    frames
        .slice_mut(s![.., layout.mgc()])
        .assign(&compute_deltas(streams.mgc.view()));
    frames
        .slice_mut(s![.., layout.bap()])
        .assign(&compute_deltas(streams.bap.view()));
    frames
        .slice_mut(s![.., layout.lf0()])
        .assign(&compute_deltas(lf0.view().insert_axis(Axis(1))));
    frames.column_mut(layout.vuv()).assign(&vuv);
    Ok(AcousticTargetSequence { frames, layout })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    MinMax,
    MeanVariance,
}

/// Per-column affine normalization. For min-max, `(a, b)` are `(min, max)`;
/// for mean-variance they are `(mean, stddev)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub kind: NormKind,
    pub a: Array1<f64>,
    pub b: Array1<f64>,
    pub constant: Vec<bool>,
}

const NORM_MAGIC: &[u8; 4] = b"NRMS";
const NORM_VERSION: u32 = 1;

impl NormalizationStats {
    pub fn fit(data: ArrayView2<f64>, kind: NormKind) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::Data("cannot fit normalization on empty data".into()));
        }
        let cols = data.ncols();
        let mut a = Array1::zeros(cols);
        let mut b = Array1::zeros(cols);
        let mut constant = vec![false; cols];
        for (c, col) in data.columns().into_iter().enumerate() {
            match kind {
                NormKind::MinMax => {
                    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    a[c] = lo;
                    b[c] = hi;
                    constant[c] = hi - lo <= f64::EPSILON * lo.abs().max(hi.abs()).max(1.0);
                }
                NormKind::MeanVariance => {
                    let n = col.len() as f64;
                    let mean = col.sum() / n;
                    let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let std = var.sqrt();
                    a[c] = mean;
                    b[c] = std;
                    constant[c] = std <= 1e-12 * mean.abs().max(1.0);
                }
            }
        }
        Ok(Self { kind, a, b, constant })
    }

    /// Fits on the row-wise concatenation of several matrices.
    pub fn fit_many<'a>(parts: impl IntoIterator<Item = ArrayView2<'a, f64>>, kind: NormKind) -> Result<Self> {
        let parts: Vec<_> = parts.into_iter().collect();
        if parts.is_empty() {
            return Err(Error::Data("cannot fit normalization on empty data".into()));
        }
        let stacked = ndarray::concatenate(Axis(0), &parts)
            .map_err(|e| Error::Data(format!("inconsistent feature widths: {e}")))?;
        Self::fit(stacked.view(), kind)
    }

    pub fn width(&self) -> usize {
        self.a.len()
    }

    fn check_width(&self, data: &ArrayView2<f64>) -> Result<()> {
        if data.ncols() != self.width() {
            return Err(Error::Argument(format!(
                "data width {} does not match normalization width {}",
                data.ncols(),
                self.width()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, data: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_width(&data)?;
        let (lo_t, hi_t) = MINMAX_RANGE;
        let mut out = data.to_owned();
        for (c, mut col) in out.columns_mut().into_iter().enumerate() {
            let (a, b) = (self.a[c], self.b[c]);
            match (self.kind, self.constant[c]) {
                (NormKind::MinMax, true) => col.fill(0.5),
                (NormKind::MinMax, false) => {
                    let scale = (hi_t - lo_t) / (b - a);
                    col.mapv_inplace(|v| lo_t + (v - a) * scale)
                }
                (NormKind::MeanVariance, true) => col.fill(0.0),
                (NormKind::MeanVariance, false) => col.mapv_inplace(|v| (v - a) / b),
            }
        }
        Ok(out)
    }

    /// Inverse map; constant columns return their fitted value.
    pub fn invert(&self, data: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_width(&data)?;
        let (lo_t, hi_t) = MINMAX_RANGE;
        let mut out = data.to_owned();
        for (c, mut col) in out.columns_mut().into_iter().enumerate() {
            let (a, b) = (self.a[c], self.b[c]);
            match (self.kind, self.constant[c]) {
                (_, true) => col.fill(a),
                (NormKind::MinMax, false) => {
                    let scale = (b - a) / (hi_t - lo_t);
                    col.mapv_inplace(|v| a + (v - lo_t) * scale)
                }
                (NormKind::MeanVariance, false) => col.mapv_inplace(|v| v * b + a),
            }
        }
        Ok(out)
    }

    /// Per-column variances for MLPG; constant columns get 1.
    pub fn variances(&self) -> Result<Array1<f64>> {
        if self.kind != NormKind::MeanVariance {
            return Err(Error::Argument("variances need mean-variance statistics".into()));
        }
        Ok(Array1::from_shape_fn(self.width(), |c| {
            if self.constant[c] {
                1.0
            } else {
                self.b[c] * self.b[c]
            }
        }))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(NORM_MAGIC);
        out.extend_from_slice(&NORM_VERSION.to_le_bytes());
        out.push(match self.kind {
            NormKind::MinMax => 0,
            NormKind::MeanVariance => 1,
        });
        out.extend_from_slice(&(self.width() as u64).to_le_bytes());
        for v in self.a.iter().chain(self.b.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(self.constant.iter().map(|&c| c as u8));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != NORM_MAGIC {
            return Err(Error::Format("not a normalization file".into()));
        }
        let version = r.u32()?;
        if version != NORM_VERSION {
            return Err(Error::Format(format!("unsupported normalization version {version}")));
        }
        let kind = match r.take(1)?[0] {
            0 => NormKind::MinMax,
            1 => NormKind::MeanVariance,
            k => return Err(Error::Format(format!("unknown normalization kind {k}"))),
        };
        let w = r.u64()? as usize;
        let a = Array1::from(r.f64_vec(w)?);
        let b = Array1::from(r.f64_vec(w)?);
        let constant = r.take(w)?.iter().map(|&c| c != 0).collect();
        r.finish()?;
        Ok(Self { kind, a, b, constant })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Symmetric banded matrix, lower band stored as `band[i][k] = A(i, i - k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedSym {
    pub n: usize,
    pub bandwidth: usize,
    band: Vec<Vec<f64>>,
}

impl BandedSym {
    pub fn zeros(n: usize, bandwidth: usize) -> Self {
        Self {
            n,
            bandwidth,
            band: vec![vec![0.0; bandwidth + 1]; n],
        }
    }

    /// Entry `(i, j)`; zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bandwidth {
            0.0
        } else {
            self.band[i][i - j]
        }
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        self.band[i][i - j] += v;
    }

    /// In-band Cholesky factor; fails when the matrix is not positive definite.
    pub fn cholesky(&self) -> Result<BandedCholesky> {
        let p = self.bandwidth;
        let mut l = vec![vec![0.0; p + 1]; self.n];
        for i in 0..self.n {
            for k in (0..=p.min(i)).rev() {
                let j = i - k;
                let mut sum = self.band[i][k];
                let lo = i.saturating_sub(p);
                for m in lo..j {
                    // L(i, m) * L(j, m), both within band since j - m < p
                    sum -= l[i][i - m] * l[j][j - m];
                }
                if k == 0 {
                    if !(sum > 0.0) {
                        return Err(Error::Argument(format!(
                            "matrix not positive definite at row {i}"
                        )));
                    }
                    l[i][0] = sum.sqrt();
                } else {
                    l[i][k] = sum / l[j][0];
                }
            }
        }
        Ok(BandedCholesky { n: self.n, bandwidth: p, l })
    }
}

#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    bandwidth: usize,
    l: Vec<Vec<f64>>,
}

impl BandedCholesky {
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let p = self.bandwidth;
        let mut y = rhs.to_vec();
        for i in 0..self.n {
            for m in i.saturating_sub(p)..i {
                y[i] -= self.l[i][i - m] * y[m];
            }
            y[i] /= self.l[i][0];
        }
        for i in (0..self.n).rev() {
            for m in i + 1..(i + p + 1).min(self.n) {
                y[i] -= self.l[m][m - i] * y[m];
            }
            y[i] /= self.l[i][0];
        }
        y
    }
}

/// Window rows as (frame index, coefficient) lists, edges folded by replication.
fn window_rows(n: usize, t: usize) -> [[(usize, f64); 3]; 3] {
    let prev = t.saturating_sub(1);
    let next = (t + 1).min(n - 1);
    [
        [(t, 1.0), (t, 0.0), (t, 0.0)],
        [(prev, DELTA_WINDOW[0]), (t, DELTA_WINDOW[1]), (next, DELTA_WINDOW[2])],
        [(prev, ACC_WINDOW[0]), (t, ACC_WINDOW[1]), (next, ACC_WINDOW[2])],
    ]
}

/// Normal equations `(W' S^-1 W) c = W' S^-1 mu` for one static dimension.
/// `means` is n x 3 (static, delta, delta-delta) and `variances` has length 3.
pub fn mlpg_normal_equations(means: ArrayView2<f64>, variances: [f64; 3]) -> (BandedSym, Vec<f64>) {
    let n = means.nrows();
    let mut a = BandedSym::zeros(n, 2);
    let mut b = vec![0.0; n];
    for t in 0..n {
        for (win, row) in window_rows(n, t).iter().enumerate() {
            let prec = 1.0 / variances[win];
            for &(i, ci) in row {
                if ci == 0.0 {
                    continue;
                }
                b[i] += prec * ci * means[[t, win]];
                for &(j, cj) in row {
                    // ordered tap pairs; the lower triangle collects each (i, j) once
                    if cj != 0.0 && j <= i {
                        a.add(i, j, prec * ci * cj);
                    }
                }
            }
        }
    }
    (a, b)
}

/// Maximum-likelihood static trajectory from `[static | delta | delta-delta]`
/// means (n x 3w) and per-column variances (3w).
pub fn mlpg(means: ArrayView2<f64>, variances: ArrayView1<f64>) -> Result<Array2<f64>> {
    let (n, cols) = means.dim();
    if cols % 3 != 0 {
        return Err(Error::Argument(format!("MLPG input width {cols} is not a multiple of 3")));
    }
    if variances.len() != cols {
        return Err(Error::Argument(format!(
            "variance length {} does not match width {cols}",
            variances.len()
        )));
    }
    if let Some(v) = variances.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Argument(format!("MLPG variances must be > 0, got {v}")));
    }
    let w = cols / 3;
    let mut out = Array2::zeros((n, w));
    if n == 0 {
        return Ok(out);
    }
    for d in 0..w {
        let cols3 = [d, w + d, 2 * w + d];
        let mut m = Array2::zeros((n, 3));
        for (k, &c) in cols3.iter().enumerate() {
            m.column_mut(k).assign(&means.column(c));
        }
        let vars = [variances[cols3[0]], variances[cols3[1]], variances[cols3[2]]];
        let (a, b) = mlpg_normal_equations(m.view(), vars);
        let c = a.cholesky()?.solve(&b);
        out.column_mut(d).assign(&Array1::from(c));
    }
    Ok(out)
}
