//! Transducer misalignment across a recording session: pairwise MSE between
//! per-utterance mean images, in recording order.

use std::fmt::Write as _;
use std::ops::Range;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::ultra_io::UltrasoundSequence;

/// Pixel-wise mean over all frames of an utterance.
pub fn mean_image(seq: &UltrasoundSequence) -> Result<Array2<f64>> {
    let first = seq
        .frames
        .first()
        .ok_or_else(|| Error::Data("cannot average an empty ultrasound sequence".into()))?;
    let mut acc = Array2::<f64>::zeros(first.dim());
    for frame in &seq.frames {
        acc.zip_mut_with(frame, |a, &p| *a += f64::from(p));
    }
    acc /= seq.frames.len() as f64;
    Ok(acc)
}

pub fn mse(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Argument(format!(
            "image dimensions differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if a.is_empty() {
        return Err(Error::Argument("empty images".into()));
    }
    let sum: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

/// n x n pairwise MSE; the diagonal holds NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct MisalignmentMatrix {
    pub values: Array2<f64>,
    pub utterance_ids: Vec<String>,
}

impl MisalignmentMatrix {
    pub fn len(&self) -> usize {
        self.utterance_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterance_ids.is_empty()
    }

    /// Empty cells on the diagonal.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id");
        for id in &self.utterance_ids {
            let _ = write!(out, ",{id}");
        }
        out.push('\n');
        for (i, id) in self.utterance_ids.iter().enumerate() {
            out.push_str(id);
            for j in 0..self.len() {
                let v = self.values[[i, j]];
                if v.is_nan() {
                    out.push(',');
                } else {
                    let _ = write!(out, ",{v}");
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Pairwise MSE over `(id, mean image)` pairs in recording order. Each
/// unordered pair is computed once and mirrored.
pub fn build_matrix(session: &[(String, Array2<f64>)]) -> Result<MisalignmentMatrix> {
    if session.len() < 2 {
        return Err(Error::Data(format!(
            "misalignment matrix needs at least 2 utterances, got {}",
            session.len()
        )));
    }
    let dim = session[0].1.dim();
    if let Some((id, img)) = session.iter().find(|(_, img)| img.dim() != dim) {
        return Err(Error::Data(format!(
            "utterance {id} has image size {:?}, expected {dim:?}",
            img.dim()
        )));
    }
    let n = session.len();
    let mut values = Array2::from_elem((n, n), f64::NAN);
    for i in 0..n {
        for j in i + 1..n {
            let v = mse(session[i].1.view(), session[j].1.view())?;
            values[[i, j]] = v;
            values[[j, i]] = v;
        }
    }
    Ok(MisalignmentMatrix {
        values,
        utterance_ids: session.iter().map(|(id, _)| id.clone()).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockSummary {
    /// Mean off-diagonal MSE among training utterances.
    pub within_train: f64,
    /// Mean MSE between training and dev+test utterances.
    pub train_vs_heldout: f64,
    /// `train_vs_heldout / within_train`; 1 when both are 0.
    pub score: f64,
}

impl BlockSummary {
    pub fn to_text(&self) -> String {
        format!(
            "within_train_mse = {}\ntrain_vs_heldout_mse = {}\nmisalignment_score = {}\n",
            self.within_train, self.train_vs_heldout, self.score
        )
    }
}

/// Summarizes train-vs-held-out drift. The three ranges must partition `0..n`.
pub fn block_summary(
    matrix: &MisalignmentMatrix,
    train: Range<usize>,
    dev: Range<usize>,
    test: Range<usize>,
) -> Result<BlockSummary> {
    let n = matrix.len();
    if train.start != 0 || train.end != dev.start || dev.end != test.start || test.end != n {
        return Err(Error::Argument(format!(
            "blocks {train:?}, {dev:?}, {test:?} do not partition 0..{n}"
        )));
    }
    let heldout = dev.start..test.end;
    let mut within = (0.0, 0usize);
    for i in train.clone() {
        for j in train.clone().filter(|&j| j != i) {
            within.0 += matrix.values[[i, j]];
            within.1 += 1;
        }
    }
    let mut cross = (0.0, 0usize);
    for i in train.clone() {
        for j in heldout.clone() {
            cross.0 += matrix.values[[i, j]];
            cross.1 += 1;
        }
    }
    if within.1 == 0 || cross.1 == 0 {
        return Err(Error::Data(format!(
            "empty block: {} within-train pairs, {} cross pairs",
            within.1, cross.1
        )));
    }
    let within_train = within.0 / within.1 as f64;
    let train_vs_heldout = cross.0 / cross.1 as f64;
    let score = if within_train == 0.0 && train_vs_heldout == 0.0 {
        1.0
    } else {
        train_vs_heldout / within_train
    };
    Ok(BlockSummary {
        within_train,
        train_vs_heldout,
        score,
    })
}

const NAN_COLOR: [u8; 3] = [128, 128, 128];
/// Low values blue, high values yellow.
const COLOR_STOPS: [[f64; 3]; 5] = [
    [48.0, 18.0, 160.0],
    [33.0, 102.0, 200.0],
    [32.0, 170.0, 150.0],
    [140.0, 205.0, 70.0],
    [250.0, 230.0, 35.0],
];

fn color_for(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * (COLOR_STOPS.len() - 1) as f64;
    let lo = (t.floor() as usize).min(COLOR_STOPS.len() - 2);
    let frac = t - lo as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        let v = COLOR_STOPS[lo][c] + frac * (COLOR_STOPS[lo + 1][c] - COLOR_STOPS[lo][c]);
        out[c] = v.round() as u8;
    }
    out
}

/// Binary PPM (P6) with `cell` x `cell` pixels per matrix entry.
pub fn render_heatmap(matrix: &MisalignmentMatrix, cell: usize) -> Vec<u8> {
    let cell = cell.max(1);
    let n = matrix.len();
    let finite = matrix.values.iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let side = n * cell;
    let mut out = format!("P6\n{side} {side}\n255\n").into_bytes();
    out.reserve(side * side * 3);
    for i in 0..n {
        let row: Vec<[u8; 3]> = (0..n)
            .map(|j| {
                let v = matrix.values[[i, j]];
                if !v.is_finite() {
                    NAN_COLOR
                } else if hi > lo {
                    color_for((v - lo) / (hi - lo))
                } else {
                    color_for(0.0)
                }
            })
            .collect();
        for _ in 0..cell {
            for px in &row {
                for _ in 0..cell {
                    out.extend_from_slice(px);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ultra_io::UltrasoundMetadata;

    fn constant(v: f64) -> Array2<f64> {
        Array2::from_elem((3, 4), v)
    }

    fn session(values: &[f64]) -> Vec<(String, Array2<f64>)> {
        values.iter().enumerate().map(|(i, &v)| (format!("u{i:03}"), constant(v))).collect()
    }

    #[test]
    fn mean_of_constant_frames() {
        let meta = UltrasoundMetadata::new(3, 4, 81.5, 0.0).unwrap();
        let seq = UltrasoundSequence {
            metadata: meta,
            frames: vec![Array2::from_elem((3, 4), 10u8), Array2::from_elem((3, 4), 20u8)],
        };
        assert_eq!(mean_image(&seq).unwrap(), constant(15.0));
        let single = UltrasoundSequence {
            metadata: meta,
            frames: vec![Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as u8)],
        };
        assert_eq!(mean_image(&single).unwrap(), single.frames[0].mapv(f64::from));
        let empty = UltrasoundSequence { metadata: meta, frames: vec![] };
        assert!(matches!(mean_image(&empty), Err(Error::Data(_))));
    }

    #[test]
    fn mse_basics() {
        assert_eq!(mse(constant(3.0).view(), constant(3.0).view()).unwrap(), 0.0);
        assert_eq!(mse(constant(0.0).view(), constant(10.0).view()).unwrap(), 100.0);
        assert!(matches!(
            mse(constant(0.0).view(), Array2::zeros((4, 3)).view()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn three_constant_utterances() {
        let m = build_matrix(&session(&[0.0, 10.0, 20.0])).unwrap();
        assert_eq!(m.values[[0, 1]], 100.0);
        assert_eq!(m.values[[0, 2]], 400.0);
        assert_eq!(m.values[[1, 2]], 100.0);
        assert!((0..3).all(|i| m.values[[i, i]].is_nan()));
    }

    #[test]
    fn identical_pair() {
        let m = build_matrix(&session(&[5.0, 5.0])).unwrap();
        assert_eq!(m.values[[0, 1]], 0.0);
        assert!(m.values[[0, 0]].is_nan());
    }

    #[test]
    fn inconsistent_dims_name_utterance() {
        let mut s = session(&[1.0, 2.0, 3.0]);
        s[2].1 = Array2::zeros((2, 2));
        let err = build_matrix(&s).unwrap_err();
        assert!(err.to_string().contains("u002"), "{err}");
        assert!(build_matrix(&session(&[1.0])).is_err());
    }

    #[test]
    fn homogeneous_session_scores_one() {
        let m = build_matrix(&session(&[7.0; 10])).unwrap();
        let s = block_summary(&m, 0..8, 8..9, 9..10).unwrap();
        assert_eq!((s.within_train, s.train_vs_heldout, s.score), (0.0, 0.0, 1.0));
    }

    #[test]
    fn bad_blocks() {
        let m = build_matrix(&session(&[1.0, 2.0, 3.0])).unwrap();
        assert!(block_summary(&m, 0..1, 1..2, 2..3).is_err());
        assert!(block_summary(&m, 0..2, 2..2, 2..2).is_err());
        assert!(block_summary(&m, 0..2, 2..3, 2..3).is_err());
    }

    #[test]
    fn csv_has_empty_diagonal() {
        let m = build_matrix(&session(&[0.0, 10.0])).unwrap();
        assert_eq!(m.to_csv(), "id,u000,u001\nu000,,100\nu001,100,\n");
    }

    #[test]
    fn heatmap_geometry() {
        let m = build_matrix(&session(&[0.0, 10.0])).unwrap();
        let img = render_heatmap(&m, 3);
        let header = b"P6\n6 6\n255\n";
        assert_eq!(&img[..header.len()], header);
        assert_eq!(img.len(), header.len() + 6 * 6 * 3);
        let px = |x: usize, y: usize| &img[header.len() + (y * 6 + x) * 3..][..3];
        assert_eq!(px(0, 0), NAN_COLOR);
        assert_eq!(px(4, 0), px(0, 4));
        assert_ne!(px(4, 0), NAN_COLOR);
    }
}
