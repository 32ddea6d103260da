//! Objective measures between reference and generated acoustic streams:
//! mel-cepstral distortion, band-aperiodicity distortion, F0 RMSE,
//! F0 correlation and voicing error. No time warping is applied; streams
//! must have equal length.
//!
//! Per-utterance scores keep sufficient statistics so that aggregation is
//! identical to recomputing every metric over the pooled frames.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{ArrayView1, ArrayView2};

use crate::acoustic::{AcousticStreams, LF0_UNVOICED_THRESHOLD};
use crate::error::{Error, Result};
use crate::pipeline::{Split, System};

/// `10 / ln 10`
pub const MCD_SCALE: f64 = std::f64::consts::LOG10_E * 10.0;
/// BAP distortion is the MCD formula divided by this.
pub const BAP_SCALE_DIVISOR: f64 = 10.0;

fn check_shapes(a: &ArrayView2<f64>, b: &ArrayView2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Argument(format!(
            "{what} shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Sum over frames of `(10 / ln 10) * sqrt(2 * sum_d (a_d - b_d)^2)`, skipping the first `skip` columns.
fn distortion_sum(a: ArrayView2<f64>, b: ArrayView2<f64>, skip: usize) -> f64 {
    a.rows()
        .into_iter()
        .zip(b.rows())
        .map(|(ra, rb)| {
            let sq: f64 = ra
                .iter()
                .zip(rb.iter())
                .skip(skip)
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            MCD_SCALE * (2.0 * sq).sqrt()
        })
        .sum()
}

fn mean_or_zero(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Mean frame-wise mel-cepstral distortion in dB, excluding coefficient 0.
pub fn mcd(reference: ArrayView2<f64>, predicted: ArrayView2<f64>) -> Result<f64> {
    check_shapes(&reference, &predicted, "MGC")?;
    let sum: f64 = distortion_sum(reference, predicted, 1);
    Ok(mean_or_zero(sum, reference.nrows()))
}

/// MCD-style distortion over all band aperiodicities, divided by 10.
pub fn bap_distortion(reference: ArrayView2<f64>, predicted: ArrayView2<f64>) -> Result<f64> {
    check_shapes(&reference, &predicted, "BAP")?;
    let sum: f64 = distortion_sum(reference, predicted, 0);
    Ok(mean_or_zero(sum, reference.nrows()) / BAP_SCALE_DIVISOR)
}

/// Streaming moments of paired F0 values (Hz) on commonly voiced frames.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct F0Moments {
    pub n: usize,
    pub mean_ref: f64,
    pub mean_pred: f64,
    pub m2_ref: f64,
    pub m2_pred: f64,
    pub co_moment: f64,
    pub sse: f64,
}

impl F0Moments {
    pub fn push(&mut self, r: f64, p: f64) {
        self.n += 1;
        let n = self.n as f64;
        let dr = r - self.mean_ref;
        let dp = p - self.mean_pred;
        self.mean_ref += dr / n;
        self.mean_pred += dp / n;
        self.m2_ref += dr * (r - self.mean_ref);
        self.m2_pred += dp * (p - self.mean_pred);
        self.co_moment += dr * (p - self.mean_pred);
        self.sse += (r - p) * (r - p);
    }

    /// Exact pairwise combination of two moment sets.
    pub fn merge(&self, other: &F0Moments) -> F0Moments {
        if self.n == 0 {
            return *other;
        }
        if other.n == 0 {
            return *self;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let dr = other.mean_ref - self.mean_ref;
        let dp = other.mean_pred - self.mean_pred;
        F0Moments {
            n: self.n + other.n,
            mean_ref: self.mean_ref + dr * nb / n,
            mean_pred: self.mean_pred + dp * nb / n,
            m2_ref: self.m2_ref + other.m2_ref + dr * dr * na * nb / n,
            m2_pred: self.m2_pred + other.m2_pred + dp * dp * na * nb / n,
            co_moment: self.co_moment + other.co_moment + dr * dp * na * nb / n,
            sse: self.sse + other.sse,
        }
    }

    /// RMSE in Hz, NaN when no frame is voiced in both streams.
    pub fn rmse(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            (self.sse / self.n as f64).sqrt()
        }
    }

    /// Pearson correlation, NaN when undefined.
    pub fn corr(&self) -> f64 {
        if self.n == 0 || !(self.m2_ref > 0.0) || !(self.m2_pred > 0.0) {
            return f64::NAN;
        }
        (self.co_moment / (self.m2_ref * self.m2_pred).sqrt()).clamp(-1.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F0Metrics {
    pub rmse_hz: f64,
    pub corr: f64,
    pub vuv_error_pct: f64,
    pub n_voiced_both: usize,
}

fn f0_moments(
    ref_lf0: ArrayView1<f64>,
    ref_vuv: ArrayView1<f64>,
    pred_lf0: ArrayView1<f64>,
    pred_vuv: ArrayView1<f64>,
) -> Result<(F0Moments, usize)> {
    let n = ref_lf0.len();
    if ref_vuv.len() != n || pred_lf0.len() != n || pred_vuv.len() != n {
        return Err(Error::Argument(format!(
            "F0 stream lengths differ: {n}, {}, {}, {}",
            ref_vuv.len(),
            pred_lf0.len(),
            pred_vuv.len()
        )));
    }
    let mut moments = F0Moments::default();
    let mut mismatches = 0;
    for i in 0..n {
        let rv = ref_vuv[i] > 0.5;
        let pv = pred_vuv[i] > 0.5;
        if rv != pv {
            mismatches += 1;
        }
        if rv && pv {
            moments.push(ref_lf0[i].exp(), pred_lf0[i].exp());
        }
    }
    Ok((moments, mismatches))
}

/// F0 RMSE (Hz) and correlation over frames voiced in both streams, plus the
/// percentage of frames whose voicing decisions differ.
pub fn f0_metrics(
    ref_lf0: ArrayView1<f64>,
    ref_vuv: ArrayView1<f64>,
    pred_lf0: ArrayView1<f64>,
    pred_vuv: ArrayView1<f64>,
) -> Result<F0Metrics> {
    let (m, mismatches) = f0_moments(ref_lf0, ref_vuv, pred_lf0, pred_vuv)?;
    let n = ref_lf0.len();
    Ok(F0Metrics {
        rmse_hz: m.rmse(),
        corr: m.corr(),
        vuv_error_pct: if n == 0 { f64::NAN } else { 100.0 * mismatches as f64 / n as f64 },
        n_voiced_both: m.n,
    })
}

/// Sufficient statistics for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceScores {
    pub id: String,
    pub n_frames: usize,
    pub mcd_sum: f64,
    pub bap_sum: f64,
    pub vuv_mismatches: usize,
    pub f0: F0Moments,
}

impl UtteranceScores {
    pub fn mcd_db(&self) -> f64 {
        mean_or_zero(self.mcd_sum, self.n_frames)
    }

    pub fn bap_db(&self) -> f64 {
        mean_or_zero(self.bap_sum, self.n_frames) / BAP_SCALE_DIVISOR
    }

    pub fn vuv_error_pct(&self) -> f64 {
        if self.n_frames == 0 {
            f64::NAN
        } else {
            100.0 * self.vuv_mismatches as f64 / self.n_frames as f64
        }
    }
}

/// Scores one utterance. Voicing of the reference comes from its LF0
/// sentinel; the prediction's from `pred_vuv`.
pub fn score_utterance(
    id: &str,
    reference: &AcousticStreams,
    predicted: &AcousticStreams,
    pred_vuv: ArrayView1<f64>,
) -> Result<UtteranceScores> {
    check_shapes(&reference.mgc.view(), &predicted.mgc.view(), "MGC")?;
    check_shapes(&reference.bap.view(), &predicted.bap.view(), "BAP")?;
    let ref_vuv = reference.lf0.mapv(|v| if v > LF0_UNVOICED_THRESHOLD { 1.0 } else { 0.0 });
    let (f0, vuv_mismatches) = f0_moments(reference.lf0.view(), ref_vuv.view(), predicted.lf0.view(), pred_vuv)?;
    Ok(UtteranceScores {
        id: id.to_string(),
        n_frames: reference.n_frames(),
        mcd_sum: distortion_sum(reference.mgc.view(), predicted.mgc.view(), 1),
        bap_sum: distortion_sum(reference.bap.view(), predicted.bap.view(), 0),
        vuv_mismatches,
        f0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub mcd_db: f64,
    pub bap_db: f64,
    pub f0_rmse_hz: f64,
    pub f0_corr: f64,
    pub vuv_error_pct: f64,
    pub n_frames: usize,
    pub n_voiced_both: usize,
    pub split: Split,
    pub system: System,
}

/// Pools utterance statistics: frame-weighted MCD, BAP and voicing error,
/// and F0 RMSE / correlation over all commonly voiced frames.
pub fn aggregate(scores: &[UtteranceScores], split: Split, system: System) -> Result<EvaluationReport> {
    if scores.is_empty() {
        return Err(Error::Data("no utterance scores to aggregate".into()));
    }
    let n_frames: usize = scores.iter().map(|s| s.n_frames).sum();
    let mcd_sum: f64 = scores.iter().map(|s| s.mcd_sum).sum();
    let bap_sum: f64 = scores.iter().map(|s| s.bap_sum).sum();
    let mismatches: usize = scores.iter().map(|s| s.vuv_mismatches).sum();
    let f0 = scores.iter().fold(F0Moments::default(), |acc, s| acc.merge(&s.f0));
    Ok(EvaluationReport {
        mcd_db: mean_or_zero(mcd_sum, n_frames),
        bap_db: mean_or_zero(bap_sum, n_frames) / BAP_SCALE_DIVISOR,
        f0_rmse_hz: f0.rmse(),
        f0_corr: f0.corr(),
        vuv_error_pct: if n_frames == 0 {
            f64::NAN
        } else {
            100.0 * mismatches as f64 / n_frames as f64
        },
        n_frames,
        n_voiced_both: f0.n,
        split,
        system,
    })
}

pub const REPORT_HEADER: &str = "# MCD excludes c0; BAP = MCD formula over all bands / 10; F0 in Hz on frames voiced in both; NaN = undefined\n";

/// One report row, keyed by speaker and generation mode (`mlpg` or `static`).
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub speaker: String,
    pub generation: String,
    pub report: EvaluationReport,
}

fn fmt_metric(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:.6}")
    }
}

pub fn reports_to_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push_str("speaker,system,split,generation,mcd_db,bap_db,f0_rmse_hz,f0_corr,vuv_error_pct,n_frames,n_voiced_both\n");
    for r in rows {
        let e = &r.report;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.speaker,
            e.system,
            e.split,
            r.generation,
            fmt_metric(e.mcd_db),
            fmt_metric(e.bap_db),
            fmt_metric(e.f0_rmse_hz),
            fmt_metric(e.f0_corr),
            fmt_metric(e.vuv_error_pct),
            e.n_frames,
            e.n_voiced_both
        );
    }
    out
}

pub fn utterance_scores_to_csv(system: System, split: Split, generation: &str, scores: &[UtteranceScores]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push_str("id,system,split,generation,mcd_db,bap_db,f0_rmse_hz,f0_corr,vuv_error_pct,n_frames,n_voiced_both\n");
    for s in scores {
        let _ = writeln!(
            out,
            "{},{system},{split},{generation},{},{},{},{},{},{},{}",
            s.id,
            fmt_metric(s.mcd_db()),
            fmt_metric(s.bap_db()),
            fmt_metric(s.f0.rmse()),
            fmt_metric(s.f0.corr()),
            fmt_metric(s.vuv_error_pct()),
            s.n_frames,
            s.f0.n
        );
    }
    out
}

/// Text tables, one per metric: speakers as rows, systems as columns,
/// each cell `dev / test`. Only rows with the given generation mode are used.
pub fn format_tables(rows: &[ReportRow], generation: &str) -> String {
    type Cell = BTreeMap<Split, f64>;
    type Metric = (&'static str, fn(&EvaluationReport) -> f64, usize);
    let metrics: [Metric; 5] = [
        ("MCD (dB)", |e| e.mcd_db, 3),
        ("BAP (dB)", |e| e.bap_db, 3),
        ("F0-RMSE (Hz)", |e| e.f0_rmse_hz, 3),
        ("F0-CORR", |e| e.f0_corr, 3),
        ("F0-VUV (%)", |e| e.vuv_error_pct, 3),
    ];
    let mut speakers: Vec<&str> = Vec::new();
    for r in rows.iter().filter(|r| r.generation == generation) {
        if !speakers.contains(&r.speaker.as_str()) {
            speakers.push(&r.speaker);
        }
    }
    let mut out = String::new();
    let _ = writeln!(out, "{}", REPORT_HEADER.trim_end());
    let _ = writeln!(out, "# generation: {generation}; cells are dev / test");
    for (title, get, prec) in metrics {
        let _ = writeln!(out, "\n{title}");
        let mut header = format!("{:<10}", "Spkr");
        for sys in System::ALL {
            let _ = write!(header, " | {:>19}", sys.to_string());
        }
        let _ = writeln!(out, "{header}");
        let _ = writeln!(out, "{}", "-".repeat(header.len()));
        for spk in &speakers {
            let mut line = format!("{spk:<10}");
            for sys in System::ALL {
                let mut cell: Cell = BTreeMap::new();
                for r in rows.iter().filter(|r| {
                    r.generation == generation && r.speaker == *spk && r.report.system == sys
                }) {
                    cell.insert(r.report.split, get(&r.report));
                }
                let show = |split: Split| match cell.get(&split) {
                    Some(v) if v.is_nan() => "NaN".to_string(),
                    Some(v) => format!("{v:.prec$}"),
                    None => "-".to_string(),
                };
                let _ = write!(line, " | {:>19}", format!("{} / {}", show(Split::Dev), show(Split::Test)));
            }
            let _ = writeln!(out, "{line}");
        }
    }
    out
}
