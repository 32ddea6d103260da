//! Full-context labels, HTS-style question sets and frame-level linguistic
//! features.
//!
//! Each frame gets the binary answers and numeric values of the label that
//! covers it, followed by four positional features derived from the label's
//! frame span. An empty question set yields the positional features alone.

use std::collections::HashSet;
use std::sync::OnceLock;

use ndarray::Array2;
use regex::Regex;

use crate::error::{Error, Result};

/// HTS label times are in 100 ns units.
pub const TICKS_PER_SECOND: f64 = 1e7;
pub const NUMERIC_ABSENT: f64 = -1.0;
pub const N_POSITIONAL: usize = 4;
pub const POSITIONAL_NAMES: [&str; N_POSITIONAL] = [
    "pos_frac_through",
    "pos_frac_remaining",
    "pos_duration_frames",
    "pos_index_in_label",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FullContextLabel {
    pub start: u64,
    pub end: u64,
    pub context: String,
}

impl FullContextLabel {
    pub fn start_secs(&self) -> f64 {
        self.start as f64 / TICKS_PER_SECOND
    }

    pub fn end_secs(&self) -> f64 {
        self.end as f64 / TICKS_PER_SECOND
    }
}

/// Parses `start end context` lines. Labels must be non-overlapping and in
/// temporal order.
pub fn parse_labels(text: &str) -> Result<Vec<FullContextLabel>> {
    let mut labels: Vec<FullContextLabel> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(s), Some(e), Some(context)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Format(format!("line {line_no}: expected `start end context`")));
        };
        if parts.next().is_some() {
            return Err(Error::Format(format!("line {line_no}: trailing fields after context")));
        }
        let parse = |v: &str| {
            v.parse::<u64>()
                .map_err(|_| Error::Format(format!("line {line_no}: bad time `{v}`")))
        };
        let (start, end) = (parse(s)?, parse(e)?);
        if start > end {
            return Err(Error::Format(format!("line {line_no}: start {start} after end {end}")));
        }
        if let Some(prev) = labels.last() {
            if start < prev.end {
                return Err(Error::Format(format!(
                    "line {line_no}: start {start} overlaps previous label ending at {}",
                    prev.end
                )));
            }
        }
        labels.push(FullContextLabel {
            start,
            end,
            context: context.to_string(),
        });
    }
    Ok(labels)
}

#[derive(Debug, Clone)]
pub struct BinaryQuestion {
    pub name: String,
    pub patterns: Vec<String>,
}

impl BinaryQuestion {
    pub fn answer(&self, context: &str) -> bool {
        self.patterns.iter().any(|p| match_question(p, context))
    }
}

#[derive(Debug, Clone)]
pub struct NumericQuestion {
    pub name: String,
    pub pattern: String,
    regex: Regex,
}

impl NumericQuestion {
    /// `pattern` is glob text (`*`, `?`) with exactly one parenthesised
    /// regex group capturing the number, e.g. `@(\d+)+*`.
    pub fn new(name: &str, pattern: &str) -> Result<Self> {
        let regex = numeric_pattern_regex(pattern)?;
        Ok(Self {
            name: name.to_string(),
            pattern: pattern.to_string(),
            regex,
        })
    }

    /// Captured number, or [`NUMERIC_ABSENT`] when the pattern does not occur.
    pub fn value(&self, context: &str) -> f64 {
        self.regex
            .captures(context)
            .and_then(|c| c.get(1))
            .and_then(|m| m.as_str().parse::<f64>().ok())
            .unwrap_or(NUMERIC_ABSENT)
    }
}

fn numeric_pattern_regex(pattern: &str) -> Result<Regex> {
    let mut out = String::new();
    let mut groups = 0;
    let mut chars = pattern.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '(' => {
                groups += 1;
                out.push('(');
                let mut depth = 1;
                for g in chars.by_ref() {
                    out.push(g);
                    match g {
                        '(' => depth += 1,
                        ')' => {
                            depth -= 1;
                            if depth == 0 {
                                break;
                            }
                        }
                        _ => {}
                    }
                }
                if depth != 0 {
                    return Err(Error::Format(format!("unbalanced group in `{pattern}`")));
                }
            }
            '*' => out.push_str(".*"),
            '?' => out.push('.'),
            '\\' => {
                if let Some(next) = chars.next() {
                    out.push_str(&regex::escape(&next.to_string()));
                }
            }
            other => out.push_str(&regex::escape(&other.to_string())),
        }
    }
    if groups != 1 {
        return Err(Error::Format(format!(
            "numeric pattern `{pattern}` must contain exactly one capture group"
        )));
    }
    Regex::new(&out).map_err(|e| Error::Format(format!("numeric pattern `{pattern}`: {e}")))
}

/// Ordered questions; feature column order is file order.
#[derive(Debug, Clone, Default)]
pub struct QuestionSet {
    pub binary: Vec<BinaryQuestion>,
    pub numeric: Vec<NumericQuestion>,
}

impl QuestionSet {
    /// The empty set used by the ultrasound-only configuration.
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.binary.is_empty() && self.numeric.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.binary.len() + self.numeric.len() + N_POSITIONAL
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.binary
            .iter()
            .map(|q| q.name.clone())
            .chain(self.numeric.iter().map(|q| q.name.clone()))
            .chain(POSITIONAL_NAMES.iter().map(|s| s.to_string()))
            .collect()
    }
}

fn declaration_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"^(QS|CQS)\s+"([^"]+)"\s*\{(.*)\}$"#).unwrap())
}

/// Parses `QS "name" {pat,...}` and `CQS "name" {pat}` declarations.
pub fn parse_questions(text: &str) -> Result<QuestionSet> {
    let mut set = QuestionSet::default();
    let mut names = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let caps = declaration_regex()
            .captures(line)
            .ok_or_else(|| Error::Format(format!("line {line_no}: malformed question `{line}`")))?;
        let name = &caps[2];
        let body = caps[3].trim();
        if !names.insert(name.to_string()) {
            return Err(Error::Format(format!("line {line_no}: duplicate question `{name}`")));
        }
        if &caps[1] == "QS" {
            let patterns: Vec<String> = body
                .split(',')
                .map(|p| p.trim().trim_matches('"').to_string())
                .filter(|p| !p.is_empty())
                .collect();
            if patterns.is_empty() {
                return Err(Error::Format(format!("line {line_no}: question `{name}` has no patterns")));
            }
            set.binary.push(BinaryQuestion {
                name: name.to_string(),
                patterns,
            });
        } else {
            let q = NumericQuestion::new(name, body.trim_matches('"'))
                .map_err(|e| Error::Format(format!("line {line_no}: {e}")))?;
            set.numeric.push(q);
        }
    }
    Ok(set)
}

/// Whole-string glob match: `*` matches any run, `?` one character.
pub fn match_question(pattern: &str, context: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let s: Vec<char> = context.chars().collect();
    let (mut pi, mut si) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while si < s.len() {
        if pi < p.len() && (p[pi] == '?' || (p[pi] != '*' && p[pi] == s[si])) {
            pi += 1;
            si += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = Some((pi, si));
            pi += 1;
        } else if let Some((sp, ss)) = star {
            pi = sp + 1;
            si = ss + 1;
            star = Some((sp, ss + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == '*')
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinguisticFeatureSequence {
    /// n_frames x (|binary| + |numeric| + 4)
    pub frames: Array2<f64>,
    pub names: Vec<String>,
}

/// Label frame span on a clock with period `frame_shift`.
fn frame_span(label: &FullContextLabel, frame_shift: f64) -> (usize, usize) {
    let to_frame = |ticks: u64| (ticks as f64 / TICKS_PER_SECOND / frame_shift).round() as usize;
    (to_frame(label.start), to_frame(label.end))
}

/// Per-frame features. Frames past the last label use the last label;
/// frames before the first or in gaps use the most recent label start.
pub fn extract_features(
    labels: &[FullContextLabel],
    questions: &QuestionSet,
    frame_shift: f64,
    n_frames: usize,
) -> Result<LinguisticFeatureSequence> {
    if labels.is_empty() {
        return Err(Error::Data("cannot extract features from an empty label list".into()));
    }
    if !(frame_shift > 0.0) {
        return Err(Error::Argument(format!("frame shift must be > 0, got {frame_shift}")));
    }
    let n_bin = questions.binary.len();
    let n_num = questions.numeric.len();
    let width = questions.n_features();

    let answers: Vec<Vec<f64>> = labels
        .iter()
        .map(|l| {
            questions
                .binary
                .iter()
                .map(|q| if q.answer(&l.context) { 1.0 } else { 0.0 })
                .chain(questions.numeric.iter().map(|q| q.value(&l.context)))
                .collect()
        })
        .collect();
    let spans: Vec<(usize, usize)> = labels.iter().map(|l| frame_span(l, frame_shift)).collect();

    let mut frames = Array2::zeros((n_frames, width));
    for (i, mut row) in frames.rows_mut().into_iter().enumerate() {
        let li = spans.partition_point(|&(s, _)| s <= i).saturating_sub(1);
        let (start, end) = spans[li];
        for (c, v) in answers[li].iter().enumerate() {
            row[c] = *v;
        }
        let duration = end.saturating_sub(start).max(1);
        let index = i.saturating_sub(start).min(duration - 1);
        let through = if duration > 1 {
            index as f64 / (duration - 1) as f64
        } else {
            0.0
        };
        let base = n_bin + n_num;
        row[base] = through;
        row[base + 1] = 1.0 - through;
        row[base + 2] = duration as f64;
        row[base + 3] = index as f64;
    }
    Ok(LinguisticFeatureSequence {
        frames,
        names: questions.feature_names(),
    })
}
