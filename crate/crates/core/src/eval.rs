//! AUROC and score reports (histograms, timelines, CSV and SVG).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const HIST_BINS: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct RocResult {
    pub auroc: f64,
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one point per distinct score.
    pub curve: Vec<(f64, f64)>,
    pub n_pos: usize,
    pub n_neg: usize,
}

fn check_labels(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Contract(format!("label {bad} is not 0 or 1")));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Numeric(format!("score {i} is NaN")));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    Ok((n_pos, n_neg))
}

/// Mann–Whitney AUROC with average ranks for ties, plus the ROC curve swept
/// over distinct score thresholds (higher score = more anomalous).
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<RocResult> {
    let (n_pos, n_neg) = check_labels(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        let pos = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += avg * pos as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    let u = rank_sum - p * (p + 1.0) / 2.0;
    let auc = u / (p * n);

    let mut curve = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = order.len();
    while k > 0 {
        let s = scores[order[k - 1]];
        while k > 0 && scores[order[k - 1]] == s {
            if labels[order[k - 1]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k -= 1;
        }
        curve.push((fp as f64 / n, tp as f64 / p));
    }
    Ok(RocResult { auroc: auc, curve, n_pos, n_neg })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-class score histogram over a shared min–max range.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    /// Fraction of normal windows per bin; empty class gives all zeros.
    pub normal: Vec<f64>,
    pub anomaly: Vec<f64>,
}

pub fn histogram(scores: &[f64], labels: &[u8], bins: usize) -> Result<Histogram> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("no scores".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::Numeric("non-finite score in histogram".into()));
    }
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = [vec![0usize; bins], vec![0usize; bins]];
    for (&s, &l) in scores.iter().zip(labels) {
        let bin = (((s - lo) / width) as usize).min(bins - 1);
        counts[usize::from(l == 1)][bin] += 1;
    }
    let normalize = |c: &[usize]| {
        let total: usize = c.iter().sum();
        c.iter().map(|&v| if total == 0 { 0.0 } else { v as f64 / total as f64 }).collect()
    };
    Ok(Histogram { edges, normal: normalize(&counts[0]), anomaly: normalize(&counts[1]) })
}

pub fn histogram_csv(h: &Histogram) -> String {
    let mut out = String::from("bin_lo,bin_hi,normal,anomaly\n");
    for i in 0..h.normal.len() {
        let _ = writeln!(out, "{},{},{},{}", h.edges[i], h.edges[i + 1], h.normal[i], h.anomaly[i]);
    }
    out
}

/// `window_index,start_index,score,label`, one row per window.
pub fn scores_csv(starts: &[usize], scores: &[f64], labels: &[u8]) -> String {
    let mut out = String::from("window_index,start_index,score,label\n");
    for (i, ((s, v), l)) in starts.iter().zip(scores).zip(labels).enumerate() {
        let _ = writeln!(out, "{i},{s},{v},{l}");
    }
    out
}

/// Parses a score CSV back into `(starts, scores, labels)`.
pub fn parse_scores_csv(text: &str) -> Result<(Vec<usize>, Vec<f64>, Vec<u8>)> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != ["window_index", "start_index", "score", "label"] {
        return Err(Error::Format(format!("unexpected score header {header:?}")));
    }
    let (mut starts, mut scores, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        let bad = |c: usize| Error::Parse { line: i + 2, column: c + 1, msg: format!("bad value `{}`", &rec[c]) };
        starts.push(rec[1].parse().map_err(|_| bad(1))?);
        scores.push(rec[2].parse().map_err(|_| bad(2))?);
        labels.push(rec[3].parse().map_err(|_| bad(3))?);
    }
    Ok((starts, scores, labels))
}

/// `window_index,r_1..r_L`.
pub fn routes_csv(routes: &[Vec<f64>]) -> String {
    let levels = routes.first().map_or(0, Vec::len);
    let mut out = String::from("window_index");
    for l in 1..=levels {
        let _ = write!(out, ",r_{l}");
    }
    out.push('\n');
    for (i, r) in routes.iter().enumerate() {
        let _ = write!(out, "{i}");
        for v in r {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// `window_index,row,col,weight` for every adjacency entry.
pub fn adjacency_csv(adjacency: &[Vec<f64>], entities: usize) -> String {
    let mut out = String::from("window_index,row,col,weight\n");
    for (w, a) in adjacency.iter().enumerate() {
        for (idx, v) in a.iter().enumerate() {
            let _ = writeln!(out, "{w},{},{},{v}", idx / entities, idx % entities);
        }
    }
    out
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 320.0;
const PAD: f64 = 40.0;

fn svg_frame(title: &str, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" viewBox=\"0 0 {SVG_W} {SVG_H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{title}</text>\n\
         <line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n\
         {body}</svg>\n",
        SVG_W / 2.0,
        SVG_H - PAD,
        SVG_W - PAD,
        SVG_H - PAD,
        SVG_H - PAD,
    )
}

pub fn histogram_svg(h: &Histogram) -> String {
    let bins = h.normal.len();
    let peak = h.normal.iter().chain(&h.anomaly).copied().fold(0.0, f64::max).max(1e-12);
    let bw = (SVG_W - 2.0 * PAD) / bins as f64;
    let plot_h = SVG_H - 2.0 * PAD;
    let mut body = String::new();
    for (series, colour) in [(&h.normal, "steelblue"), (&h.anomaly, "crimson")] {
        for (i, &m) in series.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let height = plot_h * m / peak;
            let _ = writeln!(
                body,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{colour}\" fill-opacity=\"0.5\"/>",
                PAD + bw * i as f64,
                SVG_H - PAD - height,
                bw,
                height
            );
        }
    }
    let _ = writeln!(
        body,
        "<text x=\"{PAD}\" y=\"{}\" font-size=\"11\" font-family=\"sans-serif\">{:.3}</text>\
         <text x=\"{}\" y=\"{}\" font-size=\"11\" font-family=\"sans-serif\" text-anchor=\"end\">{:.3}</text>",
        SVG_H - PAD + 15.0,
        h.edges[0],
        SVG_W - PAD,
        SVG_H - PAD + 15.0,
        h.edges[bins]
    );
    svg_frame("Score distribution (blue: normal, red: anomaly)", &body)
}

pub fn timeline_svg(starts: &[usize], scores: &[f64], labels: &[u8]) -> String {
    let mut body = String::new();
    if !scores.is_empty() {
        let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let (x0, x1) = (starts[0] as f64, *starts.last().expect("non-empty") as f64);
        let xspan = if x1 > x0 { x1 - x0 } else { 1.0 };
        let px = |s: usize| PAD + (SVG_W - 2.0 * PAD) * (s as f64 - x0) / xspan;
        let py = |v: f64| SVG_H - PAD - (SVG_H - 2.0 * PAD) * (v - lo) / span;
        let step = if starts.len() > 1 { (px(starts[1]) - px(starts[0])).max(1.0) } else { 1.0 };
        for (&s, &l) in starts.iter().zip(labels) {
            if l == 1 {
                let _ = writeln!(
                    body,
                    "<rect x=\"{:.2}\" y=\"{PAD}\" width=\"{step:.2}\" height=\"{}\" fill=\"crimson\" fill-opacity=\"0.15\"/>",
                    px(s),
                    SVG_H - 2.0 * PAD
                );
            }
        }
        let points: Vec<String> =
            starts.iter().zip(scores).map(|(&s, &v)| format!("{:.2},{:.2}", px(s), py(v))).collect();
        let _ = writeln!(
            body,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\"/>",
            points.join(" ")
        );
    }
    svg_frame("Anomaly score over time (shaded: labelled anomaly)", &body)
}

/// Files written by [`score_report`].
#[derive(Clone, Debug)]
pub struct ReportFiles {
    pub histogram_csv: PathBuf,
    pub timeline_csv: PathBuf,
    pub histogram_svg: PathBuf,
    pub timeline_svg: PathBuf,
}

pub fn score_report(starts: &[usize], scores: &[f64], labels: &[u8], out_dir: &Path) -> Result<ReportFiles> {
    if starts.len() != scores.len() {
        return Err(Error::Contract(format!("{} starts for {} scores", starts.len(), scores.len())));
    }
    let hist = histogram(scores, labels, HIST_BINS)?;
    fs::create_dir_all(out_dir)?;
    let files = ReportFiles {
        histogram_csv: out_dir.join("histogram.csv"),
        timeline_csv: out_dir.join("timeline.csv"),
        histogram_svg: out_dir.join("histogram.svg"),
        timeline_svg: out_dir.join("timeline.svg"),
    };
    fs::write(&files.histogram_csv, histogram_csv(&hist))?;
    fs::write(&files.timeline_csv, scores_csv(starts, scores, labels))?;
    fs::write(&files.histogram_svg, histogram_svg(&hist))?;
    fs::write(&files.timeline_svg, timeline_svg(starts, scores, labels))?;
    Ok(files)
}
