//! Error metrics, protocol runners and the fusion-weight grid search.
//!
//! A score above the threshold is a spoof call. FerrLive is the fraction of
//! live samples called spoof, FerrFake the fraction of spoofs called live.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetSplit, FingerprintSample, Label};
use crate::error::{Error, Result};
use crate::scoring::FusionWeights;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_FDR_CAP: f64 = 0.01;

fn check_inputs(scores: &[f64], labels: &[Label]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("scores contain NaN".into()));
    }
    let n_live = labels.iter().filter(|&&l| l == Label::Live).count();
    let n_spoof = labels.len() - n_live;
    if n_live == 0 || n_spoof == 0 {
        return Err(Error::Metric("both classes must be present".into()));
    }
    Ok((n_live, n_spoof))
}

/// `(FerrLive, FerrFake)` as fractions.
pub fn error_rates(scores: &[f64], labels: &[Label], threshold: f64) -> Result<(f64, f64)> {
    let (n_live, n_spoof) = check_inputs(scores, labels)?;
    let mut live_err = 0usize;
    let mut fake_err = 0usize;
    for (&s, &l) in scores.iter().zip(labels) {
        match l {
            Label::Live if s > threshold => live_err += 1,
            Label::Spoof if s <= threshold => fake_err += 1,
            _ => {}
        }
    }
    Ok((live_err as f64 / n_live as f64, fake_err as f64 / n_spoof as f64))
}

/// Average classification error in percent.
pub fn ace(scores: &[f64], labels: &[Label], threshold: f64) -> Result<f64> {
    let (fl, ff) = error_rates(scores, labels, threshold)?;
    Ok(100.0 * (fl + ff) / 2.0)
}

/// Sorts a copy ascending.
fn sorted(v: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = v.collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Number of entries of the ascending `v` strictly greater than `t`.
fn count_above(v: &[f64], t: f64) -> usize {
    v.len() - v.partition_point(|&x| x <= t)
}

/// Spoof detection rate (percent) at the smallest threshold τ from
/// `{-inf} ∪ scores` whose live false-detection fraction is at most `fdr_cap`.
pub fn tdr_at_fdr(scores: &[f64], labels: &[Label], fdr_cap: f64) -> Result<(f64, f64)> {
    let (n_live, n_spoof) = check_inputs(scores, labels)?;
    if !(0.0..=1.0).contains(&fdr_cap) {
        return Err(Error::Metric(format!("FDR cap {fdr_cap} is outside [0, 1]")));
    }
    let live = sorted(scores.iter().zip(labels).filter(|p| *p.1 == Label::Live).map(|p| *p.0));
    let spoof = sorted(scores.iter().zip(labels).filter(|p| *p.1 == Label::Spoof).map(|p| *p.0));
    let candidates = std::iter::once(f64::NEG_INFINITY).chain(sorted(scores.iter().copied()));
    for tau in candidates {
        if count_above(&live, tau) as f64 / n_live as f64 <= fdr_cap {
            let tdr = 100.0 * count_above(&spoof, tau) as f64 / n_spoof as f64;
            return Ok((tdr, tau));
        }
    }
    unreachable!("the largest score always satisfies the cap")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Fraction of live samples scored above the threshold.
    pub fdr: f64,
    /// Fraction of spoof samples scored above the threshold.
    pub tdr: f64,
    pub threshold: f64,
}

/// Empirical step ROC, from the largest observed score down to `-inf`, so
/// both rates are nondecreasing along the list.
pub fn roc(scores: &[f64], labels: &[Label]) -> Result<Vec<RocPoint>> {
    let (n_live, n_spoof) = check_inputs(scores, labels)?;
    let live = sorted(scores.iter().zip(labels).filter(|p| *p.1 == Label::Live).map(|p| *p.0));
    let spoof = sorted(scores.iter().zip(labels).filter(|p| *p.1 == Label::Spoof).map(|p| *p.0));
    let mut thresholds = sorted(scores.iter().copied());
    thresholds.dedup();
    thresholds.reverse();
    thresholds.push(f64::NEG_INFINITY);
    Ok(thresholds
        .into_iter()
        .map(|t| RocPoint {
            fdr: count_above(&live, t) as f64 / n_live as f64,
            tdr: count_above(&spoof, t) as f64 / n_spoof as f64,
            threshold: t,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "cross-material")]
    CrossMaterial,
    #[serde(rename = "cross-sensor")]
    CrossSensor,
}

impl Protocol {
    pub fn id(self) -> &'static str {
        match self {
            Protocol::CrossMaterial => "cross-material",
            Protocol::CrossSensor => "cross-sensor",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross-material" => Ok(Protocol::CrossMaterial),
            "cross-sensor" => Ok(Protocol::CrossSensor),
            other => Err(Error::Config(format!("unknown protocol {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ace_percent: f64,
    pub tdr_at_fdr1_percent: f64,
    pub ferr_live_percent: f64,
    pub ferr_fake_percent: f64,
    pub threshold: f64,
    pub roc: Vec<RocPoint>,
    pub protocol: Protocol,
    pub train_sensor: String,
    pub test_sensor: String,
    pub n_live: usize,
    pub n_spoof: usize,
}

pub fn evaluate(
    scores: &[f64],
    labels: &[Label],
    threshold: f64,
    protocol: Protocol,
    train_sensor: &str,
    test_sensor: &str,
) -> Result<EvalReport> {
    let (n_live, n_spoof) = check_inputs(scores, labels)?;
    let (fl, ff) = error_rates(scores, labels, threshold)?;
    let (tdr, _) = tdr_at_fdr(scores, labels, DEFAULT_FDR_CAP)?;
    Ok(EvalReport {
        ace_percent: 100.0 * (fl + ff) / 2.0,
        tdr_at_fdr1_percent: tdr,
        ferr_live_percent: 100.0 * fl,
        ferr_fake_percent: 100.0 * ff,
        threshold,
        roc: roc(scores, labels)?,
        protocol,
        train_sensor: train_sensor.to_string(),
        test_sensor: test_sensor.to_string(),
        n_live,
        n_spoof,
    })
}

/// Mean and sample standard deviation (`None` below two values).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: Option<f64>,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.len() >= 2)
            .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Self { mean, sd }
    }
}

impl fmt::Display for MeanSd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.sd {
            Some(sd) => write!(f, "{:.2} ± {:.2}", self.mean, sd),
            None => write!(f, "{:.2}", self.mean),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub protocol: Protocol,
    pub cells: Vec<EvalReport>,
    pub ace: MeanSd,
    pub tdr: MeanSd,
}

impl ProtocolReport {
    pub fn from_cells(protocol: Protocol, cells: Vec<EvalReport>) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::Protocol("no protocol cells".into()));
        }
        let aces: Vec<f64> = cells.iter().map(|c| c.ace_percent).collect();
        let tdrs: Vec<f64> = cells.iter().map(|c| c.tdr_at_fdr1_percent).collect();
        Ok(Self { protocol, ace: MeanSd::of(&aces), tdr: MeanSd::of(&tdrs), cells })
    }

    /// One row per cell plus a mean ± s.d. row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["protocol", "train_sensor", "test_sensor", "ace_percent", "tdr_at_fdr1_percent"])
            .map_err(csv_err)?;
        for c in &self.cells {
            w.write_record([
                self.protocol.id(),
                &c.train_sensor,
                &c.test_sensor,
                &format!("{:.4}", c.ace_percent),
                &format!("{:.4}", c.tdr_at_fdr1_percent),
            ])
            .map_err(csv_err)?;
        }
        w.write_record([self.protocol.id(), "mean ± s.d.", "", &self.ace.to_string(), &self.tdr.to_string()])
            .map_err(csv_err)?;
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// The single sensor a sample collection was captured with.
fn sensor_of(samples: &[FingerprintSample], what: &str) -> Result<String> {
    let sensors: BTreeSet<&str> = samples.iter().map(|s| s.sensor.as_str()).collect();
    match sensors.len() {
        1 => Ok(sensors.into_iter().next().unwrap_or_default().to_string()),
        0 => Err(Error::Protocol(format!("{what} is empty"))),
        _ => Err(Error::Protocol(format!("{what} mixes sensors {sensors:?}"))),
    }
}

/// A protocol cell: train on `datasets[train].train`, test on
/// `datasets[test].test`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub train: usize,
    pub test: usize,
}

/// Validates the layout and lists the cells to run. Cross-material runs one
/// cell per dataset; cross-sensor runs every ordered pair of distinct
/// sensors.
pub fn protocol_cells(protocol: Protocol, datasets: &[DatasetSplit]) -> Result<Vec<Cell>> {
    if datasets.is_empty() {
        return Err(Error::Protocol("no datasets given".into()));
    }
    match protocol {
        Protocol::CrossMaterial => {
            for d in datasets {
                let shared = d.shared_spoof_materials();
                if !shared.is_empty() {
                    return Err(Error::Protocol(format!(
                        "{}: spoof materials {shared:?} appear in both train and test",
                        d.manifest_path
                    )));
                }
            }
            Ok((0..datasets.len()).map(|i| Cell { train: i, test: i }).collect())
        }
        Protocol::CrossSensor => {
            if datasets.len() < 2 {
                return Err(Error::Protocol("cross-sensor needs at least two sensors".into()));
            }
            let mut sensors = Vec::with_capacity(datasets.len());
            for d in datasets {
                let tr = sensor_of(&d.train, &format!("{} train", d.manifest_path))?;
                let te = sensor_of(&d.test, &format!("{} test", d.manifest_path))?;
                if tr != te {
                    return Err(Error::Protocol(format!("{} pairs sensors {tr} and {te}", d.manifest_path)));
                }
                if sensors.contains(&tr) {
                    return Err(Error::Protocol(format!("sensor {tr} appears twice")));
                }
                sensors.push(tr);
            }
            let n = datasets.len();
            Ok((0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| Cell { train: i, test: j }))
                .collect())
        }
    }
}

/// Validates the protocol, then scores every cell with `score_cell`, which
/// receives the training and test datasets and returns test scores and
/// labels.
pub fn run_protocol<F>(
    protocol: Protocol,
    datasets: &[DatasetSplit],
    threshold: f64,
    mut score_cell: F,
) -> Result<ProtocolReport>
where
    F: FnMut(&DatasetSplit, &DatasetSplit) -> Result<(Vec<f64>, Vec<Label>)>,
{
    let cells = protocol_cells(protocol, datasets)?;
    let mut reports = Vec::with_capacity(cells.len());
    for cell in cells {
        let (train, test) = (&datasets[cell.train], &datasets[cell.test]);
        let (scores, labels) = score_cell(train, test)?;
        let train_sensor = sensor_of(&train.train, "train split").unwrap_or_default();
        let test_sensor = sensor_of(&test.test, "test split").unwrap_or_default();
        reports.push(evaluate(&scores, &labels, threshold, protocol, &train_sensor, &test_sensor)?);
    }
    ProtocolReport::from_cells(protocol, reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub weights: FusionWeights,
    pub ace_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub weights: FusionWeights,
    pub best_ace: f64,
    /// Every evaluated point in lexicographic `(w_g, w_l, w_s)` order.
    pub evaluated: Vec<GridPoint>,
}

/// Grid values `0, step, 2 step, ..` up to 1.
pub fn grid_values(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Config(format!("grid step {step} is outside (0, 1]")));
    }
    let n = (1.0 / step).round();
    if (n * step - 1.0).abs() < 1e-9 {
        let n = n as usize;
        return Ok((0..=n).map(|i| i as f64 / n as f64).collect());
    }
    let n = (1.0 / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| i as f64 * step).collect())
}

/// Exhaustive search for the weights minimizing ACE at threshold
/// `0.5 (w_g + w_l + w_s)`; ties keep the lexicographically smallest triple.
pub fn grid_search_weights(
    triples: &[(f64, f64, f64)],
    labels: &[Label],
    step: f64,
) -> Result<GridSearchResult> {
    let grid = grid_values(step)?;
    if triples.is_empty() {
        return Err(Error::Metric("no score triples".into()));
    }
    check_inputs(&vec![0.0; triples.len()], labels)?;
    let mut evaluated = Vec::with_capacity(grid.len().pow(3));
    let mut best: Option<GridPoint> = None;
    let mut fused = vec![0.0; triples.len()];
    for &wg in &grid {
        for &wl in &grid {
            for &ws in &grid {
                let w = FusionWeights::new(wg, wl, ws);
                for (f, &(g, l, s)) in fused.iter_mut().zip(triples) {
                    *f = w.fuse(g, l, s);
                }
                let point = GridPoint { weights: w, ace_percent: ace(&fused, labels, 0.5 * w.sum())? };
                if best.as_ref().is_none_or(|b| point.ace_percent < b.ace_percent) {
                    best = Some(point.clone());
                }
                evaluated.push(point);
            }
        }
    }
    let best = best.expect("grid is nonempty");
    Ok(GridSearchResult { weights: best.weights, best_ace: best.ace_percent, evaluated })
}

/// Renders a step ROC curve (FDR on x, TDR on y) as a PNG.
pub fn render_roc_png(points: &[RocPoint], path: &Path) -> Result<()> {
    const SIZE: u32 = 320;
    const MARGIN: u32 = 20;
    let span = (SIZE - 2 * MARGIN) as f64;
    let mut img = ImageBuffer::from_pixel(SIZE, SIZE, Rgb([255u8, 255, 255]));
    let to_px = |fdr: f64, tdr: f64| -> (f64, f64) {
        (MARGIN as f64 + fdr * span, (SIZE - MARGIN) as f64 - tdr * span)
    };
    let mut line = |a: (f64, f64), b: (f64, f64), color: Rgb<u8>| {
        let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let x = (a.0 + (b.0 - a.0) * t).round() as u32;
            let y = (a.1 + (b.1 - a.1) * t).round() as u32;
            if x < SIZE && y < SIZE {
                img.put_pixel(x, y, color);
            }
        }
    };
    let axis = Rgb([0, 0, 0]);
    line(to_px(0.0, 0.0), to_px(1.0, 0.0), axis);
    line(to_px(0.0, 0.0), to_px(0.0, 1.0), axis);
    line(to_px(0.0, 0.0), to_px(1.0, 1.0), Rgb([200, 200, 200]));
    let curve = Rgb([31, 119, 180]);
    let (mut fdr, mut tdr) = (0.0, 0.0);
    for p in points {
        line(to_px(fdr, tdr), to_px(p.fdr, tdr), curve);
        line(to_px(p.fdr, tdr), to_px(p.fdr, p.tdr), curve);
        (fdr, tdr) = (p.fdr, p.tdr);
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Live, Spoof};

    #[test]
    fn ace_hand_cases() {
        let labels = [Live, Live, Spoof, Spoof];
        assert_eq!(ace(&[0.1, 0.2, 0.8, 0.9], &labels, 0.5).unwrap(), 0.0);
        assert_eq!(ace(&[0.9, 0.8, 0.2, 0.1], &labels, 0.5).unwrap(), 100.0);
        let mut scores = vec![0.1; 100];
        scores[..2].fill(0.9);
        let mut s2 = vec![0.9; 100];
        s2[..4].fill(0.1);
        scores.extend(s2);
        let labels: Vec<_> = (0..200).map(|i| if i < 100 { Live } else { Spoof }).collect();
        assert!((ace(&scores, &labels, 0.5).unwrap() - 3.0).abs() < 1e-12);
        assert!(matches!(ace(&[0.1, 0.2], &[Live, Live], 0.5), Err(Error::Metric(_))));
    }

    #[test]
    fn threshold_equal_scores_count_as_live() {
        let (fl, ff) = error_rates(&[0.5, 0.5], &[Live, Spoof], 0.5).unwrap();
        assert_eq!((fl, ff), (0.0, 1.0));
    }

    #[test]
    fn tdr_on_disjoint_supports() {
        let scores = [0.1, 0.1, 0.1, 0.9, 0.9];
        let labels = [Live, Live, Live, Spoof, Spoof];
        let (tdr, tau) = tdr_at_fdr(&scores, &labels, 0.01).unwrap();
        assert_eq!(tdr, 100.0);
        assert_eq!(tau, 0.1);
    }

    #[test]
    fn roc_is_monotone_and_spans_corners() {
        let scores = [0.3, 0.1, 0.7, 0.7, 0.2, 0.9];
        let labels = [Live, Live, Spoof, Live, Spoof, Spoof];
        let r = roc(&scores, &labels).unwrap();
        assert_eq!((r[0].fdr, r[0].tdr), (0.0, 0.0));
        assert_eq!((r.last().unwrap().fdr, r.last().unwrap().tdr), (1.0, 1.0));
        for w in r.windows(2) {
            assert!(w[1].fdr >= w[0].fdr && w[1].tdr >= w[0].tdr);
        }
    }

    #[test]
    fn mean_sd_two_pass() {
        let m = MeanSd::of(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(m.mean, 5.0);
        assert!((m.sd.unwrap() - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
        assert_eq!(MeanSd::of(&[1.0]).sd, None);
    }

    #[test]
    fn grid_values_and_step_validation() {
        let g = grid_values(0.1).unwrap();
        assert_eq!(g.len(), 11);
        assert_eq!(g[3], 0.3);
        assert_eq!(grid_values(0.3).unwrap().len(), 4);
        assert!(grid_values(0.0).is_err());
        assert!(grid_values(1.5).is_err());
        assert_eq!(grid_values(1.0).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn degenerate_triples_tie_to_smallest_weights() {
        let triples = vec![(0.5, 0.5, 0.5); 6];
        let labels = [Live, Spoof, Live, Spoof, Live, Spoof];
        let r = grid_search_weights(&triples, &labels, 0.1).unwrap();
        assert_eq!(r.evaluated.len(), 1331);
        assert_eq!(r.weights, FusionWeights::new(0.0, 0.0, 0.0));
        assert_eq!(r.best_ace, 50.0);
    }

    #[test]
    fn protocol_names_parse() {
        assert_eq!("cross-sensor".parse::<Protocol>().unwrap(), Protocol::CrossSensor);
        assert!("diagonal".parse::<Protocol>().is_err());
    }

    #[test]
    fn roc_png_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let r = roc(&[0.1, 0.4, 0.35, 0.8], &[Live, Live, Spoof, Spoof]).unwrap();
        let p = dir.path().join("roc.png");
        render_roc_png(&r, &p).unwrap();
        assert!(image::open(&p).is_ok());
    }
}
