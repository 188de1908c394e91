//! Segmentation metrics, all-pairs matching, ROC and equal error rate.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{match_min_hd, IrisCode};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Per-image segmentation scores. `tp`, `fp`, `tn` and `fn_` are fractions of all pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub tp: f64,
    pub fp: f64,
    pub tn: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
    /// Neither mask has iris pixels; P and R are taken as 1.
    pub degenerate: bool,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn seg_metrics(pred: &BinaryMask, gt: &BinaryMask) -> Result<SegMetrics> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(Error::dim("predicted and ground-truth masks differ in size"));
    }
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let n = pred.bits().len();
    let degenerate = tp + fp == 0 && tp + fneg == 0;
    let (precision, recall) = if degenerate {
        (1.0, 1.0)
    } else {
        (ratio(tp, tp + fp), ratio(tp, tp + fneg))
    };
    let f_measure = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(SegMetrics {
        precision,
        recall,
        f_measure,
        tp: ratio(tp, n),
        fp: ratio(fp, n),
        tn: ratio(tn, n),
        fn_: ratio(fneg, n),
        degenerate,
    })
}

/// Fraction of pixels where the masks disagree.
pub fn e1(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(Error::dim("predicted and ground-truth masks differ in size"));
    }
    let diff = pred.bits().iter().zip(gt.bits()).filter(|(a, b)| a != b).count();
    Ok(ratio(diff, pred.bits().len()))
}

/// Mean of the false-positive and false-negative pixel rates.
pub fn e2(fp_rate: f64, fn_rate: f64) -> f64 {
    0.5 * (fp_rate + fn_rate)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    #[serde(flatten)]
    pub seg: SegMetrics,
    pub e1: f64,
    pub e2: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(v: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = v.into_iter().collect();
        if v.is_empty() {
            return MeanStd::default();
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f_measure: MeanStd,
    pub e1: f64,
    pub e2: f64,
    pub degenerate_images: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eer: Option<f64>,
}

impl MetricReport {
    /// Aggregates `(name, prediction, ground truth)` triples by per-image means.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (String, &'a BinaryMask, &'a BinaryMask)>) -> Result<Self> {
        let mut images = Vec::new();
        for (name, p, g) in pairs {
            let seg = seg_metrics(p, g)?;
            images.push(ImageMetrics {
                name,
                e1: e1(p, g)?,
                e2: e2(seg.fp, seg.fn_),
                seg,
            });
        }
        if images.is_empty() {
            return Err(Error::invalid("no images to evaluate"));
        }
        Ok(MetricReport {
            precision: MeanStd::of(images.iter().map(|m| m.seg.precision)),
            recall: MeanStd::of(images.iter().map(|m| m.seg.recall)),
            f_measure: MeanStd::of(images.iter().map(|m| m.seg.f_measure)),
            e1: MeanStd::of(images.iter().map(|m| m.e1)).mean,
            e2: MeanStd::of(images.iter().map(|m| m.e2)).mean,
            degenerate_images: images.iter().filter(|m| m.seg.degenerate).count(),
            eer: None,
            images,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub probe_id: String,
    pub gallery_id: String,
    pub label: PairLabel,
    pub hd: f64,
    pub rotation: i32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairLabel {
    Genuine,
    Impostor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub pairs: Vec<PairScore>,
    /// Pairs whose masks never overlapped; excluded from `pairs`.
    pub incomparable: usize,
}

impl ScoreSet {
    pub fn genuine(&self) -> Vec<f64> {
        self.with_label(PairLabel::Genuine)
    }

    pub fn impostor(&self) -> Vec<f64> {
        self.with_label(PairLabel::Impostor)
    }

    fn with_label(&self, l: PairLabel) -> Vec<f64> {
        self.pairs.iter().filter(|p| p.label == l).map(|p| p.hd).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for p in &self.pairs {
            wr.serialize(p).map_err(|e| Error::Format(format!("scores CSV: {e}")))?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let pairs = rd
            .deserialize()
            .collect::<std::result::Result<Vec<PairScore>, _>>()
            .map_err(|e| Error::Format(format!("scores CSV: {e}")))?;
        if let Some(p) = pairs.iter().find(|p| !(0.0..=1.0).contains(&p.hd)) {
            return Err(Error::Format(format!("hd {} outside [0, 1]", p.hd)));
        }
        Ok(ScoreSet { pairs, incomparable: 0 })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GalleryEntry {
    pub id: String,
    pub identity: String,
    pub code: IrisCode,
}

fn score_pair(a: &GalleryEntry, b: &GalleryEntry) -> Result<Option<PairScore>> {
    match match_min_hd(&a.code, &b.code) {
        Ok((hd, rotation)) => Ok(Some(PairScore {
            probe_id: a.id.clone(),
            gallery_id: b.id.clone(),
            label: if a.identity == b.identity {
                PairLabel::Genuine
            } else {
                PairLabel::Impostor
            },
            hd,
            rotation,
        })),
        Err(Error::IncomparableCodes) => Ok(None),
        Err(e) => Err(e),
    }
}

fn collect_scores(results: Vec<Result<Option<PairScore>>>) -> Result<ScoreSet> {
    let mut set = ScoreSet::default();
    for r in results {
        match r? {
            Some(p) => set.pairs.push(p),
            None => set.incomparable += 1,
        }
    }
    Ok(set)
}

/// Matches every unordered pair `(i, j)`, `i < j`, in index order.
pub fn all_pairs(gallery: &[GalleryEntry]) -> Result<ScoreSet> {
    if gallery.len() < 2 {
        return Err(Error::invalid("all-pairs matching needs at least two codes"));
    }
    let idx: Vec<(usize, usize)> = (0..gallery.len())
        .flat_map(|i| (i + 1..gallery.len()).map(move |j| (i, j)))
        .collect();
    collect_scores(
        idx.par_iter()
            .map(|&(i, j)| score_pair(&gallery[i], &gallery[j]))
            .collect(),
    )
}

/// Matches one probe against each gallery entry, in gallery order. Entries with the probe's
/// id are skipped.
pub fn match_probe(probe: &GalleryEntry, gallery: &[GalleryEntry]) -> Result<ScoreSet> {
    collect_scores(
        gallery
            .par_iter()
            .filter(|g| g.id != probe.id)
            .map(|g| score_pair(probe, g))
            .collect(),
    )
}

/// One point per distinct observed score: impostors accepted (`hd <= t`) and genuine pairs
/// rejected (`hd > t`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

fn sorted(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::invalid("scores contain NaN"));
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

pub fn roc(genuine: &[f64], impostor: &[f64]) -> Result<Vec<RocPoint>> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::invalid("ROC needs both genuine and impostor scores"));
    }
    let (g, im) = (sorted(genuine)?, sorted(impostor)?);
    let mut thresholds: Vec<f64> = g.iter().chain(&im).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let (mut gi, mut ii) = (0, 0);
    let mut out = Vec::with_capacity(thresholds.len());
    for t in thresholds {
        while gi < g.len() && g[gi] <= t {
            gi += 1;
        }
        while ii < im.len() && im[ii] <= t {
            ii += 1;
        }
        out.push(RocPoint {
            threshold: t,
            far: ii as f64 / im.len() as f64,
            frr: (g.len() - gi) as f64 / g.len() as f64,
        });
    }
    Ok(out)
}

/// Rate where FAR meets FRR, interpolating linearly between the bracketing thresholds. The
/// sweep starts below every score, where FAR = 0 and FRR = 1.
pub fn eer(genuine: &[f64], impostor: &[f64]) -> Result<f64> {
    let curve = roc(genuine, impostor)?;
    let (mut pf, mut pr) = (0.0, 1.0);
    for p in curve {
        let d = p.far - p.frr;
        if d >= 0.0 {
            let d0 = pf - pr;
            if d == 0.0 {
                return Ok(p.far);
            }
            let lam = -d0 / (d - d0);
            return Ok(pf + lam * (p.far - pf));
        }
        (pf, pr) = (p.far, p.frr);
    }
    unreachable!("the last threshold accepts everything, so FAR - FRR = 1 there")
}

pub fn write_roc_csv<W: Write>(curve: &[RocPoint], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for p in curve {
        wr.serialize(p).map_err(|e| Error::Format(format!("ROC CSV: {e}")))?;
    }
    wr.flush()?;
    Ok(())
}
