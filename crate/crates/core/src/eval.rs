//! Segmentation metrics, the precision-efficiency score, and a corpus runner.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{PearlError, Result};
use crate::interchange::{LabelMap, PipelineConfig, TensorContainer};
use crate::par::Exec;
use crate::pipeline::{run, PipelineInputs, RunOptions};

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    pub ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
            ignored: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts every pixel whose ground truth is not the ignore value.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(PearlError::Dimension(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let c = self.classes;
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if g == gt.ignore_value {
                self.ignored += 1;
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= c || g >= c {
                return Err(PearlError::validation(
                    "labels",
                    format!("class index {} outside 0..{c}", p.max(g)),
                ));
            }
            self.counts[g * c + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(PearlError::Dimension(format!(
                "merging {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        self.ignored += other.ignored;
        Ok(())
    }

    /// Per-class IoU; `None` for classes absent from both maps.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|k| {
                let tp = self.get(k, k);
                let fn_: u64 = (0..self.classes).map(|p| self.get(k, p)).sum::<u64>() - tp;
                let fp: u64 = (0..self.classes).map(|g| self.get(g, k)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    fn ensure_counts(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(PearlError::validation("confusion matrix", "no counted pixels"));
        }
        Ok(())
    }

    /// Mean IoU in percent over classes present in either map.
    pub fn miou(&self) -> Result<f64> {
        self.ensure_counts()?;
        let present: Vec<f64> = self.class_iou().into_iter().flatten().collect();
        Ok(100.0 * present.iter().sum::<f64>() / present.len() as f64)
    }

    /// Pixel accuracy in percent.
    pub fn pacc(&self) -> Result<f64> {
        self.ensure_counts()?;
        let trace: u64 = (0..self.classes).map(|k| self.get(k, k)).sum();
        Ok(100.0 * trace as f64 / self.total() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PesRow {
    pub miou: f64,
    pub pacc: f64,
    pub latency_ms: f64,
    pub memory_gb: f64,
}

fn normalized(values: &[f64], higher_is_better: bool) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    values
        .iter()
        .map(|&v| match (max > min, higher_is_better) {
            (false, _) => 1.0,
            (true, true) => (v - min) / (max - min),
            (true, false) => (max - v) / (max - min),
        })
        .collect()
}

/// Mean of min-max normalized mIoU, pAcc, latency and memory (the last two
/// flipped so lower cost scores higher).
pub fn pes(rows: &[PesRow]) -> Result<Vec<f64>> {
    if rows.len() < 2 {
        return Err(PearlError::validation("pes", "at least two rows are needed to normalize"));
    }
    for r in rows {
        if [r.miou, r.pacc, r.latency_ms, r.memory_gb].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(PearlError::validation("pes", format!("invalid row {r:?}")));
        }
    }
    let col = |f: fn(&PesRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let terms = [
        normalized(&col(|r| r.miou), true),
        normalized(&col(|r| r.pacc), true),
        normalized(&col(|r| r.latency_ms), false),
        normalized(&col(|r| r.memory_gb), false),
    ];
    Ok((0..rows.len()).map(|k| terms.iter().map(|t| t[k]).sum::<f64>() / 4.0).collect())
}

/// One image of a corpus manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub dataset: String,
    pub features: PathBuf,
    pub image: PathBuf,
    pub gt: PathBuf,
    pub prototypes: PathBuf,
}

/// Parses `dataset,features,image,gt,prototypes` lines. Blank lines, `#`
/// comments and a header starting with `dataset` are skipped; relative paths
/// resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("dataset,") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [dataset, features, image, gt, prototypes] = fields[..] else {
            return Err(PearlError::validation(
                "manifest",
                format!("line {}: expected 5 comma-separated fields, got {}", n + 1, fields.len()),
            ));
        };
        out.push(ManifestEntry {
            dataset: dataset.to_string(),
            features: base.join(features),
            image: base.join(image),
            gt: base.join(gt),
            prototypes: base.join(prototypes),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRow {
    pub dataset: String,
    pub images: usize,
    pub miou: f64,
    pub pacc: f64,
}

fn evaluate_entry(e: &ManifestEntry, config: &PipelineConfig, exec: Exec) -> Result<ConfusionMatrix> {
    let features = TensorContainer::read_file(&e.features)?;
    let prototypes = TensorContainer::read_file(&e.prototypes)?;
    let image = TensorContainer::read_file(&e.image)?;
    let inputs = PipelineInputs::from_containers(&features, &prototypes, &image)?;
    let classes = inputs.prototypes.classes();
    let out = run(&inputs, config, RunOptions::default(), exec)?;
    let gt = LabelMap::from_container(&TensorContainer::read_file(&e.gt)?, "gt_labels", classes)?;
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(&out.labels, &gt)?;
    Ok(cm)
}

/// Runs the pipeline over every manifest entry and aggregates per dataset, in
/// order of first appearance.
pub fn run_corpus(entries: &[ManifestEntry], config: &PipelineConfig, exec: Exec) -> Result<Vec<CorpusRow>> {
    let matrices = exec.try_map_range(entries.len(), |i| {
        evaluate_entry(&entries[i], config, exec).map_err(|e| {
            log::error!("{}: {e}", entries[i].features.display());
            e
        })
    })?;
    let mut sums: Vec<(String, usize, ConfusionMatrix)> = Vec::new();
    for (e, cm) in entries.iter().zip(matrices) {
        match sums.iter_mut().find(|(d, _, _)| *d == e.dataset) {
            Some((_, n, acc)) => {
                acc.merge(&cm)?;
                *n += 1;
            }
            None => sums.push((e.dataset.clone(), 1, cm)),
        }
    }
    sums.into_iter()
        .map(|(dataset, images, cm)| {
            Ok(CorpusRow {
                dataset,
                images,
                miou: cm.miou()?,
                pacc: cm.pacc()?,
            })
        })
        .collect()
}

pub fn corpus_csv(rows: &[CorpusRow]) -> String {
    let mut s = String::from("dataset,mIoU,pAcc\n");
    for r in rows {
        writeln!(s, "{},{:.2},{:.2}", r.dataset, r.miou, r.pacc).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interchange::IGNORE_LABEL;

    fn map(h: usize, w: usize, classes: usize, labels: &[u32]) -> LabelMap {
        LabelMap {
            height: h,
            width: w,
            classes,
            labels: labels.to_vec(),
            ignore_value: IGNORE_LABEL,
        }
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let gt = map(2, 3, 3, &[0, 1, 2, 2, 1, 0]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&gt, &gt).unwrap();
        assert_eq!((cm.get(0, 0), cm.get(1, 1), cm.get(2, 2), cm.total()), (2, 2, 2, 6));
        assert_eq!(cm.miou().unwrap(), 100.0);
        assert_eq!(cm.pacc().unwrap(), 100.0);
    }

    #[test]
    fn ignored_pixels_are_skipped() {
        let gt = map(1, 2, 2, &[IGNORE_LABEL; 2]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&map(1, 2, 2, &[0, 1]), &gt).unwrap();
        assert_eq!((cm.total(), cm.ignored), (0, 2));
        assert!(cm.miou().is_err());
    }

    #[test]
    fn one_error_hand_count() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&map(2, 2, 2, &[0, 1, 1, 1]), &map(2, 2, 2, &[0, 0, 1, 1])).unwrap();
        assert_eq!([cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)], [1, 1, 0, 2]);
        assert!((cm.miou().unwrap() - 100.0 * (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(cm.pacc().unwrap(), 75.0);
    }

    #[test]
    fn constant_prediction_on_even_split() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&map(1, 4, 2, &[0; 4]), &map(1, 4, 2, &[0, 0, 1, 1])).unwrap();
        assert_eq!(cm.pacc().unwrap(), 50.0);
        assert_eq!(cm.miou().unwrap(), 25.0);
    }

    #[test]
    fn absent_classes_are_excluded_and_swap_is_symmetric() {
        let a = map(1, 5, 4, &[0, 1, 1, 3, 0]);
        let b = map(1, 5, 4, &[0, 1, 3, 3, 1]);
        let mut ab = ConfusionMatrix::new(4);
        let mut ba = ConfusionMatrix::new(4);
        ab.accumulate(&a, &b).unwrap();
        ba.accumulate(&b, &a).unwrap();
        assert_eq!(ab.class_iou()[2], None);
        assert_eq!(ab.miou().unwrap(), ba.miou().unwrap());
    }

    #[test]
    fn out_of_range_class_is_rejected() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.accumulate(&map(1, 1, 3, &[2]), &map(1, 1, 2, &[0])).is_err());
    }

    #[test]
    fn merge_is_additive() {
        let gt = map(1, 3, 2, &[0, 1, 1]);
        let pred = map(1, 3, 2, &[0, 0, 1]);
        let mut whole = ConfusionMatrix::new(2);
        whole.accumulate(&pred, &gt).unwrap();
        whole.accumulate(&pred, &gt).unwrap();
        let mut part = ConfusionMatrix::new(2);
        part.accumulate(&pred, &gt).unwrap();
        let copy = part.clone();
        part.merge(&copy).unwrap();
        assert_eq!(part, whole);
    }

    #[test]
    fn pes_cases() {
        let row = PesRow { miou: 60.0, pacc: 80.0, latency_ms: 30.0, memory_gb: 1.0 };
        assert_eq!(pes(&[row, row]).unwrap(), vec![1.0, 1.0]);
        let worse = PesRow { miou: 50.0, pacc: 70.0, latency_ms: 40.0, memory_gb: 2.0 };
        assert_eq!(pes(&[worse, row]).unwrap(), vec![0.0, 1.0]);
        assert!(pes(&[row]).is_err());
    }

    #[test]
    fn manifest_parsing() {
        let text = "dataset,features,image,gt,prototypes\n# note\n\nvoc, a.prl, b.prl, c.prl, t.prl\n";
        let m = parse_manifest(text, Path::new("/data")).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].features, PathBuf::from("/data/a.prl"));
        assert!(parse_manifest("voc,a,b", Path::new(".")).is_err());
    }

    #[test]
    fn csv_layout() {
        let rows = [CorpusRow { dataset: "voc".into(), images: 2, miou: 64.123, pacc: 88.5 }];
        assert_eq!(corpus_csv(&rows), "dataset,mIoU,pAcc\nvoc,64.12,88.50\n");
    }
}
