//! Binary segmentation metrics: IoU, F1, MIoU and MPA over a water/background
//! confusion matrix, with micro aggregation across images.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::{Add, AddAssign};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor;

/// Binary mask, 1 = water, 0 = background, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::shape(format!("mask {height}x{width} does not hold {} values", data.len())));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!("mask values must be 0 or 1, found {v}")));
        }
        Ok(Mask { height, width, data })
    }

    /// Sample `n`, channel 0 of a tensor holding exact 0/1 values.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Self> {
        let data = t
            .plane(n, 0)
            .iter()
            .map(|&v| match v {
                0.0 => Ok(0),
                1.0 => Ok(1),
                other => Err(Error::invalid(format!("mask values must be 0 or 1, found {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Mask::new(t.height(), t.width(), data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Class {
    Water,
    Background,
}

pub const CLASSES: [Class; 2] = [Class::Water, Class::Background];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ClassCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Counts with water as the positive class; background counts are the mirror image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    water: ClassCounts,
}

impl ConfusionMatrix {
    pub fn from_water_counts(water: ClassCounts) -> Self {
        ConfusionMatrix { water }
    }

    pub fn counts(&self, class: Class) -> ClassCounts {
        let w = self.water;
        match class {
            Class::Water => w,
            Class::Background => ClassCounts {
                tp: w.tn,
                fp: w.fn_,
                fn_: w.fp,
                tn: w.tp,
            },
        }
    }

    pub fn total(&self) -> u64 {
        self.water.total()
    }
}

impl Add for ConfusionMatrix {
    type Output = ConfusionMatrix;

    fn add(self, o: ConfusionMatrix) -> ConfusionMatrix {
        let (a, b) = (self.water, o.water);
        ConfusionMatrix {
            water: ClassCounts {
                tp: a.tp + b.tp,
                fp: a.fp + b.fp,
                fn_: a.fn_ + b.fn_,
                tn: a.tn + b.tn,
            },
        }
    }
}

impl AddAssign for ConfusionMatrix {
    fn add_assign(&mut self, o: ConfusionMatrix) {
        *self = *self + o;
    }
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionMatrix> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::shape(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let mut c = ClassCounts::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(ConfusionMatrix { water: c })
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// `TP / (TP + FP + FN)`; 1 when the class is absent from both masks.
pub fn iou(cm: &ConfusionMatrix, class: Class) -> f64 {
    let c = cm.counts(class);
    ratio(c.tp, c.tp + c.fp + c.fn_)
}

/// `2TP / (2TP + FP + FN)`; 1 when the class is absent from both masks.
pub fn f1(cm: &ConfusionMatrix, class: Class) -> f64 {
    let c = cm.counts(class);
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

/// `(TP + TN) / (TP + TN + FP + FN)` for one class.
pub fn class_accuracy(cm: &ConfusionMatrix, class: Class) -> f64 {
    let c = cm.counts(class);
    ratio(c.tp + c.tn, c.total())
}

pub fn miou(cm: &ConfusionMatrix) -> f64 {
    CLASSES.iter().map(|&k| iou(cm, k)).sum::<f64>() / CLASSES.len() as f64
}

pub fn mpa(cm: &ConfusionMatrix) -> f64 {
    CLASSES.iter().map(|&k| class_accuracy(cm, k)).sum::<f64>() / CLASSES.len() as f64
}

/// Water IoU, water F1, MIoU, MPA.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub iou: f64,
    pub f1: f64,
    pub miou: f64,
    pub mpa: f64,
}

impl Scores {
    pub fn of(cm: &ConfusionMatrix) -> Self {
        Scores {
            iou: iou(cm, Class::Water),
            f1: f1(cm, Class::Water),
            miou: miou(cm),
            mpa: mpa(cm),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Per image, sorted by file name.
    pub images: Vec<(String, ConfusionMatrix)>,
    /// Sum of all per-image counts.
    pub total: ConfusionMatrix,
}

impl EvalReport {
    pub fn from_images(images: Vec<(String, ConfusionMatrix)>) -> Self {
        let total = images.iter().fold(ConfusionMatrix::default(), |acc, (_, cm)| acc + *cm);
        EvalReport { images, total }
    }

    pub fn scores(&self) -> Scores {
        Scores::of(&self.total)
    }

    /// `image,IoU,F1,MIoU,MPA` rows, then an `ALL` row for the pooled counts.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,IoU,F1,MIoU,MPA\n");
        let rows = self.images.iter().map(|(n, cm)| (n.as_str(), Scores::of(cm)));
        for (name, s) in rows.chain(std::iter::once(("ALL", self.scores()))) {
            writeln!(out, "{name},{:.6},{:.6},{:.6},{:.6}", s.iou, s.f1, s.miou, s.mpa).unwrap();
        }
        out
    }

    pub fn table(&self) -> String {
        let s = self.scores();
        let mut out = format!("{:<10}{:>10}{:>10}{:>10}{:>10}\n", "images", "IoU", "F1", "MIoU", "MPA");
        writeln!(
            out,
            "{:<10}{:>10.4}{:>10.4}{:>10.4}{:>10.4}",
            self.images.len(),
            s.iou,
            s.f1,
            s.miou,
            s.mpa
        )
        .unwrap();
        out
    }
}

fn list_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() {
            out.insert(entry.file_name().to_string_lossy().into_owned(), path);
        }
    }
    Ok(out)
}

/// Pairs masks by file name, counts each pair and pools the counts.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path) -> Result<EvalReport> {
    let preds = list_files(pred_dir)?;
    let gts = list_files(gt_dir)?;
    let unmatched: Vec<&str> = preds
        .keys()
        .filter(|k| !gts.contains_key(*k))
        .chain(gts.keys().filter(|k| !preds.contains_key(*k)))
        .map(String::as_str)
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::invalid(format!("unmatched mask files: {}", unmatched.join(", "))));
    }
    if preds.is_empty() {
        return Err(Error::invalid(format!("no masks in {}", pred_dir.display())));
    }
    let pairs: Vec<(&String, &PathBuf)> = preds.iter().collect();
    let results = parallel::map_range(pairs.len(), |i| {
        let (name, pred_path) = pairs[i];
        let pred = crate::imageio::load_mask(pred_path)?;
        let gt = crate::imageio::load_mask(&gts[name])?;
        confusion(&pred, &gt)
            .map(|cm| (name.clone(), cm))
            .map_err(|e| Error::invalid(format!("{name}: {e}")))
    });
    Ok(EvalReport::from_images(results.into_iter().collect::<Result<Vec<_>>>()?))
}
