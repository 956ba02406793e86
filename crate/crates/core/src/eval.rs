//! Segmentation metrics, evaluation reports and the label-density surface.

use crate::error::{Error, Result};
use crate::kv::KvDoc;
use crate::label::{Extent, LabelPoint};
use crate::model::ScenePrediction;
use crate::nn::Tensor;

/// Row-major class index per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassRaster {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u8>,
}

impl ClassRaster {
    pub fn new(rows: usize, cols: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("class raster pixels", rows * cols, data.len()));
        }
        Ok(ClassRaster { rows, cols, data })
    }

    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.cols + col]
    }

    /// The part of `self` under `extent`.
    pub fn crop(&self, extent: Extent) -> Result<ClassRaster> {
        if extent.row0 + extent.rows > self.rows || extent.col0 + extent.cols > self.cols {
            return Err(Error::Coordinate {
                row: extent.row0 + extent.rows,
                col: extent.col0 + extent.cols,
                extent: format!("{}x{} raster", self.rows, self.cols),
            });
        }
        let data = extent.pixels().map(|(r, c)| self.at(r, c)).collect();
        ClassRaster::new(extent.rows, extent.cols, data)
    }
}

/// Counts indexed `[truth][pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        let n = self.classes();
        if truth >= n || pred >= n {
            return Err(Error::Palette(format!(
                "class {} outside the {n}-class palette",
                truth.max(pred)
            )));
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: u64 = (0..self.classes()).map(|i| self.counts[i][i]).sum();
        correct as f64 / self.total() as f64
    }

    /// `TP / (TP + FP + FN)`, or `None` for a class absent from both
    /// prediction and truth.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let tp = self.counts[class][class];
        let fn_: u64 = self.counts[class].iter().sum::<u64>() - tp;
        let fp: u64 = self.counts.iter().map(|row| row[class]).sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    /// Mean over the classes whose IoU is defined, summed in ascending order
    /// so that relabeling classes cannot change the result.
    pub fn mean_iou(&self) -> f64 {
        let mut ious: Vec<f64> = (0..self.classes()).filter_map(|c| self.iou(c)).collect();
        ious.sort_by(f64::total_cmp);
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub confusion: Confusion,
    pub pixels: usize,
    /// Class shares of the submitted labels, when known.
    pub label_distribution: Vec<f64>,
}

impl EvalReport {
    pub fn from_confusion(confusion: Confusion) -> Result<Self> {
        if confusion.total() == 0 {
            return Err(Error::Empty("evaluation truth"));
        }
        Ok(EvalReport {
            accuracy: confusion.accuracy(),
            per_class_iou: (0..confusion.classes()).map(|c| confusion.iou(c)).collect(),
            mean_iou: confusion.mean_iou(),
            pixels: confusion.total() as usize,
            label_distribution: Vec::new(),
            confusion,
        })
    }

    pub fn with_label_distribution(mut self, labels: &[LabelPoint]) -> Self {
        self.label_distribution = label_distribution(labels, self.confusion.classes());
        self
    }

    /// `key = value` rendering; per-class entries use the class index.
    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.push("accuracy", self.accuracy)
            .push("mean_iou", self.mean_iou)
            .push("pixels", self.pixels)
            .push("classes", self.confusion.classes());
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            doc.push(format!("iou.{c}"), iou.map_or("absent".to_string(), |v| v.to_string()));
        }
        for (c, row) in self.confusion.counts.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            doc.push(format!("confusion.{c}"), cells.join(" "));
        }
        for (c, share) in self.label_distribution.iter().enumerate() {
            doc.push(format!("label_share.{c}"), share);
        }
        doc
    }
}

/// Fraction of `labels` in each class `< classes`.
pub fn label_distribution(labels: &[LabelPoint], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for l in labels {
        if l.class < classes {
            counts[l.class] += 1;
        }
    }
    if labels.is_empty() {
        return vec![0.0; classes];
    }
    counts.iter().map(|&c| c as f64 / labels.len() as f64).collect()
}

/// Compare two aligned class rasters.
pub fn evaluate_rasters(pred: &ClassRaster, truth: &ClassRaster, classes: usize) -> Result<EvalReport> {
    if (pred.rows, pred.cols) != (truth.rows, truth.cols) {
        return Err(Error::Coordinate {
            row: pred.rows,
            col: pred.cols,
            extent: format!("truth raster {}x{}", truth.rows, truth.cols),
        });
    }
    let mut confusion = Confusion::new(classes);
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        confusion.add(t as usize, p as usize)?;
    }
    EvalReport::from_confusion(confusion)
}

/// Compare a scene prediction against scene-coordinate ground truth over the
/// prediction's extent.
pub fn evaluate_prediction(pred: &ScenePrediction, truth: &ClassRaster) -> Result<EvalReport> {
    let truth = truth.crop(pred.extent)?;
    let argmax = ClassRaster::new(pred.extent.rows, pred.extent.cols, pred.argmax_raster())?;
    evaluate_rasters(&argmax, &truth, pred.classes())
}

/// Compare a scene prediction against sparse scene-coordinate points. Truth
/// classes the model does not know yet count as errors.
pub fn evaluate_points(pred: &ScenePrediction, points: &[LabelPoint]) -> Result<EvalReport> {
    if points.is_empty() {
        return Err(Error::Empty("evaluation points"));
    }
    let classes = points
        .iter()
        .map(|p| p.class + 1)
        .max()
        .unwrap_or(0)
        .max(pred.classes());
    let mut confusion = Confusion::new(classes);
    for p in points {
        if !pred.extent.contains(p.row, p.col) {
            return Err(Error::Coordinate {
                row: p.row,
                col: p.col,
                extent: format!("prediction extent {}", pred.extent),
            });
        }
        confusion.add(p.class, pred.argmax_at(p.row, p.col))?;
    }
    EvalReport::from_confusion(confusion)
}

/// Isotropic Gaussian KDE of `points` on the pixel grid of `extent`,
/// normalized to integrate to one over the plane.
pub fn label_density_surface(points: &[LabelPoint], extent: Extent, bandwidth: f64) -> Result<Tensor<f64>> {
    if points.is_empty() {
        return Err(Error::Empty("density points"));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::config(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let norm = 1.0 / (points.len() as f64 * 2.0 * std::f64::consts::PI * bandwidth * bandwidth);
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let kernel = |start: usize, len: usize, at: usize| -> Vec<f64> {
        (0..len)
            .map(|i| {
                let d = (start + i) as f64 - at as f64;
                (-d * d * inv).exp()
            })
            .collect()
    };
    let mut out = vec![0.0; extent.area()];
    for p in points {
        let kr = kernel(extent.row0, extent.rows, p.row);
        let kc = kernel(extent.col0, extent.cols, p.col);
        for (i, wr) in kr.iter().enumerate() {
            for (j, wc) in kc.iter().enumerate() {
                out[i * extent.cols + j] += wr * wc;
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= norm);
    Tensor::new(vec![extent.rows, extent.cols], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_hand_example() {
        let pred = ClassRaster::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        let truth = ClassRaster::new(2, 2, vec![0, 1, 1, 1]).unwrap();
        let r = evaluate_rasters(&pred, &truth, 2).unwrap();
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.per_class_iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((r.mean_iou - 0.583_333_333).abs() < 1e-6);
    }

    #[test]
    fn absent_class_excluded() {
        let a = ClassRaster::new(1, 3, vec![0, 1, 1]).unwrap();
        let r = evaluate_rasters(&a, &a, 4).unwrap();
        assert_eq!(r.mean_iou, 1.0);
        assert_eq!(r.per_class_iou[3], None);
    }

    #[test]
    fn errors() {
        let a = ClassRaster::new(1, 2, vec![0, 1]).unwrap();
        let b = ClassRaster::new(2, 1, vec![0, 1]).unwrap();
        assert!(matches!(evaluate_rasters(&a, &b, 2), Err(Error::Coordinate { .. })));
        let e = ClassRaster::new(0, 0, vec![]).unwrap();
        assert!(matches!(evaluate_rasters(&e, &e, 2), Err(Error::Empty(_))));
        assert!(matches!(
            label_density_surface(&[], Extent::new(0, 0, 2, 2), 1.0),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn kde_peak_and_mass() {
        let ext = Extent::new(0, 0, 64, 64);
        let s = label_density_surface(&[LabelPoint::new(30, 20, 0)], ext, 3.0).unwrap();
        let (best, _) = s
            .data()
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        assert_eq!((best / 64, best % 64), (30, 20));
        let sum: f64 = s.data().iter().sum();
        assert!((sum - 1.0).abs() < 0.05);
        let twice = label_density_surface(&[LabelPoint::new(30, 20, 0); 2], ext, 3.0).unwrap();
        for (a, b) in s.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
