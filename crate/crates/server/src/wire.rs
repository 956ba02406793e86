//! JSON request and response bodies. Field names are the wire contract.

use base64::Engine;
use serde::{Deserialize, Serialize};

use landtune::eval::EvalReport;
use landtune::palette::{color_hex, parse_color_hex, Palette};
use landtune::session::{Metrics, MetricsEntry, PatchPrediction, RetrainOutcome, SceneSummary};
use landtune::{Extent, LabelPoint};

use crate::overlay;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtentWire {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl From<Extent> for ExtentWire {
    fn from(e: Extent) -> Self {
        ExtentWire {
            row0: e.row0,
            col0: e.col0,
            rows: e.rows,
            cols: e.cols,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassWire {
    pub name: String,
    /// `#rrggbb`.
    pub color: String,
}

pub fn palette_wire(p: &Palette) -> Vec<ClassWire> {
    p.classes()
        .iter()
        .map(|c| ClassWire {
            name: c.name.clone(),
            color: color_hex(c.color),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneInfo {
    pub id: String,
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    pub has_truth: bool,
    /// Pixels that can be predicted and labeled.
    pub labelable: ExtentWire,
}

impl From<SceneSummary> for SceneInfo {
    fn from(s: SceneSummary) -> Self {
        SceneInfo {
            id: s.id,
            rows: s.rows,
            cols: s.cols,
            bands: s.bands,
            has_truth: s.has_truth,
            labelable: s.extent.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenesResponse {
    pub scenes: Vec<SceneInfo>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionRequest {
    pub scene: String,
    #[serde(default)]
    pub method: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session: String,
    pub scene: String,
    pub method: String,
    pub palette: Vec<ClassWire>,
    pub labelable: ExtentWire,
    pub eval_points: usize,
    pub retrain_index: usize,
    pub checksum: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlayFormat {
    #[default]
    Png,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    pub row: usize,
    pub col: usize,
    #[serde(default)]
    pub size: Option<usize>,
    #[serde(default)]
    pub format: OverlayFormat,
}

/// Per-pixel argmax class and its probability, row-major over `extent`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "lowercase")]
pub enum OverlayData {
    /// Base64 PNGs: `classes` is 8-bit indexed with the session palette,
    /// `confidence` is 8-bit grayscale holding `round(255 · p)`.
    Png {
        classes: String,
        confidence: String,
    },
    Raw {
        classes: Vec<u8>,
        confidence: Vec<f32>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub extent: ExtentWire,
    pub input: ExtentWire,
    /// `extent` origin relative to `input` origin, `[rows, cols]`.
    pub offset: [usize; 2],
    pub checksum: u32,
    pub retrain_index: usize,
    #[serde(flatten)]
    pub overlay: OverlayData,
}

impl PredictResponse {
    pub fn build(p: PatchPrediction, format: OverlayFormat) -> landtune::Result<Self> {
        let overlay = match format {
            OverlayFormat::Raw => OverlayData::Raw {
                classes: p.classes,
                confidence: p.confidence,
            },
            OverlayFormat::Png => {
                let b64 = base64::engine::general_purpose::STANDARD;
                let (w, h) = (p.extent.cols, p.extent.rows);
                let conf: Vec<u8> = p
                    .confidence
                    .iter()
                    .map(|&c| (c.clamp(0.0, 1.0) * 255.0).round() as u8)
                    .collect();
                OverlayData::Png {
                    classes: b64.encode(overlay::indexed_png(w, h, &p.classes, &p.palette)?),
                    confidence: b64.encode(overlay::gray_png(w, h, &conf)?),
                }
            }
        };
        Ok(PredictResponse {
            extent: p.extent.into(),
            input: p.input.into(),
            offset: [p.offset.0, p.offset.1],
            checksum: p.checksum,
            retrain_index: p.retrain_index,
            overlay,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointWire {
    pub row: usize,
    pub col: usize,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelsRequest {
    pub points: Vec<PointWire>,
}

impl LabelsRequest {
    pub fn points(&self) -> Vec<LabelPoint> {
        self.points
            .iter()
            .map(|p| LabelPoint::new(p.row, p.col, p.class))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelsResponse {
    pub accepted: usize,
    pub updated: usize,
    pub label_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportWire {
    pub accuracy: f64,
    pub mean_iou: f64,
    /// `null` for classes absent from both prediction and truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub points: usize,
    pub label_distribution: Vec<f64>,
}

impl From<&EvalReport> for ReportWire {
    fn from(r: &EvalReport) -> Self {
        ReportWire {
            accuracy: r.accuracy,
            mean_iou: r.mean_iou,
            per_class_iou: r.per_class_iou.clone(),
            points: r.pixels,
            label_distribution: r.label_distribution.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainResponse {
    pub retrain_index: usize,
    pub checksum: u32,
    pub label_count: usize,
    /// The fine-tuned loss was worse than the starting loss, so the starting
    /// parameters were kept.
    pub fell_back: bool,
    pub elapsed_ms: f64,
    pub report: Option<ReportWire>,
}

impl From<&RetrainOutcome> for RetrainResponse {
    fn from(o: &RetrainOutcome) -> Self {
        RetrainResponse {
            retrain_index: o.retrain_index,
            checksum: o.checksum,
            label_count: o.label_count,
            fell_back: o.fell_back,
            elapsed_ms: o.elapsed.as_secs_f64() * 1e3,
            report: o.report.as_ref().map(ReportWire::from),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AddClassRequest {
    pub name: String,
    pub color: String,
}

impl AddClassRequest {
    pub fn color(&self) -> landtune::Result<[u8; 3]> {
        parse_color_hex(&self.color)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddClassResponse {
    pub index: usize,
    pub palette: Vec<ClassWire>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryWire {
    pub retrain_index: usize,
    pub timestamp_ms: u64,
    pub label_count: usize,
    pub report: Option<ReportWire>,
}

impl From<&MetricsEntry> for HistoryWire {
    fn from(e: &MetricsEntry) -> Self {
        HistoryWire {
            retrain_index: e.retrain_index,
            timestamp_ms: e.timestamp_ms,
            label_count: e.label_count,
            report: e.report.as_ref().map(ReportWire::from),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsResponse {
    pub history: Vec<HistoryWire>,
    pub label_count: usize,
    pub label_distribution: Vec<f64>,
}

impl From<&Metrics> for MetricsResponse {
    fn from(m: &Metrics) -> Self {
        MetricsResponse {
            history: m.history.iter().map(HistoryWire::from).collect(),
            label_count: m.label_count,
            label_distribution: m.label_distribution.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

/// Decode a request body; malformed JSON is a parse error.
pub fn decode<T: serde::de::DeserializeOwned>(body: &[u8]) -> landtune::Result<T> {
    serde_json::from_slice(body).map_err(|e| landtune::Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })
}
