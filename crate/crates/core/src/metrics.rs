//! Binary segmentation metrics and the CSV report.
//!
//! Per query, pixel counts are pooled over all evaluated views before IoU,
//! pixel accuracy and precision are taken; means are over queries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_masks(pred: &Mask, gt: &Mask) -> Result<Self> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::shape(
                format!("{}x{}", gt.height(), gt.width()),
                format!("{}x{}", pred.height(), pred.width()),
            ));
        }
        let mut c = Confusion::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn add(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    /// `|∩| / |∪|`; two empty masks score 1.
    pub fn iou(&self) -> f64 {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }

    /// `(TP + TN) / total`.
    pub fn pixel_accuracy(&self) -> f64 {
        let total = self.tp + self.fp + self.fn_ + self.tn;
        if total == 0 {
            1.0
        } else {
            (self.tp + self.tn) as f64 / total as f64
        }
    }

    /// `TP / (TP + FP)`; an empty prediction scores 0.
    pub fn precision(&self) -> f64 {
        let predicted = self.tp + self.fp;
        if predicted == 0 {
            0.0
        } else {
            self.tp as f64 / predicted as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query: String,
    pub iou: f64,
    pub pa: f64,
    pub p: f64,
}

impl QueryMetrics {
    pub fn from_confusion(query: impl Into<String>, c: &Confusion) -> Self {
        Self {
            query: query.into(),
            iou: c.iou(),
            pa: c.pixel_accuracy(),
            p: c.precision(),
        }
    }
}

/// IoU, PA and P of a single prediction.
pub fn metrics(pred: &Mask, gt: &Mask) -> Result<(f64, f64, f64)> {
    let c = Confusion::from_masks(pred, gt)?;
    Ok((c.iou(), c.pixel_accuracy(), c.precision()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub miou: f64,
    pub mpa: f64,
    pub mp: f64,
    pub per_query: Vec<QueryMetrics>,
}

impl SegMetrics {
    pub fn from_queries(per_query: Vec<QueryMetrics>) -> Self {
        let n = per_query.len().max(1) as f64;
        Self {
            miou: per_query.iter().map(|q| q.iou).sum::<f64>() / n,
            mpa: per_query.iter().map(|q| q.pa).sum::<f64>() / n,
            mp: per_query.iter().map(|q| q.p).sum::<f64>() / n,
            per_query,
        }
    }

    /// `query,iou,pa,p` rows plus a final `mean` row, six decimals.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["query", "iou", "pa", "p"])?;
        let fmt = |v: f64| format!("{v:.6}");
        for q in &self.per_query {
            w.write_record([q.query.clone(), fmt(q.iou), fmt(q.pa), fmt(q.p)])?;
        }
        w.write_record(["mean".to_string(), fmt(self.miou), fmt(self.mpa), fmt(self.mp)])?;
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Format {
                        format: "report csv",
                        reason: format!("bad number in column {i}"),
                    })
            };
            rows.push(QueryMetrics {
                query: rec.get(0).unwrap_or_default().to_string(),
                iou: num(1)?,
                pa: num(2)?,
                p: num(3)?,
            });
        }
        let mean = rows.pop().filter(|m| m.query == "mean").ok_or_else(|| Error::Format {
            format: "report csv",
            reason: "missing mean row".into(),
        })?;
        Ok(Self {
            miou: mean.iou,
            mpa: mean.pa,
            mp: mean.p,
            per_query: rows,
        })
    }
}
