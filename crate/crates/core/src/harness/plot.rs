//! Plot-data JSON: the shape is fixed by `schemas/plot-data.schema.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The published JSON schema for [`PlotData`].
pub const PLOT_SCHEMA: &str = include_str!("../../schemas/plot-data.schema.json");

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLine {
    pub label: String,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    /// Row-major, `row_labels.len() x col_labels.len()`.
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub schema_version: u32,
    pub figure: String,
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    pub reference_lines: Vec<ReferenceLine>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heatmap: Option<Heatmap>,
}

impl PlotData {
    pub fn new(figure: &str, title: impl Into<String>, x_label: &str, y_label: &str) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            figure: figure.into(),
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            series: Vec::new(),
            reference_lines: Vec::new(),
            heatmap: None,
        }
    }

    /// JSON has no NaN or infinity, and a series needs matching lengths.
    pub fn check(&self) -> Result<()> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        for s in &self.series {
            if s.x.len() != s.y.len() {
                return Err(Error::Parameter(format!("series {:?}: x and y lengths differ", s.label)));
            }
            if !finite(&s.x) || !finite(&s.y) {
                return Err(Error::NonFinite("plot series"));
            }
        }
        if !self.reference_lines.iter().all(|r| r.y.is_finite()) {
            return Err(Error::NonFinite("plot reference line"));
        }
        if let Some(h) = &self.heatmap {
            if h.values.len() != h.row_labels.len()
                || h.values.iter().any(|r| r.len() != h.col_labels.len())
            {
                return Err(Error::Parameter("heat map shape differs from its labels".into()));
            }
            if !h.values.iter().all(|r| finite(r)) {
                return Err(Error::NonFinite("heat map"));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.check()?;
        super::write_json(path, self)
    }
}
