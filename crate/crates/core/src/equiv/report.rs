//! Meter output and its CSV/JSON forms.
//!
//! CSV: header `layer,element,mse`, one row per (conv block, group element),
//! identity rows included with `mse = 0`.
//!
//! JSON:
//! ```text
//! { "group": "R4", "sample_size": 256, "seed": 1, "model": "...",
//!   "layers": [ { "layer": 5, "total": 1.2e-4, "mean": 4.0e-5,
//!                 "magnitude": -5,
//!                 "elements": [ { "element": "rot90", "mse": ... }, ... ] } ] }
//! ```
//! `total` sums the non-identity elements, `mean` averages them and
//! `magnitude` is `floor(log10(mean))` (`null` when the mean is 0).

use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportEntry {
    pub layer: usize,
    pub element: String,
    #[serde(skip)]
    pub identity: bool,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub total: f64,
    pub mean: f64,
    pub magnitude: Option<i32>,
    pub elements: Vec<ReportEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivarianceReport {
    pub group: String,
    pub sample_size: usize,
    pub seed: Option<u64>,
    pub model: Option<String>,
    pub layers: Vec<LayerSummary>,
}

/// `floor(log10(v))`, `None` for zero.
pub fn magnitude(v: f64) -> Option<i32> {
    (v > 0.0).then(|| v.log10().floor() as i32)
}

impl EquivarianceReport {
    pub(crate) fn new(group: String, sample_size: usize, entries: Vec<ReportEntry>) -> Self {
        let mut layers: Vec<LayerSummary> = Vec::new();
        for e in entries {
            if layers.last().is_none_or(|l| l.layer != e.layer) {
                layers.push(LayerSummary {
                    layer: e.layer,
                    total: 0.0,
                    mean: 0.0,
                    magnitude: None,
                    elements: Vec::new(),
                });
            }
            layers.last_mut().unwrap().elements.push(e);
        }
        for l in &mut layers {
            let non_id: Vec<f64> = l.elements.iter().filter(|e| !e.identity).map(|e| e.mse).collect();
            l.total = non_id.iter().sum();
            l.mean = if non_id.is_empty() { 0.0 } else { l.total / non_id.len() as f64 };
            l.magnitude = magnitude(l.mean);
        }
        EquivarianceReport {
            group,
            sample_size,
            seed: None,
            model: None,
            layers,
        }
    }

    pub fn with_metadata(mut self, model: impl Into<String>, seed: u64) -> Self {
        self.model = Some(model.into());
        self.seed = Some(seed);
        self
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerSummary> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    /// Largest single (layer, element) reading.
    pub fn max_mse(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.elements.iter().map(|e| e.mse))
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,element,mse\n");
        for l in &self.layers {
            for e in &l.elements {
                out.push_str(&format!("{},{},{:e}\n", e.layer, e.element, e.mse));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
