use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::EpisodeResult;
use crate::blockworld::{COLOR_NAMES, N_COLORS};
use crate::error::{Error, Result};

pub const N_BEHAVIORS: usize = N_COLORS + 1;
pub const NONE_INDEX: usize = N_COLORS;

pub fn behavior_name(i: usize) -> &'static str {
    COLOR_NAMES.get(i).copied().unwrap_or("none")
}

pub fn behavior_index(b: Option<usize>) -> usize {
    b.unwrap_or(NONE_INDEX)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRates {
    pub seed: u64,
    pub episodes: usize,
    pub rates: [f64; N_BEHAVIORS],
}

impl SeedRates {
    pub fn from_episodes(seed: u64, episodes: &[EpisodeResult]) -> Self {
        let mut counts = [0usize; N_BEHAVIORS];
        for e in episodes {
            counts[behavior_index(e.behavior)] += 1;
        }
        let n = episodes.len().max(1) as f64;
        Self {
            seed,
            episodes: episodes.len(),
            rates: counts.map(|c| c as f64 / n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorRow {
    pub method: String,
    pub per_seed: Vec<SeedRates>,
    pub mean: [f64; N_BEHAVIORS],
    /// Sample standard deviation over seeds divided by sqrt(#seeds).
    pub stderr: [f64; N_BEHAVIORS],
}

impl BehaviorRow {
    pub fn new(method: impl Into<String>, per_seed: Vec<SeedRates>) -> Self {
        let n = per_seed.len();
        let mut mean = [0.0; N_BEHAVIORS];
        let mut stderr = [0.0; N_BEHAVIORS];
        if n > 0 {
            for b in 0..N_BEHAVIORS {
                let m = per_seed.iter().map(|s| s.rates[b]).sum::<f64>() / n as f64;
                mean[b] = m;
                if n > 1 {
                    let var = per_seed.iter().map(|s| (s.rates[b] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
                    stderr[b] = (var / n as f64).sqrt();
                }
            }
        }
        Self {
            method: method.into(),
            per_seed,
            mean,
            stderr,
        }
    }

    /// Episode-weighted frequency of one behavior over all seeds.
    pub fn pooled(&self, b: usize) -> f64 {
        let total: usize = self.per_seed.iter().map(|s| s.episodes).sum();
        let hits: f64 = self.per_seed.iter().map(|s| s.rates[b] * s.episodes as f64).sum();
        hits / total.max(1) as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BehaviorTable {
    pub rows: Vec<BehaviorRow>,
}

impl BehaviorTable {
    pub fn row(&self, method: &str) -> Option<&BehaviorRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// SHA-256 of the compact JSON encoding with object keys sorted.
pub fn canonical_hash(v: &Value) -> String {
    // serde_json's default map is ordered by key, so a round trip through
    // Value already sorts every object.
    let sorted: Value = serde_json::from_str(&v.to_string()).expect("valid JSON");
    hex::encode(Sha256::digest(sorted.to_string().as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsDocument {
    pub spec: Value,
    pub spec_hash: String,
    pub table: BehaviorTable,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Serialize)]
struct PlotSeries<'a> {
    method: &'a str,
    mean: &'a [f64; N_BEHAVIORS],
    stderr: &'a [f64; N_BEHAVIORS],
}

#[derive(Serialize)]
struct PlotData<'a> {
    behaviors: Vec<&'static str>,
    series: Vec<PlotSeries<'a>>,
}

pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_JSON: &str = "results.json";
pub const PLOTDATA_JSON: &str = "plotdata.json";

/// Writes `results.csv`, `results.json` and `plotdata.json` into `out_dir`.
pub fn emit_report(table: &BehaviorTable, spec: &Value, notes: &[String], out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let csv_path = out_dir.join(RESULTS_CSV);
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::io(&csv_path, e.into()))?;
    let csv_err = |e: csv::Error| Error::io(&csv_path, e.into());
    w.write_record(["method", "behavior", "mean", "stderr"]).map_err(csv_err)?;
    for row in &table.rows {
        for b in 0..N_BEHAVIORS {
            w.write_record([row.method.as_str(), behavior_name(b), &row.mean[b].to_string(), &row.stderr[b].to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let doc = ResultsDocument {
        spec: spec.clone(),
        spec_hash: canonical_hash(spec),
        table: table.clone(),
        notes: notes.to_vec(),
    };
    write_json(&out_dir.join(RESULTS_JSON), &doc)?;
    let plot = PlotData {
        behaviors: (0..N_BEHAVIORS).map(behavior_name).collect(),
        series: table
            .rows
            .iter()
            .map(|r| PlotSeries {
                method: &r.method,
                mean: &r.mean,
                stderr: &r.stderr,
            })
            .collect(),
    };
    write_json(&out_dir.join(PLOTDATA_JSON), &plot)
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &t in &idx[i..=j] {
            r[t] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation of `xs` against its index, ties averaged.
/// NaN for fewer than two points or a constant sequence.
pub fn spearman(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let rx = ranks(xs);
    let ri: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let mean = (n - 1) as f64 / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (a, b) = (rx[i] - mean, ri[i] - mean);
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    sxy / (sxx * syy).sqrt()
}

pub fn read_results(out_dir: &Path) -> Result<ResultsDocument> {
    let path = out_dir.join(RESULTS_JSON);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}
