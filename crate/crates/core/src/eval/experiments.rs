use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{Metrics, MetricsReport, KS};
use crate::config::RunConfig;
use crate::pipeline::{self, PipelineError};
use crate::tree2vec::Ablation;

/// Metric of one run of one variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRun {
    pub variant: String,
    pub seed: u64,
    pub epochs: usize,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub runs: Vec<VariantRun>,
    pub popularity: Vec<MetricsReport>,
    /// Seed-averaged report per variant, in run order.
    pub mean: Vec<(String, MetricsReport)>,
}

fn average(reports: &[&MetricsReport]) -> MetricsReport {
    let n = reports.len().max(1) as f64;
    let per_k = KS
        .iter()
        .map(|&k| {
            let mut m = Metrics::default();
            for r in reports {
                let x = r.get(k);
                m.hr += x.hr;
                m.ndcg += x.ndcg;
                m.mrr += x.mrr;
            }
            (k, Metrics { hr: m.hr / n, ndcg: m.ndcg / n, mrr: m.mrr / n })
        })
        .collect();
    MetricsReport {
        per_k,
        n_interactions: reports.iter().map(|r| r.n_interactions).sum(),
        meta: BTreeMap::new(),
    }
}

fn columns(r: &MetricsReport) -> Vec<f64> {
    let mut v = Vec::with_capacity(12);
    v.extend(KS.iter().map(|&k| r.get(k).hr));
    v.extend(KS.iter().map(|&k| r.get(k).ndcg));
    v.extend(KS.iter().map(|&k| r.get(k).mrr));
    v
}

fn header() -> Vec<String> {
    ["HR", "NDCG", "MRR"].iter().flat_map(|m| KS.iter().map(move |k| format!("{m}@{k}"))).collect()
}

impl AblationResult {
    pub fn mean_of(&self, variant: &str) -> Option<&MetricsReport> {
        self.mean.iter().find(|(v, _)| v == variant).map(|(_, r)| r)
    }

    pub fn popularity_mean(&self) -> MetricsReport {
        average(&self.popularity.iter().collect::<Vec<_>>())
    }

    /// Percent change of the full model over the best other variant, per
    /// column.
    pub fn delta_row(&self) -> Option<Vec<f64>> {
        let full = columns(self.mean_of("full")?);
        let others: Vec<Vec<f64>> = self.mean.iter().filter(|(v, _)| v != "full").map(|(_, r)| columns(r)).collect();
        if others.is_empty() {
            return None;
        }
        Some(
            (0..full.len())
                .map(|c| {
                    let best = others.iter().map(|o| o[c]).fold(f64::NEG_INFINITY, f64::max);
                    if best > 0.0 {
                        100.0 * (full[c] - best) / best
                    } else {
                        f64::NAN
                    }
                })
                .collect(),
        )
    }

    /// Variant rows, then the delta row, as CSV.
    pub fn table_csv(&self) -> String {
        let mut s = format!("variant,{}\n", header().join(","));
        for (v, r) in &self.mean {
            let cols: Vec<String> = columns(r).iter().map(|x| x.to_string()).collect();
            let _ = writeln!(s, "{v},{}", cols.join(","));
        }
        if let Some(d) = self.delta_row() {
            let cols: Vec<String> = d.iter().map(|x| format!("{x:.2}%")).collect();
            let _ = writeln!(s, "GReS vs. best variant,{}", cols.join(","));
        }
        s
    }

    pub fn table_pretty(&self) -> String {
        let mut s = format!("{:<22}", "variant");
        for h in header() {
            let _ = write!(s, "{h:>9}");
        }
        s.push('\n');
        for (v, r) in &self.mean {
            let _ = write!(s, "{v:<22}");
            for x in columns(r) {
                let _ = write!(s, "{x:>9.4}");
            }
            s.push('\n');
        }
        if let Some(d) = self.delta_row() {
            let _ = write!(s, "{:<22}", "GReS vs. best variant");
            for x in d {
                let _ = write!(s, "{:>9}", format!("{x:.2}%"));
            }
            s.push('\n');
        }
        s
    }
}

/// Trains and evaluates every variant on the same data, split and seeds.
/// Each seed regenerates the dataset and graphs from `cfg` with that seed.
pub fn run_ablation(cfg: &RunConfig, variants: &[Ablation], seeds: &[u64]) -> Result<AblationResult, PipelineError> {
    let mut runs = Vec::new();
    let mut popularity = Vec::new();
    for &seed in seeds {
        let cfg = RunConfig { seed, ..cfg.clone() };
        let ds = pipeline::generate(&cfg)?;
        let graphs = pipeline::build_graphs(&ds, &cfg)?;
        popularity.push(pipeline::evaluate_popularity(&ds, &graphs.split, &cfg)?);
        for ab in variants {
            let t = pipeline::train_variant(&ds, &graphs, &cfg, ab)?;
            let report = pipeline::evaluate_model(&t.model, &t.inputs, &graphs.split, &cfg)?;
            log::info!("seed {seed} {}: HR@10 {:.4}", ab.label(), report.get(10).hr);
            runs.push(VariantRun { variant: ab.label().to_string(), seed, epochs: t.outcome.history.len(), report });
        }
    }
    let mean = variants
        .iter()
        .map(|ab| {
            let rs: Vec<&MetricsReport> = runs.iter().filter(|r| r.variant == ab.label()).map(|r| &r.report).collect();
            (ab.label().to_string(), average(&rs))
        })
        .collect();
    Ok(AblationResult { runs, popularity, mean })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: f64,
    pub k: usize,
    pub metric: String,
    pub value: f64,
}

/// Regenerates the dataset at each unique-user proportion, trains the
/// configured variant and records every metric.
pub fn run_m_sweep(cfg: &RunConfig, m_values: &[f64]) -> Result<Vec<SweepRow>, PipelineError> {
    let mut rows = Vec::new();
    for &m in m_values {
        let mut c = cfg.clone();
        c.data = cfg.data.clone().with_unique_proportion(m);
        let ds = pipeline::generate(&c)?;
        let graphs = pipeline::build_graphs(&ds, &c)?;
        let t = pipeline::train_variant(&ds, &graphs, &c, &c.ablation)?;
        let report = pipeline::evaluate_model(&t.model, &t.inputs, &graphs.split, &c)?;
        log::info!("M {m}: HR@10 {:.4}", report.get(10).hr);
        for k in KS {
            let x = report.get(k);
            for (metric, value) in [("hr", x.hr), ("ndcg", x.ndcg), ("mrr", x.mrr)] {
                rows.push(SweepRow { m, k, metric: metric.into(), value });
            }
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("m,k,metric,value\n");
    for r in rows {
        let _ = writeln!(s, "{:.3},{},{},{}", r.m, r.k, r.metric, r.value);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(hr10: f64) -> MetricsReport {
        let per_k = KS.iter().map(|&k| (k, Metrics { hr: hr10, ndcg: hr10 / 2.0, mrr: hr10 / 4.0 })).collect();
        MetricsReport { per_k, n_interactions: 10, meta: BTreeMap::new() }
    }

    #[test]
    fn table_has_twelve_metric_columns_and_delta() {
        let r = AblationResult {
            runs: vec![],
            popularity: vec![],
            mean: vec![("full".into(), report(0.5)), ("no-tree".into(), report(0.4)), ("no-gcn".into(), report(0.25))],
        };
        let csv = r.table_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0].split(',').count(), 13);
        assert_eq!(lines.len(), 5);
        assert!(lines[4].starts_with("GReS vs. best variant,25.00%"));
        assert!(r.table_pretty().contains("HR@50"));
    }

    #[test]
    fn averaging_is_per_column() {
        let (a, b) = (report(0.2), report(0.6));
        let m = average(&[&a, &b]);
        assert!((m.get(10).hr - 0.4).abs() < 1e-15);
        assert!((m.get(5).mrr - 0.1).abs() < 1e-15);
    }

    #[test]
    fn sweep_csv_rows() {
        let rows = vec![SweepRow { m: 0.015, k: 5, metric: "hr".into(), value: 0.25 }];
        assert_eq!(sweep_csv(&rows), "m,k,metric,value\n0.015,5,hr,0.25\n");
    }
}
