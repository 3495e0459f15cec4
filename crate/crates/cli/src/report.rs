use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};
use vla_align_core::probes::{summarize, wilcoxon_one_sided, PairedSamples};
use vla_align_core::taskgen::{Axis, Environment};

use crate::pipeline::{read_json, EnvRecord, EvalOutput, ProbeOutput};

pub const BASELINE_CELL: &str = "default";
pub const EXPERT_CELL: &str = "expert";
/// Axis label of the in-distribution set.
pub const ID_AXIS: &str = "in_distribution";
/// Environment label of per-axis aggregate rows.
pub const ALL_ENVIRONMENTS: &str = "all";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub cell: String,
    pub axis: String,
    pub environment: String,
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    /// One-sided Wilcoxon p-value for `cell > default` over shared seeds.
    pub p_vs_default: Option<f64>,
}

/// One row per cell: axis means and their average, as in ablation tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: String,
    pub axes: BTreeMap<String, f64>,
    pub average: f64,
    pub sd: f64,
    pub p_vs_default: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRowSummary {
    pub cell: String,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub p_vs_default: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub config_hash: String,
    pub rows: Vec<ReportRow>,
    pub ablation: Vec<AblationRow>,
    pub probes: Vec<ProbeRowSummary>,
    pub evals: Vec<EvalOutput>,
    pub probe_records: Vec<ProbeOutput>,
}

/// Per-seed values of one statistic for each cell.
type Series = BTreeMap<String, BTreeMap<u64, f64>>;

fn axis_label(r: &EnvRecord) -> String {
    r.axis.clone().unwrap_or_else(|| ID_AXIS.to_string())
}

/// Orders cells with the baseline first and the expert last.
fn cell_order(cells: impl Iterator<Item = String>) -> Vec<String> {
    let mut v: Vec<String> = cells.collect();
    v.sort();
    v.dedup();
    v.sort_by_key(|c| match c.as_str() {
        BASELINE_CELL => 0,
        EXPERT_CELL => 2,
        _ => 1,
    });
    v
}

/// Paired one-sided test of `series[cell] > series[default]` on shared seeds.
pub fn p_vs_default(series: &Series, cell: &str) -> Option<f64> {
    if cell == BASELINE_CELL || cell == EXPERT_CELL {
        return None;
    }
    let base = series.get(BASELINE_CELL)?;
    let other = series.get(cell)?;
    let shared: Vec<u64> = other.keys().filter(|s| base.contains_key(s)).copied().collect();
    if shared.is_empty() {
        return None;
    }
    let a = shared.iter().map(|s| base[s]).collect();
    let b = shared.iter().map(|s| other[s]).collect();
    Some(wilcoxon_one_sided(&PairedSamples::new(a, b).ok()?).p_value)
}

fn summary_row(series: &Series, cell: &str) -> Result<(usize, f64, f64, Option<f64>)> {
    let vals: Vec<f64> = series[cell].values().copied().collect();
    let s = summarize(&vals)?;
    Ok((s.n, s.mean, s.sd, p_vs_default(series, cell)))
}

/// Aggregates evaluation and probe outputs. Every input must carry `hash`.
pub fn build_report(
    hash: &str,
    evals: Vec<EvalOutput>,
    probes: Vec<ProbeOutput>,
    expert: Option<(Vec<u64>, Vec<EnvRecord>)>,
) -> Result<ReportTable> {
    for h in evals.iter().map(|e| &e.config_hash).chain(probes.iter().map(|p| &p.config_hash)) {
        if h != hash {
            bail!("refusing to mix artifacts from config {h} with config {hash}");
        }
    }
    let mut evals = evals;
    if let Some((seeds, records)) = expert {
        for s in seeds {
            evals.push(EvalOutput {
                config_hash: hash.to_string(),
                cell: EXPERT_CELL.to_string(),
                seed: s,
                records: records.clone(),
            });
        }
    }
    evals.sort_by(|a, b| (&a.cell, a.seed).cmp(&(&b.cell, b.seed)));

    // (axis, environment) -> series; environment "all" aggregates an axis.
    let mut by_env: BTreeMap<(String, String), Series> = BTreeMap::new();
    let mut env_order: Vec<(String, String)> = Vec::new();
    let push_key = |k: (String, String), order: &mut Vec<(String, String)>| {
        if !order.contains(&k) {
            order.push(k);
        }
    };
    let mut avg: Series = BTreeMap::new();
    let mut axis_means: BTreeMap<String, Series> = BTreeMap::new();
    for e in &evals {
        let mut per_axis: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &e.records {
            let key = (axis_label(r), r.environment.name().to_string());
            push_key(key.clone(), &mut env_order);
            by_env.entry(key).or_default().entry(e.cell.clone()).or_default().insert(e.seed, r.rate);
            if let Some(a) = &r.axis {
                per_axis.entry(a.clone()).or_default().push(r.rate);
            }
        }
        let mut axis_vals = Vec::new();
        for (a, rates) in per_axis {
            let m = rates.iter().sum::<f64>() / rates.len() as f64;
            axis_vals.push(m);
            axis_means.entry(a.clone()).or_default().entry(e.cell.clone()).or_default().insert(e.seed, m);
            by_env
                .entry((a, ALL_ENVIRONMENTS.to_string()))
                .or_default()
                .entry(e.cell.clone())
                .or_default()
                .insert(e.seed, m);
        }
        if !axis_vals.is_empty() {
            let m = axis_vals.iter().sum::<f64>() / axis_vals.len() as f64;
            avg.entry(e.cell.clone()).or_default().insert(e.seed, m);
        }
    }
    // Environment rows in canonical order, each axis followed by its aggregate.
    let mut keys: Vec<(String, String)> = Vec::new();
    for env in Environment::ALL {
        let k = (env.axis().map_or(ID_AXIS.to_string(), |a| a.name().to_string()), env.name().to_string());
        if env_order.contains(&k) {
            keys.push(k);
        }
    }
    for axis in Axis::ALL {
        let k = (axis.name().to_string(), ALL_ENVIRONMENTS.to_string());
        if by_env.contains_key(&k) {
            let pos = keys.iter().rposition(|(a, _)| a == axis.name()).map_or(keys.len(), |p| p + 1);
            keys.insert(pos, k);
        }
    }

    let cells = cell_order(evals.iter().map(|e| e.cell.clone()));
    let mut rows = Vec::new();
    for cell in &cells {
        for k in &keys {
            let series = &by_env[k];
            if !series.contains_key(cell) {
                continue;
            }
            let (n, mean, sd, p) = summary_row(series, cell)?;
            rows.push(ReportRow {
                cell: cell.clone(),
                axis: k.0.clone(),
                environment: k.1.clone(),
                n,
                mean,
                sd,
                p_vs_default: p,
            });
        }
    }

    let mut ablation = Vec::new();
    for cell in &cells {
        if !avg.contains_key(cell) {
            continue;
        }
        let axes = axis_means
            .iter()
            .filter_map(|(a, s)| {
                let v: Vec<f64> = s.get(cell)?.values().copied().collect();
                Some((a.clone(), v.iter().sum::<f64>() / v.len() as f64))
            })
            .collect();
        let (_, mean, sd, p) = summary_row(&avg, cell)?;
        ablation.push(AblationRow {
            cell: cell.clone(),
            axes,
            average: mean,
            sd,
            p_vs_default: p,
        });
    }

    let mut probes = probes;
    probes.sort_by(|a, b| (&a.cell, a.seed).cmp(&(&b.cell, b.seed)));
    let mut metric_series: BTreeMap<&str, Series> = BTreeMap::new();
    for p in &probes {
        for (m, v) in [
            ("separability", p.separability),
            ("linear_probe", p.linear_probe),
            ("attention_focus", p.attention_focus),
        ] {
            metric_series.entry(m).or_default().entry(p.cell.clone()).or_default().insert(p.seed, v);
        }
    }
    let mut probe_rows = Vec::new();
    for cell in cell_order(probes.iter().map(|p| p.cell.clone())) {
        for m in ["separability", "linear_probe", "attention_focus"] {
            let Some(series) = metric_series.get(m) else { continue };
            let (n, mean, sd, p) = summary_row(series, &cell)?;
            probe_rows.push(ProbeRowSummary {
                cell: cell.clone(),
                metric: m.to_string(),
                n,
                mean,
                sd,
                p_vs_default: p,
            });
        }
    }

    Ok(ReportTable {
        config_hash: hash.to_string(),
        rows,
        ablation,
        probes: probe_rows,
        evals,
        probe_records: probes,
    })
}

fn fmt_p(p: Option<f64>) -> String {
    p.map(|v| v.to_string()).unwrap_or_default()
}

impl ReportTable {
    pub fn report_csv(&self) -> String {
        let mut s = format!("# config_hash={}\ncell,axis,environment,mean,sd,p_vs_default\n", self.config_hash);
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.cell, r.axis, r.environment, r.mean, r.sd, fmt_p(r.p_vs_default));
        }
        s
    }

    pub fn ablation_csv(&self) -> String {
        let axes: Vec<&str> = Axis::ALL
            .iter()
            .map(|a| a.name())
            .filter(|a| self.ablation.iter().any(|r| r.axes.contains_key(*a)))
            .collect();
        let mut s = format!("# config_hash={}\ncell,{},average,sd,p_vs_default\n", self.config_hash, axes.join(","));
        for r in &self.ablation {
            let cols: Vec<String> = axes
                .iter()
                .map(|a| r.axes.get(*a).map(|v| v.to_string()).unwrap_or_default())
                .collect();
            let _ = writeln!(s, "{},{},{},{},{}", r.cell, cols.join(","), r.average, r.sd, fmt_p(r.p_vs_default));
        }
        s
    }

    pub fn probes_csv(&self) -> String {
        let mut s = format!("# config_hash={}\ncell,metric,mean,sd,p_vs_default\n", self.config_hash);
        for r in &self.probes {
            let _ = writeln!(s, "{},{},{},{},{}", r.cell, r.metric, r.mean, r.sd, fmt_p(r.p_vs_default));
        }
        s
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out)?;
        fs::write(out.join("report.csv"), self.report_csv())?;
        fs::write(out.join("ablation.csv"), self.ablation_csv())?;
        fs::write(out.join("probes.csv"), self.probes_csv())?;
        fs::write(out.join("report.json"), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn row(&self, cell: &str, axis: &str, environment: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.cell == cell && r.axis == axis && r.environment == environment)
    }

    pub fn probe(&self, cell: &str, metric: &str) -> Option<&ProbeRowSummary> {
        self.probes.iter().find(|r| r.cell == cell && r.metric == metric)
    }
}

/// Collects every `eval.json` and `probe.json` below `cells_dir`.
pub fn collect_outputs(cells_dir: &Path) -> Result<(Vec<EvalOutput>, Vec<ProbeOutput>)> {
    let mut evals = Vec::new();
    let mut probes = Vec::new();
    if !cells_dir.exists() {
        return Ok((evals, probes));
    }
    let mut cell_dirs: Vec<_> = fs::read_dir(cells_dir)?.collect::<std::io::Result<_>>()?;
    cell_dirs.sort_by_key(|e| e.file_name());
    for cell in cell_dirs {
        let mut seeds: Vec<_> = fs::read_dir(cell.path())?.collect::<std::io::Result<_>>()?;
        seeds.sort_by_key(|e| e.file_name());
        for seed in seeds {
            let e = seed.path().join("eval.json");
            if e.exists() {
                evals.push(read_json(&e)?);
            }
            let p = seed.path().join("probe.json");
            if p.exists() {
                probes.push(read_json(&p)?);
            }
        }
    }
    Ok((evals, probes))
}
