use std::collections::BTreeSet;
use std::path::Path;

use super::{run_full, PipelineConfig, PipelineError, RunRecord};
use crate::corpus::load_manifest;
use crate::study::{StudyAggregate, AGGREGATE_FILE};

pub const COMPARISON_FILE: &str = "k_sweep.csv";

/// Directory holding a run's study, if one was created.
const STUDY_DIR: &str = "study";

/// Removes repeated values, keeping first occurrences in order.
pub fn dedupe_k_values(k_values: &[usize]) -> Vec<usize> {
    let mut seen = BTreeSet::new();
    let unique: Vec<usize> = k_values.iter().copied().filter(|k| seen.insert(*k)).collect();
    if unique.len() != k_values.len() {
        log::warn!("duplicate K values removed: {k_values:?} -> {unique:?}");
    }
    unique
}

/// One isolated run per K under `<output_root>/k<K>`, followed by a
/// comparison sheet at `<output_root>/k_sweep.csv`.
///
/// Every per-K configuration is validated before the first run starts.
pub fn k_sweep(config: &PipelineConfig, k_values: &[usize]) -> Result<Vec<RunRecord>, PipelineError> {
    if k_values.is_empty() {
        return Err(PipelineError::Config("k_values must not be empty".into()));
    }
    let configs: Vec<PipelineConfig> = dedupe_k_values(k_values)
        .into_iter()
        .map(|k| PipelineConfig {
            k,
            output_root: config.output_root.join(format!("k{k}")),
            ..config.clone()
        })
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let records = configs.iter().map(run_full).collect::<Result<Vec<_>, _>>()?;
    write_comparison_sheet(&config.output_root, &records)?;
    Ok(records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    pub pairs: usize,
    pub score_min: f64,
    pub score_mean: f64,
    pub score_median: f64,
    pub score_max: f64,
    pub structure_mean: Option<f64>,
    pub qs_avg: Option<f64>,
    pub qq_avg: Option<f64>,
}

fn row_for(record: &RunRecord) -> Result<SweepRow, PipelineError> {
    let manifest = load_manifest(&record.matched_manifest)?;
    let mut scores: Vec<f64> = manifest.pairs.iter().map(|p| p.score).collect();
    scores.sort_by(f64::total_cmp);
    let n = scores.len();
    let (min, max, mean, median) = if n == 0 {
        (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
    } else {
        let median = if n % 2 == 1 {
            scores[n / 2]
        } else {
            (scores[n / 2 - 1] + scores[n / 2]) / 2.0
        };
        (scores[0], scores[n - 1], scores.iter().sum::<f64>() / n as f64, median)
    };
    let structure: Vec<f64> = record.items.iter().filter_map(|i| i.structure_score).collect();
    let structure_mean =
        (!structure.is_empty()).then(|| structure.iter().sum::<f64>() / structure.len() as f64);
    let aggregate = find_aggregate(&record.output_root.join(STUDY_DIR));
    Ok(SweepRow {
        k: record.k,
        pairs: n,
        score_min: min,
        score_mean: mean,
        score_median: median,
        score_max: max,
        structure_mean,
        qs_avg: aggregate.as_ref().map(|a| a.qs_avg),
        qq_avg: aggregate.as_ref().map(|a| a.qq_avg),
    })
}

/// `dir/aggregate.json`, else the first `dir/*/aggregate.json` by name.
fn find_aggregate(dir: &Path) -> Option<StudyAggregate> {
    let read = |p: &Path| -> Option<StudyAggregate> {
        std::fs::read(p).ok().and_then(|b| serde_json::from_slice(&b).ok())
    };
    if let Some(a) = read(&dir.join(AGGREGATE_FILE)) {
        return Some(a);
    }
    let mut subdirs: Vec<_> = std::fs::read_dir(dir).ok()?.filter_map(Result::ok).map(|e| e.path()).collect();
    subdirs.sort();
    subdirs.iter().find_map(|d| read(&d.join(AGGREGATE_FILE)))
}

/// Writes the per-K comparison; study columns stay empty for runs without a
/// study aggregate under `<run>/study`.
pub fn write_comparison_sheet(root: &Path, records: &[RunRecord]) -> Result<Vec<SweepRow>, PipelineError> {
    let rows = records.iter().map(row_for).collect::<Result<Vec<_>, _>>()?;
    let path = root.join(COMPARISON_FILE);
    std::fs::create_dir_all(root).map_err(|e| PipelineError::io(root, e))?;
    let csv_err = |e: csv::Error| PipelineError::State {
        path: path.clone(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record([
        "k",
        "pairs",
        "score_min",
        "score_mean",
        "score_median",
        "score_max",
        "structure_mean",
        "qs_avg",
        "qq_avg",
    ])
    .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &rows {
        w.write_record([
            r.k.to_string(),
            r.pairs.to_string(),
            r.score_min.to_string(),
            r.score_mean.to_string(),
            r.score_median.to_string(),
            r.score_max.to_string(),
            opt(r.structure_mean),
            opt(r.qs_avg),
            opt(r.qq_avg),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| PipelineError::io(&path, e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dedupe_keeps_first_occurrences() {
        assert_eq!(dedupe_k_values(&[3, 1, 3, 5, 1]), vec![3, 1, 5]);
        assert_eq!(dedupe_k_values(&[1]), vec![1]);
    }
}
