//! Long-format CSV ingestion.
//!
//! Observations: header `sample_id,predictor,time,value`, one row per
//! measurement; missing measurements are absent rows (or an empty
//! `value`). Labels: header `sample_id,class`. Row order never matters.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::{smooth_observations, BasisSystem, RawCurve};
use crate::config::{PredictorConfig, PredictorKind, RunConfig};
use crate::error::{Error, Result};
use crate::model::{FunctionalDataset, PredictorGroup};

#[derive(Debug, Deserialize)]
struct ObservationRow {
    sample_id: String,
    predictor: String,
    time: String,
    value: String,
}

#[derive(Debug, Deserialize)]
struct LabelRow {
    sample_id: String,
    class: String,
}

/// A sample dropped during ingestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub sample_id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub dataset: FunctionalDataset,
    pub excluded: Vec<Exclusion>,
}

type Curves = BTreeMap<String, BTreeMap<String, BTreeMap<OrderedTime, f64>>>;

/// Total order on finite times.
#[derive(Debug, Clone, Copy, PartialEq)]
struct OrderedTime(f64);

impl Eq for OrderedTime {}

impl PartialOrd for OrderedTime {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrderedTime {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

fn parse_number(field: &str, what: &str, line: u64) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| Error::Input(format!("line {line}: {what} `{field}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::Input(format!("line {line}: {what} `{field}` is not finite")));
    }
    Ok(v)
}

fn read_observations<R: Read>(reader: R, known: &BTreeSet<&str>) -> Result<Curves> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut curves: Curves = BTreeMap::new();
    for row in rdr.deserialize::<ObservationRow>() {
        let row = row?;
        let line = 1 + curves.values().map(|p| p.values().map(|t| t.len()).sum::<usize>()).sum::<usize>() as u64;
        if !known.contains(row.predictor.as_str()) {
            return Err(Error::Input(format!("unknown predictor `{}`", row.predictor)));
        }
        let time = parse_number(&row.time, "time", line)?;
        if row.value.trim().is_empty() {
            continue;
        }
        let value = parse_number(&row.value, "value", line)?;
        let slot = curves
            .entry(row.sample_id.clone())
            .or_default()
            .entry(row.predictor.clone())
            .or_default();
        if slot.insert(OrderedTime(time), value).is_some() {
            return Err(Error::Input(format!(
                "duplicate observation for sample `{}`, predictor `{}`, time {time}",
                row.sample_id, row.predictor
            )));
        }
    }
    Ok(curves)
}

fn read_labels<R: Read>(reader: R) -> Result<BTreeMap<String, String>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut labels = BTreeMap::new();
    for row in rdr.deserialize::<LabelRow>() {
        let row = row?;
        if row.class.is_empty() {
            return Err(Error::Input(format!("sample `{}` has an empty class", row.sample_id)));
        }
        if let Some(prev) = labels.insert(row.sample_id.clone(), row.class.clone()) {
            if prev != row.class {
                return Err(Error::Input(format!("sample `{}` has conflicting labels", row.sample_id)));
            }
        }
    }
    Ok(labels)
}

fn basis_for(p: &PredictorConfig, grid: &[f64]) -> Result<BasisSystem> {
    let (lo, hi) = match p.interval {
        Some(iv) => iv,
        None => (grid[0], grid[grid.len() - 1]),
    };
    if let Some(knots) = &p.knots {
        return BasisSystem::new(lo, hi, p.order, knots.clone());
    }
    let interior = match (p.n_basis, p.interior_knots) {
        (Some(m), _) => m - p.order,
        (None, Some(k)) => k,
        (None, None) => 0,
    };
    BasisSystem::uniform(lo, hi, p.order, interior)
}

/// Reads, filters and smooths the configured CSV inputs.
pub fn ingest_files(config: &RunConfig) -> Result<Ingested> {
    let obs = std::fs::File::open(&config.data.observations)
        .map_err(|e| Error::Input(format!("{}: {e}", config.data.observations.display())))?;
    let labels = std::fs::File::open(&config.data.labels)
        .map_err(|e| Error::Input(format!("{}: {e}", config.data.labels.display())))?;
    ingest(obs, labels, config)
}

pub fn ingest<R1: Read, R2: Read>(observations: R1, labels: R2, config: &RunConfig) -> Result<Ingested> {
    let known: BTreeSet<&str> = config.predictors.iter().map(|p| p.name.as_str()).collect();
    let curves = read_observations(observations, &known)?;
    let labels = read_labels(labels)?;

    if let Some(s) = curves.keys().find(|s| !labels.contains_key(*s)) {
        return Err(Error::Input(format!("sample `{s}` has observations but no label")));
    }
    if let Some(s) = labels.keys().find(|s| !curves.contains_key(*s)) {
        return Err(Error::Input(format!("sample `{s}` has a label but no observations")));
    }

    // union of observed times per predictor
    let grids: Vec<Vec<f64>> = config
        .predictors
        .iter()
        .map(|p| {
            let set: BTreeSet<OrderedTime> = curves
                .values()
                .filter_map(|per| per.get(&p.name))
                .flat_map(|c| c.keys().copied())
                .collect();
            set.into_iter().map(|t| t.0).collect()
        })
        .collect();
    for (p, g) in config.predictors.iter().zip(&grids) {
        if g.is_empty() {
            return Err(Error::Input(format!("predictor `{}` has no observations", p.name)));
        }
    }
    let bases: Vec<Option<BasisSystem>> = config
        .predictors
        .iter()
        .zip(&grids)
        .map(|(p, g)| match p.kind {
            PredictorKind::Functional => basis_for(p, g).map(Some),
            PredictorKind::Scalar => Ok(None),
        })
        .collect::<Result<_>>()?;

    let mut excluded = Vec::new();
    let mut kept_ids = Vec::new();
    let mut rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); config.predictors.len()];

    'samples: for (sample, per) in &curves {
        let mut total_missing = 0;
        let mut sample_rows = Vec::with_capacity(config.predictors.len());
        for (k, p) in config.predictors.iter().enumerate() {
            let Some(curve) = per.get(&p.name) else {
                excluded.push(Exclusion {
                    sample_id: sample.clone(),
                    reason: format!("no observations for predictor `{}`", p.name),
                });
                continue 'samples;
            };
            let missing = grids[k].len() - curve.len();
            total_missing += missing;
            if config.filters.max_missing.is_some_and(|m| missing > m) {
                excluded.push(Exclusion {
                    sample_id: sample.clone(),
                    reason: format!("{missing} missing time points for predictor `{}`", p.name),
                });
                continue 'samples;
            }
            match p.kind {
                PredictorKind::Scalar => {
                    if missing > 0 {
                        excluded.push(Exclusion {
                            sample_id: sample.clone(),
                            reason: format!("scalar predictor `{}` is incomplete", p.name),
                        });
                        continue 'samples;
                    }
                    sample_rows.push(curve.values().copied().collect());
                }
                PredictorKind::Functional => {
                    let basis = bases[k].as_ref().expect("functional predictors have a basis");
                    let raw = RawCurve::new(curve.keys().map(|t| t.0).collect(), curve.values().copied().collect())?;
                    if let Some(t) = raw.times().iter().find(|&&t| !basis.contains(t)) {
                        return Err(Error::Input(format!(
                            "predictor `{}`: time {t} lies outside the basis interval",
                            p.name
                        )));
                    }
                    match smooth_observations(&raw, basis, p.ridge, &p.name) {
                        Ok(w) => sample_rows.push(w.iter().copied().collect()),
                        Err(e @ Error::IllPosedSmoothing { .. }) => {
                            excluded.push(Exclusion {
                                sample_id: sample.clone(),
                                reason: e.to_string(),
                            });
                            continue 'samples;
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
        }
        if config.filters.max_missing_total.is_some_and(|m| total_missing > m) {
            excluded.push(Exclusion {
                sample_id: sample.clone(),
                reason: format!("{total_missing} missing time points in total"),
            });
            continue;
        }
        kept_ids.push(sample.clone());
        for (k, r) in sample_rows.into_iter().enumerate() {
            rows[k].push(r);
        }
    }

    if kept_ids.is_empty() {
        return Err(Error::Input("no samples left after filtering".into()));
    }

    let class_names: Vec<String> = kept_ids
        .iter()
        .map(|s| labels[s].clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let all_classes: BTreeSet<&String> = labels.values().collect();
    if all_classes.len() != class_names.len() {
        let lost: Vec<&str> = all_classes
            .iter()
            .filter(|c| !class_names.contains(c))
            .map(|c| c.as_str())
            .collect();
        return Err(Error::Input(format!(
            "classes {lost:?} have no samples left after filtering"
        )));
    }
    let reference = match &config.data.reference_class {
        Some(name) => class_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Input(format!("reference class `{name}` not found in labels")))?,
        None => class_names.len() - 1,
    };
    let label_idx: Vec<usize> = kept_ids
        .iter()
        .map(|s| class_names.iter().position(|c| *c == labels[s]).expect("class collected above"))
        .collect();

    let groups = config
        .predictors
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let dim = rows[k][0].len();
            let mat = DMatrix::from_fn(kept_ids.len(), dim, |i, c| rows[k][i][c]);
            match &bases[k] {
                Some(b) => PredictorGroup::functional(p.name.clone(), b.clone(), mat),
                None => PredictorGroup::scalar(p.name.clone(), mat),
            }
        })
        .collect();

    let dataset = FunctionalDataset::new(groups, label_idx, class_names, kept_ids, reference)?;
    Ok(Ingested { dataset, excluded })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(extra: &str) -> RunConfig {
        RunConfig::from_toml(&format!(
            r#"
            [data]
            observations = "o.csv"
            labels = "l.csv"
            {extra}
            [[predictor]]
            name = "x"
            order = 2
            "#
        ))
        .unwrap()
    }

    const OBS: &str = "sample_id,predictor,time,value\n\
        a,x,0,1.0\na,x,1,2.0\na,x,2,1.5\n\
        b,x,0,0.5\nb,x,1,0.1\nb,x,2,0.7\n";
    const LABELS: &str = "sample_id,class\na,G1\nb,G2\n";

    #[test]
    fn minimal_two_samples() {
        let got = ingest(OBS.as_bytes(), LABELS.as_bytes(), &config("")).unwrap();
        assert_eq!(got.dataset.n(), 2);
        assert_eq!(got.dataset.p(), 1);
        assert_eq!(got.dataset.class_names(), &["G1".to_string(), "G2".to_string()]);
        assert!(got.excluded.is_empty());
    }

    #[test]
    fn missing_label_is_named() {
        let err = ingest(OBS.as_bytes(), "sample_id,class\na,G1\n".as_bytes(), &config("")).unwrap_err();
        assert!(err.to_string().contains("`b`"), "{err}");
        let err = ingest(OBS.as_bytes(), "sample_id,class\na,G1\nb,G2\nc,G1\n".as_bytes(), &config("")).unwrap_err();
        assert!(err.to_string().contains("`c`"), "{err}");
    }

    #[test]
    fn unknown_predictor_and_bad_numbers() {
        let obs = format!("{OBS}a,y,0,1.0\n");
        assert!(ingest(obs.as_bytes(), LABELS.as_bytes(), &config("")).unwrap_err().to_string().contains("unknown predictor"));
        let obs = OBS.replace("0.5", "half");
        assert!(matches!(ingest(obs.as_bytes(), LABELS.as_bytes(), &config("")), Err(Error::Input(_))));
    }

    #[test]
    fn row_order_does_not_matter() {
        let mut lines: Vec<&str> = OBS.lines().skip(1).collect();
        lines.reverse();
        let shuffled = format!("sample_id,predictor,time,value\n{}\n", lines.join("\n"));
        let a = ingest(OBS.as_bytes(), LABELS.as_bytes(), &config("")).unwrap();
        let b = ingest(shuffled.as_bytes(), "sample_id,class\nb,G2\na,G1\n".as_bytes(), &config("")).unwrap();
        assert_eq!(a.dataset, b.dataset);
    }

    #[test]
    fn missing_filter_excludes_and_can_empty_a_class() {
        let obs = OBS.replace("b,x,1,0.1\n", "");
        let cfg = config("[filters]\nmax_missing = 0\n");
        let err = ingest(obs.as_bytes(), LABELS.as_bytes(), &cfg).unwrap_err();
        assert!(err.to_string().contains("G2"), "{err}");
        let obs3 = format!("{obs}c,x,0,1\nc,x,1,1\nc,x,2,1\n");
        let got = ingest(obs3.as_bytes(), "sample_id,class\na,G1\nb,G2\nc,G2\n".as_bytes(), &cfg).unwrap();
        assert_eq!(got.dataset.n(), 2);
        assert_eq!(got.excluded.len(), 1);
        assert_eq!(got.excluded[0].sample_id, "b");
    }
}
