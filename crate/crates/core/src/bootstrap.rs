//! Bootstrap selection frequencies with reference-class rotation.
//!
//! Each replicate resamples whole samples with replacement, then for each
//! reference class in the rotation runs a BIC-tuned grid search. A
//! predictor counts as selected when its block is non-zero; a decision
//! boundary between a class and the reference counts as selected when the
//! corresponding sub-block is non-zero. Boundary counts are aggregated on
//! unordered class pairs, so a pair collects from every rotation in which
//! one of its classes is the reference.
//!
//! Replicate `r` draws from `ChaCha8Rng::seed_from_u64(seed)` switched to
//! stream `r`, so results do not depend on execution order.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_design, class_counts, FunctionalDataset};
use crate::parallel::{map_indexed, Execution};
use crate::selection::{grid_search, TuningGrid};
use crate::sgl::SolverControls;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationPolicy {
    /// Every class serves as the reference once per replicate.
    #[default]
    All,
    /// Only the dataset's own reference class.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    pub rotation: RotationPolicy,
    /// Resampling attempts before a replicate is skipped because a class
    /// vanished.
    pub max_attempts: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            replicates: 50,
            seed: 1,
            rotation: RotationPolicy::All,
            max_attempts: 100,
        }
    }
}

/// Renumbers classes so that `reference` is last; class identities are
/// kept for reporting.
pub fn rotate_reference(dataset: &FunctionalDataset, reference: usize) -> Result<FunctionalDataset> {
    dataset.with_reference(reference)
}

/// Counts for one class pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCounts {
    /// Class names `(a, b)` with `a` before `b` in class order.
    pub pair: (String, String),
    /// Selections per predictor.
    pub counts: Vec<usize>,
    /// Successful fits that involved this pair.
    pub denominator: usize,
    pub non_converged: usize,
    pub skipped: usize,
    pub attempted: usize,
}

/// Counts collected under one reference class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationCounts {
    pub reference: String,
    /// `boundaries[l][j]`: class `l` of the rotated order versus the
    /// reference, predictor `j`.
    pub boundary_classes: Vec<String>,
    pub boundaries: Vec<Vec<usize>>,
    pub variables: Vec<usize>,
    pub fitted: usize,
    pub non_converged: usize,
    pub skipped: usize,
}

/// Aggregated bootstrap selection frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub predictors: Vec<String>,
    pub classes: Vec<String>,
    pub replicates: usize,
    pub seed: u64,
    pub rotation: RotationPolicy,
    pub references: Vec<String>,
    /// Rows for every unordered class pair touched by the rotation.
    pub boundaries: Vec<PairCounts>,
    pub variable_counts: Vec<usize>,
    pub variable_denominator: usize,
    pub non_converged: usize,
    /// Replicates skipped because resampling kept losing a class.
    pub skipped_replicates: usize,
    pub attempted: usize,
    pub by_rotation: Vec<RotationCounts>,
}

/// Selection flags from one fit: `boundaries[l][j]`, `variables[j]`.
#[derive(Debug, Clone)]
enum FitOutcome {
    Selected { boundaries: Vec<Vec<bool>>, variables: Vec<bool> },
    NonConverged,
}

#[derive(Debug, Clone)]
enum ReplicateOutcome {
    Skipped,
    Fitted(Vec<FitOutcome>),
}

/// Resampled row indices for replicate `r`, or `None` if every attempt
/// lost a class.
pub fn resample_rows(labels: &[usize], n_classes: usize, seed: u64, replicate: usize, max_attempts: usize) -> Option<Vec<usize>> {
    let n = labels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate as u64);
    for _ in 0..max_attempts.max(1) {
        let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let picked: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
        if class_counts(&picked, n_classes).is_ok_and(|c| c.iter().all(|&k| k > 0)) {
            return Some(rows);
        }
    }
    None
}

fn fit_rotation(
    data: &FunctionalDataset,
    reference: usize,
    grid: &TuningGrid,
    controls: &SolverControls,
    exec: Execution,
) -> Result<FitOutcome> {
    let rotated = rotate_reference(data, reference)?;
    let design = build_design(&rotated)?;
    let y = rotated.response();
    let search = grid_search(&design, &y, grid, controls, exec)?;
    Ok(match search.best() {
        Some(best) => FitOutcome::Selected {
            boundaries: (0..y.ncols())
                .map(|l| best.report.active_subblocks.iter().map(|g| g[l]).collect())
                .collect(),
            variables: best.report.active_groups.clone(),
        },
        None => FitOutcome::NonConverged,
    })
}

pub fn bootstrap_run(
    dataset: &FunctionalDataset,
    grid: &TuningGrid,
    controls: &SolverControls,
    config: &BootstrapConfig,
    exec: Execution,
) -> Result<SelectionReport> {
    if config.replicates == 0 {
        return Err(Error::Input("bootstrap needs at least one replicate".into()));
    }
    grid.validate()?;
    let n_classes = dataset.n_classes();
    let references: Vec<usize> = match config.rotation {
        RotationPolicy::All => (0..n_classes).collect(),
        RotationPolicy::Fixed => vec![dataset.reference()],
    };

    // Fits inside a replicate stay sequential so the outer level carries
    // the parallelism.
    let outcomes = map_indexed(config.replicates, exec, |r| -> Result<ReplicateOutcome> {
        let Some(rows) = resample_rows(dataset.labels(), n_classes, config.seed, r, config.max_attempts) else {
            return Ok(ReplicateOutcome::Skipped);
        };
        let sample = dataset.select_rows(&rows)?;
        let fits = references
            .iter()
            .map(|&reference| match fit_rotation(&sample, reference, grid, controls, Execution::Sequential) {
                Err(Error::RankDeficient { .. }) | Err(Error::Degenerate(_)) => Ok(FitOutcome::NonConverged),
                other => other,
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ReplicateOutcome::Fitted(fits))
    });
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(aggregate(dataset, &references, config, &outcomes))
}

fn aggregate(
    dataset: &FunctionalDataset,
    references: &[usize],
    config: &BootstrapConfig,
    outcomes: &[ReplicateOutcome],
) -> SelectionReport {
    let p = dataset.p();
    let n_classes = dataset.n_classes();
    let names = dataset.class_names();

    let mut by_rotation: Vec<RotationCounts> = references
        .iter()
        .map(|&reference| {
            let order = crate::model::class_order(n_classes, reference);
            RotationCounts {
                reference: names[reference].clone(),
                boundary_classes: order[..n_classes - 1].iter().map(|&c| names[c].clone()).collect(),
                boundaries: vec![vec![0; p]; n_classes - 1],
                variables: vec![0; p],
                fitted: 0,
                non_converged: 0,
                skipped: 0,
            }
        })
        .collect();

    // pair index for classes a < b
    let mut pair_index = vec![vec![usize::MAX; n_classes]; n_classes];
    let mut boundaries = Vec::new();
    for a in 0..n_classes {
        for b in (a + 1)..n_classes {
            if references.contains(&a) || references.contains(&b) {
                pair_index[a][b] = boundaries.len();
                pair_index[b][a] = boundaries.len();
                boundaries.push(PairCounts {
                    pair: (names[a].clone(), names[b].clone()),
                    counts: vec![0; p],
                    denominator: 0,
                    non_converged: 0,
                    skipped: 0,
                    attempted: 0,
                });
            }
        }
    }

    let mut variable_counts = vec![0; p];
    let mut variable_denominator = 0;
    let mut non_converged = 0;
    let mut skipped_replicates = 0;
    let mut attempted = 0;

    for outcome in outcomes {
        for (k, &reference) in references.iter().enumerate() {
            attempted += 1;
            let order = crate::model::class_order(n_classes, reference);
            let pairs: Vec<usize> = order[..n_classes - 1].iter().map(|&c| pair_index[c][reference]).collect();
            for &pi in &pairs {
                boundaries[pi].attempted += 1;
            }
            let rot = &mut by_rotation[k];
            match outcome {
                ReplicateOutcome::Skipped => {
                    rot.skipped += 1;
                    for &pi in &pairs {
                        boundaries[pi].skipped += 1;
                    }
                }
                ReplicateOutcome::Fitted(fits) => match &fits[k] {
                    FitOutcome::NonConverged => {
                        rot.non_converged += 1;
                        non_converged += 1;
                        for &pi in &pairs {
                            boundaries[pi].non_converged += 1;
                        }
                    }
                    FitOutcome::Selected { boundaries: sel, variables } => {
                        rot.fitted += 1;
                        variable_denominator += 1;
                        for (l, &pi) in pairs.iter().enumerate() {
                            boundaries[pi].denominator += 1;
                            for j in 0..p {
                                if sel[l][j] {
                                    boundaries[pi].counts[j] += 1;
                                    rot.boundaries[l][j] += 1;
                                }
                            }
                        }
                        for j in 0..p {
                            if variables[j] {
                                variable_counts[j] += 1;
                                rot.variables[j] += 1;
                            }
                        }
                    }
                },
            }
        }
        if matches!(outcome, ReplicateOutcome::Skipped) {
            skipped_replicates += 1;
        }
    }

    SelectionReport {
        predictors: dataset.groups().iter().map(|g| g.name.clone()).collect(),
        classes: names.to_vec(),
        replicates: config.replicates,
        seed: config.seed,
        rotation: config.rotation,
        references: references.iter().map(|&r| names[r].clone()).collect(),
        boundaries,
        variable_counts,
        variable_denominator,
        non_converged,
        skipped_replicates,
        attempted,
        by_rotation,
    }
}

impl SelectionReport {
    /// Counts for the pair `{a, b}` (by class name), in either order.
    pub fn pair(&self, a: &str, b: &str) -> Option<&PairCounts> {
        self.boundaries
            .iter()
            .find(|p| (p.pair.0 == a && p.pair.1 == b) || (p.pair.0 == b && p.pair.1 == a))
    }

    /// Boundary table: one row per class pair, one column per predictor,
    /// plus the denominator.
    pub fn write_boundary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["pair".to_string()];
        header.extend(self.predictors.iter().cloned());
        header.push("denominator".into());
        w.write_record(&header)?;
        for row in &self.boundaries {
            let mut rec = vec![format!("{}-{}", row.pair.0, row.pair.1)];
            rec.extend(row.counts.iter().map(|c| c.to_string()));
            rec.push(row.denominator.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Variable table: one column per predictor, a `selected` row and a
    /// `denominator` row.
    pub fn write_variable_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["row".to_string()];
        header.extend(self.predictors.iter().cloned());
        w.write_record(&header)?;
        let mut sel = vec!["selected".to_string()];
        sel.extend(self.variable_counts.iter().map(|c| c.to_string()));
        w.write_record(&sel)?;
        let mut den = vec!["denominator".to_string()];
        den.extend(std::iter::repeat_n(self.variable_denominator.to_string(), self.predictors.len()));
        w.write_record(&den)?;
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
