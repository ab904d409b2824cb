//! Seeded synthetic datasets drawn from the functional logistic model.
//!
//! Each functional predictor is a random cubic B-spline curve on [0, 1],
//! observed with Gaussian noise at equally spaced times. Labels are drawn
//! from the model itself with user-supplied true coefficient blocks, so
//! which groups and which class-versus-reference boundaries carry signal
//! is known exactly.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::basis::BasisSystem;
use crate::error::{Error, Result};
use crate::model::{probs_from_predictor, FunctionalDataset, PredictorGroup};

#[derive(Debug, Clone)]
pub enum SyntheticKind {
    /// Cubic B-spline curve with `n_basis` functions observed at
    /// `n_times` points.
    Functional { n_basis: usize, n_times: usize },
    /// Vector predictor observed at `dim` time points.
    Scalar { dim: usize },
}

#[derive(Debug, Clone)]
pub struct SyntheticGroup {
    pub name: String,
    pub kind: SyntheticKind,
    /// True coefficient sub-block per non-reference class (in class
    /// order); empty means no effect on any boundary.
    pub effects: Vec<Vec<f64>>,
}

impl SyntheticGroup {
    pub fn functional(name: &str, n_basis: usize, n_times: usize) -> Self {
        SyntheticGroup {
            name: name.into(),
            kind: SyntheticKind::Functional { n_basis, n_times },
            effects: Vec::new(),
        }
    }

    pub fn scalar(name: &str, dim: usize) -> Self {
        SyntheticGroup {
            name: name.into(),
            kind: SyntheticKind::Scalar { dim },
            effects: Vec::new(),
        }
    }

    /// Sets the true sub-block for non-reference class column `l`.
    pub fn with_effect(mut self, l: usize, effect: Vec<f64>) -> Self {
        if self.effects.len() <= l {
            self.effects.resize(l + 1, Vec::new());
        }
        self.effects[l] = effect;
        self
    }

    fn dim(&self) -> usize {
        match self.kind {
            SyntheticKind::Functional { n_basis, .. } => n_basis,
            SyntheticKind::Scalar { dim } => dim,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n: usize,
    pub n_classes: usize,
    pub groups: Vec<SyntheticGroup>,
    /// True intercepts per non-reference class (zeros if empty).
    pub intercepts: Vec<f64>,
    /// Standard deviation of the latent basis coefficients.
    pub coef_sd: f64,
    /// Observation noise around each curve.
    pub noise_sd: f64,
    /// Probability that an individual functional observation is missing.
    pub missing_rate: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(n: usize, n_classes: usize, groups: Vec<SyntheticGroup>, seed: u64) -> Self {
        SyntheticSpec {
            n,
            n_classes,
            groups,
            intercepts: Vec::new(),
            coef_sd: 5.0,
            noise_sd: 0.1,
            missing_rate: 0.0,
            seed,
        }
    }
}

/// One long-format observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub sample_id: String,
    pub predictor: String,
    pub time: f64,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    /// Dataset built from the exact latent coefficients (no smoothing);
    /// the reference class is the last class.
    pub dataset: FunctionalDataset,
    /// Noisy observations of the same curves.
    pub observations: Vec<Observation>,
    /// `(sample_id, class name)` pairs.
    pub labels: Vec<(String, String)>,
}

pub fn class_name(c: usize) -> String {
    format!("C{}", c + 1)
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    if spec.n_classes < 2 {
        return Err(Error::Input("need at least 2 classes".into()));
    }
    let n_sub = spec.n_classes - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let latent = Normal::new(0.0, spec.coef_sd).map_err(|e| Error::Input(e.to_string()))?;
    let noise = Normal::new(0.0, spec.noise_sd.max(0.0)).map_err(|e| Error::Input(e.to_string()))?;
    let ids: Vec<String> = (0..spec.n).map(|i| format!("s{:04}", i + 1)).collect();

    let mut predictor = DMatrix::from_fn(spec.n, n_sub, |_, l| spec.intercepts.get(l).copied().unwrap_or(0.0));
    let mut groups = Vec::with_capacity(spec.groups.len());
    let mut observations = Vec::new();

    for g in &spec.groups {
        let m = g.dim();
        let coefs = DMatrix::from_fn(spec.n, m, |_, _| latent.sample(&mut rng));
        let (design_rows, group) = match g.kind {
            SyntheticKind::Functional { n_basis, n_times } => {
                if n_basis < 4 {
                    return Err(Error::Input("functional groups need at least 4 basis functions".into()));
                }
                let basis = BasisSystem::uniform(0.0, 1.0, 4, n_basis - 4)?;
                let times: Vec<f64> = (0..n_times).map(|k| k as f64 / (n_times - 1).max(1) as f64).collect();
                let colloc = basis.collocation(&times)?;
                for i in 0..spec.n {
                    let curve = &colloc * coefs.row(i).transpose();
                    for (k, &t) in times.iter().enumerate() {
                        let missing: f64 = rng.random();
                        if missing < spec.missing_rate {
                            continue;
                        }
                        observations.push(Observation {
                            sample_id: ids[i].clone(),
                            predictor: g.name.clone(),
                            time: t,
                            value: curve[k] + noise.sample(&mut rng),
                        });
                    }
                }
                let z = &coefs * basis.gram();
                (z, PredictorGroup::functional(g.name.clone(), basis, coefs))
            }
            SyntheticKind::Scalar { dim } => {
                let values = coefs.map(|x| x / spec.coef_sd);
                for i in 0..spec.n {
                    for k in 0..dim {
                        observations.push(Observation {
                            sample_id: ids[i].clone(),
                            predictor: g.name.clone(),
                            time: k as f64,
                            value: values[(i, k)],
                        });
                    }
                }
                (values.clone(), PredictorGroup::scalar(g.name.clone(), values))
            }
        };
        for (l, effect) in g.effects.iter().enumerate() {
            if effect.is_empty() {
                continue;
            }
            if effect.len() != m || l >= n_sub {
                return Err(Error::Input(format!("effect for group `{}` has the wrong shape", g.name)));
            }
            let b = DVector::from_column_slice(effect);
            let contrib = &design_rows * b;
            for i in 0..spec.n {
                predictor[(i, l)] += contrib[i];
            }
        }
        groups.push(group);
    }

    let probs = probs_from_predictor(&predictor);
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut class = n_sub;
        for l in 0..=n_sub {
            acc += probs[(i, l)];
            if u < acc {
                class = l;
                break;
            }
        }
        labels.push(class);
    }
    // guarantee every class appears
    for c in 0..spec.n_classes {
        if !labels.contains(&c) {
            let i = (c * 7919) % spec.n;
            labels[i] = c;
        }
    }

    let class_names: Vec<String> = (0..spec.n_classes).map(class_name).collect();
    let label_pairs = ids.iter().zip(&labels).map(|(s, &c)| (s.clone(), class_names[c].clone())).collect();
    let dataset = FunctionalDataset::new(groups, labels, class_names, ids, n_sub)?;
    Ok(SyntheticData {
        dataset,
        observations,
        labels: label_pairs,
    })
}

/// A standard normal draw; shared by tests and benches.
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Yeast-shaped layout: two 2-point scalar predictors followed by four
/// functional predictors, five classes.
pub fn yeast_like(n: usize, seed: u64) -> SyntheticSpec {
    let groups = vec![
        SyntheticGroup::scalar("cln3", 2).with_effect(0, vec![1.0, 0.5]),
        SyntheticGroup::scalar("clb2", 2),
        SyntheticGroup::functional("alpha", 5, 18).with_effect(1, vec![0.4, -0.3, 0.2, 0.3, -0.2]),
        SyntheticGroup::functional("cdc15", 5, 24).with_effect(2, vec![-0.3, 0.3, 0.3, -0.2, 0.2]),
        SyntheticGroup::functional("cdc28", 5, 17),
        SyntheticGroup::functional("elu", 5, 14).with_effect(3, vec![0.3, 0.2, -0.3, 0.2, 0.3]),
    ];
    SyntheticSpec::new(n, 5, groups, seed)
}

/// Coefficient vector of the constant function `s` (B-splines sum to one).
pub fn constant_effect(n_basis: usize, s: f64) -> Vec<f64> {
    vec![s; n_basis]
}

/// Three classes; `g1` moves only the C1-versus-C3 log-odds with
/// `β(t) ≡ effect` and `g2` carries no signal.
pub fn bilevel(n: usize, seed: u64, effect: f64) -> SyntheticSpec {
    let groups = vec![
        SyntheticGroup::functional("g1", 5, 20).with_effect(0, constant_effect(5, effect)),
        SyntheticGroup::functional("g2", 5, 20),
    ];
    SyntheticSpec::new(n, 3, groups, seed)
}

/// Three classes, four functional predictors; `g1` moves both boundaries
/// with `β(t) ≡ ±effect`, the rest are noise.
pub fn planted(n: usize, seed: u64, effect: f64) -> SyntheticSpec {
    let groups = vec![
        SyntheticGroup::functional("g1", 5, 20)
            .with_effect(0, constant_effect(5, effect))
            .with_effect(1, constant_effect(5, -effect)),
        SyntheticGroup::functional("g2", 5, 20),
        SyntheticGroup::functional("g3", 5, 20),
        SyntheticGroup::functional("g4", 5, 20),
    ];
    SyntheticSpec::new(n, 3, groups, seed)
}

/// Three classes, four functional predictors, no signal.
pub fn null_model(n: usize, seed: u64) -> SyntheticSpec {
    planted(n, seed, 0.0)
}
