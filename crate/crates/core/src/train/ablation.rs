//! Seeded comparison of block orderings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockOrdering, ModelConfig, Seq2SeqModel};
use crate::scalar::Scalar;

use super::task::SyntheticTask;
use super::trainer::{init_model, train, TrainConfig, TrainingReport};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Variant {
    pub label: String,
    pub ordering: BlockOrdering,
}

impl Variant {
    pub fn preset(name: &str) -> Result<Self> {
        Ok(Variant {
            label: name.to_string(),
            ordering: BlockOrdering::preset(name)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub seed: u64,
    pub token_accuracy: Option<f64>,
    pub exact_match: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub ordering: String,
    pub params: usize,
    pub runs: Vec<RunOutcome>,
}

/// Sample mean and standard deviation; `None` when `xs` is empty.
fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((mean, std))
}

impl AblationRow {
    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn token_accuracy(&self) -> Option<(f64, f64)> {
        mean_std(&self.runs.iter().filter_map(|r| r.token_accuracy).collect::<Vec<_>>())
    }

    pub fn exact_match(&self) -> Option<(f64, f64)> {
        mean_std(&self.runs.iter().filter_map(|r| r.exact_match).collect::<Vec<_>>())
    }

    /// Token accuracy of the run with `seed`, if it succeeded.
    pub fn accuracy_for(&self, seed: u64) -> Option<f64> {
        self.runs.iter().find(|r| r.seed == seed).and_then(|r| r.token_accuracy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub task: SyntheticTask,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

fn fmt_opt(v: Option<(f64, f64)>) -> (String, String) {
    v.map_or_else(|| (String::new(), String::new()), |(m, s)| (format!("{m:.4}"), format!("{s:.4}")))
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// One row per variant with mean and sample standard deviation over the
    /// successful seeds. `status` is `ok`, `partial` or `failed`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "variant,ordering,params,runs,failed,token_acc_mean,token_acc_std,exact_mean,exact_std,status\n",
        );
        for r in &self.rows {
            let (tm, ts) = fmt_opt(r.token_accuracy());
            let (em, es) = fmt_opt(r.exact_match());
            let failed = r.failures();
            let status = match failed {
                0 => "ok",
                f if f == r.runs.len() => "failed",
                _ => "partial",
            };
            s.push_str(&format!(
                "{},{},{},{},{failed},{tm},{ts},{em},{es},{status}\n",
                r.label,
                r.ordering,
                r.params,
                r.runs.len()
            ));
        }
        s
    }

    /// One row per (variant, seed).
    pub fn runs_csv(&self) -> String {
        let mut s = String::from("variant,seed,token_acc,exact,error\n");
        for r in &self.rows {
            for run in &r.runs {
                let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
                let err = run.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
                s.push_str(&format!(
                    "{},{},{},{},{err}\n",
                    r.label,
                    run.seed,
                    f(run.token_accuracy),
                    f(run.exact_match)
                ));
            }
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Trains every variant under every seed. A failed run is recorded on its
/// row rather than aborting the table.
pub fn run_ablation<S: Scalar>(
    base: &ModelConfig,
    variants: &[Variant],
    task: &SyntheticTask,
    train_cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<AblationTable> {
    run_ablation_with::<S>(base, variants, task, train_cfg, seeds, |_, _, _| {})
}

/// [`run_ablation`] that hands every successfully trained model to
/// `on_model` along with its variant and seed.
pub fn run_ablation_with<S: Scalar>(
    base: &ModelConfig,
    variants: &[Variant],
    task: &SyntheticTask,
    train_cfg: &TrainConfig,
    seeds: &[u64],
    mut on_model: impl FnMut(&Variant, u64, &Seq2SeqModel<S>),
) -> Result<AblationTable> {
    if variants.len() < 2 {
        return Err(Error::Config("an ablation needs at least two orderings".into()));
    }
    if seeds.len() < 3 {
        return Err(Error::Config("an ablation needs at least three seeds".into()));
    }
    task.validate()?;
    train_cfg.validate()?;
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let config = ModelConfig {
            ordering: v.ordering.clone(),
            ..base.clone()
        };
        config.validate()?;
        let mut params = 0;
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = TrainConfig {
                seed,
                ..train_cfg.clone()
            };
            let outcome = init_model::<S>(config.clone(), seed).and_then(|mut m| {
                params = m.num_params();
                let report: TrainingReport = train(&mut m, task, &cfg)?;
                on_model(v, seed, &m);
                Ok(report)
            });
            runs.push(match outcome {
                Ok(r) => RunOutcome {
                    seed,
                    token_accuracy: Some(r.final_eval.token_accuracy),
                    exact_match: Some(r.final_eval.exact_match),
                    error: None,
                },
                Err(e) => RunOutcome {
                    seed,
                    token_accuracy: None,
                    exact_match: None,
                    error: Some(e.to_string()),
                },
            });
        }
        rows.push(AblationRow {
            label: v.label.clone(),
            ordering: v.ordering.to_string(),
            params,
            runs,
        });
    }
    Ok(AblationTable {
        task: *task,
        seeds: seeds.to_vec(),
        rows,
    })
}
