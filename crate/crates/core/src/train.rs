//! The training loop behind `riemopt train`, plus its on-disk outputs.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Parameter, ParameterSet};
use crate::checkpoint::{self, CheckpointEntry};
use crate::config::{RunConfig, Task};
use crate::data::{load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::manifold::ManifoldDescriptor;
use crate::nn::Sequential;
use crate::optim::Optimizer;
use crate::problems::{Karcher, Rayleigh};
use crate::tensor::{format_f64, Tensor};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const METRICS_HEADER: &str = "epoch,loss,constraint_residual,accuracy";

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// Counted from 1.
    pub epoch: usize,
    /// Objective over the whole dataset after the epoch's updates.
    pub loss: f64,
    pub constraint_residual: f64,
    /// Classification tasks only.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub params: Vec<Parameter>,
}

struct Seeds {
    data: u64,
    model: u64,
    shuffle: u64,
}

impl Seeds {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            data: rng.random(),
            model: rng.random(),
            shuffle: rng.random(),
        }
    }
}

enum Job {
    Classify { model: Sequential, data: Dataset },
    Rayleigh { x: Parameter, problem: Rayleigh },
    Karcher { x: Parameter, problem: Karcher },
}

impl Job {
    fn build(cfg: &RunConfig, seeds: &Seeds) -> Result<Self> {
        match cfg.task {
            Task::MlpClassify => {
                let spec = cfg.dataset.as_ref().ok_or_else(|| Error::Validation {
                    field: "dataset".into(),
                    message: "required for mlp_classify".into(),
                })?;
                let data = load_dataset(spec, cfg.classes, seeds.data)?;
                cfg.validate_for_samples(data.len())?;
                let classes = cfg.classes.unwrap_or(data.classes);
                let model = Sequential::mlp(data.dim(), &cfg.hidden, classes, &cfg.manifolds, seeds.model)?;
                Ok(Job::Classify { model, data })
            }
            Task::Rayleigh => {
                let problem = Rayleigh::random(cfg.problem_n, cfg.problem_p, seeds.data)?;
                let x = Parameter::random("X", problem.manifold(), &[cfg.problem_n, cfg.problem_p], seeds.model)?;
                Ok(Job::Rayleigh { x, problem })
            }
            Task::KarcherMean => {
                let problem = Karcher::random(cfg.problem_n, cfg.problem_k, seeds.data)?;
                let m = ManifoldDescriptor::positive_definite(cfg.problem_n)?;
                let x = Parameter::new("X", Tensor::eye(cfg.problem_n), m)?;
                Ok(Job::Karcher { x, problem })
            }
        }
    }

    fn params(&self) -> Vec<&Parameter> {
        match self {
            Job::Classify { model, .. } => model.parameters(),
            Job::Rayleigh { x, .. } | Job::Karcher { x, .. } => vec![x],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            Job::Classify { model, .. } => model.parameters_mut(),
            Job::Rayleigh { x, .. } | Job::Karcher { x, .. } => vec![x],
        }
    }

    /// Loss and (for classification) accuracy at the current parameters.
    fn evaluate(&self) -> Result<(f64, Option<f64>)> {
        match self {
            Job::Classify { model, data } => {
                let (loss, acc) = classifier_metrics(model, data)?;
                Ok((loss, Some(acc)))
            }
            Job::Rayleigh { x, problem } => Ok((problem.cost(x.value())?, None)),
            Job::Karcher { x, problem } => Ok((problem.cost(x.value())?, None)),
        }
    }

    fn residual(&self) -> f64 {
        self.params()
            .into_iter()
            .filter(|p| !p.manifold().is_euclidean())
            .map(Parameter::constraint_residual)
            .fold(0.0, f64::max)
    }

    fn epoch(&mut self, opt: &mut Optimizer, cfg: &RunConfig, shuffle_seed: u64) -> Result<()> {
        match self {
            Job::Classify { model, data } => {
                let batches = data.shuffled_batches(cfg.batch_for(data.len()), shuffle_seed);
                for idx in batches {
                    opt.zero_grad(model);
                    let (x, y) = data.batch(&idx);
                    let mut g = classifier_graph(model, x.shape(), &y)?;
                    g.forward(&[("x", &x)])?;
                    g.backward_into(model.parameters_mut())?;
                    let mut objective = |m: &Sequential| classifier_metrics(m, data).map(|(l, _)| l);
                    step(opt, model, &mut objective)?;
                }
                Ok(())
            }
            Job::Rayleigh { x, problem } => {
                opt.zero_grad(x);
                let mut g = problem.graph(x)?;
                g.forward(&[])?;
                g.backward_into(std::iter::once(&mut *x))?;
                let mut objective = |p: &Parameter| problem.cost(p.value());
                step(opt, x, &mut objective)
            }
            Job::Karcher { x, problem } => {
                opt.zero_grad(x);
                x.accumulate_egrad(&problem.egrad(x.value())?)?;
                let mut objective = |p: &Parameter| problem.cost(p.value());
                step(opt, x, &mut objective)
            }
        }
    }
}

/// One optimizer update. A failed conjugate-gradient line search leaves the
/// parameter in place and clears the search memory, so the next update
/// starts again from steepest descent.
fn step<M: ParameterSet>(
    opt: &mut Optimizer,
    model: &mut M,
    objective: &mut dyn FnMut(&M) -> Result<f64>,
) -> Result<()> {
    match opt.step_all(model, Some(objective)) {
        Ok(_) => Ok(()),
        Err(e) if matches!(e.root(), Error::LineSearchFailed { .. }) => {
            opt.reset();
            Ok(())
        }
        Err(e) => Err(e),
    }
}

fn classifier_graph(model: &Sequential, shape: &[usize], labels: &[usize]) -> Result<Graph> {
    let mut g = Graph::new();
    let x = g.input("x", shape)?;
    let lp = model.lower(&mut g, x)?;
    g.nll_loss_mean(lp, labels)?;
    Ok(g)
}

/// Mean negative log-likelihood and accuracy over the whole dataset.
pub fn classifier_metrics(model: &Sequential, data: &Dataset) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let x = g.input("x", data.features.shape())?;
    let lp = model.lower(&mut g, x)?;
    g.nll_loss_mean(lp, &data.labels)?;
    let loss = g.forward(&[("x", &data.features)])?.item();
    let probs = g.value(lp).expect("evaluated above");
    let classes = probs.cols();
    let correct = probs
        .data()
        .chunks(classes)
        .zip(&data.labels)
        .filter(|(row, &label)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
            best == label
        })
        .count();
    Ok((loss, correct as f64 / data.len() as f64))
}

/// Runs the configured task in memory.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let seeds = Seeds::new(cfg.seed);
    let mut job = Job::build(cfg, &seeds)?;
    let mut opt = Optimizer::new(cfg.method);
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        job.epoch(&mut opt, cfg, seeds.shuffle.wrapping_add(epoch as u64))?;
        let (loss, accuracy) = job.evaluate()?;
        records.push(EpochRecord {
            epoch,
            loss,
            constraint_residual: job.residual(),
            accuracy,
        });
    }
    Ok(TrainOutcome {
        records,
        params: job.params().into_iter().cloned().collect(),
    })
}

/// Trains, then writes the metrics table and checkpoint into the output
/// directory.
pub fn run_training(cfg: &RunConfig) -> Result<TrainOutcome> {
    let outcome = train(cfg)?;
    fs::create_dir_all(&cfg.output_dir)?;
    write_metrics(&cfg.output_dir.join(METRICS_FILE), &outcome.records)?;
    checkpoint::save(&cfg.output_dir.join(CHECKPOINT_FILE), &outcome.params)?;
    Ok(outcome)
}

/// Rebuilds the task from `cfg`, loads `entries` into it and returns the
/// loss at those parameters.
pub fn evaluate_checkpoint(cfg: &RunConfig, entries: &[CheckpointEntry]) -> Result<f64> {
    let mut job = Job::build(cfg, &Seeds::new(cfg.seed))?;
    checkpoint::restore(job.params_mut(), entries)?;
    Ok(job.evaluate()?.0)
}

pub fn metrics_csv(records: &[EpochRecord]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in records {
        let acc = r.accuracy.map(format_f64).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch,
            format_f64(r.loss),
            format_f64(r.constraint_residual),
            acc
        ));
    }
    out
}

pub fn write_metrics(path: &Path, records: &[EpochRecord]) -> Result<()> {
    fs::write(path, metrics_csv(records))?;
    Ok(())
}

pub fn parse_metrics(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::MalformedCsv {
            row: 1,
            message: "missing metrics header".into(),
        });
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let row = i + 2;
            let bad = |m: &str| Error::MalformedCsv {
                row,
                message: m.to_string(),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number `{s}`")));
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad("bad epoch"))?,
                loss: num(f[1])?,
                constraint_residual: num(f[2])?,
                accuracy: if f[3].is_empty() { None } else { Some(num(f[3])?) },
            })
        })
        .collect()
}
