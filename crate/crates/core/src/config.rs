//! Run configuration: a flat `key = value` file with dotted keys.
//!
//! ```text
//! task = mlp_classify
//! dataset = synthetic(4, 64, 512)
//! model.hidden = 32, 32, 32
//! model.manifold = stiefel
//! optimizer = adagrad
//! optimizer.lr = 0.01
//! epochs = 10
//! ```
//!
//! Blank lines and lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::ManifoldRequest;
use crate::optim::{AdagradConfig, Armijo, BetaRule, CgConfig, Method, SgdConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    MlpClassify,
    Rayleigh,
    KarcherMean,
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mlp_classify" => Ok(Task::MlpClassify),
            "rayleigh" => Ok(Task::Rayleigh),
            "karcher_mean" => Ok(Task::KarcherMean),
            other => Err(format!("unknown task `{other}` (expected mlp_classify, rayleigh or karcher_mean)")),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::MlpClassify => "mlp_classify",
            Task::Rayleigh => "rayleigh",
            Task::KarcherMean => "karcher_mean",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    /// `clusters` Gaussian blobs in `dim` dimensions, `samples` points total.
    Synthetic { clusters: usize, dim: usize, samples: usize },
    Csv(PathBuf),
}

impl DatasetSpec {
    fn parse(value: &str, base: &Path) -> std::result::Result<Self, String> {
        if let Some(args) = value.strip_prefix("synthetic(").and_then(|r| r.strip_suffix(')')) {
            let parts: Vec<&str> = args.split(',').map(str::trim).collect();
            let nums: Vec<usize> = parts
                .iter()
                .map(|p| p.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| format!("bad synthetic arguments `{args}`"))?;
            return match nums[..] {
                [clusters, dim, samples] if clusters >= 2 && dim >= 1 && samples >= clusters => {
                    Ok(DatasetSpec::Synthetic { clusters, dim, samples })
                }
                _ => Err("synthetic(c, d, n) needs c >= 2, d >= 1, n >= c".into()),
            };
        }
        let path = PathBuf::from(value);
        Ok(DatasetSpec::Csv(if path.is_relative() { base.join(path) } else { path }))
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub dataset: Option<DatasetSpec>,
    pub hidden: Vec<usize>,
    /// One entry for all layers, or one per Linear layer.
    pub manifolds: Vec<ManifoldRequest>,
    /// Number of classes; inferred from the data when absent.
    pub classes: Option<usize>,
    pub method: Method,
    pub epochs: usize,
    /// `None` means the whole dataset per step.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Ambient dimension for the Rayleigh and Karcher problems.
    pub problem_n: usize,
    /// Number of columns for the Rayleigh problem.
    pub problem_p: usize,
    /// Number of matrices averaged by the Karcher problem.
    pub problem_k: usize,
}

pub const DEFAULT_BATCH: usize = 32;
pub const DEFAULT_EPOCHS: usize = 10;
pub const DEFAULT_LR: f64 = 1e-2;

const KEYS: &[&str] = &[
    "task",
    "dataset",
    "model.hidden",
    "model.manifold",
    "model.classes",
    "optimizer",
    "optimizer.lr",
    "optimizer.momentum",
    "optimizer.eps",
    "optimizer.beta",
    "epochs",
    "batch_size",
    "seed",
    "output_dir",
    "problem.n",
    "problem.p",
    "problem.k",
];

impl RunConfig {
    /// Defaults for `task`, before any file values are applied.
    pub fn defaults(task: Task) -> Self {
        let (n, p) = match task {
            Task::KarcherMean => (5, 5),
            _ => (50, 5),
        };
        Self {
            task,
            dataset: None,
            hidden: vec![32, 32, 32],
            manifolds: vec![ManifoldRequest::Stiefel],
            classes: None,
            method: Method::Adagrad(AdagradConfig {
                lr: DEFAULT_LR,
                eps: AdagradConfig::DEFAULT_EPS,
            }),
            epochs: DEFAULT_EPOCHS,
            batch_size: Some(DEFAULT_BATCH),
            seed: 0,
            output_dir: PathBuf::from("out"),
            problem_n: n,
            problem_p: p,
            problem_k: 2,
        }
    }

    pub fn is_conjugate_gradient(&self) -> bool {
        matches!(self.method, Method::ConjugateGradient(_))
    }

    /// Effective batch size for a dataset of `n` samples.
    pub fn batch_for(&self, n: usize) -> usize {
        self.batch_size.unwrap_or(n)
    }

    /// Checks that depend on the dataset size.
    pub fn validate_for_samples(&self, n: usize) -> Result<()> {
        let batch = self.batch_for(n);
        if batch == 0 || batch > n {
            return Err(validation("batch_size", format!("{batch} is not in 1..={n}")));
        }
        if self.is_conjugate_gradient() && batch != n {
            return Err(validation(
                "batch_size",
                format!("conjugate gradient is full-batch; batch_size {batch} differs from the dataset size {n}"),
            ));
        }
        Ok(())
    }
}

fn validation(field: &str, message: impl Into<String>) -> Error {
    Error::Validation {
        field: field.to_string(),
        message: message.into(),
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| validation(key, format!("cannot parse `{value}`")))
}

fn parse_positive(key: &str, value: &str) -> Result<usize> {
    let v: usize = parse_num(key, value)?;
    if v == 0 {
        return Err(validation(key, "must be positive"));
    }
    Ok(v)
}

fn parse_request(key: &str, value: &str) -> Result<ManifoldRequest> {
    match value {
        "none" | "euclidean" => Ok(ManifoldRequest::None),
        "stiefel" => Ok(ManifoldRequest::Stiefel),
        "spd" | "positive_definite" => Ok(ManifoldRequest::PositiveDefinite),
        other => Err(validation(key, format!("unknown manifold `{other}`"))),
    }
}

fn list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

/// Splits the file into `key -> (line, value)`. Syntax errors carry the line.
fn read_pairs(path: &Path, text: &str) -> Result<BTreeMap<String, (usize, String)>> {
    let mut pairs = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: &str| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: message.to_string(),
        };
        let (key, value) = line.split_once('=').ok_or_else(|| parse_err("expected `key = value`"))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(parse_err("malformed key"));
        }
        if value.is_empty() {
            return Err(parse_err(&format!("missing value for `{key}`")));
        }
        if pairs.insert(key.to_string(), (line_no, value.to_string())).is_some() {
            return Err(parse_err(&format!("duplicate key `{key}`")));
        }
    }
    Ok(pairs)
}

/// Parses a configuration from text. Relative dataset paths resolve against
/// `path`'s directory.
pub fn parse_config_str(path: &Path, text: &str) -> Result<RunConfig> {
    let pairs = read_pairs(path, text)?;
    if let Some(unknown) = pairs.keys().find(|k| !KEYS.contains(&k.as_str())) {
        return Err(validation(unknown, "unknown key"));
    }
    let get = |k: &str| pairs.get(k).map(|(_, v)| v.as_str());

    let task: Task = get("task")
        .ok_or_else(|| validation("task", "required"))?
        .parse()
        .map_err(|m: String| validation("task", m))?;
    let mut cfg = RunConfig::defaults(task);
    let base = path.parent().unwrap_or(Path::new("."));

    if let Some(v) = get("dataset") {
        cfg.dataset = Some(DatasetSpec::parse(v, base).map_err(|m| validation("dataset", m))?);
    }
    if let Some(v) = get("model.hidden") {
        cfg.hidden = list(v)
            .map(|s| parse_positive("model.hidden", s))
            .collect::<Result<_>>()?;
    }
    if let Some(v) = get("model.manifold") {
        cfg.manifolds = list(v)
            .map(|s| parse_request("model.manifold", s))
            .collect::<Result<_>>()?;
        let layers = cfg.hidden.len() + 1;
        if cfg.manifolds.len() != 1 && cfg.manifolds.len() != layers {
            return Err(validation(
                "model.manifold",
                format!("give one value or {layers} (one per layer)"),
            ));
        }
    }
    if let Some(v) = get("model.classes") {
        cfg.classes = Some(parse_num("model.classes", v)?);
        if cfg.classes < Some(2) {
            return Err(validation("model.classes", "need at least 2 classes"));
        }
    }
    if let Some(v) = get("epochs") {
        cfg.epochs = parse_num("epochs", v)?;
    }
    if let Some(v) = get("seed") {
        cfg.seed = parse_num("seed", v)?;
    }
    if let Some(v) = get("output_dir") {
        cfg.output_dir = PathBuf::from(v);
    }
    if let Some(v) = get("problem.n") {
        cfg.problem_n = parse_positive("problem.n", v)?;
    }
    if let Some(v) = get("problem.p") {
        cfg.problem_p = parse_positive("problem.p", v)?;
    }
    if let Some(v) = get("problem.k") {
        cfg.problem_k = parse_positive("problem.k", v)?;
    }

    let optimizer = get("optimizer").unwrap_or("adagrad");
    let lr = get("optimizer.lr")
        .map(|v| parse_num::<f64>("optimizer.lr", v))
        .transpose()?;
    let reject = |key: &str| -> Result<()> {
        match get(key) {
            Some(_) => Err(validation(key, format!("not used by optimizer `{optimizer}`"))),
            None => Ok(()),
        }
    };
    cfg.method = match optimizer {
        "sgd" => {
            reject("optimizer.eps")?;
            reject("optimizer.beta")?;
            let momentum = get("optimizer.momentum")
                .map(|v| parse_num("optimizer.momentum", v))
                .transpose()?
                .unwrap_or(0.0);
            Method::Sgd(
                SgdConfig::new(lr.unwrap_or(DEFAULT_LR), momentum)
                    .map_err(|e| validation("optimizer", e.to_string()))?,
            )
        }
        "adagrad" => {
            reject("optimizer.momentum")?;
            reject("optimizer.beta")?;
            let eps = get("optimizer.eps")
                .map(|v| parse_num("optimizer.eps", v))
                .transpose()?
                .unwrap_or(AdagradConfig::DEFAULT_EPS);
            Method::Adagrad(
                AdagradConfig::new(lr.unwrap_or(DEFAULT_LR), eps)
                    .map_err(|e| validation("optimizer", e.to_string()))?,
            )
        }
        "cg" => {
            reject("optimizer.momentum")?;
            reject("optimizer.eps")?;
            reject("optimizer.lr")?;
            let beta = match get("optimizer.beta").unwrap_or("fr") {
                "fr" | "fletcher_reeves" => BetaRule::FletcherReeves,
                "pr+" | "polak_ribiere_plus" => BetaRule::PolakRibierePlus,
                other => return Err(validation("optimizer.beta", format!("unknown rule `{other}`"))),
            };
            Method::ConjugateGradient(
                CgConfig::new(beta, Armijo::default()).map_err(|e| validation("optimizer", e.to_string()))?,
            )
        }
        other => return Err(validation("optimizer", format!("unknown optimizer `{other}`"))),
    };

    match get("batch_size") {
        Some(v) => cfg.batch_size = Some(parse_positive("batch_size", v)?),
        None if cfg.is_conjugate_gradient() => cfg.batch_size = None,
        None => {}
    }

    match task {
        Task::MlpClassify => {
            if cfg.dataset.is_none() {
                return Err(validation("dataset", "required for mlp_classify"));
            }
            if let Some(DatasetSpec::Synthetic { samples, .. }) = cfg.dataset {
                cfg.validate_for_samples(samples)?;
            }
            if let Some(DatasetSpec::Synthetic { clusters, .. }) = cfg.dataset {
                if cfg.classes.is_some_and(|c| c != clusters) {
                    return Err(validation("model.classes", "differs from the synthetic cluster count"));
                }
            }
        }
        Task::Rayleigh => {
            if cfg.problem_p > cfg.problem_n {
                return Err(validation("problem.p", "must not exceed problem.n"));
            }
        }
        Task::KarcherMean => {}
    }
    Ok(cfg)
}

/// Reads and parses a configuration file.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(path, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        parse_config_str(Path::new("run.cfg"), text)
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse("task = mlp_classify\ndataset = synthetic(4, 64, 512)\n").unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.batch_size, Some(32));
        assert_eq!(cfg.epochs, 10);
        assert_eq!(cfg.hidden, vec![32, 32, 32]);
        assert_eq!(
            cfg.method,
            Method::Adagrad(AdagradConfig { lr: 1e-2, eps: 1e-10 })
        );
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse("task = rayleigh\nlearning_rat = 0.1\n").unwrap_err();
        match err {
            Error::Validation { field, .. } => assert_eq!(field, "learning_rat"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn syntax_error_has_line() {
        let err = parse("task = rayleigh\n# fine\nepochs 3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
        assert!(err.is_config_error());
    }

    #[test]
    fn cg_requires_full_batch() {
        let err = parse("task = mlp_classify\ndataset = synthetic(2, 4, 64)\noptimizer = cg\nbatch_size = 16\n")
            .unwrap_err();
        assert!(matches!(err, Error::Validation { ref field, .. } if field == "batch_size"));
        let ok = parse("task = mlp_classify\ndataset = synthetic(2, 4, 64)\noptimizer = cg\n").unwrap();
        assert_eq!(ok.batch_for(64), 64);
    }

    #[test]
    fn per_layer_manifolds() {
        let cfg = parse("task = mlp_classify\ndataset = synthetic(2, 4, 64)\nmodel.hidden = 8, 8\nmodel.manifold = stiefel, none, stiefel\n")
            .unwrap();
        assert_eq!(cfg.manifolds.len(), 3);
        assert!(parse("task = mlp_classify\ndataset = synthetic(2, 4, 64)\nmodel.manifold = stiefel, none\n").is_err());
    }

    #[test]
    fn bad_values_are_validation_errors() {
        for text in [
            "task = nope\n",
            "task = rayleigh\noptimizer.lr = fast\n",
            "task = rayleigh\noptimizer = sgd\noptimizer.momentum = 1.5\n",
            "task = rayleigh\nproblem.n = 3\nproblem.p = 4\n",
            "task = rayleigh\noptimizer = adagrad\noptimizer.momentum = 0.9\n",
        ] {
            let err = parse(text).unwrap_err();
            assert!(matches!(err, Error::Validation { .. }), "{text}: {err:?}");
        }
    }

    #[test]
    fn relative_csv_resolves_against_config_dir() {
        let cfg = parse_config_str(Path::new("/data/runs/a.cfg"), "task = mlp_classify\ndataset = train.csv\n").unwrap();
        assert_eq!(cfg.dataset, Some(DatasetSpec::Csv(PathBuf::from("/data/runs/train.csv"))));
    }
}
