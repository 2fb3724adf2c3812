//! Python bindings: corpus generation, training, inference, correction and
//! the alignment and metric utilities. Library errors surface as
//! `ValueError`.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use mmser::align::EditLabel;
use mmser::autodiff::Tensor;
use mmser::config::Config;
use mmser::data::{generate_synthetic, load_manifest, Dataset, ManifestLimits, Utterance};
use mmser::train::Trainer;

fn py_err(e: mmser::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn config(overrides: &[String]) -> PyResult<Config> {
    Config::default().with_overrides(overrides).map_err(py_err)
}

fn label_name(l: EditLabel) -> &'static str {
    match l {
        EditLabel::Keep => "K",
        EditLabel::Delete => "D",
        EditLabel::Change => "C",
    }
}

/// Runs the command-line front end with `args` (without the program name)
/// and returns its exit status.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    mmser::cli::run_cli(std::iter::once("mmser".to_string()).chain(args))
}

/// The default configuration as TOML.
#[pyfunction]
fn default_config() -> String {
    Config::default().to_toml_string()
}

#[pyfunction]
#[pyo3(signature = (out_dir, overrides = Vec::new()))]
fn gen_data(out_dir: PathBuf, overrides: Vec<String>) -> PyResult<()> {
    mmser::cli::gen_data(&config(&overrides)?, &out_dir).map_err(py_err)
}

/// `(labels, tasks)` with labels as "K"/"D"/"C" and tasks as
/// `(position, targets)`; targets end with the end-of-sequence id.
#[pyfunction]
fn edit_script(asr: Vec<u32>, gt: Vec<u32>) -> (Vec<&'static str>, Vec<(usize, Vec<u32>)>) {
    let s = mmser::align::edit_script(&asr, &gt);
    (
        s.labels.iter().copied().map(label_name).collect(),
        s.tasks.into_iter().map(|t| (t.position, t.targets)).collect(),
    )
}

#[pyfunction]
fn word_error_rate(hyp: Vec<u32>, reference: Vec<u32>) -> PyResult<f64> {
    mmser::align::word_error_rate(&hyp, &reference).map_err(py_err)
}

/// Metrics report as a JSON string.
#[pyfunction]
fn classification_metrics(preds: Vec<usize>, labels: Vec<usize>, classes: usize) -> PyResult<String> {
    mmser::eval::classification_metrics(&preds, &labels, classes)
        .map(|r| r.to_json())
        .map_err(py_err)
}

/// Maximum relative gradient error per loss term.
#[pyfunction]
#[pyo3(signature = (overrides = Vec::new(), samples = 2, probes = 4, epsilon = 1e-5))]
fn gradient_check(overrides: Vec<String>, samples: usize, probes: usize, epsilon: f64) -> PyResult<Vec<(String, f64)>> {
    let reports = mmser::train::loss_gradient_check(&config(&overrides)?, samples, probes, epsilon).map_err(py_err)?;
    Ok(reports.into_iter().map(|(n, r)| (n.to_string(), r.max_error)).collect())
}

#[pyclass(name = "Model")]
struct PyModel {
    trainer: Trainer,
}

impl PyModel {
    fn utterance(&self, features: Vec<Vec<f64>>, tokens: Vec<u32>) -> PyResult<Utterance> {
        let speech = Tensor::from_rows(&features).map_err(py_err)?;
        Ok(Utterance {
            id: "py".into(),
            speech,
            gt_tokens: tokens.clone(),
            asr_tokens: tokens,
            emotion: 0,
        })
    }
}

#[pymethods]
impl PyModel {
    /// Trains on the synthetic corpus described by `overrides` and returns
    /// the model selected on the validation split.
    #[staticmethod]
    #[pyo3(signature = (overrides = Vec::new()))]
    fn train(overrides: Vec<String>) -> PyResult<Self> {
        let cfg = config(&overrides)?;
        let make = |salt, n| generate_synthetic(&cfg.synth(salt), n).map(Dataset::new).map_err(py_err);
        let (train, valid) = (make(0, cfg.train_size)?, make(1, cfg.valid_size)?);
        let mut trainer = Trainer::new(cfg.clone()).map_err(py_err)?;
        let summary = trainer.fit(&train, Some(&valid), |_| {}).map_err(py_err)?;
        trainer.model.store = summary.best;
        Ok(Self { trainer })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            trainer: Trainer::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.trainer.save(&path).map_err(py_err)
    }

    #[getter]
    fn config(&self) -> String {
        self.trainer.cfg.to_toml_string()
    }

    /// Emotion distribution for one utterance given `[frames][feat_dim]`
    /// features and ASR token ids.
    fn predict(&self, features: Vec<Vec<f64>>, tokens: Vec<u32>) -> PyResult<Vec<f64>> {
        let u = self.utterance(features, tokens)?;
        self.trainer.model.predict_probs(&u).map_err(py_err)
    }

    #[pyo3(signature = (features, tokens, ungated = false))]
    fn correct(&self, features: Vec<Vec<f64>>, tokens: Vec<u32>, ungated: bool) -> PyResult<Vec<u32>> {
        let u = self.utterance(features, tokens)?;
        let span = self.trainer.cfg.max_correction_len;
        Ok(self.trainer.model.correct(&u, span, ungated).map_err(py_err)?.1)
    }

    /// Metrics report (JSON) on a manifest.
    fn evaluate(&self, manifest: PathBuf) -> PyResult<String> {
        let cfg = &self.trainer.cfg;
        let limits = ManifestLimits {
            emotions: cfg.emotions,
            vocab: cfg.d_vocab,
            feat_dim: cfg.feat_dim,
        };
        let data = Dataset::new(load_manifest(&manifest, limits).map_err(py_err)?);
        mmser::eval::evaluate(&self.trainer.model, &data)
            .map(|r| r.to_json())
            .map_err(py_err)
    }
}

#[pymodule]
fn mmser_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(edit_script, m)?)?;
    m.add_function(wrap_pyfunction!(word_error_rate, m)?)?;
    m.add_function(wrap_pyfunction!(classification_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    m.add_class::<PyModel>()?;
    Ok(())
}
