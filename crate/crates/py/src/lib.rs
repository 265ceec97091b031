//! Python bindings: the main types and operations of the lab.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use ttalab::attack::{AttackObjective, AttackSpec, Epsilon};
use ttalab::bench;
use ttalab::defense::DefenseSpec;
use ttalab::diagnostics;
use ttalab::nn::{checkpoint, BnMode, Network};
use ttalab::numeric::{Histogram, Rng, Tensor};
use ttalab::tta::{self, TtaConfig};

fn err(e: ttalab::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// (perturbation rows, final_loss, best_step, loss_trace)
type AttackOutcome = (Vec<Vec<f64>>, f64, usize, Vec<f64>);

fn matrix_from_rows(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let n = rows.len();
    if n == 0 {
        return Err(PyValueError::new_err("batch must not be empty"));
    }
    let d = rows[0].len();
    let mut data = Vec::with_capacity(n * d);
    for r in &rows {
        if r.len() != d {
            return Err(PyValueError::new_err("rows must have equal length"));
        }
        data.extend_from_slice(r);
    }
    Tensor::matrix(n, d, data).map_err(err)
}

fn rows_from_matrix(t: &Tensor) -> Vec<Vec<f64>> {
    let (n, _) = t.dims2().expect("rank-2 tensor");
    (0..n).map(|i| t.row(i).to_vec()).collect()
}

fn parse_mode(mode: &str, tau: f64, n_tr: usize) -> PyResult<BnMode> {
    match mode {
        "test" => Ok(BnMode::TestStats),
        "train" => Ok(BnMode::TrainStats),
        "smoothed" => Ok(BnMode::Smoothed { tau, n_tr }),
        other => Err(PyValueError::new_err(format!("unknown bn mode {:?}", other))),
    }
}

fn tta_config(method: &str, eta: f64, steps: usize, q: f64, temperature: f64, mode: BnMode) -> PyResult<TtaConfig> {
    Ok(TtaConfig {
        method: method.parse().map_err(err)?,
        eta,
        steps,
        q,
        temperature,
        bn_mode: mode,
    })
}

/// A feed-forward network with BN layers.
#[pyclass(name = "Network")]
struct PyNetwork {
    inner: Network,
}

#[pymethods]
impl PyNetwork {
    /// Load a checkpoint document from disk.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: checkpoint::load_from_path(std::path::Path::new(path)).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoint::save_to_path(&self.inner, std::path::Path::new(path)).map_err(err)
    }

    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    fn num_bn(&self) -> usize {
        self.inner.num_bn()
    }

    /// Logits for a batch under the given statistics mode.
    #[pyo3(signature = (batch, mode="test", tau=0.0, n_tr=0))]
    fn forward(&self, batch: Vec<Vec<f64>>, mode: &str, tau: f64, n_tr: usize) -> PyResult<Vec<Vec<f64>>> {
        let x = matrix_from_rows(batch)?;
        let m = parse_mode(mode, tau, n_tr)?;
        let (logits, _) = self.inner.forward(&x, m).map_err(err)?;
        Ok(rows_from_matrix(&logits))
    }

    /// Argmax predictions; ties break toward the lowest class index.
    #[pyo3(signature = (batch, mode="test", tau=0.0, n_tr=0))]
    fn predict(&self, batch: Vec<Vec<f64>>, mode: &str, tau: f64, n_tr: usize) -> PyResult<Vec<usize>> {
        let x = matrix_from_rows(batch)?;
        let m = parse_mode(mode, tau, n_tr)?;
        tta::predict(&self.inner, &x, m).map_err(err)
    }

    /// Apply one TTA update; returns the adapted network.
    #[pyo3(signature = (batch, method="tent", eta=0.001, steps=1, q=0.8, temperature=1.0, tau=0.0, n_tr=0))]
    #[allow(clippy::too_many_arguments)]
    fn tta_update(
        &self,
        batch: Vec<Vec<f64>>,
        method: &str,
        eta: f64,
        steps: usize,
        q: f64,
        temperature: f64,
        tau: f64,
        n_tr: usize,
    ) -> PyResult<PyNetwork> {
        let x = matrix_from_rows(batch)?;
        let mode = DefenseSpec { tau, n_tr };
        let mode = ttalab::defense::make_bn_mode(&mode, self.inner.num_bn()).map_err(err)?;
        let cfg = tta_config(method, eta, steps, q, temperature, mode)?;
        let (net, _) = tta::tta_update(&self.inner, &x, &cfg).map_err(err)?;
        Ok(PyNetwork { inner: net })
    }

    /// Per-layer (mean_drift, var_drift) between the benign batch and an
    /// attacked batch, as normalized Wasserstein distances.
    #[pyo3(signature = (benign, attacked, tau=0.0, n_tr=0))]
    fn bn_drift(
        &self,
        benign: Vec<Vec<f64>>,
        attacked: Vec<Vec<f64>>,
        tau: f64,
        n_tr: usize,
    ) -> PyResult<Vec<(usize, f64, f64)>> {
        let mode = ttalab::defense::make_bn_mode(&DefenseSpec { tau, n_tr }, self.inner.num_bn())
            .map_err(err)?;
        let (_, snap_b) = self.inner.forward(&matrix_from_rows(benign)?, mode).map_err(err)?;
        let (_, snap_a) = self.inner.forward(&matrix_from_rows(attacked)?, mode).map_err(err)?;
        let entries = diagnostics::bn_drift_report(&snap_b, &snap_a).map_err(err)?;
        Ok(entries.into_iter().map(|e| (e.layer_index, e.mean_drift, e.var_drift)).collect())
    }
}

/// Generate the synthetic shift benchmark. Returns a dict with train,
/// clean_test and shifted_test splits as (rows, labels) pairs.
#[pyfunction]
#[pyo3(signature = (n_classes=10, dim=32, train_size=2000, test_size=1000, batch_size=200, shift_bias=0.25, shift_scale=0.7, shift_noise_std=0.02, seed=0))]
#[allow(clippy::too_many_arguments)]
fn generate_benchmark(
    py: Python<'_>,
    n_classes: usize,
    dim: usize,
    train_size: usize,
    test_size: usize,
    batch_size: usize,
    shift_bias: f64,
    shift_scale: f64,
    shift_noise_std: f64,
    seed: u64,
) -> PyResult<Py<pyo3::types::PyDict>> {
    let spec = bench::BenchmarkSpec {
        n_classes,
        dim,
        train_size,
        test_size,
        batch_size,
        shift: bench::ShiftSpec::uniform(dim, shift_bias, shift_scale, shift_noise_std),
        seed,
    };
    let (train, clean, shifted) = bench::generate_benchmark(&spec).map_err(err)?;
    let dict = pyo3::types::PyDict::new(py);
    for (name, ds) in [("train", train), ("clean_test", clean), ("shifted_test", shifted)] {
        dict.set_item(name, (rows_from_matrix(&ds.x), ds.y))?;
    }
    Ok(dict.unbind())
}

/// Train the source model: minibatch cross-entropy SGD, then BN source
/// statistics from one full pass over the training data.
#[pyfunction]
#[pyo3(signature = (x, y, hidden=vec![64, 64], epochs=30, lr=0.05, batch=64, seed=0))]
fn train_source(
    x: Vec<Vec<f64>>,
    y: Vec<usize>,
    hidden: Vec<usize>,
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> PyResult<PyNetwork> {
    let ds = bench::Dataset { x: matrix_from_rows(x)?, y };
    let net = bench::train_source(&ds, &hidden, epochs, lr, batch, seed).map_err(err)?;
    Ok(PyNetwork { inner: net })
}

/// Craft a distribution-invading perturbation against one batch. Returns
/// (perturbation rows, final_loss, best_step, loss_trace).
#[pyfunction]
#[pyo3(signature = (net, batch, mal_indices, objective="targeted", tgt_index=0, tgt_label=0, omega=0.1, labels=None, epsilon=None, alpha=1.0/255.0, n_steps=100, bilevel=false, method="tebn", eta=0.001, q=0.8, temperature=1.0, tau=0.0, n_tr=0, seed=0))]
#[allow(clippy::too_many_arguments)]
fn dia_attack(
    net: &PyNetwork,
    batch: Vec<Vec<f64>>,
    mal_indices: Vec<usize>,
    objective: &str,
    tgt_index: usize,
    tgt_label: usize,
    omega: f64,
    labels: Option<Vec<usize>>,
    epsilon: Option<f64>,
    alpha: f64,
    n_steps: usize,
    bilevel: bool,
    method: &str,
    eta: f64,
    q: f64,
    temperature: f64,
    tau: f64,
    n_tr: usize,
    seed: u64,
) -> PyResult<AttackOutcome> {
    let x = matrix_from_rows(batch)?;
    let objective = match objective {
        "targeted" => AttackObjective::Targeted { tgt_index, tgt_label },
        "indiscriminate" => AttackObjective::Indiscriminate,
        "stealthy" => AttackObjective::StealthyTargeted { tgt_index, tgt_label, omega },
        other => return Err(PyValueError::new_err(format!("unknown objective {:?}", other))),
    };
    let spec = AttackSpec {
        objective,
        mal_indices,
        epsilon: match epsilon {
            Some(e) => Epsilon::Bounded(e),
            None => Epsilon::Unbounded,
        },
        alpha,
        n_steps,
        bilevel,
        restarts: 1,
        pixel_bounds: (0.0, 1.0),
    };
    let mode = ttalab::defense::make_bn_mode(&DefenseSpec { tau, n_tr }, net.inner.num_bn())
        .map_err(err)?;
    let cfg = tta_config(method, eta, 1, q, temperature, mode)?;
    let mut rng = Rng::new(seed);
    let result =
        ttalab::attack::dia_attack(&net.inner, &x, labels.as_deref(), &cfg, &spec, &mut rng)
            .map_err(err)?;
    Ok((
        rows_from_matrix(&result.perturbation),
        result.final_loss,
        result.best_step,
        result.loss_trace,
    ))
}

/// 1-Wasserstein distance between two empirical 1-D distributions.
#[pyfunction]
fn wasserstein1(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    let ha = Histogram::new(a).map_err(err)?;
    let hb = Histogram::new(b).map_err(err)?;
    Ok(ttalab::numeric::wasserstein1(&ha, &hb))
}

/// wasserstein1 normalized by the range of the benign reference `a`.
#[pyfunction]
fn wasserstein1_normalized(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    let ha = Histogram::new(a).map_err(err)?;
    let hb = Histogram::new(b).map_err(err)?;
    ttalab::numeric::wasserstein1_normalized(&ha, &hb).map_err(err)
}

/// Run every finite-difference gradient oracle; returns
/// (instances, max_rel_err, failures).
#[pyfunction]
#[pyo3(signature = (seed=7))]
fn gradcheck(seed: u64) -> (usize, f64, Vec<String>) {
    let report = diagnostics::run_gradcheck(seed);
    (report.instances, report.max_rel_err, report.failures)
}

#[pymodule]
fn ttalab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(generate_benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(train_source, m)?)?;
    m.add_function(wrap_pyfunction!(dia_attack, m)?)?;
    m.add_function(wrap_pyfunction!(wasserstein1, m)?)?;
    m.add_function(wrap_pyfunction!(wasserstein1_normalized, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
