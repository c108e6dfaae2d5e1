//! Synthetic panel generation from the exact generative model, plus seeded
//! replicate studies (parameter recovery across sample sizes, robustness
//! across the AR(1) coefficient, iteration counts).
//!
//! Reproducibility contract: the master seed and the (cell, replicate) index
//! determine each replicate's substream through a SplitMix64 mix, so replicate
//! k is bit-identical regardless of execution order or thread count.

use crate::error::{Error, Result};
use crate::model::{
    build_designs, linear_predictor, FamilyLink, ModelParams, PanelLayout, RandomEffectState,
};
use crate::ridge_em::{self, FitConfig};
use crate::sc_em::{self, ScConfig};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// SplitMix64 finalizer (Steele et al. constants).
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Substream seed for one replicate of one study cell.
pub fn replicate_seed(master_seed: u64, cell: usize, replicate: usize) -> u64 {
    let key = ((cell as u64) << 32) ^ (replicate as u64);
    splitmix64(master_seed ^ splitmix64(key))
}

/// Fixed-effect design generator: i.i.d. standard normal columns, optional
/// equicorrelation, optional leading intercept column of ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XGenerator<F> {
    pub n_features: usize,
    pub intercept: bool,
    /// Pairwise correlation r_x between feature columns (None = independent).
    pub pairwise_correlation: Option<F>,
}

impl<F: Scalar> XGenerator<F> {
    pub fn n_columns(&self) -> usize {
        self.n_features + usize::from(self.intercept)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 && !self.intercept {
            return Err(Error::SimSpec("X generator produces no columns".into()));
        }
        if let Some(r) = self.pairwise_correlation {
            if r < F::zero() || r >= F::one() {
                return Err(Error::SimSpec(format!(
                    "pairwise correlation must lie in [0, 1), got {r}"
                )));
            }
        }
        Ok(())
    }

    /// Draws the design row by row (fixed draw order for reproducibility).
    pub fn generate<R: Rng + ?Sized>(&self, n_rows: usize, rng: &mut R) -> Array2<F> {
        let offset = usize::from(self.intercept);
        let mut x = Array2::<F>::zeros((n_rows, self.n_columns()));
        let shared_weight = self.pairwise_correlation.map(|r| (r.sqrt(), (F::one() - r).sqrt()));
        for i in 0..n_rows {
            if self.intercept {
                x[(i, 0)] = F::one();
            }
            let common = match shared_weight {
                Some(_) => F::standard_normal(rng),
                None => F::zero(),
            };
            for j in 0..self.n_features {
                let e = F::standard_normal(rng);
                x[(i, offset + j)] = match shared_weight {
                    Some((wc, we)) => wc * common + we * e,
                    None => e,
                };
            }
        }
        x
    }
}

/// Full generative specification of one synthetic panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec<F> {
    pub layout: PanelLayout,
    pub params: ModelParams<F>,
    pub family: FamilyLink<F>,
    pub x_gen: XGenerator<F>,
    pub seed: u64,
}

impl<F: Scalar> SimSpec<F> {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.x_gen.validate()?;
        if self.params.beta.len() != self.x_gen.n_columns() {
            return Err(Error::SimSpec(format!(
                "beta has length {}, X generator produces {} columns",
                self.params.beta.len(),
                self.x_gen.n_columns()
            )));
        }
        Ok(())
    }
}

/// Realized latent state stored alongside the data for oracle scoring.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PanelTruth<F> {
    pub params: ModelParams<F>,
    pub xi: RandomEffectState<F>,
}

#[derive(Debug, Clone)]
pub struct PanelData<F> {
    pub y: Array1<F>,
    pub x: Array2<F>,
    pub truth: PanelTruth<F>,
}

/// Simulation guard: Poisson means above this reject the spec.
const MAX_POISSON_MEAN: f64 = 1e6;

/// Stationary AR(1) path: ξ₁ from the marginal law, recursion afterwards.
/// Always consumes exactly `n_times` normal draws.
pub fn gen_ar1_path<F: Scalar, R: Rng + ?Sized>(
    n_times: usize,
    rho: F,
    sigma2_sq: F,
    rng: &mut R,
) -> Result<Array1<F>> {
    crate::model::check_rho(rho)?;
    if sigma2_sq < F::zero() || !sigma2_sq.is_finite() {
        return Err(Error::SimSpec(format!(
            "sigma2_sq must be finite and >= 0, got {sigma2_sq}"
        )));
    }
    let marginal_sd = (sigma2_sq / (F::one() - rho * rho)).sqrt();
    let innov_sd = sigma2_sq.sqrt();
    let mut path = Array1::<F>::zeros(n_times);
    for t in 0..n_times {
        let draw = F::standard_normal(rng);
        path[t] = if t == 0 {
            marginal_sd * draw
        } else {
            rho * path[t - 1] + innov_sd * draw
        };
    }
    Ok(path)
}

/// i.i.d. individual effects ξ₁ ~ N(0, σ₁² I).
pub fn gen_individual_effects<F: Scalar, R: Rng + ?Sized>(
    n_individuals: usize,
    sigma1_sq: F,
    rng: &mut R,
) -> Array1<F> {
    let sd = sigma1_sq.sqrt();
    Array1::from_shape_fn(n_individuals, |_| sd * F::standard_normal(rng))
}

/// Draws one complete panel: X, ξ₁, ξ₂, then y from the family.
pub fn gen_panel<F: Scalar>(spec: &SimSpec<F>) -> Result<PanelData<F>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layout = spec.layout;
    let x = spec.x_gen.generate(layout.n_rows(), &mut rng);
    let xi1 = gen_individual_effects(layout.n_individuals(), spec.params.sigma1_sq, &mut rng);
    let xi2 = gen_ar1_path(layout.n_times(), spec.params.rho, spec.params.sigma2_sq, &mut rng)?;
    let xi = RandomEffectState::new(xi1, xi2);

    let designs = build_designs(layout, x)?;
    let eta = linear_predictor(&designs, &spec.params, &xi);
    let mu = eta.mapv(|e| spec.family.inv_link(e));
    if matches!(spec.family, FamilyLink::PoissonLog) {
        if let Some(bad) = mu.iter().find(|m| m.as_f64() > MAX_POISSON_MEAN) {
            return Err(Error::SimSpec(format!(
                "poisson mean overflow: mu = {bad} exceeds {MAX_POISSON_MEAN:e}; \
                 shrink beta or the variance components"
            )));
        }
    }
    let y = Array1::from_shape_fn(layout.n_rows(), |i| spec.family.sample(mu[i], &mut rng));
    let x = designs.x().clone();
    Ok(PanelData {
        y,
        x,
        truth: PanelTruth {
            params: spec.params.clone(),
            xi,
        },
    })
}

/// Which fitting flavor a study exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyFlavor {
    Ridge,
    SupervisedComponent,
}

/// One grid cell: panel dimensions plus the true parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyCell<F> {
    pub layout: PanelLayout,
    pub params: ModelParams<F>,
}

#[derive(Debug, Clone)]
pub struct StudySpec<F> {
    pub cells: Vec<StudyCell<F>>,
    pub n_replicates: usize,
    pub flavor: StudyFlavor,
    pub family: FamilyLink<F>,
    pub x_gen: XGenerator<F>,
    pub fit_config: FitConfig<F>,
    pub sc_config: Option<ScConfig<F>>,
    pub master_seed: u64,
}

impl<F: Scalar> StudySpec<F> {
    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::Config("study needs at least one cell".into()));
        }
        if self.n_replicates == 0 {
            return Err(Error::Config("study needs n_replicates >= 1".into()));
        }
        self.x_gen.validate()?;
        self.fit_config.validate()?;
        for cell in &self.cells {
            cell.params.validate()?;
            if cell.params.beta.len() != self.x_gen.n_columns() {
                return Err(Error::Config(
                    "cell beta length does not match the X generator".into(),
                ));
            }
        }
        if self.flavor == StudyFlavor::SupervisedComponent {
            let sc = self
                .sc_config
                .as_ref()
                .ok_or_else(|| Error::Config("supervised-component study needs sc_config".into()))?;
            sc.validate()?;
            if !self.x_gen.intercept {
                return Err(Error::Config(
                    "supervised-component studies require an intercept column so the \
                     back-mapped coefficients align with the truth"
                        .into(),
                ));
            }
        }
        Ok(())
    }
}

/// Outcome of a single replicate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateRecord<F> {
    pub replicate: usize,
    pub seed: u64,
    pub estimate: Option<ModelParams<F>>,
    pub n_iter: usize,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MseEntry<F> {
    pub parameter: String,
    pub truth: F,
    pub mse: Option<F>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult<F> {
    pub cell: StudyCell<F>,
    pub replicates: Vec<ReplicateRecord<F>>,
    pub mse: Vec<MseEntry<F>>,
    pub convergence_rate: f64,
    pub median_iterations: Option<f64>,
    pub n_failures: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyResult<F> {
    pub format_version: u32,
    pub master_seed: u64,
    pub flavor: StudyFlavor,
    pub n_replicates: usize,
    pub cells: Vec<CellResult<F>>,
}

/// Canonical parameter order used by MSE tables and the flattened CSV.
pub fn param_names(p: usize) -> Vec<String> {
    let mut names: Vec<String> = (0..p).map(|j| format!("beta{j}")).collect();
    names.push("sigma1_sq".into());
    names.push("sigma2_sq".into());
    names.push("rho".into());
    names
}

fn param_values<F: Scalar>(params: &ModelParams<F>) -> Vec<F> {
    let mut values: Vec<F> = params.beta.iter().copied().collect();
    values.push(params.sigma1_sq);
    values.push(params.sigma2_sq);
    values.push(params.rho);
    values
}

/// Per-parameter MSE over the successful replicates; recomputable from the
/// stored estimates (and retested as such).
pub fn mse_table<F: Scalar>(
    truth: &ModelParams<F>,
    replicates: &[ReplicateRecord<F>],
) -> Vec<MseEntry<F>> {
    let names = param_names(truth.beta.len());
    let truth_values = param_values(truth);
    let successes: Vec<Vec<F>> = replicates
        .iter()
        .filter_map(|r| r.estimate.as_ref().map(param_values))
        .collect();
    names
        .into_iter()
        .zip(truth_values)
        .enumerate()
        .map(|(j, (parameter, truth_v))| {
            let mse = if successes.is_empty() {
                None
            } else {
                let total: F = successes
                    .iter()
                    .map(|est| {
                        let d = est[j] - truth_v;
                        d * d
                    })
                    .sum();
                Some(total / F::of_usize(successes.len()))
            };
            MseEntry {
                parameter,
                truth: truth_v,
                mse,
            }
        })
        .collect()
}

fn run_replicate<F: Scalar>(
    spec: &StudySpec<F>,
    cell_idx: usize,
    replicate: usize,
) -> ReplicateRecord<F> {
    let cell = &spec.cells[cell_idx];
    let seed = replicate_seed(spec.master_seed, cell_idx, replicate);
    let sim = SimSpec {
        layout: cell.layout,
        params: cell.params.clone(),
        family: spec.family,
        x_gen: spec.x_gen.clone(),
        seed,
    };
    let outcome = (|| -> Result<(ModelParams<F>, usize, bool)> {
        let data = gen_panel(&sim)?;
        match spec.flavor {
            StudyFlavor::Ridge => {
                let designs = build_designs(cell.layout, data.x)?;
                let fit = ridge_em::fit(
                    &data.y.view(),
                    &designs,
                    &spec.family,
                    &spec.fit_config,
                    None,
                )?;
                Ok((fit.params, fit.n_iter, fit.converged))
            }
            StudyFlavor::SupervisedComponent => {
                // strip the intercept column: fit_hd centers the features and
                // carries its own intercept, reported back in beta[0]
                let features = data.x.slice(ndarray::s![.., 1..]).to_owned();
                let sc = spec.sc_config.as_ref().expect("validated");
                let hd = sc_em::fit_hd(
                    &data.y.view(),
                    cell.layout,
                    &features,
                    &spec.family,
                    sc,
                    &spec.fit_config,
                )?;
                Ok((hd.fit.params.clone(), hd.fit.n_iter, hd.fit.converged))
            }
        }
    })();
    match outcome {
        Ok((estimate, n_iter, converged)) => ReplicateRecord {
            replicate,
            seed,
            estimate: Some(estimate),
            n_iter,
            converged,
            error: None,
        },
        Err(e) => ReplicateRecord {
            replicate,
            seed,
            estimate: None,
            n_iter: 0,
            converged: false,
            error: Some(e.to_string()),
        },
    }
}

/// Runs every (cell, replicate) task, optionally across threads. Results are
/// keyed by index, so the output is identical for any thread count.
pub fn run_study<F: Scalar>(spec: &StudySpec<F>, n_threads: usize) -> Result<StudyResult<F>> {
    spec.validate()?;
    let n_cells = spec.cells.len();
    let n_tasks = n_cells * spec.n_replicates;
    let mut records: Vec<Option<ReplicateRecord<F>>> = Vec::new();
    records.resize_with(n_tasks, || None);

    let workers = n_threads.max(1).min(n_tasks);
    if workers <= 1 {
        for task in 0..n_tasks {
            let (cell_idx, replicate) = (task / spec.n_replicates, task % spec.n_replicates);
            records[task] = Some(run_replicate(spec, cell_idx, replicate));
        }
    } else {
        let next = AtomicUsize::new(0);
        let sink: Mutex<Vec<(usize, ReplicateRecord<F>)>> = Mutex::new(Vec::with_capacity(n_tasks));
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let task = next.fetch_add(1, Ordering::Relaxed);
                    if task >= n_tasks {
                        break;
                    }
                    let (cell_idx, replicate) =
                        (task / spec.n_replicates, task % spec.n_replicates);
                    let record = run_replicate(spec, cell_idx, replicate);
                    sink.lock().expect("worker poisoned").push((task, record));
                });
            }
        });
        for (task, record) in sink.into_inner().expect("worker poisoned") {
            records[task] = Some(record);
        }
    }

    let mut cells = Vec::with_capacity(n_cells);
    for (cell_idx, cell) in spec.cells.iter().enumerate() {
        let replicates: Vec<ReplicateRecord<F>> = (0..spec.n_replicates)
            .map(|r| {
                records[cell_idx * spec.n_replicates + r]
                    .take()
                    .expect("every task ran")
            })
            .collect();
        let mse = mse_table(&cell.params, &replicates);
        let n_failures = replicates.iter().filter(|r| r.error.is_some()).count();
        let n_converged = replicates.iter().filter(|r| r.converged).count();
        let mut iters: Vec<usize> = replicates
            .iter()
            .filter(|r| r.estimate.is_some())
            .map(|r| r.n_iter)
            .collect();
        iters.sort_unstable();
        let median_iterations = if iters.is_empty() {
            None
        } else if iters.len() % 2 == 1 {
            Some(iters[iters.len() / 2] as f64)
        } else {
            Some((iters[iters.len() / 2 - 1] + iters[iters.len() / 2]) as f64 / 2.0)
        };
        cells.push(CellResult {
            cell: cell.clone(),
            replicates,
            mse,
            convergence_rate: n_converged as f64 / spec.n_replicates as f64,
            median_iterations,
            n_failures,
        });
    }
    Ok(StudyResult {
        format_version: 1,
        master_seed: spec.master_seed,
        flavor: spec.flavor,
        n_replicates: spec.n_replicates,
        cells,
    })
}

impl<F: Scalar> StudyResult<F> {
    /// Flattened CSV: one row per replicate × parameter.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "cell,n_individuals,n_times,true_rho,replicate,parameter,truth,estimate,converged,n_iter"
        )?;
        for (cell_idx, cell) in self.cells.iter().enumerate() {
            let names = param_names(cell.cell.params.beta.len());
            let truth_values = param_values(&cell.cell.params);
            for record in &cell.replicates {
                let estimates = record.estimate.as_ref().map(param_values);
                for (j, name) in names.iter().enumerate() {
                    let estimate = estimates
                        .as_ref()
                        .map(|e| format!("{}", e[j]))
                        .unwrap_or_default();
                    writeln!(
                        out,
                        "{},{},{},{},{},{},{},{},{},{}",
                        cell_idx,
                        cell.cell.layout.n_individuals(),
                        cell.cell.layout.n_times(),
                        cell.cell.params.rho,
                        record.replicate,
                        name,
                        truth_values[j],
                        estimate,
                        record.converged,
                        record.n_iter
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// Sample variance with the population denominator.
pub fn sample_variance<F: Scalar>(values: &ArrayView1<F>) -> F {
    let n = F::of_usize(values.len());
    let mean = values.iter().copied().sum::<F>() / n;
    values.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n
}
