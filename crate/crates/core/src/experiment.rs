//! Training loops, evaluation, cross-validated selection of (k, η) and the
//! synthetic threshold experiment.

use std::cmp::Ordering;

use ndarray::{s, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{gen_toy, rotate_roles, split_folds, Dataset, FoldSplit};
use crate::error::{Error, Result};
use crate::network::{argmax, init_network, Activation, InitScheme, Network};
use crate::optim::{momentum_step, OptimizerState};
use crate::pseudograd::{minibatch_pseudo_gradient, Sensitivity};
use crate::seed::{derive_seed, rng_for, stream};

/// Probabilities are floored here before taking logs for metrics.
const LOG_FLOOR: f64 = 1e-300;
const EVAL_CHUNK: usize = 4096;

/// When to stop training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum EarlyStop {
    /// Stop after `epochs` consecutive epochs without a strict decrease of
    /// the early-stop error; keep the best epoch's parameters.
    Patience { epochs: usize },
    /// Stop after `epochs` consecutive epochs whose early-stop error moved
    /// by at most `tolerance` (a fraction) from the previous epoch; keep
    /// the final parameters.
    Plateau { epochs: usize, tolerance: f64 },
}

impl EarlyStop {
    pub const PATIENCE_15: EarlyStop = EarlyStop::Patience { epochs: 15 };
    /// 3000 epochs within 0.001 percentage points.
    pub const PLATEAU_3000: EarlyStop = EarlyStop::Plateau {
        epochs: 3000,
        tolerance: 1e-5,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k: Sensitivity,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Examples per update; a value ≥ the training-set size means full-batch
    /// gradient descent over the set in its stored order.
    pub minibatch: usize,
    pub clip: Option<f64>,
    pub early_stop: EarlyStop,
    pub max_epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.minibatch == 0 {
            return Err(Error::InvalidConfig("minibatch must be at least 1".into()));
        }
        match self.early_stop {
            EarlyStop::Patience { epochs: 0 } => {
                Err(Error::InvalidConfig("patience must be positive".into()))
            }
            EarlyStop::Plateau { epochs, tolerance } if epochs == 0 || !(tolerance >= 0.0) => {
                Err(Error::InvalidConfig(
                    "plateau needs positive epochs and a nonnegative tolerance".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

/// Misclassification rate and mean cross-entropy (nats per example).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub error: f64,
    pub cross_entropy: f64,
}

fn check_compatible(net: &Network, ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate on an empty dataset".into()));
    }
    if ds.n_classes() != net.n_classes() {
        return Err(Error::shape(
            format!("{} classes", net.n_classes()),
            ds.n_classes(),
        ));
    }
    Ok(())
}

/// Error under [`Network::predict`] and mean −log p_y.
pub fn evaluate(net: &Network, ds: &Dataset) -> Result<Metrics> {
    check_compatible(net, ds)?;
    let mut wrong = 0usize;
    let mut nll = 0.0;
    for start in (0..ds.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(ds.len());
        let trace = net.forward_batch(ds.features().slice(s![start..end, ..]))?;
        for (row, &y) in ds.labels()[start..end].iter().enumerate() {
            let p = trace.probabilities_of(row);
            let z = trace.logits.row(row);
            wrong += usize::from(argmax(z.as_slice().expect("standard layout")) != y);
            nll -= p[y].max(LOG_FLOOR).ln();
        }
    }
    let n = ds.len() as f64;
    Ok(Metrics {
        error: wrong as f64 / n,
        cross_entropy: nll / n,
    })
}

/// Fraction misclassified, without the cross-entropy.
pub fn error_rate(net: &Network, ds: &Dataset) -> Result<f64> {
    check_compatible(net, ds)?;
    let mut wrong = 0usize;
    for start in (0..ds.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(ds.len());
        wrong += net.count_errors(
            ds.features().slice(s![start..end, ..]),
            &ds.labels()[start..end],
        )?;
    }
    Ok(wrong as f64 / ds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub early_stop_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned, when any epoch ran.
    pub selected_epoch: Option<usize>,
    /// Whether the stopping rule fired before `max_epochs`.
    pub stopped_early: bool,
}

impl History {
    pub fn epochs_run(&self) -> usize {
        self.epochs.len()
    }

    pub fn selected_error(&self) -> Option<f64> {
        let epoch = self.selected_epoch?;
        self.epochs
            .iter()
            .find(|r| r.epoch == epoch)
            .map(|r| r.early_stop_error)
    }
}

/// Trains a copy of `net` with pseudo-gradient momentum SGD.
///
/// Each epoch reshuffles the training set (seeded by `cfg.seed`), applies
/// one momentum step per minibatch and then measures the early-stop error.
pub fn train(
    net: &Network,
    train_set: &Dataset,
    early_stop_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Network, History)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    check_compatible(net, early_stop_set)?;
    check_compatible(net, train_set)?;

    let mut current = net.clone();
    let mut history = History::default();
    if cfg.max_epochs == 0 {
        return Ok((current, history));
    }

    let mut state = OptimizerState::new(current.params(), cfg.learning_rate, cfg.momentum, cfg.clip)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = train_set.len();
    let full_batch = cfg.minibatch >= n;
    let mut order: Vec<usize> = (0..n).collect();

    let mut best: Option<(Network, f64, usize)> = None;
    let mut since_best = 0usize;
    let mut previous: Option<f64> = None;
    let mut unchanged = 0usize;

    for epoch in 1..=cfg.max_epochs {
        if full_batch {
            let g = minibatch_pseudo_gradient(&current, train_set.features(), train_set.labels(), cfg.k)?;
            momentum_step(current.params_mut(), &g, &mut state)?;
        } else {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.minibatch) {
                let xs = train_set.features().select(Axis(0), chunk);
                let ys: Vec<usize> = chunk.iter().map(|&i| train_set.labels()[i]).collect();
                let g = minibatch_pseudo_gradient(&current, xs.view(), &ys, cfg.k)?;
                momentum_step(current.params_mut(), &g, &mut state)?;
            }
        }
        if !current.params().is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let err = error_rate(&current, early_stop_set)?;
        history.epochs.push(EpochRecord {
            epoch,
            early_stop_error: err,
        });

        let stop = match cfg.early_stop {
            EarlyStop::Patience { epochs } => {
                if best.as_ref().is_none_or(|(_, e, _)| err < *e) {
                    best = Some((current.clone(), err, epoch));
                    since_best = 0;
                } else {
                    since_best += 1;
                }
                since_best >= epochs
            }
            EarlyStop::Plateau { epochs, tolerance } => {
                match previous {
                    Some(prev) if (err - prev).abs() <= tolerance => unchanged += 1,
                    _ => unchanged = 0,
                }
                previous = Some(err);
                unchanged >= epochs
            }
        };
        if stop {
            history.stopped_early = true;
            break;
        }
    }

    match best {
        Some((net, _, epoch)) => {
            history.selected_epoch = Some(epoch);
            Ok((net, history))
        }
        None => {
            history.selected_epoch = history.epochs.last().map(|r| r.epoch);
            Ok((current, history))
        }
    }
}

/// Hidden layout and initialization used to build fresh networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub init: InitScheme,
}

impl ModelSpec {
    pub fn build<R: Rng + ?Sized>(&self, input_dim: usize, n_classes: usize, rng: &mut R) -> Result<Network> {
        let mut sizes = vec![input_dim];
        sizes.extend(&self.hidden);
        sizes.push(n_classes);
        init_network(&sizes, self.activation, self.init, rng)
    }
}

/// Outcome of one training run, with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub k: f64,
    pub eta: f64,
    pub seed: u64,
    pub round: Option<usize>,
    pub val_error: Option<f64>,
    pub test_error: Option<f64>,
    pub cross_entropy: Option<f64>,
    pub epochs: usize,
    pub threshold: Option<f64>,
    pub diverged: bool,
}

/// Threshold t where the two logits of a 1-input, 2-class linear network
/// agree: t = −b/w with w = w_1 − w_0 and b = b_1 − b_0. `None` when w = 0
/// and the classifier is constant.
pub fn decision_threshold(net: &Network) -> Result<Option<f64>> {
    if net.layer_sizes() != [1, 2] {
        return Err(Error::InvalidInput(format!(
            "threshold needs a [1, 2] network, got {:?}",
            net.layer_sizes()
        )));
    }
    let layer = &net.params().layers()[0];
    let w = layer.weights[[1, 0]] - layer.weights[[0, 0]];
    let b = layer.bias[1] - layer.bias[0];
    Ok((w != 0.0).then(|| -b / w))
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
}

/// Cross-validation settings for selecting (k, η).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub k_grid: Vec<f64>,
    pub eta0: f64,
    /// Role-rotated rounds per (k, η) cell.
    pub rounds: usize,
    pub model: ModelSpec,
    /// `k`, `learning_rate` and `seed` are set per trial.
    pub train: TrainConfig,
    pub max_extensions: usize,
    pub seed: u64,
    pub jobs: usize,
}

/// Mean validation error of one (k, η) pair over its rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCell {
    pub k: f64,
    pub eta: f64,
    /// η = η0 · 2^exponent.
    pub eta_exponent: i32,
    pub round_errors: Vec<f64>,
    pub err: f64,
    pub std: Option<f64>,
    pub diverged_rounds: usize,
    /// Every round diverged; `err` is then 1.
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSelection {
    pub k: f64,
    pub eta: f64,
    /// argmin over η of err_{1,η}.
    pub baseline_eta: f64,
    pub cells: Vec<CvCell>,
    pub trials: Vec<TrialResult>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation; `None` for fewer than two values.
fn sample_std(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64;
    Some(var.sqrt())
}

/// η-search verdict for a row of (exponent, err) pairs: the argmin exponent
/// (ties toward smaller η) and the exponent to try next, if any.
pub fn next_eta_exponent(row: &[(i32, f64)]) -> (i32, Option<i32>) {
    let mut sorted = row.to_vec();
    sorted.sort_by_key(|&(e, _)| e);
    let (best, _) = sorted
        .iter()
        .copied()
        .fold(None::<(i32, f64)>, |acc, (e, err)| match acc {
            Some((_, best_err)) if best_err <= err => acc,
            _ => Some((e, err)),
        })
        .expect("nonempty row");
    let lowest = sorted[0].0;
    let highest = sorted[sorted.len() - 1].0;
    let next = if best == lowest {
        Some(lowest - 1)
    } else if best == highest {
        Some(highest + 1)
    } else {
        None
    };
    (best, next)
}

fn exponent_key(e: i32) -> u64 {
    i64::from(e) as u64
}

struct TrialTask {
    k_index: usize,
    exponent: i32,
    round: usize,
}

/// Runs the five-fold (k, η) search.
///
/// Every k in the grid starts from η ∈ {η0/2, η0, 2η0}; when the best η of
/// a row is at an edge the row is extended by halving or doubling, up to
/// `max_extensions` times. k = 1 is always searched so the cross-entropy
/// baseline has a tuned η, but it is only selectable when in the grid.
pub fn cv_select(ds: &Dataset, cfg: &CvConfig) -> Result<CvSelection> {
    if cfg.k_grid.is_empty() {
        return Err(Error::InvalidConfig("k grid is empty".into()));
    }
    if cfg.rounds == 0 {
        return Err(Error::InvalidConfig("need at least one round".into()));
    }
    if !(cfg.eta0 > 0.0) || !cfg.eta0.is_finite() {
        return Err(Error::InvalidConfig(format!("eta0 must be positive, got {}", cfg.eta0)));
    }
    cfg.train.validate()?;
    let mut ks: Vec<Sensitivity> = Vec::new();
    for &k in &cfg.k_grid {
        let k = Sensitivity::new(k)?;
        if !ks.contains(&k) {
            ks.push(k);
        }
    }
    let selectable = ks.len();
    if !ks.contains(&Sensitivity::CROSS_ENTROPY) {
        ks.push(Sensitivity::CROSS_ENTROPY);
    }

    let split = split_folds(ds.len(), &mut rng_for(cfg.seed, &[stream::FOLDS]))?;
    let pool = thread_pool(cfg.jobs)?;

    let mut rows: Vec<Vec<CvCell>> = vec![Vec::new(); ks.len()];
    let mut extensions = vec![0usize; ks.len()];
    let mut pending: Vec<(usize, i32)> = (0..ks.len())
        .flat_map(|ki| [-1, 0, 1].map(|e| (ki, e)))
        .collect();
    let mut trials = Vec::new();

    while !pending.is_empty() {
        let tasks: Vec<TrialTask> = pending
            .iter()
            .flat_map(|&(k_index, exponent)| {
                (0..cfg.rounds).map(move |round| TrialTask {
                    k_index,
                    exponent,
                    round,
                })
            })
            .collect();
        let results: Vec<Result<TrialResult>> = pool.install(|| {
            tasks
                .par_iter()
                .map(|t| cv_trial(ds, &split, cfg, ks[t.k_index], t))
                .collect()
        });
        let results: Vec<TrialResult> = results.into_iter().collect::<Result<_>>()?;

        for (cell_index, &(ki, exponent)) in pending.iter().enumerate() {
            let rounds = &results[cell_index * cfg.rounds..(cell_index + 1) * cfg.rounds];
            let round_errors: Vec<f64> = rounds.iter().map(|r| r.val_error.unwrap_or(1.0)).collect();
            let diverged_rounds = rounds.iter().filter(|r| r.diverged).count();
            rows[ki].push(CvCell {
                k: ks[ki].get(),
                eta: cfg.eta0 * 2f64.powi(exponent),
                eta_exponent: exponent,
                err: mean(&round_errors),
                std: sample_std(&round_errors),
                round_errors,
                diverged_rounds,
                diverged: diverged_rounds == cfg.rounds,
            });
        }
        trials.extend(results);

        let evaluated: Vec<usize> = {
            let mut v: Vec<usize> = pending.iter().map(|&(ki, _)| ki).collect();
            v.dedup();
            v
        };
        pending.clear();
        for ki in evaluated {
            let row: Vec<(i32, f64)> = rows[ki].iter().map(|c| (c.eta_exponent, c.err)).collect();
            if let (_, Some(next)) = next_eta_exponent(&row) {
                if extensions[ki] < cfg.max_extensions {
                    extensions[ki] += 1;
                    pending.push((ki, next));
                }
            }
        }
    }

    let best_of = |ki: usize| -> &CvCell {
        let row: Vec<(i32, f64)> = rows[ki].iter().map(|c| (c.eta_exponent, c.err)).collect();
        let (best, _) = next_eta_exponent(&row);
        rows[ki].iter().find(|c| c.eta_exponent == best).expect("cell exists")
    };

    let chosen = (0..selectable)
        .map(best_of)
        .min_by(|a, b| compare_selection(a, b))
        .expect("nonempty grid");
    let baseline_index = ks
        .iter()
        .position(|&k| k == Sensitivity::CROSS_ENTROPY)
        .expect("k = 1 is always searched");
    let baseline = best_of(baseline_index);

    let mut cells: Vec<CvCell> = rows.iter().flatten().cloned().collect();
    cells.sort_by(|a, b| {
        b.k.partial_cmp(&a.k)
            .unwrap_or(Ordering::Equal)
            .then(a.eta_exponent.cmp(&b.eta_exponent))
    });
    trials.sort_by(|a, b| {
        b.k.partial_cmp(&a.k)
            .unwrap_or(Ordering::Equal)
            .then(a.eta.partial_cmp(&b.eta).unwrap_or(Ordering::Equal))
            .then(a.round.cmp(&b.round))
    });

    Ok(CvSelection {
        k: chosen.k,
        eta: chosen.eta,
        baseline_eta: baseline.eta,
        cells,
        trials,
    })
}

/// Lower error first, then k closer to 1 on a log scale, then smaller η,
/// then smaller k.
fn compare_selection(a: &CvCell, b: &CvCell) -> Ordering {
    a.err
        .partial_cmp(&b.err)
        .unwrap_or(Ordering::Equal)
        .then(a.k.ln().abs().partial_cmp(&b.k.ln().abs()).unwrap_or(Ordering::Equal))
        .then(a.eta.partial_cmp(&b.eta).unwrap_or(Ordering::Equal))
        .then(a.k.partial_cmp(&b.k).unwrap_or(Ordering::Equal))
}

fn cv_trial(
    ds: &Dataset,
    split: &FoldSplit,
    cfg: &CvConfig,
    k: Sensitivity,
    task: &TrialTask,
) -> Result<TrialResult> {
    let roles = rotate_roles(task.round);
    let train_set = ds.subset(&split.indices(&roles.train));
    let early_stop_set = ds.subset(&split.folds()[roles.early_stop]);
    let validation_set = ds.subset(&split.folds()[roles.validation]);

    let seed = derive_seed(
        cfg.seed,
        &[
            stream::TRIAL,
            task.k_index as u64,
            exponent_key(task.exponent),
            task.round as u64,
        ],
    );
    let eta = cfg.eta0 * 2f64.powi(task.exponent);
    let net = cfg
        .model
        .build(ds.feature_dim(), ds.n_classes(), &mut rng_for(seed, &[stream::INIT]))?;
    let train_cfg = TrainConfig {
        k,
        learning_rate: eta,
        seed: derive_seed(seed, &[stream::SHUFFLE]),
        ..cfg.train.clone()
    };
    let mut result = TrialResult {
        k: k.get(),
        eta,
        seed,
        round: Some(task.round),
        val_error: None,
        test_error: None,
        cross_entropy: None,
        epochs: 0,
        threshold: None,
        diverged: false,
    };
    match train(&net, &train_set, &early_stop_set, &train_cfg) {
        Ok((trained, history)) => {
            let metrics = evaluate(&trained, &validation_set)?;
            result.val_error = Some(metrics.error);
            result.cross_entropy = Some(metrics.cross_entropy);
            result.epochs = history.epochs_run();
        }
        Err(Error::Diverged { epoch }) => {
            result.val_error = Some(1.0);
            result.epochs = epoch;
            result.diverged = true;
        }
        Err(e) => return Err(e),
    }
    Ok(result)
}

/// Retrains on the full training sample with one fifth held out for early
/// stopping and reports test metrics.
pub fn final_retrain(
    train_ds: &Dataset,
    test_ds: &Dataset,
    k: Sensitivity,
    eta: f64,
    model: &ModelSpec,
    template: &TrainConfig,
    seed: u64,
) -> Result<TrialResult> {
    if train_ds.len() < 5 {
        return Err(Error::InvalidInput("retraining needs at least 5 examples".into()));
    }
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    order.shuffle(&mut rng_for(seed, &[stream::RETRAIN_SPLIT]));
    let held_out = train_ds.len() / 5;
    let early_stop_set = train_ds.subset(&order[..held_out]);
    let train_set = train_ds.subset(&order[held_out..]);

    let net = model.build(train_ds.feature_dim(), train_ds.n_classes(), &mut rng_for(seed, &[stream::INIT]))?;
    let cfg = TrainConfig {
        k,
        learning_rate: eta,
        seed: derive_seed(seed, &[stream::SHUFFLE]),
        ..template.clone()
    };
    let (trained, history) = train(&net, &train_set, &early_stop_set, &cfg)?;
    let metrics = evaluate(&trained, test_ds)?;
    Ok(TrialResult {
        k: k.get(),
        eta,
        seed,
        round: None,
        val_error: history.selected_error(),
        test_error: Some(metrics.error),
        cross_entropy: Some(metrics.cross_entropy),
        epochs: history.epochs_run(),
        threshold: None,
        diverged: false,
    })
}

/// Selection plus the two final retrainings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub selection: CvSelection,
    pub selected: TrialResult,
    pub baseline: TrialResult,
}

/// Cross-validates (k, η), then retrains k* at η* and k = 1 at η*₁ with
/// the same split and initialization seed.
pub fn cv_protocol(train_ds: &Dataset, test_ds: &Dataset, cfg: &CvConfig) -> Result<CvReport> {
    let selection = cv_select(train_ds, cfg)?;
    let seed = derive_seed(cfg.seed, &[stream::RETRAIN_SPLIT]);
    let selected = final_retrain(
        train_ds,
        test_ds,
        Sensitivity::new(selection.k)?,
        selection.eta,
        &cfg.model,
        &cfg.train,
        seed,
    )?;
    let baseline = if selection.k == 1.0 && selection.eta == selection.baseline_eta {
        selected.clone()
    } else {
        final_retrain(
            train_ds,
            test_ds,
            Sensitivity::CROSS_ENTROPY,
            selection.baseline_eta,
            &cfg.model,
            &cfg.train,
            seed,
        )?
    };
    Ok(CvReport {
        selection,
        selected,
        baseline,
    })
}

/// Settings of the synthetic threshold experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub alpha: f64,
    pub k_list: Vec<f64>,
    pub runs: usize,
    pub train_size: usize,
    pub validation_size: usize,
    pub test_size: usize,
    pub learning_rate: f64,
    /// Weights start in U(−init_range, init_range); biases at 0.
    pub init_range: f64,
    pub early_stop: EarlyStop,
    pub max_epochs: usize,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            alpha: 0.95,
            k_list: crate::pseudograd::K_GRID.to_vec(),
            runs: 10,
            train_size: 30_000,
            validation_size: 30_000,
            test_size: 30_000,
            learning_rate: 0.01,
            init_range: 0.1,
            early_stop: EarlyStop::PLATEAU_3000,
            max_epochs: 1_000_000,
            seed: 0,
            jobs: 1,
        }
    }
}

/// Per-k averages over runs. Spread fields are absent for a single run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRow {
    pub k: f64,
    pub runs: usize,
    pub mean_test_error: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub std_test_error: Option<f64>,
    /// Mean over runs that ended with a non-constant classifier.
    pub mean_threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub std_threshold: Option<f64>,
    pub mean_cross_entropy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub std_cross_entropy: Option<f64>,
    pub mean_epochs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub config: ToyConfig,
    pub rows: Vec<ToyRow>,
    pub trials: Vec<TrialResult>,
}

/// Runs the threshold experiment. Run r of every k uses the same three
/// datasets and the same initial weights, all derived from (seed, r).
pub fn toy_experiment(cfg: &ToyConfig) -> Result<ToyReport> {
    if !(cfg.alpha > 0.5 && cfg.alpha < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "alpha must lie in (0.5, 1), got {}",
            cfg.alpha
        )));
    }
    if cfg.runs == 0 || cfg.k_list.is_empty() {
        return Err(Error::InvalidConfig("need at least one run and one k".into()));
    }
    if !(cfg.init_range > 0.0) {
        return Err(Error::InvalidConfig("init range must be positive".into()));
    }
    let ks: Vec<Sensitivity> = cfg
        .k_list
        .iter()
        .map(|&k| Sensitivity::new(k))
        .collect::<Result<_>>()?;

    let tasks: Vec<(usize, usize)> = (0..ks.len())
        .flat_map(|ki| (0..cfg.runs).map(move |run| (ki, run)))
        .collect();
    let pool = thread_pool(cfg.jobs)?;
    let trials: Vec<TrialResult> = pool
        .install(|| {
            tasks
                .par_iter()
                .map(|&(ki, run)| toy_trial(cfg, ks[ki], run))
                .collect::<Vec<_>>()
        })
        .into_iter()
        .collect::<Result<_>>()?;

    let rows = ks
        .iter()
        .enumerate()
        .map(|(ki, k)| {
            let runs = &trials[ki * cfg.runs..(ki + 1) * cfg.runs];
            let errors: Vec<f64> = runs.iter().filter_map(|r| r.test_error).collect();
            let ces: Vec<f64> = runs.iter().filter_map(|r| r.cross_entropy).collect();
            let thresholds: Vec<f64> = runs.iter().filter_map(|r| r.threshold).collect();
            let epochs: Vec<f64> = runs.iter().map(|r| r.epochs as f64).collect();
            ToyRow {
                k: k.get(),
                runs: cfg.runs,
                mean_test_error: mean(&errors),
                std_test_error: sample_std(&errors),
                mean_threshold: (!thresholds.is_empty()).then(|| mean(&thresholds)),
                std_threshold: sample_std(&thresholds),
                mean_cross_entropy: mean(&ces),
                std_cross_entropy: sample_std(&ces),
                mean_epochs: mean(&epochs),
            }
        })
        .collect();

    Ok(ToyReport {
        config: cfg.clone(),
        rows,
        trials,
    })
}

fn toy_trial(cfg: &ToyConfig, k: Sensitivity, run: usize) -> Result<TrialResult> {
    let run_key = run as u64;
    let train_set = gen_toy(cfg.train_size, cfg.alpha, &mut rng_for(cfg.seed, &[stream::TRAIN_DATA, run_key]))?;
    let validation_set = gen_toy(
        cfg.validation_size,
        cfg.alpha,
        &mut rng_for(cfg.seed, &[stream::VALIDATION_DATA, run_key]),
    )?;
    let test_set = gen_toy(cfg.test_size, cfg.alpha, &mut rng_for(cfg.seed, &[stream::TEST_DATA, run_key]))?;

    let seed = derive_seed(cfg.seed, &[stream::TRIAL, run_key]);
    let net = init_network(
        &[1, 2],
        Activation::Tanh,
        InitScheme::Uniform {
            low: -cfg.init_range,
            high: cfg.init_range,
        },
        &mut rng_for(seed, &[stream::INIT]),
    )?;
    let train_cfg = TrainConfig {
        k,
        learning_rate: cfg.learning_rate,
        momentum: 0.0,
        minibatch: usize::MAX,
        clip: None,
        early_stop: cfg.early_stop,
        max_epochs: cfg.max_epochs,
        seed: derive_seed(seed, &[stream::SHUFFLE]),
    };
    let (trained, history) = train(&net, &train_set, &validation_set, &train_cfg)?;
    let metrics = evaluate(&trained, &test_set)?;
    Ok(TrialResult {
        k: k.get(),
        eta: cfg.learning_rate,
        seed,
        round: Some(run),
        val_error: history.epochs.last().map(|r| r.early_stop_error),
        test_error: Some(metrics.error),
        cross_entropy: Some(metrics.cross_entropy),
        epochs: history.epochs_run(),
        threshold: decision_threshold(&trained)?,
        diverged: false,
    })
}
