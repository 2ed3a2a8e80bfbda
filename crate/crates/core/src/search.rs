//! Alternating first-order search: architecture logits and loss weights on
//! the validation split, network weights on the training split.

use std::io::Write;
use std::path::Path;

use log::{debug, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{config_err, Error, Result};
use crate::loss_balance::{grad_regularizer, total_loss, LambdaParams, RateTracker, NUM_LOSSES};
use crate::nn::{Ctx, Mode, ParamStore};
use crate::optim::{clip_gradients, Adam, Sgd};
use crate::search_space::{AlphaVars, ArchParams, CellType};
use crate::supernet::{compute_losses, Network, SupernetConfig, ViewBatch};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub w_lr: f64,
    pub w_momentum: f64,
    pub w_weight_decay: f64,
    pub alpha_lr: f64,
    pub alpha_betas: (f64, f64),
    pub alpha_eps: f64,
    pub alpha_weight_decay: f64,
    pub lambda_lr: f64,
    pub lambda_momentum: f64,
    pub grad_clip_norm: f64,
    pub warmup_epochs: usize,
    pub rate_smoothing: f64,
    pub init_std: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 25,
            batch_size: 36,
            w_lr: 0.01,
            w_momentum: 0.9,
            w_weight_decay: 3e-4,
            alpha_lr: 3e-4,
            alpha_betas: (0.5, 0.999),
            alpha_eps: 1e-8,
            alpha_weight_decay: 1e-3,
            lambda_lr: 0.05,
            lambda_momentum: 0.0,
            grad_clip_norm: 5.0,
            warmup_epochs: 5,
            rate_smoothing: 0.9,
            init_std: 1e-3,
            val_fraction: 0.5,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("w_lr", self.w_lr),
            ("alpha_lr", self.alpha_lr),
            ("lambda_lr", self.lambda_lr),
            ("grad_clip_norm", self.grad_clip_norm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err!("{name} must be positive, got {v}"));
            }
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be positive"));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(config_err!(
                "warmup_epochs ({}) must be smaller than epochs ({})",
                self.warmup_epochs,
                self.epochs
            ));
        }
        if !(0.0..1.0).contains(&self.rate_smoothing) {
            return Err(config_err!("rate_smoothing must lie in [0, 1)"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(config_err!("val_fraction must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Everything that evolves during search; serializable for resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    pub config: SearchConfig,
    pub net_config: SupernetConfig,
    pub store: ParamStore,
    pub arch: ArchParams,
    pub w_opt: Sgd,
    pub alpha_opt: Adam,
    pub lambda_opt: Sgd,
    pub tracker: RateTracker,
    pub epochs_done: usize,
    pub log: Vec<EpochLog>,
    pub trajectory: Vec<ArchParams>,
}

impl SearchState {
    /// Fresh supernet weights and architecture parameters drawn from `config.seed`.
    pub fn new(config: &SearchConfig, net_config: &SupernetConfig) -> Result<(Self, Network)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let net = Network::supernet(net_config, &mut store, &mut rng)?;
        let arch = ArchParams::random(&mut rng, config.init_std);
        let state = SearchState {
            config: config.clone(),
            net_config: net_config.clone(),
            store,
            trajectory: vec![arch.clone()],
            arch,
            w_opt: Sgd::new(config.w_lr, config.w_momentum, config.w_weight_decay),
            alpha_opt: Adam::new(
                config.alpha_lr,
                config.alpha_betas,
                config.alpha_eps,
                config.alpha_weight_decay,
            ),
            lambda_opt: Sgd::new(config.lambda_lr, config.lambda_momentum, 0.0),
            tracker: RateTracker::new(config.rate_smoothing)?,
            epochs_done: 0,
            log: Vec::new(),
        };
        Ok((state, net))
    }

    /// Rebuilds the supernet structure matching a restored state.
    pub fn network(&self) -> Result<Network> {
        let mut scratch = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let net = Network::supernet(&self.net_config, &mut scratch, &mut rng)?;
        if scratch.len() != self.store.len() {
            return Err(config_err!(
                "checkpoint holds {} tensors, network expects {}",
                self.store.len(),
                scratch.len()
            ));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        serde_json::to_writer(&mut w, self).map_err(|e| Error::Parse(format!("checkpoint: {e}")))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| Error::Parse(format!("checkpoint {}: {e}", path.display())))
    }
}

/// Losses and rates observed in one search step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub train: [f64; NUM_LOSSES],
    pub val: [f64; NUM_LOSSES],
    pub val_total: f64,
    pub rates: [f64; NUM_LOSSES],
    pub grad_norm: f64,
}

/// Per-epoch means written to the search log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: [f64; NUM_LOSSES],
    pub val: [f64; NUM_LOSSES],
    pub val_total: f64,
    pub weights: [f64; NUM_LOSSES],
    pub alpha_entropy: f64,
}

fn loss_values(tape: &Tape, losses: &crate::supernet::Losses) -> Result<[f64; NUM_LOSSES]> {
    let v = losses.as_array().map(|l| tape.item(l));
    for (i, x) in v.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::Numeric(format!("loss L{} diverged ({x})", i + 1)));
        }
    }
    Ok(v)
}

/// One round of the alternating update. With `update_arch == false` the
/// validation pass only records losses and feeds the rate tracker.
pub fn search_step(
    state: &mut SearchState,
    net: &Network,
    train: &ViewBatch,
    val: &ViewBatch,
    update_arch: bool,
) -> Result<StepLog> {
    // Validation pass: gradients reach α only.
    let (val_losses, val_total, alpha_grads) = {
        let mut ctx = Ctx::new(&mut state.store, Mode::Train, false);
        let alphas = AlphaVars::bind(&mut ctx, &state.arch, update_arch);
        let out = net.forward(&mut ctx, val, Some(&alphas))?;
        let losses = compute_losses(&mut ctx, &out, &val.labels)?;
        let values = loss_values(&ctx.tape, &losses)?;
        let total = total_loss(&mut ctx.tape, losses.as_array(), &state.arch.lambda)?;
        let total_value = ctx.tape.item(total);
        let grads = if update_arch {
            ctx.tape.backward(total)?;
            let take = |v| ctx.tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(&[0]));
            Some([take(alphas.normal), take(alphas.reduction), take(alphas.fusion)])
        } else {
            None
        };
        (values, total_value, grads)
    };

    let rates = if val_losses.iter().all(|&l| l > 0.0) {
        state.tracker.training_rates(val_losses)?
    } else {
        debug!("validation loss at zero, rates held at 1: {val_losses:?}");
        [1.0; NUM_LOSSES]
    };

    if let Some(grads) = alpha_grads {
        let [gn, gr, gf] = &grads;
        let ArchParams {
            normal,
            reduction,
            fusion,
            ..
        } = &mut state.arch;
        state.alpha_opt.step(&mut [normal, reduction, fusion], &[gn, gr, gf])?;

        let mut tape = Tape::new();
        let lam = tape.leaf(Tensor::from_vec(state.arch.lambda.logits.to_vec()), true);
        let reg = grad_regularizer(&mut tape, lam, rates)?;
        tape.backward(reg)?;
        let g = tape.take_grad(lam);
        let mut logits = [Tensor::from_vec(state.arch.lambda.logits.to_vec())];
        state.lambda_opt.step(&mut logits, &[g])?;
        let d = logits[0].data();
        state.arch.lambda = LambdaParams::new([d[0], d[1], d[2]]);
        state.arch.validate()?;
    }

    // Training pass: gradients reach the network weights only.
    let (train_losses, mut grads) = {
        let mut ctx = Ctx::new(&mut state.store, Mode::Train, true);
        let alphas = AlphaVars::bind(&mut ctx, &state.arch, false);
        let out = net.forward(&mut ctx, train, Some(&alphas))?;
        let losses = compute_losses(&mut ctx, &out, &train.labels)?;
        let values = loss_values(&ctx.tape, &losses)?;
        let total = total_loss(&mut ctx.tape, losses.as_array(), &state.arch.lambda)?;
        ctx.tape.backward(total)?;
        (values, ctx.weight_grads())
    };
    let grad_norm = clip_gradients(grads.as_mut_slice(), state.config.grad_clip_norm);
    state.w_opt.step(state.store.values_mut(), grads.as_slice())?;

    Ok(StepLog {
        train: train_losses,
        val: val_losses,
        val_total,
        rates,
        grad_norm,
    })
}

/// Mean entropy of the mixing distribution over all edges of all cell types.
pub fn alpha_entropy(arch: &ArchParams) -> f64 {
    let mut total = 0.0;
    let mut rows = 0;
    for ty in CellType::ALL {
        let a = arch.alpha(ty);
        let width = a.shape()[1];
        for row in a.data().chunks(width) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = e.iter().sum();
            total -= e
                .iter()
                .map(|v| v / z)
                .filter(|&p| p > 0.0)
                .map(|p| p * p.ln())
                .sum::<f64>();
            rows += 1;
        }
    }
    total / rows as f64
}

fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_mul(1 << 32) + epoch as u64 + 1);
    rng
}

/// Runs the remaining epochs of `state`. Each training batch is paired
/// with the next validation batch, cycling through the validation split.
pub fn run_epochs(
    state: &mut SearchState,
    net: &Network,
    train: &Dataset,
    val: &Dataset,
    mut on_epoch: impl FnMut(&SearchState) -> Result<()>,
) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(config_err!("search needs non-empty training and validation splits"));
    }
    while state.epochs_done < state.config.epochs {
        let epoch = state.epochs_done;
        let update_arch = epoch >= state.config.warmup_epochs;
        let bs = state.config.batch_size;
        let train_batches = train.batch_indices(bs, Some(&mut epoch_rng(state.config.seed, epoch, 1)));
        let val_batches = val.batch_indices(bs, Some(&mut epoch_rng(state.config.seed, epoch, 2)));
        let mut sums = ([0.0; NUM_LOSSES], [0.0; NUM_LOSSES], 0.0);
        for (i, idx) in train_batches.iter().enumerate() {
            let tb = train.batch(idx)?;
            let vb = val.batch(&val_batches[i % val_batches.len()])?;
            let step = search_step(state, net, &tb, &vb, update_arch)?;
            for k in 0..NUM_LOSSES {
                sums.0[k] += step.train[k];
                sums.1[k] += step.val[k];
            }
            sums.2 += step.val_total;
        }
        let n = train_batches.len() as f64;
        let entry = EpochLog {
            epoch,
            train: sums.0.map(|v| v / n),
            val: sums.1.map(|v| v / n),
            val_total: sums.2 / n,
            weights: state.arch.lambda.weights(),
            alpha_entropy: alpha_entropy(&state.arch),
        };
        info!(
            "search epoch {epoch}: train {:.4?} val {:.4?} weights {:.3?}",
            entry.train, entry.val, entry.weights
        );
        state.log.push(entry);
        state.trajectory.push(state.arch.clone());
        state.epochs_done += 1;
        on_epoch(state)?;
    }
    Ok(())
}

/// Result of a complete search.
#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub arch: ArchParams,
    /// Architecture parameters at initialization and after every epoch.
    pub trajectory: Vec<ArchParams>,
    pub log: Vec<EpochLog>,
    pub state: SearchState,
}

/// Splits `data` into class-stratified halves and searches from scratch.
pub fn run_search(config: &SearchConfig, net_config: &SupernetConfig, data: &Dataset) -> Result<SearchOutcome> {
    config.validate()?;
    let (train, val) = crate::data::split_train_val(data, config.val_fraction, config.seed)?;
    if train.is_empty() || val.is_empty() {
        return Err(config_err!(
            "empty split: {} train / {} validation samples",
            train.len(),
            val.len()
        ));
    }
    let (mut state, net) = SearchState::new(config, net_config)?;
    run_epochs(&mut state, &net, &train, &val, |_| Ok(()))?;
    if state.log.last().is_some_and(|l| !l.val_total.is_finite()) {
        warn!("search finished with a non-finite validation loss");
    }
    Ok(SearchOutcome {
        arch: state.arch.clone(),
        trajectory: state.trajectory.clone(),
        log: state.log.clone(),
        state,
    })
}

pub const LOG_HEADER: [&str; 10] = [
    "epoch", "L1_train", "L2_train", "L3_train", "L1_val", "L2_val", "L3_val", "w1", "w2", "w3",
];

/// Writes the per-epoch search log as CSV.
pub fn write_log_csv(log: &[EpochLog], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(LOG_HEADER).map_err(|e| csv_error(path, e))?;
    for e in log {
        let mut row = vec![e.epoch.to_string()];
        row.extend(e.train.iter().chain(&e.val).chain(&e.weights).map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse(format!("{}: {other:?}", path.display())),
    }
}
