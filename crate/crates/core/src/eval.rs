//! Retraining of derived genotypes, classification and retrieval metrics.

use std::cmp::Ordering;
use std::fmt;
use std::io::Write;
use std::path::Path;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::cost_model;
use crate::data::Dataset;
use crate::error::{config_err, Error, Result};
use crate::genotype::Genotype;
use crate::loss_balance::{rescale_for_retrain, weighted_total, NUM_LOSSES};
use crate::nn::{Ctx, Mode, ParamStore};
use crate::optim::{clip_gradients, Sgd};
use crate::supernet::{compute_losses, Network, SupernetConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fixed loss weights; taken from the genotype's searched weights when absent.
    pub loss_weights: Option<[f64; NUM_LOSSES]>,
    pub init_channels: usize,
    pub grad_clip_norm: f64,
    /// Cosine learning-rate decay to zero over `epochs`.
    pub cosine: bool,
    pub seed: u64,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        RetrainConfig {
            epochs: 30,
            batch_size: 36,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-3,
            loss_weights: None,
            init_channels: 8,
            grad_clip_norm: 5.0,
            cosine: false,
            seed: 0,
        }
    }
}

impl RetrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be positive"));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(config_err!("grad_clip_norm must be positive"));
        }
        if let Some(w) = self.loss_weights {
            if w[0] != 1.0 {
                return Err(config_err!("the classification loss weight must be 1, got {}", w[0]));
            }
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(config_err!("loss weights must be finite and non-negative: {w:?}"));
            }
        }
        Ok(())
    }

    /// The weights actually used for `genotype`.
    pub fn resolve_weights(&self, genotype: &Genotype) -> Result<[f64; NUM_LOSSES]> {
        match self.loss_weights {
            Some(w) => Ok(w),
            None => rescale_for_retrain(genotype.loss_weights),
        }
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        if self.cosine && self.epochs > 0 {
            0.5 * self.lr * (1.0 + (std::f64::consts::PI * epoch as f64 / self.epochs as f64).cos())
        } else {
            self.lr
        }
    }
}

/// A retrained discrete network with its weights.
#[derive(Debug)]
pub struct TrainedModel {
    pub genotype: Genotype,
    pub config: SupernetConfig,
    pub loss_weights: [f64; NUM_LOSSES],
    pub seed: u64,
    pub network: Network,
    pub store: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct StoredModel {
    genotype: Genotype,
    config: SupernetConfig,
    loss_weights: [f64; NUM_LOSSES],
    seed: u64,
    store: ParamStore,
}

impl TrainedModel {
    /// Freshly initialized discrete network for `genotype` on data shaped like `data`.
    pub fn init(genotype: &Genotype, data: &Dataset, cfg: &RetrainConfig) -> Result<Self> {
        genotype.validate()?;
        cfg.validate()?;
        let config = network_config(genotype, data, cfg.init_channels)?;
        let loss_weights = cfg.resolve_weights(genotype)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let network = Network::discrete(&config, genotype, &mut store, &mut rng)?;
        Ok(TrainedModel {
            genotype: genotype.clone(),
            config,
            loss_weights,
            seed: cfg.seed,
            network,
            store,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let stored = StoredModel {
            genotype: self.genotype.clone(),
            config: self.config.clone(),
            loss_weights: self.loss_weights,
            seed: self.seed,
            store: self.store.clone(),
        };
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        serde_json::to_writer(&mut w, &stored).map_err(|e| Error::Parse(format!("model: {e}")))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let stored: StoredModel = serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| Error::Parse(format!("model {}: {e}", path.display())))?;
        stored.genotype.validate()?;
        let mut scratch = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(stored.seed);
        let network = Network::discrete(&stored.config, &stored.genotype, &mut scratch, &mut rng)?;
        if scratch.len() != stored.store.len() {
            return Err(config_err!(
                "model file holds {} tensors, network expects {}",
                stored.store.len(),
                scratch.len()
            ));
        }
        Ok(TrainedModel {
            genotype: stored.genotype,
            config: stored.config,
            loss_weights: stored.loss_weights,
            seed: stored.seed,
            network,
            store: stored.store,
        })
    }
}

fn network_config(genotype: &Genotype, data: &Dataset, init_channels: usize) -> Result<SupernetConfig> {
    let mut config = genotype.config.clone();
    config.init_channels = init_channels;
    let checks = [
        ("views", config.n_views, data.n_views),
        ("classes", config.num_classes, data.num_classes()),
        ("resolution", config.input_resolution, data.resolution),
        ("input channels", config.input_channels, data.channels),
    ];
    for (what, expected, got) in checks {
        if expected != got {
            return Err(config_err!(
                "genotype was searched with {expected} {what}, dataset has {got}"
            ));
        }
    }
    config.validate()?;
    Ok(config)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub losses: [f64; NUM_LOSSES],
    pub total: f64,
}

/// Trains the discrete network of `genotype` on all of `data` with fixed loss weights.
pub fn retrain(genotype: &Genotype, data: &Dataset, cfg: &RetrainConfig) -> Result<(TrainedModel, Vec<RetrainEpoch>)> {
    let mut model = TrainedModel::init(genotype, data, cfg)?;
    if data.is_empty() {
        return Err(config_err!("cannot retrain on an empty dataset"));
    }
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        let batches = data.batch_indices(cfg.batch_size, Some(&mut rng));
        let mut sums = ([0.0; NUM_LOSSES], 0.0);
        for idx in &batches {
            let batch = data.batch(idx)?;
            let (values, total, mut grads) = {
                let mut ctx = Ctx::new(&mut model.store, Mode::Train, true);
                let out = model.network.forward(&mut ctx, &batch, None)?;
                let losses = compute_losses(&mut ctx, &out, &batch.labels)?;
                let values = losses.as_array().map(|l| ctx.tape.item(l));
                let total = weighted_total(&mut ctx.tape, losses.as_array(), model.loss_weights)?;
                let total_value = ctx.tape.item(total);
                ctx.tape.backward(total)?;
                (values, total_value, ctx.weight_grads())
            };
            clip_gradients(grads.as_mut_slice(), cfg.grad_clip_norm);
            opt.step(model.store.values_mut(), grads.as_slice())?;
            for k in 0..NUM_LOSSES {
                sums.0[k] += values[k];
            }
            sums.1 += total;
        }
        let n = batches.len() as f64;
        let entry = RetrainEpoch {
            epoch,
            lr: opt.lr,
            losses: sums.0.map(|v| v / n),
            total: sums.1 / n,
        };
        info!(
            "retrain epoch {epoch}: total {:.4} losses {:.4?}",
            entry.total, entry.losses
        );
        log.push(entry);
    }
    Ok((model, log))
}

/// Writes the retraining log as CSV.
pub fn write_retrain_csv(log: &[RetrainEpoch], path: &Path) -> Result<()> {
    let mut text = String::from("epoch,lr,L1,L2,L3,total\n");
    for e in log {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.epoch, e.lr, e.losses[0], e.losses[1], e.losses[2], e.total
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Eval-mode predictions and descriptors for every sample of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub labels: Vec<usize>,
    pub predicted: Vec<usize>,
    /// Unit-norm shape descriptors, one row per sample.
    pub descriptors: Vec<Vec<f64>>,
}

pub fn predict(model: &mut TrainedModel, data: &Dataset, batch_size: usize) -> Result<Predictions> {
    let mut preds = Predictions {
        labels: data.labels(),
        predicted: Vec::with_capacity(data.len()),
        descriptors: Vec::with_capacity(data.len()),
    };
    for idx in data.batch_indices::<ChaCha8Rng>(batch_size.max(1), None) {
        let batch = data.batch(&idx)?;
        let mut ctx = Ctx::new(&mut model.store, Mode::Eval, false);
        let out = model.network.forward(&mut ctx, &batch, None)?;
        let logits = ctx.tape.value(out.shape_logits);
        let k = logits.shape()[1];
        for row in logits.data().chunks(k) {
            preds.predicted.push(argmax(row));
        }
        let d = ctx.tape.value(out.descriptor);
        let m = d.shape()[1];
        preds.descriptors.extend(d.data().chunks(m).map(<[f64]>::to_vec));
    }
    Ok(preds)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Overall accuracy and the unweighted mean of per-class accuracies over
/// classes present in `labels`.
pub fn classification_accuracy(labels: &[usize], predicted: &[usize]) -> (f64, f64) {
    if labels.is_empty() {
        return (0.0, 0.0);
    }
    let k = labels.iter().copied().max().unwrap_or(0) + 1;
    let mut hits = vec![0usize; k];
    let mut counts = vec![0usize; k];
    for (&y, &p) in labels.iter().zip(predicted) {
        counts[y] += 1;
        hits[y] += usize::from(y == p);
    }
    let overall = hits.iter().sum::<usize>() as f64 / labels.len() as f64;
    let present: Vec<f64> = counts
        .iter()
        .zip(&hits)
        .filter(|(c, _)| **c > 0)
        .map(|(&c, &h)| h as f64 / c as f64)
        .collect();
    (overall, present.iter().sum::<f64>() / present.len() as f64)
}

/// Mean of precision@k over the ranks `k` holding relevant items.
pub fn average_precision(relevance: &[bool]) -> f64 {
    let mut hits = 0;
    let mut sum = 0.0;
    for (i, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// Trapezoidal area under the precision-recall curve traced rank by rank,
/// starting from recall 0 at precision 1.
pub fn pr_auc(relevance: &[bool]) -> f64 {
    let total = relevance.iter().filter(|&&r| r).count();
    if total == 0 {
        return 0.0;
    }
    let (mut prev_r, mut prev_p) = (0.0, 1.0);
    let mut hits = 0;
    let mut area = 0.0;
    for (i, &rel) in relevance.iter().enumerate() {
        hits += usize::from(rel);
        let r = hits as f64 / total as f64;
        let p = hits as f64 / (i + 1) as f64;
        area += (r - prev_r) * (p + prev_p) / 2.0;
        prev_r = r;
        prev_p = p;
    }
    area
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub map: f64,
    pub auc: f64,
    pub queries: usize,
    /// Queries whose class has no other member in the gallery.
    pub skipped: usize,
}

/// Ranks every other item by descending cosine similarity for each query.
/// Equal similarities place irrelevant items first, so the result does not
/// depend on gallery order.
pub fn retrieval_metrics(descriptors: &[Vec<f64>], labels: &[usize]) -> RetrievalMetrics {
    let n = descriptors.len();
    let (mut ap_sum, mut auc_sum, mut used, mut skipped) = (0.0, 0.0, 0, 0);
    for q in 0..n {
        let mut ranked: Vec<(f64, bool)> = (0..n)
            .filter(|&g| g != q)
            .map(|g| {
                let sim = descriptors[q].iter().zip(&descriptors[g]).map(|(a, b)| a * b).sum();
                (sim, labels[g] == labels[q])
            })
            .collect();
        if !ranked.iter().any(|&(_, rel)| rel) {
            skipped += 1;
            continue;
        }
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
        let relevance: Vec<bool> = ranked.iter().map(|&(_, r)| r).collect();
        ap_sum += average_precision(&relevance);
        auc_sum += pr_auc(&relevance);
        used += 1;
    }
    if skipped > 0 {
        warn!("{skipped} of {n} queries skipped: no other gallery item shares their class");
    }
    let denom = used.max(1) as f64;
    RetrievalMetrics {
        map: ap_sum / denom,
        auc: auc_sum / denom,
        queries: used,
        skipped,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_accuracy: f64,
    pub overall_accuracy: f64,
    pub map: f64,
    pub auc: f64,
    pub params: u64,
    pub macs: u64,
    pub seed: u64,
    /// Identifies the evaluated genotype: a file path or a content fingerprint.
    pub genotype: String,
    pub skipped_queries: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = [
            ("genotype", self.genotype.clone()),
            ("seed", self.seed.to_string()),
            ("accuracy", format!("{:.2}%", 100.0 * self.overall_accuracy)),
            ("per-class accuracy", format!("{:.2}%", 100.0 * self.per_class_accuracy)),
            ("mAP", format!("{:.2}%", 100.0 * self.map)),
            ("AUC", format!("{:.2}%", 100.0 * self.auc)),
            ("params", format!("{} ({:.3} M)", self.params, self.params as f64 / 1e6)),
            ("MACs", format!("{} ({:.4} G)", self.macs, self.macs as f64 / 1e9)),
            ("skipped queries", self.skipped_queries.to_string()),
        ];
        for (i, (k, v)) in rows.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{k:<20} {v:>24}")?;
        }
        Ok(())
    }
}

/// 64-bit FNV-1a of the genotype JSON, as a short stable identifier.
pub fn genotype_fingerprint(genotype: &Genotype) -> Result<String> {
    let text = genotype.to_json()?;
    let hash = text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3)
    });
    Ok(format!("{hash:016x}"))
}

/// Classification and retrieval metrics on `test`, which also serves as the gallery.
pub fn evaluate(model: &mut TrainedModel, test: &Dataset) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(config_err!("cannot evaluate on an empty test set"));
    }
    let preds = predict(model, test, 36)?;
    let (overall, per_class) = classification_accuracy(&preds.labels, &preds.predicted);
    let retrieval = retrieval_metrics(&preds.descriptors, &preds.labels);
    let cost = cost_model(
        &model.genotype,
        &model.config,
        model.config.input_resolution,
        model.config.n_views,
    )?;
    Ok(MetricsReport {
        per_class_accuracy: per_class,
        overall_accuracy: overall,
        map: retrieval.map,
        auc: retrieval.auc,
        params: cost.params,
        macs: cost.macs,
        seed: model.seed,
        genotype: genotype_fingerprint(&model.genotype)?,
        skipped_queries: retrieval.skipped,
    })
}
