//! Mini-batch training, per-epoch metric curves and checkpoint/resume.
//!
//! Everything is a pure function of the dataset, the two configurations and
//! the seed: parameter initialisation and every epoch's shuffle derive from
//! `TrainConfig::seed`, so a run restored from a checkpoint continues exactly
//! as an uninterrupted one would.

mod checkpoint;
pub mod optim;

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{MultiViewDataset, Standardizer};
use crate::error::{Error, Result};
use crate::loss::{self, LossBreakdown};
use crate::model::{self, ModelConfig, ModelParams};
use crate::nd::{Tape, Tensor, Var};
use crate::retrieval::{self, BinaryCodes, CodeBank, Cutoff};

pub use checkpoint::{Checkpoint, VERSION as CHECKPOINT_VERSION};
pub use optim::{Optimizer, OptimizerState};

/// Rows per chunk when computing codes outside training.
const ENCODE_CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    /// Weight of the classification loss.
    pub mu: f64,
    pub seed: u64,
    /// Evaluate query-vs-retrieval mAP every this many epochs; 0 disables.
    pub eval_every: usize,
    pub map_cutoff: Cutoff,
    /// Count the i = j pairs in the similarity loss.
    pub include_diagonal: bool,
    /// Global gradient-norm clip.
    pub clip_norm: Option<f64>,
    pub eval_threads: usize,
    /// Store wall-clock seconds in each [`EpochRecord`]. Off keeps records
    /// reproducible bit for bit.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            mu: 1.0,
            seed: 0,
            eval_every: 10,
            map_cutoff: Cutoff::All,
            include_diagonal: true,
            clip_norm: None,
            eval_threads: 1,
            record_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be finite and >= 0", self.learning_rate));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return bad(format!("mu {} must be finite and >= 0", self.mu));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip norm {c} must be positive"));
            }
        }
        if self.map_cutoff == Cutoff::Top(0) {
            return bad("mAP cutoff must be positive".into());
        }
        self.optimizer.validate()
    }
}

/// One row of the training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub l_sim: f64,
    pub l_clf: f64,
    pub l_total: f64,
    /// Query-vs-retrieval mAP, when evaluated this epoch.
    pub map: Option<f64>,
    pub seconds: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,l_sim,l_clf,l_total,map,seconds";

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV rendering of a training curve. Floats use the shortest text that
/// parses back to the same value.
pub fn metrics_csv(records: &[EpochRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch,
            r.l_sim,
            r.l_clf,
            r.l_total,
            opt_cell(r.map),
            opt_cell(r.seconds)
        )
        .unwrap();
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Validation("metrics CSV header mismatch".into()));
    }
    let num = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::Validation(format!("bad number {s:?} in metrics CSV")))
    };
    let opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            num(s).map(Some)
        }
    };
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Validation(format!("metrics row {l:?} has {} fields", f.len())));
            }
            Ok(EpochRecord {
                epoch: f[0]
                    .parse()
                    .map_err(|_| Error::Validation(format!("bad epoch {:?}", f[0])))?,
                l_sim: num(f[1])?,
                l_clf: num(f[2])?,
                l_total: num(f[3])?,
                map: opt(f[4])?,
                seconds: opt(f[5])?,
            })
        })
        .collect()
}

/// Splits a shuffled index list into batches; a trailing batch of one is
/// folded into its predecessor so every pairwise batch has two rows.
fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * batch_size;
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Drives training of one model over one dataset.
pub struct Trainer<'a> {
    ds: &'a MultiViewDataset,
    inputs: Vec<Tensor>,
    targets: Tensor,
    model: ModelConfig,
    cfg: TrainConfig,
    params: ModelParams,
    opt_state: OptimizerState,
    standardizer: Standardizer,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    /// Fresh parameters seeded from `cfg.seed`; standardisation fitted on
    /// the train split.
    pub fn new(ds: &'a MultiViewDataset, model: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        check_compat(ds, &model)?;
        if ds.split.train.is_empty() {
            return Err(Error::Config("dataset has no train split".into()));
        }
        let params = ModelParams::init(&model, cfg.seed)?;
        let standardizer = Standardizer::fit(ds, &ds.split.train);
        Ok(Self::assemble(ds, model, cfg, params, OptimizerState::default(), standardizer, 0))
    }

    /// Continues from a checkpoint; `cfg.epochs` is the total epoch target.
    pub fn resume(ds: &'a MultiViewDataset, ck: Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        check_compat(ds, &ck.model)?;
        if ds.split.train.is_empty() {
            return Err(Error::Config("dataset has no train split".into()));
        }
        Ok(Self::assemble(ds, ck.model, cfg, ck.params, ck.optimizer, ck.standardizer, ck.epoch))
    }

    fn assemble(
        ds: &'a MultiViewDataset,
        model: ModelConfig,
        cfg: TrainConfig,
        params: ModelParams,
        opt_state: OptimizerState,
        standardizer: Standardizer,
        epoch: usize,
    ) -> Self {
        let raw: Vec<Tensor> = ds.views.iter().map(|v| v.features.clone()).collect();
        let inputs = standardizer.apply_all(&raw);
        Self {
            ds,
            inputs,
            targets: ds.labels.to_tensor(),
            model,
            cfg,
            params,
            opt_state,
            standardizer,
            epoch,
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            params: self.params.clone(),
            epoch: self.epoch,
            optimizer: self.opt_state.clone(),
            standardizer: self.standardizer.clone(),
        }
    }

    /// Loss and gradients of one batch without updating anything.
    pub fn batch_gradients(&self, rows: &[usize]) -> Result<(LossBreakdown, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let inputs: Vec<Var> = self
            .inputs
            .iter()
            .map(|x| tape.constant(x.select_rows(rows)))
            .collect();
        let y = self.targets.select_rows(rows);
        let (total, breakdown) =
            objective(&mut tape, &bound, &self.model, &inputs, &y, self.cfg.mu, self.cfg.include_diagonal)?;
        let mut grads = tape.backward(total)?;
        Ok((breakdown, bound.values().into_iter().map(|v| grads.take(*v)).collect()))
    }

    /// One pass over the shuffled train split.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let started = Instant::now();
        let epoch = self.epoch + 1;
        let mut order = self.ds.split.train.clone();
        order.shuffle(&mut epoch_rng(self.cfg.seed, self.epoch));

        let (mut sim_sum, mut clf_sum, mut seen) = (0.0, 0.0, 0usize);
        for (b, rows) in batches(&order, self.cfg.batch_size).into_iter().enumerate() {
            let (br, mut grads) = self.batch_gradients(rows).map_err(|e| match e {
                Error::DegenerateRow { row, norm } => Error::NonFinite {
                    epoch,
                    batch: b,
                    detail: format!("hash row {row} collapsed to norm {norm:e}"),
                },
                other => other,
            })?;
            if !br.l_total.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    detail: format!("l_sim = {}, l_clf = {}", br.l_sim, br.l_clf),
                });
            }
            if let Some(g) = grads.iter().position(|g| !g.is_finite()) {
                let name = self.params.entries()[g].0.clone();
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    detail: format!("gradient of {name} is not finite"),
                });
            }
            if let Some(max) = self.cfg.clip_norm {
                optim::clip_global_norm(&mut grads, max);
            }
            let mut targets = self.params.values_mut();
            optim::step(&mut targets, &grads, &mut self.opt_state, &self.cfg.optimizer, self.cfg.learning_rate)?;
            let n = rows.len();
            sim_sum += br.l_sim * n as f64;
            clf_sum += br.l_clf * n as f64;
            seen += n;
        }
        self.epoch = epoch;

        let means = LossBreakdown::new(sim_sum / seen as f64, clf_sum / seen as f64, self.cfg.mu)?;
        let map = if self.cfg.eval_every > 0 && epoch.is_multiple_of(self.cfg.eval_every) {
            self.evaluate_split()?
        } else {
            None
        };
        Ok(EpochRecord {
            epoch,
            l_sim: means.l_sim,
            l_clf: means.l_clf,
            l_total: means.l_total,
            map,
            seconds: self.cfg.record_time.then(|| started.elapsed().as_secs_f64()),
        })
    }

    /// Runs epochs until `cfg.epochs` have completed, passing each record to
    /// `on_epoch` as it is produced.
    pub fn run_with(&mut self, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<Vec<EpochRecord>> {
        let mut out = Vec::new();
        while self.epoch < self.cfg.epochs {
            let rec = self.run_epoch()?;
            on_epoch(&rec);
            out.push(rec);
        }
        Ok(out)
    }

    pub fn run(&mut self) -> Result<Vec<EpochRecord>> {
        self.run_with(|_| {})
    }

    /// Query-vs-retrieval mAP of the current parameters, or `None` when
    /// either side of the split is empty.
    pub fn evaluate_split(&self) -> Result<Option<f64>> {
        let split = &self.ds.split;
        if split.query.is_empty() || split.retrieval.is_empty() {
            return Ok(None);
        }
        let queries = self.bank(&split.query)?;
        let bank = self.bank(&split.retrieval)?;
        let rep = retrieval::evaluate(&queries, &bank, self.cfg.map_cutoff, self.cfg.eval_threads)?;
        Ok(Some(rep.map))
    }

    /// Binary codes of the given samples under the current parameters.
    pub fn codes(&self, rows: &[usize]) -> Result<BinaryCodes> {
        let views: Vec<Tensor> = self.inputs.iter().map(|x| x.select_rows(rows)).collect();
        let h = model::hash_activations(&self.params, &self.model, &views, ENCODE_CHUNK)?;
        Ok(model::binarize(&h))
    }

    pub fn bank(&self, rows: &[usize]) -> Result<CodeBank> {
        CodeBank::from_codes(&self.codes(rows)?, self.ds.labels.select_rows(rows))
    }
}

fn check_compat(ds: &MultiViewDataset, model: &ModelConfig) -> Result<()> {
    model.validate()?;
    if ds.view_dims() != model.view_dims {
        return Err(Error::Config(format!(
            "dataset view widths {:?} do not match model {:?}",
            ds.view_dims(),
            model.view_dims
        )));
    }
    if ds.labels.classes() != model.n_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {}",
            ds.labels.classes(),
            model.n_classes
        )));
    }
    Ok(())
}

/// Records forward pass and objective for one batch; returns the total-loss
/// node and its breakdown.
pub fn objective(
    tape: &mut Tape,
    params: &model::Params<Var>,
    model: &ModelConfig,
    inputs: &[Var],
    labels: &Tensor,
    mu: f64,
    include_diagonal: bool,
) -> Result<(Var, LossBreakdown)> {
    let fv = model::forward(tape, params, model, inputs)?;
    let phi = loss::affinity(labels)?;
    let l_sim = loss::sim_loss(tape, fv.hash, &phi, include_diagonal)?;
    let l_clf = loss::clf_loss(tape, fv.logits, labels)?;
    loss::total_loss(tape, l_sim, l_clf, mu)
}

/// Trains from scratch; returns final parameters and the full curve.
pub fn train(ds: &MultiViewDataset, model: ModelConfig, cfg: TrainConfig) -> Result<(ModelParams, Vec<EpochRecord>)> {
    let mut t = Trainer::new(ds, model, cfg)?;
    let records = t.run()?;
    Ok((t.params, records))
}

/// Codes for dataset rows using a trained checkpoint's parameters and
/// standardisation.
pub fn encode(ck: &Checkpoint, ds: &MultiViewDataset, rows: &[usize]) -> Result<BinaryCodes> {
    check_compat(ds, &ck.model)?;
    let views: Vec<Tensor> = ds
        .views
        .iter()
        .enumerate()
        .map(|(m, v)| ck.standardizer.apply(m, &v.features.select_rows(rows)))
        .collect();
    let h = model::hash_activations(&ck.params, &ck.model, &views, ENCODE_CHUNK)?;
    Ok(model::binarize(&h))
}
