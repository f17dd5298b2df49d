//! Mini-batch training with Adagrad, periodic validation and best-AUC
//! snapshot selection, plus evaluation and checkpoint persistence.

mod checkpoint;

pub use checkpoint::{load_checkpoint, named_tensors, save_checkpoint, Checkpoint, CheckpointError, MAGIC, VERSION};

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, TrainConfig};
use crate::features::{build_click_sequences, extract_skipgram_pairs, sample_negatives, AdVocabulary, FeatureError, Instance};
use crate::metrics::{auc, logloss, MetricError, ScoredSet};
use crate::model::{
    BatchLosses, CorrelationExample, DeepMcp, FmModel, LossConfig, LrModel, ModelError, Objective, Scorer,
};
use crate::tensor::ADAGRAD_EPS;

pub const TRACE_HEADER: &str = "batch,loss_p,loss_m,loss_c,joint,val_auc,val_logloss";

// ChaCha stream ids; every consumer of randomness gets its own stream so
// that skipping one (e.g. pair sampling for a prediction-only run) never
// shifts another.
const STREAM_INIT: u64 = 0;
const STREAM_DROPOUT: u64 = 1;
const STREAM_PAIRS: u64 = 2;
const STREAM_SHUFFLE: u64 = 1 << 32;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] FeatureError),
    #[error("validation set: {0}")]
    Validation(EvalError),
    #[error("non-finite loss at batch {batch}: loss_p={} loss_m={} loss_c={} joint={}",
        .losses.loss_p, .losses.loss_m, .losses.loss_c, .losses.joint)]
    NonFinite { batch: u64, losses: BatchLosses },
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty dataset")]
    Empty,
    #[error("AUC undefined: dataset has {positives} positives and {negatives} negatives (logloss={logloss})")]
    SingleClass {
        logloss: f64,
        positives: usize,
        negatives: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub auc: f64,
    pub logloss: f64,
}

/// Scores every instance with `model` (eval mode).
pub fn score_all<S: Scorer + ?Sized>(model: &S, data: &[Instance]) -> Result<Vec<f64>, ModelError> {
    data.iter().map(|i| model.score(i)).collect()
}

pub fn evaluate<S: Scorer + ?Sized>(model: &S, data: &[Instance]) -> Result<EvalResult, EvalError> {
    if data.is_empty() {
        return Err(EvalError::Empty);
    }
    let scores = score_all(model, data)?;
    let labels = data.iter().map(|i| i.label).collect();
    let set = ScoredSet::new(scores, labels).map_err(|_| EvalError::Empty)?;
    let ll = logloss(&set).map_err(|_| EvalError::Empty)?;
    match auc(&set) {
        Ok(a) => Ok(EvalResult { auc: a, logloss: ll }),
        Err(MetricError::SingleClass { positives, negatives }) => Err(EvalError::SingleClass {
            logloss: ll,
            positives,
            negatives,
        }),
        Err(_) => Err(EvalError::Empty),
    }
}

/// One evaluation point. Losses are means over the batches since the
/// previous evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub batch: u64,
    pub losses: BatchLosses,
    pub val_auc: f64,
    pub val_logloss: f64,
}

impl TraceRow {
    pub fn csv(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{}",
            self.batch, l.loss_p, l.loss_m, l.loss_c, l.joint, self.val_auc, self.val_logloss
        )
    }
}

pub fn write_trace<W: Write>(rows: &[TraceRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv())?;
    }
    out.flush()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub best_val_auc: f64,
    /// Batch counter at the selected snapshot.
    pub best_batch: u64,
    pub trace: Vec<TraceRow>,
}

#[derive(Default)]
struct LossMeter {
    sum: BatchLosses,
    n: usize,
}

impl LossMeter {
    fn add(&mut self, l: &BatchLosses) {
        self.sum.loss_p += l.loss_p;
        self.sum.loss_m += l.loss_m;
        self.sum.loss_c += l.loss_c;
        self.sum.joint += l.joint;
        self.n += 1;
    }

    fn take(&mut self) -> BatchLosses {
        let n = self.n.max(1) as f64;
        let out = BatchLosses {
            loss_p: self.sum.loss_p / n,
            loss_m: self.sum.loss_m / n,
            loss_c: self.sum.loss_c / n,
            joint: self.sum.joint / n,
        };
        *self = Self::default();
        out
    }
}

fn check_sets(train: &[Instance], val: &[Instance]) -> Result<(), TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptySet("training"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySet("validation"));
    }
    let pos = val.iter().filter(|i| i.label == 1).count();
    if pos == 0 || pos == val.len() {
        return Err(TrainError::Validation(EvalError::SingleClass {
            logloss: f64::NAN,
            positives: pos,
            negatives: val.len() - pos,
        }));
    }
    Ok(())
}

/// The shared epoch / batch / evaluation loop. `step` trains on one batch
/// and returns its losses.
fn run_loop<M, F>(
    mut model: M,
    train: &[Instance],
    val: &[Instance],
    cfg: &TrainConfig,
    on_eval: &mut dyn FnMut(&TraceRow),
    mut step: F,
) -> Result<TrainOutcome<M>, TrainError>
where
    M: Scorer + Clone,
    F: FnMut(&mut M, &[Instance], u64) -> Result<BatchLosses, TrainError>,
{
    cfg.validate()?;
    check_sets(train, val)?;
    let mut data = train.to_vec();
    let mut batch: u64 = 0;
    let mut meter = LossMeter::default();
    let mut trace = Vec::new();
    let mut best: Option<(M, f64, u64)> = None;

    let mut eval_point = |model: &M, batch: u64, meter: &mut LossMeter| -> Result<f64, TrainError> {
        let r = evaluate(model, val).map_err(TrainError::Validation)?;
        let row = TraceRow {
            batch,
            losses: meter.take(),
            val_auc: r.auc,
            val_logloss: r.logloss,
        };
        on_eval(&row);
        trace.push(row);
        Ok(r.auc)
    };

    for epoch in 0..cfg.epochs {
        data.shuffle(&mut stream_rng(cfg.seed, STREAM_SHUFFLE + epoch as u64));
        for chunk in data.chunks(cfg.batch_size) {
            let losses = step(&mut model, chunk, batch)?;
            if !losses.joint.is_finite() {
                return Err(TrainError::NonFinite { batch, losses });
            }
            meter.add(&losses);
            batch += 1;
            if batch.is_multiple_of(cfg.eval_every as u64) {
                let auc = eval_point(&model, batch, &mut meter)?;
                // strict: ties keep the earlier snapshot
                if best.as_ref().is_none_or(|b| auc > b.1) {
                    best = Some((model.clone(), auc, batch));
                }
            }
        }
    }
    if meter.n > 0 || best.is_none() {
        let auc = eval_point(&model, batch, &mut meter)?;
        if best.as_ref().is_none_or(|b| auc > b.1) {
            best = Some((model, auc, batch));
        }
    }
    let (model, best_val_auc, best_batch) = best.expect("at least one evaluation");
    Ok(TrainOutcome {
        model,
        best_val_auc,
        best_batch,
        trace,
    })
}

/// Skip-gram pairs of the training clicks, as ad-vocabulary ids, cycled in
/// seeded shuffled order. Negatives are drawn fresh for every pair.
pub struct PairStream {
    vocab: AdVocabulary,
    pool: Vec<(usize, usize)>,
    cursor: usize,
    negatives: usize,
    rng: ChaCha8Rng,
}

impl PairStream {
    pub fn new(train: &[Instance], window: usize, negatives: usize, rng: ChaCha8Rng) -> Self {
        let seqs = build_click_sequences(train);
        let vocab = AdVocabulary::from_sequences(&seqs);
        let mut pool = Vec::new();
        for seq in &seqs {
            let ids: Vec<usize> = seq.ads.iter().map(|a| vocab.id(a).expect("interned")).collect();
            for (c, x) in extract_skipgram_pairs(seq, window) {
                pool.push((ids[c], ids[x]));
            }
        }
        let mut s = Self {
            vocab,
            pool,
            cursor: 0,
            negatives,
            rng,
        };
        s.pool.shuffle(&mut s.rng);
        s
    }

    pub fn pool_size(&self) -> usize {
        self.pool.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// The next `n` examples; empty when the training clicks yield no pairs.
    pub fn next_batch(&mut self, n: usize) -> Result<Vec<CorrelationExample>, FeatureError> {
        if self.pool.is_empty() {
            return Ok(Vec::new());
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            if self.cursor == self.pool.len() {
                self.pool.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let (c, x) = self.pool[self.cursor];
            self.cursor += 1;
            let neg = sample_negatives(&mut self.rng, self.negatives, self.vocab.len(), &[c, x])?;
            out.push(CorrelationExample {
                center: self.vocab.get(c).clone(),
                context: self.vocab.get(x).clone(),
                negatives: neg.into_iter().map(|q| self.vocab.get(q).clone()).collect(),
            });
        }
        Ok(out)
    }
}

fn loss_config(cfg: &TrainConfig, objective: Objective) -> LossConfig {
    LossConfig {
        alpha: cfg.alpha,
        beta: cfg.beta,
        objective,
    }
}

/// Trains DeepMCP (or, with [`Objective::PredictionOnly`], the DNN
/// baseline) and returns the best-validation-AUC checkpoint.
pub fn train(
    train: &[Instance],
    val: &[Instance],
    schema: &crate::features::FieldSchema,
    cfg: &TrainConfig,
    objective: Objective,
) -> Result<TrainOutcome<Checkpoint>, TrainError> {
    train_observed(train, val, schema, cfg, objective, &mut |_| {})
}

/// [`train`] with a callback invoked at every evaluation point.
pub fn train_observed(
    train: &[Instance],
    val: &[Instance],
    schema: &crate::features::FieldSchema,
    cfg: &TrainConfig,
    objective: Objective,
    on_eval: &mut dyn FnMut(&TraceRow),
) -> Result<TrainOutcome<Checkpoint>, TrainError> {
    cfg.validate()?;
    let model = DeepMcp::<f32>::init_with(
        schema.clone(),
        cfg.architecture(),
        &mut stream_rng(cfg.seed, STREAM_INIT),
        cfg.init_scale,
        cfg.init,
    );
    let mut dropout_rng = stream_rng(cfg.seed, STREAM_DROPOUT);
    let mut pairs = match objective {
        Objective::Joint => Some(PairStream::new(
            train,
            cfg.context_window,
            cfg.num_negatives,
            stream_rng(cfg.seed, STREAM_PAIRS),
        )),
        Objective::PredictionOnly => None,
    };
    let lc = loss_config(cfg, objective);
    let out = run_loop(model, train, val, cfg, on_eval, |m: &mut DeepMcp<f32>, batch, _| {
        let examples = match pairs.as_mut() {
            Some(p) => p.next_batch(batch.len())?,
            None => Vec::new(),
        };
        let pass = m.batch_losses(batch, &examples, &lc, &mut dropout_rng, true)?;
        if !pass.losses.joint.is_finite() {
            return Ok(pass.losses);
        }
        m.backward_joint(&pass)?;
        m.adagrad(cfg.learning_rate, ADAGRAD_EPS)?;
        Ok(pass.losses)
    })?;
    Ok(TrainOutcome {
        model: Checkpoint {
            config: cfg.clone(),
            model: out.model,
            best_val_auc: out.best_val_auc,
            batch: out.best_batch,
        },
        best_val_auc: out.best_val_auc,
        best_batch: out.best_batch,
        trace: out.trace,
    })
}

fn baseline_losses(loss: f64) -> BatchLosses {
    BatchLosses {
        loss_p: loss,
        loss_m: 0.0,
        loss_c: 0.0,
        joint: loss,
    }
}

pub fn train_lr(train: &[Instance], val: &[Instance], cfg: &TrainConfig) -> Result<TrainOutcome<LrModel>, TrainError> {
    cfg.validate()?;
    run_loop(LrModel::zeros(cfg.hash_space), train, val, cfg, &mut |_| {}, |m: &mut LrModel, b, _| {
        let loss = m.accumulate_batch(b)?;
        m.adagrad(cfg.learning_rate, ADAGRAD_EPS)?;
        Ok(baseline_losses(loss))
    })
}

/// FM with factor dimension `embedding_dim`.
pub fn train_fm(train: &[Instance], val: &[Instance], cfg: &TrainConfig) -> Result<TrainOutcome<FmModel>, TrainError> {
    cfg.validate()?;
    let model = FmModel::init(
        cfg.hash_space,
        cfg.embedding_dim,
        &mut stream_rng(cfg.seed, STREAM_INIT),
        cfg.init_scale,
    );
    run_loop(model, train, val, cfg, &mut |_| {}, |m: &mut FmModel, b, _| {
        let loss = m.accumulate_batch(b)?;
        m.adagrad(cfg.learning_rate, ADAGRAD_EPS)?;
        Ok(baseline_losses(loss))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{hash_feature, FieldSchema};

    fn schema() -> FieldSchema {
        FieldSchema::parse("user_id,user,univalent\nad_id,ad,univalent\n").unwrap()
    }

    /// Label is 1 exactly for ads with an even id.
    fn separable(n: usize, n_space: usize, seed_offset: usize) -> Vec<Instance> {
        (0..n)
            .map(|k| {
                let i = k + seed_offset;
                let ad = (i * 7) % 10;
                Instance {
                    label: u8::from(ad.is_multiple_of(2)),
                    user_id: format!("u{}", i % 20),
                    timestamp: i as i64,
                    user_indices: vec![vec![hash_feature("user_id", &format!("u{}", i % 20), n_space)]],
                    query_indices: vec![],
                    ad_indices: vec![vec![hash_feature("ad_id", &format!("a{ad}"), n_space)]],
                    other_indices: vec![],
                }
            })
            .collect()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            hash_space: 1 << 10,
            layer_dims: vec![16, 8],
            repr_dim: 8,
            embedding_dim: 4,
            batch_size: 8,
            eval_every: 5,
            epochs: 2,
            learning_rate: 0.05,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn empty_sets_are_rejected() {
        let cfg = small_cfg();
        let data = separable(40, cfg.hash_space, 0);
        assert!(matches!(
            train(&[], &data, &schema(), &cfg, Objective::Joint),
            Err(TrainError::EmptySet("training"))
        ));
        assert!(matches!(
            train(&data, &[], &schema(), &cfg, Objective::Joint),
            Err(TrainError::EmptySet("validation"))
        ));
    }

    #[test]
    fn loss_falls_on_separable_data() {
        let cfg = TrainConfig {
            dropout: 0.0,
            epochs: 5,
            eval_every: 5,
            ..small_cfg()
        };
        let data = separable(200, cfg.hash_space, 0);
        let val = separable(50, cfg.hash_space, 1000);
        let out = train(&data, &val, &schema(), &cfg, Objective::Joint).unwrap();
        let first: Vec<f64> = out.trace.iter().take(5).map(|r| r.losses.loss_p).collect();
        assert!(first.windows(2).all(|w| w[1] < w[0]), "{first:?}");
        assert!(out.best_val_auc > 0.99);
    }

    #[test]
    fn best_snapshot_dominates_trace() {
        let cfg = small_cfg();
        let data = separable(120, cfg.hash_space, 0);
        let val = separable(40, cfg.hash_space, 500);
        let out = train(&data, &val, &schema(), &cfg, Objective::Joint).unwrap();
        assert!(out.trace.iter().all(|r| r.val_auc <= out.best_val_auc));
        let r = evaluate(&out.model.model, &val).unwrap();
        assert_eq!(r.auc, out.best_val_auc);
    }

    #[test]
    fn evaluation_leaves_parameters_alone() {
        let cfg = small_cfg();
        let data = separable(64, cfg.hash_space, 0);
        let val = separable(32, cfg.hash_space, 100);
        let out = train(&data, &val, &schema(), &cfg, Objective::Joint).unwrap();
        let before = out.model.model.clone();
        evaluate(&out.model.model, &data).unwrap();
        score_all(&out.model.model, &val).unwrap();
        assert!(out.model.model == before);
    }

    #[test]
    fn runs_are_seed_deterministic() {
        let cfg = small_cfg();
        let data = separable(64, cfg.hash_space, 0);
        let val = separable(32, cfg.hash_space, 100);
        let a = train(&data, &val, &schema(), &cfg, Objective::Joint).unwrap();
        let b = train(&data, &val, &schema(), &cfg, Objective::Joint).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.model.to_bytes(), b.model.to_bytes());
    }

    #[test]
    fn zero_weights_match_prediction_only() {
        let cfg = TrainConfig {
            alpha: 0.0,
            beta: 0.0,
            ..small_cfg()
        };
        let data = separable(64, cfg.hash_space, 0);
        let val = separable(32, cfg.hash_space, 100);
        let joint = train(&data, &val, &schema(), &cfg, Objective::Joint).unwrap();
        let dnn = train(&data, &val, &schema(), &cfg, Objective::PredictionOnly).unwrap();
        assert_eq!(joint.model.to_bytes(), dnn.model.to_bytes());
        assert!(joint.trace.iter().all(|r| r.losses.loss_m > 0.0 && r.losses.loss_c > 0.0));
        assert!(dnn.trace.iter().all(|r| r.losses.loss_m == 0.0));
    }

    #[test]
    fn single_class_eval_reports_logloss() {
        let cfg = small_cfg();
        let model = DeepMcp::<f32>::zeros(schema(), cfg.architecture());
        let data: Vec<Instance> = separable(20, cfg.hash_space, 0).into_iter().filter(|i| i.label == 1).collect();
        match evaluate(&model, &data) {
            Err(EvalError::SingleClass { logloss, .. }) => assert!((logloss - 2f64.ln()).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn baselines_learn_separable_data() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..small_cfg()
        };
        let data = separable(200, cfg.hash_space, 0);
        let val = separable(50, cfg.hash_space, 1000);
        assert!(train_lr(&data, &val, &cfg).unwrap().best_val_auc > 0.99);
        assert!(train_fm(&data, &val, &cfg).unwrap().best_val_auc > 0.99);
    }

    #[test]
    fn pair_stream_cycles_and_excludes() {
        let data = separable(200, 1 << 10, 0);
        let mut s = PairStream::new(&data, 2, 3, stream_rng(0, STREAM_PAIRS));
        assert!(s.pool_size() > 0);
        let n = s.pool_size() * 2 + 3;
        let batch = s.next_batch(n).unwrap();
        assert_eq!(batch.len(), n);
        for ex in &batch {
            assert_eq!(ex.negatives.len(), 3);
            assert!(ex.negatives.iter().all(|q| q != &ex.center && q != &ex.context));
        }
    }
}
