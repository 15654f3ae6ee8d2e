//! Stage-two training loop, evaluation and hyperparameter sweeps.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{QueryRecord, SampledDataset};
use crate::encoder::{
    encode_query, sample_loss_and_grad, score_sequences, Adam, EncoderConfig, EncoderParams,
    KgeGrad, TableAdam, TrainSample,
};
use crate::encoding::SequenceInput;
use crate::error::{Error, Result};
use crate::eval::{query_metrics, EvalReport};
use crate::kge::KgeModel;
use crate::query::QueryType;
use crate::symbolic::AnswerSet;

/// Samples per gradient chunk; chunks are reduced in a fixed order.
const CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRunConfig {
    pub encoder: EncoderConfig,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    /// When false the link predictor tables are updated too.
    pub freeze_kge: bool,
    /// Validation interval in steps; 0 evaluates only after the last step.
    pub eval_every: usize,
    pub seed: u64,
    /// Sampling weight per query type; types absent here are not trained on.
    pub type_mix: Vec<(QueryType, f64)>,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            encoder: EncoderConfig::default(),
            batch_size: 1024,
            learning_rate: 4e-4,
            steps: 10_000,
            freeze_kge: true,
            eval_every: 1000,
            seed: 0,
            type_mix: QueryType::SUPERVISED.iter().map(|&t| (t, 1.0)).collect(),
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.type_mix.iter().any(|&(_, w)| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("type_mix weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Which answers count as ranking targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalTarget {
    /// Hard answers only (validation and test).
    Hard,
    /// Easy and hard answers (fit on training queries).
    All,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    /// `(step, selection score)` after each validation pass.
    pub validations: Vec<(usize, f64)>,
    /// Step whose parameters were returned (0 = initialization).
    pub best_step: usize,
}

pub struct TrainOutcome {
    pub params: EncoderParams,
    /// The link predictor after training; unchanged when frozen.
    pub kge: KgeModel,
    pub log: TrainLog,
}

struct Pool<'a> {
    records: Vec<(&'a QueryRecord, Vec<SequenceInput>, AnswerSet)>,
}

fn build_pools<'a>(
    train: &'a SampledDataset,
    cfg: &TrainRunConfig,
) -> Result<(Vec<Pool<'a>>, Vec<f64>)> {
    let mut pools = Vec::new();
    let mut weights = Vec::new();
    for &(qt, w) in &cfg.type_mix {
        if w <= 0.0 {
            continue;
        }
        let records = train
            .of_type(qt)
            .map(|r| {
                let answers = r.all_answers();
                Ok((r, encode_query(&r.query, &cfg.encoder)?, answers))
            })
            .filter(|r| r.as_ref().map_or(true, |(_, _, a)| !a.is_empty()))
            .collect::<Result<Vec<_>>>()?;
        if !records.is_empty() {
            pools.push(Pool { records });
            weights.push(w);
        }
    }
    if pools.is_empty() {
        return Err(Error::Config(
            "no training queries with answers for the configured type mix".into(),
        ));
    }
    Ok((pools, weights))
}

/// Positive first, then `k_neg` non-answers: every non-answer when there
/// are at most `k_neg` of them, otherwise uniform draws with replacement.
pub fn sample_candidates(
    answers: &AnswerSet,
    num_entities: usize,
    k_neg: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let pos = answers.as_slice()[rng.random_range(0..answers.len())];
    let non_answers = num_entities - answers.len();
    let mut out = Vec::with_capacity(1 + k_neg.min(non_answers));
    out.push(pos);
    if non_answers == 0 {
        return out;
    }
    if k_neg >= non_answers {
        out.extend((0..num_entities).filter(|&e| !answers.contains(e)));
    } else {
        while out.len() < k_neg + 1 {
            let e = rng.random_range(0..num_entities);
            if !answers.contains(e) {
                out.push(e);
            }
        }
    }
    out
}

/// Mean loss over `samples` and the summed gradients scaled by `1/len`.
/// Chunks are processed in parallel and reduced in order.
pub fn batch_loss_and_grad(
    samples: &[TrainSample<'_>],
    kge: &KgeModel,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    with_kge: bool,
) -> Result<(f64, EncoderParams, Option<KgeGrad>)> {
    let w = 1.0 / samples.len() as f64;
    let parts = samples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = params.zeros_like();
            let mut kg = with_kge.then(|| KgeGrad::zeros(kge));
            let mut loss = 0.0;
            for s in chunk {
                loss += sample_loss_and_grad(s, kge, params, cfg, true, w, &mut g, kg.as_mut())?;
            }
            Ok((loss, g, kg))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut iter = parts.into_iter();
    let (mut loss, mut grad, mut kgrad) = iter.next().expect("non-empty batch");
    for (l, g, kg) in iter {
        loss += l;
        grad.add_assign(&g);
        if let (Some(acc), Some(kg)) = (kgrad.as_mut(), kg) {
            acc.entity += &kg.entity;
            acc.relation += &kg.relation;
        }
    }
    Ok((loss * w, grad, kgrad))
}

/// Trains the encoder on `train`, selecting the parameters with the best
/// validation EPFO average (falling back to the mean over all present
/// types). Without validation data the final parameters are returned.
pub fn train_encoder(
    train: &SampledDataset,
    valid: Option<&SampledDataset>,
    kge: &KgeModel,
    cfg: &TrainRunConfig,
) -> Result<TrainOutcome> {
    train_encoder_with(train, valid, kge, cfg, |_, _| {})
}

/// [`train_encoder`] with a per-step callback `(step, loss)`.
pub fn train_encoder_with(
    train: &SampledDataset,
    valid: Option<&SampledDataset>,
    kge: &KgeModel,
    cfg: &TrainRunConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let enc = &cfg.encoder;
    let mut params = EncoderParams::init(enc, kge.dim(), enc.seed)?;
    let mut model = kge.clone();
    let mut log = TrainLog::default();
    if cfg.steps == 0 {
        return Ok(TrainOutcome {
            params,
            kge: model,
            log,
        });
    }
    let (pools, weights) = build_pools(train, cfg)?;
    let pick = WeightedIndex::new(&weights).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&params, cfg.learning_rate);
    let mut kge_adam = (!cfg.freeze_kge).then(|| TableAdam::new(&model, cfg.learning_rate));
    let select = |report: &EvalReport| {
        let a = report.a_p();
        if a.is_finite() {
            a
        } else {
            report.mean_all()
        }
    };
    let mut best: Option<(f64, EncoderParams, KgeModel)> = None;

    for step in 0..cfg.steps {
        let samples: Vec<TrainSample> = (0..cfg.batch_size)
            .map(|_| {
                let pool = &pools[pick.sample(&mut rng)];
                let (_, seqs, answers) = &pool.records[rng.random_range(0..pool.records.len())];
                TrainSample {
                    seqs,
                    candidates: sample_candidates(answers, model.num_entities(), enc.k_neg, &mut rng),
                    dropout_seed: rng.random(),
                }
            })
            .collect();
        let (loss, grad, kgrad) = batch_loss_and_grad(&samples, &model, &params, enc, !cfg.freeze_kge)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("encoder loss {loss} at learning rate {}", cfg.learning_rate),
            });
        }
        adam.step(&mut params, &grad);
        if let (Some(opt), Some(kg)) = (kge_adam.as_mut(), kgrad.as_ref()) {
            opt.step(&mut model, kg);
        }
        log.losses.push(loss);
        on_step(step, loss);

        let last = step + 1 == cfg.steps;
        let due = cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0;
        if let Some(valid) = valid {
            if due || last {
                let report = evaluate(valid, &model, &params, enc, EvalTarget::Hard)?;
                let score = select(&report);
                log.validations.push((step + 1, score));
                if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                    log.best_step = step + 1;
                    best = Some((score, params.clone(), model.clone()));
                }
            }
        }
    }
    let (params, model) = match best {
        Some((_, p, m)) => (p, m),
        None => {
            log.best_step = cfg.steps;
            (params, model)
        }
    };
    Ok(TrainOutcome {
        params,
        kge: model,
        log,
    })
}

/// Filtered MRR and HITS@k per query type. Records without targets are
/// skipped and counted.
pub fn evaluate(
    dataset: &SampledDataset,
    kge: &KgeModel,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    target: EvalTarget,
) -> Result<EvalReport> {
    let start = Instant::now();
    let results = dataset
        .records
        .par_iter()
        .map(|r| {
            let all = r.all_answers();
            let targets = match target {
                EvalTarget::Hard => r.hard.clone(),
                EvalTarget::All => all.clone(),
            };
            if targets.is_empty() {
                return Ok(None);
            }
            let seqs = encode_query(&r.query, cfg)?;
            let scored = score_sequences(&seqs, kge, params, cfg)?;
            let scores = scored.scores.as_slice().expect("contiguous");
            Ok(Some((r.query_type(), query_metrics(scores, &targets, &all))))
        })
        .collect::<Result<Vec<_>>>()?;
    let skipped = results.iter().filter(|r| r.is_none()).count();
    let kept: Vec<_> = results.into_iter().flatten().collect();
    Ok(EvalReport::from_queries(&kept, skipped, start.elapsed().as_secs_f64()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    LabelSmoothing,
    NumLayers,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::LabelSmoothing => "label_smoothing",
            SweepAxis::NumLayers => "num_layers",
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &TrainRunConfig, value: f64) -> Result<TrainRunConfig> {
        let mut cfg = base.clone();
        match self {
            SweepAxis::LabelSmoothing => cfg.encoder.label_smoothing = value,
            SweepAxis::NumLayers => {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!("num_layers {value} is not a whole number")));
                }
                cfg.encoder.num_layers = value as usize;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "label_smoothing" | "ls" => Ok(SweepAxis::LabelSmoothing),
            "num_layers" | "layers" => Ok(SweepAxis::NumLayers),
            other => Err(Error::Config(format!(
                "unknown sweep axis {other:?} (expected label_smoothing or num_layers)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub a_m: f64,
    pub a_i: f64,
    pub a_n: f64,
    pub a_p: f64,
    /// Set when this point failed; the aggregates are then NaN.
    pub error: Option<String>,
}

/// One train + evaluate run per value. A failing point yields a row with
/// its error and the sweep continues.
pub fn sweep(
    axis: SweepAxis,
    values: &[f64],
    base: &TrainRunConfig,
    train: &SampledDataset,
    valid: Option<&SampledDataset>,
    test: &SampledDataset,
    kge: &KgeModel,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    Ok(values
        .iter()
        .map(|&value| {
            let run = || -> Result<EvalReport> {
                let cfg = axis.apply(base, value)?;
                let out = train_encoder(train, valid, kge, &cfg)?;
                evaluate(test, &out.kge, &out.params, &cfg.encoder, EvalTarget::Hard)
            };
            match run() {
                Ok(r) => SweepRow {
                    value,
                    a_m: r.a_m(),
                    a_i: r.a_i(),
                    a_n: r.a_n(),
                    a_p: r.a_p(),
                    error: None,
                },
                Err(e) => SweepRow {
                    value,
                    a_m: f64::NAN,
                    a_i: f64::NAN,
                    a_n: f64::NAN,
                    a_p: f64::NAN,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect())
}

/// `value,A_m,A_i,A_n,A_p` with one row per sweep point.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("value,A_m,A_i,A_n,A_p\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.6},{:.6},{:.6},{:.6}", r.value, r.a_m, r.a_i, r.a_n, r.a_p);
    }
    out
}
