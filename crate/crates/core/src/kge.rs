//! Neural link predictor: embedding tables, ComplEx / DistMult scoring and
//! pretraining with the joint tail + relation prediction objective.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::checkpoint::{self, NamedArray};
use crate::error::{Error, Result};
use crate::kg::{GraphIndex, KnowledgeGraph, Triple};
use crate::symbolic::AnswerSet;

/// Triple score function. Both variants are trilinear: `score = <q(h, r), t>`
/// for a query vector `q` that depends only on head and relation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[non_exhaustive]
pub enum Scorer {
    /// Complex bilinear form; vectors are stored as `[real ‖ imaginary]`.
    ComplEx,
    DistMult,
}

impl Scorer {
    pub fn as_str(self) -> &'static str {
        match self {
            Scorer::ComplEx => "complex",
            Scorer::DistMult => "distmult",
        }
    }

    pub fn check_width(self, d0: usize) -> Result<()> {
        if self == Scorer::ComplEx && !d0.is_multiple_of(2) {
            return Err(Error::Shape(format!("ComplEx needs an even width, got {d0}")));
        }
        Ok(())
    }

    /// `q` such that `score(h, r, t) = q · t`.
    pub fn query_vector(self, h: ArrayView1<f64>, r: ArrayView1<f64>) -> Array1<f64> {
        match self {
            Scorer::DistMult => &h * &r,
            Scorer::ComplEx => {
                let k = h.len() / 2;
                let (hr, hi) = (h.slice(s![..k]), h.slice(s![k..]));
                let (rr, ri) = (r.slice(s![..k]), r.slice(s![k..]));
                let mut q = Array1::zeros(h.len());
                q.slice_mut(s![..k]).assign(&(&hr * &rr - &hi * &ri));
                q.slice_mut(s![k..]).assign(&(&hi * &rr + &hr * &ri));
                q
            }
        }
    }

    /// Accumulates `∂L/∂h` and `∂L/∂r` given `∂L/∂q`.
    pub fn query_vector_backward(
        self,
        h: ArrayView1<f64>,
        r: ArrayView1<f64>,
        dq: ArrayView1<f64>,
        mut dh: ArrayViewMut1<f64>,
        mut dr: ArrayViewMut1<f64>,
    ) {
        match self {
            Scorer::DistMult => {
                dh.scaled_add(1.0, &(&dq * &r));
                dr.scaled_add(1.0, &(&dq * &h));
            }
            Scorer::ComplEx => {
                let k = h.len() / 2;
                for j in 0..k {
                    let (hr, hi, rr, ri) = (h[j], h[j + k], r[j], r[j + k]);
                    let (qr, qi) = (dq[j], dq[j + k]);
                    dh[j] += qr * rr + qi * ri;
                    dh[j + k] += -qr * ri + qi * rr;
                    dr[j] += qr * hr + qi * hi;
                    dr[j + k] += -qr * hi + qi * hr;
                }
            }
        }
    }

    /// `p` such that `score(h, r, t) = p · r`.
    pub fn relation_vector(self, h: ArrayView1<f64>, t: ArrayView1<f64>) -> Array1<f64> {
        match self {
            Scorer::DistMult => &h * &t,
            Scorer::ComplEx => {
                let k = h.len() / 2;
                let (hr, hi) = (h.slice(s![..k]), h.slice(s![k..]));
                let (tr, ti) = (t.slice(s![..k]), t.slice(s![k..]));
                let mut p = Array1::zeros(h.len());
                p.slice_mut(s![..k]).assign(&(&hr * &tr + &hi * &ti));
                p.slice_mut(s![k..]).assign(&(&hr * &ti - &hi * &tr));
                p
            }
        }
    }

    fn relation_vector_backward(
        self,
        h: ArrayView1<f64>,
        t: ArrayView1<f64>,
        dp: ArrayView1<f64>,
        mut dh: ArrayViewMut1<f64>,
        mut dt: ArrayViewMut1<f64>,
    ) {
        match self {
            Scorer::DistMult => {
                dh.scaled_add(1.0, &(&dp * &t));
                dt.scaled_add(1.0, &(&dp * &h));
            }
            Scorer::ComplEx => {
                let k = h.len() / 2;
                for j in 0..k {
                    let (hr, hi, tr, ti) = (h[j], h[j + k], t[j], t[j + k]);
                    let (pr, pi) = (dp[j], dp[j + k]);
                    dh[j] += pr * tr + pi * ti;
                    dh[j + k] += pr * ti - pi * tr;
                    dt[j] += pr * hr - pi * hi;
                    dt[j + k] += pr * hi + pi * hr;
                }
            }
        }
    }

    /// N3 penalty of one embedding row and its gradient (scaled by `weight`).
    fn n3(self, x: ArrayView1<f64>, weight: f64, mut grad: ArrayViewMut1<f64>) -> f64 {
        match self {
            Scorer::DistMult => {
                let mut total = 0.0;
                for (g, &v) in grad.iter_mut().zip(x.iter()) {
                    total += v.abs().powi(3);
                    *g += weight * 3.0 * v * v.abs();
                }
                weight * total
            }
            Scorer::ComplEx => {
                // cube of the complex modulus per coordinate
                let k = x.len() / 2;
                let mut total = 0.0;
                for j in 0..k {
                    let (re, im) = (x[j], x[j + k]);
                    let m = (re * re + im * im).sqrt();
                    total += m * m * m;
                    grad[j] += weight * 3.0 * m * re;
                    grad[j + k] += weight * 3.0 * m * im;
                }
                weight * total
            }
        }
    }
}

impl fmt::Display for Scorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "complex" => Ok(Scorer::ComplEx),
            "distmult" => Ok(Scorer::DistMult),
            other => Err(Error::Config(format!(
                "unknown scorer {other:?} (expected complex or distmult)"
            ))),
        }
    }
}

/// Scores every candidate row against `(h, r)`.
pub fn score(
    h: ArrayView1<f64>,
    r: ArrayView1<f64>,
    candidates: ArrayView2<f64>,
    scorer: Scorer,
) -> Result<Array1<f64>> {
    let d0 = h.len();
    scorer.check_width(d0)?;
    if r.len() != d0 || candidates.ncols() != d0 {
        return Err(Error::Shape(format!(
            "widths h={d0} r={} candidates={}",
            r.len(),
            candidates.ncols()
        )));
    }
    Ok(candidates.dot(&scorer.query_vector(h, r)))
}

/// Frozen (or trainable) embedding tables plus their score function.
#[derive(Clone, Debug, PartialEq)]
pub struct KgeModel {
    pub scorer: Scorer,
    pub entity: Array2<f64>,
    pub relation: Array2<f64>,
}

impl KgeModel {
    pub fn new(scorer: Scorer, entity: Array2<f64>, relation: Array2<f64>) -> Result<Self> {
        scorer.check_width(entity.ncols())?;
        if entity.ncols() != relation.ncols() {
            return Err(Error::Shape("entity and relation widths differ".into()));
        }
        let model = KgeModel {
            scorer,
            entity,
            relation,
        };
        if !model.is_finite() {
            return Err(Error::Shape("non-finite embedding value".into()));
        }
        Ok(model)
    }

    /// Gaussian initialization with the given standard deviation.
    pub fn random(
        scorer: Scorer,
        num_entities: usize,
        num_relations: usize,
        d0: usize,
        scale: f64,
        seed: u64,
    ) -> Result<Self> {
        scorer.check_width(d0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale).map_err(|e| Error::Config(e.to_string()))?;
        let entity = Array2::from_shape_simple_fn((num_entities, d0), || normal.sample(&mut rng));
        let relation = Array2::from_shape_simple_fn((num_relations, d0), || normal.sample(&mut rng));
        KgeModel::new(scorer, entity, relation)
    }

    pub fn dim(&self) -> usize {
        self.entity.ncols()
    }

    pub fn num_entities(&self) -> usize {
        self.entity.nrows()
    }

    pub fn num_relations(&self) -> usize {
        self.relation.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.entity.iter().chain(self.relation.iter()).all(|v| v.is_finite())
    }

    /// Scores of every entity as the tail of `(head, relation, ?)`.
    pub fn score_tails(&self, head: usize, relation: usize) -> Array1<f64> {
        let q = self
            .scorer
            .query_vector(self.entity.row(head), self.relation.row(relation));
        self.entity.dot(&q)
    }

    /// Rounds every value to the nearest float32, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        self.entity.mapv_inplace(|v| v as f32 as f64);
        self.relation.mapv_inplace(|v| v as f32 as f64);
    }

    /// Writes the checkpoint and returns its content hash.
    pub fn save(&self, dir: &Path) -> Result<String> {
        let to_f32 = |a: &Array2<f64>| a.iter().map(|&v| v as f32).collect::<Vec<_>>();
        let meta = vec![
            ("kind".to_string(), "kge".to_string()),
            ("scorer".to_string(), self.scorer.to_string()),
            ("d0".to_string(), self.dim().to_string()),
            ("num_entities".to_string(), self.num_entities().to_string()),
            ("num_relations".to_string(), self.num_relations().to_string()),
        ];
        checkpoint::write(
            dir,
            &meta,
            vec![
                NamedArray {
                    name: "entity".into(),
                    shape: vec![self.num_entities(), self.dim()],
                    data: to_f32(&self.entity),
                },
                NamedArray {
                    name: "relation".into(),
                    shape: vec![self.num_relations(), self.dim()],
                    data: to_f32(&self.relation),
                },
            ],
        )
    }

    /// Loads a checkpoint, returning the model and its content hash.
    pub fn load(dir: &Path) -> Result<(Self, String)> {
        let ck = checkpoint::read(dir)?;
        if ck.meta("kind")? != "kge" {
            return Err(Error::Integrity(format!("{} is not a KGE checkpoint", dir.display())));
        }
        let scorer: Scorer = ck.meta("scorer")?.parse()?;
        let d0: usize = ck.meta_parse("d0")?;
        let ne: usize = ck.meta_parse("num_entities")?;
        let nr: usize = ck.meta_parse("num_relations")?;
        let table = |name: &str, rows: usize| -> Result<Array2<f64>> {
            let a = ck.array(name, &[rows, d0])?;
            Ok(Array2::from_shape_vec((rows, d0), a.data.iter().map(|&v| v as f64).collect())
                .expect("shape checked"))
        };
        let model = KgeModel::new(scorer, table("entity", ne)?, table("relation", nr)?)?;
        Ok((model, ck.hash))
    }

    /// Loads a checkpoint and checks it against the target graph's vocabulary.
    pub fn load_for(dir: &Path, kg: &KnowledgeGraph) -> Result<(Self, String)> {
        let (model, hash) = Self::load(dir)?;
        if model.num_entities() != kg.num_entities() || model.num_relations() != kg.num_relations() {
            return Err(Error::Shape(format!(
                "checkpoint has {} entities / {} relations, graph has {} / {}",
                model.num_entities(),
                model.num_relations(),
                kg.num_entities(),
                kg.num_relations()
            )));
        }
        Ok((model, hash))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub scorer: Scorer,
    /// Embedding width d0 (for ComplEx, twice the rank).
    pub dim: usize,
    /// Weight of the relation-prediction term.
    pub lambda_rel: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// N3 regularization weight.
    pub reg_weight: f64,
    /// Standard deviation of the initial embeddings.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            scorer: Scorer::ComplEx,
            dim: 2000,
            lambda_rel: 0.5,
            learning_rate: 0.1,
            batch_size: 1000,
            epochs: 100,
            reg_weight: 1e-3,
            init_scale: 1e-2,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.scorer.check_width(self.dim)?;
        if self.dim == 0 || self.batch_size == 0 {
            return Err(Error::Config("dim and batch_size must be positive".into()));
        }
        if !(self.lambda_rel >= 0.0 && self.reg_weight >= 0.0 && self.learning_rate > 0.0) {
            return Err(Error::Config(
                "lambda_rel and reg_weight must be non-negative, learning_rate positive".into(),
            ));
        }
        Ok(())
    }
}

/// Loss value and dense gradients for both tables.
pub struct PretrainGrad {
    pub loss: f64,
    pub entity: Array2<f64>,
    pub relation: Array2<f64>,
}

fn log_softmax_rows(scores: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let mut probs = scores.clone();
    let mut lse = Array1::zeros(scores.nrows());
    for (mut row, l) in probs.axis_iter_mut(Axis(0)).zip(lse.iter_mut()) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
        *l = max + sum.ln();
    }
    (probs, lse)
}

/// Mean over the batch of `-log P(t|h,r) - λ log P(r|h,t)` plus the N3 term,
/// with both softmaxes over the full vocabularies.
pub fn pretrain_loss_and_grad(
    model: &KgeModel,
    batch: &[Triple],
    lambda_rel: f64,
    reg_weight: f64,
) -> PretrainGrad {
    let b = batch.len();
    let d = model.dim();
    let sc = model.scorer;
    let inv_b = 1.0 / b as f64;
    let mut g_ent = Array2::<f64>::zeros(model.entity.raw_dim());
    let mut g_rel = Array2::<f64>::zeros(model.relation.raw_dim());

    let mut q = Array2::<f64>::zeros((b, d));
    for (i, t) in batch.iter().enumerate() {
        q.row_mut(i)
            .assign(&sc.query_vector(model.entity.row(t.head), model.relation.row(t.relation)));
    }
    // tail prediction
    let scores = q.dot(&model.entity.t());
    let (mut probs, lse) = log_softmax_rows(&scores);
    let mut loss = 0.0;
    for (i, t) in batch.iter().enumerate() {
        loss -= scores[[i, t.tail]] - lse[i];
        probs[[i, t.tail]] -= 1.0;
    }
    probs *= inv_b;
    g_ent += &probs.t().dot(&q);
    let dq = probs.dot(&model.entity);
    for (i, t) in batch.iter().enumerate() {
        let (h_row, r_row) = (model.entity.row(t.head), model.relation.row(t.relation));
        let mut dh = Array1::zeros(d);
        let mut dr = Array1::zeros(d);
        sc.query_vector_backward(h_row, r_row, dq.row(i), dh.view_mut(), dr.view_mut());
        g_ent.row_mut(t.head).scaled_add(1.0, &dh);
        g_rel.row_mut(t.relation).scaled_add(1.0, &dr);
    }

    // relation prediction
    if lambda_rel > 0.0 {
        let mut p = Array2::<f64>::zeros((b, d));
        for (i, t) in batch.iter().enumerate() {
            p.row_mut(i)
                .assign(&sc.relation_vector(model.entity.row(t.head), model.entity.row(t.tail)));
        }
        let rscores = p.dot(&model.relation.t());
        let (mut rprobs, rlse) = log_softmax_rows(&rscores);
        for (i, t) in batch.iter().enumerate() {
            loss -= lambda_rel * (rscores[[i, t.relation]] - rlse[i]);
            rprobs[[i, t.relation]] -= 1.0;
        }
        rprobs *= lambda_rel * inv_b;
        g_rel += &rprobs.t().dot(&p);
        let dp = rprobs.dot(&model.relation);
        for (i, t) in batch.iter().enumerate() {
            let (h_row, t_row) = (model.entity.row(t.head), model.entity.row(t.tail));
            let mut dh = Array1::zeros(d);
            let mut dt = Array1::zeros(d);
            sc.relation_vector_backward(h_row, t_row, dp.row(i), dh.view_mut(), dt.view_mut());
            g_ent.row_mut(t.head).scaled_add(1.0, &dh);
            g_ent.row_mut(t.tail).scaled_add(1.0, &dt);
        }
    }
    loss *= inv_b;

    if reg_weight > 0.0 {
        let w = reg_weight * inv_b;
        for t in batch {
            loss += sc.n3(model.entity.row(t.head), w, g_ent.row_mut(t.head));
            loss += sc.n3(model.relation.row(t.relation), w, g_rel.row_mut(t.relation));
            loss += sc.n3(model.entity.row(t.tail), w, g_ent.row_mut(t.tail));
        }
    }

    PretrainGrad {
        loss,
        entity: g_ent,
        relation: g_rel,
    }
}

/// Adagrad state for both tables.
pub struct Pretrainer {
    pub model: KgeModel,
    acc_ent: Array2<f64>,
    acc_rel: Array2<f64>,
    cfg: PretrainConfig,
    steps: usize,
}

impl Pretrainer {
    pub fn new(model: KgeModel, cfg: PretrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Pretrainer {
            acc_ent: Array2::zeros(model.entity.raw_dim()),
            acc_rel: Array2::zeros(model.relation.raw_dim()),
            model,
            cfg,
            steps: 0,
        })
    }

    /// One optimizer step on `batch`; returns the pre-update loss.
    pub fn step(&mut self, batch: &[Triple]) -> Result<f64> {
        let g = pretrain_loss_and_grad(&self.model, batch, self.cfg.lambda_rel, self.cfg.reg_weight);
        if !g.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.steps,
                detail: format!(
                    "pretraining loss {} (batch of {}, max |entity| {:.3e})",
                    g.loss,
                    batch.len(),
                    self.model.entity.fold(0.0f64, |m, v| m.max(v.abs()))
                ),
            });
        }
        let lr = self.cfg.learning_rate;
        adagrad(&mut self.model.entity, &mut self.acc_ent, &g.entity, lr);
        adagrad(&mut self.model.relation, &mut self.acc_rel, &g.relation, lr);
        self.steps += 1;
        Ok(g.loss)
    }
}

fn adagrad(param: &mut Array2<f64>, acc: &mut Array2<f64>, grad: &Array2<f64>, lr: f64) {
    ndarray::Zip::from(param)
        .and(acc)
        .and(grad)
        .for_each(|p, a, &g| {
            *a += g * g;
            *p -= lr * g / (a.sqrt() + 1e-10);
        });
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainLog {
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Trains embeddings on every triple of `kg`. The returned tables are
/// rounded to float32 so that a save/load cycle is lossless.
pub fn pretrain(kg: &KnowledgeGraph, cfg: &PretrainConfig) -> Result<(KgeModel, PretrainLog)> {
    pretrain_with(kg, cfg, |_, _| {})
}

/// [`pretrain`] with a per-epoch callback `(epoch, mean_loss)`.
pub fn pretrain_with(
    kg: &KnowledgeGraph,
    cfg: &PretrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(KgeModel, PretrainLog)> {
    cfg.validate()?;
    if kg.is_empty() {
        return Err(Error::Config("cannot pretrain on an empty graph".into()));
    }
    let model = KgeModel::random(
        cfg.scorer,
        kg.num_entities(),
        kg.num_relations(),
        cfg.dim,
        cfg.init_scale,
        cfg.seed,
    )?;
    let mut trainer = Pretrainer::new(model, cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut triples = kg.triples().to_vec();
    let mut log = PretrainLog::default();
    for epoch in 0..cfg.epochs {
        triples.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in triples.chunks(cfg.batch_size) {
            total += trainer.step(batch)? * batch.len() as f64;
        }
        let mean = total / triples.len() as f64;
        log.epoch_loss.push(mean);
        on_epoch(epoch, mean);
    }
    let mut model = trainer.model;
    model.round_to_f32();
    Ok((model, log))
}

/// Filtered MRR of tail prediction: each test tail is ranked against the
/// entities not known to complete `(h, r, ?)` in `filter`.
pub fn eval_link_prediction(model: &KgeModel, filter: &GraphIndex, test: &[Triple]) -> f64 {
    if test.is_empty() {
        return 0.0;
    }
    let rr: Vec<f64> = test
        .par_iter()
        .map(|t| {
            let scores = model.score_tails(t.head, t.relation);
            let known = AnswerSet::from_unsorted(filter.tails(t.head, t.relation).to_vec());
            let known = known.union(&AnswerSet::singleton(t.tail));
            let rank = crate::eval::rank_hard_answer(
                scores.as_slice().expect("contiguous"),
                t.tail,
                &known,
            );
            1.0 / rank as f64
        })
        .collect();
    rr.iter().sum::<f64>() / rr.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::SplitLabel;
    use ndarray::array;

    #[test]
    fn score_examples() {
        let one = array![1.0, 0.0];
        let s = score(one.view(), one.view(), array![[1.0, 0.0]].view(), Scorer::ComplEx).unwrap();
        assert_eq!(s[0], 1.0);

        let s = score(
            array![1.0, 2.0].view(),
            array![1.0, 1.0].view(),
            array![[3.0, -1.0]].view(),
            Scorer::DistMult,
        )
        .unwrap();
        assert_eq!(s[0], 1.0);

        let i = array![0.0, 1.0];
        let s = score(i.view(), i.view(), array![[1.0, 0.0]].view(), Scorer::ComplEx).unwrap();
        assert_eq!(s[0], -1.0);
    }

    #[test]
    fn score_rejects_bad_widths() {
        let v = array![1.0, 2.0, 3.0];
        assert!(score(v.view(), v.view(), array![[1.0, 2.0, 3.0]].view(), Scorer::ComplEx).is_err());
        let w = array![1.0, 2.0];
        assert!(score(w.view(), w.view(), array![[1.0, 2.0, 3.0]].view(), Scorer::DistMult).is_err());
    }

    /// The four-term real expansion of Re(<h, r, conj(t)>).
    fn complex_by_terms(h: &[f64], r: &[f64], t: &[f64]) -> f64 {
        let k = h.len() / 2;
        (0..k)
            .map(|j| {
                let (hr, hi, rr, ri, tr, ti) = (h[j], h[j + k], r[j], r[j + k], t[j], t[j + k]);
                hr * rr * tr + hi * rr * ti + hr * ri * ti - hi * ri * tr
            })
            .sum()
    }

    #[test]
    fn complex_matches_expansion_and_reduces_to_distmult() {
        let m = KgeModel::random(Scorer::ComplEx, 6, 3, 8, 1.0, 3).unwrap();
        for (h, r, t) in [(0, 0, 1), (2, 1, 5), (4, 2, 4)] {
            let s = m.score_tails(h, r)[t];
            let hv = m.entity.row(h).to_vec();
            let rv = m.relation.row(r).to_vec();
            let tv = m.entity.row(t).to_vec();
            assert!((s - complex_by_terms(&hv, &rv, &tv)).abs() < 1e-12);
            // relation-side form gives the same number
            let p = Scorer::ComplEx.relation_vector(m.entity.row(h), m.entity.row(t));
            assert!((p.dot(&m.relation.row(r)) - s).abs() < 1e-12);
        }
        let mut real = m.clone();
        real.entity.slice_mut(s![.., 4..]).fill(0.0);
        real.relation.slice_mut(s![.., 4..]).fill(0.0);
        let dm = score(
            real.entity.slice(s![0, ..4]),
            real.relation.slice(s![1, ..4]),
            real.entity.slice(s![.., ..4]),
            Scorer::DistMult,
        )
        .unwrap();
        let cx = real.score_tails(0, 1);
        for (a, b) in dm.iter().zip(cx.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn toy_batch() -> Vec<Triple> {
        vec![
            Triple::new(0, 0, 1),
            Triple::new(1, 1, 2),
            Triple::new(3, 0, 4),
            Triple::new(2, 1, 0),
        ]
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for scorer in [Scorer::ComplEx, Scorer::DistMult] {
            let model = KgeModel::random(scorer, 5, 2, 6, 0.5, 7).unwrap();
            let batch = toy_batch();
            let (lambda, reg) = (0.5, 1e-2);
            let g = pretrain_loss_and_grad(&model, &batch, lambda, reg);
            let eps = 1e-5;
            for which in 0..2 {
                let analytic = if which == 0 { &g.entity } else { &g.relation };
                let mut num = Array2::<f64>::zeros(analytic.raw_dim());
                for idx in ndarray::indices(analytic.raw_dim()) {
                    let mut plus = model.clone();
                    let mut minus = model.clone();
                    let (tp, tm) = if which == 0 {
                        (&mut plus.entity, &mut minus.entity)
                    } else {
                        (&mut plus.relation, &mut minus.relation)
                    };
                    tp[idx] += eps;
                    tm[idx] -= eps;
                    let lp = pretrain_loss_and_grad(&plus, &batch, lambda, reg).loss;
                    let lm = pretrain_loss_and_grad(&minus, &batch, lambda, reg).loss;
                    num[idx] = (lp - lm) / (2.0 * eps);
                }
                let diff = (analytic - &num).mapv(|v| v * v).sum().sqrt();
                let scale = analytic.mapv(|v| v * v).sum().sqrt().max(num.mapv(|v| v * v).sum().sqrt());
                assert!(diff / scale < 1e-4, "{scorer} table {which}: rel err {}", diff / scale);
            }
        }
    }

    #[test]
    fn lambda_zero_is_tail_cross_entropy() {
        let model = KgeModel::random(Scorer::ComplEx, 5, 2, 6, 0.7, 1).unwrap();
        let batch = toy_batch();
        let ours = pretrain_loss_and_grad(&model, &batch, 0.0, 0.0).loss;
        let mut expected = 0.0;
        for t in &batch {
            let scores: Vec<f64> = (0..5)
                .map(|c| {
                    complex_by_terms(
                        &model.entity.row(t.head).to_vec(),
                        &model.relation.row(t.relation).to_vec(),
                        &model.entity.row(c).to_vec(),
                    )
                })
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            expected -= scores[t.tail] - z.ln();
        }
        expected /= batch.len() as f64;
        assert!((ours - expected).abs() < 1e-10);
    }

    #[test]
    fn relabeling_entities_leaves_loss_trajectory_unchanged() {
        let model = KgeModel::random(Scorer::ComplEx, 5, 2, 6, 0.3, 2).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let mut permuted = model.clone();
        for (old, &new) in perm.iter().enumerate() {
            permuted.entity.row_mut(new).assign(&model.entity.row(old));
        }
        let batch = toy_batch();
        let pbatch: Vec<Triple> = batch
            .iter()
            .map(|t| Triple::new(perm[t.head], t.relation, perm[t.tail]))
            .collect();
        let cfg = PretrainConfig {
            dim: 6,
            learning_rate: 0.05,
            ..PretrainConfig::default()
        };
        let mut a = Pretrainer::new(model, cfg.clone()).unwrap();
        let mut b = Pretrainer::new(permuted, cfg).unwrap();
        for _ in 0..10 {
            let la = a.step(&batch).unwrap();
            let lb = b.step(&pbatch).unwrap();
            assert!((la - lb).abs() < 1e-10, "{la} vs {lb}");
        }
    }

    #[test]
    fn degenerate_pair_is_memorized() {
        let kg = KnowledgeGraph::new(2, 1, [Triple::new(0, 0, 1)], SplitLabel::Train).unwrap();
        let cfg = PretrainConfig {
            dim: 4,
            epochs: 300,
            batch_size: 1,
            lambda_rel: 0.0,
            reg_weight: 0.0,
            learning_rate: 0.5,
            ..PretrainConfig::default()
        };
        let (_, log) = pretrain(&kg, &cfg).unwrap();
        assert!(*log.epoch_loss.last().unwrap() < 0.05, "{:?}", log.epoch_loss.last());
    }

    #[test]
    fn checkpoint_round_trip_and_vocab_check() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = KgeModel::random(Scorer::ComplEx, 7, 3, 4, 0.1, 0).unwrap();
        m.round_to_f32();
        let hash = m.save(dir.path()).unwrap();
        let (back, h2) = KgeModel::load(dir.path()).unwrap();
        assert_eq!(hash, h2);
        assert!(back
            .entity
            .iter()
            .zip(m.entity.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back, m);

        let wrong = KnowledgeGraph::empty(8, 3, SplitLabel::Train);
        assert!(matches!(KgeModel::load_for(dir.path(), &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_embeddings_tie_to_rank_one() {
        let m = KgeModel::new(Scorer::DistMult, Array2::zeros((2, 2)), Array2::zeros((1, 2))).unwrap();
        let kg = KnowledgeGraph::new(2, 1, [Triple::new(0, 0, 1)], SplitLabel::Full).unwrap();
        let idx = GraphIndex::build(&kg);
        assert_eq!(eval_link_prediction(&m, &idx, kg.triples()), 1.0);
    }
}
