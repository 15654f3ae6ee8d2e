//! Acceptance criteria 1–10 (11 is GPU-scale and reported as skipped).
//!
//! Runs without the libtest harness so every criterion prints one
//! `criterion N: PASS|FAIL ...` line even when captured output is hidden.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use q2t::encoder::{
    encode, encode_query, sample_loss_and_grad, score_query, smoothed_cross_entropy,
    smoothed_labels, EncoderConfig, EncoderParams, KgeGrad, TrainSample,
};
use q2t::encoding::{augment, directed_distance, EncodingConfig, EncodingMode};
use q2t::eval::{query_metrics, rank_hard_answer, QueryMetrics};
use q2t::kge::{eval_link_prediction, pretrain, KgeModel, PretrainConfig, Scorer};
use q2t::query::{build_from_template, ConjunctiveGraph, DnfQuery, QueryType};
use q2t::symbolic::{generate_dataset, GenerateConfig, QuerySampler, SamplerConfig, SplitCounts};
use q2t::train::{evaluate, train_encoder, EvalTarget, TrainRunConfig};
use q2t::{answer_dnf, brute_force_answers, synth, AnswerSet, GraphIndex, KnowledgeGraph, SplitFamily, SplitLabel};

// Tolerances and budgets.
const MIN_ORACLE_PAIRS: usize = 200;
const ORACLE_BUDGET: Duration = Duration::from_secs(60);
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-5;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const FROZEN_STEPS: usize = 100;
const OVERFIT_MRR: f64 = 0.95;
const OVERFIT_BUDGET: Duration = Duration::from_secs(15 * 60);
const SMOOTHING_TOL: f64 = 1e-6;
const LABEL_TOL: f64 = 1e-15;
const PERMUTATION_TOL: f64 = 1e-5;
const PERMUTATIONS: usize = 100;
const MC_TOL: f64 = 0.02;
const MC_QUERIES: usize = 1000;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn template(qt: QueryType, anchors: &[usize], rels: &[usize]) -> DnfQuery {
    build_from_template(qt, anchors, rels).expect("template arity")
}

fn random_template(qt: QueryType, n_ent: usize, n_rel: usize, rng: &mut ChaCha8Rng) -> DnfQuery {
    let (na, nr) = qt.arity().expect("template");
    let anchors: Vec<usize> = (0..na).map(|_| rng.random_range(0..n_ent)).collect();
    let rels: Vec<usize> = (0..nr).map(|_| rng.random_range(0..n_rel)).collect();
    template(qt, &anchors, &rels)
}

fn toy_kge(kg: &KnowledgeGraph, seed: u64) -> KgeModel {
    let cfg = PretrainConfig {
        dim: 128,
        epochs: 200,
        batch_size: 100,
        learning_rate: 0.1,
        seed,
        ..PretrainConfig::default()
    };
    pretrain(kg, &cfg).expect("pretraining").0
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let kg = synth::random_kg(25, 4, 150, 3);
    let index = GraphIndex::build(&kg);
    let sampler = QuerySampler::new(&index, SamplerConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut pairs = 0;
    let mut nonempty = 0;
    for round in 0..16 {
        for qt in QueryType::TEMPLATES {
            // alternate walk-sampled queries (non-empty answers) with
            // uniformly random bindings (often empty)
            let q = if round % 2 == 0 {
                sampler.sample(qt, &mut rng).map_err(|e| format!("{qt}: {e}"))?
            } else {
                random_template(qt, 25, 4, &mut rng)
            };
            let fast = answer_dnf(&q, &index);
            let mut slow = AnswerSet::default();
            for g in &q.conjuncts {
                slow = slow.union(&brute_force_answers(g, &kg).map_err(|e| e.to_string())?);
            }
            ensure(fast == slow, || {
                format!("{} disagrees: {:?} vs {:?}", q.to_nested().unwrap_or_default(), fast, slow)
            })?;
            pairs += 1;
            nonempty += usize::from(!fast.is_empty());
        }
    }
    let elapsed = start.elapsed();
    ensure(pairs >= MIN_ORACLE_PAIRS, || format!("only {pairs} pairs"))?;
    ensure(elapsed < ORACLE_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{pairs} pairs over 14 templates ({nonempty} non-empty), exact equality, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

/// Builds the relation-node graph straight from the query graph, then
/// Floyd–Warshall distances and relaxation-based longest-path layers.
fn oracle_phi(g: &ConjunctiveGraph) -> Vec<Vec<i64>> {
    let n = g.nodes.len() + g.edges.len();
    let inf = i64::MAX / 4;
    let mut dist = vec![vec![inf; n]; n];
    let mut arcs = Vec::new();
    for (k, e) in g.edges.iter().enumerate() {
        let r = g.nodes.len() + k;
        arcs.push((e.src, r));
        arcs.push((r, e.dst));
    }
    for (i, row) in dist.iter_mut().enumerate() {
        row[i] = 0;
    }
    for &(a, b) in &arcs {
        dist[a][b] = 1;
        dist[b][a] = 1;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                dist[i][j] = dist[i][j].min(dist[i][k] + dist[k][j]);
            }
        }
    }
    let mut layer = vec![0i64; n];
    for _ in 0..n {
        for &(a, b) in &arcs {
            layer[b] = layer[b].max(layer[a] + 1);
        }
    }
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| if layer[i] - layer[j] >= 0 { dist[i][j] } else { 0 })
                .collect()
        })
        .collect()
}

fn criterion_2() -> Outcome {
    let mut cells = 0;
    let mut collisions = 0;
    for qt in QueryType::TEMPLATES {
        let (na, nr) = qt.arity().expect("template");
        let q = template(qt, &(0..na).collect::<Vec<_>>(), &(0..nr).collect::<Vec<_>>());
        for g in &q.conjuncts {
            let phi = directed_distance(&augment(g).map_err(|e| e.to_string())?, false)
                .map_err(|e| e.to_string())?;
            let want = oracle_phi(g);
            for (i, row) in want.iter().enumerate() {
                for (j, &w) in row.iter().enumerate() {
                    ensure(phi[[i, j]] == w, || format!("{qt} ({i},{j}): {} vs {w}", phi[[i, j]]))?;
                    cells += 1;
                    collisions += usize::from(i != j && w == 0);
                }
            }
        }
    }
    ensure(collisions > 0, || "no descendant pair collapsed to 0".into())?;
    Ok(format!(
        "{cells} cells exact on 14 templates; {collisions} descendant pairs map to 0 as printed"
    ))
}

fn tiny_setup() -> (KgeModel, EncoderParams, EncoderConfig) {
    let kge = KgeModel::random(Scorer::ComplEx, 7, 3, 8, 0.5, 21).expect("kge");
    let cfg = EncoderConfig {
        num_layers: 2,
        d1: 16,
        num_heads: 2,
        dropout: 0.1,
        k_neg: 4,
        label_smoothing: 0.2,
        ..EncoderConfig::default()
    };
    let mut params = EncoderParams::init(&cfg, 8, 3).expect("params");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for b in &mut params.blocks {
        b.bias.mapv_inplace(|_| rng.random::<f64>() - 0.5);
    }
    (kge, params, cfg)
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let (kge, params, cfg) = tiny_setup();
    let seqs: Vec<_> = [QueryType::P3, QueryType::Pin, QueryType::I3, QueryType::U2]
        .into_iter()
        .enumerate()
        .map(|(i, qt)| {
            let (na, nr) = qt.arity().expect("template");
            let q = template(qt, &(0..na).map(|a| (a + i) % 7).collect::<Vec<_>>(), &(0..nr).map(|r| r % 3).collect::<Vec<_>>());
            encode_query(&q, &cfg).expect("encodes")
        })
        .collect();
    let samples: Vec<TrainSample> = seqs
        .iter()
        .enumerate()
        .map(|(i, s)| TrainSample {
            seqs: s,
            candidates: vec![i, 4, 5, 6, (i + 2) % 4],
            dropout_seed: 100 + i as u64,
        })
        .collect();
    let loss = |p: &EncoderParams| -> f64 {
        let mut g = p.zeros_like();
        samples
            .iter()
            .map(|s| sample_loss_and_grad(s, &kge, p, &cfg, true, 1.0, &mut g, None).expect("loss"))
            .sum()
    };
    let mut grad = params.zeros_like();
    let mut kgrad = KgeGrad::zeros(&kge);
    for s in &samples {
        sample_loss_and_grad(s, &kge, &params, &cfg, true, 1.0, &mut grad, Some(&mut kgrad))
            .map_err(|e| e.to_string())?;
    }
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _, _)| n).collect();
    let mut worst = (0.0f64, String::new());
    for (ti, name) in names.iter().enumerate() {
        let analytic = grad.tensors()[ti].2.to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let mut plus = params.clone();
            plus.tensors_mut()[ti].1[k] += GRAD_EPS;
            let mut minus = params.clone();
            minus.tensors_mut()[ti].1[k] -= GRAD_EPS;
            *slot = (loss(&plus) - loss(&minus)) / (2.0 * GRAD_EPS);
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let scale = analytic
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
            .max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
        if scale < 1e-7 {
            // key biases: the softmax cancels them exactly
            ensure(diff < 1e-8, || format!("{name}: vanishing gradient off by {diff}"))?;
            continue;
        }
        let err = diff / scale;
        ensure(err < GRAD_REL_TOL, || format!("{name}: relative error {err:.3e}"))?;
        if err > worst.0 {
            worst = (err, name.clone());
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < GRAD_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} tensors, worst relative error {:.2e} ({}), {:.1}s",
        names.len(),
        worst.0,
        worst.1,
        elapsed.as_secs_f64()
    ))
}

fn supervised_positive() -> [QueryType; 5] {
    [QueryType::P1, QueryType::P2, QueryType::P3, QueryType::I2, QueryType::I3]
}

fn fully_observed(kg: &KnowledgeGraph) -> SplitFamily {
    let empty = KnowledgeGraph::empty(kg.num_entities(), kg.num_relations(), SplitLabel::Train);
    SplitFamily::from_parts(kg.clone().with_split(SplitLabel::Train), &empty, &empty).expect("family")
}

fn criterion_4() -> Outcome {
    let kg = synth::random_kg(40, 4, 200, 5);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let hash = toy_kge(&kg, 1).save(dir.path()).map_err(|e| e.to_string())?;
    let (loaded, loaded_hash) = KgeModel::load_for(dir.path(), &kg).map_err(|e| e.to_string())?;
    ensure(hash == loaded_hash, || "hash changed on load".into())?;
    let counts = SplitCounts {
        train: supervised_positive().iter().map(|&q| (q, 20)).collect(),
        valid: vec![],
        test: vec![],
    };
    let ds = generate_dataset(&fully_observed(&kg), &counts, 2, &GenerateConfig::default())
        .map_err(|e| e.to_string())?
        .train;
    let cfg = TrainRunConfig {
        encoder: EncoderConfig {
            num_layers: 1,
            d1: 16,
            num_heads: 2,
            k_neg: 16,
            ..EncoderConfig::default()
        },
        batch_size: 8,
        steps: FROZEN_STEPS,
        learning_rate: 1e-3,
        eval_every: 0,
        ..TrainRunConfig::default()
    };
    let out = train_encoder(&ds, None, &loaded, &cfg).map_err(|e| e.to_string())?;
    ensure(out.log.losses.len() == FROZEN_STEPS, || "wrong step count".into())?;
    let (reread, reread_hash) = KgeModel::load(dir.path()).map_err(|e| e.to_string())?;
    let bitwise = |a: &Array2<f64>, b: &Array2<f64>| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
    ensure(reread_hash == hash, || "checkpoint hash changed".into())?;
    ensure(bitwise(&out.kge.entity, &reread.entity), || "entity table moved".into())?;
    ensure(bitwise(&out.kge.relation, &reread.relation), || "relation table moved".into())?;
    ensure(bitwise(&loaded.entity, &reread.entity), || "input model mutated".into())?;
    Ok(format!("{FROZEN_STEPS} steps, tables bitwise equal to checkpoint {}", &hash[..12]))
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let kg = synth::random_kg(100, 10, 1000, 7).with_split(SplitLabel::Train);
    let kge = toy_kge(&kg, 0);
    let mrr1 = eval_link_prediction(&kge, &GraphIndex::build(&kg), kg.triples());
    ensure(mrr1 >= OVERFIT_MRR, || format!("stage 1 MRR {mrr1:.4}"))?;
    let stage1 = start.elapsed();

    let counts = SplitCounts {
        train: supervised_positive().iter().map(|&q| (q, 200)).collect(),
        valid: vec![],
        test: vec![],
    };
    let ds = generate_dataset(&fully_observed(&kg), &counts, 1, &GenerateConfig::default())
        .map_err(|e| e.to_string())?
        .train;
    let cfg = TrainRunConfig {
        encoder: EncoderConfig {
            num_layers: 2,
            d1: 64,
            num_heads: 4,
            dropout: 0.0,
            k_neg: 128,
            label_smoothing: 0.1,
            ..EncoderConfig::default()
        },
        batch_size: 128,
        learning_rate: 1e-3,
        steps: 2000,
        eval_every: 0,
        type_mix: supervised_positive().iter().map(|&q| (q, 1.0)).collect(),
        ..TrainRunConfig::default()
    };
    let out = train_encoder(&ds, None, &kge, &cfg).map_err(|e| e.to_string())?;
    let report = evaluate(&ds, &kge, &out.params, &cfg.encoder, EvalTarget::All).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let mut parts = Vec::new();
    for qt in supervised_positive() {
        let m = report.mrr(qt).ok_or_else(|| format!("no {qt} rows"))?;
        ensure(m >= OVERFIT_MRR, || format!("stage 2 {qt} training MRR {m:.4}"))?;
        parts.push(format!("{qt} {m:.3}"));
    }
    ensure(elapsed < OVERFIT_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "stage 1 MRR {mrr1:.3} ({:.1}s); stage 2 {} ({:.1}s total)",
        stage1.as_secs_f64(),
        parts.join(", "),
        elapsed.as_secs_f64()
    ))
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let k = rng.random_range(2..40);
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-8.0..8.0)).collect();
        let (ours, _) = smoothed_cross_entropy(&logits, 0.0).map_err(|e| e.to_string())?;
        // unsmoothed sampled softmax: −log(e^{z_0} / Σ e^{z_i})
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        let plain = -(logits[0].exp() / z).ln();
        worst = worst.max((ours - plain).abs());
    }
    ensure(worst < SMOOTHING_TOL, || format!("α=0 differs by {worst:.3e}"))?;
    let y = smoothed_labels(5, 0.4).map_err(|e| e.to_string())?;
    let want = [0.68, 0.08, 0.08, 0.08, 0.08];
    for (a, b) in y.iter().zip(want) {
        ensure((a - b).abs() <= LABEL_TOL, || format!("labels {y:?}"))?;
    }
    Ok(format!("α=0 max deviation {worst:.1e}; α=0.4, K=5 labels {y:?}"))
}

fn criterion_7() -> Outcome {
    let kge = KgeModel::random(Scorer::ComplEx, 12, 5, 16, 0.5, 8).expect("kge");
    let cfg = EncoderConfig {
        num_layers: 2,
        d1: 32,
        num_heads: 4,
        ..EncoderConfig::default()
    };
    let params = EncoderParams::init(&cfg, 16, 6).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    let mut runs = 0;
    for qt in QueryType::TEMPLATES {
        let q = random_template(qt, 12, 5, &mut rng);
        for seq in encode_query(&q, &cfg).map_err(|e| e.to_string())? {
            let (gh, gr) = encode(&seq, &kge, &params, &cfg).map_err(|e| e.to_string())?;
            for _ in 0..PERMUTATIONS {
                let mut tail: Vec<usize> = (2..seq.len()).collect();
                tail.shuffle(&mut rng);
                let perm: Vec<usize> = [0, 1].into_iter().chain(tail).collect();
                let (ph, pr) = encode(&seq.permuted(&perm), &kge, &params, &cfg).map_err(|e| e.to_string())?;
                let dev = (&gh - &ph).iter().chain((&gr - &pr).iter()).fold(0.0f64, |m, v| m.max(v.abs()));
                worst = worst.max(dev);
                runs += 1;
            }
        }
    }
    ensure(worst < PERMUTATION_TOL, || format!("max deviation {worst:.3e}"))?;
    Ok(format!("{runs} permuted encodings, max deviation {worst:.1e}"))
}

fn criterion_8() -> Outcome {
    let kge = KgeModel::random(Scorer::ComplEx, 30, 6, 16, 0.5, 9).expect("kge");
    let cfg = EncoderConfig {
        num_layers: 2,
        d1: 32,
        num_heads: 4,
        ..EncoderConfig::default()
    };
    let params = EncoderParams::init(&cfg, 16, 1).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let (a, b) = (rng.random_range(0..30), rng.random_range(0..30));
        let (r, s) = (rng.random_range(0..6), rng.random_range(0..6));
        let union = template(QueryType::U2, &[a, b], &[r, s]);
        let scored = score_query(&union, &kge, &params, &cfg).map_err(|e| e.to_string())?;
        // each branch scored as its own standalone 1p query
        let left = score_query(&template(QueryType::P1, &[a], &[r]), &kge, &params, &cfg).map_err(|e| e.to_string())?;
        let right = score_query(&template(QueryType::P1, &[b], &[s]), &kge, &params, &cfg).map_err(|e| e.to_string())?;
        for e in 0..30 {
            let want = left.scores[e].max(right.scores[e]);
            ensure(scored.scores[e] == want, || format!("entity {e}: {} vs {want}", scored.scores[e]))?;
        }
    }
    Ok("20 random 2u queries equal the elementwise max of their 1p branches bit for bit".into())
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let family = synth::random_splits(100, 10, 1000, 0.05, 0.1, 17);
    let kge = toy_kge(&family.train, 2);
    let counts = SplitCounts {
        train: QueryType::SUPERVISED.iter().map(|&q| (q, 100)).collect(),
        valid: vec![],
        test: QueryType::TEMPLATES.iter().map(|&q| (q, 20)).collect(),
    };
    let splits = generate_dataset(&family, &counts, 5, &GenerateConfig::default()).map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    for mode in EncodingMode::ALL {
        let cfg = TrainRunConfig {
            encoder: EncoderConfig {
                num_layers: 2,
                d1: 32,
                num_heads: 4,
                k_neg: 64,
                encoding: EncodingConfig {
                    mode,
                    ..EncodingConfig::default()
                },
                ..EncoderConfig::default()
            },
            batch_size: 64,
            learning_rate: 2e-3,
            steps: 400,
            eval_every: 0,
            ..TrainRunConfig::default()
        };
        let out = train_encoder(&splits.train, None, &kge, &cfg).map_err(|e| format!("{mode}: {e}"))?;
        let report = evaluate(&splits.test, &kge, &out.params, &cfg.encoder, EvalTarget::Hard)
            .map_err(|e| format!("{mode}: {e}"))?;
        ensure(report.per_type.len() == 14, || format!("{mode}: {} type rows", report.per_type.len()))?;
        ensure(report.a_p().is_finite() && report.a_n().is_finite(), || format!("{mode}: non-finite aggregate"))?;
        let fit = evaluate(&splits.train, &kge, &out.params, &cfg.encoder, EvalTarget::All)
            .map_err(|e| format!("{mode}: {e}"))?;
        rows.push((mode, format!("{}{}", fit.to_csv(), report.to_csv()), fit.mean_all(), report.a_p(), report.a_n()));
    }
    let distinct: BTreeSet<&String> = rows.iter().map(|r| &r.1).collect();
    ensure(distinct.len() == 4, || format!("only {} distinct metric tables", distinct.len()))?;
    let summary: Vec<String> = rows
        .iter()
        .map(|(m, _, fit, ap, an)| {
            format!("{m} fit {:.1} A_p {:.1} A_n {:.1}", 100.0 * fit, 100.0 * ap, 100.0 * an)
        })
        .collect();
    Ok(format!("{} ({:.1}s)", summary.join("; "), start.elapsed().as_secs_f64()))
}

fn criterion_10() -> Outcome {
    // hard answers 0 and 1 ranked 1 and 4 among non-answers 3, 4, 5
    let scores = [0.9, 0.5, 0.99, 0.8, 0.7, 0.6];
    let all = AnswerSet::from_unsorted(vec![0, 1, 2]);
    let hard = AnswerSet::from_unsorted(vec![0, 1]);
    ensure(rank_hard_answer(&scores, 0, &all) == 1, || "rank of 0".into())?;
    ensure(rank_hard_answer(&scores, 1, &all) == 4, || "rank of 1".into())?;
    let m = query_metrics(&scores, &hard, &all);
    ensure(m.mrr == 0.625, || format!("MRR {}", m.mrr))?;
    ensure(QueryMetrics::from_ranks(&[1; 3]).mrr == 1.0, || "all rank 1".into())?;

    // random scorer: a hard answer's rank is uniform over 1..=N+1 against N
    // non-answers, so E[1/rank] = H(N+1)/(N+1)
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n_ent = 60;
    let (mut empirical, mut expected) = (0.0, 0.0);
    for _ in 0..MC_QUERIES {
        let n_ans = rng.random_range(1..6);
        let mut ids: Vec<usize> = (0..n_ent).collect();
        ids.shuffle(&mut rng);
        let all = AnswerSet::from_unsorted(ids[..n_ans].to_vec());
        let hard = AnswerSet::from_unsorted(ids[..rng.random_range(1..=n_ans)].to_vec());
        let scores: Vec<f64> = (0..n_ent).map(|_| rng.random()).collect();
        empirical += query_metrics(&scores, &hard, &all).mrr;
        let n = (n_ent - n_ans + 1) as f64;
        expected += (1..=(n_ent - n_ans + 1)).map(|k| 1.0 / k as f64).sum::<f64>() / n;
    }
    empirical /= MC_QUERIES as f64;
    expected /= MC_QUERIES as f64;
    ensure((empirical - expected).abs() < MC_TOL, || {
        format!("random MRR {empirical:.4} vs expected {expected:.4}")
    })?;
    Ok(format!(
        "ranks 1 and 4 → 0.625; random scorer MRR {empirical:.4} vs closed form {expected:.4} over {MC_QUERIES} queries"
    ))
}

fn main() {
    let criteria: [(usize, fn() -> Outcome); 10] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
    ];
    let filter: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (n, run) in criteria {
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|p| Err(format!("panicked: {:?}", p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())))));
        match outcome {
            Ok(detail) => println!("criterion {n}: PASS {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n}: FAIL {detail}");
            }
        }
    }
    if filter.is_empty() || filter.contains(&11) {
        println!("criterion 11: SKIPPED optional full-scale benchmark run (hours on a GPU), not part of this suite");
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
