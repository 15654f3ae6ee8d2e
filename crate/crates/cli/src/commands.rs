use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use q2t::dataset::{answer_stats, render_answer_stats};
use q2t::encoder::{score_query, EncoderParams};
use q2t::kg::{load_kg, read_name_map, write_name_map};
use q2t::kge::{eval_link_prediction, pretrain_with, KgeModel};
use q2t::symbolic::generate_dataset;
use q2t::synth::random_splits;
use q2t::train::{evaluate, sweep, sweep_csv, train_encoder_with};
use q2t::{answer_dnf, parse_nested, GraphIndex, KnowledgeGraph, SampledDataset, SplitFamily, SplitLabel};

use crate::config::{ConfigError, RunConfig};
use crate::{report, Cli, Command, Common};

pub const ENTITY_NAMES: &str = "entities.tsv";
pub const RELATION_NAMES: &str = "relations.tsv";
pub const VERSION: &str = env!("Q2T_VERSION");

fn effective_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(device) = &common.device {
        cfg.device = device.clone();
    }
    cfg.check()?;
    Ok(cfg)
}

/// Creates `--out` and records the configuration and version in it.
fn prepare_out(common: &Common, cfg: &RunConfig) -> Result<PathBuf> {
    let out = common
        .out
        .clone()
        .ok_or_else(|| ConfigError("--out is required for this subcommand".into()))?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("config.toml"), &cfg.to_toml())?;
    write(&out.join("version.txt"), &format!("{VERSION}\n"))?;
    Ok(out)
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn read_dataset(dir: &Path, name: &str) -> Result<SampledDataset> {
    Ok(SampledDataset::read_jsonl(&dir.join(format!("{name}.jsonl")))?)
}

fn load_models(kge_dir: &Path, encoder_dir: &Path) -> Result<(KgeModel, EncoderParams, q2t::encoder::EncoderConfig)> {
    let (kge, hash) = KgeModel::load(kge_dir)?;
    let (params, enc) = EncoderParams::load(encoder_dir, &hash)?;
    Ok((kge, params, enc))
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli.common)?;
    let common = &cli.common;
    match cli.command {
        Command::Ingest {
            train,
            valid,
            test,
            entities,
            relations,
        } => {
            let load = |p: &Path| load_kg(p, &entities, &relations, SplitLabel::Train);
            let family = SplitFamily::from_parts(load(&train)?, &load(&valid)?, &load(&test)?)?;
            let out = prepare_out(common, &cfg)?;
            family.save(&out)?;
            write_name_map(&out.join(ENTITY_NAMES), &read_name_map(&entities)?)?;
            write_name_map(&out.join(RELATION_NAMES), &read_name_map(&relations)?)?;
            println!("{}", family_summary(&family));
        }
        Command::Synth {
            entities,
            relations,
            triples,
            valid_frac,
            test_frac,
        } => {
            for (name, f) in [("valid-frac", valid_frac), ("test-frac", test_frac)] {
                if !(0.0..1.0).contains(&f) {
                    return Err(ConfigError(format!("--{name} {f} outside [0, 1)")).into());
                }
            }
            let family = random_splits(entities, relations, triples, valid_frac, test_frac, cfg.seed);
            let out = prepare_out(common, &cfg)?;
            family.save(&out)?;
            let names = |prefix: &str, n: usize| (0..n).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>();
            write_name_map(&out.join(ENTITY_NAMES), &names("e", entities))?;
            write_name_map(&out.join(RELATION_NAMES), &names("r", relations))?;
            println!("{}", family_summary(&family));
        }
        Command::Sample { data } => {
            let family = SplitFamily::load(&data)?;
            let splits = generate_dataset(&family, &cfg.split_counts(), cfg.seed, &cfg.generate_config())?;
            let out = prepare_out(common, &cfg)?;
            let mut stats = String::new();
            for (name, ds) in [("train", &splits.train), ("valid", &splits.valid), ("test", &splits.test)] {
                ds.write_jsonl(&out.join(format!("{name}.jsonl")))?;
                let s = answer_stats(ds);
                let _ = writeln!(stats, "{name}: {} queries\nhard answers\n{}easy answers\n{}", ds.len(),
                    render_answer_stats(name, &s, true), render_answer_stats(name, &s, false));
            }
            write(&out.join("stats.txt"), &stats)?;
            print!("{stats}");
        }
        Command::Pretrain { data } => {
            let family = SplitFamily::load(&data)?;
            let pcfg = cfg.pretrain_config()?;
            let out = prepare_out(common, &cfg)?;
            let mut log = String::from("epoch,loss\n");
            let report_every = (pcfg.epochs / 10).max(1);
            let (model, _) = pretrain_with(&family.train, &pcfg, |epoch, loss| {
                let _ = writeln!(log, "{},{loss:.8}", epoch + 1);
                if (epoch + 1) % report_every == 0 {
                    eprintln!("epoch {:>5}  loss {loss:.5}", epoch + 1);
                }
            })?;
            let hash = model.save(&out)?;
            write(&out.join("pretrain_log.csv"), &log)?;

            let held_out = difference(&family.full, &family.train_valid);
            let mut lp = String::from("split,triples,mrr\n");
            for (name, filter, triples) in [
                ("train", GraphIndex::build(&family.train), family.train.triples().to_vec()),
                ("test", GraphIndex::build(&family.full), held_out),
            ] {
                let mrr = eval_link_prediction(&model, &filter, &triples);
                let _ = writeln!(lp, "{name},{},{mrr:.6}", triples.len());
            }
            write(&out.join("link_prediction.csv"), &lp)?;
            print!("{lp}");
            println!("kge hash {hash}");
        }
        Command::Train { queries, kge } => {
            let (model, hash) = KgeModel::load(&kge)?;
            let train = read_dataset(&queries, "train")?;
            let valid_path = queries.join("valid.jsonl");
            let valid = if valid_path.exists() {
                Some(SampledDataset::read_jsonl(&valid_path)?)
            } else {
                None
            };
            let tcfg = cfg.train_config()?;
            let out = prepare_out(common, &cfg)?;
            let mut log = String::from("step,loss\n");
            let report_every = (tcfg.steps / 20).max(1);
            let outcome = train_encoder_with(&train, valid.as_ref(), &model, &tcfg, |step, loss| {
                let _ = writeln!(log, "{},{loss:.8}", step + 1);
                if (step + 1) % report_every == 0 {
                    eprintln!("step {:>6}  loss {loss:.5}", step + 1);
                }
            })?;
            write(&out.join("train_log.csv"), &log)?;
            let mut vlog = String::from("step,score\n");
            for (step, score) in &outcome.log.validations {
                let _ = writeln!(vlog, "{step},{score:.6}");
            }
            write(&out.join("validation.csv"), &vlog)?;
            let kge_hash = if tcfg.freeze_kge {
                hash
            } else {
                let h = outcome.kge.save(&out.join("kge"))?;
                println!("updated link predictor written to {}", out.join("kge").display());
                h
            };
            let enc_hash = outcome.params.save(&out, &tcfg.encoder, &kge_hash)?;
            println!(
                "encoder {enc_hash} ({} parameters), best step {}, bound to kge {kge_hash}",
                outcome.params.num_parameters(),
                outcome.log.best_step
            );
        }
        Command::Eval {
            queries,
            split,
            kge,
            encoder,
        } => {
            if !["train", "valid", "test"].contains(&split.as_str()) {
                return Err(ConfigError(format!("--split {split:?} (expected train, valid or test)")).into());
            }
            let (model, params, enc) = load_models(&kge, &encoder)?;
            let ds = read_dataset(&queries, &split)?;
            let report = evaluate(&ds, &model, &params, &enc, cfg.eval_target()?)?;
            let out = prepare_out(common, &cfg)?;
            report.write_csv(&out.join("metrics.csv"))?;
            let table = report.to_table(&split);
            write(&out.join("table.txt"), &table)?;
            print!("{table}");
            if report.skipped > 0 {
                eprintln!("{} queries without targets skipped", report.skipped);
            }
        }
        Command::Answer {
            query,
            kge,
            encoder,
            data,
            k,
        } => {
            let q = parse_nested(&query)?;
            let (model, params, enc) = load_models(&kge, &encoder)?;
            let scored = score_query(&q, &model, &params, &enc)?;
            let (names, known) = match &data {
                Some(dir) => {
                    let names = read_name_map(&dir.join(ENTITY_NAMES))?;
                    let full = SplitFamily::load(dir)?.full;
                    if full.num_entities() != model.num_entities() {
                        return Err(q2t::Error::VocabMismatch(format!(
                            "dataset has {} entities, link predictor {}",
                            full.num_entities(),
                            model.num_entities()
                        ))
                        .into());
                    }
                    (Some(names), Some(answer_dnf(&q, &GraphIndex::build(&full))))
                }
                None => (None, None),
            };
            let mut order: Vec<usize> = (0..scored.scores.len()).collect();
            order.sort_by(|&a, &b| scored.scores[b].total_cmp(&scored.scores[a]).then(a.cmp(&b)));
            let mut body = String::from("rank\tentity\tname\tscore\tanswer\n");
            for (rank, &e) in order.iter().take(k).enumerate() {
                let name = names.as_ref().map_or_else(|| e.to_string(), |n| n[e].clone());
                let answer = known.as_ref().map_or("-", |a| if a.contains(e) { "yes" } else { "no" });
                let _ = writeln!(body, "{}\t{e}\t{name}\t{:.6}\t{answer}", rank + 1, scored.scores[e]);
            }
            if common.out.is_some() {
                let out = prepare_out(common, &cfg)?;
                write(&out.join("answers.tsv"), &body)?;
            }
            print!("{body}");
        }
        Command::Sweep {
            queries,
            kge,
            axis,
            values,
        } => {
            let axis = match axis {
                Some(a) => a.parse().map_err(|e: q2t::Error| ConfigError(e.to_string()))?,
                None => cfg.sweep_axis()?,
            };
            let values = values.unwrap_or_else(|| cfg.sweep.values.clone());
            let (model, _) = KgeModel::load(&kge)?;
            let train = read_dataset(&queries, "train")?;
            let valid_path = queries.join("valid.jsonl");
            let valid = if valid_path.exists() {
                Some(SampledDataset::read_jsonl(&valid_path)?)
            } else {
                None
            };
            let test = read_dataset(&queries, "test")?;
            let out = prepare_out(common, &cfg)?;
            let rows = sweep(axis, &values, &cfg.train_config()?, &train, valid.as_ref(), &test, &model)?;
            let csv = sweep_csv(&rows);
            write(&out.join("sweep.csv"), &csv)?;
            let mut errors = String::new();
            for r in rows.iter().filter(|r| r.error.is_some()) {
                let _ = writeln!(errors, "{}={}: {}", axis, r.value, r.error.as_deref().unwrap_or_default());
            }
            if !errors.is_empty() {
                write(&out.join("errors.txt"), &errors)?;
                eprint!("{errors}");
            }
            println!("# axis {axis}");
            print!("{csv}");
        }
        Command::Report { inputs } => {
            let out = prepare_out(common, &cfg)?;
            let text = report::run(&inputs, &out)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn difference(a: &KnowledgeGraph, b: &KnowledgeGraph) -> Vec<q2t::Triple> {
    a.triples()
        .iter()
        .copied()
        .filter(|t| !b.contains(t.head, t.relation, t.tail))
        .collect()
}

fn family_summary(f: &SplitFamily) -> String {
    format!(
        "entities {}  relations {}  train {}  train+valid {}  full {}",
        f.full.num_entities(),
        f.full.num_relations(),
        f.train.len(),
        f.train_valid.len(),
        f.full.len()
    )
}
