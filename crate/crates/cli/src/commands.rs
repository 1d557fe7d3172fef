//! Stage implementations.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use dmc_core::baselines::{
    eval_bilinear, eval_c2i, eval_i2c, fit_linear_map, make_projections, project_instances,
    regression_pairs, train_bilinear, BilinearConfig, BilinearModel, CorpusFeatures, Direction,
    LinearMap,
};
use dmc_core::corpus::{
    generate_synthetic_corpus, load_paired_corpus_with, read_captions, tokenize,
    write_paired_corpus, PairedCorpus, Vocabulary,
};
use dmc_core::dataset::{
    generate_mcic, read_dataset, split_dataset, write_dataset, Split, SplitSpec,
};
use dmc_core::metrics::{write_report, MetricRow};
use dmc_core::pvembed::{mgs_rank, optimize_pv, train_pv, PVGrid, PVHyperParams, PVModel};
use dmc_core::scoring::{optimize_lambda, ScoreParams};
use dmc_evalserve::report::round1;
use dmc_evalserve::{aggregate, read_log, ServeConfig};
use dmc_neural::checkpoint::{
    load_ffnn, load_vec2seq, save_ffnn, save_vec2seq, FFNN_MAGIC, VEC2SEQ_MAGIC,
};
use dmc_neural::data::references_for;
use dmc_neural::train::{accuracy, caption_metrics, train};
use dmc_neural::{FfnnConfig, FfnnParams, ItemSet, TrainConfig, Vec2seqConfig, Vec2seqParams};

use crate::manifest::{RunManifest, TOOL_VERSION};
use crate::{BaselineKind, Cli, Command, CorpusArgs, TrainArgs};

fn load_corpus(c: &CorpusArgs) -> Result<PairedCorpus> {
    load_paired_corpus_with(&c.captions, &c.embeddings, c.min_count).with_context(|| {
        format!(
            "loading corpus {} + {}",
            c.captions.display(),
            c.embeddings.display()
        )
    })
}

fn corpus_inputs(c: &CorpusArgs) -> Vec<PathBuf> {
    vec![c.captions.clone(), c.embeddings.clone()]
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| anyhow!("bad {what} value '{x}'"))
        })
        .collect()
}

fn parse_grid(s: &str) -> Result<PVGrid> {
    let (d, e) = s
        .split_once(':')
        .ok_or_else(|| anyhow!("--grid must look like DIMS:EPOCHS, e.g. 256,512:5,10"))?;
    Ok(PVGrid {
        dims: parse_list(d, "dim")?,
        epochs_list: parse_list(e, "epochs")?,
    })
}

fn train_config(t: &TrainArgs, seed: u64, lambda_gen: f64) -> TrainConfig {
    TrainConfig {
        lr: t.lr,
        clip_norm: t.clip_norm,
        batch_size: t.batch_size,
        max_steps: t.max_steps,
        seed,
        lambda_gen,
        eval_every: t.eval_every,
    }
}

fn magic(path: &Path) -> Result<[u8; 4]> {
    let mut m = [0u8; 4];
    File::open(path)
        .and_then(|mut f| f.read_exact(&mut m))
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(m)
}

fn item_sets(
    instances: &[dmc_core::dataset::Instance],
    corpus: &PairedCorpus,
) -> Result<(ItemSet<f32>, ItemSet<f32>)> {
    let train = ItemSet::from_split(instances, Split::Train, corpus)?;
    let dev = ItemSet::from_split(instances, Split::Dev, corpus)?;
    if train.is_empty() || dev.is_empty() {
        bail!("dataset needs train and dev instances; run `dmc split` first");
    }
    Ok((train, dev))
}

/// Runs the stage and writes its manifests.
pub fn execute(cli: &Cli) -> Result<()> {
    let seed = cli.seed;
    let (inputs, outputs) = match &cli.command {
        Command::Synth {
            n_images,
            captions_per_image,
            vocab_size,
            d_img,
            captions,
            embeddings,
        } => {
            let corpus = generate_synthetic_corpus(
                seed,
                *n_images,
                *captions_per_image,
                *vocab_size,
                *d_img,
            )?;
            write_paired_corpus(&corpus, captions, embeddings)?;
            eprintln!(
                "synth: {} images, {} captions, vocabulary {}",
                corpus.images().len(),
                corpus.captions().len(),
                corpus.vocab().len()
            );
            (vec![], vec![captions.clone(), embeddings.clone()])
        }
        Command::Tokenize {
            captions,
            min_count,
            out,
        } => {
            let raw = read_captions(captions)?;
            let tokens: Vec<Vec<String>> = raw.iter().map(|c| tokenize(&c.text)).collect();
            let vocab = Vocabulary::build(&tokens, *min_count);
            vocab.write(out)?;
            let total: usize = tokens.iter().map(Vec::len).sum();
            let unk: usize = tokens
                .iter()
                .flat_map(|t| vocab.encode(t))
                .filter(|&id| id == dmc_core::corpus::UNK_ID)
                .count();
            eprintln!(
                "tokenize: {} captions, {} tokens, vocabulary {}, {} unknown",
                raw.len(),
                total,
                vocab.len(),
                unk
            );
            (vec![captions.clone()], vec![out.clone()])
        }
        Command::TrainPv {
            corpus: c,
            dim,
            epochs,
            lr,
            negative,
            grid,
            grid_table,
            out,
        } => {
            let corpus = load_corpus(c)?;
            let hp = PVHyperParams {
                dim: *dim,
                epochs: *epochs,
                initial_lr: *lr,
                seed,
                negative: *negative,
            };
            let mut outputs = vec![out.clone()];
            let model = match grid {
                Some(g) => {
                    let res = optimize_pv(&corpus, &parse_grid(g)?, &hp)?;
                    let table = grid_table
                        .clone()
                        .unwrap_or_else(|| with_suffix(out, ".grid.csv"));
                    res.grid_table().write(&table)?;
                    outputs.push(table);
                    eprintln!(
                        "train-pv: best dim {} epochs {}",
                        res.best.dim, res.best.epochs
                    );
                    res.model
                }
                None => train_pv(&corpus, &hp)?,
            };
            model.write(out)?;
            eprintln!("train-pv: mgs-rank {:.4}", mgs_rank(&model, &corpus)?);
            (corpus_inputs(c), outputs)
        }
        Command::Gen {
            corpus: c,
            pv,
            lambda,
            threshold_l,
            top_n,
            nr_decoys,
            out,
        } => {
            let corpus = load_corpus(c)?;
            let model = PVModel::read(pv)?;
            let params = ScoreParams {
                lambda: *lambda,
                threshold: *threshold_l,
                top_n: *top_n,
                nr_decoys: *nr_decoys,
            };
            let instances = generate_mcic(&corpus, &model, &params)?;
            write_dataset(out, &instances)?;
            eprintln!(
                "gen: {} instances from {} captions",
                instances.len(),
                corpus.captions().len()
            );
            let mut inputs = corpus_inputs(c);
            inputs.push(pv.clone());
            (inputs, vec![out.clone()])
        }
        Command::Split {
            dataset,
            dev_images,
            test_images,
            out,
        } => {
            let instances = split_dataset(
                read_dataset(dataset)?,
                &SplitSpec {
                    dev_images: *dev_images,
                    test_images: *test_images,
                    seed,
                },
            )?;
            write_dataset(out, &instances)?;
            for s in [Split::Train, Split::Dev, Split::Test] {
                let n = instances.iter().filter(|i| i.split == s).count();
                eprintln!("split: {s} {n}");
            }
            (vec![dataset.clone()], vec![out.clone()])
        }
        Command::TrainBaseline {
            kind,
            dataset,
            corpus: c,
            pv,
            projection_dim,
            ridge,
            lr,
            epochs,
            out,
            log,
        } => {
            let corpus = load_corpus(c)?;
            let model = PVModel::read(pv)?;
            let instances = read_dataset(dataset)?;
            let of = |s| {
                instances
                    .iter()
                    .filter(|i| i.split == s)
                    .cloned()
                    .collect::<Vec<_>>()
            };
            let (train, dev) = (of(Split::Train), of(Split::Dev));
            if train.is_empty() || dev.is_empty() {
                bail!("dataset needs train and dev instances; run `dmc split` first");
            }
            let features = CorpusFeatures {
                corpus: &corpus,
                pv: &model,
            };
            let proj = make_projections(seed, corpus.image_dim(), model.dim(), *projection_dim);
            let ptrain = project_instances(&train, &proj, &features)?;
            let mut outputs = vec![out.clone()];
            let dev_acc = match kind {
                BaselineKind::I2c | BaselineKind::C2i => {
                    let dir = if *kind == BaselineKind::I2c {
                        Direction::I2C
                    } else {
                        Direction::C2I
                    };
                    let (x, y) = regression_pairs(&ptrain, dir);
                    let map = fit_linear_map(&x, &y, *ridge, dir)?;
                    map.write(out, seed)?;
                    match dir {
                        Direction::I2C => eval_i2c(&map, &proj, &features, &dev)?,
                        Direction::C2I => eval_c2i(&map, &proj, &features, &dev)?,
                    }
                }
                BaselineKind::Bilinear => {
                    let pdev = project_instances(&dev, &proj, &features)?;
                    let cfg = BilinearConfig {
                        lr: *lr,
                        epochs: *epochs,
                        seed,
                    };
                    let (m, epochs_log) = train_bilinear(&ptrain, &pdev, &cfg)?;
                    m.write(out, seed)?;
                    if let Some(path) = log {
                        let mut csv = String::from("epoch,train_loss,dev_accuracy\n");
                        for e in &epochs_log {
                            csv.push_str(&format!(
                                "{},{},{}\n",
                                e.epoch, e.train_loss, e.dev_accuracy
                            ));
                        }
                        std::fs::write(path, csv)?;
                        outputs.push(path.clone());
                    }
                    eval_bilinear(&m, &proj, &features, &dev)?
                }
            };
            eprintln!("train-baseline: dev accuracy {dev_acc:.4}");
            let mut inputs = corpus_inputs(c);
            inputs.extend([dataset.clone(), pv.clone()]);
            (inputs, outputs)
        }
        Command::TrainFfnn {
            dataset,
            corpus: c,
            d_w,
            h1,
            h2,
            train: t,
            out,
            log,
        } => {
            let corpus = load_corpus(c)?;
            let instances = read_dataset(dataset)?;
            let (train_set, dev_set) = item_sets(&instances, &corpus)?;
            let cfg = FfnnConfig {
                vocab: corpus.vocab().len(),
                d_img: corpus.image_dim(),
                d_w: *d_w,
                h1: *h1,
                h2: *h2,
            };
            let init = FfnnParams::<f32>::init(&cfg, seed)?;
            let res = train(
                init,
                &train_set,
                &dev_set,
                &train_config(t, seed, 0.0),
                None,
            )?;
            save_ffnn(out, &res.best)?;
            let log = log.clone().unwrap_or_else(|| with_suffix(out, ".log.csv"));
            res.log.write(&log)?;
            eprintln!(
                "train-ffnn: best dev accuracy {:.4} at step {}",
                res.best_dev_accuracy, res.best_step
            );
            let mut inputs = corpus_inputs(c);
            inputs.push(dataset.clone());
            (inputs, vec![out.clone(), log])
        }
        Command::TrainVec2seq {
            dataset,
            corpus: c,
            lambda_gen,
            dim,
            h1,
            h2,
            caption_metrics: with_captions,
            train: t,
            out,
            log,
        } => {
            let corpus = load_corpus(c)?;
            let instances = read_dataset(dataset)?;
            let (train_set, dev_set) = item_sets(&instances, &corpus)?;
            let cfg = Vec2seqConfig {
                vocab: corpus.vocab().len(),
                d_img: corpus.image_dim(),
                dim: *dim,
                h1: *h1,
                h2: *h2,
            };
            let init = Vec2seqParams::<f32>::init(&cfg, seed)?;
            let refs = references_for(&corpus, &dev_set.image_ids)?;
            let eval = |m: &Vec2seqParams<f32>| caption_metrics(m, &dev_set, corpus.vocab(), &refs);
            let res = train(
                init,
                &train_set,
                &dev_set,
                &train_config(t, seed, *lambda_gen),
                with_captions.then_some(&eval as _),
            )?;
            save_vec2seq(out, &res.best)?;
            let log = log.clone().unwrap_or_else(|| with_suffix(out, ".log.csv"));
            res.log.write(&log)?;
            eprintln!(
                "train-vec2seq: best dev accuracy {:.4} at step {}",
                res.best_dev_accuracy, res.best_step
            );
            let mut inputs = corpus_inputs(c);
            inputs.push(dataset.clone());
            (inputs, vec![out.clone(), log])
        }
        Command::Eval {
            dataset,
            corpus: c,
            model,
            pv,
            split,
            metrics,
            out,
        } => {
            let split: Split = split.parse()?;
            let wanted: Vec<String> = metrics.split(',').map(|m| m.trim().to_owned()).collect();
            for m in &wanted {
                if !["accuracy", "rouge_l", "cider"].contains(&m.as_str()) {
                    bail!("unknown metric '{m}' (expected accuracy, rouge_l or cider)");
                }
            }
            let corpus = load_corpus(c)?;
            let all = read_dataset(dataset)?;
            let instances: Vec<_> = all.into_iter().filter(|i| i.split == split).collect();
            if instances.is_empty() {
                bail!("no {split} instances in {}", dataset.display());
            }
            let values = evaluate(model, pv.as_deref(), &corpus, &instances, &wanted)?;
            let rows: Vec<MetricRow> = wanted
                .iter()
                .zip(values)
                .map(|(m, value)| MetricRow {
                    metric: m.clone(),
                    split: split.to_string(),
                    value,
                })
                .collect();
            for r in &rows {
                eprintln!("eval: {} {} {:.4}", r.metric, r.split, r.value);
            }
            write_report(out, &rows)?;
            let mut inputs = corpus_inputs(c);
            inputs.extend([dataset.clone(), model.clone()]);
            inputs.extend(pv.clone());
            (inputs, vec![out.clone()])
        }
        Command::GridLambda {
            corpus: c,
            pv,
            lambdas,
            threshold_l,
            top_n,
            out,
        } => {
            let corpus = load_corpus(c)?;
            let model = PVModel::read(pv)?;
            let grid: Vec<f64> = parse_list(lambdas, "lambda")?;
            let res = optimize_lambda(&model, &corpus, &grid, *threshold_l, *top_n)?;
            res.grid_table().write(out)?;
            eprintln!("grid-lambda: best lambda {}", res.lambda);
            let mut inputs = corpus_inputs(c);
            inputs.push(pv.clone());
            (inputs, vec![out.clone()])
        }
        Command::Serve {
            bind,
            dataset,
            images,
            log,
            pool_split,
            idle_timeout_secs,
        } => {
            let cfg = ServeConfig::from_lookup(|k| {
                let flag = match k {
                    dmc_evalserve::ENV_BIND => bind.clone(),
                    dmc_evalserve::ENV_DATASET => dataset.as_ref().map(|p| p.display().to_string()),
                    dmc_evalserve::ENV_IMAGES => images.as_ref().map(|p| p.display().to_string()),
                    dmc_evalserve::ENV_LOG => log.as_ref().map(|p| p.display().to_string()),
                    dmc_evalserve::ENV_POOL_SPLIT => pool_split.clone(),
                    dmc_evalserve::ENV_IDLE_TIMEOUT_SECS => {
                        idle_timeout_secs.map(|s| s.to_string())
                    }
                    _ => None,
                };
                flag.or_else(|| std::env::var(k).ok())
            })?;
            write_manifest(
                cli,
                vec![cfg.dataset.clone(), cfg.images.clone()],
                vec![cfg.log.clone()],
            )?;
            let _ = tracing_subscriber::fmt()
                .with_env_filter(
                    tracing_subscriber::EnvFilter::try_from_default_env()
                        .unwrap_or_else(|_| "info".into()),
                )
                .with_writer(std::io::stderr)
                .try_init();
            tokio::runtime::Runtime::new()?.block_on(dmc_evalserve::serve(cfg))?;
            return Ok(());
        }
        Command::Report { log, out } => {
            let rep = aggregate(&read_log(log)?);
            rep.check_invariants().map_err(|e| anyhow!(e))?;
            println!("instances with 3 responses: {}", rep.total_instances);
            for (name, b) in [
                ("3 of 3 correct", rep.all_correct),
                (">= 2 of 3 correct", rep.at_least_two),
                (">= 1 of 3 correct", rep.at_least_one),
                ("0 of 3 correct", rep.none_correct),
            ] {
                println!("{name}: {} ({:.1}%)", b.count, round1(b.percent));
            }
            println!(
                "responses: {} of {} correct ({:.1}%)",
                rep.correct_responses,
                rep.total_responses,
                round1(rep.response_accuracy)
            );
            if rep.incomplete_instances > 0 {
                println!(
                    "incomplete: {} instances, {} responses",
                    rep.incomplete_instances, rep.incomplete_responses
                );
            }
            let mut outputs = Vec::new();
            if let Some(path) = out {
                let mut text = serde_json::to_string_pretty(&rep)?;
                text.push('\n');
                std::fs::write(path, text)?;
                outputs.push(path.clone());
            }
            (vec![log.clone()], outputs)
        }
    };
    write_manifest(cli, inputs, outputs)
}

fn write_manifest(cli: &Cli, inputs: Vec<PathBuf>, outputs: Vec<PathBuf>) -> Result<()> {
    RunManifest {
        subcommand: cli.command.name().to_owned(),
        tool_version: TOOL_VERSION.to_owned(),
        seed: cli.seed,
        params: serde_json::to_value(&cli.command)?,
        inputs,
        outputs,
    }
    .write_all()
}

fn evaluate(
    model_path: &Path,
    pv: Option<&Path>,
    corpus: &PairedCorpus,
    instances: &[dmc_core::dataset::Instance],
    wanted: &[String],
) -> Result<Vec<f64>> {
    let m = magic(model_path)?;
    let only_accuracy = |kind: &str| {
        if wanted.iter().any(|w| w != "accuracy") {
            bail!("{kind} models only support the accuracy metric");
        }
        Ok(())
    };
    let baseline_features = |pv: Option<&Path>| -> Result<PVModel> {
        let p = pv.ok_or_else(|| anyhow!("--pv is required for baseline models"))?;
        Ok(PVModel::read(p)?)
    };
    if &m == FFNN_MAGIC {
        only_accuracy("FFNN")?;
        let params = load_ffnn(model_path)?;
        let set = ItemSet::from_instances(instances, corpus)?;
        return Ok(vec![accuracy(&params, &set)?]);
    }
    if &m == VEC2SEQ_MAGIC {
        let params = load_vec2seq(model_path)?;
        let set = ItemSet::from_instances(instances, corpus)?;
        let refs = references_for(corpus, &set.image_ids)?;
        let needs_captions = wanted.iter().any(|w| w != "accuracy");
        let (rouge, cider) = if needs_captions {
            caption_metrics(&params, &set, corpus.vocab(), &refs)?
        } else {
            (0.0, 0.0)
        };
        return wanted
            .iter()
            .map(|w| match w.as_str() {
                "accuracy" => Ok(accuracy(&params, &set)?),
                "rouge_l" => Ok(rouge),
                _ => Ok(cider),
            })
            .collect();
    }
    if &m == b"LMAP" {
        only_accuracy("linear")?;
        let pv = baseline_features(pv)?;
        let (map, seed) = LinearMap::read(model_path)?;
        let features = CorpusFeatures { corpus, pv: &pv };
        let proj = make_projections(seed, corpus.image_dim(), pv.dim(), map.rows);
        let acc = match map.direction {
            Direction::I2C => eval_i2c(&map, &proj, &features, instances)?,
            Direction::C2I => eval_c2i(&map, &proj, &features, instances)?,
        };
        return Ok(vec![acc]);
    }
    if &m == b"BLIN" {
        only_accuracy("bilinear")?;
        let pv = baseline_features(pv)?;
        let (bl, seed) = BilinearModel::read(model_path)?;
        let features = CorpusFeatures { corpus, pv: &pv };
        let proj = make_projections(seed, corpus.image_dim(), pv.dim(), bl.dim_image);
        return Ok(vec![eval_bilinear(&bl, &proj, &features, instances)?]);
    }
    bail!("{}: unrecognized model file", model_path.display())
}
