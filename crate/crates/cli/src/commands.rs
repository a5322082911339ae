use std::path::{Path, PathBuf};

use gilt::episode_sampler::Episode;
use gilt::eval_harness::{self, sweep_csv, EvalReport, Metric, Protocol};
use gilt::graph_store::{
    assign_graph_split, assign_split, load_dataset, load_registry, make_synthetic, write_dataset, Corpus, Dataset,
    RegistryEntry, SplitFractions, SyntheticSpec, TaskLevel,
};
use gilt::model::{prepare, tokenize_episode, Ablation, Model};
use gilt::proto_head::HeadMode;
use gilt::struct_encoder::EncoderVariant;
use gilt::trainer::{prepare_corpus, telemetry_csv, Checkpoint, Precision, TrainConfig, Trainer};

use crate::config::{apply, read_kv, to_kv};
use crate::manifest::Manifest;
use crate::{CliError, EvalArgs, PrepArgs, PretrainArgs, SbmArgs, TokenizeArgs};

fn write(path: &Path, text: &str, m: &mut Manifest) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))?;
    m.outputs.push(path.to_path_buf());
    Ok(())
}

fn level(s: &str) -> Result<TaskLevel, CliError> {
    s.parse().map_err(|_| CliError::usage(format!("--level must be node, link or graph, not `{s}`")))
}

fn fractions(s: &str) -> Result<Option<SplitFractions>, CliError> {
    if s == "none" {
        return Ok(None);
    }
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::usage(format!("--split `{s}` is not three comma-separated fractions")))?;
    match parts[..] {
        [a, b, c] => Ok(Some(SplitFractions::new(a, b, c)?)),
        _ => Err(CliError::usage(format!("--split `{s}` needs exactly three fractions"))),
    }
}

fn sbm_graphs(n: usize, a: &SbmArgs, seed: u64) -> Result<Vec<Dataset>, CliError> {
    if a.nodes_per_class < 2 || a.classes < 2 {
        return Err(CliError::usage("synthetic graphs need at least 2 classes of 2 nodes"));
    }
    (0..n as u64)
        .map(|i| {
            let spec = SyntheticSpec {
                n_classes: a.classes,
                nodes_per_class: a.nodes_per_class,
                intra_p: a.intra_degree / (a.nodes_per_class - 1) as f64,
                inter_p: a.inter_degree / ((a.classes - 1) * a.nodes_per_class) as f64,
                feature_dim: a.feature_dim,
                class_mean_separation: a.separation,
                noise_sd: a.noise,
                seed: seed + i,
            };
            Ok(Dataset::single(format!("{}{i}", a.prefix), make_synthetic(&spec)?)?)
        })
        .collect()
}

fn split_dataset(ds: Dataset, f: SplitFractions, seed: u64) -> Result<Dataset, CliError> {
    let mut ds = ds;
    for &l in &ds.levels().to_vec() {
        ds = match l {
            TaskLevel::Graph => assign_graph_split(&ds, f, seed)?,
            _ if ds.graphs().len() == 1 => ds.map_graph(|g| assign_split(g, f, l, seed))?,
            _ => ds,
        };
    }
    Ok(ds)
}

pub fn prep(a: &PrepArgs, m: &mut Manifest) -> Result<(), CliError> {
    m.seed = Some(a.seed);
    m.resolved_config = serde_json::json!({ "split": a.split, "registry": a.registry, "synthetic": a.synthetic });
    let split = fractions(&a.split)?;
    let datasets = match (&a.registry, a.synthetic) {
        (Some(r), _) => load_registry(r)?.iter().map(load_dataset).collect::<gilt::Result<Vec<_>>>()?,
        (None, Some(n)) => sbm_graphs(n, &a.sbm, a.seed)?,
        (None, None) => return Err(CliError::usage("prep needs --registry or --synthetic")),
    };
    let mut registry = String::new();
    for ds in datasets {
        let ds = match split {
            Some(f) => split_dataset(ds, f, a.seed)?,
            None => ds,
        };
        let file = format!("{}.json", ds.name);
        let path = a.out.join(&file);
        std::fs::create_dir_all(&a.out).map_err(|e| CliError::data(format!("{}: {e}", a.out.display())))?;
        write_dataset(&ds, &path)?;
        m.outputs.push(path);
        let levels: Vec<&str> = ds.levels().iter().map(|l| l.name()).collect();
        registry.push_str(&format!("{} = {} {}\n", ds.name, file, levels.join(",")));
    }
    write(&a.out.join("registry.txt"), &registry, m)
}

fn load_corpus(registry: &Path) -> Result<Corpus, CliError> {
    let entries = load_registry(registry)?;
    let datasets = entries.iter().map(load_dataset).collect::<gilt::Result<Vec<_>>>()?;
    Ok(Corpus::new(datasets)?)
}

fn resolve_config(a: &PretrainArgs) -> Result<(TrainConfig, Option<PathBuf>), CliError> {
    let file = a.config.as_deref().map(read_kv).transpose()?.unwrap_or_default();
    let preset = a.preset.as_deref().or(file.preset.as_deref()).unwrap_or("desk");
    let base = TrainConfig::preset(preset)?;
    let mut entries = file.entries.clone();
    for s in &a.set {
        let (k, v) = s.split_once('=').ok_or_else(|| CliError::usage(format!("--set `{s}` is not KEY=VALUE")))?;
        entries.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(s) = a.seed {
        entries.push(("seed".into(), s.to_string()));
    }
    if let Some(e) = a.epochs {
        entries.push(("epochs".into(), e.to_string()));
    }
    // a relative corpus in a config file is relative to that file
    let from_file = file.corpus.map(|c| match a.config.as_deref().and_then(Path::parent) {
        Some(dir) if c.is_relative() => dir.join(c),
        _ => c,
    });
    Ok((apply(&base, &entries)?, a.corpus.clone().or(from_file)))
}

pub fn pretrain(a: &PretrainArgs, m: &mut Manifest) -> Result<(), CliError> {
    let (mut trainer, corpus_path) = match &a.resume {
        Some(ck) => {
            if a.config.is_some() || a.preset.is_some() || !a.set.is_empty() || a.seed.is_some() || a.epochs.is_some() {
                return Err(CliError::usage("--resume takes its configuration from the checkpoint; drop the config flags"));
            }
            let ck = Checkpoint::load(ck)?;
            m.checkpoint_ids.push(ck.id());
            (Trainer::from_checkpoint(ck)?, a.corpus.clone())
        }
        None => {
            let (cfg, corpus) = resolve_config(a)?;
            (Trainer::new(cfg)?, corpus)
        }
    };
    let cfg = trainer.config.clone();
    m.seed = Some(cfg.seed);
    m.resolved_config = serde_json::to_value(&cfg).expect("config serializes");
    let corpus_path = corpus_path.ok_or_else(|| {
        CliError::usage("no pre-training corpus: set `corpus` in the config file or pass --corpus")
    })?;
    let corpus = load_corpus(&corpus_path)?;
    let abs_corpus = std::fs::canonicalize(&corpus_path).unwrap_or(corpus_path.clone());
    write(&a.out.join("config.kv"), &to_kv(&cfg, Some(&abs_corpus)), m)?;

    let prepared = prepare_corpus(&corpus, &cfg.model.align)?;
    let precision = if a.f32 { Precision::F32 } else { Precision::F64 };
    let tele_path = a.out.join("telemetry.csv");
    let every = a.checkpoint_every.filter(|&n| n > 0);
    let mut saved = Vec::new();
    trainer.train(&prepared, |t, row| {
        eprintln!("epoch {:>3}  loss {:.5}  lr {:.3e}  shots {}", row.epoch, row.l_total, row.lr, row.shots);
        std::fs::write(&tele_path, telemetry_csv(&t.telemetry)).map_err(|e| gilt::GiltError::Io {
            path: tele_path.display().to_string(),
            source: e,
        })?;
        if every.is_some_and(|n| t.epoch % n == 0) && !t.is_done() {
            let p = a.out.join(format!("checkpoint-epoch{:03}.gilt", t.epoch));
            let ck = t.checkpoint();
            ck.save(&p, precision)?;
            saved.push((p, ck.id()));
        }
        Ok(())
    })?;
    for (p, id) in saved {
        m.outputs.push(p);
        m.checkpoint_ids.push(id);
    }
    write(&tele_path, &telemetry_csv(&trainer.telemetry), m)?;
    let final_path = a.out.join("checkpoint.gilt");
    let ck = trainer.checkpoint();
    ck.save(&final_path, precision)?;
    m.outputs.push(final_path);
    m.checkpoint_ids.push(ck.id());
    println!("{}", ck.id());
    Ok(())
}

fn load_target(d: &crate::DatasetArgs) -> Result<Dataset, CliError> {
    let entry = match &d.registry {
        Some(r) => {
            let entries = load_registry(r)?;
            let names: Vec<&str> = entries.iter().map(|e| e.name.as_str()).collect();
            match entries.iter().find(|e| e.name == d.dataset) {
                Some(e) => e.clone(),
                None => {
                    return Err(CliError::usage(format!(
                        "dataset `{}` is not in {} (has: {})",
                        d.dataset,
                        r.display(),
                        names.join(", ")
                    )))
                }
            }
        }
        None => {
            let path = PathBuf::from(&d.dataset);
            let name = path.file_stem().map_or(d.dataset.clone(), |s| s.to_string_lossy().into_owned());
            RegistryEntry { name, path, levels: None }
        }
    };
    Ok(load_dataset(&entry)?)
}

pub fn parse_ablation(items: &[String], model: &Model) -> Result<Ablation, CliError> {
    let mut ab = Ablation::default();
    let count = |s: &str, flag: &str| {
        s.parse::<usize>().map_err(|_| CliError::usage(format!("--ablate {flag}=`{s}` is not a layer count")))
    };
    for item in items {
        match item.split_once('=') {
            Some(("encoder-layers", n)) => ab.encoder_layers = Some(count(n, "encoder-layers")?),
            Some(("transformer-layers", n)) => ab.transformer_layers = Some(count(n, "transformer-layers")?),
            None if item == "no-encoder" => ab.encoder_layers = Some(0),
            None if item == "no-transformer" => ab.transformer_layers = Some(0),
            None if item == "full-token" => ab.head = Some(HeadMode::FullToken),
            // these change the parameters, so they have to be trained in
            None if item == "unshared-attention" => {
                if !model.config.transformer.unshared_attention {
                    return Err(CliError::usage(
                        "checkpoint uses shared attention; pre-train with model.transformer.unshared_attention = true",
                    ));
                }
            }
            None if item == "nonlinear" => {
                if model.config.encoder.variant != EncoderVariant::Nonlinear {
                    return Err(CliError::usage(
                        "checkpoint has a linear encoder; pre-train with model.encoder.variant = nonlinear",
                    ));
                }
            }
            _ => return Err(CliError::usage(format!("unknown --ablate `{item}`"))),
        }
    }
    ab.validate(&model.config)?;
    Ok(ab)
}

pub fn eval(a: &EvalArgs, m: &mut Manifest) -> Result<(), CliError> {
    let lvl = level(&a.level)?;
    let metric: Metric = match &a.metric {
        Some(s) => s.parse().map_err(|_| CliError::usage(format!("unknown metric `{s}`")))?,
        None if lvl == TaskLevel::Link => Metric::RocAuc,
        None => Metric::Accuracy,
    };
    let ck = Checkpoint::load(&a.checkpoint)?;
    let id = ck.id();
    m.checkpoint_ids.push(id.clone());
    let mut p = Protocol::new(lvl, a.n_way, a.k_shot, metric);
    p.seeds = a.seeds.clone().unwrap_or_else(|| (0..a.runs).collect());
    p.neg_ratio = a.neg_ratio;
    p.ablation = parse_ablation(&a.ablate, &ck.model)?;
    m.seed = p.seeds.first().copied();
    m.resolved_config = serde_json::json!({ "protocol": &p, "model": &ck.model.config });
    p.validate(&ck.model)?;

    let ds = load_target(&a.data)?;
    let data = prepare(ds, &ck.model.config.align)?;
    let report: EvalReport = eval_harness::evaluate(&ck.model, &id, &data, &p)?;
    write(&a.out.join("report.json"), &report.to_json(), m)?;
    write(&a.out.join("report.csv"), &format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row()), m)?;
    match report.sd {
        Some(sd) => println!("{} {} {}-way {}-shot {}: {:.4} ± {:.4}", report.dataset, lvl.name(), p.n_way, p.k_shot, report.metric, report.mean, sd),
        None => println!("{} {} {}-way {}-shot {}: {:.4}", report.dataset, lvl.name(), p.n_way, p.k_shot, report.metric, report.mean),
    }
    if let Some(ks) = &a.sweep_k {
        let points = eval_harness::shot_sweep(&ck.model, &data, &p, ks)?;
        write(&a.out.join("sweep.csv"), &sweep_csv(&points), m)?;
    }
    Ok(())
}

pub fn tokenize(a: &TokenizeArgs, m: &mut Manifest) -> Result<(), CliError> {
    let model = match &a.checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            m.checkpoint_ids.push(ck.id());
            ck.model
        }
        None => {
            m.seed = Some(a.seed);
            Model::init(TrainConfig::preset(&a.preset)?.model, a.seed)?
        }
    };
    m.resolved_config = serde_json::to_value(&model.config).expect("config serializes");
    let data = prepare(load_target(&a.data)?, &model.config.align)?;
    let episode = match &a.episode {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
            Episode::from_json(&text)?
        }
        None => {
            let mut p = Protocol::new(level(&a.level)?, a.n_way, a.k_shot, Metric::Accuracy);
            p.neg_ratio = a.neg_ratio;
            eval_harness::sample_eval_episode(&data, &p, a.k_shot, a.sample_seed)?
        }
    };
    let tokens = tokenize_episode(&model, &data, &episode)?;
    let path = a.out.join("tokens.bin");
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::data(format!("{}: {e}", a.out.display())))?;
    tokens.save(&path)?;
    m.outputs.push(path);
    write(&a.out.join("episode.json"), &episode.to_json(), m)
}
