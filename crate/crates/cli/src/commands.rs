use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use snclr::eval_probe::{knn_probe, linear_probe, LinearProbeConfig, ProbeReport};
use snclr::gradcheck::{self, GradcheckSizes};
use snclr::io::{
    append_jsonl, load_checkpoint, read_dataset, read_metrics, save_checkpoint, to_jsonl, write_atomic,
    write_dataset, Checkpoint, Dataset, RunConfig,
};
use snclr::model::{encode, encode_project, ModelState};
use snclr::neighbor_store::NeighborStore;
use snclr::numerics::{Fault, Mode, Tensor};
use snclr::pipeline::{StepRecord, Trainer};
use snclr::positiveness::positiveness;
use snclr::synth::{generate, SynthConfig};
use snclr::{Error, Result};

use crate::{GenSynthArgs, GradcheckArgs, NeighborSource, NeighborsArgs, PretrainArgs, ProbeArgs, ProbeMode};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.snck";
pub const CONFIG_ECHO: &str = "config.toml";

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Relative paths inside a config file are taken relative to that file.
fn relative_to(base: Option<&Path>, p: &Path) -> PathBuf {
    match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p.to_path_buf(),
    }
}

fn periodic_name(epoch: usize) -> String {
    format!("epoch-{epoch:04}.snck")
}

pub fn pretrain(args: &PretrainArgs, seed: Option<u64>) -> Result<u8> {
    let (mut cfg, base, resume) = match (&args.resume, &args.config) {
        (Some(ck), _) => {
            let ck = load_checkpoint(ck)?;
            (ck.config, None, Some(ck.state))
        }
        (None, Some(path)) => {
            let cfg = RunConfig::load(path)?;
            (cfg, path.parent().map(Path::to_path_buf), None)
        }
        (None, None) => return Err(config_err("pretrain needs --config or --resume")),
    };
    if let Some(s) = seed {
        if resume.is_some() && s != cfg.train.seed {
            return Err(config_err(format!(
                "--seed {s} differs from the resumed run's seed {}",
                cfg.train.seed
            )));
        }
        cfg.train.seed = s;
        cfg.validate()?;
    }
    let data_path = match (&args.dataset, &cfg.dataset) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => relative_to(base.as_deref(), p),
        (None, None) => return Err(config_err("no dataset: set `dataset` in the config or pass --dataset")),
    };
    let out = match (&args.out, &cfg.output_dir) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => relative_to(base.as_deref(), p),
        (None, None) => return Err(config_err("no output directory: set `output_dir` or pass --out")),
    };
    let data = read_dataset(&data_path)?;
    fs::create_dir_all(&out)?;
    write_atomic(&out.join(CONFIG_ECHO), cfg.to_toml()?.as_bytes())?;

    let metrics_path = out.join(METRICS_FILE);
    let (mut trainer, mut records) = match resume {
        Some(state) => {
            let step = state.step;
            let mut records = if metrics_path.exists() { read_metrics(&metrics_path)? } else { Vec::new() };
            if records.len() < step {
                return Err(Error::Corrupt(format!(
                    "{} holds {} records but the checkpoint is at step {step}",
                    metrics_path.display(),
                    records.len()
                )));
            }
            records.truncate(step);
            (Trainer::resume(&data, &cfg.train, &cfg.augment, state)?, records)
        }
        None => (Trainer::new(&data, &cfg.model, &cfg.train, &cfg.augment)?, Vec::new()),
    };

    let spe = trainer.steps_per_epoch();
    let every = cfg.train.checkpoint_every;
    trainer.run_until(usize::MAX, |t, r| {
        records.push(r.clone());
        if (r.step + 1) % spe == 0 {
            write_atomic(&metrics_path, to_jsonl(&records)?.as_bytes())?;
            let epoch = r.epoch + 1;
            if every > 0 && epoch % every == 0 && !t.is_done() {
                save_checkpoint(&out.join(periodic_name(epoch)), &Checkpoint { config: cfg.clone(), state: t.state() })?;
            }
        }
        Ok(())
    })?;
    write_atomic(&metrics_path, to_jsonl(&records)?.as_bytes())?;
    let final_path = out.join(FINAL_CHECKPOINT);
    save_checkpoint(&final_path, &Checkpoint { config: cfg.clone(), state: trainer.state() })?;

    let last = records.last();
    let purity = records.iter().rev().find_map(|r| r.neighbor_purity);
    println!(
        "{}",
        json!({
            "command": "pretrain",
            "seed": cfg.train.seed,
            "steps": trainer.step(),
            "epochs": cfg.train.epochs,
            "final_loss": last.map(|r: &StepRecord| r.loss),
            "final_purity": purity,
            "checkpoint": final_path,
            "metrics": metrics_path,
        })
    );
    Ok(0)
}

fn features(model: &ModelState, ds: &Dataset) -> Result<Tensor> {
    encode(&model.online, &ds.features)
}

pub fn probe(args: &ProbeArgs, seed: Option<u64>) -> Result<u8> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let data = read_dataset(&args.dataset)?;
    let (train, test) = match (&args.test, args.split_every) {
        (Some(p), _) => (data, read_dataset(p)?),
        (None, Some(every)) => {
            if every < 2 {
                return Err(config_err(format!("--split-every must be at least 2, got {every}")));
            }
            data.split_every(every)
        }
        (None, None) => (data.clone(), data),
    };
    let seed = seed.unwrap_or(ck.config.train.seed);
    let train_f = features(&ck.state.model, &train)?;
    let test_f = features(&ck.state.model, &test)?;
    let mut report: ProbeReport = match args.mode {
        ProbeMode::Knn => knn_probe(&train_f, &train.labels, &test_f, &test.labels, args.k)?,
        ProbeMode::Linear => {
            let cfg = LinearProbeConfig { epochs: args.epochs, lr: args.lr, seed, ..LinearProbeConfig::default() };
            linear_probe(&train_f, &train.labels, &test_f, &test.labels, &cfg)?
        }
    };
    report.seed = seed;
    if let Some(obj) = report.config.as_object_mut() {
        obj.insert("checkpoint".into(), json!(args.checkpoint));
        obj.insert("dataset".into(), json!(args.dataset));
        obj.insert("train_samples".into(), json!(train.len()));
        obj.insert("test_samples".into(), json!(test.len()));
    }
    let sink = match &args.report {
        Some(p) => p.clone(),
        None => args.checkpoint.with_file_name("probes.jsonl"),
    };
    append_jsonl(&sink, &report)?;
    println!("{}", serde_json::to_string(&report).map_err(|e| Error::Config(e.to_string()))?);
    Ok(0)
}

struct Row {
    id: usize,
    label: Option<usize>,
    cosine: f64,
    weight: f64,
}

pub fn neighbors(args: &NeighborsArgs, seed: Option<u64>) -> Result<u8> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let data = read_dataset(&args.dataset)?;
    let n = data.len();
    if args.index >= n {
        return Err(config_err(format!("--index {} is out of range for {n} samples", args.index)));
    }
    if args.k == 0 {
        return Err(config_err("--k must be at least 1"));
    }
    let model = &ck.state.model;
    let query_x = data.features.select_rows(&[args.index]);
    let online = encode_project(&model.online, &query_x, Mode::Eval)?;

    let (hits, labels): (Vec<_>, Option<&[usize]>) = match args.source {
        NeighborSource::Dataset => {
            let proj = encode_project(&model.momentum, &data.features, Mode::Eval)?;
            if args.k >= n {
                return Err(config_err(format!("--k {} needs more than {n} samples", args.k)));
            }
            let mut pool = NeighborStore::new(n, proj.cols())?;
            pool.push_batch(&proj)?;
            let hits = pool
                .top_k(proj.row(args.index), args.k + 1)
                .into_iter()
                .filter(|h| h.slot != args.index)
                .take(args.k)
                .collect();
            (hits, Some(&data.labels[..]))
        }
        NeighborSource::Store => {
            let store = NeighborStore::from_snapshot(ck.state.store.clone())?;
            if args.k > store.fill() {
                return Err(config_err(format!(
                    "--k {} exceeds the {} entries in the checkpoint's store",
                    args.k,
                    store.fill()
                )));
            }
            let query = encode_project(&model.momentum, &query_x, Mode::Eval)?;
            (store.top_k(query.row(0), args.k), None)
        }
    };
    let feats: Vec<&[f64]> = hits.iter().map(|h| h.feature.as_slice()).collect();
    let w = positiveness(online.row(0), &feats);
    let mut rows: Vec<Row> = hits
        .iter()
        .zip(&w.weights)
        .map(|(h, &weight)| Row { id: h.slot, label: labels.map(|l| l[h.slot]), cosine: h.score, weight })
        .collect();
    rows.sort_by(|a, b| b.weight.total_cmp(&a.weight));

    let source = match args.source {
        NeighborSource::Dataset => "dataset",
        NeighborSource::Store => "store",
    };
    println!(
        "seed {}  query {}  label {}  source {source}",
        seed.unwrap_or(ck.config.train.seed),
        args.index,
        data.labels[args.index]
    );
    let id_col = if labels.is_some() { "index" } else { "slot" };
    println!("{:>4}  {id_col:>6}  {:>5}  {:>7}  {:>6}", "rank", "label", "cosine", "weight");
    for (i, r) in rows.iter().enumerate() {
        let label = r.label.map_or("-".to_string(), |l| l.to_string());
        println!("{:>4}  {:>6}  {label:>5}  {:>7.4}  {:>6.3}", i + 1, r.id, r.cosine, r.weight);
    }
    Ok(0)
}

pub fn gradcheck(args: &GradcheckArgs, seed: Option<u64>) -> Result<u8> {
    let mut sizes = GradcheckSizes::default();
    if let Some(b) = args.batch {
        sizes.batch = b;
    }
    if let Some(k) = args.k {
        sizes.k = k;
    }
    let fault = args.fault.then_some(Fault::ReluBackward);
    let first = seed.unwrap_or(0);
    let mut failed = 0;
    for s in first..first.saturating_add(args.count.max(1)) {
        let report = gradcheck::run_with_fault(s, &sizes, fault)?;
        if args.verbose {
            for c in &report.checks {
                println!("  {:<12} coords {:>5}  max rel error {:.3e}", c.name, c.coordinates, c.max_rel_error);
            }
        }
        let worst = report.worst();
        let verdict = if report.passed() { "PASS" } else { "FAIL" };
        println!(
            "seed {s}  params {}  max rel error {:.3e}  worst {} {}  {verdict}",
            report.num_params,
            worst.max_rel_error,
            worst.name,
            worst.worst_coordinate
        );
        if !report.passed() {
            failed += 1;
            println!(
                "  analytic {:.9e}  numeric {:.9e}  tolerance {:.1e}",
                worst.analytic, worst.numeric, report.tolerance
            );
        }
    }
    Ok(if failed > 0 { 1 } else { 0 })
}

pub fn gen_synth(args: &GenSynthArgs, seed: Option<u64>) -> Result<u8> {
    let cfg = SynthConfig {
        classes: args.classes,
        per_class: args.per_class,
        dim: args.dim,
        spread: args.spread,
        seed: seed.unwrap_or(0),
    };
    let ds = generate(&cfg)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_dataset(&args.out, &ds)?;
    println!(
        "{}",
        json!({
            "command": "gen-synth",
            "seed": cfg.seed,
            "samples": ds.len(),
            "dim": ds.dim(),
            "classes": ds.n_classes,
            "path": args.out,
        })
    );
    Ok(0)
}
