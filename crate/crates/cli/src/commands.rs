use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use multitag::checkpoint;
use multitag::data::{read_conll, write_conll, ConllColumns, LabelMap, TaskDataset, Vocab};
use multitag::eval::{evaluate_task, prediction_dump, EvalReport};
use multitag::import::import_files;
use multitag::model::{MultiTaskModel, TaskRegistry, TaskSpec};
use multitag::synthetic::{generate, SyntheticSpec};
use multitag::training::{prepare_tasks, train_observed, Algorithm, EpochRecord};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ConfigError, RunConfig};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const DEV_F1_FILE: &str = "dev_f1.csv";
pub const LABELS_DIR: &str = "labels";

#[derive(Debug, Default)]
pub struct TrainOverrides {
    pub algorithm: Option<Algorithm>,
    pub freeze_encoder: bool,
    pub seed: Option<u64>,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn log_epoch(r: &EpochRecord) {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    info!(
        "epoch {:>3}  task {:<10} {}  lr {:.3e}  train_loss {}  dev_loss {}  dev_f1 {}",
        r.epoch,
        r.task_id,
        if r.trained { "trained" } else { "idle   " },
        r.lr,
        fmt(r.raw_loss),
        fmt(r.dev_loss),
        fmt(r.dev_f1),
    );
}

pub fn train(config_path: &Path, overrides: TrainOverrides) -> Result<()> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(a) = overrides.algorithm {
        cfg.train.algorithm = a;
    }
    if overrides.freeze_encoder {
        cfg.train.freeze_encoder = true;
    }
    if let Some(s) = overrides.seed {
        cfg.train.seed = s;
    }

    let columns = ConllColumns::from(cfg.columns);
    let mut datasets = Vec::new();
    let mut specs = Vec::new();
    for t in &cfg.tasks {
        let ds = TaskDataset::load(
            &t.task_id,
            &t.train,
            t.dev.as_deref(),
            t.test.as_deref(),
            columns,
        )?;
        let labels = match &t.labels {
            Some(p) => LabelMap::load(p)?,
            None => ds.label_map()?,
        };
        info!(
            "task {}: {} train / {} dev sentences, {} labels",
            t.task_id,
            ds.train.len(),
            ds.dev.len(),
            labels.len()
        );
        specs.push(TaskSpec {
            task_id: t.task_id.clone(),
            dataset_name: t.dataset_name.clone(),
            lambda: t.lambda,
            labels,
        });
        datasets.push(ds);
    }
    let registry = TaskRegistry::new(specs).map_err(|e| ConfigError(e.to_string()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut model = match &cfg.init_checkpoint {
        Some(path) => {
            let init = checkpoint::load(path)?.model;
            info!("encoder initialized from {}", path.display());
            let vocab = match &cfg.vocab {
                Some(p) => Vocab::load(p)?,
                None => init.vocab,
            };
            let mut encoder = init.encoder;
            encoder.frozen = false;
            MultiTaskModel::with_encoder(vocab, encoder, registry, &mut rng)?
        }
        None => {
            let vocab = Vocab::load(cfg.vocab.as_deref().expect("validated"))?;
            let enc = cfg.encoder.to_config(vocab.len());
            MultiTaskModel::init(vocab, enc, registry, &mut rng)
                .map_err(|e| ConfigError(e.to_string()))?
        }
    };
    let tasks = prepare_tasks(&model, &datasets, cfg.max_seq_len, cfg.long_sentences)?;
    info!(
        "training {:?} for {} epochs, seed {}",
        cfg.train.algorithm, cfg.train.epoch_max, cfg.train.seed
    );
    let outcome = train_observed(&mut model, &tasks, &cfg.train, &mut log_epoch)?;

    let out = &cfg.output_dir;
    fs::create_dir_all(out.join(LABELS_DIR))
        .with_context(|| format!("cannot create {}", out.display()))?;
    checkpoint::save(&out.join(CHECKPOINT_FILE), &model, Some(&outcome.state))?;
    write(&out.join(METRICS_FILE), outcome.metrics_jsonl())?;
    write(&out.join(DEV_F1_FILE), outcome.dev_f1_csv())?;
    for t in model.registry.tasks() {
        t.labels
            .save(&out.join(LABELS_DIR).join(format!("{}.labels", t.task_id)))?;
    }
    info!("wrote {}", out.display());
    Ok(())
}

pub fn eval(
    checkpoint_path: &Path,
    corpus: &Path,
    task: &str,
    dump: Option<&Path>,
) -> Result<EvalReport> {
    let model = checkpoint::load(checkpoint_path)?.model;
    model.registry.get(task)?;
    let sentences = read_conll(corpus, ConllColumns::default())?;
    let ev = evaluate_task(
        &model,
        &sentences,
        task,
        multitag::training::TrainConfig::default().eval_batch_size,
    )?;
    if let Some(path) = dump {
        write(path, prediction_dump(&sentences, &ev.predictions))?;
    }
    let mut report = EvalReport::default();
    report.insert(task, ev.score);
    Ok(report)
}

/// One whitespace-tokenized sentence per input line; `token<TAB>label`
/// lines out, with a blank line after each input.
pub fn predict(
    checkpoint_path: &Path,
    task: &str,
    input: impl BufRead,
    mut output: impl Write,
) -> Result<()> {
    let model = checkpoint::load(checkpoint_path)?.model;
    model.registry.get(task)?;
    for line in input.lines() {
        let line = line.context("cannot read input")?;
        let words: Vec<String> = line.split_whitespace().map(String::from).collect();
        if !words.is_empty() {
            for (w, l) in words.iter().zip(model.predict_tags(&words, task)?) {
                writeln!(output, "{w}\t{l}")?;
            }
        }
        writeln!(output)?;
    }
    output.flush()?;
    Ok(())
}

pub fn import(archive: &Path, map: &Path, out: &Path) -> Result<()> {
    let model = import_files(archive, map)?;
    checkpoint::save(out, &model, None)?;
    info!(
        "imported {} encoder tensors ({} layers, hidden {}) into {}",
        model.encoder.tensors().len(),
        model.encoder.config.num_layers,
        model.encoder.config.hidden_size,
        out.display()
    );
    Ok(())
}

/// The quickstart config written next to a synthetic corpus.
fn quickstart_config(spec: &SyntheticSpec, epochs: usize) -> String {
    let mut out = format!(
        "# Synthetic quickstart: `multitag train --config run.toml`\n\
         vocab = \"vocab.txt\"\n\
         output_dir = \"out\"\n\n\
         [encoder]\nhidden_size = 32\nnum_layers = 2\nnum_heads = 2\n\n\
         [train]\nepoch_max = {epochs}\npeak_lr = 1e-3\nseed = {}\n",
        spec.seed
    );
    for t in &spec.tasks {
        let id = &t.task_id;
        out.push_str(&format!(
            "\n[[tasks]]\ntask_id = \"{id}\"\ntrain = \"{id}.train\"\ndev = \"{id}.dev\"\ntest = \"{id}.test\"\n"
        ));
    }
    out
}

pub fn synth(out: &Path, seed: u64, epochs: usize) -> Result<PathBuf> {
    let spec = SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    };
    let corpus = generate(&spec);
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    corpus.vocab.save(&out.join("vocab.txt"))?;
    for ds in &corpus.datasets {
        for (split, sentences) in [("train", &ds.train), ("dev", &ds.dev), ("test", &ds.test)] {
            write(
                &out.join(format!("{}.{split}", ds.task_id)),
                write_conll(sentences),
            )?;
        }
    }
    let config = out.join("run.toml");
    write(&config, quickstart_config(&spec, epochs))?;
    info!("wrote synthetic corpus and {}", config.display());
    Ok(config)
}
