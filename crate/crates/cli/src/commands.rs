use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use clap::ValueEnum;
use kzread::data::{
    generate_corpus, load_dataset, make_split, pad_to_multiple, placements_tsv, read_image,
    write_dataset, Sample, SplitManifest, SynthSettings, TaggedId, PLACEMENTS_FILE, SPLIT_FILE,
    VOCAB_FILE,
};
use kzread::trainer::{evaluate_samples, EpochLog, SampleValidator, Trainer};
use kzread::{viz, Checkpoint, Model, RunConfig, Vocabulary};
use log::{info, warn};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Validation,
    Test,
    /// Every sample in labels.tsv.
    All,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Train => "train",
            Self::Validation => "validation",
            Self::Test => "test",
            Self::All => "all",
        };
        f.write_str(s)
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn empty_manifest() -> SplitManifest {
    SplitManifest {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        ratio: [9, 1],
        holdout_rule: "no holdout; test set empty".into(),
    }
}

pub fn synth(spec_file: Option<&Path>, count: usize, out: &Path, seed: u64) -> Result<()> {
    let settings = match spec_file {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            SynthSettings::parse(&text, p)?
        }
        None => SynthSettings::default(),
    };
    let spec = settings.build()?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let docs = generate_corpus(&spec, count, seed)?;
    let samples: Vec<Sample> = docs.iter().map(|d| d.sample.clone()).collect();
    write_dataset(out, &samples, &spec.vocabulary())?;
    write_file(&out.join(PLACEMENTS_FILE), placements_tsv(&docs))?;
    let manifest = if samples.is_empty() {
        empty_manifest()
    } else {
        let ids: Vec<TaggedId> = samples.iter().map(|s| TaggedId::untagged(s.id.clone())).collect();
        make_split(&ids, [9, 1], None, seed)?
    };
    write_file(&out.join(SPLIT_FILE), manifest.to_json())?;
    info!(
        "wrote {count} documents to {} ({} train, {} validation)",
        out.display(),
        manifest.train.len(),
        manifest.validation.len()
    );
    Ok(())
}

/// Samples of `data` plus its split manifest; without `split.json` the
/// samples are split 9:1 with `seed`.
fn load_split(data: &Path, vocab: &Vocabulary, seed: u64) -> Result<(Vec<Sample>, SplitManifest)> {
    let samples = load_dataset(data, vocab)?;
    let path = data.join(SPLIT_FILE);
    let manifest = if path.is_file() {
        let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
        SplitManifest::from_json(&text)?
    } else if samples.is_empty() {
        empty_manifest()
    } else {
        warn!("{} missing; splitting 9:1 with seed {seed}", path.display());
        let ids: Vec<TaggedId> = samples.iter().map(|s| TaggedId::untagged(s.id.clone())).collect();
        make_split(&ids, [9, 1], None, seed)?
    };
    Ok((samples, manifest))
}

fn pick(samples: &[Sample], ids: &[String]) -> Result<Vec<Sample>> {
    let by_id: HashMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|s| (*s).clone())
                .with_context(|| format!("split lists {id}, which labels.tsv does not contain"))
        })
        .collect()
}

fn subset(samples: &[Sample], manifest: &SplitManifest, split: SplitName) -> Result<Vec<Sample>> {
    match split {
        SplitName::Train => pick(samples, &manifest.train),
        SplitName::Validation => pick(samples, &manifest.validation),
        SplitName::Test => pick(samples, &manifest.test),
        SplitName::All => Ok(samples.to_vec()),
    }
}

fn dataset_vocab(data: &Path) -> Result<Vocabulary> {
    Ok(Vocabulary::load(&data.join(VOCAB_FILE))?)
}

fn check_alignment(samples: &[Sample], factor: usize) -> Result<()> {
    for s in samples {
        let shape = s.image.shape();
        if shape[0] % factor != 0 || shape[1] % factor != 0 {
            bail!(
                "image {} is {}×{}, not a multiple of the encoder's downsampling factor {factor}",
                s.id,
                shape[0],
                shape[1]
            );
        }
    }
    Ok(())
}

fn run_config(config: Option<&Path>) -> Result<RunConfig> {
    Ok(match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

pub fn train(data: &Path, config: Option<&Path>, out: &Path, resume: Option<&Path>) -> Result<()> {
    let run = run_config(config)?;
    let vocab = dataset_vocab(data)?;
    let (samples, manifest) = load_split(data, &vocab, run.train.seed)?;
    let train = pick(&samples, &manifest.train)?;
    let val = pick(&samples, &manifest.validation)?;

    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            ensure!(
                ckpt.vocab == vocab,
                "vocabulary of {} does not match {}",
                path.display(),
                data.join(VOCAB_FILE).display()
            );
            ensure!(
                ckpt.model_config == run.model,
                "model configuration differs from the one stored in {}",
                path.display()
            );
            Trainer::resume(&ckpt, run.train.clone())?
        }
        None => Trainer::new(Model::new(&run.model, vocab, run.train.seed)?, run.train.clone())?,
    };
    if trainer.epoch < run.train.max_epochs {
        ensure!(!train.is_empty(), "the training split of {} is empty", data.display());
        ensure!(!val.is_empty(), "the validation split of {} is empty", data.display());
    }
    check_alignment(&train, trainer.model.downsample_factor())?;
    check_alignment(&val, trainer.model.downsample_factor())?;

    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let resumed_from = trainer.epoch;
    let outcome = trainer.fit(&train, &mut SampleValidator { samples: &val })?;

    let best_path = out.join("best.ckpt");
    if outcome.log.iter().any(|l| l.improved) || !best_path.exists() {
        outcome.best.save(&best_path)?;
    }
    outcome.last.save(&out.join("last.ckpt"))?;

    let log_path = out.join("train_log.csv");
    let append = resumed_from > 0 && log_path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&log_path)
        .with_context(|| format!("cannot write {}", log_path.display()))?;
    if !append {
        writeln!(f, "{}", EpochLog::CSV_HEADER)?;
    }
    for row in &outcome.log {
        writeln!(f, "{}", row.to_csv_row())?;
    }
    println!(
        "epochs={}\nbest_epoch={}\nbest_val_ser={}\nstop={:?}",
        outcome.last.epoch, outcome.best.best_epoch, outcome.last.best_val_ser, outcome.stop
    );
    Ok(())
}

fn padded(samples: Vec<Sample>, factor: usize) -> Result<Vec<Sample>> {
    samples
        .into_iter()
        .map(|mut s| {
            s.image = pad_to_multiple(&s.image, factor)?.0;
            Ok(s)
        })
        .collect()
}

pub fn eval(data: &Path, checkpoint: &Path, split: SplitName, json: Option<&Path>) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.to_model()?;
    if data.join(VOCAB_FILE).is_file() {
        ensure!(
            dataset_vocab(data)? == model.vocab,
            "vocabulary of {} does not match {}",
            checkpoint.display(),
            data.join(VOCAB_FILE).display()
        );
    }
    let (samples, manifest) = load_split(data, &model.vocab, ckpt.train_config.seed)?;
    let chosen = subset(&samples, &manifest, split)?;
    ensure!(!chosen.is_empty(), "the {split} split of {} is empty", data.display());
    let chosen = padded(chosen, model.downsample_factor())?;
    let report = evaluate_samples(&model, &chosen)?;
    print!("split={split}\n{}", report.to_text());
    if let Some(path) = json {
        write_file(path, report.to_json())?;
    }
    Ok(())
}

pub fn recognize(image: &Path, checkpoint: &Path, trace: Option<&Path>) -> Result<()> {
    let model = Checkpoint::load(checkpoint)?.to_model()?;
    let raw = read_image(image)?;
    let factor = model.downsample_factor();
    let (input, was_padded) = pad_to_multiple(&raw, factor)?;
    if was_padded {
        eprintln!(
            "note: padded {}×{} image to {}×{} (multiple of {factor})",
            raw.shape()[0],
            raw.shape()[1],
            input.shape()[0],
            input.shape()[1]
        );
    }
    let r = model.recognize(&input)?;
    let tokens: Vec<String> = model.vocab.decode(&r.tokens).into_iter().map(String::from).collect();
    println!("{}", tokens.join(" "));
    if r.truncated {
        eprintln!(
            "note: stopped after {} steps without an end token",
            model.config.decoder.max_decode_len
        );
    }
    if let Some(dir) = trace {
        viz::write_trace(dir, &input, &r.trace, &tokens, r.downsample_factor)?;
    }
    Ok(())
}

fn parse_grid(grid: &str) -> Result<Vec<(usize, usize)>> {
    let pairs = grid
        .split(',')
        .map(|p| {
            let (k, d) = p
                .trim()
                .split_once(['x', 'X'])
                .with_context(|| format!("grid entry {p:?} is not of the form KxD"))?;
            Ok((
                k.parse().with_context(|| format!("bad growth rate in {p:?}"))?,
                d.parse().with_context(|| format!("bad depth in {p:?}"))?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    ensure!(!pairs.is_empty(), "empty grid");
    Ok(pairs)
}

pub const SWEEP_HEADER: &str = "growth_rate,block_depth,output_channels,parameters,epochs,best_epoch,split,cer,ser";

pub fn sweep(data: &Path, config: Option<&Path>, grid: &str, out: &Path) -> Result<()> {
    let base = run_config(config)?;
    let pairs = parse_grid(grid)?;
    let vocab = dataset_vocab(data)?;
    let (samples, manifest) = load_split(data, &vocab, base.train.seed)?;
    let train = pick(&samples, &manifest.train)?;
    let val = pick(&samples, &manifest.validation)?;
    ensure!(!train.is_empty() && !val.is_empty(), "sweep needs non-empty train and validation splits");
    let (split, scored) = if manifest.test.is_empty() {
        (SplitName::Validation, val.clone())
    } else {
        (SplitName::Test, pick(&samples, &manifest.test)?)
    };

    let mut rows = Vec::new();
    for (k, d) in pairs {
        let mut run = base.clone();
        run.model.encoder.growth_rate = k;
        run.model.encoder.block_depth = d;
        run.validate()?;
        let model = Model::new(&run.model, vocab.clone(), run.train.seed)?;
        check_alignment(&train, model.downsample_factor())?;
        let params = model.params.num_scalars();
        info!("sweep K={k} D={d}: {params} parameters");
        let outcome = kzread::trainer::train(model, &train, &val, &run.train)?;
        let best = outcome.best.to_model()?;
        let report = evaluate_samples(&best, &padded(scored.clone(), best.downsample_factor())?)?;
        rows.push((
            report.cer,
            format!(
                "{k},{d},{},{params},{},{},{split},{},{}",
                run.model.encoder.output_channels(),
                outcome.last.epoch,
                outcome.best.best_epoch,
                report.cer,
                report.ser
            ),
        ));
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut csv = format!("{SWEEP_HEADER}\n");
    for (_, row) in &rows {
        csv.push_str(row);
        csv.push('\n');
    }
    write_file(out, &csv)?;
    print!("{csv}");
    Ok(())
}
