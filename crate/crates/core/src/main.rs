use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use vtdiff::align::{align, write_manifest};
use vtdiff::audio_encoder::EmbeddingCache;
use vtdiff::error::{Error, Result};
use vtdiff::frame::Frame;
use vtdiff::harness::dataset::{read_frame_dir, read_wav, write_frame_dir, write_json, FRAMES_DIR};
use vtdiff::harness::pipeline::{checkpoint_files, synthesize_all};
use vtdiff::harness::{
    audit_split, create_run_dir, generate_toy_dataset, ingest, load_manifest, load_sample, loss_curve_tsv,
    new_run_id, prepare_samples, run_experiment, split, train_model, DatasetManifest, DatasetRef, ModelKind,
    RunConfig, RunManifest, SplitRef, TrainedModel,
};
use vtdiff::metrics::{evaluate_videos, parse_report, write_report, MetricReport};

#[derive(Parser)]
#[command(name = "vtdiff", version, about = "Speech-to-video diffusion for vocal tract imaging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Start from the small toy-scale preset instead of the full defaults.
    #[arg(long)]
    toy: bool,
    /// Overrides every component seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Parent directory for run directories (overrides `output_dir`).
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Name of the run directory; must not exist yet.
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic paired dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (must be empty or absent).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 12)]
        n_clips: usize,
    },
    /// Validate a dataset, write alignment tables and fill the embedding cache.
    Preprocess {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Embedding cache directory; defaults to `<run>/embeddings`.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Train one model on the training side of the configured split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Overrides `model` from the config.
        #[arg(long)]
        model: Option<ModelKind>,
        /// Train on every sample instead of the training split.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Generate videos from audio with a trained model.
    Synthesize {
        #[command(flatten)]
        common: Common,
        /// Run directory written by `train`.
        #[arg(long)]
        model_dir: PathBuf,
        /// WAV files to synthesize from.
        #[arg(long, num_args = 1..)]
        audio: Vec<PathBuf>,
        /// Dataset whose samples to synthesize (with normalized references).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Which samples of `--data`: test, train or all.
        #[arg(long, default_value = "test")]
        subset: String,
    },
    /// Score predicted videos against ground truth.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Directory of predicted videos, one subdirectory per video.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of reference videos with matching subdirectory names.
        #[arg(long)]
        truth: PathBuf,
        /// Row label in the metric table.
        #[arg(long, default_value = "model")]
        name: String,
    },
    /// Merge metric tables from earlier runs into one table.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directories (or metric table files) to merge.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Split, train every configured model, synthesize and evaluate.
    Experiment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::GenData { .. } => "gen-data",
            Self::Preprocess { .. } => "preprocess",
            Self::Train { .. } => "train",
            Self::Synthesize { .. } => "synthesize",
            Self::Evaluate { .. } => "evaluate",
            Self::Report { .. } => "report",
            Self::Experiment { .. } => "experiment",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Self::GenData { common, .. }
            | Self::Preprocess { common, .. }
            | Self::Train { common, .. }
            | Self::Synthesize { common, .. }
            | Self::Evaluate { common, .. }
            | Self::Report { common, .. }
            | Self::Experiment { common, .. } => common,
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None if common.toy => RunConfig::toy(),
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config = config.with_seed(seed);
    }
    if let Some(dir) = &common.output_dir {
        config.output_dir = dir.clone();
    }
    config.validate()?;
    Ok(config)
}

struct Run {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn start(command: &str, common: &Common, config: &RunConfig) -> Result<Self> {
        let id = common.run_id.clone().unwrap_or_else(|| new_run_id(command));
        let dir = create_run_dir(&config.output_dir.join(&id))?;
        let manifest = RunManifest::new(command, &id, Some(config))?;
        std::fs::write(dir.join("config.toml"), config.to_toml()?).map_err(|e| Error::io(&dir, e))?;
        let mut run = Self { dir, manifest };
        run.manifest.output("config.toml");
        Ok(run)
    }

    fn write_text(&mut self, rel: &str, text: &str) -> Result<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.manifest.output(rel);
        Ok(())
    }

    fn dataset(&mut self, root: &Path, manifest: &DatasetManifest) {
        self.manifest.dataset = Some(DatasetRef {
            root: root.to_path_buf(),
            content_hash: manifest.content_hash(),
            samples: manifest.samples.len(),
        });
    }

    fn finish(self) -> Result<PathBuf> {
        self.manifest.write(&self.dir)?;
        println!("{}", self.dir.display());
        Ok(self.dir)
    }
}

fn cache_for(run: &mut Run, cache: &Option<PathBuf>) -> Result<EmbeddingCache> {
    let dir = cache.clone().unwrap_or_else(|| run.dir.join("embeddings"));
    run.manifest.input("embedding_cache", dir.display());
    EmbeddingCache::new(dir)
}

fn execute(cmd: Command) -> Result<PathBuf> {
    let common = cmd.common().clone();
    let config = load_config(&common)?;
    let mut run = Run::start(cmd.name(), &common, &config)?;
    match cmd {
        Command::GenData { out, n_clips, .. } => {
            let manifest = generate_toy_dataset(&config.toy, n_clips, &out)?;
            run.manifest.input("n_clips", n_clips);
            run.dataset(&out, &manifest);
        }
        Command::Preprocess { data, cache, .. } => {
            let (manifest, skipped) = ingest(&data)?;
            if !skipped.skipped.is_empty() {
                eprint!("{skipped}");
            }
            run.dataset(&data, &manifest);
            write_json(&run.dir.join("skip_report.json"), &skipped)?;
            run.manifest.output("skip_report.json");
            for record in &manifest.samples {
                let pair = load_sample(&data, record)?;
                let mut table = Vec::new();
                write_manifest(&align(&pair, &config.align)?, &mut table)
                    .map_err(|e| Error::io(&run.dir, e))?;
                let text = String::from_utf8(table).map_err(|e| Error::Serde(e.to_string()))?;
                run.write_text(&format!("alignment/{}.tsv", record.id), &text)?;
            }
            let cache = cache_for(&mut run, &cache)?;
            let backend = config.encoder.build()?;
            let ids: Vec<String> = manifest.samples.iter().map(|s| s.id.clone()).collect();
            prepare_samples(&data, &manifest, &ids, &config, backend.as_ref(), Some(&cache))?;
            match split(&manifest, &config.experiment.split) {
                Ok(s) => {
                    audit_split(&manifest, &s)?;
                    run.manifest.split = Some(SplitRef::from(&s));
                }
                Err(e) => log::warn!("configured split is not available: {e}"),
            }
        }
        Command::Train {
            data,
            model,
            all,
            cache,
            ..
        } => {
            let kind = model.unwrap_or(config.model);
            let manifest = load_manifest(&data)?;
            run.dataset(&data, &manifest);
            let ids = if all {
                manifest.samples.iter().map(|s| s.id.clone()).collect()
            } else {
                let s = split(&manifest, &config.experiment.split)?;
                audit_split(&manifest, &s)?;
                run.manifest.split = Some(SplitRef::from(&s));
                s.train
            };
            let cache = cache_for(&mut run, &cache)?;
            let backend = config.encoder.build()?;
            let sched = config.schedule.build()?;
            let samples = prepare_samples(&data, &manifest, &ids, &config, backend.as_ref(), Some(&cache))?;
            let outcome = train_model(kind, &samples, &config, &sched)?;
            for file in outcome.model.save(&run.dir)? {
                run.manifest.output(file);
            }
            run.write_text("loss_curve.tsv", &loss_curve_tsv(&outcome.loss_curves))?;
            run.manifest.input("model", kind);
            run.manifest.input("learning_rate", learning_rate(kind, &config));
            run.manifest.loss_curves = outcome.loss_curves;
            run.manifest.diagnostics = outcome.diagnostics;
        }
        Command::Synthesize {
            model_dir,
            audio,
            data,
            subset,
            ..
        } => {
            let trained = RunManifest::read(&model_dir)?;
            let kind: ModelKind = trained
                .inputs
                .get("model")
                .ok_or_else(|| Error::Checkpoint(format!("{} is not a training run", model_dir.display())))?
                .parse()?;
            let model = TrainedModel::load(kind, &model_dir)?;
            for f in checkpoint_files(kind) {
                run.manifest.input(&format!("checkpoint.{f}"), model_dir.join(f).display());
            }
            let backend = config.encoder.build()?;
            let sched = config.schedule.build()?;
            if audio.is_empty() && data.is_none() {
                return Err(Error::InvalidInput("give --audio files or --data".into()));
            }
            for path in &audio {
                let (waveform, sr) = read_wav(path)?;
                if sr != config.align.sample_rate {
                    return Err(Error::MismatchedRates(format!(
                        "{} is {sr} Hz, expected {}",
                        path.display(),
                        config.align.sample_rate
                    )));
                }
                let frames = model.synthesize(&waveform, &config, backend.as_ref(), &sched)?;
                let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                write_video(&mut run, &format!("videos/{stem}"), &frames)?;
                run.manifest.input(&format!("audio.{stem}"), path.display());
            }
            if let Some(root) = data {
                let manifest = load_manifest(&root)?;
                run.dataset(&root, &manifest);
                let ids = match subset.as_str() {
                    "all" => manifest.samples.iter().map(|s| s.id.clone()).collect(),
                    "train" | "test" => {
                        let s = split(&manifest, &config.experiment.split)?;
                        audit_split(&manifest, &s)?;
                        run.manifest.split = Some(SplitRef::from(&s));
                        if subset == "train" {
                            s.train
                        } else {
                            s.test
                        }
                    }
                    other => return Err(Error::InvalidInput(format!("unknown subset {other:?}"))),
                };
                let samples = prepare_samples(&root, &manifest, &ids, &config, backend.as_ref(), None)?;
                let (generated, reference) = synthesize_all(&model, &samples, &config, backend.as_ref(), &sched)?;
                for ((s, g), r) in samples.iter().zip(&generated).zip(&reference) {
                    write_video(&mut run, &format!("videos/{}", s.id), g)?;
                    write_video(&mut run, &format!("references/{}", s.id), r)?;
                }
            }
        }
        Command::Evaluate { pred, truth, name, .. } => {
            let predicted = read_videos(&pred)?;
            let reference = read_videos(&truth)?;
            let mut gen = Vec::new();
            let mut refs = Vec::new();
            for (id, p) in &predicted {
                let r = reference
                    .get(id)
                    .ok_or_else(|| Error::InvalidInput(format!("no reference video for {id}")))?;
                let n = p.len().min(r.len());
                if p.len() != r.len() {
                    log::warn!("{id}: {} predicted vs {} reference frames, scoring {n}", p.len(), r.len());
                }
                gen.push(p[..n].to_vec());
                refs.push(r[..n].to_vec());
            }
            let extractor = config.eval.extractor()?;
            let row = evaluate_videos(&name, &gen, &refs, &extractor, &config.eval)?;
            let report = MetricReport { rows: vec![row] };
            let text = write_report(&report);
            print!("{text}");
            run.write_text("metrics.tsv", &text)?;
            run.manifest.input("pred", pred.display());
            run.manifest.input("truth", truth.display());
            run.manifest.input("extractor", extractor.id());
            run.manifest.metrics = Some(report);
        }
        Command::Report { runs, .. } => {
            let mut merged = MetricReport::default();
            for (i, path) in runs.iter().enumerate() {
                let report = if path.is_dir() {
                    RunManifest::read(path)?.metrics.ok_or_else(|| {
                        Error::InvalidInput(format!("{} has no metrics", path.display()))
                    })?
                } else {
                    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                    parse_report(&text)?
                };
                merged.rows.extend(report.rows);
                run.manifest.input(&format!("source.{i}"), path.display());
            }
            let text = write_report(&merged);
            print!("{text}");
            run.write_text("report.tsv", &text)?;
            run.manifest.metrics = Some(merged);
        }
        Command::Experiment { data, cache, .. } => {
            let manifest = load_manifest(&data)?;
            run.dataset(&data, &manifest);
            let cache = cache_for(&mut run, &cache)?;
            let outcome = run_experiment(&data, &manifest, &config, Some(&cache))?;
            for model in &outcome.models {
                let sub = run.dir.join(model.kind().name());
                std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
                for f in model.save(&sub)? {
                    run.manifest.output(format!("{}/{f}", model.kind()));
                }
            }
            let text = write_report(&outcome.report);
            print!("{text}");
            run.write_text("metrics.tsv", &text)?;
            run.write_text("loss_curve.tsv", &loss_curve_tsv(&outcome.loss_curves))?;
            run.manifest.split = Some(SplitRef::from(&outcome.split));
            run.manifest.loss_curves = outcome.loss_curves;
            run.manifest.diagnostics = outcome.diagnostics;
            run.manifest.metrics = Some(outcome.report);
        }
    }
    run.finish()
}

fn learning_rate(kind: ModelKind, config: &RunConfig) -> f64 {
    match kind {
        ModelKind::Stdiff => config.train.learning_rate,
        ModelKind::Sdiff | ModelKind::Vq => config.baseline_train.learning_rate,
    }
}

fn write_video(run: &mut Run, rel: &str, frames: &[Frame]) -> Result<()> {
    write_frame_dir(&run.dir.join(rel), frames)?;
    run.manifest.output(rel);
    Ok(())
}

/// Videos keyed by subdirectory name. A subdirectory holds PNG frames either
/// directly or under `frames/`; a dataset root is read through `samples/`.
fn read_videos(dir: &Path) -> Result<BTreeMap<String, Vec<Frame>>> {
    let base = if dir.join("samples").is_dir() {
        dir.join("samples")
    } else {
        dir.to_path_buf()
    };
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(&base).map_err(|e| Error::io(&base, e))?;
    for e in entries {
        let path = e.map_err(|e| Error::io(&base, e))?.path();
        if !path.is_dir() {
            continue;
        }
        let frames_dir = if path.join(FRAMES_DIR).is_dir() {
            path.join(FRAMES_DIR)
        } else {
            path.clone()
        };
        let frames = read_frame_dir(&frames_dir)?;
        if !frames.is_empty() {
            let id = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            out.insert(id, frames);
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidInput(format!("no videos under {}", base.display())));
    }
    Ok(out)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = execute(cli.command) {
        eprintln!("error [{}]: {e}", e.category());
        std::process::exit(e.exit_code());
    }
}
