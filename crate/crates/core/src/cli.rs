//! Command-line front end.

use crate::baseline::baseline_correct;
use crate::config::{derive_seed, RunConfig, SeedPurpose};
use crate::corpus::{
    load_phantom_set, phantom_set, prepare_natural_corpus, write_phantom_set, write_texture_corpus, Corpus,
    Phantom, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::eval::{corrupt_sample, evaluate_dataset, time_each, BaselineCorrector, Corrector, GetNetCorrector};
use crate::getnet::{build_getnet, correct_image, GetNetModel};
use crate::io;
use crate::train::{load_resume_point, train_from, TrainState};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const LOG_ENV: &str = "GAINFIELD_KIT_LOG";

#[derive(Parser, Debug)]
#[command(name = "gainfield-kit", version, about = "Learned and classical gain-field correction for 2D images")]
pub struct Cli {
    #[command(flatten)]
    pub settings: Settings,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a training corpus: procedural textures, or crops of the images in --ingest-dir.
    GenCorpus,
    /// Write labelled test phantoms.
    GenPhantoms,
    /// Train the estimator on the corpus and save the model.
    Train,
    /// Correct one image with the trained model (default) or the polynomial baseline.
    Correct {
        /// Input image (.pgm or .pfm).
        input: PathBuf,
        /// Output image (.pfm float or .pgm 16-bit).
        output: PathBuf,
        /// Use the log-polynomial baseline instead of the model given by --model.
        #[arg(long)]
        baseline: bool,
    },
    /// Score the model and the baseline on corrupted phantoms.
    Evaluate,
    /// Time per-image correction for the model and the baseline.
    Bench,
}

/// Every run setting has one flag here; each flag overrides the config-file
/// key of the same name.
#[derive(Args, Debug, Default, Clone)]
pub struct Settings {
    /// TOML config file; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed all randomness derives from [key: seed].
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Image side length [key: image_size].
    #[arg(long, global = true, value_parser = ["64", "256"])]
    pub image_size: Option<String>,
    /// Worker threads, 0 for all cores [key: threads].
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Single-threaded, bit-reproducible execution [key: deterministic].
    #[arg(long, global = true)]
    pub deterministic: bool,

    /// Corpus directory [key: paths.corpus_dir].
    #[arg(long, global = true, value_name = "DIR", help_heading = "Paths")]
    pub corpus_dir: Option<PathBuf>,
    /// Ingest natural images from this directory instead of generating textures [key: paths.ingest_dir].
    #[arg(long, global = true, value_name = "DIR", help_heading = "Paths")]
    pub ingest_dir: Option<PathBuf>,
    /// Phantom directory [key: paths.phantom_dir].
    #[arg(long, global = true, value_name = "DIR", help_heading = "Paths")]
    pub phantom_dir: Option<PathBuf>,
    /// Checkpoint directory [key: paths.checkpoint_dir].
    #[arg(long, global = true, value_name = "DIR", help_heading = "Paths")]
    pub checkpoint_dir: Option<PathBuf>,
    /// Model file written by train and read by correct/evaluate/bench [key: paths.model].
    #[arg(long, global = true, value_name = "PATH", help_heading = "Paths")]
    pub model: Option<PathBuf>,
    /// Report directory [key: paths.report_dir].
    #[arg(long, global = true, value_name = "DIR", help_heading = "Paths")]
    pub report_dir: Option<PathBuf>,

    /// Training images [key: corpus.train_count].
    #[arg(long, global = true, help_heading = "Corpus")]
    pub train_count: Option<usize>,
    /// Validation images [key: corpus.val_count].
    #[arg(long, global = true, help_heading = "Corpus")]
    pub val_count: Option<usize>,
    /// Test phantoms [key: corpus.phantom_count].
    #[arg(long, global = true, help_heading = "Corpus")]
    pub phantom_count: Option<usize>,
    /// Share of ingested sources held out for validation [key: corpus.val_fraction].
    #[arg(long, global = true, help_heading = "Corpus")]
    pub val_fraction: Option<f64>,

    /// Maximum field half-span [key: fieldgen.amplitude_max].
    #[arg(long, global = true, help_heading = "Field generator")]
    pub amplitude_max: Option<f64>,
    /// Latent grid side [key: fieldgen.control_grid].
    #[arg(long, global = true, help_heading = "Field generator")]
    pub control_grid: Option<usize>,
    /// Maximum noise standard deviation [key: fieldgen.noise_sigma_max].
    #[arg(long, global = true, help_heading = "Field generator")]
    pub noise_sigma_max: Option<f64>,

    /// Training epochs [key: train.epochs].
    #[arg(long, global = true, help_heading = "Training")]
    pub epochs: Option<usize>,
    /// Pairs per step [key: train.batch_size].
    #[arg(long, global = true, help_heading = "Training")]
    pub batch_size: Option<usize>,
    /// Adam learning rate [key: train.lr].
    #[arg(long, global = true, help_heading = "Training")]
    pub lr: Option<f64>,
    /// Adam beta1 [key: train.beta1].
    #[arg(long, global = true, help_heading = "Training")]
    pub beta1: Option<f64>,
    /// Adam beta2 [key: train.beta2].
    #[arg(long, global = true, help_heading = "Training")]
    pub beta2: Option<f64>,
    /// Adam epsilon [key: train.adam_eps].
    #[arg(long, global = true, help_heading = "Training")]
    pub adam_eps: Option<f64>,
    /// Steps between metric rows [key: train.eval_every].
    #[arg(long, global = true, help_heading = "Training")]
    pub eval_every: Option<usize>,
    /// Network base width, 0 for the size default [key: train.base_channels].
    #[arg(long, global = true, help_heading = "Training")]
    pub base_channels: Option<usize>,
    /// Continue from the checkpoint directory [key: train.resume].
    #[arg(long, global = true, help_heading = "Training")]
    pub resume: bool,

    /// Polynomial total degree [key: baseline.poly_degree].
    #[arg(long, global = true, help_heading = "Baseline")]
    pub poly_degree: Option<usize>,
    /// Foreground threshold as a fraction of the maximum [key: baseline.mask_threshold].
    #[arg(long, global = true, help_heading = "Baseline")]
    pub mask_threshold: Option<f64>,
    /// Reweighting iterations [key: baseline.irls_iters].
    #[arg(long, global = true, help_heading = "Baseline")]
    pub irls_iters: Option<usize>,
    /// Huber threshold in log units [key: baseline.huber_delta].
    #[arg(long, global = true, help_heading = "Baseline")]
    pub huber_delta: Option<f64>,

    /// Also write per-sample scores [key: eval.per_sample].
    #[arg(long, global = true, help_heading = "Evaluation")]
    pub per_sample: bool,
    /// Images timed by bench [key: eval.bench_images].
    #[arg(long, global = true, help_heading = "Evaluation")]
    pub bench_images: Option<usize>,
    /// Untimed warm-up corrections [key: eval.warmup].
    #[arg(long, global = true, help_heading = "Evaluation")]
    pub warmup: Option<usize>,
}

impl Settings {
    pub fn apply(&self, cfg: &mut RunConfig) {
        fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
            if let Some(v) = src {
                *dst = v.clone();
            }
        }
        set(&mut cfg.seed, &self.seed);
        if let Some(s) = &self.image_size {
            cfg.image_size = s.parse().expect("restricted by the parser");
        }
        set(&mut cfg.threads, &self.threads);
        cfg.deterministic |= self.deterministic;

        set(&mut cfg.paths.corpus_dir, &self.corpus_dir);
        set(&mut cfg.paths.ingest_dir, &self.ingest_dir);
        set(&mut cfg.paths.phantom_dir, &self.phantom_dir);
        set(&mut cfg.paths.checkpoint_dir, &self.checkpoint_dir);
        set(&mut cfg.paths.model, &self.model);
        set(&mut cfg.paths.report_dir, &self.report_dir);

        set(&mut cfg.corpus.train_count, &self.train_count);
        set(&mut cfg.corpus.val_count, &self.val_count);
        set(&mut cfg.corpus.phantom_count, &self.phantom_count);
        set(&mut cfg.corpus.val_fraction, &self.val_fraction);

        set(&mut cfg.fieldgen.amplitude_max, &self.amplitude_max);
        set(&mut cfg.fieldgen.control_grid, &self.control_grid);
        set(&mut cfg.fieldgen.noise_sigma_max, &self.noise_sigma_max);

        set(&mut cfg.train.epochs, &self.epochs);
        set(&mut cfg.train.batch_size, &self.batch_size);
        set(&mut cfg.train.lr, &self.lr);
        set(&mut cfg.train.beta1, &self.beta1);
        set(&mut cfg.train.beta2, &self.beta2);
        set(&mut cfg.train.adam_eps, &self.adam_eps);
        set(&mut cfg.train.eval_every, &self.eval_every);
        set(&mut cfg.train.base_channels, &self.base_channels);
        cfg.train.resume |= self.resume;

        set(&mut cfg.baseline.poly_degree, &self.poly_degree);
        set(&mut cfg.baseline.mask_threshold, &self.mask_threshold);
        set(&mut cfg.baseline.irls_iters, &self.irls_iters);
        set(&mut cfg.baseline.huber_delta, &self.huber_delta);

        cfg.eval.per_sample |= self.per_sample;
        set(&mut cfg.eval.bench_images, &self.bench_images);
        set(&mut cfg.eval.warmup, &self.warmup);
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 on usage errors, 2 on runtime failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info"))
        .format_timestamp(None)
        .try_init();

    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let cfg = match resolve_config(&cli.settings) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    if let Command::Correct { baseline: true, .. } = cli.command {
        if cli.settings.model.is_some() {
            eprintln!("error: --model and --baseline are mutually exclusive");
            return 1;
        }
    }

    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.worker_threads())
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return 2;
        }
    };
    match pool.install(|| execute(&cli.command, &cfg)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

pub fn resolve_config(settings: &Settings) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(settings.config.as_deref())?;
    settings.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn execute(command: &Command, cfg: &RunConfig) -> Result<()> {
    match command {
        Command::GenCorpus => gen_corpus(cfg),
        Command::GenPhantoms => {
            let seed = derive_seed(cfg.seed, SeedPurpose::Phantoms);
            let m = write_phantom_set(&cfg.paths.phantom_dir, cfg.image_size, cfg.corpus.phantom_count, seed)?;
            info!("wrote {} phantoms to {}", m.entries.len(), cfg.paths.phantom_dir.display());
            Ok(())
        }
        Command::Train => train_cmd(cfg),
        Command::Correct {
            input,
            output,
            baseline,
        } => correct_cmd(cfg, input, output, *baseline),
        Command::Evaluate => evaluate_cmd(cfg),
        Command::Bench => bench_cmd(cfg),
    }
}

fn gen_corpus(cfg: &RunConfig) -> Result<()> {
    let seed = derive_seed(cfg.seed, SeedPurpose::Corpus);
    let out = &cfg.paths.corpus_dir;
    if cfg.paths.ingest_dir.as_os_str().is_empty() {
        let m = write_texture_corpus(out, cfg.image_size, cfg.corpus.train_count, cfg.corpus.val_count, seed)?;
        info!("wrote {} textures to {}", m.entries.len(), out.display());
    } else {
        let count = cfg.corpus.train_count + cfg.corpus.val_count;
        let report = prepare_natural_corpus(
            &cfg.paths.ingest_dir,
            out,
            cfg.image_size,
            count,
            cfg.corpus.val_fraction,
            seed,
        )?;
        info!(
            "wrote {} crops to {} ({} unreadable, {} degenerate)",
            report.manifest.entries.len(),
            out.display(),
            report.unreadable,
            report.degenerate
        );
    }
    Ok(())
}

fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let corpus = Corpus::load(&cfg.paths.corpus_dir, cfg.image_size)?;
    let tc = cfg.train_config();
    let dir = &cfg.paths.checkpoint_dir;
    std::fs::create_dir_all(dir)?;
    let (mut model, state, metrics) = if cfg.train.resume {
        let (model, state, metrics) = load_resume_point(dir)?;
        info!("resuming after epoch {}", state.epochs_done);
        (model, state, metrics)
    } else {
        let model = build_getnet(
            cfg.image_size,
            cfg.base_channels(),
            derive_seed(cfg.seed, SeedPurpose::ModelInit),
        )?;
        let state = TrainState::fresh(&model);
        (model, state, Vec::new())
    };
    io::write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    let report = train_from(&mut model, state, metrics, &corpus, &tc)?;
    model.save(&cfg.paths.model)?;
    info!(
        "final validation loss {:.5} (constant predictor {:.5}); model written to {}",
        report.final_val_loss,
        report.constant_val_loss,
        cfg.paths.model.display()
    );
    Ok(())
}

fn load_model(cfg: &RunConfig) -> Result<GetNetModel> {
    let model = GetNetModel::load(&cfg.paths.model)?;
    if model.input_size() != cfg.image_size {
        return Err(Error::Config(format!(
            "model {} expects {}x{} images but image_size is {}",
            cfg.paths.model.display(),
            model.input_size(),
            model.input_size(),
            cfg.image_size
        )));
    }
    Ok(model)
}

fn correct_cmd(cfg: &RunConfig, input: &Path, output: &Path, baseline: bool) -> Result<()> {
    let v = io::load_image(input)?;
    let corrected = if baseline {
        baseline_correct(&v, &cfg.baseline)?
    } else {
        let model = GetNetModel::load(&cfg.paths.model)?;
        correct_image(&model, &v)?
    };
    io::save_image(&corrected, output)
}

fn phantoms_for(cfg: &RunConfig) -> Result<Vec<Phantom>> {
    if cfg.paths.phantom_dir.join(MANIFEST_FILE).exists() {
        let phantoms = load_phantom_set(&cfg.paths.phantom_dir)?;
        if let Some(p) = phantoms.iter().find(|p| p.image.dims() != (cfg.image_size, cfg.image_size)) {
            return Err(Error::Config(format!(
                "phantoms in {} are {}x{} but image_size is {}",
                cfg.paths.phantom_dir.display(),
                p.image.width(),
                p.image.height(),
                cfg.image_size
            )));
        }
        Ok(phantoms)
    } else {
        info!(
            "{} has no manifest; generating {} phantoms in memory",
            cfg.paths.phantom_dir.display(),
            cfg.corpus.phantom_count
        );
        phantom_set(
            cfg.image_size,
            cfg.corpus.phantom_count,
            derive_seed(cfg.seed, SeedPurpose::Phantoms),
        )
    }
}

fn methods_for(cfg: &RunConfig, need_model: bool) -> Result<(Option<GetNetCorrector>, BaselineCorrector)> {
    let getnet = if cfg.paths.model.exists() {
        Some(GetNetCorrector { model: load_model(cfg)? })
    } else if need_model {
        return Err(Error::Config(format!("model {} not found", cfg.paths.model.display())));
    } else {
        warn!("model {} not found; scoring the baseline only", cfg.paths.model.display());
        None
    };
    Ok((getnet, BaselineCorrector { config: cfg.baseline }))
}

fn evaluate_cmd(cfg: &RunConfig) -> Result<()> {
    let phantoms = phantoms_for(cfg)?;
    let (getnet, baseline) = methods_for(cfg, false)?;
    let mut methods: Vec<&dyn Corrector> = Vec::new();
    if let Some(g) = &getnet {
        methods.push(g);
    }
    methods.push(&baseline);
    let fg = cfg.fieldgen_config(SeedPurpose::Evaluation);
    let mut report = evaluate_dataset(&phantoms, &methods, &fg, fg.seed)?;
    report.config = cfg.to_toml();

    let dir = &cfg.paths.report_dir;
    std::fs::create_dir_all(dir)?;
    io::write_atomic(&dir.join("eval.csv"), report.to_csv().as_bytes())?;
    let table = report.to_table();
    io::write_atomic(&dir.join("eval.txt"), table.as_bytes())?;
    if cfg.eval.per_sample {
        io::write_atomic(&dir.join("eval_samples.csv"), report.samples_csv().as_bytes())?;
    }
    print!("{table}");
    Ok(())
}

fn bench_cmd(cfg: &RunConfig) -> Result<()> {
    let model = if cfg.paths.model.exists() {
        load_model(cfg)?
    } else {
        info!("model not found; timing a freshly initialized network of the same shape");
        build_getnet(
            cfg.image_size,
            cfg.base_channels(),
            derive_seed(cfg.seed, SeedPurpose::ModelInit),
        )?
    };
    let seed = derive_seed(cfg.seed, SeedPurpose::Bench);
    let fg = cfg.fieldgen_config(SeedPurpose::Bench);
    let images = phantom_set(cfg.image_size, cfg.eval.bench_images, seed)?
        .iter()
        .enumerate()
        .map(|(i, p)| corrupt_sample(&p.image, &fg, fg.seed, i))
        .collect::<Result<Vec<_>>>()?;

    let getnet = GetNetCorrector { model };
    let baseline = BaselineCorrector { config: cfg.baseline };
    let methods: [&dyn Corrector; 2] = [&getnet, &baseline];
    let mut csv = String::from("method,image,seconds\n");
    let mut summary = format!(
        "Per-image correction time at {0}x{0} ({1} images, {2} warm-up)\n\n",
        cfg.image_size, cfg.eval.bench_images, cfg.eval.warmup
    );
    let mut means = Vec::new();
    for m in methods {
        let times = time_each(m, &images, cfg.eval.warmup)?;
        for (i, t) in times.iter().enumerate() {
            let _ = writeln!(csv, "{},{},{}", m.name(), i, t);
        }
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        let _ = writeln!(summary, "{:<10} {:>10.3} ms", m.name(), mean * 1e3);
        means.push(mean);
    }
    let _ = writeln!(summary, "\nGetNet / LogPoly time ratio: {:.3}", means[0] / means[1]);

    let dir = &cfg.paths.report_dir;
    std::fs::create_dir_all(dir)?;
    io::write_atomic(&dir.join("bench.csv"), csv.as_bytes())?;
    io::write_atomic(&dir.join("bench.txt"), summary.as_bytes())?;
    print!("{summary}");
    Ok(())
}
