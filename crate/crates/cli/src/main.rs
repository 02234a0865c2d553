mod config;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use flexvar_core::data::{oracle_classifier, synth_dataset};
use flexvar_core::eval::{self, MetricReport};
use flexvar_core::inference::{decode_at_step, generate};
use flexvar_core::io::{self, Checkpoint};
use flexvar_core::model::ArModel;
use flexvar_core::pyramid::PredictionMode;
use flexvar_core::scheduler::parse_schedule;
use flexvar_core::tasks::{self, EditMask};
use flexvar_core::tokenizer::Tokenizer;
use flexvar_core::training::{self, GradCheckModule};
use flexvar_tensor::rng;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_IO: u8 = 4;
/// Gradient checks fail above this relative error.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "flexvar", version, about = "Scale-wise autoregressive image generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Gt,
    Residual,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Refine,
    Inpaint,
    Outpaint,
    Expand,
}

#[derive(clap::Args)]
struct SampleArgs {
    #[arg(long)]
    ar: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overrides `[sampler] temperature`.
    #[arg(long)]
    temperature: Option<f64>,
    /// Overrides `[sampler] top_k` (0 keeps every code).
    #[arg(long)]
    top_k: Option<usize>,
    /// Overrides `[sampler] guidance`.
    #[arg(long)]
    guidance: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the tokenizer on the synthetic corpus.
    TrainTokenizer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Loss curve as `iter<TAB>loss<TAB>lr` lines.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the transformer on a frozen tokenizer.
    TrainAr {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "gt")]
        mode: Mode,
        /// Continue from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Sample one image; `--out` takes one path per `--at-step` entry.
    Generate {
        #[command(flatten)]
        sample: SampleArgs,
        /// Preset name (`default`, `N-step`) or a list such as `1,2,4,8`.
        #[arg(long, default_value = "default")]
        schedule: String,
        /// Output side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// 1-based steps to decode (default: the last).
        #[arg(long, value_delimiter = ',')]
        at_step: Vec<usize>,
        /// Writes the sampled token pyramid, one scale per line.
        #[arg(long)]
        steps_dump: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        out: Vec<PathBuf>,
    },
    /// Zero-shot editing of an existing image.
    Edit {
        #[command(flatten)]
        sample: SampleArgs,
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long = "in")]
        input: PathBuf,
        /// P5 graymap, 255 = generate. Outpainting defaults to a border.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Border width in pixels for outpainting without a mask.
        #[arg(long, default_value_t = 16)]
        margin: usize,
        /// Schedule for refine/inpaint/outpaint.
        #[arg(long, default_value = "default")]
        schedule: String,
        /// Refinement target side in pixels.
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two directories of P6 images.
    Eval {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        fake: PathBuf,
        /// Adds reconstruction PSNR and codebook use on the real set.
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        /// With `--tokenizer`, adds per-scale token accuracy and
        /// cross-entropy on the real set (classes from the rule classifier).
        #[arg(long)]
        ar: Option<PathBuf>,
        #[arg(long, default_value = "default")]
        schedule: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic corpus as P6 files.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Finite-difference gradient checks.
    GradCheck {
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<flexvar_core::Error>() {
            return match err {
                flexvar_core::Error::InvalidArgument(_) => EXIT_USAGE,
                flexvar_core::Error::NumericFailure(_) => EXIT_NUMERIC,
                flexvar_core::Error::Format(_) | flexvar_core::Error::Io(_) => EXIT_IO,
            };
        }
        if cause.downcast_ref::<flexvar_tensor::TensorError>().is_some() {
            return EXIT_NUMERIC;
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return EXIT_USAGE;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_USAGE
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).with_context(|| format!("reading {}", path.display()))?))
}

/// Replay record: config hash, seed and input/output checkpoint hashes. It
/// is logged and appended to `<out>.manifest`.
struct Manifest {
    fields: Vec<(String, String)>,
}

impl Manifest {
    fn new(command: &str, cfg: &RunConfig, seed: u64) -> Self {
        Self {
            fields: vec![
                ("command".into(), command.into()),
                ("config".into(), sha256_hex(cfg.to_toml().as_bytes())),
                ("seed".into(), seed.to_string()),
            ],
        }
    }

    fn file(&mut self, key: &str, path: &Path) -> Result<()> {
        let h = file_hash(path)?;
        self.fields.push((key.into(), h));
        Ok(())
    }

    fn line(&self) -> String {
        let parts: Vec<String> = self.fields.iter().map(|(k, v)| format!("{k}={v}")).collect();
        parts.join(" ")
    }

    fn write(&self, out: Option<&Path>) -> Result<()> {
        let line = self.line();
        log::info!("manifest {line}");
        if let Some(out) = out {
            let mut path = out.as_os_str().to_owned();
            path.push(".manifest");
            let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::parse(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn load_tokenizer(path: &Path) -> Result<Tokenizer<f32>> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(io::tokenizer_from(&ckpt)?)
}

fn load_ar(path: &Path) -> Result<ArModel<f32>> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(io::ar_from(&ckpt)?)
}

fn open_log(path: Option<&Path>) -> Result<Option<fs::File>> {
    path.map(|p| fs::File::create(p).with_context(|| format!("creating {}", p.display())))
        .transpose()
}

fn latent_grid(tok: &Tokenizer<f32>, size: usize) -> Result<(usize, usize)> {
    let p = tok.config.patch;
    if size == 0 || !size.is_multiple_of(p) {
        bail!(flexvar_core::Error::InvalidArgument(format!(
            "size {size} is not a positive multiple of the patch size {p}"
        )));
    }
    Ok((size / p, size / p))
}

fn list_ppm(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    out.sort();
    Ok(out)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::TrainTokenizer { config, out, log } => {
            let cfg = load_config(config.as_deref())?;
            let (images, _) = synth_dataset(cfg.data.images, cfg.data.seed)?;
            let mut tok = Tokenizer::<f32>::new(cfg.tokenizer.build(), &mut rng::seeded_stream(cfg.seed, 0))?;
            tok.init_codebook_from_data(&images, &mut rng::seeded_stream(cfg.seed, 3))?;
            let mut sink = open_log(log.as_deref())?;
            let report = training::train_tokenizer(
                &mut tok,
                &images,
                &cfg.train_tokenizer.build(cfg.seed),
                sink.as_mut().map(|f| f as &mut dyn Write),
            )?;
            io::tokenizer_checkpoint(&tok).save(&out)?;
            log::info!("final loss {:.5}", report.losses.last().copied().unwrap_or(f64::NAN));
            let mut m = Manifest::new("train-tokenizer", &cfg, cfg.seed);
            m.file("out", &out)?;
            m.write(Some(&out))
        }
        Command::TrainAr {
            config,
            tokenizer,
            out,
            mode,
            init,
            log,
        } => {
            let cfg = load_config(config.as_deref())?;
            let tok = load_tokenizer(&tokenizer)?;
            let mode = match mode {
                Mode::Gt => PredictionMode::Gt,
                Mode::Residual => PredictionMode::Residual,
            };
            let mut model = match &init {
                Some(p) => {
                    let m = load_ar(p)?;
                    if m.config.mode != mode {
                        bail!(flexvar_core::Error::InvalidArgument(format!(
                            "initial checkpoint is in {} mode",
                            m.config.mode.as_str()
                        )));
                    }
                    m
                }
                None => ArModel::new(cfg.model.build(&tok.config, mode), &mut rng::seeded_stream(cfg.seed, 4))?,
            };
            let (images, labels) = synth_dataset(cfg.data.images, cfg.data.seed)?;
            let mut sink = open_log(log.as_deref())?;
            let report = training::train_ar(
                &mut model,
                &tok,
                &images,
                &labels,
                &cfg.train_ar.build(cfg.seed),
                sink.as_mut().map(|f| f as &mut dyn Write),
            )?;
            io::ar_checkpoint(&model).save(&out)?;
            log::info!("final loss {:.5}", report.losses.last().copied().unwrap_or(f64::NAN));
            let mut m = Manifest::new("train-ar", &cfg, cfg.seed);
            m.file("tokenizer", &tokenizer)?;
            if let Some(p) = &init {
                m.file("init", p)?;
            }
            m.file("out", &out)?;
            m.write(Some(&out))
        }
        Command::Generate {
            sample,
            schedule,
            size,
            at_step,
            steps_dump,
            out,
        } => {
            let cfg = load_config(sample.config.as_deref())?;
            let tok = load_tokenizer(&sample.tokenizer)?;
            let model = load_ar(&sample.ar)?;
            let grid = latent_grid(&tok, size)?;
            let schedule = parse_schedule(&schedule, grid)?;
            let sampler = sampler_from(&cfg, &sample);
            let steps = if at_step.is_empty() { vec![schedule.steps()] } else { at_step };
            if steps.len() != out.len() {
                bail!(flexvar_core::Error::InvalidArgument(format!(
                    "{} output paths for {} requested steps",
                    out.len(),
                    steps.len()
                )));
            }
            let g = generate(&model, &tok, sample.class, &schedule, &sampler)?;
            for w in &g.warnings {
                eprintln!("warning: {w}");
            }
            for (&j, path) in steps.iter().zip(&out) {
                let img = decode_at_step(&tok, &g.pyramid, j)?;
                io::write_ppm(path, &img)?;
            }
            if let Some(p) = &steps_dump {
                fs::write(p, g.pyramid.dump())?;
            }
            let mut m = Manifest::new("generate", &cfg, sample.seed);
            m.file("ar", &sample.ar)?;
            m.file("tokenizer", &sample.tokenizer)?;
            for p in &out {
                m.file("out", p)?;
            }
            m.write(Some(&out[0]))
        }
        Command::Edit {
            sample,
            task,
            input,
            mask,
            margin,
            schedule,
            size,
            out,
        } => {
            let cfg = load_config(sample.config.as_deref())?;
            let tok = load_tokenizer(&sample.tokenizer)?;
            let model = load_ar(&sample.ar)?;
            let sampler = sampler_from(&cfg, &sample);
            let image = io::read_ppm(&input)?;
            let (_, h, w) = image.chw()?;
            let grid = (h / tok.config.patch, w / tok.config.patch);
            let load_mask = || -> Result<Option<EditMask>> {
                mask.as_deref()
                    .map(|p| Ok(EditMask::from_gray(&io::read_pgm(p)?)?))
                    .transpose()
            };
            let result = match task {
                Task::Refine => {
                    let target = parse_schedule(&schedule, latent_grid(&tok, size)?)?;
                    tasks::refine(&model, &tok, &image, &target, sample.class, &sampler)?
                }
                Task::Inpaint | Task::Outpaint => {
                    let m = match (load_mask()?, task) {
                        (Some(m), _) => m,
                        (None, Task::Outpaint) => EditMask::border(h, w, margin)?,
                        (None, _) => bail!(flexvar_core::Error::InvalidArgument("inpainting needs --mask".into())),
                    };
                    let s = parse_schedule(&schedule, grid)?;
                    tasks::inpaint(&model, &tok, &image, &m, sample.class, &s, &sampler)?
                }
                Task::Expand => tasks::expand(&model, &tok, &image, sample.class, &sampler)?,
            };
            for w in &result.warnings {
                eprintln!("warning: {w}");
            }
            io::write_ppm(&out, &result.image)?;
            let mut m = Manifest::new("edit", &cfg, sample.seed);
            m.file("ar", &sample.ar)?;
            m.file("tokenizer", &sample.tokenizer)?;
            m.file("in", &input)?;
            m.file("out", &out)?;
            m.write(Some(&out))
        }
        Command::Eval {
            real,
            fake,
            tokenizer,
            ar,
            schedule,
            out,
        } => {
            let real_paths = list_ppm(&real)?;
            let fake_paths = list_ppm(&fake)?;
            let real_imgs = real_paths.iter().map(|p| io::read_ppm(p)).collect::<Result<Vec<_>, _>>()?;
            let fake_imgs = fake_paths.iter().map(|p| io::read_ppm(p)).collect::<Result<Vec<_>, _>>()?;
            let mut report = MetricReport::default();
            report.push("real_images", real_imgs.len() as f64);
            report.push("fake_images", fake_imgs.len() as f64);
            report.push("moment_frechet", eval::moment_frechet(&real_imgs, &fake_imgs)?);
            if real_imgs.len() == fake_imgs.len() && real_imgs.iter().zip(&fake_imgs).all(|(a, b)| a.shape() == b.shape()) {
                let p: f64 = real_imgs
                    .iter()
                    .zip(&fake_imgs)
                    .map(|(a, b)| eval::psnr(a, b))
                    .collect::<Result<Vec<_>, _>>()?
                    .iter()
                    .sum();
                report.push("paired_psnr", p / real_imgs.len() as f64);
            }
            let mut m = Manifest::new("eval", &RunConfig::default(), 0);
            if let Some(tp) = &tokenizer {
                let tok = load_tokenizer(tp)?;
                m.file("tokenizer", tp)?;
                let mut psnr = 0.0;
                let mut pyramids = Vec::new();
                let mut stats = Vec::new();
                let model = ar.as_deref().map(load_ar).transpose()?;
                for img in &real_imgs {
                    psnr += eval::psnr(img, &tok.reconstruct(img)?)?;
                    let (_, h, w) = img.chw()?;
                    let s = parse_schedule(&schedule, (h / tok.config.patch, w / tok.config.patch))?;
                    let z = tok.encode(img)?;
                    let mode = model.as_ref().map_or(PredictionMode::Gt, |m| m.config.mode);
                    let pyr = training::pyramid_for(&z, &s, tok.codebook(), mode)?;
                    if let Some(model) = &model {
                        let class = oracle_classifier(img)?;
                        stats.push(eval::scale_stats(model, tok.codebook(), class, &pyr, &s)?);
                    }
                    pyramids.push(pyr);
                }
                report.push("reconstruction_psnr", psnr / real_imgs.len() as f64);
                report.push(
                    "codebook_utilization",
                    eval::codebook_utilization(&pyramids, tok.config.codebook_size),
                );
                if let Some(ap) = &ar {
                    m.file("ar", ap)?;
                    if stats.iter().any(|s| s.accuracy.len() != stats[0].accuracy.len()) {
                        log::warn!("real images differ in size; per-scale statistics skipped");
                    } else {
                        report.push_scales(&eval::mean_stats(&stats));
                    }
                }
            } else if ar.is_some() {
                bail!(flexvar_core::Error::InvalidArgument("--ar needs --tokenizer".into()));
            }
            print!("{report}");
            if let Some(p) = &out {
                fs::write(p, report.to_string())?;
                m.file("out", p)?;
            }
            m.write(out.as_deref())
        }
        Command::Synth { out, n, seed } => {
            fs::create_dir_all(&out)?;
            let (images, labels) = synth_dataset(n, seed)?;
            for (i, (img, l)) in images.iter().zip(&labels).enumerate() {
                io::write_ppm(&out.join(format!("{i:05}_c{l}.ppm")), img)?;
            }
            log::info!("wrote {n} images to {}", out.display());
            Ok(())
        }
        Command::GradCheck { module, seed } => {
            let module = GradCheckModule::parse(&module)?;
            let summary = training::grad_check(module, seed)?;
            print!("{summary}");
            let worst = summary.max_rel_err();
            println!("max_rel_err\t{worst:.3e}");
            if !(worst < GRAD_TOLERANCE) {
                bail!(flexvar_core::Error::NumericFailure(format!(
                    "gradient check failed: {worst:.3e} >= {GRAD_TOLERANCE:e}"
                )));
            }
            Ok(())
        }
    }
}

fn sampler_from(cfg: &RunConfig, a: &SampleArgs) -> flexvar_core::inference::SamplerConfig {
    let mut s = cfg.sampler.build(a.seed);
    if let Some(t) = a.temperature {
        s.temperature = t;
    }
    if let Some(k) = a.top_k {
        s.top_k = (k > 0).then_some(k);
    }
    if let Some(g) = a.guidance {
        s.guidance = g;
    }
    s
}
