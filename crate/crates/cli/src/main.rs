//! `pointdiff` command-line front end: training, downstream tasks,
//! evaluation and synthetic data.
//!
//! Settings come from the built-in defaults, then `--config`, then flags.
//! Inference commands take the architecture from the checkpoints; only
//! `--mask-ratio` and `--mask-strategy` may override it there.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pointdiff::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointKind};
use pointdiff::config::RunConfig;
use pointdiff::data_io::{load_cloud, normalize, save_cloud, synth_shape, CloudFormat, DatasetManifest, NormRecord, ShapeKind, Split};
use pointdiff::metrics::{evaluate, MetricReport};
use pointdiff::model::{Decoder, Encoder, ModelConfig};
use pointdiff::optim::ParamStore;
use pointdiff::tasks::{self, CompressedBlob};
use pointdiff::training::{self, CheckpointRecord, LossSetting, TrainReport};
use pointdiff::{MaskStrategy, Point, PointCloud, Precision, Real};

#[derive(Parser)]
#[command(name = "pointdiff", version, about = "Masked-patch point-cloud reconstruction with a diffusion decoder")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration file (key = value with [sections]).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long = "ckpt-encoder", global = true)]
    ckpt_encoder: Option<PathBuf>,
    #[arg(long = "ckpt-decoder", global = true)]
    ckpt_decoder: Option<PathBuf>,
    #[arg(long = "mask-ratio", global = true)]
    mask_ratio: Option<f64>,
    #[arg(long = "mask-strategy", global = true)]
    mask_strategy: Option<MaskStrategy>,
    #[arg(long, global = true)]
    timesteps: Option<usize>,
    #[arg(long = "quant-bits", global = true)]
    quant_bits: Option<u8>,
    #[arg(long, global = true)]
    factor: Option<usize>,
    /// `a` (entire object) or `b` (masked only).
    #[arg(long = "loss-setting", global = true)]
    loss_setting: Option<LossSetting>,
    /// Voxel grid resolution for JSD.
    #[arg(long, global = true)]
    grid: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain the encoder on the train split of a dataset manifest.
    TrainEncoder {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train the decoder against a frozen encoder.
    TrainDecoder {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Mask a cloud and regenerate the masked patches.
    Reconstruct {
        #[arg(long)]
        input: PathBuf,
    },
    /// Complete a partial cloud.
    Complete {
        #[arg(long)]
        input: PathBuf,
        /// Masked-patch centers, required with position embeddings.
        #[arg(long)]
        centers: Option<PathBuf>,
    },
    /// Resample a cloud at the decoder's upsampling factor.
    Upsample {
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "visible-fraction")]
        visible_fraction: Option<f64>,
    },
    /// Write the visible patches of a cloud as a compressed blob.
    Compress {
        #[arg(long)]
        input: PathBuf,
    },
    /// Rebuild a cloud from a compressed blob.
    Decompress {
        #[arg(long)]
        input: PathBuf,
    },
    /// Compare generated clouds with references and write a CSV report.
    Eval {
        #[arg(long)]
        gen: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Generate a synthetic shape.
    Synth {
        #[arg(long)]
        kind: ShapeKind,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
    /// Export the reverse diffusion chain of one reconstruction.
    Trace {
        #[arg(long)]
        input: PathBuf,
        /// Write one frame per reverse step instead of only the final cloud.
        #[arg(long)]
        steps: bool,
    },
}

/// Errors that should exit with status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let line: Vec<&str> = text
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:"))
                .filter(|l| !l.is_empty() && !l.starts_with("tip:") && !l.starts_with("For more information"))
                .collect();
            eprintln!("{}", line.join(" "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    match Precision::from_env()? {
        Precision::F32 => dispatch::<f32>(&cli, cfg),
        Precision::F64 => dispatch::<f64>(&cli, cfg),
    }
}

fn resolve_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).map_err(|e| usage(format!("config {}: {e}", p.display())))?,
        None => RunConfig::default(),
    };
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = &c.out {
        cfg.out = Some(v.clone());
    }
    if let Some(v) = c.mask_ratio {
        cfg.model.mask_ratio = v;
    }
    if let Some(v) = c.mask_strategy {
        cfg.model.mask_strategy = v;
    }
    if let Some(v) = c.timesteps {
        cfg.model.timesteps = v;
    }
    if let Some(v) = c.quant_bits {
        cfg.tasks.quant_bits = v;
    }
    if let Some(v) = c.factor {
        cfg.model.upsample_factor = v;
    }
    if let Some(v) = c.loss_setting {
        cfg.decoder_train.loss_setting = v;
    }
    if let Some(v) = c.grid {
        cfg.eval.grid_resolution = v;
    }
    Ok(cfg)
}

fn dispatch<S: Real>(cli: &Cli, mut cfg: RunConfig) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::TrainEncoder { manifest } => {
            cfg.validate()?;
            let out = out_dir(&cfg)?;
            let data = load_dataset(&cfg, manifest.as_deref())?;
            let tc = training::TrainConfig {
                seed: cfg.seed,
                ..cfg.encoder_train.clone()
            };
            let mut hook = checkpoint_hook(CheckpointKind::Encoder, &cfg.model, &out);
            let (enc, report) = training::pretrain_encoder_with::<S>(&data, &cfg.model, &tc, Some(&mut hook))?;
            finish_training(&cfg, &out, Checkpoint::from_encoder(&enc), &report, "encoder", tc.log_every)
        }
        Command::TrainDecoder { manifest } => {
            cfg.validate()?;
            let out = out_dir(&cfg)?;
            let enc_ck = load_ckpt(c.ckpt_encoder.as_deref(), "--ckpt-encoder")?;
            let enc: Encoder<S> = enc_ck.to_encoder()?;
            let data = load_dataset(&cfg, manifest.as_deref())?;
            let tc = training::TrainConfig {
                seed: cfg.seed,
                ..cfg.decoder_train.clone()
            };
            let schedule = cfg.noise_schedule()?;
            let mut hook = checkpoint_hook(CheckpointKind::Decoder, &cfg.model, &out);
            let (dec, report) = training::train_decoder_with::<S>(&data, &enc, &cfg.model, &tc, &schedule, Some(&mut hook))?;
            finish_training(&cfg, &out, Checkpoint::from_decoder(&dec), &report, "decoder", tc.log_every)
        }
        Command::Reconstruct { input } => {
            let (enc, dec, schedule) = load_models::<S>(c, &mut cfg)?;
            let (cloud, norm) = load_normalized(input)?;
            let recon = tasks::reconstruct(&cloud, &enc, &dec, &schedule, cfg.seed)?;
            write_output(&cfg, &norm.invert(&recon), input, "_recon.ply")
        }
        Command::Complete { input, centers } => {
            let (enc, dec, schedule) = load_models::<S>(c, &mut cfg)?;
            let (cloud, norm) = load_normalized(input)?;
            let side = match centers {
                Some(p) => Some(
                    load_cloud(p, CloudFormat::from_path(p)?)
                        .with_context(|| format!("reading centers {}", p.display()))?
                        .points()
                        .iter()
                        .map(|q| apply_norm(&norm, q))
                        .collect::<Vec<Point>>(),
                ),
                None => None,
            };
            if side.is_none() && dec.cfg.use_position_embedding {
                return Err(usage("complete with position embedding needs --centers"));
            }
            let done = tasks::complete(&cloud, side.as_deref(), &enc, &dec, &schedule, cfg.seed)?;
            write_output(&cfg, &norm.invert(&done), input, "_complete.ply")
        }
        Command::Upsample { input, visible_fraction } => {
            let (enc, dec, schedule) = load_models::<S>(c, &mut cfg)?;
            let (cloud, norm) = load_normalized(input)?;
            let frac = visible_fraction.unwrap_or(cfg.tasks.visible_fraction);
            let up = tasks::upsample(&cloud, &enc, &dec, &schedule, frac, cfg.seed)?;
            write_output(&cfg, &norm.invert(&up), input, "_up.ply")
        }
        Command::Compress { input } => {
            let mut model = match &c.ckpt_encoder {
                Some(p) => load_ckpt(Some(p), "--ckpt-encoder")?.config,
                None => cfg.model.clone(),
            };
            apply_mask_flags(c, &mut model);
            let cloud = load_input(input)?;
            let blob = tasks::compress(&cloud, &model, cfg.seed, cfg.tasks.quant_bits)?;
            let bytes = blob.to_bytes();
            let path = output_path(&cfg, input, ".dpc");
            write_file(&path, &bytes)?;
            cfg.write_resolved(parent_dir(&path))?;
            println!(
                "{}: {} bytes, {:.6} bpp",
                path.display(),
                bytes.len(),
                tasks::bpp(&blob, cloud.len())?
            );
            Ok(())
        }
        Command::Decompress { input } => {
            let (enc, dec, schedule) = load_models::<S>(c, &mut cfg)?;
            let bytes = std::fs::read(input).with_context(|| format!("reading blob {}", input.display()))?;
            let blob = CompressedBlob::from_bytes(&bytes)?;
            let cloud = tasks::decompress(&blob, &enc, &dec, &schedule, cfg.seed)?;
            write_output(&cfg, &cloud, input, "_decoded.ply")
        }
        Command::Eval { gen, reference } => {
            let (ids, gen_set) = load_set(gen)?;
            let (_, ref_set) = load_set(reference)?;
            let report = evaluate(&gen_set, &ref_set, Some(&ids), &cfg.eval)?;
            let csv = metrics_csv(&report);
            match &cfg.out {
                Some(p) => {
                    write_file(p, csv.as_bytes())?;
                    cfg.write_resolved(parent_dir(p))?;
                }
                None => print!("{csv}"),
            }
            Ok(())
        }
        Command::Synth { kind, n, noise } => {
            let cloud = synth_shape(*kind, *n, *noise, cfg.seed)?;
            let path = cfg.out.clone().ok_or_else(|| usage("synth needs --out"))?;
            save_cloud(cloud.points(), &path, CloudFormat::from_path(&path)?)?;
            cfg.write_resolved(parent_dir(&path))?;
            Ok(())
        }
        Command::Trace { input, steps } => {
            let (enc, dec, schedule) = load_models::<S>(c, &mut cfg)?;
            let (cloud, norm) = load_normalized(input)?;
            let rec = tasks::reconstruct_traced(&cloud, &enc, &dec, &schedule, cfg.seed, *steps)?;
            let dir = cfg.out.clone().unwrap_or_else(|| sibling(input, "_trace"));
            let frames: Vec<Vec<Point>> = match rec.frames {
                Some(fs) => fs,
                None => vec![rec.cloud.into_points()],
            };
            let frames: Vec<Vec<Point>> = frames
                .into_iter()
                .map(|f| Ok(norm.invert(&PointCloud::new(f)?).into_points()))
                .collect::<Result<_>>()?;
            if *steps {
                tasks::export_trace(&frames, &dir)?;
            } else {
                std::fs::create_dir_all(&dir)?;
                save_cloud(&frames[0], &dir.join("final.ply"), CloudFormat::AsciiPly)?;
            }
            cfg.write_resolved(&dir)?;
            Ok(())
        }
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out.clone().ok_or_else(|| usage("training needs --out <dir> or [run] out"))?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn load_dataset(cfg: &RunConfig, flag: Option<&Path>) -> Result<Vec<PointCloud>> {
    let path = flag
        .map(Path::to_path_buf)
        .or_else(|| cfg.data.manifest.clone())
        .ok_or_else(|| usage("training needs --manifest or [data] manifest"))?;
    let manifest = DatasetManifest::load(&path, cfg.data.target_points)
        .with_context(|| format!("reading manifest {}", path.display()))?;
    let data: Vec<PointCloud> = manifest.materialize(Split::Train)?.into_iter().map(|(_, c)| c).collect();
    if data.is_empty() {
        bail!("manifest {} has no train entries", path.display());
    }
    Ok(data)
}

fn checkpoint_hook<'a, S: Real>(
    kind: CheckpointKind,
    model: &'a ModelConfig,
    out: &'a Path,
) -> impl FnMut(&ParamStore<S>, &CheckpointRecord) -> pointdiff::Result<()> + 'a {
    move |params, rec| {
        eprintln!("checkpoint step {} epoch {} mean loss {:.6e}", rec.step, rec.epoch, rec.mean_loss);
        let ck = Checkpoint::from_params(kind, model, params);
        save_checkpoint(&ck, &out.join(format!("{}_step{:06}.ckpt", kind.name(), rec.step)))
    }
}

fn finish_training(cfg: &RunConfig, out: &Path, ck: Checkpoint, report: &TrainReport, name: &str, log_every: usize) -> Result<()> {
    for r in report.steps.iter().filter(|r| r.step % log_every == 0) {
        eprintln!("step {} epoch {} loss {:.6e}", r.step, r.epoch, r.loss);
    }
    save_checkpoint(&ck, &out.join(format!("{name}.ckpt")))?;
    report.write_loss_csv(&out.join(format!("{name}_loss.csv")))?;
    cfg.write_resolved(out)?;
    if let Some(l) = report.final_loss() {
        println!("{name}: final loss {l:.6e}");
    }
    Ok(())
}

fn load_ckpt(path: Option<&Path>, flag: &str) -> Result<Checkpoint> {
    let path = path.ok_or_else(|| usage(format!("this command needs {flag}")))?;
    if !path.exists() {
        bail!("checkpoint not found: {}", path.display());
    }
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn apply_mask_flags(c: &Common, model: &mut ModelConfig) {
    if let Some(r) = c.mask_ratio {
        model.mask_ratio = r;
    }
    if let Some(s) = c.mask_strategy {
        model.mask_strategy = s;
    }
}

/// Loads both checkpoints and the noise schedule matching the decoder.
fn load_models<S: Real>(c: &Common, cfg: &mut RunConfig) -> Result<(Encoder<S>, Decoder<S>, pointdiff::diffusion::NoiseSchedule)> {
    let enc_ck = load_ckpt(c.ckpt_encoder.as_deref(), "--ckpt-encoder")?;
    let dec_ck = load_ckpt(c.ckpt_decoder.as_deref(), "--ckpt-decoder")?;
    let mut enc: Encoder<S> = enc_ck.to_encoder()?;
    let mut dec: Decoder<S> = dec_ck.to_decoder()?;
    if let Some(t) = c.timesteps {
        if t != dec.cfg.timesteps {
            bail!("--timesteps {t} does not match the decoder checkpoint ({})", dec.cfg.timesteps);
        }
    }
    apply_mask_flags(c, &mut enc.cfg);
    apply_mask_flags(c, &mut dec.cfg);
    dec.cfg.validate()?;
    cfg.model = dec.cfg.clone();
    let schedule = cfg.noise_schedule()?;
    Ok((enc, dec, schedule))
}

fn load_input(path: &Path) -> Result<PointCloud> {
    load_cloud(path, CloudFormat::from_path(path)?).with_context(|| format!("reading {}", path.display()))
}

fn load_normalized(path: &Path) -> Result<(PointCloud, NormRecord)> {
    Ok(normalize(&load_input(path)?))
}

fn apply_norm(n: &NormRecord, p: &Point) -> Point {
    std::array::from_fn(|k| (p[k] - n.centroid[k]) / n.scale)
}

fn sibling(input: &Path, suffix: &str) -> PathBuf {
    let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    input.with_file_name(format!("{stem}{suffix}"))
}

fn output_path(cfg: &RunConfig, input: &Path, suffix: &str) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| sibling(input, suffix))
}

fn parent_dir(p: &Path) -> &Path {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d)?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_output(cfg: &RunConfig, cloud: &PointCloud, input: &Path, suffix: &str) -> Result<()> {
    let path = output_path(cfg, input, suffix);
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d)?;
    }
    save_cloud(cloud.points(), &path, CloudFormat::AsciiPly)?;
    cfg.write_resolved(parent_dir(&path))?;
    println!("{}: {} points", path.display(), cloud.len());
    Ok(())
}

/// Clouds from a single file or every `.ply`/`.xyz` file of a directory,
/// sorted by file name; ids are the file stems.
fn load_set(path: &Path) -> Result<(Vec<String>, Vec<PointCloud>)> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ply" | "xyz")))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        bail!("no .ply or .xyz files in {}", path.display());
    }
    let ids = files
        .iter()
        .map(|f| f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
        .collect();
    let clouds = files.iter().map(|f| load_input(f)).collect::<Result<_>>()?;
    Ok((ids, clouds))
}

fn metrics_csv(r: &MetricReport) -> String {
    let mut s = String::from("id,cd,hd\n");
    for it in &r.per_item {
        let _ = writeln!(s, "{},{:.17e},{:.17e}", it.id, it.cd, it.hd);
    }
    let _ = writeln!(s, "mmd_cd,one_nn_cd,jsd,hd");
    let _ = writeln!(s, "{:.17e},{:.17e},{:.17e},{:.17e}", r.mmd_cd, r.one_nn_cd, r.jsd, r.hd);
    s
}
