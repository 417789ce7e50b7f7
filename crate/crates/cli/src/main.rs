//! `semclip` command-line driver.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use semclip_core::cls::{csv_header, csv_line};
use semclip_core::config::{Ablation, RunConfig};
use semclip_core::eval::MetricsReport;
use semclip_core::imageio::{
    manifest_classes, read_pgm, read_samples, write_map_pair, write_samples,
};
use semclip_core::pipeline::{
    check_classes, checkpoint_classes, evaluate, finetune, init_checkpoint, Model,
};
use semclip_core::store::{surgery_copy_qkv_to_vvv, Checkpoint};
use semclip_core::synth::{sample_episode, SemSample, SynthConfig};
use semclip_core::text::DEFAULT_CLASSES;
use semclip_core::tuner::loss_curve_csv;
use semclip_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "semclip",
    version,
    about = "Few-shot SEM defect segmentation and classification"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. They override values from `--config`.
#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    k_shot: Option<usize>,
    #[arg(long, global = true)]
    alpha: Option<f32>,
    #[arg(long, global = true)]
    tau: Option<f32>,
    /// Ablation switch; repeat for several.
    #[arg(long = "ablate", global = true, value_name = "FLAG")]
    ablate: Vec<String>,
    /// Inference worker threads, 0 for one per logical core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Prompt library JSON.
    #[arg(long, global = true)]
    prompts: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Extra `key=value` config overrides.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic N-way K-shot episode.
    Gen {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        /// Output directory; gets `support/` and `query/`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a seeded random backbone with surgery applied.
    Init {
        /// Comma-separated class list; defaults to the first N built-in classes.
        #[arg(long)]
        classes: Option<String>,
        /// Read the class list from a sample directory's manifest instead.
        #[arg(long, conflicts_with = "classes")]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild the V-V branch of a checkpoint from its QKV weights.
    Surgery {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the transformation layer and classifier head on a support set.
    Finetune {
        /// Support sample directory.
        #[arg(long)]
        data: PathBuf,
        /// Where to write the tuned checkpoint; defaults to overwriting the input.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for the loss curves.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Anomaly maps for one image or a sample directory.
    Segment {
        #[arg(long, conflicts_with = "data", required_unless_present = "data")]
        image: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output stem for a single image: writes `<stem>.f32` and `<stem>.pgm`.
        #[arg(long)]
        out_map: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Class probabilities as CSV.
    Classify {
        #[arg(long, conflicts_with = "data", required_unless_present = "data")]
        image: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full metrics over a labelled query directory.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Skip writing per-image maps.
        #[arg(long)]
        no_maps: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numeric(_) => 4,
        Error::Json(_) => 1,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("semclip: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("`--set {kv}`: expected KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if let Some(v) = common.k_shot {
        cfg.k_shot = v;
    }
    if let Some(v) = common.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = common.tau {
        cfg.tau = v;
    }
    if let Some(v) = common.threads {
        cfg.threads = v;
    }
    if let Some(p) = &common.prompts {
        cfg.prompts = Some(p.clone());
    }
    if let Some(p) = &common.checkpoint {
        cfg.checkpoint = p.clone();
    }
    for name in &common.ablate {
        cfg.ablations.set(name.parse::<Ablation>()?);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    match cli.command {
        Command::Gen { n, k, m, out } => cmd_gen(&cfg, n, k, m, &out),
        Command::Init { classes, data, out } => cmd_init(&cfg, classes, data, out),
        Command::Surgery { out } => cmd_surgery(&cfg, out),
        Command::Finetune { data, out, out_dir } => cmd_finetune(&cfg, &data, out, out_dir),
        Command::Segment {
            image,
            data,
            out_map,
            out_dir,
        } => cmd_segment(&cfg, image, data, out_map, out_dir),
        Command::Classify { image, data, out } => cmd_classify(&cfg, image, data, out),
        Command::Evaluate {
            data,
            out_dir,
            no_maps,
        } => cmd_evaluate(&cfg, &data, out_dir, no_maps),
    }
}

fn cmd_gen(
    cfg: &RunConfig,
    n: Option<usize>,
    k: Option<usize>,
    m: Option<usize>,
    out: &Path,
) -> Result<()> {
    let synth = SynthConfig {
        image_size: cfg.vit.image_size,
        text_banner: cfg.text_banner,
    };
    let (n, k, m) = (
        n.unwrap_or(cfg.n_way),
        k.unwrap_or(cfg.k_shot),
        m.unwrap_or(cfg.m_query),
    );
    let episode = sample_episode(n, k, m, cfg.seed, synth)?;
    write_samples(&out.join("support"), &episode.support, &episode.classes)?;
    write_samples(&out.join("query"), &episode.query, &episode.classes)?;
    println!(
        "wrote {} support and {} query samples over {} classes to {}",
        episode.support.len(),
        episode.query.len(),
        episode.classes.len(),
        out.display()
    );
    Ok(())
}

fn cmd_init(
    cfg: &RunConfig,
    classes: Option<String>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let classes: Vec<String> = match (classes, data) {
        (Some(list), _) => list.split(',').map(|c| c.trim().to_string()).collect(),
        (None, Some(dir)) => manifest_classes(&dir)?,
        (None, None) => {
            if cfg.n_way > DEFAULT_CLASSES.len() {
                return Err(Error::Config(format!(
                    "n_way {} exceeds the {} built-in classes",
                    cfg.n_way,
                    DEFAULT_CLASSES.len()
                )));
            }
            DEFAULT_CLASSES[..cfg.n_way]
                .iter()
                .map(|c| c.to_string())
                .collect()
        }
    };
    let (mut ckpt, report) = init_checkpoint(cfg, &classes)?;
    ckpt.metadata
        .insert("run.config".into(), portable_config(cfg));
    let path = out.unwrap_or_else(|| cfg.checkpoint.clone());
    ckpt.save(&path)?;
    println!(
        "wrote {} ({} tensors, {} V-V pairs copied, classes {})",
        path.display(),
        ckpt.tensors.len(),
        report.copied_pairs.len(),
        classes.join(",")
    );
    Ok(())
}

/// The run config without file locations, so the checkpoint bytes depend
/// only on settings and seed.
fn portable_config(cfg: &RunConfig) -> String {
    cfg.to_config_string()
        .lines()
        .filter(|l| {
            !["checkpoint ", "data_dir ", "out_dir "]
                .iter()
                .any(|k| l.starts_with(k))
        })
        .map(|l| format!("{l}\n"))
        .collect()
}

fn cmd_surgery(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let ckpt = Checkpoint::load(&cfg.checkpoint)?;
    let (ckpt, report) = surgery_copy_qkv_to_vvv(&ckpt, None)?;
    let path = out.unwrap_or_else(|| cfg.checkpoint.clone());
    ckpt.save(&path)?;
    println!(
        "copied {} tensors into the V-V branch; untouched checksum {:016x} -> {:016x}; wrote {}",
        report.copied_pairs.len(),
        report.checksum_before,
        report.checksum_after,
        path.display()
    );
    Ok(())
}

type Named = Vec<(String, SemSample)>;

fn load_labelled(ckpt: &Checkpoint, dir: &Path) -> Result<(Vec<String>, Named)> {
    let classes = checkpoint_classes(ckpt)?;
    check_classes(&classes, &manifest_classes(dir)?)?;
    let samples = read_samples(dir, &classes)?
        .into_iter()
        .map(|s| (s.name, s.sample))
        .collect();
    Ok((classes, samples))
}

fn cmd_finetune(
    cfg: &RunConfig,
    data: &Path,
    out: Option<PathBuf>,
    out_dir: Option<PathBuf>,
) -> Result<()> {
    let ckpt = Checkpoint::load(&cfg.checkpoint)?;
    let (_, samples) = load_labelled(&ckpt, data)?;
    let support: Vec<SemSample> = samples.into_iter().map(|(_, s)| s).collect();
    let tuned = finetune(&ckpt, cfg, &support)?;
    let path = out.unwrap_or_else(|| cfg.checkpoint.clone());
    tuned.checkpoint.save(&path)?;
    let dir = out_dir.unwrap_or_else(|| cfg.out_dir.clone());
    fs::create_dir_all(&dir)?;
    fs::write(
        dir.join("transform_loss.csv"),
        loss_curve_csv(&tuned.transform_curve),
    )?;
    fs::write(dir.join("head_loss.csv"), loss_curve_csv(&tuned.head_curve))?;
    let last = |c: &[f64]| {
        c.last()
            .map_or("skipped".to_string(), |v| format!("{v:.4}"))
    };
    println!(
        "fine-tuned on {} images; final transform loss {}, head loss {}; wrote {}",
        support.len(),
        last(&tuned.transform_curve),
        last(&tuned.head_curve),
        path.display()
    );
    Ok(())
}

fn load_model(cfg: &RunConfig) -> Result<Model> {
    Model::load(&Checkpoint::load(&cfg.checkpoint)?, cfg)
}

/// Images from either a single PGM or a sample directory, with names.
fn load_images(
    model: &Model,
    image: Option<PathBuf>,
    data: Option<PathBuf>,
) -> Result<Vec<(String, semclip_core::Tensor)>> {
    match (image, data) {
        (Some(path), _) => {
            let name = path
                .file_stem()
                .map_or_else(|| "image".to_string(), |s| s.to_string_lossy().into_owned());
            Ok(vec![(name, read_pgm(&path)?)])
        }
        (None, Some(dir)) => {
            check_classes(&model.backbone.classes, &manifest_classes(&dir)?)?;
            Ok(read_samples(&dir, &model.backbone.classes)?
                .into_iter()
                .map(|s| (s.name, s.sample.image))
                .collect())
        }
        (None, None) => Err(Error::Config("give --image or --data".into())),
    }
}

fn cmd_segment(
    cfg: &RunConfig,
    image: Option<PathBuf>,
    data: Option<PathBuf>,
    out_map: Option<PathBuf>,
    out_dir: Option<PathBuf>,
) -> Result<()> {
    let model = load_model(cfg)?;
    let single = image.is_some();
    let images = load_images(&model, image, data)?;
    let refs: Vec<_> = images.iter().map(|(_, img)| img).collect();
    let outputs = model.infer_all(&refs)?;
    let dir = out_dir.unwrap_or_else(|| cfg.out_dir.join("maps"));
    for ((name, _), out) in images.iter().zip(&outputs) {
        let stem = match (&out_map, single) {
            (Some(stem), true) => stem.clone(),
            _ => {
                fs::create_dir_all(&dir)?;
                dir.join(name)
            }
        };
        write_map_pair(&stem, &out.anomaly)?;
        let peak = out.anomaly.data().iter().copied().fold(0.0f32, f32::max);
        println!("{name}: peak anomaly {peak:.4} -> {}", stem.display());
    }
    Ok(())
}

fn cmd_classify(
    cfg: &RunConfig,
    image: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let model = load_model(cfg)?;
    let images = load_images(&model, image, data)?;
    let refs: Vec<_> = images.iter().map(|(_, img)| img).collect();
    let outputs = model.infer_all(&refs)?;
    let classes = &model.text.class_names;
    let mut csv = csv_header(classes) + "\n";
    for ((name, _), o) in images.iter().zip(&outputs) {
        csv.push_str(&csv_line(name, &o.probs, classes));
        csv.push('\n');
    }
    match out {
        Some(path) => fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_evaluate(
    cfg: &RunConfig,
    data: &Path,
    out_dir: Option<PathBuf>,
    no_maps: bool,
) -> Result<()> {
    let model = load_model(cfg)?;
    let (classes, samples) = load_labelled(&Checkpoint::load(&cfg.checkpoint)?, data)?;
    let (names, query): (Vec<String>, Vec<SemSample>) = samples.into_iter().unzip();
    let result = evaluate(&model, &query)?;
    let dir = out_dir.unwrap_or_else(|| cfg.out_dir.clone());
    fs::create_dir_all(&dir)?;
    let report = &result.report;
    fs::write(dir.join("metrics.json"), report.to_json()?)?;
    fs::write(
        dir.join("metrics.csv"),
        format!("{}\n{}\n", MetricsReport::CSV_HEADER, report.csv_row()),
    )?;
    let mut csv = csv_header(&classes) + ",true_class\n";
    for ((name, s), o) in names.iter().zip(&query).zip(&result.outputs) {
        csv.push_str(&csv_line(name, &o.probs, &classes));
        csv.push_str(&format!(",{}\n", classes[s.label]));
    }
    fs::write(dir.join("predictions.csv"), csv)?;
    if !no_maps {
        let maps = dir.join("maps");
        fs::create_dir_all(&maps)?;
        for (name, o) in names.iter().zip(&result.outputs) {
            write_map_pair(&maps.join(name), &o.anomaly)?;
        }
    }
    println!(
        "iAUROC {:.4}  pAUROC {:.4}  F1-max {:.4}  accuracy {:.4}  macro F1 {:.4}",
        report.iauroc, report.pauroc, report.f1_max, report.accuracy, report.macro_f1
    );
    println!("wrote {}", dir.join("metrics.json").display());
    Ok(())
}
