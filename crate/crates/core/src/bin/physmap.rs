use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use physmap::config::{parse_map_choice, PipelineConfig};
use physmap::dissonance::{read_checkpoint, write_checkpoint, Checkpoint, Mode};
use physmap::ingest::{
    load_manifest, read_crops, segment_video, write_crops, write_manifest, CropSequence,
    VideoRecord,
};
use physmap::physmaps::{export_png, generate_maps, read_map, segment_map, write_map};
use physmap::pipeline::{evaluate_records, prepare_records, split_even_odd, train_videos};
use physmap::synth::generate_dataset;
use physmap::{augment, Error, Result};

#[derive(Parser)]
#[command(
    name = "physmap",
    version,
    about = "Physiological maps and audio-visual dissonance for fake video detection"
)]
struct Cli {
    /// TOML configuration; defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Where to write the run record (defaults next to the main output).
    #[arg(long, global = true)]
    run_record: Option<PathBuf>,
    /// Verbose logging and full error details.
    #[arg(long, global = true)]
    debug: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct MapArg {
    /// Map variant, e.g. hr-gray, rr-color (also hrxgray).
    #[arg(long)]
    map: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled synthetic dataset with train/test manifests.
    SynthGen {
        #[arg(long)]
        n_real: Option<usize>,
        #[arg(long)]
        n_fake: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Remove the pulse from fake crops.
        #[arg(long)]
        no_fake_pulse: bool,
    },
    /// Compute per-segment physiological maps.
    GenMaps {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        map: MapArg,
        #[arg(long, value_parser = ["hr", "rr"])]
        signal: Option<String>,
        /// Map mode: gray or color.
        #[arg(long, value_parser = ["gray", "color"])]
        mode: Option<String>,
        #[arg(long)]
        patch: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long, value_parser = ["green_mean", "chrom", "pos"])]
        estimator: Option<String>,
    },
    /// Multiply crops by their maps. Either a whole manifest (maps are
    /// generated on the fly) or one crop file with a precomputed map file.
    Augment {
        #[arg(long, conflicts_with_all = ["map_file", "crops_file"], required_unless_present = "crops_file")]
        manifest: Option<PathBuf>,
        #[arg(long, requires = "map_file")]
        crops_file: Option<PathBuf>,
        #[arg(long, requires = "crops_file")]
        map_file: Option<PathBuf>,
        /// Frame rate of `--crops-file`.
        #[arg(long, default_value_t = 30.0)]
        fps: f64,
        /// Output directory for a manifest, output file for a single crop file.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        map: MapArg,
    },
    /// Train the bi-stream model and write a checkpoint.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<String>,
        #[command(flatten)]
        map: MapArg,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a manifest with a checkpoint and write the report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Export segment-averaged maps as PNG images.
    MapsViz {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        map: MapArg,
        /// Only this video id.
        #[arg(long)]
        video: Option<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthGen { .. } => "synth-gen",
            Command::GenMaps { .. } => "gen-maps",
            Command::Augment { .. } => "augment",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::MapsViz { .. } => "maps-viz",
        }
    }

    fn default_record(&self) -> PathBuf {
        match self {
            Command::SynthGen { out, .. }
            | Command::GenMaps { out, .. }
            | Command::Augment {
                manifest: Some(_),
                out,
                ..
            }
            | Command::MapsViz { out, .. } => out.join("run_record.json"),
            Command::Augment { out, .. } => sibling(out, "run.json"),
            Command::Train { out, .. } => sibling(out, "run.json"),
            Command::Eval { report, .. } => sibling(report, "run.json"),
        }
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

fn apply_map_arg(cfg: &mut PipelineConfig, map: &MapArg) -> Result<()> {
    if let Some(m) = &map.map {
        let (signal, mode) = parse_map_choice(m)?;
        cfg.set_map_choice(signal, mode);
    }
    Ok(())
}

fn configure_workers() -> Result<()> {
    if let Ok(v) = std::env::var("PHYSMAP_WORKERS") {
        let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            Error::Config(format!("PHYSMAP_WORKERS={v:?} is not a positive integer"))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn segment_file(out: &Path, id: &str, index: usize, ext: &str) -> PathBuf {
    out.join(format!("{id}_{index:03}.{ext}"))
}

fn run(cli: &Cli, cfg: &mut PipelineConfig) -> Result<serde_json::Value> {
    match &cli.command {
        Command::SynthGen {
            n_real,
            n_fake,
            out,
            no_fake_pulse,
        } => {
            if let Some(n) = n_real {
                cfg.synth.n_real = *n;
            }
            if let Some(n) = n_fake {
                cfg.synth.n_fake = *n;
            }
            if *no_fake_pulse {
                cfg.synth.sample.fake_pulse = false;
            }
            let manifest = generate_dataset(
                &cfg.synth.sample,
                cfg.synth.n_real,
                cfg.synth.n_fake,
                cfg.seed,
                out,
            )?;
            let records = load_manifest(&manifest)?;
            let (train, test) = split_even_odd(&records, |r| r.label);
            write_manifest(out.join("train.jsonl"), &relative(&train, out))?;
            write_manifest(out.join("test.jsonl"), &relative(&test, out))?;
            Ok(json!({
                "manifest": manifest,
                "videos": records.len(),
                "train": train.len(),
                "test": test.len(),
            }))
        }
        Command::GenMaps {
            manifest,
            out,
            map,
            signal,
            mode,
            patch,
            stride,
            estimator,
        } => {
            apply_map_arg(cfg, map)?;
            if let Some(s) = signal {
                cfg.physmaps.signal = s.parse()?;
            }
            if let Some(m) = mode {
                cfg.physmaps.mode = m.parse()?;
            }
            if let Some(p) = patch {
                cfg.physmaps.patch = *p;
            }
            if let Some(s) = stride {
                cfg.physmaps.stride = *s;
            }
            if let Some(e) = estimator {
                cfg.physio.method = e.parse()?;
            }
            cfg.validate()?;
            let records = load_manifest(manifest)?;
            std::fs::create_dir_all(out)?;
            let mut written = 0;
            for r in &records {
                for seg in segment_video(r, cfg.ingest.segment_seconds)? {
                    let m = generate_maps(&seg.crops, &cfg.physmaps, &cfg.physio)?;
                    write_map(segment_file(out, &r.id, seg.index, "pmap"), &m)?;
                    written += 1;
                }
            }
            Ok(json!({ "maps": written }))
        }
        Command::Augment {
            manifest: None,
            crops_file: Some(crops_file),
            map_file: Some(map_file),
            fps,
            out,
            ..
        } => {
            let crops = read_crops(crops_file, *fps)?;
            let m = read_map(map_file)?;
            let aug = augment::apply_map(&crops, &m)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            write_crops(out, &aug.crops)?;
            Ok(json!({ "crops": out, "frames": aug.crops.len() }))
        }
        Command::Augment {
            manifest: Some(manifest),
            out,
            map,
            ..
        } => {
            apply_map_arg(cfg, map)?;
            let records = load_manifest(manifest)?;
            let mut augmented = Vec::with_capacity(records.len());
            for r in &records {
                let mut frames = Vec::new();
                for seg in segment_video(r, cfg.ingest.segment_seconds)? {
                    let m = generate_maps(&seg.crops, &cfg.physmaps, &cfg.physio)?;
                    frames.push(augment::apply_map(&seg.crops, &m)?.crops.into_frames());
                }
                let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
                let joined = ndarray::concatenate(ndarray::Axis(0), &views)
                    .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
                let rel = PathBuf::from("crops").join(format!("{}.fcs", r.id));
                write_crops(out.join(&rel), &CropSequence::new(joined, r.fps)?)?;
                augmented.push(VideoRecord {
                    crops_path: rel,
                    audio_path: std::path::absolute(&r.audio_path)?,
                    ..r.clone()
                });
            }
            write_manifest(out.join("manifest.jsonl"), &augmented)?;
            Ok(json!({ "videos": augmented.len() }))
        }
        Command::Train {
            manifest,
            out,
            mode,
            map,
            epochs,
        } => {
            if let Some(m) = mode {
                cfg.mode = m.parse::<Mode>()?;
            }
            apply_map_arg(cfg, map)?;
            if let Some(e) = epochs {
                cfg.dissonance.epochs = *e;
            }
            cfg.validate()?;
            let records = load_manifest(manifest)?;
            if records.is_empty() {
                return Err(Error::EmptyDataset);
            }
            let videos = prepare_records(&records, cfg)?;
            let outcome = train_videos(&videos, cfg, |s| {
                log::info!(
                    "epoch {} L={:.6} L1={:.6} L2={:.6} L3={:.6}",
                    s.epoch,
                    s.loss,
                    s.l1,
                    s.l2,
                    s.l3
                )
            })
            .inspect_err(|e| {
                if let Error::DivergedLoss { .. } = e {
                    log::error!("training diverged; see the run record for the failing step");
                }
            })?;
            write_checkpoint(out, &outcome.checkpoint)?;
            Ok(json!({
                "checkpoint": out,
                "tau": outcome.checkpoint.header.tau,
                "epochs": outcome.history,
            }))
        }
        Command::Eval {
            checkpoint,
            manifest,
            report,
        } => {
            let ckpt: Checkpoint = read_checkpoint(checkpoint)?;
            let records = load_manifest(manifest)?;
            if records.is_empty() {
                return Err(Error::EmptyDataset);
            }
            let rep = evaluate_records(&ckpt, &records)?;
            if let Some(dir) = report.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(report, rep.to_json()?)?;
            Ok(json!({ "report": report, "auc": rep.auc, "tau": rep.tau }))
        }
        Command::Augment { .. } => Err(Error::Config(
            "augment needs --manifest or both --crops-file and --map-file".into(),
        )),
        Command::MapsViz {
            manifest,
            out,
            map,
            video,
        } => {
            apply_map_arg(cfg, map)?;
            std::fs::create_dir_all(out)?;
            let records = load_manifest(manifest)?;
            let chosen: Vec<&VideoRecord> = records
                .iter()
                .filter(|r| video.as_ref().is_none_or(|v| &r.id == v))
                .collect();
            if chosen.is_empty() {
                return Err(Error::EmptyDataset);
            }
            let mut images = 0;
            for r in chosen {
                for seg in segment_video(r, cfg.ingest.segment_seconds)? {
                    let m = generate_maps(&seg.crops, &cfg.physmaps, &cfg.physio)?;
                    export_png(
                        segment_map(&m).view(),
                        segment_file(out, &r.id, seg.index, "png"),
                    )?;
                    images += 1;
                }
            }
            Ok(json!({ "images": images }))
        }
    }
}

/// Records re-rooted so the split manifests resolve from `dir`.
fn relative(records: &[VideoRecord], dir: &Path) -> Vec<VideoRecord> {
    records
        .iter()
        .map(|r| VideoRecord {
            crops_path: r
                .crops_path
                .strip_prefix(dir)
                .unwrap_or(&r.crops_path)
                .to_path_buf(),
            audio_path: r
                .audio_path
                .strip_prefix(dir)
                .unwrap_or(&r.audio_path)
                .to_path_buf(),
            ..r.clone()
        })
        .collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.debug {
            log::LevelFilter::Debug
        } else {
            log::LevelFilter::Info
        })
        .parse_env("PHYSMAP_LOG")
        .init();

    let started = Instant::now();
    let mut cfg = PipelineConfig::default();
    let result = configure_workers()
        .and_then(|_| {
            if let Some(path) = &cli.config {
                cfg = PipelineConfig::load(path)?;
            }
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            Ok(())
        })
        .and_then(|_| run(&cli, &mut cfg));

    let code = match &result {
        Ok(_) => 0,
        Err(e) => e.exit_code(),
    };
    let record = json!({
        "command": cli.command.name(),
        "args": std::env::args().collect::<Vec<_>>(),
        "config": cfg,
        "seed": cfg.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "timings": { "total_seconds": started.elapsed().as_secs_f64() },
        "status": if code == 0 { "ok" } else { "error" },
        "exit_code": code,
        "error": result.as_ref().err().map(|e| e.to_string()),
        "outputs": result.as_ref().ok(),
    });
    let record_path = cli
        .run_record
        .clone()
        .unwrap_or_else(|| cli.command.default_record());
    let written = record_path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .map_or(Ok(()), std::fs::create_dir_all)
        .and_then(|_| std::fs::write(&record_path, serde_json::to_string_pretty(&record).unwrap()));
    if let Err(e) = written {
        eprintln!(
            "warning: could not write run record {}: {e}",
            record_path.display()
        );
    }

    match result {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            if cli.debug {
                eprintln!("error: {e:?}");
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(code as u8)
        }
    }
}
