//! Command-line harness around the edgelpr library.

use clap::{Parser, Subcommand};
use edgelpr::backbone::container::{load_weights, save_weights};
use edgelpr::backbone::{fold::fold_graph, presets::build_preset, ModelGraph, Precision, WeightStore};
use edgelpr::bev::write_pgm;
use edgelpr::harness::bench::{run_benchmark, BenchConfig};
use edgelpr::harness::report::{emit_report, render_bench_csv, ReportFormat};
use edgelpr::harness::{
    encode_images, parse_config, rasterize_frames, render_config, run_eval_pipeline,
    HarnessError, PipelineOutput, RunConfig,
};
use edgelpr::ingest::{
    generate_synthetic_world, parse_point_cloud_bin, parse_pose_file, Frame,
};
use edgelpr::quant::container::{load_quantized, save_quantized};
use edgelpr::quant::{collect_stats, quantize_model};
use edgelpr::retrieval::{build_db, save_db, RowMeta};
use edgelpr::train::log_to_csv;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Multi-precision LiDAR place recognition harness.
#[derive(Parser)]
#[command(name = "edgelpr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate KITTI clouds + poses and write a frame manifest.
    Ingest {
        /// Directory of KITTI Velodyne .bin scans, sorted by file name.
        #[arg(long)]
        clouds: PathBuf,
        /// KITTI odometry pose file (12 numbers per line).
        #[arg(long)]
        poses: PathBuf,
        #[arg(long, default_value = "seq")]
        sequence: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic loop world and write a preview.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one seed on the database split; writes a folded checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect activation statistics and write calibrated site parameters.
    Calibrate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a checkpoint to a fully integer INT8 model.
    Quantize {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode database and query frames into descriptor DB files.
    Encode {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        weights: PathBuf,
        /// Quantized model file, required for int8.
        #[arg(long)]
        quantized: Option<PathBuf>,
        #[arg(long, default_value = "fp32")]
        precision: Precision,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline over all seeds and precisions; writes every report.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Latency/throughput benchmark for the configured preset.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value_t = 10)]
        iterations: usize,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 32])]
        batches: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-render an existing report.json into other formats.
    Report {
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "json,csv,plotdata")]
        formats: Vec<ReportFormat>,
        #[arg(long)]
        out: PathBuf,
    },
}

// distinct exit codes per error class
const EXIT_CONFIG: i32 = 2;
const EXIT_IO: i32 = 3;
const EXIT_DATA: i32 = 4;
const EXIT_TRAIN: i32 = 5;
const EXIT_QUANT: i32 = 6;
const EXIT_RETRIEVAL: i32 = 7;
const EXIT_MODEL: i32 = 8;

struct CliError {
    code: i32,
    message: String,
}

type CliResult<T> = Result<T, CliError>;

macro_rules! ctx {
    ($expr:expr, $code:expr) => {
        $expr.map_err(|e| CliError {
            code: $code,
            message: e.to_string(),
        })
    };
}

fn harness_code(err: &HarnessError) -> i32 {
    match err {
        HarnessError::InvalidConfig { .. } => EXIT_CONFIG,
        HarnessError::Io { .. } => EXIT_IO,
        HarnessError::EmptyReport => EXIT_CONFIG,
        HarnessError::Stage { stage, .. } => match *stage {
            "synth" | "bev" => EXIT_DATA,
            "train" => EXIT_TRAIN,
            "calibrate" | "quantize" => EXIT_QUANT,
            "retrieve" | "metrics" => EXIT_RETRIEVAL,
            _ => EXIT_MODEL,
        },
    }
}

fn load_config(path: &Option<PathBuf>) -> CliResult<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = ctx!(std::fs::read_to_string(p), EXIT_IO)?;
            parse_config(&text).map_err(|e| CliError {
                code: harness_code(&e),
                message: e.to_string(),
            })
        }
    }
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    ctx!(std::fs::create_dir_all(dir), EXIT_IO)
}

fn write_text(path: &Path, content: &str) -> CliResult<()> {
    ctx!(std::fs::write(path, content), EXIT_IO)
}

/// Loads a checkpoint written by `train`: the exact (folded) graph travels in
/// the metadata, so downstream stages do not re-derive it.
fn load_checkpoint(path: &Path) -> CliResult<(ModelGraph, WeightStore)> {
    let (meta, weights) = ctx!(load_weights(path), EXIT_MODEL)?;
    let graph_json = meta.get("graph_json").ok_or_else(|| CliError {
        code: EXIT_MODEL,
        message: "checkpoint is missing the graph description".into(),
    })?;
    let graph: ModelGraph = ctx!(serde_json::from_str(graph_json), EXIT_MODEL)?;
    Ok((graph, weights))
}

fn world(config: &RunConfig, seed: u64) -> CliResult<Vec<Frame>> {
    ctx!(generate_synthetic_world(&config.synth, seed), EXIT_DATA)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Ingest {
            clouds,
            poses,
            sequence,
            out,
        } => {
            let pose_text = ctx!(std::fs::read_to_string(&poses), EXIT_IO)?;
            let pose_list = ctx!(parse_pose_file(&pose_text), EXIT_DATA)?;
            let mut entries: Vec<PathBuf> = ctx!(std::fs::read_dir(&clouds), EXIT_IO)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "bin"))
                .collect();
            entries.sort();
            if entries.len() != pose_list.len() {
                return Err(CliError {
                    code: EXIT_DATA,
                    message: format!(
                        "{} scans but {} poses",
                        entries.len(),
                        pose_list.len()
                    ),
                });
            }
            ensure_dir(&out)?;
            let mut manifest =
                String::from("id,timestamp,cloud_path,r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,tz\n");
            let mut total_points = 0usize;
            for (i, (path, pose)) in entries.iter().zip(&pose_list).enumerate() {
                let bytes = ctx!(std::fs::read(path), EXIT_IO)?;
                let cloud = ctx!(parse_point_cloud_bin(&bytes, true), EXIT_DATA)?;
                total_points += cloud.len();
                let r = &pose.rotation;
                manifest.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                    i,
                    i,
                    path.display(),
                    r[0][0], r[0][1], r[0][2],
                    r[1][0], r[1][1], r[1][2],
                    r[2][0], r[2][1], r[2][2],
                    pose.position[0], pose.position[1], pose.position[2],
                ));
            }
            write_text(&out.join("manifest.csv"), &manifest)?;
            println!(
                "ingested {} frames ({} points, sequence {}) -> {}",
                entries.len(),
                total_points,
                sequence,
                out.join("manifest.csv").display()
            );
            Ok(())
        }
        Command::Synth { config, seed, out } => {
            let config = load_config(&config)?;
            let frames = world(&config, seed)?;
            ensure_dir(&out)?;
            let images = ctx!(rasterize_frames(&frames, &config.bev), EXIT_DATA)?;
            ctx!(write_pgm(&images[0], &out.join("frame0.pgm")), EXIT_IO)?;
            let mut csv = String::from("id,timestamp,x,y,z,points\n");
            for f in &frames {
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    f.id,
                    f.timestamp,
                    f.pose.position[0],
                    f.pose.position[1],
                    f.pose.position[2],
                    f.cloud.len()
                ));
            }
            write_text(&out.join("world.csv"), &csv)?;
            println!("synthesized {} frames -> {}", frames.len(), out.display());
            Ok(())
        }
        Command::Train { config, seed, out } => {
            let config = load_config(&config)?;
            ensure_dir(&out)?;
            let artifacts = run_seed_for_cli(&config, seed)?;
            let mut meta = BTreeMap::new();
            meta.insert("preset".to_string(), config.preset.clone());
            meta.insert(
                "graph_json".to_string(),
                ctx!(serde_json::to_string(&artifacts.0), EXIT_MODEL)?,
            );
            meta.insert("seed".to_string(), seed.to_string());
            let ckpt = out.join(format!("{}_seed{}.lprw", config.preset, seed));
            ctx!(save_weights(&ckpt, &artifacts.0, &artifacts.1, &meta), EXIT_IO)?;
            write_text(&out.join("train_log.csv"), &log_to_csv(&artifacts.2))?;
            write_text(&out.join("config.txt"), &render_config(&config))?;
            println!("trained {} seed {} -> {}", config.preset, seed, ckpt.display());
            Ok(())
        }
        Command::Calibrate {
            config,
            weights,
            seed,
            out,
        } => {
            let config = load_config(&config)?;
            let (graph, store) = load_checkpoint(&weights)?;
            let frames = world(&config, seed)?;
            let db_frames = &frames[..config.eval.database_count];
            let images = ctx!(rasterize_frames(db_frames, &config.bev), EXIT_DATA)?;
            let calib: Vec<&edgelpr::bev::BevImage> =
                images.iter().take(config.calib_size).collect();
            let stats = ctx!(collect_stats(&graph, &store, &calib, config.calib_seed), EXIT_QUANT)?;
            let params: Vec<edgelpr::quant::QuantParams> = stats
                .iter()
                .map(|s| edgelpr::quant::calibrate_mse(&s.reservoir))
                .collect::<Result<_, _>>()
                .map_err(|e| CliError {
                    code: EXIT_QUANT,
                    message: e.to_string(),
                })?;
            ensure_dir(&out)?;
            let json = ctx!(serde_json::to_string_pretty(&params), EXIT_IO)?;
            write_text(&out.join("calibration.json"), &json)?;
            println!("calibrated {} activation sites -> {}", params.len(), out.display());
            Ok(())
        }
        Command::Quantize {
            config,
            weights,
            seed,
            out,
        } => {
            let config = load_config(&config)?;
            let (graph, store) = load_checkpoint(&weights)?;
            let frames = world(&config, seed)?;
            let db_frames = &frames[..config.eval.database_count];
            let images = ctx!(rasterize_frames(db_frames, &config.bev), EXIT_DATA)?;
            let calib: Vec<&edgelpr::bev::BevImage> =
                images.iter().take(config.calib_size).collect();
            let stats = ctx!(collect_stats(&graph, &store, &calib, config.calib_seed), EXIT_QUANT)?;
            let qmodel = ctx!(quantize_model(&graph, &store, &stats), EXIT_QUANT)?;
            ensure_dir(&out)?;
            let path = out.join(format!("{}_seed{}.lprq", config.preset, seed));
            ctx!(save_quantized(&path, &qmodel), EXIT_IO)?;
            println!("quantized model -> {}", path.display());
            Ok(())
        }
        Command::Encode {
            config,
            weights,
            quantized,
            precision,
            seed,
            out,
        } => {
            let config = load_config(&config)?;
            if quantized.is_none() && precision == Precision::Int8 {
                return Err(CliError {
                    code: EXIT_CONFIG,
                    message: "int8 encoding requires --quantized".into(),
                });
            }
            let (graph, store) = load_checkpoint(&weights)?;
            let qmodel = match &quantized {
                Some(path) => Some(ctx!(load_quantized(path), EXIT_QUANT)?),
                None => None,
            };
            let frames = world(&config, seed)?;
            let (db_frames, query_frames) = frames.split_at(config.eval.database_count);
            ensure_dir(&out)?;
            for (tag, subset) in [("database", db_frames), ("queries", query_frames)] {
                let images = ctx!(rasterize_frames(subset, &config.bev), EXIT_DATA)?;
                let desc = encode_images(&graph, &store, qmodel.as_ref(), precision, &images)
                    .map_err(|e| CliError {
                        code: harness_code(&e),
                        message: e.to_string(),
                    })?;
                let meta: Vec<RowMeta> = subset
                    .iter()
                    .map(|f| RowMeta {
                        id: f.id,
                        timestamp: f.timestamp,
                        pose: f.pose,
                        sequence_tag: f.sequence_tag.clone(),
                    })
                    .collect();
                let db = ctx!(build_db(&desc, meta), EXIT_RETRIEVAL)?;
                let path = out.join(format!("{tag}_{precision}.lprd"));
                ctx!(save_db(&path, &db), EXIT_IO)?;
                println!("encoded {} {} frames -> {}", db.len(), tag, path.display());
            }
            Ok(())
        }
        Command::Eval { config, out } => {
            let config = load_config(&config)?;
            let output = run_eval_pipeline(&config).map_err(|e| CliError {
                code: harness_code(&e),
                message: e.to_string(),
            })?;
            ensure_dir(&out)?;
            write_text(&out.join("config.txt"), &render_config(&config))?;
            let outputs = vec![output];
            emit_report(
                &out,
                &outputs,
                &[],
                &[ReportFormat::Json, ReportFormat::Csv, ReportFormat::Plotdata],
            )
            .map_err(|e| CliError {
                code: harness_code(&e),
                message: e.to_string(),
            })?;
            for agg in &outputs[0].aggregates {
                println!(
                    "{} {} {}: {:.4} +/- {:.4}",
                    agg.preset, agg.precision, agg.metric, agg.mean, agg.std
                );
            }
            println!("reports -> {}", out.display());
            Ok(())
        }
        Command::Bench {
            config,
            warmup,
            iterations,
            batches,
            out,
        } => {
            let config = load_config(&config)?;
            let bench = BenchConfig {
                batches,
                warmup,
                iterations,
            };
            let results = run_benchmark(&config, &bench).map_err(|e| CliError {
                code: harness_code(&e),
                message: e.to_string(),
            })?;
            ensure_dir(&out)?;
            let csv = render_bench_csv(&results).map_err(|e| CliError {
                code: harness_code(&e),
                message: e.to_string(),
            })?;
            write_text(&out.join("bench.csv"), &csv)?;
            for r in &results {
                println!(
                    "{} {} batch {}: mean {:.2} ms, p95 {:.2} ms, {:.1} img/s",
                    r.model, r.precision, r.batch, r.mean_ms, r.p95_ms, r.throughput_ips
                );
            }
            Ok(())
        }
        Command::Report {
            input,
            formats,
            out,
        } => {
            let text = ctx!(std::fs::read_to_string(&input), EXIT_IO)?;
            let outputs: Vec<PipelineOutput> = ctx!(serde_json::from_str(&text), EXIT_DATA)?;
            let written = emit_report(&out, &outputs, &[], &formats).map_err(|e| CliError {
                code: harness_code(&e),
                message: e.to_string(),
            })?;
            for path in written {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
    }
}

/// Train + fold for one seed, without the retrieval stages.
fn run_seed_for_cli(
    config: &RunConfig,
    seed: u64,
) -> CliResult<(ModelGraph, WeightStore, Vec<edgelpr::train::EpochLog>)> {
    config.validate().map_err(|e| CliError {
        code: harness_code(&e),
        message: e.to_string(),
    })?;
    let frames = world(config, seed)?;
    let db_frames = &frames[..config.eval.database_count];
    let mut graph = ctx!(build_preset(&config.preset, config.descriptor_dim), EXIT_MODEL)?;
    graph.input_shape = [3, config.bev.height, config.bev.width];
    let mut store = WeightStore::init_random(&graph, seed);
    let mut train_config = config.train.clone();
    train_config.seed = seed;
    let log = ctx!(
        edgelpr::train::train(&graph, &mut store, db_frames, &config.bev, &train_config),
        EXIT_TRAIN
    )?;
    let (graph, store) = ctx!(fold_graph(&graph, &store), EXIT_MODEL)?;
    Ok((graph, store, log))
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {}", err.message);
        std::process::exit(err.code);
    }
}
