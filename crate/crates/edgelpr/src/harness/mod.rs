//! End-to-end pipelines: configuration, training/quantization/encoding/
//! retrieval orchestration, benchmarking and report emission.

pub mod bench;
pub mod report;

use crate::backbone::{
    fold::fold_graph, forward, memory_footprint, presets::build_preset, ModelGraph, Precision,
    WeightStore,
};
use crate::bev::{rasterize, BevConfig, BevImage};
use crate::ingest::{generate_synthetic_world, Frame, SynthConfig};
use crate::metrics::{evaluate, EvalReport};
use crate::quant::{collect_stats, forward_fp16_images, forward_int8, quantize_model, QuantizedModel};
use crate::retrieval::{build_db, ground_truth_positives, search_knn, DescriptorDB, RowMeta};
use crate::tensor::Tensor;
use crate::train::{train, EpochLog, TrainConfig};
use std::collections::BTreeMap;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config at line {line}: {message}")]
    InvalidConfig { line: usize, message: String },
    #[error("pipeline stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("nothing to report")]
    EmptyReport,
}

fn stage<E: std::error::Error + Send + Sync + 'static>(
    name: &'static str,
) -> impl FnOnce(E) -> HarnessError {
    move |e| HarnessError::Stage {
        stage: name,
        source: Box::new(e),
    }
}

/// Evaluation knobs: ground-truth thresholds, retrieval depth and the
/// database/query split (first `database_count` frames are the database,
/// the rest are queries).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub precisions: Vec<Precision>,
    pub tau_gt: f32,
    pub delta_t: f64,
    pub exclusion_window: f64,
    pub ks: Vec<usize>,
    pub database_count: usize,
    pub histogram_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            precisions: vec![Precision::Fp32, Precision::Fp16, Precision::Int8],
            tau_gt: 5.0,
            delta_t: 200.0,
            exclusion_window: 200.0,
            ks: vec![1, 5, 10, 20],
            database_count: 400,
            histogram_bins: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub preset: String,
    pub descriptor_dim: usize,
    pub bev: BevConfig,
    pub train: TrainConfig,
    pub calib_size: usize,
    pub calib_seed: u64,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: SynthConfig::default(),
            preset: "tiny_resnet".into(),
            descriptor_dim: 32,
            // the desk-scale pipeline trains at 128x128; the BEV module
            // default of 256x256 stays available through the config file
            bev: BevConfig {
                width: 128,
                height: 128,
                ..Default::default()
            },
            train: TrainConfig::default(),
            calib_size: 256,
            calib_seed: 17,
            eval: EvalConfig::default(),
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |message: String| HarnessError::InvalidConfig { line: 0, message };
        if self.eval.precisions.is_empty() {
            return Err(bad("precision set must be non-empty".into()));
        }
        if self.eval.database_count == 0 || self.eval.database_count >= self.synth.frame_count {
            return Err(bad(format!(
                "database_count {} must split {} frames into non-empty halves",
                self.eval.database_count, self.synth.frame_count
            )));
        }
        if self.seeds.is_empty() {
            return Err(bad("at least one seed required".into()));
        }
        if self.calib_size == 0 {
            return Err(bad("calib_size must be >= 1".into()));
        }
        self.bev.validate().map_err(stage("config"))?;
        self.train.validate().map_err(stage("config"))?;
        Ok(())
    }
}

fn parse_list<T: std::str::FromStr>(value: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(|s| s.trim().parse::<T>().map_err(|e| format!("{e}")))
        .collect()
}

/// Line-oriented `[section]` / `key = value` config text. Unknown keys are
/// errors; every omitted key keeps its default.
pub fn parse_config(text: &str) -> Result<RunConfig, HarnessError> {
    let mut config = RunConfig::default();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let err = |message: String| HarnessError::InvalidConfig {
            line: lineno + 1,
            message,
        };
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected key = value, got `{line}`")))?;
        let key = key.trim();
        let value = value.trim();
        let parse_err = |e: String| err(format!("{key}: {e}"));
        macro_rules! set {
            ($target:expr) => {
                $target = value.parse().map_err(|e| parse_err(format!("{e}")))?
            };
        }
        match (section.as_str(), key) {
            ("dataset", "frame_count") => set!(config.synth.frame_count),
            ("dataset", "lap_frames") => set!(config.synth.lap_frames),
            ("dataset", "frame_spacing_m") => set!(config.synth.frame_spacing_m),
            ("dataset", "landmark_count") => set!(config.synth.landmark_count),
            ("dataset", "points_per_landmark") => set!(config.synth.points_per_landmark),
            ("dataset", "sensor_range_m") => set!(config.synth.sensor_range_m),
            ("dataset", "noise_std_m") => set!(config.synth.noise_std_m),
            ("model", "preset") => config.preset = value.to_string(),
            ("model", "descriptor_dim") => set!(config.descriptor_dim),
            ("bev", "width") => set!(config.bev.width),
            ("bev", "height") => set!(config.bev.height),
            ("bev", "extent_m") => set!(config.bev.extent_m),
            ("bev", "z_min") => set!(config.bev.z_min),
            ("bev", "z_max") => set!(config.bev.z_max),
            ("bev", "accumulation") => {
                config.bev.accumulation = match value {
                    "max" => crate::bev::Accumulation::Max,
                    "mean" => crate::bev::Accumulation::Mean,
                    other => return Err(err(format!("unknown accumulation `{other}`"))),
                }
            }
            ("train", "learning_rate") => set!(config.train.learning_rate),
            ("train", "weight_decay") => set!(config.train.weight_decay),
            ("train", "epochs") => set!(config.train.epochs),
            ("train", "margin") => set!(config.train.margin),
            ("train", "tau_pos") => set!(config.train.tau_pos),
            ("train", "tau_neg") => set!(config.train.tau_neg),
            ("train", "negatives_per_anchor") => set!(config.train.negatives_per_anchor),
            ("train", "anchors_per_epoch") => set!(config.train.anchors_per_epoch),
            ("train", "batch_size") => set!(config.train.batch_size),
            ("train", "augment") => set!(config.train.augment),
            ("calibration", "calib_size") => set!(config.calib_size),
            ("calibration", "calib_seed") => set!(config.calib_seed),
            ("eval", "precisions") => {
                config.eval.precisions = parse_list(value).map_err(parse_err)?
            }
            ("eval", "tau_gt") => set!(config.eval.tau_gt),
            ("eval", "delta_t") => set!(config.eval.delta_t),
            ("eval", "exclusion_window") => set!(config.eval.exclusion_window),
            ("eval", "ks") => config.eval.ks = parse_list(value).map_err(parse_err)?,
            ("eval", "database_count") => set!(config.eval.database_count),
            ("eval", "histogram_bins") => set!(config.eval.histogram_bins),
            ("run", "seeds") => config.seeds = parse_list(value).map_err(parse_err)?,
            ("run", "out_dir") => config.out_dir = PathBuf::from(value),
            (sec, k) => return Err(err(format!("unknown key `{k}` in section `[{sec}]`"))),
        }
    }
    config.validate()?;
    Ok(config)
}

/// Renders the effective config, defaults included, for provenance.
pub fn render_config(config: &RunConfig) -> String {
    let s = &config.synth;
    let b = &config.bev;
    let t = &config.train;
    let e = &config.eval;
    let precisions: Vec<String> = e.precisions.iter().map(|p| p.to_string()).collect();
    let ks: Vec<String> = e.ks.iter().map(|k| k.to_string()).collect();
    let seeds: Vec<String> = config.seeds.iter().map(|v| v.to_string()).collect();
    format!(
        "[dataset]\nframe_count = {}\nlap_frames = {}\nframe_spacing_m = {}\nlandmark_count = {}\npoints_per_landmark = {}\nsensor_range_m = {}\nnoise_std_m = {}\n\n\
         [model]\npreset = {}\ndescriptor_dim = {}\n\n\
         [bev]\nwidth = {}\nheight = {}\nextent_m = {}\nz_min = {}\nz_max = {}\naccumulation = {}\n\n\
         [train]\nlearning_rate = {}\nweight_decay = {}\nepochs = {}\nmargin = {}\ntau_pos = {}\ntau_neg = {}\nnegatives_per_anchor = {}\nanchors_per_epoch = {}\nbatch_size = {}\naugment = {}\n\n\
         [calibration]\ncalib_size = {}\ncalib_seed = {}\n\n\
         [eval]\nprecisions = {}\ntau_gt = {}\ndelta_t = {}\nexclusion_window = {}\nks = {}\ndatabase_count = {}\nhistogram_bins = {}\n\n\
         [run]\nseeds = {}\nout_dir = {}\n",
        s.frame_count,
        s.lap_frames,
        s.frame_spacing_m,
        s.landmark_count,
        s.points_per_landmark,
        s.sensor_range_m,
        s.noise_std_m,
        config.preset,
        config.descriptor_dim,
        b.width,
        b.height,
        b.extent_m,
        b.z_min,
        b.z_max,
        match b.accumulation {
            crate::bev::Accumulation::Max => "max",
            crate::bev::Accumulation::Mean => "mean",
        },
        t.learning_rate,
        t.weight_decay,
        t.epochs,
        t.margin,
        t.tau_pos,
        t.tau_neg,
        t.negatives_per_anchor,
        t.anchors_per_epoch,
        t.batch_size,
        t.augment,
        config.calib_size,
        config.calib_seed,
        precisions.join(","),
        e.tau_gt,
        e.delta_t,
        e.exclusion_window,
        ks.join(","),
        e.database_count,
        e.histogram_bins,
        seeds.join(","),
        config.out_dir.display(),
    )
}

fn frame_meta(frame: &Frame) -> RowMeta {
    RowMeta {
        id: frame.id,
        timestamp: frame.timestamp,
        pose: frame.pose,
        sequence_tag: frame.sequence_tag.clone(),
    }
}

/// Rasterizes every frame once.
pub fn rasterize_frames(
    frames: &[Frame],
    bev: &BevConfig,
) -> Result<Vec<BevImage>, HarnessError> {
    frames
        .iter()
        .map(|f| rasterize(&f.cloud, bev, f.id).map_err(stage("bev")))
        .collect()
}

const ENCODE_CHUNK: usize = 8;

/// Encodes images under one precision regime into an (N, d) tensor of unit
/// rows.
pub fn encode_images(
    graph: &ModelGraph,
    weights: &WeightStore,
    qmodel: Option<&QuantizedModel>,
    precision: Precision,
    images: &[BevImage],
) -> Result<Tensor, HarnessError> {
    let dim = graph.descriptor_dim;
    let mut data = Vec::with_capacity(images.len() * dim);
    for chunk in images.chunks(ENCODE_CHUNK) {
        let refs: Vec<&BevImage> = chunk.iter().collect();
        let rows = match precision {
            Precision::Fp32 => {
                let batch = crate::bev::batch_tensor(&refs);
                forward(graph, weights, &batch)
                    .map_err(stage("encode"))?
                    .descriptors
            }
            Precision::Fp16 => forward_fp16_images(graph, weights, &refs)
                .map_err(stage("encode"))?
                .descriptors,
            Precision::Int8 => {
                let qmodel = qmodel.ok_or_else(|| HarnessError::Stage {
                    stage: "encode",
                    source: "int8 requested without a quantized model".into(),
                })?;
                forward_int8(qmodel, &refs).map_err(stage("encode"))?
            }
        };
        data.extend_from_slice(&rows.data);
    }
    Tensor::from_vec(&[images.len(), dim], data)
        .map_err(|e| HarnessError::Stage {
            stage: "encode",
            source: Box::new(e),
        })
}

/// Everything produced for one seed: the trained (folded) model, the INT8
/// conversion, and one evaluation report per precision.
pub struct SeedArtifacts {
    pub seed: u64,
    pub graph: ModelGraph,
    pub weights: WeightStore,
    pub qmodel: Option<QuantizedModel>,
    pub train_log: Vec<EpochLog>,
    pub db_images: Vec<BevImage>,
    pub query_images: Vec<BevImage>,
    pub db_meta: Vec<RowMeta>,
    pub query_meta: Vec<RowMeta>,
    pub reports: BTreeMap<Precision, EvalReport>,
}

/// Runs the full pipeline for one seed: synth -> BEV -> train -> fold ->
/// calibrate -> quantize -> encode -> retrieve -> metrics. Deterministic for
/// a fixed (config, seed).
pub fn run_seed(config: &RunConfig, seed: u64) -> Result<SeedArtifacts, HarnessError> {
    config.validate()?;
    let frames = generate_synthetic_world(&config.synth, seed).map_err(stage("synth"))?;
    let (db_frames, query_frames) = frames.split_at(config.eval.database_count);

    let graph = build_preset(&config.preset, config.descriptor_dim).map_err(stage("model"))?;
    let mut graph = graph;
    graph.input_shape = [3, config.bev.height, config.bev.width];
    let mut weights = WeightStore::init_random(&graph, seed);
    let mut train_config = config.train.clone();
    train_config.seed = seed;
    let train_log = train(&graph, &mut weights, db_frames, &config.bev, &train_config)
        .map_err(stage("train"))?;

    let (graph, weights) = fold_graph(&graph, &weights).map_err(stage("fold"))?;

    let db_images = rasterize_frames(db_frames, &config.bev)?;
    let query_images = rasterize_frames(query_frames, &config.bev)?;
    let db_meta: Vec<RowMeta> = db_frames.iter().map(frame_meta).collect();
    let query_meta: Vec<RowMeta> = query_frames.iter().map(frame_meta).collect();

    let qmodel = if config.eval.precisions.contains(&Precision::Int8) {
        let calib: Vec<&BevImage> = db_images.iter().take(config.calib_size).collect();
        let stats = collect_stats(&graph, &weights, &calib, config.calib_seed)
            .map_err(stage("calibrate"))?;
        Some(quantize_model(&graph, &weights, &stats).map_err(stage("quantize"))?)
    } else {
        None
    };

    let gt = ground_truth_positives(&query_meta, &db_meta, config.eval.tau_gt, config.eval.delta_t);

    let kmax = config.eval.ks.iter().copied().max().unwrap_or(20);
    let mut reports = BTreeMap::new();
    for &precision in &config.eval.precisions {
        let db_desc = encode_images(&graph, &weights, qmodel.as_ref(), precision, &db_images)?;
        let query_desc =
            encode_images(&graph, &weights, qmodel.as_ref(), precision, &query_images)?;
        let db = build_db(&db_desc, db_meta.clone()).map_err(stage("retrieve"))?;
        let results = search_all(&db, &query_meta, &query_desc, kmax, config.eval.exclusion_window)?;
        let report = evaluate(&results, &gt, &config.eval.ks, config.eval.histogram_bins)
            .map_err(stage("metrics"))?;
        reports.insert(precision, report);
    }

    Ok(SeedArtifacts {
        seed,
        graph,
        weights,
        qmodel,
        train_log,
        db_images,
        query_images,
        db_meta,
        query_meta,
        reports,
    })
}

pub fn search_all(
    db: &DescriptorDB,
    query_meta: &[RowMeta],
    query_desc: &Tensor,
    k: usize,
    exclusion_window: f64,
) -> Result<Vec<crate::retrieval::QueryResult>, HarnessError> {
    let dim = db.dim;
    query_meta
        .iter()
        .enumerate()
        .map(|(i, meta)| {
            let row = &query_desc.data[i * dim..(i + 1) * dim];
            let exclusion = if exclusion_window > 0.0 {
                Some((meta.timestamp, exclusion_window))
            } else {
                None
            };
            search_knn(db, meta.id, row, k, exclusion).map_err(stage("retrieve"))
        })
        .collect()
}

/// One evaluated (precision, seed) cell.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SeedReport {
    pub preset: String,
    pub precision: Precision,
    pub seed: u64,
    pub report: EvalReport,
}

/// Mean and sample standard deviation of one scalar metric across seeds.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Aggregate {
    pub preset: String,
    pub precision: Precision,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PipelineOutput {
    pub preset: String,
    pub runs: Vec<SeedReport>,
    pub aggregates: Vec<Aggregate>,
    pub param_count: usize,
    pub memory_mib: BTreeMap<String, f64>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn scalar_metrics(report: &EvalReport) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = report
        .recall_at
        .iter()
        .map(|(k, v)| (format!("recall_at_{k}"), *v))
        .collect();
    out.push(("mrr".into(), report.mrr));
    out.push(("max_f1".into(), report.max_f1));
    out.push(("pr_auc".into(), report.pr_auc));
    out
}

/// Runs every configured seed and aggregates scalar metrics per precision.
pub fn run_eval_pipeline(config: &RunConfig) -> Result<PipelineOutput, HarnessError> {
    config.validate()?;
    let mut runs = Vec::new();
    for &seed in &config.seeds {
        let artifacts = run_seed(config, seed)?;
        for (precision, report) in artifacts.reports {
            runs.push(SeedReport {
                preset: config.preset.clone(),
                precision,
                seed,
                report,
            });
        }
    }

    let mut aggregates = Vec::new();
    for &precision in &config.eval.precisions {
        let per_seed: Vec<&SeedReport> =
            runs.iter().filter(|r| r.precision == precision).collect();
        if per_seed.is_empty() {
            continue;
        }
        let names: Vec<String> = scalar_metrics(&per_seed[0].report)
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        for name in names {
            let values: Vec<f64> = per_seed
                .iter()
                .map(|r| {
                    scalar_metrics(&r.report)
                        .into_iter()
                        .find(|(n, _)| *n == name)
                        .map(|(_, v)| v)
                        .unwrap_or(0.0)
                })
                .collect();
            let (mean, std) = mean_std(&values);
            aggregates.push(Aggregate {
                preset: config.preset.clone(),
                precision,
                metric: name,
                mean,
                std,
            });
        }
    }

    let graph = build_preset(&config.preset, config.descriptor_dim).map_err(stage("model"))?;
    let param_count = graph.param_count();
    let memory_mib: BTreeMap<String, f64> = [Precision::Fp32, Precision::Fp16, Precision::Int8]
        .into_iter()
        .map(|p| (p.to_string(), memory_footprint(param_count, p)))
        .collect();

    Ok(PipelineOutput {
        preset: config.preset.clone(),
        runs,
        aggregates,
        param_count,
        memory_mib,
    })
}
