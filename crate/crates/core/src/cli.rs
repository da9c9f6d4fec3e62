//! Command-line entry point: generate, train, join, evaluate and pipeline.
//!
//! Every command reads and writes fixed file names under the data
//! directory and leaves a `manifest_<command>.json` with digests of its
//! inputs and artifacts.

use std::collections::HashMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::encoder::{embed_dataset, save_model, train, train_with, EncoderModel, Encoders, TrainConfig};
use crate::error::{Error, Result};
use crate::evalkit::{
    mrr_at_k, recall_at_k, run_comparison, ComparisonContext, Method, MetricRow, MetricTable, TruthSet,
};
use crate::joiner::{
    aggregate_labels, build_index, chain_joins, execute_join, save_embeddings, ChainStage, JoinOptions, JoinResult,
    ScoreOrder,
};
use crate::joinspec::{
    apply_overrides, parse_config_with_fallback, parse_join_spec, parse_join_specs, EncoderInit, EngineConfig, JoinSpec,
};
use crate::lexrank::{lexical_join, LexicalKind};
use crate::model::{
    load_dataset_auto, load_supervision, read_supervision, write_pairs, Dataset, Role, Supervision, SupervisionPair,
};
use crate::prepare::{dump_sentences, Preparer};
use crate::supervise::{
    build_pretraining_pairs, generate_fuzzy_join, rng_for, split_train_test, stage_seed, synthetic_source,
    NegativeSampler, PerturbationConfig, SamplerConfig,
};

pub const BASE_FILE: &str = "base.csv";
pub const AUX_FILE: &str = "aux.csv";
pub const SUPERVISION_FILE: &str = "supervision.csv";
pub const TRUTH_TRAIN_FILE: &str = "truth_train.csv";
pub const TRUTH_TEST_FILE: &str = "truth_test.csv";
pub const MODEL_FILE: &str = "model.bin";
pub const AUX_MODEL_FILE: &str = "model_aux.bin";
pub const LOSS_TRACE_FILE: &str = "loss_trace.csv";
pub const BASE_EMBEDDINGS_FILE: &str = "embeddings_base.bin";
pub const AUX_EMBEDDINGS_FILE: &str = "embeddings_aux.bin";
pub const RESULT_FILE: &str = "result.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PIPELINE_RESULT_FILE: &str = "pipeline_result.csv";
pub const AGGREGATES_FILE: &str = "aggregates.csv";

#[derive(Debug, Parser)]
#[command(name = "emberish", version, about = "Keyless joins over learned record embeddings")]
pub struct Cli {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags mirroring configuration keys. They override `--config`.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "EMBERISH_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub join_type: Option<String>,
    #[arg(long, global = true)]
    pub left_size: Option<usize>,
    #[arg(long, global = true)]
    pub right_size: Option<usize>,
    /// Skip the self-supervised pretraining stage.
    #[arg(long, global = true)]
    pub no_pretrain: bool,
    #[arg(long, global = true)]
    pub num_encoders: Option<usize>,
    #[arg(long, global = true)]
    pub sampler: Option<String>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub learning_rate: Option<f64>,
    #[arg(long, global = true)]
    pub loss_margin: Option<f64>,
    #[arg(long, global = true)]
    pub embedding_dim: Option<usize>,
    #[arg(long, global = true)]
    pub hash_dim: Option<usize>,
    #[arg(long, global = true)]
    pub tokenizer: Option<String>,
    #[arg(long, global = true)]
    pub distance: Option<String>,
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    #[arg(long, global = true)]
    pub supervision_fraction: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic fuzzy-join workload.
    Generate(GenerateArgs),
    /// Train the encoder on the supervision file.
    Train,
    /// Embed both datasets and execute a join.
    Join(JoinArgs),
    /// Score a result file, or compare all methods.
    Evaluate(EvaluateArgs),
    /// Run a chain of joins, optionally averaging labels.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Easy,
    Hard,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum, default_value = "easy")]
    pub preset: Preset,
    /// Source rows when no `--source` file is given.
    #[arg(long, default_value_t = 1000)]
    pub rows: usize,
    #[arg(long, default_value_t = 5)]
    pub copies: usize,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    /// Perturb this dataset instead of a synthetic one.
    #[arg(long)]
    pub source: Option<PathBuf>,
}

impl Default for GenerateArgs {
    fn default() -> Self {
        GenerateArgs {
            preset: Preset::Easy,
            rows: 1000,
            copies: 5,
            test_fraction: 0.2,
            source: None,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct JoinArgs {
    /// File holding one join statement; defaults to the configured join.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Lexical baseline to run instead of the encoder (LD, J-WS, J-2G,
    /// JK-WS, JK-2G, BM25).
    #[arg(long)]
    pub baseline: Option<String>,
    /// Column compared by the key-based baselines.
    #[arg(long)]
    pub key_column: Option<String>,
    /// INNER joins: union both retrieval directions.
    #[arg(long)]
    pub both_directions: bool,
    /// Write the prepared sentences of both datasets as JSONL.
    #[arg(long)]
    pub dump_sentences: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub results: Option<PathBuf>,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 10])]
    pub ks: Vec<usize>,
    /// Run every baseline plus the untrained and trained encoders.
    #[arg(long)]
    pub compare: bool,
    /// Restrict the comparison to these methods.
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<String>,
    #[arg(long)]
    pub key_column: Option<String>,
}

impl Default for EvaluateArgs {
    fn default() -> Self {
        EvaluateArgs {
            results: None,
            truth: None,
            ks: vec![1, 10],
            compare: false,
            methods: Vec::new(),
            key_column: None,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    /// File of join statements, one per hop.
    #[arg(long)]
    pub chain: PathBuf,
    /// Dataset whose label column is averaged over the final matches.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub label_column: Option<String>,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 10, 20, 30])]
    pub ks: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Record of one command run.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: EngineConfig,
    pub seed: u64,
    pub inputs: Vec<FileDigest>,
    pub artifacts: Vec<FileDigest>,
    pub timings: Vec<StageTiming>,
}

impl RunManifest {
    fn new(command: &str, cfg: &EngineConfig) -> Self {
        RunManifest {
            command: command.into(),
            config: cfg.clone(),
            seed: cfg.seed,
            inputs: Vec::new(),
            artifacts: Vec::new(),
            timings: Vec::new(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(digest(path)?);
        Ok(())
    }

    fn artifact(&mut self, path: &Path) -> Result<()> {
        self.artifacts.push(digest(path)?);
        Ok(())
    }

    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f()?;
        self.timings.push(StageTiming {
            stage: stage.into(),
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(out)
    }

    fn save(&self, data_dir: &Path) -> Result<PathBuf> {
        let path = data_dir.join(format!("manifest_{}.json", self.command));
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn artifact_digest(&self, name: &str) -> Option<&str> {
        self.artifacts
            .iter()
            .find(|d| Path::new(&d.path).file_name().is_some_and(|f| f == name))
            .map(|d| d.sha256.as_str())
    }
}

pub fn digest(path: &Path) -> Result<FileDigest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

/// Builds the configuration from `--config`, the data directory fallback
/// and flag overrides.
pub fn resolve_config(args: &ConfigArgs) -> Result<EngineConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_config_with_fallback(&text, args.data_dir.clone())?
        }
        None => match &args.data_dir {
            Some(dir) => EngineConfig::new(dir),
            None => {
                return Err(Error::Config(
                    "data_dir required (--data-dir or EMBERISH_DATA_DIR)".into(),
                ))
            }
        },
    };
    let mut o = Map::new();
    if args.config.is_some() {
        if let Some(d) = &args.data_dir {
            // an explicit flag beats the file
            if std::env::var_os("EMBERISH_DATA_DIR").as_deref() != Some(d.as_os_str()) {
                o.insert("data_dir".into(), Value::from(d.display().to_string()));
            }
        }
    }
    let mut put = |k: &str, v: Option<Value>| {
        if let Some(v) = v {
            o.insert(k.into(), v);
        }
    };
    put("seed", args.seed.map(Value::from));
    put("join_type", args.join_type.clone().map(Value::from));
    put("left_size", args.left_size.map(Value::from));
    put("right_size", args.right_size.map(Value::from));
    put("pretrain", args.no_pretrain.then_some(Value::Bool(false)));
    put("num_encoders", args.num_encoders.map(Value::from));
    put("sampler", args.sampler.clone().map(Value::from));
    put("epochs", args.epochs.map(Value::from));
    put("pretrain_epochs", args.pretrain_epochs.map(Value::from));
    put("batch_size", args.batch_size.map(Value::from));
    put("learning_rate", args.learning_rate.map(Value::from));
    put("loss_margin", args.loss_margin.map(Value::from));
    put("embedding_dim", args.embedding_dim.map(Value::from));
    put("hash_dim", args.hash_dim.map(Value::from));
    put("tokenizer", args.tokenizer.clone().map(Value::from));
    put("distance", args.distance.clone().map(Value::from));
    put("threshold", args.threshold.map(Value::from));
    put("supervision_fraction", args.supervision_fraction.map(Value::from));
    apply_overrides(&mut cfg, &o)?;
    Ok(cfg)
}

fn preparer(cfg: &EngineConfig) -> Preparer {
    Preparer::new(cfg.tokenizer)
}

/// `name` may be a bare dataset name (`base` → `base.csv` or
/// `base.jsonl`) or a path relative to the data directory.
pub fn resolve_dataset_path(data_dir: &Path, name: &str) -> PathBuf {
    let direct = data_dir.join(name);
    if Path::new(name).extension().is_some() {
        return direct;
    }
    let csv = data_dir.join(format!("{name}.csv"));
    let jsonl = data_dir.join(format!("{name}.jsonl"));
    if !csv.exists() && jsonl.exists() {
        jsonl
    } else {
        csv
    }
}

fn load_named(cfg: &EngineConfig, name: &str, role: Role, manifest: &mut RunManifest) -> Result<Dataset> {
    let path = resolve_dataset_path(&cfg.data_dir, name);
    let ds = load_dataset_auto(&path, role)?;
    manifest.input(&path)?;
    Ok(ds)
}

fn missing_inputs(data_dir: &Path, names: &[&str]) -> Result<()> {
    let missing: Vec<PathBuf> = names.iter().map(|n| data_dir.join(n)).filter(|p| !p.exists()).collect();
    match missing.len() {
        0 => Ok(()),
        1 => Err(Error::MissingInput(missing[0].clone())),
        _ => Err(Error::InvalidArgument(format!(
            "missing input files: {}",
            missing
                .iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ))),
    }
}

/// Writes base.csv, aux.csv, truth_train.csv, truth_test.csv and
/// supervision.csv (a copy of the training truth).
pub fn cmd_generate(cfg: &EngineConfig, args: &GenerateArgs) -> Result<RunManifest> {
    let mut manifest = RunManifest::new("generate", cfg);
    let dir = &cfg.data_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let source = match &args.source {
        Some(path) => {
            manifest.input(path)?;
            load_dataset_auto(path, Role::Auxiliary)?
        }
        None => synthetic_source(args.rows, stage_seed(cfg.seed, "source"))?,
    };
    let base_cfg = match args.preset {
        Preset::Easy => PerturbationConfig::easy(stage_seed(cfg.seed, "perturb")),
        Preset::Hard => PerturbationConfig::hard(stage_seed(cfg.seed, "perturb")),
    };
    let pcfg = PerturbationConfig {
        copies_per_row: args.copies,
        ..base_cfg
    };
    let fj = manifest.time("perturb", || generate_fuzzy_join(&source, &pcfg))?;
    let (train_pairs, test_pairs) = manifest.time("split", || {
        split_train_test(&fj.truth, args.test_fraction, stage_seed(cfg.seed, "split"))
    })?;
    type Writer<'a> = &'a dyn Fn(&Path) -> Result<()>;
    let outputs: [(&str, Writer); 5] = [
        (BASE_FILE, &|p| fj.base.save_csv(p)),
        (AUX_FILE, &|p| fj.aux.save_csv(p)),
        (TRUTH_TRAIN_FILE, &|p| write_pairs(p, &train_pairs)),
        (TRUTH_TEST_FILE, &|p| write_pairs(p, &test_pairs)),
        (SUPERVISION_FILE, &|p| write_pairs(p, &train_pairs)),
    ];
    for (name, write) in outputs {
        let path = dir.join(name);
        write(&path)?;
        manifest.artifact(&path)?;
    }
    manifest.save(dir)?;
    Ok(manifest)
}

/// Seeded subset of `round(fraction · n)` pairs (at least one), in their
/// original order.
fn supervision_subset(pairs: Vec<SupervisionPair>, fraction: f64, seed: u64) -> Vec<SupervisionPair> {
    if fraction >= 1.0 {
        return pairs;
    }
    let keep = ((fraction * pairs.len() as f64).round() as usize).clamp(1, pairs.len().max(1));
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng_for(seed, "supervision-fraction"));
    let mut chosen: Vec<usize> = order.into_iter().take(keep).collect();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| pairs[i].clone()).collect()
}

pub fn train_config(cfg: &EngineConfig, epochs: usize, stage: &str) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        margin: cfg.loss_margin,
        seed: stage_seed(cfg.seed, stage),
    }
}

/// Initial encoder weights for a configuration. The untrained comparison
/// row uses the same weights.
pub fn initial_encoders(cfg: &EngineConfig) -> Result<Encoders> {
    match cfg.encoder_init {
        EncoderInit::Random => Encoders::init(
            cfg.num_encoders,
            cfg.hash_dim,
            cfg.embedding_dim,
            cfg.normalize,
            stage_seed(cfg.seed, "encoder"),
        ),
        EncoderInit::PretrainedArtifact => load_encoders(cfg),
    }
}

pub fn load_encoders(cfg: &EngineConfig) -> Result<Encoders> {
    let base = EncoderModel::load(&cfg.data_dir.join(MODEL_FILE))?;
    let aux_path = cfg.data_dir.join(AUX_MODEL_FILE);
    if cfg.num_encoders == 2 {
        let aux = EncoderModel::load(&aux_path)?;
        Ok(Encoders::Separate { base, aux })
    } else {
        Ok(Encoders::Shared(base))
    }
}

fn save_encoders(enc: &Encoders, dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    let base_path = dir.join(MODEL_FILE);
    save_model(enc.base(), &base_path)?;
    manifest.artifact(&base_path)?;
    if let Encoders::Separate { aux, .. } = enc {
        let aux_path = dir.join(AUX_MODEL_FILE);
        save_model(aux, &aux_path)?;
        manifest.artifact(&aux_path)?;
    }
    Ok(())
}

/// Optional self-supervised stage, then supervised triplet training.
/// Writes the model and `loss_trace.csv` (`stage,epoch,loss`).
pub fn cmd_train(cfg: &EngineConfig) -> Result<RunManifest> {
    let dir = &cfg.data_dir;
    missing_inputs(dir, &[BASE_FILE, AUX_FILE, SUPERVISION_FILE])?;
    let mut manifest = RunManifest::new("train", cfg);
    let base = load_named(cfg, "base", Role::Base, &mut manifest)?;
    let aux = load_named(cfg, "aux", Role::Auxiliary, &mut manifest)?;
    let sup_path = dir.join(SUPERVISION_FILE);
    let supervision = load_supervision(&sup_path, &base, &aux)?;
    manifest.input(&sup_path)?;
    let prep = preparer(cfg);
    let mut enc = initial_encoders(cfg)?;
    let mut trace: Vec<(&str, f64)> = Vec::new();

    if cfg.pretrain && cfg.pretrain_epochs > 0 {
        let triples = manifest.time("pretrain-pairs", || {
            build_pretraining_pairs(&base, &aux, 1, stage_seed(cfg.seed, "pretrain-pairs"), &prep)
        })?;
        let losses = manifest.time("pretrain", || {
            train(
                &mut enc,
                &triples,
                &base,
                &aux,
                &train_config(cfg, cfg.pretrain_epochs, "pretrain"),
                &prep,
            )
        })?;
        trace.extend(losses.into_iter().map(|l| ("pretrain", l)));
    }

    if cfg.finetune && cfg.epochs > 0 {
        let tcfg = train_config(cfg, cfg.epochs, "train");
        let losses = match supervision {
            Supervision::Triples(triples) => {
                let kept = supervision_subset(
                    triples
                        .iter()
                        .map(|t| SupervisionPair::new(&t.anchor_id, format!("{}\u{0}{}", t.positive_id, t.negative_id)))
                        .collect(),
                    cfg.supervision_fraction,
                    cfg.seed,
                );
                let triples: Vec<_> = kept
                    .into_iter()
                    .map(|p| {
                        let (pos, neg) = p.aux_id.split_once('\u{0}').expect("joined above");
                        crate::model::SupervisionTriple::new(p.base_id, pos, neg)
                    })
                    .collect();
                manifest.time("train", || train(&mut enc, &triples, &base, &aux, &tcfg, &prep))?
            }
            Supervision::Pairs(pairs) => {
                let pairs = supervision_subset(pairs, cfg.supervision_fraction, cfg.seed);
                let scfg = SamplerConfig {
                    kind: cfg.sampler,
                    tier_size: cfg.tier_size,
                    seed: stage_seed(cfg.seed, "sampler"),
                };
                let sampler = manifest.time("tiers", || NegativeSampler::new(&pairs, &base, &aux, &scfg, &prep))?;
                let resample = cfg.resample_negatives;
                manifest.time("train", || {
                    train_with(
                        &mut enc,
                        |e| sampler.sample_epoch(if resample { e } else { 0 }),
                        &base,
                        &aux,
                        &tcfg,
                        &prep,
                    )
                })?
            }
        };
        trace.extend(losses.into_iter().map(|l| ("train", l)));
    }

    save_encoders(&enc, dir, &mut manifest)?;
    let trace_path = dir.join(LOSS_TRACE_FILE);
    let mut w = csv::Writer::from_path(&trace_path)?;
    w.write_record(["stage", "epoch", "loss"])?;
    let mut epoch = HashMap::new();
    for (stage, loss) in &trace {
        let e = epoch.entry(*stage).or_insert(0usize);
        *e += 1;
        w.write_record([stage.to_string(), e.to_string(), loss.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&trace_path, e))?;
    manifest.artifact(&trace_path)?;
    manifest.save(dir)?;
    Ok(manifest)
}

fn join_spec_for(cfg: &EngineConfig, args: &JoinArgs) -> Result<JoinSpec> {
    match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_join_spec(&text)
        }
        None => Ok(cfg.join_spec()),
    }
}

/// Embeds both datasets (or runs a lexical baseline) and writes
/// `result.csv`.
pub fn cmd_join(cfg: &EngineConfig, args: &JoinArgs) -> Result<RunManifest> {
    let dir = &cfg.data_dir;
    let mut manifest = RunManifest::new("join", cfg);
    let spec = join_spec_for(cfg, args)?;
    if let Some(path) = &args.spec {
        manifest.input(path)?;
    }
    let base = load_named(cfg, &spec.base_ref, Role::Base, &mut manifest)?;
    let aux = load_named(cfg, &spec.aux_ref, Role::Auxiliary, &mut manifest)?;
    if let Some(path) = &args.dump_sentences {
        let prep = preparer(cfg);
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for ds in [&base, &aux] {
            dump_sentences(&prep.prepare_all(ds.records()), &mut w).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        manifest.artifact(path)?;
    }
    let result = match &args.baseline {
        Some(name) => {
            let kind: LexicalKind = name.parse()?;
            manifest.time("baseline", || {
                lexical_join(kind, &base, &aux, args.key_column.as_deref(), spec.right_size)
            })?
        }
        None => {
            missing_inputs(dir, &[MODEL_FILE])?;
            let enc = load_encoders(cfg)?;
            manifest.input(&dir.join(MODEL_FILE))?;
            let prep = preparer(cfg);
            let (be, ae) = manifest.time("embed", || {
                Ok((
                    embed_dataset(enc.base(), &base, &prep),
                    embed_dataset(enc.aux(), &aux, &prep),
                ))
            })?;
            for (name, entries) in [(BASE_EMBEDDINGS_FILE, &be), (AUX_EMBEDDINGS_FILE, &ae)] {
                let path = dir.join(name);
                save_embeddings(&path, entries)?;
                manifest.artifact(&path)?;
            }
            let opts = JoinOptions {
                threshold: cfg.threshold,
                both_directions: args.both_directions,
                ..JoinOptions::default()
            };
            manifest.time("join", || execute_join(&spec, &be, &ae, cfg.distance, &opts))?
        }
    };
    let out = dir.join(RESULT_FILE);
    result.save_csv(&out)?;
    manifest.artifact(&out)?;
    manifest.save(dir)?;
    Ok(manifest)
}

/// Truth pairs from an explicit file, else `truth_test.csv`, else
/// `supervision.csv`.
fn truth_path(dir: &Path, explicit: Option<&PathBuf>) -> PathBuf {
    if let Some(p) = explicit {
        return p.clone();
    }
    let test = dir.join(TRUTH_TEST_FILE);
    if test.exists() {
        test
    } else {
        dir.join(SUPERVISION_FILE)
    }
}

fn read_truth(path: &Path) -> Result<TruthSet> {
    match read_supervision(path)? {
        Supervision::Pairs(p) => Ok(TruthSet::from_pairs(&p)),
        Supervision::Triples(t) => Ok(TruthSet::from_pairs(
            &t.iter()
                .map(|t| SupervisionPair::new(&t.anchor_id, &t.positive_id))
                .collect::<Vec<_>>(),
        )),
    }
}

/// Scores `result.csv` against the truth file, or with `--compare` runs
/// every method. Writes `metrics.csv` and prints the table.
pub fn cmd_evaluate(cfg: &EngineConfig, args: &EvaluateArgs) -> Result<(RunManifest, MetricTable)> {
    let dir = &cfg.data_dir;
    let mut manifest = RunManifest::new("evaluate", cfg);
    if args.ks.is_empty() || args.ks.contains(&0) {
        return Err(Error::InvalidArgument("ks must be ≥ 1".into()));
    }
    let tpath = truth_path(dir, args.truth.as_ref());
    let truth = read_truth(&tpath)?;
    manifest.input(&tpath)?;
    let table = if args.compare || !args.methods.is_empty() {
        let base = load_named(cfg, "base", Role::Base, &mut manifest)?;
        let aux = load_named(cfg, "aux", Role::Auxiliary, &mut manifest)?;
        let untrained = initial_encoders(&EngineConfig {
            encoder_init: EncoderInit::Random,
            num_encoders: 1,
            ..cfg.clone()
        })?;
        let trained = if dir.join(MODEL_FILE).exists() {
            Some(load_encoders(cfg)?)
        } else {
            None
        };
        let mut methods: Vec<Method> = if args.methods.is_empty() {
            Method::ALL.to_vec()
        } else {
            args.methods.iter().map(|m| m.parse()).collect::<Result<_>>()?
        };
        let key_column = args.key_column.clone().or_else(|| {
            base.column_names()
                .iter()
                .find(|c| aux.column_names().contains(c))
                .cloned()
        });
        if key_column.is_none() {
            methods.retain(|m| !matches!(m, Method::Lexical(k) if k.needs_key_column()));
        }
        if trained.is_none() {
            if args.methods.iter().any(|m| m.eq_ignore_ascii_case("trained-encoder")) {
                return Err(Error::MissingInput(dir.join(MODEL_FILE)));
            }
            methods.retain(|m| *m != Method::TrainedEncoder);
        }
        let ctx = ComparisonContext {
            preparer: preparer(cfg),
            key_column,
            untrained: Some(untrained.base()),
            trained: trained.as_ref(),
            metric: cfg.distance,
        };
        manifest.time("compare", || {
            run_comparison(&base, &aux, &truth, &methods, &args.ks, &ctx)
        })?
    } else {
        let rpath = args.results.clone().unwrap_or_else(|| dir.join(RESULT_FILE));
        let result = JoinResult::load_csv(&rpath, ScoreOrder::for_metric(cfg.distance))?;
        manifest.input(&rpath)?;
        let mut table = MetricTable::default();
        for &k in &args.ks {
            table.rows.push(MetricRow {
                method: "result".into(),
                k,
                recall: recall_at_k(&result, &truth, k),
            });
        }
        println!("mrr@10 {:.4}", mrr_at_k(&result, &truth, 10));
        table
    };
    let out = dir.join(METRICS_FILE);
    let file = std::fs::File::create(&out).map_err(|e| Error::io(&out, e))?;
    table.write_csv(std::io::BufWriter::new(file))?;
    manifest.artifact(&out)?;
    print!("{}", table.render());
    manifest.save(dir)?;
    Ok((manifest, table))
}

/// Runs the chain in `args.chain`; with `--labels` and `--label-column`
/// also averages the labels of the final matches for each k.
pub fn cmd_pipeline(cfg: &EngineConfig, args: &PipelineArgs) -> Result<RunManifest> {
    let dir = &cfg.data_dir;
    let mut manifest = RunManifest::new("pipeline", cfg);
    let text = std::fs::read_to_string(&args.chain).map_err(|e| Error::io(&args.chain, e))?;
    manifest.input(&args.chain)?;
    let specs = parse_join_specs(&text)?;
    if specs.is_empty() {
        return Err(Error::InvalidArgument("chain file holds no join statements".into()));
    }
    missing_inputs(dir, &[MODEL_FILE])?;
    let enc = load_encoders(cfg)?;
    let prep = preparer(cfg);

    let mut loaded: HashMap<String, Dataset> = HashMap::new();
    for s in &specs {
        for name in [&s.base_ref, &s.aux_ref] {
            if !loaded.contains_key(name) {
                let ds = load_named(cfg, name, Role::Auxiliary, &mut manifest)?;
                loaded.insert(name.clone(), ds);
            }
        }
    }
    let result = manifest.time("chain", || {
        let initial = embed_dataset(enc.base(), &loaded[&specs[0].base_ref], &prep);
        let mut stages = Vec::with_capacity(specs.len());
        for (i, s) in specs.iter().enumerate() {
            let index = build_index(&embed_dataset(enc.aux(), &loaded[&s.aux_ref], &prep), cfg.distance)?;
            let queries = if i == 0 {
                HashMap::new()
            } else {
                embed_dataset(enc.base(), &loaded[&s.base_ref], &prep)
                    .into_iter()
                    .collect()
            };
            stages.push(ChainStage {
                spec: s.clone(),
                index,
                queries,
                threshold: cfg.threshold,
            });
        }
        chain_joins(&initial, &stages)
    })?;
    let out = dir.join(PIPELINE_RESULT_FILE);
    result.save_csv(&out)?;
    manifest.artifact(&out)?;

    if let (Some(labels_path), Some(column)) = (&args.labels, &args.label_column) {
        let labels_ds = load_dataset_auto(labels_path, Role::Auxiliary)?;
        manifest.input(labels_path)?;
        let labels = numeric_column(&labels_ds, column)?;
        let queries = &loaded[&specs[0].base_ref];
        let known = numeric_column(queries, column).ok();
        let out = dir.join(AGGREGATES_FILE);
        let mut w = csv::Writer::from_path(&out)?;
        w.write_record(["base_id", "k", "prediction"])?;
        for &k in &args.ks {
            let predictions = aggregate_labels(&result, &labels, k);
            for (id, p) in &predictions {
                w.write_record([id.clone(), k.to_string(), p.to_string()])?;
            }
            if let Some(known) = &known {
                if !predictions.is_empty() {
                    println!("k={k} mse {:.4}", crate::evalkit::mse(&predictions, known)?);
                }
            }
        }
        w.flush().map_err(|e| Error::io(&out, e))?;
        manifest.artifact(&out)?;
    }
    manifest.save(dir)?;
    Ok(manifest)
}

fn numeric_column(ds: &Dataset, column: &str) -> Result<HashMap<String, f64>> {
    if !ds.column_names().iter().any(|c| c == column) {
        return Err(Error::MissingKeyColumn(format!("{column} (dataset {})", ds.name)));
    }
    let mut out = HashMap::new();
    for r in ds.records() {
        if let Some(v) = r.get(column) {
            let text = v.as_text();
            if text.trim().is_empty() {
                continue;
            }
            let x: f64 = text
                .trim()
                .parse()
                .map_err(|_| Error::InvalidRecord(format!("{}: {column} value {text:?} is not a number", r.id)))?;
            out.insert(r.id.clone(), x);
        }
    }
    Ok(out)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(&cli.config)?;
    match &cli.command {
        Command::Generate(a) => cmd_generate(&cfg, a).map(|_| ()),
        Command::Train => cmd_train(&cfg).map(|_| ()),
        Command::Join(a) => cmd_join(&cfg, a).map(|_| ()),
        Command::Evaluate(a) => cmd_evaluate(&cfg, a).map(|_| ()),
        Command::Pipeline(a) => cmd_pipeline(&cfg, a).map(|_| ()),
    }
}

/// Parses arguments, runs the command and returns the process exit code:
/// 0 on success, 1 for invalid input, 2 for runtime failures.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::joinspec::{JoinType, SamplerKind};

    fn args(dir: &str) -> ConfigArgs {
        ConfigArgs {
            data_dir: Some(PathBuf::from(dir)),
            ..ConfigArgs::default()
        }
    }

    #[test]
    fn flags_override_defaults() {
        let cfg = resolve_config(&ConfigArgs {
            join_type: Some("left".into()),
            right_size: Some(3),
            sampler: Some("random".into()),
            no_pretrain: true,
            threshold: Some(0.5),
            ..args("/data")
        })
        .unwrap();
        assert_eq!(cfg.data_dir, PathBuf::from("/data"));
        assert_eq!(cfg.join_type, JoinType::Left);
        assert_eq!(cfg.right_size, 3);
        assert_eq!(cfg.sampler, SamplerKind::Random);
        assert!(!cfg.pretrain);
        assert_eq!(cfg.threshold, Some(0.5));
    }

    #[test]
    fn flags_are_validated() {
        let err = resolve_config(&ConfigArgs {
            left_size: Some(0),
            ..args("/data")
        })
        .unwrap_err();
        assert!(err.is_validation());
        assert!(resolve_config(&ConfigArgs::default()).is_err());
    }

    #[test]
    fn config_file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"data_dir": "/from/file", "epochs": 3, "seed": 9}"#).unwrap();
        let cfg = resolve_config(&ConfigArgs {
            config: Some(path),
            seed: Some(4),
            ..ConfigArgs::default()
        })
        .unwrap();
        assert_eq!(cfg.data_dir, PathBuf::from("/from/file"));
        assert_eq!((cfg.epochs, cfg.seed), (3, 4));
    }

    #[test]
    fn subset_is_seeded_and_ordered() {
        let pairs: Vec<SupervisionPair> = (0..20).map(|i| SupervisionPair::new(format!("b{i:02}"), "a")).collect();
        let a = supervision_subset(pairs.clone(), 0.25, 3);
        assert_eq!(a.len(), 5);
        assert_eq!(a, supervision_subset(pairs.clone(), 0.25, 3));
        assert!(a.windows(2).all(|w| w[0].base_id < w[1].base_id));
        assert_eq!(supervision_subset(pairs.clone(), 0.001, 3).len(), 1);
        assert_eq!(supervision_subset(pairs.clone(), 1.0, 3), pairs);
    }

    #[test]
    fn dataset_names_resolve() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        assert_eq!(resolve_dataset_path(d, "base"), d.join("base.csv"));
        std::fs::write(d.join("docs.jsonl"), "").unwrap();
        assert_eq!(resolve_dataset_path(d, "docs"), d.join("docs.jsonl"));
        assert_eq!(resolve_dataset_path(d, "x.tsv"), d.join("x.tsv"));
    }
}
