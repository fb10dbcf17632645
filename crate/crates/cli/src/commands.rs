use std::path::{Path, PathBuf};

use maskinv_core::cache::EmbeddingCache;
use maskinv_core::corpus::{
    read_corpus, sample_corpus, sha256_hex, split_point, write_corpus, CorpusHeader, MarkovSource, TokenSequence,
};
use maskinv_core::decode::{decode, DecodeConfig, DecodeTrace, KSchedule, Strategy};
use maskinv_core::diffusion::NoiseSchedule;
use maskinv_core::model::DenoiserParams;
use maskinv_core::trainer::{
    load_checkpoint, train, Checkpoint, DataIdentity, Dataset, TrainOutcome, BUILD_ID, MANIFEST_FILE,
};
use maskinv_encoder::{build_cache, cosine, random_pair_cosine, ToyEncoder};
use maskinv_eval::{
    check_compatible, decode_set, eval_inversion, exact_match, score, token_accuracy, CosineBaseline, EvalPlan,
    EvalReport, EvalSet,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;

pub const CORPUS_FILE: &str = "corpus.txt";
pub const CACHE_BLOB: &str = "embeddings.bin";
pub const CACHE_MANIFEST: &str = "embeddings.json";
pub const DATA_MANIFEST: &str = "data.json";

/// Settings shared by every command.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub force: bool,
}

impl Context {
    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn train_dir(&self, conditional: bool) -> PathBuf {
        self.out.join(if conditional { "train" } else { "train-unconditional" })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn refuse_existing(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::config(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub build: String,
    pub config: RunConfig,
    pub corpus_hash: String,
    pub cache_sha256: String,
    pub encoder_fingerprint: String,
    pub train_count: usize,
    pub val_count: usize,
}

pub fn encoder_for(cfg: &RunConfig) -> Result<ToyEncoder, CliError> {
    Ok(ToyEncoder::new(cfg.encoder.seed, cfg.vocab()?, cfg.corpus.n, cfg.encoder.d)?)
}

pub fn gen_data(ctx: &Context) -> Result<DataManifest, CliError> {
    let cfg = &ctx.config;
    let dir = ctx.data_dir();
    refuse_existing(&dir.join(CORPUS_FILE), ctx.force)?;
    std::fs::create_dir_all(&dir)?;

    let c = &cfg.corpus;
    let source = MarkovSource::build(c.seed, cfg.vocab()?, c.order)?;
    let seqs = sample_corpus(&source, c.count, c.n, c.seed)?;
    let header = CorpusHeader {
        vocab_size: c.vocab_size,
        seq_len: c.n,
        seed: c.seed,
        order: c.order,
    };
    let corpus_hash = write_corpus(&dir.join(CORPUS_FILE), &header, &seqs)?;
    log::info!("wrote {} sequences ({corpus_hash})", seqs.len());

    let encoder = encoder_for(cfg)?;
    let cache = build_cache(&encoder, &seqs, &corpus_hash)?;
    cache.save(&dir.join(CACHE_BLOB), &dir.join(CACHE_MANIFEST))?;
    let split = split_point(seqs.len());
    let manifest = DataManifest {
        build: BUILD_ID.to_string(),
        config: cfg.clone(),
        corpus_hash,
        cache_sha256: sha256_hex(&cache.blob_bytes()),
        encoder_fingerprint: encoder.fingerprint(),
        train_count: split,
        val_count: seqs.len() - split,
    };
    write_json(&dir.join(DATA_MANIFEST), &manifest)?;
    println!(
        "corpus: {} sequences ({} train / {} val), cache rows: {}",
        seqs.len(),
        manifest.train_count,
        manifest.val_count,
        cache.manifest.count
    );
    Ok(manifest)
}

/// Loaded and cross-checked data artifacts.
#[derive(Debug, Clone)]
pub struct Data {
    pub manifest: DataManifest,
    pub seqs: Vec<TokenSequence>,
    pub cache: EmbeddingCache,
}

impl Data {
    pub fn split(&self) -> usize {
        split_point(self.seqs.len())
    }

    pub fn train_set(&self) -> Result<Dataset<'_>, CliError> {
        let s = self.split();
        let d = self.cache.manifest.d;
        Ok(Dataset::new(&self.seqs[..s], &self.cache.values()[..s * d], d)?)
    }

    pub fn val_set(&self) -> Result<Dataset<'_>, CliError> {
        let s = self.split();
        let d = self.cache.manifest.d;
        Ok(Dataset::new(&self.seqs[s..], &self.cache.values()[s * d..], d)?)
    }

    pub fn eval_set(&self, samples: usize) -> Result<EvalSet<'_>, CliError> {
        let v = self.val_set()?;
        Ok(EvalSet::new(v.seqs, v.embeddings, self.cache.manifest.d)?.head(samples))
    }

    pub fn identity(&self) -> DataIdentity {
        DataIdentity {
            corpus_hash: self.manifest.corpus_hash.clone(),
            encoder_seed: self.cache.manifest.encoder_seed,
        }
    }
}

/// Loads the data directory and refuses anything stale or inconsistent.
pub fn load_data(dir: &Path) -> Result<Data, CliError> {
    let mpath = dir.join(DATA_MANIFEST);
    let manifest: DataManifest = serde_json::from_slice(
        &std::fs::read(&mpath).map_err(|e| CliError::data(format!("cannot read {}: {e}", mpath.display())))?,
    )?;
    let (header, seqs, corpus_hash) = read_corpus(&dir.join(CORPUS_FILE))?;
    let cache = EmbeddingCache::load(&dir.join(CACHE_BLOB), &dir.join(CACHE_MANIFEST))?;
    if corpus_hash != manifest.corpus_hash {
        return Err(CliError::data(format!(
            "corpus hashes to {corpus_hash} but data manifest records {}",
            manifest.corpus_hash
        )));
    }
    cache.check_corpus(&corpus_hash, seqs.len())?;
    let blob_hash = sha256_hex(&cache.blob_bytes());
    if blob_hash != manifest.cache_sha256 {
        return Err(CliError::data(format!(
            "embedding cache hashes to {blob_hash} but data manifest records {}",
            manifest.cache_sha256
        )));
    }
    let m = &cache.manifest;
    let c = &manifest.config;
    if m.encoder_seed != c.encoder.seed || m.d != c.encoder.d || m.vocab_size != header.vocab_size || m.n != header.seq_len
    {
        return Err(CliError::data("embedding cache manifest disagrees with the corpus or data manifest"));
    }
    Ok(Data { manifest, seqs, cache })
}

/// The data a command is about to use must come from the configured corpus
/// and encoder.
fn check_data_config(cfg: &RunConfig, data: &Data) -> Result<(), CliError> {
    let made = &data.manifest.config;
    if made.corpus != cfg.corpus || made.encoder != cfg.encoder {
        return Err(CliError::data(format!(
            "data was generated with corpus {:?} / encoder {:?}, config asks for {:?} / {:?}",
            made.corpus, made.encoder, cfg.corpus, cfg.encoder
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub build: String,
    pub config: RunConfig,
    pub corpus_hash: String,
    pub encoder_seed: u64,
    pub best_step: usize,
    pub best_val_loss: f64,
    pub final_train_acc: f64,
}

/// Trains on the data in `data_dir`, writing checkpoints and metrics to
/// `out_dir`.
pub fn train_into(cfg: &RunConfig, data: &Data, out_dir: &Path, force: bool) -> Result<TrainOutcome, CliError> {
    check_data_config(cfg, data)?;
    refuse_existing(&out_dir.join("metrics.csv"), force)?;
    let outcome = train(
        &cfg.model,
        &cfg.train,
        &data.train_set()?,
        &data.val_set()?,
        &data.identity(),
        Some(out_dir),
    )?;
    write_json(
        &out_dir.join("train.json"),
        &TrainManifest {
            build: BUILD_ID.to_string(),
            config: cfg.clone(),
            corpus_hash: data.manifest.corpus_hash.clone(),
            encoder_seed: data.cache.manifest.encoder_seed,
            best_step: outcome.best_step,
            best_val_loss: outcome.best_val_loss,
            final_train_acc: outcome.final_train_acc,
        },
    )?;
    Ok(outcome)
}

pub fn cmd_train(ctx: &Context, data_dir: Option<&Path>, unconditional: bool) -> Result<TrainOutcome, CliError> {
    let data = load_data(&data_dir.map_or_else(|| ctx.data_dir(), Path::to_path_buf))?;
    let mut cfg = ctx.config.clone();
    cfg.model.conditional = !unconditional;
    let out = ctx.train_dir(!unconditional);
    let outcome = train_into(&cfg, &data, &out, ctx.force)?;
    println!(
        "best step {} val loss {:.6} final train acc {:.4} ({:.0}s)",
        outcome.best_step, outcome.best_val_loss, outcome.final_train_acc, outcome.seconds
    );
    Ok(outcome)
}

/// Loads a checkpoint directory; evaluation uses the EMA weights.
pub fn load_model(dir: &Path) -> Result<(Checkpoint, DenoiserParams<f32>), CliError> {
    if !dir.join(MANIFEST_FILE).exists() {
        return Err(CliError::data(format!("{} is not a checkpoint directory", dir.display())));
    }
    let ckpt = load_checkpoint(dir, None)?;
    let ema = ckpt.ema.clone();
    Ok((ckpt, ema))
}

/// Where the target embedding for `invert` comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    /// Space-separated token ids, encoded with the checkpoint's encoder.
    Text(String),
    /// Row of the data directory's embedding cache.
    Cache(usize),
    /// Whitespace- or comma-separated floats, or a JSON array.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertResult {
    pub tokens: Vec<u32>,
    pub text: String,
    pub decode: DecodeConfig,
    pub forward_passes: usize,
    pub cosine_to_target: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gold: Option<Vec<u32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_match: Option<bool>,
    pub trace: DecodeTrace,
}

pub fn parse_vector(text: &str) -> Result<Vec<f32>, CliError> {
    let trimmed = text.trim();
    let values: Vec<f32> = if trimmed.starts_with('[') {
        serde_json::from_str(trimmed).map_err(|e| CliError::data(format!("vector file: {e}")))?
    } else {
        trimmed
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f32>().map_err(|e| CliError::data(format!("vector file: {s:?}: {e}"))))
            .collect::<Result<_, _>>()?
    };
    if values.is_empty() || values.iter().any(|x| !x.is_finite()) {
        return Err(CliError::data("vector file holds no values or non-finite values"));
    }
    Ok(values)
}

pub fn cmd_invert(
    ctx: &Context,
    checkpoint: &Path,
    source: &Source,
    data_dir: Option<&Path>,
    decode_cfg: &DecodeConfig,
) -> Result<InvertResult, CliError> {
    let (ckpt, model) = load_model(checkpoint)?;
    let m = &ckpt.manifest;
    let encoder = ToyEncoder::new(
        m.encoder_seed,
        m.model.vocab(),
        m.model.seq_len,
        m.model.embed_dim,
    )?;
    let (e, gold): (Vec<f32>, Option<TokenSequence>) = match source {
        Source::Text(line) => {
            let gold = TokenSequence::parse_line(line).map_err(CliError::data)?;
            (encoder.encode(&gold)?.values().to_vec(), Some(gold))
        }
        Source::Cache(i) => {
            let data = load_data(&data_dir.map_or_else(|| ctx.data_dir(), Path::to_path_buf))?;
            check_compatible(m, &data.cache.manifest)?;
            if *i >= data.seqs.len() {
                return Err(CliError::data(format!("cache index {i} out of range ({} rows)", data.seqs.len())));
            }
            (data.cache.row(*i).to_vec(), Some(data.seqs[*i].clone()))
        }
        Source::File(p) => (parse_vector(&std::fs::read_to_string(p)?)?, None),
    };
    let out = decode(&model, &e, decode_cfg)?;
    // the encoder only sees the finished prediction
    let cos = cosine(encoder.encode(&out.tokens)?.values(), &e)?;
    let (token_acc, exact) = match &gold {
        Some(g) => (Some(token_accuracy(&out.tokens, g)?), Some(exact_match(&out.tokens, g))),
        None => (None, None),
    };
    Ok(InvertResult {
        tokens: out.tokens.0.clone(),
        text: out.tokens.to_line(),
        decode: decode_cfg.clone(),
        forward_passes: out.trace.forward_passes,
        cosine_to_target: cos,
        gold: gold.map(|g| g.0),
        token_accuracy: token_acc,
        exact_match: exact,
        trace: out.trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalManifest {
    pub build: String,
    pub config: RunConfig,
    pub checkpoint: String,
    pub checkpoint_blob_sha256: String,
    pub unconditional: String,
}

pub fn random_pair_baseline(cfg: &RunConfig, data: &Data) -> Result<CosineBaseline, CliError> {
    let encoder = encoder_for(cfg)?;
    let val = data.val_set()?;
    let m = random_pair_cosine(&encoder, val.seqs, cfg.eval.random_pairs, cfg.eval.seed)?;
    Ok(CosineBaseline {
        mean: m.mean,
        std: m.std,
        pairs: m.count,
    })
}

pub fn cmd_eval(
    ctx: &Context,
    checkpoint: &Path,
    unconditional: Option<&Path>,
    data_dir: Option<&Path>,
) -> Result<EvalReport, CliError> {
    let cfg = &ctx.config;
    let data = load_data(&data_dir.map_or_else(|| ctx.data_dir(), Path::to_path_buf))?;
    check_data_config(cfg, &data)?;
    let (ckpt, model) = load_model(checkpoint)?;
    check_compatible(&ckpt.manifest, &data.cache.manifest)?;

    let default_uncond = ctx.train_dir(false).join("best");
    let uncond_dir = match unconditional {
        Some(p) => Some(p.to_path_buf()),
        None if default_uncond.join(MANIFEST_FILE).exists() => Some(default_uncond),
        None => None,
    };
    let (uncond, source) = match &uncond_dir {
        Some(dir) => {
            let (u, params) = load_model(dir)?;
            check_compatible(&u.manifest, &data.cache.manifest)?;
            let shown = dir.strip_prefix(&ctx.out).unwrap_or(dir);
            (params, format!("separately trained model {}", shown.display()))
        }
        None => {
            let mut p = model.clone();
            p.zero_conditioning();
            (p, "zero-conditioning switch".to_string())
        }
    };

    let encoder = encoder_for(cfg)?;
    let set = data.eval_set(cfg.eval.samples)?;
    let plan = EvalPlan {
        configs: cfg.decode.clone(),
        seed: cfg.eval.seed,
        unconditional_source: source.clone(),
        random_pair_cosine: Some(random_pair_baseline(cfg, &data)?),
    };
    let report = eval_inversion(&model, &uncond, &encoder, &set, &plan)?;

    let dir = ctx.out.join("eval");
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join("report.json"), &report)?;
    std::fs::write(dir.join("report.csv"), report.render_csv())?;
    std::fs::write(dir.join("report.txt"), report.render_table())?;
    write_json(
        &dir.join("eval.json"),
        &EvalManifest {
            build: BUILD_ID.to_string(),
            config: cfg.clone(),
            checkpoint: checkpoint.display().to_string(),
            checkpoint_blob_sha256: ckpt.manifest.blob_sha256.clone(),
            unconditional: source,
        },
    )?;
    print!("{}", report.render_table());
    Ok(report)
}

pub const DEFAULT_TAUS: [f64; 4] = [0.0, 0.05, 0.1, 0.2];
pub const REMASK_HEADER: &str = "tau,token_acc,cosine,bleu";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemaskRow {
    pub tau: f64,
    pub token_acc: f64,
    pub cosine: f64,
    pub bleu: f64,
}

pub fn cmd_ablate_remask(
    ctx: &Context,
    checkpoint: &Path,
    taus: &[f64],
    steps: usize,
    data_dir: Option<&Path>,
) -> Result<Vec<RemaskRow>, CliError> {
    let cfg = &ctx.config;
    let data = load_data(&data_dir.map_or_else(|| ctx.data_dir(), Path::to_path_buf))?;
    check_data_config(cfg, &data)?;
    let (ckpt, model) = load_model(checkpoint)?;
    check_compatible(&ckpt.manifest, &data.cache.manifest)?;
    let encoder = encoder_for(cfg)?;
    let set = data.eval_set(cfg.eval.samples)?;

    let mut rows = Vec::new();
    for &tau in taus {
        let dc = DecodeConfig {
            strategy: Strategy::EulerRemask,
            steps,
            tau,
            seed: cfg.eval.seed,
            ..DecodeConfig::default()
        };
        dc.validate()?;
        let (preds, fp) = decode_set(&model, &set, &dc)?;
        let m = score(&format!("tau={tau}"), Some(dc), &preds, &set, &encoder, fp)?;
        rows.push(RemaskRow {
            tau,
            token_acc: m.token_accuracy,
            cosine: m.mean_cosine,
            bleu: m.bleu,
        });
    }
    let mut csv = format!("{REMASK_HEADER}\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.tau, r.token_acc, r.cosine, r.bleu));
    }
    std::fs::create_dir_all(&ctx.out)?;
    std::fs::write(ctx.out.join("ablate-remask.csv"), &csv)?;
    print!("{csv}");
    if let Some(best) = rows.iter().max_by(|a, b| a.token_acc.total_cmp(&b.token_acc)) {
        println!("highest token accuracy at tau={}", best.tau);
    }
    Ok(rows)
}

pub const DEFAULT_RATIOS: [f64; 5] = [0.1, 0.2, 0.4, 0.8, 1.0];
pub const MASK_HEADER: &str = "arm,best_step,best_val_loss,final_train_acc";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub schedule: NoiseSchedule,
    pub best_step: f64,
    pub best_val_loss: f64,
    pub final_train_acc: f64,
}

pub fn arm_name(s: &NoiseSchedule) -> String {
    match s {
        NoiseSchedule::FixedRatio { ratio } => format!("ratio={ratio}"),
        NoiseSchedule::LogLinear { lambda } => format!("log_linear(lambda={lambda})"),
    }
}

/// Median of a non-empty sample; the mean of the middle pair for even sizes.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        (v[k / 2 - 1] + v[k / 2]) / 2.0
    }
}

/// Trains one model per fixed ratio plus one log-linear run, for every
/// seed; returns per-arm medians over seeds.
pub fn cmd_ablate_mask(
    ctx: &Context,
    ratios: &[f64],
    seeds: &[u64],
    data_dir: Option<&Path>,
) -> Result<Vec<ArmResult>, CliError> {
    if seeds.is_empty() {
        return Err(CliError::config("ablate-mask needs at least one seed"));
    }
    let data = load_data(&data_dir.map_or_else(|| ctx.data_dir(), Path::to_path_buf))?;
    let mut arms: Vec<NoiseSchedule> = ratios.iter().map(|&ratio| NoiseSchedule::FixedRatio { ratio }).collect();
    arms.push(NoiseSchedule::default());
    let root = ctx.out.join("ablate-mask");

    let mut runs_csv = String::from("arm,seed,best_step,best_val_loss,final_train_acc\n");
    let mut results = Vec::new();
    for schedule in &arms {
        let name = arm_name(schedule);
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let mut cfg = ctx.config.clone();
            cfg.train.schedule = *schedule;
            cfg.train.seed = seed;
            cfg.validate()?;
            log::info!("ablate-mask: {name} seed {seed}");
            let dir = root.join(name.replace(['(', ')', '='], "_")).join(format!("seed-{seed}"));
            let o = train_into(&cfg, &data, &dir, ctx.force)?;
            runs_csv.push_str(&format!(
                "{name},{seed},{},{},{}\n",
                o.best_step, o.best_val_loss, o.final_train_acc
            ));
            per_seed.push(o);
        }
        let col = |f: &dyn Fn(&TrainOutcome) -> f64| median(&per_seed.iter().map(f).collect::<Vec<_>>());
        results.push(ArmResult {
            arm: name,
            schedule: *schedule,
            best_step: col(&|o| o.best_step as f64),
            best_val_loss: col(&|o| o.best_val_loss),
            final_train_acc: col(&|o| o.final_train_acc),
        });
    }
    let mut csv = format!("{MASK_HEADER}\n");
    for r in &results {
        csv.push_str(&format!("{},{},{},{}\n", r.arm, r.best_step, r.best_val_loss, r.final_train_acc));
    }
    std::fs::create_dir_all(&ctx.out)?;
    std::fs::write(ctx.out.join("ablate-mask.csv"), &csv)?;
    std::fs::write(ctx.out.join("ablate-mask-runs.csv"), &runs_csv)?;
    print!("{csv}");
    Ok(results)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
    Json,
}

pub fn cmd_report(path: &Path, format: ReportFormat) -> Result<String, CliError> {
    let report: EvalReport = serde_json::from_slice(
        &std::fs::read(path).map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?,
    )?;
    Ok(match format {
        ReportFormat::Table => report.render_table(),
        ReportFormat::Csv => report.render_csv(),
        ReportFormat::Json => serde_json::to_string_pretty(&report)? + "\n",
    })
}

pub fn parse_k_schedule(s: &str) -> Result<KSchedule, CliError> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| CliError::config(format!("unknown k-schedule {s:?} (linear or cosine)")))
}
