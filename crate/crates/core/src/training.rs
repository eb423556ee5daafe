//! The two-phase trainer: denoising on `M_src`/`M_tgt`, then translation
//! fine-tuning on the parallel data, with checkpoints, averaging and resume.

use std::collections::{BTreeMap, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    sampling_weights_from_sizes, LanguageSampler, MultilingualPool, ParallelCorpus, Sentence,
};
use crate::dataset::{
    build_denoising, make_schedule, BatchSource, DenoiseMixing, EpochStream, Phase, Side,
    StreamCursor, TokenCost, TrainingSchedule,
};
use crate::error::{Error, Result};
use crate::model::{
    average_params, lr_at, AdamW, AdamWConfig, Checkpoint, LrCurve, ModelConfig, ModelParams,
    SequenceBatch, Transformer,
};
use crate::noising::NoiseConfig;
use crate::rng::{derive_seed, keyed_rng, tag};
use crate::subword::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Dot,
    Baseline,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(Mode::Dot),
            "baseline" => Ok(Mode::Baseline),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?} (expected dot or baseline)"
            ))),
        }
    }
}

/// How denoising batches pick a language pair in a multilingual run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiseSampling {
    /// Same temperature as fine-tuning.
    #[default]
    Temperature,
    /// Proportional to corpus size.
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    /// Noising of the denoising sets.
    pub data: u64,
    /// Initialization and dropout masks.
    pub model: u64,
    /// Batch packing, order and language draws.
    pub batches: u64,
}

impl Seeds {
    pub fn from_global(seed: u64) -> Self {
        Self {
            data: derive_seed(seed, tag::SIDE_SOURCE ^ tag::SIDE_TARGET),
            model: derive_seed(seed, tag::MODEL_INIT),
            batches: derive_seed(seed, tag::STREAM),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schedule: TrainingSchedule,
    pub noise: NoiseConfig,
    pub model: ModelConfig,
    pub optimizer: AdamWConfig,
    pub mode: Mode,
    pub seeds: Seeds,
    pub batch_size_tokens: usize,
    pub mixing: DenoiseMixing,
    pub denoise_sampling: DenoiseSampling,
    pub temperature: f64,
    pub checkpoint_every: u64,
    pub keep_checkpoints: usize,
    pub average_last: usize,
    /// Zero the optimizer moments when fine-tuning starts.
    pub reset_optimizer: bool,
    pub output_dir: Option<PathBuf>,
    /// Stop (resumably) once this many steps have completed.
    pub stop_after: Option<u64>,
}

impl RunConfig {
    /// Defaults around a step budget: checkpoints every `total/20` steps,
    /// average of the last 10, optimizer reset at the phase boundary.
    pub fn new(total_steps: u64, model: ModelConfig, mode: Mode, seed: u64) -> Result<Self> {
        Ok(Self {
            schedule: make_schedule(total_steps, LrCurve::for_total(total_steps))?,
            noise: NoiseConfig::default(),
            model,
            optimizer: AdamWConfig::default(),
            mode,
            seeds: Seeds::from_global(seed),
            batch_size_tokens: 256,
            mixing: DenoiseMixing::Alternate,
            denoise_sampling: DenoiseSampling::Temperature,
            temperature: 2.0,
            checkpoint_every: (total_steps / 20).max(1),
            keep_checkpoints: 10,
            average_last: 10,
            reset_optimizer: true,
            output_dir: None,
            stop_after: None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if s.total_steps < 3
            || s.denoise_steps != s.total_steps / 3
            || s.denoise_steps + s.finetune_steps != s.total_steps
        {
            return Err(Error::Config(
                "schedule does not follow the one-third rule".into(),
            ));
        }
        s.lr.validate()?;
        self.noise.validate()?;
        self.model.validate()?;
        if self.batch_size_tokens == 0 || self.checkpoint_every == 0 || self.average_last == 0 {
            return Err(Error::Config(
                "batch_size_tokens, checkpoint_every and average_last must be positive".into(),
            ));
        }
        if self.keep_checkpoints < self.average_last {
            return Err(Error::Config(
                "keep_checkpoints must be at least average_last".into(),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }

    /// Steps spent denoising in this mode.
    pub fn denoise_steps(&self) -> u64 {
        match self.mode {
            Mode::Dot => self.schedule.denoise_steps,
            Mode::Baseline => 0,
        }
    }

    /// The config as JSON without fields that may differ between an
    /// interrupted run and its continuation.
    fn identity(&self) -> serde_json::Value {
        let mut c = self.clone();
        c.output_dir = None;
        c.stop_after = None;
        serde_json::to_value(&c).expect("config serializes")
    }
}

/// A training example as vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdPair {
    pub input: Vec<u32>,
    pub output: Vec<u32>,
}

impl TokenCost for IdPair {
    fn token_cost(&self) -> usize {
        self.input.len().max(self.output.len()) + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LanguageData {
    pub tag: String,
    pub parallel: Vec<IdPair>,
    pub m_src: Vec<IdPair>,
    pub m_tgt: Vec<IdPair>,
}

/// Id-encoded data for every language pair of a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingData {
    pub languages: Vec<LanguageData>,
}

fn encode_pairs<'a>(
    vocab: &Vocabulary,
    pairs: impl Iterator<Item = (&'a Sentence, &'a Sentence)>,
) -> Vec<IdPair> {
    pairs
        .map(|(a, b)| IdPair {
            input: vocab.encode(a),
            output: vocab.encode(b),
        })
        .collect()
}

impl TrainingData {
    /// Encodes a subword-level corpus and builds its denoising sets.
    pub fn from_corpus(
        corpus: &ParallelCorpus,
        vocab: &Vocabulary,
        noise: &NoiseConfig,
        seed: u64,
    ) -> Result<Self> {
        let (m_src, m_tgt) = build_denoising(corpus, noise, seed)?;
        let lang = LanguageData {
            tag: corpus.language_pair.tag(),
            parallel: encode_pairs(vocab, corpus.pairs().iter().map(|p| (&p.source, &p.target))),
            m_src: encode_pairs(vocab, m_src.examples.iter().map(|e| (&e.input, &e.output))),
            m_tgt: encode_pairs(vocab, m_tgt.examples.iter().map(|e| (&e.input, &e.output))),
        };
        Ok(Self {
            languages: vec![lang],
        })
    }

    pub fn from_pool(
        pool: &MultilingualPool,
        vocab: &Vocabulary,
        noise: &NoiseConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut languages = Vec::new();
        for corpus in pool.corpora.values() {
            languages.extend(Self::from_corpus(corpus, vocab, noise, seed)?.languages);
        }
        if languages.is_empty() {
            return Err(Error::Config("empty multilingual pool".into()));
        }
        Ok(Self { languages })
    }

    /// Loads the files written by [`crate::dataset::write_dataset`].
    pub fn load_dir(dir: &Path, vocab: &Vocabulary, tag: &str) -> Result<Self> {
        let read = |name: &str| crate::corpus::read_sentences(&dir.join(name));
        let zip = |a: Vec<Sentence>, b: Vec<Sentence>, what: &str| -> Result<Vec<IdPair>> {
            if a.len() != b.len() {
                return Err(Error::Alignment {
                    source_lines: a.len(),
                    target_lines: b.len(),
                });
            }
            log::debug!("loaded {} {what} pairs", a.len());
            Ok(encode_pairs(vocab, a.iter().zip(&b)))
        };
        Ok(Self {
            languages: vec![LanguageData {
                tag: tag.to_string(),
                parallel: zip(
                    read("parallel.source")?,
                    read("parallel.target")?,
                    "parallel",
                )?,
                m_src: zip(
                    read("m_src.input")?,
                    read("m_src.output")?,
                    "source denoising",
                )?,
                m_tgt: zip(
                    read("m_tgt.input")?,
                    read("m_tgt.output")?,
                    "target denoising",
                )?,
            }],
        })
    }

    /// SHA-256 over every id, used to refuse resuming on different data.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.languages {
            h.update(l.tag.as_bytes());
            for set in [&l.parallel, &l.m_src, &l.m_tgt] {
                h.update((set.len() as u64).to_le_bytes());
                for p in set {
                    for seq in [&p.input, &p.output] {
                        h.update((seq.len() as u64).to_le_bytes());
                        for id in seq {
                            h.update(id.to_le_bytes());
                        }
                    }
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    Start {
        mode: Mode,
        total_steps: u64,
        denoise_steps: u64,
        resumed_from: Option<u64>,
    },
    Step {
        /// Zero-based global step.
        step: u64,
        phase: Phase,
        side: Option<Side>,
        language: String,
        loss: f64,
        tokens: usize,
        lr: f64,
        tokens_per_sec: f64,
    },
    PhaseChange {
        step: u64,
        from: Phase,
        to: Phase,
    },
    Checkpoint {
        step: u64,
        path: Option<String>,
    },
    Interrupted {
        step: u64,
    },
    Finished {
        step: u64,
        averaged: usize,
    },
    Message {
        text: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn steps(&self) -> impl Iterator<Item = &LogRecord> {
        self.records
            .iter()
            .filter(|r| matches!(r, LogRecord::Step { .. }))
    }

    /// Loss of every step record, in order.
    pub fn losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }

    pub fn phase_changes(&self) -> Vec<u64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::PhaseChange { step, .. } => Some(*step),
                _ => None,
            })
            .collect()
    }

    /// Reads a line-delimited log file.
    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(Self { records })
    }
}

/// What a run leaves behind.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub log: RunLog,
    /// Parameters after the last executed step.
    pub params: ModelParams,
    /// Average of the retained checkpoints; `None` if the run was interrupted.
    pub final_params: Option<ModelParams>,
    pub steps_completed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainState {
    step: u64,
    optimizer_step: u64,
    nonfinite_streak: u32,
    denoise_cursors: Vec<Vec<StreamCursor>>,
    finetune_cursors: Vec<StreamCursor>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    config_hash: String,
    config: serde_json::Value,
    model: ModelConfig,
    state: TrainState,
}

const MAX_NONFINITE: u32 = 3;
const RESUME_FILE: &str = "resume.ckpt";

fn checkpoint_name(step: u64) -> String {
    format!("step_{step:010}.ckpt")
}

struct LangStreams {
    /// `[source, target]` when alternating, one stream when mixed.
    denoise: Vec<EpochStream>,
    finetune: EpochStream,
}

/// Drives one run step by step.
pub struct Trainer<'d> {
    config: RunConfig,
    data: &'d TrainingData,
    model: Transformer,
    params: ModelParams,
    optimizer: AdamW,
    streams: Vec<LangStreams>,
    finetune_sampler: LanguageSampler,
    denoise_sampler: LanguageSampler,
    step: u64,
    streak: u32,
    ring: VecDeque<(u64, ModelParams)>,
    log: RunLog,
    writer: Option<File>,
    config_hash: String,
}

fn streams_for(config: &RunConfig, data: &TrainingData) -> Result<Vec<LangStreams>> {
    let base = derive_seed(config.seeds.batches, tag::STREAM);
    data.languages
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let seed = derive_seed(base, i as u64);
            let costs = |d: &[IdPair]| d.iter().map(TokenCost::token_cost).collect::<Vec<_>>();
            let finetune = EpochStream::new(
                costs(&l.parallel),
                config.batch_size_tokens,
                seed,
                BatchSource::Parallel,
            )?;
            let denoise = if config.denoise_steps() == 0 {
                Vec::new()
            } else {
                match config.mixing {
                    DenoiseMixing::Alternate => vec![
                        EpochStream::new(
                            costs(&l.m_src),
                            config.batch_size_tokens,
                            derive_seed(seed, tag::SIDE_SOURCE),
                            BatchSource::Denoise(Side::Source),
                        )?,
                        EpochStream::new(
                            costs(&l.m_tgt),
                            config.batch_size_tokens,
                            derive_seed(seed, tag::SIDE_TARGET),
                            BatchSource::Denoise(Side::Target),
                        )?,
                    ],
                    DenoiseMixing::Mixed => {
                        let mut all = costs(&l.m_src);
                        all.extend(costs(&l.m_tgt));
                        vec![EpochStream::new(
                            all,
                            config.batch_size_tokens,
                            seed,
                            BatchSource::DenoiseMixed,
                        )?]
                    }
                }
            };
            Ok(LangStreams { denoise, finetune })
        })
        .collect()
}

fn samplers(config: &RunConfig, data: &TrainingData) -> Result<(LanguageSampler, LanguageSampler)> {
    let sizes = |f: fn(&LanguageData) -> usize| {
        data.languages
            .iter()
            .map(move |l| (l.tag.clone(), f(l)))
            .collect::<Vec<_>>()
    };
    let mut tags: Vec<&str> = data.languages.iter().map(|l| l.tag.as_str()).collect();
    tags.sort_unstable();
    tags.dedup();
    if tags.len() != data.languages.len() {
        return Err(Error::Config("duplicate language-pair tags".into()));
    }
    // Samplers index tags in sorted order; the data must be in that order too.
    if data.languages.windows(2).any(|w| w[0].tag > w[1].tag) {
        return Err(Error::Config("languages must be sorted by tag".into()));
    }
    let finetune = LanguageSampler::new(&sampling_weights_from_sizes(
        sizes(|l| l.parallel.len()),
        config.temperature,
    )?)?;
    let t = match config.denoise_sampling {
        DenoiseSampling::Temperature => config.temperature,
        DenoiseSampling::Pooled => 1.0,
    };
    let denoise = if config.denoise_steps() == 0 {
        finetune.clone()
    } else {
        LanguageSampler::new(&sampling_weights_from_sizes(
            sizes(|l| l.m_src.len() + l.m_tgt.len()),
            t,
        )?)?
    };
    Ok((finetune, denoise))
}

fn config_hash(config: &RunConfig, data: &TrainingData) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&config.identity()).expect("config serializes"));
    h.update(data.fingerprint().as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Dotted-path differences between two JSON values.
fn json_diff(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            for k in keys {
                let p = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                json_diff(
                    &p,
                    x.get(k).unwrap_or(&Value::Null),
                    y.get(k).unwrap_or(&Value::Null),
                    out,
                );
            }
        }
        _ if a != b => out.push(format!("{path}: {a} -> {b}")),
        _ => {}
    }
}

impl<'d> Trainer<'d> {
    /// A fresh run.
    pub fn new(config: RunConfig, data: &'d TrainingData) -> Result<Self> {
        config.validate()?;
        if data.languages.is_empty() {
            return Err(Error::Config("no training data".into()));
        }
        if config.mode == Mode::Dot {
            if let Some(l) = data
                .languages
                .iter()
                .find(|l| l.m_src.is_empty() || l.m_tgt.is_empty())
            {
                return Err(Error::Config(format!(
                    "denoising data for {} is empty",
                    l.tag
                )));
            }
        }
        let model = Transformer::new(config.model.clone())?;
        let params = model.init_params(config.seeds.model);
        let optimizer = AdamW::new(config.optimizer, &params);
        let streams = streams_for(&config, data)?;
        let (finetune_sampler, denoise_sampler) = samplers(&config, data)?;
        let config_hash = config_hash(&config, data);
        let mut t = Self {
            config,
            data,
            model,
            params,
            optimizer,
            streams,
            finetune_sampler,
            denoise_sampler,
            step: 0,
            streak: 0,
            ring: VecDeque::new(),
            log: RunLog::default(),
            writer: None,
            config_hash,
        };
        t.open_output(false)?;
        t.record(LogRecord::Start {
            mode: t.config.mode,
            total_steps: t.config.schedule.total_steps,
            denoise_steps: t.config.denoise_steps(),
            resumed_from: None,
        })?;
        Ok(t)
    }

    /// Continues a run from the newest checkpoint in `config.output_dir`.
    pub fn resume(config: RunConfig, data: &'d TrainingData) -> Result<Self> {
        let dir = config
            .output_dir
            .clone()
            .ok_or_else(|| Error::Config("resume needs an output directory".into()))?;
        let ckdir = dir.join("checkpoints");
        let mut files: Vec<PathBuf> = match fs::read_dir(&ckdir) {
            Ok(rd) => rd
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
                .collect(),
            Err(e) => return Err(Error::io(&ckdir, e)),
        };
        files.sort();
        let mut latest: Option<(u64, Checkpoint)> = None;
        let mut periodic: Vec<(u64, PathBuf)> = Vec::new();
        for f in &files {
            let c = Checkpoint::load(f)?;
            let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())?;
            if f.file_name().is_some_and(|n| n != RESUME_FILE) {
                periodic.push((meta.state.step, f.clone()));
            }
            if latest.as_ref().is_none_or(|(s, _)| meta.state.step > *s) {
                latest = Some((meta.state.step, c));
            }
        }
        let (_, ckpt) = latest
            .ok_or_else(|| Error::Checkpoint(format!("no checkpoint in {}", ckdir.display())))?;
        let meta: CheckpointMeta = serde_json::from_value(ckpt.meta.clone())?;

        let mut t = Self::new_quiet(config, data)?;
        if meta.config_hash != t.config_hash {
            let mut diff = Vec::new();
            json_diff("", &meta.config, &t.config.identity(), &mut diff);
            if diff.is_empty() {
                diff.push("training data differs".into());
            }
            return Err(Error::Config(format!(
                "checkpoint was written by a different configuration:\n  {}",
                diff.join("\n  ")
            )));
        }
        let params = ckpt.params(&["adam.m", "adam.v"])?;
        t.model.check_params(&params)?;
        let (_, m) = ckpt.group("adam.m");
        let (_, v) = ckpt.group("adam.v");
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::Checkpoint(
                "optimizer state missing from checkpoint".into(),
            ));
        }
        t.params = params;
        t.optimizer.m = m;
        t.optimizer.v = v;
        t.optimizer.step = meta.state.optimizer_step;
        t.step = meta.state.step;
        t.streak = meta.state.nonfinite_streak;
        t.seek_streams(&meta.state)?;

        periodic.retain(|(s, _)| *s <= t.step);
        periodic.sort();
        let skip = periodic.len().saturating_sub(t.config.average_last);
        for (s, p) in &periodic[skip..] {
            let c = Checkpoint::load(p)?;
            t.ring.push_back((*s, c.params(&["adam.m", "adam.v"])?));
        }

        t.open_output(true)?;
        t.record(LogRecord::Start {
            mode: t.config.mode,
            total_steps: t.config.schedule.total_steps,
            denoise_steps: t.config.denoise_steps(),
            resumed_from: Some(t.step),
        })?;
        Ok(t)
    }

    fn new_quiet(config: RunConfig, data: &'d TrainingData) -> Result<Self> {
        let out = config.output_dir.clone();
        let mut c = config;
        c.output_dir = None;
        let mut t = Self::new(c, data)?;
        t.config.output_dir = out;
        t.log = RunLog::default();
        Ok(t)
    }

    fn seek_streams(&mut self, state: &TrainState) -> Result<()> {
        if state.finetune_cursors.len() != self.streams.len()
            || state.denoise_cursors.len() != self.streams.len()
        {
            return Err(Error::Checkpoint(
                "stream state does not match the data".into(),
            ));
        }
        for ((s, &fc), dcs) in self
            .streams
            .iter_mut()
            .zip(&state.finetune_cursors)
            .zip(&state.denoise_cursors)
        {
            s.finetune.seek(fc);
            if dcs.len() != s.denoise.len() {
                return Err(Error::Checkpoint(
                    "denoise stream state does not match".into(),
                ));
            }
            for (d, &c) in s.denoise.iter_mut().zip(dcs) {
                d.seek(c);
            }
        }
        Ok(())
    }

    fn open_output(&mut self, append: bool) -> Result<()> {
        let Some(dir) = self.config.output_dir.clone() else {
            return Ok(());
        };
        let ck = dir.join("checkpoints");
        fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
        let cfg_path = dir.join("config.json");
        if !append {
            let body = serde_json::to_string_pretty(&self.config.identity())?;
            fs::write(&cfg_path, body + "\n").map_err(|e| Error::io(&cfg_path, e))?;
        }
        let log_path = dir.join("train.log.jsonl");
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        self.writer = Some(f);
        Ok(())
    }

    fn record(&mut self, r: LogRecord) -> Result<()> {
        if let Some(w) = self.writer.as_mut() {
            let line = serde_json::to_string(&r)?;
            let path = self
                .config
                .output_dir
                .clone()
                .unwrap_or_default()
                .join("train.log.jsonl");
            writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        self.log.records.push(r);
        Ok(())
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &Transformer {
        &self.model
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    /// Steps completed so far.
    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.config.schedule.total_steps
    }

    pub fn phase(&self) -> Phase {
        if self.step < self.config.denoise_steps() {
            Phase::Denoise
        } else {
            Phase::Finetune
        }
    }

    fn next_batch(&mut self) -> (usize, Option<Side>, Vec<(&'d [u32], &'d [u32])>) {
        let denoise_steps = self.config.denoise_steps();
        let data = self.data;
        if self.step < denoise_steps {
            let local = self.step;
            let mut rng = keyed_rng(
                derive_seed(self.config.seeds.batches, tag::LANGUAGE ^ tag::SIDE_SOURCE),
                local,
            );
            let li = self.denoise_sampler.sample_index(&mut rng);
            let lang = &data.languages[li];
            let streams = &mut self.streams[li].denoise;
            let (batch, side) = if streams.len() == 2 {
                let side = if local % 2 == 0 {
                    Side::Source
                } else {
                    Side::Target
                };
                let b = streams[(local % 2) as usize]
                    .next()
                    .expect("endless stream");
                (b, Some(side))
            } else {
                (streams[0].next().expect("endless stream"), None)
            };
            let pairs = batch
                .indices
                .iter()
                .map(|&i| {
                    let p = match side {
                        Some(Side::Source) => &lang.m_src[i],
                        Some(Side::Target) => &lang.m_tgt[i],
                        None if i < lang.m_src.len() => &lang.m_src[i],
                        None => &lang.m_tgt[i - lang.m_src.len()],
                    };
                    (p.input.as_slice(), p.output.as_slice())
                })
                .collect();
            (li, side, pairs)
        } else {
            let local = self.step - denoise_steps;
            let mut rng = keyed_rng(derive_seed(self.config.seeds.batches, tag::LANGUAGE), local);
            let li = self.finetune_sampler.sample_index(&mut rng);
            let lang = &data.languages[li];
            let batch = self.streams[li].finetune.next().expect("endless stream");
            let pairs = batch
                .indices
                .iter()
                .map(|&i| {
                    (
                        lang.parallel[i].input.as_slice(),
                        lang.parallel[i].output.as_slice(),
                    )
                })
                .collect();
            (li, None, pairs)
        }
    }

    /// Executes one training step.
    pub fn step_once(&mut self) -> Result<()> {
        if self.is_finished() {
            return Ok(());
        }
        let denoise_steps = self.config.denoise_steps();
        let phase = self.phase();
        if self.step == denoise_steps && denoise_steps > 0 {
            self.record(LogRecord::PhaseChange {
                step: self.step,
                from: Phase::Denoise,
                to: Phase::Finetune,
            })?;
            if self.config.reset_optimizer {
                self.optimizer.reset();
            }
        }
        let started = Instant::now();
        let (li, side, pairs) = self.next_batch();
        let batch = SequenceBatch::from_pairs(&pairs, self.config.model.max_positions)?;
        let (phase_tag, local) = match phase {
            Phase::Denoise => (tag::SIDE_SOURCE, self.step),
            Phase::Finetune => (tag::SIDE_TARGET, self.step - denoise_steps),
        };
        let dropout = keyed_rng(
            derive_seed(
                derive_seed(self.config.seeds.model, tag::MODEL_DROPOUT),
                phase_tag,
            ),
            local,
        );
        let lr = lr_at(&self.config.schedule.lr, self.step);
        let (loss, tokens, grads) =
            self.model
                .loss_and_grads(&self.params, &batch, Some(dropout))?;
        let mut ok = loss.is_finite();
        if ok {
            match self.optimizer.update(&mut self.params, &grads, lr) {
                Ok(_) => {}
                Err(Error::Numerical(msg)) => {
                    log::warn!("step {}: update rejected: {msg}", self.step);
                    ok = false;
                }
                Err(e) => return Err(e),
            }
        }
        let elapsed = started.elapsed().as_secs_f64().max(1e-9);
        self.record(LogRecord::Step {
            step: self.step,
            phase,
            side,
            language: self.data.languages[li].tag.clone(),
            loss,
            tokens,
            lr,
            tokens_per_sec: tokens as f64 / elapsed,
        })?;
        self.step += 1;
        if ok {
            self.streak = 0;
        } else {
            self.streak += 1;
            if self.streak >= MAX_NONFINITE {
                return Err(Error::Numerical(format!(
                    "loss or gradient non-finite for {MAX_NONFINITE} consecutive steps (last step {}, lr {lr:e})",
                    self.step - 1
                )));
            }
        }
        if self.step % self.config.checkpoint_every == 0 || self.is_finished() {
            self.save_periodic()?;
        }
        Ok(())
    }

    fn state(&self) -> TrainState {
        TrainState {
            step: self.step,
            optimizer_step: self.optimizer.step,
            nonfinite_streak: self.streak,
            denoise_cursors: self
                .streams
                .iter()
                .map(|s| s.denoise.iter().map(EpochStream::cursor).collect())
                .collect(),
            finetune_cursors: self.streams.iter().map(|s| s.finetune.cursor()).collect(),
        }
    }

    fn checkpoint(&self) -> Checkpoint {
        let meta = CheckpointMeta {
            kind: "train_state".into(),
            config_hash: self.config_hash.clone(),
            config: self.config.identity(),
            model: self.config.model.clone(),
            state: self.state(),
        };
        let mut c = Checkpoint::from_params(
            serde_json::to_value(meta).expect("meta serializes"),
            &self.params,
        );
        c.push_group("adam.m", self.params.names(), &self.optimizer.m);
        c.push_group("adam.v", self.params.names(), &self.optimizer.v);
        c
    }

    fn save_periodic(&mut self) -> Result<()> {
        self.ring.push_back((self.step, self.params.clone()));
        while self.ring.len() > self.config.average_last {
            self.ring.pop_front();
        }
        let mut path = None;
        if let Some(dir) = &self.config.output_dir {
            let ck = dir.join("checkpoints");
            let p = ck.join(checkpoint_name(self.step));
            self.checkpoint().save(&p)?;
            self.prune(&ck)?;
            path = Some(p.display().to_string());
        }
        self.record(LogRecord::Checkpoint {
            step: self.step,
            path,
        })
    }

    fn prune(&self, ck: &Path) -> Result<()> {
        let mut names: Vec<PathBuf> = fs::read_dir(ck)
            .map_err(|e| Error::io(ck, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("step_") && n.ends_with(".ckpt"))
            })
            .collect();
        names.sort();
        let excess = names.len().saturating_sub(self.config.keep_checkpoints);
        for p in &names[..excess] {
            fs::remove_file(p).map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }

    /// Runs to the end (or to `stop_after`) and writes the averaged model.
    pub fn run(mut self) -> Result<RunOutcome> {
        if self.is_finished() {
            let text = format!(
                "checkpoint is at step {} of {}; nothing to do",
                self.step, self.config.schedule.total_steps
            );
            log::info!("{text}");
            self.record(LogRecord::Message { text })?;
            return self.finish();
        }
        while !self.is_finished() {
            if self.config.stop_after.is_some_and(|s| self.step >= s) {
                let step = self.step;
                if let Some(dir) = &self.config.output_dir {
                    self.checkpoint()
                        .save(&dir.join("checkpoints").join(RESUME_FILE))?;
                }
                self.record(LogRecord::Interrupted { step })?;
                return Ok(RunOutcome {
                    log: self.log,
                    params: self.params,
                    final_params: None,
                    steps_completed: step,
                });
            }
            self.step_once()?;
        }
        self.finish()
    }

    fn finish(mut self) -> Result<RunOutcome> {
        let sets: Vec<ModelParams> = self.ring.iter().map(|(_, p)| p.clone()).collect();
        let averaged = if sets.is_empty() {
            self.params.clone()
        } else {
            average_params(&sets)?
        };
        if let Some(dir) = &self.config.output_dir {
            let meta = serde_json::json!({
                "kind": "model",
                "model": self.config.model,
                "step": self.step,
                "averaged": sets.len(),
                "averaged_steps": self.ring.iter().map(|(s, _)| *s).collect::<Vec<_>>(),
            });
            Checkpoint::from_params(meta, &averaged).save(&dir.join("final.ckpt"))?;
            let resume = dir.join("checkpoints").join(RESUME_FILE);
            if resume.exists() {
                fs::remove_file(&resume).map_err(|e| Error::io(&resume, e))?;
            }
        }
        self.record(LogRecord::Finished {
            step: self.step,
            averaged: sets.len().max(1),
        })?;
        Ok(RunOutcome {
            log: self.log,
            params: self.params,
            final_params: Some(averaged),
            steps_completed: self.step,
        })
    }
}

/// Two-phase run on a single language pair.
pub fn run_dot(config: RunConfig, data: &TrainingData) -> Result<RunOutcome> {
    if data.languages.len() != 1 {
        return Err(Error::Config(format!(
            "run_dot expects one language pair, got {}",
            data.languages.len()
        )));
    }
    run_multilingual(config, data)
}

/// Two-phase run over several language pairs balanced by temperature.
pub fn run_multilingual(config: RunConfig, data: &TrainingData) -> Result<RunOutcome> {
    Trainer::new(config, data)?.run()
}

/// Continues an interrupted run from its output directory.
pub fn resume(config: RunConfig, data: &TrainingData) -> Result<RunOutcome> {
    Trainer::resume(config, data)?.run()
}

/// Loads the averaged model written at the end of a run.
pub fn load_model(path: &Path) -> Result<(Transformer, ModelParams)> {
    let c = Checkpoint::load(path)?;
    let model: ModelConfig = serde_json::from_value(
        c.meta
            .get("model")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no model config".into()))?,
    )?;
    let t = Transformer::new(model)?;
    let params = c.params(&["adam.m", "adam.v"])?;
    t.check_params(&params)?;
    Ok((t, params))
}

/// Per-language counts of fine-tune batches in a log.
pub fn language_counts(log: &RunLog, phase: Phase) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for r in &log.records {
        if let LogRecord::Step {
            phase: p, language, ..
        } = r
        {
            if *p == phase {
                *out.entry(language.clone()).or_insert(0) += 1;
            }
        }
    }
    out
}
