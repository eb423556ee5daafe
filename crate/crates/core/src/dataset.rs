//! Denoising datasets, the two-phase step schedule, and deterministic
//! token-budget batch streams.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_lines, ParallelCorpus, Sentence};
use crate::error::{Error, Result};
use crate::model::lr::LrCurve;
use crate::noising::{noised, NoiseConfig};
use crate::rng::{derive_seed, keyed_rng, tag, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Source,
    Target,
}

impl Side {
    pub fn other(self) -> Self {
        match self {
            Side::Source => Side::Target,
            Side::Target => Side::Source,
        }
    }

    fn seed_tag(self) -> u64 {
        match self {
            Side::Source => tag::SIDE_SOURCE,
            Side::Target => tag::SIDE_TARGET,
        }
    }
}

/// One `(noised(s), s)` example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoisingExample {
    pub input: Sentence,
    pub output: Sentence,
    pub side: Side,
    pub origin_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenoisingDataset {
    pub side: Side,
    pub examples: Vec<DenoisingExample>,
}

impl DenoisingDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Writes aligned `input` / `output` files.
    pub fn write(&self, input_path: &Path, output_path: &Path) -> Result<()> {
        write_lines(input_path, self.examples.iter().map(|e| &e.input))?;
        write_lines(output_path, self.examples.iter().map(|e| &e.output))
    }
}

/// The random stream used to noise sentence `index` on `side`.
pub fn noise_stream(seed: u64, side: Side, index: usize) -> RngStream {
    RngStream::new(derive_seed(seed, side.seed_tag()), index as u64)
}

fn build_side(
    corpus: &ParallelCorpus,
    side: Side,
    cfg: &NoiseConfig,
    seed: u64,
) -> DenoisingDataset {
    let examples = corpus
        .pairs()
        .par_iter()
        .map(|p| {
            let clean = match side {
                Side::Source => &p.source,
                Side::Target => &p.target,
            };
            DenoisingExample {
                input: noised(clean, cfg, noise_stream(seed, side, p.index)),
                output: clean.clone(),
                side,
                origin_index: p.index,
            }
        })
        .collect();
    DenoisingDataset { side, examples }
}

/// Builds `M_src = {(noised(x_i), x_i)}` and `M_tgt = {(noised(y_i), y_i)}`.
pub fn build_denoising(
    corpus: &ParallelCorpus,
    cfg: &NoiseConfig,
    seed: u64,
) -> Result<(DenoisingDataset, DenoisingDataset)> {
    if corpus.is_empty() {
        return Err(Error::Config(
            "cannot build denoising data from an empty corpus".into(),
        ));
    }
    cfg.validate()?;
    Ok((
        build_side(corpus, Side::Source, cfg, seed),
        build_side(corpus, Side::Target, cfg, seed),
    ))
}

/// Step budget split into a denoising phase and a fine-tuning phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingSchedule {
    pub total_steps: u64,
    pub denoise_steps: u64,
    pub finetune_steps: u64,
    pub lr: LrCurve,
}

/// `denoise_steps = floor(total / 3)`, the rest fine-tunes.
pub fn make_schedule(total_steps: u64, lr_config: LrCurve) -> Result<TrainingSchedule> {
    if total_steps < 3 {
        return Err(Error::Config(format!(
            "total_steps must be at least 3, got {total_steps}"
        )));
    }
    lr_config.validate()?;
    let denoise_steps = total_steps / 3;
    Ok(TrainingSchedule {
        total_steps,
        denoise_steps,
        finetune_steps: total_steps - denoise_steps,
        lr: lr_config,
    })
}

/// Anything with a batching cost in tokens.
pub trait TokenCost {
    fn token_cost(&self) -> usize;
}

impl TokenCost for DenoisingExample {
    fn token_cost(&self) -> usize {
        self.input.len().max(self.output.len()) + 1
    }
}

impl TokenCost for crate::corpus::SentencePair {
    fn token_cost(&self) -> usize {
        self.source.len().max(self.target.len()) + 1
    }
}

impl TokenCost for usize {
    fn token_cost(&self) -> usize {
        *self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Denoise,
    Finetune,
}

/// Which examples a batch draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSource {
    Denoise(Side),
    /// Source and target denoising examples mixed in one batch.
    DenoiseMixed,
    Parallel,
}

/// How denoising batches are formed from the two sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiseMixing {
    /// Batches alternate strictly: source, target, source, ...
    #[default]
    Alternate,
    /// One stream over the union of both sides.
    Mixed,
}

/// Parameters of a batch stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchStream {
    pub phase: Phase,
    pub batch_size_tokens: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub source: BatchSource,
    /// Example indices. For [`BatchSource::DenoiseMixed`], indices past the
    /// source set's length address the target set.
    pub indices: Vec<usize>,
    pub tokens: usize,
    /// Set when a single example exceeds the token budget on its own.
    pub oversized: bool,
    pub epoch: u64,
}

/// Position of an [`EpochStream`], enough to reconstruct it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StreamCursor {
    pub epoch: u64,
    pub position: usize,
}

struct PlannedBatch {
    indices: Vec<usize>,
    tokens: usize,
    oversized: bool,
}

/// Packs one epoch: shuffle, stable sort by cost, greedy fill to the budget,
/// then shuffle the batch order.
fn plan_epoch(costs: &[usize], budget: usize, seed: u64, epoch: u64) -> Vec<PlannedBatch> {
    let mut rng = keyed_rng(derive_seed(seed, tag::EPOCH_ORDER), epoch);
    let mut order: Vec<usize> = (0..costs.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| costs[i]);

    let mut batches = Vec::new();
    let mut current = PlannedBatch {
        indices: Vec::new(),
        tokens: 0,
        oversized: false,
    };
    for i in order {
        let c = costs[i];
        if !current.indices.is_empty() && current.tokens + c > budget {
            batches.push(std::mem::replace(
                &mut current,
                PlannedBatch {
                    indices: Vec::new(),
                    tokens: 0,
                    oversized: false,
                },
            ));
        }
        current.indices.push(i);
        current.tokens += c;
        current.oversized = current.tokens > budget;
    }
    if !current.indices.is_empty() {
        batches.push(current);
    }
    batches.shuffle(&mut rng);
    batches
}

/// An endless sequence of epochs over one example set.
pub struct EpochStream {
    costs: Vec<usize>,
    budget: usize,
    seed: u64,
    source: BatchSource,
    cursor: StreamCursor,
    plan: Vec<PlannedBatch>,
}

impl EpochStream {
    pub fn new(costs: Vec<usize>, budget: usize, seed: u64, source: BatchSource) -> Result<Self> {
        if costs.is_empty() {
            return Err(Error::Config("cannot batch an empty example set".into()));
        }
        if budget == 0 {
            return Err(Error::Config("batch_size_tokens must be positive".into()));
        }
        let plan = plan_epoch(&costs, budget, seed, 0);
        Ok(Self {
            costs,
            budget,
            seed,
            source,
            cursor: StreamCursor::default(),
            plan,
        })
    }

    pub fn cursor(&self) -> StreamCursor {
        self.cursor
    }

    /// Repositions the stream; the epoch plan is regenerated from the seed.
    pub fn seek(&mut self, cursor: StreamCursor) {
        if cursor.epoch != self.cursor.epoch {
            self.plan = plan_epoch(&self.costs, self.budget, self.seed, cursor.epoch);
        }
        self.cursor = cursor;
    }

    /// Batches in one epoch.
    pub fn epoch_len(&self) -> usize {
        self.plan.len()
    }
}

impl Iterator for EpochStream {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor.position >= self.plan.len() {
            self.seek(StreamCursor {
                epoch: self.cursor.epoch + 1,
                position: 0,
            });
        }
        let b = &self.plan[self.cursor.position];
        let batch = Batch {
            source: self.source,
            indices: b.indices.clone(),
            tokens: b.tokens,
            oversized: b.oversized,
            epoch: self.cursor.epoch,
        };
        self.cursor.position += 1;
        Some(batch)
    }
}

/// Denoising batches; alternating between sides unless mixed.
pub struct DenoiseBatches {
    streams: DenoiseStreams,
}

enum DenoiseStreams {
    Alternate {
        source: EpochStream,
        target: EpochStream,
        next: Side,
    },
    Mixed(EpochStream),
}

/// Serializable position of a [`DenoiseBatches`] stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiseCursor {
    Alternate {
        source: StreamCursor,
        target: StreamCursor,
        next: Side,
    },
    Mixed(StreamCursor),
}

impl DenoiseBatches {
    pub fn cursor(&self) -> DenoiseCursor {
        match &self.streams {
            DenoiseStreams::Alternate {
                source,
                target,
                next,
            } => DenoiseCursor::Alternate {
                source: source.cursor(),
                target: target.cursor(),
                next: *next,
            },
            DenoiseStreams::Mixed(s) => DenoiseCursor::Mixed(s.cursor()),
        }
    }

    pub fn seek(&mut self, cursor: DenoiseCursor) -> Result<()> {
        match (&mut self.streams, cursor) {
            (
                DenoiseStreams::Alternate {
                    source,
                    target,
                    next,
                },
                DenoiseCursor::Alternate {
                    source: sc,
                    target: tc,
                    next: n,
                },
            ) => {
                source.seek(sc);
                target.seek(tc);
                *next = n;
                Ok(())
            }
            (DenoiseStreams::Mixed(s), DenoiseCursor::Mixed(c)) => {
                s.seek(c);
                Ok(())
            }
            _ => Err(Error::Checkpoint(
                "denoise stream mode does not match cursor".into(),
            )),
        }
    }
}

impl Iterator for DenoiseBatches {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        match &mut self.streams {
            DenoiseStreams::Alternate {
                source,
                target,
                next,
            } => {
                let side = *next;
                *next = side.other();
                match side {
                    Side::Source => source.next(),
                    Side::Target => target.next(),
                }
            }
            DenoiseStreams::Mixed(s) => s.next(),
        }
    }
}

/// Endless denoising batch stream over `M_src` and `M_tgt`.
pub fn denoise_batches<E: TokenCost>(
    m_src: &[E],
    m_tgt: &[E],
    stream: &BatchStream,
    mixing: DenoiseMixing,
) -> Result<DenoiseBatches> {
    let costs = |d: &[E]| d.iter().map(TokenCost::token_cost).collect::<Vec<_>>();
    let streams = match mixing {
        DenoiseMixing::Alternate => DenoiseStreams::Alternate {
            source: EpochStream::new(
                costs(m_src),
                stream.batch_size_tokens,
                derive_seed(stream.seed, tag::SIDE_SOURCE),
                BatchSource::Denoise(Side::Source),
            )?,
            target: EpochStream::new(
                costs(m_tgt),
                stream.batch_size_tokens,
                derive_seed(stream.seed, tag::SIDE_TARGET),
                BatchSource::Denoise(Side::Target),
            )?,
            next: Side::Source,
        },
        DenoiseMixing::Mixed => {
            let mut all = costs(m_src);
            all.extend(costs(m_tgt));
            DenoiseStreams::Mixed(EpochStream::new(
                all,
                stream.batch_size_tokens,
                stream.seed,
                BatchSource::DenoiseMixed,
            )?)
        }
    };
    Ok(DenoiseBatches { streams })
}

/// Endless shuffled token-budget batches over a parallel set.
pub fn finetune_batches<E: TokenCost>(pairs: &[E], stream: &BatchStream) -> Result<EpochStream> {
    EpochStream::new(
        pairs.iter().map(TokenCost::token_cost).collect(),
        stream.batch_size_tokens,
        stream.seed,
        BatchSource::Parallel,
    )
}

/// Describes the files written by [`write_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub pairs: usize,
    pub dropped: usize,
    pub denoising_examples: usize,
    pub seed: u64,
    pub noise: NoiseConfig,
    pub files: DatasetFiles,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetFiles {
    pub m_src_input: PathBuf,
    pub m_src_output: PathBuf,
    pub m_tgt_input: PathBuf,
    pub m_tgt_output: PathBuf,
    pub parallel_source: PathBuf,
    pub parallel_target: PathBuf,
}

/// Writes `M_src`, `M_tgt`, and `B` as aligned text files plus
/// `manifest.json` into `out_dir`. File paths in the manifest are relative to
/// `out_dir`.
pub fn write_dataset(
    out_dir: &Path,
    corpus: &ParallelCorpus,
    m_src: &DenoisingDataset,
    m_tgt: &DenoisingDataset,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<DatasetManifest> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = DatasetFiles {
        m_src_input: "m_src.input".into(),
        m_src_output: "m_src.output".into(),
        m_tgt_input: "m_tgt.input".into(),
        m_tgt_output: "m_tgt.output".into(),
        parallel_source: "parallel.source".into(),
        parallel_target: "parallel.target".into(),
    };
    m_src.write(
        &out_dir.join(&files.m_src_input),
        &out_dir.join(&files.m_src_output),
    )?;
    m_tgt.write(
        &out_dir.join(&files.m_tgt_input),
        &out_dir.join(&files.m_tgt_output),
    )?;
    corpus.write(
        &out_dir.join(&files.parallel_source),
        &out_dir.join(&files.parallel_target),
    )?;
    let manifest = DatasetManifest {
        pairs: corpus.len(),
        dropped: corpus.dropped,
        denoising_examples: m_src.len() + m_tgt.len(),
        seed,
        noise: noise.clone(),
        files,
    };
    let path = out_dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
