//! One-shot experiment: learn BPE, build the denoising sets, train a DoT
//! model and a baseline with identical seeds, decode the test set and compare.
//!
//! Everything written under the output directory except the training logs
//! (which carry throughput) is a pure function of the config.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::corpus::{load_parallel, write_lines, LanguagePair, ParallelCorpus, Sentence};
use crate::dataset::{build_denoising, write_dataset, DatasetManifest, Phase};
use crate::error::{Error, Result};
use crate::evaluation::{
    corpus_bleu, decode_corpus, sentence_bleu, sign_test, BleuReport, DecodeConfig, SignTestResult,
    Smoothing,
};
use crate::model::{ModelParams, Transformer};
use crate::subword::{bpe_apply, bpe_decode, bpe_learn, build_vocab, MergeTable, Vocabulary};
use crate::synth;
use crate::training::{run_dot, LogRecord, Mode, RunLog, Seeds, TrainingData};

/// Word-level train and test corpora plus everything derived from them.
pub struct Prepared {
    pub train_words: ParallelCorpus,
    pub test_words: ParallelCorpus,
    pub merges: MergeTable,
    pub vocab: Vocabulary,
    pub train_subwords: ParallelCorpus,
    pub test_sources: Vec<Vec<u32>>,
    pub data: TrainingData,
    pub manifest: DatasetManifest,
}

fn segment(corpus: &ParallelCorpus, merges: &MergeTable) -> ParallelCorpus {
    ParallelCorpus::from_pairs(
        corpus
            .pairs()
            .iter()
            .map(|p| (bpe_apply(&p.source, merges), bpe_apply(&p.target, merges))),
        corpus.language_pair.clone(),
    )
}

fn load_corpora(cfg: &ExperimentConfig) -> Result<(ParallelCorpus, ParallelCorpus)> {
    let files = [
        &cfg.train_source,
        &cfg.train_target,
        &cfg.test_source,
        &cfg.test_target,
    ];
    match files {
        [None, None, None, None] => {
            let task = synth::generate(&cfg.synth())?;
            Ok((task.train, task.test))
        }
        [Some(a), Some(b), Some(c), Some(d)] => Ok((load_parallel(a, b)?, load_parallel(c, d)?)),
        _ => Err(Error::Config(
            "give all of train_source, train_target, test_source, test_target, or none for the synthetic task".into(),
        )),
    }
}

/// Loads or generates the corpora and writes the subword model, vocabulary
/// and denoising dataset under `out_dir`.
pub fn prepare(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Prepared> {
    let (train_words, test_words) = load_corpora(cfg)?;
    if train_words.is_empty() || test_words.is_empty() {
        return Err(Error::Input(
            "train and test corpora must be non-empty".into(),
        ));
    }
    let lp = LanguagePair::new("src", "tgt");
    let train_words = ParallelCorpus::from_pairs(
        train_words
            .pairs()
            .iter()
            .map(|p| (p.source.clone(), p.target.clone())),
        lp.clone(),
    );
    let data_dir = out_dir.join("data");
    fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
    train_words.write(&data_dir.join("train.src"), &data_dir.join("train.tgt"))?;
    test_words.write(&data_dir.join("test.src"), &data_dir.join("test.tgt"))?;

    let merges = bpe_learn(
        train_words.sources().chain(train_words.targets()),
        cfg.bpe_merges,
    )?;
    merges.save(&out_dir.join("bpe.codes"))?;
    let train_subwords = segment(&train_words, &merges);
    let vocab = build_vocab(train_subwords.sources().chain(train_subwords.targets()));
    vocab.save(&out_dir.join("vocab.txt"))?;
    let test_sources = test_words
        .sources()
        .map(|s| vocab.encode(&bpe_apply(s, &merges)))
        .collect();

    let noise = cfg.noise();
    let data_seed = Seeds::from_global(cfg.seed).data;
    let (m_src, m_tgt) = build_denoising(&train_subwords, &noise, data_seed)?;
    let manifest = write_dataset(
        &out_dir.join("dataset"),
        &train_subwords,
        &m_src,
        &m_tgt,
        &noise,
        data_seed,
    )?;
    let data = TrainingData::from_corpus(&train_subwords, &vocab, &noise, data_seed)?;
    log::info!(
        "prepared {} training pairs, {} test pairs, vocabulary {}",
        train_words.len(),
        test_words.len(),
        vocab.len()
    );
    Ok(Prepared {
        train_words,
        test_words,
        merges,
        vocab,
        train_subwords,
        test_sources,
        data,
        manifest,
    })
}

/// Beam-decodes id-encoded sources and undoes subword segmentation.
pub fn translate(
    model: &Transformer,
    params: &ModelParams,
    vocab: &Vocabulary,
    sources: &[Vec<u32>],
    decode: &DecodeConfig,
) -> Result<Vec<Sentence>> {
    Ok(decode_corpus(model, params, sources, decode)?
        .iter()
        .map(|ids| bpe_decode(&vocab.decode(ids)))
        .collect())
}

/// First logged loss of the fine-tuning phase.
pub fn first_finetune_loss(log: &RunLog) -> Option<f64> {
    log.steps().find_map(|r| match r {
        LogRecord::Step {
            phase: Phase::Finetune,
            loss,
            ..
        } => Some(*loss),
        _ => None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemResult {
    pub mode: Mode,
    pub bleu: BleuReport,
    pub first_finetune_loss: f64,
    pub last_loss: f64,
    pub hypotheses: PathBuf,
    /// Add-one smoothed sentence BLEU per test segment.
    pub segment_bleu: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub total_steps: u64,
    pub denoise_steps: u64,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub vocab_size: usize,
    pub smoothing: Smoothing,
    pub dot: SystemResult,
    pub baseline: SystemResult,
    /// DoT against the baseline on segment BLEU.
    pub sign_test: SignTestResult,
}

impl PipelineReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "seed {}  steps {} (denoise {})  train {}  test {}  vocab {}",
            self.seed,
            self.total_steps,
            self.denoise_steps,
            self.train_pairs,
            self.test_pairs,
            self.vocab_size
        );
        let _ = writeln!(
            out,
            "{:<10} {:>7} {:>11} {:>10} {:>6}",
            "system", "BLEU", "ft-loss@0", "last-loss", "BP"
        );
        for s in [&self.baseline, &self.dot] {
            let name = match s.mode {
                Mode::Dot => "dot",
                Mode::Baseline => "baseline",
            };
            let _ = writeln!(
                out,
                "{:<10} {:>7.2} {:>11.4} {:>10.4} {:>6.3}",
                name, s.bleu.bleu, s.first_finetune_loss, s.last_loss, s.bleu.brevity_penalty
            );
        }
        let t = &self.sign_test;
        let _ = writeln!(
            out,
            "dot vs baseline: {} wins, {} losses, {} ties, sign test p = {:.4}",
            t.wins, t.losses, t.ties, t.p_value
        );
        out
    }
}

fn train_and_score(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    mode: Mode,
    out_dir: &Path,
) -> Result<SystemResult> {
    let name = match mode {
        Mode::Dot => "dot",
        Mode::Baseline => "baseline",
    };
    let run_dir = out_dir.join(name);
    let run_cfg = cfg.run_config(mode, prep.vocab.len(), Some(run_dir.clone()))?;
    let outcome = run_dot(run_cfg, &prep.data)?;
    let params = outcome.final_params.as_ref().unwrap_or(&outcome.params);
    let model = Transformer::new(cfg.model(prep.vocab.len()))?;
    let hyps = translate(
        &model,
        params,
        &prep.vocab,
        &prep.test_sources,
        &cfg.decode(),
    )?;
    let hyp_path = run_dir.join("test.hyp");
    write_lines(&hyp_path, &hyps)?;

    let refs: Vec<&Sentence> = prep.test_words.targets().collect();
    let hyp_tokens: Vec<&[String]> = hyps.iter().map(Sentence::tokens).collect();
    let ref_tokens: Vec<&[String]> = refs.iter().map(|r| r.tokens()).collect();
    let bleu = corpus_bleu(&hyp_tokens, &ref_tokens, cfg.bleu_smoothing)?;
    let segment_bleu = hyp_tokens
        .iter()
        .zip(&ref_tokens)
        .map(|(h, r)| sentence_bleu(h, r, Smoothing::AddOne))
        .collect();
    let losses = outcome.log.losses();
    Ok(SystemResult {
        mode,
        bleu,
        first_finetune_loss: first_finetune_loss(&outcome.log).unwrap_or(f64::NAN),
        last_loss: losses.last().copied().unwrap_or(f64::NAN),
        hypotheses: PathBuf::from(name).join("test.hyp"),
        segment_bleu,
    })
}

/// Runs the whole experiment and writes `report.json` and `report.txt`.
pub fn run_pipeline(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PipelineReport> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg_path = out_dir.join("experiment.toml");
    fs::write(&cfg_path, cfg.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;
    let prep = prepare(cfg, out_dir)?;
    let dot = train_and_score(cfg, &prep, Mode::Dot, out_dir)?;
    let baseline = train_and_score(cfg, &prep, Mode::Baseline, out_dir)?;
    let report = PipelineReport {
        seed: cfg.seed,
        total_steps: cfg.total_steps,
        denoise_steps: cfg
            .run_config(Mode::Dot, prep.vocab.len(), None)?
            .denoise_steps(),
        train_pairs: prep.train_words.len(),
        test_pairs: prep.test_words.len(),
        vocab_size: prep.vocab.len(),
        smoothing: cfg.bleu_smoothing,
        sign_test: sign_test(&dot.segment_bleu, &baseline.segment_bleu)?,
        dot,
        baseline,
    };
    let json = out_dir.join("report.json");
    fs::write(&json, serde_json::to_string_pretty(&report)? + "\n")
        .map_err(|e| Error::io(&json, e))?;
    let txt = out_dir.join("report.txt");
    fs::write(&txt, report.table()).map_err(|e| Error::io(&txt, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            total_steps: 6,
            batch_size_tokens: 64,
            synth_train_pairs: 40,
            synth_test_pairs: 5,
            synth_vocab: 12,
            bpe_merges: 20,
            beam_size: 2,
            layers: 1,
            model_dim: 8,
            heads: 2,
            ffn_dim: 16,
            checkpoint_every: Some(2),
            average_last: 2,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn tiny_pipeline_writes_report() {
        let dir = tempfile::tempdir().unwrap();
        let r = run_pipeline(&tiny(), dir.path()).unwrap();
        assert_eq!(r.denoise_steps, 2);
        assert_eq!(r.dot.segment_bleu.len(), 5);
        assert!(r.dot.first_finetune_loss.is_finite());
        let text = fs::read_to_string(dir.path().join("report.txt")).unwrap();
        assert!(text.contains("baseline") && text.contains("dot"));
        let manifest: DatasetManifest = serde_json::from_str(
            &fs::read_to_string(dir.path().join("dataset/manifest.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(manifest.denoising_examples, 80);
        assert!(dir.path().join("dot/final.ckpt").exists());
        assert!(dir.path().join("baseline/test.hyp").exists());
    }

    #[test]
    fn partial_file_list_rejected() {
        let cfg = ExperimentConfig {
            train_source: Some("a".into()),
            ..tiny()
        };
        assert!(matches!(
            prepare(&cfg, Path::new("/nonexistent")),
            Err(Error::Config(_))
        ));
    }
}
