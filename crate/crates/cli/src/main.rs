use std::fs;
use std::io::{self, BufRead, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dot_nmt::config::ExperimentConfig;
use dot_nmt::corpus::{load_parallel, Sentence};
use dot_nmt::dataset::{build_denoising, write_dataset};
use dot_nmt::evaluation::{corpus_bleu, sentence_bleu, sign_test, DecodeConfig, Smoothing};
use dot_nmt::noising::{noised, Application, BlankMode, CodeSwitchLexicon, NoiseConfig};
use dot_nmt::pipeline::{run_pipeline, translate};
use dot_nmt::rng::RngStream;
use dot_nmt::subword::{
    bpe_apply, bpe_decode, bpe_learn, build_vocab, MergeTable, Vocabulary, MASK,
};
use dot_nmt::synth::{self, SynthConfig};
use dot_nmt::training::{self, load_model, Mode, TrainingData};

#[derive(Parser)]
#[command(name = "dotnmt", version, about = "Denoising pretraining for NMT")]
struct Cli {
    /// Seed for every random choice; a random one is picked and printed if omitted.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Noise stdin line by line (shuffle, dropout, blank).
    Noise(NoiseArgs),
    /// Write the denoising sets, parallel data, vocabulary and manifest.
    Build {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        noise: NoiseArgs,
    },
    /// Train one model on a built dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory written by `build`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides the config's mode.
        #[arg(long)]
        mode: Option<Mode>,
        /// Continue from the latest checkpoint in `out_dir`.
        #[arg(long)]
        resume: bool,
        /// Stop after this many global steps, leaving a resumable checkpoint.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// BPE, build, DoT and baseline training, decoding, BLEU and sign test.
    Pipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Learn BPE merges from tokenized text files.
    BpeLearn {
        #[arg(long, default_value_t = 32000)]
        merges: usize,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Segment text with learned merges.
    BpeApply {
        #[arg(long)]
        codes: PathBuf,
        input: Option<PathBuf>,
    },
    /// Join subword units back into words.
    BpeDecode { input: Option<PathBuf> },
    /// Translate lines with a trained model.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Segment input with these merges and join the output again.
        #[arg(long)]
        codes: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        #[arg(long, default_value_t = 1.0)]
        length_penalty: f64,
        #[arg(long, default_value_t = 1.5)]
        max_len_factor: f64,
        input: Option<PathBuf>,
    },
    /// Corpus BLEU-4 of a hypothesis file against a reference file.
    Bleu {
        hypotheses: PathBuf,
        references: PathBuf,
        /// Add-one smoothing for orders 2 to 4.
        #[arg(long)]
        smooth: bool,
    },
    /// Paired sign test on per-segment scores.
    Signtest {
        /// One score per line, or hypotheses when `--reference` is given.
        a: PathBuf,
        b: PathBuf,
        /// Score both files by smoothed sentence BLEU against this reference.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Write the synthetic parallel task.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 50)]
        vocab: usize,
        #[arg(long, default_value_t = 2000)]
        train_pairs: usize,
        #[arg(long, default_value_t = 200)]
        test_pairs: usize,
        #[arg(long, default_value_t = 3)]
        min_len: usize,
        #[arg(long, default_value_t = 12)]
        max_len: usize,
        #[arg(long, default_value_t = 5)]
        classes: usize,
    },
}

#[derive(Args)]
struct NoiseArgs {
    /// Word dropout probability.
    #[arg(long = "wd", visible_alias = "word-dropout", default_value_t = 0.1)]
    wd: f64,
    /// Word blank probability.
    #[arg(long = "wb", visible_alias = "word-blank", default_value_t = 0.1)]
    wb: f64,
    /// Shuffle span.
    #[arg(long = "sk", visible_alias = "shuffle-k", default_value_t = 3)]
    sk: usize,
    #[arg(long, default_value = MASK)]
    mask: String,
    /// Code-switch blanked words using this `word<TAB>translation` lexicon.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// One removal, one replacement and one swap per sentence.
    #[arg(long)]
    once: bool,
}

impl NoiseArgs {
    fn config(&self) -> Result<NoiseConfig> {
        let mut cfg = NoiseConfig {
            wd: self.wd,
            wb: self.wb,
            sk: self.sk,
            mask_symbol: self.mask.clone(),
            ..NoiseConfig::default()
        };
        if self.once {
            cfg.application = Application::OncePerSentence;
        }
        if let Some(path) = &self.lexicon {
            cfg.lexicon = Some(CodeSwitchLexicon::load(path)?.into());
            cfg.mode = BlankMode::CodeSwitch;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Accepts the single-dash `-wd`, `-wb`, `-sk` spellings.
fn normalize_args(args: impl Iterator<Item = String>) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = false;
    for a in args {
        if a == "--" {
            rest = true;
        }
        let single = ["-wd", "-wb", "-sk"]
            .iter()
            .any(|f| a == *f || a.starts_with(&format!("{f}=")));
        out.push(if single && !rest { format!("-{a}") } else { a });
    }
    out
}

fn seed_or_random(explicit: Option<u64>) -> u64 {
    explicit.unwrap_or_else(|| {
        let s = rand::random::<u64>() >> 1;
        eprintln!("seed: {s}");
        s
    })
}

fn read_text(input: Option<&Path>) -> Result<String> {
    let mut text = String::new();
    match input {
        Some(p) if p != Path::new("-") => {
            text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        }
        _ => {
            io::stdin()
                .read_to_string(&mut text)
                .context("reading stdin")?;
        }
    }
    Ok(text)
}

fn read_sentences(input: Option<&Path>) -> Result<Vec<Sentence>> {
    Ok(read_text(input)?.lines().map(Sentence::from_line).collect())
}

fn write_sentences<'a>(lines: impl IntoIterator<Item = &'a Sentence>) -> Result<()> {
    let mut out = BufWriter::new(io::stdout().lock());
    for s in lines {
        writeln!(out, "{s}")?;
    }
    out.flush()?;
    Ok(())
}

fn read_scores(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<f64>()
                .with_context(|| format!("{}:{}: not a number: {l:?}", path.display(), i + 1))
        })
        .collect()
}

fn load_experiment(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let (mut cfg, file_seed) = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let cfg = ExperimentConfig::from_toml(&text)
                .with_context(|| format!("in {}", p.display()))?;
            (cfg, ExperimentConfig::explicit_seed(&text))
        }
        None => (ExperimentConfig::default(), None),
    };
    cfg.seed = match seed.or(file_seed) {
        Some(s) => s,
        None => seed_or_random(None),
    };
    Ok(cfg)
}

fn cmd_noise(args: &NoiseArgs, seed: u64) -> Result<()> {
    let cfg = args.config()?;
    let stdin = io::stdin();
    let mut out = BufWriter::new(io::stdout().lock());
    for (i, line) in stdin.lock().lines().enumerate() {
        let s = Sentence::from_line(&line.context("reading stdin")?);
        writeln!(out, "{}", noised(&s, &cfg, RngStream::new(seed, i as u64)))?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_build(
    source: &Path,
    target: &Path,
    out_dir: &Path,
    noise: &NoiseArgs,
    seed: u64,
) -> Result<()> {
    let cfg = noise.config()?;
    let corpus = load_parallel(source, target)?;
    let (m_src, m_tgt) = build_denoising(&corpus, &cfg, seed)?;
    let manifest = write_dataset(out_dir, &corpus, &m_src, &m_tgt, &cfg, seed)?;
    let vocab = build_vocab(corpus.sources().chain(corpus.targets()));
    vocab.save(&out_dir.join("vocab.txt"))?;
    println!("{}", serde_json::to_string_pretty(&manifest)?);
    Ok(())
}

struct TrainArgs<'a> {
    config: Option<&'a Path>,
    data: &'a Path,
    out_dir: &'a Path,
    mode: Option<Mode>,
    resume: bool,
    stop_after: Option<u64>,
}

fn cmd_train(a: TrainArgs<'_>, seed: Option<u64>) -> Result<()> {
    let exp = load_experiment(a.config, seed)?;
    let vocab = Vocabulary::load(&a.data.join("vocab.txt"))?;
    let data = TrainingData::load_dir(a.data, &vocab, "src-tgt")?;
    let mut run = exp.run_config(
        a.mode.unwrap_or(exp.mode),
        vocab.len(),
        Some(a.out_dir.to_path_buf()),
    )?;
    run.stop_after = a.stop_after;
    let outcome = if a.resume {
        training::resume(run, &data)?
    } else {
        training::run_dot(run, &data)?
    };
    let last = outcome.log.losses().last().copied().unwrap_or(f64::NAN);
    match outcome.final_params {
        Some(_) => println!(
            "finished {} steps, last loss {last:.4}, model {}",
            outcome.steps_completed,
            a.out_dir.join("final.ckpt").display()
        ),
        None => println!(
            "stopped after {} steps, last loss {last:.4}",
            outcome.steps_completed
        ),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_decode(
    checkpoint: &Path,
    vocab: &Path,
    codes: Option<&Path>,
    decode: DecodeConfig,
    input: Option<&Path>,
) -> Result<()> {
    decode.validate()?;
    let (model, params) = load_model(checkpoint)?;
    let vocab = Vocabulary::load(vocab)?;
    let merges = codes.map(MergeTable::load).transpose()?;
    let lines = read_sentences(input)?;
    let ids: Vec<Vec<u32>> = lines
        .iter()
        .map(|s| match &merges {
            Some(m) => vocab.encode(&bpe_apply(s, m)),
            None => vocab.encode(s),
        })
        .collect();
    let out = match &merges {
        Some(_) => translate(&model, &params, &vocab, &ids, &decode)?,
        None => dot_nmt::evaluation::decode_corpus(&model, &params, &ids, &decode)?
            .iter()
            .map(|h| vocab.decode(h))
            .collect(),
    };
    write_sentences(&out)
}

fn cmd_signtest(a: &Path, b: &Path, reference: Option<&Path>) -> Result<()> {
    let (sa, sb) = match reference {
        Some(r) => {
            let refs = read_sentences(Some(r))?;
            let score = |p: &Path| -> Result<Vec<f64>> {
                let hyps = read_sentences(Some(p))?;
                if hyps.len() != refs.len() {
                    bail!(
                        "{} has {} lines but the reference has {}",
                        p.display(),
                        hyps.len(),
                        refs.len()
                    );
                }
                Ok(hyps
                    .iter()
                    .zip(&refs)
                    .map(|(h, r)| sentence_bleu(h.tokens(), r.tokens(), Smoothing::AddOne))
                    .collect())
            };
            (score(a)?, score(b)?)
        }
        None => (read_scores(a)?, read_scores(b)?),
    };
    let t = sign_test(&sa, &sb)?;
    println!(
        "wins = {}, losses = {}, ties = {}, p = {:.6}",
        t.wins, t.losses, t.ties, t.p_value
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Noise(args) => cmd_noise(&args, seed_or_random(cli.seed)),
        Command::Build {
            source,
            target,
            out_dir,
            noise,
        } => cmd_build(&source, &target, &out_dir, &noise, seed_or_random(cli.seed)),
        Command::Train {
            config,
            data,
            out_dir,
            mode,
            resume,
            stop_after,
        } => cmd_train(
            TrainArgs {
                config: config.as_deref(),
                data: &data,
                out_dir: &out_dir,
                mode,
                resume,
                stop_after,
            },
            cli.seed,
        ),
        Command::Pipeline { config, out_dir } => {
            let cfg = load_experiment(config.as_deref(), cli.seed)?;
            let report = run_pipeline(&cfg, &out_dir)?;
            print!("{}", report.table());
            Ok(())
        }
        Command::BpeLearn {
            merges,
            output,
            inputs,
        } => {
            let mut lines = Vec::new();
            for p in &inputs {
                lines.extend(read_sentences(Some(p))?);
            }
            let table = bpe_learn(&lines, merges)?;
            table.save(&output)?;
            eprintln!("learned {} merges", table.len());
            Ok(())
        }
        Command::BpeApply { codes, input } => {
            let merges = MergeTable::load(&codes)?;
            let out: Vec<Sentence> = read_sentences(input.as_deref())?
                .iter()
                .map(|s| bpe_apply(s, &merges))
                .collect();
            write_sentences(&out)
        }
        Command::BpeDecode { input } => {
            let out: Vec<Sentence> = read_sentences(input.as_deref())?
                .iter()
                .map(bpe_decode)
                .collect();
            write_sentences(&out)
        }
        Command::Decode {
            checkpoint,
            vocab,
            codes,
            beam,
            length_penalty,
            max_len_factor,
            input,
        } => cmd_decode(
            &checkpoint,
            &vocab,
            codes.as_deref(),
            DecodeConfig {
                beam_size: beam,
                length_penalty,
                max_len_factor,
            },
            input.as_deref(),
        ),
        Command::Bleu {
            hypotheses,
            references,
            smooth,
        } => {
            let h = read_sentences(Some(&hypotheses))?;
            let r = read_sentences(Some(&references))?;
            let h: Vec<&[String]> = h.iter().map(Sentence::tokens).collect();
            let r: Vec<&[String]> = r.iter().map(Sentence::tokens).collect();
            let smoothing = if smooth {
                Smoothing::AddOne
            } else {
                Smoothing::None
            };
            println!("{}", corpus_bleu(&h, &r, smoothing)?);
            Ok(())
        }
        Command::Signtest { a, b, reference } => cmd_signtest(&a, &b, reference.as_deref()),
        Command::Synth {
            out_dir,
            vocab,
            train_pairs,
            test_pairs,
            min_len,
            max_len,
            classes,
        } => {
            let task = synth::generate(&SynthConfig {
                vocab_size: vocab,
                min_len,
                max_len,
                train_pairs,
                test_pairs,
                classes,
                seed: seed_or_random(cli.seed),
            })?;
            fs::create_dir_all(&out_dir)
                .with_context(|| format!("creating {}", out_dir.display()))?;
            task.train
                .write(&out_dir.join("train.src"), &out_dir.join("train.tgt"))?;
            task.test
                .write(&out_dir.join("test.src"), &out_dir.join("test.tgt"))?;
            eprintln!(
                "wrote {} train and {} test pairs to {}",
                task.train.len(),
                task.test.len(),
                out_dir.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse_from(normalize_args(std::env::args()));
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_dash_flags_are_rewritten() {
        let args = [
            "dotnmt", "noise", "-wd", "0", "-wb=0.2", "-sk", "1", "--", "-wd",
        ]
        .map(String::from);
        let out = normalize_args(args.into_iter());
        assert_eq!(
            out,
            ["dotnmt", "noise", "--wd", "0", "--wb=0.2", "--sk", "1", "--", "-wd"]
        );
    }

    #[test]
    fn noise_defaults() {
        let cli = Cli::parse_from(["dotnmt", "noise"]);
        let Command::Noise(a) = cli.command else {
            panic!()
        };
        let c = a.config().unwrap();
        assert_eq!((c.wd, c.wb, c.sk), (0.1, 0.1, 3));
    }

    #[test]
    fn bad_flag_values_rejected() {
        assert!(Cli::try_parse_from(normalize_args(
            ["dotnmt", "noise", "-wd", "x"]
                .map(String::from)
                .into_iter()
        ))
        .is_err());
        let cli = Cli::parse_from(["dotnmt", "noise", "--wd", "1.5"]);
        let Command::Noise(a) = cli.command else {
            panic!()
        };
        assert!(a.config().is_err());
    }
}
