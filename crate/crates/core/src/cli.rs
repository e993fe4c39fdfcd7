//! Command-line front end. Each command reads artifacts from disk, writes its
//! outputs atomically into `--out` together with the effective config and
//! seed, and returns the text meant for stdout.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{generate_synthetic_corpus, make_splits, Dataset, Split};
use crate::error::{Error, Result};
use crate::experiment::{decode_all, evaluate, train_run, Decoder, EvalReport, Metric, MergedReport, Representation, RunConfig};
use crate::asr_eval::ScoringReport;
use crate::speaker_eval::{score_csv, write_embedding_file};
use crate::storage::{read_file, write_atomic};
use crate::trainer::{loss_csv, Checkpoint, Stage};

pub const CONFIG_FILE: &str = "config.toml";
pub const SEED_FILE: &str = "seed.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_FILE: &str = "losses.csv";
pub const DECODE_FILE: &str = "decode.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_MD: &str = "report.md";

#[derive(Debug, Parser)]
#[command(name = "spkadv", version, about = "Speaker-adversarial sequence recognition experiments")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides any config key, e.g. `--set train.learning_rate=0.003`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and its splits.
    SynthData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run training stages and write a checkpoint and loss CSV.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.alpha`.
        #[arg(long)]
        alpha: Option<f64>,
        /// Run a single stage. Every stage after pretrain-asr needs --resume.
        #[arg(long, value_parser = parse_stage)]
        stage: Option<Stage>,
        /// Continue from this checkpoint; without --stage the remaining stages run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Transcribe one split and score it.
    Decode {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "open-set", value_parser = parse_split)]
        split: Split,
        /// Overrides `eval.decoder`.
        #[arg(long, value_parser = parse_decoder)]
        decoder: Option<Decoder>,
    },
    /// Measure recognition quality and speaker leakage of one representation.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Required for `--representation phi`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_representation)]
        representation: Representation,
        /// Comma-separated subset of wer,cer,acc,eer,eer-plda,eer-groups,silhouette.
        #[arg(long)]
        metrics: Option<String>,
    },
    /// Merge eval output directories into one table.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_representation(s: &str) -> std::result::Result<Representation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_decoder(s: &str) -> std::result::Result<Decoder, String> {
    match s {
        "ctc-greedy" => Ok(Decoder::CtcGreedy),
        "attention-beam" => Ok(Decoder::AttentionBeam),
        _ => Err(format!("unknown decoder `{s}` (expected ctc-greedy or attention-beam)")),
    }
}

// ------------------------------------------------------------------ config

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::Config(format!("empty key `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Config file, then `--set` overrides, then the dedicated flags.
pub fn load_config(common: &CommonArgs, extra: &[(&str, toml::Value)]) -> Result<RunConfig> {
    let mut table = match &common.config {
        Some(path) => {
            let text = String::from_utf8(read_file(path)?)
                .map_err(|_| Error::Config(format!("{}: not UTF-8", path.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
        set_path(&mut table, k.trim(), parse_value(v.trim()))?;
    }
    if let Some(seed) = common.seed {
        let seed = i64::try_from(seed).map_err(|_| Error::Config("seed must fit in a signed 64-bit integer".into()))?;
        set_path(&mut table, "seed", toml::Value::Integer(seed))?;
    }
    for (k, v) in extra {
        set_path(&mut table, k, v.clone())?;
    }
    let text = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
    RunConfig::from_toml(&text)
}

fn echo_config(out: &Path, cfg: &RunConfig) -> Result<()> {
    write_atomic(&out.join(CONFIG_FILE), cfg.to_toml()?.as_bytes())?;
    write_atomic(&out.join(SEED_FILE), format!("{}\n", cfg.seed).as_bytes())
}

// ---------------------------------------------------------------- commands

pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::SynthData { out } => {
            let cfg = load_config(&cli.common, &[])?;
            synth_data(&cfg, out)
        }
        Command::Train {
            data,
            out,
            alpha,
            stage,
            resume,
        } => {
            let extra: Vec<(&str, toml::Value)> = alpha.map(|a| ("train.alpha", toml::Value::Float(a))).into_iter().collect();
            let cfg = load_config(&cli.common, &extra)?;
            train(&cfg, data, out, *stage, resume.as_deref())
        }
        Command::Decode {
            data,
            checkpoint,
            out,
            split,
            decoder,
        } => {
            let extra: Vec<(&str, toml::Value)> = decoder
                .map(|d| {
                    let name = match d {
                        Decoder::CtcGreedy => "ctc-greedy",
                        Decoder::AttentionBeam => "attention-beam",
                    };
                    ("eval.decoder", toml::Value::String(name.into()))
                })
                .into_iter()
                .collect();
            let cfg = load_config(&cli.common, &extra)?;
            decode(&cfg, data, checkpoint, out, *split)
        }
        Command::Eval {
            data,
            checkpoint,
            out,
            representation,
            metrics,
        } => {
            let cfg = load_config(&cli.common, &[])?;
            let metrics = match metrics {
                Some(m) => Metric::parse_list(m)?,
                None => Metric::DEFAULT.to_vec(),
            };
            eval(&cfg, data, checkpoint.as_deref(), out, *representation, &metrics)
        }
        Command::Report { out, inputs } => report(inputs, out),
    }
}

pub fn synth_data(cfg: &RunConfig, out: &Path) -> Result<String> {
    let corpus = generate_synthetic_corpus(&cfg.corpus, cfg.seed)?;
    let splits = make_splits(&corpus, &cfg.splits, cfg.seed)?;
    let ds = Dataset::new(corpus, splits)?;
    ds.write(out)?;
    echo_config(out, cfg)?;
    let counts: Vec<String> = Split::ALL
        .iter()
        .map(|&s| format!("{s}={}", ds.split(s).len()))
        .collect();
    Ok(format!(
        "wrote {} utterances to {} ({})\n",
        ds.corpus.utterances.len(),
        out.display(),
        counts.join(" ")
    ))
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path, stage: Option<Stage>, resume: Option<&Path>) -> Result<String> {
    let ds = Dataset::read(data)?;
    let resume = resume.map(Checkpoint::read).transpose()?;
    let stages: Vec<Stage> = match (stage, &resume) {
        (Some(Stage::PretrainAsr), _) => vec![Stage::PretrainAsr],
        (Some(s), Some(_)) => vec![s],
        (Some(s), None) => {
            return Err(Error::invalid(format!("stage {s} continues an earlier stage and needs --resume CHECKPOINT")));
        }
        (None, None) => Stage::ALL.to_vec(),
        (None, Some(ck)) => {
            let rest: Vec<Stage> = Stage::ALL.into_iter().filter(|&s| s > ck.stage).collect();
            if rest.is_empty() {
                return Err(Error::invalid("checkpoint already finished adv-refit; pass --stage to rerun one"));
            }
            rest
        }
    };
    let (ck, log) = train_run(cfg, &ds, &stages, resume)?;
    ck.write(&out.join(CHECKPOINT_FILE))?;
    write_atomic(&out.join(LOSS_FILE), loss_csv(&log).as_bytes())?;
    echo_config(out, cfg)?;
    let last = log.last();
    Ok(format!(
        "trained {} (alpha {}) -> {}; final objective {}\n",
        stages.iter().map(Stage::to_string).collect::<Vec<_>>().join(","),
        cfg.train.alpha,
        out.join(CHECKPOINT_FILE).display(),
        last.map_or("n/a".to_string(), |r| format!("{:.6}", r.objective)),
    ))
}

pub fn decode(cfg: &RunConfig, data: &Path, checkpoint: &Path, out: &Path, split: Split) -> Result<String> {
    let ds = Dataset::read(data)?;
    let ck = Checkpoint::read(checkpoint)?;
    let utts = ds.split(split);
    if utts.is_empty() {
        return Err(Error::data(format!("split {split} is empty")));
    }
    let decoded = decode_all(&ck, &utts, &cfg.eval)?;
    let scoring = ScoringReport::new(&decoded);
    write_atomic(&out.join(DECODE_FILE), scoring.to_csv()?.as_bytes())?;
    echo_config(out, cfg)?;
    Ok(format!("{split}: {} utterances, CER {:.2}%\n", decoded.len(), scoring.error_rate()?))
}

pub fn eval(
    cfg: &RunConfig,
    data: &Path,
    checkpoint: Option<&Path>,
    out: &Path,
    representation: Representation,
    metrics: &[Metric],
) -> Result<String> {
    let ds = Dataset::read(data)?;
    let ck = checkpoint.map(Checkpoint::read).transpose()?;
    let res = evaluate(cfg, &ds, ck.as_ref(), representation, metrics)?;
    let table = MergedReport::new(std::slice::from_ref(&res.report));
    let json = serde_json::to_string_pretty(&res.report).map_err(|e| Error::data(e.to_string()))?;
    write_atomic(&out.join(REPORT_JSON), json.as_bytes())?;
    write_atomic(&out.join(REPORT_CSV), table.to_csv()?.as_bytes())?;
    write_atomic(&out.join(REPORT_MD), table.to_markdown().as_bytes())?;
    if let Some(s) = &res.asr_scoring {
        write_atomic(&out.join("asr_scoring.csv"), s.to_csv()?.as_bytes())?;
    }
    if !res.cosine_trials.is_empty() {
        write_atomic(&out.join("scores.csv"), score_csv(&res.cosine_trials)?.as_bytes())?;
    }
    if !res.plda_trials.is_empty() {
        write_atomic(&out.join("scores_plda.csv"), score_csv(&res.plda_trials)?.as_bytes())?;
    }
    if let Some(e) = &res.cosine_eer {
        write_atomic(&out.join("roc.csv"), e.roc_csv().as_bytes())?;
    }
    if !res.embeddings.is_empty() {
        let rows: Vec<Vec<f64>> = res.embeddings.iter().map(|e| e.vector.clone()).collect();
        write_embedding_file(&out.join("embeddings.bin"), &rows)?;
        let mut index = String::from("utterance_id,speaker_id\n");
        for e in &res.embeddings {
            index.push_str(&format!("{},{}\n", e.utterance_id, e.speaker_id.as_deref().unwrap_or("")));
        }
        write_atomic(&out.join("embeddings.csv"), index.as_bytes())?;
    }
    echo_config(out, cfg)?;
    Ok(table.to_markdown())
}

pub fn report(inputs: &[PathBuf], out: &Path) -> Result<String> {
    let reports = inputs
        .iter()
        .map(|dir| {
            let path = dir.join(REPORT_JSON);
            serde_json::from_slice::<EvalReport>(&read_file(&path)?)
                .map_err(|e| Error::data(format!("{}: {e}", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    let table = MergedReport::new(&reports);
    write_atomic(&out.join(REPORT_CSV), table.to_csv()?.as_bytes())?;
    write_atomic(&out.join(REPORT_MD), table.to_markdown().as_bytes())?;
    Ok(table.to_markdown())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn common(overrides: &[&str]) -> CommonArgs {
        CommonArgs {
            config: None,
            seed: Some(7),
            overrides: overrides.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = load_config(
            &common(&["train.learning_rate=0.01", "corpus.vocab=abc", "train.epochs.joint=3"]),
            &[("train.alpha", toml::Value::Float(2.0))],
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.train.alpha, 2.0);
        assert_eq!(cfg.corpus.vocab, "abc");
        assert_eq!(cfg.train.epochs.joint, 3);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = load_config(&common(&["train.learnin_rate=0.01"]), &[]).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("learnin_rate"), "{err}");
    }

    #[test]
    fn effective_config_roundtrips() {
        let cfg = load_config(&common(&["train.alpha=0.5"]), &[]).unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn later_stages_need_a_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let data = dir.path().join("data");
        synth_data(&cfg, &data).unwrap();
        for stage in [Stage::PretrainAdv, Stage::Joint, Stage::AdvRefit] {
            let err = train(&cfg, &data, &dir.path().join("ck"), Some(stage), None).unwrap_err();
            assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
        }
    }

    #[test]
    fn synth_data_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default().with_seed(3);
        synth_data(&cfg, &dir.path().join("a")).unwrap();
        synth_data(&cfg, &dir.path().join("b")).unwrap();
        for f in [crate::data::MANIFEST_FILE, crate::data::FEATURES_FILE, CONFIG_FILE, SEED_FILE] {
            let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
            let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
            assert_eq!(a, b, "{f}");
        }
    }
}
