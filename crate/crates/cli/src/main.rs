//! `skillrec` command-line driver.
//!
//! Every command reads a run config (TOML), writes its artifacts atomically
//! under the output directory and stamps reports with the config
//! fingerprint. Failures print one line to stderr:
//!
//! ```text
//! error kind=<kind> msg="<message>"
//! ```

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use skillrec::checkpoint::Checkpoint;
use skillrec::config::RunConfig;
use skillrec::dataset::{validate_dataset, Dataset};
use skillrec::io::{read_jsonl, write_atomic, write_json, write_jsonl};
use skillrec::rank::{order_by_score, rank_metrics};
use skillrec::recall::CandidateSet;
use skillrec::synth::generate;
use skillrec::train::{
    candidate_sets, evaluate_recall_cases, rank_eval_groups, rank_split, recall_eval_cases, recall_split,
    recommend, train_rank, train_recall, EpochLog, RankState, RecallState, TrainOutcome,
};
use skillrec::Error;

#[derive(Debug, Parser)]
#[command(name = "skillrec", version, about = "Skill-aware job recall and ranking")]
struct Cli {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both `train.seed` and `synth.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "SKILLREC_OUT", default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 = all cores, 1 = sequential).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Cut-offs for eval-recall (comma separated); list length for recommend.
    #[arg(long, global = true, value_delimiter = ',')]
    k: Vec<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset into the output directory.
    Synth,
    /// Check a dataset for schema and reference violations.
    Validate {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the recall stage.
    TrainRecall {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Held-out Recall@K / NDCG@K and a candidate-set file.
    EvalRecall {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train the click model on top of a recall checkpoint.
    TrainRank {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        recall: PathBuf,
    },
    /// Held-out AUC / MRR, over labelled impressions or a candidate file.
    EvalRank {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        recall: PathBuf,
        #[arg(long)]
        candidates: Option<PathBuf>,
    },
    /// Recall then rank jobs for one user.
    Recommend {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        recall: PathBuf,
        #[arg(long)]
        rank: PathBuf,
        #[arg(long)]
        user: String,
    },
}

#[derive(Debug)]
struct Failure {
    kind: &'static str,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            kind: e.kind(),
            msg: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            fail(&Failure {
                kind: "usage",
                msg: first.to_string(),
            });
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            fail(&f);
            ExitCode::FAILURE
        }
    }
}

fn fail(f: &Failure) {
    let msg = serde_json::to_string(&f.msg.replace('\n', " ")).expect("string serialises");
    eprintln!("error kind={} msg={msg}", f.kind);
}

fn run(cli: &Cli) -> CmdResult {
    let out = &cli.out;
    match &cli.cmd {
        Cmd::Synth => {
            let cfg = base_config(cli)?;
            let (ds, truth) = generate(&cfg.synth)?;
            ds.save(out)?;
            truth.save(&out.join("truth.json"))?;
            save_config(out, &cfg)?;
            log::info!("wrote {} jobs, {} users, {} clicks to {}", ds.jds.len(), ds.users.len(), ds.clicks.len(), out.display());
            Ok(())
        }
        Cmd::Validate { data } => {
            let ds = Dataset::load(data.as_deref().unwrap_or(out))?;
            let report = validate_dataset(&ds);
            write_json(&out.join("validation.json"), &report)?;
            println!("{}", to_json(&report));
            if report.is_empty() {
                Ok(())
            } else {
                Err(Failure {
                    kind: "invalid_data",
                    msg: format!("{} violations, see {}", report.violations.len(), out.join("validation.json").display()),
                })
            }
        }
        Cmd::TrainRecall { data } => {
            let cfg = base_config(cli)?;
            let ds = Dataset::load(data.as_deref().unwrap_or(out))?;
            let (outcome, _) = train_recall(&cfg, &ds, &mut log_epoch)?;
            save_outcome(out, "recall", &cfg, &outcome)
        }
        Cmd::EvalRecall { data, checkpoint } => {
            let ds = Dataset::load(data.as_deref().unwrap_or(out))?;
            let mut state = RecallState::from_checkpoint(&Checkpoint::load(checkpoint)?, &ds)?;
            apply_overrides(cli, &mut state.config)?;
            let cfg = &state.config;
            let split = recall_split(cfg, &ds);
            if split.test.is_empty() {
                return Err(Failure {
                    kind: "domain",
                    msg: "no held-out pairs to evaluate (train.test_fraction too small)".into(),
                });
            }
            let cases = recall_eval_cases(&ds, &split.test, cfg.train.recall_negatives, cfg.train.seed)?;
            let (preds, _) = state.predict_all(&ds)?;
            let report = evaluate_recall_cases(&ds, &preds, &cases, &cfg.train.eval_ks);
            let top = cfg.train.eval_ks.iter().copied().max().unwrap_or(20);
            let users: Vec<usize> = (0..ds.users.len()).collect();
            let sets = candidate_sets(&ds, &preds, &users, top)?;
            write_jsonl(&out.join("candidates.jsonl"), &sets)?;
            let summary = json!({
                "fingerprint": cfg.fingerprint(),
                "cases": cases.len(),
                "metrics": report.metrics,
            });
            write_json(&out.join("recall_report.json"), &json!({
                "fingerprint": cfg.fingerprint(),
                "cases": cases.len(),
                "metrics": report.metrics,
                "per_user": report.per_user,
            }))?;
            println!("{}", to_json(&summary));
            Ok(())
        }
        Cmd::TrainRank { data, recall } => {
            let cfg = base_config(cli)?;
            let ds = Dataset::load(data.as_deref().unwrap_or(out))?;
            let mut recall_state = RecallState::from_checkpoint(&Checkpoint::load(recall)?, &ds)?;
            recall_state.config.train.workers = cfg.train.workers;
            let (outcome, _) = train_rank(&cfg, &ds, &recall_state, &mut log_epoch)?;
            save_outcome(out, "rank", &cfg, &outcome)
        }
        Cmd::EvalRank {
            data,
            checkpoint,
            recall,
            candidates,
        } => {
            let ds = Dataset::load(data.as_deref().unwrap_or(out))?;
            let mut rank = RankState::from_checkpoint(&Checkpoint::load(checkpoint)?, &ds)?;
            apply_overrides(cli, &mut rank.config)?;
            let mut recall_state = RecallState::from_checkpoint(&Checkpoint::load(recall)?, &ds)?;
            recall_state.config.train.workers = rank.config.train.workers;
            let (_, held) = rank_split(&rank.config, &ds);
            let sets: Option<Vec<CandidateSet>> = candidates.as_deref().map(read_jsonl).transpose()?;
            let groups = rank_eval_groups(&ds, &held, sets.as_deref())?;
            let (_, cls) = recall_state.predict_all(&ds)?;
            let scored = rank.score_groups(&ds, &cls, &groups)?;
            let report = rank_metrics(&scored);
            let rankings: Vec<_> = scored
                .iter()
                .map(|g| {
                    let ordered = order_by_score(g.items.iter().map(|i| (i.jd_id.clone(), i.score)).collect());
                    json!({ "user_id": g.user_id, "ranking": ordered })
                })
                .collect();
            write_jsonl(&out.join("rankings.jsonl"), &rankings)?;
            let body = json!({ "fingerprint": rank.config.fingerprint(), "report": report });
            write_json(&out.join("rank_report.json"), &body)?;
            println!("{}", to_json(&body));
            Ok(())
        }
        Cmd::Recommend {
            data,
            recall,
            rank,
            user,
        } => {
            let ds = Dataset::load(data.as_deref().unwrap_or(out))?;
            let mut rank_state = RankState::from_checkpoint(&Checkpoint::load(rank)?, &ds)?;
            apply_overrides(cli, &mut rank_state.config)?;
            let mut recall_state = RecallState::from_checkpoint(&Checkpoint::load(recall)?, &ds)?;
            recall_state.config.train.workers = rank_state.config.train.workers;
            let k = cli.k.first().copied().unwrap_or(20);
            let rec = recommend(&recall_state, &rank_state, &ds, user, k)?;
            let body = json!({ "fingerprint": rank_state.config.fingerprint(), "recommendation": rec });
            let name = format!("recommend_{}.json", sanitize(user));
            write_json(&out.join(name), &body)?;
            let brief: Vec<_> = rec.jobs.iter().map(|j| json!([j.jd_id, j.click_score])).collect();
            println!("{}", to_json(&json!({ "user_id": rec.user_id, "jobs": brief })));
            Ok(())
        }
    }
}

fn base_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_overrides(cli, &mut cfg)?;
    Ok(cfg)
}

fn apply_overrides(cli: &Cli, cfg: &mut RunConfig) -> CmdResult {
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.synth.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.train.workers = w;
    }
    if !cli.k.is_empty() && matches!(cli.cmd, Cmd::EvalRecall { .. }) {
        cfg.train.eval_ks = cli.k.clone();
        if !cfg.train.eval_ks.contains(&cfg.train.select_k) {
            cfg.train.select_k = cfg.train.eval_ks[0];
        }
    }
    cfg.validate()?;
    Ok(())
}

fn save_config(out: &Path, cfg: &RunConfig) -> CmdResult {
    write_atomic(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    Ok(())
}

fn save_outcome<R: Serialize>(out: &Path, stage: &str, cfg: &RunConfig, o: &TrainOutcome<R>) -> CmdResult {
    o.last.save(&out.join(format!("{stage}.ckpt")))?;
    o.best.save(&out.join(format!("{stage}.best.ckpt")))?;
    write_jsonl(&out.join(format!("{stage}_log.jsonl")), &o.log)?;
    save_config(out, cfg)?;
    let body = json!({ "fingerprint": cfg.fingerprint(), "report": o.report });
    write_json(&out.join(format!("{stage}_train_report.json")), &body)?;
    Ok(())
}

fn log_epoch(l: &EpochLog) {
    log::info!("{:?} epoch {} lr {:.6} loss {:.6} {}", l.stage, l.epoch, l.lr, l.train_loss, to_json(&l.metrics));
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("report serialises")
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}
