//! One function per subcommand.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use rlhf_core::data::{
    assign_buckets, balance_buckets, corpus_stats, filter_prompts, gen_synthetic_corpus, long_win_counts,
    score_prompt_quality, variance_filter, BucketSpec, PreferencePair, PromptRecord, RuleSet, SftRecord,
};
use rlhf_core::eval::{export_curves, length_csv, length_report, reward_histogram, win_rate_table};
use rlhf_core::gradcheck::{gradient_suite, TOLERANCE};
use rlhf_core::offline::{construct_dpo_pairs, dpo_train, rft_select, rft_train, DpoEpoch};
use rlhf_core::planner::{plan_table, plan_table_csv, recommend_plan, WorkloadKind};
use rlhf_core::ppo::{metrics_to_csv, ppo_train, PpoConfig, RetentionSet};
use rlhf_core::reward::{
    eval_pairwise_accuracy, length_bias_probe, train_reward_model, RewardEpoch, RewardTrainConfig,
};
use rlhf_core::rng;
use rlhf_core::tinylm::{init_params, sample_top_p, train_nll, NllEpoch, NllTrainConfig};
use rlhf_core::TokenSeq;

use crate::config::RunConfig;
use crate::workspace::Workspace;
use crate::{CliError, Command, Workload};

/// Per-stage seed streams derived from the top-level seed.
#[derive(Debug, Clone, Copy)]
pub enum Stage {
    Corpus = 0,
    Balance = 1,
    Sft = 2,
    Reward = 3,
    Variance = 4,
    Ppo = 5,
    Dpo = 6,
    Rft = 7,
    EvalRm = 8,
    Gradcheck = 9,
}

const STAGE_STREAM: u64 = 100;

pub fn stage_seed(seed: u64, stage: Stage) -> u64 {
    rng::derive_seed(seed, STAGE_STREAM, stage as u64)
}

pub fn dispatch(cfg: &RunConfig, cmd: &Command) -> Result<(), CliError> {
    let mut ws = Workspace::new(cfg);
    match cmd {
        Command::GenData => gen_data(&mut ws)?,
        Command::PrepareData => prepare_data(&mut ws)?,
        Command::Stats { input } => stats(&mut ws, input)?,
        Command::TrainSft => train_sft(&mut ws)?,
        Command::TrainRm => train_rm(&mut ws)?,
        Command::TrainPpo => train_ppo(&mut ws)?,
        Command::TrainDpo => train_dpo(&mut ws)?,
        Command::TrainRft => train_rft(&mut ws)?,
        Command::EvalWinrate { a, b } => eval_winrate(&mut ws, a, b)?,
        Command::EvalRm => eval_rm(&mut ws)?,
        Command::EvalLength { models } => eval_length(&mut ws, models)?,
        Command::Plot => plot(&mut ws)?,
        Command::PlanParallel { devices, gen_share, workload } => {
            plan_parallel(&mut ws, *devices, *gen_share, *workload)?
        }
        Command::Gradcheck { coords } => gradcheck(&mut ws, *coords)?,
    }
    ws.finish(cmd.name())
}

fn seed(ws: &Workspace, stage: Stage) -> u64 {
    stage_seed(ws.cfg.seed, stage)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn nll_curve(curve: &[NllEpoch]) -> String {
    let mut s = String::from("epoch,loss\n");
    for e in curve {
        let _ = writeln!(s, "{},{}", e.epoch, e.loss);
    }
    s
}

fn gen_data(ws: &mut Workspace) -> Result<(), CliError> {
    let c = gen_synthetic_corpus(&ws.cfg.data.task, &ws.cfg.data.corpus, seed(ws, Stage::Corpus))?;
    ws.write_jsonl("corpus/sft.jsonl", &c.sft)?;
    ws.write_jsonl("corpus/prompts.jsonl", &c.prompts)?;
    ws.write_jsonl("corpus/pairs.jsonl", &c.pairs)?;
    ws.write_jsonl("corpus/eval_prompts.jsonl", &c.eval_prompts)?;
    ws.write_jsonl("corpus/retention.jsonl", &c.retention)?;
    println!(
        "{} sft, {} prompts, {} pairs, {} eval prompts, {} retention",
        c.sft.len(),
        c.prompts.len(),
        c.pairs.len(),
        c.eval_prompts.len(),
        c.retention.len()
    );
    Ok(())
}

/// Held-out pairs are the last `heldout_frac` of the corpus, in order.
pub fn split_heldout(pairs: &[PreferencePair], frac: f64) -> (Vec<PreferencePair>, Vec<PreferencePair>) {
    let n_held = (pairs.len() as f64 * frac).round() as usize;
    let cut = pairs.len() - n_held.min(pairs.len());
    (pairs[..cut].to_vec(), pairs[cut..].to_vec())
}

fn prepare_data(ws: &mut Workspace) -> Result<(), CliError> {
    let d = &ws.cfg.data;
    let rules = RuleSet::default();
    let mut prompts: Vec<PromptRecord> = ws.read_jsonl("corpus/prompts.jsonl")?;
    for p in &mut prompts {
        p.quality = Some(score_prompt_quality(p, &rules));
    }
    let kept = filter_prompts(&prompts, &rules, d.min_len);
    ws.write_jsonl("prepared/prompt_labels.jsonl", &prompts)?;
    ws.write_jsonl("prepared/prompts.jsonl", &kept)?;

    let pairs: Vec<PreferencePair> = ws.read_jsonl("corpus/pairs.jsonl")?;
    let (train, heldout) = split_heldout(&pairs, d.heldout_frac);
    let spec = BucketSpec::new(d.bucket_width)?;
    let before = assign_buckets(&train, spec)?;
    let train = if d.balance { balance_buckets(&before, seed(ws, Stage::Balance)) } else { train };
    let after = assign_buckets(&train, spec)?;
    let mut report = String::from("bucket,long_before,short_before,long_after,short_after\n");
    for (b, pairs) in &before.buckets {
        let (lb, sb) = long_win_counts(pairs);
        let (la, sa) = after.buckets.get(b).map(|p| long_win_counts(p)).unwrap_or((0, 0));
        let _ = writeln!(report, "{b},{lb},{sb},{la},{sa}");
    }
    ws.write_jsonl("prepared/pairs_train.jsonl", &train)?;
    ws.write_jsonl("prepared/pairs_heldout.jsonl", &heldout)?;
    ws.write_text("prepared/buckets.csv", &report)?;
    println!("prompts kept {}/{}; pairs train {} heldout {}", kept.len(), prompts.len(), train.len(), heldout.len());
    Ok(())
}

fn stats(ws: &mut Workspace, input: &str) -> Result<(), CliError> {
    let pairs: Vec<PreferencePair> = ws.read_jsonl(input)?;
    let s = corpus_stats(&pairs)?;
    let csv = s.to_csv();
    ws.write_text("stats/corpus.csv", &csv)?;
    print!("{csv}");
    Ok(())
}

fn sft_data(records: &[SftRecord]) -> Vec<(TokenSeq, TokenSeq)> {
    records.iter().map(SftRecord::pair).collect()
}

fn train_sft(ws: &mut Workspace) -> Result<(), CliError> {
    let records: Vec<SftRecord> = ws.read_jsonl("corpus/sft.jsonl")?;
    let s = ws.cfg.sft;
    let sd = seed(ws, Stage::Sft);
    let init = init_params(ws.cfg.model, sd)?;
    let cfg = NllTrainConfig { lr: s.lr, epochs: s.epochs, batch_size: s.batch_size, seed: sd };
    let (model, curve) = train_nll(&init, &sft_data(&records), &cfg)?;
    ws.save_model("sft", &model.to_checkpoint("sft", sd)?)?;
    ws.write_text("curves/sft.csv", &nll_curve(&curve))?;
    println!("sft loss {} -> {}", curve[0].loss, curve[curve.len() - 1].loss);
    Ok(())
}

pub fn reward_curve_csv(curve: &[RewardEpoch]) -> String {
    let mut s = String::from("epoch,loss,heldout_accuracy\n");
    for e in curve {
        let _ = writeln!(s, "{},{},{}", e.epoch, e.loss, opt(e.heldout_accuracy));
    }
    s
}

fn train_rm(ws: &mut Workspace) -> Result<(), CliError> {
    let sft = ws.load_lm("sft")?;
    let train: Vec<PreferencePair> = ws.read_jsonl("prepared/pairs_train.jsonl")?;
    let heldout: Vec<PreferencePair> = ws.read_jsonl("prepared/pairs_heldout.jsonl")?;
    let sd = seed(ws, Stage::Reward);
    let cfg = RewardTrainConfig { seed: sd, ..ws.cfg.reward };
    let (rm, curve) = train_reward_model(&sft, &train, &heldout, &cfg)?;
    ws.save_model("rm", &rm.to_checkpoint("rm", sd)?)?;
    ws.write_text("curves/rm.csv", &reward_curve_csv(&curve))?;
    let last = curve[curve.len() - 1];
    println!("rm loss {} heldout accuracy {}", last.loss, opt(last.heldout_accuracy));
    Ok(())
}

fn train_ppo(ws: &mut Workspace) -> Result<(), CliError> {
    let sft = ws.load_lm("sft")?;
    let rm = ws.load_head("rm")?;
    let prompts: Vec<PromptRecord> = ws.read_jsonl("prepared/prompts.jsonl")?;
    let retention: Vec<SftRecord> = ws.read_jsonl("corpus/retention.jsonl")?;

    let filtered = variance_filter(&prompts, &sft, &rm, &ws.cfg.data.variance, seed(ws, Stage::Variance))?;
    let mut report = String::from("id,variance,kept\n");
    for v in &filtered.report {
        let _ = writeln!(report, "{},{},{}", v.id, v.variance, v.kept);
    }
    ws.write_text("ppo/variance.csv", &report)?;
    ws.write_jsonl("ppo/kept_prompts.jsonl", &filtered.kept)?;
    println!("variance filter kept {}/{}", filtered.kept.len(), prompts.len());

    let sd = seed(ws, Stage::Ppo);
    let cfg = PpoConfig { seed: sd, ..ws.cfg.ppo };
    let out = ppo_train(&sft, &rm, &filtered.kept, &RetentionSet { pairs: sft_data(&retention) }, &cfg)?;
    ws.save_model("ppo", &out.policy.to_checkpoint("ppo", sd)?)?;
    ws.save_model("critic", &out.critic.to_checkpoint("critic", sd)?)?;
    ws.write_text("ppo/metrics.csv", &metrics_to_csv(&out.metrics))?;
    if let Some(table) = &out.reference {
        ws.write_json("ppo/reference.json", table)?;
    }
    if let (Some(first), Some(last)) = (out.metrics.first(), out.metrics.last()) {
        println!(
            "ppo shaped reward {} -> {}; raw {} -> {}",
            first.mean_shaped_reward, last.mean_shaped_reward, first.mean_raw_reward, last.mean_raw_reward
        );
    }
    Ok(())
}

pub fn dpo_curve_csv(curve: &[DpoEpoch]) -> String {
    let mut s = String::from("epoch,loss,heldout_margin\n");
    for e in curve {
        let _ = writeln!(s, "{},{},{}", e.epoch, e.loss, opt(e.heldout_margin));
    }
    s
}

fn train_dpo(ws: &mut Workspace) -> Result<(), CliError> {
    let sft = ws.load_lm("sft")?;
    let rm = ws.load_head("rm")?;
    let prompts: Vec<PromptRecord> = ws.read_jsonl("prepared/prompts.jsonl")?;
    let sd = seed(ws, Stage::Dpo);
    let cfg = rlhf_core::offline::DpoConfig { seed: sd, ..ws.cfg.dpo };
    let pairs = construct_dpo_pairs(&prompts, &sft, &rm, &cfg)?;
    ws.write_jsonl("dpo/pairs.jsonl", &pairs)?;
    let (train, heldout) = split_heldout(&pairs, ws.cfg.data.heldout_frac);
    let (policy, curve) = dpo_train(&sft, &train, &heldout, &cfg)?;
    ws.save_model("dpo", &policy.to_checkpoint("dpo", sd)?)?;
    ws.write_text("curves/dpo.csv", &dpo_curve_csv(&curve))?;
    let last = curve[curve.len() - 1];
    println!("dpo pairs {}; loss {} heldout margin {}", pairs.len(), last.loss, opt(last.heldout_margin));
    Ok(())
}

fn train_rft(ws: &mut Workspace) -> Result<(), CliError> {
    let sft = ws.load_lm("sft")?;
    let rm = ws.load_head("rm")?;
    let prompts: Vec<PromptRecord> = ws.read_jsonl("prepared/prompts.jsonl")?;
    let r = ws.cfg.rft;
    let sd = seed(ws, Stage::Rft);
    let selected = rft_select(&prompts, &sft, &rm, r.k, r.top_p, r.max_new, sd)?;
    ws.write_jsonl("rft/selected.jsonl", &selected)?;
    let cfg = NllTrainConfig { lr: r.lr, epochs: r.epochs, batch_size: r.batch_size, seed: sd };
    let (policy, curve) = rft_train(&sft, &selected, &cfg)?;
    ws.save_model("rft", &policy.to_checkpoint("rft", sd)?)?;
    ws.write_text("curves/rft.csv", &nll_curve(&curve))?;
    println!("rft selected {}; loss {} -> {}", selected.len(), curve[0].loss, curve[curve.len() - 1].loss);
    Ok(())
}

fn check_name(name: &str) -> Result<(), CliError> {
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        return Err(CliError::Config(format!("bad model name {name:?}")));
    }
    Ok(())
}

fn eval_winrate(ws: &mut Workspace, a: &str, b: &str) -> Result<(), CliError> {
    check_name(a)?;
    check_name(b)?;
    let ma = ws.load_lm(a)?;
    let mb = ws.load_lm(b)?;
    let prompts: Vec<PromptRecord> = ws.read_jsonl("corpus/eval_prompts.jsonl")?;
    let e = ws.cfg.eval;
    let rep = win_rate_table(&ma, &mb, &prompts, &ws.cfg.data.task, e.max_new, e.tie_band)?;
    let csv = rep.to_csv();
    ws.write_text(&format!("eval/winrate_{a}_vs_{b}.csv"), &csv)?;
    ws.write_text(&format!("eval/winrate_{a}_vs_{b}_log.csv"), &rep.log_csv())?;
    print!("{csv}");
    Ok(())
}

#[derive(Serialize)]
struct RmReport {
    heldout_pairs: usize,
    heldout_accuracy: f64,
    length_spearman: f64,
}

fn eval_rm(ws: &mut Workspace) -> Result<(), CliError> {
    let rm = ws.load_head("rm")?;
    let sft = ws.load_lm("sft")?;
    let heldout: Vec<PreferencePair> = ws.read_jsonl("prepared/pairs_heldout.jsonl")?;
    let prompts: Vec<PromptRecord> = ws.read_jsonl("corpus/eval_prompts.jsonl")?;
    if heldout.is_empty() {
        return Err(rlhf_core::Error::Empty("held-out pairs".into()).into());
    }
    let items: Vec<(TokenSeq, TokenSeq)> =
        heldout.iter().flat_map(|p| [(p.prompt.clone(), p.y_w.clone()), (p.prompt.clone(), p.y_l.clone())]).collect();
    let report = RmReport {
        heldout_pairs: heldout.len(),
        heldout_accuracy: eval_pairwise_accuracy(&rm, &heldout)?,
        length_spearman: length_bias_probe(&rm, &items)?,
    };
    ws.write_json("eval/rm.json", &report)?;

    let e = ws.cfg.eval;
    let sd = seed(ws, Stage::EvalRm);
    let mut groups: BTreeMap<String, Vec<(TokenSeq, TokenSeq)>> = BTreeMap::new();
    for p in &prompts {
        let mut r = rng::child(sd, 0, p.id);
        for _ in 0..e.hist_samples {
            let y = sample_top_p(&sft, &p.prompt, ws.cfg.ppo.top_p, e.max_new, &mut r)?;
            groups.entry(p.task_tag.clone()).or_default().push((p.prompt.clone(), y));
        }
    }
    let hist = reward_histogram(&rm, &groups.into_iter().collect::<Vec<_>>(), e.bins)?;
    ws.write_text("eval/reward_hist.csv", &hist.to_csv())?;
    ws.write_text("eval/reward_hist.svg", &hist.to_svg())?;
    println!(
        "heldout accuracy {} on {} pairs; length spearman {}",
        report.heldout_accuracy, report.heldout_pairs, report.length_spearman
    );
    Ok(())
}

fn eval_length(ws: &mut Workspace, models: &str) -> Result<(), CliError> {
    let names: Vec<&str> = models.split(',').map(str::trim).collect();
    let mut loaded = Vec::with_capacity(names.len());
    for n in &names {
        check_name(n)?;
        loaded.push((n.to_string(), ws.load_lm(n)?));
    }
    let prompts: Vec<PromptRecord> = ws.read_jsonl("corpus/eval_prompts.jsonl")?;
    let refs: Vec<_> = loaded.iter().map(|(n, m)| (n.clone(), m)).collect();
    let rows = length_report(&refs, &prompts, ws.cfg.eval.max_new)?;
    let csv = length_csv(&rows);
    ws.write_text("eval/length.csv", &csv)?;
    print!("{csv}");
    Ok(())
}

fn plot(ws: &mut Workspace) -> Result<(), CliError> {
    let metrics = ws.read_text("ppo/metrics.csv")?;
    for (name, svg) in export_curves(&metrics)? {
        ws.write_text(&format!("plots/{name}"), &svg)?;
    }
    Ok(())
}

fn plan_parallel(
    ws: &mut Workspace,
    devices: Option<usize>,
    gen_share: Option<f64>,
    workload: Option<Workload>,
) -> Result<(), CliError> {
    let mut p = ws.cfg.planner;
    if let Some(d) = devices {
        p.devices = d;
    }
    if let Some(g) = gen_share {
        p.cost.gen_share = g;
    }
    if let Some(w) = workload {
        p.workload = match w {
            Workload::Ppo => WorkloadKind::Ppo,
            Workload::SftOrDpo => WorkloadKind::SftOrDpo,
        };
    }
    p.cost.validate()?;
    let rows = plan_table(p.devices, p.workload, &p.cost)?;
    let best = recommend_plan(p.devices, p.workload, &p.cost)?;
    ws.write_text("planner/plans.csv", &plan_table_csv(&rows))?;
    ws.write_json("planner/recommendation.json", &best)?;
    println!("recommended dp={} tp={} pp={}", best.dp, best.tp, best.pp);
    Ok(())
}

fn gradcheck(ws: &mut Workspace, coords: usize) -> Result<(), CliError> {
    let reports = gradient_suite(seed(ws, Stage::Gradcheck), coords)?;
    let mut csv = String::from("loss,coords,max_rel_error,worst_coord,passed\n");
    for r in &reports {
        println!("{:<12} max relative error {:.3e} over {} coords", r.name, r.max_rel_error, r.coords);
        let _ = writeln!(csv, "{},{},{},{},{}", r.name, r.coords, r.max_rel_error, r.worst_coord, r.passed());
    }
    ws.write_text("gradcheck/report.csv", &csv)?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(CliError::GradCheck(format!("{} above {TOLERANCE:e}", failed.join(", "))));
    }
    Ok(())
}
