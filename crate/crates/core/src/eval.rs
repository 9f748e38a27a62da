//! Oracle-judged comparisons, length and reward-distribution reports, and
//! SVG line plots of training curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::data::{PromptRecord, TaskSpec};
use crate::error::{Error, Result};
use crate::par;
use crate::reward::{score_batch, RewardParams};
use crate::tinylm::{greedy_decode, ModelParams, TokenSeq};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum JudgeVerdict {
    Win,
    Tie,
    Loss,
}

impl JudgeVerdict {
    pub fn flip(self) -> Self {
        match self {
            JudgeVerdict::Win => JudgeVerdict::Loss,
            JudgeVerdict::Loss => JudgeVerdict::Win,
            JudgeVerdict::Tie => JudgeVerdict::Tie,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            JudgeVerdict::Win => "win",
            JudgeVerdict::Tie => "tie",
            JudgeVerdict::Loss => "loss",
        }
    }
}

pub fn verdict_from_gap(gap: f64, tie_band: f64) -> JudgeVerdict {
    if gap > tie_band {
        JudgeVerdict::Win
    } else if gap < -tie_band {
        JudgeVerdict::Loss
    } else {
        JudgeVerdict::Tie
    }
}

/// Verdict for response `a` against `b` under the task oracle.
pub fn pairwise_judge(task: &TaskSpec, prompt: &[u32], a: &[u32], b: &[u32], tie_band: f64) -> Result<JudgeVerdict> {
    if !(tie_band >= 0.0) {
        return Err(Error::InvalidArgument(format!("tie_band must be non-negative, got {tie_band}")));
    }
    Ok(verdict_from_gap(task.oracle(prompt, a) - task.oracle(prompt, b), tie_band))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WinRateRow {
    pub task: String,
    pub n: usize,
    pub win: f64,
    pub tie: f64,
    pub loss: f64,
    pub delta: f64,
}

impl WinRateRow {
    fn from_counts(task: &str, w: usize, t: usize, l: usize) -> Self {
        let n = w + t + l;
        let f = |x: usize| x as f64 / n as f64;
        WinRateRow { task: task.to_string(), n, win: f(w), tie: f(t), loss: f(l), delta: f(w) - f(l) }
    }
}

/// Raw per-prompt judgement, enough to recompute every table number.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptVerdict {
    pub task: String,
    pub prompt_id: u64,
    pub response_a: TokenSeq,
    pub response_b: TokenSeq,
    pub oracle_a: f64,
    pub oracle_b: f64,
    pub verdict: JudgeVerdict,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WinRateReport {
    /// One row per task tag, sorted by tag.
    pub rows: Vec<WinRateRow>,
    pub overall: WinRateRow,
    pub log: Vec<PromptVerdict>,
}

pub const WINRATE_CSV_HEADER: &str = "task,win,tie,loss,delta";

impl WinRateReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{WINRATE_CSV_HEADER}\n");
        for r in self.rows.iter().chain(std::iter::once(&self.overall)) {
            let _ = writeln!(s, "{},{},{},{},{}", r.task, r.win, r.tie, r.loss, r.delta);
        }
        s
    }

    pub fn log_csv(&self) -> String {
        let mut s = String::from("task,prompt_id,response_a,response_b,oracle_a,oracle_b,verdict\n");
        let toks = |t: &TokenSeq| t.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        for v in &self.log {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                v.task,
                v.prompt_id,
                toks(&v.response_a),
                toks(&v.response_b),
                v.oracle_a,
                v.oracle_b,
                v.verdict.as_str()
            );
        }
        s
    }
}

/// Tallies verdicts per task and overall.
pub fn tally(log: &[PromptVerdict]) -> Result<(Vec<WinRateRow>, WinRateRow)> {
    if log.is_empty() {
        return Err(Error::Empty("no judged prompts".into()));
    }
    let mut counts: BTreeMap<&str, [usize; 3]> = BTreeMap::new();
    for v in log {
        let c = counts.entry(&v.task).or_default();
        c[v.verdict as usize] += 1;
    }
    let rows = counts.iter().map(|(k, c)| WinRateRow::from_counts(k, c[0], c[1], c[2])).collect();
    let all = counts.values().fold([0; 3], |a, c| [a[0] + c[0], a[1] + c[1], a[2] + c[2]]);
    Ok((rows, WinRateRow::from_counts("overall", all[0], all[1], all[2])))
}

/// Greedy-decodes both models on every prompt and judges A against B.
pub fn win_rate_table(
    model_a: &ModelParams,
    model_b: &ModelParams,
    prompts: &[PromptRecord],
    task: &TaskSpec,
    max_new: usize,
    tie_band: f64,
) -> Result<WinRateReport> {
    if prompts.is_empty() {
        return Err(Error::Empty("win-rate prompts".into()));
    }
    let log = par::try_map(prompts, |_, p| {
        let a = greedy_decode(model_a, &p.prompt, max_new)?;
        let b = greedy_decode(model_b, &p.prompt, max_new)?;
        let verdict = pairwise_judge(task, &p.prompt, &a, &b, tie_band)?;
        Ok::<_, Error>(PromptVerdict {
            task: p.task_tag.clone(),
            prompt_id: p.id,
            oracle_a: task.oracle(&p.prompt, &a),
            oracle_b: task.oracle(&p.prompt, &b),
            response_a: a,
            response_b: b,
            verdict,
        })
    })?;
    let (rows, overall) = tally(&log)?;
    Ok(WinRateReport { rows, overall, log })
}

/// Mean oracle reward of greedy decodes.
pub fn mean_oracle_reward(
    model: &ModelParams,
    prompts: &[PromptRecord],
    task: &TaskSpec,
    max_new: usize,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::Empty("oracle prompts".into()));
    }
    let r = par::try_map(prompts, |_, p| {
        let y = greedy_decode(model, &p.prompt, max_new)?;
        Ok::<_, Error>(task.oracle(&p.prompt, &y))
    })?;
    Ok(r.iter().sum::<f64>() / r.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LengthRow {
    pub model: String,
    pub mean_len: f64,
    pub pct_vs_base: f64,
}

/// Rows from per-model response lengths; the first model is the base.
pub fn length_rows(named_lengths: &[(String, Vec<usize>)]) -> Result<Vec<LengthRow>> {
    if named_lengths.is_empty() {
        return Err(Error::Empty("length report needs a model".into()));
    }
    let means: Vec<f64> = named_lengths
        .iter()
        .map(|(name, l)| {
            if l.is_empty() {
                Err(Error::Empty(format!("no responses for {name}")))
            } else {
                Ok(l.iter().sum::<usize>() as f64 / l.len() as f64)
            }
        })
        .collect::<Result<_>>()?;
    let base = means[0];
    Ok(named_lengths
        .iter()
        .zip(&means)
        .map(|((name, _), &m)| LengthRow {
            model: name.clone(),
            mean_len: m,
            pct_vs_base: if m == base { 0.0 } else { 100.0 * (m - base) / base },
        })
        .collect())
}

/// Mean greedy response length (EOS excluded) per model on the same prompts.
pub fn length_report(
    models: &[(String, &ModelParams)],
    prompts: &[PromptRecord],
    max_new: usize,
) -> Result<Vec<LengthRow>> {
    let lens = models
        .iter()
        .map(|(name, m)| {
            let l = par::try_map(prompts, |_, p| Ok::<_, Error>(greedy_decode(m, &p.prompt, max_new)?.len()))?;
            Ok((name.clone(), l))
        })
        .collect::<Result<Vec<_>>>()?;
    length_rows(&lens)
}

pub const LENGTH_CSV_HEADER: &str = "model,mean_len,pct_vs_base";

pub fn length_csv(rows: &[LengthRow]) -> String {
    let mut s = format!("{LENGTH_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.model, r.mean_len, r.pct_vs_base);
    }
    s
}

/// Per-task counts over bin edges shared by all tasks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewardHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<(String, Vec<usize>)>,
}

/// Bin of `x` given ascending edges: the number of interior edges `<= x`.
/// The top edge belongs to the last bin.
pub fn bin_index(x: f64, edges: &[f64]) -> usize {
    edges[1..edges.len() - 1].partition_point(|&e| e <= x)
}

pub fn histogram_from_scores(groups: &[(String, Vec<f64>)], bins: usize) -> Result<RewardHistogram> {
    if bins == 0 {
        return Err(Error::InvalidArgument("bins must be positive".into()));
    }
    if groups.is_empty() {
        return Err(Error::Empty("histogram needs a task".into()));
    }
    for (t, s) in groups {
        if s.is_empty() {
            return Err(Error::Empty(format!("task {t} has no responses")));
        }
        if s.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("score in task {t}")));
        }
    }
    let all = groups.iter().flat_map(|g| g.1.iter().copied());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let bins = if hi > lo { bins } else { 1 };
    let edges: Vec<f64> =
        (0..=bins).map(|i| if i == bins { hi } else { lo + (hi - lo) * i as f64 / bins as f64 }).collect();
    let counts = groups
        .iter()
        .map(|(t, s)| {
            let mut c = vec![0; bins];
            for &x in s {
                c[bin_index(x, &edges)] += 1;
            }
            (t.clone(), c)
        })
        .collect();
    Ok(RewardHistogram { edges, counts })
}

/// Scores each task's `(prompt, response)` items and bins them.
pub fn reward_histogram(
    rm: &RewardParams,
    groups: &[(String, Vec<(TokenSeq, TokenSeq)>)],
    bins: usize,
) -> Result<RewardHistogram> {
    let scored =
        groups.iter().map(|(t, items)| Ok((t.clone(), score_batch(rm, items)?))).collect::<Result<Vec<_>>>()?;
    histogram_from_scores(&scored, bins)
}

impl RewardHistogram {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,bin,lo,hi,count\n");
        for (t, c) in &self.counts {
            for (i, n) in c.iter().enumerate() {
                let _ = writeln!(s, "{t},{i},{},{},{n}", self.edges[i], self.edges[i + 1]);
            }
        }
        s
    }

    /// One row of bars per task.
    pub fn to_svg(&self) -> String {
        let rows = self.counts.len();
        let h = 40 + rows * 120;
        let mut s = svg_open(WIDTH, h as f64);
        let bins = self.edges.len() - 1;
        let bw = (WIDTH - LEFT - RIGHT) / bins as f64;
        for (r, (task, c)) in self.counts.iter().enumerate() {
            let base = 30.0 + (r + 1) as f64 * 120.0 - 20.0;
            let max = *c.iter().max().unwrap_or(&1) as f64;
            let _ =
                writeln!(s, r#"<text x="{LEFT}" y="{:.3}" font-size="12">{}</text>"#, base - 88.0, xml_escape(task));
            for (i, &n) in c.iter().enumerate() {
                let bh = if max > 0.0 { 80.0 * n as f64 / max } else { 0.0 };
                let _ = writeln!(
                    s,
                    r##"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="#4a7ab5"/>"##,
                    LEFT + i as f64 * bw,
                    base - bh,
                    bw * 0.9,
                    bh
                );
            }
            let _ = writeln!(
                s,
                r#"<line x1="{LEFT}" y1="{base:.3}" x2="{:.3}" y2="{base:.3}" stroke="black"/>"#,
                WIDTH - RIGHT
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

pub const WIDTH: f64 = 640.0;
pub const HEIGHT: f64 = 400.0;
pub const LEFT: f64 = 60.0;
pub const RIGHT: f64 = 20.0;
pub const TOP: f64 = 30.0;
pub const BOTTOM: f64 = 40.0;

fn svg_open(w: f64, h: f64) -> String {
    format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#) + "\n"
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Single-series line plot. Data span the full plot area: `x` from `LEFT`
/// to `WIDTH - RIGHT`, `y` from `HEIGHT - BOTTOM` up to `TOP`. A constant
/// axis is centred.
pub fn line_plot_svg(title: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let mut s = svg_open(WIDTH, HEIGHT);
    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, HEIGHT - BOTTOM, TOP);
    let _ = writeln!(s, r#"<text x="{LEFT}" y="20" font-size="14">{}</text>"#, xml_escape(title));
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{:.3}" y="{:.3}" font-size="12">iter</text>"#, x1 - 30.0, HEIGHT - 10.0);
    let _ = writeln!(s, r#"<text x="5" y="{:.3}" font-size="12">{}</text>"#, y1 - 10.0 + 20.0, xml_escape(y_label));
    if !points.is_empty() {
        let span = |v: &mut dyn Iterator<Item = f64>| {
            v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)))
        };
        let (xmin, xmax) = span(&mut points.iter().map(|p| p.0));
        let (ymin, ymax) = span(&mut points.iter().map(|p| p.1));
        let map = |v: f64, lo: f64, hi: f64, a: f64, b: f64| {
            if hi > lo {
                a + (v - lo) / (hi - lo) * (b - a)
            } else {
                (a + b) / 2.0
            }
        };
        let _ = writeln!(s, r#"<text x="5" y="{y1}" font-size="10">{ymax}</text>"#);
        let _ = writeln!(s, r#"<text x="5" y="{y0}" font-size="10">{ymin}</text>"#);
        let pts: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{:.3},{:.3}", map(x, xmin, xmax, x0, x1), map(y, ymin, ymax, y0, y1)))
            .collect();
        let _ =
            writeln!(s, r##"<polyline fill="none" stroke="#b5524a" stroke-width="1.5" points="{}"/>"##, pts.join(" "));
    }
    s.push_str("</svg>\n");
    s
}

/// Reward and KL plots from a PPO metrics CSV, as `(file name, svg)`.
pub fn export_curves(metrics_csv: &str) -> Result<Vec<(String, String)>> {
    let mut rd = csv::Reader::from_reader(metrics_csv.as_bytes());
    let headers = rd.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Malformed(format!("metrics file has no `{name}` column")))
    };
    let (ci, cr, ck) = (col("iter")?, col("mean_shaped_reward")?, col("est_kl")?);
    let mut reward = Vec::new();
    let mut kl = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        let num = |c: usize| -> Result<f64> {
            rec.get(c)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::Malformed(format!("metrics row {}: bad value in column {c}", line + 2)))
        };
        let it = num(ci)?;
        reward.push((it, num(cr)?));
        kl.push((it, num(ck)?));
    }
    Ok(vec![
        ("reward.svg".to_string(), line_plot_svg("mean shaped reward", "reward", &reward)),
        ("kl.svg".to_string(), line_plot_svg("estimated KL", "kl", &kl)),
    ])
}
