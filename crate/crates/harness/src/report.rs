//! Aggregate tables from finished runs.
//!
//! A report reads either a training directory (`index.json`, one variant)
//! or a sweep directory (`sweep.json`, one variant per value) and writes,
//! into `<dir>/report/`:
//!
//! - `curve.csv`: trailing-window mean return per grid step, mean and std
//!   over seeds
//! - `episode_length.csv` and `episode_length_by_seed.csv`: mean episode
//!   length inside step windows
//! - `max_return.csv`: best seed-mean evaluation return
//! - `fallback.csv`: share of steps that fell back to the plain policy
//! - `efficiency.csv`: steps until the seed-mean curve reaches a threshold,
//!   relative to the first variant
//! - `summary.txt`
//!
//! Nothing under the run directories is modified, so running the report
//! twice gives identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use crate::config::{ConfigEcho, RunConfig};
use crate::run::{RunIndex, SweepIndex, CONFIG_FILE, INDEX_FILE, METRICS_FILE, SUMMARY_FILE, SWEEP_FILE};

pub const REPORT_DIR: &str = "report";

#[derive(Debug, Clone, Copy, Default)]
pub struct ReportOptions {
    /// Overrides the configured smoothing window.
    pub window: Option<usize>,
    /// Overrides the configured threshold return.
    pub threshold: Option<f64>,
}

/// One finished episode as read back from a log.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct EpisodeLine {
    pub step: u64,
    #[serde(rename = "return")]
    pub ret: f64,
    pub length: usize,
    pub end: String,
    #[serde(default)]
    pub fema: Option<FemaLine>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct FemaLine {
    pub fallback_rate: f64,
    pub influenced_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct EvalLine {
    pub step: u64,
    pub mean_return: f64,
}

/// Episode and evaluation records of one seed.
#[derive(Debug, Clone, Default)]
pub struct SeedLog {
    pub seed: u64,
    pub complete: bool,
    pub episodes: Vec<EpisodeLine>,
    pub evals: Vec<EvalLine>,
}

#[derive(Debug, Deserialize)]
struct Tagged {
    #[serde(rename = "type")]
    kind: String,
}

/// Reads a metrics log. A truncated final line (from an interrupted run)
/// is skipped.
pub fn read_log(path: &Path, seed: u64) -> Result<SeedLog> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut log = SeedLog {
        seed,
        ..SeedLog::default()
    };
    let lines: Vec<&str> = text.lines().collect();
    for (i, line) in lines.iter().enumerate() {
        let tagged: Tagged = match serde_json::from_str(line) {
            Ok(t) => t,
            Err(_) if i + 1 == lines.len() => break,
            Err(e) => return Err(e).with_context(|| format!("{}:{}", path.display(), i + 1)),
        };
        match tagged.kind.as_str() {
            "episode" => log.episodes.push(serde_json::from_str(line)?),
            "eval" => log.evals.push(serde_json::from_str(line)?),
            _ => {}
        }
    }
    Ok(log)
}

#[derive(Debug, Clone)]
pub struct Variant {
    pub label: String,
    pub seeds: Vec<SeedLog>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    pub mean: f64,
    pub std: f64,
    /// Seeds with at least one episode by this step.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LengthRow {
    pub window: [u64; 2],
    /// Seed-mean of per-seed mean episode length; NaN if no seed has an
    /// episode in the window.
    pub mean: f64,
    pub std: f64,
    /// Per-seed means, in seed order; NaN for seeds without episodes.
    pub by_seed: Vec<f64>,
    pub episodes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FallbackPoint {
    pub step: u64,
    pub fallback_rate: f64,
    pub influenced_fraction: f64,
    pub n: usize,
}

/// Everything computed for one variant.
#[derive(Debug, Clone)]
pub struct VariantReport {
    pub label: String,
    pub seeds: Vec<u64>,
    pub curve: Vec<CurvePoint>,
    pub lengths: Vec<LengthRow>,
    pub max_return: f64,
    /// `eval` when evaluation records exist, else `curve`.
    pub max_source: &'static str,
    pub fallback: Vec<FallbackPoint>,
    /// First grid step at which the seed-mean curve (over all seeds)
    /// reaches the threshold.
    pub steps_to_threshold: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub window: usize,
    pub threshold: f64,
    pub steps: u64,
    pub variants: Vec<VariantReport>,
    pub warnings: Vec<String>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn grid(steps: u64, points: usize) -> Vec<u64> {
    let points = points as u64;
    (1..=points).map(|k| steps * k / points).filter(|&s| s > 0).collect::<Vec<_>>()
}

/// Mean return of the last `window` episodes finished by `step`.
pub fn trailing_mean(episodes: &[EpisodeLine], step: u64, window: usize) -> Option<f64> {
    let end = episodes.partition_point(|e| e.step <= step);
    if end == 0 {
        return None;
    }
    let tail = &episodes[end.saturating_sub(window)..end];
    Some(tail.iter().map(|e| e.ret).sum::<f64>() / tail.len() as f64)
}

pub fn curve(seeds: &[SeedLog], grid: &[u64], window: usize) -> Vec<CurvePoint> {
    grid.iter()
        .map(|&step| {
            let vals: Vec<f64> = seeds.iter().filter_map(|s| trailing_mean(&s.episodes, step, window)).collect();
            let (mean, std) = mean_std(&vals);
            CurvePoint {
                step,
                mean,
                std,
                n: vals.len(),
            }
        })
        .collect()
}

/// Episodes whose final step lies in `(start, end]`.
fn in_window(e: &EpisodeLine, w: [u64; 2]) -> bool {
    e.step > w[0] && e.step <= w[1]
}

pub fn lengths(seeds: &[SeedLog], windows: &[[u64; 2]]) -> Vec<LengthRow> {
    windows
        .iter()
        .map(|&w| {
            let mut by_seed = Vec::new();
            let mut episodes = Vec::new();
            for s in seeds {
                let ls: Vec<f64> = s.episodes.iter().filter(|e| in_window(e, w)).map(|e| e.length as f64).collect();
                episodes.push(ls.len());
                by_seed.push(mean_std(&ls).0);
            }
            let present: Vec<f64> = by_seed.iter().copied().filter(|x| !x.is_nan()).collect();
            let (mean, std) = mean_std(&present);
            LengthRow {
                window: w,
                mean,
                std,
                by_seed,
                episodes,
            }
        })
        .collect()
}

/// Best seed-mean evaluation return over eval steps every seed reached.
pub fn max_eval_return(seeds: &[SeedLog]) -> Option<f64> {
    let mut by_step: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for s in seeds {
        for e in &s.evals {
            by_step.entry(e.step).or_default().push(e.mean_return);
        }
    }
    by_step
        .values()
        .filter(|v| v.len() == seeds.len())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .fold(None, |best: Option<f64>, x| Some(best.map_or(x, |b| b.max(x))))
}

pub fn fallback(seeds: &[SeedLog], grid: &[u64]) -> Vec<FallbackPoint> {
    let mut prev = 0;
    grid.iter()
        .map(|&step| {
            let w = [prev, step];
            prev = step;
            let mut rates = Vec::new();
            let mut influenced = Vec::new();
            for s in seeds {
                let mut steps = 0.0;
                let mut fell = 0.0;
                let mut infl = 0.0;
                for e in s.episodes.iter().filter(|e| in_window(e, w)) {
                    if let Some(f) = &e.fema {
                        steps += e.length as f64;
                        fell += f.fallback_rate * e.length as f64;
                        infl += f.influenced_steps as f64;
                    }
                }
                if steps > 0.0 {
                    rates.push(fell / steps);
                    influenced.push(infl / steps);
                }
            }
            FallbackPoint {
                step,
                fallback_rate: mean_std(&rates).0,
                influenced_fraction: mean_std(&influenced).0,
                n: rates.len(),
            }
        })
        .collect()
}

pub fn steps_to_threshold(curve: &[CurvePoint], seeds: usize, threshold: f64) -> Option<u64> {
    curve.iter().find(|p| p.n == seeds && p.mean >= threshold).map(|p| p.step)
}

/// `variant / baseline` steps; unreached counts as infinite.
pub fn efficiency_ratio(variant: Option<u64>, baseline: Option<u64>) -> f64 {
    match (variant, baseline) {
        (Some(v), Some(b)) if b > 0 => v as f64 / b as f64,
        (Some(_), _) => 0.0,
        (None, Some(_)) => f64::INFINITY,
        (None, None) => f64::NAN,
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_variant(dir: &Path, warnings: &mut Vec<String>) -> Result<(Variant, Option<RunConfig>)> {
    let index: RunIndex = read_json(&dir.join(INDEX_FILE))?;
    let mut seeds = Vec::new();
    let mut config = None;
    for entry in &index.runs {
        let sdir = dir.join(&entry.dir);
        let metrics = sdir.join(METRICS_FILE);
        if !metrics.exists() {
            warnings.push(format!("{}: no metrics log, seed skipped", sdir.display()));
            continue;
        }
        let mut log = read_log(&metrics, entry.seed)?;
        log.complete = sdir.join(SUMMARY_FILE).exists();
        if !log.complete {
            warnings.push(format!("{}: run incomplete, report is partial", sdir.display()));
        }
        if config.is_none() {
            if let Ok(text) = fs::read_to_string(sdir.join(CONFIG_FILE)) {
                config = Some(ConfigEcho::parse(&text)?.config);
            }
        }
        seeds.push(log);
    }
    if seeds.is_empty() {
        bail!("{}: no runs with metrics", dir.display());
    }
    Ok((
        Variant {
            label: index.label,
            seeds,
        },
        config,
    ))
}

/// Loads every variant under `dir`.
pub fn load(dir: &Path) -> Result<(Vec<Variant>, RunConfig, Vec<String>)> {
    let mut warnings = Vec::new();
    let mut variants = Vec::new();
    let mut config = None;
    let dirs: Vec<PathBuf> = if dir.join(SWEEP_FILE).exists() {
        let sweep: SweepIndex = read_json(&dir.join(SWEEP_FILE))?;
        sweep.variants.iter().map(|v| dir.join(&v.dir)).collect()
    } else if dir.join(INDEX_FILE).exists() {
        vec![dir.to_path_buf()]
    } else {
        bail!("{} has neither {SWEEP_FILE} nor {INDEX_FILE}", dir.display());
    };
    for d in dirs {
        let (v, c) = load_variant(&d, &mut warnings)?;
        if config.is_none() {
            config = c;
        }
        variants.push(v);
    }
    let config = config.with_context(|| format!("no config echo found under {}", dir.display()))?;
    Ok((variants, config, warnings))
}

/// Default step windows: thirds of the budget.
pub fn thirds(steps: u64) -> Vec<[u64; 2]> {
    vec![[0, steps / 3], [steps / 3, 2 * steps / 3], [2 * steps / 3, steps]]
}

pub fn build(dir: &Path, opts: ReportOptions) -> Result<Report> {
    let (variants, cfg, warnings) = load(dir)?;
    let window = opts.window.unwrap_or(cfg.report.window);
    if window == 0 {
        bail!("window must be positive");
    }
    let steps = cfg.run.steps;
    let points = grid(steps, cfg.report.points);
    let windows = if cfg.report.length_windows.is_empty() {
        thirds(steps)
    } else {
        cfg.report.length_windows.clone()
    };
    let mut out: Vec<VariantReport> = variants
        .iter()
        .map(|v| {
            let curve = curve(&v.seeds, &points, window);
            let (max_return, max_source) = match max_eval_return(&v.seeds) {
                Some(m) => (m, "eval"),
                None => (
                    curve.iter().filter(|p| p.n == v.seeds.len()).map(|p| p.mean).fold(f64::NAN, f64::max),
                    "curve",
                ),
            };
            VariantReport {
                label: v.label.clone(),
                seeds: v.seeds.iter().map(|s| s.seed).collect(),
                lengths: lengths(&v.seeds, &windows),
                fallback: fallback(&v.seeds, &points),
                curve,
                max_return,
                max_source,
                steps_to_threshold: None,
            }
        })
        .collect();
    // Without a configured threshold, use 80% of the way from the worst to
    // the best seed-mean curve value seen across all variants.
    let threshold = match opts.threshold.or(cfg.report.threshold) {
        Some(t) => t,
        None => {
            let vals = out.iter().flat_map(|v| v.curve.iter().filter(|p| p.n > 0).map(|p| p.mean));
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
            lo + 0.8 * (hi - lo)
        }
    };
    for v in &mut out {
        v.steps_to_threshold = steps_to_threshold(&v.curve, v.seeds.len(), threshold);
    }
    Ok(Report {
        window,
        threshold,
        steps,
        variants: out,
        warnings,
    })
}

fn num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{x:.6}")
    }
}

fn steps_str(s: Option<u64>) -> String {
    s.map_or_else(|| "inf".into(), |s| s.to_string())
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

impl Report {
    pub fn variant(&self, label: &str) -> Option<&VariantReport> {
        self.variants.iter().find(|v| v.label == label)
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out)?;
        let mut rows = Vec::new();
        for v in &self.variants {
            for p in &v.curve {
                rows.push(vec![v.label.clone(), p.step.to_string(), num(p.mean), num(p.std), p.n.to_string(), self.window.to_string()]);
            }
        }
        write_csv(&out.join("curve.csv"), &["variant", "step", "mean_return", "std_return", "seeds", "window"], rows)?;

        let mut rows = Vec::new();
        let mut seed_rows = Vec::new();
        for v in &self.variants {
            for l in &v.lengths {
                rows.push(vec![
                    v.label.clone(),
                    l.window[0].to_string(),
                    l.window[1].to_string(),
                    num(l.mean),
                    num(l.std),
                    l.by_seed.iter().filter(|x| !x.is_nan()).count().to_string(),
                ]);
                for ((seed, m), n) in v.seeds.iter().zip(&l.by_seed).zip(&l.episodes) {
                    seed_rows.push(vec![
                        v.label.clone(),
                        seed.to_string(),
                        l.window[0].to_string(),
                        l.window[1].to_string(),
                        num(*m),
                        n.to_string(),
                    ]);
                }
            }
        }
        write_csv(
            &out.join("episode_length.csv"),
            &["variant", "window_start", "window_end", "mean_length", "std_length", "seeds"],
            rows,
        )?;
        write_csv(
            &out.join("episode_length_by_seed.csv"),
            &["variant", "seed", "window_start", "window_end", "mean_length", "episodes"],
            seed_rows,
        )?;

        let rows = self
            .variants
            .iter()
            .map(|v| vec![v.label.clone(), num(v.max_return), v.max_source.to_string()])
            .collect();
        write_csv(&out.join("max_return.csv"), &["variant", "max_average_return", "source"], rows)?;

        let mut rows = Vec::new();
        for v in &self.variants {
            for p in &v.fallback {
                rows.push(vec![v.label.clone(), p.step.to_string(), num(p.fallback_rate), num(p.influenced_fraction), p.n.to_string()]);
            }
        }
        write_csv(&out.join("fallback.csv"), &["variant", "step", "fallback_rate", "influenced_fraction", "seeds"], rows)?;

        let base = self.variants.first().and_then(|v| v.steps_to_threshold);
        let rows = self
            .variants
            .iter()
            .map(|v| {
                vec![
                    v.label.clone(),
                    num(self.threshold),
                    steps_str(v.steps_to_threshold),
                    num(efficiency_ratio(v.steps_to_threshold, base)),
                ]
            })
            .collect();
        write_csv(&out.join("efficiency.csv"), &["variant", "threshold", "steps_to_threshold", "ratio_to_first"], rows)?;

        fs::write(out.join("summary.txt"), self.summary())?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "steps per run: {}", self.steps);
        let _ = writeln!(s, "smoothing window: {} episodes", self.window);
        let _ = writeln!(s, "threshold return: {}", num(self.threshold));
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        for v in &self.variants {
            let _ = writeln!(s, "\n[{}] seeds {:?}", v.label, v.seeds);
            let last = v.curve.last();
            let _ = writeln!(
                s,
                "  final return {} +/- {}",
                num(last.map_or(f64::NAN, |p| p.mean)),
                num(last.map_or(f64::NAN, |p| p.std))
            );
            let _ = writeln!(s, "  max average return {} ({})", num(v.max_return), v.max_source);
            let _ = writeln!(s, "  steps to threshold {}", steps_str(v.steps_to_threshold));
            for l in &v.lengths {
                let _ = writeln!(s, "  mean episode length in ({}, {}]: {}", l.window[0], l.window[1], num(l.mean));
            }
        }
        s
    }
}

/// `report`: builds and writes the report for `dir`.
pub fn cmd_report(dir: &Path, opts: ReportOptions) -> Result<Report> {
    let report = build(dir, opts)?;
    report.write(&dir.join(REPORT_DIR))?;
    Ok(report)
}
