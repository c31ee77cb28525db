use std::fs;
use std::path::Path;
use std::process::Command;

use fema_harness::checkpoint;
use fema_harness::config::{ConfigEcho, RunConfig};
use fema_harness::eval::{eval_checkpoint, write_table};
use fema_harness::report::{self, ReportOptions, REPORT_DIR};
use fema_harness::run::{self, Axis, CONFIG_FILE, INDEX_FILE, METRICS_FILE, SUMMARY_FILE};
use serde_json::Value;

const SMALL: &str = r#"
[run]
name = "small"
seeds = [0]
steps = 1500
eval_every = 500
eval_episodes = 2

[env]
kind = "cliff_corridor"

[agent]
kind = "sac"
fema = true

[sac]
hidden = 16
batch_size = 16
update_after = 200
update_every = 4

[fema]
k = 5
m = 3
epsilon = 0.5

[embedding]
hidden = 8
epochs = 1
max_steps = 20

[report]
points = 10
"#;

fn small() -> RunConfig {
    RunConfig::parse(SMALL).unwrap()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fema"))
}

fn log_lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn same_seed_gives_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let a = run::train_seed(&cfg, 3, &dir.path().join("a")).unwrap();
    let b = run::train_seed(&cfg, 3, &dir.path().join("b")).unwrap();
    assert_eq!(a, b);
    for file in [METRICS_FILE, run::CHECKPOINT_FILE, run::MEMORY_FILE, SUMMARY_FILE] {
        assert_eq!(
            fs::read(dir.path().join("a").join(file)).unwrap(),
            fs::read(dir.path().join("b").join(file)).unwrap(),
            "{file} differs"
        );
    }
}

#[test]
fn every_step_belongs_to_one_episode_line() {
    let dir = tempfile::tempdir().unwrap();
    for workers in [1, 3] {
        let mut cfg = small();
        cfg.run.workers = workers;
        let out = dir.path().join(format!("w{workers}"));
        run::train_seed(&cfg, 1, &out).unwrap();
        let lines = log_lines(&out.join(METRICS_FILE));
        let mut total = 0;
        let mut last = 0;
        for l in &lines {
            let step = l["step"].as_u64().unwrap();
            match l["type"].as_str().unwrap() {
                "episode" | "unfinished" => {
                    assert!(step >= last, "steps go backwards");
                    last = step;
                    total += l["length"].as_u64().unwrap();
                }
                _ => {}
            }
        }
        assert_eq!(total, cfg.run.steps);
    }
}

#[test]
fn config_echo_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    run::train_seed(&cfg, 7, dir.path()).unwrap();
    let echo = ConfigEcho::parse(&fs::read_to_string(dir.path().join(CONFIG_FILE)).unwrap()).unwrap();
    assert_eq!(echo.seed, 7);
    assert_eq!(echo.config, cfg);
    assert_eq!(echo.env_spec, cfg.env.spec());
    assert_eq!(RunConfig::parse(&cfg.to_toml().unwrap()).unwrap(), cfg);
}

#[test]
fn five_seeds_give_five_directories_and_one_index() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.run.seeds = vec![0, 1, 2, 3, 4];
    cfg.run.steps = 300;
    cfg.run.eval_every = 0;
    run::cmd_train(&cfg, dir.path(), 10).unwrap();
    let index: run::RunIndex = serde_json::from_str(&fs::read_to_string(dir.path().join(INDEX_FILE)).unwrap()).unwrap();
    assert_eq!(index.runs.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![10, 11, 12, 13, 14]);
    let mut subdirs: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| {
            let e = e.unwrap();
            e.file_type().unwrap().is_dir().then(|| e.file_name().to_string_lossy().into_owned())
        })
        .collect();
    subdirs.sort();
    assert_eq!(subdirs.len(), 5);
    for r in &index.runs {
        assert!(dir.path().join(&r.dir).join(SUMMARY_FILE).exists());
    }
}

#[test]
fn unused_candidate_count_is_warned_about() {
    let mut cfg = small();
    cfg.agent.fema = false;
    cfg.fema.n_candidates = 10;
    assert!(cfg.warnings().iter().any(|w| w.contains("n_candidates")));
    cfg.fema.n_candidates = 1;
    assert!(cfg.warnings().iter().all(|w| !w.contains("n_candidates")));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    fs::write(&path, SMALL.replace("fema = true", "fema = false").replace("steps = 1500", "steps = 50")).unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_candidates"));
}

#[test]
fn schema_errors_name_the_line_and_field() {
    let err = RunConfig::parse(&SMALL.replace("hidden = 16", "hiden = 16")).unwrap_err();
    let msg = format!("{err:#}");
    assert!(msg.contains("hiden"), "{msg}");
    assert!(msg.contains("line"), "{msg}");
}

#[test]
fn environment_overrides_reach_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    fs::write(&path, SMALL).unwrap();
    let out = bin()
        .env("FEMA__run__steps", "40")
        .env("FEMA__fema__aggregator", "min")
        .args(["train", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let echo = ConfigEcho::parse(&fs::read_to_string(dir.path().join("run/seed_0").join(CONFIG_FILE)).unwrap()).unwrap();
    assert_eq!(echo.config.run.steps, 40);
    assert_eq!(echo.config.fema.aggregator, fema_core::memory::DistanceAggregator::Min);
}

#[test]
fn empty_sweep_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run::cmd_ablate(&small(), Axis::Epsilon, &[], dir.path()).is_err());
    let path = dir.path().join("c.toml");
    fs::write(&path, SMALL).unwrap();
    let out = bin()
        .args(["ablate", "--axis", "epsilon", "--values", "", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("sweep"))
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn eval_is_deterministic_and_checks_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    run::train_seed(&small(), 0, dir.path()).unwrap();
    let ckpt = dir.path().join(run::CHECKPOINT_FILE);
    let a = eval_checkpoint(&ckpt, None, 4, 9).unwrap();
    let b = eval_checkpoint(&ckpt, Some("cliff_corridor"), 4, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 4);

    let empty = eval_checkpoint(&ckpt, None, 0, 9).unwrap();
    assert!(empty.is_empty());
    let mut table = Vec::new();
    write_table(&mut table, &empty).unwrap();
    assert_eq!(String::from_utf8(table).unwrap(), "episode,return,length,end\n");

    let err = eval_checkpoint(&ckpt, Some("tilt_pole"), 2, 0).unwrap_err();
    assert!(format!("{err:#}").contains("tilt_pole"));

    let out = bin()
        .args(["eval", "--episodes", "0", "--ckpt"])
        .arg(&ckpt)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout), "episode,return,length,end\n");
}

#[test]
fn untrained_pole_policy_falls() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.env = fema_core::envs::EnvConfig::TiltPole(fema_core::envs::PoleParams::default());
    let agent = run::make_agent(&cfg, 0).unwrap();
    let path = dir.path().join("untrained.bin");
    fs::write(&path, checkpoint::encode(&cfg, 0, 0, &agent, None).unwrap()).unwrap();
    let eps = eval_checkpoint(&path, Some("tilt_pole"), 21, 0).unwrap();
    let hazards = eps.iter().filter(|e| e.end == fema_core::memory::EndTag::Hazard).count();
    assert!(hazards > eps.len() / 2, "{hazards} of {} fell", eps.len());
}

#[test]
fn report_is_idempotent_and_matches_log_scan() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.run.seeds = vec![0, 1];
    run::cmd_train(&cfg, dir.path(), 0).unwrap();
    report::cmd_report(dir.path(), ReportOptions::default()).unwrap();
    let first = read_dir_bytes(&dir.path().join(REPORT_DIR));
    let rep = report::cmd_report(dir.path(), ReportOptions::default()).unwrap();
    assert_eq!(first, read_dir_bytes(&dir.path().join(REPORT_DIR)));
    assert!(rep.warnings.is_empty());

    // Seed-mean of eval returns at each step both seeds evaluated, then the max.
    let mut by_step: std::collections::BTreeMap<u64, Vec<f64>> = Default::default();
    for seed in [0, 1] {
        for l in log_lines(&run::seed_dir(dir.path(), seed).join(METRICS_FILE)) {
            if l["type"] == "eval" {
                by_step.entry(l["step"].as_u64().unwrap()).or_default().push(l["mean_return"].as_f64().unwrap());
            }
        }
    }
    let oracle = by_step
        .values()
        .filter(|v| v.len() == 2)
        .map(|v| v.iter().sum::<f64>() / 2.0)
        .fold(f64::NEG_INFINITY, f64::max);
    let v = &rep.variants[0];
    assert_eq!(v.max_source, "eval");
    assert!((v.max_return - oracle).abs() < 1e-12);
    assert_eq!(v.lengths.len(), 3);
}

#[test]
fn single_seed_curves_have_zero_spread() {
    let dir = tempfile::tempdir().unwrap();
    run::cmd_train(&small(), dir.path(), 0).unwrap();
    report::cmd_report(dir.path(), ReportOptions::default()).unwrap();
    let mut rdr = csv::Reader::from_path(dir.path().join(REPORT_DIR).join("curve.csv")).unwrap();
    let idx = rdr.headers().unwrap().iter().position(|h| h == "std_return").unwrap();
    let mut rows = 0;
    for r in rdr.records() {
        let r = r.unwrap();
        if r[idx] != *"nan" {
            assert_eq!(r[idx].parse::<f64>().unwrap(), 0.0);
            rows += 1;
        }
    }
    assert!(rows > 0);
}

#[test]
fn sweep_report_has_one_length_row_set_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.run.steps = 600;
    cfg.run.eval_every = 0;
    let values = vec!["0.1".to_string(), "1.0".to_string()];
    let sweep = run::cmd_ablate(&cfg, Axis::Epsilon, &values, dir.path()).unwrap();
    assert_eq!(sweep.variants.len(), 2);
    let rep = report::cmd_report(dir.path(), ReportOptions::default()).unwrap();
    let labels: Vec<&str> = rep.variants.iter().map(|v| v.label.as_str()).collect();
    assert_eq!(labels, vec!["epsilon=0.1", "epsilon=1.0"]);
    let mut rdr = csv::Reader::from_path(dir.path().join(REPORT_DIR).join("episode_length.csv")).unwrap();
    assert_eq!(rdr.records().count(), 2 * 3);
}

#[test]
fn incomplete_runs_are_reported_with_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.run.seeds = vec![0, 1];
    cfg.run.steps = 400;
    run::cmd_train(&cfg, dir.path(), 0).unwrap();
    fs::remove_file(run::seed_dir(dir.path(), 1).join(SUMMARY_FILE)).unwrap();
    let rep = report::cmd_report(dir.path(), ReportOptions::default()).unwrap();
    assert!(!rep.warnings.is_empty());
    assert!(fs::read_to_string(dir.path().join(REPORT_DIR).join("summary.txt")).unwrap().contains("warning"));
}
