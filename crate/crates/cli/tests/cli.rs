use std::fs;
use std::io::Write;
use std::process::{Command, Output, Stdio};

use prpo_cli::commands::{analyze_metrics, analyze_records, cmd_fuse, cmd_segment, cmd_train};
use prpo_cli::{CliError, RunConfig, TrajectoryRecord};
use prpo_core::{FusionConfig, Method};
use serde_json::json;

fn prpo(args: &[&str], stdin: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_prpo"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    // a child that rejects its arguments exits without reading stdin
    let _ = child.stdin.take().unwrap().write_all(stdin.as_bytes());
    child.wait_with_output().unwrap()
}

fn record(prompt: &str, group: &str, entropies: &[f64], outcome: f64) -> serde_json::Value {
    json!({
        "prompt_id": prompt,
        "group_id": group,
        "entropies": entropies,
        "gen_start": 0,
        "outcome_reward": outcome,
    })
}

fn jsonl(values: &[serde_json::Value]) -> String {
    values.iter().map(|v| format!("{v}\n")).collect()
}

fn spike_trace() -> Vec<f64> {
    let mut e = vec![0.0; 40];
    e[5] = 3.0;
    e[17] = 2.0;
    e[29] = 1.0;
    e
}

fn segment_str(input: &str, cfg: &FusionConfig) -> Result<String, CliError> {
    let mut out = Vec::new();
    cmd_segment(input.as_bytes(), "<test>", &mut out, cfg)?;
    Ok(String::from_utf8(out).unwrap())
}

fn fuse_str(input: &str, method: Method) -> Result<String, CliError> {
    let mut out = Vec::new();
    cmd_fuse(input.as_bytes(), "<test>", &mut out, method, &FusionConfig::default())?;
    Ok(String::from_utf8(out).unwrap())
}

fn segments_of(output: &str) -> Vec<Vec<(usize, usize)>> {
    output
        .lines()
        .map(|l| serde_json::from_str::<TrajectoryRecord>(l).unwrap().segments.unwrap())
        .collect()
}

#[test]
fn empty_input_gives_empty_output() {
    assert_eq!(segment_str("", &FusionConfig::default()).unwrap(), "");
    let out = prpo(&["segment"], "");
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
}

#[test]
fn short_record_is_one_segment() {
    let input = jsonl(&[record("p", "g", &[0.5, 2.0, 0.1, 1.0], 1.0)]);
    let out = segment_str(&input, &FusionConfig::default()).unwrap();
    assert_eq!(segments_of(&out), vec![vec![(0, 4)]]);
}

#[test]
fn spike_trace_is_cut_before_the_lower_spikes() {
    let cfg = FusionConfig {
        k_spikes: 3,
        ..FusionConfig::default()
    };
    let input = jsonl(&[record("p", "g", &spike_trace(), 1.0)]);
    let out = segment_str(&input, &cfg).unwrap();
    assert_eq!(segments_of(&out), vec![vec![(0, 17), (17, 29), (29, 40)]]);
}

#[test]
fn segmenting_twice_changes_nothing() {
    let mut rng_like = 7u64;
    let mut records = Vec::new();
    for i in 0..20 {
        let n = 5 + i * 7;
        let e: Vec<f64> = (0..n)
            .map(|_| {
                rng_like = rng_like.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (rng_like >> 40) as f64 / (1u64 << 24) as f64
            })
            .collect();
        let mut r = record(&format!("p{i}"), "g", &e, 0.0);
        r["gen_start"] = json!(i % 4);
        r["note"] = json!("kept");
        records.push(r);
    }
    let cfg = FusionConfig {
        min_gap: 3,
        ..FusionConfig::default()
    };
    let once = segment_str(&jsonl(&records), &cfg).unwrap();
    let twice = segment_str(&once, &cfg).unwrap();
    assert_eq!(once, twice);
    assert!(once.lines().all(|l| l.contains("\"note\":\"kept\"")));
}

#[test]
fn bad_records_are_reported_by_line_and_the_rest_written() {
    let input = format!(
        "{}\n\nnot json\n{}",
        record("p", "g", &[1.0, 2.0], 0.0),
        json!({"prompt_id": "q", "group_id": "g", "entropies": [1.0], "gen_start": 3, "outcome_reward": 0.0})
    );
    let mut out = Vec::new();
    let err = cmd_segment(input.as_bytes(), "<test>", &mut out, &FusionConfig::default()).unwrap_err();
    match &err {
        CliError::Records(errs) => assert_eq!(errs.iter().map(|e| e.line).collect::<Vec<_>>(), [3, 4]),
        other => panic!("{other:?}"),
    }
    assert_eq!(err.exit_code(), 1);
    assert_eq!(String::from_utf8(out).unwrap().lines().count(), 1);

    let cli = prpo(&["segment"], &input);
    assert_eq!(cli.status.code(), Some(1));
    let stderr = String::from_utf8(cli.stderr).unwrap();
    assert!(stderr.contains("line 3") && stderr.contains("line 4"), "{stderr}");
}

fn scored(prompt: &str, group: &str, len: usize, outcome: f64, scores: &[f64]) -> serde_json::Value {
    let mut r = record(prompt, group, &vec![0.1; len], outcome);
    r["segment_scores"] = json!(scores);
    r
}

#[test]
fn two_record_group_fuses_to_known_values() {
    let input = jsonl(&[scored("a", "g", 1, 1.0, &[1.0]), scored("b", "g", 1, -1.0, &[0.0])]);
    let out = fuse_str(&input, Method::Prpo).unwrap();
    let rows: Vec<Vec<String>> = out.lines().map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows[0], ["prompt_id", "position", "z", "beta", "AF"]);
    assert_eq!(rows.len(), 3);
    let af_a: f64 = rows[1][4].parse().unwrap();
    let af_b: f64 = rows[2][4].parse().unwrap();
    assert!((af_a - 2.7301).abs() < 1e-4, "{af_a}");
    assert!((af_b + 2.7301).abs() < 1e-4, "{af_b}");
    assert_eq!(rows[1][3], "1");
    assert_eq!(rows[2][3], "-1");
}

#[test]
fn prior_mean_scores_with_equal_outcomes_give_zero() {
    let input = jsonl(&[
        scored("a", "g", 6, 1.0, &[0.5]),
        scored("b", "g", 9, 1.0, &[0.5]),
        scored("c", "g", 3, 1.0, &[0.5]),
    ]);
    let out = fuse_str(&input, Method::Prpo).unwrap();
    assert_eq!(out.lines().count(), 1 + 6 + 9 + 3);
    for line in out.lines().skip(1) {
        let af: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(af, 0.0, "{line}");
    }
}

#[test]
fn fuse_positions_are_absolute_and_rows_follow_input_order() {
    let mut a = scored("a", "g1", 5, 1.0, &[0.9]);
    a["gen_start"] = json!(2);
    let input = jsonl(&[
        a,
        scored("x", "g2", 2, 0.0, &[0.2]),
        scored("b", "g1", 2, 0.0, &[0.1]),
        scored("y", "g2", 2, 1.0, &[0.7]),
    ]);
    let out = fuse_str(&input, Method::ProcessOnly).unwrap();
    let keys: Vec<(String, String)> = out
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            assert_eq!(f[3], "0");
            (f[0].to_string(), f[1].to_string())
        })
        .collect();
    let expected: Vec<(String, String)> = [("a", 2), ("a", 3), ("a", 4), ("x", 0), ("x", 1), ("b", 0), ("b", 1), ("y", 0), ("y", 1)]
        .iter()
        .map(|(p, i)| (p.to_string(), i.to_string()))
        .collect();
    assert_eq!(keys, expected);
}

#[test]
fn fuse_output_is_deterministic() {
    let input = jsonl(&[
        scored("a", "g", 30, 1.0, &[0.9]),
        scored("b", "g", 25, -1.0, &[0.3]),
        scored("c", "h", 12, 0.0, &[0.6]),
        scored("d", "h", 8, 1.0, &[0.05]),
    ]);
    let first = fuse_str(&input, Method::PrmAvgPrpo).unwrap();
    for _ in 0..5 {
        assert_eq!(fuse_str(&input, Method::PrmAvgPrpo).unwrap(), first);
    }
    let cli = prpo(&["fuse", "--method", "prm-avg-prpo"], &input);
    assert!(cli.status.success());
    assert_eq!(String::from_utf8(cli.stdout).unwrap(), first);
}

#[test]
fn singleton_group_is_incomplete() {
    let input = jsonl(&[
        scored("a", "g", 3, 1.0, &[0.5]),
        scored("b", "g", 3, 0.0, &[0.5]),
        scored("c", "lonely", 3, 1.0, &[0.5]),
    ]);
    match fuse_str(&input, Method::Prpo).unwrap_err() {
        CliError::Records(errs) => {
            assert_eq!(errs.len(), 1);
            assert_eq!(errs[0].line, 3);
            assert!(errs[0].message.contains("IncompleteGroup"));
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(prpo(&["fuse"], &input).status.code(), Some(1));
}

#[test]
fn score_count_must_match_segments() {
    let mut b = scored("b", "g", 3, 0.0, &[0.5, 0.5]);
    b["segments"] = json!([[0, 3]]);
    let input = jsonl(&[scored("a", "g", 3, 1.0, &[0.5]), b]);
    match fuse_str(&input, Method::Prpo).unwrap_err() {
        CliError::Records(errs) => {
            assert_eq!(errs[0].line, 2);
            assert!(errs[0].message.contains("ScoreCountMismatch"), "{}", errs[0].message);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn fuse_rejects_methods_without_a_decomposition() {
    let input = jsonl(&[scored("a", "g", 3, 1.0, &[0.5]), scored("b", "g", 3, 0.0, &[0.5])]);
    let err = fuse_str(&input, Method::Grpo).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert_eq!(prpo(&["fuse", "--method", "pure"], &input).status.code(), Some(2));
    assert_eq!(prpo(&["fuse", "--method", "nonsense"], &input).status.code(), Some(2));
}

fn analyze_str(input: &str) -> (String, f64) {
    let mut out = Vec::new();
    let s = analyze_records(input.as_bytes(), "<test>", &mut out, Method::Prpo, &FusionConfig::default()).unwrap();
    (String::from_utf8(out).unwrap(), s.rate())
}

fn with_advantages(prompt: &str, adv: &[f64]) -> serde_json::Value {
    let mut r = record(prompt, "g", &vec![0.2; adv.len()], 0.0);
    r["advantages"] = json!(adv);
    r
}

#[test]
fn all_positive_advantages_never_collapse() {
    let input = jsonl(&[with_advantages("a", &[0.1, 0.2, 3.0]), with_advantages("b", &[1.0; 7])]);
    let (out, rate) = analyze_str(&input);
    assert_eq!(rate, 0.0);
    assert_eq!(out.lines().count(), 2);
    assert!(out.ends_with("# collapse_rate=0 trajectories=2 collapsed=0\n"), "{out}");
}

#[test]
fn negative_run_then_small_positive_collapses() {
    let input = jsonl(&[with_advantages("a", &[-1.0, -1.0, -1.0, 2.0])]);
    let (out, rate) = analyze_str(&input);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "prompt_id,group_id,t_star,a,b,condition_holds,delta_p_sign");
    assert_eq!(lines[1], "a,g,3,1,2,true,negative");
    assert_eq!(lines.len(), 3);
    assert_eq!(rate, 1.0);
}

#[test]
fn analyze_empty_input() {
    let (out, rate) = analyze_str("");
    assert_eq!(out.lines().count(), 2);
    assert_eq!(rate, 0.0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    fs::write(&path, "").unwrap();
    assert!(prpo(&["analyze", path.to_str().unwrap()], "").status.success());
}

#[test]
fn analyze_fuses_scored_groups_without_advantages() {
    let input = jsonl(&[scored("a", "g", 4, 1.0, &[0.0]), scored("b", "g", 4, 0.0, &[1.0])]);
    let (out, rate) = analyze_str(&input);
    // one segment per record gives every token the same AF, so no sign change
    assert_eq!(rate, 0.0, "{out}");
}

fn toy_config(epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::parse(
        r#"
        [train]
        lr = 3.0
        updates_per_epoch = 2
        batch_groups = 4
        early_stop_patience = 0
        [optimizer]
        kind = "sgd"
        [fusion]
        min_gap = 2
        [eval]
        tasks = 50
        "#,
    )
    .unwrap();
    cfg.train.epochs = epochs;
    cfg
}

#[test]
fn zero_epochs_write_only_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let arms = cmd_train(&toy_config(0), dir.path()).unwrap();
    assert_eq!(arms.len(), 1);
    let text = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(text, "epoch,method,accuracy,mean_gen_length,mean_entropy,collapse_rate,loss\n");
}

#[test]
fn training_writes_metrics_and_checkpoints_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    cmd_train(&toy_config(3), dir.path()).unwrap();
    let text = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    for (i, l) in lines[1..].iter().enumerate() {
        assert!(l.starts_with(&format!("{i},prpo,")), "{l}");
    }
    for e in 0..3 {
        let ckpt = dir.path().join("checkpoints").join(format!("epoch-{e:03}.ckpt"));
        let params = prpo_core::PolicyParams::read_checkpoint(fs::File::open(ckpt).unwrap()).unwrap();
        assert!(params.is_finite());
    }

    let mut summary = Vec::new();
    let last = analyze_metrics(text.as_bytes(), &mut summary).unwrap().unwrap();
    let summary = String::from_utf8(summary).unwrap();
    assert!(summary.ends_with(&format!("# collapse_rate={last}\n")));
}

#[test]
fn suite_writes_one_metrics_file_per_split() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config(1);
    cfg.suite = Some(prpo_cli::config::SuiteSection {
        splits: vec![
            prpo_core::SplitStrategy::Entropy,
            prpo_core::SplitStrategy::Uniform,
            prpo_core::SplitStrategy::Random,
        ],
    });
    let arms = cmd_train(&cfg, dir.path()).unwrap();
    assert_eq!(arms.iter().map(|a| a.name.as_str()).collect::<Vec<_>>(), ["entropy", "uniform", "random"]);
    for split in ["entropy", "uniform", "random"] {
        let text = fs::read_to_string(dir.path().join(format!("metrics-{split}.csv"))).unwrap();
        assert_eq!(text.lines().count(), 2);
    }
}

#[test]
fn train_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nlr = -1.0\n").unwrap();
    let out = dir.path().join("out");
    let args = ["train", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()];
    assert_eq!(prpo(&args, "").status.code(), Some(2));

    fs::write(&bad, "[train]\nunknown_key = 1\n").unwrap();
    assert_eq!(prpo(&args, "").status.code(), Some(2));

    let good = dir.path().join("good.toml");
    fs::write(&good, "[train]\nepochs = 1\nupdates_per_epoch = 1\nbatch_groups = 2\n[eval]\ntasks = 10\n").unwrap();
    let ok = prpo(
        &["train", "--config", good.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "4", "--method", "grpo"],
        "",
    );
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let text = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("0,grpo,"));
}

#[test]
fn shipped_configs_parse() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/configs");
    for name in ["default.toml", "collapse.toml", "ablation.toml"] {
        let cfg = RunConfig::load(std::path::Path::new(dir).join(name).as_path()).unwrap();
        cfg.validate().unwrap();
    }
}
