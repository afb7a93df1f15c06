use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pcml_cli::config::ExperimentConfig;
use serde_json::Value;

fn pcml(args: &[&str], env_seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pcml"));
    cmd.args(args).env_remove("PCML_SEED");
    if let Some(s) = env_seed {
        cmd.env("PCML_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, json).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn error_record(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {stderr}"))
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("run_manifest.json")).unwrap()).unwrap()
}

const QUICK_UQ: &str = r#"{
    "problem": {"name": "mixer", "n_train": 20, "n_test": 15},
    "train": {"mode": "hard_sequential", "max_epochs": 80},
    "uq": {"enabled": true, "epochs": 20, "band_samples": 200},
    "seeds": [0, 1]
}"#;

#[test]
fn minimal_config_echoes_every_default() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"problem": {"name": "mixer"}, "train": {"mode": "soft", "max_epochs": 30}}"#,
    );
    let out = dir.path().join("out");
    let o = pcml(&["run", "--config", s(&cfg), "--out", s(&out)], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&out);
    let c = &m["config"];
    assert_eq!(c["problem"]["noise_sigma"], 0.01);
    assert_eq!(c["problem"]["n_train"], 40);
    assert_eq!(c["problem"]["n_test"], 100);
    assert_eq!(c["model"]["hidden"], serde_json::json!([8]));
    assert_eq!(c["model"]["topology"], "ml_to_p");
    assert_eq!(c["train"]["learning_rate"], 0.01);
    assert_eq!(c["train"]["lambda_p"], 1.0);
    assert_eq!(c["train"]["al"]["initial_penalty"], 10.0);
    assert_eq!(c["uq"]["enabled"], false);
    assert_eq!(c["uq"]["beta"], 0.95);
    assert_eq!(c["uq"]["band_samples"], 2000);
    assert_eq!(c["seeds"], serde_json::json!([0]));
    assert_eq!(c["output_dir"], s(&out));
    assert_eq!(c["compare"]["pcml"]["train"]["mode"], "hard_sequential");
    assert_eq!(m["seed_source"], "config");
    assert!(m["versions"]["pcml_core"].is_string());
    let files: Vec<&str> = m["files"].as_array().unwrap().iter().map(|f| f.as_str().unwrap()).collect();
    for f in &files {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(files.contains(&"metrics.csv"));
    assert!(files.contains(&"train_report_seed0.csv"));
    // Nothing left behind in the parent.
    let stray: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with(".pcml-staging"))
        .collect();
    assert!(stray.is_empty());
}

#[test]
fn negative_learning_rate_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"problem": {"name": "mixer"}, "train": {"learning_rate": -0.1}}"#,
    );
    let out = dir.path().join("out");
    let o = pcml(&["run", "--config", s(&cfg), "--out", s(&out)], None);
    assert_eq!(o.status.code(), Some(1));
    let rec = error_record(&o);
    assert_eq!(rec["error"], "config");
    assert!(rec["message"].as_str().unwrap().contains("learning_rate"), "{rec}");
    assert!(!out.exists());
}

#[test]
fn unknown_keys_and_bad_json_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"problem": {"name": "mixer"}, "tain": {}}"#);
    let o = pcml(&["run", "--config", s(&cfg), "--out", s(&dir.path().join("o"))], None);
    let rec = error_record(&o);
    assert!(rec["message"].as_str().unwrap().contains("tain"), "{rec}");
    let cfg = write_config(dir.path(), "d.json", "{\n  \"problem\": {\"name\": \"mixer\",}\n}");
    let o = pcml(&["run", "--config", s(&cfg), "--out", s(&dir.path().join("o"))], None);
    let rec = error_record(&o);
    assert!(rec["message"].as_str().unwrap().contains("line 2"), "{rec}");
}

#[test]
fn config_round_trips_through_serialization() {
    let cfg = ExperimentConfig::from_json(QUICK_UQ).unwrap();
    let text = serde_json::to_string(&cfg).unwrap();
    let again = ExperimentConfig::from_json(&text).unwrap();
    assert_eq!(cfg, again);
}

#[test]
fn non_empty_output_requires_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"problem": {"name": "mixer", "n_train": 5, "n_test": 5}}"#,
    );
    let out = dir.path().join("out");
    fs::create_dir(&out).unwrap();
    fs::write(out.join("keep.txt"), "precious").unwrap();
    let o = pcml(&["generate-data", "--config", s(&cfg), "--out", s(&out)], None);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_record(&o)["error"], "output_exists");
    assert_eq!(fs::read_to_string(out.join("keep.txt")).unwrap(), "precious");
    let o = pcml(&["generate-data", "--config", s(&cfg), "--out", s(&out), "--force"], None);
    assert!(o.status.success());
    assert!(!out.join("keep.txt").exists());
    assert!(out.join("train_seed0.csv").exists());
}

fn strip_wall_time(csv: &str) -> String {
    csv.lines()
        .map(|l| {
            let mut cols: Vec<&str> = l.split(',').collect();
            if let Some(i) = csv.lines().next().unwrap().split(',').position(|h| h == "wall_time_secs") {
                cols.remove(i);
            }
            cols.join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn files_with_ext(dir: &Path, ext: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    v.sort();
    v
}

#[test]
fn repeated_runs_are_byte_identical_and_svgs_are_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", QUICK_UQ);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = pcml(&["run", "--config", s(&cfg), "--out", s(out)], None);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let csvs = files_with_ext(&a, "csv");
    assert!(csvs.iter().any(|p| p.ends_with("bands_seed1.csv")));
    for f in &csvs {
        let name = f.file_name().unwrap();
        let (x, y) = (fs::read_to_string(f).unwrap(), fs::read_to_string(b.join(name)).unwrap());
        if name == "metrics.csv" {
            assert_eq!(strip_wall_time(&x), strip_wall_time(&y));
        } else {
            assert_eq!(x, y, "{name:?}");
        }
    }
    for f in files_with_ext(&a, "json").iter().filter(|p| !p.ends_with("run_manifest.json")) {
        assert_eq!(fs::read(f).unwrap(), fs::read(b.join(f.file_name().unwrap())).unwrap());
    }
    let svgs = files_with_ext(&a, "svg");
    assert!(svgs.len() >= 6);
    for f in svgs {
        let text = fs::read_to_string(&f).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap_or_else(|e| panic!("{f:?}: {e}"));
        assert_eq!(doc.root_element().tag_name().name(), "svg");
    }
    let traj = fs::read_to_string(a.join("trajectory_seed0.svg")).unwrap();
    assert!(traj.contains("stroke-dasharray"));
    assert!(traj.contains("F_1 [kg/s]"));
    let bands = fs::read_to_string(a.join("bands_seed0.svg")).unwrap();
    assert!(bands.contains("fill-opacity"));
}

#[test]
fn evaluate_reproduces_run_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", QUICK_UQ);
    let run = dir.path().join("run");
    assert!(pcml(&["run", "--config", s(&cfg), "--out", s(&run), "--seed", "1"], None).status.success());
    let ev = dir.path().join("ev");
    let o = pcml(
        &["evaluate", "--config", s(&cfg), "--out", s(&ev), "--params", s(&run.join("params_seed1.json"))],
        None,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = strip_wall_time(&fs::read_to_string(run.join("metrics.csv")).unwrap());
    let b = strip_wall_time(&fs::read_to_string(ev.join("metrics.csv")).unwrap());
    assert_eq!(a, b);
}

#[test]
fn compare_writes_one_row_per_seed_and_arm() {
    let dir = tempfile::tempdir().unwrap();
    let arm = |name: &str, mode: &str| {
        format!(
            r#"{{"name": "{name}", "model": {{"hidden": [4]}},
                "train": {{"mode": "{mode}", "lambda_p": 0.0, "max_epochs": 40}},
                "vi": {{"epochs": 10, "band_samples": 100}}}}"#
        )
    };
    let json = format!(
        r#"{{"problem": {{"name": "reactor", "n_test": 11}}, "seeds": [0, 1, 2],
            "compare": {{"ml": {}, "pcml": {}}}}}"#,
        arm("ml", "soft"),
        arm("pcml", "hard_sequential")
    );
    let cfg = write_config(dir.path(), "c.json", &json);
    let out = dir.path().join("cmp");
    let o = pcml(&["compare", "--config", s(&cfg), "--out", s(&out)], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut r = csv::Reader::from_path(out.join("comparison.csv")).unwrap();
    let header = r.headers().unwrap().clone();
    assert_eq!(header.get(0), Some("seed"));
    assert_eq!(header.get(header.len() - 1), Some("error"));
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 6);
    for seed in ["0", "1", "2"] {
        let arms: Vec<&str> = rows.iter().filter(|x| &x[0] == seed).map(|x| x.get(1).unwrap()).collect();
        assert_eq!(arms, vec!["ml", "pcml"]);
    }
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("comparison.json")).unwrap()).unwrap();
    assert_eq!(summary["paired_seeds"], 3);
}

#[test]
fn compare_needs_three_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"problem": {"name": "mixer"}, "seeds": [0, 1]}"#);
    let o = pcml(&["compare", "--config", s(&cfg), "--out", s(&dir.path().join("o"))], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(error_record(&o)["message"].as_str().unwrap().contains("3 seeds"));
}

#[test]
fn all_seeds_failing_exits_nonzero_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    // The reactor has no algebraic physics to correct.
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"problem": {"name": "reactor"}, "model": {"topology": "p_to_ml"}, "seeds": [0, 1]}"#,
    );
    let out = dir.path().join("out");
    let o = pcml(&["run", "--config", s(&cfg), "--out", s(&out)], None);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_record(&o)["error"], "all_seeds_failed");
    assert!(!out.exists());
}

#[test]
fn seed_precedence_is_flag_then_env_then_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"problem": {"name": "mixer", "n_train": 4, "n_test": 4}, "seeds": [5, 6]}"#,
    );
    let cases = [
        (None, None, serde_json::json!([5, 6]), "config"),
        (None, Some("9"), serde_json::json!([9]), "env"),
        (Some("3"), Some("9"), serde_json::json!([3]), "flag"),
    ];
    for (i, (flag, env, seeds, source)) in cases.into_iter().enumerate() {
        let out = dir.path().join(format!("o{i}"));
        let mut args = vec!["generate-data", "--config", s(&cfg), "--out", s(&out)];
        if let Some(f) = flag {
            args.extend(["--seed", f]);
        }
        let o = pcml(&args, env);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let m = manifest(&out);
        assert_eq!(m["seeds"], seeds);
        assert_eq!(m["seed_source"], source);
    }
    let o = pcml(&["generate-data", "--config", s(&cfg), "--out", s(&dir.path().join("x"))], Some("abc"));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn loss_plot_uses_log_scale_only_for_positive_values() {
    let dir = tempfile::tempdir().unwrap();
    let pos = write_config(dir.path(), "pos.csv", "epoch,total_loss\n0,10\n1,1\n2,0.1\n");
    let zero = write_config(dir.path(), "zero.csv", "epoch,total_loss\n0,1\n1,0\n");
    let (a, b) = (dir.path().join("a.svg"), dir.path().join("b.svg"));
    assert!(pcml(&["plot", "--csv", s(&pos), "--kind", "loss", "--out", s(&a)], None).status.success());
    assert!(pcml(&["plot", "--csv", s(&zero), "--kind", "loss", "--out", s(&b)], None).status.success());
    let (ta, tb) = (fs::read_to_string(&a).unwrap(), fs::read_to_string(&b).unwrap());
    assert!(ta.contains("(log scale)"));
    assert!(!tb.contains("(log scale)"));
    for t in [&ta, &tb] {
        roxmltree::Document::parse(t).unwrap();
    }
}

#[test]
fn degenerate_bands_render_as_valid_svg() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_config(
        dir.path(),
        "b.csv",
        "input_0,output,mean,lower,upper\n0,0,1,1,1\n1,0,2,2,2\n2,0,1.5,1.5,1.5\n",
    );
    let out = dir.path().join("b.svg");
    let o = pcml(&["plot", "--csv", s(&csv), "--kind", "bands", "--out", s(&out), "--x-label", "t [h]"], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    roxmltree::Document::parse(&text).unwrap();
    assert!(text.contains("t [h]"));
}

#[test]
fn plot_names_the_missing_column() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_config(dir.path(), "t.csv", "input_0,output,mean,lower\n0,0,1,1\n");
    let out = dir.path().join("t.svg");
    let o = pcml(&["plot", "--csv", s(&csv), "--kind", "bands", "--out", s(&out)], None);
    assert_eq!(o.status.code(), Some(1));
    let rec = error_record(&o);
    assert_eq!(rec["error"], "plot");
    assert!(rec["message"].as_str().unwrap().contains("missing column 'upper'"), "{rec}");
    assert!(!out.exists());
}
