//! End-to-end driver checks: synth -> sweep -> compare -> curves on a small
//! configuration, exit-code classes, atomicity of outputs, and round-trips
//! of every emitted file through its own reader.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn qrt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qrt")).args(args).output().expect("binary runs")
}

fn tempdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("qrt-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, out_rel: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    let text = format!(
        r#"
[experiment]
name = "cli-smoke"
output_dir = "{}"
seeds = [0, 1]

[model]
hidden_layers = 1
hidden_width = 8
mixture_k = 1

[[dataset]]
name = "lin"
synth = "linear-gaussian"
n = 220
gen_seed = 3

[[dataset]]
name = "bim"
synth = "bimodal"
n = 220
gen_seed = 4

[[method]]
preset = "BASE"
max_epochs = 4
batch_size = 64

[[method]]
preset = "QRTC"
max_epochs = 4
batch_size = 64
bandwidth = 0.1
"#,
        dir.join(out_rel).display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn full_pipeline_sweep_compare_curves() {
    let dir = tempdir("pipeline");
    let config = write_config(&dir, "results");
    let out = qrt(&["sweep", "--config", config.to_str().unwrap(), "--jobs", "2"]);
    assert!(out.status.success(), "sweep failed: {}", String::from_utf8_lossy(&out.stderr));
    let results = dir.join("results");
    let mut json_files: Vec<_> = std::fs::read_dir(&results)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .collect();
    json_files.sort();
    assert_eq!(json_files.len(), 8, "2 datasets x 2 methods x 2 seeds");
    assert!(json_files.iter().all(|p| p.extension().unwrap() == "json"));
    // no leftover temp files from the atomic writes
    assert!(json_files
        .iter()
        .all(|p| !p.file_name().unwrap().to_string_lossy().contains(".tmp-")));

    let cmp_dir = dir.join("cmp");
    let out = qrt(&[
        "compare",
        "--results",
        results.to_str().unwrap(),
        "--metric",
        "nll",
        "--baseline",
        "BASE",
        "--out",
        cmp_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "compare failed: {}", String::from_utf8_lossy(&out.stderr));
    let report_text = std::fs::read_to_string(cmp_dir.join("report.json")).unwrap();
    let report: serde_json::Value = serde_json::from_str(&report_text).unwrap();
    assert_eq!(report["baseline"], "BASE");
    assert_eq!(report["methods"].as_array().unwrap().len(), 2);
    for table in ["cohens_d.csv", "ranks.csv", "pairwise.csv", "letter_values.csv"] {
        assert!(cmp_dir.join(table).exists(), "missing {table}");
    }
    // JSON round trip: parse -> serialize -> byte equality
    let reparsed = serde_json::to_string_pretty(&report).unwrap();
    let report2: serde_json::Value = serde_json::from_str(&reparsed).unwrap();
    assert_eq!(report, report2);

    let curves = dir.join("curves.csv");
    let out = qrt(&[
        "curves",
        "--results",
        results.to_str().unwrap(),
        "--dataset",
        "lin",
        "--methods",
        "BASE,QRTC",
        "--out",
        curves.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "curves failed: {}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&curves).unwrap();
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    // 4 runs on "lin": each contributes epochs * 3 metric rows + 1 marker
    let per_run = 4 * 3 + 1;
    assert_eq!(rows.len(), 4 * per_run);
    // marker rows equal the argmin of the val_nll column per (method, seed)
    let header = reader.headers().unwrap().clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let (c_method, c_seed, c_epoch, c_metric, c_value) =
        (col("method"), col("seed"), col("epoch"), col("metric"), col("value"));
    for method in ["BASE", "QRTC"] {
        for seed in ["0", "1"] {
            let vals: Vec<(usize, f64)> = rows
                .iter()
                .filter(|r| {
                    &r[c_method] == method && &r[c_seed] == seed && &r[c_metric] == "val_nll"
                })
                .map(|r| (r[c_epoch].parse().unwrap(), r[c_value].parse().unwrap()))
                .collect();
            let best = vals
                .iter()
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .map(|&(e, _)| e)
                .unwrap();
            let marker: usize = rows
                .iter()
                .find(|r| {
                    &r[c_method] == method
                        && &r[c_seed] == seed
                        && &r[c_metric] == "selected_epoch"
                })
                .map(|r| r[c_epoch].parse().unwrap())
                .unwrap();
            assert_eq!(marker, best, "{method} seed {seed}");
        }
    }
    // CSV round trip: parse -> serialize -> byte equality
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let mut writer = csv::WriterBuilder::new().from_writer(Vec::new());
    writer.write_record(reader.headers().unwrap()).unwrap();
    for rec in reader.records() {
        writer.write_record(&rec.unwrap()).unwrap();
    }
    let rewritten = String::from_utf8(writer.into_inner().unwrap()).unwrap();
    assert_eq!(text, rewritten);

    let _ = std::fs::remove_dir_all(dir);
}

#[test]
fn train_reruns_are_byte_identical_in_the_metrics_block() {
    let dir = tempdir("determinism");
    let config = write_config(&dir, "results-det");
    let run = || {
        let out = qrt(&[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--method",
            "QRTC",
            "--dataset",
            "lin",
            "--seed",
            "0",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let path = String::from_utf8(out.stdout).unwrap().trim().to_string();
        let text = std::fs::read_to_string(path).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        (v["base_metrics"].to_string(), v["recalibrated_metrics"].to_string())
    };
    let first = run();
    let second = run();
    assert_eq!(first, second);
    let _ = std::fs::remove_dir_all(dir);
}

#[test]
fn exit_codes_distinguish_failure_classes() {
    let dir = tempdir("exitcodes");

    // config class: malformed TOML
    let bad_cfg = dir.join("bad.toml");
    std::fs::write(&bad_cfg, "not really toml [").unwrap();
    let out = qrt(&["sweep", "--config", bad_cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    // config class: unknown preset
    let cfg = dir.join("unknown.toml");
    std::fs::write(
        &cfg,
        format!(
            r#"
[experiment]
name = "x"
output_dir = "{}"
[[dataset]]
name = "lin"
synth = "linear-gaussian"
n = 100
[[method]]
preset = "WHAT"
"#,
            dir.join("out").display()
        ),
    )
    .unwrap();
    let out = qrt(&["sweep", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    // data class: missing results directory
    let out = qrt(&[
        "compare",
        "--results",
        dir.join("nope").to_str().unwrap(),
        "--out",
        dir.join("cmp").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));

    // data class: malformed table row is named
    let bad_csv = dir.join("bad.csv");
    std::fs::write(&bad_csv, "1.0,2.0\n3.0,oops\n").unwrap();
    let cfg = dir.join("badfile.toml");
    std::fs::write(
        &cfg,
        format!(
            r#"
[experiment]
name = "x"
output_dir = "{}"
seeds = [0]
[[dataset]]
name = "bad"
path = "bad.csv"
[[method]]
preset = "BASE"
max_epochs = 1
"#,
            dir.join("out").display()
        ),
    )
    .unwrap();
    let out = qrt(&["sweep", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[2]"), "names the offending row");

    let _ = std::fs::remove_dir_all(dir);
}

#[test]
fn compare_names_missing_cells() {
    let dir = tempdir("ragged");
    let config = write_config(&dir, "results-ragged");
    for (ds, method, seed) in
        [("lin", "BASE", "0"), ("lin", "QRTC", "0"), ("bim", "BASE", "0")]
    {
        let out = qrt(&[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--method",
            method,
            "--dataset",
            ds,
            "--seed",
            seed,
        ]);
        assert!(out.status.success());
    }
    let out = qrt(&[
        "compare",
        "--results",
        dir.join("results-ragged").to_str().unwrap(),
        "--out",
        dir.join("cmp").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("(bim, QRTC)"), "stderr: {stderr}");
    let _ = std::fs::remove_dir_all(dir);
}

#[test]
fn synth_generates_loadable_tables() {
    let dir = tempdir("synth");
    let out_path = dir.join("bimodal.csv");
    let out = qrt(&[
        "synth",
        "--kind",
        "bimodal",
        "--n",
        "120",
        "--seed",
        "5",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let loaded =
        qrt::data::load_table(&out_path, &qrt::data::LoadOptions::default()).unwrap();
    assert_eq!(loaded.n(), 120);
    assert_eq!(loaded.x.cols(), 1);

    // unknown kind is a config error
    let out = qrt(&["synth", "--kind", "nope", "--n", "10", "--out", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));
    let _ = std::fs::remove_dir_all(dir);
}
