//! Every subcommand, run twice with the same config and seed, once on one
//! worker thread and once on four, writes the same bytes.

use std::fs;
use std::path::Path;
use std::process::Command;

use crate::report;

const CONFIG: &str = r#"{
    "data": {"simulation": {"spec": {
        "cluster_sizes": [10, 10, 10],
        "alphas": [[{"catalog": "a11"}, {"catalog": "a12"}],
                   [{"catalog": "a21"}, {"catalog": "a22"}],
                   [{"catalog": "a31"}, {"catalog": "a32"}]],
        "beta": [1.0, -1.0],
        "psi": [[0.5, 0.25], [0.25, 0.8]]
    }, "seed": 4}},
    "hyper": {"k": 5},
    "basis": {"n_knots": 5},
    "sampler": {"n_chains": 3, "n_sweeps": 40, "seed": 9, "checkpoint_every": 15},
    "diagnostics": {"thin": 2},
    "summary": {"n_grid": 21},
    "replicate": {"n_replicates": 3, "nus": [0.5, 2.0]}
}"#;

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        let name = p.file_name().unwrap().to_string_lossy().to_string();
        if p.is_dir() {
            out.extend(snapshot(&p).into_iter().map(|(n, b)| (format!("{name}/{n}"), b)));
        } else {
            out.push((name, fs::read(&p).unwrap()));
        }
    }
    out
}

/// Runs the command sequence into a fresh `out` and returns every file
/// written. Resume is exercised by stopping the fit halfway.
fn run_all(root: &Path, threads: &str) -> Vec<(String, Vec<u8>)> {
    let out = root.join("out");
    let _ = fs::remove_dir_all(&out);
    let cfg = root.join("config.json");
    let cfg = cfg.to_str().unwrap();
    let o = out.to_str().unwrap();
    let steps: [&[&str]; 7] = [
        &["simulate", "--config", cfg, "--out", &format!("{o}/sim")],
        &["fit", "--config", cfg, "--out", &format!("{o}/fit")],
        &["diagnose", "--out", &format!("{o}/fit")],
        &["summarize", "--out", &format!("{o}/fit")],
        &["fit", "--config", cfg, "--sweeps", "20", "--out", &format!("{o}/resumed")],
        &["fit", "--resume", "--sweeps", "40", "--out", &format!("{o}/resumed")],
        &["replicate", "--config", cfg, "--sweeps", "20", "--out", &format!("{o}/rep")],
    ];
    for args in steps {
        let status = Command::new(env!("CARGO_BIN_EXE_funclust"))
            .args(args)
            .env("FUNCLUST_THREADS", threads)
            .output()
            .expect("binary runs");
        assert!(
            status.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&status.stderr)
        );
    }
    snapshot(&out)
}

fn chain_files(files: &[(String, Vec<u8>)], dir: &str) -> Vec<(String, Vec<u8>)> {
    files
        .iter()
        .filter(|(n, _)| n.starts_with(dir) && (n.ends_with(".draws") || n.ends_with(".ckpt")))
        .map(|(n, b)| (n.trim_start_matches(dir).to_string(), b.clone()))
        .collect()
}

#[test]
fn determinism() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("config.json"), CONFIG).unwrap();
    let first = run_all(tmp.path(), "1");
    let second = run_all(tmp.path(), "1");
    let threaded = run_all(tmp.path(), "4");
    let repeat = first == second;
    let threads = first == threaded;
    let resumed = chain_files(&first, "fit/") == chain_files(&first, "resumed/");
    let n_bytes: usize = first.iter().map(|(_, b)| b.len()).sum();
    report(
        8,
        "determinism",
        repeat && threads && resumed,
        &format!(
            "{} files ({n_bytes} bytes) from simulate/fit/diagnose/summarize/resume/replicate; \
             repeat identical: {repeat}; 1 vs 4 threads identical: {threads}; resumed chains identical: {resumed}",
            first.len()
        ),
    );
}
