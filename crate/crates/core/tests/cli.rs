use std::path::{Path, PathBuf};
use std::process::Command;

use ditsim::config::ExperimentConfig;
use ditsim::io::load_trace;
use ditsim::simnet::Topology;
use ditsim::strategies::ParallelConfig;

fn ditsim(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_ditsim")).args(args).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap(), text)
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap().iter().map(str::to_owned).collect()).collect()
}

fn column(path: &Path, name: &str) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|x| x.unwrap()[idx].to_owned()).collect()
}

#[test]
fn verify_passes_and_catches_the_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let (code, text) = ditsim(&["verify", "--out", out]);
    assert_eq!(code, 0, "{text}");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("verify.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);

    let (code, text) = ditsim(&["verify", "--naive-sp", "--out", out]);
    assert_eq!(code, 1, "{text}");
    assert!(text.contains("FAIL kv_consistency"), "{text}");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("verify.json")).unwrap()).unwrap();
    let failed: Vec<&str> = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["passed"] == false)
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert_eq!(failed, ["kv_consistency"]);
}

#[test]
fn config_and_usage_errors_exit_two() {
    assert_eq!(ditsim(&["verify", "--topology", "/definitely/missing.json"]).0, 2);
    let dir = tempfile::tempdir().unwrap();
    let mut c = ExperimentConfig::desk();
    c.topology = Some("absent.json".into());
    let p = dir.path().join("exp.json");
    std::fs::write(&p, c.to_json()).unwrap();
    assert_eq!(ditsim(&["run", "--config", p.to_str().unwrap()]).0, 2);
    assert_eq!(ditsim(&["run", "--strategy", "sp_ulysses", "--degree", "8"]).0, 2);
    assert_eq!(ditsim(&["run", "--strategy", "zigzag"]).0, 2);
    assert_eq!(ditsim(&["sweep", "--degree", ""]).0, 2);
    assert_eq!(ditsim(&["frobnicate"]).0, 2);
}

#[test]
fn serial_run_has_zero_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let (code, text) = ditsim(&["run", "--config", configs().join("desk.json").to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code, 0, "{text}");
    let d = dir.path().join("divergence.csv");
    assert_eq!(csv_rows(&d).len(), 9);
    assert!(column(&d, "max_abs").iter().all(|v| v.parse::<f64>().unwrap() == 0.0));
    for stem in ["bytes", "memory", "summary", "divergence"] {
        assert!(dir.path().join(format!("{stem}.json")).exists(), "{stem}");
    }
}

#[test]
fn pipefusion_run_diverges_only_after_warmup_and_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let args = ["run", "--strategy", "pipefusion", "--degree", "4", "--patches", "4", "--warmup", "1", "--seed", "3"];
        let (code, text) = ditsim(&[&args[..], &["--out", d.path().to_str().unwrap()]].concat());
        assert_eq!(code, 0, "{text}");
    }
    let div: Vec<f64> = column(&a.path().join("divergence.csv"), "max_abs").iter().map(|v| v.parse().unwrap()).collect();
    assert_eq!(&div[..2], &[0.0, 0.0]);
    assert!(div[2..].iter().all(|&x| x > 0.0 && x.is_finite()));
    for f in ["divergence.csv", "bytes.csv", "memory.csv", "summary.csv", "summary.json", "trace.dtns"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    assert_eq!(load_trace(&a.path().join("trace.dtns")).unwrap().len(), 9);
}

#[test]
fn one_cell_sweep_matches_run() {
    let run = tempfile::tempdir().unwrap();
    let sweep = tempfile::tempdir().unwrap();
    let (code, _) = ditsim(&["run", "--strategy", "usp", "--degree", "4", "--out", run.path().to_str().unwrap()]);
    assert_eq!(code, 0);
    let (code, _) = ditsim(&["sweep", "--strategy", "usp", "--degree", "4", "--out", sweep.path().to_str().unwrap()]);
    assert_eq!(code, 0);
    assert_eq!(
        std::fs::read_to_string(run.path().join("summary.csv")).unwrap(),
        std::fs::read_to_string(sweep.path().join("sweep.csv")).unwrap()
    );
}

#[test]
fn sweep_counts_and_ulysses_bytes_halve() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "sweep", "--strategy", "sp_ulysses,pipefusion,cfg_parallel", "--degree", "1,2,4,8", "--patches", "2,4",
        "--tokens", "64,128", "--out", dir.path().to_str().unwrap(),
    ];
    let (code, text) = ditsim(&args);
    assert_eq!(code, 0, "{text}");
    let rows = csv_rows(&dir.path().join("sweep.csv"));
    let bad = csv_rows(&dir.path().join("infeasible.csv"));
    assert_eq!(rows.len() + bad.len(), 3 * 4 * 2 * 2);
    assert!(bad.iter().all(|r| !r[4].is_empty()));
    // ulysses 8 (4 heads); pipefusion 8 (4 layers) and 4 with 2 patches; cfg without guidance
    assert_eq!(bad.len(), 2 * 2 + (2 * 2 + 2) + 4 * 2 * 2);

    let label = column(&dir.path().join("sweep.csv"), "label");
    let tokens = column(&dir.path().join("sweep.csv"), "image_tokens");
    let bytes = column(&dir.path().join("sweep.csv"), "max_device_bytes");
    let ulysses = |deg: usize| -> f64 {
        let l = format!("cfg1_pp1_u{deg}_r1_m1_w0");
        let i = (0..label.len()).find(|&i| label[i] == l && tokens[i] == "64").unwrap();
        bytes[i].parse().unwrap()
    };
    assert_eq!(ulysses(2), 2.0 * ulysses(4));
}

#[test]
fn sweep_is_independent_of_thread_count() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (d, t) in [(&a, "1"), (&b, "4")] {
        let args = ["sweep", "--strategy", "sp_ring,distrifusion", "--degree", "2,4", "--threads", t];
        assert_eq!(ditsim(&[&args[..], &["--out", d.path().to_str().unwrap()]].concat()).0, 0);
    }
    assert_eq!(std::fs::read(a.path().join("sweep.json")).unwrap(), std::fs::read(b.path().join("sweep.json")).unwrap());
}

#[test]
fn plan_ranks_and_recommends() {
    let dir = tempfile::tempdir().unwrap();
    let (code, text) = ditsim(&["plan", "--devices", "1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code, 0);
    assert_eq!(csv_rows(&dir.path().join("plans.csv")).len(), 1);
    assert!(text.contains("recommended: cfg1_pp1_u1_r1_m1_w0"), "{text}");

    let (code, text) = ditsim(&[
        "plan", "--config", configs().join("pixart_two_node.json").to_str().unwrap(), "--out", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{text}");
    assert_eq!(column(&dir.path().join("plans.csv"), "cfg")[0], "2");
    assert_eq!(ditsim(&["plan", "--tokens", "flux-1024-64k", "--devices", "8", "--out", dir.path().to_str().unwrap()]).0, 0);
    assert_eq!(ditsim(&["plan", "--tokens", "huge"]).0, 2);
}

#[test]
fn shipped_configs_load() {
    for name in ["desk.json", "desk_hybrid.json", "pixart_two_node.json"] {
        let c = ExperimentConfig::load(&configs().join(name)).unwrap();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
    }
    let h = ExperimentConfig::load(&configs().join("desk_hybrid.json")).unwrap();
    assert_eq!(h.parallel, ParallelConfig::hybrid(2, 2, 1, 2, 4, 1));
    assert_eq!(Topology::load(&configs().join("two_node_16.json")).unwrap(), Topology::two_node_pcie_ethernet(8));
}
