use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use notewise_cli::provenance;

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn notewise(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_notewise"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(config: &Path, out: &Path, args: &[&str]) {
    let o = notewise(config, out, args);
    assert!(
        o.status.success(),
        "notewise {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .collect::<Result<_, _>>()
        .unwrap()
}

#[test]
fn smoke_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = smoke_config();
    for cmd in [
        &["gen-corpus"][..],
        &["build-cohort"],
        &["pretrain"],
        &["train", "ft"],
        &["train", "st"],
        &["train", "wem"],
        &["evaluate", "--model", "ft"],
        &["evaluate", "--model", "st"],
        &["evaluate", "--model", "wem"],
        &["sweep-imbalance", "--model", "ft"],
        &["sweep-fewshot"],
        &["report"],
    ] {
        ok(&config, &out, cmd);
    }

    // Three rules × two levels.
    assert_eq!(csv_rows(&out.join("metrics_st.csv")).len(), 6);

    let mut r = csv::Reader::from_path(out.join("imbalance_ft.csv")).unwrap();
    let header = r.headers().unwrap().clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let rows: Vec<_> = r.records().map(Result::unwrap).collect();
    let random: Vec<_> = rows.iter().filter(|r| &r[col("model")] == "random").collect();
    assert_eq!(random.len(), 2, "one analytic row per dataset");
    for row in random {
        let (pos, neg): (f64, f64) = (row[col("n_pos")].parse().unwrap(), row[col("n_neg")].parse().unwrap());
        assert_eq!(&row[col("auroc")], "0.500000");
        assert_eq!(row[col("auprc")].parse::<f64>().unwrap(), (pos / (pos + neg) * 1e6).round() / 1e6);
        assert_eq!(&row[col("brier_x100")], "");
    }

    // Every output row carries the run's hash and seed.
    let manifests = provenance::read_all(&out).unwrap();
    assert_eq!(manifests.len(), 12);
    let hash = manifests[0].config_hash.clone();
    for m in &manifests {
        assert_eq!(m.config_hash, hash);
        for (rel, digest) in &m.outputs {
            assert_eq!(&provenance::file_sha256(&out.join(rel)).unwrap(), digest, "{rel}");
        }
    }
    let report = csv_rows(&out.join("report.csv"));
    assert!(report.len() > 20);
    assert!(report.iter().all(|r| r.iter().any(|f| f == hash)));

    // The parallel sweep writes the same bytes.
    let sequential = std::fs::read(out.join("fewshot.csv")).unwrap();
    ok(&config, &out, &["--parallel", "sweep-fewshot"]);
    assert_eq!(std::fs::read(out.join("fewshot.csv")).unwrap(), sequential);

    // A different seed no longer matches the run's artifacts.
    let o = notewise(&config, &out, &["--seed", "99", "report"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("refusing to join"));
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[generator]\nn_patient = 3\n").unwrap();
    assert_eq!(notewise(&bad, &out, &["gen-corpus"]).status.code(), Some(2));

    let config = smoke_config();
    let o = notewise(&config, &out, &["build-cohort"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("run `notewise gen-corpus` first"));

    ok(&config, &out, &["gen-corpus"]);
    ok(&config, &out, &["build-cohort"]);
    let greedy = dir.path().join("greedy.toml");
    let text = std::fs::read_to_string(&config).unwrap().replace("ratios = [2]", "ratios = [500]");
    std::fs::write(&greedy, text).unwrap();
    let o = notewise(&greedy, &out, &["sweep-imbalance"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
