use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::sync::OnceLock;

const BIN: &str = env!("CARGO_BIN_EXE_slidecurate");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Vec<u8> {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} exited with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out.stdout
}

/// A small corpus carried through ingest, features and embed, shared by the
/// tests that need one.
struct Corpus {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
}

fn corpus() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().to_path_buf();
        ok(&dir, &[
            "synth", "--out", "c", "--slides", "12", "--diagnoses", "3", "--queries-per-diagnosis", "1",
            "--width", "768", "--height", "768",
        ]);
        ok(&dir, &["ingest", "--manifest", "c/manifest.jsonl", "--out", "tiles.jsonl"]);
        ok(&dir, &["features", "--manifest", "c/manifest.jsonl", "--tiles", "tiles.jsonl", "--out", "f.bin"]);
        ok(&dir, &[
            "embed", "--manifest", "c/manifest.jsonl", "--tiles", "tiles.jsonl", "--exclude-queries",
            "c/queries.jsonl", "--out", "store.bin",
        ]);
        Corpus { _tmp: tmp, dir }
    })
}

fn first_query(dir: &Path) -> String {
    let mut qs: Vec<_> = std::fs::read_dir(dir.join("c/queries")).unwrap().map(|e| e.unwrap().path()).collect();
    qs.sort();
    qs[0].strip_prefix(dir).unwrap().to_str().unwrap().to_string()
}

const SUBCOMMANDS: &[&str] = &[
    "synth", "ingest", "features", "stats", "cluster", "propagate", "merge", "index", "sample", "augment",
    "embed", "query", "eval-retrieval", "concept-map", "probe", "serve",
];

#[test]
fn help_for_every_subcommand() {
    let dir = std::env::temp_dir();
    assert!(run(&dir, &["--help"]).status.success());
    assert!(run(&dir, &["--version"]).status.success());
    for sub in SUBCOMMANDS {
        let out = run(&dir, &[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{sub}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"), "{sub}");
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(run(dir, &["ingest", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(dir, &["query", "--store", "a", "--server", "b", "--roi", "c"]).status.code(), Some(1));
    assert_eq!(run(dir, &["frobnicate"]).status.code(), Some(1));
    let missing = run(dir, &["query", "--store", "missing.bin", "--roi", "missing.json"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error:"));

    std::fs::write(dir.join("junk.bin"), b"NOPE0000").unwrap();
    std::fs::write(dir.join("roi.json"), br#"{"slide_id":"q","roi":[{"x":0,"y":0}]}"#).unwrap();
    let bad = run(dir, &["query", "--store", "junk.bin", "--roi", "roi.json"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("magic"), "{}", String::from_utf8_lossy(&bad.stderr));
}

#[test]
fn curation_pipeline() {
    let dir = &corpus().dir;
    let m = "c/manifest.jsonl";
    ok(dir, &["stats", "--manifest", m, "--tiles", "tiles.jsonl", "--out", "stats.json"]);
    ok(dir, &[
        "cluster", "--features", "f.bin", "--k", "10", "--seed", "1", "--model", "m.bin", "--labels", "raw.csv",
        "--subsample", "50", "--manifest", m, "--groups", "c/groups.toml",
    ]);
    ok(dir, &["propagate", "--labeled-features", "f.bin", "--labels", "raw.csv", "--features", "f.bin", "--out", "prop.csv"]);
    // Propagating labels onto the rows they came from reproduces them.
    let raw = std::fs::read_to_string(dir.join("raw.csv")).unwrap();
    let prop = std::fs::read_to_string(dir.join("prop.csv")).unwrap();
    assert_eq!(raw, prop);
    ok(dir, &["merge", "--labels", "prop.csv", "--map", "c/merge.toml", "--out", "metas.csv"]);
    ok(dir, &[
        "index", "--manifest", m, "--groups", "c/groups.toml", "--tiles", "tiles.jsonl", "--metas", "metas.csv",
        "--features", "f.bin", "--out", "index.json",
    ]);
    let sample = [
        "sample", "--index", "index.json", "--weights", "c/weights.toml", "--n", "20", "--seed", "3",
        "--frequencies", "freq.csv",
    ];
    let a = ok(dir, &sample);
    let b = ok(dir, &sample);
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a.clone()).unwrap().lines().count(), 20);
    assert!(std::fs::read_to_string(dir.join("freq.csv")).unwrap().lines().count() > 1);
    std::fs::write(dir.join("draws.jsonl"), &a).unwrap();
    ok(dir, &[
        "augment", "--manifest", m, "--stats", "stats.json", "--tiles", "draws.jsonl", "--out-dir", "aug",
        "--limit", "3",
    ]);
    let pngs = std::fs::read_dir(dir.join("aug")).unwrap().filter(|e| {
        e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")
    });
    assert_eq!(pngs.count(), 3);
}

#[test]
fn query_is_deterministic_and_eval_runs() {
    let dir = &corpus().dir;
    let q = first_query(dir);
    let args = [
        "query", "--store", "store.bin", "--roi", &q, "--k", "1", "--top", "5", "--manifest", "c/manifest.jsonl",
        "--tiles", "tiles.jsonl",
    ];
    let a = ok(dir, &args);
    let b = ok(dir, &args);
    assert_eq!(a, b);
    let v: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(v["entries"].as_array().unwrap().len(), 5, "{v}");
    assert!(v.get("maps").is_none());

    let csv = ok(dir, &[
        "eval-retrieval", "--queries", "c/queries.jsonl", "--manifest", "c/manifest.jsonl", "--store", "store.bin",
        "--tiles", "tiles.jsonl", "--k-list", "1,5",
    ]);
    let csv = String::from_utf8(csv).unwrap();
    assert!(csv.starts_with("k,accuracy"), "{csv}");
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn concept_map_and_probe() {
    let dir = &corpus().dir;
    let manifest = std::fs::read_to_string(dir.join("c/manifest.jsonl")).unwrap();
    let store_ids: Vec<String> = manifest
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["slide_id"].as_str().unwrap().to_string())
        .collect();
    let queries = std::fs::read_to_string(dir.join("c/queries.jsonl")).unwrap();
    let slide = store_ids.iter().find(|s| !queries.contains(s.as_str())).unwrap();
    ok(dir, &["concept-map", "--store", "store.bin", "--slide", slide, "--out-dir", "cm"]);
    let eig = std::fs::read_to_string(dir.join("cm/eigenvalues.csv")).unwrap();
    assert_eq!(eig.lines().count(), 4);
    assert!(dir.join("cm/component_0.png").exists());

    let diag: std::collections::BTreeMap<String, String> = manifest
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            (v["slide_id"].as_str().unwrap().into(), v["diagnosis"].as_str().unwrap().into())
        })
        .collect();
    let names: Vec<&String> = diag.values().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let mut labels = String::from("row,label\n");
    for (i, line) in std::fs::read_to_string(dir.join("tiles.jsonl")).unwrap().lines().enumerate() {
        let t: serde_json::Value = serde_json::from_str(line).unwrap();
        let d = &diag[t["slide_id"].as_str().unwrap()];
        labels.push_str(&format!("{i},{}\n", names.iter().position(|n| *n == d).unwrap()));
    }
    std::fs::write(dir.join("probe_labels.csv"), labels).unwrap();
    let out = ok(dir, &["probe", "--embeddings", "f.bin", "--labels", "probe_labels.csv", "--lr", "0.01", "--epochs", "5"]);
    let out = String::from_utf8(out).unwrap();
    assert!(out.contains("balanced_accuracy"), "{out}");
    assert!(out.contains("macro_f1"), "{out}");
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn serve_takes_env_and_flags() {
    let dir = &corpus().dir;
    let mut child = Command::new(BIN)
        .current_dir(dir)
        .args(["serve", "--bind", "127.0.0.1:0", "--tiles", "tiles.jsonl"])
        .env("SLIDECURATE_STORE", "store.bin")
        .env("SLIDECURATE_MANIFEST", "c/manifest.jsonl")
        .env("SLIDECURATE_BIND", "256.0.0.1:1")
        .env("RUST_LOG", "info")
        .stderr(Stdio::piped())
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let stderr = child.stderr.take().unwrap();
    let server = Server(child);
    let mut addr = None;
    for line in BufReader::new(stderr).lines() {
        let line = line.unwrap();
        if let Some(rest) = line.split("serving addr=").nth(1) {
            addr = Some(rest.split_whitespace().next().unwrap().to_string());
            break;
        }
    }
    let addr = addr.expect("server did not report its address");
    let url = format!("http://{addr}");

    let q = first_query(dir);
    let remote = ok(dir, &["query", "--server", &url, "--roi", &q, "--k", "1", "--top", "5"]);
    let local = ok(dir, &[
        "query", "--store", "store.bin", "--roi", &q, "--k", "1", "--top", "5", "--manifest", "c/manifest.jsonl",
        "--tiles", "tiles.jsonl",
    ]);
    assert_eq!(remote, local);
    drop(server);
}
