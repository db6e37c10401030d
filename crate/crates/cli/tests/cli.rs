use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};
use std::thread;

fn a2s(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_a2s")).current_dir(dir).args(args).output().expect("run a2s")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = r#"
[corpus]
n_listings = 60
[model]
embed_dim = 8
fusion_hidden = 8
[features]
trigram_buckets = 256
word_buckets = 128
[train]
max_epochs = 2
warmup_steps = 5
batch_size = 16
"#;

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), SMALL).unwrap();
    dir
}

/// Serves `count` HTTP requests with a fixed status and body.
fn mock_server(count: usize, status: u16, body: &'static str) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || {
        for stream in listener.incoming().take(count) {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap() == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
        }
    });
    format!("http://{addr}/v1/completions")
}

#[test]
fn full_pipeline_runs() {
    let dir = workspace();
    let p = dir.path();
    assert_eq!(code(&a2s(p, &["-c", "run.toml", "gen-corpus"])), 0);
    assert!(p.join("data/listings.jsonl").exists());
    let aug = a2s(p, &["-c", "run.toml", "augment", "--strategy", "s1", "--n", "5"]);
    assert_eq!(code(&aug), 0, "{}", String::from_utf8_lossy(&aug.stderr));
    let tr = a2s(p, &["-c", "run.toml", "train", "--strategy", "s1", "--mix", "4:1"]);
    assert_eq!(code(&tr), 0, "{}", String::from_utf8_lossy(&tr.stderr));
    assert!(stdout(&tr).contains("valid_roc_auc"));
    let log = std::fs::read_to_string(p.join("checkpoints/s1.log.tsv")).unwrap();
    assert!(log.starts_with("step\tlr_encoder\tlr_other\tL_relevance\tL_engagement\tL_total"));

    let ev = a2s(
        p,
        &["-c", "run.toml", "eval", "--checkpoint", "checkpoints/s1.ckpt", "--queries", "data/synthetic_s1_queries.jsonl"],
    );
    assert_eq!(code(&ev), 0, "{}", String::from_utf8_lossy(&ev.stderr));
    let tsv = std::fs::read_to_string(p.join("reports/report.tsv")).unwrap();
    assert!(tsv.starts_with("PBC-o\tPBC-r\tRCR\tROC_AUC\tDistinct-2\tMRR\n"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("reports/report.json")).unwrap()).unwrap();
    assert_eq!(json["config"]["embed_dim"], 8);

    let rt = a2s(p, &["-c", "run.toml", "retrieve", "--checkpoint", "checkpoints/s1.ckpt", "--query", "red sofa", "--top-n", "3"]);
    assert_eq!(code(&rt), 0);
    assert_eq!(stdout(&rt).lines().count(), 4);
}

#[test]
fn usage_and_config_errors_exit_1() {
    let dir = workspace();
    let p = dir.path();
    assert_eq!(code(&a2s(p, &["--bogus"])), 1);
    assert_eq!(code(&a2s(p, &["-c", "missing.toml", "gen-corpus"])), 1);
    assert_eq!(code(&a2s(p, &["-c", "run.toml", "--set", "train.unknown=1", "gen-corpus"])), 1);
    assert_eq!(code(&a2s(p, &["-c", "run.toml", "--set", "loss.scale=40", "gen-corpus"])), 1);
    assert_eq!(code(&a2s(p, &["-c", "run.toml", "augment", "--strategy", "s4"])), 1);
    assert_eq!(code(&a2s(p, &["gradcheck", "--corrupt", "no.such.tensor"])), 1);
    std::fs::write(p.join("bad.toml"), "[train]\nbatch_size = \"big\"\n").unwrap();
    assert_eq!(code(&a2s(p, &["-c", "bad.toml", "gen-corpus"])), 1);
}

#[test]
fn data_errors_exit_2() {
    let dir = workspace();
    let p = dir.path();
    // No corpus yet.
    assert_eq!(code(&a2s(p, &["-c", "run.toml", "train"])), 2);
    assert_eq!(code(&a2s(p, &["-c", "run.toml", "gen-corpus"])), 0);
    std::fs::write(p.join("data/engagements.jsonl"), "{not json}\n").unwrap();
    assert_eq!(code(&a2s(p, &["-c", "run.toml", "train"])), 2);
    std::fs::write(p.join("broken.ckpt"), b"garbage").unwrap();
    assert_eq!(code(&a2s(p, &["-c", "run.toml", "retrieve", "--checkpoint", "broken.ckpt", "--query", "x"])), 2);
}

#[test]
fn remote_failures_exit_3_and_success_writes_queries() {
    let dir = workspace();
    let p = dir.path();
    std::fs::write(p.join("run.toml"), SMALL.replace("n_listings = 60", "n_listings = 3\nshown_per_query = 3")).unwrap();
    assert_eq!(code(&a2s(p, &["-c", "run.toml", "gen-corpus"])), 0);

    let failing = mock_server(3 * 2, 503, "{}");
    let o = a2s(
        p,
        &[
            "-c", "run.toml",
            "--set", &format!("backend.remote.endpoint=\"{failing}\""),
            "--set", "backend.remote.max_retries=1",
            "--set", "backend.remote.backoff_base_ms=1",
            "augment", "--strategy", "s1", "--backend", "remote",
        ],
    );
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = std::fs::read_to_string(p.join("data/synthetic_s1_failures.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 3);

    let ok = mock_server(3, 200, r#"{"choices":[{"text":"1. red sofa\n2. used couch\n3. sofa austin"}]}"#);
    let o = a2s(
        p,
        &["-c", "run.toml", "--set", &format!("backend.remote.endpoint=\"{ok}\""), "augment", "--strategy", "s1", "--backend", "remote", "--n", "3"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let queries = std::fs::read_to_string(p.join("data/synthetic_s1_queries.jsonl")).unwrap();
    assert_eq!(queries.lines().count(), 9);
    assert!(queries.contains("used couch"));
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let dir = workspace();
    let ok = a2s(dir.path(), &["gradcheck", "--seeds", "2"]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    let bad = a2s(dir.path(), &["gradcheck", "--seeds", "1", "--corrupt", "doc.attention"]);
    assert_ne!(code(&bad), 0);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("doc.attention"));
}
