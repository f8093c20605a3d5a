use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_quorate");

fn quorate(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn quorate")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited with a code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[track_caller]
fn expect(out: Output, want: i32) -> Output {
    assert_eq!(
        code(&out),
        want,
        "stdout:\n{}\nstderr:\n{}",
        stdout(&out),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn free_ports(n: usize) -> Vec<u16> {
    let listeners: Vec<_> = (0..n).map(|_| TcpListener::bind("127.0.0.1:0").unwrap()).collect();
    listeners.iter().map(|l| l.local_addr().unwrap().port()).collect()
}

fn gen_cluster(dir: &Path, n: usize) {
    let mut args = vec!["gen-keys".to_string(), "--n".into(), n.to_string(), "--out".into(), "keys".into()];
    args.push("--view-timeout-ms".into());
    args.push("1000".into());
    for p in free_ports(n) {
        args.push("--endpoint".into());
        args.push(format!("127.0.0.1:{p}"));
    }
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    expect(quorate(dir, &args), 0);
}

fn edit(path: &Path, f: impl FnOnce(String) -> String) {
    let text = std::fs::read_to_string(path).unwrap();
    std::fs::write(path, f(text)).unwrap();
}

#[test]
fn gen_keys_writes_files_and_refuses_to_overwrite() {
    let tmp = TempDir::new().unwrap();
    let out = expect(quorate(tmp.path(), &["gen-keys", "--n", "4", "--out", "keys"]), 0);
    for name in [
        "node-0.key",
        "node-3.key",
        "owner.key",
        "discovery.key",
        "discovery.pub",
        "discovery.txt",
        "cluster.toml",
    ] {
        assert!(tmp.path().join("keys").join(name).exists(), "{name} missing");
    }
    assert!(stdout(&out).lines().count() >= 7);
    let before = std::fs::read(tmp.path().join("keys/node-0.key")).unwrap();

    expect(quorate(tmp.path(), &["gen-keys", "--n", "4", "--out", "keys"]), 9);
    assert_eq!(std::fs::read(tmp.path().join("keys/node-0.key")).unwrap(), before);

    expect(quorate(tmp.path(), &["gen-keys", "--n", "4", "--out", "keys", "--force"]), 0);
    assert_ne!(std::fs::read(tmp.path().join("keys/node-0.key")).unwrap(), before);
}

#[test]
fn gen_keys_rejects_too_few_nodes() {
    let tmp = TempDir::new().unwrap();
    expect(quorate(tmp.path(), &["gen-keys", "--n", "3", "--f", "1", "--out", "keys"]), 3);
    assert!(!tmp.path().join("keys/cluster.toml").exists());
}

#[test]
fn usage_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    expect(quorate(tmp.path(), &["client", "infer"]), 2);
    expect(quorate(tmp.path(), &["bogus"]), 2);
}

#[test]
fn tampered_or_untrusted_discovery_is_refused() {
    let tmp = TempDir::new().unwrap();
    gen_cluster(tmp.path(), 4);
    let discovery = tmp.path().join("keys/discovery.txt");
    let text = std::fs::read_to_string(&discovery).unwrap();

    // Flip one hex digit in the middle of the signed body.
    let mut bytes = text.trim().as_bytes().to_vec();
    let mid = bytes.len() / 2;
    bytes[mid] = if bytes[mid] == b'0' { b'1' } else { b'0' };
    std::fs::write(&discovery, [&bytes[..], b"\n"].concat()).unwrap();
    expect(quorate(tmp.path(), &["client", "groups", "--discovery", "keys/discovery.txt"]), 5);

    // Intact file, wrong trust anchor.
    std::fs::write(&discovery, &text).unwrap();
    let owner_pub = {
        let key = std::fs::read_to_string(tmp.path().join("keys/owner.key")).unwrap();
        let line = key.lines().find(|l| l.starts_with("public")).unwrap().to_string();
        line.split('"').nth(1).unwrap().to_string()
    };
    std::fs::write(tmp.path().join("other.pub"), owner_pub).unwrap();
    expect(
        quorate(
            tmp.path(),
            &["client", "groups", "--discovery", "keys/discovery.txt", "--trust", "other.pub"],
        ),
        5,
    );

    // No trust anchor at all.
    std::fs::remove_file(tmp.path().join("keys/discovery.pub")).unwrap();
    expect(quorate(tmp.path(), &["client", "groups", "--discovery", "keys/discovery.txt"]), 5);
}

#[test]
fn node_refuses_wrong_key_or_index() {
    let tmp = TempDir::new().unwrap();
    gen_cluster(tmp.path(), 4);
    expect(
        quorate(
            tmp.path(),
            &["node", "--config", "keys/cluster.toml", "--index", "0", "--key", "keys/node-1.key"],
        ),
        4,
    );
    expect(quorate(tmp.path(), &["node", "--config", "keys/cluster.toml", "--index", "7"]), 4);
    expect(
        quorate(
            tmp.path(),
            &["node", "--config", "keys/cluster.toml", "--index", "7", "--key", "keys/node-1.key"],
        ),
        4,
    );
}

#[test]
fn node_config_errors_exit_3() {
    let tmp = TempDir::new().unwrap();
    gen_cluster(tmp.path(), 4);
    let config = tmp.path().join("keys/cluster.toml");
    let original = std::fs::read_to_string(&config).unwrap();

    let out = Command::new(BIN)
        .args(["node", "--config", "keys/cluster.toml", "--index", "0"])
        .current_dir(tmp.path())
        .env("QUORATE_VIEW_TIMEOUT_MS", "soon")
        .output()
        .unwrap();
    expect(out, 3);

    edit(&config, |t| t.replace("transport = \"sockets\"", "transport = \"sim\""));
    assert_ne!(std::fs::read_to_string(&config).unwrap(), original);
    expect(quorate(tmp.path(), &["node", "--config", "keys/cluster.toml", "--index", "0"]), 3);

    // f = 1 needs four nodes; raising f to 2 must be rejected.
    std::fs::write(&config, original.replace("f = 1", "f = 2")).unwrap();
    expect(quorate(tmp.path(), &["node", "--config", "keys/cluster.toml", "--index", "0"]), 3);

    std::fs::write(&config, original + "\nunknown_field = 1\n").unwrap();
    expect(quorate(tmp.path(), &["node", "--config", "keys/cluster.toml", "--index", "0"]), 3);
}

struct Nodes(Vec<Child>);

impl Nodes {
    fn start(dir: &Path, n: usize) -> Self {
        let children = (0..n)
            .map(|i| {
                Command::new(BIN)
                    .args(["node", "--config", "keys/cluster.toml", "--index", &i.to_string()])
                    .current_dir(dir)
                    .env("RUST_LOG", "warn")
                    .stdout(Stdio::piped())
                    .stderr(Stdio::null())
                    .spawn()
                    .unwrap()
            })
            .collect();
        Nodes(children)
    }

    fn terminate(&mut self) -> Vec<i32> {
        for c in &self.0 {
            let status = Command::new("kill").args(["-TERM", &c.id().to_string()]).status().unwrap();
            assert!(status.success());
        }
        let deadline = Instant::now() + Duration::from_secs(20);
        self.0
            .iter_mut()
            .map(|c| loop {
                if let Some(s) = c.try_wait().unwrap() {
                    break s.code().unwrap_or(-1);
                }
                assert!(Instant::now() < deadline, "node did not stop");
                thread::sleep(Duration::from_millis(20));
            })
            .collect()
    }
}

impl Drop for Nodes {
    fn drop(&mut self) {
        for c in &mut self.0 {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

fn wait_until_listening(dir: &Path) {
    let config = std::fs::read_to_string(dir.join("keys/cluster.toml")).unwrap();
    let endpoints: Vec<String> = config
        .lines()
        .filter(|l| l.trim_start().starts_with("endpoint"))
        .map(|l| l.split('"').nth(1).unwrap().to_string())
        .collect();
    assert_eq!(endpoints.len(), 4);
    let deadline = Instant::now() + Duration::from_secs(20);
    for e in endpoints {
        while std::net::TcpStream::connect(&e).is_err() {
            assert!(Instant::now() < deadline, "{e} never came up");
            thread::sleep(Duration::from_millis(20));
        }
    }
}

fn owner(dir: &Path, cmd: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "owner",
        cmd,
        "--discovery",
        "keys/discovery.txt",
        "--key",
        "keys/owner.key",
        "--group",
        "g",
    ];
    args.extend_from_slice(extra);
    quorate(dir, &args)
}

fn client_infer(dir: &Path, out: &str) -> Output {
    quorate(
        dir,
        &[
            "client",
            "infer",
            "--discovery",
            "keys/discovery.txt",
            "--group",
            "g",
            "--input",
            "input.json",
            "--out",
            out,
        ],
    )
}

fn client_verify(dir: &Path, out: &str, results: &str) -> Output {
    let cert = format!("{out}/cert.hex");
    let request = format!("{out}/request.hex");
    quorate(
        dir,
        &[
            "client",
            "verify",
            "--discovery",
            "keys/discovery.txt",
            "--cert",
            &cert,
            "--request",
            &request,
            "--results",
            results,
        ],
    )
}

#[test]
fn four_node_processes_certify_an_inference() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    gen_cluster(dir, 4);
    let mut nodes = Nodes::start(dir, 4);
    wait_until_listening(dir);

    expect(
        quorate(dir, &["owner", "new-model", "--inputs", "3", "--outputs", "2", "--softmax", "--out", "m.model"]),
        0,
    );
    expect(quorate(dir, &["owner", "new-model", "--inputs", "3", "--outputs", "2", "--out", "m.model"]), 9);
    let up = expect(quorate(dir, &["owner", "upload", "--model", "m.model", "--store", "store"]), 0);
    let up: serde_json::Value = serde_json::from_str(&stdout(&up)).unwrap();
    let staged = PathBuf::from(up["url"].as_str().unwrap());
    assert!(staged.exists());
    let staged = staged.to_str().unwrap();

    let def = expect(
        owner(dir, "define-group", &["--model", staged, "--model", staged, "--model", staged, "--model", staged, "--epsilon", "0.05"]),
        0,
    );
    assert!(stdout(&def).contains("applied"));
    expect(owner(dir, "activate", &[]), 0);

    let groups = expect(quorate(dir, &["client", "groups", "--discovery", "keys/discovery.txt"]), 0);
    let groups: serde_json::Value = serde_json::from_str(&stdout(&groups)).unwrap();
    assert_eq!(groups["groups"][0]["group"], "g");
    assert_eq!(groups["groups"][0]["status"], "active");

    std::fs::write(dir.join("input.json"), "[0.1, -0.4, 0.9]").unwrap();
    let infer = expect(client_infer(dir, "out"), 0);
    let infer: serde_json::Value = serde_json::from_str(&stdout(&infer)).unwrap();
    assert_eq!(infer["status"], "certified");
    assert!(infer["results"].as_array().unwrap().len() >= 3);

    let verified = expect(client_verify(dir, "out", "out/results.hex"), 0);
    assert!(stdout(&verified).starts_with("valid"));

    // Change one output digit in the results file.
    let results = std::fs::read_to_string(dir.join("out/results.hex")).unwrap();
    let mut bytes = results.trim().as_bytes().to_vec();
    let i = bytes.len() - 70;
    bytes[i] = if bytes[i] == b'f' { b'e' } else { b'f' };
    std::fs::write(dir.join("tampered.hex"), &bytes).unwrap();
    expect(client_verify(dir, "out", "tampered.hex"), 6);

    expect(owner(dir, "retire", &[]), 0);
    let after = expect(client_infer(dir, "out2"), 7);
    assert!(String::from_utf8_lossy(&after.stderr).contains("GroupRetired"));
    assert!(!dir.join("out2/cert.hex").exists());

    let codes = nodes.terminate();
    assert_eq!(codes, vec![0; 4]);
    for i in 0..4 {
        let state = std::fs::read_to_string(dir.join(format!("keys/state/node-{i}.state"))).unwrap();
        assert!(state.contains("clean_shutdown = true"), "{state}");
        let last: u64 = state
            .lines()
            .find_map(|l| l.strip_prefix("last_ordered = "))
            .unwrap()
            .parse()
            .unwrap();
        assert!(last >= 4, "node {i} ordered only {last}");
    }
}

const DEAD_SCENARIO: &str = r#"
duration_ms = 5000

[faults]
expect_failure = true

[[faults.nodes]]
node = 2
kind = "drop_fraction"
p = 1.0

[[faults.nodes]]
node = 3
kind = "drop_fraction"
p = 1.0

[workload]
requests = 3
"#;

#[test]
fn harness_run_scenarios() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("ok.toml"), "duration_ms = 10000\n[workload]\nrequests = 10\n").unwrap();
    let out = expect(
        quorate(dir, &["harness", "run", "--scenario", "ok.toml", "--trace", "trace.bin", "--expect-live"]),
        0,
    );
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["violations"], 0);
    assert_eq!(report["certified"], 10);
    assert!(std::fs::metadata(dir.join("trace.bin")).unwrap().len() > 0);

    std::fs::write(dir.join("dead.toml"), DEAD_SCENARIO).unwrap();
    expect(quorate(dir, &["harness", "run", "--scenario", "dead.toml"]), 0);
    expect(quorate(dir, &["harness", "run", "--scenario", "dead.toml", "--expect-live"]), 10);

    std::fs::write(dir.join("bad.toml"), "[[faults.nodes]]\nnode = 0\nkind = \"mute_primary\"\n[[faults.nodes]]\nnode = 1\nkind = \"equivocate\"\n").unwrap();
    expect(quorate(dir, &["harness", "run", "--scenario", "bad.toml"]), 3);
}

#[test]
fn harness_run_from_sim_config() {
    let tmp = TempDir::new().unwrap();
    gen_cluster(tmp.path(), 4);
    expect(quorate(tmp.path(), &["harness", "run", "--config", "keys/cluster.toml"]), 3);
    edit(&tmp.path().join("keys/cluster.toml"), |t| {
        t.replace("transport = \"sockets\"", "transport = \"sim\"")
    });
    let out = expect(
        quorate(tmp.path(), &["harness", "run", "--config", "keys/cluster.toml", "--expect-live"]),
        0,
    );
    assert!(stdout(&out).contains("\"violations\": 0"));
}

#[test]
fn harness_bench_and_accuracy() {
    let tmp = TempDir::new().unwrap();
    let out = expect(quorate(tmp.path(), &["harness", "bench", "--requests", "80"]), 0);
    let bench: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(bench["ratio"].as_f64().unwrap() > 1.0);
    assert_eq!(bench["exec_batch_tps"].as_array().unwrap().len(), 3);

    let out = expect(
        quorate(tmp.path(), &["harness", "accuracy", "--group-size", "4", "--faulty", "1", "--trials", "300"]),
        0,
    );
    let acc: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(acc["beyond_excluded"], 1.0);
    assert_eq!(acc["single"].as_array().unwrap().len(), 4);

    expect(
        quorate(tmp.path(), &["harness", "accuracy", "--group-size", "4", "--faulty", "2", "--trials", "10"]),
        3,
    );
}
