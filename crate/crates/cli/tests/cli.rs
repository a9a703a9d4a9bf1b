use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tpgo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpgo"))
        .args(args)
        .env_remove("TPGO_API_BASE")
        .env_remove("TPGO_API_KEY")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn optimize_fixture(dir: &Path, name: &str, extra: &[&str]) -> Output {
    let archive = dir.join(name);
    let mut args = vec!["optimize", "--fixture", name, "--archive", s(&archive)];
    args.extend_from_slice(extra);
    tpgo(&args)
}

#[test]
fn optimize_convergence_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = optimize_fixture(dir.path(), "convergence", &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("final success: 10/10"), "{text}");
    assert!(text.contains("success_before"));
    let archive = dir.path().join("convergence");
    for file in [
        "run_meta.json",
        "final_graph.json",
        "report.json",
        "memory.jsonl",
        "iter_1/clusters.json",
    ] {
        assert!(archive.join(file).exists(), "{file}");
    }
}

#[test]
fn max_iterations_one_writes_one_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let out = optimize_fixture(dir.path(), "convergence", &["--max-iterations", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let iters: Vec<_> = fs::read_dir(dir.path().join("convergence"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("iter_"))
        .collect();
    assert_eq!(iters.len(), 1);
}

#[test]
fn existing_archive_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        optimize_fixture(dir.path(), "convergence", &["--max-iterations", "1"])
            .status
            .code(),
        Some(0)
    );
    assert_eq!(
        optimize_fixture(dir.path(), "convergence", &[])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn unwritable_archive_is_a_storage_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let archive = blocker.join("run");
    let out = tpgo(&[
        "optimize",
        "--fixture",
        "convergence",
        "--archive",
        s(&archive),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn replay_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        optimize_fixture(dir.path(), "convergence", &[])
            .status
            .code(),
        Some(0)
    );
    let archive = dir.path().join("convergence");
    let ok = tpgo(&["replay", s(&archive)]);
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));

    let proposals = archive.join("iter_1/proposals.json");
    let text = fs::read_to_string(&proposals).unwrap();
    fs::write(
        &proposals,
        text.replace("Use the search tool", "Use the lookup tool"),
    )
    .unwrap();
    let bad = tpgo(&["replay", s(&archive)]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("iteration 1"), "{}", stderr(&bad));
}

#[test]
fn config_without_endpoint_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(
        &config,
        "graph = \"g.json\"\nsuite = \"t.jsonl\"\narchive_dir = \"out\"\n[runner]\ncommand = [\"true\"]\n",
    )
    .unwrap();
    let out = tpgo(&["optimize", "--config", s(&config)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("api_base"), "{}", stderr(&out));

    fs::write(&config, "graph = \"g.json\"\narchive_dir = \"out\"\n").unwrap();
    let out = tpgo(&["optimize", "--config", s(&config)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("suite"), "{}", stderr(&out));
}

#[test]
fn parse_with_scripted_parser() {
    let dir = tempfile::tempdir().unwrap();
    let graph = dir.path().join("graph.json");
    let prompt = data("analyst.txt");
    let out = tpgo(&[
        "parse",
        s(&prompt),
        "--out",
        s(&graph),
        "--script",
        s(&data("parser_script.json")),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("nodes: 6"));
    let text = stdout(&tpgo(&["graph", "materialize", s(&graph)]));
    for line in fs::read_to_string(&prompt).unwrap().lines() {
        let line = line.trim_start_matches('#').trim();
        assert!(text.contains(line), "{line}");
    }
}

#[test]
fn parse_unreadable_prompt_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = tpgo(&[
        "parse",
        s(&dir.path().join("missing.txt")),
        "--out",
        s(&dir.path().join("g.json")),
        "--script",
        s(&data("parser_script.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn parse_without_provider_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = tpgo(&[
        "parse",
        s(&data("analyst.txt")),
        "--out",
        s(&dir.path().join("g.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("TPGO_API_BASE"));
}

#[test]
fn parse_against_unreachable_provider_is_a_provider_failure() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("p.toml");
    fs::write(
        &config,
        "[providers]\napi_base = \"http://127.0.0.1:9\"\ntimeout_secs = 2\n[providers.parser]\nmax_retries = 0\n",
    )
    .unwrap();
    let out = tpgo(&[
        "parse",
        s(&data("analyst.txt")),
        "--out",
        s(&dir.path().join("g.json")),
        "--config",
        s(&config),
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn memory_graph_and_cost_commands() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        optimize_fixture(dir.path(), "poisoned", &[]).status.code(),
        Some(0)
    );
    let archive = dir.path().join("poisoned");

    let ls = stdout(&tpgo(&["memory", "ls", s(&archive)]));
    assert!(ls.contains("exp-00001"));
    assert!(ls.contains("rejected"));
    let show = tpgo(&[
        "memory",
        "show",
        s(&archive.join("memory.jsonl")),
        "exp-00001",
    ]);
    assert_eq!(show.status.code(), Some(0));
    assert!(stdout(&show).contains("\"effectiveness\""));
    assert_eq!(
        tpgo(&["memory", "show", s(&archive), "exp-99999"])
            .status
            .code(),
        Some(2)
    );
    let export = dir.path().join("export.json");
    assert_eq!(
        tpgo(&["memory", "export", s(&archive), "--out", s(&export)])
            .status
            .code(),
        Some(0)
    );
    let entries: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&export).unwrap()).unwrap();
    assert_eq!(entries.as_array().unwrap().len(), ls.lines().count());

    let before = archive.join("iter_1/graph_before.json");
    let after = archive.join("iter_1/graph_after.json");
    let shown = stdout(&tpgo(&["graph", "show", s(&after)]));
    assert!(shown.contains("main.2 [logic] Verification"));
    let diff: serde_json::Value =
        serde_json::from_str(&stdout(&tpgo(&["graph", "diff", s(&before), s(&after)]))).unwrap();
    assert_eq!(diff.as_array().unwrap().len(), 2);
    let root = stdout(&tpgo(&[
        "graph",
        "materialize",
        s(&after),
        "--root",
        "main",
    ]));
    assert!(root.starts_with("# Main Agent"));

    let cost = tpgo(&["cost", s(&archive)]);
    assert_eq!(cost.status.code(), Some(0));
    assert!(stdout(&cost).contains("tokens / trajectory"));
    assert_eq!(
        tpgo(&["cost", s(&dir.path().join("nothing"))])
            .status
            .code(),
        Some(3)
    );
}
