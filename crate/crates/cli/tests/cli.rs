use std::path::Path;
use std::process::{Command, Output};

use vrlab_server::{spawn, RunningServer, ServerConfig};

fn server(token: Option<&str>) -> RunningServer {
    spawn(ServerConfig {
        bind: "127.0.0.1:0".parse().unwrap(),
        token: token.map(str::to_string),
        ..ServerConfig::default()
    })
    .unwrap()
}

fn vrlab(endpoint: &str, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vrlab"))
        .env_remove("VRLAB_TOKEN")
        .env_remove("VRLAB_OUT_DIR")
        .arg("--endpoint")
        .arg(endpoint)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn config_file(dir: &Path) -> String {
    let path = dir.join("fitts.json");
    std::fs::write(&path, vrlab_core::config::bundled::FITTS_3D).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn empty_board_prints_only_the_header() {
    let srv = server(None);
    let out = vrlab(&srv.url(), &["board"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("ID"));
    let json = vrlab(&srv.url(), &["--json", "board"]);
    assert_eq!(stdout(&json).trim(), "[]");
}

#[test]
fn register_publish_and_list() {
    let srv = server(None);
    let dir = tempfile::tempdir().unwrap();
    let file = config_file(dir.path());
    let out = vrlab(&srv.url(), &["experiment", "register", &file]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout(&out).trim(), "fitts_3d");

    let again = vrlab(&srv.url(), &["experiment", "register", &file]);
    assert_eq!(again.status.code(), Some(3));

    assert_eq!(vrlab(&srv.url(), &["experiment", "publish", "fitts_3d"]).status.code(), Some(0));
    let board = stdout(&vrlab(&srv.url(), &["board"]));
    assert_eq!(board.lines().count(), 2);
    assert!(board.contains("fitts_3d"));

    let listed: serde_json::Value = serde_json::from_str(&stdout(&vrlab(&srv.url(), &["--json", "experiment", "list"]))).unwrap();
    assert_eq!(listed.as_array().unwrap().len(), 1);
}

#[test]
fn export_writes_every_kind() {
    let srv = server(None);
    let dir = tempfile::tempdir().unwrap();
    let file = config_file(dir.path());
    vrlab(&srv.url(), &["experiment", "register", &file]);
    let out_dir = dir.path().to_str().unwrap();
    let out = vrlab(&srv.url(), &["--out-dir", out_dir, "export", "fitts_3d", "--format", "json"]);
    assert_eq!(out.status.code(), Some(0));
    for kind in ["frames", "trials", "responses", "sessions"] {
        assert!(dir.path().join("fitts_3d").join(format!("{kind}.ndjson")).exists(), "{kind}");
    }
}

#[test]
fn exit_codes() {
    let srv = server(Some("secret"));
    assert_eq!(vrlab(&srv.url(), &["export", "nope", "--kind", "trials"]).status.code(), Some(3));
    let authed = vrlab(&srv.url(), &["--token", "secret", "export", "nope", "--kind", "trials"]);
    assert_eq!(authed.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&authed.stderr).contains("nope"));
    assert_eq!(vrlab(&srv.url(), &["--token", "secret", "experiment", "list"]).status.code(), Some(0));

    assert_eq!(vrlab("http://127.0.0.1:1", &["board"]).status.code(), Some(2));
    assert_eq!(vrlab("not a url", &["board"]).status.code(), Some(3));
    assert_eq!(vrlab(&srv.url(), &["frobnicate"]).status.code(), Some(3));
    assert_eq!(vrlab(&srv.url(), &["experiment", "register", "/no/such/file.json"]).status.code(), Some(1));
}
