#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_resync"))
}

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl From<Output> for Run {
    fn from(o: Output) -> Self {
        Run {
            code: o.status.code().unwrap_or(-1),
            stdout: String::from_utf8_lossy(&o.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
        }
    }
}

pub fn run(args: &[&str]) -> Run {
    bin().args(args).output().expect("spawn resync").into()
}

pub fn run_json(args: &[&str]) -> (i32, serde_json::Value) {
    let mut all = vec!["--format", "json"];
    all.extend_from_slice(args);
    let r = run(&all);
    let value = serde_json::from_str(&r.stdout)
        .unwrap_or_else(|e| panic!("{args:?}: no JSON on stdout ({e}): {} / {}", r.stdout, r.stderr));
    (r.code, value)
}

/// `resync serve` in a child process, killed on drop.
pub struct Server {
    child: Child,
    pub url: String,
}

impl Server {
    pub fn start(root: &Path) -> Server {
        fs::create_dir_all(root).unwrap();
        let mut child = bin()
            .args(["serve", "--root", root.to_str().unwrap(), "--bind", "127.0.0.1:0"])
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .expect("spawn server");
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let url = line.trim().strip_prefix("listening on ").expect("listening line").to_string();
        Server { child, url }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Relative path to bytes of every regular file under `root`, leaving out
/// the store's reserved names.
pub fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    if !root.exists() {
        return out;
    }
    for e in walkdir::WalkDir::new(root) {
        let e = e.unwrap();
        let rel = e.path().strip_prefix(root).unwrap().to_str().unwrap().replace('\\', "/");
        if e.file_type().is_file() && !rel.starts_with(".resync") {
            out.insert(rel, fs::read(e.path()).unwrap());
        }
    }
    out
}

pub fn write_sim_config(path: &Path, seed: u64, n_initial: usize, rate: f64, max_body: usize) {
    let text = format!(
        "[simulator]\nseed = {seed}\nn_initial = {n_initial}\nevent_rate = {rate}\nbody_size_min = 0\nbody_size_max = {max_body}\nduration = 0\nchangelist_period = \"1h\"\n"
    );
    fs::write(path, text).unwrap();
}
