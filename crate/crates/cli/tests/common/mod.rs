#![allow(dead_code)]

use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use tempfile::TempDir;

pub const BIN: &str = env!("CARGO_BIN_EXE_entropy");

pub fn entropy(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("ENTROPY_SEED")
        .output()
        .expect("spawn entropy")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A base port with `n` consecutive free ports after it.
fn free_base_port(n: usize) -> u16 {
    let mut x = (std::process::id() as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for _ in 0..200 {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        let base = 20_000 + (x % 30_000) as u16;
        let held: Vec<_> = (0..n as u16)
            .map_while(|i| TcpListener::bind(("127.0.0.1", base + i)).ok())
            .collect();
        if held.len() == n {
            return base;
        }
    }
    panic!("no free port range of {n}");
}

/// Node processes on localhost, killed on drop.
pub struct ProcCluster {
    pub dir: TempDir,
    pub nodes: usize,
    pub base_port: u16,
    children: Vec<Option<Child>>,
}

impl ProcCluster {
    /// Runs `node init` with `init_args` and starts every node.
    pub fn start(nodes: usize, init_args: &[&str]) -> ProcCluster {
        let dir = tempfile::tempdir().unwrap();
        let base_port = free_base_port(nodes);
        let (n, port) = (nodes.to_string(), base_port.to_string());
        let d = dir.path().to_str().unwrap();
        let mut args = vec!["node", "init", "--dir", d, "--nodes", &n, "--base-port", &port];
        args.extend_from_slice(init_args);
        let o = entropy(&args);
        assert!(o.status.success(), "init failed: {}", stderr(&o));
        let children = (0..nodes)
            .map(|i| {
                let log = std::fs::File::create(dir.path().join(format!("node{i}.log"))).unwrap();
                Some(
                    Command::new(BIN)
                        .args(["node", "run", "--dir", d, "--index", &i.to_string(), "--duration-secs", "600"])
                        .stdout(Stdio::null())
                        .stderr(log)
                        .spawn()
                        .expect("spawn node"),
                )
            })
            .collect();
        let c = ProcCluster {
            dir,
            nodes,
            base_port,
            children,
        };
        c.wait_listening(Duration::from_secs(30));
        c
    }

    fn wait_listening(&self, limit: Duration) {
        let t0 = Instant::now();
        for i in 0..self.nodes {
            while TcpStream::connect(("127.0.0.1", self.base_port + i as u16)).is_err() {
                assert!(t0.elapsed() < limit, "node {i} never listened");
                std::thread::sleep(Duration::from_millis(20));
            }
        }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Runs a control subcommand (`store`, `query`, ...) against this deployment.
    pub fn node_cmd(&self, sub: &str, args: &[&str]) -> Output {
        let d = self.path().to_str().unwrap().to_string();
        let mut all = vec!["node", sub, "--dir", &d];
        all.extend_from_slice(args);
        entropy(&all)
    }

    /// Index of the node with this hex id in members.json.
    pub fn index_of(&self, node_id: &str) -> Option<usize> {
        let text = std::fs::read_to_string(self.file("members.json")).unwrap();
        let peers: Vec<serde_json::Value> = serde_json::from_str(&text).unwrap();
        peers.iter().position(|p| p["node_id"] == node_id)
    }

    pub fn kill(&mut self, i: usize) {
        if let Some(mut c) = self.children[i].take() {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

impl Drop for ProcCluster {
    fn drop(&mut self) {
        for i in 0..self.children.len() {
            self.kill(i);
        }
    }
}

pub fn random_bytes(len: usize, seed: u64) -> Vec<u8> {
    use rand::{RngCore, SeedableRng};
    let mut v = vec![0u8; len];
    rand_chacha::ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut v);
    v
}
