//! Local deployment: a directory holding the membership list, the shared
//! node config and one key file per node.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Subcommand};
use entropy_core::codec::{content_hash, CodecParams, Digest256};
use entropy_core::crypto::KeyPair;
use entropy_core::protocol::{ControlRequest, ControlResponse, Node, NodeConfig, ObjectRecipe, OpResult};
use entropy_core::selection::{PeerInfo, StaticMembership};
use entropy_core::transport::sim::cluster_keys;
use entropy_core::transport::socket::{control, Runtime, Shutdown};
use serde_json::json;

use crate::config::{env_seed, parse_outer};
use crate::error::{usage, CliError, Result};

const MEMBERS: &str = "members.json";
const NODE_CONFIG: &str = "node.json";

/// Far enough out that stored objects never expire during a run, and fixed
/// so recipes are reproducible.
const DEFAULT_EXPIRATION: u64 = 4_102_444_800;

#[derive(Debug, Subcommand)]
pub enum NodeCommand {
    /// Writes a deployment directory for N local nodes.
    Init(InitArgs),
    /// Serves one node until killed or --duration-secs passes.
    Run(RunArgs),
    /// Stores a file through a node and writes its recipe.
    Store(StoreArgs),
    /// Fetches an object named by a recipe.
    Query(QueryArgs),
    /// Asks the oldest holder of a chunk to drop its fragment.
    Evict(EvictArgs),
    /// Prints a node's view of a chunk group.
    View(ViewArgs),
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub nodes: usize,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Node i listens on base-port + i.
    #[arg(long, default_value_t = 7_400)]
    pub base_port: u16,
    #[arg(long, default_value_t = 1_000)]
    pub heartbeat_ms: u64,
    #[arg(long)]
    pub k_inner: Option<usize>,
    #[arg(long)]
    pub r_group: Option<usize>,
    /// Outer code as n,k.
    #[arg(long)]
    pub outer: Option<String>,
    #[arg(long)]
    pub cache_ttl_ms: Option<u64>,
    /// Key derivation seed; defaults to ENTROPY_SEED or 0.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long)]
    pub index: usize,
    /// Serve claims and joins but never fragment data.
    #[arg(long)]
    pub byzantine: bool,
    #[arg(long)]
    pub duration_secs: Option<u64>,
}

#[derive(Debug, Args)]
pub struct Control {
    #[arg(long)]
    pub dir: PathBuf,
    /// Index of the node that carries out the request.
    #[arg(long, default_value_t = 0)]
    pub via: usize,
    #[arg(long, default_value_t = 120)]
    pub timeout_secs: u64,
}

#[derive(Debug, Args)]
pub struct StoreArgs {
    #[command(flatten)]
    pub control: Control,
    #[arg(long)]
    pub file: PathBuf,
    /// Recipe output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Owner secret that keys the outer code.
    #[arg(long)]
    pub secret: String,
    /// Seconds since the UNIX epoch.
    #[arg(long, default_value_t = DEFAULT_EXPIRATION)]
    pub expiration: u64,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[command(flatten)]
    pub control: Control,
    #[arg(long)]
    pub recipe: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub secret: String,
}

#[derive(Debug, Args)]
pub struct EvictArgs {
    #[command(flatten)]
    pub control: Control,
    /// Chunk hash, hex.
    #[arg(long)]
    pub chunk: String,
    /// Evict the member that joined first (the only policy offered).
    #[arg(long)]
    pub oldest: bool,
}

#[derive(Debug, Args)]
pub struct ViewArgs {
    #[command(flatten)]
    pub control: Control,
    #[arg(long)]
    pub chunk: String,
}

struct Deployment {
    peers: Vec<PeerInfo>,
    config: NodeConfig,
}

impl Deployment {
    fn load(dir: &Path) -> Result<Deployment> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
        };
        let peers: Vec<PeerInfo> = serde_json::from_str(&read(MEMBERS)?)?;
        // Rejects ids that do not match their keys.
        StaticMembership::from_json(&read(MEMBERS)?).map_err(CliError::Invalid)?;
        let config: NodeConfig = serde_json::from_str(&read(NODE_CONFIG)?)?;
        config.validate().map_err(CliError::Invalid)?;
        Ok(Deployment { peers, config })
    }

    fn peer(&self, index: usize) -> Result<&PeerInfo> {
        self.peers
            .get(index)
            .ok_or_else(|| CliError::Usage(format!("node index {index} out of range (0..{})", self.peers.len())))
    }

    fn book(&self) -> Result<BTreeMap<entropy_core::NodeId, SocketAddr>> {
        self.peers
            .iter()
            .map(|p| {
                let a: SocketAddr = p
                    .address
                    .parse()
                    .map_err(|_| CliError::Invalid(format!("bad address {:?}", p.address)))?;
                Ok((p.node_id, a))
            })
            .collect()
    }
}

fn key_path(dir: &Path, index: usize) -> PathBuf {
    dir.join("keys").join(format!("{index}.key"))
}

fn parse_hash(s: &str) -> Result<Digest256> {
    Digest256::from_hex(s).ok_or_else(|| CliError::Usage(format!("--chunk: {s:?} is not a 64-digit hex hash")))
}

fn init(a: InitArgs) -> Result<String> {
    if a.nodes == 0 {
        return usage("--nodes must be at least 1");
    }
    if a.base_port as usize + a.nodes > u16::MAX as usize {
        return usage("port range runs past 65535");
    }
    let mut codec = CodecParams::default();
    if let Some(k) = a.k_inner {
        codec.k_inner = k;
    }
    if let Some(r) = a.r_group {
        codec.r_group = r;
    }
    if let Some(o) = &a.outer {
        (codec.n_chunks, codec.k_outer) = parse_outer(o)?;
    }
    codec.validate().map_err(|e| CliError::Invalid(e.to_string()))?;
    if codec.r_group > a.nodes {
        return Err(CliError::Invalid(format!("r_group {} exceeds the node count", codec.r_group)));
    }
    if a.heartbeat_ms == 0 {
        return usage("--heartbeat-ms must be positive");
    }
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?,
    };
    let mut cfg = NodeConfig::with_heartbeat(a.heartbeat_ms, codec, a.nodes);
    if let Some(ttl) = a.cache_ttl_ms {
        cfg.cache_ttl_ms = ttl;
    }
    cfg.seed = seed;
    cfg.validate().map_err(CliError::Invalid)?;

    let keys = cluster_keys(a.nodes, seed);
    std::fs::create_dir_all(a.dir.join("keys"))?;
    let peers: Vec<PeerInfo> = keys
        .iter()
        .enumerate()
        .map(|(i, k)| PeerInfo::new(k.public(), format!("{}:{}", a.host, a.base_port as usize + i)))
        .collect();
    for (i, k) in keys.iter().enumerate() {
        k.save(&key_path(&a.dir, i))?;
    }
    std::fs::write(a.dir.join(MEMBERS), StaticMembership::to_json(&peers) + "\n")?;
    std::fs::write(a.dir.join(NODE_CONFIG), serde_json::to_string_pretty(&cfg)? + "\n")?;
    Ok(json!({ "dir": a.dir.display().to_string(), "nodes": a.nodes, "seed": seed }).to_string())
}

fn run_node(a: RunArgs) -> Result<String> {
    let d = Deployment::load(&a.dir)?;
    let me = d.peer(a.index)?.clone();
    let keys = KeyPair::load(&key_path(&a.dir, a.index))?;
    if keys.node_id() != me.node_id {
        return Err(CliError::Invalid(format!("key file {} does not match members.json", a.index)));
    }
    let mut cfg = d.config.clone();
    cfg.byzantine = a.byzantine;
    let book = d.book()?;
    let dir = Arc::new(StaticMembership::from_json(&StaticMembership::to_json(&d.peers)).map_err(CliError::Invalid)?);
    let node = Node::new(keys, cfg, dir);
    let rt = Runtime::bind(node, &me.address, book).map_err(|e| CliError::Io(format!("bind {}: {e}", me.address)))?;
    let shutdown = Shutdown::new();
    if let Some(secs) = a.duration_secs {
        let stop = shutdown.clone();
        std::thread::spawn(move || {
            std::thread::sleep(Duration::from_secs(secs));
            stop.trigger();
        });
    }
    let node = rt.run(shutdown)?;
    Ok(serde_json::to_string(node.stats())?)
}

fn request(c: &Control, req: &ControlRequest) -> Result<OpResult> {
    let d = Deployment::load(&c.dir)?;
    let p = d.peer(c.via)?;
    match control(&p.address, p.node_id, req, Duration::from_secs(c.timeout_secs)) {
        Ok(ControlResponse::Done(OpResult::Failed(m))) => Err(CliError::Remote(m)),
        Ok(ControlResponse::Done(r)) => Ok(r),
        Ok(other) => Err(CliError::Remote(format!("unexpected response {other:?}"))),
        Err(e) => Err(CliError::Remote(format!("node {} at {}: {e}", c.via, p.address))),
    }
}

fn unexpected(r: OpResult) -> CliError {
    CliError::Remote(format!("unexpected result {r:?}"))
}

fn store(a: StoreArgs) -> Result<String> {
    let data = std::fs::read(&a.file).map_err(|e| CliError::Io(format!("{}: {e}", a.file.display())))?;
    let req = ControlRequest::Store {
        data,
        secret: a.secret.into_bytes(),
        expiration: a.expiration,
    };
    match request(&a.control, &req)? {
        OpResult::Stored(recipe) => {
            std::fs::write(&a.out, serde_json::to_string_pretty(&recipe)? + "\n")?;
            Ok(json!({ "recipe": a.out.display().to_string(), "object_hash": recipe.object_hash }).to_string())
        }
        other => Err(unexpected(other)),
    }
}

fn query(a: QueryArgs) -> Result<String> {
    let text = std::fs::read_to_string(&a.recipe).map_err(|e| CliError::Io(format!("{}: {e}", a.recipe.display())))?;
    let recipe: ObjectRecipe = serde_json::from_str(&text)?;
    recipe.validate().map_err(CliError::Invalid)?;
    if recipe.chunk_hashes.len() < recipe.params.k_outer {
        return Err(CliError::Invalid(format!(
            "recipe lists {} chunks, {} are needed",
            recipe.chunk_hashes.len(),
            recipe.params.k_outer
        )));
    }
    let expected = recipe.object_hash;
    let req = ControlRequest::Query {
        recipe,
        secret: a.secret.into_bytes(),
    };
    match request(&a.control, &req)? {
        OpResult::Object(data) => {
            if content_hash(&data) != expected {
                return Err(CliError::Remote("decoded object does not match the recipe hash".into()));
            }
            std::fs::write(&a.out, &data)?;
            Ok(json!({ "object": a.out.display().to_string(), "bytes": data.len() }).to_string())
        }
        other => Err(unexpected(other)),
    }
}

fn evict(a: EvictArgs) -> Result<String> {
    if !a.oldest {
        return usage("evict needs --oldest");
    }
    let chunk_hash = parse_hash(&a.chunk)?;
    match request(&a.control, &ControlRequest::Evict { chunk_hash })? {
        OpResult::Evicted(id) => Ok(json!({ "chunk": chunk_hash, "evicted": id }).to_string()),
        other => Err(unexpected(other)),
    }
}

fn view(a: ViewArgs) -> Result<String> {
    let chunk_hash = parse_hash(&a.chunk)?;
    match request(&a.control, &ControlRequest::View { chunk_hash })? {
        OpResult::View(report) => Ok(serde_json::to_string(&report)?),
        other => Err(unexpected(other)),
    }
}

pub fn run(cmd: NodeCommand) -> Result<String> {
    match cmd {
        NodeCommand::Init(a) => init(a),
        NodeCommand::Run(a) => run_node(a),
        NodeCommand::Store(a) => store(a),
        NodeCommand::Query(a) => query(a),
        NodeCommand::Evict(a) => evict(a),
        NodeCommand::View(a) => view(a),
    }
}
