//! On-disk formats: versioned binary containers for worlds, graphs and
//! checkpoints, TOML configuration, metrics files and run manifests.
//!
//! Every container starts with a 4-byte magic, a little-endian `u32` format
//! version and a length-prefixed JSON header, followed by a binary payload.
//! Real matrices are stored as little-endian `f32`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assoc_graph::{AssociationGraph, StateMeta};
use crate::baselines::BilinearParams;
use crate::error::{PamError, Result};
use crate::eval::MetricsReport;
use crate::numerics::Matrix;
use crate::predictor::{Dense, MlpParams, ModelDims, TrainConfig};
use crate::worldgen::{StateRecord, World, WorldConfig};

pub const FORMAT_VERSION: u32 = 1;

pub const WORLD_MAGIC: [u8; 4] = *b"PAMW";
pub const GRAPH_MAGIC: [u8; 4] = *b"PAMG";
pub const PREDICTOR_MAGIC: [u8; 4] = *b"PAMM";
pub const BILINEAR_MAGIC: [u8; 4] = *b"PAMB";

/// Schema for `metrics.json` as written by [`write_metrics`].
pub const METRICS_SCHEMA: &str = include_str!("../schemas/metrics.schema.json");

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| PamError::io(path, e))?))
}

/// Fails with [`PamError::Exists`] when `path` exists and `force` is off.
pub fn ensure_writable(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(PamError::Exists(path.to_path_buf()));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| PamError::io(parent, e))?;
    }
    Ok(())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| PamError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| PamError::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| PamError::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, &to_json_bytes(value)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read_bytes(path)?)?)
}

// ---------------------------------------------------------------------------
// Configuration

/// Pulls the offending field name out of a serde message such as
/// ``missing field `n_rooms` ``.
fn field_from_message(message: &str) -> Option<String> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(message[start..start + len].to_string())
}

/// The key on the line containing byte `offset`, for `key = value` lines.
fn key_at(text: &str, offset: usize) -> Option<String> {
    let start = text[..offset.min(text.len())].rfind('\n').map_or(0, |i| i + 1);
    let line = text[start..].lines().next()?;
    let (key, _) = line.split_once('=')?;
    Some(key.trim().to_string())
}

/// Parses a TOML document; errors name the field at fault.
pub fn parse_toml<T: DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| {
        let message = e.message().to_string();
        let field = field_from_message(&message)
            .or_else(|| e.span().and_then(|s| key_at(text, s.start)))
            .unwrap_or_else(|| "<document>".into());
        PamError::config(field, message)
    })
}

pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| PamError::io(path, e))?;
    parse_toml(&text)
}

/// Reads the `[section]` table of a TOML file, or the whole document when it
/// has no such table. Lets one experiment file feed every subcommand.
pub fn load_toml_section<T: DeserializeOwned>(path: &Path, section: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| PamError::io(path, e))?;
    let table: toml::Table = parse_toml(&text)?;
    match table.get(section) {
        Some(toml::Value::Table(t)) => T::deserialize(t.clone()).map_err(|e| {
            let message = e.message().to_string();
            let field = field_from_message(&message).unwrap_or_else(|| "<table>".into());
            PamError::config(format!("{section}.{field}"), message)
        }),
        _ => parse_toml(&text),
    }
}

// ---------------------------------------------------------------------------
// Container plumbing

struct Writer(Vec<u8>);

impl Writer {
    fn new<H: Serialize>(magic: [u8; 4], header: &H) -> Result<Self> {
        let json = serde_json::to_vec(header)?;
        let mut buf = Vec::with_capacity(16 + json.len());
        buf.extend_from_slice(&magic);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        Ok(Writer(buf))
    }

    fn u32s(&mut self, values: impl IntoIterator<Item = usize>) {
        for v in values {
            self.0.extend_from_slice(&(v as u32).to_le_bytes());
        }
    }

    fn f32s(&mut self, values: &[f64]) {
        for &v in values {
            self.0.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    fn matrix(&mut self, m: &Matrix) {
        self.f32s(m.as_slice());
    }
}

struct Reader<'a> {
    kind: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn open<H: DeserializeOwned>(kind: &'static str, magic: [u8; 4], bytes: &'a [u8]) -> Result<(H, Self)> {
        let bad = |detail: String| PamError::Format { kind, detail };
        if bytes.len() < 16 || bytes[..4] != magic {
            return Err(bad(format!(
                "missing magic {:?}",
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version > FORMAT_VERSION {
            return Err(bad(format!(
                "format version {version} is newer than the supported version {FORMAT_VERSION}"
            )));
        }
        if version == 0 {
            return Err(bad("format version 0 is invalid".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let end = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header".into()))?;
        let header = serde_json::from_slice(&bytes[16..end]).map_err(|e| bad(format!("header: {e}")))?;
        Ok((header, Reader { kind, bytes, pos: end }))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| PamError::Format {
            kind: self.kind,
            detail: format!("truncated payload at byte {}", self.pos),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<usize>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::from_vec(rows, cols, self.f32s(rows * cols)?)
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(PamError::Format {
                kind: self.kind,
                detail: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// World

#[derive(Serialize, Deserialize)]
struct WorldHeader {
    config: WorldConfig,
    object_rooms: Vec<Vec<usize>>,
}

pub fn world_to_bytes(world: &World) -> Result<Vec<u8>> {
    let mut w = Writer::new(
        WORLD_MAGIC,
        &WorldHeader { config: world.config.clone(), object_rooms: world.object_rooms.clone() },
    )?;
    w.matrix(&world.room_centroids);
    w.matrix(&world.object_features);
    w.u32s(world.states.iter().map(|s| s.room_id));
    w.matrix(&world.embeddings);
    Ok(w.0)
}

pub fn world_from_bytes(bytes: &[u8]) -> Result<World> {
    let (header, mut r): (WorldHeader, _) = Reader::open("world", WORLD_MAGIC, bytes)?;
    let c = header.config;
    c.validate()?;
    let room_centroids = r.matrix(c.n_rooms, c.embed_dim)?;
    let object_features = r.matrix(c.n_objects, c.embed_dim)?;
    let rooms = r.u32s(c.n_states())?;
    let embeddings = r.matrix(c.n_states(), c.embed_dim)?;
    r.finish()?;
    if header.object_rooms.len() != c.n_objects {
        return Err(PamError::Format { kind: "world", detail: "object table does not match n_objects".into() });
    }
    let mut per_room = vec![Vec::new(); c.n_rooms];
    for (obj, rs) in header.object_rooms.iter().enumerate() {
        for &room in rs {
            per_room
                .get_mut(room)
                .ok_or_else(|| PamError::Format { kind: "world", detail: format!("room {room} out of range") })?
                .push(obj);
        }
    }
    let mut states = Vec::with_capacity(rooms.len());
    for (id, &room) in rooms.iter().enumerate() {
        if room >= c.n_rooms {
            return Err(PamError::Format { kind: "world", detail: format!("state {id} in room {room}") });
        }
        states.push(StateRecord {
            state_id: id,
            trajectory_id: id / c.trajectory_len,
            timestep: id % c.trajectory_len,
            room_id: room,
            objects_present: per_room[room].clone(),
        });
    }
    Ok(World {
        config: c,
        room_centroids,
        object_features,
        object_rooms: header.object_rooms,
        states,
        embeddings,
    })
}

/// Content hash of a world's canonical encoding.
pub fn world_hash(world: &World) -> Result<String> {
    Ok(sha256_hex(&world_to_bytes(world)?))
}

/// Human-readable summary written next to a world file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSidecar {
    pub format_version: u32,
    pub config: WorldConfig,
    pub n_states: usize,
    pub sha256: String,
}

/// Writes `path` and `path.json`; returns the content hash.
pub fn save_world(world: &World, path: &Path, force: bool) -> Result<String> {
    let sidecar_path = sidecar_path(path);
    ensure_writable(path, force)?;
    ensure_writable(&sidecar_path, force)?;
    let bytes = world_to_bytes(world)?;
    let sha256 = sha256_hex(&bytes);
    write_bytes(path, &bytes)?;
    write_json(
        &sidecar_path,
        &WorldSidecar {
            format_version: FORMAT_VERSION,
            config: world.config.clone(),
            n_states: world.n_states(),
            sha256: sha256.clone(),
        },
    )?;
    Ok(sha256)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    path.with_file_name(name)
}

pub fn load_world(path: &Path) -> Result<World> {
    world_from_bytes(&read_bytes(path)?)
}

// ---------------------------------------------------------------------------
// Graph

#[derive(Serialize, Deserialize)]
struct GraphHeader {
    tau: usize,
    n_states: usize,
    n_edges: usize,
}

pub fn graph_to_bytes(graph: &AssociationGraph) -> Result<Vec<u8>> {
    let mut w = Writer::new(
        GRAPH_MAGIC,
        &GraphHeader { tau: graph.tau, n_states: graph.n_states(), n_edges: graph.n_edges() },
    )?;
    w.u32s(graph.states().iter().flat_map(|s| [s.trajectory, s.timestep, s.room]));
    w.u32s(graph.edges().iter().flat_map(|&(a, b)| [a, b]));
    Ok(w.0)
}

pub fn graph_from_bytes(bytes: &[u8]) -> Result<AssociationGraph> {
    let (h, mut r): (GraphHeader, _) = Reader::open("graph", GRAPH_MAGIC, bytes)?;
    let meta = r.u32s(3 * h.n_states)?;
    let flat = r.u32s(2 * h.n_edges)?;
    r.finish()?;
    let states = meta
        .chunks_exact(3)
        .map(|c| StateMeta { trajectory: c[0], timestep: c[1], room: c[2] })
        .collect();
    AssociationGraph::from_edges(h.tau, states, flat.chunks_exact(2).map(|c| (c[0], c[1])))
}

pub fn save_graph(graph: &AssociationGraph, path: &Path, force: bool) -> Result<()> {
    ensure_writable(path, force)?;
    write_bytes(path, &graph_to_bytes(graph)?)
}

pub fn load_graph(path: &Path) -> Result<AssociationGraph> {
    graph_from_bytes(&read_bytes(path)?)
}

/// `a,b,cross_room` edge list.
pub fn graph_edges_csv(graph: &AssociationGraph) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["a", "b", "cross_room"]).map_err(csv_error)?;
    for (i, &(a, b)) in graph.edges().iter().enumerate() {
        w.write_record([a.to_string(), b.to_string(), graph.is_cross_room(i).to_string()])
            .map_err(csv_error)?;
    }
    w.into_inner().map_err(|e| PamError::Format { kind: "csv", detail: e.to_string() })
}

fn csv_error(e: csv::Error) -> PamError {
    PamError::Format { kind: "csv", detail: e.to_string() }
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Serialize, Deserialize)]
struct PredictorHeader {
    dims: ModelDims,
    train_config: Option<TrainConfig>,
}

pub fn predictor_to_bytes(params: &MlpParams, train_config: Option<&TrainConfig>) -> Result<Vec<u8>> {
    let mut w = Writer::new(
        PREDICTOR_MAGIC,
        &PredictorHeader { dims: params.dims, train_config: train_config.cloned() },
    )?;
    for t in params.tensors() {
        w.f32s(t);
    }
    Ok(w.0)
}

pub fn predictor_from_bytes(bytes: &[u8]) -> Result<(MlpParams, Option<TrainConfig>)> {
    let (h, mut r): (PredictorHeader, _) = Reader::open("predictor checkpoint", PREDICTOR_MAGIC, bytes)?;
    h.dims.validate()?;
    let d = h.dims;
    let mut dense = |rows: usize, cols: usize| -> Result<Dense> {
        let weight = r.matrix(rows, cols)?;
        let bias = r.f32s(cols)?;
        Ok(Dense { weight, bias })
    };
    let input_layer = dense(d.input, d.hidden)?;
    let residual_layers = (0..d.layers - 2)
        .map(|_| dense(d.hidden, d.hidden))
        .collect::<Result<Vec<_>>>()?;
    let output_layer = dense(d.hidden, d.output)?;
    let ln_gain = r.f32s(d.output)?;
    let ln_bias = r.f32s(d.output)?;
    r.finish()?;
    let params = MlpParams { dims: d, input_layer, residual_layers, output_layer, ln_gain, ln_bias };
    Ok((params, h.train_config))
}

pub fn save_predictor(params: &MlpParams, train_config: Option<&TrainConfig>, path: &Path, force: bool) -> Result<()> {
    ensure_writable(path, force)?;
    write_bytes(path, &predictor_to_bytes(params, train_config)?)
}

pub fn load_predictor(path: &Path) -> Result<(MlpParams, Option<TrainConfig>)> {
    predictor_from_bytes(&read_bytes(path)?)
}

#[derive(Serialize, Deserialize)]
struct BilinearHeader {
    dim: usize,
    init_seed: u64,
    train_config: Option<TrainConfig>,
}

pub fn bilinear_to_bytes(params: &BilinearParams, train_config: Option<&TrainConfig>) -> Result<Vec<u8>> {
    let mut w = Writer::new(
        BILINEAR_MAGIC,
        &BilinearHeader {
            dim: params.weight.rows(),
            init_seed: params.init_seed,
            train_config: train_config.cloned(),
        },
    )?;
    w.matrix(&params.weight);
    Ok(w.0)
}

pub fn bilinear_from_bytes(bytes: &[u8]) -> Result<(BilinearParams, Option<TrainConfig>)> {
    let (h, mut r): (BilinearHeader, _) = Reader::open("bilinear checkpoint", BILINEAR_MAGIC, bytes)?;
    let weight = r.matrix(h.dim, h.dim)?;
    r.finish()?;
    Ok((BilinearParams { weight, init_seed: h.init_seed }, h.train_config))
}

pub fn save_bilinear(params: &BilinearParams, train_config: Option<&TrainConfig>, path: &Path, force: bool) -> Result<()> {
    ensure_writable(path, force)?;
    write_bytes(path, &bilinear_to_bytes(params, train_config)?)
}

pub fn load_bilinear(path: &Path) -> Result<(BilinearParams, Option<TrainConfig>)> {
    bilinear_from_bytes(&read_bytes(path)?)
}

// ---------------------------------------------------------------------------
// Metrics

/// `method,metric,value`, one row per reported number; undefined values
/// are left empty.
pub fn metrics_flat_csv(report: &MetricsReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "metric", "value"]).map_err(csv_error)?;
    for (method, metric, value) in report.flat_rows() {
        w.write_record([method, metric, value.map(|v| format!("{v:.6}")).unwrap_or_default()])
            .map_err(csv_error)?;
    }
    w.into_inner().map_err(|e| PamError::Format { kind: "csv", detail: e.to_string() })
}

/// One row per metric, one column per method.
pub fn metrics_table_csv(report: &MetricsReport) -> Result<Vec<u8>> {
    let rows = report.flat_rows();
    let methods: Vec<String> = report.methods.iter().map(|m| m.method.clone()).collect();
    let mut metrics: Vec<String> = Vec::new();
    for (_, metric, _) in &rows {
        if !metrics.contains(metric) {
            metrics.push(metric.clone());
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["metric".to_string()];
    header.extend(methods.iter().cloned());
    w.write_record(&header).map_err(csv_error)?;
    for metric in &metrics {
        let mut record = vec![metric.clone()];
        for method in &methods {
            let v = rows
                .iter()
                .find(|(m, k, _)| m == method && k == metric)
                .and_then(|r| r.2);
            record.push(v.map(|v| format!("{v:.6}")).unwrap_or_default());
        }
        w.write_record(&record).map_err(csv_error)?;
    }
    w.into_inner().map_err(|e| PamError::Format { kind: "csv", detail: e.to_string() })
}

/// Writes `metrics.json`, `metrics.csv` (flat) and `table.csv` into `dir`.
pub fn write_metrics(report: &MetricsReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let files = [
        (dir.join("metrics.json"), to_json_bytes(report)?),
        (dir.join("metrics.csv"), metrics_flat_csv(report)?),
        (dir.join("table.csv"), metrics_table_csv(report)?),
    ];
    let mut out = Vec::new();
    for (path, bytes) in files {
        write_bytes(&path, &bytes)?;
        out.push(path);
    }
    Ok(out)
}

/// `key,value` for every numeric, boolean or null leaf of a JSON document,
/// keys joined with `.` and array positions as indices.
pub fn json_leaves_csv(value: &serde_json::Value) -> Result<Vec<u8>> {
    fn walk(v: &serde_json::Value, key: String, out: &mut Vec<(String, String)>) {
        match v {
            serde_json::Value::Object(m) => {
                for (k, child) in m {
                    walk(child, if key.is_empty() { k.clone() } else { format!("{key}.{k}") }, out);
                }
            }
            serde_json::Value::Array(a) => {
                for (i, child) in a.iter().enumerate() {
                    walk(child, format!("{key}.{i}"), out);
                }
            }
            serde_json::Value::Number(n) => out.push((key, n.to_string())),
            serde_json::Value::Bool(b) => out.push((key, b.to_string())),
            serde_json::Value::Null => out.push((key, String::new())),
            serde_json::Value::String(_) => {}
        }
    }
    let mut rows = Vec::new();
    walk(value, String::new(), &mut rows);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["key", "value"]).map_err(csv_error)?;
    for (k, v) in rows {
        w.write_record([k, v]).map_err(csv_error)?;
    }
    w.into_inner().map_err(|e| PamError::Format { kind: "csv", detail: e.to_string() })
}

/// File holding the content hash of the world a run used.
pub const WORLD_HASH_FILE: &str = "world.sha256";

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub started: String,
    pub finished: String,
    /// Hash of each configuration document, by role.
    pub config_hashes: Vec<FileEntry>,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
    /// Every seed the run consumed, by role.
    pub seeds: Vec<(String, u64)>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            started: now_rfc3339(),
            finished: String::new(),
            config_hashes: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seeds: Vec::new(),
        }
    }

    pub fn add_config<T: Serialize>(&mut self, role: &str, config: &T) -> Result<()> {
        let bytes = serde_json::to_vec(config)?;
        self.config_hashes.push(FileEntry { path: role.to_string(), sha256: sha256_hex(&bytes) });
        Ok(())
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileEntry { path: path.display().to_string(), sha256: hash_file(path)? });
        Ok(())
    }

    /// Records `path` relative to `root` when possible.
    pub fn add_output(&mut self, root: &Path, path: &Path) -> Result<()> {
        let shown = path.strip_prefix(root).unwrap_or(path);
        self.outputs.push(FileEntry { path: shown.display().to_string(), sha256: hash_file(path)? });
        Ok(())
    }

    pub fn add_seed(&mut self, role: &str, seed: u64) {
        self.seeds.push((role.to_string(), seed));
    }

    pub fn finish(&mut self, path: &Path) -> Result<()> {
        self.finished = now_rfc3339();
        write_json(path, self)
    }
}

fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assoc_graph::build_graph;
    use crate::predictor::init_params;
    use crate::worldgen::gen_world;

    fn small_world() -> World {
        gen_world(&WorldConfig {
            embed_dim: 8,
            n_rooms: 3,
            n_objects: 6,
            objects_per_room: 3,
            n_shared_objects: 1,
            n_trajectories: 3,
            trajectory_len: 10,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn world_round_trips_exactly() {
        let w = small_world();
        let back = world_from_bytes(&world_to_bytes(&w).unwrap()).unwrap();
        assert_eq!(back.config, w.config);
        assert_eq!(back.embeddings, w.embeddings);
        assert_eq!(back.room_centroids, w.room_centroids);
        assert_eq!(back.object_features, w.object_features);
        assert_eq!(back.object_rooms, w.object_rooms);
        assert_eq!(back.states, w.states);
    }

    #[test]
    fn world_hash_is_stable() {
        let a = world_hash(&small_world()).unwrap();
        assert_eq!(a, world_hash(&small_world()).unwrap());
        let other = gen_world(&WorldConfig { seed: 7, ..small_world().config }).unwrap();
        assert_ne!(a, world_hash(&other).unwrap());
    }

    #[test]
    fn newer_versions_are_rejected() {
        let mut bytes = world_to_bytes(&small_world()).unwrap();
        bytes[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        let err = world_from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("newer"), "{err}");
    }

    #[test]
    fn wrong_magic_and_truncation_are_rejected() {
        let bytes = world_to_bytes(&small_world()).unwrap();
        assert!(graph_from_bytes(&bytes).is_err());
        assert!(world_from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(world_from_bytes(&longer).is_err());
    }

    #[test]
    fn graph_round_trips() {
        let g = build_graph(&small_world(), 3).unwrap();
        let back = graph_from_bytes(&graph_to_bytes(&g).unwrap()).unwrap();
        assert_eq!(back.edges(), g.edges());
        assert_eq!(back.states(), g.states());
        assert_eq!(back.cross_room_flags(), g.cross_room_flags());
        let csv = String::from_utf8(graph_edges_csv(&g).unwrap()).unwrap();
        assert_eq!(csv.lines().count(), g.n_edges() + 1);
        assert!(csv.starts_with("a,b,cross_room\n0,1,"));
    }

    #[test]
    fn predictor_checkpoint_round_trips_bitwise() {
        let mut p = init_params(ModelDims::new(8, 12, 4), 3).unwrap();
        p.round_to_f32();
        let cfg = TrainConfig::default();
        let (back, echo) = predictor_from_bytes(&predictor_to_bytes(&p, Some(&cfg)).unwrap()).unwrap();
        assert_eq!(back, p);
        assert_eq!(echo, Some(cfg));
    }

    #[test]
    fn bilinear_checkpoint_round_trips_bitwise() {
        let mut p = BilinearParams::init(5, 2);
        p.weight.round_to_f32();
        let (back, echo) = bilinear_from_bytes(&bilinear_to_bytes(&p, None).unwrap()).unwrap();
        assert_eq!(back, p);
        assert_eq!(echo, None);
    }

    #[test]
    fn toml_errors_name_the_field() {
        let missing = "embed_dim = 8\n";
        match parse_toml::<WorldConfig>(missing) {
            Err(PamError::Config { field, .. }) => assert_eq!(field, "n_rooms"),
            other => panic!("{other:?}"),
        }
        let text = toml::to_string(&WorldConfig::default()).unwrap() + "bogus = 1\n";
        match parse_toml::<WorldConfig>(&text) {
            Err(PamError::Config { field, .. }) => assert_eq!(field, "bogus"),
            other => panic!("{other:?}"),
        }
        let wrong_type = toml::to_string(&WorldConfig::default())
            .unwrap()
            .replace("n_rooms = 20", "n_rooms = \"many\"");
        match parse_toml::<WorldConfig>(&wrong_type) {
            Err(PamError::Config { field, .. }) => assert_eq!(field, "n_rooms"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overwrite_needs_force() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.pamw");
        save_world(&small_world(), &path, false).unwrap();
        assert!(matches!(save_world(&small_world(), &path, false), Err(PamError::Exists(_))));
        save_world(&small_world(), &path, true).unwrap();
        let side: WorldSidecar = read_json(&sidecar_path(&path)).unwrap();
        assert_eq!(side.sha256, hash_file(&path).unwrap());
        assert_eq!(load_world(&path).unwrap().embeddings, small_world().embeddings);
    }
}
