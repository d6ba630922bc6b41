//! On-disk formats: `R2TA` float arrays, scene JSON documents, `R2TC`
//! checkpoints and split manifests.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};
use crate::scene::{AgentPose, Scene, SceneConfig, Wall};

pub const ARRAY_MAGIC: &[u8; 4] = b"R2TA";
pub const ARRAY_VERSION: u16 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"R2TC";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const SCENE_VERSION: u32 = 1;

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Encodes a 1-D or 2-D float array with the 16-byte `R2TA` header.
pub fn encode_array(shape: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    if shape.len() > 2 {
        return Err(Error::format("array", format!("at most 2 dims supported, got {shape:?}")));
    }
    if shape.iter().product::<usize>() != data.len() {
        return Err(Error::format("array", format!("shape {shape:?} does not match {} values", data.len())));
    }
    let mut out = Vec::with_capacity(16 + 4 * data.len());
    out.extend_from_slice(ARRAY_MAGIC);
    out.extend_from_slice(&ARRAY_VERSION.to_le_bytes());
    out.extend_from_slice(&(shape.len() as u16).to_le_bytes());
    for i in 0..2 {
        let d = shape.get(i).copied().unwrap_or(0);
        let d = u32::try_from(d).map_err(|_| Error::format("array", "dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_array(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    if bytes.len() < 16 {
        return Err(Error::format("array", "shorter than the 16-byte header"));
    }
    if &bytes[..4] != ARRAY_MAGIC {
        return Err(Error::format("array", "bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != ARRAY_VERSION {
        return Err(Error::format("array", format!("unsupported version {version}")));
    }
    let ndim = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    if ndim > 2 {
        return Err(Error::format("array", format!("ndim {ndim} > 2")));
    }
    let shape: Vec<usize> = (0..ndim)
        .map(|i| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let body = &bytes[16..];
    if body.len() != 4 * n {
        return Err(Error::format("array", format!("expected {} data bytes, found {}", 4 * n, body.len())));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((shape, data))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneDoc {
    version: u32,
    seed: u64,
    scene_id: u64,
    config: SceneConfig,
    objects: Vec<(i32, i32)>,
    walls: Vec<Wall>,
    agents: Vec<AgentPose>,
    heatmap: String,
}

pub fn scene_stem(scene_id: u64) -> String {
    format!("scene_{scene_id:04}")
}

/// Serialized JSON document and heatmap array for a scene.
pub fn encode_scene(scene: &Scene) -> Result<(Vec<u8>, Vec<u8>)> {
    let stem = scene_stem(scene.scene_id);
    let doc = SceneDoc {
        version: SCENE_VERSION,
        seed: scene.seed,
        scene_id: scene.scene_id,
        config: scene.config.clone(),
        objects: scene.objects.clone(),
        walls: scene.walls.clone(),
        agents: scene.agents.clone(),
        heatmap: format!("{stem}.r2ta"),
    };
    let mut json = serde_json::to_vec_pretty(&doc)?;
    json.push(b'\n');
    let g = scene.grid_size();
    let arr = encode_array(&[g, g], &scene.gt_heatmap)?;
    Ok((json, arr))
}

/// Writes `scene_<id>.json` and `scene_<id>.r2ta` into `dir`, returning
/// the two paths.
pub fn write_scene(dir: &Path, scene: &Scene) -> Result<(PathBuf, PathBuf)> {
    let (json, arr) = encode_scene(scene)?;
    let stem = scene_stem(scene.scene_id);
    let jp = dir.join(format!("{stem}.json"));
    let ap = dir.join(format!("{stem}.r2ta"));
    write_atomic(&ap, &arr)?;
    write_atomic(&jp, &json)?;
    Ok((jp, ap))
}

/// Loads a scene document and checks its stored heatmap against the
/// heatmap re-derived from the object list.
pub fn read_scene(json_path: &Path) -> Result<Scene> {
    let doc: SceneDoc = serde_json::from_slice(&fs::read(json_path)?)?;
    if doc.version != SCENE_VERSION {
        return Err(Error::format("scene", format!("unsupported version {}", doc.version)));
    }
    let scene = Scene::from_layout(doc.config, doc.seed, doc.scene_id, doc.objects, doc.walls, doc.agents)?;
    let heat_path = json_path.with_file_name(&doc.heatmap);
    let (shape, data) = decode_array(&fs::read(&heat_path)?)?;
    let g = scene.grid_size();
    if shape != [g, g] || data != scene.gt_heatmap {
        return Err(Error::format(
            "scene",
            format!("{} does not match the scene's object layout", heat_path.display()),
        ));
    }
    Ok(scene)
}

/// All scenes in a split directory, ordered by scene id.
pub fn read_split(dir: &Path) -> Result<Vec<Scene>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "json")
                && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("scene_"))
        })
        .collect();
    paths.sort();
    let mut scenes = paths.iter().map(|p| read_scene(p)).collect::<Result<Vec<_>>>()?;
    scenes.sort_by_key(|s| s.scene_id);
    Ok(scenes)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub split: String,
    pub seed: u64,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("# split={} seed={}\n", self.split, self.seed);
        for e in &self.files {
            s.push_str(&format!("{}  {}\n", e.sha256, e.file));
        }
        s
    }
}

/// Serializes a parameter store as an `R2TC` checkpoint, in insertion order.
pub fn encode_checkpoint<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        let t = store.value(id);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.to_f32() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("checkpoint", "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Named arrays stored in a checkpoint, in file order.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4).ok() != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::format("checkpoint", "array name is not UTF-8"))?
            .to_string();
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(4).ok_or_else(|| Error::format("checkpoint", "array too large"))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(Error::format("checkpoint", "trailing bytes after the last array"));
    }
    Ok(out)
}

/// Copies checkpoint values into `store`. Names, count and shapes must
/// match the store exactly.
pub fn load_checkpoint_into<T: Real>(store: &mut ParamStore<T>, bytes: &[u8]) -> Result<()> {
    let arrays = decode_checkpoint(bytes)?;
    if arrays.len() != store.len() {
        return Err(Error::Architecture(format!(
            "checkpoint holds {} arrays, model expects {}",
            arrays.len(),
            store.len()
        )));
    }
    for (name, t) in arrays {
        let id = store
            .get(&name)
            .ok_or_else(|| Error::Architecture(format!("unexpected array {name}")))?;
        let dst = store.value_mut(id);
        if dst.shape() != t.shape() {
            return Err(Error::Architecture(format!(
                "{name}: checkpoint shape {:?}, model shape {:?}",
                t.shape(),
                dst.shape()
            )));
        }
        for (d, &s) in dst.data_mut().iter_mut().zip(t.data()) {
            *d = T::from_f64_lossy(s as f64);
        }
    }
    Ok(())
}

pub fn save_checkpoint<T: Real>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(store))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}
