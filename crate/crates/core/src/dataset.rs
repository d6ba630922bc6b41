//! Train/val/test scene splits on disk.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{encode_scene, scene_stem, sha256_hex, write_atomic, Manifest, ManifestEntry};
use crate::scene::{generate_scene, Scene, SceneConfig};
use crate::train::Splits;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
pub const MANIFEST_FILE: &str = "manifest.txt";

pub fn generate_split(config: &SceneConfig, splits: &Splits, split: &str, seed: u64) -> Result<Vec<Scene>> {
    let (first, count) = splits.range(split)?;
    (first..first + count as u64)
        .into_par_iter()
        .map(|id| generate_scene(config, seed, id))
        .collect()
}

/// Writes a split directory and its manifest. A non-empty directory is
/// only overwritten with `force`.
pub fn write_split(dir: &Path, split: &str, seed: u64, scenes: &[Scene], force: bool) -> Result<Manifest> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        if !force {
            return Err(Error::Config(format!(
                "{} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    let encoded = scenes.par_iter().map(encode_scene).collect::<Result<Vec<_>>>()?;
    let mut files = Vec::with_capacity(2 * scenes.len());
    for (scene, (json, arr)) in scenes.iter().zip(encoded) {
        let stem = scene_stem(scene.scene_id);
        for (ext, bytes) in [("json", &json), ("r2ta", &arr)] {
            let name = format!("{stem}.{ext}");
            write_atomic(&dir.join(&name), bytes)?;
            files.push(ManifestEntry {
                file: name,
                sha256: sha256_hex(bytes),
            });
        }
    }
    let manifest = Manifest {
        split: split.to_string(),
        seed,
        files,
    };
    write_atomic(&dir.join(MANIFEST_FILE), manifest.to_text().as_bytes())?;
    Ok(manifest)
}

/// Scenes of `split` under a dataset root, or of `root` itself when it is
/// already a split directory.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<Scene>> {
    let sub = root.join(split);
    let dir = if sub.is_dir() { sub } else { root.to_path_buf() };
    let scenes = crate::io::read_split(&dir)?;
    if scenes.is_empty() {
        return Err(Error::Config(format!("no scenes found in {}", dir.display())));
    }
    Ok(scenes)
}
