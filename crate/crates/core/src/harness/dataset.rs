//! On-disk datasets: one directory per scene (PLY sweep, PNG image, PGM
//! depth, JSON annotations) and a JSON index per split.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Obstacle, Scene, Vehicle};
use crate::camera::{read_depth_pgm, read_png, write_depth_pgm, write_png, CameraModel, DirectionalLight};
use crate::error::{Error, Result};
use crate::lidar::{read_sweep, write_sweep, LidarSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    pub id: usize,
    pub seed: u64,
    pub vehicles: Vec<Vehicle>,
    pub obstacles: Vec<Obstacle>,
    pub camera: CameraModel,
    pub light: DirectionalLight,
    pub lidar: LidarSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: usize,
    pub dir: String,
    pub vehicles: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub scenes: Vec<IndexEntry>,
}

pub const INDEX_FILE: &str = "index.json";

fn scene_dir(id: usize) -> String {
    format!("scene_{id:05}")
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?)
}

pub fn save_scene(scene: &Scene, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_sweep(&scene.sweep, &scene.lidar, &dir.join("sweep.ply"))?;
    write_png(&scene.image, &dir.join("image.png"))?;
    write_depth_pgm(&scene.depth, scene.camera.height, scene.camera.width, &dir.join("depth.pgm"))?;
    let ann = Annotations {
        id: scene.id,
        seed: scene.seed,
        vehicles: scene.vehicles.clone(),
        obstacles: scene.obstacles.clone(),
        camera: scene.camera.clone(),
        light: scene.light,
        lidar: scene.lidar.clone(),
    };
    write_json(&ann, &dir.join("annotations.json"))
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    let ann: Annotations = read_json(&dir.join("annotations.json"))?;
    let (sweep, _) = read_sweep(&dir.join("sweep.ply"), Some(&ann.lidar))?;
    let image = read_png(&dir.join("image.png"))?;
    let (depth, h, w) = read_depth_pgm(&dir.join("depth.pgm"))?;
    if [h, w] != [ann.camera.height, ann.camera.width] || image.shape() != [3, h, w] {
        return Err(Error::format("scene", format!("{}: image/depth sizes disagree with the camera", dir.display())));
    }
    Ok(Scene {
        id: ann.id,
        seed: ann.seed,
        vehicles: ann.vehicles,
        obstacles: ann.obstacles,
        lidar: ann.lidar,
        camera: ann.camera,
        light: ann.light,
        image,
        depth,
        sweep,
    })
}

/// Writes every scene under `dir` plus `dir/index.json`.
pub fn save_dataset(scenes: &[Scene], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = DatasetIndex { scenes: Vec::with_capacity(scenes.len()) };
    for s in scenes {
        let name = scene_dir(s.id);
        save_scene(s, &dir.join(&name))?;
        index.scenes.push(IndexEntry { id: s.id, dir: name, vehicles: s.vehicles.len() });
    }
    write_json(&index, &dir.join(INDEX_FILE))
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let index: DatasetIndex = read_json(&dir.join(INDEX_FILE))?;
    index
        .scenes
        .iter()
        .map(|e| {
            let s = load_scene(&dir.join(&e.dir))?;
            if s.id != e.id {
                return Err(Error::format("dataset index", format!("{} holds scene {}, index says {}", e.dir, s.id, e.id)));
            }
            Ok(s)
        })
        .collect()
}

/// Split directories used by the CLI.
pub fn split_dir(root: &Path, split: &str) -> PathBuf {
    root.join(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{generate_scenes, SceneConfig};

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig { obstacles: [1, 2], ..SceneConfig::default() };
        let scenes = generate_scenes(&cfg, 2, 4, 10).unwrap();
        save_dataset(&scenes, dir.path()).unwrap();
        assert!(dir.path().join("scene_00010").join("image.png").exists());
        assert_eq!(load_dataset(dir.path()).unwrap(), scenes);
    }

    #[test]
    fn index_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = generate_scenes(&SceneConfig::default(), 1, 4, 0).unwrap();
        save_dataset(&scenes, dir.path()).unwrap();
        let bad = DatasetIndex { scenes: vec![IndexEntry { id: 3, dir: scene_dir(0), vehicles: 1 }] };
        write_json(&bad, &dir.path().join(INDEX_FILE)).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }
}
