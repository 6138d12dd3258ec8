//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/scene_0000/{height,valid,human_gt,path_mask}.pgm
//!                   trajectory.json meta.json [weak.pgm]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::bev::Pose2p5D;
use crate::error::{Error, Result};
use crate::grids::{LabelMap, LabelRole};
use crate::pnm::{self, write_atomic};
use crate::synthworld::{generate_scene, scene_spec, SceneRecord, SceneSpec};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const HEIGHT: &str = "height.pgm";
pub const VALID: &str = "valid.pgm";
pub const HUMAN_GT: &str = "human_gt.pgm";
pub const PATH_MASK: &str = "path_mask.pgm";
pub const TRAJECTORY: &str = "trajectory.json";
pub const META: &str = "meta.json";
pub const WEAK: &str = "weak.pgm";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridInfo {
    pub rows: usize,
    pub cols: usize,
    pub resolution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub spec: SceneSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub scenes: Vec<String>,
    pub grid: GridInfo,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub version: u32,
    pub spec: SceneSpec,
    pub reference_index: usize,
}

pub fn scene_name(index: usize) -> String {
    format!("scene_{index:04}")
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_scene(dir: &Path, scene: &SceneRecord) -> Result<()> {
    create_dir(dir)?;
    pnm::write_height_map(&dir.join(HEIGHT), &dir.join(VALID), &scene.heightmap)?;
    pnm::write_label_map(&dir.join(HUMAN_GT), &scene.human_gt)?;
    pnm::write_mask(&dir.join(PATH_MASK), &scene.path_mask)?;
    write_json(&dir.join(TRAJECTORY), &scene.trajectory)?;
    write_json(
        &dir.join(META),
        &SceneMeta {
            version: FORMAT_VERSION,
            spec: scene.spec,
            reference_index: scene.reference_index,
        },
    )
}

pub fn read_scene(dir: &Path) -> Result<SceneRecord> {
    let meta: SceneMeta = read_json(&dir.join(META))?;
    if meta.version != FORMAT_VERSION {
        return Err(Error::format("scene meta", format!("unsupported version {}", meta.version)));
    }
    let heightmap = pnm::read_height_map(&dir.join(HEIGHT), &dir.join(VALID), meta.spec.resolution)?;
    let human_gt = pnm::read_label_map(&dir.join(HUMAN_GT), LabelRole::HumanGt)?;
    let path_mask = pnm::read_mask(&dir.join(PATH_MASK))?;
    let trajectory: Vec<Pose2p5D> = read_json(&dir.join(TRAJECTORY))?;
    human_gt.labels().ensure_shape(heightmap.shape())?;
    path_mask.ensure_shape(heightmap.shape())?;
    if meta.reference_index >= trajectory.len() {
        return Err(Error::format("scene meta", "reference index outside the trajectory"));
    }
    Ok(SceneRecord {
        heightmap,
        human_gt,
        path_mask,
        trajectory,
        reference_index: meta.reference_index,
        spec: meta.spec,
    })
}

pub fn read_weak(dir: &Path) -> Result<LabelMap> {
    pnm::read_label_map(&dir.join(WEAK), LabelRole::Weak)
}

/// Generates `count` scenes from `template` under `root` and writes the
/// manifest. Re-running with the same arguments rewrites identical bytes.
pub fn generate_dataset(root: &Path, template: &SceneSpec, seed: u64, count: usize) -> Result<DatasetManifest> {
    template.validate()?;
    create_dir(root)?;
    let mut names = Vec::with_capacity(count);
    for i in 0..count {
        let spec = scene_spec(template, seed, i);
        let scene = generate_scene(&spec)?;
        let name = scene_name(i);
        write_scene(&root.join(&name), &scene)?;
        names.push(name);
    }
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        scenes: names,
        grid: GridInfo {
            rows: template.rows,
            cols: template.cols,
            resolution: template.resolution,
        },
        provenance: Provenance {
            seed,
            spec: *template,
        },
    };
    write_json(&root.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// A dataset directory with a parsed manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Dataset> {
        let manifest: DatasetManifest = read_json(&root.join(MANIFEST))?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::format("manifest", format!("unsupported version {}", manifest.version)));
        }
        for name in &manifest.scenes {
            if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
                return Err(Error::format("manifest", format!("bad scene name {name:?}")));
            }
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.scenes.is_empty()
    }

    pub fn scene_dir(&self, index: usize) -> PathBuf {
        self.root.join(&self.manifest.scenes[index])
    }

    pub fn scene(&self, index: usize) -> Result<SceneRecord> {
        read_scene(&self.scene_dir(index))
    }

    pub fn weak(&self, index: usize) -> Result<LabelMap> {
        read_weak(&self.scene_dir(index))
    }
}
