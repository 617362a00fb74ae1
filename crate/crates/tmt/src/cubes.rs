//! Feature-cube files on disk.
//!
//! A tracklet is stored as `<stem>.tmtc` (the binary cube triple, see
//! [`tmt_core::data::codec`]) next to `<stem>.toml` carrying its identity,
//! camera and a free-form source note. A directory of such pairs is a
//! tracklet set, read in file-name order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tmt_core::data::codec::{decode_cubes, encode_cubes};
use tmt_core::data::{Frames, Tracklet};
use tmt_core::pooling::FeatureCube;

use crate::error::{at_path, AppError, Result};

pub const CUBE_EXTENSION: &str = "tmtc";
pub const SIDECAR_EXTENSION: &str = "toml";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CubeMeta {
    pub identity: usize,
    pub camera: usize,
    #[serde(default)]
    pub source: String,
}

pub fn sidecar_path(cube_path: &Path) -> PathBuf {
    cube_path.with_extension(SIDECAR_EXTENSION)
}

pub fn write_cube_file(path: &Path, cubes: &[FeatureCube; 3], meta: &CubeMeta) -> Result<()> {
    let bytes = encode_cubes(cubes)?;
    let side = toml::to_string(meta).map_err(|e| AppError::format(sidecar_path(path), e))?;
    fs::write(path, bytes).map_err(|e| AppError::io(path, e))?;
    let sp = sidecar_path(path);
    fs::write(&sp, side).map_err(|e| AppError::io(sp, e))
}

/// Reads a cube file and its sidecar. Nothing is returned unless both parse
/// completely.
pub fn read_cube_file(path: &Path) -> Result<([FeatureCube; 3], CubeMeta)> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    let cubes = decode_cubes(&bytes).map_err(at_path(path))?;
    let sp = sidecar_path(path);
    let text = fs::read_to_string(&sp).map_err(|e| AppError::io(&sp, e))?;
    let meta: CubeMeta = toml::from_str(&text).map_err(|e| AppError::format(&sp, e))?;
    Ok((cubes, meta))
}

/// Cube files of `dir`, sorted by file name.
pub fn list_cube_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| AppError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| AppError::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == CUBE_EXTENSION) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Every tracklet stored in `dir` with the file it came from. An empty
/// directory is an error.
pub fn load_tracklet_files(dir: &Path) -> Result<Vec<(PathBuf, Tracklet)>> {
    let files = list_cube_files(dir)?;
    if files.is_empty() {
        return Err(AppError::Validation(format!(
            "{} contains no .{CUBE_EXTENSION} files",
            dir.display()
        )));
    }
    files
        .into_iter()
        .map(|p| {
            let (cubes, meta) = read_cube_file(&p)?;
            let t = Tracklet {
                identity: meta.identity,
                camera: meta.camera,
                frames: Frames::Cubes(cubes),
            };
            Ok((p, t))
        })
        .collect()
}

/// Every tracklet stored in `dir`, in file-name order.
pub fn load_tracklets(dir: &Path) -> Result<Vec<Tracklet>> {
    Ok(load_tracklet_files(dir)?.into_iter().map(|(_, t)| t).collect())
}

/// Writes cube tracklets as `id{identity}_cam{camera}_{index}.tmtc`.
pub fn write_tracklets(dir: &Path, tracklets: &[Tracklet], source: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    let mut paths = Vec::with_capacity(tracklets.len());
    for (i, t) in tracklets.iter().enumerate() {
        let Frames::Cubes(cubes) = &t.frames else {
            return Err(AppError::Validation(format!(
                "tracklet {i} holds images; only feature cubes can be written"
            )));
        };
        let path = dir.join(format!(
            "id{:05}_cam{:03}_{i:05}.{CUBE_EXTENSION}",
            t.identity, t.camera
        ));
        let meta = CubeMeta {
            identity: t.identity,
            camera: t.camera,
            source: source.to_string(),
        };
        write_cube_file(&path, cubes, &meta)?;
        paths.push(path);
    }
    Ok(paths)
}
