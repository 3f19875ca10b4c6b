//! On-disk scene container: `scene.json` plus raw little-endian data and
//! label files next to it. Values are `f32` band-major, labels `u16`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HsiCube;
use crate::error::{Error, Result};

pub const SCENE_HEADER: &str = "scene.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneHeader {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub classes: Vec<String>,
    pub dtype: String,
    pub data_file: String,
    pub labels_file: String,
}

fn malformed(detail: impl Into<String>) -> Error {
    Error::Format { what: "scene", detail: detail.into() }
}

/// Writes `scene.json`, `data.f32` and `labels.u16` into `dir`.
///
/// Values are narrowed to `f32`.
pub fn write_scene(dir: &Path, cube: &HsiCube) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = SceneHeader {
        bands: cube.bands(),
        height: cube.height(),
        width: cube.width(),
        classes: cube.class_names().to_vec(),
        dtype: "f32le".into(),
        data_file: "data.f32".into(),
        labels_file: "labels.u16".into(),
    };
    let data: Vec<u8> = cube.values().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    let labels: Vec<u8> = cube.labels().iter().flat_map(|l| l.to_le_bytes()).collect();
    let write = |name: &str, bytes: &[u8]| {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    };
    write(&header.data_file, &data)?;
    write(&header.labels_file, &labels)?;
    write(SCENE_HEADER, serde_json::to_string_pretty(&header)?.as_bytes())
}

/// Reads a scene from a directory holding `scene.json`, or from the header
/// file itself.
pub fn read_scene(path: &Path) -> Result<HsiCube> {
    let header_path = if path.is_dir() { path.join(SCENE_HEADER) } else { path.to_path_buf() };
    let dir = header_path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: SceneHeader = serde_json::from_str(&text)?;
    if header.dtype != "f32le" {
        return Err(malformed(format!("unsupported dtype {}", header.dtype)));
    }
    let n = header.height * header.width;
    let data_path = dir.join(&header.data_file);
    let data = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    if data.len() != 4 * header.bands * n {
        return Err(malformed(format!(
            "{} holds {} bytes, expected {}",
            header.data_file,
            data.len(),
            4 * header.bands * n
        )));
    }
    let labels_path = dir.join(&header.labels_file);
    let raw = fs::read(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    if raw.len() != 2 * n {
        return Err(malformed(format!("{} holds {} bytes, expected {}", header.labels_file, raw.len(), 2 * n)));
    }
    let values = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    let labels = raw.chunks_exact(2).map(|c| u16::from_le_bytes(c.try_into().expect("2 bytes"))).collect();
    HsiCube::new(header.bands, header.height, header.width, values, labels, header.classes)
}
