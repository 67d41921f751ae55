//! Binary PPM images with JSON sidecar annotations.

use super::{Face, Image, Scene};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::roialign::Landmark;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Serialize, Deserialize)]
struct FaceRecord {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    landmarks: Vec<[f64; 3]>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Annotation {
    faces: Vec<FaceRecord>,
    #[serde(default)]
    seed: u64,
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let bad = |detail: &str| Error::Format { what: "PPM", detail: detail.to_string() };
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?.to_string());
    }
    if fields[0] != "P6" {
        return Err(bad("magic is not P6"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let data = bytes.get(pos..pos + w * h * 3).ok_or_else(|| bad("truncated raster"))?.to_vec();
    Ok(Image { width: w, height: h, data })
}

pub fn scene_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.ppm")), dir.join(format!("{stem}.json")))
}

pub fn write_scene(dir: &Path, stem: &str, scene: &Scene) -> Result<()> {
    let (ppm, json) = scene_paths(dir, stem);
    fs::write(ppm, encode_ppm(&scene.image))?;
    let ann = Annotation {
        faces: scene
            .faces
            .iter()
            .map(|f| FaceRecord {
                bbox: f.bbox.to_array(),
                landmarks: f.landmarks.iter().map(|l| [l.x, l.y, if l.visible { 1.0 } else { 0.0 }]).collect(),
            })
            .collect(),
        seed: scene.seed,
    };
    let mut text = serde_json::to_string(&ann)?;
    text.push('\n');
    fs::write(json, text)?;
    Ok(())
}

pub fn read_scene(dir: &Path, stem: &str) -> Result<Scene> {
    let (ppm, json) = scene_paths(dir, stem);
    let image = decode_ppm(&fs::read(ppm)?)?;
    let ann: Annotation = serde_json::from_slice(&fs::read(json)?)?;
    let faces = ann
        .faces
        .into_iter()
        .map(|r| {
            Ok(Face {
                bbox: BBox::new(r.bbox[0], r.bbox[1], r.bbox[2], r.bbox[3])?,
                landmarks: r.landmarks.iter().map(|l| Landmark { x: l[0], y: l[1], visible: l[2] != 0.0 }).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene { image, faces, seed: ann.seed })
}

/// All scenes of a directory, ordered by file stem.
pub fn read_scene_dir(dir: &Path) -> Result<Vec<(String, Scene)>> {
    let mut stems: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension()? == "ppm").then(|| p.file_stem()?.to_str().map(str::to_string))?
        })
        .collect();
    stems.sort();
    stems
        .into_iter()
        .map(|s| read_scene(dir, &s).map(|scene| (s, scene)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate_scene;

    #[test]
    fn ppm_round_trip() {
        let (s, _) = generate_scene(2, 17, 9, 1, (4.0, 6.0)).unwrap();
        assert_eq!(decode_ppm(&encode_ppm(&s.image)).unwrap(), s.image);
        assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\0\0").is_err());
    }

    #[test]
    fn ppm_header_comments() {
        let img = decode_ppm(b"P6\n# a comment\n1 1\n255\n\x01\x02\x03").unwrap();
        assert_eq!(img.get(0, 0), [1, 2, 3]);
    }

    #[test]
    fn scene_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (mut s, _) = generate_scene(7, 64, 48, 2, (10.0, 20.0)).unwrap();
        s.faces[0].landmarks[1].visible = false;
        write_scene(dir.path(), "scene_0", &s).unwrap();
        let back = read_scene(dir.path(), "scene_0").unwrap();
        assert_eq!(back, s);
        let all = read_scene_dir(dir.path()).unwrap();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].0, "scene_0");
    }
}
