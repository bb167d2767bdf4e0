//! Deterministic synthetic detection scenes and the on-disk dataset format.
//!
//! Scenes are colored geometric shapes on a noisy gray background with
//! compositional "<color> <shape>" names. Layout on disk:
//! `<root>/<split>/images/*.png`, `<root>/<split>/annotations.jsonl`,
//! `<root>/manifest.json`.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::iou_cxcywh;
use crate::error::{Error, Result};

/// Name of the PRNG recorded in the manifest; regeneration is bit-identical
/// only under the same algorithm.
pub const PRNG_NAME: &str = "chacha8";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub image_size: usize,
    pub colors: Vec<String>,
    pub shapes: Vec<String>,
    pub object_count_range: (usize, usize),
    pub min_size: f64,
    pub max_size: f64,
    pub overlap_cap: f64,
    pub max_attempts: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            colors: ["red", "green", "blue", "yellow"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            shapes: ["circle", "square", "triangle"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            object_count_range: (1, 6),
            min_size: 0.15,
            max_size: 0.4,
            overlap_cap: 0.3,
            max_attempts: 1000,
        }
    }
}

impl GenConfig {
    /// All category names, sorted: |colors| x |shapes| entries.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .colors
            .iter()
            .flat_map(|c| self.shapes.iter().map(move |s| format!("{} {}", c, s)))
            .collect();
        v.sort();
        v
    }

    fn rgb_of(&self, color: &str) -> [u8; 3] {
        match color {
            "red" => [220, 50, 47],
            "green" => [60, 180, 75],
            "blue" => [50, 90, 220],
            "yellow" => [230, 220, 50],
            // Unknown colors get a deterministic hashed hue.
            other => {
                let h = other.bytes().fold(7u32, |a, b| a.wrapping_mul(31) + b as u32);
                [
                    64 + (h % 192) as u8,
                    64 + ((h / 192) % 192) as u8,
                    64 + ((h / 36864) % 192) as u8,
                ]
            }
        }
    }
}

/// One synthetic scene: RGB raster plus ground-truth boxes and names.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: u64,
    pub image_size: usize,
    /// Row-major RGB bytes, `image_size * image_size * 3`.
    pub image: Vec<u8>,
    /// (cx, cy, w, h) normalized to [0,1].
    pub boxes: Vec<[f64; 4]>,
    pub names: Vec<String>,
}

impl Scene {
    pub fn validate(&self, max_objects: usize, min_wh: f64, overlap_cap: f64) -> Result<()> {
        if self.boxes.len() != self.names.len() {
            return Err(Error::Validation(format!(
                "scene {}: {} boxes vs {} names",
                self.scene_id,
                self.boxes.len(),
                self.names.len()
            )));
        }
        if self.boxes.is_empty() || self.boxes.len() > max_objects {
            return Err(Error::Validation(format!(
                "scene {}: object count {} outside [1, {}]",
                self.scene_id,
                self.boxes.len(),
                max_objects
            )));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            let [cx, cy, w, h] = *b;
            let inside = cx - w / 2.0 >= -1e-9
                && cy - h / 2.0 >= -1e-9
                && cx + w / 2.0 <= 1.0 + 1e-9
                && cy + h / 2.0 <= 1.0 + 1e-9;
            if !inside || w < min_wh - 1e-9 || h < min_wh - 1e-9 {
                return Err(Error::Validation(format!(
                    "scene {}: box {} invalid: {:?}",
                    self.scene_id, i, b
                )));
            }
        }
        for i in 0..self.boxes.len() {
            for j in (i + 1)..self.boxes.len() {
                let iou = iou_cxcywh(self.boxes[i], self.boxes[j]);
                if iou > overlap_cap + 1e-9 {
                    return Err(Error::Validation(format!(
                        "scene {}: boxes {} and {} overlap with IoU {:.3}",
                        self.scene_id, i, j, iou
                    )));
                }
            }
        }
        Ok(())
    }

    /// Image as f64 normalized to [-1, 1], shape (3, S, S) row-major.
    pub fn image_chw(&self) -> Vec<f64> {
        let s = self.image_size;
        let mut out = vec![0.0; 3 * s * s];
        for y in 0..s {
            for x in 0..s {
                for c in 0..3 {
                    let v = self.image[(y * s + x) * 3 + c] as f64;
                    out[c * s * s + y * s + x] = (v / 255.0 - 0.5) * 2.0;
                }
            }
        }
        out
    }
}

/// Deterministic scene generation from a seed and config.
pub fn generate_scene(rng_seed: u64, config: &GenConfig) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let s = config.image_size;
    let min_wh = config.min_size.max(4.0 / s as f64);
    let (lo, hi) = config.object_count_range;
    if lo < 1 || hi < lo {
        return Err(Error::Config(format!(
            "bad object_count_range ({}, {})",
            lo, hi
        )));
    }
    let count = rng.gen_range(lo..=hi);

    let mut boxes: Vec<[f64; 4]> = Vec::with_capacity(count);
    let mut names = Vec::with_capacity(count);
    let mut specs: Vec<(usize, usize)> = Vec::with_capacity(count); // (color, shape)
    for object in 0..count {
        let color_idx = rng.gen_range(0..config.colors.len());
        let shape_idx = rng.gen_range(0..config.shapes.len());
        let mut placed = false;
        for _attempt in 0..config.max_attempts {
            let w = rng.gen_range(min_wh..=config.max_size);
            let h = rng.gen_range(min_wh..=config.max_size);
            let cx = rng.gen_range(w / 2.0..=1.0 - w / 2.0);
            let cy = rng.gen_range(h / 2.0..=1.0 - h / 2.0);
            let cand = [cx, cy, w, h];
            if boxes
                .iter()
                .all(|b| iou_cxcywh(*b, cand) <= config.overlap_cap)
            {
                boxes.push(cand);
                names.push(format!(
                    "{} {}",
                    config.colors[color_idx], config.shapes[shape_idx]
                ));
                specs.push((color_idx, shape_idx));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::PlacementExhausted {
                scene_id: rng_seed,
                object,
                attempts: config.max_attempts,
            });
        }
    }

    // Gray background 128 with per-pixel uniform noise in [-8, 8].
    let mut image = vec![0u8; s * s * 3];
    for y in 0..s {
        for x in 0..s {
            let noise: i16 = rng.gen_range(-8..=8);
            let v = (128i16 + noise).clamp(0, 255) as u8;
            let p = (y * s + x) * 3;
            image[p] = v;
            image[p + 1] = v;
            image[p + 2] = v;
        }
    }
    for (k, b) in boxes.iter().enumerate() {
        let rgb = config.rgb_of(&config.colors[specs[k].0]);
        let shape = config.shapes[specs[k].1].as_str();
        fill_shape(&mut image, s, *b, shape, rgb);
    }

    let scene = Scene {
        scene_id: rng_seed,
        image_size: s,
        image,
        boxes,
        names,
    };
    scene.validate(hi, min_wh, config.overlap_cap)?;
    Ok(scene)
}

fn fill_shape(image: &mut [u8], s: usize, b: [f64; 4], shape: &str, rgb: [u8; 3]) {
    let [cx, cy, w, h] = b;
    for y in 0..s {
        let py = (y as f64 + 0.5) / s as f64;
        for x in 0..s {
            let px = (x as f64 + 0.5) / s as f64;
            let inside = match shape {
                "circle" => {
                    let dx = (px - cx) / (w / 2.0);
                    let dy = (py - cy) / (h / 2.0);
                    dx * dx + dy * dy <= 1.0
                }
                "triangle" => {
                    // Apex at top-center, base along the bottom edge.
                    let t = (py - (cy - h / 2.0)) / h;
                    (0.0..=1.0).contains(&t) && (px - cx).abs() <= t * w / 2.0
                }
                // Squares and unknown shapes fill the whole box.
                _ => px >= cx - w / 2.0 && px <= cx + w / 2.0 && py >= cy - h / 2.0 && py <= cy + h / 2.0,
            };
            if inside {
                let p = (y * s + x) * 3;
                image[p] = rgb[0];
                image[p + 1] = rgb[1];
                image[p + 2] = rgb[2];
            }
        }
    }
}

// ---- on-disk format ----

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SceneRecord {
    scene_id: u64,
    file: String,
    boxes: Vec<[f64; 4]>,
    names: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitInfo {
    pub image_dir: String,
    pub annotations: String,
    pub count: usize,
    pub split_seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub prng: String,
    pub seed: u64,
    pub vocabulary: Vec<String>,
    pub config: GenConfig,
    pub splits: BTreeMap<String, SplitInfo>,
}

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let bytes = std::fs::read(&path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join("manifest.json");
        let mut f = std::fs::File::create(path)?;
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        f.write_all(text.as_bytes())?;
        Ok(())
    }
}

/// Split seeds are offset so train/val scene seeds never collide.
pub fn split_seed(base_seed: u64, split: &str) -> u64 {
    let tag = fnv_str(split) | 1;
    base_seed.wrapping_add(tag.wrapping_mul(0x1_0000_0000))
}

fn fnv_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
    }
    h % 1024
}

/// Generate `count` scenes for `split` (seed = split_seed + scene_id each)
/// and write them under `root`, updating the manifest.
pub fn generate_split(
    root: &Path,
    split: &str,
    count: usize,
    base_seed: u64,
    config: &GenConfig,
) -> Result<DatasetManifest> {
    let sseed = split_seed(base_seed, split);
    let scenes: Result<Vec<Scene>> = (0..count as u64)
        .map(|i| {
            let mut scene = generate_scene(sseed.wrapping_add(i), config)?;
            scene.scene_id = i;
            Ok(scene)
        })
        .collect();
    write_dataset(&scenes?, root, split, base_seed, sseed, config)
}

/// Write scenes as PNGs + JSONL annotations and update `manifest.json`.
pub fn write_dataset(
    scenes: &[Scene],
    root: &Path,
    split: &str,
    base_seed: u64,
    sseed: u64,
    config: &GenConfig,
) -> Result<DatasetManifest> {
    let split_dir = root.join(split);
    let image_dir = split_dir.join("images");
    std::fs::create_dir_all(&image_dir)?;

    let ann_path = split_dir.join("annotations.jsonl");
    let mut ann = std::fs::File::create(&ann_path)?;
    for scene in scenes {
        let file = format!("images/scene_{:06}.png", scene.scene_id);
        let img_path = split_dir.join(&file);
        save_png(scene, &img_path)?;
        let record = SceneRecord {
            scene_id: scene.scene_id,
            file,
            boxes: scene.boxes.clone(),
            names: scene.names.clone(),
        };
        let line = serde_json::to_string(&record).expect("record serializes");
        writeln!(ann, "{}", line)?;
    }

    let mut manifest = DatasetManifest::load(root).unwrap_or_else(|_| DatasetManifest {
        prng: PRNG_NAME.to_string(),
        seed: base_seed,
        vocabulary: config.vocabulary(),
        config: config.clone(),
        splits: BTreeMap::new(),
    });
    manifest.splits.insert(
        split.to_string(),
        SplitInfo {
            image_dir: format!("{}/images", split),
            annotations: format!("{}/annotations.jsonl", split),
            count: scenes.len(),
            split_seed: sseed,
        },
    );
    // Manifest invariant: every annotated name is in the vocabulary.
    for scene in scenes {
        for name in &scene.names {
            if !manifest.vocabulary.contains(name) {
                return Err(Error::Validation(format!(
                    "scene {}: name {:?} missing from vocabulary",
                    scene.scene_id, name
                )));
            }
        }
    }
    manifest.save(root)?;
    Ok(manifest)
}

fn save_png(scene: &Scene, path: &Path) -> Result<()> {
    let s = scene.image_size as u32;
    let img = image::RgbImage::from_raw(s, s, scene.image.clone())
        .expect("image buffer matches dimensions");
    img.save(path)?;
    Ok(())
}

/// Stream scenes of a split back from disk.
pub fn read_dataset(root: &Path, split: &str) -> Result<Vec<Scene>> {
    let split_dir = root.join(split);
    let ann_path = split_dir.join("annotations.jsonl");
    if !ann_path.exists() {
        return Ok(Vec::new());
    }
    let file = std::fs::File::open(&ann_path)?;
    let reader = BufReader::new(file);
    let mut scenes = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SceneRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: ann_path.display().to_string(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        if record.boxes.len() != record.names.len() || record.boxes.is_empty() {
            return Err(Error::Parse {
                path: ann_path.display().to_string(),
                line: idx + 1,
                msg: format!(
                    "{} boxes vs {} names",
                    record.boxes.len(),
                    record.names.len()
                ),
            });
        }
        let img_path = split_dir.join(&record.file);
        let img = image::open(&img_path).map_err(|_| Error::MissingImage {
            scene_id: record.scene_id,
            path: img_path.display().to_string(),
        })?;
        let rgb = img.to_rgb8();
        let image_size = rgb.width() as usize;
        scenes.push(Scene {
            scene_id: record.scene_id,
            image_size,
            image: rgb.into_raw(),
            boxes: record.boxes,
            names: record.names,
        });
    }
    Ok(scenes)
}

/// Paths of a dataset root, resolved for CLI convenience.
pub fn dataset_root(path: &str) -> PathBuf {
    PathBuf::from(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::iou_cxcywh;

    #[test]
    fn generation_is_deterministic() {
        let config = GenConfig::default();
        let a = generate_scene(0, &config).unwrap();
        let b = generate_scene(0, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forced_single_object() {
        let config = GenConfig {
            object_count_range: (1, 1),
            ..GenConfig::default()
        };
        let scene = generate_scene(0, &config).unwrap();
        assert_eq!(scene.boxes.len(), 1);
    }

    #[test]
    fn overlap_cap_holds_with_independent_iou() {
        let config = GenConfig::default();
        let scene = generate_scene(7, &config).unwrap();
        for i in 0..scene.boxes.len() {
            for j in (i + 1)..scene.boxes.len() {
                // Independent pairwise check against the same cap.
                let iou = iou_cxcywh(scene.boxes[i], scene.boxes[j]);
                assert!(iou <= 0.3 + 1e-12, "pair ({},{}) IoU {}", i, j, iou);
            }
        }
    }

    #[test]
    fn impossible_config_reports_placement_exhausted() {
        let config = GenConfig {
            object_count_range: (6, 6),
            min_size: 0.9,
            max_size: 0.95,
            overlap_cap: 0.0,
            max_attempts: 50,
            ..GenConfig::default()
        };
        match generate_scene(0, &config) {
            Err(Error::PlacementExhausted { .. }) => {}
            other => panic!("expected PlacementExhausted, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn vocabulary_is_colors_times_shapes() {
        let config = GenConfig::default();
        assert_eq!(config.vocabulary().len(), 12);
    }

    #[test]
    fn roundtrip_preserves_scenes() {
        let dir = tempfile::tempdir().unwrap();
        let config = GenConfig::default();
        let manifest = generate_split(dir.path(), "train", 10, 0, &config).unwrap();
        assert_eq!(manifest.splits["train"].count, 10);
        let scenes = read_dataset(dir.path(), "train").unwrap();
        assert_eq!(scenes.len(), 10);
        let sseed = manifest.splits["train"].split_seed;
        for (i, scene) in scenes.iter().enumerate() {
            let mut expect = generate_scene(sseed + i as u64, &config).unwrap();
            expect.scene_id = i as u64;
            assert_eq!(scene.names, expect.names);
            assert_eq!(scene.image, expect.image, "PNG roundtrip must be lossless");
            for (a, b) in scene.boxes.iter().zip(&expect.boxes) {
                for k in 0..4 {
                    assert!((a[k] - b[k]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn regeneration_yields_byte_identical_annotations() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let config = GenConfig::default();
        generate_split(dir_a.path(), "train", 5, 123, &config).unwrap();
        generate_split(dir_b.path(), "train", 5, 123, &config).unwrap();
        let a = std::fs::read(dir_a.path().join("train/annotations.jsonl")).unwrap();
        let b = std::fs::read(dir_b.path().join("train/annotations.jsonl")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn malformed_jsonl_line_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let config = GenConfig::default();
        generate_split(dir.path(), "train", 2, 0, &config).unwrap();
        let ann = dir.path().join("train/annotations.jsonl");
        let mut text = std::fs::read_to_string(&ann).unwrap();
        text.push_str("{not json}\n");
        std::fs::write(&ann, text).unwrap();
        match read_dataset(dir.path(), "train") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected Parse error, got {:?}", other.map(|v| v.len())),
        }
    }

    #[test]
    fn mismatched_boxes_and_names_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let split_dir = dir.path().join("train");
        std::fs::create_dir_all(split_dir.join("images")).unwrap();
        let line = r#"{"scene_id":0,"file":"images/x.png","boxes":[[0.5,0.5,0.2,0.2],[0.2,0.2,0.1,0.1],[0.8,0.8,0.1,0.1]],"names":["red circle","blue square"]}"#;
        std::fs::write(split_dir.join("annotations.jsonl"), line).unwrap();
        assert!(matches!(
            read_dataset(dir.path(), "train"),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn missing_image_names_scene_id() {
        let dir = tempfile::tempdir().unwrap();
        let split_dir = dir.path().join("train");
        std::fs::create_dir_all(split_dir.join("images")).unwrap();
        let line = r#"{"scene_id":42,"file":"images/nope.png","boxes":[[0.5,0.5,0.2,0.2]],"names":["red circle"]}"#;
        std::fs::write(split_dir.join("annotations.jsonl"), line).unwrap();
        match read_dataset(dir.path(), "train") {
            Err(Error::MissingImage { scene_id, .. }) => assert_eq!(scene_id, 42),
            other => panic!("expected MissingImage, got {:?}", other.map(|v| v.len())),
        }
    }

    #[test]
    fn empty_dataset_dir_is_empty_stream() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = read_dataset(dir.path(), "val").unwrap();
        assert!(scenes.is_empty());
    }
}
