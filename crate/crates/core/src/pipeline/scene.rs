//! Synthetic small-object scenes: textured rectangles over a noisy background.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxgeom::{iou, Box};
use crate::error::{Error, Result};
use crate::matching::Target;
use crate::numerics::{Rng, Tensor};

const MAX_OVERLAP: f64 = 0.3;
const PLACEMENT_TRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub image_size: usize,
    pub classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_side: usize,
    pub max_side: usize,
    pub clutter: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 96,
            classes: 3,
            min_objects: 3,
            max_objects: 12,
            min_side: 3,
            max_side: 12,
            clutter: 0.3,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::Config(format!("image_size {} must be a positive multiple of 32", self.image_size)));
        }
        if self.classes == 0 {
            return Err(Error::Config("classes must be at least 1".into()));
        }
        if self.min_objects > self.max_objects || self.min_side == 0 || self.min_side > self.max_side {
            return Err(Error::Config("object count and side ranges must be non-empty".into()));
        }
        if 4 * self.max_side >= self.image_size {
            return Err(Error::Config(format!(
                "max_side {} must stay below image_size/4 = {}",
                self.max_side,
                self.image_size / 4
            )));
        }
        if !(0.0..=1.0).contains(&self.clutter) {
            return Err(Error::Config("clutter must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub size: usize,
    /// Row-major grayscale bytes.
    pub pixels: Vec<u8>,
    pub annotations: Vec<Target>,
}

impl Scene {
    /// `[1, H, W]` with intensities in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        Tensor::new(&[1, self.size, self.size], data).expect("square scene")
    }

    /// Ground-truth area in pixels.
    pub fn pixel_area(&self, b: &Box) -> f64 {
        b.area() * (self.size * self.size) as f64
    }
}

/// Texture value at `(dx, dy)` inside an object of class `label`.
fn texture(label: usize, dx: usize, dy: usize) -> f64 {
    let shade = 1.0 - 0.08 * (label / 3) as f64;
    let v = match label % 3 {
        0 => 230.0,
        1 => {
            if dx % 2 == 0 {
                205.0
            } else {
                105.0
            }
        }
        _ => {
            if (dx + dy) % 2 == 0 {
                150.0
            } else {
                60.0
            }
        }
    };
    v * shade
}

fn place(cfg: &SceneConfig, rng: &mut Rng) -> Option<Vec<(usize, usize, usize, usize, usize)>> {
    let s = cfg.image_size;
    let n = rng.int_range(cfg.min_objects, cfg.max_objects);
    let mut rects: Vec<(usize, usize, usize, usize, usize)> = Vec::with_capacity(n);
    let mut boxes: Vec<Box> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut ok = false;
        for _ in 0..PLACEMENT_TRIES {
            let w = rng.int_range(cfg.min_side, cfg.max_side);
            let h = rng.int_range(cfg.min_side, cfg.max_side);
            let x = rng.int_range(0, s - w);
            let y = rng.int_range(0, s - h);
            let b = pixel_box(x, y, w, h, s);
            if boxes.iter().all(|o| iou(o, &b).map(|v| v <= MAX_OVERLAP).unwrap_or(false)) {
                let label = rng.int_range(0, cfg.classes - 1);
                rects.push((x, y, w, h, label));
                boxes.push(b);
                ok = true;
                break;
            }
        }
        if !ok {
            return None;
        }
    }
    Some(rects)
}

fn pixel_box(x: usize, y: usize, w: usize, h: usize, s: usize) -> Box {
    let s = s as f64;
    Box::new_unchecked((x as f64 + w as f64 / 2.0) / s, (y as f64 + h as f64 / 2.0) / s, w as f64 / s, h as f64 / s)
}

pub fn gen_scene(cfg: &SceneConfig, id: u64) -> Scene {
    let s = cfg.image_size;
    let mut attempt = 0u64;
    let (mut rng, rects) = loop {
        let mut rng = Rng::new(cfg.seed).fork(id.wrapping_mul(1_000_003).wrapping_add(attempt));
        if let Some(r) = place(cfg, &mut rng) {
            break (rng, r);
        }
        attempt += 1;
    };
    let mut px = vec![0f64; s * s];
    let base = 35.0;
    for v in px.iter_mut() {
        *v = base + cfg.clutter * 70.0 * rng.uniform();
    }
    let mut annotations = Vec::with_capacity(rects.len());
    for &(x, y, w, h, label) in &rects {
        for dy in 0..h {
            for dx in 0..w {
                px[(y + dy) * s + x + dx] = texture(label, dx, dy);
            }
        }
        annotations.push(Target {
            bbox: pixel_box(x, y, w, h, s),
            label,
        });
    }
    // sensor noise on top of everything
    let noise = 10.0 * cfg.clutter;
    let pixels = px
        .into_iter()
        .map(|v| (v + noise * (rng.uniform() - 0.5) * 2.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    Scene {
        id,
        size: s,
        pixels,
        annotations,
    }
}

pub fn gen_dataset(cfg: &SceneConfig, n: usize) -> Result<Vec<Scene>> {
    cfg.validate()?;
    Ok((0..n as u64).map(|i| gen_scene(cfg, i)).collect())
}

/// Every fifth scene (ids 4, 9, 14, ...) goes to validation.
pub fn split_train_val(scenes: &[Scene]) -> (Vec<Scene>, Vec<Scene>) {
    scenes.iter().cloned().partition(|s| s.id % 5 != 4)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub count: usize,
    pub seed: u64,
    pub image_size: usize,
    pub classes: usize,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    id: u64,
    pixels: String,
    annotations: Vec<Target>,
}

pub const DATASET_FORMAT: &str = "tinydetr-dataset-v1";

pub fn write_dataset(path: &Path, cfg: &SceneConfig, scenes: &[Scene]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        count: scenes.len(),
        seed: cfg.seed,
        image_size: cfg.image_size,
        classes: cfg.classes,
    };
    let mut put = |v: String| writeln!(w, "{v}").map_err(|e| Error::io(path, e));
    put(serde_json::to_string(&header).expect("header serializes"))?;
    for s in scenes {
        let rec = SceneRecord {
            id: s.id,
            pixels: hex::encode(&s.pixels),
            annotations: s.annotations.clone(),
        };
        put(serde_json::to_string(&rec).expect("record serializes"))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Scene>)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = std::io::BufReader::new(f).lines();
    let parse_err = |n: usize, e: &dyn std::fmt::Display| Error::Parse(format!("{}:{n}: {e}", path.display()));
    let first = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("{}: missing header", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let header: DatasetHeader = serde_json::from_str(&first).map_err(|e| parse_err(1, &e))?;
    if header.format != DATASET_FORMAT {
        return Err(parse_err(1, &format!("unknown format '{}'", header.format)));
    }
    let mut scenes = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord = serde_json::from_str(&line).map_err(|e| parse_err(i + 2, &e))?;
        let pixels = hex::decode(&rec.pixels).map_err(|e| parse_err(i + 2, &e))?;
        if pixels.len() != header.image_size * header.image_size {
            return Err(parse_err(i + 2, &format!("{} pixels for a {0}x{0} image", header.image_size)));
        }
        for a in &rec.annotations {
            a.bbox.validate().map_err(|e| parse_err(i + 2, &e))?;
        }
        scenes.push(Scene {
            id: rec.id,
            size: header.image_size,
            pixels,
            annotations: rec.annotations,
        });
    }
    if scenes.len() != header.count {
        return Err(parse_err(1, &format!("header count {} but {} records", header.count, scenes.len())));
    }
    Ok((header, scenes))
}
