//! COCO-style annotation files.
//!
//! Only `images[].id` and `annotations[].{id, image_id, bbox}` are read;
//! `category_id` is carried along but never used for training. Scene files
//! written by this crate add two optional top-level keys: `candidates`
//! (`[{image_id, bbox, quality?}]`) and `stride` (pixels per map cell).

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::geometry::{Box, QualityTargets};
use crate::harness::io::write_atomic;
use crate::harness::store::{read_maps, write_maps};
use crate::scene::{Candidate, GtBox, Scene};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CocoDataset {
    pub image_ids: Vec<u64>,
    pub boxes: BTreeMap<u64, Vec<GtBox>>,
    pub candidates: BTreeMap<u64, Vec<Candidate>>,
    pub stride: Option<f64>,
    /// Annotations or candidates skipped because they were malformed.
    pub warnings: usize,
}

fn parse_bbox(v: Option<&Value>) -> Option<Box> {
    let arr = v?.as_array()?;
    if arr.len() != 4 {
        return None;
    }
    let p: Vec<f64> = arr.iter().map(Value::as_f64).collect::<Option<_>>()?;
    let b = Box::new(p[0], p[1], p[2], p[3]);
    b.is_valid().then_some(b)
}

pub fn parse_coco(text: &str) -> Result<CocoDataset> {
    let root: Value = serde_json::from_str(text)?;
    let missing = |k: &str| Error::Format(format!("missing or malformed `{k}` array"));
    let images = root.get("images").and_then(Value::as_array).ok_or_else(|| missing("images"))?;
    let annotations = root.get("annotations").and_then(Value::as_array).ok_or_else(|| missing("annotations"))?;
    let mut ds = CocoDataset::default();
    for img in images {
        let id = img.get("id").and_then(Value::as_u64).ok_or_else(|| Error::Format("image without integer `id`".into()))?;
        if ds.boxes.insert(id, Vec::new()).is_some() {
            return Err(Error::Format(format!("duplicate image id {id}")));
        }
        ds.candidates.insert(id, Vec::new());
        ds.image_ids.push(id);
    }
    for ann in annotations {
        let parsed = (|| {
            let id = ann.get("id")?.as_u64()?;
            let image_id = ann.get("image_id")?.as_u64()?;
            let bbox = parse_bbox(ann.get("bbox"))?;
            let category = ann.get("category_id").and_then(Value::as_u64);
            Some((image_id, GtBox { id, bbox, category }))
        })();
        match parsed.and_then(|(img, g)| ds.boxes.get_mut(&img).map(|v| v.push(g))) {
            Some(()) => {}
            None => ds.warnings += 1,
        }
    }
    if let Some(cands) = root.get("candidates") {
        let cands = cands.as_array().ok_or_else(|| missing("candidates"))?;
        for c in cands {
            let parsed = (|| {
                let image_id = c.get("image_id")?.as_u64()?;
                let bbox = parse_bbox(c.get("bbox"))?;
                let quality = match c.get("quality") {
                    None | Some(Value::Null) => None,
                    Some(q) => Some(serde_json::from_value::<QualityTargets>(q.clone()).ok().filter(QualityTargets::is_valid)?),
                };
                Some((image_id, Candidate { bbox, quality }))
            })();
            match parsed.and_then(|(img, cand)| ds.candidates.get_mut(&img).map(|v| v.push(cand))) {
                Some(()) => {}
                None => ds.warnings += 1,
            }
        }
    }
    if let Some(s) = root.get("stride") {
        let s = s.as_f64().filter(|s| *s > 0.0 && s.is_finite()).ok_or_else(|| Error::Format("`stride` must be a positive number".into()))?;
        ds.stride = Some(s);
    }
    Ok(ds)
}

pub fn load_coco_annotations(path: &Path) -> Result<CocoDataset> {
    parse_coco(&std::fs::read_to_string(path)?)
}

pub fn scenes_to_json(scenes: &[Scene], stride: f64) -> Value {
    let images: Vec<Value> = scenes
        .iter()
        .map(|s| json!({"id": s.image_id, "width": s.map.width(), "height": s.map.height()}))
        .collect();
    let bbox = |b: &Box| json!([b.x, b.y, b.w, b.h]);
    let mut annotations = Vec::new();
    let mut candidates = Vec::new();
    for s in scenes {
        for g in &s.gt {
            let mut a = json!({"id": g.id, "image_id": s.image_id, "bbox": bbox(&g.bbox)});
            if let Some(c) = g.category {
                a["category_id"] = json!(c);
            }
            annotations.push(a);
        }
        for c in &s.candidates {
            let mut v = json!({"image_id": s.image_id, "bbox": bbox(&c.bbox)});
            if let Some(q) = &c.quality {
                v["quality"] = serde_json::to_value(q).expect("quality serialises");
            }
            candidates.push(v);
        }
    }
    json!({"images": images, "annotations": annotations, "candidates": candidates, "stride": stride})
}

/// Writes scenes as an annotation file plus an `OFM1` map store in image order.
pub fn save_scenes(scenes: &[Scene], stride: f64, annotations: &Path, maps: &Path) -> Result<()> {
    let maps_vec: Vec<_> = scenes.iter().map(|s| s.map.clone()).collect();
    write_maps(maps, &maps_vec)?;
    write_atomic(annotations, &serde_json::to_vec(&scenes_to_json(scenes, stride))?)
}

/// Reads scenes back. Maps are matched to `images[]` by position.
pub fn load_scenes(annotations: &Path, maps: &Path) -> Result<(Vec<Scene>, CocoDataset)> {
    let mut ds = load_coco_annotations(annotations)?;
    let maps = read_maps(maps)?;
    if maps.len() != ds.image_ids.len() {
        return Err(Error::Format(format!("{} maps for {} images", maps.len(), ds.image_ids.len())));
    }
    let scenes = ds
        .image_ids
        .iter()
        .zip(maps)
        .map(|(&id, map)| Scene {
            image_id: id,
            map,
            gt: ds.boxes.get(&id).cloned().unwrap_or_default(),
            candidates: ds.candidates.remove(&id).unwrap_or_default(),
        })
        .collect();
    Ok((scenes, ds))
}
