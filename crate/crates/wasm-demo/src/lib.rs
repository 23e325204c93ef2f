//! Browser demo. Three views onto the simulator: the toy bound as the number
//! of auxiliary draws grows, a gallery of synthetic images by domain and
//! class, and a client-by-group heatmap of a partition.

use promptfl::datagen::{generate, SyntheticSpec};
use promptfl::harness::{ExperimentConfig, Track};
use promptfl::objective::ToyModel;
use promptfl::rng::RngKey;
use promptfl::{Error, Result};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const TILE_GAP: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundPoint {
    pub s: usize,
    pub mean: f64,
    pub stderr: f64,
}

/// Monte-Carlo bound for `S = 0..=max_s`. Every S reuses the same keys, so
/// the curve shows the effect of S rather than resampling noise.
pub fn toy_bound_points(keep_prob: f64, j: usize, max_s: usize, draws: usize, seed: u64) -> Result<Vec<BoundPoint>> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::Config("keep probability must lie in (0, 1]".into()));
    }
    if draws < 2 || max_s > 64 {
        return Err(Error::Config("need at least 2 draws and at most 64 auxiliary samples".into()));
    }
    let toy = ToyModel {
        keep_prob,
        ..ToyModel::default()
    };
    (0..=max_s)
        .map(|s| {
            let (mean, stderr) = toy.monte_carlo(s, j, draws, RngKey::new(seed))?;
            Ok(BoundPoint { s, mean, stderr })
        })
        .collect()
}

/// RGBA image of one sample per (domain row, class column), with a one
/// pixel gap between tiles.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    pub width: usize,
    pub height: usize,
    pub rgba: Vec<u8>,
}

pub fn gallery(domains: usize, classes: usize, noise: f64, style_strength: f64, seed: u64) -> Result<Gallery> {
    if domains > 12 || classes > 20 {
        return Err(Error::Config("at most 12 domains and 20 classes".into()));
    }
    let spec = SyntheticSpec {
        num_domains: domains,
        num_classes: classes,
        samples_per_domain_class: 1,
        noise,
        style_strength,
        template_seed: seed,
        style_seed: seed.wrapping_add(1),
        ..SyntheticSpec::default()
    };
    let ds = generate(&spec)?;
    let (h, w) = (spec.height, spec.width);
    let width = classes * (w + TILE_GAP) - TILE_GAP;
    let height = domains * (h + TILE_GAP) - TILE_GAP;
    let (lo, hi) = ds
        .images
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let mut rgba = vec![255u8; width * height * 4];
    for (i, img) in ds.images.iter().enumerate() {
        let (row, col) = (ds.domains[i], ds.labels[i]);
        let px = img.data();
        for y in 0..h {
            for x in 0..w {
                let at = ((row * (h + TILE_GAP) + y) * width + col * (w + TILE_GAP) + x) * 4;
                for ch in 0..3 {
                    // grey images fill all three channels
                    let src = ch.min(spec.channels - 1);
                    rgba[at + ch] = ((px[(src * h + y) * w + x] - lo) * scale).round() as u8;
                }
            }
        }
    }
    Ok(Gallery { width, height, rgba })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Heatmap {
    pub clients: usize,
    /// `[client][class]` sample counts.
    pub by_class: Vec<Vec<usize>>,
    /// `[client][domain]` sample counts.
    pub by_domain: Vec<Vec<usize>>,
}

/// Partition of the track's default dataset at heterogeneity `het` (m for
/// feature shift, s for label shift).
pub fn partition_heatmap(track: &str, het: usize, seed: u64) -> Result<Heatmap> {
    let mut cfg = ExperimentConfig::for_track(Track::parse(track)?);
    cfg.m = het;
    cfg.s = het;
    cfg.data.samples_per_domain_class = 10;
    let ds = generate(&cfg.data)?;
    let p = cfg.partition(&ds, seed)?;
    let count = |of: &[usize], groups: usize| -> Vec<Vec<usize>> {
        p.clients
            .iter()
            .map(|c| {
                let mut row = vec![0; groups];
                for i in c.all() {
                    row[of[i]] += 1;
                }
                row
            })
            .collect()
    };
    Ok(Heatmap {
        clients: p.clients.len(),
        by_class: count(&ds.labels, ds.num_classes),
        by_domain: count(&ds.domains, ds.num_domains),
    })
}

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// JSON array of `{s, mean, stderr}`.
#[wasm_bindgen(js_name = toyBound)]
pub fn toy_bound(keep_prob: f64, j: u32, max_s: u32, draws: u32, seed: u32) -> std::result::Result<String, JsValue> {
    let pts = toy_bound_points(keep_prob, j as usize, max_s as usize, draws as usize, seed.into()).map_err(js_err)?;
    serde_json::to_string(&pts).map_err(js_err)
}

#[wasm_bindgen(js_name = GalleryImage)]
pub struct GalleryImage(Gallery);

#[wasm_bindgen(js_class = GalleryImage)]
impl GalleryImage {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> u32 {
        self.0.width as u32
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> u32 {
        self.0.height as u32
    }

    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.0.rgba.clone()
    }
}

#[wasm_bindgen(js_name = renderGallery)]
pub fn render_gallery(
    domains: u32,
    classes: u32,
    noise: f64,
    style_strength: f64,
    seed: u32,
) -> std::result::Result<GalleryImage, JsValue> {
    gallery(domains as usize, classes as usize, noise, style_strength, seed.into())
        .map(GalleryImage)
        .map_err(js_err)
}

/// JSON `{clients, by_class, by_domain}`.
#[wasm_bindgen(js_name = partitionCounts)]
pub fn partition_counts(track: &str, het: u32, seed: u32) -> std::result::Result<String, JsValue> {
    let h = partition_heatmap(track, het as usize, seed.into()).map_err(js_err)?;
    serde_json::to_string(&h).map_err(js_err)
}
