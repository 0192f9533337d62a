//! Builds balanced, normalized, split training corpora from paired
//! image/label rasters.
//!
//! Patches persist as RSTv1 files named `<anchor-row>_<anchor-col>.rst` under
//! `images/` and `labels/`; the split manifest is JSON
//! `{seed, ratio, train, val}`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::raster::{read_raster, write_raster, Dtype, Raster, Samples};
use crate::{Error, Result};

/// Paired (image patch, label patch) sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    /// F32 patch, bands x tile x tile.
    pub image: Raster,
    /// U8 patch, tile x tile, values in {0, 1}.
    pub label: Raster,
    /// (row, col) anchor in the source raster.
    pub anchor: (usize, usize),
    /// Whether the patch contains at least one positive pixel.
    pub positive: bool,
}

impl PatchPair {
    pub fn id(&self) -> String {
        format!("{}_{}", self.anchor.0, self.anchor.1)
    }
}

/// Train/validation split over patch ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratio: f64,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Cuts aligned image/label rasters into non-overlapping tile x tile patches;
/// partial edge tiles are discarded.
pub fn extract_patches(image: &Raster, labels: &Raster, tile: usize) -> Result<Vec<PatchPair>> {
    if tile == 0 {
        return Err(Error::InvalidArgument("tile size must be positive".into()));
    }
    if !image.aligned_with(labels) {
        return Err(Error::Alignment(format!(
            "image is {}x{}, labels are {}x{} (or geotransforms differ)",
            image.height(),
            image.width(),
            labels.height(),
            labels.width()
        )));
    }
    if image.dtype() != Dtype::F32 {
        return Err(Error::InvalidArgument("image raster must be F32".into()));
    }
    if labels.dtype() != Dtype::U8 || labels.bands() != 1 {
        return Err(Error::InvalidArgument(
            "label raster must be single-band U8".into(),
        ));
    }
    if labels.as_u8()?.iter().any(|&v| v > 1) {
        return Err(Error::Validation("label values must be in {0, 1}".into()));
    }

    let (h, w) = image.dims();
    let mut patches = Vec::new();
    let mut row = 0;
    while row + tile <= h {
        let mut col = 0;
        while col + tile <= w {
            let img = image.crop((row, col), tile)?;
            let lab = labels.crop((row, col), tile)?;
            let positive = lab.as_u8()?.iter().any(|&v| v == 1);
            patches.push(PatchPair {
                image: img,
                label: lab,
                anchor: (row, col),
                positive,
            });
            col += tile;
        }
        row += tile;
    }
    Ok(patches)
}

/// Random undersampling: keeps every minority-class patch plus an equally
/// sized seeded sample of the majority class. Output preserves input order
/// and is deterministic for a fixed seed.
pub fn balance_undersample(patches: Vec<PatchPair>, seed: u64) -> Result<Vec<PatchPair>> {
    let pos: Vec<usize> = patches
        .iter()
        .enumerate()
        .filter(|(_, p)| p.positive)
        .map(|(i, _)| i)
        .collect();
    let neg: Vec<usize> = patches
        .iter()
        .enumerate()
        .filter(|(_, p)| !p.positive)
        .map(|(i, _)| i)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::DegenerateCorpus(format!(
            "undersampling needs both classes, got {} positive / {} negative",
            pos.len(),
            neg.len()
        )));
    }
    let (minority, majority) = if pos.len() <= neg.len() {
        (pos, neg)
    } else {
        (neg, pos)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampled = rand::seq::index::sample(&mut rng, majority.len(), minority.len());
    let mut keep = vec![false; patches.len()];
    for i in minority {
        keep[i] = true;
    }
    for j in sampled {
        keep[majority[j]] = true;
    }
    Ok(patches
        .into_iter()
        .zip(keep)
        .filter_map(|(p, k)| k.then_some(p))
        .collect())
}

/// Seeded shuffle followed by a prefix split: floor(ratio * n) ids go to
/// train, the remainder to val.
pub fn split(patches: &[PatchPair], ratio: f64, seed: u64) -> Result<SplitManifest> {
    let ids: Vec<String> = patches.iter().map(|p| p.id()).collect();
    split_ids(ids, ratio, seed)
}

/// [`split`] over bare ids.
pub fn split_ids(ids: Vec<String>, ratio: f64, seed: u64) -> Result<SplitManifest> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split ratio must be in (0, 1), got {ratio}"
        )));
    }
    if ids.is_empty() {
        return Err(Error::DegenerateCorpus("no patches to split".into()));
    }
    let mut shuffled = ids;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let n_train = (ratio * shuffled.len() as f64).floor() as usize;
    let val = shuffled.split_off(n_train);
    Ok(SplitManifest {
        seed,
        ratio,
        train: shuffled,
        val,
    })
}

/// Per-band z-score over one patch: (x - mean) / std with population
/// statistics. A constant band maps to all zeros.
pub fn zscore_normalize(image: &Raster) -> Result<Raster> {
    let values = image.as_f32()?;
    let (h, w) = image.dims();
    let plane = h * w;
    let mut out = vec![0f32; values.len()];
    for b in 0..image.bands() {
        let band = &values[b * plane..(b + 1) * plane];
        let dst = &mut out[b * plane..(b + 1) * plane];
        let mut min = f32::INFINITY;
        let mut max = f32::NEG_INFINITY;
        let mut sum = 0.0f64;
        for &v in band {
            min = min.min(v);
            max = max.max(v);
            sum += v as f64;
        }
        if min == max {
            continue; // sigma = 0: leave the band at zero
        }
        let mean = sum / plane as f64;
        let mut sq = 0.0f64;
        for &v in band {
            let d = v as f64 - mean;
            sq += d * d;
        }
        let std = (sq / plane as f64).sqrt();
        for (d, &v) in dst.iter_mut().zip(band) {
            *d = ((v as f64 - mean) / std) as f32;
        }
    }
    Raster::new(
        image.width(),
        image.height(),
        image.bands(),
        image.geotransform(),
        image.nodata(),
        Samples::F32(out),
    )
}

/// Writes patches as `<dir>/images/<id>.rst` and `<dir>/labels/<id>.rst`.
pub fn save_patches(dir: impl AsRef<Path>, patches: &[PatchPair]) -> Result<()> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    let labels = dir.join("labels");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    fs::create_dir_all(&labels).map_err(|e| Error::io(&labels, e))?;
    for p in patches {
        let name = format!("{}.rst", p.id());
        write_raster(&p.image, images.join(&name))?;
        write_raster(&p.label, labels.join(&name))?;
    }
    Ok(())
}

/// Loads a saved patch corpus, ordered by anchor.
pub fn load_patches(dir: impl AsRef<Path>) -> Result<Vec<PatchPair>> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    let mut anchors = Vec::new();
    let entries = fs::read_dir(&images).map_err(|e| Error::io(&images, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&images, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(stem) = name.strip_suffix(".rst") else {
            continue;
        };
        let anchor = parse_anchor(stem)
            .ok_or_else(|| Error::Format(format!("patch file {name:?} is not <row>_<col>.rst")))?;
        anchors.push(anchor);
    }
    anchors.sort_unstable();

    let mut patches = Vec::with_capacity(anchors.len());
    for anchor in anchors {
        let name = format!("{}_{}.rst", anchor.0, anchor.1);
        let image = read_raster(images.join(&name))?;
        let label = read_raster(dir.join("labels").join(&name))?;
        let positive = label.as_u8()?.iter().any(|&v| v == 1);
        patches.push(PatchPair {
            image,
            label,
            anchor,
            positive,
        });
    }
    Ok(patches)
}

fn parse_anchor(stem: &str) -> Option<(usize, usize)> {
    let (r, c) = stem.split_once('_')?;
    Some((r.parse().ok()?, c.parse().ok()?))
}

pub fn save_manifest(manifest: &SplitManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<SplitManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest parse: {e}")))
}
