//! Geo-referenced raster container with a bit-exact binary format,
//! nearest-neighbor resampling, overlapped tiling and center-crop mosaicking.
//!
//! The on-disk layout (`RSTv1`, little-endian) is:
//!
//! ```text
//! magic "RST1" | version u32 = 1 | dtype u8 (0 = U8, 1 = F32) | bands u32
//! | height u64 | width u64 | nodata-present u8 | nodata f64
//! | geotransform 6 x f64 | payload (band-sequential, row-major)
//! ```
//!
//! An optional JSON sidecar `<path>.meta.json` maps class codes to names for
//! categorical rasters.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"RST1";
pub const VERSION: u32 = 1;
/// Fixed header size in bytes; the payload starts right after.
pub const HEADER_LEN: usize = 4 + 4 + 1 + 4 + 8 + 8 + 1 + 8 + 6 * 8;

/// Identity geotransform: unit pixels anchored at the origin, north-up.
pub const IDENTITY_GEOTRANSFORM: [f64; 6] = [0.0, 1.0, 0.0, 0.0, 0.0, -1.0];

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Dtype {
    U8,
    F32,
}

impl Dtype {
    pub fn byte_len(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 => 4,
        }
    }

    fn code(self) -> u8 {
        match self {
            Dtype::U8 => 0,
            Dtype::F32 => 1,
        }
    }
}

/// Pixel payload, band-sequential row-major.
#[derive(Clone, PartialEq, Debug)]
pub enum Samples {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl Samples {
    pub fn len(&self) -> usize {
        match self {
            Samples::U8(v) => v.len(),
            Samples::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            Samples::U8(_) => Dtype::U8,
            Samples::F32(_) => Dtype::F32,
        }
    }
}

/// Geo-referenced multi-band grid; the universal pixel container.
///
/// The geotransform follows the 6-parameter affine convention with a
/// pixel-corner origin: `x = g0 + col*g1 + row*g2`, `y = g3 + col*g4 + row*g5`.
#[derive(Clone, PartialEq, Debug)]
pub struct Raster {
    width: usize,
    height: usize,
    bands: usize,
    geotransform: [f64; 6],
    nodata: Option<f64>,
    data: Samples,
}

impl Raster {
    /// Builds a raster, enforcing the container invariants.
    pub fn new(
        width: usize,
        height: usize,
        bands: usize,
        geotransform: [f64; 6],
        nodata: Option<f64>,
        data: Samples,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Validation(format!(
                "raster dimensions must be positive, got {height}x{width}"
            )));
        }
        if bands == 0 {
            return Err(Error::Validation("raster must have at least one band".into()));
        }
        let expected = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(bands))
            .ok_or_else(|| Error::Validation("raster dimensions overflow".into()))?;
        if data.len() != expected {
            return Err(Error::Validation(format!(
                "data length {} does not match {}x{}x{} = {expected}",
                data.len(),
                height,
                width,
                bands
            )));
        }
        if !(geotransform[1] > 0.0) {
            return Err(Error::Validation(format!(
                "pixel width must be positive, got {}",
                geotransform[1]
            )));
        }
        if geotransform[5] == 0.0 || !geotransform[5].is_finite() {
            return Err(Error::Validation("pixel height must be nonzero".into()));
        }
        Ok(Raster {
            width,
            height,
            bands,
            geotransform,
            nodata,
            data,
        })
    }

    /// Single-band U8 raster with the identity geotransform.
    pub fn from_u8(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Raster::new(width, height, 1, IDENTITY_GEOTRANSFORM, None, Samples::U8(data))
    }

    /// Multi-band F32 raster with the identity geotransform.
    pub fn from_f32(width: usize, height: usize, bands: usize, data: Vec<f32>) -> Result<Self> {
        Raster::new(width, height, bands, IDENTITY_GEOTRANSFORM, None, Samples::F32(data))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// (height, width), the order used by tiling.
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn geotransform(&self) -> [f64; 6] {
        self.geotransform
    }

    pub fn set_geotransform(&mut self, gt: [f64; 6]) -> Result<()> {
        if !(gt[1] > 0.0) || gt[5] == 0.0 {
            return Err(Error::Validation("invalid geotransform pixel sizes".into()));
        }
        self.geotransform = gt;
        Ok(())
    }

    pub fn nodata(&self) -> Option<f64> {
        self.nodata
    }

    pub fn set_nodata(&mut self, nodata: Option<f64>) {
        self.nodata = nodata;
    }

    pub fn data(&self) -> &Samples {
        &self.data
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            Samples::U8(v) => Ok(v),
            Samples::F32(_) => Err(Error::Unsupported("expected U8 raster".into())),
        }
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            Samples::F32(v) => Ok(v),
            Samples::U8(_) => Err(Error::Unsupported("expected F32 raster".into())),
        }
    }

    /// Flat index of (band, row, col) in the band-sequential layout.
    #[inline]
    pub fn index(&self, band: usize, row: usize, col: usize) -> usize {
        (band * self.height + row) * self.width + col
    }

    /// World coordinates of the pixel corner (row, col).
    pub fn pixel_to_world(&self, row: f64, col: f64) -> (f64, f64) {
        let g = &self.geotransform;
        (g[0] + col * g[1] + row * g[2], g[3] + col * g[4] + row * g[5])
    }

    /// Fractional (row, col) of a world point, by inverting the affine
    /// geotransform. Pixel membership is the floor of the result.
    pub fn world_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        let g = &self.geotransform;
        let det = g[1] * g[5] - g[2] * g[4];
        let dx = x - g[0];
        let dy = y - g[3];
        let col = (dx * g[5] - dy * g[2]) / det;
        let row = (dy * g[1] - dx * g[4]) / det;
        (row, col)
    }

    /// True when the two rasters share dims and geotransform exactly.
    pub fn aligned_with(&self, other: &Raster) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.geotransform == other.geotransform
    }

    /// Checks that a categorical raster only holds values from `table`.
    pub fn validate_classes(&self, table: &BTreeMap<u8, String>) -> Result<()> {
        let values = self.as_u8()?;
        for (i, v) in values.iter().enumerate() {
            if !table.contains_key(v) {
                return Err(Error::Validation(format!(
                    "value {v} at flat index {i} is not in the class table"
                )));
            }
        }
        Ok(())
    }

    /// Extracts a `size` x `size` window anchored at (row, col), zero-padding
    /// past the source bounds. The geotransform origin shifts with the anchor.
    pub fn crop(&self, anchor: (usize, usize), size: usize) -> Result<Raster> {
        if size == 0 {
            return Err(Error::InvalidArgument("crop size must be positive".into()));
        }
        let (r0, c0) = anchor;
        let rows = size.min(self.height.saturating_sub(r0));
        let cols = size.min(self.width.saturating_sub(c0));
        let g = &self.geotransform;
        let gt = [
            g[0] + c0 as f64 * g[1] + r0 as f64 * g[2],
            g[1],
            g[2],
            g[3] + c0 as f64 * g[4] + r0 as f64 * g[5],
            g[4],
            g[5],
        ];
        let data = match &self.data {
            Samples::U8(src) => {
                let mut out = vec![0u8; self.bands * size * size];
                for b in 0..self.bands {
                    for r in 0..rows {
                        let s = self.index(b, r0 + r, c0);
                        let d = (b * size + r) * size;
                        out[d..d + cols].copy_from_slice(&src[s..s + cols]);
                    }
                }
                Samples::U8(out)
            }
            Samples::F32(src) => {
                let mut out = vec![0f32; self.bands * size * size];
                for b in 0..self.bands {
                    for r in 0..rows {
                        let s = self.index(b, r0 + r, c0);
                        let d = (b * size + r) * size;
                        out[d..d + cols].copy_from_slice(&src[s..s + cols]);
                    }
                }
                Samples::F32(out)
            }
        };
        Raster::new(size, size, self.bands, gt, self.nodata, data)
    }
}

/// Reads an RSTv1 file.
pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raster(&bytes)
}

/// Writes an RSTv1 file; the byte layout round-trips exactly.
pub fn write_raster(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_raster(raster)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Serializes a raster to the RSTv1 byte layout.
pub fn encode_raster(raster: &Raster) -> Result<Vec<u8>> {
    // Re-validate so hand-mutated rasters cannot produce malformed files.
    let checked = Raster::new(
        raster.width,
        raster.height,
        raster.bands,
        raster.geotransform,
        raster.nodata,
        raster.data.clone(),
    )?;
    let payload_len = checked.data.len() * checked.dtype().byte_len();
    let mut out = Vec::with_capacity(HEADER_LEN + payload_len);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(checked.dtype().code());
    out.extend_from_slice(&(checked.bands as u32).to_le_bytes());
    out.extend_from_slice(&(checked.height as u64).to_le_bytes());
    out.extend_from_slice(&(checked.width as u64).to_le_bytes());
    out.push(u8::from(checked.nodata.is_some()));
    out.extend_from_slice(&checked.nodata.unwrap_or(0.0).to_le_bytes());
    for g in checked.geotransform {
        out.extend_from_slice(&g.to_le_bytes());
    }
    match &checked.data {
        Samples::U8(v) => out.extend_from_slice(v),
        Samples::F32(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Parses the RSTv1 byte layout.
pub fn decode_raster(bytes: &[u8]) -> Result<Raster> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(Error::Format("missing RST1 magic".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Corruption(format!(
            "header truncated: {} bytes, need {HEADER_LEN}",
            bytes.len()
        )));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());

    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::Unsupported(format!("RST version {version}")));
    }
    let dtype = match bytes[8] {
        0 => Dtype::U8,
        1 => Dtype::F32,
        code => return Err(Error::Unsupported(format!("dtype code {code}"))),
    };
    let bands = u32_at(9) as usize;
    let height = u64_at(13) as usize;
    let width = u64_at(21) as usize;
    let nodata_present = bytes[29];
    if nodata_present > 1 {
        return Err(Error::Corruption(format!(
            "nodata-present flag must be 0 or 1, got {nodata_present}"
        )));
    }
    let nodata = (nodata_present == 1).then(|| f64_at(30));
    let mut geotransform = [0.0; 6];
    for (i, g) in geotransform.iter_mut().enumerate() {
        *g = f64_at(38 + 8 * i);
    }

    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(bands))
        .ok_or_else(|| Error::Corruption("declared dimensions overflow".into()))?;
    let payload_len = count
        .checked_mul(dtype.byte_len())
        .ok_or_else(|| Error::Corruption("declared payload overflows".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != payload_len {
        return Err(Error::Corruption(format!(
            "payload is {} bytes, header declares {payload_len}",
            payload.len()
        )));
    }
    let data = match dtype {
        Dtype::U8 => Samples::U8(payload.to_vec()),
        Dtype::F32 => Samples::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Raster::new(width, height, bands, geotransform, nodata, data)
}

/// Writes the optional class-table sidecar next to a raster.
pub fn write_class_table(raster_path: impl AsRef<Path>, table: &BTreeMap<u8, String>) -> Result<()> {
    let path = sidecar_path(raster_path.as_ref());
    let named: BTreeMap<String, &String> =
        table.iter().map(|(k, v)| (k.to_string(), v)).collect();
    let json = serde_json::to_string_pretty(&named)
        .map_err(|e| Error::Format(format!("class table serialization: {e}")))?;
    fs::write(&path, json).map_err(|e| Error::io(path, e))
}

/// Reads the class-table sidecar if present.
pub fn read_class_table(raster_path: impl AsRef<Path>) -> Result<Option<BTreeMap<u8, String>>> {
    let path = sidecar_path(raster_path.as_ref());
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let named: BTreeMap<String, String> = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("class table sidecar: {e}")))?;
    let mut table = BTreeMap::new();
    for (k, v) in named {
        let code: u8 = k
            .parse()
            .map_err(|_| Error::Format(format!("class code {k:?} is not a u8")))?;
        table.insert(code, v);
    }
    Ok(Some(table))
}

fn sidecar_path(raster_path: &Path) -> std::path::PathBuf {
    let mut s = raster_path.as_os_str().to_os_string();
    s.push(".meta.json");
    std::path::PathBuf::from(s)
}

/// Nearest-neighbor upsampling by an integer factor; label values are
/// preserved exactly, never interpolated.
pub fn resample_nearest(raster: &Raster, factor: usize) -> Result<Raster> {
    if factor == 0 {
        return Err(Error::InvalidArgument("resample factor must be >= 1".into()));
    }
    if raster.bands != 1 {
        return Err(Error::InvalidArgument(format!(
            "resample_nearest expects a single-band raster, got {} bands",
            raster.bands
        )));
    }
    if factor == 1 {
        return Ok(raster.clone());
    }
    let (h, w) = (raster.height, raster.width);
    let (oh, ow) = (h * factor, w * factor);
    let g = &raster.geotransform;
    let f = factor as f64;
    let gt = [g[0], g[1] / f, g[2] / f, g[3], g[4] / f, g[5] / f];
    let data = match &raster.data {
        Samples::U8(src) => {
            let mut out = vec![0u8; oh * ow];
            for r in 0..oh {
                let src_row = &src[(r / factor) * w..(r / factor) * w + w];
                let dst_row = &mut out[r * ow..(r + 1) * ow];
                for (c, d) in dst_row.iter_mut().enumerate() {
                    *d = src_row[c / factor];
                }
            }
            Samples::U8(out)
        }
        Samples::F32(src) => {
            let mut out = vec![0f32; oh * ow];
            for r in 0..oh {
                let src_row = &src[(r / factor) * w..(r / factor) * w + w];
                let dst_row = &mut out[r * ow..(r + 1) * ow];
                for (c, d) in dst_row.iter_mut().enumerate() {
                    *d = src_row[c / factor];
                }
            }
            Samples::F32(out)
        }
    };
    Raster::new(ow, oh, 1, gt, raster.nodata, data)
}

/// Overlapped tile schedule over a (height, width) extent.
///
/// Anchors step by `tile - overlap` from zero; the last anchor per axis is
/// clamped so the final tile abuts the edge. Sources smaller than the tile
/// get a single zero-padded tile at (0, 0).
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct TileGrid {
    pub tile: usize,
    pub overlap: usize,
    /// (row, col) anchors in row-major order: the cross product of the
    /// per-axis anchor lists.
    pub origins: Vec<(usize, usize)>,
    /// Source (height, width).
    pub source_dims: (usize, usize),
    row_anchors: Vec<usize>,
    col_anchors: Vec<usize>,
}

impl TileGrid {
    pub fn row_anchors(&self) -> &[usize] {
        &self.row_anchors
    }

    pub fn col_anchors(&self) -> &[usize] {
        &self.col_anchors
    }

    /// True when the source is smaller than the tile on some axis, so the
    /// single edge tile must be zero-padded on read.
    pub fn needs_padding(&self) -> bool {
        self.source_dims.0 < self.tile || self.source_dims.1 < self.tile
    }
}

/// Plans the overlapped tiling of a (height, width) extent.
pub fn plan_tiles(dims: (usize, usize), tile: usize, overlap: usize) -> Result<TileGrid> {
    if tile <= overlap {
        return Err(Error::InvalidArgument(format!(
            "tile ({tile}) must exceed overlap ({overlap})"
        )));
    }
    if dims.0 == 0 || dims.1 == 0 {
        return Err(Error::InvalidArgument("empty source extent".into()));
    }
    let row_anchors = axis_anchors(dims.0, tile, overlap);
    let col_anchors = axis_anchors(dims.1, tile, overlap);
    let mut origins = Vec::with_capacity(row_anchors.len() * col_anchors.len());
    for &r in &row_anchors {
        for &c in &col_anchors {
            origins.push((r, c));
        }
    }
    Ok(TileGrid {
        tile,
        overlap,
        origins,
        source_dims: dims,
        row_anchors,
        col_anchors,
    })
}

fn axis_anchors(dim: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if dim <= tile {
        return vec![0];
    }
    let stride = tile - overlap;
    let last = dim - tile;
    let mut anchors = Vec::new();
    let mut a = 0;
    loop {
        if a + tile >= dim {
            anchors.push(a.min(last));
            break;
        }
        anchors.push(a);
        a += stride;
    }
    anchors
}

/// Stitches tile rasters back into the source extent.
///
/// Each output pixel is taken from the tile whose center is nearest
/// (row-major tie-break: the earlier anchor wins); padding beyond the source
/// extent is dropped.
pub fn mosaic(tiles: &[((usize, usize), Raster)], grid: &TileGrid) -> Result<Raster> {
    let mut by_anchor: BTreeMap<(usize, usize), &Raster> = BTreeMap::new();
    for (anchor, raster) in tiles {
        if by_anchor.insert(*anchor, raster).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate tile for anchor {anchor:?}"
            )));
        }
    }
    for anchor in &grid.origins {
        if !by_anchor.contains_key(anchor) {
            return Err(Error::Incomplete(format!("no tile for anchor {anchor:?}")));
        }
    }
    if by_anchor.len() != grid.origins.len() {
        return Err(Error::InvalidArgument(
            "tile set contains anchors not present in the grid".into(),
        ));
    }

    let first = by_anchor
        .values()
        .next()
        .ok_or_else(|| Error::Incomplete("empty tile set".into()))?;
    let bands = first.bands;
    let dtype = first.dtype();
    for (anchor, r) in &by_anchor {
        if r.bands != bands || r.dtype() != dtype {
            return Err(Error::InvalidArgument(format!(
                "tile at {anchor:?} disagrees on bands/dtype"
            )));
        }
        if r.width != grid.tile || r.height != grid.tile {
            return Err(Error::InvalidArgument(format!(
                "tile at {anchor:?} is {}x{}, grid expects {}x{}",
                r.height, r.width, grid.tile, grid.tile
            )));
        }
    }

    let (h, w) = grid.source_dims;
    let row_owner = axis_owner(h, grid.tile, &grid.row_anchors);
    let col_owner = axis_owner(w, grid.tile, &grid.col_anchors);
    let col_runs = owner_runs(&col_owner);

    // The anchor-(0,0) tile keeps the source origin exactly, so the mosaic
    // geotransform round-trips bit-for-bit.
    let origin_tile = by_anchor
        .get(&(0, 0))
        .ok_or_else(|| Error::Incomplete("grid has no (0, 0) anchor".into()))?;
    let gt = origin_tile.geotransform;
    let nodata = origin_tile.nodata;

    let data = match dtype {
        Dtype::U8 => {
            let mut out = vec![0u8; bands * h * w];
            for b in 0..bands {
                for r in 0..h {
                    let ra = grid.row_anchors[row_owner[r]];
                    for &(c0, c1, k) in &col_runs {
                        let ca = grid.col_anchors[k];
                        let tile = by_anchor[&(ra, ca)];
                        let src = tile.as_u8().expect("dtype checked");
                        let s = tile.index(b, r - ra, c0 - ca);
                        let d = (b * h + r) * w + c0;
                        out[d..d + (c1 - c0)].copy_from_slice(&src[s..s + (c1 - c0)]);
                    }
                }
            }
            Samples::U8(out)
        }
        Dtype::F32 => {
            let mut out = vec![0f32; bands * h * w];
            for b in 0..bands {
                for r in 0..h {
                    let ra = grid.row_anchors[row_owner[r]];
                    for &(c0, c1, k) in &col_runs {
                        let ca = grid.col_anchors[k];
                        let tile = by_anchor[&(ra, ca)];
                        let src = tile.as_f32().expect("dtype checked");
                        let s = tile.index(b, r - ra, c0 - ca);
                        let d = (b * h + r) * w + c0;
                        out[d..d + (c1 - c0)].copy_from_slice(&src[s..s + (c1 - c0)]);
                    }
                }
            }
            Samples::F32(out)
        }
    };
    Raster::new(w, h, bands, gt, nodata, data)
}

/// For each pixel index along one axis, the index of the owning anchor:
/// the one whose tile center is nearest, earlier anchor on ties.
fn axis_owner(dim: usize, tile: usize, anchors: &[usize]) -> Vec<usize> {
    let mut owner = vec![0usize; dim];
    let mut k = 0;
    // |p + 0.5 - (a + tile/2)| doubled to stay in integers.
    let dist = |p: usize, a: usize| (2 * p as i64 + 1 - (2 * a as i64 + tile as i64)).abs();
    for (p, o) in owner.iter_mut().enumerate() {
        while k + 1 < anchors.len() && dist(p, anchors[k + 1]) < dist(p, anchors[k]) {
            k += 1;
        }
        *o = k;
    }
    owner
}

/// Collapses an ownership vector into (start, end, owner) runs.
fn owner_runs(owner: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=owner.len() {
        if i == owner.len() || owner[i] != owner[start] {
            runs.push((start, i, owner[start]));
            start = i;
        }
    }
    runs
}

/// Convenience: crops every tile of a grid out of a source raster.
pub fn crop_all_tiles(source: &Raster, grid: &TileGrid) -> Result<Vec<((usize, usize), Raster)>> {
    grid.origins
        .iter()
        .map(|&anchor| Ok((anchor, source.crop(anchor, grid.tile)?)))
        .collect()
}
