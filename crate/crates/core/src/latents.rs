//! Latent tensors, block-grid geometry and the `.jlat` binary format.
//!
//! A latent is laid out `(channels, frames, height, width)` in row-major
//! order. Blocks are 3-D `(frames, height, width)` tiles of the
//! channel-averaged latent; one token corresponds to one `(frame, row, col)`
//! cell, so block membership maps directly onto token ids.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Magic bytes at the start of every `.jlat` file.
pub const MAGIC: &[u8; 4] = b"JANO";
/// Current `.jlat` format version.
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 * 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentShape {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub fn new(channels: usize, frames: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            frames,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.cells()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of `(frame, row, col)` cells, which is also the token count.
    pub fn cells(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn volume_dims(&self) -> VolumeDims {
        VolumeDims {
            frames: self.frames,
            height: self.height,
            width: self.width,
        }
    }
}

/// A `(C, F, H, W)` latent of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    shape: LatentShape,
    data: Vec<f32>,
}

impl LatentTensor {
    pub fn new(shape: LatentShape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(invalid(format!(
                "latent data has {} values, shape {:?} needs {}",
                data.len(),
                shape,
                shape.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("latent value at index {i} is not finite")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: LatentShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    /// Builds a tensor by evaluating `f(c, f, h, w)` at every element.
    pub fn from_fn(shape: LatentShape, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for fr in 0..shape.frames {
                for h in 0..shape.height {
                    for w in 0..shape.width {
                        data.push(f(c, fr, h, w));
                    }
                }
            }
        }
        Self::new(shape, data)
    }

    pub fn shape(&self) -> LatentShape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, f: usize, h: usize, w: usize) -> usize {
        ((c * self.shape.frames + f) * self.shape.height + h) * self.shape.width + w
    }

    #[inline]
    pub fn get(&self, c: usize, f: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(c, f, h, w)]
    }

    /// Element-wise `a * self + b * other`.
    pub fn axpby(&self, a: f32, other: &LatentTensor, b: f32) -> Result<LatentTensor> {
        if self.shape != other.shape {
            return Err(invalid("axpby on latents of different shapes"));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        LatentTensor::new(self.shape, data)
    }

    pub fn scale(&self, c: f32) -> Result<LatentTensor> {
        LatentTensor::new(self.shape, self.data.iter().map(|v| v * c).collect())
    }

    /// Rearranges into one row per `(frame, row, col)` cell with one column
    /// per channel. Row index is `(f * H + h) * W + w`.
    pub fn to_tokens(&self) -> TokenMatrix {
        let cells = self.shape.cells();
        let c = self.shape.channels;
        let mut data = vec![0.0f32; cells * c];
        for ch in 0..c {
            let plane = &self.data[ch * cells..(ch + 1) * cells];
            for (cell, v) in plane.iter().enumerate() {
                data[cell * c + ch] = *v;
            }
        }
        TokenMatrix {
            rows: cells,
            cols: c,
            data,
        }
    }

    /// Inverse of [`LatentTensor::to_tokens`].
    pub fn from_tokens(shape: LatentShape, tokens: &TokenMatrix) -> Result<Self> {
        if tokens.rows != shape.cells() || tokens.cols != shape.channels {
            return Err(invalid(format!(
                "token matrix {}x{} does not match shape {:?}",
                tokens.rows, tokens.cols, shape
            )));
        }
        let cells = shape.cells();
        let c = shape.channels;
        let mut data = vec![0.0f32; shape.len()];
        for cell in 0..cells {
            for ch in 0..c {
                data[ch * cells + cell] = tokens.data[cell * c + ch];
            }
        }
        Self::new(shape, data)
    }
}

/// Dense row-major `f32` matrix; used for token sequences and activations.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl TokenMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "matrix data has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Copies the given rows, in order, into a new matrix.
    pub fn gather(&self, ids: &[usize]) -> TokenMatrix {
        let mut data = Vec::with_capacity(ids.len() * self.cols);
        for &i in ids {
            data.extend_from_slice(self.row(i));
        }
        TokenMatrix {
            rows: ids.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VolumeDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl VolumeDims {
    pub fn cells(&self) -> usize {
        self.frames * self.height * self.width
    }
}

/// A channel-averaged `(F, H, W)` volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: VolumeDims,
    pub data: Vec<f32>,
}

impl Volume {
    #[inline]
    pub fn get(&self, f: usize, h: usize, w: usize) -> f32 {
        self.data[(f * self.dims.height + h) * self.dims.width + w]
    }
}

/// Mean over channels: `out[f,h,w] = mean_c latent[c,f,h,w]`.
pub fn channel_average(latent: &LatentTensor) -> Result<Volume> {
    let shape = latent.shape();
    if shape.is_empty() {
        return Err(invalid("channel_average on an empty tensor"));
    }
    let cells = shape.cells();
    let mut acc = vec![0.0f64; cells];
    for plane in latent.data().chunks_exact(cells) {
        for (a, v) in acc.iter_mut().zip(plane) {
            *a += f64::from(*v);
        }
    }
    let inv = shape.channels as f64;
    Ok(Volume {
        dims: shape.volume_dims(),
        data: acc.into_iter().map(|a| (a / inv) as f32).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockSize {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl BlockSize {
    pub fn new(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(invalid(format!("block size {self:?} has a zero dimension")));
        }
        Ok(())
    }
}

impl From<[usize; 3]> for BlockSize {
    fn from(v: [usize; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

/// Tiling of an `(F, H, W)` volume into `(f, h, w)` blocks.
///
/// Block ids are dense and ordered frame-slab major, then row, then column.
/// Partial blocks at the far edges own only the cells that exist; their
/// feature matrices are completed by edge replication.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGrid {
    pub dims: VolumeDims,
    pub block: BlockSize,
    pub counts: [usize; 3],
}

impl BlockGrid {
    pub fn new(dims: VolumeDims, block: BlockSize) -> Result<Self> {
        block.validate()?;
        if dims.cells() == 0 {
            return Err(invalid("block grid over an empty volume"));
        }
        let counts = [
            dims.frames.div_ceil(block.frames),
            dims.height.div_ceil(block.height),
            dims.width.div_ceil(block.width),
        ];
        Ok(Self { dims, block, counts })
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_tokens(&self) -> usize {
        self.dims.cells()
    }

    /// `(frame-slab, row, col)` coordinates of a block.
    pub fn coords(&self, id: usize) -> [usize; 3] {
        let per_slab = self.counts[1] * self.counts[2];
        [id / per_slab, (id % per_slab) / self.counts[2], id % self.counts[2]]
    }

    pub fn block_id(&self, fi: usize, hi: usize, wi: usize) -> usize {
        (fi * self.counts[1] + hi) * self.counts[2] + wi
    }

    pub fn block_of_token(&self, token: usize) -> usize {
        let w = token % self.dims.width;
        let h = (token / self.dims.width) % self.dims.height;
        let f = token / (self.dims.width * self.dims.height);
        self.block_id(f / self.block.frames, h / self.block.height, w / self.block.width)
    }

    /// Unpadded extent `[start, end)` of a block along each axis.
    pub fn extent(&self, id: usize) -> [(usize, usize); 3] {
        let [fi, hi, wi] = self.coords(id);
        let span = |i: usize, b: usize, n: usize| (i * b, ((i + 1) * b).min(n));
        [
            span(fi, self.block.frames, self.dims.frames),
            span(hi, self.block.height, self.dims.height),
            span(wi, self.block.width, self.dims.width),
        ]
    }

    /// Flat token indices owned by a block.
    pub fn tokens(&self, id: usize) -> Vec<usize> {
        let [(f0, f1), (h0, h1), (w0, w1)] = self.extent(id);
        let mut out = Vec::with_capacity((f1 - f0) * (h1 - h0) * (w1 - w0));
        for f in f0..f1 {
            for h in h0..h1 {
                for w in w0..w1 {
                    out.push((f * self.dims.height + h) * self.dims.width + w);
                }
            }
        }
        out
    }

    pub fn token_index_map(&self) -> Vec<Vec<usize>> {
        (0..self.len()).map(|b| self.tokens(b)).collect()
    }

    pub fn token_counts(&self) -> Vec<usize> {
        (0..self.len())
            .map(|b| {
                let e = self.extent(b);
                e.iter().map(|(a, z)| z - a).product()
            })
            .collect()
    }
}

/// Channel-averaged values of one block, `frames x (height*width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockFeatureMatrix {
    pub block_id: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl BlockFeatureMatrix {
    /// Spatial length `s = h * w`.
    pub fn s(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn get(&self, frame: usize, s: usize) -> f32 {
        self.data[frame * self.s() + s]
    }

    #[inline]
    pub fn at(&self, frame: usize, h: usize, w: usize) -> f32 {
        self.data[(frame * self.height + h) * self.width + w]
    }
}

/// Splits a volume into blocks; trailing partial blocks are edge-replicated.
pub fn partition_blocks(volume: &Volume, block: BlockSize) -> Result<Vec<BlockFeatureMatrix>> {
    let grid = BlockGrid::new(volume.dims, block)?;
    Ok((0..grid.len()).map(|id| extract_block(volume, &grid, id)).collect())
}

pub(crate) fn extract_block(volume: &Volume, grid: &BlockGrid, id: usize) -> BlockFeatureMatrix {
    let b = grid.block;
    let d = volume.dims;
    let [fi, hi, wi] = grid.coords(id);
    let mut data = Vec::with_capacity(b.frames * b.height * b.width);
    for f in 0..b.frames {
        let ff = (fi * b.frames + f).min(d.frames - 1);
        for h in 0..b.height {
            let hh = (hi * b.height + h).min(d.height - 1);
            let row = (ff * d.height + hh) * d.width;
            for w in 0..b.width {
                let ww = (wi * b.width + w).min(d.width - 1);
                data.push(volume.data[row + ww]);
            }
        }
    }
    BlockFeatureMatrix {
        block_id: id,
        frames: b.frames,
        height: b.height,
        width: b.width,
        data,
    }
}

/// Places the unpadded region of every block back into a volume.
pub fn assemble_blocks(grid: &BlockGrid, blocks: &[BlockFeatureMatrix]) -> Result<Volume> {
    if blocks.len() != grid.len() {
        return Err(invalid(format!(
            "expected {} blocks, got {}",
            grid.len(),
            blocks.len()
        )));
    }
    let d = grid.dims;
    let mut data = vec![0.0f32; d.cells()];
    for blk in blocks {
        let [(f0, f1), (h0, h1), (w0, w1)] = grid.extent(blk.block_id);
        for f in f0..f1 {
            for h in h0..h1 {
                for w in w0..w1 {
                    data[(f * d.height + h) * d.width + w] = blk.at(f - f0, h - h0, w - w0);
                }
            }
        }
    }
    Ok(Volume { dims: d, data })
}

/// Serializes a latent into the `.jlat` byte layout.
pub fn encode_latent(latent: &LatentTensor) -> Result<Vec<u8>> {
    let s = latent.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * s.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for d in [s.channels, s.frames, s.height, s.width] {
        let d = u32::try_from(d).map_err(|_| invalid(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in latent.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        reason: reason.into(),
    }
}

/// Parses `.jlat` bytes.
pub fn decode_latent(bytes: &[u8]) -> Result<LatentTensor> {
    if bytes.len() < 4 {
        return Err(format_err(bytes.len(), "file shorter than magic"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(0, "bad magic"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(format_err(bytes.len(), "truncated header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FORMAT_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let dims: Vec<usize> = (0..4).map(|i| word(8 + 4 * i) as usize).collect();
    let shape = LatentShape::new(dims[0], dims[1], dims[2], dims[3]);
    let expected = shape
        .channels
        .checked_mul(shape.cells())
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| format_err(8, "dimensions overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(format_err(
            HEADER_LEN + payload.len().min(expected),
            format!(
                "payload is {} bytes but header dims {:?} need {}",
                payload.len(),
                dims,
                expected
            ),
        ));
    }
    let mut data = Vec::with_capacity(shape.len());
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(format_err(HEADER_LEN + 4 * i, "non-finite value"));
        }
        data.push(v);
    }
    LatentTensor::new(shape, data)
}

pub fn save_latent(path: impl AsRef<Path>, latent: &LatentTensor) -> Result<()> {
    let bytes = encode_latent(latent)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn load_latent(path: impl AsRef<Path>) -> Result<LatentTensor> {
    decode_latent(&fs::read(path)?)
}
