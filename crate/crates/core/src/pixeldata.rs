//! Frame ingestion, tiling and Hann-windowed overlap-add reassembly.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{DynamicImage, ImageBuffer, Luma};

use crate::error::{Error, Result};

/// Dense row-major 2-D grid of reals with no range restriction.
///
/// Decoder outputs live here until they are clipped into a [`Frame`] at export.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!("raster dims must be positive, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "raster {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Result<Self> {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.data[row * self.cols + col] = value;
    }

    /// Copies the `height x width` window whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Raster> {
        if height == 0 || width == 0 || row + height > self.rows || col + width > self.cols {
            return Err(Error::invalid(format!(
                "crop ({row},{col}) {height}x{width} outside {}x{} raster",
                self.rows, self.cols
            )));
        }
        let mut data = Vec::with_capacity(height * width);
        for r in row..row + height {
            let start = r * self.cols + col;
            data.extend_from_slice(&self.data[start..start + width]);
        }
        Raster::new(height, width, data)
    }

    /// Extends the raster to `rows x cols` by replicating the last row and column.
    pub fn pad_edge(&self, rows: usize, cols: usize) -> Result<Raster> {
        if rows < self.rows || cols < self.cols {
            return Err(Error::invalid("pad_edge target smaller than raster"));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let src = r.min(self.rows - 1);
            for c in 0..cols {
                data.push(self.get(src, c.min(self.cols - 1)));
            }
        }
        Raster::new(rows, cols, data)
    }

    /// `(1, 1, rows, cols)` tensor on `device`.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, 1, self.rows, self.cols), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Reads a single-channel image tensor of shape `(1, 1, H, W)` or `(H, W)`.
    pub fn from_tensor(t: &Tensor) -> Result<Raster> {
        let dims = t.dims();
        let (rows, cols) = match dims {
            [r, c] => (*r, *c),
            [1, 1, r, c] => (*r, *c),
            _ => return Err(Error::shape(format!("expected a single image tensor, got {dims:?}"))),
        };
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Raster::new(rows, cols, data)
    }

    pub fn max_abs_diff(&self, other: &Raster) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// A normalized single-channel frame with values in `[-0.5, 0.5]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    values: Raster,
    source_bit_depth: u8,
}

impl Frame {
    /// Wraps a raster, rejecting values outside `[-0.5, 0.5]`.
    pub fn new(values: Raster, source_bit_depth: u8) -> Result<Self> {
        if let Some(v) = values.data.iter().find(|v| !(-0.5..=0.5).contains(*v)) {
            return Err(Error::invalid(format!("frame value {v} outside [-0.5, 0.5]")));
        }
        Ok(Self {
            values,
            source_bit_depth,
        })
    }

    /// Clips an unconstrained decoder output into the frame range.
    pub fn from_raster_clipped(values: &Raster, source_bit_depth: u8) -> Self {
        let data = values.data.iter().map(|v| v.clamp(-0.5, 0.5)).collect();
        Self {
            values: Raster {
                rows: values.rows,
                cols: values.cols,
                data,
            },
            source_bit_depth,
        }
    }

    pub fn from_gray8(height: usize, width: usize, pixels: &[u8]) -> Result<Self> {
        let data = pixels.iter().map(|&p| normalize(p as u32, 8)).collect();
        Ok(Self {
            values: Raster::new(height, width, data)?,
            source_bit_depth: 8,
        })
    }

    pub fn from_gray16(height: usize, width: usize, pixels: &[u16]) -> Result<Self> {
        let data = pixels.iter().map(|&p| normalize(p as u32, 16)).collect();
        Ok(Self {
            values: Raster::new(height, width, data)?,
            source_bit_depth: 16,
        })
    }

    pub fn height(&self) -> usize {
        self.values.rows
    }

    pub fn width(&self) -> usize {
        self.values.cols
    }

    pub fn source_bit_depth(&self) -> u8 {
        self.source_bit_depth
    }

    pub fn values(&self) -> &Raster {
        &self.values
    }

    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Frame> {
        Ok(Frame {
            values: self.values.crop(row, col, height, width)?,
            source_bit_depth: self.source_bit_depth,
        })
    }

    /// Re-quantizes to 8-bit gray levels (exact inverse of the 8-bit normalization).
    pub fn to_gray8(&self) -> Vec<u8> {
        self.values
            .data
            .iter()
            .map(|&v| ((v as f64 + 0.5) * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn to_gray16(&self) -> Vec<u16> {
        self.values
            .data
            .iter()
            .map(|&v| ((v as f64 + 0.5) * 65535.0).round().clamp(0.0, 65535.0) as u16)
            .collect()
    }

    /// Writes the frame as a grayscale PNG at its source bit depth (8 or 16).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.width() as u32, self.height() as u32);
        if self.source_bit_depth == 16 {
            let buf: ImageBuffer<Luma<u16>, _> = ImageBuffer::from_raw(w, h, self.to_gray16())
                .ok_or_else(|| Error::shape("png buffer size"))?;
            buf.save_with_format(path, image::ImageFormat::Png)?;
        } else {
            let buf: ImageBuffer<Luma<u8>, _> = ImageBuffer::from_raw(w, h, self.to_gray8())
                .ok_or_else(|| Error::shape("png buffer size"))?;
            buf.save_with_format(path, image::ImageFormat::Png)?;
        }
        Ok(())
    }
}

#[inline]
fn normalize(pixel: u32, depth: u32) -> f32 {
    let max = ((1u64 << depth) - 1) as f64;
    (pixel as f64 / max - 0.5) as f32
}

/// Loads an 8- or 16-bit grayscale raster. Multi-channel images are rejected.
pub fn load_grayscale(path: &Path) -> Result<Frame> {
    load_grayscale_with(path, false)
}

/// Like [`load_grayscale`], but with `convert_color` multi-channel images are
/// converted to luma instead of rejected.
pub fn load_grayscale_with(path: &Path, convert_color: bool) -> Result<Frame> {
    let img = image::open(path)?;
    decode_dynamic(img, convert_color, &path.display().to_string())
}

pub(crate) fn decode_dynamic(img: DynamicImage, convert_color: bool, what: &str) -> Result<Frame> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(buf) => Frame::from_gray8(h, w, buf.as_raw()),
        DynamicImage::ImageLuma16(buf) => Frame::from_gray16(h, w, buf.as_raw()),
        other if convert_color => match other.color().bytes_per_pixel() / other.color().channel_count() {
            1 => Frame::from_gray8(h, w, other.to_luma8().as_raw()),
            _ => Frame::from_gray16(h, w, other.to_luma16().as_raw()),
        },
        other => Err(Error::Unsupported(format!(
            "{what}: {:?} image is not single-channel grayscale",
            other.color()
        ))),
    }
}

/// Tile origins covering a frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilePlan {
    pub tile_size: usize,
    pub stride: usize,
    /// Row-major `(row, col)` pixel offsets.
    pub origins: Vec<(usize, usize)>,
}

/// Origins along one axis: multiples of `stride`, with the last one clamped so
/// the final tile ends exactly at `len`.
pub fn axis_origins(len: usize, tile: usize, stride: usize) -> Result<Vec<usize>> {
    if len == 0 || tile == 0 || stride == 0 {
        return Err(Error::invalid("axis length, tile and stride must be positive"));
    }
    if stride > tile {
        return Err(Error::invalid(format!("stride {stride} exceeds tile size {tile}")));
    }
    if tile > len {
        return Err(Error::invalid(format!("tile size {tile} exceeds axis length {len}")));
    }
    let last = len - tile;
    let mut origins: Vec<usize> = (0..).map(|i| i * stride).take_while(|&o| o < last).collect();
    origins.push(last);
    Ok(origins)
}

pub fn plan_tiles(height: usize, width: usize, tile_size: usize, stride: usize) -> Result<TilePlan> {
    let rows = axis_origins(height, tile_size, stride)?;
    let cols = axis_origins(width, tile_size, stride)?;
    let origins = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect();
    Ok(TilePlan {
        tile_size,
        stride,
        origins,
    })
}

/// Separable blending window: outer product of two floored Hann windows.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendWindow {
    rows: usize,
    cols: usize,
    weights: Vec<f32>,
}

impl BlendWindow {
    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    #[inline]
    pub fn weight(&self, row: usize, col: usize) -> f32 {
        self.weights[row * self.cols + col]
    }
}

/// `w[n] = eps + 0.5 * (1 - cos(2 pi n / (size - 1)))`.
pub fn hann_axis(size: usize, eps: f64) -> Result<Vec<f64>> {
    if size < 2 {
        return Err(Error::invalid(format!("window size must be >= 2, got {size}")));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("window floor must be positive"));
    }
    let denom = (size - 1) as f64;
    Ok((0..size)
        .map(|n| eps + 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / denom).cos()))
        .collect())
}

/// Square window of side `size`.
pub fn make_hann_window(size: usize, eps: f64) -> Result<BlendWindow> {
    make_hann_window_rect(size, size, eps)
}

/// Rectangular variant used when a decode window is clamped to a small grid.
/// A side of length 1 gets the constant weight `1 + eps`.
pub fn make_hann_window_rect(rows: usize, cols: usize, eps: f64) -> Result<BlendWindow> {
    let axis = |n: usize| -> Result<Vec<f64>> {
        if n == 1 {
            Ok(vec![1.0 + eps])
        } else {
            hann_axis(n, eps)
        }
    };
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("window dims must be positive"));
    }
    let wr = axis(rows)?;
    let wc = axis(cols)?;
    let weights = wr
        .iter()
        .flat_map(|a| wc.iter().map(move |b| (a * b) as f32))
        .collect();
    Ok(BlendWindow {
        rows,
        cols,
        weights,
    })
}

/// Windowed average of overlapping tile predictions.
///
/// `out[p] = sum_t w_t[p] * pred_t[p] / sum_t w_t[p]`, accumulated in f64.
pub fn overlap_add(
    predictions: &[((usize, usize), Raster)],
    frame_dims: (usize, usize),
    window: &BlendWindow,
) -> Result<Raster> {
    let (height, width) = frame_dims;
    if height == 0 || width == 0 {
        return Err(Error::invalid("frame dims must be positive"));
    }
    let mut num = vec![0f64; height * width];
    let mut den = vec![0f64; height * width];
    for ((r0, c0), tile) in predictions {
        if tile.dims() != window.dims() {
            return Err(Error::shape(format!(
                "tile {:?} does not match window {:?}",
                tile.dims(),
                window.dims()
            )));
        }
        if r0 + tile.rows > height || c0 + tile.cols > width {
            return Err(Error::invalid(format!(
                "tile at ({r0},{c0}) extends past frame {height}x{width}"
            )));
        }
        for r in 0..tile.rows {
            let row = (r0 + r) * width + c0;
            for c in 0..tile.cols {
                let w = window.weight(r, c) as f64;
                num[row + c] += w * tile.get(r, c) as f64;
                den[row + c] += w;
            }
        }
    }
    let mut data = Vec::with_capacity(height * width);
    for (i, (n, d)) in num.iter().zip(&den).enumerate() {
        if *d <= 0.0 {
            return Err(Error::invalid(format!(
                "pixel ({}, {}) not covered by any tile",
                i / width,
                i % width
            )));
        }
        data.push((n / d) as f32);
    }
    Raster::new(height, width, data)
}
