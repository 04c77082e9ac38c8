//! The `.emvq` token container: a fixed little-endian header, tokens packed at
//! `ceil(log2 K)` bits each (MSB first), and an optional ROI sidecar of
//! full-resolution crops.
//!
//! Layout:
//!
//! ```text
//! magic "EMVQ" | version u8 | flags u8 | d_s u8 | K u16 | embed_dim u16
//! | frame_height u32 | frame_width u32 | grid_rows u32 | grid_cols u32
//! | model_digest [u8; 32] | token_count u32            (63 bytes)
//! token payload, zero-padded to a byte boundary
//! roi_count u16 | roi_count x (x u32 | y u32 | height u32 | width u32
//!                             | encoding u8 | payload_len u32 | payload)
//! ```

use std::io::Cursor;
use std::path::Path;
use std::process::Command;

use image::{ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::pixeldata::Frame;
use crate::quantizer::Codebook;

pub const MAGIC: [u8; 4] = *b"EMVQ";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 63;
/// Bytes of an ROI record before its payload.
pub const ROI_RECORD_HEADER_LEN: usize = 21;

const FLAG_CHECKERBOARD: u8 = 0b001;
const FLAG_HAS_ROI: u8 = 0b010;
const FLAG_TWO_LEVEL_HINT: u8 = 0b100;

/// Compression points a container may carry.
pub const CONTAINER_STAGES: std::ops::RangeInclusive<u8> = 2..=5;

/// Dense row-major grid of token indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub tokens: Vec<u32>,
}

impl TokenGrid {
    pub fn new(rows: usize, cols: usize, tokens: Vec<u32>) -> Result<Self> {
        if rows == 0 || cols == 0 || tokens.len() != rows * cols {
            return Err(Error::shape(format!(
                "token grid {rows}x{cols} with {} tokens",
                tokens.len()
            )));
        }
        Ok(Self { rows, cols, tokens })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.tokens[row * self.cols + col]
    }

    pub fn window(&self, row: usize, col: usize, rows: usize, cols: usize) -> Result<TokenGrid> {
        if row + rows > self.rows || col + cols > self.cols {
            return Err(Error::invalid("token window outside grid"));
        }
        let tokens = (row..row + rows)
            .flat_map(|r| self.tokens[r * self.cols + col..r * self.cols + col + cols].iter().copied())
            .collect();
        TokenGrid::new(rows, cols, tokens)
    }
}

/// Row-major grid of embedding vectors (`rows x cols x dim`).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingGrid {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl EmbeddingGrid {
    pub fn from_tokens(grid: &TokenGrid, codebook: &Codebook) -> Result<Self> {
        Ok(Self {
            rows: grid.rows,
            cols: grid.cols,
            dim: codebook.dim(),
            data: codebook.lookup(&grid.tokens)?,
        })
    }

    pub fn vector(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.cols + col) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn window(&self, row: usize, col: usize, rows: usize, cols: usize) -> Result<EmbeddingGrid> {
        if row + rows > self.rows || col + cols > self.cols {
            return Err(Error::invalid("embedding window outside grid"));
        }
        let mut data = Vec::with_capacity(rows * cols * self.dim);
        for r in row..row + rows {
            let start = (r * self.cols + col) * self.dim;
            data.extend_from_slice(&self.data[start..start + cols * self.dim]);
        }
        Ok(EmbeddingGrid {
            rows,
            cols,
            dim: self.dim,
            data,
        })
    }
}

/// Positions with even `(row + col)`, row-major.
pub fn checkerboard_mask(rows: usize, cols: usize) -> Vec<(usize, usize)> {
    (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .filter(|(r, c)| (r + c) % 2 == 0)
        .collect()
}

pub fn checkerboard_len(rows: usize, cols: usize) -> usize {
    (rows * cols).div_ceil(2)
}

/// Retained tokens of a dense grid in mask order.
pub fn checkerboard_select(grid: &TokenGrid) -> Vec<u32> {
    checkerboard_mask(grid.rows, grid.cols)
        .into_iter()
        .map(|(r, c)| grid.get(r, c))
        .collect()
}

/// Dense embeddings from checkerboard-retained tokens: retained cells take
/// their code vector, dropped cells the mean of their in-grid 4-neighbours.
pub fn checkerboard_fill(rows: usize, cols: usize, retained: &[u32], codebook: &Codebook) -> Result<EmbeddingGrid> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("grid dims must be positive"));
    }
    if retained.len() != checkerboard_len(rows, cols) {
        return Err(Error::shape(format!(
            "{rows}x{cols} checkerboard retains {} tokens, got {}",
            checkerboard_len(rows, cols),
            retained.len()
        )));
    }
    let dim = codebook.dim();
    let mut data = vec![0f32; rows * cols * dim];
    for ((r, c), &t) in checkerboard_mask(rows, cols).into_iter().zip(retained) {
        if t as usize >= codebook.size() {
            return Err(Error::invalid(format!("token {t} >= codebook size {}", codebook.size())));
        }
        let start = (r * cols + c) * dim;
        data[start..start + dim].copy_from_slice(codebook.embedding(t as usize));
    }
    let mut acc = vec![0f64; dim];
    for r in 0..rows {
        for c in 0..cols {
            if (r + c) % 2 == 0 {
                continue;
            }
            acc.iter_mut().for_each(|a| *a = 0.0);
            let mut n = 0usize;
            let neighbours = [
                (r.wrapping_sub(1), c),
                (r + 1, c),
                (r, c.wrapping_sub(1)),
                (r, c + 1),
            ];
            for (nr, nc) in neighbours {
                if nr < rows && nc < cols {
                    let start = (nr * cols + nc) * dim;
                    for (a, v) in acc.iter_mut().zip(&data[start..start + dim]) {
                        *a += *v as f64;
                    }
                    n += 1;
                }
            }
            if n == 0 {
                return Err(Error::invalid("dropped cell without neighbours"));
            }
            let start = (r * cols + c) * dim;
            for (d, a) in data[start..start + dim].iter_mut().zip(&acc) {
                *d = (a / n as f64) as f32;
            }
        }
    }
    Ok(EmbeddingGrid { rows, cols, dim, data })
}

pub fn bits_per_token(codebook_size: usize) -> u32 {
    debug_assert!(codebook_size >= 2);
    usize::BITS - (codebook_size - 1).leading_zeros()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContainerHeader {
    pub checkerboard: bool,
    pub has_roi: bool,
    pub two_level_hint: bool,
    pub downsample_stages: u8,
    pub codebook_size: u16,
    pub embed_dim: u16,
    pub frame_height: u32,
    pub frame_width: u32,
    pub grid_rows: u32,
    pub grid_cols: u32,
    pub model_digest: [u8; 32],
    pub token_count: u32,
}

impl ContainerHeader {
    /// Header for a frame-level grid; derived fields are filled in.
    pub fn for_frame(
        frame_height: u32,
        frame_width: u32,
        downsample_stages: u8,
        codebook_size: u16,
        embed_dim: u16,
        checkerboard: bool,
        model_digest: [u8; 32],
    ) -> Result<Self> {
        if !CONTAINER_STAGES.contains(&downsample_stages) {
            return Err(Error::invalid(format!(
                "containers hold d_s in 2..=5, got {downsample_stages}"
            )));
        }
        let f = 1u32 << downsample_stages;
        let grid_rows = frame_height.div_ceil(f);
        let grid_cols = frame_width.div_ceil(f);
        let dense = grid_rows as usize * grid_cols as usize;
        let token_count = if checkerboard { dense.div_ceil(2) } else { dense };
        let h = Self {
            checkerboard,
            has_roi: false,
            two_level_hint: false,
            downsample_stages,
            codebook_size,
            embed_dim,
            frame_height,
            frame_width,
            grid_rows,
            grid_cols,
            model_digest,
            token_count: u32::try_from(token_count).map_err(|_| Error::invalid("too many tokens"))?,
        };
        h.validate()?;
        Ok(h)
    }

    fn flags(&self) -> u8 {
        let mut f = 0;
        if self.checkerboard {
            f |= FLAG_CHECKERBOARD;
        }
        if self.has_roi {
            f |= FLAG_HAS_ROI;
        }
        if self.two_level_hint {
            f |= FLAG_TWO_LEVEL_HINT;
        }
        f
    }

    pub fn validate(&self) -> Result<()> {
        if !CONTAINER_STAGES.contains(&self.downsample_stages) {
            return Err(Error::format(format!("d_s {} outside 2..=5", self.downsample_stages)));
        }
        if self.codebook_size < 2 {
            return Err(Error::format("codebook size below 2"));
        }
        if self.embed_dim == 0 || self.frame_height == 0 || self.frame_width == 0 {
            return Err(Error::format("zero embed dim or frame dimension"));
        }
        let f = 1u32 << self.downsample_stages;
        if self.grid_rows != self.frame_height.div_ceil(f) || self.grid_cols != self.frame_width.div_ceil(f) {
            return Err(Error::format(format!(
                "grid {}x{} inconsistent with frame {}x{} at d_s {}",
                self.grid_rows, self.grid_cols, self.frame_height, self.frame_width, self.downsample_stages
            )));
        }
        let dense = self.grid_rows as u64 * self.grid_cols as u64;
        let expected = if self.checkerboard { dense.div_ceil(2) } else { dense };
        if self.token_count as u64 != expected {
            return Err(Error::format(format!(
                "token count {} but grid implies {expected}",
                self.token_count
            )));
        }
        Ok(())
    }

    pub fn bits_per_token(&self) -> u32 {
        bits_per_token(self.codebook_size as usize)
    }

    pub fn payload_len(&self) -> usize {
        (self.token_count as usize * self.bits_per_token() as usize).div_ceil(8)
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.flags());
        out.push(self.downsample_stages);
        out.extend_from_slice(&self.codebook_size.to_le_bytes());
        out.extend_from_slice(&self.embed_dim.to_le_bytes());
        for v in [self.frame_height, self.frame_width, self.grid_rows, self.grid_cols] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.model_digest);
        out.extend_from_slice(&self.token_count.to_le_bytes());
    }

    /// Parses and validates the fixed-size header at the start of `bytes`.
    pub fn read(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::format("bad magic, not an .emvq container"));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported container version {version}")));
        }
        let flags = r.u8()?;
        if flags & !(FLAG_CHECKERBOARD | FLAG_HAS_ROI | FLAG_TWO_LEVEL_HINT) != 0 {
            return Err(Error::format(format!("unknown flag bits {flags:#010b}")));
        }
        let header = Self {
            checkerboard: flags & FLAG_CHECKERBOARD != 0,
            has_roi: flags & FLAG_HAS_ROI != 0,
            two_level_hint: flags & FLAG_TWO_LEVEL_HINT != 0,
            downsample_stages: r.u8()?,
            codebook_size: r.u16()?,
            embed_dim: r.u16()?,
            frame_height: r.u32()?,
            frame_width: r.u32()?,
            grid_rows: r.u32()?,
            grid_cols: r.u32()?,
            model_digest: r.take(32)?.try_into().expect("32 bytes"),
            token_count: r.u32()?,
        };
        header.validate()?;
        Ok(header)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoiEncoding {
    Raw8 = 0,
    Png = 1,
    Avif = 2,
}

impl RoiEncoding {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(RoiEncoding::Raw8),
            1 => Ok(RoiEncoding::Png),
            2 => Ok(RoiEncoding::Avif),
            other => Err(Error::format(format!("unknown ROI encoding {other}"))),
        }
    }
}

impl std::str::FromStr for RoiEncoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "raw8" | "raw" => Ok(RoiEncoding::Raw8),
            "png" => Ok(RoiEncoding::Png),
            "avif" => Ok(RoiEncoding::Avif),
            other => Err(Error::invalid(format!("unknown ROI encoding {other:?}"))),
        }
    }
}

/// Rectangle in frame pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoiBox {
    pub x: u32,
    pub y: u32,
    pub height: u32,
    pub width: u32,
}

impl RoiBox {
    fn check(&self, frame_height: u32, frame_width: u32) -> Result<()> {
        let fits = self.height > 0
            && self.width > 0
            && self.x.checked_add(self.width).is_some_and(|e| e <= frame_width)
            && self.y.checked_add(self.height).is_some_and(|e| e <= frame_height);
        if !fits {
            return Err(Error::invalid(format!(
                "ROI {self:?} outside {frame_height}x{frame_width} frame"
            )));
        }
        Ok(())
    }
}

/// Parses a boxes file: one `x y h w` quadruple per line, `#` comments.
pub fn parse_boxes(text: &str) -> Result<Vec<RoiBox>> {
    let mut boxes = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<u32> = line
            .split_whitespace()
            .map(|v| v.parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(format!("boxes line {}: {e}", lineno + 1)))?;
        let [x, y, height, width] = vals[..] else {
            return Err(Error::format(format!(
                "boxes line {}: expected `x y h w`",
                lineno + 1
            )));
        };
        boxes.push(RoiBox { x, y, height, width });
    }
    Ok(boxes)
}

/// A full-resolution crop stored beside the token payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoiRecord {
    pub roi: RoiBox,
    pub encoding: RoiEncoding,
    pub payload: Vec<u8>,
}

impl RoiRecord {
    /// Decodes the payload into a frame crop.
    pub fn decode(&self) -> Result<Frame> {
        let (h, w) = (self.roi.height as usize, self.roi.width as usize);
        let frame = match self.encoding {
            RoiEncoding::Raw8 => {
                if self.payload.len() != h * w {
                    return Err(Error::format("raw ROI payload size does not match its box"));
                }
                Frame::from_gray8(h, w, &self.payload)?
            }
            RoiEncoding::Png => {
                let img = image::load_from_memory_with_format(&self.payload, image::ImageFormat::Png)?;
                crate::pixeldata::decode_dynamic(img, false, "ROI payload")?
            }
            RoiEncoding::Avif => avif_decode(&self.payload)?,
        };
        if (frame.height(), frame.width()) != (h, w) {
            return Err(Error::format("ROI payload dims do not match its box"));
        }
        Ok(frame)
    }
}

/// Crops `boxes` from the uncompressed frame and encodes each crop.
pub fn roi_pack(frame: &Frame, boxes: &[RoiBox], encoding: RoiEncoding) -> Result<Vec<RoiRecord>> {
    boxes
        .iter()
        .map(|b| {
            b.check(frame.height() as u32, frame.width() as u32)?;
            let crop = frame.crop(b.y as usize, b.x as usize, b.height as usize, b.width as usize)?;
            let payload = match encoding {
                RoiEncoding::Raw8 => crop.to_gray8(),
                RoiEncoding::Png => encode_png(&crop)?,
                RoiEncoding::Avif => avif_encode(&crop)?,
            };
            Ok(RoiRecord {
                roi: *b,
                encoding,
                payload,
            })
        })
        .collect()
}

fn encode_png(frame: &Frame) -> Result<Vec<u8>> {
    let (w, h) = (frame.width() as u32, frame.height() as u32);
    let mut out = Cursor::new(Vec::new());
    if frame.source_bit_depth() == 16 {
        let buf: ImageBuffer<Luma<u16>, _> =
            ImageBuffer::from_raw(w, h, frame.to_gray16()).ok_or_else(|| Error::shape("png buffer"))?;
        buf.write_to(&mut out, image::ImageFormat::Png)?;
    } else {
        let buf: ImageBuffer<Luma<u8>, _> =
            ImageBuffer::from_raw(w, h, frame.to_gray8()).ok_or_else(|| Error::shape("png buffer"))?;
        buf.write_to(&mut out, image::ImageFormat::Png)?;
    }
    Ok(out.into_inner())
}

fn tool_available(name: &str) -> bool {
    Command::new(name).arg("--version").output().is_ok()
}

fn run_tool(name: &str, args: &[&Path]) -> Result<()> {
    if !tool_available(name) {
        return Err(Error::MissingTool(format!("`{name}` not found on PATH (needed for AVIF ROIs)")));
    }
    let status = Command::new(name)
        .args(args)
        .output()
        .map_err(|e| Error::io(name, e))?;
    if !status.status.success() {
        return Err(Error::Format(format!(
            "{name} failed: {}",
            String::from_utf8_lossy(&status.stderr)
        )));
    }
    Ok(())
}

fn avif_encode(frame: &Frame) -> Result<Vec<u8>> {
    if !tool_available("avifenc") {
        return Err(Error::MissingTool("`avifenc` not found on PATH (needed for AVIF ROIs)".into()));
    }
    let dir = tempfile::tempdir().map_err(|e| Error::io("tempdir", e))?;
    let png = dir.path().join("roi.png");
    let avif = dir.path().join("roi.avif");
    frame.save_png(&png)?;
    run_tool("avifenc", &[&png, &avif])?;
    std::fs::read(&avif).map_err(|e| Error::io(&avif, e))
}

fn avif_decode(payload: &[u8]) -> Result<Frame> {
    if !tool_available("avifdec") {
        return Err(Error::MissingTool("`avifdec` not found on PATH (needed for AVIF ROIs)".into()));
    }
    let dir = tempfile::tempdir().map_err(|e| Error::io("tempdir", e))?;
    let avif = dir.path().join("roi.avif");
    let png = dir.path().join("roi.png");
    std::fs::write(&avif, payload).map_err(|e| Error::io(&avif, e))?;
    run_tool("avifdec", &[&avif, &png])?;
    crate::pixeldata::load_grayscale_with(&png, true)
}

/// A parsed `.emvq` container. `tokens` is row-major, or mask order under
/// checkerboard subsampling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Container {
    pub header: ContainerHeader,
    pub tokens: Vec<u32>,
    pub rois: Vec<RoiRecord>,
}

impl Container {
    pub fn new(header: ContainerHeader, tokens: Vec<u32>) -> Result<Self> {
        let c = Self {
            header,
            tokens,
            rois: Vec::new(),
        };
        c.validate()?;
        Ok(c)
    }

    /// Appends sidecar records; the token payload is left untouched.
    pub fn push_rois(&mut self, records: Vec<RoiRecord>) -> Result<()> {
        for r in &records {
            r.roi.check(self.header.frame_height, self.header.frame_width)?;
        }
        self.rois.extend(records);
        self.header.has_roi = !self.rois.is_empty();
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.header.validate()?;
        if self.tokens.len() != self.header.token_count as usize {
            return Err(Error::invalid(format!(
                "{} tokens but header says {}",
                self.tokens.len(),
                self.header.token_count
            )));
        }
        let k = self.header.codebook_size as u32;
        if let Some(t) = self.tokens.iter().find(|&&t| t >= k) {
            return Err(Error::invalid(format!("token {t} >= K = {k}")));
        }
        if self.header.has_roi != !self.rois.is_empty() {
            return Err(Error::invalid("has_roi flag disagrees with ROI list"));
        }
        if self.rois.len() > u16::MAX as usize {
            return Err(Error::invalid("too many ROI records"));
        }
        for r in &self.rois {
            r.roi.check(self.header.frame_height, self.header.frame_width)?;
            if u32::try_from(r.payload.len()).is_err() {
                return Err(Error::invalid("ROI payload too large"));
            }
        }
        Ok(())
    }

    /// Dense token grid; fails for checkerboard containers.
    pub fn token_grid(&self) -> Result<TokenGrid> {
        if self.header.checkerboard {
            return Err(Error::Unsupported("checkerboard container has no dense token grid".into()));
        }
        TokenGrid::new(self.header.grid_rows as usize, self.header.grid_cols as usize, self.tokens.clone())
    }

    /// Byte range of the token payload inside the packed container.
    pub fn payload_range(&self) -> std::ops::Range<usize> {
        HEADER_LEN..HEADER_LEN + self.header.payload_len()
    }
}

/// Serializes a container.
pub fn pack_container(c: &Container) -> Result<Vec<u8>> {
    c.validate()?;
    let mut out = Vec::with_capacity(HEADER_LEN + c.header.payload_len() + 2);
    c.header.write(&mut out);
    pack_tokens(&c.tokens, c.header.bits_per_token(), &mut out);
    out.extend_from_slice(&(c.rois.len() as u16).to_le_bytes());
    for r in &c.rois {
        for v in [r.roi.x, r.roi.y, r.roi.height, r.roi.width] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(r.encoding as u8);
        out.extend_from_slice(&(r.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&r.payload);
    }
    Ok(out)
}

/// Exact inverse of [`pack_container`]; rejects anything it would not emit.
pub fn parse_container(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(format!("truncated: {} bytes, header needs {HEADER_LEN}", bytes.len())));
    }
    let header = ContainerHeader::read(bytes)?;
    let mut r = Reader::new(bytes);
    r.take(HEADER_LEN)?;
    let payload = r.take(header.payload_len())?;
    let tokens = unpack_tokens(payload, header.token_count as usize, header.bits_per_token())?;
    if let Some(t) = tokens.iter().find(|&&t| t >= header.codebook_size as u32) {
        return Err(Error::format(format!("token {t} >= K = {}", header.codebook_size)));
    }
    let count = r.u16()? as usize;
    if header.has_roi != (count > 0) {
        return Err(Error::format("has_roi flag disagrees with ROI count"));
    }
    let mut rois = Vec::with_capacity(count);
    for _ in 0..count {
        let roi = RoiBox {
            x: r.u32()?,
            y: r.u32()?,
            height: r.u32()?,
            width: r.u32()?,
        };
        roi.check(header.frame_height, header.frame_width)
            .map_err(|e| Error::format(e.to_string()))?;
        let encoding = RoiEncoding::from_byte(r.u8()?)?;
        let len = r.u32()? as usize;
        let payload = r.take(len)?.to_vec();
        rois.push(RoiRecord { roi, encoding, payload });
    }
    if r.remaining() != 0 {
        return Err(Error::format(format!("{} trailing bytes", r.remaining())));
    }
    Ok(Container { header, tokens, rois })
}

/// Decodes ROI record `index` of a packed container.
pub fn roi_extract(bytes: &[u8], index: usize) -> Result<Frame> {
    let c = parse_container(bytes)?;
    c.rois
        .get(index)
        .ok_or_else(|| Error::invalid(format!("container has {} ROIs, no index {index}", c.rois.len())))?
        .decode()
}

fn pack_tokens(tokens: &[u32], bits: u32, out: &mut Vec<u8>) {
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    for &t in tokens {
        acc = (acc << bits) | t as u64;
        filled += bits;
        while filled >= 8 {
            filled -= 8;
            out.push((acc >> filled) as u8);
        }
        acc &= (1u64 << filled) - 1;
    }
    if filled > 0 {
        out.push((acc << (8 - filled)) as u8);
    }
}

fn unpack_tokens(payload: &[u8], count: usize, bits: u32) -> Result<Vec<u32>> {
    let mut tokens = Vec::with_capacity(count);
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    let mask = (1u64 << bits) - 1;
    let mut bytes = payload.iter();
    while tokens.len() < count {
        while filled < bits {
            let b = *bytes.next().ok_or_else(|| Error::format("token payload truncated"))?;
            acc = (acc << 8) | b as u64;
            filled += 8;
        }
        filled -= bits;
        tokens.push(((acc >> filled) & mask) as u32);
        acc &= (1u64 << filled) - 1;
    }
    if acc != 0 {
        return Err(Error::format("non-zero padding bits after the last token"));
    }
    Ok(tokens)
}

/// Compression ratios of a container.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatioReport {
    /// Frame pixels per stored token.
    pub nominal_ratio: f64,
    /// Raw frame bytes per container byte.
    pub actual_ratio: f64,
    pub token_bits_per_token: u32,
}

pub fn ratio_report(header: &ContainerHeader, container_bytes: usize, raw_frame_bytes: usize) -> RatioReport {
    let pixels = header.frame_height as f64 * header.frame_width as f64;
    RatioReport {
        nominal_ratio: pixels / header.token_count as f64,
        actual_ratio: raw_frame_bytes as f64 / container_bytes as f64,
        token_bits_per_token: header.bits_per_token(),
    }
}

pub fn digest_hex(d: &[u8; 32]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(h: u32, w: u32, ds: u8, k: u16, cb: bool) -> ContainerHeader {
        ContainerHeader::for_frame(h, w, ds, k, 96, cb, [7; 32]).unwrap()
    }

    #[test]
    fn mask_counts() {
        assert_eq!(checkerboard_mask(64, 64).len(), 2048);
        assert_eq!(checkerboard_mask(1, 1), vec![(0, 0)]);
        assert_eq!(checkerboard_mask(2, 2), vec![(0, 0), (1, 1)]);
        assert_eq!(checkerboard_mask(3, 3).len(), checkerboard_len(3, 3));
    }

    #[test]
    fn fill_cases() {
        let cb = Codebook::from_embeddings(3, 2, vec![1.0, 2.0, 3.0, 5.0, -1.0, 0.0], 0.99, 1e-5).unwrap();
        let grid = checkerboard_fill(3, 4, &[1; 6], &cb).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                assert_eq!(grid.vector(r, c), &[3.0, 5.0]);
            }
        }
        // 3x3: centre (1,1) is retained, so use a 3x4 grid with dropped interior (1,2):
        // neighbours (0,2), (2,2), (1,1), (1,3).
        let mask = checkerboard_mask(3, 4);
        let tokens: Vec<u32> = mask
            .iter()
            .map(|&(r, c)| match (r, c) {
                (0, 2) | (2, 2) => 0,
                (1, 1) | (1, 3) => 2,
                _ => 1,
            })
            .collect();
        let grid = checkerboard_fill(3, 4, &tokens, &cb).unwrap();
        assert_eq!(grid.vector(1, 2), &[0.0, 1.0]);
        // 2x2 corner (0,1) averages (0,0) and (1,1).
        let grid = checkerboard_fill(2, 2, &[0, 2], &cb).unwrap();
        assert_eq!(grid.vector(0, 1), &[0.0, 1.0]);
        assert!(checkerboard_fill(2, 2, &[0], &cb).is_err());
    }

    #[test]
    fn payload_sizes() {
        let h = header(1024, 1024, 4, 256, false);
        assert_eq!(h.payload_len(), 4096);
        let h = header(1024, 1024, 4, 16, false);
        assert_eq!(h.payload_len(), 2048);
        assert_eq!(bits_per_token(64), 6);
        assert_eq!(bits_per_token(2), 1);
        assert_eq!(bits_per_token(257), 9);
    }

    #[test]
    fn header_is_63_bytes() {
        let c = Container::new(header(64, 64, 2, 256, false), vec![0; 256]).unwrap();
        let bytes = pack_container(&c).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 256 + 2);
    }

    #[test]
    fn nominal_ratios() {
        for (ds, expect) in [(2u8, 16.0), (3, 64.0), (4, 256.0), (5, 1024.0)] {
            let h = header(1024, 1024, ds, 256, false);
            assert_eq!(ratio_report(&h, 1, 1).nominal_ratio, expect);
            let h = header(1024, 1024, ds, 256, true);
            assert_eq!(ratio_report(&h, 1, 1).nominal_ratio, 2.0 * expect);
        }
    }

    #[test]
    fn parse_rejects_corruption() {
        let c = Container::new(header(40, 40, 3, 16, false), (0..25).map(|i| i % 16).collect()).unwrap();
        let bytes = pack_container(&c).unwrap();
        assert_eq!(parse_container(&bytes).unwrap(), c);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(parse_container(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(parse_container(&bad).is_err());
        assert!(parse_container(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(parse_container(&extra).is_err());
        // 25 tokens * 4 bits leaves 4 padding bits in the last payload byte.
        let mut pad = bytes.clone();
        pad[HEADER_LEN + 12] |= 0x01;
        assert!(parse_container(&pad).is_err());
    }

    #[test]
    fn token_out_of_range_rejected() {
        let h = header(8, 8, 2, 3, false);
        assert!(Container::new(h.clone(), vec![0, 1, 2, 3]).is_err());
        // K = 3 packs at 2 bits, so value 3 is representable on the wire.
        let mut bytes = pack_container(&Container::new(h, vec![0, 1, 2, 2]).unwrap()).unwrap();
        bytes[HEADER_LEN] = 0b0001_1011;
        assert!(parse_container(&bytes).is_err());
    }

    #[test]
    fn roi_raw_and_png_round_trip() {
        let px: Vec<u8> = (0..48u32).map(|i| (i * 5 % 256) as u8).collect();
        let frame = Frame::from_gray8(6, 8, &px).unwrap();
        let boxes = [
            RoiBox { x: 1, y: 2, height: 3, width: 4 },
            RoiBox { x: 0, y: 0, height: 6, width: 8 },
        ];
        for enc in [RoiEncoding::Raw8, RoiEncoding::Png] {
            let recs = roi_pack(&frame, &boxes, enc).unwrap();
            assert_eq!(recs.len(), 2);
            assert_eq!(recs[0].roi, boxes[0]);
            let crop = recs[0].decode().unwrap();
            assert_eq!(crop, frame.crop(2, 1, 3, 4).unwrap());
            let mut c = Container::new(header(6, 8, 2, 16, false), vec![3; 4]).unwrap();
            let before = pack_container(&c).unwrap();
            c.push_rois(recs).unwrap();
            let after = pack_container(&c).unwrap();
            assert_eq!(after[c.payload_range()], before[c.payload_range()]);
            assert_eq!(roi_extract(&after, 1).unwrap(), frame);
            assert!(roi_extract(&after, 2).is_err());
        }
        let oob = [RoiBox { x: 5, y: 0, height: 1, width: 4 }];
        assert!(roi_pack(&frame, &oob, RoiEncoding::Raw8).is_err());
    }

    #[test]
    fn boxes_file_parsing() {
        let b = parse_boxes("# detections\n1 2 3 4\n\n10 20 30 40 # tail\n").unwrap();
        assert_eq!(b, vec![RoiBox { x: 1, y: 2, height: 3, width: 4 }, RoiBox { x: 10, y: 20, height: 30, width: 40 }]);
        assert!(parse_boxes("1 2 3").is_err());
        assert!(parse_boxes("1 2 3 x").is_err());
    }
}
