//! Frame-level encode and decode: tiling, token assembly, and overlap-add
//! reconstruction in both decode modes.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::model::{Model, VqModel};
use crate::pixeldata::{axis_origins, make_hann_window_rect, overlap_add, Frame, Raster};
use crate::prior::{Prior, Sampling};
use crate::tokenstream::{checkerboard_fill, checkerboard_select, Container, ContainerHeader, EmbeddingGrid, TokenGrid};

/// Floor of the blending window.
pub const BLEND_EPS: f64 = 1e-3;
const ENCODE_BATCH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    TopOnly,
    Prior,
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top-only" | "top_only" => Ok(DecodeMode::TopOnly),
            "prior" => Ok(DecodeMode::Prior),
            other => Err(Error::invalid(format!("unknown decode mode {other:?}"))),
        }
    }
}

/// Half-window stride, at least 1.
fn half(n: usize) -> usize {
    (n / 2).max(1)
}

/// Index of the origin whose tile centre is nearest `pos`; ties go low.
fn nearest_origin(origins: &[usize], tile: usize, pos: f64) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &o) in origins.iter().enumerate() {
        let d = (o as f64 + tile as f64 / 2.0 - pos).abs();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Dense token grid of a frame at `stages`. The frame is edge-padded to a
/// multiple of `2^stages`, encoded in overlapping tiles, and every grid cell
/// takes its token from the tile whose centre is nearest.
pub fn encode_tokens(model: &Model, tile_size: usize, frame: &Frame, stages: u8) -> Result<TokenGrid> {
    let f = 1usize << stages;
    if tile_size % f != 0 {
        return Err(Error::invalid(format!("tile size {tile_size} not divisible by {f}")));
    }
    let (h, w) = (frame.height(), frame.width());
    let (rows, cols) = (h.div_ceil(f), w.div_ceil(f));
    let padded = frame.values().pad_edge(rows * f, cols * f)?;
    let (th, tw) = (tile_size.min(rows * f), tile_size.min(cols * f));
    let step = |t: usize| ((t / 2) / f * f).max(f);
    let orig_r = axis_origins(rows * f, th, step(th))?;
    let orig_c = axis_origins(cols * f, tw, step(tw))?;
    let tiles: Vec<(usize, usize)> = orig_r
        .iter()
        .flat_map(|&r| orig_c.iter().map(move |&c| (r, c)))
        .collect();
    let mut grids = Vec::with_capacity(tiles.len());
    for chunk in tiles.chunks(ENCODE_BATCH) {
        let batch = chunk
            .iter()
            .map(|&(r, c)| padded.crop(r, c, th, tw)?.to_tensor(DType::F32, &Device::Cpu))
            .collect::<Result<Vec<_>>>()?;
        grids.extend(model.encode_tiles(&Tensor::cat(&batch, 0)?, stages)?);
    }
    let pick_r: Vec<usize> = (0..rows)
        .map(|gr| nearest_origin(&orig_r, th, (gr * f) as f64 + f as f64 / 2.0))
        .collect();
    let pick_c: Vec<usize> = (0..cols)
        .map(|gc| nearest_origin(&orig_c, tw, (gc * f) as f64 + f as f64 / 2.0))
        .collect();
    let mut tokens = Vec::with_capacity(rows * cols);
    for (gr, &ir) in pick_r.iter().enumerate() {
        for (gc, &ic) in pick_c.iter().enumerate() {
            let g = &grids[ir * orig_c.len() + ic];
            tokens.push(g.get(gr - orig_r[ir] / f, gc - orig_c[ic] / f));
        }
    }
    TokenGrid::new(rows, cols, tokens)
}

/// Encodes a frame into a container (no ROIs).
pub fn encode_frame(
    model: &Model,
    tile_size: usize,
    digest: [u8; 32],
    frame: &Frame,
    stages: u8,
    checkerboard: bool,
) -> Result<Container> {
    let codebook = model.codebook(stages)?;
    let k = u16::try_from(codebook.size()).map_err(|_| Error::invalid("codebook too large for a container"))?;
    let d = u16::try_from(codebook.dim()).map_err(|_| Error::invalid("embedding dim too large for a container"))?;
    let mut header = ContainerHeader::for_frame(
        frame.height() as u32,
        frame.width() as u32,
        stages,
        k,
        d,
        checkerboard,
        digest,
    )?;
    header.two_level_hint = model.pair().is_some_and(|(top, _)| top == stages);
    let grid = encode_tokens(model, tile_size, frame, stages)?;
    let tokens = if checkerboard {
        checkerboard_select(&grid)
    } else {
        grid.tokens
    };
    Container::new(header, tokens)
}

fn blend_windows<F>(grid_rows: usize, grid_cols: usize, window: (usize, usize), f: usize, mut decode: F) -> Result<Raster>
where
    F: FnMut(usize, usize, usize) -> Result<Raster>,
{
    let orig_r = axis_origins(grid_rows, window.0, half(window.0))?;
    let orig_c = axis_origins(grid_cols, window.1, half(window.1))?;
    let blend = make_hann_window_rect(window.0 * f, window.1 * f, BLEND_EPS)?;
    let mut tiles = Vec::with_capacity(orig_r.len() * orig_c.len());
    let mut index = 0;
    for &r in &orig_r {
        for &c in &orig_c {
            let tile = decode(r, c, index)?;
            if tile.dims() != (window.0 * f, window.1 * f) {
                return Err(Error::shape("decoded window has unexpected size"));
            }
            tiles.push(((r * f, c * f), tile));
            index += 1;
        }
    }
    overlap_add(&tiles, (grid_rows * f, grid_cols * f), &blend)
}

fn finish(raster: Raster, header: &ContainerHeader) -> Result<Frame> {
    let crop = raster.crop(0, 0, header.frame_height as usize, header.frame_width as usize)?;
    Ok(Frame::from_raster_clipped(&crop, 8))
}

/// Embedding grid of a container, filling dropped checkerboard cells.
pub fn container_embeddings(model: &Model, container: &Container) -> Result<EmbeddingGrid> {
    let h = &container.header;
    let codebook = model.codebook(h.downsample_stages)?;
    if codebook.size() != h.codebook_size as usize || codebook.dim() != h.embed_dim as usize {
        return Err(Error::format(format!(
            "container K={} D={} does not match the model codebook K={} D={}",
            h.codebook_size,
            h.embed_dim,
            codebook.size(),
            codebook.dim()
        )));
    }
    if h.checkerboard {
        checkerboard_fill(h.grid_rows as usize, h.grid_cols as usize, &container.tokens, codebook)
    } else {
        EmbeddingGrid::from_tokens(&container.token_grid()?, codebook)
    }
}

/// Top-only reconstruction with Hann-weighted overlap-add of half-overlapping
/// token windows.
pub fn decode_top_only(model: &Model, tile_size: usize, container: &Container) -> Result<Frame> {
    let h = &container.header;
    let stages = h.downsample_stages;
    let f = 1usize << stages;
    let emb = container_embeddings(model, container)?;
    let window = ((tile_size / f).min(emb.rows), (tile_size / f).min(emb.cols));
    let raster = blend_windows(emb.rows, emb.cols, window, f, |r, c, _| {
        model.decode_grid(&emb.window(r, c, window.0, window.1)?, stages)
    })?;
    finish(raster, h)
}

fn pad_tokens(grid: &TokenGrid, rows: usize, cols: usize) -> Result<TokenGrid> {
    let (rows, cols) = (rows.max(grid.rows), cols.max(grid.cols));
    let tokens = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| grid.get(r.min(grid.rows - 1), c.min(grid.cols - 1))))
        .collect();
    TokenGrid::new(rows, cols, tokens)
}

/// Two-level reconstruction: the prior samples bottom tokens for each
/// top-token window and the fusion decoder renders the pair.
pub fn decode_with_prior(
    model: &VqModel,
    prior: &Prior,
    container: &Container,
    sampling: Sampling,
    seed: u64,
) -> Result<Frame> {
    let h = &container.header;
    if h.checkerboard {
        return Err(Error::Unsupported("prior decoding needs a dense (non-checkerboard) top grid".into()));
    }
    let (top_stages, _) = model
        .pair()
        .ok_or_else(|| Error::Unsupported("checkpoint has no two-level pair".into()))?;
    if top_stages != h.downsample_stages {
        return Err(Error::Unsupported(format!(
            "prior decodes d_s={top_stages} containers, this one has d_s={}",
            h.downsample_stages
        )));
    }
    let top_book = &model.level(top_stages)?.codebook;
    if top_book.size() != h.codebook_size as usize || top_book.dim() != h.embed_dim as usize {
        return Err(Error::format("container codebook does not match the model"));
    }
    let bottom_book = &model.pair_bottom().expect("pair has a bottom level").codebook;
    let window = prior.config().top_dims;
    let grid = pad_tokens(&container.token_grid()?, window.0, window.1)?;
    let f = 1usize << top_stages;
    let raster = blend_windows(grid.rows, grid.cols, window, f, |r, c, index| {
        let top = grid.window(r, c, window.0, window.1)?;
        let bottom = prior.sample(&top, sampling, seed.wrapping_add(index as u64))?;
        model.decode_pair(
            &EmbeddingGrid::from_tokens(&top, top_book)?,
            &EmbeddingGrid::from_tokens(&bottom, bottom_book)?,
        )
    })?;
    finish(raster, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BlockMeanCodec;

    fn blocky(h: usize, w: usize, f: usize) -> Frame {
        let px: Vec<u8> = (0..h * w)
            .map(|i| (((i / w) / f * 37 + (i % w) / f * 11) % 256) as u8)
            .collect();
        Frame::from_gray8(h, w, &px).unwrap()
    }

    #[test]
    fn block_mean_round_trip_through_tiles() {
        let model = Model::BlockMean(BlockMeanCodec::new(&[2, 3]).unwrap());
        for (h, w, s, cb) in [(40, 56, 2u8, false), (64, 64, 3, false), (24, 16, 2, false)] {
            let frame = blocky(h, w, 1 << s);
            let c = encode_frame(&model, 16, [0; 32], &frame, s, cb).unwrap();
            assert_eq!(c.header.grid_rows as usize, h >> s);
            let out = decode_top_only(&model, 16, &c).unwrap();
            assert_eq!(out, frame);
        }
    }

    #[test]
    fn ragged_frames_are_padded() {
        let model = Model::BlockMean(BlockMeanCodec::new(&[2]).unwrap());
        let frame = blocky(19, 23, 4);
        let c = encode_frame(&model, 16, [0; 32], &frame, 2, true).unwrap();
        assert_eq!((c.header.grid_rows, c.header.grid_cols), (5, 6));
        assert_eq!(c.tokens.len(), 15);
        let out = decode_top_only(&model, 16, &c).unwrap();
        assert_eq!((out.height(), out.width()), (19, 23));
    }

    #[test]
    fn nearest_centre_choice() {
        assert_eq!(nearest_origin(&[0, 8, 16], 16, 2.0), 0);
        assert_eq!(nearest_origin(&[0, 8, 16], 16, 14.0), 1);
        assert_eq!(nearest_origin(&[0, 8, 16], 16, 30.0), 2);
        assert_eq!(nearest_origin(&[0, 8], 16, 12.0), 0);
    }
}
