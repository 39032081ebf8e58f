//! 8-bit rasters of layouts and generated images.

use crate::graph::ClassVocab;
use crate::layout::Layout;
use crate::raster::{encode_indexed, encode_rgb, RasterError};
use crate::tensor::Tensor;

/// Palette color of pixels no node claims; always the entry after the
/// last class.
pub const UNCLAIMED_COLOR: [u8; 3] = [0, 0, 0];

/// The static layout palette: one color per class (by name, falling back
/// to a fixed hash for unknown names), followed by [`UNCLAIMED_COLOR`].
///
/// | class | RGB |
/// |---|---|
/// | sky | 70, 130, 180 |
/// | road | 128, 64, 128 |
/// | tree | 107, 142, 35 |
/// | building | 70, 70, 70 |
/// | person | 220, 20, 60 |
/// | car | 0, 0, 142 |
/// | bus | 0, 60, 100 |
/// | truck | 0, 0, 70 |
/// | sidewalk | 244, 35, 232 |
pub fn layout_palette(classes: &ClassVocab) -> Vec<[u8; 3]> {
    let mut out: Vec<[u8; 3]> = (0..classes.len())
        .map(|c| class_color(classes.name_of(c).unwrap_or("")))
        .collect();
    out.push(UNCLAIMED_COLOR);
    out
}

fn class_color(name: &str) -> [u8; 3] {
    match name {
        "sky" => [70, 130, 180],
        "road" => [128, 64, 128],
        "tree" | "vegetation" => [107, 142, 35],
        "building" => [70, 70, 70],
        "person" => [220, 20, 60],
        "car" => [0, 0, 142],
        "bus" => [0, 60, 100],
        "truck" => [0, 0, 70],
        "sidewalk" => [244, 35, 232],
        other => {
            // FNV-1a, so that custom vocabularies still get stable colors.
            let h = other
                .bytes()
                .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
            [(h >> 8) as u8 | 0x20, (h >> 24) as u8 | 0x20, (h >> 40) as u8 | 0x20]
        }
    }
}

/// Per-pixel class index of a layout's argmax; unclaimed pixels get
/// `layout.classes()`.
pub fn layout_indices(layout: &Layout) -> Vec<u16> {
    let none = layout.classes() as u16;
    layout
        .argmax()
        .into_iter()
        .map(|c| c.map_or(none, |c| c as u16))
        .collect()
}

/// Indexed PNG of a layout under [`layout_palette`].
pub fn layout_png(layout: &Layout, classes: &ClassVocab) -> Result<Vec<u8>, RasterError> {
    let idx: Vec<u8> = layout_indices(layout).into_iter().map(|c| c as u8).collect();
    encode_indexed(layout.width(), layout.height(), &idx, &layout_palette(classes))
}

/// Interleaved 8-bit RGB of a `[3, H, W]` image in `[0, 1]`.
pub fn image_rgb8(image: &Tensor) -> Vec<u8> {
    let (h, w) = (image.dim(1), image.dim(2));
    let plane = h * w;
    let d = image.data();
    let mut out = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            out.push((d[ch * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Interleaved RGB of a layout under [`layout_palette`].
pub fn layout_rgb8(layout: &Layout, classes: &ClassVocab) -> Vec<u8> {
    let pal = layout_palette(classes);
    layout_indices(layout).into_iter().flat_map(|c| pal[c as usize]).collect()
}

pub fn image_png(image: &Tensor) -> Result<Vec<u8>, RasterError> {
    encode_rgb(image.dim(2), image.dim(1), &image_rgb8(image))
}

/// Tiles equally sized RGB images into rows of `cols`, separated by a
/// 2-pixel white gutter.
pub fn tile_rgb8(tiles: &[Vec<u8>], height: usize, width: usize, cols: usize) -> (usize, usize, Vec<u8>) {
    const GUTTER: usize = 2;
    let cols = cols.max(1).min(tiles.len().max(1));
    let rows = tiles.len().div_ceil(cols).max(1);
    let (gw, gh) = (cols * (width + GUTTER) - GUTTER, rows * (height + GUTTER) - GUTTER);
    let mut out = vec![255u8; gw * gh * 3];
    for (k, tile) in tiles.iter().enumerate() {
        let (oy, ox) = ((k / cols) * (height + GUTTER), (k % cols) * (width + GUTTER));
        for y in 0..height {
            let src = &tile[y * width * 3..(y + 1) * width * 3];
            let at = ((oy + y) * gw + ox) * 3;
            out[at..at + width * 3].copy_from_slice(src);
        }
    }
    (gw, gh, out)
}
