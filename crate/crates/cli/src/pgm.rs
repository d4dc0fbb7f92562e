//! Binary PGM (P5) preview grids.

use cmas_core::Tensor;

/// Lays out `rows` of tiles, each tile a `side × side` image taken from a row
/// of `images`. `None` entries stay black. Values are clamped to `[0, 1]`.
pub fn grid(images: &Tensor, rows: &[Vec<Option<usize>>], side: usize) -> Vec<u8> {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (w, h) = (cols * side, rows.len() * side);
    let mut px = vec![0u8; w * h];
    for (r, tiles) in rows.iter().enumerate() {
        for (c, tile) in tiles.iter().enumerate() {
            let Some(i) = tile else { continue };
            let img = images.row(*i);
            for y in 0..side {
                for x in 0..side {
                    let v = img[y * side + x].clamp(0.0, 1.0);
                    px[(r * side + y) * w + c * side + x] = (v * 255.0).round() as u8;
                }
            }
        }
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    out
}
