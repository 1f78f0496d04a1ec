//! A 3x5 bitmap font for burning short numeric labels into images.

use crate::image::Image;

const W: usize = 3;
const H: usize = 5;

fn glyph(c: char) -> Option<[u8; H]> {
    // each row is 3 bits, most significant bit leftmost
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '%' => [0b101, 0b001, 0b010, 0b100, 0b101],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        '+' => [0b000, 0b010, 0b111, 0b010, 0b000],
        ' ' => [0; H],
        _ => return None,
    })
}

/// Pixel width of `text` at the given scale, including one column of spacing per glyph.
pub fn text_width(text: &str, scale: usize) -> usize {
    text.chars().count() * (W + 1) * scale
}

/// Draws `text` with its top-left corner at `(x, y)` on a dark backing box.
/// Unsupported characters are drawn as blanks.
pub fn draw_text(img: &mut Image, text: &str, x: usize, y: usize, scale: usize) {
    let (c, h, w) = img.shape();
    let box_w = text_width(text, scale) + scale;
    let box_h = (H + 2) * scale;
    for yy in y..(y + box_h).min(h) {
        for xx in x..(x + box_w).min(w) {
            for ch in 0..c {
                *img.at_mut(ch, yy, xx) = -1.0;
            }
        }
    }
    for (i, ch) in text.chars().enumerate() {
        let rows = glyph(ch).unwrap_or([0; H]);
        let gx = x + scale + i * (W + 1) * scale;
        let gy = y + scale;
        for (r, bits) in rows.iter().enumerate() {
            for col in 0..W {
                if bits & (1 << (W - 1 - col)) == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let (px, py) = (gx + col * scale + dx, gy + r * scale + dy);
                        if px < w && py < h {
                            for k in 0..c {
                                *img.at_mut(k, py, px) = 1.0;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Probability formatted as in the overlays, e.g. `0.93`.
pub fn format_prob(p: f64) -> String {
    format!("{:.2}", p.clamp(0.0, 1.0))
}
