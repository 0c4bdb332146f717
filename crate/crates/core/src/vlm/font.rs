//! 3x5 bitmap digits for region labels.

const GLYPHS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

pub const SCALE: usize = 2;
pub const GLYPH_W: usize = 3 * SCALE;
pub const GLYPH_H: usize = 5 * SCALE;
pub const SPACING: usize = SCALE;

/// Pixel extent of `text` when rendered.
pub fn text_size(text: &str) -> (usize, usize) {
    let n = text.chars().count();
    if n == 0 {
        return (0, 0);
    }
    (n * GLYPH_W + (n - 1) * SPACING, GLYPH_H)
}

/// Offsets `(dx, dy)` of every lit pixel of `text` relative to its top-left
/// corner. Non-digit characters render blank.
pub fn lit_pixels(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (k, ch) in text.chars().enumerate() {
        let Some(d) = ch.to_digit(10) else { continue };
        let x0 = k * (GLYPH_W + SPACING);
        for (row, bits) in GLYPHS[d as usize].iter().enumerate() {
            for col in 0..3 {
                if bits & (0b100 >> col) != 0 {
                    for sy in 0..SCALE {
                        for sx in 0..SCALE {
                            out.push((x0 + col * SCALE + sx, row * SCALE + sy));
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_is_narrower_than_eight() {
        assert!(lit_pixels("1").len() < lit_pixels("8").len());
        assert_eq!(lit_pixels("8").len(), 13 * SCALE * SCALE);
    }

    #[test]
    fn extent_contains_pixels() {
        let (w, h) = text_size("12");
        assert!(lit_pixels("12").iter().all(|&(x, y)| x < w && y < h));
        assert_eq!(text_size(""), (0, 0));
    }
}
