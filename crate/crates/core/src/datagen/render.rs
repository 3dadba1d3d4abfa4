//! Font loading, glyph-coverage scanning and single-line text rasterization.

use std::fs;
use std::path::{Path, PathBuf};

use ab_glyph::{point, Font, FontVec, GlyphId, PxScale, ScaleFont};
use image::GrayImage;

use super::GenError;

/// Padding applied on every side of a rendered line, in pixels.
pub const DEFAULT_PAD: u32 = 4;

pub struct LoadedFont {
    pub path: PathBuf,
    font: FontVec,
}

impl std::fmt::Debug for LoadedFont {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LoadedFont").field("path", &self.path).finish()
    }
}

impl LoadedFont {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GenError> {
        let path = path.as_ref().to_path_buf();
        let bytes = fs::read(&path).map_err(|source| GenError::Io { path: path.clone(), source })?;
        let font = FontVec::try_from_vec(bytes).map_err(|_| GenError::InvalidFont(path.clone()))?;
        Ok(LoadedFont { path, font })
    }

    fn glyph(&self, c: char) -> Option<GlyphId> {
        let id = self.font.glyph_id(c);
        (id.0 != 0).then_some(id)
    }

    /// Symbols of `alphabet` the font cannot draw. Whitespace is always
    /// considered drawable since it only contributes an advance.
    pub fn missing_glyphs(&self, alphabet: &[char]) -> Vec<char> {
        alphabet
            .iter()
            .copied()
            .filter(|c| !c.is_whitespace() && self.glyph(*c).is_none())
            .collect()
    }

    pub fn line_height(&self, size: u32) -> u32 {
        let sf = self.font.as_scaled(PxScale::from(size as f32));
        (sf.ascent() - sf.descent()).ceil().max(1.0) as u32
    }
}

/// Renders `text` on one line: black glyphs on white, baseline aligned,
/// advances summed without kerning, `pad` pixels on every side.
///
/// `font_id` is only used to label a [`GenError::MissingGlyph`].
pub fn render_text(font: &LoadedFont, font_id: usize, text: &str, size: u32, pad: u32) -> Result<GrayImage, GenError> {
    let scale = PxScale::from(size as f32);
    let sf = font.font.as_scaled(scale);
    let ascent = sf.ascent();
    let line_h = font.line_height(size);

    let mut caret = 0.0f32;
    let mut glyphs = Vec::new();
    for c in text.chars() {
        let id = match font.glyph(c) {
            Some(id) => id,
            None if c.is_whitespace() => {
                caret += 0.3 * size as f32;
                continue;
            }
            None => return Err(GenError::MissingGlyph { symbol: c, font_id }),
        };
        glyphs.push(id.with_scale_and_position(scale, point(pad as f32 + caret, pad as f32 + ascent)));
        caret += sf.h_advance(id);
    }

    let width = caret.ceil() as u32 + 2 * pad;
    let height = line_h + 2 * pad;
    let mut coverage = vec![0f32; (width * height) as usize];
    for g in glyphs {
        if let Some(outlined) = font.font.outline_glyph(g) {
            let bounds = outlined.px_bounds();
            outlined.draw(|x, y, c| {
                let px = bounds.min.x as i64 + x as i64;
                let py = bounds.min.y as i64 + y as i64;
                if px >= 0 && py >= 0 && (px as u32) < width && (py as u32) < height {
                    let cell = &mut coverage[(py as u32 * width + px as u32) as usize];
                    *cell = (*cell + c).min(1.0);
                }
            });
        }
    }
    let pixels = coverage.into_iter().map(|c| 255 - (c * 255.0).round() as u8).collect();
    Ok(GrayImage::from_raw(width, height, pixels).expect("buffer sized to width*height"))
}

/// Lists font files (`.ttf`, `.otf`, `.ttc`) in `dir`, sorted by file name.
pub fn list_font_files(dir: &Path) -> Result<Vec<PathBuf>, GenError> {
    let entries = fs::read_dir(dir).map_err(|source| GenError::Io { path: dir.to_path_buf(), source })?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| GenError::Io { path: dir.to_path_buf(), source })?;
        let path = entry.path();
        let is_font = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "ttf" | "otf" | "ttc"));
        if is_font && path.is_file() {
            out.push(path);
        }
    }
    out.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> LoadedFont {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/fonts/train");
        LoadedFont::load(dir.join("KaTeX_Main-Regular.ttf")).unwrap()
    }

    #[test]
    fn empty_text_is_blank_minimal_raster() {
        let f = fixture();
        let img = render_text(&f, 0, "", 24, DEFAULT_PAD).unwrap();
        assert_eq!(img.width(), 2 * DEFAULT_PAD);
        assert_eq!(img.height(), f.line_height(24) + 2 * DEFAULT_PAD);
        assert!(img.pixels().all(|p| p.0[0] == 255));
    }

    #[test]
    fn layout_is_concatenative() {
        let f = fixture();
        let ab = render_text(&f, 0, "ab", 24, DEFAULT_PAD).unwrap();
        let abab = render_text(&f, 0, "abab", 24, DEFAULT_PAD).unwrap();
        assert!(ab.width() < abab.width());
        assert_eq!(ab.height(), abab.height());
        assert!(ab.pixels().any(|p| p.0[0] < 128), "glyphs should leave ink");
    }

    #[test]
    fn deterministic_and_padded() {
        let f = fixture();
        let a = render_text(&f, 0, "abc", 24, DEFAULT_PAD).unwrap();
        let b = render_text(&f, 0, "abc", 24, DEFAULT_PAD).unwrap();
        assert_eq!(a.as_raw(), b.as_raw());
        for x in 0..a.width() {
            assert_eq!(a.get_pixel(x, 0).0[0], 255);
            assert_eq!(a.get_pixel(x, a.height() - 1).0[0], 255);
        }
    }

    #[test]
    fn missing_glyph_is_an_error() {
        let f = fixture();
        let err = render_text(&f, 7, "a日", 24, DEFAULT_PAD).unwrap_err();
        assert!(matches!(err, GenError::MissingGlyph { symbol: '日', font_id: 7 }));
        assert_eq!(f.missing_glyphs(&['a', '日', ' ']), vec!['日']);
    }
}
