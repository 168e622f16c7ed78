//! Seeded generator of multi-line vertical documents.
//!
//! The canvas is divided into `lines_max` columns and `chars_max` rows of
//! equal slots. Line 0 is the rightmost column; characters run top to bottom
//! inside a column. The transcription therefore reads columns right to left
//! and each column top to bottom. Each glyph is centred in its slot, shifted
//! by up to `jitter` pixels on both axes, and stamped with a random ink level.
//! Speckle noise is sprinkled over the whole page afterwards.
//!
//! Glyph classes are procedurally drawn stroke bitmaps, kept pairwise distinct.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{tensor_from_gray, Sample};
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

/// Basic hiragana, used as token names for the first 46 classes.
pub const HIRAGANA: &str =
    "あいうえおかきくけこさしすせそたちつてとなにぬねのはひふへほまみむめもやゆよらりるれろわをん";

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 && x < self.x1 as f64 && y >= self.y0 as f64 && y < self.y1 as f64
    }
}

/// Where one character of the transcription was stamped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Placement {
    /// Vocabulary index.
    pub token: usize,
    /// Column, 0 = rightmost.
    pub line: usize,
    /// Row within the column, 0 = top.
    pub row: usize,
    /// Layout slot owned by the character.
    pub slot: Rect,
    /// Bounding box of the stamped glyph bitmap.
    pub glyph: Rect,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlyphSet {
    pub size: usize,
    /// Token name per class.
    pub names: Vec<String>,
    /// `size×size` ink masks (0 or 1) per class.
    pub masks: Vec<Vec<u8>>,
}

fn class_name(i: usize) -> String {
    HIRAGANA
        .chars()
        .nth(i)
        .map(String::from)
        .unwrap_or_else(|| format!("x{i}"))
}

fn draw_stroke(mask: &mut [u8], size: usize, a: (f64, f64), b: (f64, f64)) {
    let steps = ((b.0 - a.0).hypot(b.1 - a.1) * 2.0).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (cx, cy) = (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t);
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (x, y) = (cx.round() as i64 + dx, cy.round() as i64 + dy);
                if x >= 0 && y >= 0 && (x as usize) < size && (y as usize) < size {
                    mask[y as usize * size + x as usize] = 1;
                }
            }
        }
    }
}

impl GlyphSet {
    /// `count` random stroke glyphs. Every pair differs in at least 15% of
    /// its pixels.
    pub fn generate(count: usize, size: usize, seed: u64) -> Result<Self> {
        if count == 0 || size < 4 {
            return Err(Error::Generation(
                "need at least one class and glyph size ≥ 4".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let min_diff = (size * size * 15).div_ceil(100);
        let mut masks: Vec<Vec<u8>> = Vec::with_capacity(count);
        let mut attempts = 0;
        while masks.len() < count {
            attempts += 1;
            if attempts > 10_000 * count {
                return Err(Error::Generation("could not draw distinct glyphs".into()));
            }
            let mut mask = vec![0u8; size * size];
            let hi = (size - 1) as f64;
            for _ in 0..rng.random_range(2..=4) {
                let a = (rng.random_range(0.0..=hi), rng.random_range(0.0..=hi));
                let b = (rng.random_range(0.0..=hi), rng.random_range(0.0..=hi));
                draw_stroke(&mut mask, size, a, b);
            }
            let distinct = masks
                .iter()
                .all(|m| m.iter().zip(&mask).filter(|(a, b)| a != b).count() >= min_diff);
            if distinct {
                masks.push(mask);
            }
        }
        Ok(Self {
            size,
            names: (0..count).map(class_name).collect(),
            masks,
        })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Vocabulary whose character tokens are the class names in order, so
    /// class `c` has index `c + 2`.
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.names.iter().cloned()).expect("class names are distinct")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub canvas_height: usize,
    pub canvas_width: usize,
    pub glyphs: GlyphSet,
    /// Inclusive `(min, max)` number of columns.
    pub lines: (usize, usize),
    /// Inclusive `(min, max)` characters per column.
    pub chars_per_line: (usize, usize),
    pub jitter: usize,
    /// Per-pixel speckle probability.
    pub noise: f64,
    /// Seed of the glyph set.
    pub seed: u64,
}

/// Plain settings from which a [`SynthSpec`] is built.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSettings {
    pub canvas_height: usize,
    pub canvas_width: usize,
    pub num_classes: usize,
    pub glyph_size: usize,
    pub lines_min: usize,
    pub lines_max: usize,
    pub chars_min: usize,
    pub chars_max: usize,
    pub jitter: usize,
    pub noise: f64,
    pub glyph_seed: u64,
}

impl Default for SynthSettings {
    /// Two columns of three characters on a 96×64 page, ten classes.
    fn default() -> Self {
        Self {
            canvas_height: 96,
            canvas_width: 64,
            num_classes: 10,
            glyph_size: 20,
            lines_min: 2,
            lines_max: 2,
            chars_min: 3,
            chars_max: 3,
            jitter: 3,
            noise: 0.01,
            glyph_seed: 7,
        }
    }
}

impl SynthSettings {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut s = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, found {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = || err(format!("invalid value {v:?} for {k}"));
            let int = || v.parse::<usize>().map_err(|_| bad());
            match k {
                "canvas_height" => s.canvas_height = int()?,
                "canvas_width" => s.canvas_width = int()?,
                "num_classes" => s.num_classes = int()?,
                "glyph_size" => s.glyph_size = int()?,
                "lines_min" => s.lines_min = int()?,
                "lines_max" => s.lines_max = int()?,
                "chars_min" => s.chars_min = int()?,
                "chars_max" => s.chars_max = int()?,
                "jitter" => s.jitter = int()?,
                "noise" => s.noise = v.parse().map_err(|_| bad())?,
                "glyph_seed" => s.glyph_seed = v.parse().map_err(|_| bad())?,
                _ => return Err(err(format!("unknown key {k:?}"))),
            }
        }
        Ok(s)
    }

    pub fn build(&self) -> Result<SynthSpec> {
        let spec = SynthSpec {
            canvas_height: self.canvas_height,
            canvas_width: self.canvas_width,
            glyphs: GlyphSet::generate(self.num_classes, self.glyph_size, self.glyph_seed)?,
            lines: (self.lines_min, self.lines_max),
            chars_per_line: (self.chars_min, self.chars_max),
            jitter: self.jitter,
            noise: self.noise,
            seed: self.glyph_seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// A generated sample together with its placement log, in transcription order.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDocument {
    pub sample: Sample,
    pub placements: Vec<Placement>,
}

impl SynthSpec {
    pub fn column_width(&self) -> usize {
        self.canvas_width / self.lines.1.max(1)
    }

    pub fn row_height(&self) -> usize {
        self.canvas_height / self.chars_per_line.1.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let (l0, l1) = self.lines;
        let (c0, c1) = self.chars_per_line;
        if l0 < 1 || l0 > l1 || c0 < 1 || c0 > c1 {
            return Err(Error::Generation(format!(
                "empty or inverted ranges: lines {l0}..={l1}, chars {c0}..={c1}"
            )));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Generation("noise must lie in [0, 1]".into()));
        }
        let need = self.glyphs.size + 2 * self.jitter;
        if need > self.column_width() || need > self.row_height() {
            return Err(Error::Generation(format!(
                "glyph overflow: {}px glyph with {}px jitter does not fit {}×{} slots of a {}×{} canvas",
                self.glyphs.size,
                self.jitter,
                self.row_height(),
                self.column_width(),
                self.canvas_height,
                self.canvas_width
            )));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        self.glyphs.vocabulary()
    }
}

/// Renders one document; identical `(spec, seed)` give identical output.
pub fn generate_document(spec: &SynthSpec, seed: u64, id: &str) -> Result<SynthDocument> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (spec.canvas_height, spec.canvas_width);
    let (cw, rh) = (spec.column_width(), spec.row_height());
    let size = spec.glyphs.size;
    let mut ink = vec![0u8; h * w];
    let mut placements = Vec::new();
    let n_lines = rng.random_range(spec.lines.0..=spec.lines.1);
    for line in 0..n_lines {
        let n_chars = rng.random_range(spec.chars_per_line.0..=spec.chars_per_line.1);
        let sx0 = w - (line + 1) * cw;
        for row in 0..n_chars {
            let class = rng.random_range(0..spec.glyphs.len());
            let j = spec.jitter as i64;
            let dx = rng.random_range(-j..=j);
            let dy = rng.random_range(-j..=j);
            let level: u8 = rng.random_range(170..=255);
            let sy0 = row * rh;
            let gx0 = (sx0 as i64 + ((cw - size) / 2) as i64 + dx) as usize;
            let gy0 = (sy0 as i64 + ((rh - size) / 2) as i64 + dy) as usize;
            let mask = &spec.glyphs.masks[class];
            for y in 0..size {
                for x in 0..size {
                    if mask[y * size + x] != 0 {
                        let p = &mut ink[(gy0 + y) * w + gx0 + x];
                        *p = (*p).max(level);
                    }
                }
            }
            placements.push(Placement {
                token: class + 2,
                line,
                row,
                slot: Rect {
                    x0: sx0,
                    y0: sy0,
                    x1: sx0 + cw,
                    y1: sy0 + rh,
                },
                glyph: Rect {
                    x0: gx0,
                    y0: gy0,
                    x1: gx0 + size,
                    y1: gy0 + size,
                },
            });
        }
    }
    if spec.noise > 0.0 {
        for p in ink.iter_mut() {
            if rng.random_bool(spec.noise) {
                *p = (*p).max(rng.random_range(80..=255));
            }
        }
    }
    let gray: Vec<u8> = ink.iter().map(|&v| 255 - v).collect();
    Ok(SynthDocument {
        sample: Sample {
            id: id.to_string(),
            image: tensor_from_gray(h, w, &gray),
            target: placements.iter().map(|p| p.token).collect(),
        },
        placements,
    })
}

/// Seed of the `index`-th document of a corpus generated with `seed`.
pub fn document_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x5851_F42D_4C95_7F2D)
        .wrapping_add(index as u64)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// `count` documents with ids `doc00000`, `doc00001`, …
pub fn generate_corpus(spec: &SynthSpec, count: usize, seed: u64) -> Result<Vec<SynthDocument>> {
    (0..count)
        .map(|i| generate_document(spec, document_seed(seed, i), &format!("doc{i:05}")))
        .collect()
}

/// Placement log as TSV: one row per stamped character.
pub fn placements_tsv(docs: &[SynthDocument]) -> String {
    let mut s = String::from(
        "id\tstep\ttoken\tline\trow\tslot_x0\tslot_y0\tslot_x1\tslot_y1\tglyph_x0\tglyph_y0\tglyph_x1\tglyph_y1\n",
    );
    for d in docs {
        for (step, p) in d.placements.iter().enumerate() {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                d.sample.id,
                step,
                p.token,
                p.line,
                p.row,
                p.slot.x0,
                p.slot.y0,
                p.slot.x1,
                p.slot.y1,
                p.glyph.x0,
                p.glyph.y0,
                p.glyph.x1,
                p.glyph.y1
            ));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(lines: (usize, usize), chars: (usize, usize)) -> SynthSpec {
        SynthSettings {
            lines_min: lines.0,
            lines_max: lines.1,
            chars_min: chars.0,
            chars_max: chars.1,
            noise: 0.0,
            jitter: 0,
            ..SynthSettings::default()
        }
        .build()
        .unwrap()
    }

    #[test]
    fn glyphs_are_distinct() {
        let g = GlyphSet::generate(46, 20, 1).unwrap();
        assert_eq!(g.len(), 46);
        assert_eq!(g.names[0], "あ");
        assert_eq!(g.names[45], "ん");
        for i in 0..g.len() {
            for j in 0..i {
                assert_ne!(g.masks[i], g.masks[j]);
            }
        }
    }

    #[test]
    fn single_glyph_is_centred() {
        let s = SynthSettings {
            canvas_height: 32,
            canvas_width: 32,
            lines_min: 1,
            lines_max: 1,
            chars_min: 1,
            chars_max: 1,
            jitter: 0,
            noise: 0.0,
            ..SynthSettings::default()
        }
        .build()
        .unwrap();
        let d = generate_document(&s, 5, "a").unwrap();
        assert_eq!(d.sample.target.len(), 1);
        assert_eq!(d.placements[0].glyph, Rect { x0: 6, y0: 6, x1: 26, y1: 26 });
    }

    #[test]
    fn reading_order_is_right_to_left_top_to_bottom() {
        let s = spec((2, 2), (3, 3));
        let d = generate_document(&s, 9, "a").unwrap();
        assert_eq!(d.placements.len(), 6);
        for (i, p) in d.placements.iter().enumerate() {
            assert_eq!((p.line, p.row), (i / 3, i % 3));
        }
        // first column is the right half, rows descend
        assert!(d.placements[0].slot.x0 >= 32 && d.placements[3].slot.x1 <= 32);
        assert!(d.placements[0].glyph.y0 < d.placements[1].glyph.y0);
        assert_eq!(d.sample.target, d.placements.iter().map(|p| p.token).collect::<Vec<_>>());
    }

    #[test]
    fn overflow_and_ranges_are_rejected() {
        let too_many = SynthSettings {
            chars_min: 4,
            chars_max: 5,
            ..SynthSettings::default()
        };
        assert!(matches!(too_many.build(), Err(Error::Generation(_))));
        let inverted = SynthSettings {
            lines_min: 3,
            lines_max: 2,
            ..SynthSettings::default()
        };
        assert!(inverted.build().is_err());
    }

    #[test]
    fn settings_parse() {
        let s = SynthSettings::parse("num_classes = 12\njitter=2 # px\n", Path::new("s")).unwrap();
        assert_eq!(s.num_classes, 12);
        assert_eq!(s.jitter, 2);
        assert!(SynthSettings::parse("colour=red\n", Path::new("s")).is_err());
    }
}
