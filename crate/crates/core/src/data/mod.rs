//! Samples, on-disk datasets, split manifests and the synthetic generator.
//!
//! Dataset directory layout:
//!
//! ```text
//! root/labels.tsv       relative/image/path<TAB>space-separated tokens
//! root/images/*.pgm     binary graymap, white = 255, ink = 0
//! root/vocab.txt        see [`crate::vocab`]
//! root/split.json       see [`split::SplitManifest`]
//! root/placements.tsv   synthetic datasets only: glyph positions
//! ```
//!
//! In memory, images are `H×W×1` tensors with ink high: a stored gray level
//! `p` becomes `(255 − p) / 255`.

pub mod split;
pub mod synth;

use std::io::Write;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use log::warn;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

pub use split::{make_split, SplitManifest, TaggedId};
pub use synth::{
    generate_corpus, generate_document, placements_tsv, GlyphSet, Placement, Rect, SynthDocument,
    SynthSettings, SynthSpec,
};

pub const LABELS_FILE: &str = "labels.tsv";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const SPLIT_FILE: &str = "split.json";
pub const PLACEMENTS_FILE: &str = "placements.tsv";
pub const IMAGE_DIR: &str = "images";

/// One (image, transcription) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `H×W×1`, values in `[0, 1]`, ink high.
    pub image: Tensor,
    /// Character token indices; never `<S>` or `<E>`.
    pub target: Vec<usize>,
}

/// Ink-high tensor from 8-bit gray levels (white = 255).
pub fn tensor_from_gray(height: usize, width: usize, gray: &[u8]) -> Tensor {
    let data = gray.iter().map(|&p| f64::from(255 - p) / 255.0).collect();
    Tensor::new(&[height, width, 1], data).expect("dimensions match pixel count")
}

/// 8-bit gray levels (white = 255) from an ink-high tensor.
pub fn gray_from_tensor(image: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w, c) = image.hwc("image")?;
    if c != 1 {
        return Err(Error::Image(format!("expected one channel, got {c}")));
    }
    let gray = image
        .data()
        .iter()
        .map(|&v| 255 - (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok((h, w, gray))
}

pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w, gray) = gray_from_tensor(image)?;
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&gray, w as u32, h as u32, ExtendedColorType::L8)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(buf)
}

pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let bytes = encode_pgm(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads any grayscale-convertible image (PGM, PNG) as an ink-high tensor.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(tensor_from_gray(h as usize, w as usize, img.as_raw()))
}

/// Pads with background on the bottom and right so both extents are
/// multiples of `factor`. Returns the image unchanged when already aligned.
pub fn pad_to_multiple(image: &Tensor, factor: usize) -> Result<(Tensor, bool)> {
    let (h, w, c) = image.hwc("pad")?;
    let nh = h.div_ceil(factor) * factor;
    let nw = w.div_ceil(factor) * factor;
    if nh == h && nw == w {
        return Ok((image.clone(), false));
    }
    let mut out = Tensor::zeros(&[nh, nw, c]);
    for y in 0..h {
        let src = &image.data()[y * w * c..(y + 1) * w * c];
        out.data_mut()[y * nw * c..y * nw * c + w * c].copy_from_slice(src);
    }
    Ok((out, true))
}

fn image_name(id: &str) -> String {
    format!("{IMAGE_DIR}/{id}.pgm")
}

/// Writes `samples` as `labels.tsv` plus one PGM per sample, and the
/// vocabulary file.
pub fn write_dataset(root: &Path, samples: &[Sample], vocab: &Vocabulary) -> Result<()> {
    let images = root.join(IMAGE_DIR);
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut labels = String::new();
    for s in samples {
        let rel = image_name(&s.id);
        write_pgm(&root.join(&rel), &s.image)?;
        labels.push_str(&rel);
        labels.push('\t');
        labels.push_str(&vocab.decode(&s.target).join(" "));
        labels.push('\n');
    }
    let path = root.join(LABELS_FILE);
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(labels.as_bytes()).map_err(|e| Error::io(&path, e))?;
    vocab.save(&root.join(VOCAB_FILE))
}

/// Reads `root/labels.tsv` and every image it references.
pub fn load_dataset(root: &Path, vocab: &Vocabulary) -> Result<Vec<Sample>> {
    let labels: PathBuf = root.join(LABELS_FILE);
    let text = std::fs::read_to_string(&labels).map_err(|e| Error::io(&labels, e))?;
    let mut samples = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let err = |msg: String| Error::Parse {
            path: labels.clone(),
            line: line_no,
            msg,
        };
        if line.trim().is_empty() {
            continue;
        }
        let (rel, tokens) = line
            .split_once('\t')
            .ok_or_else(|| err("expected <image path><TAB><tokens>".into()))?;
        let toks: Vec<&str> = tokens.split_whitespace().collect();
        if rel.is_empty() || toks.is_empty() {
            return Err(err("empty image path or transcription".into()));
        }
        let mut target = Vec::with_capacity(toks.len());
        for t in toks {
            match vocab.lookup(t) {
                Some(i) if !Vocabulary::is_reserved(i) => target.push(i),
                Some(_) => return Err(err(format!("reserved token {t} in transcription"))),
                None => return Err(err(format!("unknown token {t:?}"))),
            }
        }
        let path = root.join(rel);
        if !path.is_file() {
            return Err(err(format!("image file {} not found", path.display())));
        }
        let image = read_image(&path).map_err(|e| err(e.to_string()))?;
        let id = Path::new(rel)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| rel.to_string());
        samples.push(Sample { id, image, target });
    }
    if samples.is_empty() {
        warn!("{} lists no samples", labels.display());
    }
    Ok(samples)
}
