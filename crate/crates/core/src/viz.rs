//! Attention heatmaps drawn over the input page.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::data::gray_from_tensor;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One decoding step's attention, upsampled to image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapFrame {
    pub height: usize,
    pub width: usize,
    /// Row-major weights in `[0, 1]` after min-max normalisation.
    pub values: Vec<Scalar>,
    /// Peak grid cell `(row, col)` before upsampling.
    pub peak: (usize, usize),
}

impl HeatmapFrame {
    /// Nearest-neighbour upsampling of a `H'×W'` map by `factor`, cropped or
    /// zero-extended to `height×width`. A constant map normalises to all ones.
    pub fn from_alpha(alpha: &Tensor, factor: usize, height: usize, width: usize) -> Result<Self> {
        let shape = alpha.shape();
        if shape.len() != 2 || factor == 0 {
            return Err(Error::shape(
                "heatmap",
                format!("expected a rank-2 map and positive factor, got {shape:?} and {factor}"),
            ));
        }
        let (gh, gw) = (shape[0], shape[1]);
        let a = alpha.data();
        let lo = a.iter().copied().fold(Scalar::INFINITY, Scalar::min);
        let hi = a.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
        let norm = |v: Scalar| if hi > lo { (v - lo) / (hi - lo) } else { 1.0 };
        let mut values = vec![0.0; height * width];
        for y in 0..height {
            let gy = y / factor;
            if gy >= gh {
                break;
            }
            for x in 0..width {
                let gx = x / factor;
                if gx >= gw {
                    break;
                }
                values[y * width + x] = norm(a[gy * gw + gx]);
            }
        }
        let i = alpha.argmax();
        Ok(Self {
            height,
            width,
            values,
            peak: (i / gw, i % gw),
        })
    }

    /// Page in gray with the heatmap blended in red.
    pub fn overlay(&self, image: &Tensor) -> Result<RgbImage> {
        let (h, w, gray) = gray_from_tensor(image)?;
        if (h, w) != (self.height, self.width) {
            return Err(Error::shape(
                "overlay",
                format!("image is {h}×{w}, heatmap is {}×{}", self.height, self.width),
            ));
        }
        let mut out = RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let g = f64::from(gray[y * w + x]);
                let a = 0.6 * self.values[y * w + x];
                let mix = |c: f64| (g * (1.0 - a) + c * a).round() as u8;
                out.put_pixel(x as u32, y as u32, Rgb([mix(255.0), mix(0.0), mix(0.0)]));
            }
        }
        Ok(out)
    }
}

/// Writes `step_NNN.png` per step plus `frames.tsv` listing the emitted
/// token and attention peak of each step.
pub fn write_trace(
    dir: &Path,
    image: &Tensor,
    trace: &[Tensor],
    tokens: &[String],
    factor: usize,
) -> Result<()> {
    let (h, w, _) = image.hwc("trace")?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::from("step\tfile\ttoken\tpeak_row\tpeak_col\n");
    for (t, alpha) in trace.iter().enumerate() {
        let frame = HeatmapFrame::from_alpha(alpha, factor, h, w)?;
        let name = format!("step_{t:03}.png");
        let path = dir.join(&name);
        frame
            .overlay(image)?
            .save(&path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        let token = tokens.get(t).map(String::as_str).unwrap_or("<E>");
        let _ = writeln!(index, "{t}\t{name}\t{token}\t{}\t{}", frame.peak.0, frame.peak.1);
    }
    let path = dir.join("frames.tsv");
    std::fs::write(&path, index).map_err(|e| Error::io(&path, e))
}
