//! PNG panels of images, translations and label overlays.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use sifa_core::{Image, LabelMask};

use crate::engine::Tensor;
use crate::error::{Error, IoContext, Result};
use crate::models::{NetId, Nets};
use crate::train::{infer_segmentation, preprocess};

/// Overlay colours for AA, LAC, LVC and MYO.
pub const CLASS_COLORS: [[u8; 3]; 4] = [[40, 90, 255], [230, 40, 40], [160, 60, 200], [250, 220, 30]];
const OVERLAY_ALPHA: f32 = 0.55;
const GAP: usize = 2;

pub enum Panel<'a> {
    Gray(&'a Image),
    Overlay(&'a Image, &'a LabelMask),
}

impl Panel<'_> {
    fn image(&self) -> &Image {
        match self {
            Panel::Gray(i) | Panel::Overlay(i, _) => i,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, rgb: vec![255; width * height * 3] }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    /// Draws a panel with its top-left corner at `(x0, y0)`. Intensities are
    /// stretched from the image's own min..max to 0..255.
    pub fn draw(&mut self, panel: &Panel, x0: usize, y0: usize) {
        let img = panel.image();
        let (lo, hi) = img.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
        for y in 0..img.height().min(self.height.saturating_sub(y0)) {
            for x in 0..img.width().min(self.width.saturating_sub(x0)) {
                let g = ((img.get(y, x) - lo) * scale).clamp(0.0, 255.0);
                let mut px = [g; 3];
                if let Panel::Overlay(_, mask) = panel {
                    let label = mask.get(y, x) as usize;
                    if let Some(c) = label.checked_sub(1).and_then(|k| CLASS_COLORS.get(k)) {
                        for (p, &c) in px.iter_mut().zip(c) {
                            *p = (1.0 - OVERLAY_ALPHA) * *p + OVERLAY_ALPHA * c as f32;
                        }
                    }
                }
                let i = 3 * ((y0 + y) * self.width + x0 + x);
                for (dst, p) in self.rgb[i..i + 3].iter_mut().zip(px) {
                    *dst = p.round() as u8;
                }
            }
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).at(path)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let encoded = enc.write_header().and_then(|mut w| w.write_image_data(&self.rgb));
        encoded.map_err(|e| Error::parse(path, e.to_string()))
    }
}

/// Lays panels out row by row on a white background. All panels share the
/// size of the first one.
pub fn grid(rows: &[Vec<Panel>]) -> Canvas {
    let Some(first) = rows.iter().flatten().next() else {
        return Canvas::new(1, 1);
    };
    let (h, w) = (first.image().height(), first.image().width());
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut canvas = Canvas::new(cols * (w + GAP) - GAP, rows.len() * (h + GAP) - GAP);
    for (r, row) in rows.iter().enumerate() {
        for (c, panel) in row.iter().enumerate() {
            canvas.draw(panel, c * (w + GAP), r * (h + GAP));
        }
    }
    canvas
}

fn run_net(nets: &Nets, chain: &[NetId], image: &Image) -> Result<Image> {
    let x = preprocess(image)?;
    let mut t = Tensor::from_vec(1, 1, x.height(), x.width(), x.into_data());
    for &id in chain {
        t = nets.get(id).infer(&t)?;
    }
    Ok(Image::new(t.h, t.w, t.data, image.domain())?)
}

/// Two rows: the raw target slice, its predicted labels and its reference
/// labels (when known); then `x_s`, `G_t(x_s)` and the target slice again.
pub fn sample_panel(nets: &Nets, source: &Image, target: &Image, reference: Option<&LabelMask>) -> Result<Canvas> {
    let x_st = run_net(nets, &[NetId::Gt], source)?;
    let pred = infer_segmentation(nets, target)?;
    let mut top = vec![Panel::Gray(target), Panel::Overlay(target, &pred)];
    if let Some(m) = reference {
        top.push(Panel::Overlay(target, m));
    }
    Ok(grid(&[top, vec![Panel::Gray(source), Panel::Gray(&x_st), Panel::Gray(target)]]))
}
