//! Damage-map rendering: color-coded masks and image panels laid out side by
//! side, with a five-swatch legend strip underneath.
//!
//! Colors are fixed so rendered masks can be decoded back to class ids.

use std::path::Path;

use image::{ColorType, ImageReader, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{read_mask_png, read_rgb_png, DamageMask, DataError, NUM_CLASSES};
use crate::tensor::{Tensor, IGNORE_INDEX};

/// Background, no damage, minor, major, destroyed.
pub const CLASS_COLORS: [[u8; 3]; NUM_CLASSES] = [
    [0x00, 0x00, 0x00],
    [0x00, 0xB0, 0x50],
    [0xFF, 0xD5, 0x00],
    [0xFF, 0x8C, 0x00],
    [0xE0, 0x00, 0x00],
];
/// Pixels labelled with the ignore index.
pub const IGNORE_COLOR: [u8; 3] = [0xFF, 0xFF, 0xFF];
const GAP_COLOR: [u8; 3] = [0x40, 0x40, 0x40];

pub const GAP: usize = 2;
pub const LEGEND_HEIGHT: usize = 12;
const MIN_SWATCH_WIDTH: usize = 8;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("unknown class id {0}")]
    UnknownClass(u8),
    #[error("panel {index} is {found:?}, expected {expected:?}")]
    DimensionMismatch {
        index: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("pixel ({x}, {y}) has color {color:?}, which is not in the legend")]
    UnknownColor { x: usize, y: usize, color: [u8; 3] },
    #[error("nothing to render")]
    Empty,
    #[error("panel ({row}, {col}) outside the {rows}x{cols} layout")]
    OutOfLayout {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
    #[error("image {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}

pub fn class_color(class: u8) -> Result<[u8; 3], RenderError> {
    match class {
        IGNORE_INDEX => Ok(IGNORE_COLOR),
        c if (c as usize) < NUM_CLASSES => Ok(CLASS_COLORS[c as usize]),
        c => Err(RenderError::UnknownClass(c)),
    }
}

pub fn color_class(color: [u8; 3]) -> Option<u8> {
    if color == IGNORE_COLOR {
        return Some(IGNORE_INDEX);
    }
    CLASS_COLORS
        .iter()
        .position(|&c| c == color)
        .map(|i| i as u8)
}

#[derive(Debug, Clone, Copy)]
pub enum Panel<'a> {
    /// `[c, H, W]` in `[0, 1]`; one channel renders as gray.
    Image(&'a Tensor<f32>),
    Mask(&'a DamageMask),
}

impl Panel<'_> {
    fn dims(&self) -> (usize, usize) {
        match self {
            Panel::Image(t) => {
                let (_, h, w) = t.chw().expect("image panel is [c, H, W]");
                (h, w)
            }
            Panel::Mask(m) => m.dims(),
        }
    }

    fn color(&self, r: usize, c: usize) -> Result<[u8; 3], RenderError> {
        match self {
            Panel::Mask(m) => class_color(m.get(r, c)),
            Panel::Image(t) => {
                let (ch, h, w) = t.chw().expect("chw");
                let px = |k: usize| {
                    let v = t.data()[k.min(ch - 1) * h * w + r * w + c];
                    (v.clamp(0.0, 1.0) * 255.0).round() as u8
                };
                Ok([px(0), px(1), px(2)])
            }
        }
    }
}

/// Owned panel contents read from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum PanelSource {
    Image(Tensor<f32>),
    Mask(DamageMask),
}

impl PanelSource {
    pub fn as_panel(&self) -> Panel<'_> {
        match self {
            PanelSource::Image(t) => Panel::Image(t),
            PanelSource::Mask(m) => Panel::Mask(m),
        }
    }
}

/// 8-bit grayscale PNGs are read as class-id masks, everything else as RGB.
pub fn load_panel(path: &Path) -> Result<PanelSource, RenderError> {
    let err = |source| RenderError::Image {
        path: path.display().to_string(),
        source,
    };
    let reader = ImageReader::open(path)
        .map_err(|e| err(image::ImageError::IoError(e)))?
        .with_guessed_format()
        .map_err(|e| err(image::ImageError::IoError(e)))?;
    let color = reader.into_decoder().map_err(err)?;
    Ok(match image::ImageDecoder::color_type(&color) {
        ColorType::L8 => PanelSource::Mask(read_mask_png(path)?),
        _ => PanelSource::Image(read_rgb_png(path)?),
    })
}

/// Geometry of a rendered grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub rows: usize,
    pub cols: usize,
    pub tile_height: usize,
    pub tile_width: usize,
}

impl Layout {
    /// Top-left pixel `(y, x)` of panel `(row, col)`.
    pub fn origin(&self, row: usize, col: usize) -> (usize, usize) {
        (
            row * (self.tile_height + GAP),
            col * (self.tile_width + GAP),
        )
    }

    fn panels_width(&self) -> usize {
        self.cols * self.tile_width + (self.cols - 1) * GAP
    }

    pub fn width(&self) -> usize {
        self.panels_width().max(NUM_CLASSES * MIN_SWATCH_WIDTH)
    }

    pub fn legend_top(&self) -> usize {
        self.rows * self.tile_height + self.rows * GAP
    }

    pub fn height(&self) -> usize {
        self.legend_top() + LEGEND_HEIGHT
    }

    /// Horizontal span `[x0, x1)` of legend swatch `class`.
    pub fn swatch_span(&self, class: usize) -> (usize, usize) {
        let w = self.width();
        (class * w / NUM_CLASSES, (class + 1) * w / NUM_CLASSES)
    }
}

/// Renders `rows` of equally sized panels plus the legend strip.
pub fn render_grid(rows: &[Vec<Panel>]) -> Result<(RgbImage, Layout), RenderError> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or(RenderError::Empty)?;
    let (th, tw) = first.dims();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let layout = Layout {
        rows: rows.len(),
        cols,
        tile_height: th,
        tile_width: tw,
    };
    let mut img = RgbImage::from_pixel(
        layout.width() as u32,
        layout.height() as u32,
        Rgb(GAP_COLOR),
    );
    for (ri, row) in rows.iter().enumerate() {
        for (ci, panel) in row.iter().enumerate() {
            if panel.dims() != (th, tw) {
                return Err(RenderError::DimensionMismatch {
                    index: ri * cols + ci,
                    expected: (th, tw),
                    found: panel.dims(),
                });
            }
            let (y0, x0) = layout.origin(ri, ci);
            for r in 0..th {
                for c in 0..tw {
                    img.put_pixel((x0 + c) as u32, (y0 + r) as u32, Rgb(panel.color(r, c)?));
                }
            }
        }
    }
    for (class, color) in CLASS_COLORS.iter().enumerate() {
        let (x0, x1) = layout.swatch_span(class);
        for y in layout.legend_top()..layout.height() {
            for x in x0..x1 {
                img.put_pixel(x as u32, y as u32, Rgb(*color));
            }
        }
    }
    Ok((img, layout))
}

/// One row of panels plus the legend.
pub fn render_panels(panels: &[Panel]) -> Result<(RgbImage, Layout), RenderError> {
    render_grid(&[panels.to_vec()])
}

/// Recovers the class ids of the mask panel at `(row, col)`.
pub fn decode_mask(
    img: &RgbImage,
    layout: &Layout,
    row: usize,
    col: usize,
) -> Result<DamageMask, RenderError> {
    if row >= layout.rows || col >= layout.cols {
        return Err(RenderError::OutOfLayout {
            row,
            col,
            rows: layout.rows,
            cols: layout.cols,
        });
    }
    let (y0, x0) = layout.origin(row, col);
    let mut data = Vec::with_capacity(layout.tile_height * layout.tile_width);
    for r in 0..layout.tile_height {
        for c in 0..layout.tile_width {
            let (x, y) = (x0 + c, y0 + r);
            let color = img.get_pixel(x as u32, y as u32).0;
            data.push(color_class(color).ok_or(RenderError::UnknownColor { x, y, color })?);
        }
    }
    Ok(DamageMask::new(layout.tile_height, layout.tile_width, data).expect("legend classes"))
}

/// Color at the centre of each legend swatch.
pub fn legend_colors(img: &RgbImage, layout: &Layout) -> [[u8; 3]; NUM_CLASSES] {
    let y = (layout.legend_top() + LEGEND_HEIGHT / 2) as u32;
    std::array::from_fn(|class| {
        let (x0, x1) = layout.swatch_span(class);
        img.get_pixel(((x0 + x1) / 2) as u32, y).0
    })
}

pub fn load_png(path: &Path) -> Result<RgbImage, RenderError> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|source| RenderError::Image {
            path: path.display().to_string(),
            source,
        })
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<(), RenderError> {
    img.save(path).map_err(|source| RenderError::Image {
        path: path.display().to_string(),
        source,
    })
}
