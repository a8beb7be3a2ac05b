//! Coarse-to-fine visual perception: encoder-budget sizing, coordinate
//! denormalization, region mapping back to raw pixels, and crop/re-encode.
//!
//! Document pages are far larger than the pixel budget a vision encoder
//! accepts, so the view a policy sees is a downscaled rendition. A region
//! action selects a box in that encoded view; we map it to raw pixels, crop
//! the raw page, and re-encode the crop under the same budget. Because the
//! crop covers fewer raw pixels than the full page, the re-encoded view
//! spends more encoder pixels per raw pixel — the zoom.
//!
//! Coordinates round half-up at every space conversion and clamp to bounds;
//! boxes straying more than [`CLAMP_TOLERANCE_PX`] outside a view are
//! rejected.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack allowed outside view bounds before a region is rejected rather
/// than clamped.
pub const CLAMP_TOLERANCE_PX: i64 = 2;

/// Geometry of the vision encoder the views are sized for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderProfile {
    /// Pixel budget: encoded views satisfy `w * h <= max_pixels`.
    pub max_pixels: u64,
    /// Encoded dimensions are rounded to a multiple of this.
    pub patch_multiple: u32,
    /// When set, the policy emits coordinates normalized to `[0, δ]`;
    /// `None` means raw encoder-space coordinates.
    pub normalization_scale: Option<u32>,
}

impl Default for EncoderProfile {
    fn default() -> Self {
        EncoderProfile {
            max_pixels: 1_000_000,
            patch_multiple: 28,
            normalization_scale: None,
        }
    }
}

impl EncoderProfile {
    pub fn validate(&self) -> Result<(), PerceptionError> {
        if self.max_pixels == 0 || self.patch_multiple == 0 {
            return Err(PerceptionError::InvalidProfile);
        }
        if self.normalization_scale == Some(0) {
            return Err(PerceptionError::InvalidProfile);
        }
        Ok(())
    }
}

/// Raw document page dimensions plus its payload reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDocument {
    pub doc_id: String,
    pub width: u32,
    pub height: u32,
}

/// Coordinate space a [`RegionBox`] lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordSpace {
    Encoder,
    Normalized,
    Raw,
}

/// An axis-aligned box with a named coordinate space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
    pub space: CoordSpace,
}

impl RegionBox {
    pub fn new(space: CoordSpace, coords: [u32; 4]) -> Result<Self, PerceptionError> {
        let b = RegionBox {
            x_min: coords[0],
            y_min: coords[1],
            x_max: coords[2],
            y_max: coords[3],
            space,
        };
        if b.x_min >= b.x_max || b.y_min >= b.y_max {
            return Err(PerceptionError::DegenerateRegion);
        }
        Ok(b)
    }

    pub fn coords(&self) -> [u32; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }
}

/// An encoder-sized rendition of (a crop of) a document page.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedView {
    pub doc_id: String,
    pub enc_width: u32,
    pub enc_height: u32,
    /// Raw-pixel origin of the crop this view renders (0,0 for full pages).
    pub crop_x: u32,
    pub crop_y: u32,
    /// Raw-pixel extent of the crop (full page dimensions for full views).
    pub crop_width: u32,
    pub crop_height: u32,
}

impl EncodedView {
    /// Full-page view of a document, sized under the encoder budget without
    /// upscaling.
    pub fn full_page(doc: &ImageDocument, profile: &EncoderProfile) -> Result<Self, PerceptionError> {
        let (enc_width, enc_height) = fit_to_budget(doc.width, doc.height, profile)?;
        Ok(EncodedView {
            doc_id: doc.doc_id.clone(),
            enc_width,
            enc_height,
            crop_x: 0,
            crop_y: 0,
            crop_width: doc.width,
            crop_height: doc.height,
        })
    }

    /// Encoder pixels spent per raw pixel (area ratio). Higher means finer
    /// perception of the underlying region.
    pub fn magnification(&self) -> f64 {
        (f64::from(self.enc_width) * f64::from(self.enc_height))
            / (f64::from(self.crop_width) * f64::from(self.crop_height))
    }

    /// The raw-pixel region this view renders.
    pub fn raw_extent(&self) -> RegionBox {
        RegionBox {
            x_min: self.crop_x,
            y_min: self.crop_y,
            x_max: self.crop_x + self.crop_width,
            y_max: self.crop_y + self.crop_height,
            space: CoordSpace::Raw,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PerceptionError {
    #[error("zero image dimension")]
    ZeroDimension,
    #[error("invalid encoder profile")]
    InvalidProfile,
    #[error("coordinate outside the normalization range")]
    OutOfRange,
    #[error("region more than {CLAMP_TOLERANCE_PX} px outside the view")]
    RegionOutOfBounds,
    #[error("region degenerates to zero area")]
    DegenerateRegion,
    #[error("no image observation in context")]
    NoImageInContext,
    #[error("image codec failure: {0}")]
    Codec(String),
}

fn round_half_up(x: f64) -> u64 {
    (x + 0.5).floor() as u64
}

/// Rounds to the nearest positive multiple of `m`.
fn round_to_multiple(x: f64, m: u32) -> u32 {
    let m = u64::from(m);
    let k = round_half_up(x / m as f64).max(1);
    (k * m).min(u64::from(u32::MAX)) as u32
}

/// While over budget, shrink whichever dimension keeps the aspect ratio
/// closest to the target.
fn shrink_into_budget(mut w: u32, mut h: u32, aspect: f64, profile: &EncoderProfile) -> (u32, u32) {
    let m = profile.patch_multiple;
    while u64::from(w) * u64::from(h) > profile.max_pixels && w > m && h > m {
        let dev_w = (f64::from(w - m) / f64::from(h) - aspect).abs();
        let dev_h = (f64::from(w) / f64::from(h - m) - aspect).abs();
        if dev_w <= dev_h {
            w -= m;
        } else {
            h -= m;
        }
    }
    (w, h)
}

/// Scales `(w, h)` by `scale`, rounds to the patch multiple, and shrinks
/// into the budget.
fn scale_to_budget(
    w_raw: u32,
    h_raw: u32,
    scale: f64,
    profile: &EncoderProfile,
) -> (u32, u32) {
    let w = round_to_multiple(f64::from(w_raw) * scale, profile.patch_multiple);
    let h = round_to_multiple(f64::from(h_raw) * scale, profile.patch_multiple);
    shrink_into_budget(w, h, f64::from(w_raw) / f64::from(h_raw), profile)
}

/// Sizes a full page under the encoder budget. Pages already under budget
/// keep their raw dimensions (rounded to the patch multiple); larger pages
/// are scaled down preserving aspect ratio. Never upscales.
pub fn fit_to_budget(
    w_raw: u32,
    h_raw: u32,
    profile: &EncoderProfile,
) -> Result<(u32, u32), PerceptionError> {
    profile.validate()?;
    if w_raw == 0 || h_raw == 0 {
        return Err(PerceptionError::ZeroDimension);
    }
    let area = u64::from(w_raw) * u64::from(h_raw);
    let scale = if area <= profile.max_pixels {
        1.0
    } else {
        (profile.max_pixels as f64 / area as f64).sqrt()
    };
    Ok(scale_to_budget(w_raw, h_raw, scale, profile))
}

/// Sizes a crop so it fills the encoder budget, scaling up or down. This is
/// the zoom: small crops get rendered large.
pub fn fill_budget(
    w_raw: u32,
    h_raw: u32,
    profile: &EncoderProfile,
) -> Result<(u32, u32), PerceptionError> {
    profile.validate()?;
    if w_raw == 0 || h_raw == 0 {
        return Err(PerceptionError::ZeroDimension);
    }
    let area = u64::from(w_raw) * u64::from(h_raw);
    let scale = (profile.max_pixels as f64 / area as f64).sqrt();
    Ok(scale_to_budget(w_raw, h_raw, scale, profile))
}

/// Maps a box from `[0, δ]`-normalized coordinates into encoder space.
pub fn denormalize(
    bbox: [i64; 4],
    enc_width: u32,
    enc_height: u32,
    delta: u32,
) -> Result<[i64; 4], PerceptionError> {
    let delta_i = i64::from(delta);
    if bbox.iter().any(|&c| c < 0 || c > delta_i) {
        return Err(PerceptionError::OutOfRange);
    }
    let scale = |c: i64, dim: u32| round_half_up(c as f64 * f64::from(dim) / f64::from(delta)) as i64;
    Ok([
        scale(bbox[0], enc_width),
        scale(bbox[1], enc_height),
        scale(bbox[2], enc_width),
        scale(bbox[3], enc_height),
    ])
}

/// Maps an encoder-space box on `view` to raw pixels. Coordinates up to
/// [`CLAMP_TOLERANCE_PX`] outside the view are clamped; further out is
/// rejected.
pub fn map_region_to_raw(
    bbox: [i64; 4],
    view: &EncodedView,
) -> Result<RegionBox, PerceptionError> {
    let bounds = [
        i64::from(view.enc_width),
        i64::from(view.enc_height),
        i64::from(view.enc_width),
        i64::from(view.enc_height),
    ];
    let mut clamped = [0i64; 4];
    for i in 0..4 {
        let limit = bounds[i];
        let c = bbox[i];
        if c < -CLAMP_TOLERANCE_PX || c > limit + CLAMP_TOLERANCE_PX {
            return Err(PerceptionError::RegionOutOfBounds);
        }
        clamped[i] = c.clamp(0, limit);
    }
    let sx = f64::from(view.crop_width) / f64::from(view.enc_width);
    let sy = f64::from(view.crop_height) / f64::from(view.enc_height);
    let map = |c: i64, s: f64, origin: u32, extent: u32| -> u32 {
        let v = round_half_up(c as f64 * s).min(u64::from(extent)) as u32;
        origin + v
    };
    let x_min = map(clamped[0], sx, view.crop_x, view.crop_width);
    let y_min = map(clamped[1], sy, view.crop_y, view.crop_height);
    let x_max = map(clamped[2], sx, view.crop_x, view.crop_width);
    let y_max = map(clamped[3], sy, view.crop_y, view.crop_height);
    if x_min >= x_max || y_min >= y_max {
        return Err(PerceptionError::DegenerateRegion);
    }
    RegionBox::new(CoordSpace::Raw, [x_min, y_min, x_max, y_max])
}

/// Crops a raw-pixel region out of a document and re-encodes it under the
/// budget, zooming the crop to fill it.
pub fn crop_and_reencode(
    doc: &ImageDocument,
    raw_box: &RegionBox,
    profile: &EncoderProfile,
) -> Result<EncodedView, PerceptionError> {
    debug_assert_eq!(raw_box.space, CoordSpace::Raw);
    if raw_box.x_max > doc.width || raw_box.y_max > doc.height {
        return Err(PerceptionError::RegionOutOfBounds);
    }
    if raw_box.area() == 0 {
        return Err(PerceptionError::DegenerateRegion);
    }
    let (enc_width, enc_height) = fill_budget(raw_box.width(), raw_box.height(), profile)?;
    Ok(EncodedView {
        doc_id: doc.doc_id.clone(),
        enc_width,
        enc_height,
        crop_x: raw_box.x_min,
        crop_y: raw_box.y_min,
        crop_width: raw_box.width(),
        crop_height: raw_box.height(),
    })
}

/// Resolves a region action against the image observations of a trajectory:
/// picks the target view (1-based `target_index`, default latest), applies
/// optional denormalization, maps to raw pixels, and produces the zoomed
/// crop view.
pub fn apply_region_action(
    bbox: [i32; 4],
    target_index: Option<u32>,
    views: &[EncodedView],
    docs: &dyn Fn(&str) -> Option<ImageDocument>,
    profile: &EncoderProfile,
) -> Result<EncodedView, PerceptionError> {
    if views.is_empty() {
        return Err(PerceptionError::NoImageInContext);
    }
    let view = match target_index {
        None => views.last().unwrap(),
        Some(k) => views
            .get(k as usize - 1)
            .ok_or(PerceptionError::NoImageInContext)?,
    };
    let mut coords = [
        i64::from(bbox[0]),
        i64::from(bbox[1]),
        i64::from(bbox[2]),
        i64::from(bbox[3]),
    ];
    if let Some(delta) = profile.normalization_scale {
        coords = denormalize(coords, view.enc_width, view.enc_height, delta)?;
    }
    let raw_box = map_region_to_raw(coords, view)?;
    let doc = docs(&view.doc_id).ok_or(PerceptionError::NoImageInContext)?;
    crop_and_reencode(&doc, &raw_box, profile)
}

/// Renders a view from decoded raw pixels: crop, bilinear resize to the
/// encoded dimensions, PNG-encode.
pub fn render_view(
    raw: &image::DynamicImage,
    view: &EncodedView,
) -> Result<Vec<u8>, PerceptionError> {
    use image::imageops::FilterType;
    let cropped = raw.crop_imm(view.crop_x, view.crop_y, view.crop_width, view.crop_height);
    let resized = cropped.resize_exact(view.enc_width, view.enc_height, FilterType::Triangle);
    let mut out = std::io::Cursor::new(Vec::new());
    resized
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| PerceptionError::Codec(e.to_string()))?;
    Ok(out.into_inner())
}

/// Decodes a PNG or JPEG payload.
pub fn decode_image(bytes: &[u8]) -> Result<image::DynamicImage, PerceptionError> {
    image::load_from_memory(bytes).map_err(|e| PerceptionError::Codec(e.to_string()))
}
