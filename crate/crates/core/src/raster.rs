//! 8-bit RGB frames and the handful of pixel operations the pipeline needs.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("buffer length {len} does not match {width}x{height}x3")]
    BadLength { width: u32, height: u32, len: usize },
    #[error("zero-sized image")]
    Empty,
    #[error("{path}: only lossless PNG frames are accepted (found {found})")]
    NotPng { path: String, found: String },
    #[error("{path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Row-major interleaved RGB image.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl std::fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageBuffer")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl Rect {
    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.x as u64 + self.width as u64 <= width as u64 && self.y as u64 + self.height as u64 <= height as u64
    }
}

impl ImageBuffer {
    pub const CHANNELS: usize = 3;

    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self, RasterError> {
        if data.len() != width as usize * height as usize * Self::CHANNELS {
            return Err(RasterError::BadLength {
                width,
                height,
                len: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width as usize * height as usize * 3).collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = self.offset(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = self.offset(x, y);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn fill_rect(&mut self, rect: Rect, rgb: [u8; 3]) {
        for y in rect.y..(rect.y + rect.height).min(self.height) {
            for x in rect.x..(rect.x + rect.width).min(self.width) {
                self.put_pixel(x, y, rgb);
            }
        }
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * Self::CHANNELS
    }

    pub fn row(&self, y: u32) -> &[u8] {
        let stride = self.width as usize * 3;
        &self.data[y as usize * stride..(y as usize + 1) * stride]
    }

    pub fn flip_horizontal(&self) -> ImageBuffer {
        let mut out = self.clone();
        let w = self.width as usize;
        for (src, dst) in self.data.chunks_exact(w * 3).zip(out.data.chunks_exact_mut(w * 3)) {
            for x in 0..w {
                dst[x * 3..x * 3 + 3].copy_from_slice(&src[(w - 1 - x) * 3..(w - 1 - x) * 3 + 3]);
            }
        }
        out
    }

    /// Copies out the columns `x0..x0 + width` over the full height.
    pub fn crop_columns(&self, x0: u32, width: u32) -> ImageBuffer {
        self.crop(Rect {
            x: x0,
            y: 0,
            width,
            height: self.height,
        })
    }

    pub fn crop(&self, rect: Rect) -> ImageBuffer {
        assert!(rect.fits_within(self.width, self.height), "crop outside image");
        let mut data = Vec::with_capacity(rect.area() as usize * 3);
        for y in rect.y..rect.y + rect.height {
            let row = self.row(y);
            data.extend_from_slice(&row[rect.x as usize * 3..(rect.x + rect.width) as usize * 3]);
        }
        ImageBuffer {
            width: rect.width,
            height: rect.height,
            data,
        }
    }

    /// Opaque paste of `src` with its top-left corner at `(x, y)`.
    pub fn paste(&mut self, src: &ImageBuffer, x: u32, y: u32) {
        assert!(
            Rect {
                x,
                y,
                width: src.width,
                height: src.height
            }
            .fits_within(self.width, self.height),
            "paste outside image"
        );
        let stride = self.width as usize * 3;
        for row in 0..src.height {
            let dst_off = (y + row) as usize * stride + x as usize * 3;
            self.data[dst_off..dst_off + src.width as usize * 3].copy_from_slice(src.row(row));
        }
    }

    /// Bilinear resample with pixel-center alignment; values rounded to u8.
    pub fn resize_bilinear(&self, width: u32, height: u32) -> ImageBuffer {
        let plane = resample_bilinear(self, width, height);
        let data = plane.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
        ImageBuffer { width, height, data }
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, RasterError> {
        let path = path.as_ref();
        let shown = path.display().to_string();
        let reader = image::ImageReader::open(path)
            .map_err(|source| RasterError::Io {
                path: shown.clone(),
                source,
            })?
            .with_guessed_format()
            .map_err(|source| RasterError::Io {
                path: shown.clone(),
                source,
            })?;
        match reader.format() {
            Some(image::ImageFormat::Png) => {}
            other => {
                return Err(RasterError::NotPng {
                    path: shown,
                    found: other.map(|f| format!("{f:?}")).unwrap_or_else(|| "unknown".into()),
                })
            }
        }
        let img = reader.decode().map_err(|source| RasterError::Decode {
            path: shown.clone(),
            source,
        })?;
        let rgb = img.into_rgb8();
        let (w, h) = rgb.dimensions();
        if w == 0 || h == 0 {
            return Err(RasterError::Empty);
        }
        ImageBuffer::new(w, h, rgb.into_raw())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), RasterError> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|source| RasterError::Io {
                path: parent.display().to_string(),
                source,
            })?;
        }
        image::save_buffer_with_format(
            path,
            &self.data,
            self.width,
            self.height,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|source| RasterError::Decode {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Bilinear resample to an interleaved RGB `f64` plane (values in 0..=255,
/// unrounded). Source coordinates follow the half-pixel convention
/// `sx = (x + 0.5) * w_in / w_out - 0.5`, clamped at the borders.
pub fn resample_bilinear(src: &ImageBuffer, width: u32, height: u32) -> Vec<f64> {
    let (w_in, h_in) = (src.width as usize, src.height as usize);
    let (w_out, h_out) = (width as usize, height as usize);
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let xs = taps(w_out, w_in);
    let ys = taps(h_out, h_in);
    let mut out = vec![0.0; w_out * h_out * 3];
    let px = |x: usize, y: usize, c: usize| src.data[(y * w_in + x) * 3 + c] as f64;
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..3 {
                let top = px(x0, y0, c) * (1.0 - fx) + px(x1, y0, c) * fx;
                let bottom = px(x0, y1, c) * (1.0 - fx) + px(x1, y1, c) * fx;
                out[(oy * w_out + ox) * 3 + c] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}
