use crate::error::{Error, Result};

/// 8-bit RGB raster, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * Self::CHANNELS {
            return Err(Error::Shape {
                op: "image",
                lhs: vec![height, width, Self::CHANNELS],
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = std::iter::repeat_n(rgb, width * height).flatten().collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// 8-bit single-channel raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape {
                op: "gray image",
                lhs: vec![height, width],
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }
}

/// Binary pixel mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    /// Mask covering one square block of the patch grid.
    pub fn patch(width: usize, height: usize, patch_size: usize, index: usize) -> Self {
        let mut m = Self::empty(width, height);
        let grid = width / patch_size;
        let (px, py) = (index % grid, index / grid);
        for y in py * patch_size..(py + 1) * patch_size {
            for x in px * patch_size..(px + 1) * patch_size {
                m.data[y * width + x] = true;
            }
        }
        m
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.area() as f64 / self.data.len() as f64
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    /// Patch indices (row-major) touched by the mask.
    pub fn patches(&self, patch_size: usize) -> Vec<usize> {
        let grid = self.width / patch_size;
        let mut out: Vec<usize> = (0..self.data.len())
            .filter(|&i| self.data[i])
            .map(|i| (i / self.width / patch_size) * grid + (i % self.width) / patch_size)
            .collect();
        out.dedup();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        }
    }

    /// Nonzero pixels are inside the mask.
    pub fn from_gray(g: &GrayImage) -> Self {
        Self {
            width: g.width,
            height: g.height,
            data: g.data.iter().map(|&v| v != 0).collect(),
        }
    }
}

/// Splits an image into square patches in row-major patch order. Each patch
/// is returned as its raw pixel bytes, row-major with interleaved channels.
pub fn patchify(image: &Image, patch_size: usize) -> Result<Vec<Vec<u8>>> {
    if patch_size == 0 || image.width % patch_size != 0 || image.height % patch_size != 0 {
        return Err(Error::contract(format!(
            "{}x{} image is not divisible into {patch_size}-pixel patches",
            image.width, image.height
        )));
    }
    let (gx, gy) = (image.width / patch_size, image.height / patch_size);
    let mut patches = Vec::with_capacity(gx * gy);
    for py in 0..gy {
        for px in 0..gx {
            let mut patch = Vec::with_capacity(patch_size * patch_size * 3);
            for y in py * patch_size..(py + 1) * patch_size {
                let start = (y * image.width + px * patch_size) * 3;
                patch.extend_from_slice(&image.data[start..start + patch_size * 3]);
            }
            patches.push(patch);
        }
    }
    Ok(patches)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    patches: &[Vec<u8>],
    width: usize,
    height: usize,
    patch_size: usize,
) -> Result<Image> {
    let gx = width / patch_size;
    if patches.len() != gx * (height / patch_size) {
        return Err(Error::contract("patch count does not match image size"));
    }
    let mut data = vec![0u8; width * height * 3];
    for (idx, patch) in patches.iter().enumerate() {
        let (px, py) = (idx % gx, idx / gx);
        for row in 0..patch_size {
            let dst = ((py * patch_size + row) * width + px * patch_size) * 3;
            let src = row * patch_size * 3;
            data[dst..dst + patch_size * 3].copy_from_slice(&patch[src..src + patch_size * 3]);
        }
    }
    Image::new(width, height, data)
}
