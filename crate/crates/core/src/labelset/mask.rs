use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned pixel rectangle `(x, y, w, h)`; `x` is the column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl From<[u32; 4]> for BBox {
    fn from(a: [u32; 4]) -> Self {
        BBox {
            x: a[0],
            y: a[1],
            w: a[2],
            h: a[3],
        }
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn x1(&self) -> u32 {
        self.x + self.w
    }

    pub fn y1(&self) -> u32 {
        self.y + self.h
    }

    pub fn intersect(&self, other: &BBox) -> Option<BBox> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.x1().min(other.x1());
        let y1 = self.y1().min(other.y1());
        (x0 < x1 && y0 < y1).then(|| BBox::new(x0, y0, x1 - x0, y1 - y0))
    }

    pub fn union(&self, other: &BBox) -> BBox {
        let x0 = self.x.min(other.x);
        let y0 = self.y.min(other.y);
        BBox::new(
            x0,
            y0,
            self.x1().max(other.x1()) - x0,
            self.y1().max(other.y1()) - y0,
        )
    }

    pub fn contains_pixel(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.x1() && y >= self.y && y < self.y1()
    }
}

/// Run lengths of a row-major bitmap, starting with a (possibly empty)
/// background run and alternating from there.
pub fn rle_encode(bits: &[bool]) -> Vec<u32> {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for &b in bits {
        if b != current {
            counts.push(run);
            run = 0;
            current = b;
        }
        run += 1;
    }
    counts.push(run);
    counts
}

pub fn rle_decode(rle: &[u32], w: u32, h: u32) -> Result<Vec<bool>> {
    let total: u64 = rle.iter().map(|&c| c as u64).sum();
    let expected = w as u64 * h as u64;
    if total != expected {
        return Err(Error::format(format!(
            "rle counts sum to {total}, expected {w}x{h} = {expected}"
        )));
    }
    let mut bits = Vec::with_capacity(expected as usize);
    for (i, &count) in rle.iter().enumerate() {
        bits.extend(std::iter::repeat_n(i % 2 == 1, count as usize));
    }
    Ok(bits)
}

/// Decoded bitmap over a bounding box, in host-grid pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    pub bbox: BBox,
    pub bits: Vec<bool>,
}

impl PixelMask {
    pub fn new(bbox: BBox, bits: Vec<bool>) -> Result<Self> {
        if bits.len() as u64 != bbox.area() {
            return Err(Error::invalid(format!(
                "mask of {} bits does not fill a {}x{} box",
                bits.len(),
                bbox.w,
                bbox.h
            )));
        }
        Ok(PixelMask { bbox, bits })
    }

    /// Mask of the given pixels; `None` when there are none.
    pub fn from_pixels(pixels: &[(u32, u32)]) -> Option<Self> {
        let (&(fx, fy), rest) = pixels.split_first()?;
        let (mut x0, mut y0, mut x1, mut y1) = (fx, fy, fx, fy);
        for &(x, y) in rest {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        let bbox = BBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1);
        let mut bits = vec![false; bbox.area() as usize];
        for &(x, y) in pixels {
            bits[((y - y0) * bbox.w + (x - x0)) as usize] = true;
        }
        Some(PixelMask { bbox, bits })
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bbox.contains_pixel(x, y)
            && self.bits[((y - self.bbox.y) * self.bbox.w + (x - self.bbox.x)) as usize]
    }

    pub fn area(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let b = self.bbox;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &on)| on)
            .map(move |(i, _)| (b.x + i as u32 % b.w, b.y + i as u32 / b.w))
    }

    /// Shrink the box to the set pixels; `None` for an empty mask.
    pub fn tight(&self) -> Option<PixelMask> {
        let pixels: Vec<_> = self.pixels().collect();
        PixelMask::from_pixels(&pixels)
    }

    /// Pixels inside `window`, as a tight mask.
    pub fn clip(&self, window: &BBox) -> Option<PixelMask> {
        let pixels: Vec<_> = self
            .pixels()
            .filter(|&(x, y)| window.contains_pixel(x, y))
            .collect();
        PixelMask::from_pixels(&pixels)
    }

    /// Mean of pixel centers `(x + 0.5, y + 0.5)`.
    pub fn centroid(&self) -> Option<[f64; 2]> {
        let mut n = 0u64;
        let (mut sx, mut sy) = (0.0, 0.0);
        for (x, y) in self.pixels() {
            sx += x as f64 + 0.5;
            sy += y as f64 + 0.5;
            n += 1;
        }
        (n > 0).then(|| [sx / n as f64, sy / n as f64])
    }

    pub fn intersection(&self, other: &PixelMask) -> u64 {
        let Some(ov) = self.bbox.intersect(&other.bbox) else {
            return 0;
        };
        let mut n = 0;
        for y in ov.y..ov.y1() {
            let a = ((y - self.bbox.y) * self.bbox.w + (ov.x - self.bbox.x)) as usize;
            let b = ((y - other.bbox.y) * other.bbox.w + (ov.x - other.bbox.x)) as usize;
            let len = ov.w as usize;
            n += self.bits[a..a + len]
                .iter()
                .zip(&other.bits[b..b + len])
                .filter(|(p, q)| **p && **q)
                .count() as u64;
        }
        n
    }

    /// Translate by `(-dx, -dy)`; every pixel must stay non-negative.
    pub fn shifted(&self, dx: u32, dy: u32) -> PixelMask {
        PixelMask {
            bbox: BBox::new(self.bbox.x - dx, self.bbox.y - dy, self.bbox.w, self.bbox.h),
            bits: self.bits.clone(),
        }
    }
}

/// One crown instance: RLE bitmap within its bbox plus metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceMask {
    pub id: u64,
    pub bbox: BBox,
    pub rle: Vec<u32>,
    pub score: Option<f64>,
    pub centroid: [f64; 2],
    /// Set when enhancement failed and the coarse mask was kept.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

impl InstanceMask {
    /// Instance from a non-empty mask; bbox is tightened, centroid computed.
    pub fn from_mask(id: u64, mask: &PixelMask, score: Option<f64>) -> Result<Self> {
        let tight = mask
            .tight()
            .ok_or_else(|| Error::invalid(format!("instance {id} has an empty mask")))?;
        let centroid = tight.centroid().expect("non-empty mask has a centroid");
        Ok(InstanceMask {
            id,
            bbox: tight.bbox,
            rle: rle_encode(&tight.bits),
            score,
            centroid,
            fallback: false,
        })
    }

    pub fn decode(&self) -> Result<PixelMask> {
        let bits = rle_decode(&self.rle, self.bbox.w, self.bbox.h)
            .map_err(|e| Error::format(format!("instance {}: {e}", self.id)))?;
        Ok(PixelMask {
            bbox: self.bbox,
            bits,
        })
    }

    pub fn area(&self) -> u64 {
        self.rle.iter().skip(1).step_by(2).map(|&c| c as u64).sum()
    }

    /// Check the RLE and centroid invariants.
    pub fn validate(&self) -> Result<()> {
        let total: u64 = self.rle.iter().map(|&c| c as u64).sum();
        if total != self.bbox.area() {
            return Err(Error::format(format!(
                "instance {}: rle sums to {total}, bbox area is {}",
                self.id,
                self.bbox.area()
            )));
        }
        let [cx, cy] = self.centroid;
        let b = self.bbox;
        if !(cx >= b.x as f64 && cx <= b.x1() as f64 && cy >= b.y as f64 && cy <= b.y1() as f64) {
            return Err(Error::format(format!(
                "instance {}: centroid ({cx}, {cy}) outside bbox",
                self.id
            )));
        }
        if let Some(s) = self.score {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::format(format!(
                    "instance {}: score {s} outside [0, 1]",
                    self.id
                )));
            }
        }
        Ok(())
    }
}
