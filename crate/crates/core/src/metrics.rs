//! Image quality metrics restricted to the subject's bounding box.

/// Pixels the mask bounding box is grown by on every side.
pub const BBOX_DILATION: u32 = 10;
/// Value written to logs in place of an infinite PSNR.
pub const PSNR_LOG_CAP: f64 = 99.0;

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn full(width: u32, height: u32) -> Self {
        Self { x0: 0, y0: 0, x1: width, y1: height }
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        (self.width() * self.height()) as usize
    }
}

/// Bounding box of nonzero mask pixels grown by `dilate` and clipped to the
/// image. An empty mask gives the full image.
pub fn mask_bbox(mask: &[u8], width: u32, height: u32, dilate: u32) -> BBox {
    let mut b: Option<BBox> = None;
    for y in 0..height {
        for x in 0..width {
            if mask[(y * width + x) as usize] > 0 {
                let e = b.get_or_insert(BBox { x0: x, y0: y, x1: x + 1, y1: y + 1 });
                e.x0 = e.x0.min(x);
                e.y0 = e.y0.min(y);
                e.x1 = e.x1.max(x + 1);
                e.y1 = e.y1.max(y + 1);
            }
        }
    }
    match b {
        None => BBox::full(width, height),
        Some(b) => BBox {
            x0: b.x0.saturating_sub(dilate),
            y0: b.y0.saturating_sub(dilate),
            x1: (b.x1 + dilate).min(width),
            y1: (b.y1 + dilate).min(height),
        },
    }
}

/// Mean squared error over RGB channels inside `bbox`.
pub fn mse(a: &[f32], b: &[f32], width: u32, bbox: BBox) -> f64 {
    let mut sum = 0.0;
    for y in bbox.y0..bbox.y1 {
        for x in bbox.x0..bbox.x1 {
            let k = 3 * (y * width + x) as usize;
            for c in 0..3 {
                let d = a[k + c] as f64 - b[k + c] as f64;
                sum += d * d;
            }
        }
    }
    sum / (3 * bbox.area()).max(1) as f64
}

/// `10 log10(1 / MSE)`; identical images give `+inf`.
pub fn psnr(a: &[f32], b: &[f32], width: u32, bbox: BBox) -> f64 {
    let m = mse(a, b, width, bbox);
    if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    }
}

/// PSNR with the infinite sentinel replaced by [`PSNR_LOG_CAP`].
pub fn psnr_for_log(p: f64) -> f64 {
    p.min(PSNR_LOG_CAP)
}

fn gaussian_window() -> [f64; 11] {
    let mut g = [0.0; 11];
    for (k, v) in g.iter_mut().enumerate() {
        let x = k as f64 - 5.0;
        *v = (-x * x / (2.0 * 1.5 * 1.5)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Mean SSIM over channels and over every 11x11 window that fits in `bbox`
/// (Gaussian weights, sigma 1.5). Boxes smaller than the window are grown
/// to it where the image allows.
pub fn ssim(a: &[f32], b: &[f32], width: u32, height: u32, bbox: BBox) -> f64 {
    const WIN: u32 = 11;
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let mut bbox = bbox;
    for (lo, hi, limit) in [(&mut bbox.x0, &mut bbox.x1, width), (&mut bbox.y0, &mut bbox.y1, height)] {
        if *hi - *lo < WIN {
            *hi = (*lo + WIN).min(limit);
            *lo = hi.saturating_sub(WIN);
        }
    }
    if bbox.width() < WIN || bbox.height() < WIN {
        // Image smaller than the window: fall back to one global window.
        return ssim_global(a, b, width, bbox);
    }
    let g = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for y0 in bbox.y0..=bbox.y1 - WIN {
            for x0 in bbox.x0..=bbox.x1 - WIN {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..WIN {
                    for dx in 0..WIN {
                        let w = g[dy as usize] * g[dx as usize];
                        let k = 3 * ((y0 + dy) * width + x0 + dx) as usize + c;
                        let (va, vb) = (a[k] as f64, b[k] as f64);
                        ma += w * va;
                        mb += w * vb;
                        saa += w * va * va;
                        sbb += w * vb * vb;
                        sab += w * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                count += 1;
            }
        }
    }
    total / count as f64
}

fn ssim_global(a: &[f32], b: &[f32], width: u32, bbox: BBox) -> f64 {
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let n = bbox.area().max(1) as f64;
    let mut total = 0.0;
    for c in 0..3 {
        let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for y in bbox.y0..bbox.y1 {
            for x in bbox.x0..bbox.x1 {
                let k = 3 * (y * width + x) as usize + c;
                let (va, vb) = (a[k] as f64, b[k] as f64);
                ma += va;
                mb += vb;
                saa += va * va;
                sbb += vb * vb;
                sab += va * vb;
            }
        }
        let (ma, mb) = (ma / n, mb / n);
        let (va, vb, cov) = (saa / n - ma * ma, sbb / n - mb * mb, sab / n - ma * mb);
        total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
    }
    total / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(n: usize, seed: u32) -> Vec<f32> {
        (0..n as u32).map(|k| ((k ^ seed).wrapping_mul(2654435761) >> 22) as f32 / 1024.0).collect()
    }

    #[test]
    fn identical_images() {
        let a = noise(3 * 20 * 20, 1);
        let bb = BBox::full(20, 20);
        assert_eq!(psnr(&a, &a, 20, bb), f64::INFINITY);
        assert_eq!(psnr_for_log(psnr(&a, &a, 20, bb)), PSNR_LOG_CAP);
        assert!((ssim(&a, &a, 20, 20, bb) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn half_gray_psnr() {
        let a = vec![0.0f32; 3 * 16];
        let b = vec![0.5f32; 3 * 16];
        let p = psnr(&a, &b, 4, BBox::full(4, 4));
        assert!((p - 10.0 * 4f64.log10()).abs() < 1e-12);
        assert!((p - 6.0206).abs() < 1e-4);
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = noise(3 * 24 * 24, 1);
        let b = noise(3 * 24 * 24, 7);
        let bb = BBox { x0: 2, y0: 3, x1: 22, y1: 20 };
        assert!((ssim(&a, &b, 24, 24, bb) - ssim(&b, &a, 24, 24, bb)).abs() < 1e-12);
        assert!(ssim(&a, &b, 24, 24, bb) < 0.5);
    }

    #[test]
    fn bbox_dilates_and_clips() {
        let mut m = vec![0u8; 40 * 30];
        m[15 * 40 + 20] = 255;
        m[17 * 40 + 3] = 255;
        assert_eq!(mask_bbox(&m, 40, 30, 10), BBox { x0: 0, y0: 5, x1: 31, y1: 28 });
        assert_eq!(mask_bbox(&[0; 12], 4, 3, 10), BBox::full(4, 3));
    }
}
