//! In-plane image helpers over slice-major `f32` grids.

/// Separable Gaussian blur of one `h×w` slice; `sigma <= 0` is a no-op.
pub fn gaussian_blur(slice: &mut [f32], h: usize, w: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let xx = clamp(x as isize + j as isize - radius, w);
                acc += k * slice[y * w + xx] as f64;
            }
            tmp[y * w + x] = acc as f32;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let yy = clamp(y as isize + j as isize - radius, h);
                acc += k * tmp[yy * w + x] as f64;
            }
            slice[y * w + x] = acc as f32;
        }
    }
}

/// Bilinear sample at fractional `(y, x)`; outside the slice returns `fill`.
pub fn bilinear(slice: &[f32], h: usize, w: usize, y: f64, x: f64, fill: f32) -> f32 {
    if y < -0.5 || x < -0.5 || y > h as f64 - 0.5 || x > w as f64 - 0.5 {
        return fill;
    }
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = slice[y0 * w + x0] * (1.0 - fx) + slice[y0 * w + x1] * fx;
    let bot = slice[y1 * w + x0] * (1.0 - fx) + slice[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Nearest-neighbour sample; outside the slice returns `fill`.
pub fn nearest<T: Copy>(slice: &[T], h: usize, w: usize, y: f64, x: f64, fill: T) -> T {
    let (yi, xi) = (y.round(), x.round());
    if yi < 0.0 || xi < 0.0 || yi >= h as f64 || xi >= w as f64 {
        return fill;
    }
    slice[yi as usize * w + xi as usize]
}

/// Resize one slice to `(th, tw)` with align-corners coordinate mapping.
pub fn resize_bilinear(slice: &[f32], h: usize, w: usize, th: usize, tw: usize) -> Vec<f32> {
    let sy = if th > 1 { (h - 1) as f64 / (th - 1) as f64 } else { 0.0 };
    let sx = if tw > 1 { (w - 1) as f64 / (tw - 1) as f64 } else { 0.0 };
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        for x in 0..tw {
            out.push(bilinear(slice, h, w, y as f64 * sy, x as f64 * sx, 0.0));
        }
    }
    out
}

pub fn resize_nearest<T: Copy + Default>(slice: &[T], h: usize, w: usize, th: usize, tw: usize) -> Vec<T> {
    let sy = if th > 1 { (h - 1) as f64 / (th - 1) as f64 } else { 0.0 };
    let sx = if tw > 1 { (w - 1) as f64 / (tw - 1) as f64 } else { 0.0 };
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        for x in 0..tw {
            out.push(nearest(slice, h, w, y as f64 * sy, x as f64 * sx, T::default()));
        }
    }
    out
}
