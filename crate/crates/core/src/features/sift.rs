//! Difference-of-Gaussians keypoints with gradient-histogram descriptors.

use std::f32::consts::PI;

use image::GrayImage;
use serde::{Deserialize, Serialize};

use super::{Descriptor, FeatureSet, Keypoint, DESCRIPTOR_LEN};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SiftParams {
    pub scales_per_octave: usize,
    pub sigma0: f32,
    /// Blur already present in the input image.
    pub input_sigma: f32,
    pub contrast_threshold: f32,
    pub edge_ratio: f32,
    /// Keep at most this many keypoints, strongest response first.
    pub max_features: usize,
}

impl Default for SiftParams {
    fn default() -> Self {
        Self {
            scales_per_octave: 3,
            sigma0: 1.6,
            input_sigma: 0.5,
            contrast_threshold: 0.04,
            edge_ratio: 10.0,
            max_features: 1000,
        }
    }
}

impl SiftParams {
    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.scales_per_octave) {
            return Err(Error::Config("scales_per_octave must lie in 1..=8".into()));
        }
        let positive = [
            ("sigma0", self.sigma0),
            ("contrast_threshold", self.contrast_threshold),
            ("edge_ratio", self.edge_ratio),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.input_sigma >= 0.0 && self.input_sigma < self.sigma0) {
            return Err(Error::Config("input_sigma must lie in [0, sigma0)".into()));
        }
        if self.max_features == 0 {
            return Err(Error::Config("max_features must be positive".into()));
        }
        Ok(())
    }
}

const BORDER: usize = 5;
const ORI_BINS: usize = 36;
const ORI_PEAK_RATIO: f32 = 0.8;
const ORI_SIGMA_FACTOR: f32 = 1.5;
const DESC_WIDTH: usize = 4;
const DESC_BINS: usize = 8;
const DESC_SCALE: f32 = 3.0;
const DESC_CLAMP: f32 = 0.2;

#[derive(Clone)]
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f32>,
}

impl Plane {
    #[inline]
    fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.w + x]
    }

    fn halve(&self) -> Plane {
        let w = self.w / 2;
        let h = self.h / 2;
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                data.push(self.at(2 * x, 2 * y));
            }
        }
        Plane { w, h, data }
    }

    fn blurred(&self, sigma: f32) -> Plane {
        let radius = (3.0 * sigma).ceil().max(1.0) as isize;
        let mut kernel: Vec<f32> = (-radius..=radius)
            .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
            .collect();
        let sum: f32 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= sum);
        let (w, h) = (self.w, self.h);
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

        // Horizontal pass.
        let mut tmp = vec![0.0f32; w * h];
        for y in 0..h {
            let row = &self.data[y * w..(y + 1) * w];
            let out = &mut tmp[y * w..(y + 1) * w];
            for x in 0..w {
                let mut acc = 0.0;
                if x as isize >= radius && (x as isize + radius) < w as isize {
                    let base = x - radius as usize;
                    for (k, kv) in kernel.iter().enumerate() {
                        acc += kv * row[base + k];
                    }
                } else {
                    for (k, kv) in kernel.iter().enumerate() {
                        acc += kv * row[clamp(x as isize + k as isize - radius, w)];
                    }
                }
                out[x] = acc;
            }
        }
        // Vertical pass, row-accumulating for contiguous access.
        let mut data = vec![0.0f32; w * h];
        for y in 0..h {
            let out = &mut data[y * w..(y + 1) * w];
            for (k, kv) in kernel.iter().enumerate() {
                let sy = clamp(y as isize + k as isize - radius, h);
                let src = &tmp[sy * w..(sy + 1) * w];
                for (o, s) in out.iter_mut().zip(src) {
                    *o += kv * s;
                }
            }
        }
        Plane { w, h, data }
    }
}

struct Octave {
    gauss: Vec<Plane>,
    dog: Vec<Plane>,
}

fn build_pyramid(img: &GrayImage, p: &SiftParams) -> Vec<Octave> {
    let (w, h) = img.dimensions();
    let base = Plane {
        w: w as usize,
        h: h as usize,
        data: img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
    };
    let s = p.scales_per_octave;
    let initial = (p.sigma0 * p.sigma0 - p.input_sigma * p.input_sigma).max(0.01).sqrt();
    let mut current = base.blurred(initial);

    let k = 2f32.powf(1.0 / s as f32);
    let increments: Vec<f32> = (1..s + 3)
        .map(|i| {
            let prev = p.sigma0 * k.powi(i as i32 - 1);
            let next = prev * k;
            (next * next - prev * prev).sqrt()
        })
        .collect();

    let mut octaves = Vec::new();
    loop {
        if current.w.min(current.h) < 16 {
            break;
        }
        let mut gauss = Vec::with_capacity(s + 3);
        gauss.push(current.clone());
        for inc in &increments {
            let next = gauss.last().unwrap().blurred(*inc);
            gauss.push(next);
        }
        let dog = gauss
            .windows(2)
            .map(|pair| Plane {
                w: pair[0].w,
                h: pair[0].h,
                data: pair[1].data.iter().zip(&pair[0].data).map(|(a, b)| a - b).collect(),
            })
            .collect();
        current = gauss[s].halve();
        octaves.push(Octave { gauss, dog });
    }
    octaves
}

fn is_extremum(dog: &[Plane], layer: usize, x: usize, y: usize, v: f32) -> bool {
    let w = dog[layer].w;
    let mut is_max = true;
    let mut is_min = true;
    for plane in &dog[layer - 1..=layer + 1] {
        for yy in y - 1..=y + 1 {
            let row = &plane.data[yy * w + x - 1..yy * w + x + 2];
            for &n in row {
                if n > v {
                    is_max = false;
                }
                if n < v {
                    is_min = false;
                }
            }
        }
    }
    // The centre compares equal to itself; strictness against the other 26 neighbours.
    (is_max && v > 0.0) || (is_min && v < 0.0)
}

struct Refined {
    x: f32,
    y: f32,
    layer: usize,
    offset_layer: f32,
    response: f32,
}

fn refine(dog: &[Plane], mut layer: usize, mut x: usize, mut y: usize, p: &SiftParams) -> Option<Refined> {
    let s = p.scales_per_octave;
    let (w, h) = (dog[0].w, dog[0].h);
    let mut offset = [0.0f32; 3];
    let mut grad = [0.0f32; 3];
    for attempt in 0..5 {
        let d = |l: usize, xx: usize, yy: usize| dog[l].at(xx, yy);
        let v = d(layer, x, y);
        grad = [
            0.5 * (d(layer, x + 1, y) - d(layer, x - 1, y)),
            0.5 * (d(layer, x, y + 1) - d(layer, x, y - 1)),
            0.5 * (d(layer + 1, x, y) - d(layer - 1, x, y)),
        ];
        let dxx = d(layer, x + 1, y) + d(layer, x - 1, y) - 2.0 * v;
        let dyy = d(layer, x, y + 1) + d(layer, x, y - 1) - 2.0 * v;
        let dss = d(layer + 1, x, y) + d(layer - 1, x, y) - 2.0 * v;
        let dxy =
            0.25 * (d(layer, x + 1, y + 1) - d(layer, x - 1, y + 1) - d(layer, x + 1, y - 1) + d(layer, x - 1, y - 1));
        let dxs =
            0.25 * (d(layer + 1, x + 1, y) - d(layer + 1, x - 1, y) - d(layer - 1, x + 1, y) + d(layer - 1, x - 1, y));
        let dys =
            0.25 * (d(layer + 1, x, y + 1) - d(layer + 1, x, y - 1) - d(layer - 1, x, y + 1) + d(layer - 1, x, y - 1));
        let hess = nalgebra::Matrix3::new(
            dxx as f64, dxy as f64, dxs as f64, dxy as f64, dyy as f64, dys as f64, dxs as f64, dys as f64, dss as f64,
        );
        let g = nalgebra::Vector3::new(grad[0] as f64, grad[1] as f64, grad[2] as f64);
        let sol = hess.lu().solve(&(-g))?;
        offset = [sol.x as f32, sol.y as f32, sol.z as f32];
        if offset.iter().all(|o| o.abs() < 0.5) {
            break;
        }
        if attempt == 4 || offset.iter().any(|o| !o.is_finite() || o.abs() > 1e3) {
            return None;
        }
        let nx = x as isize + offset[0].round() as isize;
        let ny = y as isize + offset[1].round() as isize;
        let nl = layer as isize + offset[2].round() as isize;
        if nl < 1
            || nl > s as isize
            || nx < BORDER as isize
            || ny < BORDER as isize
            || nx >= (w - BORDER) as isize
            || ny >= (h - BORDER) as isize
        {
            return None;
        }
        x = nx as usize;
        y = ny as usize;
        layer = nl as usize;
    }

    let v = dog[layer].at(x, y);
    let response = v + 0.5 * (grad[0] * offset[0] + grad[1] * offset[1] + grad[2] * offset[2]);
    if response.abs() * (s as f32) < p.contrast_threshold {
        return None;
    }
    // Principal-curvature (edge) rejection on the 2×2 spatial Hessian.
    let d = |xx: usize, yy: usize| dog[layer].at(xx, yy);
    let dxx = d(x + 1, y) + d(x - 1, y) - 2.0 * v;
    let dyy = d(x, y + 1) + d(x, y - 1) - 2.0 * v;
    let dxy = 0.25 * (d(x + 1, y + 1) - d(x - 1, y + 1) - d(x + 1, y - 1) + d(x - 1, y - 1));
    let tr = dxx + dyy;
    let det = dxx * dyy - dxy * dxy;
    let r = p.edge_ratio;
    if det <= 0.0 || tr * tr * r >= (r + 1.0) * (r + 1.0) * det {
        return None;
    }
    Some(Refined {
        x: x as f32 + offset[0],
        y: y as f32 + offset[1],
        layer,
        offset_layer: offset[2],
        response: response.abs(),
    })
}

#[inline]
fn gradient(img: &Plane, x: usize, y: usize) -> (f32, f32) {
    let dx = img.at(x + 1, y) - img.at(x - 1, y);
    let dy = img.at(x, y + 1) - img.at(x, y - 1);
    ((dx * dx + dy * dy).sqrt(), dy.atan2(dx))
}

fn orientations(img: &Plane, x: f32, y: f32, sigma: f32) -> Vec<f32> {
    let sw = ORI_SIGMA_FACTOR * sigma;
    let radius = (3.0 * sw).round() as isize;
    let (cx, cy) = (x.round() as isize, y.round() as isize);
    let mut hist = [0.0f32; ORI_BINS];
    for dy in -radius..=radius {
        let yy = cy + dy;
        if yy <= 0 || yy >= img.h as isize - 1 {
            continue;
        }
        for dx in -radius..=radius {
            let xx = cx + dx;
            if xx <= 0 || xx >= img.w as isize - 1 {
                continue;
            }
            let (mag, ang) = gradient(img, xx as usize, yy as usize);
            let weight = (-((dx * dx + dy * dy) as f32) / (2.0 * sw * sw)).exp();
            let bin = ((ang + PI) / (2.0 * PI) * ORI_BINS as f32).floor() as isize;
            hist[bin.rem_euclid(ORI_BINS as isize) as usize] += weight * mag;
        }
    }
    let mut smooth = [0.0f32; ORI_BINS];
    for i in 0..ORI_BINS {
        let at = |o: isize| hist[(i as isize + o).rem_euclid(ORI_BINS as isize) as usize];
        smooth[i] = (at(-2) + at(2)) / 16.0 + (at(-1) + at(1)) * 4.0 / 16.0 + at(0) * 6.0 / 16.0;
    }
    let max = smooth.iter().cloned().fold(0.0, f32::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for i in 0..ORI_BINS {
        let l = smooth[(i + ORI_BINS - 1) % ORI_BINS];
        let r = smooth[(i + 1) % ORI_BINS];
        let c = smooth[i];
        if c > l && c > r && c >= ORI_PEAK_RATIO * max {
            let shift = 0.5 * (l - r) / (l - 2.0 * c + r);
            let bin = i as f32 + 0.5 + shift;
            let mut ang = bin / ORI_BINS as f32 * 2.0 * PI - PI;
            if ang >= PI {
                ang -= 2.0 * PI;
            }
            out.push(ang);
        }
    }
    out
}

fn describe(img: &Plane, x: f32, y: f32, sigma: f32, angle: f32) -> Descriptor {
    let d = DESC_WIDTH as f32;
    let hist_width = DESC_SCALE * sigma;
    let radius = (hist_width * std::f32::consts::SQRT_2 * (d + 1.0) * 0.5).round() as isize;
    let (sin_a, cos_a) = angle.sin_cos();
    let (cx, cy) = (x.round() as isize, y.round() as isize);
    let mut hist = [0.0f32; (DESC_WIDTH + 2) * (DESC_WIDTH + 2) * (DESC_BINS + 2)];
    let idx = |r: usize, c: usize, o: usize| (r * (DESC_WIDTH + 2) + c) * (DESC_BINS + 2) + o;
    let gauss_denom = 2.0 * (0.5 * d) * (0.5 * d);

    for dy in -radius..=radius {
        let yy = cy + dy;
        if yy <= 0 || yy >= img.h as isize - 1 {
            continue;
        }
        for dx in -radius..=radius {
            let xx = cx + dx;
            if xx <= 0 || xx >= img.w as isize - 1 {
                continue;
            }
            let fx = xx as f32 - x;
            let fy = yy as f32 - y;
            let x_rot = (cos_a * fx + sin_a * fy) / hist_width;
            let y_rot = (-sin_a * fx + cos_a * fy) / hist_width;
            let rbin = y_rot + d / 2.0 - 0.5;
            let cbin = x_rot + d / 2.0 - 0.5;
            if rbin <= -1.0 || rbin >= d || cbin <= -1.0 || cbin >= d {
                continue;
            }
            let (mag, ang) = gradient(img, xx as usize, yy as usize);
            let mut rel = ang - angle;
            rel = rel.rem_euclid(2.0 * PI);
            let obin = rel / (2.0 * PI) * DESC_BINS as f32;
            let weight = (-(x_rot * x_rot + y_rot * y_rot) / gauss_denom).exp() * mag;

            let (r0, c0, o0) = (rbin.floor(), cbin.floor(), obin.floor());
            let (dr, dc, d_o) = (rbin - r0, cbin - c0, obin - o0);
            let (r0, c0) = ((r0 as isize + 1) as usize, (c0 as isize + 1) as usize);
            let o0 = o0 as usize % DESC_BINS;
            for (ri, wr) in [(0, 1.0 - dr), (1, dr)] {
                for (ci, wc) in [(0, 1.0 - dc), (1, dc)] {
                    for (oi, wo) in [(0, 1.0 - d_o), (1, d_o)] {
                        hist[idx(r0 + ri, c0 + ci, o0 + oi)] += weight * wr * wc * wo;
                    }
                }
            }
        }
    }

    let mut values = [0.0f32; DESCRIPTOR_LEN];
    for r in 0..DESC_WIDTH {
        for c in 0..DESC_WIDTH {
            for o in 0..DESC_BINS {
                let mut v = hist[idx(r + 1, c + 1, o)];
                if o == 0 {
                    v += hist[idx(r + 1, c + 1, DESC_BINS)];
                }
                values[(r * DESC_WIDTH + c) * DESC_BINS + o] = v;
            }
        }
    }
    Descriptor::normalized(values, DESC_CLAMP)
}

pub fn detect_and_describe(img: &GrayImage, p: &SiftParams) -> Result<FeatureSet> {
    p.validate()?;
    let (w, h) = img.dimensions();
    if w < 64 || h < 64 {
        return Err(Error::InvalidInput(format!(
            "image {w}×{h} is smaller than the 64×64 minimum"
        )));
    }
    let s = p.scales_per_octave;
    let prefilter = 0.5 * p.contrast_threshold / s as f32;
    let octaves = build_pyramid(img, p);

    let mut found: Vec<(Keypoint, Descriptor)> = Vec::new();
    for (oi, oct) in octaves.iter().enumerate() {
        let scale = (1usize << oi) as f32;
        let (ow, oh) = (oct.dog[0].w, oct.dog[0].h);
        if ow <= 2 * BORDER || oh <= 2 * BORDER {
            continue;
        }
        for layer in 1..=s {
            for y in BORDER..oh - BORDER {
                for x in BORDER..ow - BORDER {
                    let v = oct.dog[layer].at(x, y);
                    if v.abs() <= prefilter || !is_extremum(&oct.dog, layer, x, y, v) {
                        continue;
                    }
                    let Some(r) = refine(&oct.dog, layer, x, y, p) else {
                        continue;
                    };
                    let sigma_oct = p.sigma0 * 2f32.powf((r.layer as f32 + r.offset_layer) / s as f32);
                    let gimg = &oct.gauss[r.layer];
                    for angle in orientations(gimg, r.x, r.y, sigma_oct) {
                        let kp = Keypoint {
                            x: r.x * scale,
                            y: r.y * scale,
                            scale: sigma_oct * scale,
                            orientation: angle,
                            response: r.response,
                        };
                        if kp.x < 0.0 || kp.y < 0.0 || kp.x >= w as f32 || kp.y >= h as f32 {
                            continue;
                        }
                        found.push((kp, describe(gimg, r.x, r.y, sigma_oct, angle)));
                    }
                }
            }
        }
    }

    // Strongest first; ties broken by position so the order is fully deterministic.
    found.sort_by(|a, b| {
        b.0.response
            .total_cmp(&a.0.response)
            .then(a.0.y.total_cmp(&b.0.y))
            .then(a.0.x.total_cmp(&b.0.x))
            .then(a.0.orientation.total_cmp(&b.0.orientation))
    });
    found.truncate(p.max_features);
    let (keypoints, descriptors) = found.into_iter().unzip();
    Ok(FeatureSet { keypoints, descriptors })
}
