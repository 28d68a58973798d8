//! Procedural renderers. Every function is pure given its parameters and
//! the random generator passed in.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// Normalized coordinate of pixel `i` in a row of `n` pixels.
pub fn pixel_center(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    Normal::new(0.0, sigma).expect("valid sigma").sample(rng)
}

/// Appearance of one synthetic object class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrototype {
    pub foreground: [f64; 3],
    pub background: [f64; 3],
    pub orientation: f64,
    pub frequency: f64,
    /// 0 circle, 1 square, 2 triangle.
    pub shape: u8,
    pub size: f64,
}

impl ClassPrototype {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut color = || [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let foreground = color();
        let background = color();
        ClassPrototype {
            foreground,
            background,
            orientation: rng.random_range(0.0..PI),
            frequency: rng.random_range(1.5..4.0),
            shape: rng.random_range(0..3),
            size: rng.random_range(0.15..0.3),
        }
    }

    /// One jittered sample as `channels × h × w`.
    pub fn render<R: Rng + ?Sized>(&self, channels: usize, h: usize, w: usize, rng: &mut R) -> Vec<f64> {
        let phase = rng.random_range(0.0..2.0 * PI);
        let cx = 0.5 + rng.random_range(-0.1..0.1);
        let cy = 0.5 + rng.random_range(-0.1..0.1);
        let brightness = rng.random_range(0.85..1.15);
        let (sin_o, cos_o) = self.orientation.sin_cos();
        let mut out = vec![0.0; channels * h * w];
        for r in 0..h {
            let v = pixel_center(r, h);
            for c in 0..w {
                let u = pixel_center(c, w);
                let grating = 0.5 + 0.5 * (2.0 * PI * self.frequency * (u * cos_o + v * sin_o) + phase).sin();
                let (du, dv) = (u - cx, v - cy);
                let inside = match self.shape {
                    0 => du * du + dv * dv < self.size * self.size,
                    1 => du.abs().max(dv.abs()) < self.size,
                    _ => dv > -self.size && dv < self.size && du.abs() < (dv + self.size) / 2.0,
                };
                let t = 0.35 * grating + if inside { 0.65 } else { 0.0 };
                for ch in 0..channels {
                    let (fg, bg) = (self.foreground[ch % 3], self.background[ch % 3]);
                    let val = bg + (fg - bg) * t * brightness + gaussian(rng, 0.03);
                    out[(ch * h + r) * w + c] = val.clamp(0.0, 1.0);
                }
            }
        }
        out
    }
}

/// Axis-aligned fronto-parallel box in normalized image coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxRegion {
    pub u0: f64,
    pub v0: f64,
    pub u1: f64,
    pub v1: f64,
    pub depth: f64,
}

impl BoxRegion {
    fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.u0 && u < self.u1 && v >= self.v0 && v < self.v1
    }
}

/// Planar ramp `depth = d0 + a(u − ½) + b(v − ½)` with optional boxes in front.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub d0: f64,
    pub slope_u: f64,
    pub slope_v: f64,
    pub boxes: Vec<BoxRegion>,
    pub tint: [f64; 3],
    pub texture_frequency: f64,
    pub noise: f64,
}

impl Scene {
    /// Depth and unit normal at a normalized coordinate.
    pub fn surface(&self, u: f64, v: f64) -> (f64, [f64; 3]) {
        if let Some(b) = self.boxes.iter().find(|b| b.contains(u, v)) {
            return (b.depth, [0.0, 0.0, 1.0]);
        }
        let d = self.d0 + self.slope_u * (u - 0.5) + self.slope_v * (v - 0.5);
        let (nx, ny, nz) = (-self.slope_u, -self.slope_v, 1.0);
        let len = (nx * nx + ny * ny + nz * nz).sqrt();
        (d, [nx / len, ny / len, nz / len])
    }

    /// Shaded image `channels × h × w`: nearer surfaces are brighter.
    pub fn render_image<R: Rng + ?Sized>(&self, channels: usize, h: usize, w: usize, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; channels * h * w];
        let f = self.texture_frequency;
        for r in 0..h {
            let v = pixel_center(r, h);
            for c in 0..w {
                let u = pixel_center(c, w);
                let (d, n) = self.surface(u, v);
                let texture = 0.5 + 0.5 * (2.0 * PI * f * u).sin() * (2.0 * PI * f * v).sin();
                let light = 0.75 + 0.25 * (0.3 * n[0] + 0.3 * n[1] + n[2]) / (1.18f64).sqrt();
                for ch in 0..channels {
                    let val = self.tint[ch % 3] * (1.0 - d) * light * (0.8 + 0.2 * texture) + gaussian(rng, self.noise);
                    out[(ch * h + r) * w + c] = val.clamp(0.0, 1.0);
                }
            }
        }
        out
    }

    pub fn depth_map(&self, h: usize, w: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                out.push(self.surface(pixel_center(c, w), pixel_center(r, h)).0);
            }
        }
        out
    }

    /// Normals as `3 × h × w`.
    pub fn normal_map(&self, h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; 3 * h * w];
        for r in 0..h {
            for c in 0..w {
                let n = self.surface(pixel_center(c, w), pixel_center(r, h)).1;
                for (k, nk) in n.iter().enumerate() {
                    out[(k * h + r) * w + c] = *nk;
                }
            }
        }
        out
    }
}

/// Line segments converging at a vanishing point.
#[derive(Clone, Debug, PartialEq)]
pub struct LineBundle {
    pub vanishing_point: (f64, f64),
    /// Segment endpoints in normalized `(u, v)` coordinates.
    pub segments: Vec<((f64, f64), (f64, f64))>,
    pub width: f64,
    pub background: [f64; 3],
    pub line_color: [f64; 3],
    pub noise: f64,
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

impl LineBundle {
    /// Segments along rays from `vp` at the given angles and radii.
    pub fn from_rays(vp: (f64, f64), rays: &[(f64, f64, f64)]) -> Vec<((f64, f64), (f64, f64))> {
        rays.iter()
            .map(|&(angle, r0, r1)| {
                let (s, c) = angle.sin_cos();
                ((vp.0 + r0 * c, vp.1 + r0 * s), (vp.0 + r1 * c, vp.1 + r1 * s))
            })
            .collect()
    }

    /// Anti-aliased rendering: intensity falls off linearly within `width`
    /// of the nearest segment.
    pub fn render<R: Rng + ?Sized>(&self, channels: usize, h: usize, w: usize, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; channels * h * w];
        for r in 0..h {
            let v = pixel_center(r, h);
            for c in 0..w {
                let u = pixel_center(c, w);
                let dist = self
                    .segments
                    .iter()
                    .map(|&(a, b)| segment_distance((u, v), a, b))
                    .fold(f64::INFINITY, f64::min);
                let ink = (1.0 - dist / self.width).clamp(0.0, 1.0);
                for ch in 0..channels {
                    let (bg, fg) = (self.background[ch % 3], self.line_color[ch % 3]);
                    let val = bg + (fg - bg) * ink + gaussian(rng, self.noise);
                    out[(ch * h + r) * w + c] = val.clamp(0.0, 1.0);
                }
            }
        }
        out
    }
}

/// Least-squares intersection of the infinite lines through each segment.
pub fn least_squares_intersection(segments: &[((f64, f64), (f64, f64))]) -> Option<(f64, f64)> {
    let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(p, q) in segments {
        let (dx, dy) = (q.0 - p.0, q.1 - p.1);
        let len = (dx * dx + dy * dy).sqrt();
        if len == 0.0 {
            continue;
        }
        // Projector onto the line normal.
        let (nx, ny) = (-dy / len, dx / len);
        let (m11, m12, m22) = (nx * nx, nx * ny, ny * ny);
        a11 += m11;
        a12 += m12;
        a22 += m22;
        b1 += m11 * p.0 + m12 * p.1;
        b2 += m12 * p.0 + m22 * p.1;
    }
    let det = a11 * a22 - a12 * a12;
    if det.abs() < 1e-12 {
        return None;
    }
    Some(((a22 * b1 - a12 * b2) / det, (a11 * b2 - a12 * b1) / det))
}

/// Image tensor from channel-major buffers of several samples.
pub fn stack(samples: Vec<Vec<f64>>, shape: (usize, usize, usize)) -> crate::error::Result<Tensor> {
    let n = samples.len();
    Tensor::new(vec![n, shape.0, shape.1, shape.2], samples.concat())
}
