//! Procedural face-like images: a small, self-contained stand-in for an
//! aligned face dataset. Each face is a shaded skin ellipse with hair,
//! eyes, brows, nose and mouth under random pose, palette and lighting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image::{Domain, Image};

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    /// Rotation in radians.
    angle: f64,
}

impl Ellipse {
    /// Signed "radius": < 1 inside.
    fn level(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt()
    }
}

#[derive(Clone, Debug)]
struct FaceParams {
    bg_top: [f64; 3],
    bg_bottom: [f64; 3],
    skin: [f64; 3],
    hair: [f64; 3],
    iris: [f64; 3],
    lips: [f64; 3],
    face: Ellipse,
    hair_shape: Ellipse,
    fringe: f64,
    eye_y: f64,
    eye_dx: f64,
    eye_r: f64,
    gaze: (f64, f64),
    brow_lift: f64,
    mouth_y: f64,
    mouth_w: f64,
    smile: f64,
    light: (f64, f64),
}

fn jitter<R: Rng + ?Sized>(rng: &mut R, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|v| (v + rng.random_range(-amount..amount)).clamp(0.0, 1.0))
}

impl FaceParams {
    fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        const SKINS: [[f64; 3]; 5] = [
            [0.96, 0.80, 0.69],
            [0.89, 0.69, 0.55],
            [0.78, 0.57, 0.42],
            [0.60, 0.42, 0.30],
            [0.42, 0.28, 0.19],
        ];
        const HAIRS: [[f64; 3]; 5] = [
            [0.08, 0.06, 0.05],
            [0.30, 0.19, 0.10],
            [0.55, 0.38, 0.20],
            [0.85, 0.72, 0.45],
            [0.55, 0.55, 0.55],
        ];
        let skin = SKINS[rng.random_range(0..SKINS.len())];
        let skin = jitter(rng, skin, 0.05);
        let hair = HAIRS[rng.random_range(0..HAIRS.len())];
        let hair = jitter(rng, hair, 0.05);
        let bg_top = [rng.random(), rng.random(), rng.random()].map(|v: f64| 0.2 + 0.7 * v);
        let bg_bottom = jitter(rng, bg_top, 0.25);
        let cx = 0.5 + rng.random_range(-0.04..0.04);
        let cy = 0.54 + rng.random_range(-0.03..0.03);
        let rx = rng.random_range(0.27..0.33);
        let ry = rx * rng.random_range(1.15..1.35);
        let angle = rng.random_range(-0.12..0.12);
        let face = Ellipse { cx, cy, rx, ry, angle };
        let hair_shape = Ellipse {
            cx,
            cy: cy - ry * rng.random_range(0.12..0.25),
            rx: rx * rng.random_range(1.08..1.25),
            ry: ry * rng.random_range(1.02..1.15),
            angle,
        };
        Self {
            bg_top,
            bg_bottom,
            skin,
            hair,
            iris: jitter(rng, [0.25, 0.35, 0.45], 0.2),
            lips: jitter(rng, [0.72, 0.32, 0.32], 0.08),
            face,
            hair_shape,
            fringe: cy - ry * rng.random_range(0.45..0.7),
            eye_y: cy - ry * rng.random_range(0.1..0.22),
            eye_dx: rx * rng.random_range(0.36..0.46),
            eye_r: rx * rng.random_range(0.13..0.18),
            gaze: (rng.random_range(-0.3..0.3), rng.random_range(-0.2..0.2)),
            brow_lift: rng.random_range(0.9..1.4),
            mouth_y: cy + ry * rng.random_range(0.42..0.55),
            mouth_w: rx * rng.random_range(0.35..0.55),
            smile: rng.random_range(-0.3..1.0),
            light: (rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.1)),
        }
    }

    /// Colour at normalized coordinates (x right, y down, both in [0,1]).
    fn shade(&self, x: f64, y: f64) -> [f64; 3] {
        let mut col = [0.0; 3];
        for c in 0..3 {
            col[c] = self.bg_top[c] * (1.0 - y) + self.bg_bottom[c] * y;
        }
        let f = &self.face;
        let (s, cth) = f.angle.sin_cos();
        // face-local coordinates in units of the face radii
        let (dx, dy) = (x - f.cx, y - f.cy);
        let (u, v) = ((cth * dx + s * dy) / f.rx, (-s * dx + cth * dy) / f.ry);

        let in_hair = self.hair_shape.level(x, y) < 1.0 && y < f.cy + 0.2 * f.ry;
        if in_hair {
            col = self.hair;
        }
        let level = f.level(x, y);
        let neck = (x - f.cx).abs() < f.rx * 0.45 && y > f.cy;
        if neck && level >= 1.0 {
            col = self.skin.map(|c| c * 0.8);
        }
        if level < 1.0 {
            // lambert-ish shading on a pseudo-sphere
            let nz = (1.0 - (u * u + v * v).min(1.0)).sqrt();
            let lit = (0.65 + 0.35 * (nz + self.light.0 * u + self.light.1 * v)).clamp(0.45, 1.1);
            col = self.skin.map(|c| (c * lit).min(1.0));
            if y < self.fringe + 0.05 * (u * 6.0).sin() * f.ry {
                col = self.hair;
            }
            // eyes
            for side in [-1.0, 1.0] {
                let ex = side * self.eye_dx / f.rx;
                let ey = (self.eye_y - f.cy) / f.ry;
                let er = self.eye_r / f.rx;
                let (ax, ay) = ((u - ex) / er, (v - ey) * (f.ry / f.rx) / (er * 0.6));
                if ax * ax + ay * ay < 1.0 {
                    col = [0.95, 0.95, 0.93];
                    let (ix, iy) = (ax - self.gaze.0, ay - self.gaze.1);
                    let ri = ix * ix + iy * iy * 0.36;
                    if ri < 0.36 {
                        col = self.iris;
                    }
                    if ri < 0.09 {
                        col = [0.03, 0.03, 0.03];
                    }
                }
                // brow
                let by = ey - er * 1.25 * self.brow_lift * (f.rx / f.ry);
                let bu = (u - ex) / (er * 1.3);
                if bu.abs() < 1.0 && (v - (by + 0.04 * bu * bu)).abs() < 0.035 {
                    col = self.hair.map(|c| c * 0.8);
                }
            }
            // nose: a soft shadow on one side
            let nv = v - 0.08;
            if nv > -0.15 && nv < 0.22 && (u - 0.06 * self.light.0.signum()).abs() < 0.035 + 0.1 * nv.max(0.0) {
                col = col.map(|c| c * 0.86);
            }
            // mouth: curved band
            let mu = (x - f.cx) / self.mouth_w;
            let curve = self.mouth_y - self.smile * 0.03 * (1.0 - mu * mu);
            if mu.abs() < 1.0 && (y - curve).abs() < 0.016 + 0.012 * (1.0 - mu * mu) {
                col = self.lips;
            }
        }
        col
    }
}

/// Renders one face at `size x size` with 4x4 supersampling.
pub fn render_face<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Result<Image> {
    let p = FaceParams::sample(rng);
    let ss = 4;
    let n = size * size;
    let mut data = vec![0.0; 3 * n];
    for y in 0..size {
        for x in 0..size {
            let mut acc = [0.0; 3];
            for sy in 0..ss {
                for sx in 0..ss {
                    let fx = (x as f64 + (sx as f64 + 0.5) / ss as f64) / size as f64;
                    let fy = (y as f64 + (sy as f64 + 0.5) / ss as f64) / size as f64;
                    let c = p.shade(fx, fy);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            for k in 0..3 {
                data[k * n + y * size + x] = acc[k] / (ss * ss) as f64;
            }
        }
    }
    // faint sensor-like texture so the corpus is not piecewise flat
    for v in &mut data {
        *v += rng.random_range(-0.01..0.01);
    }
    Image::new(3, size, size, Domain::Pixel01, data).map(|i| i.quantized())
}

/// `count` faces; face `i` depends only on `(seed, i)`.
pub fn generate_faces(count: usize, size: usize, seed: u64) -> Result<Vec<Image>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            render_face(size, &mut rng)
        })
        .collect()
}
