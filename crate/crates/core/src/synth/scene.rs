use nalgebra::{Vector2, Vector3};
use noise::{Fbm, MultiFractal, NoiseFn, Perlin};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::geometry::RigidPose;

/// Largest radial bump amplitude the generator accepts. The surface is star-shaped about its
/// centre, so any amplitude below 1 keeps it closed and free of self-intersections; the bound
/// keeps the cavity ellipsoid-like.
pub const MAX_BUMP_AMPLITUDE: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureVariant {
    /// Dye-like mottling with most of its contrast in the red channel.
    HighTexture,
    /// Smooth colour gradient.
    LowTexture,
}

impl std::str::FromStr for TextureVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "high" | "high_texture" => Ok(Self::HighTexture),
            "low" | "low_texture" => Ok(Self::LowTexture),
            _ => Err(Error::InvalidInput(format!("unknown texture variant {s:?}"))),
        }
    }
}

/// Parameters from which a scene is generated deterministically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub semi_axes: [f64; 3],
    pub bump_amplitude: f64,
    pub num_bumps: usize,
    pub texture: TextureVariant,
    pub num_frames: usize,
    pub width: u32,
    pub height: u32,
    /// Distance at which a surface facing the light renders at full albedo.
    pub light_distance: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            semi_axes: [1.0, 0.7, 0.6],
            bump_amplitude: 0.06,
            num_bumps: 8,
            texture: TextureVariant::HighTexture,
            num_frames: 40,
            width: 640,
            height: 480,
            light_distance: 0.6,
        }
    }
}

/// One band-limited radial perturbation: `a · sin(k · (d·ω) + φ)` on unit directions ω.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Bump {
    amplitude: f64,
    direction: Vector3<f64>,
    frequency: f64,
    phase: f64,
}

/// A closed cavity with procedural albedo and a camera trajectory inside it.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub center: Vector3<f64>,
    bumps: Vec<Bump>,
    dye: Fbm<Perlin>,
    tint: Fbm<Perlin>,
    pub trajectory: Vec<RigidPose>,
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Illinois false position on a bracket with `f(a) < 0 <= f(b)`.
fn refine_root(f: &impl Fn(f64) -> f64, (mut a, mut fa): (f64, f64), (mut b, mut fb): (f64, f64)) -> f64 {
    let mut side = 0;
    for _ in 0..100 {
        if b - a < 1e-13 {
            break;
        }
        let m = ((a * fb - b * fa) / (fb - fa)).clamp(a, b);
        let fm = f(m);
        if fm == 0.0 {
            return m;
        }
        if fm < 0.0 {
            (a, fa) = (m, fm);
            if side == -1 {
                fb *= 0.5;
            }
            side = -1;
        } else {
            (b, fb) = (m, fm);
            if side == 1 {
                fa *= 0.5;
            }
            side = 1;
        }
        if (fm.abs()) < 1e-14 {
            return m;
        }
    }
    0.5 * (a + b)
}

impl SyntheticScene {
    pub fn generate(spec: &SceneSpec) -> Result<Self> {
        if spec.semi_axes.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::InvalidScene("semi-axes must be positive".into()));
        }
        if !(0.0..=MAX_BUMP_AMPLITUDE).contains(&spec.bump_amplitude) {
            return Err(Error::InvalidScene(format!(
                "bump amplitude {} outside [0, {MAX_BUMP_AMPLITUDE}]",
                spec.bump_amplitude
            )));
        }
        if spec.width < 64 || spec.height < 64 || !(spec.light_distance > 0.0) {
            return Err(Error::InvalidScene("image size or light distance out of range".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut bumps: Vec<Bump> = (0..spec.num_bumps)
            .map(|_| {
                let direction = loop {
                    let v = Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    );
                    let n = v.norm();
                    if n > 0.1 && n <= 1.0 {
                        break v / n;
                    }
                };
                Bump {
                    amplitude: rng.gen_range(0.5..1.0),
                    direction,
                    frequency: rng.gen_range(2.0..5.0),
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                }
            })
            .collect();
        let total: f64 = bumps.iter().map(|b| b.amplitude).sum();
        for b in &mut bumps {
            b.amplitude *= spec.bump_amplitude / total.max(1e-12);
        }
        let noise_seed = rng.gen::<u32>();
        let dye = Fbm::<Perlin>::new(noise_seed)
            .set_octaves(3)
            .set_frequency(12.0)
            .set_lacunarity(2.0)
            .set_persistence(0.5);
        let tint = Fbm::<Perlin>::new(noise_seed.wrapping_add(1))
            .set_octaves(2)
            .set_frequency(1.5);
        let mut scene = Self {
            spec: spec.clone(),
            center: Vector3::zeros(),
            bumps,
            dye,
            tint,
            trajectory: Vec::new(),
        };
        scene.trajectory = scene.default_trajectory(spec.num_frames);
        scene.check_trajectory()?;
        Ok(scene)
    }

    /// Closed loop through the cavity; each camera faces the nearest wall region.
    fn default_trajectory(&self, n: usize) -> Vec<RigidPose> {
        let [a, b, c] = self.spec.semi_axes;
        (0..n)
            .map(|i| {
                let phi = std::f64::consts::TAU * i as f64 / n as f64;
                let eye =
                    self.center + Vector3::new(0.4 * a * phi.cos(), 0.36 * b * phi.sin(), 0.16 * c * (2.0 * phi).sin());
                let look = Vector3::new(phi.cos(), phi.sin(), 0.35 * (3.0 * phi).sin());
                RigidPose::look_at(&eye, &(eye + look), &Vector3::z())
            })
            .collect()
    }

    pub fn with_trajectory(mut self, trajectory: Vec<RigidPose>) -> Result<Self> {
        self.trajectory = trajectory;
        self.check_trajectory()?;
        Ok(self)
    }

    fn check_trajectory(&self) -> Result<()> {
        for (i, pose) in self.trajectory.iter().enumerate() {
            if !pose.is_valid(1e-6) || self.implicit(&pose.center()) >= 0.0 {
                return Err(Error::InvalidScene(format!(
                    "trajectory pose {i} is outside the cavity"
                )));
            }
        }
        Ok(())
    }

    /// Default synthetic camera: a wide fisheye filling the image.
    pub fn intrinsics(&self) -> CameraIntrinsics {
        let (w, h) = (self.spec.width, self.spec.height);
        let f = 0.375 * w as f64;
        CameraIntrinsics::new(f, (w as f64 / 2.0, h as f64 / 2.0), [0.05, -0.01, 0.0, 0.0], w, h)
    }

    /// Radius of the unperturbed ellipsoid along unit direction `w`.
    pub fn ellipsoid_radius(&self, w: &Vector3<f64>) -> f64 {
        let [a, b, c] = self.spec.semi_axes;
        1.0 / ((w.x / a).powi(2) + (w.y / b).powi(2) + (w.z / c).powi(2)).sqrt()
    }

    fn bump(&self, w: &Vector3<f64>) -> f64 {
        self.bumps
            .iter()
            .map(|b| b.amplitude * (b.frequency * b.direction.dot(w) + b.phase).sin())
            .sum()
    }

    /// Surface radius along unit direction `w` from the centre.
    pub fn radius(&self, w: &Vector3<f64>) -> f64 {
        self.ellipsoid_radius(w) * (1.0 + self.bump(w))
    }

    /// Surface point along unit direction `w`.
    pub fn surface_point(&self, w: &Vector3<f64>) -> Vector3<f64> {
        self.center + w * self.radius(w)
    }

    /// Negative inside, zero on the surface, positive outside.
    pub fn implicit(&self, p: &Vector3<f64>) -> f64 {
        let d = p - self.center;
        let n = d.norm();
        if n == 0.0 {
            return -self.radius(&Vector3::x());
        }
        n - self.radius(&(d / n))
    }

    /// Outward unit normal, from the analytic gradient of [`Self::implicit`].
    pub fn normal(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let d = p - self.center;
        let n = d.norm();
        let w = d / n;
        let [a, b, c] = self.spec.semi_axes;
        let qw = Vector3::new(w.x / (a * a), w.y / (b * b), w.z / (c * c));
        let s = w.dot(&qw);
        let rho = 1.0 / s.sqrt();
        let grad_rho = -qw * (rho / s);
        let mut bump = 0.0;
        let mut grad_bump = Vector3::zeros();
        for k in &self.bumps {
            let arg = k.frequency * k.direction.dot(&w) + k.phase;
            bump += k.amplitude * arg.sin();
            grad_bump += k.direction * (k.amplitude * k.frequency * arg.cos());
        }
        let grad_r = grad_rho * (1.0 + bump) + grad_bump * rho;
        let tangential = grad_r - w * w.dot(&grad_r);
        (w - tangential / n).normalize()
    }

    /// Diameter of the bounding ellipsoid.
    pub fn diameter(&self) -> f64 {
        2.0 * self.spec.semi_axes.iter().fold(0.0f64, |m, &a| m.max(a)) * (1.0 + self.spec.bump_amplitude)
    }

    /// Linear RGB albedo in [0, 1] at a surface point.
    pub fn albedo(&self, p: &Vector3<f64>) -> [f64; 3] {
        let q = [p.x, p.y, p.z];
        let shade = 0.06 * self.tint.get(q);
        match self.spec.texture {
            TextureVariant::HighTexture => {
                let m = smoothstep(-0.05, 0.3, self.dye.get(q));
                [
                    0.9 * (1.0 - 0.8 * m) + shade,
                    0.55 * (1.0 - 0.45 * m) + shade,
                    0.45 + 0.1 * m + shade,
                ]
            }
            TextureVariant::LowTexture => {
                let g = 0.5 + 0.5 * (p.z - self.center.z) / self.spec.semi_axes[2];
                [0.82 + 0.08 * g + shade, 0.5 + 0.05 * g + shade, 0.42 + shade]
            }
        }
    }

    /// Distance to the first surface hit along a unit ray from an interior point.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let amp = self.spec.bump_amplitude;
        let t_in = if self.inside_scaled(origin, 1.0 - amp) {
            self.exit_distance(origin, dir, 1.0 - amp).unwrap_or(0.0)
        } else {
            0.0
        };
        let t_out = self.exit_distance(origin, dir, 1.0 + amp)?;
        if self.implicit(origin) >= 0.0 {
            return None;
        }
        let f = |t: f64| self.implicit(&(origin + dir * t));
        if amp == 0.0 {
            return Some(t_out);
        }
        let steps = 16;
        let dt = (t_out - t_in) / steps as f64;
        let (mut lo, mut f_lo) = (t_in, f(t_in));
        if f_lo >= 0.0 {
            return Some(lo);
        }
        for i in 1..=steps {
            let hi = if i == steps { t_out } else { t_in + dt * i as f64 };
            let f_hi = f(hi);
            if f_hi >= 0.0 {
                return Some(refine_root(&f, (lo, f_lo), (hi, f_hi)));
            }
            (lo, f_lo) = (hi, f_hi);
        }
        None
    }

    fn inside_scaled(&self, p: &Vector3<f64>, s: f64) -> bool {
        let [a, b, c] = self.spec.semi_axes;
        let d = p - self.center;
        (d.x / (a * s)).powi(2) + (d.y / (b * s)).powi(2) + (d.z / (c * s)).powi(2) < 1.0
    }

    /// Far intersection distance with the ellipsoid scaled by `s`.
    fn exit_distance(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, s: f64) -> Option<f64> {
        let [a, b, c] = self.spec.semi_axes;
        let inv = Vector3::new(1.0 / (a * s), 1.0 / (b * s), 1.0 / (c * s));
        let o = (origin - self.center).component_mul(&inv);
        let d = dir.component_mul(&inv);
        let qa = d.norm_squared();
        let qb = 2.0 * o.dot(&d);
        let qc = o.norm_squared() - 1.0;
        let disc = qb * qb - 4.0 * qa * qc;
        if disc < 0.0 {
            return None;
        }
        let t = (-qb + disc.sqrt()) / (2.0 * qa);
        (t > 0.0).then_some(t)
    }

    /// Closest point on the surface to `q`, by Gauss–Newton over the direction from the centre.
    pub fn distance_to_surface(&self, q: &Vector3<f64>) -> f64 {
        let d = q - self.center;
        if d.norm() == 0.0 {
            return self.radius(&Vector3::x());
        }
        let w0 = d.normalize();
        let helper = if w0.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let e1 = w0.cross(&helper).normalize();
        let e2 = w0.cross(&e1);
        let point = |uv: &Vector2<f64>| self.surface_point(&(w0 + e1 * uv.x + e2 * uv.y).normalize());
        let mut uv = Vector2::zeros();
        let mut best = (point(&uv) - q).norm();
        for _ in 0..30 {
            let r = point(&uv) - q;
            let h = 1e-7;
            let j = nalgebra::Matrix3x2::from_columns(&[
                (point(&(uv + Vector2::new(h, 0.0))) - point(&(uv - Vector2::new(h, 0.0)))) / (2.0 * h),
                (point(&(uv + Vector2::new(0.0, h))) - point(&(uv - Vector2::new(0.0, h)))) / (2.0 * h),
            ]);
            let Some(step) = (j.transpose() * j).try_inverse().map(|m| m * (j.transpose() * r)) else {
                break;
            };
            let next = uv - step;
            let dist = (point(&next) - q).norm();
            if dist >= best {
                break;
            }
            best = dist;
            uv = next;
        }
        best
    }
}
