//! Phantom nodule volumes.
//!
//! A phantom is a `21 x 32 x 32` volume (slice, row, column) holding one
//! nodule centred on slice 10. Benign nodules are smoothed ellipsoids;
//! malignant ones get a lobulated margin and radial spikes, and optionally a
//! cavity or a faint ground-glass halo.

use std::f64::consts::PI;

use hesam_core::{Error, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const DEPTH: usize = 21;
pub const SIZE: usize = 32;
pub const CENTRE_SLICE: usize = 10;
pub const MIN_DIAMETER: f64 = 8.0;
pub const MAX_DIAMETER: f64 = 20.0;

const BACKGROUND: f64 = 0.1;
const NODULE: f64 = 0.9;
const GROUND_GLASS: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Benign = 0,
    Malignant = 1,
}

impl Label {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Label::Benign),
            1 => Ok(Label::Malignant),
            other => Err(Error::Format(format!("label {other} is neither 0 nor 1"))),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub label: Label,
    /// Mean in-plane diameter in voxels.
    pub diameter: f64,
    pub spiculation_count: u32,
    /// Standard deviation of the Gaussian margin blur, in voxels.
    pub margin_softness: f64,
    pub noise_std: f64,
    pub cavity: bool,
    pub ground_glass: bool,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn benign(diameter: f64, seed: u64) -> Self {
        Self {
            label: Label::Benign,
            diameter,
            spiculation_count: 0,
            margin_softness: 0.7,
            noise_std: 0.0,
            cavity: false,
            ground_glass: false,
            seed,
        }
    }

    pub fn malignant(diameter: f64, spikes: u32, seed: u64) -> Self {
        Self {
            label: Label::Malignant,
            diameter,
            spiculation_count: spikes,
            margin_softness: 0.6,
            noise_std: 0.0,
            cavity: false,
            ground_glass: false,
            seed,
        }
    }

    /// Randomized spec of the default population: diameter uniform in
    /// `[8, 20]`, 6 to 12 spikes, a cavity or halo on a quarter of the
    /// malignant cases each.
    pub fn sample(label: Label, noise_std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
        let diameter = rng.random_range(MIN_DIAMETER..=MAX_DIAMETER);
        let mut spec = match label {
            Label::Benign => Self::benign(diameter, seed),
            Label::Malignant => {
                let mut s = Self::malignant(diameter, rng.random_range(6..=12), seed);
                s.cavity = rng.random_bool(0.25);
                s.ground_glass = rng.random_bool(0.25);
                s
            }
        };
        spec.margin_softness += rng.random_range(-0.1..0.1);
        spec.noise_std = noise_std;
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_DIAMETER..=MAX_DIAMETER).contains(&self.diameter) {
            return Err(Error::Config(format!("diameter {} outside [8, 20]", self.diameter)));
        }
        match self.label {
            Label::Benign if self.spiculation_count != 0 || self.cavity || self.ground_glass => {
                Err(Error::Config("benign phantoms have no spikes, cavity or halo".into()))
            }
            _ if !(self.margin_softness >= 0.0 && self.noise_std >= 0.0) => {
                Err(Error::Config("softness and noise must be non-negative".into()))
            }
            _ => Ok(()),
        }
    }
}

struct Spike {
    dir: [f64; 3],
    base: f64,
    length: f64,
    half_width: f64,
}

/// Whether `p`, relative to the nodule centre, lies in the tapered spike.
fn spike_cover(s: &Spike, p: [f64; 3]) -> bool {
    let t = p[0] * s.dir[0] + p[1] * s.dir[1] + p[2] * s.dir[2];
    let end = s.base + s.length;
    if t < 0.0 || t > end {
        return false;
    }
    let perp2 = p.iter().map(|v| v * v).sum::<f64>() - t * t;
    let width = if t <= s.base {
        s.half_width
    } else {
        s.half_width * (1.0 - 0.75 * (t - s.base) / s.length)
    };
    perp2 <= width * width
}

/// Renders the phantom described by `spec` as a `[21, 32, 32]` tensor.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Tensor<f32>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let r = spec.diameter / 2.0;
    let centre = [
        CENTRE_SLICE as f64,
        15.5 + rng.random_range(-0.5..0.5),
        15.5 + rng.random_range(-0.5..0.5),
    ];
    let elong = rng.random_range(0.0..0.15);
    let (ra, rb) = (r * (1.0 + elong), r * (1.0 - elong));
    let rz = r * rng.random_range(0.85..1.0);
    let theta = rng.random_range(0.0..PI);
    let (ct, st) = (theta.cos(), theta.sin());
    let malignant = spec.label == Label::Malignant;
    let lobes = rng.random_range(3..=5) as f64;
    let lobe_phase = rng.random_range(0.0..2.0 * PI);
    let lobe_amp = if malignant { 0.12 } else { 0.0 };

    let spikes: Vec<Spike> = (0..spec.spiculation_count)
        .map(|i| {
            let phi = 2.0 * PI * (i as f64 + rng.random_range(0.0..0.7)) / spec.spiculation_count as f64;
            let psi: f64 = rng.random_range(-0.2..0.2);
            let dir = [psi.sin(), psi.cos() * phi.sin(), psi.cos() * phi.cos()];
            Spike {
                dir,
                base: r * 0.5,
                length: r * 0.5 + 2.0 + r * rng.random_range(0.4..0.9),
                half_width: rng.random_range(0.9..1.5),
            }
        })
        .collect();
    let cavity = spec.cavity.then(|| {
        let off = r * 0.2;
        let a = rng.random_range(0.0..2.0 * PI);
        ([0.0, off * a.sin(), off * a.cos()], r * 0.35)
    });

    let mut body = vec![0.0f64; DEPTH * SIZE * SIZE];
    let mut halo = vec![0.0f64; DEPTH * SIZE * SIZE];
    for z in 0..DEPTH {
        for y in 0..SIZE {
            for x in 0..SIZE {
                let p = [z as f64 - centre[0], y as f64 - centre[1], x as f64 - centre[2]];
                let u = ct * p[2] + st * p[1];
                let v = -st * p[2] + ct * p[1];
                let q = ((u / ra).powi(2) + (v / rb).powi(2) + (p[0] / rz).powi(2)).sqrt();
                let angle = v.atan2(u);
                let reach = 1.0 + lobe_amp * (lobes * angle + lobe_phase).sin();
                let mut inside = q <= reach || spikes.iter().any(|s| spike_cover(s, p));
                if let Some((c, cr)) = cavity {
                    let d2: f64 = p.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum();
                    if d2 <= cr * cr {
                        inside = false;
                    }
                }
                let i = (z * SIZE + y) * SIZE + x;
                body[i] = if inside { 1.0 } else { 0.0 };
                if spec.ground_glass && q <= 1.45 {
                    halo[i] = 1.0;
                }
            }
        }
    }
    gaussian_blur(&mut body, spec.margin_softness);
    if spec.ground_glass {
        gaussian_blur(&mut halo, 1.2);
    }

    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let data = body
        .iter()
        .zip(&halo)
        .map(|(&b, &h)| {
            let tissue = BACKGROUND + (NODULE - BACKGROUND) * b;
            let glass = BACKGROUND + (GROUND_GLASS - BACKGROUND) * h;
            let mut v = tissue.max(glass);
            if spec.noise_std > 0.0 {
                v += noise.sample(&mut rng);
            }
            v.clamp(0.0, 1.0) as f32
        })
        .collect();
    Tensor::new(&[DEPTH, SIZE, SIZE], data)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable blur of a `[DEPTH, SIZE, SIZE]` buffer with edge replication.
fn gaussian_blur(buf: &mut [f64], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let dims = [DEPTH, SIZE, SIZE];
    let strides = [SIZE * SIZE, SIZE, 1];
    let mut tmp = vec![0.0; buf.len()];
    for axis in 0..3 {
        let (n, stride) = (dims[axis] as isize, strides[axis]);
        for (i, out) in tmp.iter_mut().enumerate() {
            let pos = (i / stride) as isize % n;
            let base = i - pos as usize * stride;
            *out = k
                .iter()
                .enumerate()
                .map(|(j, w)| {
                    let src = (pos + j as isize - radius).clamp(0, n - 1) as usize;
                    w * buf[base + src * stride]
                })
                .sum();
        }
        buf.copy_from_slice(&tmp);
    }
}

/// Binary mask of the centre slice at `threshold`.
pub fn centre_mask(volume: &Tensor<f32>, threshold: f32) -> Vec<bool> {
    let start = CENTRE_SLICE * SIZE * SIZE;
    volume.data()[start..start + SIZE * SIZE].iter().map(|&v| v > threshold).collect()
}

/// `(perimeter, area)` of a square mask: perimeter counts unit edges between
/// mask and non-mask pixels, the image border counting as outside.
pub fn perimeter_area(mask: &[bool], side: usize) -> (usize, usize) {
    let at = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < side && (x as usize) < side && mask[y as usize * side + x as usize]
    };
    let mut perimeter = 0;
    let mut area = 0;
    for y in 0..side as isize {
        for x in 0..side as isize {
            if !at(y, x) {
                continue;
            }
            area += 1;
            perimeter += [(0, 1), (0, -1), (1, 0), (-1, 0)]
                .iter()
                .filter(|(dy, dx)| !at(y + dy, x + dx))
                .count();
        }
    }
    (perimeter, area)
}

/// `P^2 / (4 pi A)`: constant for discs of any size, larger for irregular
/// shapes. An empty mask scores zero.
pub fn isoperimetric_ratio(mask: &[bool], side: usize) -> f64 {
    let (p, a) = perimeter_area(mask, side);
    if a == 0 {
        0.0
    } else {
        (p * p) as f64 / (4.0 * PI * a as f64)
    }
}
