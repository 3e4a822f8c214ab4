//! Class attention maps read off the final feature maps `g_k`.
//!
//! All methods produce a raw map on the final feature grid, which is then
//! min-max normalized and bilinearly resized to the input resolution.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{HeadKind, Model, INPUT_SIZE};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapMethod {
    Cam,
    GradCam,
    Sam,
    Hesam,
}

impl MapMethod {
    pub const ALL: [MapMethod; 4] = [MapMethod::Cam, MapMethod::GradCam, MapMethod::Sam, MapMethod::Hesam];

    pub fn as_str(self) -> &'static str {
        match self {
            MapMethod::Cam => "cam",
            MapMethod::GradCam => "gradcam",
            MapMethod::Sam => "sam",
            MapMethod::Hesam => "hesam",
        }
    }
}

impl fmt::Display for MapMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MapMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown map method {s:?}")))
    }
}

/// One class map for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<T> {
    pub class_id: usize,
    pub method: MapMethod,
    /// Final-feature grid, `[H, W]`.
    pub raw: Tensor<T>,
    /// `[32, 32]`, values in `[0, 1]`.
    pub upsampled: Tensor<T>,
}

impl<T: Scalar> AttentionMap<T> {
    fn new(class_id: usize, method: MapMethod, raw: Tensor<T>) -> Self {
        let upsampled = normalize_upsample(&raw, INPUT_SIZE, INPUT_SIZE);
        Self {
            class_id,
            method,
            raw,
            upsampled,
        }
    }
}

fn check_class<T: Scalar>(model: &Model<T>, class: usize) -> Result<()> {
    let classes = model.classifier().0.shape()[1];
    if class >= classes {
        return Err(Error::Usage(format!("class {class} out of {classes}")));
    }
    Ok(())
}

/// `sum_k weight(n, k) g[n, k]` for each sample `n`.
fn weighted_maps<T: Scalar>(g: &Tensor<T>, weight: impl Fn(usize, usize) -> T) -> Result<Vec<Tensor<T>>> {
    let (n, k, h, w) = g.dims4("attention map")?;
    let hw = h * w;
    let mut maps = Vec::with_capacity(n);
    for s in 0..n {
        let mut raw = vec![T::zero(); hw];
        for ch in 0..k {
            let wk = weight(s, ch);
            if wk == T::zero() {
                continue;
            }
            let plane = &g.data()[(s * k + ch) * hw..(s * k + ch + 1) * hw];
            for (r, &v) in raw.iter_mut().zip(plane) {
                *r += wk * v;
            }
        }
        maps.push(Tensor::new(&[h, w], raw)?);
    }
    Ok(maps)
}

fn final_features<T: Scalar>(model: &Model<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (trace, _) = model.run_eval(&mut tape, input, false)?;
    Ok(tape.value(trace.final_features).clone())
}

/// CAM: `sum_k omega_k^c g_k` for every sample of `input`.
pub fn cam<T: Scalar>(model: &Model<T>, input: &Tensor<T>, class: usize) -> Result<Vec<AttentionMap<T>>> {
    if model.config().head != HeadKind::Cam {
        return Err(Error::Usage(format!("cam maps need a cam head, model has {}", model.config().head)));
    }
    check_class(model, class)?;
    let g = final_features(model, input)?;
    let (w, _) = model.classifier();
    let maps = weighted_maps(&g, |_, k| w.data()[k * 2 + class])?;
    Ok(maps.into_iter().map(|raw| AttentionMap::new(class, MapMethod::Cam, raw)).collect())
}

/// SAM or HESAM map: `sum_k gamma_k^c g_k` with the head's classifier.
pub fn sam_map<T: Scalar>(model: &Model<T>, input: &Tensor<T>, class: usize) -> Result<Vec<AttentionMap<T>>> {
    let cfg = model.config();
    let method = match cfg.head {
        HeadKind::Sam => MapMethod::Sam,
        HeadKind::Hesam => MapMethod::Hesam,
        HeadKind::Cam => return Err(Error::Usage("sam maps need a sam or hesam head".into())),
    };
    if !cfg.maps_defined() {
        return Err(Error::MapUndefined(format!(
            "{} fusion widens the classifier input to {} while the feature maps have {} channels",
            cfg.fusion,
            model.classifier().0.shape()[0],
            cfg.final_channels()
        )));
    }
    check_class(model, class)?;
    let g = final_features(model, input)?;
    let (w, _) = model.classifier();
    let maps = weighted_maps(&g, |_, k| w.data()[k * 2 + class])?;
    Ok(maps.into_iter().map(|raw| AttentionMap::new(class, method, raw)).collect())
}

/// Grad-CAM weights `alpha[n, k]`: the spatial mean of `d y^c / d g_k`.
pub fn gradcam_weights<T: Scalar>(model: &Model<T>, input: &Tensor<T>, class: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    check_class(model, class)?;
    let mut tape = Tape::new();
    let (trace, _) = model.run_eval(&mut tape, input, true)?;
    let score = tape.class_score_sum(trace.logits, class)?;
    tape.backward(score)?;
    let g = tape.value(trace.final_features).clone();
    let grad = tape
        .grad(trace.final_features)
        .ok_or_else(|| Error::Usage("no gradient reached the final feature maps".into()))?;
    let (n, k, h, w) = g.dims4("gradcam")?;
    let hw = h * w;
    let inv = T::one() / T::from_usize_lossy(hw);
    let alpha = grad.data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    Ok((Tensor::new(&[n, k], alpha)?, g))
}

/// Grad-CAM: `ReLU(sum_k alpha_k^c g_k)`.
pub fn gradcam<T: Scalar>(model: &Model<T>, input: &Tensor<T>, class: usize) -> Result<Vec<AttentionMap<T>>> {
    let (alpha, g) = gradcam_weights(model, input, class)?;
    let k = alpha.shape()[1];
    let maps = weighted_maps(&g, |s, ch| alpha.data()[s * k + ch])?;
    Ok(maps
        .into_iter()
        .map(|raw| AttentionMap::new(class, MapMethod::GradCam, raw.map(|v| v.max(T::zero()))))
        .collect())
}

/// Dispatches on `method`; `sam` and `hesam` must match the model head.
pub fn attention_maps<T: Scalar>(
    model: &Model<T>,
    input: &Tensor<T>,
    class: usize,
    method: MapMethod,
) -> Result<Vec<AttentionMap<T>>> {
    match method {
        MapMethod::Cam => cam(model, input, class),
        MapMethod::GradCam => gradcam(model, input, class),
        MapMethod::Sam | MapMethod::Hesam => {
            let maps = sam_map(model, input, class)?;
            match maps.first() {
                Some(m) if m.method != method => Err(Error::Usage(format!(
                    "{method} maps need a {method} head, model has {}",
                    model.config().head
                ))),
                _ => Ok(maps),
            }
        }
    }
}

/// Bilinear value at fractional pixel coordinates, clamped to the grid.
pub fn bilinear_sample<T: Scalar>(map: &Tensor<T>, y: f64, x: f64) -> T {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (T::from_f64_lossy(y - y0 as f64), T::from_f64_lossy(x - x0 as f64));
    let at = |r: usize, c: usize| map.data()[r * w + c];
    let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * fx;
    let bottom = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * fx;
    top + (bottom - top) * fy
}

/// Half-pixel-centred bilinear resize of a `[H, W]` map.
pub fn resize_bilinear<T: Scalar>(map: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    Tensor::from_fn(&[out_h, out_w], |i| {
        let (oy, ox) = (i / out_w, i % out_w);
        bilinear_sample(map, (oy as f64 + 0.5) * sy - 0.5, (ox as f64 + 0.5) * sx - 0.5)
    })
}

/// Min-max normalize to `[0, 1]` (a constant map becomes zeros), then resize.
pub fn normalize_upsample<T: Scalar>(raw: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let lo = raw.data().iter().copied().fold(T::infinity(), T::min);
    let hi = raw.data().iter().copied().fold(T::neg_infinity(), T::max);
    let span = hi - lo;
    let norm = if span > T::zero() {
        raw.map(|v| (v - lo) / span)
    } else {
        raw.map(|_| T::zero())
    };
    resize_bilinear(&norm, out_h, out_w).map(|v| v.max(T::zero()).min(T::one()))
}

/// `{sample}_{method}_{class}.pgm`
pub fn map_file_name(sample: usize, method: MapMethod, class: usize) -> String {
    format!("{sample}_{method}_{class}.pgm")
}

/// Binary greyscale PGM (P5, maxval 255) of values in `[0, 1]`.
pub fn write_pgm<T: Scalar, W: Write>(mut w: W, width: usize, height: usize, values: &[T]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::Usage(format!("{} values for a {width}x{height} image", values.len())));
    }
    write!(w, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = values
        .iter()
        .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Input slice (min-max normalized) and map side by side, `[H, 2W]`.
pub fn composite<T: Scalar>(slice: &Tensor<T>, map: &Tensor<T>) -> Result<Tensor<T>> {
    if slice.shape() != map.shape() || slice.rank() != 2 {
        return Err(Error::Usage(format!(
            "composite needs equal 2-D images, got {:?} and {:?}",
            slice.shape(),
            map.shape()
        )));
    }
    let (h, w) = (slice.shape()[0], slice.shape()[1]);
    let slice = normalize_upsample(slice, h, w);
    Ok(Tensor::from_fn(&[h, 2 * w], |i| {
        let (r, c) = (i / (2 * w), i % (2 * w));
        if c < w {
            slice.data()[r * w + c]
        } else {
            map.data()[r * w + c - w]
        }
    }))
}

/// Centre channel of sample `n` of an `[N, C, H, W]` batch.
pub fn centre_slice<T: Scalar>(input: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    let (bn, c, h, w) = input.dims4("centre_slice")?;
    if n >= bn {
        return Err(Error::Usage(format!("sample {n} out of {bn}")));
    }
    let start = ((n * c) + c / 2) * h * w;
    Tensor::new(&[h, w], input.data()[start..start + h * w].to_vec())
}
