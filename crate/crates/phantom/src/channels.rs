use hesam_core::saliency::bilinear_sample;
use hesam_core::{Error, Result, Tensor};

use crate::generate::{Label, CENTRE_SLICE, DEPTH, SIZE};

pub const CHANNEL_MODES: [usize; 4] = [1, 3, 11, 21];
/// Crop sides of the 3-channel mode, in diameters.
pub const CROP_SCALES: [f64; 3] = [2.0, 3.0, 4.0];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleMeta {
    pub centre_slice: usize,
    /// Unknown for samples read back from disk.
    pub diameter: Option<f64>,
    /// A multi-scale crop reached past the volume edge and was padded by
    /// edge replication.
    pub clamped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[C, H, W]`
    pub volume: Tensor<f32>,
    pub label: Label,
    pub meta: SampleMeta,
}

impl Sample {
    pub fn channels(&self) -> usize {
        self.volume.shape()[0]
    }
}

/// Side lengths of the three centre-slice crops for a nodule of `diameter`.
pub fn crop_sides(diameter: f64) -> [f64; 3] {
    CROP_SCALES.map(|p| p * diameter)
}

/// Builds the model input for one channel mode from a `[21, 32, 32]` volume.
///
/// Modes 1, 11 and 21 take that many slices centred on slice 10. Mode 3
/// crops squares of side 2d, 3d and 4d around the centre of slice 10 and
/// resizes each to 32 x 32 bilinearly.
pub fn make_channels(volume: &Tensor<f32>, label: Label, mode: usize, diameter: f64) -> Result<Sample> {
    if volume.shape() != [DEPTH, SIZE, SIZE] {
        return Err(Error::Dimension {
            op: "make_channels",
            detail: format!("volume {:?}, expected [{DEPTH}, {SIZE}, {SIZE}]", volume.shape()),
        });
    }
    let plane = SIZE * SIZE;
    let mut meta = SampleMeta {
        centre_slice: CENTRE_SLICE,
        diameter: Some(diameter),
        clamped: false,
    };
    let volume = match mode {
        1 | 11 | 21 => {
            let first = CENTRE_SLICE - mode / 2;
            meta.centre_slice = mode / 2;
            let data = volume.data()[first * plane..(first + mode) * plane].to_vec();
            Tensor::new(&[mode, SIZE, SIZE], data)?
        }
        3 => {
            let slice = Tensor::new(
                &[SIZE, SIZE],
                volume.data()[CENTRE_SLICE * plane..(CENTRE_SLICE + 1) * plane]
                    .iter()
                    .map(|&v| v as f64)
                    .collect(),
            )?;
            let half = SIZE as f64 / 2.0;
            let mut data = Vec::with_capacity(3 * plane);
            for side in crop_sides(diameter) {
                meta.clamped |= side > SIZE as f64;
                let origin = half - side / 2.0;
                let step = side / SIZE as f64;
                for oy in 0..SIZE {
                    for ox in 0..SIZE {
                        let y = origin + (oy as f64 + 0.5) * step - 0.5;
                        let x = origin + (ox as f64 + 0.5) * step - 0.5;
                        data.push(bilinear_sample(&slice, y, x) as f32);
                    }
                }
            }
            meta.centre_slice = 1;
            Tensor::new(&[3, SIZE, SIZE], data)?
        }
        other => return Err(Error::Config(format!("channel mode {other} not in {CHANNEL_MODES:?}"))),
    };
    Ok(Sample { volume, label, meta })
}
