//! Synthetic two-modality dataset generator.
//!
//! Every sample is `prototype(identity) + offset(modality) + noise(sample)`,
//! all Gaussian with configurable scales. The per-modality offsets are global
//! tensors shared by all identities, which is what creates the cross-modality
//! gap an untrained model cannot bridge.
//!
//! Draw order on a ChaCha8 stream seeded by `spec.seed`: visible offset,
//! thermal offset, then per identity its prototype followed by (visible, then
//! thermal) per-sample noise tensors. Sample ids are sequential from zero in
//! generation order.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabeledSample, Modality};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_identities: usize,
    pub samples_per_identity_per_modality: usize,
    pub input_shape: (usize, usize, usize),
    /// Scale of the per-identity prototype tensors.
    pub identity_scale: f64,
    /// Scale of the two global per-modality offset tensors.
    pub modality_offset_scale: f64,
    /// Scale of the per-sample noise tensors.
    pub noise_scale: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(Error::config("num_identities must be at least 2"));
        }
        if self.samples_per_identity_per_modality < 1 {
            return Err(Error::config("need at least one sample per identity per modality"));
        }
        let (h, w, c) = self.input_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::config(format!(
                "input_shape {:?} has a zero dimension",
                self.input_shape
            )));
        }
        for (name, v) in [
            ("identity_scale", self.identity_scale),
            ("modality_offset_scale", self.modality_offset_scale),
            ("noise_scale", self.noise_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.identity_scale <= self.noise_scale {
            return Err(Error::config(format!(
                "identity_scale ({}) must exceed noise_scale ({}) for separable identities",
                self.identity_scale, self.noise_scale
            )));
        }
        Ok(())
    }

    /// The benchmark dataset every shipped config and threshold was
    /// validated against: 32 identities, 8 samples per identity per
    /// modality, 6x6x4 inputs. The offset scale sits between the identity
    /// spread and the noise floor; cross-modality retrieval still fails for
    /// an untrained model because the two modality streams start as
    /// unrelated random maps.
    pub fn benchmark() -> Self {
        SyntheticSpec {
            num_identities: 32,
            samples_per_identity_per_modality: 8,
            input_shape: (6, 6, 4),
            identity_scale: 1.0,
            modality_offset_scale: 0.5,
            noise_scale: 0.1,
            seed: 1,
        }
    }
}

/// Generate the dataset described by `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut r = rng::seeded(spec.seed);
    let shape = spec.input_shape;
    let draw = |scale: f64, r: &mut rng::ChaCha8Rng| -> Array3<f64> {
        Array3::from_shape_fn(shape, |_| scale * rng::standard_normal(r))
    };

    let visible_offset = draw(spec.modality_offset_scale, &mut r);
    let thermal_offset = draw(spec.modality_offset_scale, &mut r);

    let mut samples = Vec::new();
    let mut sample_id = 0u64;
    for identity in 0..spec.num_identities as u32 {
        let prototype = draw(spec.identity_scale, &mut r);
        for modality in Modality::BOTH {
            let offset = match modality {
                Modality::Visible => &visible_offset,
                Modality::Thermal => &thermal_offset,
            };
            for _ in 0..spec.samples_per_identity_per_modality {
                let noise = draw(spec.noise_scale, &mut r);
                samples.push(LabeledSample {
                    sample_id,
                    identity,
                    modality,
                    data: &prototype + offset + noise,
                });
                sample_id += 1;
            }
        }
    }
    let echo = serde_json::to_value(spec).map_err(|e| Error::parse(e.to_string()))?;
    Ok(Dataset::new(samples)?.with_generator_echo(echo))
}
