//! Physical properties of a 44x44 response: center of mass, total deposit,
//! and the five analysis channels compared during evaluation.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const GRID: usize = 44;
/// Half of the quadrant edge: rows/cols 0..=21 vs 22..=43.
const HALF: usize = GRID / 2;

#[derive(Debug, Error, PartialEq)]
pub enum PropsError {
    #[error("image has no deposit (all pixels zero)")]
    NoDeposit,
    #[error("unknown property name {0:?}")]
    UnknownPropertyName(String),
}

/// Affine map applied to a raw property value before it enters losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Affine {
    pub scale: f64,
    pub offset: f64,
}

impl Affine {
    pub fn apply(&self, x: f64) -> f64 {
        self.scale * x + self.offset
    }

    pub fn invert(&self, y: f64) -> f64 {
        (y - self.offset) / self.scale
    }
}

/// Named controllable properties and their normalization into [-1, 1].
///
/// The default is the two-dimensional collision position: pixel coordinate
/// p maps to p / 21.5 - 1, so column 0 -> -1 and column 43 -> +1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropertySpec {
    pub names: Vec<String>,
    pub normalization: Vec<Affine>,
}

impl Default for PropertySpec {
    fn default() -> Self {
        let affine = Affine { scale: 1.0 / 21.5, offset: -1.0 };
        PropertySpec {
            names: vec!["com_x".into(), "com_y".into()],
            normalization: vec![affine, affine],
        }
    }
}

impl PropertySpec {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.names.is_empty() {
            return Err("property spec must name at least one property".into());
        }
        if self.names.len() != self.normalization.len() {
            return Err("property names and normalization lengths differ".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for n in &self.names {
            if !seen.insert(n.as_str()) {
                return Err(format!("duplicate property name {n:?}"));
            }
        }
        for a in &self.normalization {
            if a.scale == 0.0 || !a.scale.is_finite() || !a.offset.is_finite() {
                return Err("property normalization must be finite with nonzero scale".into());
            }
        }
        Ok(())
    }
}

/// Intensity-weighted mean pixel coordinate, `(com_x, com_y)`, where x is
/// the column index and y the row index, both in [0, 43].
pub fn center_of_mass(image: &Array2<f32>) -> Result<(f64, f64), PropsError> {
    let mut sum = 0.0f64;
    let mut sx = 0.0f64;
    let mut sy = 0.0f64;
    for ((row, col), &v) in image.indexed_iter() {
        let v = v as f64;
        sum += v;
        sx += col as f64 * v;
        sy += row as f64 * v;
    }
    if sum <= 0.0 {
        return Err(PropsError::NoDeposit);
    }
    Ok((sx / sum, sy / sum))
}

/// Sum of all pixels.
pub fn total_deposit(image: &Array2<f32>) -> f64 {
    image.iter().map(|&v| v as f64).sum()
}

/// Five scalar summaries of a response: four quadrant sums and the total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelValues(pub [f64; 5]);

impl ChannelValues {
    pub fn as_slice(&self) -> &[f64; 5] {
        &self.0
    }
}

/// ch1: rows 0-21 x cols 0-21, ch2: rows 0-21 x cols 22-43,
/// ch3: rows 22-43 x cols 0-21, ch4: rows 22-43 x cols 22-43, ch5: total.
///
/// ch5 is computed by the same row-major summation as [`total_deposit`] so
/// the two agree exactly.
pub fn channel_values(image: &Array2<f32>) -> ChannelValues {
    let mut q = [0.0f64; 4];
    for ((row, col), &v) in image.indexed_iter() {
        let idx = (row >= HALF) as usize * 2 + (col >= HALF) as usize;
        q[idx] += v as f64;
    }
    ChannelValues([q[0], q[1], q[2], q[3], total_deposit(image)])
}

/// Extracts each property named in `spec` and applies its normalization.
pub fn property_vector(image: &Array2<f32>, spec: &PropertySpec) -> Result<Vec<f64>, PropsError> {
    let needs_com = spec.names.iter().any(|n| n == "com_x" || n == "com_y");
    let com = if needs_com { Some(center_of_mass(image)?) } else { None };
    spec.names
        .iter()
        .zip(&spec.normalization)
        .map(|(name, affine)| {
            let raw = match name.as_str() {
                "com_x" => com.unwrap().0,
                "com_y" => com.unwrap().1,
                "total_deposit" => total_deposit(image),
                other => return Err(PropsError::UnknownPropertyName(other.to_string())),
            };
            Ok(affine.apply(raw))
        })
        .collect()
}
