//! Zero-phase Butterworth smoothing for solved trajectories.
//!
//! The filter is the classic analog Butterworth prototype mapped through a
//! prewarped bilinear transform into second-order sections (plus one
//! first-order section for odd orders), run forward and backward so the
//! net phase is zero. Edges are handled by odd reflection padding plus
//! steady-state initial conditions, which makes constant inputs exact
//! fixed points.

use crate::geometry::{rot6d_to_matrix, Rotation6D};
use nalgebra::Matrix3;

#[derive(Debug, thiserror::Error)]
pub enum FilterError {
    #[error("cutoff {cutoff} Hz must sit in (0, {nyquist}) Hz")]
    InvalidCutoff { cutoff: f64, nyquist: f64 },
    #[error("order must be at least 1")]
    InvalidOrder,
    #[error("series of {got} samples is too short for order {order} (needs > {min})")]
    TooShort { got: usize, order: usize, min: usize },
}

/// One normalized biquad: `y = b0 x + b1 x1 + b2 x2 - a1 y1 - a2 y2`.
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    /// Steady-state filter states for a unit constant input
    /// (direct form II transposed).
    fn unit_steady_state(&self) -> [f64; 2] {
        let y = (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1]);
        let z2 = self.b[2] - self.a[1] * y;
        let z1 = self.b[1] - self.a[0] * y + z2;
        [z1, z2]
    }

    fn run(&self, x: &mut [f64], scale: f64) {
        let mut z = self.unit_steady_state();
        z[0] *= scale;
        z[1] *= scale;
        for v in x.iter_mut() {
            let xi = *v;
            let y = self.b[0] * xi + z[0];
            z[0] = self.b[1] * xi - self.a[0] * y + z[1];
            z[1] = self.b[2] * xi - self.a[1] * y;
            *v = y;
        }
    }

    /// |H(e^{i omega})|^2 at normalized angular frequency omega.
    fn magnitude_sq(&self, omega: f64) -> f64 {
        let (c1, s1) = (omega.cos(), omega.sin());
        let (c2, s2) = ((2.0 * omega).cos(), (2.0 * omega).sin());
        let nr = self.b[0] + self.b[1] * c1 + self.b[2] * c2;
        let ni = -(self.b[1] * s1 + self.b[2] * s2);
        let dr = 1.0 + self.a[0] * c1 + self.a[1] * c2;
        let di = -(self.a[0] * s1 + self.a[1] * s2);
        (nr * nr + ni * ni) / (dr * dr + di * di)
    }
}

#[derive(Debug, Clone)]
pub struct Butterworth {
    pub order: usize,
    pub cutoff_hz: f64,
    pub sample_rate_hz: f64,
    sections: Vec<Biquad>,
}

impl Butterworth {
    pub fn new(order: usize, cutoff_hz: f64, sample_rate_hz: f64) -> Result<Self, FilterError> {
        if order == 0 {
            return Err(FilterError::InvalidOrder);
        }
        let nyquist = sample_rate_hz / 2.0;
        if !(cutoff_hz > 0.0 && cutoff_hz < nyquist) {
            return Err(FilterError::InvalidCutoff { cutoff: cutoff_hz, nyquist });
        }
        // Prewarp so the digital response crosses -3 dB exactly at cutoff_hz.
        let k = (std::f64::consts::PI * cutoff_hz / sample_rate_hz).tan();
        let mut sections = Vec::new();
        for i in 0..order / 2 {
            // Pole pair quality from the Butterworth circle.
            let q = 1.0 / (2.0 * ((2 * i + 1) as f64 * std::f64::consts::PI / (2.0 * order as f64)).sin());
            let a0 = 1.0 + k / q + k * k;
            sections.push(Biquad {
                b: [k * k / a0, 2.0 * k * k / a0, k * k / a0],
                a: [(2.0 * k * k - 2.0) / a0, (1.0 - k / q + k * k) / a0],
            });
        }
        if order % 2 == 1 {
            // Real pole; expressed as a degenerate biquad to keep one code path.
            let a0 = k + 1.0;
            sections.push(Biquad { b: [k / a0, k / a0, 0.0], a: [(k - 1.0) / a0, 0.0] });
        }
        Ok(Butterworth { order, cutoff_hz, sample_rate_hz, sections })
    }

    /// Single forward pass with steady-state initialization at `x[0]`.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        if y.is_empty() {
            return y;
        }
        for s in &self.sections {
            let head = y[0];
            s.run(&mut y, head);
        }
        y
    }

    /// Forward-backward pass (zero phase) with odd reflection padding of
    /// `3 * order` samples per side.
    pub fn filtfilt(&self, x: &[f64]) -> Result<Vec<f64>, FilterError> {
        let pad = 3 * self.order;
        if x.len() <= pad {
            return Err(FilterError::TooShort { got: x.len(), order: self.order, min: pad });
        }
        let n = x.len();
        let mut ext = Vec::with_capacity(n + 2 * pad);
        for i in (1..=pad).rev() {
            ext.push(2.0 * x[0] - x[i]);
        }
        ext.extend_from_slice(x);
        for i in 1..=pad {
            ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
        }

        let mut y = self.forward(&ext);
        y.reverse();
        let mut y = self.forward(&y);
        y.reverse();
        Ok(y[pad..pad + n].to_vec())
    }

    /// Single-pass power response at `freq_hz`.
    pub fn magnitude_sq(&self, freq_hz: f64) -> f64 {
        let omega = std::f64::consts::TAU * freq_hz / self.sample_rate_hz;
        self.sections.iter().map(|s| s.magnitude_sq(omega)).product()
    }
}

/// Zero-phase low-pass of one scalar series. This is the smoothing the
/// track post-processing applies per channel.
pub fn butterworth_lowpass(
    series: &[f64],
    sample_rate_hz: f64,
    cutoff_hz: f64,
    order: usize,
) -> Result<Vec<f64>, FilterError> {
    Butterworth::new(order, cutoff_hz, sample_rate_hz)?.filtfilt(series)
}

/// Smooth several equally long channels in place with one filter design.
pub fn smooth_channels(
    channels: &mut [Vec<f64>],
    sample_rate_hz: f64,
    cutoff_hz: f64,
    order: usize,
) -> Result<(), FilterError> {
    let filter = Butterworth::new(order, cutoff_hz, sample_rate_hz)?;
    for ch in channels.iter_mut() {
        *ch = filter.filtfilt(ch)?;
    }
    Ok(())
}

/// Smooth a rotation series through its 6-number embedding, then
/// re-orthonormalize each frame. Filtering the embedding instead of angles
/// avoids wrap-around artifacts.
pub fn smooth_rotations(
    rotations: &[Matrix3<f64>],
    sample_rate_hz: f64,
    cutoff_hz: f64,
    order: usize,
) -> Result<Vec<Matrix3<f64>>, FilterError> {
    let mut channels: Vec<Vec<f64>> = vec![Vec::with_capacity(rotations.len()); 6];
    for r in rotations {
        let emb = Rotation6D::from_matrix(r);
        for (c, v) in channels.iter_mut().zip(emb.0) {
            c.push(v);
        }
    }
    smooth_channels(&mut channels, sample_rate_hz, cutoff_hz, order)?;
    let mut out = Vec::with_capacity(rotations.len());
    for i in 0..rotations.len() {
        let emb = Rotation6D([
            channels[0][i],
            channels[1][i],
            channels[2][i],
            channels[3][i],
            channels[4][i],
            channels[5][i],
        ]);
        // Smoothed embeddings of proper rotations stay far from degenerate.
        out.push(rot6d_to_matrix(&emb).expect("smoothed rotation embedding is non-degenerate"));
    }
    Ok(out)
}
