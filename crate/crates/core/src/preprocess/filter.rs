//! Butterworth IIR design (bilinear transform with prewarping) and zero-phase
//! second-order-section filtering.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{contract, Result};

pub const BUTTER_ORDER: usize = 4;

/// One biquad: `b0 b1 b2 / 1 a1 a2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    /// Complex gain at normalised angular frequency `omega` (radians/sample).
    pub fn response(&self, omega: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -omega);
        let z2 = z1 * z1;
        (self.b[0] + self.b[1] * z1 + self.b[2] * z2) / (1.0 + self.a[0] * z1 + self.a[1] * z2)
    }
}

/// Cascade of second-order sections.
#[derive(Clone, Debug, PartialEq)]
pub struct Sos {
    pub sections: Vec<Biquad>,
}

fn prewarp(hz: f64, rate: f64) -> f64 {
    2.0 * rate * (PI * hz / rate).tan()
}

fn prototype_poles(order: usize) -> Vec<Complex64> {
    (0..order)
        .map(|k| Complex64::from_polar(1.0, PI * (2 * k + order + 1) as f64 / (2 * order) as f64))
        .collect()
}

fn bilinear(s: Complex64, rate: f64) -> Complex64 {
    let k = 2.0 * rate;
    (k + s) / (k - s)
}

/// Pairs each pole in the upper half plane with its conjugate.
fn sections_from_poles(poles: &[Complex64], b: [f64; 3]) -> Vec<Biquad> {
    let mut upper: Vec<Complex64> = poles.iter().copied().filter(|p| p.im > 0.0).collect();
    upper.sort_by(|x, y| x.norm().total_cmp(&y.norm()));
    upper
        .into_iter()
        .map(|p| Biquad {
            b,
            a: [-2.0 * p.re, p.norm_sqr()],
        })
        .collect()
}

impl Sos {
    /// Butterworth bandpass of prototype order `order` (2·order poles).
    pub fn butter_bandpass(order: usize, low_hz: f64, high_hz: f64, rate: f64) -> Result<Self> {
        if !(order > 0 && order.is_multiple_of(2) && 0.0 < low_hz && low_hz < high_hz && high_hz < rate / 2.0) {
            return Err(contract(format!(
                "bandpass needs an even order and 0 < low < high < rate/2, got order {order}, {low_hz}..{high_hz} Hz at {rate} Hz"
            )));
        }
        let (w1, w2) = (prewarp(low_hz, rate), prewarp(high_hz, rate));
        let (bw, w0sq) = (w2 - w1, w1 * w2);
        let mut poles = Vec::with_capacity(2 * order);
        for p in prototype_poles(order) {
            let pb = p * bw;
            let disc = (pb * pb - 4.0 * w0sq).sqrt();
            poles.push(bilinear((pb + disc) / 2.0, rate));
            poles.push(bilinear((pb - disc) / 2.0, rate));
        }
        let mut sos = Self {
            sections: sections_from_poles(&poles, [1.0, 0.0, -1.0]),
        };
        // unit gain at the centre frequency
        let centre = 2.0 * (w0sq.sqrt() / (2.0 * rate)).atan();
        sos.normalise_at(centre);
        Ok(sos)
    }

    /// Butterworth lowpass of even order.
    pub fn butter_lowpass(order: usize, cutoff_hz: f64, rate: f64) -> Result<Self> {
        if !(order > 0 && order.is_multiple_of(2) && 0.0 < cutoff_hz && cutoff_hz < rate / 2.0) {
            return Err(contract(format!(
                "lowpass needs an even order and 0 < cutoff < rate/2, got order {order}, {cutoff_hz} Hz at {rate} Hz"
            )));
        }
        let wc = prewarp(cutoff_hz, rate);
        let poles: Vec<_> = prototype_poles(order).into_iter().map(|p| bilinear(p * wc, rate)).collect();
        let mut sos = Self {
            sections: sections_from_poles(&poles, [1.0, 2.0, 1.0]),
        };
        sos.normalise_at(0.0);
        Ok(sos)
    }

    /// Scales each section to unit magnitude at `omega`.
    fn normalise_at(&mut self, omega: f64) {
        for s in &mut self.sections {
            let g = s.response(omega).norm();
            s.b.iter_mut().for_each(|b| *b /= g);
        }
    }

    pub fn response(&self, omega: f64) -> Complex64 {
        self.sections.iter().map(|s| s.response(omega)).product()
    }

    /// Magnitude of a single pass at `hz`.
    pub fn magnitude(&self, hz: f64, rate: f64) -> f64 {
        self.response(2.0 * PI * hz / rate).norm()
    }

    /// Steady-state section states for a unit step input.
    pub fn step_state(&self) -> Vec<[f64; 2]> {
        let mut scale = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let g = (s.b[0] + s.b[1] + s.b[2]) / (1.0 + s.a[0] + s.a[1]);
                let z2 = s.b[2] - s.a[1] * g;
                let z1 = s.b[1] - s.a[0] * g + z2;
                let zi = [z1 * scale, z2 * scale];
                scale *= g;
                zi
            })
            .collect()
    }

    /// Single causal pass (transposed direct form II), starting from `state`.
    pub fn filter_with_state(&self, x: &[f64], mut state: Vec<[f64; 2]>) -> Vec<f64> {
        let mut y = x.to_vec();
        for (s, z) in self.sections.iter().zip(state.iter_mut()) {
            for v in y.iter_mut() {
                let input = *v;
                let out = s.b[0] * input + z[0];
                z[0] = s.b[1] * input - s.a[0] * out + z[1];
                z[1] = s.b[2] * input - s.a[1] * out;
                *v = out;
            }
        }
        y
    }

    /// Single causal pass from rest.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        self.filter_with_state(x, vec![[0.0; 2]; self.sections.len()])
    }

    /// Odd-extension length used by [`Sos::filtfilt`].
    pub fn pad_len(&self) -> usize {
        let n = self.sections.len();
        let trailing_b = self.sections.iter().filter(|s| s.b[2] == 0.0).count();
        let trailing_a = self.sections.iter().filter(|s| s.a[1] == 0.0).count();
        3 * (2 * n + 1 - trailing_b.min(trailing_a))
    }

    /// Forward-backward filtering with odd padding and steady-state initial
    /// conditions; zero phase, squared magnitude.
    pub fn filtfilt(&self, x: &[f64]) -> Result<Vec<f64>> {
        let pad = self.pad_len();
        if x.len() <= pad {
            return Err(contract(format!(
                "zero-phase filtering needs more than {pad} samples, got {}",
                x.len()
            )));
        }
        let n = x.len();
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        let zi = self.step_state();
        let scaled = |v: f64| zi.iter().map(|z| [z[0] * v, z[1] * v]).collect::<Vec<_>>();
        let mut y = self.filter_with_state(&ext, scaled(ext[0]));
        y.reverse();
        let mut y = self.filter_with_state(&y, scaled(y[0]));
        y.reverse();
        Ok(y[pad..pad + n].to_vec())
    }
}

/// Zero-phase Butterworth bandpass of one channel.
pub fn bandpass(x: &[f64], low_hz: f64, high_hz: f64, rate: f64) -> Result<Vec<f64>> {
    Sos::butter_bandpass(BUTTER_ORDER, low_hz, high_hz, rate)?.filtfilt(x)
}
