//! Sinusoidal position encodings.
//!
//! [`PosEnc2D`] generalises the sinusoidal scheme to a `T x H x W` grid of
//! electrodes: the horizontal position `x` (width axis) selects a sine or cosine
//! factor by its parity with frequency index `floor(x / 2)` over `W`, and the
//! vertical position `y` (height axis) does the same over `H`:
//!
//! | x parity | y parity | value                                  |
//! |----------|----------|----------------------------------------|
//! | even     | even     | `sin(t / 10000^(2i/W)) * cos(t / 10000^(2j/H))` |
//! | odd      | even     | `cos(..) * cos(..)`                    |
//! | odd      | odd      | `cos(..) * sin(..)`                    |
//! | even     | odd      | `sin(..) * sin(..)`                    |
//!
//! The table is indexed `[t, y, x]`, matching a time-major `T x H x W` signal.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

const BASE: f64 = 10000.0;

/// Which position encoding the EEG branch receives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum PosEncMode {
    /// Grid-aware encoding added before spatial flattening.
    #[default]
    #[serde(rename = "2d")]
    TwoD,
    /// Classic sequence encoding added after the input projection.
    #[serde(rename = "1d")]
    OneD,
    /// No position information at all.
    #[serde(rename = "none")]
    None,
}

impl std::fmt::Display for PosEncMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::TwoD => "2d",
            Self::OneD => "1d",
            Self::None => "none",
        })
    }
}

impl std::str::FromStr for PosEncMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2d" => Ok(Self::TwoD),
            "1d" => Ok(Self::OneD),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown position encoding `{other}`"))),
        }
    }
}

/// Anything that carries a fixed additive encoding table.
pub trait Encoding {
    fn table(&self) -> &Tensor;
}

/// Spatial-temporal table of shape `T x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosEnc2D {
    pub timestamps: usize,
    pub height: usize,
    pub width: usize,
    table: Tensor,
}

/// Sequence table of shape `T x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosEnc1D {
    pub timestamps: usize,
    pub dim: usize,
    table: Tensor,
}

impl Encoding for PosEnc2D {
    fn table(&self) -> &Tensor {
        &self.table
    }
}

impl Encoding for PosEnc1D {
    fn table(&self) -> &Tensor {
        &self.table
    }
}

#[inline]
fn angle(t: usize, k: usize, extent: usize) -> f64 {
    t as f64 / BASE.powf(2.0 * k as f64 / extent as f64)
}

/// Value of the 2-D encoding at timestamp `t`, column `x`, row `y`.
pub fn posenc_2d_entry(t: usize, x: usize, y: usize, height: usize, width: usize) -> f64 {
    let ax = angle(t, x / 2, width);
    let ay = angle(t, y / 2, height);
    let fx = if x.is_multiple_of(2) { ax.sin() } else { ax.cos() };
    let fy = if y.is_multiple_of(2) { ay.cos() } else { ay.sin() };
    fx * fy
}

pub fn posenc_2d(timestamps: usize, height: usize, width: usize) -> Result<PosEnc2D> {
    if timestamps == 0 || height == 0 || width == 0 {
        return Err(contract(format!(
            "2-D position encoding needs positive extents, got T={timestamps} H={height} W={width}"
        )));
    }
    let mut data = Vec::with_capacity(timestamps * height * width);
    for t in 0..timestamps {
        for y in 0..height {
            for x in 0..width {
                data.push(posenc_2d_entry(t, x, y, height, width));
            }
        }
    }
    Ok(PosEnc2D {
        timestamps,
        height,
        width,
        table: Tensor::new([timestamps, height, width], data)?,
    })
}

pub fn posenc_1d(timestamps: usize, dim: usize) -> Result<PosEnc1D> {
    if timestamps == 0 || dim == 0 || !dim.is_multiple_of(2) {
        return Err(contract(format!(
            "1-D position encoding needs T >= 1 and an even positive width, got T={timestamps} d={dim}"
        )));
    }
    let mut data = Vec::with_capacity(timestamps * dim);
    for t in 0..timestamps {
        for c in 0..dim {
            let a = angle(t, c / 2, dim);
            data.push(if c % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    Ok(PosEnc1D {
        timestamps,
        dim,
        table: Tensor::new([timestamps, dim], data)?,
    })
}

/// Adds the encoding table to `x`; leading batch axes of `x` broadcast.
pub fn apply_posenc(x: &Tensor, enc: &impl Encoding) -> Result<Tensor> {
    let table = enc.table();
    if !x.shape().ends_with(table.shape()) {
        return Err(Error::Shape {
            op: "apply_posenc",
            lhs: x.shape().to_vec(),
            rhs: table.shape().to_vec(),
        });
    }
    let t = table.data();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v + t[i % t.len()])
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spot_values() {
        let p = posenc_2d(128, 9, 9).unwrap();
        assert_eq!(p.table().at(&[0, 0, 0]), 0.0);
        // (t=0, x=1, y=0) lives at [t, y, x]
        assert_eq!(p.table().at(&[0, 0, 1]), 1.0);
        assert_abs_diff_eq!(p.table().at(&[1, 0, 0]), 1f64.sin() * 1f64.cos(), epsilon = 1e-15);
        assert_abs_diff_eq!(p.table().at(&[1, 0, 0]), 0.45465, epsilon = 1e-5);
    }

    #[test]
    fn parity_cases_follow_the_table() {
        let (h, w) = (5, 7);
        let (t, x, y) = (3usize, 5usize, 3usize);
        let ax = t as f64 / 10000f64.powf(2.0 * 2.0 / w as f64);
        let ay = t as f64 / 10000f64.powf(2.0 * 1.0 / h as f64);
        assert_abs_diff_eq!(posenc_2d_entry(t, x, y, h, w), ax.cos() * ay.sin(), epsilon = 1e-15);
        assert_abs_diff_eq!(posenc_2d_entry(t, x - 1, y, h, w), ax.sin() * ay.sin(), epsilon = 1e-15);
        assert_abs_diff_eq!(posenc_2d_entry(t, x, y - 1, h, w), ax.cos() * ay.cos(), epsilon = 1e-15);
        assert_abs_diff_eq!(posenc_2d_entry(t, x - 1, y - 1, h, w), ax.sin() * ay.cos(), epsilon = 1e-15);
    }

    #[test]
    fn t_zero_plane_pattern() {
        let p = posenc_2d(4, 9, 9).unwrap();
        for y in 0..9 {
            for x in 0..9 {
                let want = if x % 2 == 1 && y % 2 == 0 { 1.0 } else { 0.0 };
                assert_eq!(p.table().at(&[0, y, x]), want, "x={x} y={y}");
            }
        }
    }

    #[test]
    fn bounded_and_deterministic() {
        let a = posenc_2d(128, 9, 9).unwrap();
        assert!(a.table().data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(a, posenc_2d(128, 9, 9).unwrap());
        let b = posenc_1d(64, 32).unwrap();
        assert!(b.table().data().iter().all(|v| v.abs() <= 1.0));
    }

    /// Brute-force search for grid cells sharing an identical time series.
    pub(crate) fn coinciding_cells(p: &PosEnc2D) -> Vec<((usize, usize), (usize, usize))> {
        let (h, w) = (p.height, p.width);
        let cell = |x: usize, y: usize| -> Vec<u64> {
            (0..p.timestamps).map(|t| p.table().at(&[t, y, x]).to_bits()).collect()
        };
        let cells: Vec<_> = (0..h * w).map(|c| ((c % w, c / w), cell(c % w, c / w))).collect();
        let mut out = Vec::new();
        for a in 0..cells.len() {
            for b in a + 1..cells.len() {
                if cells[a].1 == cells[b].1 {
                    out.push((cells[a].0, cells[b].0));
                }
            }
        }
        out
    }

    /// Pairs whose factor multisets agree symbolically: each cell is a product
    /// of one sin/cos factor per axis, and a product does not remember which
    /// axis a factor came from.
    fn symbolic_collisions(h: usize, w: usize) -> Vec<((usize, usize), (usize, usize))> {
        fn gcd(a: usize, b: usize) -> usize {
            if b == 0 { a } else { gcd(b, a % b) }
        }
        let factor = |sine: bool, k: usize, extent: usize| {
            let g = gcd(k, extent).max(1);
            if k == 0 { (sine, 0, 1) } else { (sine, k / g, extent / g) }
        };
        let key = |x: usize, y: usize| {
            let mut f = [factor(x.is_multiple_of(2), x / 2, w), factor(y % 2 == 1, y / 2, h)];
            f.sort();
            f
        };
        let cells: Vec<_> = (0..h * w).map(|c| (c % w, c / w)).collect();
        let mut out = Vec::new();
        for a in 0..cells.len() {
            for b in a + 1..cells.len() {
                if key(cells[a].0, cells[a].1) == key(cells[b].0, cells[b].1) {
                    out.push((cells[a], cells[b]));
                }
            }
        }
        out
    }

    #[test]
    fn coinciding_cells_are_exactly_the_symbolic_ones() {
        let p = posenc_2d(128, 9, 9).unwrap();
        let found = coinciding_cells(&p);
        assert_eq!(found, symbolic_collisions(9, 9));
        assert!(found.contains(&((0, 0), (1, 1))));
        assert_eq!(found.len(), 28);
        for (h, w) in [(9, 8), (7, 9), (4, 4)] {
            assert_eq!(coinciding_cells(&posenc_2d(64, h, w).unwrap()), symbolic_collisions(h, w), "{h}x{w}");
        }
    }

    #[test]
    fn one_d_examples() {
        let p = posenc_1d(4, 6).unwrap();
        let row0: Vec<f64> = (0..6).map(|c| p.table().at(&[0, c])).collect();
        assert_eq!(row0, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_abs_diff_eq!(p.table().at(&[1, 0]), 0.84147, epsilon = 1e-5);
        let wide = posenc_1d(2, 512).unwrap();
        assert_abs_diff_eq!(wide.table().at(&[1, 511]), 1.0, epsilon = 1e-6);
        assert!(posenc_1d(4, 5).is_err());
        assert!(posenc_2d(0, 9, 9).is_err());
    }

    #[test]
    fn apply_is_additive() {
        let p = posenc_2d(6, 3, 3).unwrap();
        let zero = Tensor::zeros([6, 3, 3]).unwrap();
        assert_eq!(&apply_posenc(&zero, &p).unwrap(), p.table());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::new([6, 3, 3], (0..54).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let y = apply_posenc(&x, &p).unwrap();
        let back = y.zip_map(p.table(), |a, b| a - b).unwrap();
        // exact up to the rounding of one addition and one subtraction
        assert!(back.max_abs_diff(&x) <= 4.0 * f64::EPSILON);

        struct Zeros(Tensor);
        impl Encoding for Zeros {
            fn table(&self) -> &Tensor {
                &self.0
            }
        }
        assert_eq!(apply_posenc(&x, &Zeros(Tensor::zeros([6, 3, 3]).unwrap())).unwrap(), x);
        assert!(apply_posenc(&x, &posenc_1d(6, 4).unwrap()).is_err());
    }
}
