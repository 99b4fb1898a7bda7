//! Electrode-to-grid placement and per-frame normalisation.

use std::path::Path;

use crate::error::{io_err, Error, Result};
use crate::tensor::Tensor;

pub const GRID: usize = 9;
pub const ZSCORE_MIN_STD: f64 = 1e-12;

const DEAP_MAP: &str = include_str!("../../maps/deap_9x9.csv");
const DREAMER_MAP: &str = include_str!("../../maps/dreamer_9x9.csv");

/// Channel placements on a `height x width` grid; channel `i` of a frame goes
/// to `placements[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelGridMap {
    pub height: usize,
    pub width: usize,
    pub placements: Vec<(String, usize, usize)>,
}

impl ChannelGridMap {
    /// Parses `name,row,col` lines. Blank lines, `#` comments and a
    /// `name,row,col` header are skipped.
    pub fn parse(text: &str, height: usize, width: usize) -> Result<Self> {
        let mut placements = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.eq_ignore_ascii_case("name,row,col") {
                continue;
            }
            let bad = |reason: String| Error::Config(format!("channel map line {}: {reason}", lineno + 1));
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let [name, row, col] = fields[..] else {
                return Err(bad(format!("expected `name,row,col`, got `{line}`")));
            };
            if name.is_empty() {
                return Err(bad("empty channel name".into()));
            }
            let row: usize = row.parse().map_err(|_| bad(format!("bad row `{row}`")))?;
            let col: usize = col.parse().map_err(|_| bad(format!("bad column `{col}`")))?;
            placements.push((name.to_string(), row, col));
        }
        let map = Self {
            height,
            width,
            placements,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, GRID, GRID)
    }

    pub fn deap() -> Self {
        Self::parse(DEAP_MAP, GRID, GRID).expect("shipped DEAP map")
    }

    pub fn dreamer() -> Self {
        Self::parse(DREAMER_MAP, GRID, GRID).expect("shipped Dreamer map")
    }

    pub fn validate(&self) -> Result<()> {
        let mut taken = vec![None::<&str>; self.height * self.width];
        let mut names = std::collections::HashSet::new();
        for (name, r, c) in &self.placements {
            if *r >= self.height || *c >= self.width {
                return Err(Error::Config(format!(
                    "channel {name} placed at ({r}, {c}) outside the {}x{} grid",
                    self.height, self.width
                )));
            }
            if !names.insert(name.as_str()) {
                return Err(Error::Config(format!("channel {name} listed twice")));
            }
            if let Some(other) = taken[r * self.width + c].replace(name) {
                return Err(Error::Config(format!(
                    "channels {other} and {name} both placed at ({r}, {c})"
                )));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.placements.len()
    }
}

/// Scatters one frame of channel values into the grid; unplaced cells are zero.
pub fn map_to_grid(frame: &[f64], map: &ChannelGridMap) -> Result<Tensor> {
    map.validate()?;
    if frame.len() != map.channels() {
        return Err(Error::Shape {
            op: "map_to_grid",
            lhs: vec![frame.len()],
            rhs: vec![map.channels()],
        });
    }
    let mut grid = Tensor::zeros([map.height, map.width])?;
    for (v, (_, r, c)) in frame.iter().zip(&map.placements) {
        grid.data_mut()[r * map.width + c] = *v;
    }
    Ok(grid)
}

/// Standardises all cells to zero mean and unit (population) deviation; a
/// frame with deviation below `1e-12` becomes all zeros.
pub fn zscore_frame(grid: &Tensor) -> Tensor {
    let mut out = grid.clone();
    zscore_in_place(out.data_mut());
    out
}

pub(crate) fn zscore_in_place(cells: &mut [f64]) {
    let n = cells.len() as f64;
    let mean = cells.iter().sum::<f64>() / n;
    let var = cells.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < ZSCORE_MIN_STD {
        cells.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    cells.iter_mut().for_each(|v| *v = (*v - mean) / std);
    // second pass removes the rounding residue of the first
    let m2 = cells.iter().sum::<f64>() / n;
    cells.iter_mut().for_each(|v| *v -= m2);
}
