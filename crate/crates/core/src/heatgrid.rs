//! Decaying occupancy heat field and hotspot detection.
//!
//! Each tick every cell decays by `decay` and then receives `deposit` for
//! each entity standing in it. Hotspots are local maxima above a threshold
//! relative to the global maximum.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Position, RoomBounds, TrackedEntity};


/// Grids with at least this many cells are updated with rayon when the
/// `parallel` feature is on.
pub const PARALLEL_MIN_CELLS: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeatGridError {
    #[error("position ({x}, {y}) outside grid bounds")]
    OutOfBounds { x: f64, y: f64 },
    #[error("invalid grid parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeatGridParams {
    pub cols: usize,
    pub rows: usize,
    pub decay: f64,
    pub deposit: f64,
    pub theta_rel: f64,
    pub h_min: f64,
}

impl Default for HeatGridParams {
    fn default() -> Self {
        Self {
            cols: 32,
            rows: 32,
            decay: 0.95,
            deposit: 1.0,
            theta_rel: 0.6,
            h_min: 0.5,
        }
    }
}

impl HeatGridParams {
    pub fn validate(&self) -> Result<(), HeatGridError> {
        let bad = |m: &str| Err(HeatGridError::InvalidParams(m.to_string()));
        if self.cols == 0 || self.rows == 0 {
            return bad("cols and rows must be positive");
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return bad("decay must lie in (0,1)");
        }
        if !(self.deposit > 0.0 && self.deposit.is_finite()) {
            return bad("deposit must be positive");
        }
        if !(self.theta_rel > 0.0 && self.theta_rel <= 1.0) {
            return bad("theta_rel must lie in (0,1]");
        }
        if !(self.h_min >= 0.0 && self.h_min.is_finite()) {
            return bad("h_min must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hotspot {
    pub col: usize,
    pub row: usize,
    pub heat: f64,
    pub world_center: Position,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatGrid {
    cols: usize,
    rows: usize,
    bounds: RoomBounds,
    decay: f64,
    deposit: f64,
    /// Row-major, `rows * cols` values.
    cells: Vec<f64>,
}

impl HeatGrid {
    pub fn new(bounds: RoomBounds, params: &HeatGridParams) -> Result<Self, HeatGridError> {
        params.validate()?;
        if !(bounds.width > 0.0 && bounds.height > 0.0) {
            return Err(HeatGridError::InvalidParams("room bounds must be non-empty".into()));
        }
        Ok(Self {
            cols: params.cols,
            rows: params.rows,
            bounds,
            decay: params.decay,
            deposit: params.deposit,
            cells: vec![0.0; params.cols * params.rows],
        })
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn bounds(&self) -> RoomBounds {
        self.bounds
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn deposit(&self) -> f64 {
        self.deposit
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.cells[row * self.cols + col]
    }

    /// Overwrites cell contents; used by tests and snapshot restore.
    pub fn set(&mut self, col: usize, row: usize, value: f64) {
        assert!(value >= 0.0 && value.is_finite());
        self.cells[row * self.cols + col] = value;
    }

    /// Floor indexing; points on the far edges fall into the last cell.
    pub fn cell_of(&self, p: Position) -> Result<(usize, usize), HeatGridError> {
        if !self.bounds.contains(p) {
            return Err(HeatGridError::OutOfBounds { x: p.x, y: p.y });
        }
        let col = ((p.x / self.bounds.width * self.cols as f64).floor() as usize).min(self.cols - 1);
        let row = ((p.y / self.bounds.height * self.rows as f64).floor() as usize).min(self.rows - 1);
        Ok((col, row))
    }

    pub fn cell_center(&self, col: usize, row: usize) -> Position {
        let cw = self.bounds.width / self.cols as f64;
        let ch = self.bounds.height / self.rows as f64;
        Position {
            x: (col as f64 + 0.5) * cw,
            y: (row as f64 + 0.5) * ch,
        }
    }

    fn occupancy(&self, entities: &[TrackedEntity]) -> Vec<u32> {
        let mut counts = vec![0u32; self.cells.len()];
        for e in entities {
            match self.cell_of(e.position) {
                Ok((c, r)) => counts[r * self.cols + c] += 1,
                Err(_) => log::warn!("entity {} outside heat grid bounds, skipped", e.id),
            }
        }
        counts
    }

    /// Decay then deposit; returns the next grid and leaves `self` unchanged.
    pub fn tick(&self, entities: &[TrackedEntity]) -> HeatGrid {
        #[cfg(feature = "parallel")]
        {
            if self.cells.len() >= PARALLEL_MIN_CELLS {
                return self.tick_parallel(entities);
            }
        }
        self.tick_sequential(entities)
    }

    pub fn tick_sequential(&self, entities: &[TrackedEntity]) -> HeatGrid {
        let counts = self.occupancy(entities);
        let mut next = self.clone();
        for (cell, &n) in next.cells.iter_mut().zip(&counts) {
            *cell = update_cell(*cell, n, self.decay, self.deposit);
        }
        next
    }

    #[cfg(feature = "parallel")]
    pub fn tick_parallel(&self, entities: &[TrackedEntity]) -> HeatGrid {
        use rayon::prelude::*;
        let counts = self.occupancy(entities);
        let mut next = self.clone();
        let (decay, deposit) = (self.decay, self.deposit);
        next.cells
            .par_iter_mut()
            .zip(counts.par_iter())
            .for_each(|(cell, &n)| *cell = update_cell(*cell, n, decay, deposit));
        next
    }

    pub fn global_max(&self) -> f64 {
        self.cells.iter().copied().fold(0.0, f64::max)
    }

    /// Each value divided by the global maximum; an all-zero grid stays zero.
    pub fn normalized(&self) -> Vec<f64> {
        let max = self.global_max();
        if max <= 0.0 {
            return vec![0.0; self.cells.len()];
        }
        self.cells.iter().map(|v| v / max).collect()
    }

    fn is_peak(&self, col: usize, row: usize) -> bool {
        let v = self.get(col, row);
        let mut above_one = false;
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let (c, r) = (col as i64 + dc, row as i64 + dr);
                if c < 0 || r < 0 || c >= self.cols as i64 || r >= self.rows as i64 {
                    continue;
                }
                let n = self.get(c as usize, r as usize);
                if n > v {
                    return false;
                }
                if v > n {
                    above_one = true;
                }
            }
        }
        above_one
    }

    /// Local maxima over the 8-neighbourhood at or above
    /// `max(theta_rel * global_max, h_min)`, strongest first.
    pub fn hotspots(&self, theta_rel: f64, h_min: f64) -> Vec<Hotspot> {
        let max = self.global_max();
        if max <= 0.0 {
            return Vec::new();
        }
        let threshold = (theta_rel * max).max(h_min);
        let uniform = self.cells.iter().all(|&v| v == max);

        let candidates: Vec<(usize, usize)> = if uniform {
            vec![(0, 0)]
        } else {
            self.scan_peaks()
        };

        let mut out: Vec<Hotspot> = candidates
            .into_iter()
            .filter(|&(c, r)| self.get(c, r) >= threshold)
            .map(|(col, row)| Hotspot {
                col,
                row,
                heat: self.get(col, row),
                world_center: self.cell_center(col, row),
            })
            .collect();
        out.sort_by(|a, b| {
            b.heat
                .total_cmp(&a.heat)
                .then(a.col.cmp(&b.col))
                .then(a.row.cmp(&b.row))
        });
        out
    }

    fn scan_peaks(&self) -> Vec<(usize, usize)> {
        let index = |i: usize| (i % self.cols, i / self.cols);
        #[cfg(feature = "parallel")]
        {
            if self.cells.len() >= PARALLEL_MIN_CELLS {
                use rayon::prelude::*;
                return (0..self.cells.len())
                    .into_par_iter()
                    .map(index)
                    .filter(|&(c, r)| self.get(c, r) > 0.0 && self.is_peak(c, r))
                    .collect();
            }
        }
        (0..self.cells.len())
            .map(index)
            .filter(|&(c, r)| self.get(c, r) > 0.0 && self.is_peak(c, r))
            .collect()
    }

    pub fn to_wire(&self, hotspots: &[Hotspot]) -> HeatGridWire {
        HeatGridWire {
            cols: self.cols,
            rows: self.rows,
            bounds: [0.0, 0.0, self.bounds.width, self.bounds.height],
            cells: self.cells.clone(),
            hotspots: hotspots
                .iter()
                .map(|h| HotspotWire {
                    col: h.col,
                    row: h.row,
                    heat: h.heat,
                })
                .collect(),
        }
    }
}

#[inline]
fn update_cell(value: f64, occupants: u32, decay: f64, deposit: f64) -> f64 {
    decay * value + deposit * occupants as f64
}

/// Console serialization of a heat grid snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatGridWire {
    pub cols: usize,
    pub rows: usize,
    pub bounds: [f64; 4],
    pub cells: Vec<f64>,
    pub hotspots: Vec<HotspotWire>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HotspotWire {
    pub col: usize,
    pub row: usize,
    pub heat: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EntityKind;

    fn grid(cols: usize, rows: usize, w: f64, h: f64, decay: f64, deposit: f64) -> HeatGrid {
        HeatGrid::new(
            RoomBounds { width: w, height: h },
            &HeatGridParams {
                cols,
                rows,
                decay,
                deposit,
                ..Default::default()
            },
        )
        .unwrap()
    }

    fn at(id: &str, x: f64, y: f64) -> TrackedEntity {
        TrackedEntity {
            id: id.into(),
            kind: EntityKind::Audience,
            position: Position { x, y },
            last_seen: 0,
            label: None,
        }
    }

    #[test]
    fn cell_of_examples() {
        let g = grid(10, 10, 10.0, 10.0, 0.5, 1.0);
        assert_eq!(g.cell_of(Position { x: 3.7, y: 8.2 }).unwrap(), (3, 8));
        assert_eq!(g.cell_of(Position { x: 10.0, y: 10.0 }).unwrap(), (9, 9));
        assert_eq!(g.cell_of(Position { x: 9.999, y: 0.0 }).unwrap(), (9, 0));
        assert!(g.cell_of(Position { x: 10.01, y: 0.0 }).is_err());
        assert!(g.cell_of(Position { x: -0.01, y: 0.0 }).is_err());
    }

    #[test]
    fn zero_grid_is_fixed_point() {
        let mut g = grid(4, 4, 4.0, 4.0, 0.9, 1.0);
        for _ in 0..50 {
            g = g.tick(&[]);
        }
        assert!(g.cells().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn geometric_series_and_steady_state() {
        let e = [at("a", 0.5, 0.5)];
        let g0 = grid(4, 4, 4.0, 4.0, 0.5, 1.0);
        let g1 = g0.tick(&e);
        let g2 = g1.tick(&e);
        let g3 = g2.tick(&e);
        assert_eq!(g1.get(0, 0), 1.0);
        assert_eq!(g2.get(0, 0), 1.5);
        assert_eq!(g3.get(0, 0), 1.75);
        let mut g = g0;
        for _ in 0..40 {
            g = g.tick(&e);
        }
        assert!((g.get(0, 0) - 2.0).abs() < 1e-6);
        // input is not modified
        assert_eq!(g1.get(0, 0), 1.0);
    }

    #[test]
    fn idle_grid_decays_to_exact_zero() {
        let mut g = grid(2, 2, 2.0, 2.0, 0.5, 1.0).tick(&[at("a", 0.1, 0.1)]);
        let mut prev = g.get(0, 0);
        for _ in 0..1200 {
            g = g.tick(&[]);
            let v = g.get(0, 0);
            if prev > 0.0 {
                assert!(v < prev);
            }
            prev = v;
        }
        assert_eq!(g.get(0, 0), 0.0);
    }

    #[test]
    fn hotspot_examples() {
        let g = grid(10, 10, 10.0, 10.0, 0.95, 1.0);
        assert!(g.hotspots(0.6, 0.5).is_empty());

        let single = [at("a", 2.5, 3.5)];
        let mut g1 = g.clone();
        for _ in 0..5 {
            g1 = g1.tick(&single);
        }
        let hs = g1.hotspots(0.6, 0.5);
        assert_eq!(hs.len(), 1);
        assert_eq!((hs[0].col, hs[0].row), (2, 3));
        assert_eq!(hs[0].world_center, Position { x: 2.5, y: 3.5 });

        let pair = [at("a", 1.5, 1.5), at("b", 6.5, 1.5)];
        let mut g2 = g;
        for _ in 0..5 {
            g2 = g2.tick(&pair);
        }
        let hs = g2.hotspots(0.5, 0.1);
        assert_eq!(hs.len(), 2);
        assert_eq!((hs[0].col, hs[0].row), (1, 1));
        assert_eq!((hs[1].col, hs[1].row), (6, 1));
    }

    #[test]
    fn uniform_positive_grid_reports_origin() {
        let mut g = grid(3, 3, 3.0, 3.0, 0.5, 1.0);
        for r in 0..3 {
            for c in 0..3 {
                g.set(c, r, 2.0);
            }
        }
        let hs = g.hotspots(0.6, 0.5);
        assert_eq!(hs.len(), 1);
        assert_eq!((hs[0].col, hs[0].row), (0, 0));
    }

    #[test]
    fn normalized_examples() {
        let mut g = grid(3, 1, 3.0, 1.0, 0.5, 1.0);
        assert_eq!(g.normalized(), vec![0.0, 0.0, 0.0]);
        g.set(1, 0, 4.0);
        assert_eq!(g.normalized(), vec![0.0, 1.0, 0.0]);
        g.set(0, 0, 1.0);
        g.set(1, 0, 0.5);
        g.set(2, 0, 0.25);
        assert_eq!(g.normalized(), vec![1.0, 0.5, 0.25]);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_tick_matches_sequential() {
        let mut g = grid(128, 64, 12.8, 6.4, 0.93, 0.7);
        let walkers: Vec<_> = (0..30)
            .map(|i| at(&format!("e{i}"), (i as f64 * 0.41) % 12.8, (i as f64 * 0.23) % 6.4))
            .collect();
        for _ in 0..20 {
            let s = g.tick_sequential(&walkers);
            let p = g.tick_parallel(&walkers);
            assert_eq!(s, p);
            g = s;
        }
    }

    #[test]
    fn wire_shape() {
        let g = grid(2, 1, 2.0, 1.0, 0.5, 1.0).tick(&[at("a", 0.5, 0.5)]);
        let hs = g.hotspots(0.6, 0.5);
        let v = serde_json::to_value(g.to_wire(&hs)).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"cols":2,"rows":1,"bounds":[0.0,0.0,2.0,1.0],"cells":[1.0,0.0],
                "hotspots":[{"col":0,"row":0,"heat":1.0}]})
        );
    }
}
