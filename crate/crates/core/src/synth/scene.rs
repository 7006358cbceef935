use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

use super::vocab::{COLORS, SHAPES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    None,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Empty => "empty",
            s => SHAPES[s as usize],
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.word() == w)
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::None => "none",
            c => COLORS[c as usize],
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.word() == w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub shape: Shape,
    pub color: Color,
}

impl Cell {
    pub const EMPTY: Cell = Cell { shape: Shape::Empty, color: Color::None };

    pub fn is_empty(&self) -> bool {
        self.shape == Shape::Empty
    }
}

/// Width of a per-cell feature row: one-hot shape, one-hot color, row, col.
pub const FEATURE_DIM: usize = Shape::ALL.len() + Color::ALL.len() + 2;

/// A square grid of cells, the vision modality of the synthetic world.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Scene {
    cells: Vec<Vec<Cell>>,
}

impl Scene {
    pub fn from_cells(cells: Vec<Vec<Cell>>) -> Option<Self> {
        let g = cells.len();
        let square = g >= 2 && cells.iter().all(|r| r.len() == g);
        let consistent = cells.iter().flatten().all(|c| c.is_empty() == (c.color == Color::None));
        let occupied = cells.iter().flatten().any(|c| !c.is_empty());
        (square && consistent && occupied).then_some(Self { cells })
    }

    /// Random scene: every cell is empty with probability ½, otherwise it holds a
    /// uniformly drawn shape and color. All-empty draws are rerolled.
    pub fn generate<R: Rng>(rng: &mut R, grid_size: usize) -> Self {
        assert!(grid_size >= 2, "grid size must be at least 2");
        loop {
            let cells: Vec<Vec<Cell>> = (0..grid_size)
                .map(|_| {
                    (0..grid_size)
                        .map(|_| {
                            if rng.random_bool(0.5) {
                                Cell::EMPTY
                            } else {
                                Cell {
                                    shape: Shape::ALL[rng.random_range(0..Shape::ALL.len())],
                                    color: Color::ALL[rng.random_range(0..Color::ALL.len())],
                                }
                            }
                        })
                        .collect()
                })
                .collect();
            if let Some(scene) = Self::from_cells(cells) {
                return scene;
            }
        }
    }

    pub fn grid_size(&self) -> usize {
        self.cells.len()
    }

    pub fn cell(&self, row: usize, col: usize) -> Cell {
        self.cells[row][col]
    }

    pub fn cells(&self) -> &[Vec<Cell>] {
        &self.cells
    }

    /// Non-empty cells as `(row, col, cell)` in row-major order.
    pub fn objects(&self) -> impl Iterator<Item = (usize, usize, Cell)> + '_ {
        self.cells
            .iter()
            .enumerate()
            .flat_map(|(r, row)| row.iter().enumerate().map(move |(c, &cell)| (r, c, cell)))
            .filter(|(_, _, cell)| !cell.is_empty())
    }

    pub fn count_shape(&self, shape: Shape) -> usize {
        self.objects().filter(|(_, _, c)| c.shape == shape).count()
    }

    pub fn contains(&self, color: Color, shape: Shape) -> bool {
        self.objects().any(|(_, _, c)| c.color == color && c.shape == shape)
    }

    /// `[G² × FEATURE_DIM]` features, one row per cell in row-major order.
    pub fn features(&self) -> Tensor {
        let g = self.grid_size();
        let denom = (g - 1) as f64;
        let mut data = vec![0.0; g * g * FEATURE_DIM];
        for r in 0..g {
            for c in 0..g {
                let row = &mut data[(r * g + c) * FEATURE_DIM..(r * g + c + 1) * FEATURE_DIM];
                let cell = self.cells[r][c];
                if !cell.is_empty() {
                    row[cell.shape as usize] = 1.0;
                    row[Shape::ALL.len() + cell.color as usize] = 1.0;
                }
                row[FEATURE_DIM - 2] = r as f64 / denom;
                row[FEATURE_DIM - 1] = c as f64 / denom;
            }
        }
        Tensor::new(vec![g * g, FEATURE_DIM], data).expect("feature shape is consistent")
    }
}
