//! 2D Shapes: objects on a 5x5 grid, moved one cell at a time.

use rand::seq::index::sample;
use rand::Rng;

use super::frame::{Frame, FRAME_SIDE};
use crate::error::{Error, Result};

pub const GRID_SIZE: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Circle,
    Triangle,
    Square,
}

impl ShapeKind {
    pub fn code(self) -> u8 {
        match self {
            ShapeKind::Circle => 0,
            ShapeKind::Triangle => 1,
            ShapeKind::Square => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ShapeKind::Circle),
            1 => Some(ShapeKind::Triangle),
            2 => Some(ShapeKind::Square),
            _ => None,
        }
    }
}

/// Fixed object colors; index `i` of [`PALETTE_SPECS`] uses `COLORS[i]`.
pub const COLORS: [[u8; 3]; 5] = [
    [230, 25, 25],
    [30, 60, 235],
    [20, 200, 40],
    [160, 40, 200],
    [235, 220, 20],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ObjectSpec {
    pub shape: ShapeKind,
    pub color: u8,
}

impl ObjectSpec {
    pub fn rgb(&self) -> [u8; 3] {
        COLORS[self.color as usize % COLORS.len()]
    }
}

/// red circle, blue triangle, green square, purple circle, yellow triangle
pub const PALETTE_SPECS: [ObjectSpec; 5] = [
    ObjectSpec { shape: ShapeKind::Circle, color: 0 },
    ObjectSpec { shape: ShapeKind::Triangle, color: 1 },
    ObjectSpec { shape: ShapeKind::Square, color: 2 },
    ObjectSpec { shape: ShapeKind::Circle, color: 3 },
    ObjectSpec { shape: ShapeKind::Triangle, color: 4 },
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Up,
    Right,
    Down,
    Left,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Right, Direction::Down, Direction::Left];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn offset(self) -> (isize, isize) {
        match self {
            Direction::Up => (0, -1),
            Direction::Right => (1, 0),
            Direction::Down => (0, 1),
            Direction::Left => (-1, 0),
        }
    }

    pub fn one_hot(self) -> [f32; 4] {
        let mut v = [0.0; 4];
        v[self.index()] = 1.0;
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridAction {
    pub object: usize,
    pub direction: Direction,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GridState {
    /// `(col, row)` of each object.
    pub positions: Vec<(usize, usize)>,
    pub specs: Vec<ObjectSpec>,
    pub grid_size: usize,
}

impl GridState {
    pub fn num_objects(&self) -> usize {
        self.positions.len()
    }

    pub fn is_valid(&self) -> bool {
        let g = self.grid_size;
        let in_bounds = self.positions.iter().all(|&(c, r)| c < g && r < g);
        let mut cells: Vec<_> = self.positions.clone();
        cells.sort_unstable();
        cells.dedup();
        in_bounds && cells.len() == self.positions.len() && self.specs.len() == self.positions.len()
    }

    fn occupied(&self, cell: (usize, usize)) -> bool {
        self.positions.contains(&cell)
    }

    /// Destination of a move, or `None` when the move is blocked.
    pub fn destination(&self, action: GridAction) -> Option<(usize, usize)> {
        let (c, r) = *self.positions.get(action.object)?;
        let (dc, dr) = action.direction.offset();
        let nc = c as isize + dc;
        let nr = r as isize + dr;
        let g = self.grid_size as isize;
        if nc < 0 || nr < 0 || nc >= g || nr >= g {
            return None;
        }
        let dest = (nc as usize, nr as usize);
        (!self.occupied(dest)).then_some(dest)
    }
}

/// Random non-overlapping placement of the first `num_objects` palette objects.
pub fn grid_init<R: Rng>(num_objects: usize, grid_size: usize, rng: &mut R) -> Result<GridState> {
    if num_objects > grid_size * grid_size {
        return Err(Error::Capacity(format!(
            "{num_objects} objects on a {grid_size}x{grid_size} grid"
        )));
    }
    let cells = sample(rng, grid_size * grid_size, num_objects);
    let positions = cells.iter().map(|i| (i % grid_size, i / grid_size)).collect();
    let specs = (0..num_objects).map(|i| PALETTE_SPECS[i % PALETTE_SPECS.len()]).collect();
    Ok(GridState {
        positions,
        specs,
        grid_size,
    })
}

/// Moves the target object one cell unless the destination is off-grid or occupied.
pub fn grid_step(state: &GridState, action: GridAction) -> GridState {
    let mut next = state.clone();
    if let Some(dest) = state.destination(action) {
        next.positions[action.object] = dest;
    }
    next
}

/// Draws each object inside its cell on a black background.
pub fn grid_render(state: &GridState) -> Frame {
    let mut frame = Frame::black();
    let cell = FRAME_SIDE / state.grid_size;
    for (&(col, row), spec) in state.positions.iter().zip(&state.specs) {
        let rgb = spec.rgb();
        for dy in 0..cell {
            for dx in 0..cell {
                if covers(spec.shape, dx, dy, cell) {
                    frame.set(col * cell + dx, row * cell + dy, rgb);
                }
            }
        }
    }
    frame
}

/// Whether pixel `(dx, dy)` of a `cell`-sized square belongs to the shape.
fn covers(shape: ShapeKind, dx: usize, dy: usize, cell: usize) -> bool {
    let n = cell as f64;
    let x = dx as f64 + 0.5;
    let y = dy as f64 + 0.5;
    match shape {
        ShapeKind::Square => dx >= 1 && dy >= 1 && dx + 1 < cell && dy + 1 < cell,
        ShapeKind::Circle => {
            let c = n / 2.0;
            let r = n / 2.0 - 0.5;
            (x - c).powi(2) + (y - c).powi(2) <= r * r
        }
        ShapeKind::Triangle => {
            // apex at the top center, base along the bottom row
            let top = 0.5;
            let bottom = n - 0.5;
            if y < top || y > bottom {
                return false;
            }
            let half = (y - top) / (bottom - top) * (n / 2.0 - 0.5);
            (x - n / 2.0).abs() <= half + 0.5
        }
    }
}
