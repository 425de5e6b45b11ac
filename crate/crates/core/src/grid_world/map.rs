use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

use crate::{Error, Result};

/// Grid coordinate. `x` grows to the right, `y` grows downward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn offset(self, dx: i32, dy: i32) -> Self {
        Self::new(self.x + dx, self.y + dy)
    }

    pub fn manhattan(self, other: Cell) -> u32 {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }

    pub fn euclidean(self, other: Cell) -> f64 {
        let dx = (self.x - other.x) as f64;
        let dy = (self.y - other.y) as f64;
        libm::sqrt(dx * dx + dy * dy)
    }
}

/// The five primitive moves, indexed 0..5 in this order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
    Stay = 4,
}

impl Action {
    pub const ALL: [Action; 5] = [Action::Up, Action::Down, Action::Left, Action::Right, Action::Stay];
    pub const MOVES: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn from_index(index: usize) -> Result<Self> {
        Self::ALL.get(index).copied().ok_or(Error::ActionIndex(index))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn delta(self) -> (i32, i32) {
        match self {
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
            Action::Stay => (0, 0),
        }
    }

    pub fn apply(self, cell: Cell) -> Cell {
        let (dx, dy) = self.delta();
        cell.offset(dx, dy)
    }

    /// The action that moves `from` to `to`, if they are equal or 4-adjacent.
    pub fn between(from: Cell, to: Cell) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.apply(from) == to)
    }
}

/// Triangular density distribution `tri(lo, peak, hi)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triangular {
    pub lo: f64,
    pub peak: f64,
    pub hi: f64,
}

impl Triangular {
    pub fn new(lo: f64, peak: f64, hi: f64) -> Result<Self> {
        if !(0.0 <= lo && lo <= peak && peak <= hi && hi < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "triangular density needs 0 <= lo <= peak <= hi < 1, got ({lo}, {peak}, {hi})"
            )));
        }
        Ok(Self { lo, peak, hi })
    }

    /// Training default: support [0, 0.5] with mode 0.33.
    pub fn training_default() -> Self {
        Self {
            lo: 0.0,
            peak: 0.33,
            hi: 0.5,
        }
    }

    pub fn fixed(density: f64) -> Result<Self> {
        Self::new(density, density, density)
    }

    pub fn mean(&self) -> f64 {
        (self.lo + self.peak + self.hi) / 3.0
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.hi <= self.lo {
            return self.lo;
        }
        rand_distr::Triangular::new(self.lo, self.hi, self.peak)
            .expect("validated bounds")
            .sample(rng)
    }
}

/// Static occupancy grid. `occupancy[y * width + x]` is true for obstacles.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridMap {
    width: usize,
    height: usize,
    occupancy: Vec<bool>,
    seed: u64,
    component: Vec<Cell>,
}

pub const MAX_MAP_RETRIES: usize = 100;

pub const UNREACHABLE: u32 = u32::MAX;

impl GridMap {
    pub fn new(width: usize, height: usize, occupancy: Vec<bool>, seed: u64) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::InvalidMap(format!("map must be at least 2x2, got {width}x{height}")));
        }
        if occupancy.len() != width * height {
            return Err(Error::InvalidMap(format!(
                "occupancy has {} cells, expected {}",
                occupancy.len(),
                width * height
            )));
        }
        let mut map = Self {
            width,
            height,
            occupancy,
            seed,
            component: Vec::new(),
        };
        map.component = map.largest_component();
        Ok(map)
    }

    pub fn empty(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![false; width * height], 0)
    }

    /// Builds a map from rows of `.` (free) and `@` (obstacle). Other
    /// MovingAI obstacle glyphs (`T`, `O`, `W`) are treated as obstacles.
    pub fn from_rows<S: AsRef<str>>(rows: &[S]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.as_ref().chars().count());
        let mut occupancy = Vec::with_capacity(width * height);
        for (y, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.chars().count() != width {
                return Err(Error::InvalidMap(format!("row {y} has length {}, expected {width}", row.chars().count())));
            }
            for ch in row.chars() {
                occupancy.push(match ch {
                    '.' | 'G' | 'S' => false,
                    '@' | 'T' | 'O' | 'W' => true,
                    other => return Err(Error::InvalidMap(format!("unknown map glyph {other:?}"))),
                });
            }
        }
        Self::new(width, height, occupancy, 0)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occupancy
    }

    pub fn cell_count(&self) -> usize {
        self.width * self.height
    }

    /// Cells of the largest 4-connected free region, in row-major order.
    pub fn component(&self) -> &[Cell] {
        &self.component
    }

    pub fn diagonal(&self) -> f64 {
        libm::sqrt((self.width * self.width + self.height * self.height) as f64)
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.x >= 0 && c.y >= 0 && (c.x as usize) < self.width && (c.y as usize) < self.height
    }

    #[inline]
    pub fn index(&self, c: Cell) -> usize {
        c.y as usize * self.width + c.x as usize
    }

    pub fn cell_at(&self, index: usize) -> Cell {
        Cell::new((index % self.width) as i32, (index / self.width) as i32)
    }

    pub fn is_free(&self, c: Cell) -> bool {
        self.in_bounds(c) && !self.occupancy[self.index(c)]
    }

    pub fn obstacle_count(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }

    pub fn obstacle_density(&self) -> f64 {
        self.obstacle_count() as f64 / self.cell_count() as f64
    }

    /// Free 4-neighbours of `c` in action order Up, Down, Left, Right.
    pub fn neighbors(&self, c: Cell) -> impl Iterator<Item = Cell> + '_ {
        Action::MOVES.into_iter().map(move |a| a.apply(c)).filter(move |&n| self.is_free(n))
    }

    /// BFS step distances from `source` over free cells, skipping cells for
    /// which `blocked` returns true. Unreachable cells hold [`UNREACHABLE`].
    pub fn bfs_with(&self, source: Cell, blocked: impl Fn(Cell) -> bool) -> Vec<u32> {
        let mut dist = vec![UNREACHABLE; self.cell_count()];
        if !self.is_free(source) || blocked(source) {
            return dist;
        }
        let mut queue = VecDeque::new();
        dist[self.index(source)] = 0;
        queue.push_back(source);
        while let Some(c) = queue.pop_front() {
            let d = dist[self.index(c)];
            for n in self.neighbors(c) {
                let ni = self.index(n);
                if dist[ni] == UNREACHABLE && !blocked(n) {
                    dist[ni] = d + 1;
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    pub fn bfs(&self, source: Cell) -> Vec<u32> {
        self.bfs_with(source, |_| false)
    }

    /// Shortest step distance between two cells with extra blocked cells,
    /// stopping as soon as `to` is reached.
    pub fn shortest_distance(&self, from: Cell, to: Cell, blocked: impl Fn(Cell) -> bool) -> u32 {
        if !self.is_free(from) || !self.is_free(to) || blocked(from) || blocked(to) {
            return UNREACHABLE;
        }
        if from == to {
            return 0;
        }
        let mut seen = vec![false; self.cell_count()];
        let mut queue = VecDeque::new();
        seen[self.index(from)] = true;
        queue.push_back((from, 0u32));
        while let Some((c, d)) = queue.pop_front() {
            for n in self.neighbors(c) {
                let ni = self.index(n);
                if seen[ni] || blocked(n) {
                    continue;
                }
                if n == to {
                    return d + 1;
                }
                seen[ni] = true;
                queue.push_back((n, d + 1));
            }
        }
        UNREACHABLE
    }

    fn largest_component(&self) -> Vec<Cell> {
        let mut label = vec![usize::MAX; self.cell_count()];
        let mut best: Vec<usize> = Vec::new();
        for start in 0..self.cell_count() {
            if self.occupancy[start] || label[start] != usize::MAX {
                continue;
            }
            let mut members = vec![start];
            label[start] = start;
            let mut head = 0;
            while head < members.len() {
                let c = self.cell_at(members[head]);
                head += 1;
                for n in self.neighbors(c) {
                    let ni = self.index(n);
                    if label[ni] == usize::MAX {
                        label[ni] = start;
                        members.push(ni);
                    }
                }
            }
            if members.len() > best.len() {
                best = members;
            }
        }
        best.sort_unstable();
        best.into_iter().map(|i| self.cell_at(i)).collect()
    }

    pub fn in_component(&self, c: Cell) -> bool {
        self.in_bounds(c) && self.component.binary_search_by_key(&self.index(c), |&m| self.index(m)).is_ok()
    }
}

/// Random map with per-cell obstacle probability drawn from `density`.
///
/// Retries (bounded by [`MAX_MAP_RETRIES`]) until the largest free region
/// holds at least `min_component` cells.
pub fn generate_map(width: usize, height: usize, density: Triangular, seed: u64, min_component: usize) -> Result<GridMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut largest = 0;
    for _ in 0..MAX_MAP_RETRIES {
        let p = density.sample(&mut rng);
        let occupancy = (0..width * height).map(|_| rng.random::<f64>() < p).collect();
        let map = GridMap::new(width, height, occupancy, seed)?;
        if map.component().len() >= min_component {
            return Ok(map);
        }
        largest = largest.max(map.component().len());
    }
    Err(Error::MapGeneration {
        retries: MAX_MAP_RETRIES,
        largest,
        needed: min_component,
    })
}

/// Warehouse layout: horizontal shelf rows separated by aisles of width
/// `aisle`, with a free border and a cross aisle every `aisle + 4` columns.
pub fn warehouse_map(width: usize, height: usize, aisle: usize) -> Result<GridMap> {
    let aisle = aisle.max(1);
    let mut occupancy = vec![false; width * height];
    for y in 1..height.saturating_sub(1) {
        if y % (aisle + 1) != 0 {
            continue;
        }
        for x in 1..width.saturating_sub(1) {
            if x % (aisle + 4) != 0 {
                occupancy[y * width + x] = true;
            }
        }
    }
    GridMap::new(width, height, occupancy, 0)
}

/// City layout: randomly sized rectangular blocks on a street lattice, with
/// random street closures that give maze-like connectivity.
pub fn city_map(width: usize, height: usize, seed: u64) -> Result<GridMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut occupancy = vec![false; width * height];
    let mut y = 1;
    while y + 1 < height {
        let bh = rng.random_range(1..=3usize);
        let mut x = 1;
        while x + 1 < width {
            let bw = rng.random_range(1..=4usize);
            for by in y..(y + bh).min(height - 1) {
                for bx in x..(x + bw).min(width - 1) {
                    occupancy[by * width + bx] = true;
                }
            }
            // occasionally close the street to the right of the block
            if rng.random::<f64>() < 0.2 && x + bw < width - 1 {
                for by in y..(y + bh).min(height - 1) {
                    occupancy[by * width + x + bw] = true;
                }
            }
            x += bw + 1;
        }
        y += bh + 1;
    }
    GridMap::new(width, height, occupancy, seed)
}
