//! Perfect-maze generation, shortest-path solving and rendering.
//!
//! A maze of logical side `S` (odd) lives on an `S×S` grid. Cells whose row
//! and column are both odd are *nodes*; the generator carves a spanning tree
//! over the `((S-1)/2)²` nodes by opening the wall cell between neighbouring
//! nodes, so the open cells always number `2c - 1` with `c` nodes.

use std::collections::VecDeque;

use thiserror::Error;

use crate::image::{ImageU8, BLACK, GREEN, RED, WHITE};
use crate::rng::{self, bounded_index};

pub const MIN_SIZE: usize = 5;
pub const MAX_SIZE: usize = 63;

/// Grid sizes used by the reference dataset.
pub const DATASET_SIZES: [usize; 5] = [11, 15, 21, 25, 31];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MazeError {
    #[error("invalid maze size {0}: must be odd and within {MIN_SIZE}..={MAX_SIZE}")]
    InvalidSize(usize),
    #[error("cell grid of length {actual} does not match size {size}")]
    BadCells { size: usize, actual: usize },
    #[error("exit is unreachable from entry")]
    Unreachable,
    #[error("resolution {resolution} is smaller than maze size {size}")]
    ResolutionTooSmall { resolution: usize, size: usize },
}

/// Grid coordinate as `(row, col)`.
pub type Cell = (usize, usize);

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MazeGrid {
    size: usize,
    cells: Vec<bool>,
}

impl MazeGrid {
    /// Builds a grid from explicit cells (`true` = open). Accepts any odd
    /// size ≥ 3 so hand-made fixtures can be solved; border cells must be
    /// walls for rendering to make sense but are not enforced here.
    pub fn from_cells(size: usize, cells: Vec<bool>) -> Result<Self, MazeError> {
        if size < 3 || size.is_multiple_of(2) {
            return Err(MazeError::InvalidSize(size));
        }
        if cells.len() != size * size {
            return Err(MazeError::BadCells {
                size,
                actual: cells.len(),
            });
        }
        Ok(Self { size, cells })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn entry(&self) -> Cell {
        (1, 1)
    }

    pub fn exit(&self) -> Cell {
        (self.size - 2, self.size - 2)
    }

    #[inline]
    pub fn is_open(&self, (r, c): Cell) -> bool {
        self.cells[r * self.size + c]
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn open_count(&self) -> usize {
        self.cells.iter().filter(|&&o| o).count()
    }

    /// Number of node cells, `((S-1)/2)²`.
    pub fn node_count(&self) -> usize {
        let half = (self.size - 1) / 2;
        half * half
    }

    fn open(&mut self, (r, c): Cell) {
        self.cells[r * self.size + c] = true;
    }

    /// Open 4-neighbours of `cell`, in N, S, W, E order.
    pub fn open_neighbors(&self, (r, c): Cell) -> impl Iterator<Item = Cell> + '_ {
        let s = self.size;
        let cand = [
            (r.wrapping_sub(1), c),
            (r + 1, c),
            (r, c.wrapping_sub(1)),
            (r, c + 1),
        ];
        cand.into_iter()
            .filter(move |&(nr, nc)| nr < s && nc < s)
            .filter(move |&n| self.is_open(n))
    }
}

/// Ordered entry→exit cells of the shortest route.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SolutionPath {
    pub cells: Vec<Cell>,
}

impl SolutionPath {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Cells strictly between entry and exit, the ones rendered red.
    pub fn interior(&self) -> &[Cell] {
        if self.cells.len() <= 2 {
            &[]
        } else {
            &self.cells[1..self.cells.len() - 1]
        }
    }
}

/// An unsolved/solved image pair with its provenance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairSample {
    pub input: ImageU8,
    pub target: ImageU8,
    pub size: u16,
    pub seed: u64,
}

pub fn validate_size(size: usize) -> Result<(), MazeError> {
    if size.is_multiple_of(2) || !(MIN_SIZE..=MAX_SIZE).contains(&size) {
        return Err(MazeError::InvalidSize(size));
    }
    Ok(())
}

/// Randomized depth-first backtracking from `(1,1)`, two cells per move.
pub fn generate_maze(size: usize, seed: u64) -> Result<MazeGrid, MazeError> {
    validate_size(size)?;
    let mut grid = MazeGrid {
        size,
        cells: vec![false; size * size],
    };
    let mut rng = rng::seeded(seed);
    let start = (1, 1);
    grid.open(start);
    let mut stack = vec![start];
    let mut candidates: Vec<(Cell, Cell)> = Vec::with_capacity(4);

    while let Some(&(r, c)) = stack.last() {
        candidates.clear();
        // N, S, W, E; each entry is (wall between, neighbour node).
        if r >= 3 {
            candidates.push(((r - 1, c), (r - 2, c)));
        }
        if r + 2 <= size - 2 {
            candidates.push(((r + 1, c), (r + 2, c)));
        }
        if c >= 3 {
            candidates.push(((r, c - 1), (r, c - 2)));
        }
        if c + 2 <= size - 2 {
            candidates.push(((r, c + 1), (r, c + 2)));
        }
        candidates.retain(|&(_, n)| !grid.is_open(n));

        if candidates.is_empty() {
            stack.pop();
        } else {
            let (wall, next) = candidates[bounded_index(&mut rng, candidates.len())];
            grid.open(wall);
            grid.open(next);
            stack.push(next);
        }
    }
    Ok(grid)
}

/// Breadth-first search from entry to exit.
pub fn solve_maze(grid: &MazeGrid) -> Result<SolutionPath, MazeError> {
    let (entry, exit) = (grid.entry(), grid.exit());
    if !grid.is_open(entry) || !grid.is_open(exit) {
        return Err(MazeError::Unreachable);
    }
    let s = grid.size();
    let mut parent: Vec<Option<Cell>> = vec![None; s * s];
    let mut seen = vec![false; s * s];
    let mut queue = VecDeque::from([entry]);
    seen[entry.0 * s + entry.1] = true;

    while let Some(cur) = queue.pop_front() {
        if cur == exit {
            let mut cells = vec![cur];
            let mut at = cur;
            while let Some(p) = parent[at.0 * s + at.1] {
                cells.push(p);
                at = p;
            }
            cells.reverse();
            return Ok(SolutionPath { cells });
        }
        for n in grid.open_neighbors(cur) {
            let k = n.0 * s + n.1;
            if !seen[k] {
                seen[k] = true;
                parent[k] = Some(cur);
                queue.push_back(n);
            }
        }
    }
    Err(MazeError::Unreachable)
}

/// Logical cell shown at pixel index `i` of a `resolution`-wide render.
#[inline]
pub fn pixel_to_cell(i: usize, size: usize, resolution: usize) -> usize {
    i * size / resolution
}

/// Nearest-neighbour render. Open cells are white, walls black, entry and
/// exit green; interior solution cells are red when `path` is given. The
/// endpoints stay green even though they belong to the path.
pub fn render_maze(
    grid: &MazeGrid,
    path: Option<&SolutionPath>,
    resolution: usize,
) -> Result<ImageU8, MazeError> {
    let s = grid.size();
    if resolution < s {
        return Err(MazeError::ResolutionTooSmall {
            resolution,
            size: s,
        });
    }
    let mut colors: Vec<[u8; 3]> = grid
        .cells()
        .iter()
        .map(|&open| if open { WHITE } else { BLACK })
        .collect();
    if let Some(path) = path {
        for &(r, c) in path.interior() {
            colors[r * s + c] = RED;
        }
    }
    for (r, c) in [grid.entry(), grid.exit()] {
        colors[r * s + c] = GREEN;
    }

    let mut img = ImageU8::filled(resolution, resolution, BLACK);
    for i in 0..resolution {
        let r = pixel_to_cell(i, s, resolution);
        for j in 0..resolution {
            let c = pixel_to_cell(j, s, resolution);
            img.set_pixel(i, j, colors[r * s + c]);
        }
    }
    Ok(img)
}

pub fn generate_pair(size: usize, seed: u64, resolution: usize) -> Result<PairSample, MazeError> {
    let grid = generate_maze(size, seed)?;
    let path = solve_maze(&grid)?;
    Ok(PairSample {
        input: render_maze(&grid, None, resolution)?,
        target: render_maze(&grid, Some(&path), resolution)?,
        size: size as u16,
        seed,
    })
}

/// Pixel mask (row-major, `resolution²`) of the given logical cells.
pub fn cells_pixel_mask(cells: &[Cell], size: usize, resolution: usize) -> Vec<bool> {
    let mut marked = vec![false; size * size];
    for &(r, c) in cells {
        marked[r * size + c] = true;
    }
    let mut mask = vec![false; resolution * resolution];
    for i in 0..resolution {
        let r = pixel_to_cell(i, size, resolution);
        for j in 0..resolution {
            mask[i * resolution + j] = marked[r * size + pixel_to_cell(j, size, resolution)];
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Union-find over carved edges: returns (components, found_cycle).
    fn tree_check(grid: &MazeGrid) -> (usize, bool) {
        let s = grid.size();
        let mut parent: Vec<usize> = (0..s * s).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        let mut cycle = false;
        for r in 0..s {
            for c in 0..s {
                if !grid.is_open((r, c)) {
                    continue;
                }
                for n in [(r + 1, c), (r, c + 1)] {
                    if n.0 < s && n.1 < s && grid.is_open(n) {
                        let (a, b) = (
                            find(&mut parent, r * s + c),
                            find(&mut parent, n.0 * s + n.1),
                        );
                        if a == b {
                            cycle = true;
                        } else {
                            parent[a] = b;
                        }
                    }
                }
            }
        }
        let mut roots = std::collections::HashSet::new();
        for k in 0..s * s {
            if grid.cells()[k] {
                roots.insert(find(&mut parent, k));
            }
        }
        (roots.len(), cycle)
    }

    #[test]
    fn size_five_seed_zero_has_seven_open_cells() {
        let g = generate_maze(5, 0).unwrap();
        assert_eq!(g.open_count(), 7);
        assert_eq!(tree_check(&g), (1, false));
    }

    #[test]
    fn size_eleven_has_forty_nine_open_cells() {
        for seed in 0..20 {
            let g = generate_maze(11, seed).unwrap();
            assert_eq!(g.open_count(), 49);
            assert_eq!(tree_check(&g), (1, false));
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        assert_eq!(generate_maze(5, 42).unwrap(), generate_maze(5, 42).unwrap());
        assert_ne!(generate_maze(21, 1).unwrap(), generate_maze(21, 2).unwrap());
    }

    #[test]
    fn rejects_invalid_sizes() {
        for s in [0, 3, 4, 10, 65, 64] {
            assert_eq!(generate_maze(s, 0), Err(MazeError::InvalidSize(s)));
        }
    }

    #[test]
    fn borders_are_walls() {
        let g = generate_maze(15, 9).unwrap();
        let s = g.size();
        for k in 0..s {
            for cell in [(0, k), (s - 1, k), (k, 0), (k, s - 1)] {
                assert!(!g.is_open(cell));
            }
        }
        assert!(g.is_open(g.entry()) && g.is_open(g.exit()));
    }

    #[test]
    fn single_cell_path_when_entry_is_exit() {
        let mut cells = vec![false; 9];
        cells[4] = true;
        let g = MazeGrid::from_cells(3, cells).unwrap();
        let p = solve_maze(&g).unwrap();
        assert_eq!(p.cells, vec![(1, 1)]);
    }

    #[test]
    fn path_is_adjacent_and_at_least_manhattan() {
        for seed in 0..30 {
            let g = generate_maze(21, seed).unwrap();
            let p = solve_maze(&g).unwrap();
            assert_eq!(p.cells[0], g.entry());
            assert_eq!(*p.cells.last().unwrap(), g.exit());
            for w in p.cells.windows(2) {
                let d = w[0].0.abs_diff(w[1].0) + w[0].1.abs_diff(w[1].1);
                assert_eq!(d, 1);
            }
            assert!(p.len() > 2 * (g.size() - 3));
        }
    }

    #[test]
    fn unreachable_exit_is_an_error() {
        let mut cells = vec![false; 25];
        cells[6] = true; // (1,1)
        cells[18] = true; // (3,3)
        let g = MazeGrid::from_cells(5, cells).unwrap();
        assert_eq!(solve_maze(&g), Err(MazeError::Unreachable));
    }

    #[test]
    fn floor_mapping_for_size_eleven_at_64() {
        let covered: Vec<usize> = (0..64).filter(|&i| pixel_to_cell(i, 11, 64) == 0).collect();
        assert_eq!(covered, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn render_overlay_only_adds_red() {
        let g = generate_maze(11, 3).unwrap();
        let p = solve_maze(&g).unwrap();
        let a = render_maze(&g, None, 64).unwrap();
        let b = render_maze(&g, Some(&p), 64).unwrap();
        assert_eq!(a.pixel(0, 0), BLACK);
        for i in 0..64 {
            for j in 0..64 {
                if a.pixel(i, j) != b.pixel(i, j) {
                    assert_eq!(a.pixel(i, j), WHITE);
                    assert_eq!(b.pixel(i, j), RED);
                }
            }
        }
        assert!(b.data.chunks(3).any(|px| px == RED));
    }

    #[test]
    fn render_rejects_small_resolution() {
        let g = generate_maze(11, 3).unwrap();
        assert_eq!(
            render_maze(&g, None, 10),
            Err(MazeError::ResolutionTooSmall {
                resolution: 10,
                size: 11
            })
        );
    }
}
