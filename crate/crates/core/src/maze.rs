//! Deterministic 2-D point-mass maze.
//!
//! A maze is an occupancy grid of wall / free cells. Wall cells are solid
//! blocks when `wall_thickness >= 1`; otherwise each wall cell holds a centered
//! slab of the given thickness with arms reaching towards neighbouring wall
//! cells, so rows and columns of wall cells render as thin continuous walls.
//!
//! Positions are continuous `(x, y)` coordinates: column `c` spans
//! `[c * cell_size, (c + 1) * cell_size)` along x and row `r` (the `r`-th text
//! line) spans the same along y.
//!
//! Movement is segment truncation: a step travels along the straight segment
//! `s -> s + a` and stops a small skin distance before the first wall contact.
//! The ground-truth geodesic comes from a shortest-path search over a fine
//! sub-grid and is only used for evaluation and as the oracle distance.

use std::collections::{BinaryHeap, VecDeque};
use std::fmt;
use std::sync::{Arc, OnceLock};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heap::MinEntry;
use crate::rng::{self, Rng};

/// Skin distance, as a fraction of a cell, kept between an agent and a wall.
pub const SKIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Observation {
    pub x: f64,
    pub y: f64,
}

impl Observation {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn euclidean(&self, other: &Observation) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Bit pattern of both coordinates; equal observations hash equally.
    pub fn key(&self) -> (u64, u64) {
        (self.x.to_bits(), self.y.to_bits())
    }
}

impl From<[f64; 2]> for Observation {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Observation> for [f64; 2] {
    fn from(o: Observation) -> Self {
        [o.x, o.y]
    }
}

impl fmt::Display for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.3}, {:.3})", self.x, self.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Action {
    pub dx: f64,
    pub dy: f64,
}

impl Action {
    pub const ZERO: Action = Action { dx: 0.0, dy: 0.0 };

    pub const fn new(dx: f64, dy: f64) -> Self {
        Self { dx, dy }
    }

    pub fn norm(&self) -> f64 {
        self.dx.hypot(self.dy)
    }
}

impl From<[f64; 2]> for Action {
    fn from([dx, dy]: [f64; 2]) -> Self {
        Self { dx, dy }
    }
}

impl From<Action> for [f64; 2] {
    fn from(a: Action) -> Self {
        [a.dx, a.dy]
    }
}

/// Closed axis-aligned rectangle of occupied space.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Rect {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl Rect {
    fn contains(&self, p: &Observation) -> bool {
        p.x >= self.x0 && p.x <= self.x1 && p.y >= self.y0 && p.y <= self.y1
    }

    /// Entry parameter of the segment `p + t * (dx, dy)`, `t >= 0`, into the
    /// closed rectangle, if it ever enters.
    fn entry(&self, p: &Observation, dx: f64, dy: f64) -> Option<f64> {
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for (pos, dir, lo, hi) in [(p.x, dx, self.x0, self.x1), (p.y, dy, self.y0, self.y1)] {
            if dir == 0.0 {
                if pos < lo || pos > hi {
                    return None;
                }
            } else {
                let (a, b) = ((lo - pos) / dir, (hi - pos) / dir);
                let (a, b) = if a <= b { (a, b) } else { (b, a) };
                t0 = t0.max(a);
                t1 = t1.min(b);
            }
        }
        if t0 <= t1 && t1 >= 0.0 {
            Some(t0.max(0.0))
        } else {
            None
        }
    }

    /// Strict overlap of open interiors.
    fn overlaps_open(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> bool {
        const EPS: f64 = 1e-9;
        self.x1.min(x1) - self.x0.max(x0) > EPS && self.y1.min(y1) - self.y0.max(y0) > EPS
    }
}

/// Built-in fixture names accepted by [`Maze::fixture`].
pub const FIXTURES: &[&str] = &["fourrooms", "fourrooms-thin", "line3", "thinwall"];

const FOURROOMS: &str = "\
.....#.....
.....#.....
...........
.....#.....
.....#.....
##.#####.##
.....#.....
.....#.....
...........
.....#.....
.....#.....
";

const THINWALL: &str = "\
.........
.........
########.
.........
.........
";

pub struct Maze {
    name: String,
    width: usize,
    height: usize,
    walls: Vec<bool>,
    cell_size: f64,
    wall_thickness: f64,
    max_step: f64,
    /// Occupied rectangles, bucketed by the cell that owns them.
    cell_rects: Vec<Vec<Rect>>,
    grid: GeodesicGrid,
}

impl fmt::Debug for Maze {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Maze")
            .field("name", &self.name)
            .field("width", &self.width)
            .field("height", &self.height)
            .field("cell_size", &self.cell_size)
            .field("wall_thickness", &self.wall_thickness)
            .field("max_step", &self.max_step)
            .finish()
    }
}

impl Maze {
    /// Parses the maze text format.
    ///
    /// One line per row, `#` for wall and `.` for free. An optional first line
    /// of `key=value` pairs sets `cell_size`, `wall_thickness` and `max_step`
    /// (in cells, defaults 1.0).
    pub fn parse(name: &str, text: &str) -> Result<Maze> {
        let mut cell_size = 1.0;
        let mut wall_thickness = 1.0;
        let mut max_step_cells = 1.0;
        let mut rows: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end();
            if i == 0 && line.contains('=') {
                for pair in line.split_whitespace() {
                    let (key, value) = pair
                        .split_once('=')
                        .ok_or_else(|| Error::MalformedMaze(format!("bad header field `{pair}`")))?;
                    let value: f64 = value
                        .parse()
                        .map_err(|_| Error::MalformedMaze(format!("bad number in `{pair}`")))?;
                    match key {
                        "cell_size" => cell_size = value,
                        "wall_thickness" => wall_thickness = value,
                        "max_step" => max_step_cells = value,
                        _ => return Err(Error::MalformedMaze(format!("unknown header key `{key}`"))),
                    }
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            rows.push(line);
        }
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::MalformedMaze("cell_size must be positive".into()));
        }
        if !(wall_thickness > 0.0 && wall_thickness <= 1.0) {
            return Err(Error::MalformedMaze("wall_thickness must lie in (0, 1]".into()));
        }
        if !(max_step_cells > 0.0 && max_step_cells.is_finite()) {
            return Err(Error::MalformedMaze("max_step must be positive".into()));
        }
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.chars().count());
        if height == 0 || width == 0 {
            return Err(Error::MalformedMaze("empty grid".into()));
        }
        if width.max(height) < 3 {
            return Err(Error::MalformedMaze("grid must span at least 3 cells".into()));
        }
        let mut walls = Vec::with_capacity(width * height);
        for (r, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(Error::MalformedMaze(format!("row {r} is not {width} cells wide")));
            }
            for ch in row.chars() {
                walls.push(match ch {
                    '#' => true,
                    '.' => false,
                    other => {
                        return Err(Error::MalformedMaze(format!("unexpected character `{other}` in row {r}")))
                    }
                });
            }
        }
        Self::from_grid(name, width, height, walls, cell_size, wall_thickness, max_step_cells * cell_size)
    }

    /// Builds a maze from a row-major wall grid, validating connectivity.
    pub fn from_grid(
        name: &str,
        width: usize,
        height: usize,
        walls: Vec<bool>,
        cell_size: f64,
        wall_thickness: f64,
        max_step: f64,
    ) -> Result<Maze> {
        assert_eq!(walls.len(), width * height, "grid size mismatch");
        let free: Vec<usize> = (0..walls.len()).filter(|&i| !walls[i]).collect();
        if free.is_empty() {
            return Err(Error::NoFreeCells);
        }
        let components = count_components(width, height, &walls);
        if components > 1 {
            return Err(Error::DisconnectedMaze { components });
        }
        let cell_rects = build_rects(width, height, &walls, cell_size, wall_thickness);
        let grid = GeodesicGrid::new(width, height, cell_size, wall_thickness, &cell_rects);
        Ok(Maze {
            name: name.to_string(),
            width,
            height,
            walls,
            cell_size,
            wall_thickness,
            max_step,
            cell_rects,
            grid,
        })
    }

    /// Loads one of the built-in [`FIXTURES`].
    pub fn fixture(name: &str) -> Result<Maze> {
        match name {
            "fourrooms" => Maze::parse(name, FOURROOMS),
            "fourrooms-thin" => Maze::parse(name, &format!("cell_size=1 wall_thickness=0.2\n{FOURROOMS}")),
            "line3" => Maze::parse(name, "....."),
            "thinwall" => Maze::parse(name, &format!("wall_thickness=0.2\n{THINWALL}")),
            other => Err(Error::UnknownFixture(other.to_string())),
        }
    }

    /// Loads a fixture by name, or else parses the file at `spec`.
    pub fn load(spec: &str) -> Result<Maze> {
        if FIXTURES.contains(&spec) {
            return Maze::fixture(spec);
        }
        let text = std::fs::read_to_string(spec)?;
        let name = std::path::Path::new(spec)
            .file_stem()
            .map_or_else(|| spec.to_string(), |s| s.to_string_lossy().into_owned());
        Maze::parse(&name, &text)
    }

    /// Random connected maze with roughly `wall_density` of its cells walled.
    pub fn random(width: usize, height: usize, wall_density: f64, seed: u64) -> Maze {
        let mut rng = rng::rng(seed);
        loop {
            let walls: Vec<bool> = (0..width * height).map(|_| rng.gen_bool(wall_density)).collect();
            if let Ok(m) = Maze::from_grid(&format!("random-{seed}"), width, height, walls, 1.0, 1.0, 1.0) {
                return m;
            }
        }
    }

    /// Same layout with a different step length, in cells.
    pub fn with_max_step(&self, max_step_cells: f64) -> Result<Maze> {
        if !(max_step_cells > 0.0 && max_step_cells.is_finite()) {
            return Err(Error::MalformedMaze("max_step must be positive".into()));
        }
        Maze::from_grid(
            &self.name,
            self.width,
            self.height,
            self.walls.clone(),
            self.cell_size,
            self.wall_thickness,
            max_step_cells * self.cell_size,
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "cell_size={} wall_thickness={} max_step={}\n",
            self.cell_size,
            self.wall_thickness,
            self.max_step / self.cell_size
        );
        for r in 0..self.height {
            for c in 0..self.width {
                out.push(if self.walls[r * self.width + c] { '#' } else { '.' });
            }
            out.push('\n');
        }
        out
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }
    pub fn wall_thickness(&self) -> f64 {
        self.wall_thickness
    }
    pub fn max_step(&self) -> f64 {
        self.max_step
    }
    /// Extent of the bounding box, `(width, height)` in length units.
    pub fn extent(&self) -> (f64, f64) {
        (self.width as f64 * self.cell_size, self.height as f64 * self.cell_size)
    }

    pub fn is_wall_cell(&self, col: usize, row: usize) -> bool {
        self.walls[row * self.width + col]
    }

    pub fn free_cell_count(&self) -> usize {
        self.walls.iter().filter(|w| !**w).count()
    }

    /// Free cells flanked by walls on two opposite sides, in row-major order.
    ///
    /// On the four-rooms layout these are exactly the doorways.
    pub fn doorways(&self) -> Vec<(usize, usize)> {
        let wall = |c: usize, r: usize| self.walls[r * self.width + c];
        let mut doors = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                if wall(c, r) {
                    continue;
                }
                let across = c > 0 && c + 1 < self.width && wall(c - 1, r) && wall(c + 1, r);
                let along = r > 0 && r + 1 < self.height && wall(c, r - 1) && wall(c, r + 1);
                if across || along {
                    doors.push((c, r));
                }
            }
        }
        doors
    }

    /// Number of connected free regions after walling the given cells.
    pub fn components_without(&self, cells: &[(usize, usize)]) -> usize {
        let mut blocked = self.walls.clone();
        for &(c, r) in cells {
            blocked[r * self.width + c] = true;
        }
        count_components(self.width, self.height, &blocked)
    }

    fn cell_of(&self, p: &Observation) -> Option<(usize, usize)> {
        let (w, h) = self.extent();
        if !(p.x > 0.0 && p.x < w && p.y > 0.0 && p.y < h) {
            return None;
        }
        let c = ((p.x / self.cell_size) as usize).min(self.width - 1);
        let r = ((p.y / self.cell_size) as usize).min(self.height - 1);
        Some((c, r))
    }

    /// Strictly inside the bounding box and outside every wall.
    pub fn is_free(&self, p: &Observation) -> bool {
        if !(p.x.is_finite() && p.y.is_finite()) {
            return false;
        }
        let Some((c, r)) = self.cell_of(p) else {
            return false;
        };
        // A point on a cell border may touch rectangles of the neighbour.
        let c_lo = c.saturating_sub(1);
        let r_lo = r.saturating_sub(1);
        for rr in r_lo..=(r + 1).min(self.height - 1) {
            for cc in c_lo..=(c + 1).min(self.width - 1) {
                if self.cell_rects[rr * self.width + cc].iter().any(|rect| rect.contains(p)) {
                    return false;
                }
            }
        }
        true
    }

    /// Free and inside the connected region reachable from the free cells.
    pub fn is_reachable(&self, p: &Observation) -> bool {
        self.is_free(p) && self.grid.in_main(self.grid.raw_subcell(p))
    }

    /// Applies action `a` at `s`, truncating movement before the first wall.
    pub fn step(&self, s: &Observation, a: &Action) -> Observation {
        let norm = a.norm();
        if norm == 0.0 || !norm.is_finite() {
            return *s;
        }
        let t_hit = self.first_contact(s, a.dx, a.dy);
        let target = if t_hit > 1.0 {
            Observation::new(s.x + a.dx, s.y + a.dy)
        } else {
            let t = (t_hit - SKIN * self.cell_size / norm).max(0.0);
            Observation::new(s.x + t * a.dx, s.y + t * a.dy)
        };
        if self.is_free(&target) {
            target
        } else {
            *s
        }
    }

    /// Smallest `t >= 0` at which `s + t * (dx, dy)` touches a wall or the
    /// bounding box; `f64::INFINITY` when it never does within `t <= 1`.
    fn first_contact(&self, s: &Observation, dx: f64, dy: f64) -> f64 {
        let (w, h) = self.extent();
        let mut t_hit = f64::INFINITY;
        for (pos, dir, hi) in [(s.x, dx, w), (s.y, dy, h)] {
            if dir > 0.0 {
                t_hit = t_hit.min((hi - pos) / dir);
            } else if dir < 0.0 {
                t_hit = t_hit.min(-pos / dir);
            }
        }
        let cs = self.cell_size;
        let (ex, ey) = (s.x + dx, s.y + dy);
        let c0 = ((s.x.min(ex) / cs).floor().max(0.0) as usize).saturating_sub(1);
        let c1 = ((s.x.max(ex) / cs).floor().max(0.0) as usize + 1).min(self.width - 1);
        let r0 = ((s.y.min(ey) / cs).floor().max(0.0) as usize).saturating_sub(1);
        let r1 = ((s.y.max(ey) / cs).floor().max(0.0) as usize + 1).min(self.height - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                for rect in &self.cell_rects[r * self.width + c] {
                    if let Some(t) = rect.entry(s, dx, dy) {
                        t_hit = t_hit.min(t);
                    }
                }
            }
        }
        if t_hit <= 1.0 {
            t_hit
        } else {
            f64::INFINITY
        }
    }

    /// Whether the straight segment between two free points avoids every wall.
    pub fn line_of_sight(&self, a: &Observation, b: &Observation) -> bool {
        self.first_contact(a, b.x - a.x, b.y - a.y).is_infinite()
    }

    /// Ground-truth shortest path length between two free points, in steps
    /// of `max_step`.
    ///
    /// This is the fine-grid path length (never below the straight-line
    /// distance), so it is a metric up to floating-point rounding.
    pub fn geodesic(&self, a: &Observation, b: &Observation) -> f64 {
        if a == b {
            return 0.0;
        }
        let ia = self.grid.subcell(a);
        let ib = self.grid.subcell(b);
        let field = self.grid.field(ib);
        let path = field[ia] * self.grid.subcell_len;
        path.max(a.euclidean(b)) / self.max_step
    }

    /// Geodesic from every subcell to the subcell containing `goal`, exposed
    /// as a callable lookup (per-goal value field).
    pub fn geodesic_field(&self, goal: &Observation) -> GeodesicField {
        GeodesicField {
            goal: *goal,
            field: self.grid.field(self.grid.subcell(goal)),
        }
    }

    /// Subcells per cell used by the geodesic oracle.
    pub fn oracle_resolution(&self) -> usize {
        self.grid.res
    }

    /// Largest geodesic between free cell centers (in steps).
    pub fn diameter(&self) -> f64 {
        let centers: Vec<Observation> = (0..self.walls.len())
            .filter(|&i| !self.walls[i])
            .map(|i| {
                Observation::new(
                    ((i % self.width) as f64 + 0.5) * self.cell_size,
                    ((i / self.width) as f64 + 0.5) * self.cell_size,
                )
            })
            .collect();
        let mut best: f64 = 0.0;
        for a in &centers {
            let field = self.geodesic_field(a);
            for b in &centers {
                best = best.max(field.from(self, b));
            }
        }
        best
    }

    /// Uniform sample from the reachable free space.
    pub fn sample_free(&self, rng: &mut Rng) -> Observation {
        let (w, h) = self.extent();
        loop {
            let p = Observation::new(rng.gen::<f64>() * w, rng.gen::<f64>() * h);
            if self.is_reachable(&p) {
                return p;
            }
        }
    }

    /// Uniform sample from the disc of radius `max_step`.
    pub fn sample_action(&self, rng: &mut Rng) -> Action {
        let theta = rng.gen::<f64>() * std::f64::consts::TAU;
        let r = self.max_step * rng.gen::<f64>().sqrt();
        Action::new(r * theta.cos(), r * theta.sin())
    }
}

/// Per-goal geodesic lookup returned by [`Maze::geodesic_field`].
pub struct GeodesicField {
    goal: Observation,
    field: Arc<[f64]>,
}

impl GeodesicField {
    /// Geodesic from `p` to the goal of this field, in steps.
    pub fn from(&self, maze: &Maze, p: &Observation) -> f64 {
        if *p == self.goal {
            return 0.0;
        }
        let path = self.field[maze.grid.subcell(p)] * maze.grid.subcell_len;
        path.max(p.euclidean(&self.goal)) / maze.max_step
    }
}

fn count_components(width: usize, height: usize, walls: &[bool]) -> usize {
    let mut seen = vec![false; walls.len()];
    let mut components = 0;
    for start in 0..walls.len() {
        if walls[start] || seen[start] {
            continue;
        }
        components += 1;
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            let (c, r) = (i % width, i / width);
            let mut visit = |j: usize| {
                if !walls[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < width {
                visit(i + 1);
            }
            if r > 0 {
                visit(i - width);
            }
            if r + 1 < height {
                visit(i + width);
            }
        }
    }
    components
}

fn build_rects(width: usize, height: usize, walls: &[bool], cs: f64, thickness: f64) -> Vec<Vec<Rect>> {
    let is_wall = |c: isize, r: isize| -> bool {
        if c < 0 || r < 0 || c >= width as isize || r >= height as isize {
            true
        } else {
            walls[r as usize * width + c as usize]
        }
    };
    let mut out = vec![Vec::new(); walls.len()];
    for r in 0..height {
        for c in 0..width {
            if !walls[r * width + c] {
                continue;
            }
            let (x, y) = (c as f64 * cs, r as f64 * cs);
            let rects = &mut out[r * width + c];
            if thickness >= 1.0 {
                rects.push(Rect { x0: x, y0: y, x1: x + cs, y1: y + cs });
                continue;
            }
            let lo = (1.0 - thickness) / 2.0 * cs;
            let hi = (1.0 + thickness) / 2.0 * cs;
            rects.push(Rect { x0: x + lo, y0: y + lo, x1: x + hi, y1: y + hi });
            let (ci, ri) = (c as isize, r as isize);
            if is_wall(ci - 1, ri) {
                rects.push(Rect { x0: x, y0: y + lo, x1: x + lo, y1: y + hi });
            }
            if is_wall(ci + 1, ri) {
                rects.push(Rect { x0: x + hi, y0: y + lo, x1: x + cs, y1: y + hi });
            }
            if is_wall(ci, ri - 1) {
                rects.push(Rect { x0: x + lo, y0: y, x1: x + hi, y1: y + lo });
            }
            if is_wall(ci, ri + 1) {
                rects.push(Rect { x0: x + lo, y0: y + hi, x1: x + hi, y1: y + cs });
            }
        }
    }
    out
}

/// Smallest resolution `>= 4` whose subcell borders align with slab edges.
fn resolution_for(thickness: f64) -> usize {
    if thickness >= 1.0 {
        return 4;
    }
    let margin = (1.0 - thickness) / 2.0;
    (4..=40)
        .find(|&res| {
            let scaled = margin * res as f64;
            (scaled - scaled.round()).abs() < 1e-9
        })
        .unwrap_or(10)
}

/// Fine occupancy grid with lazily computed, memoized per-goal distance fields.
struct GeodesicGrid {
    res: usize,
    gw: usize,
    gh: usize,
    subcell_len: f64,
    blocked: Vec<bool>,
    main: Vec<bool>,
    fields: Vec<OnceLock<Arc<[f64]>>>,
}

impl GeodesicGrid {
    fn new(width: usize, height: usize, cs: f64, thickness: f64, rects: &[Vec<Rect>]) -> Self {
        let res = resolution_for(thickness);
        let (gw, gh) = (width * res, height * res);
        let sub = cs / res as f64;
        let mut blocked = vec![false; gw * gh];
        for gy in 0..gh {
            for gx in 0..gw {
                let cell = (gy / res) * width + gx / res;
                let (x0, y0) = (gx as f64 * sub, gy as f64 * sub);
                blocked[gy * gw + gx] = rects[cell].iter().any(|r| r.overlaps_open(x0, y0, x0 + sub, y0 + sub));
            }
        }
        // Keep the largest 8-connected free component; enclosed pockets
        // between thin-wall arms are unreachable.
        let mut label = vec![usize::MAX; gw * gh];
        let mut sizes = Vec::new();
        for start in 0..gw * gh {
            if blocked[start] || label[start] != usize::MAX {
                continue;
            }
            let id = sizes.len();
            let mut size = 0;
            let mut queue = VecDeque::from([start]);
            label[start] = id;
            while let Some(i) = queue.pop_front() {
                size += 1;
                for (j, _) in neighbours(i, gw, gh, &blocked) {
                    if label[j] == usize::MAX {
                        label[j] = id;
                        queue.push_back(j);
                    }
                }
            }
            sizes.push(size);
        }
        let main_id = (0..sizes.len()).max_by_key(|&i| (sizes[i], usize::MAX - i)).unwrap_or(0);
        let main = label.iter().map(|&l| l == main_id).collect();
        GeodesicGrid {
            res,
            gw,
            gh,
            subcell_len: sub,
            blocked,
            main,
            fields: (0..gw * gh).map(|_| OnceLock::new()).collect(),
        }
    }

    fn in_main(&self, idx: usize) -> bool {
        self.main[idx]
    }

    fn raw_subcell(&self, p: &Observation) -> usize {
        let gx = ((p.x / self.subcell_len).floor().max(0.0) as usize).min(self.gw - 1);
        let gy = ((p.y / self.subcell_len).floor().max(0.0) as usize).min(self.gh - 1);
        gy * self.gw + gx
    }

    /// Subcell of `p`, snapped to the nearest reachable subcell when the
    /// containing one is blocked.
    fn subcell(&self, p: &Observation) -> usize {
        let idx = self.raw_subcell(p);
        if self.main[idx] {
            return idx;
        }
        let (gx, gy) = ((idx % self.gw) as isize, (idx / self.gw) as isize);
        for radius in 1..(self.gw.max(self.gh) as isize) {
            let mut best: Option<(f64, usize)> = None;
            for dy in -radius..=radius {
                for dx in -radius..=radius {
                    if dx.abs() != radius && dy.abs() != radius {
                        continue;
                    }
                    let (x, y) = (gx + dx, gy + dy);
                    if x < 0 || y < 0 || x >= self.gw as isize || y >= self.gh as isize {
                        continue;
                    }
                    let j = y as usize * self.gw + x as usize;
                    if !self.main[j] {
                        continue;
                    }
                    let cx = (x as f64 + 0.5) * self.subcell_len;
                    let cy = (y as f64 + 0.5) * self.subcell_len;
                    let dist = (cx - p.x).hypot(cy - p.y);
                    if best.is_none_or(|(bd, bj)| dist < bd || (dist == bd && j < bj)) {
                        best = Some((dist, j));
                    }
                }
            }
            if let Some((_, j)) = best {
                return j;
            }
        }
        idx
    }

    fn field(&self, goal: usize) -> Arc<[f64]> {
        self.fields[goal].get_or_init(|| self.dijkstra(goal)).clone()
    }

    fn dijkstra(&self, source: usize) -> Arc<[f64]> {
        let mut dist = vec![f64::INFINITY; self.gw * self.gh];
        let mut heap = BinaryHeap::new();
        dist[source] = 0.0;
        heap.push(MinEntry { cost: 0.0, node: source });
        while let Some(MinEntry { cost, node }) = heap.pop() {
            if cost > dist[node] {
                continue;
            }
            for (next, w) in neighbours(node, self.gw, self.gh, &self.blocked) {
                let nd = cost + w;
                if nd < dist[next] {
                    dist[next] = nd;
                    heap.push(MinEntry { cost: nd, node: next });
                }
            }
        }
        dist.into()
    }
}

/// 8-connected free neighbours; diagonal moves may not cut blocked corners.
fn neighbours(i: usize, gw: usize, gh: usize, blocked: &[bool]) -> impl Iterator<Item = (usize, f64)> + '_ {
    let (x, y) = ((i % gw) as isize, (i / gw) as isize);
    let free = move |x: isize, y: isize| -> bool {
        x >= 0 && y >= 0 && x < gw as isize && y < gh as isize && !blocked[y as usize * gw + x as usize]
    };
    const MOVES: [(isize, isize); 8] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];
    MOVES.into_iter().filter_map(move |(dx, dy)| {
        let (nx, ny) = (x + dx, y + dy);
        if !free(nx, ny) {
            return None;
        }
        if dx != 0 && dy != 0 {
            if !free(x + dx, y) || !free(x, y + dy) {
                return None;
            }
            Some((ny as usize * gw + nx as usize, std::f64::consts::SQRT_2))
        } else {
            Some((ny as usize * gw + nx as usize, 1.0))
        }
    })
}

/// Ordered exploration episodes; the source set for graph construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    pub episodes: Vec<Vec<Observation>>,
    pub seed: u64,
}

impl ReplayBuffer {
    pub fn new(episodes: Vec<Vec<Observation>>, seed: u64) -> Self {
        Self { episodes, seed }
    }

    /// Single-episode buffer holding `states` in order.
    pub fn from_states(states: Vec<Observation>) -> Self {
        Self { episodes: vec![states], seed: 0 }
    }

    pub fn len(&self) -> usize {
        self.episodes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// States in episode-then-time order.
    pub fn states(&self) -> impl Iterator<Item = &Observation> {
        self.episodes.iter().flatten()
    }

    /// `(episode, time)` of every state, in the order of [`states`](Self::states).
    pub fn indices(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.episodes
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| (0..ep.len()).map(move |t| (e, t)))
    }

    pub fn get(&self, episode: usize, time: usize) -> Option<&Observation> {
        self.episodes.get(episode).and_then(|ep| ep.get(time))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Fraction of free cells that contain at least one buffer state.
    pub fn coverage(&self, maze: &Maze) -> f64 {
        let mut seen = vec![false; maze.width * maze.height];
        for s in self.states() {
            if let Some((c, r)) = maze.cell_of(s) {
                seen[r * maze.width + c] = true;
            }
        }
        let visited = (0..seen.len()).filter(|&i| seen[i] && !maze.walls[i]).count();
        visited as f64 / maze.free_cell_count() as f64
    }
}

/// Random-action exploration: each episode starts at a uniform free point and
/// takes `horizon` uniformly random actions.
pub fn collect_random_buffer(maze: &Maze, episodes: usize, horizon: usize, seed: u64) -> Result<ReplayBuffer> {
    if episodes == 0 || horizon == 0 {
        return Err(Error::InvalidParams("episodes and horizon must be at least 1".into()));
    }
    let mut rng = rng::rng(seed);
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut s = maze.sample_free(&mut rng);
        let mut ep = Vec::with_capacity(horizon + 1);
        ep.push(s);
        for _ in 0..horizon {
            let a = maze.sample_action(&mut rng);
            s = maze.step(&s, &a);
            ep.push(s);
        }
        out.push(ep);
    }
    Ok(ReplayBuffer::new(out, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line3() -> Maze {
        Maze::fixture("line3").unwrap()
    }

    #[test]
    fn open_grid_counts_free_cells() {
        let m = Maze::parse("open", "...\n...\n...").unwrap();
        assert_eq!(m.free_cell_count(), 9);
    }

    #[test]
    fn fourrooms_has_four_doorways_and_rooms() {
        let m = Maze::fixture("fourrooms").unwrap();
        let doors = m.doorways();
        assert_eq!(doors, vec![(5, 2), (2, 5), (8, 5), (5, 8)]);
        assert_eq!(m.components_without(&doors), 4);
    }

    #[test]
    fn thin_variant_shares_topology() {
        let thick = Maze::fixture("fourrooms").unwrap();
        let thin = Maze::fixture("fourrooms-thin").unwrap();
        assert_eq!(thin.wall_thickness(), 0.2);
        assert_eq!(thin.doorways(), thick.doorways());
        assert_eq!(thin.oracle_resolution(), 5);
        assert_eq!(thick.oracle_resolution(), 4);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(matches!(Maze::parse("x", "#.#\n###\n#.#"), Err(Error::DisconnectedMaze { .. })));
        assert!(matches!(Maze::parse("x", "###\n###\n###"), Err(Error::NoFreeCells)));
        assert!(matches!(Maze::parse("x", "...\n..\n..."), Err(Error::MalformedMaze(_))));
        assert!(matches!(Maze::parse("x", "..x\n...\n..."), Err(Error::MalformedMaze(_))));
        assert!(matches!(Maze::parse("x", ".."), Err(Error::MalformedMaze(_))));
        assert!(matches!(Maze::fixture("nope"), Err(Error::UnknownFixture(_))));
    }

    #[test]
    fn header_round_trips() {
        let m = Maze::fixture("fourrooms-thin").unwrap();
        let again = Maze::parse("again", &m.to_text()).unwrap();
        assert_eq!(again.to_text(), m.to_text());
        assert_eq!(again.wall_thickness(), 0.2);
    }

    #[test]
    fn step_in_open_space() {
        let m = line3();
        let s = m.step(&Observation::new(0.5, 0.5), &Action::new(0.4, 0.0));
        assert!((s.x - 0.9).abs() < 1e-12 && (s.y - 0.5).abs() < 1e-12);
    }

    #[test]
    fn step_into_wall_is_blocked() {
        let m = Maze::fixture("thinwall").unwrap();
        // Slab occupies y in [2.4, 2.6] for x < 7.6.
        let s = Observation::new(3.0, 2.3);
        let next = m.step(&s, &Action::new(0.0, 0.8));
        assert!(m.is_free(&next));
        assert!((next.y - (2.4 - SKIN)).abs() < 1e-9);
        let again = m.step(&next, &Action::new(0.0, 0.8));
        assert!(m.geodesic(&next, &again) <= 2.0 * SKIN + 1e-9);
    }

    #[test]
    fn diagonal_graze_truncates_at_corner() {
        let m = Maze::fixture("fourrooms").unwrap();
        // Cell (4, 5) is solid; approach its top-left corner (4, 5) diagonally.
        let s = Observation::new(3.5, 4.5);
        let next = m.step(&s, &Action::new(0.6, 0.6));
        // Segment hits the corner at t = 5/6.
        let t = 5.0 / 6.0 - SKIN / (0.6f64.hypot(0.6));
        assert!((next.x - (3.5 + 0.6 * t)).abs() < 1e-9);
        assert!((next.y - (4.5 + 0.6 * t)).abs() < 1e-9);
        assert!(m.is_free(&next));
    }

    #[test]
    fn geodesic_line3() {
        let m = line3();
        let a = Observation::new(0.5, 0.5);
        let c = Observation::new(4.5, 0.5);
        assert_eq!(m.geodesic(&a, &a), 0.0);
        assert!((m.geodesic(&a, &c) - 4.0).abs() <= 0.15);
    }

    #[test]
    fn geodesic_around_thin_wall() {
        let m = Maze::fixture("thinwall").unwrap();
        let a = Observation::new(0.5, 2.2);
        let b = Observation::new(0.5, 2.8);
        let eu = a.euclidean(&b);
        assert!((eu - 0.6).abs() < 1e-12);
        let p = Observation::new(0.5, 2.3);
        let q = Observation::new(0.5, 2.7);
        assert!(m.geodesic(&p, &q) >= 10.0 * p.euclidean(&q));
        assert!(m.geodesic(&a, &b) >= 10.0 * eu);
    }

    #[test]
    fn random_buffer_shapes() {
        let m = Maze::fixture("fourrooms").unwrap();
        let b = collect_random_buffer(&m, 1, 1, 3).unwrap();
        assert_eq!(b.len(), 2);
        let b = collect_random_buffer(&m, 100, 100, 3).unwrap();
        assert_eq!(b.len(), 100 * 101);
        assert!(b.states().all(|s| m.is_free(s)));
        assert_eq!(b, collect_random_buffer(&m, 100, 100, 3).unwrap());
        assert!(collect_random_buffer(&m, 0, 10, 3).is_err());
    }

    #[test]
    fn buffer_json_shape() {
        let b = ReplayBuffer::new(vec![vec![Observation::new(0.5, 1.5)]], 9);
        assert_eq!(b.to_json().unwrap(), r#"{"episodes":[[[0.5,1.5]]],"seed":9}"#);
        assert_eq!(ReplayBuffer::from_json(&b.to_json().unwrap()).unwrap(), b);
    }

    #[test]
    fn diameter_of_line3() {
        let m = line3();
        assert!((m.diameter() - 4.0).abs() < 1e-9);
    }
}
