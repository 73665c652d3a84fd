//! Procedural 2.5-D grid worlds: rooms-and-corridors layouts on a 0.25 m
//! cell lattice, semantic objects, egocentric depth rendering, shortest-path
//! trajectory generation with goal-facing termination, and dataset files.
//!
//! Everything here is a pure function of (inputs, seed): identical seeds
//! yield bit-identical worlds, observations, and trajectories.

mod dataset;
mod render;
mod trajectory;

pub use dataset::{read_dataset, write_dataset};
pub use render::render_observation;
pub(crate) use render::{march_ray, RayHit};
pub use trajectory::{sample_trajectory, shortest_path_trajectory};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::indexed_stream;

/// Edge length of one grid cell in meters. One forward action covers exactly
/// this distance, so temporal distance (steps) times 0.25 equals geodesic
/// distance in meters along a path.
pub const CELL_SIZE: f64 = 0.25;

/// Turn actions rotate by 30 degrees; twelve turns close a full rotation.
pub const TURN_INCREMENT: f64 = std::f64::consts::PI / 6.0;

/// Room semantic vocabulary (labels 0..8).
pub const ROOM_CLASS_COUNT: u16 = 8;

/// Object semantic vocabulary (labels 1..=8; 0 means "no hit").
pub const OBJECT_CLASS_COUNT: u16 = 8;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("world parameters out of bounds: {0}")]
    BadParams(String),
    #[error("world generation failed after {attempts} attempts: {reason}")]
    GenerationFailed { attempts: u32, reason: String },
    #[error("pose ({x:.3}, {y:.3}) is not in free space")]
    PoseBlocked { x: f64, y: f64 },
    #[error("heading {0:.6} rad is not a multiple of the 30-degree turn increment")]
    HeadingOffLattice(f64),
    #[error("goal object {0} is unreachable from the start pose")]
    UnreachableGoal(usize),
    #[error("object index {0} out of range")]
    BadObjectIndex(usize),
    #[error("ray count {0} too small (need at least 8)")]
    BadRayCount(usize),
    #[error("observations disagree on ray layout: {0}")]
    HeterogeneousObservations(String),
    #[error("dataset line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("dataset format/version mismatch: {0}")]
    FormatMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A continuous planar pose on the grid. Positions are meters, heading is
/// radians in [0, 2*pi).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading: wrap_angle(heading) }
    }

    /// Grid cell containing this pose.
    pub fn cell(&self) -> (usize, usize) {
        ((self.x / CELL_SIZE) as usize, (self.y / CELL_SIZE) as usize)
    }
}

/// Wrap into [0, 2*pi).
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = a % two_pi;
    if r < 0.0 {
        r += two_pi;
    }
    r
}

/// Wrap into (-pi, pi].
pub fn wrap_signed(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = a % two_pi;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Center of a grid cell in meters.
pub fn cell_center(cell: (usize, usize)) -> (f64, f64) {
    (
        (cell.0 as f64 + 0.5) * CELL_SIZE,
        (cell.1 as f64 + 0.5) * CELL_SIZE,
    )
}

/// A semantic object occupying one cell. Object cells are opaque to rays and
/// blocked for motion, but remain "free" in the wall occupancy grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldObject {
    pub class: u16,
    pub cell: (usize, usize),
    pub facing: f64,
}

/// Occupancy plus semantic room/object map with 0.25 m cells.
#[derive(Debug, Clone, PartialEq)]
pub struct GridWorld {
    pub width: usize,
    pub height: usize,
    pub cell_size: f64,
    /// Wall occupancy, row-major (y * width + x). `true` means wall.
    pub occupancy: Vec<bool>,
    /// Room label per cell; -1 on walls.
    pub room_id: Vec<i32>,
    /// Semantic class per room index.
    pub room_classes: Vec<u16>,
    pub objects: Vec<WorldObject>,
    pub seed: u64,
    /// Object class per cell (0 = none); derived from `objects`.
    object_grid: Vec<u16>,
}

/// Discrete agent actions. Forward covers one cell (0.25 m); turns rotate by
/// 30 degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Forward,
    TurnLeft,
    TurnRight,
    Stop,
}

impl Action {
    pub const COUNT: usize = 4;

    pub fn index(&self) -> usize {
        match self {
            Action::Forward => 0,
            Action::TurnLeft => 1,
            Action::TurnRight => 2,
            Action::Stop => 3,
        }
    }

    pub fn from_index(i: usize) -> Self {
        match i {
            0 => Action::Forward,
            1 => Action::TurnLeft,
            2 => Action::TurnRight,
            3 => Action::Stop,
            _ => panic!("bad action index {i}"),
        }
    }
}

impl GridWorld {
    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn in_bounds(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    /// Wall at this cell.
    #[inline]
    pub fn is_wall(&self, x: usize, y: usize) -> bool {
        self.occupancy[self.idx(x, y)]
    }

    /// Object class at this cell (0 = none).
    #[inline]
    pub fn object_class_at(&self, x: usize, y: usize) -> u16 {
        self.object_grid[self.idx(x, y)]
    }

    /// Opaque to rays: walls and object cells.
    #[inline]
    pub fn blocks_ray(&self, x: i64, y: i64) -> bool {
        if !self.in_bounds(x, y) {
            return true;
        }
        let (x, y) = (x as usize, y as usize);
        self.is_wall(x, y) || self.object_grid[self.idx(x, y)] != 0
    }

    /// Traversable by the agent: free of walls and objects.
    #[inline]
    pub fn is_walkable(&self, x: i64, y: i64) -> bool {
        !self.blocks_ray(x, y)
    }

    pub fn walkable_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.is_walkable(x as i64, y as i64) {
                    out.push((x, y));
                }
            }
        }
        out
    }

    /// Multi-source BFS over walkable cells; `u32::MAX` marks unreachable.
    pub fn bfs_distance_field(&self, sources: &[(usize, usize)]) -> Vec<u32> {
        let mut dist = vec![u32::MAX; self.width * self.height];
        let mut queue = std::collections::VecDeque::new();
        for &(x, y) in sources {
            let ix = self.idx(x, y);
            if dist[ix] != 0 {
                dist[ix] = 0;
                queue.push_back((x, y));
            }
        }
        while let Some((x, y)) = queue.pop_front() {
            let d = dist[self.idx(x, y)];
            for (dx, dy) in [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)] {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if self.is_walkable(nx, ny) {
                    let nix = self.idx(nx as usize, ny as usize);
                    if dist[nix] == u32::MAX {
                        dist[nix] = d + 1;
                        queue.push_back((nx as usize, ny as usize));
                    }
                }
            }
        }
        dist
    }

    /// Check all structural invariants; used by generation and tests.
    pub fn validate(&self) -> Result<(), SimError> {
        if self.cell_size != CELL_SIZE {
            return Err(SimError::BadParams(format!(
                "cell_size {} != {CELL_SIZE}",
                self.cell_size
            )));
        }
        // Every free cell carries a room id, walls carry -1.
        for y in 0..self.height {
            for x in 0..self.width {
                let ix = self.idx(x, y);
                if self.occupancy[ix] {
                    if self.room_id[ix] != -1 {
                        return Err(SimError::BadParams(format!(
                            "wall cell ({x},{y}) has room id {}",
                            self.room_id[ix]
                        )));
                    }
                } else if self.room_id[ix] < 0 {
                    return Err(SimError::BadParams(format!(
                        "free cell ({x},{y}) lacks a room id"
                    )));
                }
            }
        }
        for obj in &self.objects {
            if self.is_wall(obj.cell.0, obj.cell.1) {
                return Err(SimError::BadParams(format!(
                    "object at {:?} sits on a wall",
                    obj.cell
                )));
            }
        }
        // Free cells form a single connected component.
        let free: Vec<(usize, usize)> = (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .filter(|&(x, y)| !self.is_wall(x, y))
            .collect();
        if free.is_empty() {
            return Err(SimError::BadParams("no free cells".into()));
        }
        let dist = {
            // Connectivity of the occupancy grid ignores objects.
            let mut dist = vec![u32::MAX; self.width * self.height];
            let mut queue = std::collections::VecDeque::new();
            dist[self.idx(free[0].0, free[0].1)] = 0;
            queue.push_back(free[0]);
            while let Some((x, y)) = queue.pop_front() {
                for (dx, dy) in [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)] {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if self.in_bounds(nx, ny) && !self.is_wall(nx as usize, ny as usize) {
                        let nix = self.idx(nx as usize, ny as usize);
                        if dist[nix] == u32::MAX {
                            dist[nix] = 1;
                            queue.push_back((nx as usize, ny as usize));
                        }
                    }
                }
            }
            dist
        };
        for &(x, y) in &free {
            if dist[self.idx(x, y)] == u32::MAX {
                return Err(SimError::BadParams(format!(
                    "free cells disconnected at ({x},{y})"
                )));
            }
        }
        Ok(())
    }

    /// Build the derived object grid; call after constructing by hand.
    pub fn rebuild_object_grid(&mut self) {
        self.object_grid = vec![0; self.width * self.height];
        for obj in &self.objects {
            let ix = self.idx(obj.cell.0, obj.cell.1);
            self.object_grid[ix] = obj.class;
        }
    }

    /// Construct from raw fields (test fixtures and generation).
    pub fn from_parts(
        width: usize,
        height: usize,
        occupancy: Vec<bool>,
        room_id: Vec<i32>,
        room_classes: Vec<u16>,
        objects: Vec<WorldObject>,
        seed: u64,
    ) -> Self {
        let mut w = Self {
            width,
            height,
            cell_size: CELL_SIZE,
            occupancy,
            room_id,
            room_classes,
            objects,
            seed,
            object_grid: Vec::new(),
        };
        w.rebuild_object_grid();
        w
    }
}

/// Sensor layout shared by every observation in a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    pub ray_count: usize,
    pub fov: f64,
    pub max_range: f64,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self { ray_count: 64, fov: std::f64::consts::FRAC_PI_2, max_range: 5.0 }
    }
}

/// Egocentric depth panorama with per-ray semantic hits.
///
/// Ray `i` points at `heading - fov/2 + (i + 0.5) * fov / ray_count`. Depths
/// are meters in (0, max_range], stored at f32 precision (the dataset's
/// on-disk precision). `semantic[i]` is nonzero only when the ray's first hit
/// is an object cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub depth: Vec<f32>,
    pub semantic: Vec<u16>,
    pub pose: Pose,
    pub fov: f64,
    pub max_range: f64,
}

impl Observation {
    pub fn ray_count(&self) -> usize {
        self.depth.len()
    }

    /// Absolute world angle of ray `i`.
    pub fn ray_angle(&self, i: usize) -> f64 {
        let r = self.ray_count() as f64;
        self.pose.heading - self.fov / 2.0 + (i as f64 + 0.5) * self.fov / r
    }

    /// Angle of ray `i` relative to the heading.
    pub fn ray_offset(&self, i: usize) -> f64 {
        let r = self.ray_count() as f64;
        -self.fov / 2.0 + (i as f64 + 0.5) * self.fov / r
    }

    /// Most frequent nonzero semantic class in view (ties to the smaller
    /// class id), or 0 when nothing is visible.
    pub fn dominant_object_class(&self) -> u16 {
        let mut counts = [0usize; (OBJECT_CLASS_COUNT + 1) as usize];
        for &s in &self.semantic {
            counts[s as usize] += 1;
        }
        let mut best = 0u16;
        let mut best_count = 0usize;
        for class in 1..=OBJECT_CLASS_COUNT {
            if counts[class as usize] > best_count {
                best = class;
                best_count = counts[class as usize];
            }
        }
        best
    }
}

/// One shortest-path rollout ending with the goal object in view.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub observations: Vec<Observation>,
    /// Semantic class of the goal object.
    pub goal_object: u16,
    /// Room class at the goal pose.
    pub goal_room_class: u16,
    pub goal_pose: Pose,
    pub world_seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Temporal distance (actions) from frame `i` to the final frame.
    pub fn steps_to_goal(&self, i: usize) -> usize {
        self.observations.len() - 1 - i
    }
}

/// World generation knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    pub width: usize,
    pub height: usize,
    /// Exact number of rooms to partition into.
    pub rooms: usize,
    pub objects: usize,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self { width: 32, height: 32, rooms: 4, objects: 6 }
    }
}

const MIN_ROOM_SIDE: usize = 3;
const GEN_ATTEMPTS: u32 = 32;

/// Generate a connected rooms-and-corridors world. Deterministic for fixed
/// (seed, params).
pub fn generate_world(seed: u64, params: &WorldParams) -> Result<GridWorld, SimError> {
    if !(16..=256).contains(&params.width) || !(16..=256).contains(&params.height) {
        return Err(SimError::BadParams(format!(
            "width/height must be in [16, 256], got {}x{}",
            params.width, params.height
        )));
    }
    if params.rooms == 0 || params.rooms > 64 {
        return Err(SimError::BadParams(format!(
            "rooms must be in [1, 64], got {}",
            params.rooms
        )));
    }
    if params.objects == 0 || params.objects > 64 {
        return Err(SimError::BadParams(format!(
            "objects must be in [1, 64], got {}",
            params.objects
        )));
    }

    let mut last_reason = String::new();
    for attempt in 0..GEN_ATTEMPTS {
        let mut rng = indexed_stream(seed, "simworld.generate", attempt as u64);
        match try_generate(seed, params, &mut rng) {
            Ok(world) => return Ok(world),
            Err(e) => last_reason = e.to_string(),
        }
    }
    Err(SimError::GenerationFailed { attempts: GEN_ATTEMPTS, reason: last_reason })
}

#[derive(Clone, Copy)]
struct Region {
    x0: usize,
    y0: usize,
    x1: usize, // inclusive
    y1: usize, // inclusive
}

impl Region {
    fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }
    fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }
    fn area(&self) -> usize {
        self.width() * self.height()
    }
}

fn try_generate(
    seed: u64,
    params: &WorldParams,
    rng: &mut ChaCha8Rng,
) -> Result<GridWorld, SimError> {
    let (w, h) = (params.width, params.height);
    let mut occupancy = vec![false; w * h];
    for x in 0..w {
        occupancy[x] = true;
        occupancy[(h - 1) * w + x] = true;
    }
    for y in 0..h {
        occupancy[y * w] = true;
        occupancy[y * w + (w - 1)] = true;
    }

    // Recursive split of the interior into exactly `rooms` leaves.
    let mut regions = vec![Region { x0: 1, y0: 1, x1: w - 2, y1: h - 2 }];
    while regions.len() < params.rooms {
        // Split the largest splittable region.
        let mut pick: Option<usize> = None;
        for (i, r) in regions.iter().enumerate() {
            let splittable = r.width() >= 2 * MIN_ROOM_SIDE + 1 || r.height() >= 2 * MIN_ROOM_SIDE + 1;
            if splittable && pick.map(|p| regions[p].area() < r.area()).unwrap_or(true) {
                pick = Some(i);
            }
        }
        let Some(pick) = pick else {
            return Err(SimError::GenerationFailed {
                attempts: 1,
                reason: format!("cannot split {}x{} into {} rooms", w, h, params.rooms),
            });
        };
        let region = regions[pick];
        let vertical = if region.width() >= 2 * MIN_ROOM_SIDE + 1
            && region.height() >= 2 * MIN_ROOM_SIDE + 1
        {
            if region.width() != region.height() {
                region.width() > region.height()
            } else {
                rng.random_bool(0.5)
            }
        } else {
            region.width() >= 2 * MIN_ROOM_SIDE + 1
        };
        if vertical {
            let wall_x = rng.random_range(region.x0 + MIN_ROOM_SIDE..=region.x1 - MIN_ROOM_SIDE);
            let door_y = rng.random_range(region.y0..=region.y1);
            for y in region.y0..=region.y1 {
                if y != door_y {
                    occupancy[y * w + wall_x] = true;
                }
            }
            regions[pick] = Region { x1: wall_x - 1, ..region };
            regions.push(Region { x0: wall_x + 1, ..region });
        } else {
            let wall_y = rng.random_range(region.y0 + MIN_ROOM_SIDE..=region.y1 - MIN_ROOM_SIDE);
            let door_x = rng.random_range(region.x0..=region.x1);
            for x in region.x0..=region.x1 {
                if x != door_x {
                    occupancy[wall_y * w + x] = true;
                }
            }
            regions[pick] = Region { y1: wall_y - 1, ..region };
            regions.push(Region { x0: region.x0, y0: wall_y + 1, x1: region.x1, y1: region.y1 });
        }
    }

    // Room labels: leaf rectangles first, then door cells inherit a
    // neighboring label.
    let mut room_id = vec![-1i32; w * h];
    for (i, r) in regions.iter().enumerate() {
        for y in r.y0..=r.y1 {
            for x in r.x0..=r.x1 {
                if !occupancy[y * w + x] {
                    room_id[y * w + x] = i as i32;
                }
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            if !occupancy[y * w + x] && room_id[y * w + x] < 0 {
                for (dx, dy) in [(0i64, -1i64), (-1, 0), (0, 1), (1, 0)] {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                        let nid = room_id[ny as usize * w + nx as usize];
                        if nid >= 0 {
                            room_id[y * w + x] = nid;
                            break;
                        }
                    }
                }
                if room_id[y * w + x] < 0 {
                    return Err(SimError::GenerationFailed {
                        attempts: 1,
                        reason: format!("door cell ({x},{y}) has no labeled neighbor"),
                    });
                }
            }
        }
    }

    let room_classes: Vec<u16> = (0..regions.len())
        .map(|_| rng.random_range(0..ROOM_CLASS_COUNT))
        .collect();

    let mut world = GridWorld::from_parts(
        w,
        h,
        occupancy,
        room_id,
        room_classes,
        Vec::new(),
        seed,
    );
    world.validate()?;

    // Objects: keep the walkable space connected and every object adjacent
    // to at least one walkable cell.
    let free: Vec<(usize, usize)> = world.walkable_cells();
    for _ in 0..params.objects {
        let mut placed = false;
        for _ in 0..64 {
            let cell = free[rng.random_range(0..free.len())];
            if world.object_class_at(cell.0, cell.1) != 0 {
                continue;
            }
            let class = rng.random_range(1..=OBJECT_CLASS_COUNT);
            let facing = TURN_INCREMENT * rng.random_range(0..12) as f64;
            world.objects.push(WorldObject { class, cell, facing });
            world.rebuild_object_grid();
            if objects_ok(&world) {
                placed = true;
                break;
            }
            world.objects.pop();
            world.rebuild_object_grid();
        }
        if !placed {
            return Err(SimError::GenerationFailed {
                attempts: 1,
                reason: "could not place objects without disconnecting space".into(),
            });
        }
    }

    Ok(world)
}

/// Walkable space stays connected and every object keeps a walkable neighbor.
fn objects_ok(world: &GridWorld) -> bool {
    let walkable = world.walkable_cells();
    if walkable.is_empty() {
        return false;
    }
    let dist = world.bfs_distance_field(&[walkable[0]]);
    if walkable.iter().any(|&(x, y)| dist[world.idx(x, y)] == u32::MAX) {
        return false;
    }
    world.objects.iter().all(|obj| {
        [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)].iter().any(|&(dx, dy)| {
            world.is_walkable(obj.cell.0 as i64 + dx, obj.cell.1 as i64 + dy)
        })
    })
}

/// Canonical viewing pose for an object: the first reachable walkable
/// 4-neighbor (N, E, S, W order), centered and facing the object.
pub fn object_viewing_pose(world: &GridWorld, object_index: usize) -> Result<Pose, SimError> {
    let obj = world
        .objects
        .get(object_index)
        .ok_or(SimError::BadObjectIndex(object_index))?;
    let (cx, cy) = obj.cell;
    for (dx, dy) in [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)] {
        let (nx, ny) = (cx as i64 + dx, cy as i64 + dy);
        if world.is_walkable(nx, ny) {
            let (px, py) = cell_center((nx as usize, ny as usize));
            let (ox, oy) = cell_center(obj.cell);
            let heading = wrap_angle((oy - py).atan2(ox - px));
            return Ok(Pose { x: px, y: py, heading });
        }
    }
    Err(SimError::UnreachableGoal(object_index))
}

/// Uniformly sample a walkable pose whose heading is a multiple of the turn
/// increment.
pub fn sample_walkable_pose(world: &GridWorld, rng: &mut ChaCha8Rng) -> Pose {
    let cells = world.walkable_cells();
    let cell = cells[rng.random_range(0..cells.len())];
    let (x, y) = cell_center(cell);
    let heading = TURN_INCREMENT * rng.random_range(0..12) as f64;
    Pose { x, y, heading }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_world_is_connected_with_exact_room_count() {
        let world = generate_world(0, &WorldParams::default()).unwrap();
        world.validate().unwrap();
        let mut ids: Vec<i32> = world.room_id.iter().copied().filter(|&r| r >= 0).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 4);
        assert_eq!(world.objects.len(), 6);
    }

    #[test]
    fn generation_is_deterministic() {
        let params = WorldParams::default();
        let a = generate_world(12, &params).unwrap();
        let b = generate_world(12, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hundred_seeds_pass_connectivity_flood_fill() {
        // Independent flood-fill oracle over the occupancy grid.
        let params = WorldParams::default();
        for seed in 1..=100u64 {
            let world = generate_world(seed, &params).unwrap();
            let free: Vec<(usize, usize)> = (0..world.height)
                .flat_map(|y| (0..world.width).map(move |x| (x, y)))
                .filter(|&(x, y)| !world.is_wall(x, y))
                .collect();
            let mut seen = vec![false; world.width * world.height];
            let mut stack = vec![free[0]];
            seen[world.idx(free[0].0, free[0].1)] = true;
            let mut count = 0usize;
            while let Some((x, y)) = stack.pop() {
                count += 1;
                for (dx, dy) in [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)] {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if world.in_bounds(nx, ny)
                        && !world.is_wall(nx as usize, ny as usize)
                        && !seen[world.idx(nx as usize, ny as usize)]
                    {
                        seen[world.idx(nx as usize, ny as usize)] = true;
                        stack.push((nx as usize, ny as usize));
                    }
                }
            }
            assert_eq!(count, free.len(), "seed {seed} yielded a disconnected layout");
        }
    }

    #[test]
    fn rejects_out_of_bounds_params() {
        let bad = WorldParams { width: 8, ..WorldParams::default() };
        assert!(matches!(generate_world(0, &bad), Err(SimError::BadParams(_))));
        let bad = WorldParams { height: 300, ..WorldParams::default() };
        assert!(matches!(generate_world(0, &bad), Err(SimError::BadParams(_))));
    }

    #[test]
    fn objects_sit_on_free_cells_with_room_ids() {
        let world = generate_world(3, &WorldParams::default()).unwrap();
        for obj in &world.objects {
            assert!(!world.is_wall(obj.cell.0, obj.cell.1));
            assert!(world.room_id[world.idx(obj.cell.0, obj.cell.1)] >= 0);
        }
    }

    #[test]
    fn viewing_pose_faces_the_object() {
        let world = generate_world(5, &WorldParams::default()).unwrap();
        let pose = object_viewing_pose(&world, 0).unwrap();
        let (ox, oy) = cell_center(world.objects[0].cell);
        let bearing = wrap_signed((oy - pose.y).atan2(ox - pose.x) - pose.heading);
        assert!(bearing.abs() < 1e-9);
    }

    #[test]
    fn wrap_angle_stays_in_range() {
        for k in -20..20 {
            let a = wrap_angle(k as f64 * 1.1);
            assert!((0.0..2.0 * std::f64::consts::PI).contains(&a));
        }
    }
}
