//! Shortest-path trajectory generation with goal-facing termination.
//!
//! The follower walks a BFS-shortest grid path toward the goal object,
//! checking after every action whether the object has entered the view; once
//! visible it rotates to center the object (to within half a turn increment)
//! and terminates. Ties between equally short next cells are broken by
//! action preference: forward, then turn-left, then turn-right.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::render::march_ray;
use super::{
    cell_center, render_observation, wrap_signed, GridWorld, Pose, RenderParams, SimError,
    Trajectory, CELL_SIZE, TURN_INCREMENT,
};

/// Number of turn increments (signed) that best centers `bearing`.
fn turns_to_center(bearing: f64) -> i32 {
    (bearing / TURN_INCREMENT).round() as i32
}

fn heading_is_on_lattice(heading: f64) -> bool {
    let k = heading / TURN_INCREMENT;
    (k - k.round()).abs() < 1e-9
}

/// True when any ray's first hit is the goal object's cell.
fn goal_visible(world: &GridWorld, pose: Pose, render: &RenderParams, goal_cell: (usize, usize)) -> bool {
    for i in 0..render.ray_count {
        let angle = pose.heading - render.fov / 2.0
            + (i as f64 + 0.5) * render.fov / render.ray_count as f64;
        let hit = march_ray(world, pose.x, pose.y, angle, render.max_range);
        if hit.cell == Some(goal_cell) {
            return true;
        }
    }
    false
}

/// Follow a grid-shortest path to the goal object, then rotate to face it.
///
/// The start heading must lie on the 30-degree lattice. The returned
/// trajectory holds one observation per pose, starting at the start pose; the
/// final observation has the goal object in view within half a turn increment
/// of the view center.
pub fn shortest_path_trajectory(
    world: &GridWorld,
    start: Pose,
    goal_object_index: usize,
    render: &RenderParams,
) -> Result<Trajectory, SimError> {
    let obj = world
        .objects
        .get(goal_object_index)
        .ok_or(SimError::BadObjectIndex(goal_object_index))?;
    if !heading_is_on_lattice(start.heading) {
        return Err(SimError::HeadingOffLattice(start.heading));
    }
    let start_cell = start.cell();
    if !world.is_walkable(start_cell.0 as i64, start_cell.1 as i64) {
        return Err(SimError::PoseBlocked { x: start.x, y: start.y });
    }

    // Distance to the nearest walkable cell adjacent to the object.
    let targets: Vec<(usize, usize)> = [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)]
        .iter()
        .filter_map(|&(dx, dy)| {
            let (nx, ny) = (obj.cell.0 as i64 + dx, obj.cell.1 as i64 + dy);
            world.is_walkable(nx, ny).then(|| (nx as usize, ny as usize))
        })
        .collect();
    if targets.is_empty() {
        return Err(SimError::UnreachableGoal(goal_object_index));
    }
    let dist = world.bfs_distance_field(&targets);
    if dist[world.idx(start_cell.0, start_cell.1)] == u32::MAX {
        return Err(SimError::UnreachableGoal(goal_object_index));
    }

    let (ox, oy) = cell_center(obj.cell);
    let mut pose = start;
    let mut observations = vec![render_observation(
        world,
        pose,
        render.ray_count,
        render.fov,
        render.max_range,
    )?];

    let limit = 2 * world.width * world.height + 64;
    for _ in 0..limit {
        let bearing = wrap_signed((oy - pose.y).atan2(ox - pose.x) - pose.heading);
        let visible = goal_visible(world, pose, render, obj.cell);
        if visible && turns_to_center(bearing) == 0 {
            let goal_room = world.room_id[world.idx(pose.cell().0, pose.cell().1)];
            return Ok(Trajectory {
                observations,
                goal_object: obj.class,
                goal_room_class: world.room_classes[goal_room as usize],
                goal_pose: pose,
                world_seed: world.seed,
            });
        }

        let cell = pose.cell();
        let at_target = dist[world.idx(cell.0, cell.1)] == 0;
        if visible || at_target {
            // Rotate one increment toward the object.
            let delta = if turns_to_center(bearing) > 0 { TURN_INCREMENT } else { -TURN_INCREMENT };
            pose = Pose::new(pose.x, pose.y, pose.heading + delta);
        } else {
            // Step along the shortest path: among neighbors one closer to the
            // target, prefer the one costing the fewest turns, ties to the
            // left turn.
            let here = dist[world.idx(cell.0, cell.1)];
            let mut best: Option<(usize, f64, (usize, usize), f64)> = None;
            for (dx, dy) in [(1i64, 0i64), (0, 1), (-1, 0), (0, -1)] {
                let (nx, ny) = (cell.0 as i64 + dx, cell.1 as i64 + dy);
                if !world.is_walkable(nx, ny) {
                    continue;
                }
                let nd = dist[world.idx(nx as usize, ny as usize)];
                if nd != here - 1 {
                    continue;
                }
                let dir = (dy as f64).atan2(dx as f64);
                let delta = wrap_signed(dir - pose.heading);
                let turns = (delta.abs() / TURN_INCREMENT).round() as usize;
                let prefer_left = if delta > 1e-12 { 0.0 } else { 1.0 };
                let key = (turns, prefer_left);
                if best
                    .as_ref()
                    .map(|b| (b.0, b.1) > key)
                    .unwrap_or(true)
                {
                    best = Some((key.0, key.1, (nx as usize, ny as usize), dir));
                }
            }
            let (turns, _, next, dir) = best.expect("BFS field guarantees a descending neighbor");
            if turns == 0 {
                let (nx, ny) = cell_center(next);
                pose = Pose { x: nx, y: ny, heading: pose.heading };
            } else {
                let delta = wrap_signed(dir - pose.heading);
                let step = if delta > 0.0 { TURN_INCREMENT } else { -TURN_INCREMENT };
                pose = Pose::new(pose.x, pose.y, pose.heading + step);
            }
        }
        observations.push(render_observation(
            world,
            pose,
            render.ray_count,
            render.fov,
            render.max_range,
        )?);
    }
    Err(SimError::GenerationFailed {
        attempts: 1,
        reason: "trajectory exceeded the step limit".into(),
    })
}

/// Sample a trajectory with a random walkable start, lattice heading, and
/// random goal object. Rejects degenerate (single-observation) rollouts.
pub fn sample_trajectory(
    world: &GridWorld,
    render: &RenderParams,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory, SimError> {
    for _ in 0..64 {
        let start = super::sample_walkable_pose(world, rng);
        let goal = rng.random_range(0..world.objects.len());
        match shortest_path_trajectory(world, start, goal, render) {
            Ok(t) if t.len() >= 4 => return Ok(t),
            Ok(_) => continue,
            Err(SimError::UnreachableGoal(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(SimError::GenerationFailed {
        attempts: 64,
        reason: "no usable (start, goal) pair found".into(),
    })
}
