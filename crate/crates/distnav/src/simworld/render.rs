//! Egocentric depth rendering by analytic grid ray-marching.

use super::{GridWorld, Observation, Pose, SimError, CELL_SIZE};

/// Result of marching one ray.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RayHit {
    /// Meters to the first blocking cell boundary, clamped at max range.
    pub depth: f64,
    /// Cell that stopped the ray, if any.
    pub cell: Option<(usize, usize)>,
    /// Object class of the hit cell (0 for walls or range clamp).
    pub class: u16,
}

/// March a single ray from (x, y) at `angle`, stepping analytically from
/// cell boundary to cell boundary.
pub(crate) fn march_ray(world: &GridWorld, x: f64, y: f64, angle: f64, max_range: f64) -> RayHit {
    let dir = (angle.cos(), angle.sin());
    let (mut cx, mut cy) = ((x / CELL_SIZE).floor() as i64, (y / CELL_SIZE).floor() as i64);
    let step_x: i64 = if dir.0 > 0.0 { 1 } else { -1 };
    let step_y: i64 = if dir.1 > 0.0 { 1 } else { -1 };

    // Arc length to the next vertical / horizontal cell boundary.
    let mut t_x = if dir.0 != 0.0 {
        let boundary = if dir.0 > 0.0 { (cx + 1) as f64 } else { cx as f64 } * CELL_SIZE;
        (boundary - x) / dir.0
    } else {
        f64::INFINITY
    };
    let mut t_y = if dir.1 != 0.0 {
        let boundary = if dir.1 > 0.0 { (cy + 1) as f64 } else { cy as f64 } * CELL_SIZE;
        (boundary - y) / dir.1
    } else {
        f64::INFINITY
    };
    let dt_x = if dir.0 != 0.0 { CELL_SIZE / dir.0.abs() } else { f64::INFINITY };
    let dt_y = if dir.1 != 0.0 { CELL_SIZE / dir.1.abs() } else { f64::INFINITY };

    loop {
        let t = t_x.min(t_y);
        if t > max_range {
            return RayHit { depth: max_range, cell: None, class: 0 };
        }
        if t_x <= t_y {
            cx += step_x;
            t_x += dt_x;
        } else {
            cy += step_y;
            t_y += dt_y;
        }
        if world.blocks_ray(cx, cy) {
            let class = if world.in_bounds(cx, cy) {
                world.object_class_at(cx as usize, cy as usize)
            } else {
                0
            };
            return RayHit { depth: t, cell: Some((cx.max(0) as usize, cy.max(0) as usize)), class };
        }
    }
}

/// Render a depth/semantic panorama at `pose`.
///
/// `depth[i]` is the exact distance to the first wall or object cell
/// boundary along ray `i` (clamped at `max_range`); `semantic[i]` carries the
/// hit object class, 0 otherwise.
pub fn render_observation(
    world: &GridWorld,
    pose: Pose,
    ray_count: usize,
    fov: f64,
    max_range: f64,
) -> Result<Observation, SimError> {
    if ray_count < 8 {
        return Err(SimError::BadRayCount(ray_count));
    }
    let (cx, cy) = ((pose.x / CELL_SIZE).floor() as i64, (pose.y / CELL_SIZE).floor() as i64);
    if !world.is_walkable(cx, cy) {
        return Err(SimError::PoseBlocked { x: pose.x, y: pose.y });
    }
    let mut depth = Vec::with_capacity(ray_count);
    let mut semantic = Vec::with_capacity(ray_count);
    for i in 0..ray_count {
        let angle =
            pose.heading - fov / 2.0 + (i as f64 + 0.5) * fov / ray_count as f64;
        let hit = march_ray(world, pose.x, pose.y, angle, max_range);
        depth.push(hit.depth as f32);
        semantic.push(hit.class);
    }
    Ok(Observation { depth, semantic, pose, fov, max_range })
}

#[cfg(test)]
mod tests {
    use super::super::testutil::corridor_world;
    use super::super::{cell_center, generate_world, sample_walkable_pose, WorldParams};
    use super::*;
    use crate::rng::stream;

    /// Brute-force oracle: march in 1 mm increments, then bisect the last
    /// free/blocked interval down to 1e-9 m.
    fn brute_force_ray(world: &GridWorld, x: f64, y: f64, angle: f64, max_range: f64) -> f64 {
        let dir = (angle.cos(), angle.sin());
        let blocked = |s: f64| {
            let px = x + s * dir.0;
            let py = y + s * dir.1;
            world.blocks_ray((px / CELL_SIZE).floor() as i64, (py / CELL_SIZE).floor() as i64)
        };
        let step = 1e-3;
        let mut s = step;
        while s <= max_range {
            if blocked(s) {
                let mut lo = s - step;
                let mut hi = s;
                while hi - lo > 1e-9 {
                    let mid = 0.5 * (lo + hi);
                    if blocked(mid) {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                return 0.5 * (lo + hi);
            }
            s += step;
        }
        max_range
    }

    #[test]
    fn head_on_wall_depth_is_exact() {
        // Corridor interior spans x in [0.25, 2.75); the east wall face is at
        // x = 0.25 * 11 = 2.75. One meter back from it: x = 1.75.
        let world = corridor_world(10, false);
        let pose = Pose { x: 1.75, y: 0.375, heading: 0.0 };
        // 9 rays puts ray 4 exactly along the heading.
        let obs = render_observation(&world, pose, 9, std::f64::consts::FRAC_PI_2, 5.0).unwrap();
        assert!((obs.depth[4] as f64 - 1.0).abs() < 1e-9);
        assert_eq!(obs.semantic[4], 0);
    }

    #[test]
    fn open_corridor_clamps_at_max_range() {
        let world = corridor_world(40, false);
        let (x, y) = cell_center((1, 1));
        let pose = Pose { x, y, heading: 0.0 };
        let obs = render_observation(&world, pose, 9, std::f64::consts::FRAC_PI_2, 5.0).unwrap();
        assert_eq!(obs.depth[4], 5.0);
        assert_eq!(obs.semantic[4], 0);
    }

    #[test]
    fn object_cells_set_semantic_hits() {
        let world = corridor_world(10, true);
        let (x, y) = cell_center((1, 1));
        let pose = Pose { x, y, heading: 0.0 };
        let obs = render_observation(&world, pose, 9, std::f64::consts::FRAC_PI_2, 5.0).unwrap();
        assert_eq!(obs.semantic[4], 3);
        // Distance to the object cell's near face: cells 1..9 free, object at
        // cell 10; face at x = 2.5, agent at 0.375.
        assert!((obs.depth[4] as f64 - 2.125).abs() < 1e-9);
    }

    #[test]
    fn blocked_pose_is_an_error() {
        let world = corridor_world(10, false);
        let err = render_observation(
            &world,
            Pose { x: 0.1, y: 0.1, heading: 0.0 },
            9,
            1.0,
            5.0,
        );
        assert!(matches!(err, Err(SimError::PoseBlocked { .. })));
    }

    #[test]
    fn random_poses_match_brute_force_march() {
        let world = generate_world(17, &WorldParams::default()).unwrap();
        let mut rng = stream(99, "render.oracle");
        let mut checked = 0usize;
        for _ in 0..40 {
            let pose = sample_walkable_pose(&world, &mut rng);
            let obs = render_observation(&world, pose, 32, 2.0, 5.0).unwrap();
            for i in 0..obs.ray_count() {
                let oracle =
                    brute_force_ray(&world, pose.x, pose.y, obs.ray_angle(i), obs.max_range);
                assert!(
                    (obs.depth[i] as f64 - oracle).abs() < 1e-6,
                    "ray {i} at {pose:?}: analytic {} vs oracle {oracle}",
                    obs.depth[i]
                );
                checked += 1;
            }
        }
        assert!(checked > 1000);
    }

    #[test]
    fn depths_are_positive_and_clamped() {
        let world = generate_world(23, &WorldParams::default()).unwrap();
        let mut rng = stream(7, "render.range");
        for _ in 0..20 {
            let pose = sample_walkable_pose(&world, &mut rng);
            let obs = render_observation(&world, pose, 16, 1.2, 3.0).unwrap();
            for &d in &obs.depth {
                assert!(d > 0.0 && d <= 3.0);
            }
        }
    }
}
