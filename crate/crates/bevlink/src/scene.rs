//! Procedural urban scenes and vehicle episodes.
//!
//! A scene is a flat ground plane, a Manhattan grid of road corridors, an
//! RSU mast at the central intersection, and extruded rectangular buildings
//! placed inside the blocks between corridors. Buildings never touch road
//! corridors by construction. Vehicles drive the corridor centerlines as
//! seeded waypoint walks; some episodes script a tall truck that cuts the
//! RSU–ego sight line mid-episode so both blockage label classes occur.

use crate::error::{Error, Result};
use crate::geom::{OrientedBox, Pose, Vec3};
use crate::seeded;
use rand::Rng;

/// Frame period in seconds, fixed across the whole artifact.
pub const DT: f64 = 0.1;
/// Height of the ego uplink antenna above ground.
pub const EGO_ANTENNA_HEIGHT: f64 = 1.5;
/// Sensing vehicle body: half length, half width, height.
pub const CAR_DIMS: (f64, f64, f64) = (2.25, 1.0, 1.6);
/// Scripted occluder truck body: half length, half width, height.
pub const TRUCK_DIMS: (f64, f64, f64) = (4.0, 1.25, 3.5);

const MIN_SPEED: f64 = 8.0;
const MAX_SPEED: f64 = 14.0;
const TRUCK_SPEED: f64 = 8.0;
const STOP_PROB: f64 = 0.2;
const ROAD_HALF_WIDTH: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Weather {
    Noon,
    Night,
    Rain,
}

impl Weather {
    pub fn as_str(self) -> &'static str {
        match self {
            Weather::Noon => "noon",
            Weather::Night => "night",
            Weather::Rain => "rain",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "noon" => Ok(Weather::Noon),
            "night" => Ok(Weather::Night),
            "rain" => Ok(Weather::Rain),
            other => Err(Error::validation(format!("unknown weather '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    /// Square side of the world, meters.
    pub extent: f64,
    pub building_count: usize,
    /// Uniform sampling range for building heights, meters.
    pub building_height_range: (f64, f64),
    pub road_grid_pitch: f64,
    pub rsu_height: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            extent: 200.0,
            building_count: 40,
            building_height_range: (6.0, 20.0),
            road_grid_pitch: 50.0,
            rsu_height: 10.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.extent > 0.0) {
            return Err(Error::validation("scene extent must be positive"));
        }
        if self.building_height_range.0 < 3.0 {
            return Err(Error::validation("building height minimum is 3 m"));
        }
        if self.building_height_range.1 < self.building_height_range.0 {
            return Err(Error::validation("building height range inverted"));
        }
        if self.road_grid_pitch <= 2.0 * ROAD_HALF_WIDTH + 6.0 {
            return Err(Error::validation("road pitch leaves no room for blocks"));
        }
        if !(self.rsu_height > 0.0) {
            return Err(Error::validation("rsu height must be positive"));
        }
        Ok(())
    }
}

/// Extruded rectangular blocker with a reflection coefficient magnitude.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Obstacle {
    pub center: (f64, f64),
    pub half_extents: (f64, f64),
    pub yaw: f64,
    pub height: f64,
    pub reflection_coeff: f64,
}

impl Obstacle {
    pub fn body(&self) -> OrientedBox {
        OrientedBox {
            cx: self.center.0,
            cy: self.center.1,
            half_x: self.half_extents.0,
            half_y: self.half_extents.1,
            yaw: self.yaw,
            z_min: 0.0,
            z_max: self.height,
        }
    }
}

/// Manhattan road grid: corridor centerlines parallel to the axes.
#[derive(Clone, Debug, PartialEq)]
pub struct RoadNetwork {
    /// x positions of north-south corridors.
    pub xs: Vec<f64>,
    /// y positions of east-west corridors.
    pub ys: Vec<f64>,
    pub half_width: f64,
}

impl RoadNetwork {
    pub fn node_pos(&self, i: usize, j: usize) -> (f64, f64) {
        (self.xs[i], self.ys[j])
    }

    pub fn n_nodes(&self) -> (usize, usize) {
        (self.xs.len(), self.ys.len())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub config: SceneConfig,
    pub buildings: Vec<Obstacle>,
    pub roads: RoadNetwork,
    pub rsu: Pose,
    /// Ground-plane reflection coefficient magnitude.
    pub ground_reflection: f64,
}

impl Scene {
    pub fn building_boxes(&self) -> Vec<OrientedBox> {
        self.buildings.iter().map(|b| b.body()).collect()
    }
}

/// One timestep of vehicle state. Index 0 of `vehicle_poses` is the ego.
/// Scripted occluder trucks are tracked separately: they block rays and
/// appear to sensors but are not sensing agents.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub t: usize,
    pub vehicle_poses: Vec<Pose>,
    pub occluders: Vec<Pose>,
}

impl Frame {
    pub fn ego(&self) -> Pose {
        self.vehicle_poses[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub scene: Scene,
    pub frames: Vec<Frame>,
    pub dt: f64,
    pub weather: Weather,
    pub episode_id: u64,
}

fn road_positions(extent: f64, pitch: f64) -> Vec<f64> {
    let k_max = ((extent / 2.0 - pitch / 2.0) / pitch).floor().max(0.0) as i64;
    (-k_max..=k_max).map(|k| k as f64 * pitch).collect()
}

/// Axis-aligned building slot inside a block, with the usable half extent.
struct Slot {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

fn block_intervals(extent: f64, roads: &[f64], half_width: f64) -> Vec<(f64, f64)> {
    let half = extent / 2.0;
    let mut edges = vec![-half];
    for &r in roads {
        edges.push(r - half_width);
        edges.push(r + half_width);
    }
    edges.push(half);
    edges
        .chunks(2)
        .filter(|c| c[1] - c[0] > 10.0)
        .map(|c| (c[0], c[1]))
        .collect()
}

/// Procedurally generate a seeded scene.
///
/// Buildings are placed on a jittered 2x2 subgrid inside each block, so the
/// road corridors stay clear and footprints stay pairwise disjoint. The RSU
/// sits on a mast at the central intersection.
pub fn generate_scene(config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let positions = road_positions(config.extent, config.road_grid_pitch);
    let roads = RoadNetwork {
        xs: positions.clone(),
        ys: positions,
        half_width: ROAD_HALF_WIDTH,
    };

    // Enumerate slots first: rejection happens before any placement.
    let xi = block_intervals(config.extent, &roads.xs, roads.half_width);
    let yi = block_intervals(config.extent, &roads.ys, roads.half_width);
    let mut slots = Vec::new();
    for &(x0, x1) in &xi {
        for &(y0, y1) in &yi {
            let mx = (x0 + x1) / 2.0;
            let my = (y0 + y1) / 2.0;
            for (sx0, sx1) in [(x0, mx), (mx, x1)] {
                for (sy0, sy1) in [(y0, my), (my, y1)] {
                    if sx1 - sx0 > 8.0 && sy1 - sy0 > 8.0 {
                        slots.push(Slot {
                            x0: sx0,
                            x1: sx1,
                            y0: sy0,
                            y1: sy1,
                        });
                    }
                }
            }
        }
    }
    if config.building_count > slots.len() {
        return Err(Error::validation(format!(
            "building_count {} exceeds capacity {} for extent {}",
            config.building_count,
            slots.len(),
            config.extent
        )));
    }

    let mut rng = seeded::stream(config.seed, "scene", &[]);
    // Deterministic slot shuffle.
    for i in (1..slots.len()).rev() {
        let j = rng.gen_range(0..=i);
        slots.swap(i, j);
    }

    let mut buildings = Vec::with_capacity(config.building_count);
    for slot in slots.iter().take(config.building_count) {
        let avail_x = (slot.x1 - slot.x0) / 2.0 - 1.0;
        let avail_y = (slot.y1 - slot.y0) / 2.0 - 1.0;
        let hx = rng.gen_range(2.5..=(avail_x * 0.75).max(2.6));
        let hy = rng.gen_range(2.5..=(avail_y * 0.75).max(2.6));
        let yaw: f64 = rng.gen_range(-0.25..0.25);
        // Rotated footprint AABB must stay inside the slot.
        let (s, c) = (yaw.sin().abs(), yaw.cos().abs());
        let rx = hx * c + hy * s;
        let ry = hx * s + hy * c;
        let cx_lo = slot.x0 + 1.0 + rx;
        let cx_hi = slot.x1 - 1.0 - rx;
        let cy_lo = slot.y0 + 1.0 + ry;
        let cy_hi = slot.y1 - 1.0 - ry;
        let cx = if cx_lo < cx_hi {
            rng.gen_range(cx_lo..=cx_hi)
        } else {
            (slot.x0 + slot.x1) / 2.0
        };
        let cy = if cy_lo < cy_hi {
            rng.gen_range(cy_lo..=cy_hi)
        } else {
            (slot.y0 + slot.y1) / 2.0
        };
        let height =
            rng.gen_range(config.building_height_range.0..=config.building_height_range.1);
        let reflection_coeff = rng.gen_range(0.4..0.9);
        buildings.push(Obstacle {
            center: (cx, cy),
            half_extents: (hx, hy),
            yaw,
            height,
            reflection_coeff,
        });
    }

    // Central intersection always exists: k = 0 is in the road grid.
    let rsu = Pose::new(0.0, 0.0, config.rsu_height, 0.0);
    Ok(Scene {
        config: config.clone(),
        buildings,
        roads,
        rsu,
        ground_reflection: 0.9,
    })
}

/// Waypoint-walk state of one vehicle on the road graph.
struct Walker {
    from: (usize, usize),
    to: (usize, usize),
    /// Distance traveled along the current segment.
    s: f64,
    speed: f64,
    stop_frames: usize,
    rng: rand_chacha::ChaCha8Rng,
}

fn neighbors(roads: &RoadNetwork, n: (usize, usize)) -> Vec<(usize, usize)> {
    let (nx, ny) = roads.n_nodes();
    let mut out = Vec::with_capacity(4);
    if n.0 > 0 {
        out.push((n.0 - 1, n.1));
    }
    if n.0 + 1 < nx {
        out.push((n.0 + 1, n.1));
    }
    if n.1 > 0 {
        out.push((n.0, n.1 - 1));
    }
    if n.1 + 1 < ny {
        out.push((n.0, n.1 + 1));
    }
    out
}

impl Walker {
    fn segment_len(&self, roads: &RoadNetwork) -> f64 {
        let a = roads.node_pos(self.from.0, self.from.1);
        let b = roads.node_pos(self.to.0, self.to.1);
        ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt()
    }

    fn pose(&self, roads: &RoadNetwork) -> Pose {
        let a = roads.node_pos(self.from.0, self.from.1);
        let b = roads.node_pos(self.to.0, self.to.1);
        let len = self.segment_len(roads).max(1e-9);
        let t = (self.s / len).clamp(0.0, 1.0);
        let x = a.0 + (b.0 - a.0) * t;
        let y = a.1 + (b.1 - a.1) * t;
        let yaw = (b.1 - a.1).atan2(b.0 - a.0);
        Pose::new(x, y, 0.0, yaw)
    }

    fn step(&mut self, roads: &RoadNetwork) {
        if self.stop_frames > 0 {
            self.stop_frames -= 1;
            return;
        }
        let mut travel = self.speed * DT;
        while travel > 0.0 {
            let len = self.segment_len(roads);
            let remaining = len - self.s;
            if travel < remaining {
                self.s += travel;
                break;
            }
            travel -= remaining;
            // Arrived: pick the next segment, avoiding an immediate U-turn.
            let arrived = self.to;
            let opts: Vec<_> = neighbors(roads, arrived)
                .into_iter()
                .filter(|&n| n != self.from)
                .collect();
            let next = if opts.is_empty() {
                self.from
            } else {
                opts[self.rng.gen_range(0..opts.len())]
            };
            self.from = arrived;
            self.to = next;
            self.s = 0.0;
            self.speed = self.rng.gen_range(MIN_SPEED..=MAX_SPEED);
            if self.rng.gen_bool(STOP_PROB) {
                self.stop_frames = self.rng.gen_range(5..=15);
                break;
            }
        }
    }
}

/// Scripted occluder truck: a straight constant-speed pass through a point
/// on the RSU–ego sight line.
#[derive(Clone, Debug, PartialEq)]
struct TruckScript {
    crossing: (f64, f64),
    dir: (f64, f64),
    t_cross: f64,
}

impl TruckScript {
    fn pose_at(&self, t: usize, extent: f64) -> Option<Pose> {
        let offset = (t as f64 - self.t_cross) * DT * TRUCK_SPEED;
        if offset.abs() > 40.0 {
            return None;
        }
        let x = self.crossing.0 + offset * self.dir.0;
        let y = self.crossing.1 + offset * self.dir.1;
        let half = extent / 2.0 - 1.0;
        if x.abs() > half || y.abs() > half {
            return None;
        }
        Some(Pose::new(x, y, 0.0, self.dir.1.atan2(self.dir.0)))
    }
}

fn truck_path_clear(script: &TruckScript, scene: &Scene, n_frames: usize) -> bool {
    for t in 0..n_frames {
        if let Some(p) = script.pose_at(t, scene.config.extent) {
            if scene
                .buildings
                .iter()
                .any(|b| b.body().footprint_contains(p.x, p.y))
            {
                return false;
            }
        }
    }
    true
}

/// Simulate `n_vehicles` sensing agents (index 0 = ego) for `n_frames`
/// timesteps of `DT` seconds. About half of all episode seeds also script a
/// truck pass that blocks the RSU–ego line, so transition labels exist.
pub fn simulate_episode(
    scene: &Scene,
    n_vehicles: usize,
    n_frames: usize,
    weather: Weather,
    seed: u64,
) -> Result<Episode> {
    if n_vehicles < 1 {
        return Err(Error::validation("need at least the ego vehicle"));
    }
    if n_frames == 0 || n_frames > 200 {
        return Err(Error::validation("n_frames must be in [1, 200]"));
    }

    // Spawn slots: directed road segments with a start offset, spaced 12 m.
    let roads = &scene.roads;
    let (nx, ny) = roads.n_nodes();
    let mut slots: Vec<((usize, usize), (usize, usize), f64)> = Vec::new();
    for i in 0..nx {
        for j in 0..ny {
            for n in neighbors(roads, (i, j)) {
                let a = roads.node_pos(i, j);
                let b = roads.node_pos(n.0, n.1);
                let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
                let mut off = 4.0;
                while off < len - 4.0 {
                    slots.push(((i, j), n, off));
                    off += 12.0;
                }
            }
        }
    }
    if slots.len() < n_vehicles {
        return Err(Error::validation(format!(
            "no feasible spawn lanes: {} slots for {} vehicles",
            slots.len(),
            n_vehicles
        )));
    }

    let mut spawn_rng = seeded::stream(seed, "spawn", &[]);
    let ego_slot = slots[spawn_rng.gen_range(0..slots.len())];
    let ego_xy = {
        let a = roads.node_pos(ego_slot.0 .0, ego_slot.0 .1);
        let b = roads.node_pos(ego_slot.1 .0, ego_slot.1 .1);
        let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        let t = ego_slot.2 / len;
        (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t)
    };

    // Helpers spawn near the ego so collaboration is geometrically relevant.
    let mut near: Vec<_> = slots
        .iter()
        .filter(|(from, _, _)| {
            let p = roads.node_pos(from.0, from.1);
            ((p.0 - ego_xy.0).powi(2) + (p.1 - ego_xy.1).powi(2)).sqrt() < 80.0
        })
        .cloned()
        .collect();
    if near.len() < n_vehicles {
        near = slots.clone();
    }
    for i in (1..near.len()).rev() {
        let j = spawn_rng.gen_range(0..=i);
        near.swap(i, j);
    }

    let mut walkers: Vec<Walker> = Vec::with_capacity(n_vehicles);
    for v in 0..n_vehicles {
        let (from, to, s) = if v == 0 { ego_slot } else { near[v - 1] };
        let mut rng = seeded::stream(seed, "vehicle", &[v as u64]);
        let speed = rng.gen_range(MIN_SPEED..=MAX_SPEED);
        walkers.push(Walker {
            from,
            to,
            s,
            speed,
            stop_frames: 0,
            rng,
        });
    }

    // Roll every trajectory first; the truck script needs the ego path.
    let mut tracks: Vec<Vec<Pose>> = vec![Vec::with_capacity(n_frames); n_vehicles];
    for _t in 0..n_frames {
        for (v, w) in walkers.iter_mut().enumerate() {
            tracks[v].push(w.pose(roads));
            w.step(roads);
        }
    }

    let mut truck = None;
    let mut occ_rng = seeded::stream(seed, "occluder", &[]);
    if occ_rng.gen_bool(0.5) {
        let base = n_frames as f64;
        'search: for tc_frac in [0.5, 0.35, 0.65] {
            let t_cross = base * tc_frac;
            let ego = tracks[0][(t_cross as usize).min(n_frames - 1)];
            let dx = scene.rsu.x - ego.x;
            let dy = scene.rsu.y - ego.y;
            let dist = (dx * dx + dy * dy).sqrt();
            if dist < 30.0 {
                continue;
            }
            let sign = if occ_rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            for s_frac in [0.15, 0.10, 0.20, 0.12, 0.18] {
                let crossing = (ego.x + dx * s_frac, ego.y + dy * s_frac);
                let dir = (-dy / dist * sign, dx / dist * sign);
                let script = TruckScript {
                    crossing,
                    dir,
                    t_cross,
                };
                if truck_path_clear(&script, scene, n_frames) {
                    truck = Some(script);
                    break 'search;
                }
            }
        }
    }

    let frames = (0..n_frames)
        .map(|t| Frame {
            t,
            vehicle_poses: tracks.iter().map(|tr| tr[t]).collect(),
            occluders: truck
                .as_ref()
                .and_then(|s| s.pose_at(t, scene.config.extent))
                .into_iter()
                .collect(),
        })
        .collect();

    Ok(Episode {
        scene: scene.clone(),
        frames,
        dt: DT,
        weather,
        episode_id: seed,
    })
}

/// Body box of a sensing vehicle at a pose.
pub fn car_box(p: Pose) -> OrientedBox {
    OrientedBox {
        cx: p.x,
        cy: p.y,
        half_x: CAR_DIMS.0,
        half_y: CAR_DIMS.1,
        yaw: p.yaw,
        z_min: 0.0,
        z_max: CAR_DIMS.2,
    }
}

/// Body box of a scripted occluder truck at a pose.
pub fn truck_box(p: Pose) -> OrientedBox {
    OrientedBox {
        cx: p.x,
        cy: p.y,
        half_x: TRUCK_DIMS.0,
        half_y: TRUCK_DIMS.1,
        yaw: p.yaw,
        z_min: 0.0,
        z_max: TRUCK_DIMS.2,
    }
}

/// Ego antenna location for a frame.
pub fn ego_antenna(frame: &Frame) -> Vec3 {
    frame.ego().at_height(EGO_ANTENNA_HEIGHT)
}
