//! Geometry-based mmWave propagation.
//!
//! Enumerates the line-of-sight path, first- and second-order image-method
//! specular reflections off building walls and the ground plane, and (when
//! the direct path is blocked) a single knife-edge diffraction path over the
//! top edge of the first blocker. Per-path amplitude combines free-space
//! path loss, interaction coefficient magnitudes, and rain attenuation.

use crate::error::{Error, Result};
use crate::geom::{segment_blocked, OrientedBox, Vec3};
use crate::scene::{car_box, truck_box, Frame, Scene};
use std::f64::consts::PI;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Open-interval margin for occlusion tests, so a reflection point lying on
/// the reflecting wall does not count as self-occlusion.
const EPS_T: f64 = 1e-9;

/// Coherent power this far (in linear power) below the noncoherent sum is
/// numerically indistinguishable from perfect cancellation.
const CANCELLATION_FLOOR: f64 = 1e-24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PowerMode {
    /// Sum of per-path powers (stable labels; the default).
    Noncoherent,
    /// Magnitude of the phasor sum (narrowband CIR fidelity).
    Coherent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelConfig {
    pub carrier_freq: f64,
    pub tx_power_dbm: f64,
    pub max_reflection_order: u8,
    pub rain_attenuation_db_per_km: f64,
    pub power_mode: PowerMode,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            carrier_freq: 28e9,
            tx_power_dbm: 30.0,
            max_reflection_order: 2,
            rain_attenuation_db_per_km: 0.0,
            power_mode: PowerMode::Noncoherent,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.carrier_freq > 0.0) {
            return Err(Error::validation("carrier frequency must be positive"));
        }
        if self.max_reflection_order > 2 {
            return Err(Error::validation("max_reflection_order is limited to 2"));
        }
        Ok(())
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_freq
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathKind {
    Los,
    Reflection,
    Diffraction,
}

impl PathKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PathKind::Los => "los",
            PathKind::Reflection => "reflection",
            PathKind::Diffraction => "diffraction",
        }
    }
}

/// One propagation path with exact geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct RayPath {
    pub kind: PathKind,
    /// tx, interaction points in order, rx.
    pub vertices: Vec<Vec3>,
    pub length: f64,
    pub delay: f64,
    /// Linear field amplitude including free-space loss and interactions.
    pub amplitude: f64,
    /// Radians, wrapped to (-pi, pi].
    pub phase: f64,
    /// Reflection coefficient or diffraction magnitude per interaction.
    pub interaction_coeffs: Vec<f64>,
}

/// Identity of a blocking body.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BodyId {
    Building(usize),
    Vehicle(usize),
    Occluder(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelResponse {
    pub paths: Vec<RayPath>,
    /// dBm; `f64::NEG_INFINITY` when no path carries power.
    pub rx_power_dbm: f64,
    pub los_clear: bool,
    pub blocking_body: Option<BodyId>,
}

/// All solid bodies for one frame: buildings, sensing vehicles, occluders.
pub fn frame_bodies(scene: &Scene, frame: &Frame) -> Vec<(BodyId, OrientedBox)> {
    let mut out = Vec::with_capacity(scene.buildings.len() + frame.vehicle_poses.len() + 1);
    for (i, b) in scene.buildings.iter().enumerate() {
        out.push((BodyId::Building(i), b.body()));
    }
    for (i, p) in frame.vehicle_poses.iter().enumerate() {
        out.push((BodyId::Vehicle(i), car_box(*p)));
    }
    for (i, p) in frame.occluders.iter().enumerate() {
        out.push((BodyId::Occluder(i), truck_box(*p)));
    }
    out
}

/// Line-of-sight test on the open segment tx→rx. Bodies containing either
/// terminal (e.g. the ego's own body around its antenna) never block.
/// Returns the clear flag and the first blocker by distance along the ray.
pub fn trace_los(scene: &Scene, frame: &Frame, tx: Vec3, rx: Vec3) -> (bool, Option<BodyId>) {
    assert!(tx != rx, "degenerate zero-length ray");
    let mut first: Option<(f64, BodyId)> = None;
    for (id, bx) in frame_bodies(scene, frame) {
        if bx.contains(tx) || bx.contains(rx) {
            continue;
        }
        if let Some((t0, t1)) = bx.segment_interval(tx, rx) {
            if t0 < 1.0 - EPS_T && t1 > EPS_T {
                let entry = t0.max(0.0);
                if first.map_or(true, |(best, _)| entry < best) {
                    first = Some((entry, id));
                }
            }
        }
    }
    match first {
        Some((_, id)) => (false, Some(id)),
        None => (true, None),
    }
}

/// Knife-edge diffraction loss in dB for Fresnel parameter `nu`.
pub fn knife_edge_loss_db(nu: f64) -> f64 {
    if nu <= -0.78 {
        return 0.0;
    }
    let v = nu - 0.1;
    6.9 + 20.0 * ((v * v + 1.0).sqrt() + v).log10()
}

/// Reflecting surface for the image method.
enum Surface<'a> {
    Wall(&'a WallPlane),
    Ground,
}

/// Finite vertical rectangle: one building wall.
struct WallPlane {
    origin: Vec3,
    /// Unit in-plane horizontal direction.
    u: (f64, f64),
    /// Unit outward normal (horizontal).
    n: (f64, f64),
    len: f64,
    height: f64,
    gamma: f64,
}

fn building_walls(scene: &Scene) -> Vec<WallPlane> {
    let mut walls = Vec::with_capacity(scene.buildings.len() * 4);
    for b in &scene.buildings {
        let corners = b.body().footprint_corners();
        for i in 0..4 {
            let (x0, y0) = corners[i];
            let (x1, y1) = corners[(i + 1) % 4];
            let len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
            let u = ((x1 - x0) / len, (y1 - y0) / len);
            walls.push(WallPlane {
                origin: Vec3::new(x0, y0, 0.0),
                u,
                n: (u.1, -u.0),
                len,
                height: b.height,
                gamma: b.reflection_coeff,
            });
        }
    }
    walls
}

impl Surface<'_> {
    fn mirror(&self, p: Vec3) -> Vec3 {
        match self {
            Surface::Wall(w) => {
                let d = (p.x - w.origin.x) * w.n.0 + (p.y - w.origin.y) * w.n.1;
                Vec3::new(p.x - 2.0 * d * w.n.0, p.y - 2.0 * d * w.n.1, p.z)
            }
            Surface::Ground => Vec3::new(p.x, p.y, -p.z),
        }
    }

    /// Intersect the open segment a→b with the surface plane.
    fn intersect(&self, a: Vec3, b: Vec3) -> Option<Vec3> {
        let t = match self {
            Surface::Wall(w) => {
                let den = (b.x - a.x) * w.n.0 + (b.y - a.y) * w.n.1;
                if den.abs() < 1e-12 {
                    return None;
                }
                ((w.origin.x - a.x) * w.n.0 + (w.origin.y - a.y) * w.n.1) / den
            }
            Surface::Ground => {
                let den = b.z - a.z;
                if den.abs() < 1e-12 {
                    return None;
                }
                -a.z / den
            }
        };
        if !(EPS_T..=1.0 - EPS_T).contains(&t) {
            return None;
        }
        Some(a.lerp(b, t))
    }

    fn contains_point(&self, p: Vec3) -> bool {
        match self {
            Surface::Wall(w) => {
                let uc = (p.x - w.origin.x) * w.u.0 + (p.y - w.origin.y) * w.u.1;
                uc >= 0.0 && uc <= w.len && p.z >= 0.0 && p.z <= w.height
            }
            Surface::Ground => true,
        }
    }

    fn outward(&self, p: Vec3) -> bool {
        match self {
            Surface::Wall(w) => (p.x - w.origin.x) * w.n.0 + (p.y - w.origin.y) * w.n.1 > 1e-9,
            Surface::Ground => p.z > 1e-9,
        }
    }

    fn gamma(&self, scene: &Scene) -> f64 {
        match self {
            Surface::Wall(w) => w.gamma,
            Surface::Ground => scene.ground_reflection,
        }
    }
}

/// True when the open sub-segment a→b is blocked by any body. Bodies that
/// contain a terminal of the overall link are skipped.
fn occluded(bodies: &[(BodyId, OrientedBox)], skip: &[bool], a: Vec3, b: Vec3) -> bool {
    bodies
        .iter()
        .zip(skip)
        .any(|((_, bx), &s)| !s && segment_blocked(bx, a, b, EPS_T))
}

fn path_from_vertices(
    kind: PathKind,
    vertices: Vec<Vec3>,
    coeffs: Vec<f64>,
    config: &ChannelConfig,
) -> RayPath {
    let length: f64 = vertices.windows(2).map(|w| w[0].dist(w[1])).sum();
    let mut path = RayPath {
        kind,
        vertices,
        length,
        delay: length / SPEED_OF_LIGHT,
        amplitude: 0.0,
        phase: 0.0,
        interaction_coeffs: coeffs,
    };
    let (a, p) = path_amplitude(&path, config);
    path.amplitude = a;
    path.phase = p;
    path
}

/// Amplitude and phase of a traced path: free-space factor, interaction
/// coefficient product, rain attenuation; phase accumulates the electrical
/// length plus a pi flip per reflection.
pub fn path_amplitude(path: &RayPath, config: &ChannelConfig) -> (f64, f64) {
    assert!(
        path.length > 0.0 && path.length.is_finite(),
        "non-finite path geometry"
    );
    let lambda = config.wavelength();
    let mut alpha = lambda / (4.0 * PI * path.length);
    for c in &path.interaction_coeffs {
        alpha *= c;
    }
    let rain_db = config.rain_attenuation_db_per_km * path.length / 1000.0;
    alpha *= 10f64.powf(-rain_db / 20.0);
    let n_reflections = if path.kind == PathKind::Reflection {
        path.interaction_coeffs.len()
    } else {
        0
    };
    let phase = crate::geom::wrap_angle(
        -2.0 * PI * path.length / lambda + PI * n_reflections as f64,
    );
    (alpha, phase)
}

/// Enumerate propagation paths for one frame.
///
/// Emits (a) the LoS path when clear, (b) image-method specular reflections
/// up to `max_reflection_order` whose unfolded segments are unoccluded, and
/// (c) one knife-edge diffraction path over the first blocker when LoS is
/// blocked.
pub fn trace_paths(
    scene: &Scene,
    frame: &Frame,
    tx: Vec3,
    rx: Vec3,
    config: &ChannelConfig,
) -> Vec<RayPath> {
    config.validate().expect("invalid channel config");
    let bodies = frame_bodies(scene, frame);
    let skip: Vec<bool> = bodies
        .iter()
        .map(|(_, bx)| bx.contains(tx) || bx.contains(rx))
        .collect();

    let mut paths = Vec::new();
    let (clear, blocker) = trace_los(scene, frame, tx, rx);
    if clear {
        paths.push(path_from_vertices(
            PathKind::Los,
            vec![tx, rx],
            Vec::new(),
            config,
        ));
    }

    let walls = building_walls(scene);
    let mut surfaces: Vec<Surface> = walls.iter().map(Surface::Wall).collect();
    surfaces.push(Surface::Ground);

    if config.max_reflection_order >= 1 {
        for s in &surfaces {
            if !s.outward(tx) || !s.outward(rx) {
                continue;
            }
            let img = s.mirror(tx);
            let Some(p1) = s.intersect(img, rx) else {
                continue;
            };
            if !s.contains_point(p1) {
                continue;
            }
            if occluded(&bodies, &skip, tx, p1) || occluded(&bodies, &skip, p1, rx) {
                continue;
            }
            paths.push(path_from_vertices(
                PathKind::Reflection,
                vec![tx, p1, rx],
                vec![s.gamma(scene)],
                config,
            ));
        }
    }

    if config.max_reflection_order >= 2 {
        let tx_side: Vec<usize> = (0..surfaces.len())
            .filter(|&i| surfaces[i].outward(tx))
            .collect();
        let rx_side: Vec<usize> = (0..surfaces.len())
            .filter(|&i| surfaces[i].outward(rx))
            .collect();
        for &i in &tx_side {
            let img1 = surfaces[i].mirror(tx);
            for &j in &rx_side {
                if i == j {
                    continue;
                }
                let s1 = &surfaces[i];
                let s2 = &surfaces[j];
                let img2 = s2.mirror(img1);
                let Some(p2) = s2.intersect(img2, rx) else {
                    continue;
                };
                if !s2.contains_point(p2) {
                    continue;
                }
                let Some(p1) = s1.intersect(img1, p2) else {
                    continue;
                };
                if !s1.contains_point(p1) {
                    continue;
                }
                // Both bounce points must see their neighbors from outside.
                if !s1.outward(p2) || !s2.outward(p1) {
                    continue;
                }
                if occluded(&bodies, &skip, tx, p1)
                    || occluded(&bodies, &skip, p1, p2)
                    || occluded(&bodies, &skip, p2, rx)
                {
                    continue;
                }
                paths.push(path_from_vertices(
                    PathKind::Reflection,
                    vec![tx, p1, p2, rx],
                    vec![s1.gamma(scene), s2.gamma(scene)],
                    config,
                ));
            }
        }
    }

    if !clear {
        if let Some(id) = blocker {
            let bx = bodies
                .iter()
                .find(|(b, _)| *b == id)
                .map(|(_, bx)| *bx)
                .expect("blocker body present");
            if let Some((t0, t1)) = bx.segment_interval(tx, rx) {
                let tm = 0.5 * (t0.max(0.0) + t1.min(1.0));
                let on_line = tx.lerp(rx, tm);
                let edge = Vec3::new(on_line.x, on_line.y, bx.z_max);
                let h = bx.z_max - on_line.z;
                let d1 = tx.dist(edge);
                let d2 = edge.dist(rx);
                let lambda = config.wavelength();
                let nu = h * (2.0 * (d1 + d2) / (lambda * d1 * d2)).sqrt();
                let d_lin = 10f64.powf(-knife_edge_loss_db(nu) / 20.0);
                paths.push(path_from_vertices(
                    PathKind::Diffraction,
                    vec![tx, edge, rx],
                    vec![d_lin],
                    config,
                ));
            }
        }
    }

    paths
}

/// Aggregate traced paths into received power and the LoS flag.
pub fn compute_response(paths: Vec<RayPath>, config: &ChannelConfig) -> ChannelResponse {
    let los_clear = paths.iter().any(|p| p.kind == PathKind::Los);
    if paths.is_empty() {
        return ChannelResponse {
            paths,
            rx_power_dbm: f64::NEG_INFINITY,
            los_clear: false,
            blocking_body: None,
        };
    }
    let noncoherent: f64 = paths.iter().map(|p| p.amplitude * p.amplitude).sum();
    let p_lin = match config.power_mode {
        PowerMode::Noncoherent => noncoherent,
        PowerMode::Coherent => {
            let re: f64 = paths.iter().map(|p| p.amplitude * p.phase.cos()).sum();
            let im: f64 = paths.iter().map(|p| p.amplitude * p.phase.sin()).sum();
            let mag2 = re * re + im * im;
            if mag2 <= CANCELLATION_FLOOR * noncoherent {
                0.0
            } else {
                mag2
            }
        }
    };
    let rx_power_dbm = if p_lin > 0.0 {
        config.tx_power_dbm + 10.0 * p_lin.log10()
    } else {
        f64::NEG_INFINITY
    };
    ChannelResponse {
        paths,
        rx_power_dbm,
        los_clear,
        blocking_body: None,
    }
}

/// Full per-frame channel: trace, aggregate, and attach the first blocker.
pub fn frame_response(
    scene: &Scene,
    frame: &Frame,
    tx: Vec3,
    rx: Vec3,
    config: &ChannelConfig,
) -> ChannelResponse {
    let paths = trace_paths(scene, frame, tx, rx, config);
    let (_, blocker) = trace_los(scene, frame, tx, rx);
    let mut resp = compute_response(paths, config);
    resp.blocking_body = blocker;
    resp
}

/// One tab-separated `trace` dump record: kind, vertices, length, delay,
/// amplitude, phase, interaction coefficients. Floats carry 9 significant
/// digits.
pub fn path_record(p: &RayPath) -> String {
    let verts = p
        .vertices
        .iter()
        .map(|v| format!("{:.8e},{:.8e},{:.8e}", v.x, v.y, v.z))
        .collect::<Vec<_>>()
        .join(";");
    let coeffs = p
        .interaction_coeffs
        .iter()
        .map(|c| format!("{c:.8e}"))
        .collect::<Vec<_>>()
        .join(",");
    format!(
        "{}\t{}\t{:.8e}\t{:.8e}\t{:.8e}\t{:.8e}\t{}",
        p.kind.as_str(),
        verts,
        p.length,
        p.delay,
        p.amplitude,
        p.phase,
        coeffs
    )
}
