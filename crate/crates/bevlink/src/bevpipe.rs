//! Bird's-eye-view pipeline: rasterization of per-agent sensing into metric
//! grids, temporal attention over a short window, rigid warping between
//! agent frames, and multi-agent convolutional aggregation.
//!
//! Grids are H x W x C row-major arrays (`((ix*W)+iy)*C + ch`) anchored at a
//! pose: the grid center sits at the anchor position and +x follows the
//! anchor heading. Channels: occupancy, max height (/5, clamped), camera
//! visibility, log point density.

use crate::autodiff::{Tape, WarpTaps};
use crate::error::{Error, Result};
use crate::geom::{Pose, Vec3};
use crate::sensing::{CamVisGrid, PointCloud};
use ndarray::Array2;
use std::sync::Arc;

pub const CH_OCCUPANCY: usize = 0;
pub const CH_HEIGHT: usize = 1;
pub const CH_CAMVIS: usize = 2;
pub const CH_DENSITY: usize = 3;

/// Points below this height count as ground and do not set occupancy.
pub const GROUND_Z_THRESHOLD: f64 = 0.3;
/// Height channel normalizer: max z / 5 m, clamped to [0, 1].
pub const HEIGHT_NORM: f64 = 5.0;
/// Density channel normalizer: log1p(count) / log1p(64).
pub const DENSITY_NORM_COUNT: f64 = 64.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridConfig {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub cell_size: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            h: 64,
            w: 64,
            channels: 4,
            cell_size: 1.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BevGrid {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub cell_size: f64,
    pub anchor: Pose,
    pub data: Vec<f64>,
}

impl BevGrid {
    pub fn zero(cfg: &GridConfig, anchor: Pose) -> Self {
        BevGrid {
            h: cfg.h,
            w: cfg.w,
            channels: cfg.channels,
            cell_size: cfg.cell_size,
            anchor,
            data: vec![0.0; cfg.h * cfg.w * cfg.channels],
        }
    }

    pub fn at(&self, ix: usize, iy: usize, ch: usize) -> f64 {
        self.data[(ix * self.w + iy) * self.channels + ch]
    }

    pub fn set(&mut self, ix: usize, iy: usize, ch: usize, v: f64) {
        self.data[(ix * self.w + iy) * self.channels + ch] = v;
    }

    pub fn same_lattice(&self, o: &BevGrid) -> bool {
        self.h == o.h && self.w == o.w && self.channels == o.channels && self.cell_size == o.cell_size
    }

    /// View as a (H·W, C) matrix for the tape.
    pub fn to_matrix(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.h * self.w, self.channels), self.data.clone())
            .expect("grid layout")
    }

    pub fn from_matrix(m: &Array2<f64>, like: &BevGrid, anchor: Pose) -> Self {
        assert_eq!(m.dim(), (like.h * like.w, like.channels));
        BevGrid {
            h: like.h,
            w: like.w,
            channels: like.channels,
            cell_size: like.cell_size,
            anchor,
            data: m.iter().cloned().collect(),
        }
    }

    pub fn grid_config(&self) -> GridConfig {
        GridConfig {
            h: self.h,
            w: self.w,
            channels: self.channels,
            cell_size: self.cell_size,
        }
    }
}

/// Time-ordered grids over {t-Δ, …, t+Δ}; all share one anchor and lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalWindow {
    pub grids: Vec<BevGrid>,
}

impl TemporalWindow {
    pub fn validate(&self) -> Result<()> {
        if self.grids.is_empty() {
            return Err(Error::validation("empty temporal window"));
        }
        let first = &self.grids[0];
        for g in &self.grids[1..] {
            if !g.same_lattice(first) {
                return Err(Error::validation("temporal window lattice mismatch"));
            }
            if g.anchor != first.anchor {
                return Err(Error::validation("temporal window anchor mismatch"));
            }
        }
        Ok(())
    }
}

/// Trainable weights of the per-cell temporal attention.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
}

/// Trainable weights of the 3x3 multi-agent aggregation convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// (9 · slots · C, C), tap-major then input channel.
    pub kernel: Array2<f64>,
    /// (1, C)
    pub bias: Array2<f64>,
}

impl ConvParams {
    pub fn slots(&self, channels: usize) -> usize {
        self.kernel.nrows() / (9 * channels)
    }
}

/// Rasterize one agent's weathered cloud and camera-visibility grid into a
/// BEV grid anchored at the agent pose.
pub fn rasterize_bev(
    cloud: &PointCloud,
    camvis: &CamVisGrid,
    pose: Pose,
    cfg: &GridConfig,
) -> BevGrid {
    assert_eq!(cfg.channels, 4, "rasterizer produces the 4 standard channels");
    assert_eq!(camvis.h, cfg.h);
    assert_eq!(camvis.w, cfg.w);
    let mut grid = BevGrid::zero(cfg, pose);
    let mut counts = vec![0u32; cfg.h * cfg.w];
    for p in &cloud.points {
        debug_assert!(p.is_finite());
        let ix = (p.x / cfg.cell_size + cfg.h as f64 / 2.0).floor();
        let iy = (p.y / cfg.cell_size + cfg.w as f64 / 2.0).floor();
        if ix < 0.0 || iy < 0.0 || ix >= cfg.h as f64 || iy >= cfg.w as f64 {
            continue;
        }
        let (ix, iy) = (ix as usize, iy as usize);
        counts[ix * cfg.w + iy] += 1;
        if p.z > GROUND_Z_THRESHOLD {
            grid.set(ix, iy, CH_OCCUPANCY, 1.0);
        }
        let h_norm = (p.z / HEIGHT_NORM).clamp(0.0, 1.0);
        if h_norm > grid.at(ix, iy, CH_HEIGHT) {
            grid.set(ix, iy, CH_HEIGHT, h_norm);
        }
    }
    let dens_norm = (1.0 + DENSITY_NORM_COUNT).ln();
    for ix in 0..cfg.h {
        for iy in 0..cfg.w {
            let c = counts[ix * cfg.w + iy];
            if c > 0 {
                let d = ((1.0 + c as f64).ln() / dens_norm).min(1.0);
                grid.set(ix, iy, CH_DENSITY, d);
            }
            grid.set(ix, iy, CH_CAMVIS, camvis.at(ix, iy));
        }
    }
    grid
}

/// Bilinear taps realizing the planar rigid transform from `src` anchor
/// coordinates into `dst` anchor coordinates. Identical anchors produce an
/// exact identity; integer-cell translations produce exact shifts.
pub fn make_warp_taps(src: Pose, dst: Pose, h: usize, w: usize, cell: f64) -> WarpTaps {
    let a = dst.yaw - src.yaw;
    let (sa, ca) = a.sin_cos();
    let dx = dst.x - src.x;
    let dy = dst.y - src.y;
    let (ss, cs) = src.yaw.sin_cos();
    let tx = cs * dx + ss * dy;
    let ty = -ss * dx + cs * dy;
    let mut taps = Vec::with_capacity(h * w);
    for ix in 0..h {
        for iy in 0..w {
            let px = (ix as f64 - h as f64 / 2.0 + 0.5) * cell;
            let py = (iy as f64 - w as f64 / 2.0 + 0.5) * cell;
            // Source-local location of this destination cell center.
            let qx = ca * px - sa * py + tx;
            let qy = sa * px + ca * py + ty;
            let u = qx / cell + h as f64 / 2.0 - 0.5;
            let v = qy / cell + w as f64 / 2.0 - 0.5;
            let i0 = u.floor();
            let j0 = v.floor();
            let fu = u - i0;
            let fv = v - j0;
            let mut t4 = [(0u32, 0.0f64); 4];
            let mut n = 0;
            for (di, dj, wgt) in [
                (0.0, 0.0, (1.0 - fu) * (1.0 - fv)),
                (0.0, 1.0, (1.0 - fu) * fv),
                (1.0, 0.0, fu * (1.0 - fv)),
                (1.0, 1.0, fu * fv),
            ] {
                let si = i0 + di;
                let sj = j0 + dj;
                if si < 0.0 || sj < 0.0 || si >= h as f64 || sj >= w as f64 || wgt == 0.0 {
                    continue;
                }
                t4[n] = ((si as u32) * w as u32 + sj as u32, wgt);
                n += 1;
            }
            taps.push(t4);
        }
    }
    WarpTaps {
        taps,
        n_src_rows: h * w,
    }
}

/// Content-dependent attention over the window's time slots, per cell.
/// `query_slot` indexes the current frame inside the window.
pub fn temporal_fuse(
    window: &TemporalWindow,
    params: &TemporalParams,
    query_slot: usize,
) -> Result<BevGrid> {
    window.validate()?;
    if query_slot >= window.grids.len() {
        return Err(Error::validation("query slot outside window"));
    }
    let c = window.grids[0].channels;
    if params.wq.dim() != (c, c) || params.wk.dim() != (c, c) || params.wv.dim() != (c, c) {
        return Err(Error::validation("temporal attention weight shape mismatch"));
    }
    let mut tape = Tape::new();
    let slots: Vec<_> = window
        .grids
        .iter()
        .map(|g| tape.leaf(g.to_matrix()))
        .collect();
    let wq = tape.leaf(params.wq.clone());
    let wk = tape.leaf(params.wk.clone());
    let wv = tape.leaf(params.wv.clone());
    let out = tape.temporal_attn(&slots, wq, wk, wv, query_slot);
    Ok(BevGrid::from_matrix(
        tape.value(out),
        &window.grids[0],
        window.grids[0].anchor,
    ))
}

/// Resample a grid into the ego anchor frame (bilinear, zero padding).
pub fn warp_to_ego(grid: &BevGrid, ego_anchor: Pose) -> BevGrid {
    let taps = Arc::new(make_warp_taps(
        grid.anchor,
        ego_anchor,
        grid.h,
        grid.w,
        grid.cell_size,
    ));
    let mut tape = Tape::new();
    let x = tape.leaf(grid.to_matrix());
    let out = tape.warp(x, taps);
    BevGrid::from_matrix(tape.value(out), grid, ego_anchor)
}

/// Channel-concatenate ego-anchored agent grids (zero grids for missing
/// slots) and fuse with the trainable 3x3 convolution.
pub fn aggregate_agents(warped: &[BevGrid], params: &ConvParams) -> Result<BevGrid> {
    if warped.is_empty() {
        return Err(Error::validation("aggregate_agents needs at least one grid"));
    }
    let first = &warped[0];
    let c = first.channels;
    for g in &warped[1..] {
        if !g.same_lattice(first) {
            return Err(Error::validation("aggregation lattice mismatch"));
        }
        if g.anchor != first.anchor {
            return Err(Error::validation("aggregation anchor mismatch"));
        }
    }
    let slots = params.slots(c);
    if warped.len() > slots {
        return Err(Error::validation(format!(
            "{} grids but kernel has {} agent slots",
            warped.len(),
            slots
        )));
    }
    if params.kernel.nrows() != 9 * slots * c || params.kernel.ncols() != c {
        return Err(Error::validation("aggregation kernel shape mismatch"));
    }
    if params.bias.dim() != (1, c) {
        return Err(Error::validation("aggregation bias shape mismatch"));
    }
    let mut tape = Tape::new();
    let zero = BevGrid::zero(&first.grid_config(), first.anchor);
    let mut parts = Vec::with_capacity(slots);
    for i in 0..slots {
        let g = warped.get(i).unwrap_or(&zero);
        parts.push(tape.leaf(g.to_matrix()));
    }
    let cat = tape.concat_cols(&parts);
    let kernel = tape.leaf(params.kernel.clone());
    let bias = tape.leaf(params.bias.clone());
    let out = tape.conv3x3(cat, kernel, bias, first.h, first.w);
    Ok(BevGrid::from_matrix(tape.value(out), first, first.anchor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensing::CamVisGrid;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn small_cfg(h: usize, w: usize, c: usize) -> GridConfig {
        GridConfig {
            h,
            w,
            channels: c,
            cell_size: 1.25,
        }
    }

    fn origin() -> Pose {
        Pose::new(0.0, 0.0, 0.0, 0.0)
    }

    fn randn_grid(cfg: &GridConfig, anchor: Pose, seed: u64) -> BevGrid {
        let mut rng = crate::seeded::stream(seed, "grid", &[]);
        let mut g = BevGrid::zero(cfg, anchor);
        for v in g.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        g
    }

    /// Box blur repeated several times ≈ Gaussian smoothing.
    fn blur(grid: &mut BevGrid) {
        for _ in 0..6 {
            let src = grid.clone();
            for ix in 0..grid.h {
                for iy in 0..grid.w {
                    for ch in 0..grid.channels {
                        let mut acc = 0.0;
                        let mut n = 0.0;
                        for dx in -1i64..=1 {
                            for dy in -1i64..=1 {
                                let jx = ix as i64 + dx;
                                let jy = iy as i64 + dy;
                                if jx < 0 || jy < 0 || jx >= grid.h as i64 || jy >= grid.w as i64 {
                                    continue;
                                }
                                acc += src.at(jx as usize, jy as usize, ch);
                                n += 1.0;
                            }
                        }
                        grid.set(ix, iy, ch, acc / n);
                    }
                }
            }
        }
    }

    #[test]
    fn empty_inputs_rasterize_to_zero() {
        let cfg = GridConfig::default();
        let g = rasterize_bev(
            &PointCloud { points: vec![] },
            &CamVisGrid::zero(cfg.h, cfg.w, cfg.cell_size),
            origin(),
            &cfg,
        );
        assert!(g.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_point_lands_in_expected_cell() {
        let cfg = GridConfig::default();
        let g = rasterize_bev(
            &PointCloud {
                points: vec![Vec3::new(10.0, 0.0, 1.0)],
            },
            &CamVisGrid::zero(cfg.h, cfg.w, cfg.cell_size),
            origin(),
            &cfg,
        );
        // 10 m / 1.25 m = 8 cells ahead of the center row 32.
        assert_eq!(g.at(40, 32, CH_OCCUPANCY), 1.0);
        assert_relative_eq!(g.at(40, 32, CH_HEIGHT), 0.2);
        for ix in 0..cfg.h {
            for iy in 0..cfg.w {
                if (ix, iy) != (40, 32) {
                    assert_eq!(g.at(ix, iy, CH_OCCUPANCY), 0.0);
                }
            }
        }
    }

    #[test]
    fn density_follows_log_formula() {
        let cfg = GridConfig::default();
        let g = rasterize_bev(
            &PointCloud {
                points: vec![Vec3::new(10.0, 0.0, 1.0), Vec3::new(10.1, 0.1, 0.1)],
            },
            &CamVisGrid::zero(cfg.h, cfg.w, cfg.cell_size),
            origin(),
            &cfg,
        );
        let want = (3.0f64).ln() / (65.0f64).ln();
        assert_relative_eq!(g.at(40, 32, CH_DENSITY), want, epsilon = 1e-12);
        assert!((want - 0.2632).abs() < 1e-3);
    }

    #[test]
    fn ground_points_do_not_occupy() {
        let cfg = GridConfig::default();
        let g = rasterize_bev(
            &PointCloud {
                points: vec![Vec3::new(5.0, 5.0, 0.1)],
            },
            &CamVisGrid::zero(cfg.h, cfg.w, cfg.cell_size),
            origin(),
            &cfg,
        );
        let ix = (5.0 / 1.25 + 32.0) as usize;
        assert_eq!(g.at(ix, ix, CH_OCCUPANCY), 0.0);
        assert!(g.at(ix, ix, CH_DENSITY) > 0.0);
    }

    #[test]
    fn temporal_fuse_single_slot_identity_kernel() {
        let cfg = small_cfg(3, 3, 2);
        let g = randn_grid(&cfg, origin(), 1);
        let params = TemporalParams {
            wq: Array2::eye(2),
            wk: Array2::eye(2),
            wv: Array2::eye(2),
        };
        let out = temporal_fuse(
            &TemporalWindow {
                grids: vec![g.clone()],
            },
            &params,
            0,
        )
        .unwrap();
        for (a, b) in out.data.iter().zip(&g.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn temporal_fuse_hand_computed_three_slots() {
        // 1x1 grid, 2 channels, hand-sized weights; brute-force the 3-slot
        // attention arithmetic independently.
        let cfg = small_cfg(1, 1, 2);
        let mk = |a: f64, b: f64| {
            let mut g = BevGrid::zero(&cfg, origin());
            g.data = vec![a, b];
            g
        };
        let window = TemporalWindow {
            grids: vec![mk(1.0, 0.0), mk(0.5, -0.5), mk(0.0, 2.0)],
        };
        let wq = ndarray::arr2(&[[0.3, -0.1], [0.2, 0.4]]);
        let wk = ndarray::arr2(&[[0.1, 0.5], [-0.3, 0.2]]);
        let wv = ndarray::arr2(&[[1.0, 0.0], [0.5, -1.0]]);
        let params = TemporalParams {
            wq: wq.clone(),
            wk: wk.clone(),
            wv: wv.clone(),
        };
        let out = temporal_fuse(&window, &params, 1).unwrap();

        let xs = [[1.0, 0.0], [0.5, -0.5], [0.0, 2.0]];
        let matvec = |w: &Array2<f64>, x: &[f64; 2]| {
            [
                x[0] * w[(0, 0)] + x[1] * w[(1, 0)],
                x[0] * w[(0, 1)] + x[1] * w[(1, 1)],
            ]
        };
        let q = matvec(&wq, &xs[1]);
        let mut scores = [0.0; 3];
        for t in 0..3 {
            let k = matvec(&wk, &xs[t]);
            scores[t] = (q[0] * k[0] + q[1] * k[1]) / (2.0f64).sqrt();
        }
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut want = [0.0; 2];
        for t in 0..3 {
            let v = matvec(&wv, &xs[t]);
            want[0] += exps[t] / z * v[0];
            want[1] += exps[t] / z * v[1];
        }
        assert_relative_eq!(out.data[0], want[0], epsilon = 1e-12);
        assert_relative_eq!(out.data[1], want[1], epsilon = 1e-12);
    }

    #[test]
    fn temporal_fuse_output_in_value_convex_hull() {
        let cfg = small_cfg(4, 4, 3);
        let window = TemporalWindow {
            grids: (0..3)
                .map(|i| randn_grid(&cfg, origin(), 10 + i))
                .collect(),
        };
        let mut rng = crate::seeded::stream(77, "hull", &[]);
        let params = TemporalParams {
            wq: Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0)),
            wk: Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0)),
            wv: Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0)),
        };
        let out = temporal_fuse(&window, &params, 1).unwrap();
        for ix in 0..4 {
            for iy in 0..4 {
                for ch in 0..3 {
                    // Per-coordinate bounds over {Wv·x_t}.
                    let mut lo = f64::INFINITY;
                    let mut hi = f64::NEG_INFINITY;
                    for g in &window.grids {
                        let x = [g.at(ix, iy, 0), g.at(ix, iy, 1), g.at(ix, iy, 2)];
                        let v = x[0] * params.wv[(0, ch)]
                            + x[1] * params.wv[(1, ch)]
                            + x[2] * params.wv[(2, ch)];
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                    let y = out.at(ix, iy, ch);
                    assert!(y >= lo - 1e-12 && y <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn temporal_fuse_rejects_mismatched_anchor() {
        let cfg = small_cfg(2, 2, 2);
        let a = randn_grid(&cfg, origin(), 1);
        let b = randn_grid(&cfg, Pose::new(1.0, 0.0, 0.0, 0.0), 2);
        let params = TemporalParams {
            wq: Array2::eye(2),
            wk: Array2::eye(2),
            wv: Array2::eye(2),
        };
        assert!(temporal_fuse(
            &TemporalWindow {
                grids: vec![a, b]
            },
            &params,
            0
        )
        .is_err());
    }

    #[test]
    fn warp_identity_is_exact() {
        let cfg = GridConfig::default();
        let anchor = Pose::new(13.7, -42.1, 0.0, 0.83);
        let g = randn_grid(&cfg, anchor, 3);
        let out = warp_to_ego(&g, anchor);
        assert_eq!(out.data, g.data);
    }

    #[test]
    fn integer_translation_is_exact_shift() {
        let cfg = small_cfg(8, 8, 2);
        let g = randn_grid(&cfg, origin(), 4);
        // Destination anchor 2 cells ahead in x: content shifts back.
        let dst = Pose::new(2.0 * cfg.cell_size, 0.0, 0.0, 0.0);
        let out = warp_to_ego(&g, dst);
        for ix in 0..8usize {
            for iy in 0..8 {
                for ch in 0..2 {
                    let want = if ix + 2 < 8 { g.at(ix + 2, iy, ch) } else { 0.0 };
                    assert_eq!(out.at(ix, iy, ch), want, "at ({ix},{iy},{ch})");
                }
            }
        }
    }

    #[test]
    fn warp_round_trip_on_blurred_field() {
        let cfg = GridConfig::default();
        let mut g = BevGrid::zero(&cfg, origin());
        let mut rng = crate::seeded::stream(5, "rt", &[]);
        for ix in 14..50 {
            for iy in 14..50 {
                for ch in 0..4 {
                    g.set(ix, iy, ch, rng.gen_range(0.0..1.0));
                }
            }
        }
        blur(&mut g);
        let xi = Pose::new(4.1, -2.6, 0.0, 0.15);
        let there = warp_to_ego(&g, xi);
        let mut back_anchor_grid = there.clone();
        back_anchor_grid.anchor = there.anchor;
        let back = warp_to_ego(&back_anchor_grid, origin());
        let max_err = back
            .data
            .iter()
            .zip(&g.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 0.02, "round-trip error {max_err}");
    }

    #[test]
    fn warp_preserves_interior_mass_under_translation() {
        let cfg = small_cfg(16, 16, 1);
        let mut g = BevGrid::zero(&cfg, origin());
        for ix in 5..10 {
            for iy in 5..10 {
                g.set(ix, iy, 0, 1.0);
            }
        }
        let dst = Pose::new(0.4 * cfg.cell_size, -0.7 * cfg.cell_size, 0.0, 0.0);
        let out = warp_to_ego(&g, dst);
        let m0: f64 = g.data.iter().sum();
        let m1: f64 = out.data.iter().sum();
        assert!((m0 - m1).abs() < 1e-9, "mass {m0} -> {m1}");
    }

    #[test]
    fn warp_maps_blob_centroid_rigidly() {
        let cfg = small_cfg(32, 32, 1);
        let mut g = BevGrid::zero(&cfg, origin());
        // Small square blob away from the center.
        for ix in 18..21 {
            for iy in 8..11 {
                g.set(ix, iy, 0, 1.0);
            }
        }
        let dst = Pose::new(3.0, 1.5, 0.0, 0.35);
        let out = warp_to_ego(&g, dst);
        let centroid = |grid: &BevGrid| {
            let mut sx = 0.0;
            let mut sy = 0.0;
            let mut m = 0.0;
            for ix in 0..grid.h {
                for iy in 0..grid.w {
                    let v = grid.at(ix, iy, 0);
                    sx += v * (ix as f64 - grid.h as f64 / 2.0 + 0.5) * grid.cell_size;
                    sy += v * (iy as f64 - grid.w as f64 / 2.0 + 0.5) * grid.cell_size;
                    m += v;
                }
            }
            (sx / m, sy / m)
        };
        let (cx, cy) = centroid(&g);
        let (ox, oy) = centroid(&out);
        // World coordinates of both centroids must agree within 0.6 cells.
        let src_world = origin().local_to_world(Vec3::new(cx, cy, 0.0));
        let dst_world = dst.local_to_world(Vec3::new(ox, oy, 0.0));
        let err = src_world.sub(dst_world).norm();
        assert!(err < 0.6 * cfg.cell_size, "centroid drift {err}");
    }

    #[test]
    fn aggregate_identity_kernel_passes_input_through() {
        let cfg = small_cfg(6, 6, 3);
        let g = randn_grid(&cfg, origin(), 8);
        let slots = 2;
        let mut kernel = Array2::zeros((9 * slots * 3, 3));
        // Center tap (index 4), agent slot 0, identity on channels.
        for ch in 0..3 {
            kernel[(4 * slots * 3 + ch, ch)] = 1.0;
        }
        let params = ConvParams {
            kernel,
            bias: Array2::zeros((1, 3)),
        };
        let out = aggregate_agents(&[g.clone()], &params).unwrap();
        for (a, b) in out.data.iter().zip(&g.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_zero_inputs_zero_bias_is_zero() {
        let cfg = small_cfg(4, 4, 2);
        let z = BevGrid::zero(&cfg, origin());
        let params = ConvParams {
            kernel: Array2::from_elem((9 * 3 * 2, 2), 0.37),
            bias: Array2::zeros((1, 2)),
        };
        let out = aggregate_agents(&[z.clone(), z.clone(), z], &params).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aggregate_rejects_too_many_grids() {
        let cfg = small_cfg(4, 4, 2);
        let z = BevGrid::zero(&cfg, origin());
        let params = ConvParams {
            kernel: Array2::zeros((9 * 2 * 2, 2)),
            bias: Array2::zeros((1, 2)),
        };
        assert!(aggregate_agents(&[z.clone(), z.clone(), z], &params).is_err());
    }

    #[test]
    fn aggregate_permutation_covariant_with_kernel_slices() {
        let cfg = small_cfg(5, 5, 2);
        let a = randn_grid(&cfg, origin(), 15);
        let b = randn_grid(&cfg, origin(), 16);
        let mut rng = crate::seeded::stream(17, "perm", &[]);
        let kernel = Array2::from_shape_fn((9 * 2 * 2, 2), |_| rng.gen_range(-1.0..1.0));
        let bias = Array2::from_shape_fn((1, 2), |_| rng.gen_range(-1.0..1.0));
        // Swap the per-agent channel groups inside every tap block.
        let mut swapped = kernel.clone();
        for tap in 0..9 {
            for ch in 0..2 {
                for co in 0..2 {
                    swapped[(tap * 4 + ch, co)] = kernel[(tap * 4 + 2 + ch, co)];
                    swapped[(tap * 4 + 2 + ch, co)] = kernel[(tap * 4 + ch, co)];
                }
            }
        }
        let out1 = aggregate_agents(
            &[a.clone(), b.clone()],
            &ConvParams {
                kernel,
                bias: bias.clone(),
            },
        )
        .unwrap();
        let out2 = aggregate_agents(
            &[b, a],
            &ConvParams {
                kernel: swapped,
                bias,
            },
        )
        .unwrap();
        for (x, y) in out1.data.iter().zip(&out2.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
