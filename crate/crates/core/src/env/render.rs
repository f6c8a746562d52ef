//! Deterministic software rasterizer for the two tasks.
//!
//! Frames are square RGB images with channels in `[0, 1]`, drawn with
//! distance-field anti-aliasing (one-pixel soft edges) so sprites move
//! smoothly at small resolutions. The world is a square of half-extent
//! 1.1 centered on the origin; row 0 is the top of the image.
//!
//! Distraction backgrounds are procedural: a scrolling 4×4 grid of colored
//! tiles blended with scrolling value noise, both seeded by the distractor
//! id. Severity controls the blend contrast against the plain background
//! and the scroll speed. Sprites are always drawn on top, so distraction
//! is a pure observation shift.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sim::{arm_fk, ARM_L1, ARM_L2};
use super::{EnvConfig, ProprioState, Severity, Task};

/// Half-extent of the rendered world square.
const VIEW_HALF: f64 = 1.1;

const BASE_COLOR: [f64; 3] = [0.10, 0.11, 0.13];
const TARGET_COLOR: [f64; 3] = [0.20, 0.85, 0.35];
const BALL_COLOR: [f64; 3] = [1.0, 0.82, 0.25];
const SHOULDER_COLOR: [f64; 3] = [0.45, 0.47, 0.52];
const LINK1_COLOR: [f64; 3] = [0.55, 0.72, 0.95];
const LINK2_COLOR: [f64; 3] = [0.65, 0.80, 1.00];
const TIP_COLOR: [f64; 3] = [0.95, 0.97, 1.00];

/// Number of tiles per edge in the distractor grid, and lattice points per
/// edge in its value-noise layer.
const TILE_GRID: usize = 4;
const NOISE_GRID: usize = 8;

/// One rendered RGB frame, row-major `[row, col, channel]`, values in
/// `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    size: usize,
    data: Vec<f64>,
}

impl Frame {
    pub fn new(size: usize) -> Self {
        Frame {
            size,
            data: vec![0.0; size * size * 3],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.size + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn blend(&mut self, row: usize, col: usize, color: [f64; 3], alpha: f64) {
        let i = (row * self.size + col) * 3;
        for (px, c) in self.data[i..i + 3].iter_mut().zip(color) {
            *px += alpha * (c - *px);
        }
    }

    /// 8-bit quantization, `round(255 * value)`. This is the storage format
    /// for datasets; dequantize with [`Frame::from_quantized`].
    pub fn quantize(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&x| (255.0 * x.clamp(0.0, 1.0)).round() as u8)
            .collect()
    }

    pub fn from_quantized(size: usize, bytes: &[u8]) -> Self {
        assert_eq!(bytes.len(), size * size * 3, "quantized frame length");
        Frame {
            size,
            data: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }

    /// Builds a frame from raw channel values (row-major `[row, col, rgb]`),
    /// clamping each value into `[0, 1]`. Used to wrap model outputs, which
    /// can slightly overshoot the pixel range.
    pub fn from_data(size: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), size * size * 3, "frame buffer length");
        Frame {
            size,
            data: data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// Write the frame as a PNG (8-bit quantized).
    pub fn to_png(&self, path: &Path) -> std::io::Result<()> {
        let img = image::RgbImage::from_raw(self.size as u32, self.size as u32, self.quantize())
            .expect("buffer length matches dimensions");
        img.save(path).map_err(std::io::Error::other)
    }
}

/// Pixel-grid geometry: maps between world coordinates and pixel centers.
struct View {
    size: usize,
    /// World units per pixel.
    px: f64,
}

impl View {
    fn new(size: usize) -> Self {
        View {
            size,
            px: 2.0 * VIEW_HALF / size as f64,
        }
    }

    fn world_x(&self, col: usize) -> f64 {
        -VIEW_HALF + (col as f64 + 0.5) * self.px
    }

    fn world_y(&self, row: usize) -> f64 {
        VIEW_HALF - (row as f64 + 0.5) * self.px
    }

    /// Pixel rows/cols whose centers might fall within `pad` of the world
    /// interval, clamped to the image.
    fn col_span(&self, x0: f64, x1: f64, pad: f64) -> (usize, usize) {
        let lo = ((x0 - pad + VIEW_HALF) / self.px - 1.0).floor().max(0.0) as usize;
        let hi = ((x1 + pad + VIEW_HALF) / self.px + 1.0).ceil();
        (lo, (hi as usize).min(self.size))
    }

    fn row_span(&self, y0: f64, y1: f64, pad: f64) -> (usize, usize) {
        // y decreases with row index, so the top of the span is y1.
        let lo = ((VIEW_HALF - y1 - pad) / self.px - 1.0).floor().max(0.0) as usize;
        let hi = ((VIEW_HALF - y0 + pad) / self.px + 1.0).ceil();
        (lo, (hi as usize).min(self.size))
    }
}

/// Render one frame. Pure: the same `(config, state, substep)` always
/// produces identical pixels. `substep` drives distractor motion only.
pub fn render_state(config: &EnvConfig, state: &ProprioState, substep: u64) -> Frame {
    let mut frame = match &config.distraction {
        None => {
            let mut f = Frame::new(config.render_size);
            for px in f.data.chunks_mut(3) {
                px.copy_from_slice(&BASE_COLOR);
            }
            f
        }
        Some(d) => distraction_background(d.severity, d.id.raw(), substep, config.render_size),
    };
    let view = View::new(config.render_size);
    let scale = config.scale();
    match config.task {
        Task::Pointmass => {
            draw_disc(
                &mut frame,
                &view,
                state.target[0],
                state.target[1],
                0.10,
                TARGET_COLOR,
            );
            let radius = 0.07 + 0.07 * scale;
            draw_disc(
                &mut frame,
                &view,
                state.positions[0],
                state.positions[1],
                radius,
                BALL_COLOR,
            );
        }
        Task::Arm => {
            draw_disc(
                &mut frame,
                &view,
                state.target[0],
                state.target[1],
                0.08,
                TARGET_COLOR,
            );
            let (l1, l2) = (ARM_L1 * scale, ARM_L2 * scale);
            let (t1, t2) = (state.positions[0], state.positions[1]);
            let elbow = (l1 * t1.cos(), l1 * t1.sin());
            let tip = arm_fk(l1, l2, t1, t2);
            draw_segment(&mut frame, &view, (0.0, 0.0), elbow, 0.035, LINK1_COLOR);
            draw_segment(&mut frame, &view, elbow, tip, 0.035, LINK2_COLOR);
            draw_disc(&mut frame, &view, 0.0, 0.0, 0.06, SHOULDER_COLOR);
            draw_disc(&mut frame, &view, tip.0, tip.1, 0.05, TIP_COLOR);
        }
    }
    frame
}

/// The distractor background on its own (what the frame looks like behind
/// the sprites). Exposed for inspection and for tests that measure how
/// much each severity perturbs pixels over time.
pub fn distraction_background(severity: Severity, id: u8, substep: u64, size: usize) -> Frame {
    let contrast = severity.contrast();
    let speed = severity.scroll_speed();
    let offset = speed * substep as f64;

    // Per-id pattern assets, regenerated each call (a few hundred draws).
    let mut palette_rng = ChaCha8Rng::seed_from_u64(0xD15C_0000 ^ id as u64);
    let mut palette = [[0.0f64; 3]; TILE_GRID * TILE_GRID];
    for color in palette.iter_mut() {
        for ch in color.iter_mut() {
            *ch = palette_rng.random_range(0.12..0.95);
        }
    }
    let mut noise_rng = ChaCha8Rng::seed_from_u64(0xD15C_1000 ^ id as u64);
    let mut lattice = [[0.0f64; NOISE_GRID]; NOISE_GRID];
    for row in lattice.iter_mut() {
        for v in row.iter_mut() {
            *v = noise_rng.random::<f64>();
        }
    }

    let tile_px = size as f64 / TILE_GRID as f64;
    let noise_scale = NOISE_GRID as f64 / size as f64;
    let mut frame = Frame::new(size);
    for row in 0..size {
        for col in 0..size {
            // Tiles scroll down-right; noise drifts the other way at a
            // slower rate so the two layers visibly shear.
            let u = (col as f64 + offset).rem_euclid(size as f64 * 1e9);
            let v = (row as f64 + 0.5 * offset).rem_euclid(size as f64 * 1e9);
            let ti = (v / tile_px).floor() as usize % TILE_GRID;
            let tj = (u / tile_px).floor() as usize % TILE_GRID;
            let tile = palette[ti * TILE_GRID + tj];

            let nx = (col as f64 - 0.31 * offset) * noise_scale;
            let ny = (row as f64 + 0.17 * offset) * noise_scale;
            let g = sample_lattice(&lattice, nx, ny);

            let i = (row * size + col) * 3;
            for ch in 0..3 {
                let pattern = 0.65 * tile[ch] + 0.35 * g;
                frame.data[i + ch] = BASE_COLOR[ch] + contrast * (pattern - BASE_COLOR[ch]);
            }
        }
    }
    frame
}

/// Bilinear sample of a toroidally-wrapped noise lattice.
fn sample_lattice(lattice: &[[f64; NOISE_GRID]; NOISE_GRID], x: f64, y: f64) -> f64 {
    let xw = x.rem_euclid(NOISE_GRID as f64);
    let yw = y.rem_euclid(NOISE_GRID as f64);
    let (x0, y0) = (
        xw.floor() as usize % NOISE_GRID,
        yw.floor() as usize % NOISE_GRID,
    );
    let (x1, y1) = ((x0 + 1) % NOISE_GRID, (y0 + 1) % NOISE_GRID);
    let (fx, fy) = (xw.fract(), yw.fract());
    let top = lattice[y0][x0] * (1.0 - fx) + lattice[y0][x1] * fx;
    let bottom = lattice[y1][x0] * (1.0 - fx) + lattice[y1][x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

fn draw_disc(frame: &mut Frame, view: &View, cx: f64, cy: f64, radius: f64, color: [f64; 3]) {
    let pad = radius + view.px;
    let (c0, c1) = view.col_span(cx, cx, pad);
    let (r0, r1) = view.row_span(cy, cy, pad);
    for row in r0..r1 {
        for col in c0..c1 {
            let dx = view.world_x(col) - cx;
            let dy = view.world_y(row) - cy;
            let dist = (dx * dx + dy * dy).sqrt();
            let alpha = ((radius - dist) / view.px + 0.5).clamp(0.0, 1.0);
            if alpha > 0.0 {
                frame.blend(row, col, color, alpha);
            }
        }
    }
}

fn draw_segment(
    frame: &mut Frame,
    view: &View,
    a: (f64, f64),
    b: (f64, f64),
    half_width: f64,
    color: [f64; 3],
) {
    let pad = half_width + view.px;
    let (c0, c1) = view.col_span(a.0.min(b.0), a.0.max(b.0), pad);
    let (r0, r1) = view.row_span(a.1.min(b.1), a.1.max(b.1), pad);
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let len2 = (abx * abx + aby * aby).max(1e-12);
    for row in r0..r1 {
        for col in c0..c1 {
            let (px, py) = (view.world_x(col), view.world_y(row));
            let t = (((px - a.0) * abx + (py - a.1) * aby) / len2).clamp(0.0, 1.0);
            let dx = px - (a.0 + t * abx);
            let dy = py - (a.1 + t * aby);
            let dist = (dx * dx + dy * dy).sqrt();
            let alpha = ((half_width - dist) / view.px + 0.5).clamp(0.0, 1.0);
            if alpha > 0.0 {
                frame.blend(row, col, color, alpha);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{DistractorId, DynamicsVariant};

    fn centered_pm_state() -> ProprioState {
        ProprioState {
            positions: vec![0.0, 0.0],
            velocities: vec![0.0, 0.0],
            target: vec![0.0, 0.0],
        }
    }

    #[test]
    fn plain_background_is_the_constant_base_color() {
        let cfg = EnvConfig::new(Task::Pointmass);
        let frame = render_state(&cfg, &centered_pm_state(), 0);
        for (row, col) in [(0, 0), (0, 31), (31, 0), (31, 31)] {
            assert_eq!(frame.pixel(row, col), BASE_COLOR, "corner ({row},{col})");
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let cfg = EnvConfig::new(Task::Arm).with_distraction(Severity::High, DistractorId::test(2));
        let state = ProprioState {
            positions: vec![0.4, -0.9],
            velocities: vec![0.0, 0.0],
            target: vec![0.3, 0.2],
        };
        let a = render_state(&cfg, &state, 123);
        let b = render_state(&cfg, &state, 123);
        assert_eq!(a, b);
        let c = render_state(&cfg, &state, 124);
        assert_ne!(a, c, "distractor must move between substeps");
    }

    #[test]
    fn severity_orders_background_temporal_variance() {
        let size = 32;
        let mut variances = Vec::new();
        for severity in Severity::ALL {
            let frames: Vec<Frame> = (0..100)
                .map(|k| distraction_background(severity, 4, k * 2, size))
                .collect();
            let n = frames.len() as f64;
            let mut total = 0.0;
            for i in 0..size * size * 3 {
                let mean: f64 = frames.iter().map(|f| f.data()[i]).sum::<f64>() / n;
                let var: f64 = frames
                    .iter()
                    .map(|f| (f.data()[i] - mean).powi(2))
                    .sum::<f64>()
                    / n;
                total += var;
            }
            variances.push(total / (size * size * 3) as f64);
        }
        assert!(
            variances[0] < variances[1] && variances[1] < variances[2],
            "variances not increasing: {variances:?}"
        );
    }

    #[test]
    fn distinct_distractor_ids_give_distinct_patterns() {
        let a = distraction_background(Severity::Moderate, 0, 10, 32);
        let b = distraction_background(Severity::Moderate, 1, 10, 32);
        assert_ne!(a, b);
    }

    #[test]
    fn sprites_cover_the_distractor() {
        let cfg = EnvConfig::new(Task::Pointmass)
            .with_distraction(Severity::High, DistractorId::train(7));
        let frame = render_state(&cfg, &centered_pm_state(), 50);
        // The ball sits at the origin; the pixel nearest the center must be
        // pure ball color, regardless of what the background is doing.
        let mid = cfg.render_size / 2;
        let px = frame.pixel(mid, mid);
        for ch in 0..3 {
            assert!(
                (px[ch] - BALL_COLOR[ch]).abs() < 1e-12,
                "center pixel {px:?} vs {BALL_COLOR:?}"
            );
        }
    }

    #[test]
    fn ball_footprint_grows_with_the_variant_scale() {
        let count_ball_pixels = |variant| {
            let cfg = EnvConfig::new(Task::Pointmass).with_variant(variant);
            let frame = render_state(&cfg, &centered_pm_state(), 0);
            (0..cfg.render_size * cfg.render_size)
                .filter(|i| {
                    let px = [
                        frame.data()[i * 3],
                        frame.data()[i * 3 + 1],
                        frame.data()[i * 3 + 2],
                    ];
                    (0..3).all(|c| (px[c] - BALL_COLOR[c]).abs() < 0.05)
                })
                .count()
        };
        let small = count_ball_pixels(DynamicsVariant::A);
        let large = count_ball_pixels(DynamicsVariant::H);
        assert!(
            small + 2 <= large,
            "A footprint {small} should be visibly smaller than H footprint {large}"
        );
    }

    #[test]
    fn arm_link_length_is_visible_in_pixels() {
        let state = ProprioState {
            positions: vec![0.0, 0.0], // arm stretched along +x
            velocities: vec![0.0, 0.0],
            target: vec![0.0, -0.8],
        };
        let render_for = |variant| {
            let cfg = EnvConfig::new(Task::Arm).with_variant(variant);
            render_state(&cfg, &state, 0)
        };
        let short = render_for(DynamicsVariant::A);
        let long = render_for(DynamicsVariant::H);
        // Probe a pixel on the +x axis beyond the short arm's reach
        // (0.32) but inside the long arm's (0.96).
        let view = View::new(32);
        let row = (0..32)
            .min_by_key(|&r| ((view.world_y(r)).abs() * 1e6) as i64)
            .unwrap();
        let col = (0..32)
            .min_by_key(|&c| ((view.world_x(c) - 0.6).abs() * 1e6) as i64)
            .unwrap();
        assert_eq!(short.pixel(row, col), BASE_COLOR, "beyond the short arm");
        assert_ne!(long.pixel(row, col), BASE_COLOR, "inside the long arm");
    }

    #[test]
    fn frames_stay_within_unit_range() {
        let cfg =
            EnvConfig::new(Task::Arm).with_distraction(Severity::High, DistractorId::train(9));
        let state = ProprioState {
            positions: vec![1.2, 0.7],
            velocities: vec![0.0, 0.0],
            target: vec![-0.4, 0.1],
        };
        let frame = render_state(&cfg, &state, 999);
        assert!(frame.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn quantization_round_trips_exactly_on_quantized_values() {
        let cfg = EnvConfig::new(Task::Pointmass)
            .with_distraction(Severity::Moderate, DistractorId::train(1));
        let frame = render_state(&cfg, &centered_pm_state(), 17);
        let bytes = frame.quantize();
        let back = Frame::from_quantized(frame.size(), &bytes);
        assert_eq!(
            back.quantize(),
            bytes,
            "quantize is idempotent after dequantize"
        );
    }

    #[test]
    fn png_dump_is_readable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame.png");
        let cfg = EnvConfig::new(Task::Arm);
        let state = ProprioState {
            positions: vec![0.5, 1.0],
            velocities: vec![0.0, 0.0],
            target: vec![0.2, -0.3],
        };
        render_state(&cfg, &state, 0).to_png(&path).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!((img.width(), img.height()), (32, 32));
    }
}
