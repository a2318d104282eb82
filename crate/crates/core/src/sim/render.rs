//! Deterministic rasterizer for the vertical-plane world.
//!
//! The camera views the arm's plane straight on: image x is workspace x,
//! image y is height (up = toward row 0). Output pixels are quantized to
//! the 8-bit grid so in-memory frames and PNG round-trips are bit-identical.

use std::path::Path;

use crate::nn::Tensor;

use super::catalog::COLOR_RGB;
use super::kinematics::chain_points;
use super::types::{Scene, SimParams, SpriteKind, Vec2, ZOrder};

pub const BACKGROUND: [f64; 3] = [0.08, 0.08, 0.10];
pub const TABLE: [f64; 3] = [0.30, 0.22, 0.16];
pub const ARM: [f64; 3] = [0.72, 0.72, 0.75];
pub const GRIPPER: [f64; 3] = [0.88, 0.88, 0.92];
/// Height of the rendered table strip in workspace units.
pub const TABLE_TOP: f64 = 0.28;

pub struct RenderOut {
    /// [3, S, S] image, values on the 8-bit grid in [0,1].
    pub image: Tensor,
    /// Per-object glyph footprint (pre-occlusion), row-major S*S booleans.
    pub object_masks: Vec<Vec<bool>>,
    /// Per-distractor footprint, same layout.
    pub sprite_masks: Vec<Vec<bool>>,
}

struct Canvas {
    s: usize,
    /// Pixels per workspace unit for x (and y; the workspace is square).
    scale: f64,
    world_h: f64,
    data: Vec<f64>,
}

impl Canvas {
    fn new(params: &SimParams) -> Self {
        let s = params.image_size;
        Canvas {
            s,
            scale: s as f64 / params.workspace.0,
            world_h: params.workspace.1,
            data: vec![0.0; 3 * s * s],
        }
    }

    fn put(&mut self, col: i64, row: i64, rgb: [f64; 3]) {
        if col < 0 || row < 0 || col >= self.s as i64 || row >= self.s as i64 {
            return;
        }
        let idx = row as usize * self.s + col as usize;
        for (ch, v) in rgb.iter().enumerate() {
            self.data[ch * self.s * self.s + idx] = *v;
        }
    }

    fn px(&self, p: Vec2) -> (f64, f64) {
        (p.x * self.scale, (self.world_h - p.y) * self.scale)
    }
}

/// Glyph membership test in normalized coordinates u (right) and v (up),
/// both in [-1, 1].
pub fn glyph_hit(shape_id: usize, u: f64, v: f64) -> bool {
    let r2 = u * u + v * v;
    match shape_id {
        // bowl: solid lower half plus side walls
        0 => (r2 <= 1.0 && v <= 0.05) || (u.abs() >= 0.58 && u.abs() <= 1.0 && v > 0.05 && v <= 0.62),
        // plate: wide flat slab
        1 => u.abs() <= 1.0 && v.abs() <= 0.38,
        // ring: annulus
        2 => r2 <= 1.0 && r2 >= 0.45 * 0.45,
        // box: filled square
        3 => u.abs() <= 0.92 && v.abs() <= 0.92,
        // dumbbell: two discs joined by a bar
        4 => {
            let du = u.abs() - 0.62;
            (du * du + v * v <= 0.38 * 0.38) || (u.abs() <= 0.62 && v.abs() <= 0.16)
        }
        // ball: filled disc
        5 => r2 <= 1.0,
        _ => false,
    }
}

fn sprite_bitmap(kind: SpriteKind) -> (&'static [&'static str], [f64; 3], f64) {
    const HAND: &[&str] = &[
        "..#..#..#...",
        "..#..#..#..#",
        "..#..#..#..#",
        "..##########",
        ".###########",
        ".###########",
        ".##########.",
        "..#########.",
        "..########..",
        "...#######..",
        "...######...",
        "....####....",
    ];
    const GORILLA: &[&str] = &[
        "....####....",
        "...######...",
        "...#.##.#...",
        "...######...",
        "..########..",
        ".##########.",
        "###.####.###",
        "##..####..##",
        "##..####..##",
        "..########..",
        "..###..###..",
        "..###..###..",
        "..##....##..",
        "..##....##..",
    ];
    const BLOB: &[&str] = &[
        "...###...",
        ".#######.",
        ".#######.",
        "#########",
        "#########",
        "#########",
        ".#######.",
        ".#######.",
        "...###...",
    ];
    match kind {
        SpriteKind::Hand => (HAND, [0.87, 0.67, 0.47], 1.9),
        SpriteKind::Gorilla => (GORILLA, [0.38, 0.33, 0.30], 2.2),
        SpriteKind::Blob => (BLOB, [0.55, 0.25, 0.65], 1.4),
    }
}

/// Pixel footprint of a sprite centered at `position`, in world units.
pub fn sprite_extent(kind: SpriteKind) -> (f64, f64) {
    let (rows, _, w) = sprite_bitmap(kind);
    let h = w * rows.len() as f64 / rows[0].len() as f64;
    (w, h)
}

fn draw_sprite(canvas: &mut Canvas, kind: SpriteKind, position: Vec2, mask: &mut [bool]) {
    let (rows, rgb, w_units) = sprite_bitmap(kind);
    let (bw, bh) = (rows[0].len(), rows.len());
    let h_units = w_units * bh as f64 / bw as f64;
    let (cx, cy) = canvas.px(position);
    let (pw, ph) = (w_units * canvas.scale, h_units * canvas.scale);
    let (x0, y0) = (cx - pw / 2.0, cy - ph / 2.0);
    let col0 = x0.floor() as i64;
    let row0 = y0.floor() as i64;
    let cols = pw.ceil() as i64 + 1;
    let rowsn = ph.ceil() as i64 + 1;
    for r in 0..rowsn {
        for c in 0..cols {
            let (col, row) = (col0 + c, row0 + r);
            let u = ((col as f64 + 0.5 - x0) / pw * bw as f64).floor();
            let v = ((row as f64 + 0.5 - y0) / ph * bh as f64).floor();
            if u < 0.0 || v < 0.0 || u >= bw as f64 || v >= bh as f64 {
                continue;
            }
            if rows[v as usize].as_bytes()[u as usize] == b'#' {
                canvas.put(col, row, rgb);
                if col >= 0 && row >= 0 && (col as usize) < canvas.s && (row as usize) < canvas.s {
                    mask[row as usize * canvas.s + col as usize] = true;
                }
            }
        }
    }
}

fn draw_segment(canvas: &mut Canvas, a: Vec2, b: Vec2, half_width: f64, rgb: [f64; 3]) {
    let (ax, ay) = canvas.px(a);
    let (bx, by) = canvas.px(b);
    let hw = half_width * canvas.scale;
    let (minx, maxx) = (ax.min(bx) - hw, ax.max(bx) + hw);
    let (miny, maxy) = (ay.min(by) - hw, ay.max(by) + hw);
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    for row in miny.floor() as i64..=maxy.ceil() as i64 {
        for col in minx.floor() as i64..=maxx.ceil() as i64 {
            let (px, py) = (col as f64 + 0.5, row as f64 + 0.5);
            let t = if len2 < 1e-12 {
                0.0
            } else {
                (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
            };
            let (qx, qy) = (ax + t * dx, ay + t * dy);
            if ((px - qx).powi(2) + (py - qy).powi(2)).sqrt() <= hw {
                canvas.put(col, row, rgb);
            }
        }
    }
}

fn draw_arm(canvas: &mut Canvas, scene: &Scene, params: &SimParams) {
    let pts = chain_points(&scene.arm);
    for w in pts.windows(2) {
        draw_segment(
            canvas,
            params.base + w[0],
            params.base + w[1],
            0.16,
            ARM,
        );
    }
    let tip = params.base + *pts.last().expect("chain has points");
    let gap = 0.10 + scene.arm.aperture() * 0.32;
    for side in [-1.0, 1.0] {
        let f = Vec2::new(tip.x + side * gap, tip.y);
        draw_segment(canvas, f, Vec2::new(f.x, f.y - 0.26), 0.09, GRIPPER);
    }
}

/// Render the scene: background, table, objects, distractors and arm,
/// composited by z-order. Also returns ground-truth footprints.
pub fn render(scene: &Scene, params: &SimParams) -> RenderOut {
    let mut canvas = Canvas::new(params);
    let s = canvas.s;
    // Background and table strip.
    for row in 0..s {
        let y_world = params.workspace.1 * (1.0 - (row as f64 + 0.5) / s as f64);
        let rgb = if y_world <= TABLE_TOP { TABLE } else { BACKGROUND };
        for col in 0..s {
            for ch in 0..3 {
                canvas.data[ch * s * s + row * s + col] = rgb[ch];
            }
        }
    }
    // Objects.
    let mut object_masks = vec![vec![false; s * s]; scene.objects.len()];
    for (oi, o) in scene.objects.iter().enumerate() {
        let rgb = COLOR_RGB[o.color_id];
        let (cx, cy) = canvas.px(o.position);
        let r = o.size * canvas.scale;
        let col0 = (cx - r).floor() as i64;
        let row0 = (cy - r).floor() as i64;
        let span = (2.0 * r).ceil() as i64 + 1;
        for dr in 0..span {
            for dc in 0..span {
                let (col, row) = (col0 + dc, row0 + dr);
                let u = (col as f64 + 0.5 - cx) / r;
                let v = (cy - (row as f64 + 0.5)) / r;
                if u.abs() <= 1.0 && v.abs() <= 1.0 && glyph_hit(o.shape_id, u, v) {
                    canvas.put(col, row, rgb);
                    if col >= 0 && row >= 0 && (col as usize) < s && (row as usize) < s {
                        object_masks[oi][row as usize * s + col as usize] = true;
                    }
                }
            }
        }
    }
    // Distractors behind the arm, then the arm, then foreground distractors.
    let mut sprite_masks = vec![vec![false; s * s]; scene.distractors.len()];
    for (di, d) in scene.distractors.iter().enumerate() {
        if d.z_order == ZOrder::BehindArm {
            draw_sprite(&mut canvas, d.sprite_id, d.position, &mut sprite_masks[di]);
        }
    }
    draw_arm(&mut canvas, scene, params);
    for (di, d) in scene.distractors.iter().enumerate() {
        if d.z_order == ZOrder::InFront {
            draw_sprite(&mut canvas, d.sprite_id, d.position, &mut sprite_masks[di]);
        }
    }
    // Snap to the 8-bit grid for PNG round-trip stability.
    for v in &mut canvas.data {
        *v = (*v * 255.0).round().clamp(0.0, 255.0) / 255.0;
    }
    RenderOut {
        image: Tensor::from_vec(&[3, s, s], canvas.data),
        object_masks,
        sprite_masks,
    }
}

/// Save a [3,S,S] image tensor as an RGB PNG.
pub fn save_png(image: &Tensor, path: &Path) -> Result<(), image::ImageError> {
    let s = image.shape()[1];
    let w = image.shape()[2];
    let mut buf = image::RgbImage::new(w as u32, s as u32);
    for row in 0..s {
        for col in 0..w {
            let px = |ch: usize| {
                (image.data()[ch * s * w + row * w + col] * 255.0).round().clamp(0.0, 255.0) as u8
            };
            buf.put_pixel(col as u32, row as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    buf.save_with_format(path, image::ImageFormat::Png)
}

/// Load an RGB PNG back into a [3,S,S] tensor on the 8-bit grid.
pub fn load_png(path: &Path) -> Result<Tensor, image::ImageError> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for ch in 0..3 {
            data[ch * h * w + y as usize * w + x as usize] = p.0[ch] as f64 / 255.0;
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::types::{DistractorSprite, SceneConfig};
    use crate::sim::world::make_scene;

    #[test]
    fn render_is_deterministic() {
        let params = SimParams::default();
        let scene = make_scene(&SceneConfig::new(vec![(0, 0), (3, 2)]), &params, 5).unwrap();
        let a = render(&scene, &params);
        let b = render(&scene, &params);
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.object_masks, b.object_masks);
    }

    #[test]
    fn empty_scene_has_empty_masks() {
        let params = SimParams::default();
        let scene = make_scene(&SceneConfig::new(vec![]), &params, 1).unwrap();
        let out = render(&scene, &params);
        assert!(out.object_masks.is_empty());
        // Arm and table pixels exist.
        let any_arm = out.image.data().iter().any(|&v| (v - ARM[0]).abs() < 2.0 / 255.0);
        assert!(any_arm);
    }

    /// Red-channel mass inside a red bowl's mask must exceed the mass of any
    /// equal-size patch disjoint from the object: a direct pixel-sum oracle.
    #[test]
    fn red_mass_concentrates_in_red_object_mask() {
        let params = SimParams::default();
        // red bowl target plus a blue box distractor
        let scene = make_scene(&SceneConfig::new(vec![(0, 0), (3, 2)]), &params, 11).unwrap();
        let out = render(&scene, &params);
        let s = params.image_size;
        let mask = &out.object_masks[0];
        let npix = mask.iter().filter(|&&b| b).count();
        assert!(npix > 10, "bowl drew {npix} pixels");
        let red = |row: usize, col: usize| out.image.data()[row * s + col];
        let mass: f64 = (0..s * s)
            .filter(|&i| mask[i])
            .map(|i| red(i / s, i % s))
            .sum();
        // Slide a square patch of equal pixel count everywhere it avoids the mask.
        let side = (npix as f64).sqrt().ceil() as usize;
        let area = side * side;
        for r0 in (0..s - side).step_by(2) {
            for c0 in (0..s - side).step_by(2) {
                let mut patch = 0.0;
                let mut overlaps = false;
                let mut count = 0;
                for r in r0..r0 + side {
                    for c in c0..c0 + side {
                        if mask[r * s + c] {
                            overlaps = true;
                        }
                        patch += red(r, c);
                        count += 1;
                    }
                }
                if !overlaps {
                    // Scale for the (tiny) area mismatch between npix and side².
                    let scaled = patch * npix as f64 / area.max(count) as f64;
                    assert!(
                        mass > scaled,
                        "patch at ({r0},{c0}) red mass {scaled:.2} >= object {mass:.2}"
                    );
                }
            }
        }
    }

    #[test]
    fn object_pixels_stay_inside_masks() {
        let params = SimParams::default();
        let scene = make_scene(&SceneConfig::new(vec![(2, 1)]), &params, 9).unwrap();
        let out = render(&scene, &params);
        let s = params.image_size;
        let rgb = COLOR_RGB[1].map(|v| (v * 255.0).round() / 255.0);
        let mut shown = 0;
        for i in 0..s * s {
            let px = [
                out.image.data()[i],
                out.image.data()[s * s + i],
                out.image.data()[2 * s * s + i],
            ];
            if px == rgb {
                assert!(out.object_masks[0][i], "colored pixel outside mask at {i}");
                shown += 1;
            }
        }
        let mask_count = out.object_masks[0].iter().filter(|&&b| b).count();
        assert!(shown * 10 >= mask_count * 9, "≥90% of mask visible: {shown}/{mask_count}");
    }

    #[test]
    fn png_round_trip_is_exact() {
        let params = SimParams::default();
        let scene = make_scene(&SceneConfig::new(vec![(4, 3), (5, 0)]), &params, 21).unwrap();
        let mut scene = scene;
        scene.distractors.push(DistractorSprite {
            sprite_id: SpriteKind::Gorilla,
            position: Vec2::new(3.0, 7.0),
            velocity: Vec2::new(0.0, 0.0),
            z_order: ZOrder::InFront,
        });
        let out = render(&scene, &params);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame.png");
        save_png(&out.image, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(out.image.shape(), back.shape());
        for (a, b) in out.image.data().iter().zip(back.data()) {
            assert_eq!(a, b, "quantized pixels round-trip exactly");
        }
    }
}
