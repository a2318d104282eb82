//! Shape and color catalogs shared by the simulator, grammar and networks.

/// Shape names, index = shape_id. `n` in the discriminator heads.
pub const SHAPES: [&str; 6] = ["bowl", "plate", "ring", "box", "dumbbell", "ball"];

/// Color names, index = color_id. `m` in the discriminator heads.
pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];

/// Linear RGB for each color id, chosen saturated against the dark backdrop.
pub const COLOR_RGB: [[f64; 3]; 4] = [
    [0.85, 0.15, 0.12],
    [0.12, 0.75, 0.20],
    [0.15, 0.35, 0.85],
    [0.90, 0.85, 0.15],
];

pub fn n_shapes() -> usize {
    SHAPES.len()
}

pub fn n_colors() -> usize {
    COLORS.len()
}

pub fn shape_name(id: usize) -> &'static str {
    SHAPES[id]
}

pub fn color_name(id: usize) -> &'static str {
    COLORS[id]
}

pub fn shape_id(name: &str) -> Option<usize> {
    SHAPES.iter().position(|s| *s == name)
}

pub fn color_id(name: &str) -> Option<usize> {
    COLORS.iter().position(|c| *c == name)
}
