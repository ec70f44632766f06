use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Attributes;

pub const MIN_OBJECTS: usize = 3;
pub const MAX_OBJECTS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub cat: String,
    pub color: String,
    pub size: String,
    /// `[x, y]` grid cell.
    pub cell: [usize; 2],
    pub feat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<Object>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn count(&self, pred: impl Fn(&Object) -> bool) -> usize {
        self.objects.iter().filter(|o| pred(o)).count()
    }

    /// Indices of objects of category `cat`.
    pub fn of_category(&self, cat: &str) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.objects[i].cat == cat).collect()
    }
}

/// One-hot category, color and size blocks followed by the cell position
/// scaled to `[0, 1]`.
pub fn encode_features(attrs: &Attributes, grid: usize, cat: usize, color: usize, size: usize, cell: [usize; 2]) -> Vec<f64> {
    let mut f = vec![0.0; attrs.feature_dim()];
    f[cat] = 1.0;
    f[attrs.categories.len() + color] = 1.0;
    f[attrs.categories.len() + attrs.colors.len() + size] = 1.0;
    let scale = (grid.max(2) - 1) as f64;
    let base = attrs.feature_dim() - 2;
    f[base] = cell[0] as f64 / scale;
    f[base + 1] = cell[1] as f64 / scale;
    f
}

/// Requested object count clamped to the supported range and the grid.
pub fn clamp_objects(n: usize, grid: usize) -> usize {
    n.clamp(MIN_OBJECTS, MAX_OBJECTS).min(grid * grid)
}

/// Samples `n` objects on distinct cells of a `grid x grid` board.
/// Category/color pairs are drawn without replacement while the attribute
/// space allows it.
pub fn generate_scene<R: Rng + ?Sized>(rng: &mut R, attrs: &Attributes, n: usize, grid: usize) -> Scene {
    let n = clamp_objects(n, grid);
    let cells = sample(rng, grid * grid, n);
    let pairs = attrs.categories.len() * attrs.colors.len();
    let pair_ids: Vec<usize> = if n <= pairs {
        sample(rng, pairs, n).into_vec()
    } else {
        (0..n).map(|_| rng.gen_range(0..pairs)).collect()
    };
    let objects = pair_ids
        .into_iter()
        .zip(cells)
        .map(|(pair, cell)| {
            let cat = pair / attrs.colors.len();
            let color = pair % attrs.colors.len();
            let size = rng.gen_range(0..attrs.sizes.len());
            let cell = [cell % grid, cell / grid];
            Object {
                cat: attrs.categories[cat].clone(),
                color: attrs.colors[color].clone(),
                size: attrs.sizes[size].clone(),
                cell,
                feat: encode_features(attrs, grid, cat, color, size, cell),
            }
        })
        .collect();
    Scene { objects }
}
