use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::visenc::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circles",
            ShapeKind::Square => "squares",
            ShapeKind::Triangle => "triangles",
            ShapeKind::Cross => "crosses",
        }
    }

    /// Whether doubled-coordinate offset `(u, v)` from the cell centre lies
    /// inside the shape of doubled radius `r`. Integer arithmetic only.
    fn covers(self, u: i64, v: i64, r: i64) -> bool {
        let (au, av) = (u.abs(), v.abs());
        match self {
            ShapeKind::Circle => 6 * (u * u + v * v) <= 5 * r * r,
            ShapeKind::Square => au < r && av < r,
            ShapeKind::Triangle => av < r && 2 * au <= v + r,
            ShapeKind::Cross => (3 * au <= r && av < r) || (3 * av <= r && au < r),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub shape: ShapeKind,
    pub color: Color,
    pub present: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub image_size: usize,
    /// Probability numerator/denominator that a cell holds a shape.
    pub presence_num: u64,
    pub presence_den: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            grid_rows: 2,
            grid_cols: 2,
            image_size: 16,
            presence_num: 3,
            presence_den: 4,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        for (what, n) in [("grid_rows", self.grid_rows), ("grid_cols", self.grid_cols)] {
            if !(2..=3).contains(&n) {
                return Err(Error::Parameter(format!("{what} must be 2 or 3, got {n}")));
            }
        }
        if self.image_size % self.grid_rows != 0 || self.image_size % self.grid_cols != 0 {
            return Err(Error::Parameter(format!(
                "image size {} not divisible by grid {}x{}",
                self.image_size, self.grid_rows, self.grid_cols
            )));
        }
        if self.image_size / self.grid_rows.max(self.grid_cols) < 4 {
            return Err(Error::Parameter("grid cells must be at least 4 pixels".into()));
        }
        if self.presence_den == 0 || self.presence_num == 0 || self.presence_num > self.presence_den
        {
            return Err(Error::Parameter("presence probability must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// Human-readable name of a row-major cell index, e.g. "top left".
    pub fn position_name(&self, cell: usize) -> String {
        let rows: &[&str] = if self.grid_rows == 2 {
            &["top", "bottom"]
        } else {
            &["top", "middle", "bottom"]
        };
        let cols: &[&str] = if self.grid_cols == 2 {
            &["left", "right"]
        } else {
            &["left", "center", "right"]
        };
        format!(
            "{} {}",
            rows[cell / self.grid_cols],
            cols[cell % self.grid_cols]
        )
    }

    pub fn position_names(&self) -> Vec<String> {
        (0..self.num_cells()).map(|c| self.position_name(c)).collect()
    }
}

/// A grid of coloured shapes and its rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub config: SceneConfig,
    pub cells: Vec<Cell>,
    pub image: ImageTensor,
}

impl Scene {
    pub fn present(&self) -> impl Iterator<Item = (usize, &Cell)> {
        self.cells.iter().enumerate().filter(|(_, c)| c.present)
    }

    /// Caption listing every present cell in row-major order.
    pub fn caption(&self) -> String {
        self.present()
            .map(|(i, c)| {
                format!(
                    "a {} {} at the {}",
                    c.color.name(),
                    c.shape.name(),
                    self.config.position_name(i)
                )
            })
            .collect::<Vec<_>>()
            .join(" and ")
    }
}

/// Render cells to a `3 × S × S` image with values in {0, 1}.
pub fn render(cfg: &SceneConfig, cells: &[Cell]) -> Result<ImageTensor> {
    let s = cfg.image_size;
    let ch = s / cfg.grid_rows;
    let cw = s / cfg.grid_cols;
    // doubled radius leaves a one-pixel margin inside the cell
    let r = (ch.min(cw) as i64) - 2;
    let mut data = vec![0.0; 3 * s * s];
    for (idx, cell) in cells.iter().enumerate() {
        if !cell.present {
            continue;
        }
        let (gy, gx) = (idx / cfg.grid_cols, idx % cfg.grid_cols);
        let rgb = cell.color.rgb();
        for y in 0..ch {
            for x in 0..cw {
                let u = 2 * x as i64 + 1 - cw as i64;
                let v = 2 * y as i64 + 1 - ch as i64;
                if cell.shape.covers(u, v, r) {
                    let (py, px) = (gy * ch + y, gx * cw + x);
                    for (c, &val) in rgb.iter().enumerate() {
                        data[c * s * s + py * s + px] = val;
                    }
                }
            }
        }
    }
    ImageTensor::new(3, s, s, data)
}

/// Deterministic scene from `seed`. Cells are drawn until at least two are
/// present.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(seed);
    let cells = loop {
        let cells: Vec<Cell> = (0..cfg.num_cells())
            .map(|_| Cell {
                present: rng.bernoulli(cfg.presence_num, cfg.presence_den),
                shape: ShapeKind::ALL[rng.below(4) as usize],
                color: Color::ALL[rng.below(4) as usize],
            })
            .collect();
        if cells.iter().filter(|c| c.present).count() >= 2 {
            break cells;
        }
    };
    let image = render(cfg, &cells)?;
    Ok(Scene {
        seed,
        config: cfg.clone(),
        cells,
        image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_image() {
        let cfg = SceneConfig::default();
        let a = generate_scene(42, &cfg).unwrap();
        let b = generate_scene(42, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.image.tensor().bit_eq(b.image.tensor()));
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = SceneConfig::default();
        let a = generate_scene(0, &cfg).unwrap();
        let b = generate_scene(1, &cfg).unwrap();
        assert_ne!(a.image, b.image);
    }

    #[test]
    fn values_in_unit_range_and_at_least_two_present() {
        let cfg = SceneConfig::default();
        for seed in 0..50 {
            let s = generate_scene(seed, &cfg).unwrap();
            assert!(s.image.tensor().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(s.present().count() >= 2);
        }
    }

    #[test]
    fn shapes_have_distinct_masks() {
        let cfg = SceneConfig::default();
        let mut masks = Vec::new();
        for shape in ShapeKind::ALL {
            let mut cells = vec![
                Cell {
                    shape,
                    color: Color::Red,
                    present: false
                };
                4
            ];
            cells[0].present = true;
            let img = render(&cfg, &cells).unwrap();
            let area = img.tensor().data().iter().filter(|&&v| v > 0.0).count();
            assert!(area >= 12, "{shape:?} area {area}");
            masks.push(img);
        }
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(masks[i], masks[j]);
            }
        }
    }

    #[test]
    fn rejects_bad_grid() {
        let mut cfg = SceneConfig::default();
        cfg.grid_rows = 1;
        assert!(generate_scene(0, &cfg).is_err());
        cfg.grid_rows = 3;
        assert!(generate_scene(0, &cfg).is_err()); // 16 not divisible by 3
        cfg.image_size = 24;
        cfg.grid_cols = 3;
        assert!(generate_scene(0, &cfg).is_ok());
    }

    #[test]
    fn position_names() {
        let cfg = SceneConfig::default();
        assert_eq!(
            cfg.position_names(),
            vec!["top left", "top right", "bottom left", "bottom right"]
        );
    }
}
