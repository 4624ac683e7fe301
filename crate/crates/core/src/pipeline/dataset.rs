//! Synthetic shapes: discs and squares, solid or striped, on a black
//! background, with token captions.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeClass {
    Disc,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Texture {
    Solid,
    Striped,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 2] = [ShapeClass::Disc, ShapeClass::Square];

    pub fn word(self) -> &'static str {
        match self {
            ShapeClass::Disc => "disc",
            ShapeClass::Square => "square",
        }
    }

    pub fn parse(word: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.word() == word)
            .ok_or_else(|| Error::param(format!("unknown shape class {word:?}; expected disc or square")))
    }
}

impl Texture {
    pub const ALL: [Texture; 2] = [Texture::Solid, Texture::Striped];

    pub fn word(self) -> &'static str {
        match self {
            Texture::Solid => "solid",
            Texture::Striped => "striped",
        }
    }

    pub fn parse(word: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.word() == word)
            .ok_or_else(|| Error::param(format!("unknown texture {word:?}; expected solid or striped")))
    }
}

/// Intensity of the darker stripe band; above the default mask threshold so
/// a striped shape still binarises to its full silhouette.
pub const STRIPE_LOW: f32 = 0.6;
/// Rows per stripe band.
pub const STRIPE_PERIOD: usize = 2;

/// Geometry of one rendered shape. `extent` is the disc radius or the
/// square half-side, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeSpec {
    pub class: ShapeClass,
    pub texture: Texture,
    pub center: (f64, f64),
    pub extent: f64,
}

impl ShapeSpec {
    pub fn caption(&self) -> String {
        format!("a {} {}", self.texture.word(), self.class.word())
    }

    pub fn caption_variants(&self) -> Vec<String> {
        caption_variants(&self.caption())
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        let dy = y as f64 + 0.5 - self.center.0;
        let dx = x as f64 + 0.5 - self.center.1;
        match self.class {
            ShapeClass::Disc => dx * dx + dy * dy <= self.extent * self.extent,
            ShapeClass::Square => dx.abs() <= self.extent && dy.abs() <= self.extent,
        }
    }
}

/// Renders `spec` into an `S x S` image with values in `[0, 1]`.
/// Training captions derived from `caption`: with and without the leading
/// article and the modifiers, so the final (class) word is the one token
/// always present.
pub fn caption_variants(caption: &str) -> Vec<String> {
    let words: Vec<&str> = caption.split_whitespace().collect();
    let body = match words.first() {
        Some(&("a" | "the")) => &words[1..],
        _ => &words[..],
    };
    let Some(&class) = body.last() else {
        return vec![caption.to_string()];
    };
    let mut bodies = vec![body.join(" ")];
    if body.len() > 1 {
        bodies.push(class.to_string());
    }
    let mut out = Vec::new();
    for b in &bodies {
        for article in ["a ", "the ", ""] {
            out.push(format!("{article}{b}"));
        }
    }
    out
}

pub fn render(spec: &ShapeSpec, size: usize) -> Tensor {
    Tensor::from_fn(&[size, size], |i| {
        let (y, x) = (i / size, i % size);
        if !spec.contains(y, x) {
            return 0.0;
        }
        match spec.texture {
            Texture::Solid => 1.0,
            Texture::Striped if (y / STRIPE_PERIOD) % 2 == 0 => 1.0,
            Texture::Striped => STRIPE_LOW,
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub size: usize,
    pub count: usize,
    pub min_extent: f64,
    pub max_extent: f64,
    /// Minimum gap between the shape's bounding box and the border.
    pub margin: f64,
    pub classes: Vec<ShapeClass>,
    pub textures: Vec<Texture>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            size: 32,
            count: 4000,
            min_extent: 5.0,
            max_extent: 10.0,
            margin: 2.0,
            classes: ShapeClass::ALL.to_vec(),
            textures: Texture::ALL.to_vec(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.textures.is_empty() {
            return Err(Error::param("dataset needs at least one class and texture"));
        }
        if !(0.0 < self.min_extent && self.min_extent <= self.max_extent) {
            return Err(Error::param(format!(
                "invalid extent range {}..{}",
                self.min_extent, self.max_extent
            )));
        }
        if 2.0 * (self.max_extent + self.margin) > self.size as f64 {
            return Err(Error::param(format!(
                "shapes of extent {} with margin {} do not fit a {}-pixel image",
                self.max_extent, self.margin, self.size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub spec: ShapeSpec,
    pub image: Tensor,
    pub caption: String,
}

/// One random shape; classes and textures cycle with `index` so every
/// combination is equally represented.
pub fn random_spec(cfg: &DatasetConfig, index: usize, rng: &mut SeededRng) -> ShapeSpec {
    let class = cfg.classes[index % cfg.classes.len()];
    let texture = cfg.textures[(index / cfg.classes.len()) % cfg.textures.len()];
    let extent = cfg.min_extent + (cfg.max_extent - cfg.min_extent) * rng.uniform();
    let lo = extent + cfg.margin;
    let hi = cfg.size as f64 - lo;
    let cy = lo + (hi - lo) * rng.uniform();
    let cx = lo + (hi - lo) * rng.uniform();
    ShapeSpec {
        class,
        texture,
        center: (cy, cx),
        extent,
    }
}

pub fn gen_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let mut rng = SeededRng::new(seed);
    Ok((0..cfg.count)
        .map(|i| {
            let spec = random_spec(cfg, i, &mut rng);
            Sample {
                image: render(&spec, cfg.size),
                caption: spec.caption(),
                spec,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disc_area_matches_analytic() {
        let spec = ShapeSpec {
            class: ShapeClass::Disc,
            texture: Texture::Solid,
            center: (16.0, 16.0),
            extent: 8.0,
        };
        let img = render(&spec, 32);
        let count = img.data().iter().filter(|&&v| v > 0.5).count() as f64;
        let want = std::f64::consts::PI * 64.0;
        assert!((count / want - 1.0).abs() <= 0.05, "{count} vs {want}");
    }

    #[test]
    fn striped_shape_keeps_its_silhouette() {
        let spec = ShapeSpec {
            class: ShapeClass::Square,
            texture: Texture::Striped,
            center: (16.0, 16.0),
            extent: 6.0,
        };
        let img = render(&spec, 32);
        let fg = img.data().iter().filter(|&&v| v > 0.5).count();
        assert_eq!(fg, 144);
        assert!(img.data().contains(&STRIPE_LOW));
    }

    #[test]
    fn same_seed_same_dataset() {
        let cfg = DatasetConfig {
            count: 20,
            ..DatasetConfig::default()
        };
        assert_eq!(gen_dataset(&cfg, 4).unwrap(), gen_dataset(&cfg, 4).unwrap());
        assert_ne!(gen_dataset(&cfg, 4).unwrap(), gen_dataset(&cfg, 5).unwrap());
    }

    #[test]
    fn captions_name_the_class_and_shapes_fit() {
        let cfg = DatasetConfig {
            count: 200,
            ..DatasetConfig::default()
        };
        for s in gen_dataset(&cfg, 1).unwrap() {
            assert!(s.caption.split(' ').any(|w| w == s.spec.class.word()));
            let n = 32;
            let border_lit = (0..n).any(|i| {
                s.image.data()[i] > 0.0
                    || s.image.data()[(n - 1) * n + i] > 0.0
                    || s.image.data()[i * n] > 0.0
                    || s.image.data()[i * n + n - 1] > 0.0
            });
            assert!(!border_lit);
        }
    }

    #[test]
    fn oversized_shapes_are_rejected() {
        let cfg = DatasetConfig {
            max_extent: 15.0,
            ..DatasetConfig::default()
        };
        assert!(matches!(gen_dataset(&cfg, 1), Err(Error::Parameter(_))));
    }
}
