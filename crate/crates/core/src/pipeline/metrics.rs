//! Toy evaluation proxies: foreground-mask IoU for structure preservation
//! and template correlation for edit success.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pipeline::dataset::{render, ShapeClass, ShapeSpec, Texture};
use crate::tensor::Tensor;

pub const DEFAULT_MASK_THRESHOLD: f32 = 0.5;

/// `|A & B| / |A | B|` of the masks `image > threshold`; 1 when both are empty.
pub fn mask_iou(a: &Tensor, b: &Tensor, threshold: f32) -> Result<f64> {
    a.expect_same_dims(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (fa, fb) = (x > threshold, y > threshold);
        inter += (fa && fb) as usize;
        union += (fa || fb) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Class labels scored by [`edit_score`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreClass {
    Disc,
    Square,
    Solid,
    Striped,
}

impl ScoreClass {
    pub fn parse(word: &str) -> Result<Self> {
        match word {
            "disc" => Ok(ScoreClass::Disc),
            "square" => Ok(ScoreClass::Square),
            "solid" => Ok(ScoreClass::Solid),
            "striped" => Ok(ScoreClass::Striped),
            other => Err(Error::param(format!(
                "unknown class {other:?}; expected disc, square, solid or striped"
            ))),
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            ScoreClass::Disc => "disc",
            ScoreClass::Square => "square",
            ScoreClass::Solid => "solid",
            ScoreClass::Striped => "striped",
        }
    }

    /// The rival class on the same axis (shape or texture).
    pub fn rival(self) -> Self {
        match self {
            ScoreClass::Disc => ScoreClass::Square,
            ScoreClass::Square => ScoreClass::Disc,
            ScoreClass::Solid => ScoreClass::Striped,
            ScoreClass::Striped => ScoreClass::Solid,
        }
    }

    fn templates(self) -> (Vec<ShapeClass>, Vec<Texture>) {
        match self {
            ScoreClass::Disc => (vec![ShapeClass::Disc], vec![Texture::Solid]),
            ScoreClass::Square => (vec![ShapeClass::Square], vec![Texture::Solid]),
            ScoreClass::Solid => (ShapeClass::ALL.to_vec(), vec![Texture::Solid]),
            ScoreClass::Striped => (ShapeClass::ALL.to_vec(), vec![Texture::Striped]),
        }
    }
}

/// Template grid: centres on whole pixels with a border of 4, extents 4..=12.
const TEMPLATE_BORDER: usize = 4;
const TEMPLATE_EXTENTS: std::ops::RangeInclusive<usize> = 4..=12;

fn centred(v: &[f32]) -> (Vec<f64>, f64) {
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
    let c: Vec<f64> = v.iter().map(|&x| x as f64 - mean).collect();
    let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
    (c, norm)
}

/// Best normalised cross-correlation between `image` (`S x S`) and rendered
/// templates of `class` over a grid of centres and sizes.
pub fn edit_score(image: &Tensor, class: ScoreClass) -> Result<f64> {
    image.expect_rank(2)?;
    let (s, w) = image.matrix_dims()?;
    if s != w {
        return Err(Error::shape(format!("edit_score needs a square image, got {:?}", image.dims())));
    }
    let (img, img_norm) = centred(image.data());
    if img_norm == 0.0 {
        return Ok(0.0);
    }
    let (shapes, textures) = class.templates();
    let mut best = f64::NEG_INFINITY;
    for &shape in &shapes {
        for &texture in &textures {
            for extent in TEMPLATE_EXTENTS {
                if 2 * extent + 2 > s {
                    continue;
                }
                let lo = TEMPLATE_BORDER.max(extent);
                for cy in lo..=s - lo {
                    for cx in lo..=s - lo {
                        let spec = ShapeSpec {
                            class: shape,
                            texture,
                            center: (cy as f64, cx as f64),
                            extent: extent as f64,
                        };
                        let (tpl, tpl_norm) = centred(render(&spec, s).data());
                        if tpl_norm == 0.0 {
                            continue;
                        }
                        let dot: f64 = img.iter().zip(&tpl).map(|(a, b)| a * b).sum();
                        best = best.max(dot / (img_norm * tpl_norm));
                    }
                }
            }
        }
    }
    Ok(if best.is_finite() { best } else { 0.0 })
}

/// Scores below this count as "no shape found".
pub const MIN_CLASS_SCORE: f64 = 0.1;

/// Whichever of `class` and its rival scores strictly higher; `None` when
/// neither template family matches (both scores at most
/// [`MIN_CLASS_SCORE`]) or the scores tie.
pub fn classify(image: &Tensor, class: ScoreClass) -> Result<Option<ScoreClass>> {
    let own = edit_score(image, class)?;
    let other = edit_score(image, class.rival())?;
    Ok(if own.max(other) <= MIN_CLASS_SCORE || own == other {
        None
    } else if own > other {
        Some(class)
    } else {
        Some(class.rival())
    })
}
