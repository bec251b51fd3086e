//! Procedural two-class texture datasets for desk-scale runs.
//!
//! Benign classes render as smooth low-frequency blob fields; malignant
//! classes as high-frequency striated or lattice fields studded with dark
//! nuclei-like ellipses. The classes are separable by a small CNN by
//! construction.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;

use super::ClassName;
use crate::error::{Error, Result};
use crate::exec;
use crate::imageio::Image;
use crate::rng::{self, tag};

/// Class directories for a named dataset family: `colon`, `lung` or `all`.
pub fn class_family(name: &str) -> Option<Vec<ClassName>> {
    match name {
        "colon" => Some(vec![ClassName::ColonAca, ClassName::ColonN]),
        "lung" => Some(vec![
            ClassName::LungAca,
            ClassName::LungScc,
            ClassName::LungN,
        ]),
        "all" => Some(ClassName::ALL.to_vec()),
        _ => None,
    }
}

/// Write `per_class` PNG images per class under class-named directories.
/// Returns the number of files written. Byte-identical across runs for the
/// same arguments.
pub fn synth_generate(
    out_dir: &Path,
    per_class: usize,
    size: usize,
    seed: u64,
    classes: &[ClassName],
) -> Result<usize> {
    if per_class < 10 {
        return Err(Error::Parameter(format!(
            "per_class must be at least 10, got {per_class}"
        )));
    }
    if size < 32 {
        return Err(Error::Parameter(format!(
            "image size must be at least 32, got {size}"
        )));
    }
    if classes.is_empty() {
        return Err(Error::Parameter("no classes requested".into()));
    }

    let mut written = 0;
    for &class in classes {
        let dir = out_dir.join(class.dir_name());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let results: Vec<Result<()>> = exec::map_indexed(per_class, |i| {
            let img = render_texture(class, size, seed, i as u64);
            img.save(&dir.join(format!("{}_{i:05}.png", class.dir_name())))
        });
        results.into_iter().collect::<Result<Vec<_>>>()?;
        written += per_class;
    }
    Ok(written)
}

/// Texture archetype behind each class.
enum Archetype {
    /// Smooth blob field (benign tissue stand-in).
    Blobs,
    /// Single-orientation high-frequency striations with nuclei.
    Stripes,
    /// Crossed-sinusoid lattice with nuclei.
    Lattice,
}

fn archetype(class: ClassName) -> Archetype {
    match class {
        ClassName::LungN | ClassName::ColonN => Archetype::Blobs,
        ClassName::LungAca | ClassName::ColonAca => Archetype::Stripes,
        ClassName::LungScc => Archetype::Lattice,
    }
}

/// Render one deterministic texture image.
pub fn render_texture(class: ClassName, size: usize, seed: u64, index: u64) -> Image {
    let ordinal = ClassName::ALL.iter().position(|&c| c == class).unwrap() as u64;
    let mut rng = rng::stream(seed, &[tag::SYNTH, ordinal, index]);
    // Benign tissue renders on a lighter ground than the densely stained
    // malignant textures.
    let base = match archetype(class) {
        Archetype::Blobs => [240.0, 218.0, 230.0],
        _ => [225.0, 192.0, 212.0],
    };
    let s = size as f64;

    let field: Box<dyn Fn(f64, f64) -> f64> = match archetype(class) {
        Archetype::Blobs => {
            // Strong but smooth: the benign class needs feature mass of its
            // own (at low frequency) for the head to steer its logits.
            let blobs: Vec<(f64, f64, f64, f64)> = (0..6)
                .map(|_| {
                    (
                        rng.random_range(0.0..s),
                        rng.random_range(0.0..s),
                        rng.random_range(0.18 * s..0.35 * s),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect();
            Box::new(move |x, y| {
                blobs
                    .iter()
                    .map(|&(cx, cy, sigma, amp)| {
                        let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                        amp * (-d2 / (2.0 * sigma * sigma)).exp()
                    })
                    .sum::<f64>()
                    * 0.85
            })
        }
        Archetype::Stripes => {
            // Crossed sinusoids (a plaid) keep the high-frequency energy
            // isotropic, so filter responses are consistent across the
            // random per-image orientation.
            let fu = rng.random_range(11.0..14.5);
            let fv = rng.random_range(11.0..14.5);
            let phi = rng.random_range(0.0..PI);
            let pu = rng.random_range(0.0..2.0 * PI);
            let pv = rng.random_range(0.0..2.0 * PI);
            let (c, sn) = (phi.cos(), phi.sin());
            Box::new(move |x, y| {
                let u = 2.0 * PI * fu * (x * c + y * sn) / s + pu;
                let v = 2.0 * PI * fv * (-x * sn + y * c) / s + pv;
                0.9 * u.sin() + 0.9 * v.sin() + 0.35 * (2.0 * u).sin()
            })
        }
        Archetype::Lattice => {
            let fu = rng.random_range(7.0..12.0);
            let fv = rng.random_range(7.0..12.0);
            let pu = rng.random_range(0.0..2.0 * PI);
            let pv = rng.random_range(0.0..2.0 * PI);
            Box::new(move |x, y| {
                1.6 * (2.0 * PI * fu * x / s + pu).sin() * (2.0 * PI * fv * y / s + pv).sin()
            })
        }
    };

    let nuclei: Vec<(f64, f64, f64, f64, f64)> = match archetype(class) {
        Archetype::Blobs => Vec::new(),
        _ => (0..rng.random_range(10..=16))
            .map(|_| {
                (
                    rng.random_range(0.0..s),
                    rng.random_range(0.0..s),
                    rng.random_range(s / 24.0..s / 10.0),
                    rng.random_range(s / 32.0..s / 14.0),
                    rng.random_range(0.0..PI),
                )
            })
            .collect(),
    };
    let nucleus_color = [62.0, 38.0, 105.0];

    let mut img = Image::filled(size, size, [0, 0, 0]);
    for y in 0..size {
        for x in 0..size {
            let v = field(x as f64, y as f64);
            // Positive field swings darken toward magenta, negative lighten.
            let mut px = [
                base[0] - v * 70.0,
                base[1] - v * 90.0,
                base[2] - v * 45.0,
            ];
            for &(cx, cy, rx, ry, theta) in &nuclei {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let u = (dx * theta.cos() + dy * theta.sin()) / rx;
                let w = (-dx * theta.sin() + dy * theta.cos()) / ry;
                let d = u * u + w * w;
                if d < 1.0 {
                    let blend = (1.0 - d).min(1.0);
                    for (p, &nc) in px.iter_mut().zip(&nucleus_color) {
                        *p = *p * (1.0 - blend) + nc * blend;
                    }
                }
            }
            img.set_pixel(
                x,
                y,
                [
                    px[0].clamp(0.0, 255.0).round() as u8,
                    px[1].clamp(0.0, 255.0).round() as u8,
                    px[2].clamp(0.0, 255.0).round() as u8,
                ],
            );
        }
    }
    img
}
