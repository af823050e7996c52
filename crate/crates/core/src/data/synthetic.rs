//! Shape-template images with a planted, faint per-class watermark.
//!
//! Every image is `template(class, jitter) + amplitude * watermark(class) +
//! noise`, clamped to `[0,1]`. The template is a large, softly edged bright
//! figure (the robust feature); the watermark is a fixed signed pixel mask,
//! disjoint across classes (the brittle but predictive feature). The noise is
//! a smooth Gaussian field, so single-pixel structure belongs to the
//! watermark alone.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::hex_digest;
use crate::stream;

const BACKGROUND: f64 = 0.2;
const FOREGROUND: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub classes: usize,
    /// Image side length; images are single-channel `size×size`.
    pub size: usize,
    pub samples_per_class: usize,
    pub test_per_class: usize,
    /// Maximum template offset in pixels along each axis.
    pub jitter: usize,
    pub watermark_amplitude: f64,
    /// Pixels per class mask.
    pub watermark_pixels: usize,
    /// Mirror each mask about the vertical axis so horizontal flips keep it.
    pub mirror_watermark: bool,
    /// Marginal standard deviation of the noise field.
    pub noise_sigma: f64,
    /// Correlation length (Gaussian kernel sigma, pixels) of the noise field.
    pub noise_smoothing: f64,
    /// Gaussian blur applied to the figure edges.
    pub template_blur: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            size: 16,
            samples_per_class: 500,
            test_per_class: 100,
            jitter: 2,
            watermark_amplitude: 0.05,
            watermark_pixels: 24,
            mirror_watermark: true,
            noise_sigma: 0.08,
            noise_smoothing: 1.5,
            template_blur: 1.6,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > TEMPLATE_COUNT {
            return Err(Error::Spec(format!(
                "classes must be in 2..={TEMPLATE_COUNT}, got {}",
                self.classes
            )));
        }
        if self.size < 8 {
            return Err(Error::Spec("image size must be at least 8".into()));
        }
        if !(0.0..0.5).contains(&self.watermark_amplitude) {
            return Err(Error::Spec("watermark amplitude must be in [0, 0.5)".into()));
        }
        if self.noise_smoothing < 0.0 || self.template_blur < 0.0 {
            return Err(Error::Spec("smoothing widths must be non-negative".into()));
        }
        if self.noise_sigma < 0.0 || self.samples_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Spec("invalid sample counts or noise".into()));
        }
        if self.mirror_watermark && (self.watermark_pixels % 2 != 0 || self.size % 2 != 0) {
            return Err(Error::Spec(
                "mirrored watermarks need an even pixel count and image size".into(),
            ));
        }
        let available = if self.mirror_watermark {
            self.size * self.size / 2
        } else {
            self.size * self.size
        };
        let per_class = if self.mirror_watermark {
            self.watermark_pixels / 2
        } else {
            self.watermark_pixels
        };
        if self.classes * per_class > available {
            return Err(Error::Spec(format!(
                "{} classes x {} watermark pixels collide on a {}x{} image",
                self.classes, self.watermark_pixels, self.size, self.size
            )));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hex_digest(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn dim(&self) -> usize {
        self.size * self.size
    }
}

/// Per-class signed pixel masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Watermarks {
    size: usize,
    amplitude: f64,
    /// `(pixel index, sign)` per class.
    masks: Vec<Vec<(usize, f64)>>,
}

impl Watermarks {
    pub fn from_config(cfg: &SyntheticConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(cfg.seed, 0);
        let s = cfg.size;
        let mut pool: Vec<usize> = if cfg.mirror_watermark {
            (0..s).flat_map(|r| (0..s / 2).map(move |c| r * s + c)).collect()
        } else {
            (0..s * s).collect()
        };
        pool.shuffle(&mut rng);
        let per_class = if cfg.mirror_watermark {
            cfg.watermark_pixels / 2
        } else {
            cfg.watermark_pixels
        };
        let mut masks = Vec::with_capacity(cfg.classes);
        for c in 0..cfg.classes {
            let mut mask = Vec::with_capacity(cfg.watermark_pixels);
            for &p in &pool[c * per_class..(c + 1) * per_class] {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                mask.push((p, sign));
                if cfg.mirror_watermark {
                    let (r, col) = (p / s, p % s);
                    mask.push((r * s + (s - 1 - col), sign));
                }
            }
            mask.sort_unstable_by_key(|&(p, _)| p);
            masks.push(mask);
        }
        let w = Self {
            size: s,
            amplitude: cfg.watermark_amplitude,
            masks,
        };
        w.check_disjoint()?;
        Ok(w)
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut seen = vec![false; self.size * self.size];
        for mask in &self.masks {
            for &(p, _) in mask {
                if seen[p] {
                    return Err(Error::Spec(format!("watermark pixel {p} shared by two classes")));
                }
                seen[p] = true;
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.masks.len()
    }

    pub fn mask(&self, class: usize) -> &[(usize, f64)] {
        &self.masks[class]
    }

    /// Dense `±1` pattern of one class (zero off-mask).
    pub fn pattern(&self, class: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.size * self.size];
        for &(p, s) in &self.masks[class] {
            out[p] = s;
        }
        out
    }

    /// Correlation of the locally de-meaned image with the class mask,
    /// scaled so that a clean watermark at the generator amplitude on a flat
    /// background scores about one.
    pub fn score(&self, x: &[f64], class: usize) -> f64 {
        let mask = &self.masks[class];
        let corr: f64 = mask.iter().map(|&(p, s)| s * (x[p] - self.local_mean(x, p))).sum();
        corr * self.norm(class)
    }

    fn norm(&self, class: usize) -> f64 {
        let amp = if self.amplitude > 0.0 { self.amplitude } else { 1.0 };
        9.0 / (8.0 * amp * self.masks[class].len() as f64)
    }

    fn neighbourhood(&self, p: usize) -> impl Iterator<Item = usize> + '_ {
        let s = self.size as isize;
        let (r, c) = ((p / self.size) as isize, (p % self.size) as isize);
        (-1..=1).flat_map(move |dr| (-1..=1).map(move |dc| (r + dr, c + dc)))
            .filter(move |&(rr, cc)| rr >= 0 && cc >= 0 && rr < s && cc < s)
            .map(move |(rr, cc)| (rr * s + cc) as usize)
    }

    /// Mean of the 3x3 window around `p`, truncated at the border.
    fn local_mean(&self, x: &[f64], p: usize) -> f64 {
        let (sum, n) = self.neighbourhood(p).fold((0.0, 0usize), |(a, n), q| (a + x[q], n + 1));
        sum / n as f64
    }

    /// Gradient of [`Watermarks::score`] with respect to `x` (constant, since the score is linear).
    pub fn score_gradient(&self, class: usize) -> Vec<f64> {
        let norm = self.norm(class);
        let mut g = vec![0.0; self.size * self.size];
        for &(p, s) in &self.masks[class] {
            g[p] += s * norm;
            let n = self.neighbourhood(p).count() as f64;
            for q in self.neighbourhood(p) {
                g[q] -= s * norm / n;
            }
        }
        g
    }
}

pub fn watermark_score(x: &[f64], class: usize, cfg: &SyntheticConfig) -> Result<f64> {
    let w = Watermarks::from_config(cfg)?;
    if class >= w.classes() || x.len() != cfg.dim() {
        return Err(Error::Shape("watermark probe input does not match config".into()));
    }
    Ok(w.score(x, class))
}

pub const TEMPLATE_COUNT: usize = 10;

/// Whether pixel `(u, v)` (offsets from the jittered centre) lies on the
/// figure of `class`. All figures are symmetric under horizontal mirroring.
fn on_template(class: usize, u: f64, v: f64, scale: f64) -> bool {
    let (u, v) = (u / scale, v / scale);
    let r = (u * u + v * v).sqrt();
    match class {
        0 => v.abs() <= 1.5 && u.abs() <= 5.5,
        1 => u.abs() <= 1.5 && v.abs() <= 5.5,
        2 => (v.abs() <= 1.0 && u.abs() <= 5.5) || (u.abs() <= 1.0 && v.abs() <= 5.5),
        3 => r <= 4.5,
        4 => (2.8..=5.0).contains(&r),
        // U: two side strokes and a bottom stroke
        5 => {
            (u.abs() >= 3.0 && u.abs() <= 5.0 && v.abs() <= 5.0) || (v >= 3.0 && v <= 5.0 && u.abs() <= 5.0)
        }
        // T: top bar and stem
        6 => (v >= -5.0 && v <= -3.0 && u.abs() <= 5.0) || (u.abs() <= 1.0 && v.abs() <= 5.0),
        // upward filled triangle
        7 => v <= 4.5 && v >= -5.0 && u.abs() <= (v + 5.0) * 0.55,
        8 => {
            let m = u.abs().max(v.abs());
            (3.5..=5.5).contains(&m)
        }
        9 => ((u - v).abs() <= 1.2 || (u + v).abs() <= 1.2) && u.abs() <= 5.0,
        _ => false,
    }
}

/// Noise-free template image with its centre offset by `(dx, dy)` and edges
/// softened by a Gaussian of width `blur`.
pub fn template_image(class: usize, size: usize, dx: f64, dy: f64, blur: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let scale = size as f64 / 16.0;
    let mut img = vec![BACKGROUND; size * size];
    for row in 0..size {
        for col in 0..size {
            let u = col as f64 - c - dx;
            let v = row as f64 - c - dy;
            if on_template(class, u, v, scale) {
                img[row * size + col] = FOREGROUND;
            }
        }
    }
    gaussian_blur(&img, size, blur, Boundary::Clamp)
}

#[derive(Clone, Copy)]
enum Boundary {
    Clamp,
    Wrap,
}

/// Normalized 1-D Gaussian taps over `[-4σ, 4σ]`.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma + 0.5) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable Gaussian filter of a square image.
fn gaussian_blur(img: &[f64], size: usize, sigma: f64, boundary: Boundary) -> Vec<f64> {
    if sigma <= 0.0 {
        return img.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let n = size as isize;
    let index = |i: isize| -> usize {
        match boundary {
            Boundary::Clamp => i.clamp(0, n - 1) as usize,
            Boundary::Wrap => i.rem_euclid(n) as usize,
        }
    };
    let mut rows = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            rows[r * size + c] = k
                .iter()
                .enumerate()
                .map(|(t, w)| w * img[r * size + index(c as isize + t as isize - radius)])
                .sum();
        }
    }
    let mut out = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            out[r * size + c] = k
                .iter()
                .enumerate()
                .map(|(t, w)| w * rows[index(r as isize + t as isize - radius) * size + c])
                .sum();
        }
    }
    out
}

/// Standard deviation of wrapped-Gaussian-filtered unit white noise.
fn smoothed_noise_std(size: usize, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return 1.0;
    }
    let mut folded = vec![0.0; size];
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;
    for (t, w) in k.iter().enumerate() {
        folded[(t as isize - radius).rem_euclid(size as isize) as usize] += w;
    }
    folded.iter().map(|w| w * w).sum::<f64>()
}

fn generate_split(
    cfg: &SyntheticConfig,
    wm: &Watermarks,
    per_class: usize,
    stream_id: u64,
    split: &str,
) -> Result<LabeledDataset> {
    let mut rng = stream(cfg.seed, stream_id);
    let unit = Normal::new(0.0, 1.0).expect("valid sigma");
    let field_scale = cfg.noise_sigma / smoothed_noise_std(cfg.size, cfg.noise_smoothing);
    let d = cfg.dim();
    let n = per_class * cfg.classes;
    let mut inputs = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let j = cfg.jitter as i64;
    for i in 0..n {
        let class = i % cfg.classes;
        let dx = rng.random_range(-j..=j) as f64;
        let dy = rng.random_range(-j..=j) as f64;
        let mut img = template_image(class, cfg.size, dx, dy, cfg.template_blur);
        for &(p, s) in wm.mask(class) {
            img[p] += cfg.watermark_amplitude * s;
        }
        if cfg.noise_sigma > 0.0 {
            let white: Vec<f64> = (0..d).map(|_| unit.sample(&mut rng)).collect();
            let field = gaussian_blur(&white, cfg.size, cfg.noise_smoothing, Boundary::Wrap);
            for (v, z) in img.iter_mut().zip(field) {
                *v += field_scale * z;
            }
        }
        for v in img.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        inputs.extend_from_slice(&img);
        labels.push(class);
    }
    LabeledDataset::new([1, cfg.size, cfg.size], cfg.classes, inputs, labels, split, cfg.hash())
}

/// Train and test splits drawn from independent random streams.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let wm = Watermarks::from_config(cfg)?;
    let train = generate_split(cfg, &wm, cfg.samples_per_class, 1, "train")?;
    let test = generate_split(cfg, &wm, cfg.test_per_class, 2, "test")?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            samples_per_class: 40,
            test_per_class: 20,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let cfg = small();
        let (a, ta) = gen_synthetic(&cfg).unwrap();
        let (b, tb) = gen_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert!(a.class_counts().iter().all(|&c| c == 40));
        assert!(ta.class_counts().iter().all(|&c| c == 20));
        assert!(a.inputs.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn splits_are_disjoint() {
        let (train, test) = gen_synthetic(&small()).unwrap();
        let hashes: HashSet<String> = (0..train.len())
            .map(|i| hex_digest(&bytes(train.sample(i))))
            .collect();
        assert!((0..test.len()).all(|i| !hashes.contains(&hex_digest(&bytes(test.sample(i))))));
    }

    fn bytes(x: &[f64]) -> Vec<u8> {
        x.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn masks_are_disjoint_and_mirrored() {
        let cfg = small();
        let wm = Watermarks::from_config(&cfg).unwrap();
        for c in 0..cfg.classes {
            let pat = wm.pattern(c);
            for r in 0..16 {
                for col in 0..16 {
                    assert_eq!(pat[r * 16 + col], pat[r * 16 + 15 - col]);
                }
            }
            assert_eq!(wm.mask(c).len(), 24);
        }
    }

    #[test]
    fn mask_collision_is_a_spec_error() {
        let cfg = SyntheticConfig {
            watermark_pixels: 40,
            ..small()
        };
        assert!(matches!(Watermarks::from_config(&cfg), Err(Error::Spec(_))));
        let cfg = SyntheticConfig {
            watermark_pixels: 24,
            mirror_watermark: false,
            ..small()
        };
        assert!(Watermarks::from_config(&cfg).is_ok());
    }

    #[test]
    fn pure_templates_are_separable_by_nearest_template() {
        let cfg = SyntheticConfig {
            watermark_amplitude: 0.0,
            noise_sigma: 0.0,
            ..small()
        };
        let (train, _) = gen_synthetic(&cfg).unwrap();
        // every jittered template of every class
        let j = cfg.jitter as i64;
        let mut bank = Vec::new();
        for c in 0..cfg.classes {
            for dx in -j..=j {
                for dy in -j..=j {
                    bank.push((c, template_image(c, 16, dx as f64, dy as f64, cfg.template_blur)));
                }
            }
        }
        for i in 0..train.len() {
            let x = train.sample(i);
            let best = bank
                .iter()
                .min_by(|a, b| {
                    let da: f64 = a.1.iter().zip(x).map(|(p, q)| (p - q).powi(2)).sum();
                    let db: f64 = b.1.iter().zip(x).map(|(p, q)| (p - q).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(best.0, train.labels[i]);
        }
    }

    #[test]
    fn watermark_probe_basics() {
        let cfg = small();
        let wm = Watermarks::from_config(&cfg).unwrap();
        assert_eq!(wm.score(&vec![0.0; 256], 3), 0.0);
        for c in 0..cfg.classes {
            let mut x = vec![0.5; 256];
            for &(p, s) in wm.mask(c) {
                x[p] += cfg.watermark_amplitude * s;
            }
            let scores: Vec<f64> = (0..cfg.classes).map(|k| wm.score(&x, k)).collect();
            let best = crate::autograd::argmax(&scores);
            assert_eq!(best, c);
        }
    }

    #[test]
    fn watermark_probe_identifies_true_class_on_clean_data() {
        let cfg = SyntheticConfig {
            samples_per_class: 100,
            ..small()
        };
        let (train, _) = gen_synthetic(&cfg).unwrap();
        let wm = Watermarks::from_config(&cfg).unwrap();
        let hits = (0..train.len())
            .filter(|&i| {
                let x = train.sample(i);
                let scores: Vec<f64> = (0..cfg.classes).map(|k| wm.score(x, k)).collect();
                crate::autograd::argmax(&scores) == train.labels[i]
            })
            .count();
        let rate = hits as f64 / train.len() as f64;
        assert!(rate >= 0.95, "probe accuracy {rate}");
    }

    #[test]
    fn noise_field_has_requested_marginal_std() {
        let cfg = SyntheticConfig {
            watermark_amplitude: 0.0,
            ..small()
        };
        let (train, _) = gen_synthetic(&cfg).unwrap();
        let clean = template_image(0, 16, 0.0, 0.0, cfg.template_blur);
        // pick unclamped interior pixels of centred class-0 samples
        let mut resid = Vec::new();
        for i in train.class_indices(0) {
            let x = train.sample(i);
            for p in [0usize, 17, 34, 240, 255] {
                resid.push(x[p] - clean[p]);
            }
        }
        let n = resid.len() as f64;
        let mean = resid.iter().sum::<f64>() / n;
        let sd = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((sd - cfg.noise_sigma).abs() < 0.015, "sd {sd}");
    }

    #[test]
    fn smoothed_noise_std_matches_direct_sum() {
        // oracle: filter a unit impulse, sum of squared responses
        let mut impulse = vec![0.0; 16 * 16];
        impulse[5 * 16 + 9] = 1.0;
        let resp = gaussian_blur(&impulse, 16, 1.5, Boundary::Wrap);
        let direct: f64 = resp.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((direct - smoothed_noise_std(16, 1.5)).abs() < 1e-12);
        assert!((resp.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn score_gradient_matches_finite_differences() {
        let cfg = small();
        let wm = Watermarks::from_config(&cfg).unwrap();
        let (train, _) = gen_synthetic(&cfg).unwrap();
        let x = train.sample(0);
        let g = wm.score_gradient(2);
        let num = crate::autograd::numeric_gradient(&mut |z: &[f64]| wm.score(z, 2), x, 1e-5);
        assert!(crate::autograd::max_gradient_error(&g, &num, 1e-6) < 1e-4);
    }
}
