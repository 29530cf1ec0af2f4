//! Stochastic input transform: white noise, salt-and-pepper, background
//! overlay, and the composite label space that goes with it.
//!
//! The transform order is fixed: white noise, then salt-and-pepper, then
//! background overlay. The overlay output `x' + alpha*y` is deliberately not
//! renormalized, so blended inputs live in `[0, 1+alpha]`.
//!
//! Every random choice is a pure function of `(seed, image id, counter)` for
//! a fixed config; redrawing with the same triple reproduces the realization
//! bit for bit.

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

/// Stream labels separating the independent draws of one realization.
const LANE_WHITE: u64 = 1;
const LANE_SP: u64 = 2;
const LANE_BG: u64 = 3;

/// A raw input image. Pixels are `[c,h,w]` in `[0,1]`.
#[derive(Debug, Clone)]
pub struct Image {
    pub pixels: Tensor,
    pub id: u64,
}

impl Image {
    pub fn new(pixels: Tensor, id: u64) -> Result<Self> {
        if pixels.shape().len() != 3 {
            return Err(Error::Dimension {
                op: "image",
                detail: format!("pixels rank {} must be 3", pixels.shape().len()),
            });
        }
        if let Some(v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("image pixel {v} outside [0,1]")));
        }
        Ok(Image { pixels, id })
    }
}

/// One generated background image, reproducible from its recipe name and
/// seed alone.
#[derive(Debug, Clone)]
pub struct Background {
    pub pixels: Tensor,
    pub index: usize,
    pub generator_name: &'static str,
    pub seed: u64,
}

/// Intensities of the three transform stages plus the composite-label fanout.
#[derive(Debug, Clone, PartialEq)]
pub struct InterferenceConfig {
    /// Background overlay strength.
    pub alpha: f32,
    /// White-noise strength.
    pub beta: f32,
    /// Fraction of pixels hit by salt-and-pepper.
    pub gamma: f32,
    /// Number of backgrounds / label copies per base class.
    pub k: usize,
    pub master_seed: u64,
}

impl InterferenceConfig {
    /// All intensities zero with a single background: the transform is the
    /// identity and the composite label space collapses to the base one.
    pub fn identity(master_seed: u64) -> Self {
        InterferenceConfig { alpha: 0.0, beta: 0.0, gamma: 0.0, k: 1, master_seed }
    }

    pub fn new(alpha: f32, beta: f32, gamma: f32, k: usize, master_seed: u64) -> Result<Self> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
        }
        if !beta.is_finite() || beta < 0.0 {
            return Err(Error::Config(format!("beta must be >= 0, got {beta}")));
        }
        if !gamma.is_finite() || !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Config(format!("gamma must be in [0,1], got {gamma}")));
        }
        if k < 1 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        Ok(InterferenceConfig { alpha, beta, gamma, k, master_seed })
    }
}

/// The sampled randomness for one transform application. `white` is per
/// element; the salt-and-pepper mask and values are per pixel, shared across
/// channels; `background_index` selects the overlay.
#[derive(Debug, Clone)]
pub struct NoiseRealization {
    pub white: Tensor,
    pub sp_mask: Vec<bool>,
    pub sp_value: Vec<bool>,
    pub background_index: usize,
}

impl NoiseRealization {
    /// Draws the realization determined by `(seed, image_id, counter)` for a
    /// `[c,h,w]` image, pixel-hit probability `gamma`, and `k` backgrounds.
    pub fn draw(
        seed: u64,
        image_id: u64,
        counter: u64,
        shape: &[usize],
        gamma: f32,
        k: usize,
    ) -> Result<Self> {
        if shape.len() != 3 {
            return Err(Error::Dimension {
                op: "noise_realization",
                detail: format!("shape rank {} must be 3", shape.len()),
            });
        }
        if !gamma.is_finite() || !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Config(format!("gamma must be in [0,1], got {gamma}")));
        }
        if k < 1 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);

        let mut white_rng = StreamRng::new(seed, &[image_id, counter, LANE_WHITE]);
        let mut white = Tensor::zeros(vec![c, h, w]);
        for v in white.data_mut() {
            *v = white_rng.next_f32_open();
        }

        let mut sp_rng = StreamRng::new(seed, &[image_id, counter, LANE_SP]);
        let mut sp_mask = vec![false; h * w];
        let mut sp_value = vec![false; h * w];
        for i in 0..h * w {
            sp_mask[i] = sp_rng.next_f32() < gamma;
            sp_value[i] = sp_rng.next_bool();
        }

        let mut bg_rng = StreamRng::new(seed, &[image_id, counter, LANE_BG]);
        let background_index = bg_rng.next_below(k);

        Ok(NoiseRealization { white, sp_mask, sp_value, background_index })
    }

    /// Draw under a config: threshold and fanout come from `cfg`, the stream
    /// from `(seed, image_id, counter)`.
    pub fn draw_for(
        cfg: &InterferenceConfig,
        seed: u64,
        image_id: u64,
        counter: u64,
        shape: &[usize],
    ) -> Result<Self> {
        Self::draw(seed, image_id, counter, shape, cfg.gamma, cfg.k)
    }
}

/// Transformed input ready for the network, together with the realization
/// that produced it.
#[derive(Debug, Clone)]
pub struct BlendedInput {
    pub pixels: Tensor,
    pub realization: NoiseRealization,
}

/// `(x + beta*white) / (1 + beta)` elementwise. Identity when beta is zero.
pub fn white_noise(x: &Tensor, beta: f32, white: &Tensor) -> Result<Tensor> {
    if !beta.is_finite() || beta < 0.0 {
        return Err(Error::Config(format!("beta must be >= 0, got {beta}")));
    }
    if x.shape() != white.shape() {
        return Err(Error::Dimension {
            op: "white_noise",
            detail: format!("input {:?} vs noise {:?}", x.shape(), white.shape()),
        });
    }
    let mut out = Tensor::zeros(x.shape().to_vec());
    let denom = 1.0 + beta;
    for (o, (&xv, &nv)) in out.data_mut().iter_mut().zip(x.data().iter().zip(white.data())) {
        *o = (xv + beta * nv) / denom;
    }
    out.check_finite("white_noise")?;
    Ok(out)
}

/// Replaces masked pixels (all channels jointly) with 0 or 1 according to
/// `value`. Mask and value vectors are per pixel of the `[c,h,w]` input.
pub fn salt_pepper(x: &Tensor, mask: &[bool], value: &[bool]) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Dimension {
            op: "salt_pepper",
            detail: format!("input rank {} must be 3", shape.len()),
        });
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if mask.len() != h * w || value.len() != h * w {
        return Err(Error::Dimension {
            op: "salt_pepper",
            detail: format!("mask {} / values {} for {h}x{w} pixels", mask.len(), value.len()),
        });
    }
    let mut out = x.clone();
    let data = out.data_mut();
    for ci in 0..c {
        let plane = ci * h * w;
        for p in 0..h * w {
            if mask[p] {
                data[plane + p] = if value[p] { 1.0 } else { 0.0 };
            }
        }
    }
    Ok(out)
}

/// `x' + alpha*y`, not renormalized: output range is `[0, 1+alpha]` for
/// inputs and backgrounds in `[0,1]`.
pub fn overlay(x: &Tensor, alpha: f32, background: &Tensor) -> Result<Tensor> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    if x.shape() != background.shape() {
        return Err(Error::Dimension {
            op: "overlay",
            detail: format!("input {:?} vs background {:?}", x.shape(), background.shape()),
        });
    }
    let mut out = Tensor::zeros(x.shape().to_vec());
    for (o, (&xv, &bv)) in out.data_mut().iter_mut().zip(x.data().iter().zip(background.data())) {
        *o = xv + alpha * bv;
    }
    out.check_finite("overlay")?;
    Ok(out)
}

/// Full transform: white noise, then salt-and-pepper, then overlay with the
/// realization's background.
pub fn apply_interference(
    x: &Tensor,
    cfg: &InterferenceConfig,
    backgrounds: &[Background],
    realization: &NoiseRealization,
) -> Result<BlendedInput> {
    if backgrounds.len() != cfg.k {
        return Err(Error::Config(format!(
            "{} backgrounds provided for k = {}",
            backgrounds.len(),
            cfg.k
        )));
    }
    let bg = backgrounds.get(realization.background_index).ok_or_else(|| {
        Error::Config(format!(
            "realization selects background {} of {}",
            realization.background_index,
            backgrounds.len()
        ))
    })?;
    let noisy = white_noise(x, cfg.beta, &realization.white)?;
    let speckled = salt_pepper(&noisy, &realization.sp_mask, &realization.sp_value)?;
    let blended = overlay(&speckled, cfg.alpha, &bg.pixels)?;
    Ok(BlendedInput { pixels: blended, realization: realization.clone() })
}

/// Composite label for base class `base` observed over background `k_index`.
pub fn encode_label(base: usize, k_index: usize, n: usize, k: usize) -> Result<usize> {
    if base >= n {
        return Err(Error::Label(format!("base class {base} out of range 0..{n}")));
    }
    if k_index >= k {
        return Err(Error::Label(format!("background index {k_index} out of range 0..{k}")));
    }
    Ok(base * k + k_index)
}

/// Inverse of [`encode_label`]: `(base, k_index)`.
pub fn decode_label(composite: usize, n: usize, k: usize) -> Result<(usize, usize)> {
    if composite >= n * k {
        return Err(Error::Label(format!("composite label {composite} out of range 0..{}", n * k)));
    }
    Ok((composite / k, composite % k))
}

/// Recipe names in generation order. `generate_backgrounds(k, ..)` takes the
/// first `k`, cycling with fresh seeds past the end.
pub const BACKGROUND_RECIPES: [&str; 8] = [
    "solid-gray",
    "horizontal-gradient",
    "vertical-gradient",
    "checkerboard",
    "diagonal-stripes",
    "concentric-rings",
    "radial-gradient",
    "lowfreq-noise",
];

/// Generates `k` deterministic backgrounds of shape `[c,h,w]`.
pub fn generate_backgrounds(
    k: usize,
    c: usize,
    h: usize,
    w: usize,
    master_seed: u64,
) -> Result<Vec<Background>> {
    if k < 1 {
        return Err(Error::Config("background count must be at least 1".into()));
    }
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!("degenerate background shape [{c},{h},{w}]")));
    }
    let mut out = Vec::with_capacity(k);
    for index in 0..k {
        let name = BACKGROUND_RECIPES[index % BACKGROUND_RECIPES.len()];
        let seed = crate::rng::split(master_seed, index as u64);
        let pixels = render_background(name, seed, c, h, w)?;
        out.push(Background { pixels, index, generator_name: name, seed });
    }
    Ok(out)
}

/// Renders one recipe. Bit-identical for identical `(name, seed, c, h, w)`.
pub fn render_background(name: &str, seed: u64, c: usize, h: usize, w: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(vec![c, h, w]);
    let hw = h * w;
    let data = t.data_mut();
    let mut fill = |f: &mut dyn FnMut(usize, usize) -> f32| {
        for y in 0..h {
            for x in 0..w {
                let v = f(y, x).clamp(0.0, 1.0);
                for ci in 0..c {
                    data[ci * hw + y * w + x] = v;
                }
            }
        }
    };
    match name {
        "solid-gray" => fill(&mut |_, _| 0.5),
        "horizontal-gradient" => {
            let denom = (w.max(2) - 1) as f32;
            fill(&mut |_, x| x as f32 / denom)
        }
        "vertical-gradient" => {
            let denom = (h.max(2) - 1) as f32;
            fill(&mut |y, _| y as f32 / denom)
        }
        "checkerboard" => {
            // 8-pixel cells: (0,0) and (8,0) fall in different cells, (0,0)
            // and (16,0) in equal ones.
            fill(&mut |y, x| if (y / 8 + x / 8) % 2 == 0 { 0.2 } else { 0.8 })
        }
        "diagonal-stripes" => fill(&mut |y, x| if ((y + x) / 4) % 2 == 0 { 0.25 } else { 0.75 }),
        "concentric-rings" => {
            let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
            fill(&mut |y, x| {
                let d = ((y as f32 - cy).powi(2) + (x as f32 - cx).powi(2)).sqrt();
                0.5 + 0.5 * (d * std::f32::consts::PI / 4.0).cos()
            })
        }
        "radial-gradient" => {
            let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
            let rmax = (cy * cy + cx * cx).sqrt().max(1e-6);
            fill(&mut |y, x| ((y as f32 - cy).powi(2) + (x as f32 - cx).powi(2)).sqrt() / rmax)
        }
        "lowfreq-noise" => {
            // Coarse seeded grid, bilinearly upsampled: smooth low-frequency
            // structure rather than per-pixel noise.
            let gh = (h / 4).max(2);
            let gw = (w / 4).max(2);
            let mut rng = StreamRng::new(seed, &[0x6267]);
            let grid: Vec<f32> = (0..gh * gw).map(|_| rng.next_f32()).collect();
            fill(&mut |y, x| {
                let fy = y as f32 / h as f32 * (gh - 1) as f32;
                let fx = x as f32 / w as f32 * (gw - 1) as f32;
                let (y0, x0) = (fy as usize, fx as usize);
                let (y1, x1) = ((y0 + 1).min(gh - 1), (x0 + 1).min(gw - 1));
                let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
                let top = grid[y0 * gw + x0] * (1.0 - tx) + grid[y0 * gw + x1] * tx;
                let bot = grid[y1 * gw + x0] * (1.0 - tx) + grid[y1 * gw + x1] * tx;
                top * (1.0 - ty) + bot * ty
            })
        }
        other => return Err(Error::Config(format!("unknown background recipe `{other}`"))),
    }
    Ok(t)
}
