//! Deterministic synthetic pedestrians with a built-in clothing confound.
//!
//! Each figure has a head carrying an identity glyph (a 5x5 binary pattern)
//! in a face whose width depends on identity, and an outfit (upper clothes +
//! pants) whose colors and stripe texture depend only on the outfit design.
//! The body outline is the same for everyone. The last clothing of every identity is held out of
//! training; with probability `confound` it reuses the first outfit design
//! of the next identity, so outfit color points at the wrong person.
//! Parsing masks use the default region vocabulary.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    format_manifest, write_labels, write_rgb, DatasetIndex, LabelMap, ManifestRow, RgbImage, Sample,
};
use crate::error::{Error, Result};

const BACKGROUND: u8 = 0;
const HAIR: u8 = 1;
const FACE: u8 = 2;
const UPPER: u8 = 3;
const PANTS: u8 = 4;
const ARMS: u8 = 6;
const SHOES: u8 = 8;

/// Maximum placement offset in pixels, per axis.
pub const JITTER: i32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_identities: usize,
    pub clothings_per_identity: usize,
    pub images_per_appearance: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of background pixel noise.
    pub noise: f64,
    /// Probability that an identity's held-out outfit copies another identity's training outfit.
    pub confound: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_identities: 8,
            clothings_per_identity: 3,
            images_per_appearance: 10,
            height: 64,
            width: 32,
            noise: 0.05,
            confound: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0 || self.clothings_per_identity == 0 || self.images_per_appearance == 0 {
            return Err(Error::Config("synthetic dataset counts must be at least 1".into()));
        }
        if self.height < 32 || self.width < 16 {
            return Err(Error::Config(format!(
                "synthetic images must be at least 32x16, got {}x{}",
                self.height, self.width
            )));
        }
        if !(0.0..=1.0).contains(&self.noise) || !(0.0..=1.0).contains(&self.confound) {
            return Err(Error::Config("noise and confound must lie in [0, 1]".into()));
        }
        if self.num_identities > 1 << 20 {
            return Err(Error::Config("too many identities".into()));
        }
        Ok(())
    }

    pub fn held_out_clothing(&self) -> u32 {
        self.clothings_per_identity as u32 - 1
    }
}

/// Outfit appearance: two colors and a stripe period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outfit {
    pub upper: [f64; 3],
    pub pants: [f64; 3],
    pub stripe_period: usize,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() * 6.0).rem_euclid(6.0);
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Outfit for a design number; hues follow the golden-ratio sequence so
/// nearby designs are far apart in color.
pub fn outfit(design: usize) -> Outfit {
    const PHI: f64 = 0.618_033_988_749_895;
    let h = design as f64 * PHI;
    Outfit {
        upper: hsv(h, 0.85, 0.9),
        pants: hsv(h + 0.5, 0.7, 0.55 + 0.1 * (design % 3) as f64),
        stripe_period: 2 + design % 3,
    }
}

/// One distinct 5x5 glyph per identity.
pub fn identity_glyphs(n: usize, seed: u64) -> Vec<[[bool; 5]; 5]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut g = [[false; 5]; 5];
        let mut bits = 0u32;
        for (r, row) in g.iter_mut().enumerate() {
            for (c, cell) in row.iter_mut().enumerate() {
                *cell = rng.gen_bool(0.5);
                bits |= (*cell as u32) << (r * 5 + c);
            }
        }
        let on = bits.count_ones();
        if (8..=17).contains(&on) && seen.insert(bits) {
            out.push(g);
        }
    }
    out
}

/// Design number worn by `(identity, clothing)`.
fn design_table(cfg: &SynthConfig) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5851_f42d_4c95_7f2d);
    let k = cfg.clothings_per_identity;
    let n = cfg.num_identities;
    let mut table: Vec<Vec<usize>> = (0..n).map(|i| (0..k).map(|c| i * k + c).collect()).collect();
    if k >= 2 && n >= 2 {
        for i in 0..n {
            if rng.gen_bool(cfg.confound) {
                table[i][k - 1] = ((i + 1) % n) * k;
            }
        }
    }
    table
}

/// Scaled drawing helper over a 64x32 reference layout.
struct Canvas<'a> {
    img: &'a mut RgbImage,
    labels: &'a mut LabelMap,
    sy: f64,
    sx: f64,
    dy: i32,
    dx: i32,
}

impl Canvas<'_> {
    fn row(&self, r: f64) -> i32 {
        (r * self.sy).round() as i32 + self.dy
    }

    fn col(&self, c: f64) -> i32 {
        (c * self.sx).round() as i32 + self.dx
    }

    /// Fills the reference-space rectangle `[r0, r1) x [c0, c1)`.
    fn fill<F: Fn(usize, usize) -> [f64; 3]>(&mut self, (r0, r1): (f64, f64), (c0, c1): (f64, f64), code: u8, color: F) {
        let (h, w) = (self.img.height as i32, self.img.width as i32);
        for r in self.row(r0).max(0)..self.row(r1).min(h) {
            for c in self.col(c0).max(0)..self.col(c1).min(w) {
                let (ru, cu) = (r as usize, c as usize);
                let local_r = (r - self.dy) as usize;
                self.img.set_pixel(ru, cu, color(local_r, cu));
                self.labels.data[ru * self.labels.width + cu] = code;
            }
        }
    }
}

const SKIN: [f64; 3] = [0.87, 0.72, 0.6];
const HAIR_COLOR: [f64; 3] = [0.12, 0.1, 0.08];
const INK: [f64; 3] = [0.15, 0.12, 0.1];
const SHOE: [f64; 3] = [0.2, 0.2, 0.22];

/// Renders one figure. `jitter` is `(dy, dx)` in pixels.
pub fn render(
    cfg: &SynthConfig,
    glyph: &[[bool; 5]; 5],
    identity: usize,
    fit: &Outfit,
    jitter: (i32, i32),
    rng: &mut ChaCha8Rng,
) -> (RgbImage, LabelMap) {
    let (h, w) = (cfg.height, cfg.width);
    let normal = Normal::new(0.0, cfg.noise.max(1e-12)).expect("finite noise");
    let mut img = RgbImage::filled(h, w, 0.0);
    for r in 0..h {
        for c in 0..w {
            let base = 0.45 + 0.05 * (r as f64 / h as f64);
            let mut px = [base; 3];
            if cfg.noise > 0.0 {
                for v in &mut px {
                    *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
                }
            }
            img.set_pixel(r, c, px);
        }
    }
    let mut labels = LabelMap::new(h, w, vec![BACKGROUND; h * w]).expect("sized");
    let mut cv = Canvas {
        img: &mut img,
        labels: &mut labels,
        sy: h as f64 / 64.0,
        sx: w as f64 / 32.0,
        dy: jitter.0,
        dx: jitter.1,
    };
    let half = 7.0;
    let cx = 16.0;
    // head: hair band then a face whose width depends on identity, glyph centred
    let margin = (identity % 3) as f64;
    cv.fill((2.0, 4.0), (cx - 5.0 - margin, cx + 5.0 + margin), HAIR, |_, _| HAIR_COLOR);
    cv.fill((4.0, 14.0), (cx - 5.0 - margin, cx + 5.0 + margin), FACE, |_, _| SKIN);
    for (gr, row) in glyph.iter().enumerate() {
        for (gc, &on) in row.iter().enumerate() {
            let r0 = 4.0 + 2.0 * gr as f64;
            let c0 = cx - 5.0 + 2.0 * gc as f64;
            let color = if on { INK } else { SKIN };
            cv.fill((r0, r0 + 2.0), (c0, c0 + 2.0), FACE, |_, _| color);
        }
    }
    // arms, then torso, pants and shoes
    cv.fill((16.0, 34.0), (cx - half - 2.0, cx - half), ARMS, |_, _| SKIN);
    cv.fill((16.0, 34.0), (cx + half, cx + half + 2.0), ARMS, |_, _| SKIN);
    let upper = fit.upper;
    let period = fit.stripe_period;
    cv.fill((15.0, 38.0), (cx - half, cx + half), UPPER, move |r, _| {
        if (r / period) % 2 == 0 {
            upper
        } else {
            upper.map(|v| v * 0.75)
        }
    });
    let pants = fit.pants;
    cv.fill((38.0, 58.0), (cx - half + 1.0, cx - 0.5), PANTS, |_, _| pants);
    cv.fill((38.0, 58.0), (cx + 0.5, cx + half - 1.0), PANTS, |_, _| pants);
    cv.fill((58.0, 61.0), (cx - half + 1.0, cx - 0.5), SHOES, |_, _| SHOE);
    cv.fill((58.0, 61.0), (cx + 0.5, cx + half - 1.0), SHOES, |_, _| SHOE);
    (img, labels)
}

/// In-memory generation in `(identity, clothing, image)` order.
/// The camera of image `j` is `j % 2`.
pub fn synthesize(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let glyphs = identity_glyphs(cfg.num_identities, cfg.seed);
    let designs = design_table(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    for id in 0..cfg.num_identities {
        for c in 0..cfg.clothings_per_identity {
            let fit = outfit(designs[id][c]);
            for j in 0..cfg.images_per_appearance {
                let jitter = (
                    rng.gen_range(-JITTER..=JITTER),
                    rng.gen_range(-JITTER..=JITTER),
                );
                let (img, lab) = render(cfg, &glyphs[id], id, &fit, jitter, &mut rng);
                let mut s = Sample::new(img, lab, id as u32, c as u32, (j % 2) as u32)?;
                s.image_path = PathBuf::from(format!("images/{id:04}_{c:02}_{j:03}.png"));
                s.parsing_path = PathBuf::from(format!("parsing/{id:04}_{c:02}_{j:03}.png"));
                out.push(s);
            }
        }
    }
    Ok(out)
}

fn row_of(s: &Sample) -> ManifestRow {
    ManifestRow {
        image_path: s.image_path.clone(),
        parsing_path: s.parsing_path.clone(),
        identity: s.identity,
        clothing: s.clothing,
        camera: s.camera,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes images, parsing masks and `manifest.tsv` under `out`.
pub fn generate(cfg: &SynthConfig, out: &Path) -> Result<PathBuf> {
    let samples = synthesize(cfg)?;
    for sub in ["images", "parsing"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for s in &samples {
        write_rgb(&out.join(&s.image_path), &s.image)?;
        write_labels(&out.join(&s.parsing_path), &s.parsing)?;
    }
    let rows: Vec<ManifestRow> = samples.iter().map(row_of).collect();
    let path = out.join("manifest.tsv");
    write_text(&path, &format_manifest(&rows))?;
    Ok(path)
}

/// Train / query / gallery partition of a synthesized sample list.
#[derive(Debug, Clone)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub query: Vec<usize>,
    pub gallery: Vec<usize>,
}

/// Training gets every image of the non-held-out clothings. Held-out
/// clothing images split by camera: camera 0 to the query, camera 1 to the
/// gallery. The gallery also gets one camera-1 image of clothing 0 per identity.
pub fn split_plan(cfg: &SynthConfig, samples: &[Sample]) -> Result<SplitPlan> {
    if cfg.clothings_per_identity < 2 {
        return Err(Error::Config(
            "a clothing-change split needs at least 2 clothings per identity".into(),
        ));
    }
    if cfg.images_per_appearance < 2 {
        return Err(Error::Config(
            "a clothing-change split needs at least 2 images per appearance".into(),
        ));
    }
    let held = cfg.held_out_clothing();
    let mut plan = SplitPlan {
        train: vec![],
        query: vec![],
        gallery: vec![],
    };
    let mut anchor_taken = BTreeSet::new();
    for (i, s) in samples.iter().enumerate() {
        if s.clothing == held {
            if s.camera == 0 {
                plan.query.push(i);
            } else {
                plan.gallery.push(i);
            }
        } else {
            plan.train.push(i);
            if s.clothing == 0 && s.camera == 1 && anchor_taken.insert(s.identity) {
                plan.gallery.push(i);
            }
        }
    }
    plan.gallery.sort_unstable();
    Ok(plan)
}

#[derive(Debug, Clone)]
pub struct SplitManifests {
    pub all: PathBuf,
    pub train: PathBuf,
    pub query: PathBuf,
    pub gallery: PathBuf,
}

/// [`generate`] plus `train.tsv`, `query.tsv` and `gallery.tsv`.
pub fn generate_split(cfg: &SynthConfig, out: &Path) -> Result<SplitManifests> {
    if cfg.clothings_per_identity < 2 {
        return Err(Error::Config(
            "a clothing-change split needs at least 2 clothings per identity".into(),
        ));
    }
    let all = generate(cfg, out)?;
    let samples = synthesize(cfg)?;
    let plan = split_plan(cfg, &samples)?;
    let write = |name: &str, idx: &[usize]| -> Result<PathBuf> {
        let rows: Vec<ManifestRow> = idx.iter().map(|&i| row_of(&samples[i])).collect();
        let p = out.join(name);
        write_text(&p, &format_manifest(&rows))?;
        Ok(p)
    };
    Ok(SplitManifests {
        all,
        train: write("train.tsv", &plan.train)?,
        query: write("query.tsv", &plan.query)?,
        gallery: write("gallery.tsv", &plan.gallery)?,
    })
}

/// In-memory train / query / gallery indexes.
pub fn synthesize_split(cfg: &SynthConfig) -> Result<(DatasetIndex, DatasetIndex, DatasetIndex)> {
    let samples: Vec<Arc<Sample>> = synthesize(cfg)?.into_iter().map(Arc::new).collect();
    let plain: Vec<Sample> = samples.iter().map(|s| (**s).clone()).collect();
    let plan = split_plan(cfg, &plain)?;
    let pick = |idx: &[usize]| DatasetIndex::from_samples(idx.iter().map(|&i| samples[i].clone()).collect());
    Ok((pick(&plan.train), pick(&plan.query), pick(&plan.gallery)))
}
