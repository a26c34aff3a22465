//! Clothing masks: the pixel-level mask, the clothing-masked image fed to the
//! attention stream, and the area-pooled mask at feature resolution.

use crate::datamodel::{LabelMap, RegionVocabulary, RgbImage, Sample};
use crate::error::{Error, Result};

/// Value written over clothing pixels in the masked image.
pub const DEFAULT_FILL: f64 = 0.0;

/// Binary clothing mask at image resolution, values exactly 0.0 or 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl PixelMask {
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }
}

/// Clothing mask pooled to a feature grid; values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMask {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClothingMask {
    pub pixel: PixelMask,
    pub feature: FeatureMask,
}

impl ClothingMask {
    pub fn new(pixel: PixelMask, target: (usize, usize)) -> Result<Self> {
        let feature = downsample_mask(&pixel, target)?;
        Ok(Self { pixel, feature })
    }
}

pub fn clothing_region_mask(parsing: &LabelMap, vocab: &RegionVocabulary) -> Result<PixelMask> {
    let table = vocab.lookup_table();
    let mut unknown = std::collections::BTreeSet::new();
    let data = parsing
        .data
        .iter()
        .map(|&code| match table[code as usize] {
            Some(true) => 1.0,
            Some(false) => 0.0,
            None => {
                unknown.insert(code);
                0.0
            }
        })
        .collect();
    if !unknown.is_empty() {
        return Err(Error::Validation(format!(
            "parsing contains region codes not in the vocabulary: {unknown:?}"
        )));
    }
    Ok(PixelMask {
        height: parsing.height,
        width: parsing.width,
        data,
    })
}

/// Replaces clothing pixels with `fill` in all channels.
pub fn clothing_masked_image(
    sample: &Sample,
    vocab: &RegionVocabulary,
    fill: f64,
) -> Result<RgbImage> {
    let mask = clothing_region_mask(&sample.parsing, vocab)?;
    Ok(apply_pixel_mask(&sample.image, &mask, fill))
}

pub fn apply_pixel_mask(image: &RgbImage, mask: &PixelMask, fill: f64) -> RgbImage {
    let mut out = image.clone();
    for (p, &m) in mask.data.iter().enumerate() {
        if m != 0.0 {
            out.data[p * 3..p * 3 + 3].fill(fill);
        }
    }
    out
}

/// Area-average pooling of the pixel mask onto a `target` grid.
///
/// Output cell `(r, c)` covers the source interval
/// `[r * H / h, (r + 1) * H / h) x [c * W / w, (c + 1) * W / w)`; partially
/// covered source pixels contribute in proportion to the overlap.
pub fn downsample_mask(mask: &PixelMask, target: (usize, usize)) -> Result<FeatureMask> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::Argument(format!(
            "target size {th}x{tw} has a zero dimension"
        )));
    }
    if mask.height == 0 || mask.width == 0 {
        return Err(Error::Argument("source mask is empty".into()));
    }
    let row_w = overlap_weights(mask.height, th);
    let col_w = overlap_weights(mask.width, tw);
    let mut data = vec![0.0; th * tw];
    for (r, rows) in row_w.iter().enumerate() {
        for (c, cols) in col_w.iter().enumerate() {
            let mut acc = 0.0;
            let mut area = 0.0;
            for &(sr, wr) in rows {
                for &(sc, wc) in cols {
                    acc += wr * wc * mask.data[sr * mask.width + sc];
                    area += wr * wc;
                }
            }
            data[r * tw + c] = (acc / area).clamp(0.0, 1.0);
        }
    }
    Ok(FeatureMask {
        height: th,
        width: tw,
        data,
    })
}

/// For each of `dst` output cells, the source indices it overlaps and the overlap length.
fn overlap_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|s| {
                    let w = (hi.min((s + 1) as f64) - lo.max(s as f64)).max(0.0);
                    (w > 0.0).then_some((s, w))
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(h: usize, w: usize, data: Vec<u8>) -> LabelMap {
        LabelMap::new(h, w, data).unwrap()
    }

    #[test]
    fn clothing_pixel_is_one_and_hair_is_zero() {
        let v = RegionVocabulary::default();
        let m = clothing_region_mask(&labels(1, 2, vec![3, 1]), &v).unwrap();
        assert_eq!(m.data, vec![1.0, 0.0]);
    }

    #[test]
    fn background_only_gives_empty_mask() {
        let v = RegionVocabulary::default();
        let m = clothing_region_mask(&labels(3, 3, vec![0; 9]), &v).unwrap();
        assert_eq!(m.sum(), 0.0);
    }

    #[test]
    fn unknown_code_is_listed() {
        let v = RegionVocabulary::default();
        let err = clothing_region_mask(&labels(1, 3, vec![0, 42, 200]), &v).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("42") && msg.contains("200"), "{msg}");
    }

    #[test]
    fn masked_image_identity_and_full_cases() {
        let v = RegionVocabulary::default();
        let img = RgbImage::new(1, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let s = Sample::new(img.clone(), labels(1, 2, vec![1, 2]), 0, 0, 0).unwrap();
        assert_eq!(clothing_masked_image(&s, &v, 0.0).unwrap(), img);
        let s = Sample::new(img, labels(1, 2, vec![3, 4]), 0, 0, 0).unwrap();
        let out = clothing_masked_image(&s, &v, 0.0).unwrap();
        assert!(out.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn downsample_examples() {
        let ones = PixelMask {
            height: 4,
            width: 6,
            data: vec![1.0; 24],
        };
        for t in [(1, 1), (2, 3), (3, 5), (4, 6)] {
            let f = downsample_mask(&ones, t).unwrap();
            assert!(f.data.iter().all(|&x| (x - 1.0).abs() < 1e-12));
        }
        let half = PixelMask {
            height: 2,
            width: 2,
            data: vec![1.0, 1.0, 0.0, 0.0],
        };
        assert_eq!(downsample_mask(&half, (1, 1)).unwrap().data, vec![0.5]);
        assert!(matches!(
            downsample_mask(&half, (0, 1)),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn non_divisible_downsample_stays_in_range_and_zero_iff_empty() {
        let m = PixelMask {
            height: 5,
            width: 3,
            data: (0..15).map(|i| if i == 7 { 1.0 } else { 0.0 }).collect(),
        };
        let f = downsample_mask(&m, (2, 2)).unwrap();
        assert!(f.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert!(f.data.iter().any(|&x| x > 0.0));
        let z = PixelMask {
            height: 5,
            width: 3,
            data: vec![0.0; 15],
        };
        assert!(downsample_mask(&z, (2, 2))
            .unwrap()
            .data
            .iter()
            .all(|&x| x == 0.0));
    }
}
