use std::collections::HashMap;

use async_trait::async_trait;

use super::{imaging, ProviderError};
use crate::digest::sha256_hex;
use crate::domain::{MaskRle, SegmentLabel};

#[async_trait]
pub trait Segmenter: Send + Sync {
    async fn segment(&self, image: &[u8]) -> Result<Vec<SegmentLabel>, ProviderError>;
}

/// Segments `image` and checks the result: labels numbered 1..N in order,
/// every mask non-empty and sized to the image.
pub async fn segment_image(
    segmenter: &dyn Segmenter,
    image: &[u8],
) -> Result<Vec<SegmentLabel>, ProviderError> {
    let rgb = imaging::decode_rgb(image)?;
    let labels = segmenter.segment(image).await?;
    for (i, l) in labels.iter().enumerate() {
        if l.label_id as usize != i + 1 {
            return Err(ProviderError::Transport(format!(
                "segmenter returned label id {} at position {}",
                l.label_id,
                i + 1
            )));
        }
        if l.mask.w != rgb.width() || l.mask.h != rgb.height() {
            return Err(ProviderError::Transport(format!(
                "mask {} is {}x{} for a {}x{} image",
                l.label_id,
                l.mask.w,
                l.mask.h,
                rgb.width(),
                rgb.height()
            )));
        }
        l.mask
            .validate()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        if l.mask.area() == 0 {
            return Err(ProviderError::Transport(format!("mask {} is empty", l.label_id)));
        }
    }
    Ok(labels)
}

/// Offline segmenter: quantizes each channel to a few levels and treats
/// the largest color bins as regions, numbered by first appearance in
/// row-major order.
#[derive(Debug, Clone)]
pub struct ColorSegmenter {
    pub levels: u8,
    pub max_labels: usize,
}

impl Default for ColorSegmenter {
    fn default() -> Self {
        Self {
            levels: 4,
            max_labels: 16,
        }
    }
}

impl ColorSegmenter {
    pub fn segment_rgb(&self, img: &image::RgbImage) -> Vec<SegmentLabel> {
        let levels = self.levels.max(1) as u32;
        let (w, h) = img.dimensions();
        let bin_of = |p: &image::Rgb<u8>| -> u32 {
            let q = |c: u8| c as u32 * levels / 256;
            (q(p[0]) * levels + q(p[1])) * levels + q(p[2])
        };
        let bins: Vec<u32> = img.pixels().map(bin_of).collect();
        let mut area: HashMap<u32, (u64, usize)> = HashMap::new();
        for (i, b) in bins.iter().enumerate() {
            area.entry(*b).or_insert((0, i)).0 += 1;
        }
        let mut ranked: Vec<(u32, u64, usize)> = area.into_iter().map(|(b, (a, f))| (b, a, f)).collect();
        ranked.sort_by(|x, y| y.1.cmp(&x.1).then(x.2.cmp(&y.2)));
        ranked.truncate(self.max_labels.max(1));
        ranked.sort_by_key(|r| r.2);

        let center = |q: u32| ((q * 256 + 128) / levels).min(255);
        ranked
            .iter()
            .enumerate()
            .map(|(i, &(bin, _, _))| {
                let (r, g, b) = (bin / (levels * levels), (bin / levels) % levels, bin % levels);
                let bits: Vec<bool> = bins.iter().map(|x| *x == bin).collect();
                SegmentLabel {
                    label_id: i as u32 + 1,
                    name: format!("region #{:02x}{:02x}{:02x}", center(r), center(g), center(b)),
                    mask: MaskRle::encode(w, h, &bits),
                }
            })
            .collect()
    }
}

#[async_trait]
impl Segmenter for ColorSegmenter {
    async fn segment(&self, image: &[u8]) -> Result<Vec<SegmentLabel>, ProviderError> {
        Ok(self.segment_rgb(&imaging::decode_rgb(image)?))
    }
}

/// Returns committed labels for known image digests, falling back to
/// [`ColorSegmenter`] for anything else.
#[derive(Debug, Clone, Default)]
pub struct FixtureSegmenter {
    fixtures: HashMap<String, Vec<SegmentLabel>>,
    fallback: ColorSegmenter,
}

impl FixtureSegmenter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, image_digest: impl Into<String>, labels: Vec<SegmentLabel>) -> Self {
        self.fixtures.insert(image_digest.into(), labels);
        self
    }

    pub fn insert(&mut self, image_digest: impl Into<String>, labels: Vec<SegmentLabel>) {
        self.fixtures.insert(image_digest.into(), labels);
    }
}

#[async_trait]
impl Segmenter for FixtureSegmenter {
    async fn segment(&self, image: &[u8]) -> Result<Vec<SegmentLabel>, ProviderError> {
        match self.fixtures.get(&sha256_hex(image)) {
            Some(labels) => Ok(labels.clone()),
            None => self.fallback.segment(image).await,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    #[tokio::test]
    async fn single_pixel_gives_single_label() {
        let png = imaging::encode_png(&RgbImage::from_pixel(1, 1, Rgb([200, 10, 10])));
        let labels = segment_image(&ColorSegmenter::default(), &png).await.unwrap();
        assert_eq!(labels.len(), 1);
        assert_eq!(labels[0].label_id, 1);
        assert_eq!(labels[0].mask.counts, vec![0, 1]);
    }

    #[tokio::test]
    async fn regions_numbered_by_first_appearance() {
        let img = RgbImage::from_fn(10, 10, |x, _| if x < 3 { Rgb([0, 0, 0]) } else { Rgb([255, 255, 255]) });
        let png = imaging::encode_png(&img);
        let labels = segment_image(&ColorSegmenter::default(), &png).await.unwrap();
        assert_eq!(labels.len(), 2);
        assert_eq!(labels[0].mask.area(), 30);
        assert_eq!(labels[1].mask.area(), 70);
        assert!(labels[0].name.contains("#202020"));
    }

    #[tokio::test]
    async fn corrupt_payload_rejected() {
        let err = segment_image(&ColorSegmenter::default(), b"\x89PNG broken").await.unwrap_err();
        assert_eq!(err.kind(), "unsupported_image");
    }

    #[tokio::test]
    async fn fixture_lookup_and_validation() {
        let png = imaging::encode_png(&RgbImage::from_pixel(4, 2, Rgb([1, 2, 3])));
        let good = vec![SegmentLabel {
            label_id: 1,
            name: "sink".into(),
            mask: MaskRle::rect(4, 2, 0, 0, 2, 2),
        }];
        let seg = FixtureSegmenter::new().with(sha256_hex(&png), good.clone());
        assert_eq!(segment_image(&seg, &png).await.unwrap(), good);

        let misnumbered = vec![SegmentLabel { label_id: 2, ..good[0].clone() }];
        let seg = FixtureSegmenter::new().with(sha256_hex(&png), misnumbered);
        assert!(segment_image(&seg, &png).await.is_err());

        let wrong_size = vec![SegmentLabel {
            mask: MaskRle::rect(3, 2, 0, 0, 1, 1),
            ..good[0].clone()
        }];
        let seg = FixtureSegmenter::new().with(sha256_hex(&png), wrong_size);
        assert!(segment_image(&seg, &png).await.is_err());
    }
}
