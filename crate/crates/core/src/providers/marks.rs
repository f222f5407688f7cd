//! Set-of-mark rendering: tints each mask and stamps its numeric label at
//! the centroid of the mask's largest 4-connected component.

use std::collections::VecDeque;

use image::{Rgb, RgbImage};

use super::{imaging, ProviderError};
use crate::domain::SegmentLabel;

/// Tint weight in percent.
pub const TINT_PERCENT: u32 = 35;

pub const PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [0, 128, 128],
];

/// 3×5 digit glyphs, one row per entry, most significant bit leftmost.
pub const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

pub fn palette_color(label_id: u32) -> [u8; 3] {
    PALETTE[(label_id.saturating_sub(1) as usize) % PALETTE.len()]
}

pub fn blend(base: u8, color: u8) -> u8 {
    ((base as u32 * (100 - TINT_PERCENT) + color as u32 * TINT_PERCENT + 50) / 100) as u8
}

/// Glyph scale for an image: one font pixel per 64 image pixels of the short side.
pub fn glyph_scale(width: u32, height: u32) -> u32 {
    (width.min(height) / 64).max(1)
}

/// Centroid (rounded) of the largest 4-connected component; ties go to the
/// component reached first in row-major order.
pub fn anchor_point(bits: &[bool], width: u32, height: u32) -> Option<(u32, u32)> {
    let (w, h) = (width as usize, height as usize);
    let mut seen = vec![false; bits.len()];
    let mut best: Option<(usize, u64, u64)> = None;
    let mut queue = VecDeque::new();
    for start in 0..bits.len() {
        if !bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let (mut n, mut sx, mut sy) = (0usize, 0u64, 0u64);
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            n += 1;
            sx += x as u64;
            sy += y as u64;
            let mut visit = |j: usize| {
                if bits[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if best.is_none_or(|b| n > b.0) {
            best = Some((n, sx, sy));
        }
    }
    best.map(|(n, sx, sy)| {
        let n = n as u64;
        (((sx * 2 + n) / (2 * n)) as u32, ((sy * 2 + n) / (2 * n)) as u32)
    })
}

/// Top-left corner and size of the tag box for `text` centred at `anchor`,
/// shifted to stay inside the frame where it fits.
pub fn tag_box(text_len: usize, anchor: (u32, u32), width: u32, height: u32) -> (i64, i64, u32, u32) {
    let s = glyph_scale(width, height);
    let bw = (text_len as u32 * 4 - 1) * s + 2 * s;
    let bh = 7 * s;
    let place = |c: u32, size: u32, limit: u32| -> i64 {
        let start = c as i64 - (size / 2) as i64;
        if size >= limit {
            0
        } else {
            start.clamp(0, (limit - size) as i64)
        }
    };
    (place(anchor.0, bw, width), place(anchor.1, bh, height), bw, bh)
}

fn draw_tag(img: &mut RgbImage, text: &str, anchor: (u32, u32)) {
    let (w, h) = img.dimensions();
    let s = glyph_scale(w, h) as i64;
    let (x0, y0, bw, bh) = tag_box(text.len(), anchor, w, h);
    let mut put = |x: i64, y: i64, c: [u8; 3]| {
        if x >= 0 && y >= 0 && (x as u32) < w && (y as u32) < h {
            img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    };
    for y in y0..y0 + bh as i64 {
        for x in x0..x0 + bw as i64 {
            put(x, y, [255, 255, 255]);
        }
    }
    for (k, ch) in text.bytes().enumerate() {
        let glyph = DIGITS[(ch - b'0') as usize];
        let gx = x0 + s + k as i64 * 4 * s;
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..3 {
                if bits & (0b100 >> col) != 0 {
                    for dy in 0..s {
                        for dx in 0..s {
                            put(gx + col * s + dx, y0 + s + row as i64 * s + dy, [0, 0, 0]);
                        }
                    }
                }
            }
        }
    }
}

/// Renders the marked image. Labels must match the image dimensions.
pub fn render_marks(img: &RgbImage, labels: &[SegmentLabel]) -> RgbImage {
    let mut out = img.clone();
    let (w, h) = img.dimensions();
    let mut anchors = Vec::with_capacity(labels.len());
    for l in labels {
        assert!(
            l.mask.w == w && l.mask.h == h,
            "mask {} does not match image dimensions",
            l.label_id
        );
        let color = palette_color(l.label_id);
        let bits = l.mask.decode();
        for i in l.mask.on_pixels() {
            let p = out.get_pixel_mut(i as u32 % w, i as u32 / w);
            for c in 0..3 {
                p[c] = blend(p[c], color[c]);
            }
        }
        anchors.push(anchor_point(&bits, w, h));
    }
    for (l, anchor) in labels.iter().zip(anchors) {
        if let Some(a) = anchor {
            draw_tag(&mut out, &l.label_id.to_string(), a);
        }
    }
    out
}

/// Decodes, marks and re-encodes as PNG.
pub fn render_marks_png(image: &[u8], labels: &[SegmentLabel]) -> Result<Vec<u8>, ProviderError> {
    let img = imaging::decode_rgb(image)?;
    for l in labels {
        if l.mask.w != img.width() || l.mask.h != img.height() {
            return Err(ProviderError::InvalidInput(format!(
                "mask {} does not match image dimensions",
                l.label_id
            )));
        }
    }
    Ok(imaging::encode_png(&render_marks(&img, labels)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::MaskRle;

    const REFERENCE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/marks/two_masks.png");

    /// Straightforward per-pixel renderer kept as the reference.
    fn reference_render(img: &RgbImage, labels: &[SegmentLabel]) -> RgbImage {
        let (w, h) = img.dimensions();
        let masks: Vec<Vec<bool>> = labels.iter().map(|l| l.mask.decode()).collect();
        // Component labelling by repeated min-propagation.
        let centroid = |bits: &Vec<bool>| -> Option<(u32, u32)> {
            let mut comp: Vec<usize> = (0..bits.len()).collect();
            loop {
                let mut changed = false;
                for y in 0..h as usize {
                    for x in 0..w as usize {
                        let i = y * w as usize + x;
                        if !bits[i] {
                            continue;
                        }
                        let mut m = comp[i];
                        let nbrs = [
                            (x > 0).then(|| i - 1),
                            (x + 1 < w as usize).then(|| i + 1),
                            (y > 0).then(|| i - w as usize),
                            (y + 1 < h as usize).then(|| i + w as usize),
                        ];
                        for j in nbrs.into_iter().flatten() {
                            if bits[j] {
                                m = m.min(comp[j]);
                            }
                        }
                        if m != comp[i] {
                            comp[i] = m;
                            changed = true;
                        }
                    }
                }
                if !changed {
                    break;
                }
            }
            let mut roots: Vec<usize> = (0..bits.len()).filter(|&i| bits[i] && comp[i] == i).collect();
            roots.sort();
            let mut best: Option<(usize, f64, f64)> = None;
            for r in roots {
                let members: Vec<usize> = (0..bits.len()).filter(|&i| bits[i] && comp[i] == r).collect();
                if best.map_or(true, |b| members.len() > b.0) {
                    let n = members.len() as f64;
                    let mx = members.iter().map(|&i| (i % w as usize) as f64).sum::<f64>() / n;
                    let my = members.iter().map(|&i| (i / w as usize) as f64).sum::<f64>() / n;
                    best = Some((members.len(), mx, my));
                }
            }
            best.map(|(_, mx, my)| ((mx + 0.5).floor() as u32, (my + 0.5).floor() as u32))
        };
        let s = (w.min(h) / 64).max(1) as i64;
        let tags: Vec<(String, i64, i64, i64, i64)> = labels
            .iter()
            .zip(&masks)
            .filter_map(|(l, m)| {
                let (cx, cy) = centroid(m)?;
                let text = l.label_id.to_string();
                let bw = (text.len() as i64 * 4 - 1) * s + 2 * s;
                let bh = 7 * s;
                let fit = |c: u32, size: i64, lim: u32| {
                    if size >= lim as i64 {
                        0
                    } else {
                        (c as i64 - size / 2).max(0).min(lim as i64 - size)
                    }
                };
                Some((text, fit(cx, bw, w), fit(cy, bh, h), bw, bh))
            })
            .collect();
        RgbImage::from_fn(w, h, |x, y| {
            let i = (y * w + x) as usize;
            let mut px = img.get_pixel(x, y).0;
            for (l, m) in labels.iter().zip(&masks) {
                if m[i] {
                    let c = PALETTE[(l.label_id as usize - 1) % PALETTE.len()];
                    for k in 0..3 {
                        px[k] = ((px[k] as u32 * 65 + c[k] as u32 * 35) as f64 / 100.0 + 0.5).floor() as u8;
                    }
                }
            }
            for (text, x0, y0, bw, bh) in &tags {
                let (xi, yi) = (x as i64, y as i64);
                if xi < *x0 || yi < *y0 || xi >= x0 + bw || yi >= y0 + bh {
                    continue;
                }
                px = [255, 255, 255];
                let (gx, gy) = ((xi - x0 - s) / s, (yi - y0 - s) / s);
                if xi - x0 < s || yi - y0 < s || gy >= 5 {
                    continue;
                }
                let (digit, col) = ((gx / 4) as usize, gx % 4);
                if col < 3 && digit < text.len() {
                    let g = DIGITS[(text.as_bytes()[digit] - b'0') as usize];
                    if g[gy as usize] & (0b100 >> col) != 0 {
                        px = [0, 0, 0];
                    }
                }
            }
            Rgb(px)
        })
    }

    fn base(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 3) as u8, (y * 5) as u8, 120]))
    }

    fn two_masks() -> Vec<SegmentLabel> {
        vec![
            SegmentLabel {
                label_id: 1,
                name: "sink".into(),
                mask: MaskRle::rect(80, 48, 4, 6, 30, 40),
            },
            SegmentLabel {
                label_id: 12,
                name: "toilet".into(),
                // Two pieces; the larger one carries the tag.
                mask: MaskRle::from_fn(80, 48, |x, y| {
                    (x >= 44 && x < 76 && y >= 10 && y < 44) || (x >= 36 && x < 40 && y < 4)
                }),
            },
        ]
    }

    #[test]
    fn zero_labels_is_identity() {
        let img = base(20, 10);
        assert_eq!(render_marks(&img, &[]), img);
    }

    #[test]
    fn full_frame_tag_at_center() {
        let img = base(9, 9);
        let labels = vec![SegmentLabel {
            label_id: 1,
            name: "floor".into(),
            mask: MaskRle::rect(9, 9, 0, 0, 9, 9),
        }];
        assert_eq!(anchor_point(&labels[0].mask.decode(), 9, 9), Some((4, 4)));
        let out = render_marks(&img, &labels);
        // Box is 5×7 centred on (4,4): x 2..7, y 1..8; glyph "1" middle column at x=4.
        assert_eq!(out.get_pixel(2, 1).0, [255, 255, 255]);
        assert_eq!(out.get_pixel(4, 2).0, [0, 0, 0]);
        assert_eq!(out.get_pixel(3, 2).0, [255, 255, 255]);
        let tinted = out.get_pixel(0, 0).0;
        assert_eq!(tinted, [blend(0, 230), blend(0, 25), blend(120, 75)]);
        assert_eq!(out, reference_render(&img, &labels));
    }

    #[test]
    fn matches_reference_renderer() {
        let img = base(80, 48);
        let labels = two_masks();
        assert_eq!(render_marks(&img, &labels), reference_render(&img, &labels));
        let bits = labels[1].mask.decode();
        assert_eq!(anchor_point(&bits, 80, 48), Some((60, 27)));
    }

    #[test]
    fn matches_frozen_reference_png() {
        let img = base(80, 48);
        let labels = two_masks();
        if std::env::var_os("SCOUT_WRITE_FIXTURES").is_some() {
            let png = imaging::encode_png(&reference_render(&img, &labels));
            std::fs::create_dir_all(std::path::Path::new(REFERENCE).parent().unwrap()).unwrap();
            std::fs::write(REFERENCE, png).unwrap();
        }
        let frozen = imaging::decode_rgb(&std::fs::read(REFERENCE).unwrap()).unwrap();
        assert_eq!(render_marks(&img, &labels), frozen);
    }

    #[test]
    fn png_wrapper_checks_dimensions() {
        let png = imaging::encode_png(&base(10, 10));
        let bad = vec![SegmentLabel {
            label_id: 1,
            name: "x".into(),
            mask: MaskRle::rect(5, 5, 0, 0, 1, 1),
        }];
        assert!(render_marks_png(&png, &bad).is_err());
        assert_eq!(imaging::decode_rgb(&render_marks_png(&png, &[]).unwrap()).unwrap(), base(10, 10));
    }
}
